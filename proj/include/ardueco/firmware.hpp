#pragma once

// The device sketch as a deterministic state machine: boot + params.json
// validation, 5 s sampling into the dual SD logs, LED outputs, and the
// button-triggered scan/connect/upload sequence. All time is injected; a
// device instance is single-threaded and owned by its caller.

#include <algorithm>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "ardueco/core.hpp"
#include "ardueco/mqtt.hpp"
#include "ardueco/nmea.hpp"
#include "ardueco/reading.hpp"
#include "ardueco/sensor.hpp"

namespace ardueco::firmware {

struct DeviceConfig {
    std::string ssid;
    std::string password;
    std::string endpoint_host;
    int endpoint_port = 0;
    std::string topic_session;
    std::string topic_data;
    std::string device_id;
    int sample_period_s = 5;
    int reboot_delay_s = 10;
    std::optional<std::string> auth_token;  // optional stand-in for the TLS certs
    std::vector<sensor::ChannelSpec> channels;  // default: one CO channel
};

struct FieldError {
    std::string field;
    std::string message;
};

struct ConfigParse {
    DeviceConfig config;
    std::vector<FieldError> errors;
    bool ok() const { return errors.empty(); }
};

namespace detail {

inline void req_string(const nlohmann::json& j, const char* key, std::string& dst,
                       std::vector<FieldError>& errs) {
    if (!j.contains(key)) {
        errs.push_back({key, "missing"});
    } else if (!j.at(key).is_string()) {
        errs.push_back({key, "expected a string"});
    } else if (dst = j.at(key).get<std::string>(); dst.empty()) {
        errs.push_back({key, "must be non-empty"});
    }
}

inline void opt_posint(const nlohmann::json& j, const char* key, int& dst,
                       std::vector<FieldError>& errs) {
    if (!j.contains(key)) return;
    if (!j.at(key).is_number_integer()) {
        errs.push_back({key, "expected a positive integer"});
    } else if (dst = j.at(key).get<int>(); dst <= 0) {
        errs.push_back({key, "must be > 0"});
    }
}

inline void parse_curve(const nlohmann::json& j, const std::string& prefix, sensor::SensorCurve& c,
                        std::vector<FieldError>& errs) {
    if (!j.is_object()) {
        errs.push_back({prefix, "expected an object"});
        return;
    }
    auto num = [&](const char* key, double& dst) {
        if (!j.contains(key)) return;
        if (!j.at(key).is_number())
            errs.push_back({prefix + "." + key, "expected a number"});
        else
            dst = j.at(key).get<double>();
    };
    num("a", c.a);
    num("b", c.b);
    num("r0", c.r0);
    num("rl", c.rl);
    num("vcc", c.vcc);
    if (j.contains("adc_max")) {
        if (!j.at("adc_max").is_number_integer())
            errs.push_back({prefix + ".adc_max", "expected an integer"});
        else
            c.adc_max = j.at("adc_max").get<int>();
    }
    if (!sensor::curve_valid(c))
        errs.push_back({prefix, "requires a>0, b<0, r0>0, rl>0, vcc>0, adc_max>=1"});
}

}  // namespace detail

// Unknown keys are ignored; every missing/invalid field is reported by name.
inline ConfigParse parse_device_config(std::string_view text) {
    ConfigParse out;
    const auto j = nlohmann::json::parse(text, nullptr, false);
    if (j.is_discarded() || !j.is_object()) {
        out.errors.push_back({"params.json", "not a JSON object"});
        return out;
    }
    auto& c = out.config;
    auto& errs = out.errors;
    detail::req_string(j, "ssid", c.ssid, errs);
    detail::req_string(j, "endpoint_host", c.endpoint_host, errs);
    detail::req_string(j, "topic_session", c.topic_session, errs);
    detail::req_string(j, "topic_data", c.topic_data, errs);
    detail::req_string(j, "device_id", c.device_id, errs);
    if (j.contains("password")) {
        if (!j.at("password").is_string())
            errs.push_back({"password", "expected a string"});
        else
            c.password = j.at("password").get<std::string>();
    }
    if (j.contains("auth_token")) {
        if (!j.at("auth_token").is_string())
            errs.push_back({"auth_token", "expected a string"});
        else
            c.auth_token = j.at("auth_token").get<std::string>();
    }
    if (!j.contains("endpoint_port")) {
        errs.push_back({"endpoint_port", "missing"});
    } else if (!j.at("endpoint_port").is_number_integer()) {
        errs.push_back({"endpoint_port", "expected an integer"});
    } else if (c.endpoint_port = j.at("endpoint_port").get<int>();
               c.endpoint_port < 1 || c.endpoint_port > 65535) {
        errs.push_back({"endpoint_port", "must be in [1, 65535]"});
    }
    detail::opt_posint(j, "sample_period_s", c.sample_period_s, errs);
    detail::opt_posint(j, "reboot_delay_s", c.reboot_delay_s, errs);

    sensor::SensorCurve base_curve;
    if (j.contains("sensor")) detail::parse_curve(j.at("sensor"), "sensor", base_curve, errs);

    if (j.contains("channels")) {
        if (!j.at("channels").is_array() || j.at("channels").empty()) {
            errs.push_back({"channels", "expected a non-empty array"});
        } else {
            int idx = 0;
            for (const auto& ch : j.at("channels")) {
                const std::string prefix = "channels[" + std::to_string(idx++) + "]";
                sensor::ChannelSpec spec;
                spec.curve = base_curve;
                if (!ch.is_object()) {
                    errs.push_back({prefix, "expected an object"});
                    continue;
                }
                if (!ch.contains("channel_id") || !ch.at("channel_id").is_number_integer())
                    errs.push_back({prefix + ".channel_id", "expected an integer"});
                else
                    spec.channel_id = ch.at("channel_id").get<int>();
                if (ch.contains("label") && ch.at("label").is_string())
                    spec.label = ch.at("label").get<std::string>();
                if (ch.contains("sensor")) detail::parse_curve(ch.at("sensor"), prefix + ".sensor", spec.curve, errs);
                for (const auto& existing : c.channels)
                    if (existing.channel_id == spec.channel_id)
                        errs.push_back({prefix + ".channel_id", "duplicate channel id"});
                c.channels.push_back(std::move(spec));
            }
        }
    }
    if (c.channels.empty()) {
        sensor::ChannelSpec co;
        co.curve = base_curve;
        c.channels.push_back(std::move(co));
    }
    return out;
}

// The SD card as the simulator sees it: params document plus the two
// append-only line files. perm_log is never truncated; cache_log is
// recreated empty only after a fully acknowledged upload.
struct VirtualSd {
    std::optional<std::string> params_text;
    bool cache_exists = false;
    bool perm_exists = false;
    std::vector<std::string> cache_log;
    std::vector<std::string> perm_log;
};

enum class Phase { BootInit, ConfigError, Sampling, Scanning, Connecting, Uploading, UploadError };
enum class LedSetup { Ok, Error };
enum class LedNet { Off, InRange, Transmitting };
struct LedState {
    LedSetup setup;
    LedNet net;
    bool operator==(const LedState&) const = default;
};

enum class UploadOutcome { None, InProgress, Succeeded, Failed };

struct DeviceOptions {
    std::uint8_t qos = 1;
    mqtt::RetryPolicy retry;
    TimeMs connect_timeout_ms = 3000;
    double utc_epoch_s = 0.0;  // wall-clock at simulated time zero
};

class Device {
public:
    Device(VirtualSd sd, Rng rng, DeviceOptions opts = {})
        : sd_(std::move(sd)), rng_(rng), opts_(opts) {}

    // Boot sequence: validate params.json, mint the ride id, ensure both log
    // files exist. Invalid or missing params -> ConfigError and a reboot
    // scheduled reboot_delay_s later (10 s when no config is readable).
    void boot(TimeMs now) {
        finish_upload_accounting();
        phase_ = Phase::BootInit;
        upload_.reset();
        session_.reset();
        outcome_ = UploadOutcome::None;
        if (!sd_.params_text) {
            enter_config_error(now, DeviceConfig{}.reboot_delay_s);
            return;
        }
        auto parsed = parse_device_config(*sd_.params_text);
        if (!parsed.ok()) {
            enter_config_error(now, parsed.config.reboot_delay_s > 0 ? parsed.config.reboot_delay_s
                                                                     : DeviceConfig{}.reboot_delay_s);
            return;
        }
        config_ = std::move(parsed.config);
        ride_id_ = hex_id8(rng_);
        sd_.cache_exists = true;  // ensured to exist, never truncated here
        sd_.perm_exists = true;
        boot_at_ = now;
        next_sample_at_ = now;
        next_seq_ = 0;
        phase_ = Phase::Sampling;
    }

    Phase phase() const { return phase_; }
    const std::string& ride_id() const { return ride_id_; }
    const DeviceConfig& config() const { return config_; }
    VirtualSd& sd() { return sd_; }
    const VirtualSd& sd() const { return sd_; }
    TimeMs reboot_at() const { return reboot_at_; }
    UploadOutcome upload_outcome() const { return outcome_; }

    LedState led_state() const {
        switch (phase_) {
            case Phase::ConfigError: return {LedSetup::Error, LedNet::Off};
            case Phase::Connecting: return {LedSetup::Ok, LedNet::InRange};
            case Phase::Uploading: return {LedSetup::Ok, LedNet::Transmitting};
            default: return {LedSetup::Ok, LedNet::Off};
        }
    }

    // One pass of the firmware loop. In Sampling, takes a reading when the
    // 5 s cadence is due (GPS fix parsed from the NMEA line, ppm from the
    // ADC counts) and appends it to both logs. In ConfigError, re-boots once
    // the scheduled reboot time arrives.
    std::optional<Reading> tick(TimeMs now, const std::optional<std::string>& gps_line,
                                std::span<const int> adc_by_channel) {
        if (phase_ == Phase::ConfigError) {
            if (now >= reboot_at_) boot(now);
            return std::nullopt;
        }
        if (phase_ != Phase::Sampling || now < next_sample_at_) return std::nullopt;

        Reading r;
        r.ride_id = ride_id_;
        r.seq = next_seq_++;
        // schedule-derived timestamps: exact cadence, no drift
        r.t_s = static_cast<std::int64_t>(r.seq) * config_.sample_period_s;
        r.utc_s = opts_.utc_epoch_s + static_cast<double>(boot_at_) / 1000.0 + static_cast<double>(r.t_s);
        if (gps_line) {
            if (auto sentence = nmea::parse_sentence(*gps_line); sentence.ok()) {
                if (auto fix = nmea::extract_fix(sentence.value()); fix.ok() && fix.value()) {
                    r.fix_valid = fix.value()->valid;
                    if (r.fix_valid) {
                        r.lat = fix.value()->latitude;
                        r.lon = fix.value()->longitude;
                    }
                }
            }
        }
        const std::size_t n = std::min(adc_by_channel.size(), config_.channels.size());
        for (std::size_t i = 0; i < n; ++i) {
            const auto& spec = config_.channels[i];
            ChannelSample s;
            s.id = spec.channel_id;
            s.adc = std::clamp(adc_by_channel[i], 0, spec.curve.adc_max);
            const auto ppm = sensor::adc_to_ppm(s.adc, spec.curve);
            s.ppm = ppm.ok() ? ppm.value() : 0.0;  // saturated ends carry no finite ppm
            r.channels.push_back(s);
        }
        const std::string line = reading_to_line(r);
        sd_.cache_log.push_back(line);
        sd_.perm_log.push_back(line);
        ++readings_generated_;
        next_sample_at_ += static_cast<TimeMs>(config_.sample_period_s) * 1000;
        return r;
    }

    // Button press: scan the visible networks for the configured SSID.
    bool press_button(const std::vector<std::string>& visible_ssids, TimeMs now) {
        if (phase_ != Phase::Sampling) return false;
        for (const auto& s : visible_ssids) {
            if (s == config_.ssid) {
                phase_ = Phase::Connecting;
                outcome_ = UploadOutcome::InProgress;
                connect_deadline_ = now + opts_.connect_timeout_ms;
                return true;
            }
        }
        return false;
    }

    // UploadError -> Sampling, cache untouched; the caller may retry.
    void clear_upload_error() {
        if (phase_ == Phase::UploadError) phase_ = Phase::Sampling;
    }

    // ---- transport seam (in-memory channel in simulation, TCP in service mode) ----

    void set_transport(std::function<void(const mqtt::Bytes&)> send) { send_ = std::move(send); }

    void transport_connected(TimeMs now) {
        if (phase_ != Phase::Connecting) return;
        session_.emplace(config_.device_id, opts_.retry);
        connect_deadline_ = now + opts_.connect_timeout_ms;
        send(session_->connect_packet(config_.auth_token));
    }

    void transport_closed(TimeMs) {
        if (phase_ == Phase::Connecting || phase_ == Phase::Uploading) abort_upload();
    }

    void on_bytes(std::span<const std::uint8_t> data, TimeMs now) {
        if (!session_) return;
        rx_.insert(rx_.end(), data.begin(), data.end());
        std::size_t consumed = 0;
        while (true) {
            const auto r = mqtt::decode(std::span<const std::uint8_t>(rx_).subspan(consumed));
            if (r.status != mqtt::DecodeResult::Status::Ok) break;
            consumed += r.consumed;
            handle_packet(r.packet, now);
            if (!session_) {  // upload finished or aborted
                rx_.clear();
                return;
            }
        }
        rx_.erase(rx_.begin(), rx_.begin() + static_cast<std::ptrdiff_t>(consumed));
    }

    // Timers: connect timeout and QoS-1 retransmission with backoff.
    void pump(TimeMs now) {
        if (phase_ == Phase::Connecting && now >= connect_deadline_) {
            abort_upload();
            return;
        }
        if (phase_ != Phase::Uploading || !session_ || opts_.qos == 0) return;
        auto out = session_->tick(now);
        if (!out.failed.empty()) {
            abort_upload();
            return;
        }
        for (auto& frame : out.retransmissions) send(frame);
        maybe_complete(now);
    }

    // ---- counters for reports ----
    std::uint64_t readings_generated() const { return readings_generated_; }
    std::uint64_t uploads_attempted() const { return uploads_attempted_; }
    std::uint64_t uploads_succeeded() const { return uploads_succeeded_; }
    std::uint64_t lines_uploaded() const { return lines_uploaded_; }
    std::uint64_t retransmissions() const {
        return retransmissions_ + (session_ ? session_->retransmissions() : 0);
    }

private:
    // Cache lines grouped per ride (first-seen order preserved): one session
    // header per ride, each followed by that ride's lines.
    struct Batch {
        std::string ride;
        std::vector<std::string> lines;
        bool header_sent = false;
    };
    struct UploadJob {
        std::vector<Batch> batches;
        std::size_t batch_idx = 0;
        std::size_t line_idx = 0;
        bool done_publishing() const { return batch_idx >= batches.size(); }
    };

    void enter_config_error(TimeMs now, int reboot_delay_s) {
        phase_ = Phase::ConfigError;
        reboot_at_ = now + static_cast<TimeMs>(reboot_delay_s) * 1000;
    }

    void send(const mqtt::Bytes& frame) {
        if (send_) send_(frame);
    }

    void handle_packet(const mqtt::Packet& p, TimeMs now) {
        if (const auto* ack = std::get_if<mqtt::Connack>(&p)) {
            if (phase_ != Phase::Connecting) return;
            session_->on_packet(p);
            if (!ack->accepted) {
                abort_upload();
                return;
            }
            start_upload(now);
            return;
        }
        if (std::holds_alternative<mqtt::Puback>(p)) {
            session_->on_packet(p);
            if (phase_ == Phase::Uploading) {
                pump_publishes(now);
                maybe_complete(now);
            }
        }
    }

    void start_upload(TimeMs now) {
        phase_ = Phase::Uploading;
        ++uploads_attempted_;
        upload_.emplace();
        std::map<std::string, std::size_t> index;
        for (const auto& line : sd_.cache_log) {
            const auto parsed = reading_from_line(line);
            const std::string ride = parsed.ok() ? parsed.value().ride_id : ride_id_;
            auto it = index.find(ride);
            if (it == index.end()) {
                index.emplace(ride, upload_->batches.size());
                upload_->batches.push_back(Batch{ride, {}, false});
                it = index.find(ride);
            }
            upload_->batches[it->second].lines.push_back(line);
        }
        if (upload_->batches.empty()) upload_->batches.push_back(Batch{ride_id_, {}, false});
        pump_publishes(now);
        maybe_complete(now);
    }

    // Header first, then the batch's lines in order; stops on backpressure
    // and resumes as acks free the window.
    void pump_publishes(TimeMs now) {
        if (!upload_ || !session_ || !session_->connected()) return;
        while (!upload_->done_publishing()) {
            auto& b = upload_->batches[upload_->batch_idx];
            const bool is_header = !b.header_sent;
            mqtt::Bytes payload;
            std::string_view topic;
            if (is_header) {
                nlohmann::json hdr;
                hdr["ride"] = b.ride;
                hdr["device"] = config_.device_id;
                hdr["count"] = b.lines.size();
                const std::string text = hdr.dump();
                payload.assign(text.begin(), text.end());
                topic = config_.topic_session;
            } else {
                const auto& line = b.lines[upload_->line_idx];
                payload.assign(line.begin(), line.end());
                topic = config_.topic_data;
            }
            auto wire = session_->publish(topic, payload, opts_.qos, now);
            if (!wire.ok()) return;  // backpressure: resume on the next ack
            send(wire.value());
            if (is_header)
                b.header_sent = true;
            else
                ++upload_->line_idx;
            if (b.header_sent && upload_->line_idx >= b.lines.size()) {
                lines_uploaded_ += b.lines.size();
                upload_->line_idx = 0;
                ++upload_->batch_idx;
            }
        }
    }

    // Complete only when everything is published and, at QoS 1, every
    // publish acknowledged; then and only then the cache is recreated.
    void maybe_complete(TimeMs now) {
        (void)now;
        if (phase_ != Phase::Uploading || !upload_ || !upload_->done_publishing()) return;
        if (opts_.qos == 1 && session_->inflight_count() > 0) return;
        send(session_->disconnect_packet());
        finish_upload_accounting();
        session_.reset();
        upload_.reset();
        sd_.cache_log.clear();  // deleted and created again
        sd_.cache_exists = true;
        ++uploads_succeeded_;
        outcome_ = UploadOutcome::Succeeded;
        phase_ = Phase::Sampling;
    }

    void abort_upload() {
        finish_upload_accounting();
        session_.reset();
        upload_.reset();
        outcome_ = UploadOutcome::Failed;
        phase_ = Phase::UploadError;  // cache intact: nothing is lost
    }

    void finish_upload_accounting() {
        if (session_) retransmissions_ += session_->retransmissions();
    }

    VirtualSd sd_;
    Rng rng_;
    DeviceOptions opts_;
    DeviceConfig config_;
    Phase phase_ = Phase::BootInit;
    std::string ride_id_;
    TimeMs boot_at_ = 0;
    TimeMs next_sample_at_ = 0;
    TimeMs reboot_at_ = 0;
    TimeMs connect_deadline_ = 0;
    std::uint64_t next_seq_ = 0;
    UploadOutcome outcome_ = UploadOutcome::None;

    std::function<void(const mqtt::Bytes&)> send_;
    std::optional<mqtt::ClientSession> session_;
    std::optional<UploadJob> upload_;
    mqtt::Bytes rx_;

    std::uint64_t readings_generated_ = 0;
    std::uint64_t uploads_attempted_ = 0;
    std::uint64_t uploads_succeeded_ = 0;
    std::uint64_t lines_uploaded_ = 0;
    std::uint64_t retransmissions_ = 0;
};

}  // namespace ardueco::firmware
