#pragma once

// Deterministic discrete-event simulator for the whole pipeline: bike
// mobility between Wi-Fi dock zones, a synthetic CO field, virtual devices
// running the firmware, a lossy ordered channel to an embedded broker +
// ingest service, and energy accounting. Identical config (incl. seed)
// produces byte-identical reports.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <map>
#include <optional>
#include <queue>
#include <string>
#include <vector>

#include <json.hpp>

#include "ardueco/broker.hpp"
#include "ardueco/core.hpp"
#include "ardueco/firmware.hpp"
#include "ardueco/ingest.hpp"
#include "ardueco/nmea.hpp"
#include "ardueco/sensor.hpp"
#include "ardueco/store.hpp"

namespace ardueco::sim {

// ---- geometry ----

struct LatLon {
    double lat = 0.0;
    double lon = 0.0;
};

inline constexpr double kEarthRadiusM = 6371000.0;
inline constexpr double kDegToRad = 3.141592653589793238462643 / 180.0;

// Equirectangular approximation; plenty at city scale (< 50 km).
inline double equirect_distance_m(LatLon a, LatLon b) {
    const double dlat = (b.lat - a.lat) * kDegToRad;
    const double dlon = (b.lon - a.lon) * kDegToRad * std::cos((a.lat + b.lat) * 0.5 * kDegToRad);
    return kEarthRadiusM * std::sqrt(dlat * dlat + dlon * dlon);
}

// ---- pollution field ----

struct TimeProfile {
    double period_s = 3600.0;
    double phase_rad = 0.0;
};

struct GaussianSource {
    LatLon center;
    double amplitude_ppm = 0.0;
    double sigma_m = 1.0;
    std::optional<TimeProfile> profile;  // sinusoidal amplitude modulation in [0,1]
};

struct PollutionField {
    double background_ppm = 0.0;
    std::vector<GaussianSource> sources;
};

inline double field_sample(const PollutionField& field, double lat, double lon, double t_s) {
    double ppm = field.background_ppm;
    for (const auto& s : field.sources) {
        const double d = equirect_distance_m({lat, lon}, s.center);
        double amplitude = s.amplitude_ppm;
        if (s.profile)
            amplitude *= 0.5 * (1.0 + std::sin(2.0 * 3.141592653589793238462643 * t_s / s.profile->period_s +
                                               s.profile->phase_rad));
        ppm += amplitude * std::exp(-(d * d) / (2.0 * s.sigma_m * s.sigma_m));
    }
    return ppm;
}

// ---- zones, mobility ----

struct WifiZone {
    std::string zone_id;
    std::string ssid;
    LatLon center;
    double radius_m = 50.0;
};

struct MobilityTrace {
    int device_index = 0;
    double start_s = 0.0;
    std::vector<LatLon> waypoints;  // >= 2
    double speed_mps = 4.0;
    std::string start_zone;
    std::string end_zone;

    double length_m() const {
        double total = 0.0;
        for (std::size_t i = 1; i < waypoints.size(); ++i)
            total += equirect_distance_m(waypoints[i - 1], waypoints[i]);
        return total;
    }
    double duration_s() const { return length_m() / speed_mps; }

    // Piecewise-linear position along the path at speed.
    LatLon position_at(double t_since_start_s) const {
        double remaining = std::max(0.0, t_since_start_s) * speed_mps;
        for (std::size_t i = 1; i < waypoints.size(); ++i) {
            const double seg = equirect_distance_m(waypoints[i - 1], waypoints[i]);
            if (remaining <= seg && seg > 0.0) {
                const double f = remaining / seg;
                return {waypoints[i - 1].lat + f * (waypoints[i].lat - waypoints[i - 1].lat),
                        waypoints[i - 1].lon + f * (waypoints[i].lon - waypoints[i - 1].lon)};
            }
            remaining -= seg;
        }
        return waypoints.back();
    }
};

// ---- energy ----

struct EnergyProfile {
    double active_ma = 80.0;
    double sleep_ma = 1.0;
    double battery_mah = 3000.0;
    bool deep_sleep_enabled = true;
};

struct EnergyReport {
    double consumed_mah = 0.0;
    double remaining_mah = 0.0;
    double lifetime_h = 0.0;  // battery over the weighted average current
    bool depleted = false;
};

inline EnergyReport energy_account(const EnergyProfile& p, double active_s, double sleep_s) {
    EnergyReport r;
    r.consumed_mah = (p.active_ma * active_s + p.sleep_ma * sleep_s) / 3600.0;
    r.remaining_mah = std::max(0.0, p.battery_mah - r.consumed_mah);
    const double total = active_s + sleep_s;
    const double avg_ma = total > 0.0 ? (p.active_ma * active_s + p.sleep_ma * sleep_s) / total : p.active_ma;
    r.lifetime_h = p.battery_mah / avg_ma;
    r.depleted = r.consumed_mah > p.battery_mah;
    return r;
}

// ---- network model ----

struct LatencyBounds {
    int min_ms = 5;
    int max_ms = 50;
};

struct DeliveryDecision {
    bool delivered = false;
    TimeMs latency_ms = 0;
};

// Independent Bernoulli drop, uniform latency for survivors. Per-connection
// ordering is enforced by the scheduler on top of this.
inline DeliveryDecision network_deliver(double drop_probability, LatencyBounds bounds, Rng& rng) {
    if (rng.bernoulli(drop_probability)) return {false, 0};
    return {true, rng.uniform_int(bounds.min_ms, bounds.max_ms)};
}

// ---- scenario ----

struct TraceGen {
    double speed_mps = 4.0;
    int mid_waypoints = 2;
    double idle_gap_s = 120.0;      // dwell between rides
    double upload_slack_s = 120.0;  // post-ride time reserved for the upload
    double start_min_s = 5.0;
    double start_max_s = 60.0;
};

struct SimConfig {
    std::uint64_t seed = 42;
    int n_devices = 10;
    int duration_s = 3600;
    double drop_probability = 0.0;
    LatencyBounds latency;
    double noise_sd = 2.0;
    int qos = 1;
    int sample_period_s = 5;
    int gps_warmup_s = 0;
    double epoch_utc_s = 1600000000.0;
    std::optional<std::string> auth_token;
    PollutionField field;
    std::vector<WifiZone> zones;
    std::vector<MobilityTrace> traces;  // explicit rides, or
    std::optional<TraceGen> trace_gen;  // generated ones
    EnergyProfile energy;
    sensor::SensorCurve sensor_curve;
    std::vector<sensor::ChannelSpec> channels;  // default: one CO channel
    mqtt::RetryPolicy retry;
};

// The desk-scale default: 10 bikes, 3 dock zones and 2 plumes around the
// centre of Padua, one simulated hour.
inline SimConfig default_scenario() {
    SimConfig cfg;
    cfg.field.background_ppm = 0.4;
    cfg.field.sources = {
        {{45.4080, 11.8790}, 9.0, 250.0, std::nullopt},
        {{45.4020, 11.8900}, 6.0, 180.0, std::nullopt},
    };
    cfg.zones = {
        {"z0", "ardueco-dock", {45.4000, 11.8700}, 80.0},
        {"z1", "ardueco-dock", {45.4130, 11.8830}, 80.0},
        {"z2", "ardueco-dock", {45.4060, 11.8950}, 80.0},
    };
    cfg.trace_gen = TraceGen{};
    return cfg;
}

struct ScenarioParse {
    SimConfig config;
    std::vector<firmware::FieldError> errors;
    bool ok() const { return errors.empty(); }
};

ScenarioParse parse_scenario(const nlohmann::json& j);
std::vector<firmware::FieldError> validate_config(const SimConfig& cfg);

// ---- simulation ----

struct SimResult {
    nlohmann::json report;
    ingest::ReadingStore store;  // in-memory; export/aggregate from here
};

SimResult run_sim(const SimConfig& cfg);

// ---- implementation ----

namespace detail {

inline void opt_num(const nlohmann::json& j, const char* key, double& dst,
                    std::vector<firmware::FieldError>& errs) {
    if (!j.contains(key)) return;
    if (!j.at(key).is_number())
        errs.push_back({key, "expected a number"});
    else
        dst = j.at(key).get<double>();
}

inline void opt_int(const nlohmann::json& j, const char* key, int& dst,
                    std::vector<firmware::FieldError>& errs) {
    if (!j.contains(key)) return;
    if (!j.at(key).is_number_integer())
        errs.push_back({key, "expected an integer"});
    else
        dst = j.at(key).get<int>();
}

inline std::vector<MobilityTrace> generate_traces(const SimConfig& cfg, Rng& rng) {
    std::vector<MobilityTrace> traces;
    if (!cfg.trace_gen || cfg.zones.empty()) return traces;
    const auto& gen = *cfg.trace_gen;

    double lat_lo = cfg.zones[0].center.lat, lat_hi = lat_lo;
    double lon_lo = cfg.zones[0].center.lon, lon_hi = lon_lo;
    for (const auto& z : cfg.zones) {
        lat_lo = std::min(lat_lo, z.center.lat);
        lat_hi = std::max(lat_hi, z.center.lat);
        lon_lo = std::min(lon_lo, z.center.lon);
        lon_hi = std::max(lon_hi, z.center.lon);
    }
    const double pad = 0.003;  // ~300 m of wander outside the hull
    lat_lo -= pad, lat_hi += pad, lon_lo -= pad, lon_hi += pad;

    for (int d = 0; d < cfg.n_devices; ++d) {
        double t = rng.uniform(gen.start_min_s, gen.start_max_s);
        while (true) {
            // shrink the detour on retries so short horizons still get rides
            std::optional<MobilityTrace> chosen;
            for (int attempt = 0; attempt < 6 && !chosen; ++attempt) {
                MobilityTrace trace;
                trace.device_index = d;
                trace.start_s = t;
                trace.speed_mps = gen.speed_mps;
                const auto start_idx = static_cast<std::size_t>(
                    rng.uniform_int(0, static_cast<std::int64_t>(cfg.zones.size()) - 1));
                auto end_idx = start_idx;
                if (cfg.zones.size() > 1)
                    while (end_idx == start_idx)
                        end_idx = static_cast<std::size_t>(
                            rng.uniform_int(0, static_cast<std::int64_t>(cfg.zones.size()) - 1));
                trace.start_zone = cfg.zones[start_idx].zone_id;
                trace.end_zone = cfg.zones[end_idx].zone_id;
                trace.waypoints.push_back(cfg.zones[start_idx].center);
                const int mids = std::max(0, gen.mid_waypoints - attempt);
                for (int w = 0; w < mids; ++w)
                    trace.waypoints.push_back({rng.uniform(lat_lo, lat_hi), rng.uniform(lon_lo, lon_hi)});
                trace.waypoints.push_back(cfg.zones[end_idx].center);
                if (t + trace.duration_s() + gen.upload_slack_s <= cfg.duration_s)
                    chosen = std::move(trace);
            }
            if (!chosen) break;
            t += chosen->duration_s() + gen.idle_gap_s * rng.uniform(1.0, 1.5);
            traces.push_back(std::move(*chosen));
        }
    }
    return traces;
}

}  // namespace detail

inline std::vector<firmware::FieldError> validate_config(const SimConfig& cfg) {
    std::vector<firmware::FieldError> errs;
    if (cfg.n_devices < 1) errs.push_back({"n_devices", "must be >= 1"});
    if (cfg.duration_s <= 0) errs.push_back({"duration_s", "must be > 0"});
    if (!(cfg.drop_probability >= 0.0 && cfg.drop_probability < 1.0))
        errs.push_back({"drop_probability", "must be in [0, 1)"});
    if (cfg.latency.min_ms < 0 || cfg.latency.max_ms < cfg.latency.min_ms)
        errs.push_back({"latency_ms", "requires 0 <= min <= max"});
    if (cfg.noise_sd < 0.0) errs.push_back({"noise_sd", "must be >= 0"});
    if (cfg.qos != 0 && cfg.qos != 1) errs.push_back({"qos", "must be 0 or 1"});
    if (cfg.sample_period_s <= 0) errs.push_back({"sample_period_s", "must be > 0"});
    if (cfg.gps_warmup_s < 0) errs.push_back({"gps_warmup_s", "must be >= 0"});
    if (cfg.field.background_ppm < 0.0) errs.push_back({"field.background_ppm", "must be >= 0"});
    for (std::size_t i = 0; i < cfg.field.sources.size(); ++i) {
        const auto& s = cfg.field.sources[i];
        const std::string p = "field.sources[" + std::to_string(i) + "]";
        if (s.amplitude_ppm < 0.0) errs.push_back({p + ".amplitude_ppm", "must be >= 0"});
        if (s.sigma_m <= 0.0) errs.push_back({p + ".sigma_m", "must be > 0"});
        if (s.profile && s.profile->period_s <= 0.0) errs.push_back({p + ".profile.period_s", "must be > 0"});
    }
    for (std::size_t i = 0; i < cfg.zones.size(); ++i) {
        const auto& z = cfg.zones[i];
        const std::string p = "zones[" + std::to_string(i) + "]";
        if (z.zone_id.empty()) errs.push_back({p + ".zone_id", "must be non-empty"});
        if (z.ssid.empty()) errs.push_back({p + ".ssid", "must be non-empty"});
        if (z.radius_m <= 0.0) errs.push_back({p + ".radius_m", "must be > 0"});
    }
    if (!cfg.trace_gen && cfg.traces.empty())
        errs.push_back({"traces", "provide traces or trace_gen"});
    if (cfg.trace_gen && cfg.zones.empty())
        errs.push_back({"zones", "trace_gen needs at least one zone"});
    if (cfg.trace_gen) {
        if (cfg.trace_gen->speed_mps <= 0.0) errs.push_back({"trace_gen.speed_mps", "must be > 0"});
        if (cfg.trace_gen->mid_waypoints < 0) errs.push_back({"trace_gen.mid_waypoints", "must be >= 0"});
    }
    for (std::size_t i = 0; i < cfg.traces.size(); ++i) {
        const auto& t = cfg.traces[i];
        const std::string p = "traces[" + std::to_string(i) + "]";
        if (t.device_index < 0 || t.device_index >= cfg.n_devices)
            errs.push_back({p + ".device", "out of range"});
        if (t.waypoints.size() < 2) errs.push_back({p + ".waypoints", "need at least 2"});
        if (t.speed_mps <= 0.0) errs.push_back({p + ".speed_mps", "must be > 0"});
        if (t.start_s < 0.0) errs.push_back({p + ".start_s", "must be >= 0"});
    }
    if (cfg.energy.active_ma <= 0.0 || cfg.energy.sleep_ma <= 0.0 || cfg.energy.battery_mah <= 0.0)
        errs.push_back({"energy", "currents and capacity must be > 0"});
    if (cfg.energy.sleep_ma > cfg.energy.active_ma)
        errs.push_back({"energy.sleep_ma", "must not exceed active_ma"});
    if (!sensor::curve_valid(cfg.sensor_curve))
        errs.push_back({"sensor", "requires a>0, b<0, r0>0, rl>0, vcc>0, adc_max>=1"});
    return errs;
}

inline ScenarioParse parse_scenario(const nlohmann::json& j) {
    ScenarioParse out;
    auto& cfg = out.config;
    auto& errs = out.errors;
    if (!j.is_object()) {
        errs.push_back({"scenario", "not a JSON object"});
        return out;
    }
    if (j.contains("seed")) {
        if (!j.at("seed").is_number_unsigned())
            errs.push_back({"seed", "expected a non-negative integer"});
        else
            cfg.seed = j.at("seed").get<std::uint64_t>();
    }
    detail::opt_int(j, "n_devices", cfg.n_devices, errs);
    detail::opt_int(j, "duration_s", cfg.duration_s, errs);
    detail::opt_num(j, "drop_probability", cfg.drop_probability, errs);
    if (j.contains("latency_ms")) {
        const auto& l = j.at("latency_ms");
        if (!l.is_object())
            errs.push_back({"latency_ms", "expected an object {min, max}"});
        else {
            detail::opt_int(l, "min", cfg.latency.min_ms, errs);
            detail::opt_int(l, "max", cfg.latency.max_ms, errs);
        }
    }
    detail::opt_num(j, "noise_sd", cfg.noise_sd, errs);
    detail::opt_int(j, "qos", cfg.qos, errs);
    detail::opt_int(j, "sample_period_s", cfg.sample_period_s, errs);
    detail::opt_int(j, "gps_warmup_s", cfg.gps_warmup_s, errs);
    detail::opt_num(j, "epoch_utc_s", cfg.epoch_utc_s, errs);
    if (j.contains("auth_token")) {
        if (!j.at("auth_token").is_string())
            errs.push_back({"auth_token", "expected a string"});
        else
            cfg.auth_token = j.at("auth_token").get<std::string>();
    }

    if (j.contains("field")) {
        const auto& f = j.at("field");
        if (!f.is_object()) {
            errs.push_back({"field", "expected an object"});
        } else {
            detail::opt_num(f, "background_ppm", cfg.field.background_ppm, errs);
            if (f.contains("sources")) {
                if (!f.at("sources").is_array())
                    errs.push_back({"field.sources", "expected an array"});
                else {
                    int i = 0;
                    for (const auto& s : f.at("sources")) {
                        const std::string p = "field.sources[" + std::to_string(i++) + "]";
                        GaussianSource src;
                        if (!s.is_object()) {
                            errs.push_back({p, "expected an object"});
                            continue;
                        }
                        detail::opt_num(s, "lat", src.center.lat, errs);
                        detail::opt_num(s, "lon", src.center.lon, errs);
                        detail::opt_num(s, "amplitude_ppm", src.amplitude_ppm, errs);
                        detail::opt_num(s, "sigma_m", src.sigma_m, errs);
                        if (s.contains("profile") && s.at("profile").is_object()) {
                            TimeProfile tp;
                            detail::opt_num(s.at("profile"), "period_s", tp.period_s, errs);
                            detail::opt_num(s.at("profile"), "phase_rad", tp.phase_rad, errs);
                            src.profile = tp;
                        }
                        cfg.field.sources.push_back(src);
                    }
                }
            }
        }
    }

    if (j.contains("zones")) {
        if (!j.at("zones").is_array())
            errs.push_back({"zones", "expected an array"});
        else {
            int i = 0;
            for (const auto& z : j.at("zones")) {
                const std::string p = "zones[" + std::to_string(i++) + "]";
                WifiZone zone;
                if (!z.is_object()) {
                    errs.push_back({p, "expected an object"});
                    continue;
                }
                if (z.contains("zone_id") && z.at("zone_id").is_string())
                    zone.zone_id = z.at("zone_id").get<std::string>();
                if (z.contains("ssid") && z.at("ssid").is_string())
                    zone.ssid = z.at("ssid").get<std::string>();
                detail::opt_num(z, "lat", zone.center.lat, errs);
                detail::opt_num(z, "lon", zone.center.lon, errs);
                detail::opt_num(z, "radius_m", zone.radius_m, errs);
                cfg.zones.push_back(std::move(zone));
            }
        }
    }

    if (j.contains("trace_gen")) {
        const auto& g = j.at("trace_gen");
        if (!g.is_object())
            errs.push_back({"trace_gen", "expected an object"});
        else {
            TraceGen gen;
            detail::opt_num(g, "speed_mps", gen.speed_mps, errs);
            detail::opt_int(g, "mid_waypoints", gen.mid_waypoints, errs);
            detail::opt_num(g, "idle_gap_s", gen.idle_gap_s, errs);
            detail::opt_num(g, "upload_slack_s", gen.upload_slack_s, errs);
            detail::opt_num(g, "start_min_s", gen.start_min_s, errs);
            detail::opt_num(g, "start_max_s", gen.start_max_s, errs);
            cfg.trace_gen = gen;
        }
    }

    if (j.contains("traces")) {
        if (!j.at("traces").is_array())
            errs.push_back({"traces", "expected an array"});
        else {
            int i = 0;
            for (const auto& t : j.at("traces")) {
                const std::string p = "traces[" + std::to_string(i++) + "]";
                MobilityTrace trace;
                if (!t.is_object()) {
                    errs.push_back({p, "expected an object"});
                    continue;
                }
                detail::opt_int(t, "device", trace.device_index, errs);
                detail::opt_num(t, "start_s", trace.start_s, errs);
                detail::opt_num(t, "speed_mps", trace.speed_mps, errs);
                if (t.contains("start_zone") && t.at("start_zone").is_string())
                    trace.start_zone = t.at("start_zone").get<std::string>();
                if (t.contains("end_zone") && t.at("end_zone").is_string())
                    trace.end_zone = t.at("end_zone").get<std::string>();
                if (t.contains("waypoints") && t.at("waypoints").is_array()) {
                    for (const auto& w : t.at("waypoints"))
                        if (w.is_array() && w.size() == 2 && w[0].is_number() && w[1].is_number())
                            trace.waypoints.push_back({w[0].get<double>(), w[1].get<double>()});
                        else
                            errs.push_back({p + ".waypoints", "expected [lat, lon] pairs"});
                }
                cfg.traces.push_back(std::move(trace));
            }
        }
    }

    if (j.contains("energy")) {
        const auto& e = j.at("energy");
        if (!e.is_object())
            errs.push_back({"energy", "expected an object"});
        else {
            detail::opt_num(e, "active_ma", cfg.energy.active_ma, errs);
            detail::opt_num(e, "sleep_ma", cfg.energy.sleep_ma, errs);
            detail::opt_num(e, "battery_mah", cfg.energy.battery_mah, errs);
            if (e.contains("deep_sleep_enabled")) {
                if (!e.at("deep_sleep_enabled").is_boolean())
                    errs.push_back({"energy.deep_sleep_enabled", "expected a boolean"});
                else
                    cfg.energy.deep_sleep_enabled = e.at("deep_sleep_enabled").get<bool>();
            }
        }
    }

    if (j.contains("sensor")) {
        firmware::detail::parse_curve(j.at("sensor"), "sensor", cfg.sensor_curve, errs);
    }

    if (j.contains("retry")) {
        const auto& r = j.at("retry");
        if (!r.is_object())
            errs.push_back({"retry", "expected an object"});
        else {
            int timeout = static_cast<int>(cfg.retry.timeout_ms);
            int window = static_cast<int>(cfg.retry.window);
            detail::opt_int(r, "timeout_ms", timeout, errs);
            detail::opt_int(r, "max_retries", cfg.retry.max_retries, errs);
            detail::opt_int(r, "window", window, errs);
            if (timeout <= 0) errs.push_back({"retry.timeout_ms", "must be > 0"});
            if (window <= 0) errs.push_back({"retry.window", "must be > 0"});
            cfg.retry.timeout_ms = timeout;
            cfg.retry.window = static_cast<std::size_t>(window);
        }
    }

    if (cfg.channels.empty()) {
        sensor::ChannelSpec co;
        co.curve = cfg.sensor_curve;
        cfg.channels.push_back(std::move(co));
    }

    const auto more = validate_config(cfg);
    errs.insert(errs.end(), more.begin(), more.end());
    return out;
}

namespace detail {

struct Event {
    TimeMs at;
    std::uint64_t seq;
    std::function<void()> fn;
};

struct EventOrder {
    bool operator()(const Event& a, const Event& b) const {
        return std::tie(a.at, a.seq) > std::tie(b.at, b.seq);  // min-heap
    }
};

class Simulation {
public:
    explicit Simulation(const SimConfig& cfg)
        : cfg_(cfg),
          master_rng_(cfg.seed),
          trace_rng_(master_rng_.fork(1)),
          net_rng_(master_rng_.fork(2)) {}

    SimResult run() {
        setup();
        const TimeMs end = static_cast<TimeMs>(cfg_.duration_s) * 1000;
        for (TimeMs t = 0; t <= end; t += 1000)
            schedule(t, [this] { tick_all(); });
        while (!events_.empty()) {
            Event e = events_.top();
            events_.pop();
            if (e.at > end) continue;  // cut off at the horizon
            now_ = e.at;
            e.fn();
        }
        return finish();
    }

private:
    enum class Mode { Idle, Riding, Docked };

    struct Agent {
        std::optional<firmware::Device> device;
        Rng rng{0};
        std::string device_id;
        std::vector<MobilityTrace> rides;
        std::size_t next_ride = 0;
        const MobilityTrace* current = nullptr;
        Mode mode = Mode::Idle;
        TimeMs ride_started_at = 0;
        int conn = -1;
        TimeMs active_ms = 0;
        TimeMs idle_ms = 0;
        bool depleted = false;
        std::uint64_t attempts = 0;
        std::vector<std::string> ride_ids;  // chronological
    };

    void setup() {
        broker_.emplace(mqtt::Broker::Options{cfg_.auth_token});
        ingestor_.emplace(store_);
        broker_->set_ingest_hook([this](const std::string& topic, const mqtt::Bytes& payload) {
            ingestor_->on_message(topic, payload, cfg_.epoch_utc_s + static_cast<double>(now_) / 1000.0);
        });

        auto channels = cfg_.channels;
        if (channels.empty()) {
            sensor::ChannelSpec co;
            co.curve = cfg_.sensor_curve;
            channels.push_back(co);
        }

        std::vector<MobilityTrace> traces = cfg_.traces;
        if (cfg_.trace_gen) {
            auto generated = detail::generate_traces(cfg_, trace_rng_);
            traces.insert(traces.end(), generated.begin(), generated.end());
        }

        agents_.resize(static_cast<std::size_t>(cfg_.n_devices));
        for (int d = 0; d < cfg_.n_devices; ++d) {
            auto& a = agents_[static_cast<std::size_t>(d)];
            char id[16];
            std::snprintf(id, sizeof id, "bike-%02d", d);
            a.device_id = id;
            a.rng = master_rng_.fork(100 + static_cast<std::uint64_t>(d));

            nlohmann::json params;
            params["ssid"] = cfg_.zones.empty() ? "ardueco-dock" : cfg_.zones[0].ssid;
            params["password"] = "";
            params["endpoint_host"] = "broker.sim";
            params["endpoint_port"] = 1883;
            params["topic_session"] = "ardueco/" + a.device_id + "/session";
            params["topic_data"] = "ardueco/" + a.device_id + "/data";
            params["device_id"] = a.device_id;
            params["sample_period_s"] = cfg_.sample_period_s;
            params["reboot_delay_s"] = 10;
            if (cfg_.auth_token) params["auth_token"] = *cfg_.auth_token;
            auto& chs = params["channels"] = nlohmann::json::array();
            for (const auto& ch : channels) {
                nlohmann::json c;
                c["channel_id"] = ch.channel_id;
                c["label"] = ch.label;
                c["sensor"] = {{"a", ch.curve.a},       {"b", ch.curve.b},   {"r0", ch.curve.r0},
                               {"rl", ch.curve.rl},     {"vcc", ch.curve.vcc},
                               {"adc_max", ch.curve.adc_max}};
                chs.push_back(std::move(c));
            }

            firmware::VirtualSd sd;
            sd.params_text = params.dump();
            firmware::DeviceOptions opts;
            opts.qos = static_cast<std::uint8_t>(cfg_.qos);
            opts.retry = cfg_.retry;
            opts.utc_epoch_s = cfg_.epoch_utc_s;
            a.device.emplace(std::move(sd), a.rng.fork(1), opts);
        }
        for (auto& t : traces) {
            if (t.device_index >= 0 && t.device_index < cfg_.n_devices)
                agents_[static_cast<std::size_t>(t.device_index)].rides.push_back(t);
        }
        for (auto& a : agents_)
            std::sort(a.rides.begin(), a.rides.end(),
                      [](const MobilityTrace& x, const MobilityTrace& y) { return x.start_s < y.start_s; });
    }

    void schedule(TimeMs at, std::function<void()> fn) {
        events_.push(Event{at, event_seq_++, std::move(fn)});
    }

    void tick_all() {
        for (std::size_t d = 0; d < agents_.size(); ++d) tick_device(static_cast<int>(d));
    }

    void tick_device(int idx) {
        auto& a = agents_[static_cast<std::size_t>(idx)];
        account_energy(a);
        if (a.depleted) return;

        if (a.mode == Mode::Idle && a.next_ride < a.rides.size() &&
            static_cast<double>(now_) / 1000.0 >= a.rides[a.next_ride].start_s) {
            a.current = &a.rides[a.next_ride];
            ++a.next_ride;
            a.device->boot(now_);
            a.mode = Mode::Riding;
            a.ride_started_at = now_;
            a.ride_ids.push_back(a.device->ride_id());
        }

        if (a.mode == Mode::Riding) {
            const double t_rel = static_cast<double>(now_ - a.ride_started_at) / 1000.0;
            // arrival in whole milliseconds, immune to length round-off
            const TimeMs arrival_ms = std::llround(a.current->duration_s() * 1000.0);
            if (now_ - a.ride_started_at >= arrival_ms) {
                a.mode = Mode::Docked;
            } else {
                const LatLon pos = a.current->position_at(t_rel);
                std::optional<std::string> gps_line;
                const bool warm = (now_ - a.ride_started_at) >= static_cast<TimeMs>(cfg_.gps_warmup_s) * 1000;
                nmea::GpsFix fix;
                fix.utc_time = std::fmod(cfg_.epoch_utc_s + static_cast<double>(now_) / 1000.0, 86400.0);
                if (warm) {
                    fix.latitude = pos.lat;
                    fix.longitude = pos.lon;
                    fix.quality = 1;
                    fix.satellites = 8;
                    fix.valid = true;
                }
                if (auto line = nmea::render_gga(fix); line.ok()) gps_line = line.value();

                const double ppm_true =
                    field_sample(cfg_.field, pos.lat, pos.lon, static_cast<double>(now_) / 1000.0);
                std::vector<int> adc;
                adc.reserve(a.device->config().channels.size());
                for (const auto& ch : a.device->config().channels)
                    adc.push_back(sensor::sample_with_noise(ppm_true, ch.curve, cfg_.noise_sd, a.rng));
                a.device->tick(now_, gps_line, adc);
                return;
            }
        }

        if (a.mode == Mode::Docked) dock_logic(idx);
    }

    void dock_logic(int idx) {
        auto& a = agents_[static_cast<std::size_t>(idx)];
        auto& dev = *a.device;
        switch (dev.phase()) {
            case firmware::Phase::Sampling: {
                if (dev.upload_outcome() == firmware::UploadOutcome::Succeeded) {
                    close_connection(a);
                    a.mode = Mode::Idle;  // ride done, device sleeps until the next one
                    a.current = nullptr;
                    return;
                }
                // first dock second (or retry after an error was cleared)
                const LatLon pos = a.current->waypoints.back();
                if (dev.press_button(visible_ssids(pos), now_)) {
                    ++a.attempts;
                    open_connection(idx);
                } else {
                    a.mode = Mode::Idle;  // configured ssid not present at this dock
                    a.current = nullptr;
                }
                return;
            }
            case firmware::Phase::UploadError:
                close_connection(a);
                dev.clear_upload_error();  // retried from Sampling on the next tick
                return;
            case firmware::Phase::Connecting:
            case firmware::Phase::Uploading:
                dev.pump(now_);
                return;
            default:
                return;
        }
    }

    std::vector<std::string> visible_ssids(LatLon pos) const {
        std::vector<std::string> out;
        for (const auto& z : cfg_.zones)
            if (equirect_distance_m(pos, z.center) <= z.radius_m) out.push_back(z.ssid);
        return out;
    }

    void open_connection(int idx) {
        auto& a = agents_[static_cast<std::size_t>(idx)];
        close_connection(a);
        const int conn = next_conn_++;
        a.conn = conn;
        broker_->open_connection(conn);
        a.device->set_transport([this, idx, conn](const mqtt::Bytes& frame) {
            device_frame(idx, conn, frame);
        });
        a.device->transport_connected(now_);
    }

    void close_connection(Agent& a) {
        if (a.conn < 0) return;
        broker_->close_connection(a.conn);
        a.conn = -1;
    }

    // device -> broker, through the lossy ordered channel
    void device_frame(int idx, int conn, const mqtt::Bytes& frame) {
        ++frames_sent_;
        const auto decision = network_deliver(cfg_.drop_probability, cfg_.latency, net_rng_);
        if (!decision.delivered) {
            ++frames_dropped_;
            return;
        }
        TimeMs& last = to_broker_last_[conn];
        const TimeMs at = std::max(now_ + decision.latency_ms, last);
        last = at;
        schedule(at, [this, idx, conn, frame] {
            if (!broker_->connection_open(conn)) return;
            auto out = broker_->on_bytes(conn, frame);
            for (auto& [c, bytes] : out.frames)
                if (c == conn) broker_frame(idx, conn, bytes);
        });
    }

    // broker -> device, same channel model, independent direction ordering
    void broker_frame(int idx, int conn, const mqtt::Bytes& frame) {
        ++frames_sent_;
        const auto decision = network_deliver(cfg_.drop_probability, cfg_.latency, net_rng_);
        if (!decision.delivered) {
            ++frames_dropped_;
            return;
        }
        TimeMs& last = to_device_last_[conn];
        const TimeMs at = std::max(now_ + decision.latency_ms, last);
        last = at;
        schedule(at, [this, idx, conn, frame] {
            auto& a = agents_[static_cast<std::size_t>(idx)];
            if (a.conn != conn) return;  // stale connection
            a.device->on_bytes(frame, now_);
        });
    }

    void account_energy(Agent& a) {
        if (a.depleted) return;
        if (a.mode == Mode::Idle)
            a.idle_ms += 1000;
        else
            a.active_ms += 1000;
        const double active_s = static_cast<double>(a.active_ms) / 1000.0;
        const double idle_s = static_cast<double>(a.idle_ms) / 1000.0;
        const auto energy = cfg_.energy.deep_sleep_enabled
                                ? energy_account(cfg_.energy, active_s, idle_s)
                                : energy_account(cfg_.energy, active_s + idle_s, 0.0);
        if (energy.depleted) {
            a.depleted = true;  // battery flat: the device stops sampling
            close_connection(a);
            a.mode = Mode::Idle;
        }
    }

    SimResult finish() {
        nlohmann::json report;
        report["config"] = {{"seed", cfg_.seed},
                            {"n_devices", cfg_.n_devices},
                            {"duration_s", cfg_.duration_s},
                            {"drop_probability", cfg_.drop_probability},
                            {"qos", cfg_.qos},
                            {"sample_period_s", cfg_.sample_period_s},
                            {"noise_sd", cfg_.noise_sd},
                            {"gps_warmup_s", cfg_.gps_warmup_s}};

        std::uint64_t generated_total = 0, retrans_total = 0, uploads_attempted = 0,
                      uploads_succeeded = 0, rides_total = 0, rides_complete = 0;
        auto& devices = report["devices"] = nlohmann::json::array();
        for (auto& a : agents_) {
            nlohmann::json dev;
            dev["device"] = a.device_id;
            auto& rides = dev["rides"] = nlohmann::json::array();
            for (const auto& ride : a.ride_ids) {
                ++rides_total;
                nlohmann::json rj;
                rj["ride"] = ride;
                ingest::QueryFilter f;
                f.ride_id = ride;
                f.device_id = a.device_id;
                rj["stored"] = store_.query(f).size();
                if (auto s = ingestor_->ride_completeness(ride, a.device_id)) {
                    if (s->expected_count) rj["expected"] = *s->expected_count;
                    rj["status"] = ingest::to_string(s->status);
                    if (s->status == ingest::RideStatus::Complete) ++rides_complete;
                } else {
                    rj["status"] = "unreported";
                }
                rides.push_back(std::move(rj));
            }
            const double active_s = static_cast<double>(a.active_ms) / 1000.0;
            const double idle_s = static_cast<double>(a.idle_ms) / 1000.0;
            const double sleep_s = cfg_.energy.deep_sleep_enabled ? idle_s : 0.0;
            const auto energy =
                energy_account(cfg_.energy, cfg_.energy.deep_sleep_enabled ? active_s : active_s + idle_s,
                               sleep_s);
            dev["energy"] = {{"active_s", active_s},
                             {"idle_s", idle_s},
                             {"deep_sleep", cfg_.energy.deep_sleep_enabled},
                             {"consumed_mah", energy.consumed_mah},
                             {"remaining_mah", energy.remaining_mah},
                             {"lifetime_h", energy.lifetime_h},
                             {"depleted", energy.depleted}};
            generated_total += a.device->readings_generated();
            retrans_total += a.device->retransmissions();
            uploads_attempted += a.attempts;
            uploads_succeeded += a.device->uploads_succeeded();
            dev["generated"] = a.device->readings_generated();
            devices.push_back(std::move(dev));
        }

        const auto& counters = ingestor_->counters();
        nlohmann::json totals;
        totals["generated"] = generated_total;
        totals["stored"] = store_.size();
        totals["duplicates_dropped"] = counters.duplicates;
        totals["quarantined"] = counters.quarantined;
        totals["headers"] = counters.headers;
        totals["frames_sent"] = frames_sent_;
        totals["frames_dropped"] = frames_dropped_;
        totals["retransmissions"] = retrans_total;
        totals["uploads_attempted"] = uploads_attempted;
        totals["uploads_succeeded"] = uploads_succeeded;
        totals["rides"] = rides_total;
        totals["rides_complete"] = rides_complete;
        if (generated_total > 0)
            totals["delivery_fraction"] =
                static_cast<double>(store_.size()) / static_cast<double>(generated_total);
        report["totals"] = std::move(totals);

        SimResult result;
        result.report = std::move(report);
        result.store = std::move(store_);
        return result;
    }

    SimConfig cfg_;
    Rng master_rng_;
    Rng trace_rng_;
    Rng net_rng_;
    TimeMs now_ = 0;
    std::uint64_t event_seq_ = 0;
    std::priority_queue<Event, std::vector<Event>, EventOrder> events_;
    std::vector<Agent> agents_;
    std::optional<mqtt::Broker> broker_;
    ingest::ReadingStore store_;
    std::optional<ingest::Ingestor> ingestor_;
    int next_conn_ = 1;
    std::map<int, TimeMs> to_broker_last_;
    std::map<int, TimeMs> to_device_last_;
    std::uint64_t frames_sent_ = 0;
    std::uint64_t frames_dropped_ = 0;
};

}  // namespace detail

inline SimResult run_sim(const SimConfig& cfg) {
    detail::Simulation sim(cfg);
    return sim.run();
}

}  // namespace ardueco::sim
