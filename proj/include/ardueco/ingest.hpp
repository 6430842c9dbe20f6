#pragma once

// Server side of the pipeline: the per-message handler invoked by the broker
// hook, ride-completeness accounting against the session count headers,
// spatial grid aggregation and GeoJSON export with per-ride styling.

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "ardueco/core.hpp"
#include "ardueco/geohash.hpp"
#include "ardueco/store.hpp"

namespace ardueco::ingest {

enum class RideStatus { Pending, Complete, Overcomplete };

inline const char* to_string(RideStatus s) {
    switch (s) {
        case RideStatus::Pending: return "pending";
        case RideStatus::Complete: return "complete";
        default: return "overcomplete";
    }
}

struct RideSummary {
    std::string ride_id;
    std::string device_id;
    std::optional<std::uint64_t> expected_count;  // from the session header
    std::uint64_t received_count = 0;             // distinct stored rows
    double first_utc = 0.0;
    double last_utc = 0.0;
    RideStatus status = RideStatus::Pending;
};

struct QuarantineEntry {
    std::string topic;
    std::string raw;
    std::string reason;
};

// Handles every message the broker accepts. Unparseable payloads go to the
// quarantine log, never down; duplicate (device, ride, seq) rows are
// collapsed by the store.
class Ingestor {
public:
    // Summaries are seeded from rows already in the store, so accounting
    // stays correct across service restarts and repeated replays.
    explicit Ingestor(ReadingStore& store) : store_(store) {
        for (const auto& r : store_.records()) {
            auto& s = summary_for(r.device_id, r.reading.ride_id);
            if (s.received_count == 0 || r.reading.utc_s < s.first_utc) s.first_utc = r.reading.utc_s;
            if (s.received_count == 0 || r.reading.utc_s > s.last_utc) s.last_utc = r.reading.utc_s;
            ++s.received_count;
        }
    }

    struct Counters {
        std::uint64_t accepted = 0;
        std::uint64_t duplicates = 0;
        std::uint64_t headers = 0;
        std::uint64_t quarantined = 0;
        std::uint64_t ignored_topics = 0;
    };

    void on_message(std::string_view topic, std::span<const std::uint8_t> payload, double now_utc) {
        const std::string text(reinterpret_cast<const char*>(payload.data()), payload.size());
        const auto parts = split_topic(topic);
        if (!parts) {
            ++counters_.ignored_topics;
            return;
        }
        if (parts->kind == TopicKind::Session)
            handle_header(parts->device, topic, text);
        else
            ingest_reading_line(parts->device, text, now_utc, topic);
    }

    // The replay path: a perm_log row enters through the same dedup gate as
    // live traffic.
    void ingest_reading_line(const std::string& device, std::string_view line, double now_utc,
                             std::string_view topic = "replay") {
        auto reading = reading_from_line(line);
        if (!reading.ok()) {
            quarantine(topic, line, reading.error().reason);
            return;
        }
        IngestRecord rec;
        rec.device_id = device;
        rec.reading = std::move(reading).value();
        rec.server_received_at = now_utc;
        auto& summary = summary_for(device, rec.reading.ride_id);
        if (!store_.append(rec)) {
            ++counters_.duplicates;
            return;
        }
        ++counters_.accepted;
        if (summary.received_count == 0 || rec.reading.utc_s < summary.first_utc)
            summary.first_utc = rec.reading.utc_s;
        if (summary.received_count == 0 || rec.reading.utc_s > summary.last_utc)
            summary.last_utc = rec.reading.utc_s;
        ++summary.received_count;
        refresh_status(summary);
    }

    std::optional<RideSummary> ride_completeness(const std::string& ride_id,
                                                 const std::string& device_id) const {
        const auto it = summaries_.find({device_id, ride_id});
        if (it == summaries_.end()) return std::nullopt;
        return it->second;
    }

    const std::map<std::pair<std::string, std::string>, RideSummary>& summaries() const {
        return summaries_;
    }
    const Counters& counters() const { return counters_; }
    const std::vector<QuarantineEntry>& quarantined() const { return quarantine_; }

private:
    enum class TopicKind { Session, Data };
    struct TopicParts {
        std::string device;
        TopicKind kind;
    };

    // ardueco/<device_id>/session | ardueco/<device_id>/data
    static std::optional<TopicParts> split_topic(std::string_view topic) {
        const auto first = topic.find('/');
        if (first == std::string_view::npos || topic.substr(0, first) != "ardueco") return std::nullopt;
        const auto second = topic.find('/', first + 1);
        if (second == std::string_view::npos) return std::nullopt;
        TopicParts parts;
        parts.device = std::string(topic.substr(first + 1, second - first - 1));
        const auto kind = topic.substr(second + 1);
        if (parts.device.empty()) return std::nullopt;
        if (kind == "session")
            parts.kind = TopicKind::Session;
        else if (kind == "data")
            parts.kind = TopicKind::Data;
        else
            return std::nullopt;
        return parts;
    }

    void handle_header(const std::string& device, std::string_view topic, const std::string& text) {
        const auto j = nlohmann::json::parse(text, nullptr, false);
        if (j.is_discarded() || !j.is_object() || !j.contains("ride") || !j.at("ride").is_string() ||
            !j.contains("count") || !j.at("count").is_number_unsigned()) {
            quarantine(topic, text, "malformed session header");
            return;
        }
        if (j.contains("device") && j.at("device").is_string() &&
            j.at("device").get<std::string>() != device) {
            quarantine(topic, text, "header device does not match topic");
            return;
        }
        ++counters_.headers;
        auto& summary = summary_for(device, j.at("ride").get<std::string>());
        summary.expected_count = j.at("count").get<std::uint64_t>();
        refresh_status(summary);
    }

    RideSummary& summary_for(const std::string& device, const std::string& ride) {
        auto& s = summaries_[{device, ride}];
        if (s.ride_id.empty()) {
            s.ride_id = ride;
            s.device_id = device;
        }
        return s;
    }

    static void refresh_status(RideSummary& s) {
        if (!s.expected_count)
            s.status = RideStatus::Pending;
        else if (s.received_count == *s.expected_count)
            s.status = RideStatus::Complete;
        else if (s.received_count > *s.expected_count)
            s.status = RideStatus::Overcomplete;  // flags a protocol bug upstream
        else
            s.status = RideStatus::Pending;
    }

    void quarantine(std::string_view topic, std::string_view raw, std::string reason) {
        ++counters_.quarantined;
        quarantine_.push_back({std::string(topic), std::string(raw), std::move(reason)});
    }

    ReadingStore& store_;
    std::map<std::pair<std::string, std::string>, RideSummary> summaries_;
    Counters counters_;
    std::vector<QuarantineEntry> quarantine_;
};

// ---- spatial aggregation ----

struct GridCell {
    std::string cell_id;
    std::uint64_t count = 0;
    double mean_ppm = 0.0;
    double min_ppm = 0.0;
    double max_ppm = 0.0;
};

// Per-cell stats over the first channel's ppm; readings without a fix are
// excluded. Cells come back sorted by id.
inline std::vector<GridCell> aggregate_grid(std::span<const IngestRecord> records, int precision) {
    std::map<std::string, GridCell> cells;
    for (const auto& r : records) {
        if (!r.reading.fix_valid || r.reading.channels.empty()) continue;
        const double ppm = r.reading.channels.front().ppm;
        const auto key = geohash::encode(r.reading.lat, r.reading.lon, precision);
        auto [it, fresh] = cells.try_emplace(key);
        auto& c = it->second;
        if (fresh) {
            c.cell_id = key;
            c.min_ppm = c.max_ppm = ppm;
        } else {
            c.min_ppm = std::min(c.min_ppm, ppm);
            c.max_ppm = std::max(c.max_ppm, ppm);
        }
        c.mean_ppm += ppm;  // running sum until the final divide
        ++c.count;
    }
    std::vector<GridCell> out;
    out.reserve(cells.size());
    for (auto& [key, c] : cells) {
        c.mean_ppm /= static_cast<double>(c.count);
        out.push_back(std::move(c));
    }
    return out;
}

// ---- GeoJSON export ----

inline const std::array<const char*, 12>& color_palette() {
    static const std::array<const char*, 12> palette{
        "#e6194b", "#3cb44b", "#ffe119", "#4363d8", "#f58231", "#911eb4",
        "#46f0f0", "#f032e6", "#bcf60c", "#fabebe", "#008080", "#e6beff"};
    return palette;
}

// ride id -> palette color, stable across runs.
inline std::string ride_color(std::string_view ride_id, std::uint64_t style_seed = 0) {
    return color_palette()[(fnv1a64(ride_id) + style_seed) % color_palette().size()];
}

// RFC 7946 FeatureCollection: one Point per fixed reading; optionally one
// LineString per ride connecting its readings in seq order.
inline nlohmann::json export_geojson_doc(std::span<const IngestRecord> records,
                                         std::uint64_t style_seed = 0, bool ride_tracks = false) {
    nlohmann::json doc;
    doc["type"] = "FeatureCollection";
    auto& features = doc["features"] = nlohmann::json::array();

    std::map<std::string, std::vector<const IngestRecord*>> by_ride;
    for (const auto& r : records) {
        if (!r.reading.fix_valid) continue;
        by_ride[r.reading.ride_id].push_back(&r);

        nlohmann::json f;
        f["type"] = "Feature";
        f["geometry"] = {{"type", "Point"},
                         {"coordinates", nlohmann::json::array({r.reading.lon, r.reading.lat})}};
        auto& props = f["properties"];
        props["ride"] = r.reading.ride_id;
        props["seq"] = r.reading.seq;
        props["utc"] = r.reading.utc_s;
        props["color"] = ride_color(r.reading.ride_id, style_seed);
        if (!r.reading.channels.empty()) {
            props["ppm"] = r.reading.channels.front().ppm;
            props["adc"] = r.reading.channels.front().adc;
        }
        features.push_back(std::move(f));
    }

    if (ride_tracks) {
        for (auto& [ride, rows] : by_ride) {
            if (rows.size() < 2) continue;
            std::sort(rows.begin(), rows.end(), [](const IngestRecord* a, const IngestRecord* b) {
                return a->reading.seq < b->reading.seq;
            });
            nlohmann::json line;
            line["type"] = "Feature";
            auto coords = nlohmann::json::array();
            for (const auto* r : rows)
                coords.push_back(nlohmann::json::array({r->reading.lon, r->reading.lat}));
            line["geometry"] = {{"type", "LineString"}, {"coordinates", std::move(coords)}};
            line["properties"] = {{"ride", ride}, {"color", ride_color(ride, style_seed)}};
            features.push_back(std::move(line));
        }
    }
    return doc;
}

inline std::string export_geojson(std::span<const IngestRecord> records, std::uint64_t style_seed = 0,
                                  bool ride_tracks = false) {
    return export_geojson_doc(records, style_seed, ride_tracks).dump();
}

// Grid cells as Polygon features (geohash cell outlines) for a map overlay.
inline nlohmann::json grid_geojson_doc(std::span<const GridCell> cells) {
    nlohmann::json doc;
    doc["type"] = "FeatureCollection";
    auto& features = doc["features"] = nlohmann::json::array();
    for (const auto& c : cells) {
        const auto box = geohash::decode_bbox(c.cell_id);
        nlohmann::json f;
        f["type"] = "Feature";
        auto ring = nlohmann::json::array(
            {nlohmann::json::array({box.lon_min, box.lat_min}), nlohmann::json::array({box.lon_max, box.lat_min}),
             nlohmann::json::array({box.lon_max, box.lat_max}), nlohmann::json::array({box.lon_min, box.lat_max}),
             nlohmann::json::array({box.lon_min, box.lat_min})});
        f["geometry"] = {{"type", "Polygon"}, {"coordinates", nlohmann::json::array({std::move(ring)})}};
        f["properties"] = {{"cell", c.cell_id},
                           {"count", c.count},
                           {"mean_ppm", c.mean_ppm},
                           {"min_ppm", c.min_ppm},
                           {"max_ppm", c.max_ppm}};
        features.push_back(std::move(f));
    }
    return doc;
}

}  // namespace ardueco::ingest
