#pragma once

// One timestamped, geolocated sensor sample belonging to a ride. Serialized
// as one JSON object per LF-terminated line, the row format of both SD log
// files and the MQTT data payloads:
//   {"ride":"..","seq":0,"t":0,"utc":..,"fix":true,"lat":..,"lon":..,
//    "ch":[{"id":0,"adc":512,"ppm":3.2}]}
// lat/lon are omitted whenever fix is false.

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "ardueco/core.hpp"

namespace ardueco {

struct ChannelSample {
    int id = 0;
    int adc = 0;
    double ppm = 0.0;
    bool operator==(const ChannelSample&) const = default;
};

struct Reading {
    std::string ride_id;
    std::uint64_t seq = 0;
    std::int64_t t_s = 0;    // seconds since boot, always seq * sample_period
    double utc_s = 0.0;      // UTC wall time, unix seconds
    bool fix_valid = false;
    double lat = 0.0;        // meaningless unless fix_valid
    double lon = 0.0;
    std::vector<ChannelSample> channels;
    bool operator==(const Reading&) const = default;
};

struct ParseFailure {
    std::string reason;
};

inline nlohmann::json reading_to_json(const Reading& r) {
    nlohmann::json j;
    j["ride"] = r.ride_id;
    j["seq"] = r.seq;
    j["t"] = r.t_s;
    j["utc"] = r.utc_s;
    j["fix"] = r.fix_valid;
    if (r.fix_valid) {
        j["lat"] = r.lat;
        j["lon"] = r.lon;
    }
    auto& ch = j["ch"] = nlohmann::json::array();
    for (const auto& c : r.channels) ch.push_back({{"id", c.id}, {"adc", c.adc}, {"ppm", c.ppm}});
    return j;
}

inline std::string reading_to_line(const Reading& r) { return reading_to_json(r).dump(); }

inline Result<Reading, ParseFailure> reading_from_json(const nlohmann::json& j) {
    try {
        if (!j.is_object()) return ParseFailure{"row is not a JSON object"};
        Reading r;
        r.ride_id = j.at("ride").get<std::string>();
        r.seq = j.at("seq").get<std::uint64_t>();
        r.t_s = j.at("t").get<std::int64_t>();
        r.utc_s = j.at("utc").get<double>();
        r.fix_valid = j.at("fix").get<bool>();
        if (r.fix_valid) {
            r.lat = j.at("lat").get<double>();
            r.lon = j.at("lon").get<double>();
            if (r.lat < -90.0 || r.lat > 90.0 || r.lon < -180.0 || r.lon > 180.0)
                return ParseFailure{"coordinates out of range"};
        }
        for (const auto& c : j.at("ch")) {
            ChannelSample s;
            s.id = c.at("id").get<int>();
            s.adc = c.at("adc").get<int>();
            s.ppm = c.at("ppm").get<double>();
            if (s.adc < 0) return ParseFailure{"negative adc"};
            r.channels.push_back(s);
        }
        if (r.ride_id.empty()) return ParseFailure{"empty ride id"};
        return r;
    } catch (const nlohmann::json::exception& e) {
        return ParseFailure{e.what()};
    }
}

inline Result<Reading, ParseFailure> reading_from_line(std::string_view line) {
    const auto j = nlohmann::json::parse(line, nullptr, false);
    if (j.is_discarded()) return ParseFailure{"invalid JSON"};
    return reading_from_json(j);
}

}  // namespace ardueco
