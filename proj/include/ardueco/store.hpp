#pragma once

// Append-only reading store: JSON-lines file (or memory only) plus an
// in-memory index rebuilt on open. (device_id, ride_id, seq) is unique;
// duplicate appends are refused, which is what collapses at-least-once
// redelivery into exactly-once storage.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <tuple>
#include <vector>

#include <json.hpp>

#include "ardueco/core.hpp"
#include "ardueco/reading.hpp"

namespace ardueco::ingest {

struct IngestRecord {
    std::string device_id;
    Reading reading;
    double server_received_at = 0.0;
    bool operator==(const IngestRecord&) const = default;
};

inline nlohmann::json record_to_json(const IngestRecord& r) {
    auto j = reading_to_json(r.reading);
    j["device"] = r.device_id;
    j["recv"] = r.server_received_at;
    return j;
}

inline Result<IngestRecord, ParseFailure> record_from_json(const nlohmann::json& j) {
    auto reading = reading_from_json(j);
    if (!reading.ok()) return reading.error();
    IngestRecord r;
    r.reading = std::move(reading).value();
    try {
        r.device_id = j.at("device").get<std::string>();
        r.server_received_at = j.at("recv").get<double>();
    } catch (const nlohmann::json::exception& e) {
        return ParseFailure{e.what()};
    }
    if (r.device_id.empty()) return ParseFailure{"empty device id"};
    return r;
}

struct BBox {
    double lat_min, lat_max, lon_min, lon_max;
    bool contains(double lat, double lon) const {
        return lat >= lat_min && lat <= lat_max && lon >= lon_min && lon <= lon_max;
    }
};

struct TimeRange {
    double utc_min, utc_max;  // inclusive
};

struct QueryFilter {
    std::optional<BBox> bbox;           // matches fixed readings inside the box
    std::optional<TimeRange> time;
    std::optional<std::string> ride_id;
    std::optional<std::string> device_id;
};

class ReadingStore {
public:
    ReadingStore() = default;  // memory-only

    // File-backed: loads existing rows (rebuilding the dedup index), then
    // appends durably. I/O failures surface as the error string.
    static Result<ReadingStore, std::string> open(const std::filesystem::path& path) {
        ReadingStore s;
        s.path_ = path;
        if (std::filesystem::exists(path)) {
            std::ifstream in(path);
            if (!in) return std::string("cannot read " + path.string());
            std::string line;
            while (std::getline(in, line)) {
                if (line.empty()) continue;
                const auto j = nlohmann::json::parse(line, nullptr, false);
                if (j.is_discarded()) {
                    ++s.load_skipped_;  // torn tail or corruption: never a crash
                    continue;
                }
                auto rec = record_from_json(j);
                if (!rec.ok()) {
                    ++s.load_skipped_;
                    continue;
                }
                s.insert_memory(std::move(rec).value());
            }
        }
        s.out_.emplace(path, std::ios::app);
        if (!*s.out_) return std::string("cannot append to " + path.string());
        return s;
    }

    // False = duplicate key, record not stored.
    bool append(IngestRecord record) {
        if (!insert_memory(record)) return false;
        if (out_) {
            *out_ << record_to_json(record).dump() << '\n';
            out_->flush();
            if (!*out_) throw std::runtime_error("store append failed: " + path_.string());
        }
        return true;
    }

    bool contains(const std::string& device, const std::string& ride, std::uint64_t seq) const {
        return keys_.count({device, ride, seq}) != 0;
    }

    std::size_t size() const { return records_.size(); }
    const std::vector<IngestRecord>& records() const { return records_; }
    std::uint64_t load_skipped() const { return load_skipped_; }
    const std::filesystem::path& path() const { return path_; }

    // All filter dimensions AND together; results ordered by (ride, seq,
    // device). A bbox can only match readings with a fix.
    std::vector<IngestRecord> query(const QueryFilter& f) const {
        std::vector<IngestRecord> out;
        for (const auto& r : records_) {
            if (f.ride_id && r.reading.ride_id != *f.ride_id) continue;
            if (f.device_id && r.device_id != *f.device_id) continue;
            if (f.time && (r.reading.utc_s < f.time->utc_min || r.reading.utc_s > f.time->utc_max)) continue;
            if (f.bbox && !(r.reading.fix_valid && f.bbox->contains(r.reading.lat, r.reading.lon))) continue;
            out.push_back(r);
        }
        std::sort(out.begin(), out.end(), [](const IngestRecord& a, const IngestRecord& b) {
            return std::tie(a.reading.ride_id, a.reading.seq, a.device_id) <
                   std::tie(b.reading.ride_id, b.reading.seq, b.device_id);
        });
        return out;
    }

    void flush() {
        if (out_) out_->flush();
    }

private:
    bool insert_memory(IngestRecord record) {
        if (!keys_.emplace(record.device_id, record.reading.ride_id, record.reading.seq).second)
            return false;
        records_.push_back(std::move(record));
        return true;
    }

    std::vector<IngestRecord> records_;
    std::set<std::tuple<std::string, std::string, std::uint64_t>> keys_;
    std::optional<std::ofstream> out_;
    std::filesystem::path path_;
    std::uint64_t load_skipped_ = 0;
};

}  // namespace ardueco::ingest
