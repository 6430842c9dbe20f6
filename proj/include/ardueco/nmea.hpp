#pragma once

// NMEA-0183 sentence handling: checksum verification, sentence parsing,
// GGA/RMC fix extraction and GGA rendering for the simulated GPS feed.
// Lines are ASCII "$<payload>*HH" optionally followed by CRLF.

#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "ardueco/core.hpp"

namespace ardueco::nmea {

enum class NmeaError {
    MalformedFrame,    // no '$', no '*HH' tail, or empty address
    ChecksumMismatch,  // well-framed but XOR does not match
    BadField,          // non-numeric coordinate/number where one is required
    OutOfRange,        // coordinate outside [-90,90] / [-180,180]
};

enum class SentenceKind { Gga, Rmc, Other };

struct RawSentence {
    std::string talker;               // 2-char talker id, e.g. "GP"
    SentenceKind kind = SentenceKind::Other;
    std::vector<std::string> fields;  // data fields after the address, empties preserved
    std::uint8_t checksum = 0;        // value parsed from the trailing hex pair
};

struct GpsFix {
    double utc_time = 0.0;   // seconds of day
    double latitude = 0.0;   // decimal degrees, [-90, 90]
    double longitude = 0.0;  // decimal degrees, [-180, 180]
    int quality = 0;         // 0 = no fix
    int satellites = 0;
    bool valid = false;      // valid=false => coordinates must not be used
};

namespace detail {

inline std::string_view strip_crlf(std::string_view line) {
    while (!line.empty() && (line.back() == '\r' || line.back() == '\n')) line.remove_suffix(1);
    return line;
}

inline int hex_digit(char c) {
    if (c >= '0' && c <= '9') return c - '0';
    if (c >= 'A' && c <= 'F') return c - 'A' + 10;
    if (c >= 'a' && c <= 'f') return c - 'a' + 10;
    return -1;
}

// Frame = payload between '$' and '*', plus the parsed checksum byte.
struct Frame {
    std::string_view payload;
    std::uint8_t declared = 0;
    std::uint8_t computed = 0;
};

inline Result<Frame, NmeaError> split_frame(std::string_view line) {
    line = strip_crlf(line);
    if (line.size() < 4 || line.front() != '$') return NmeaError::MalformedFrame;
    const auto star = line.rfind('*');
    if (star == std::string_view::npos || star + 3 != line.size()) return NmeaError::MalformedFrame;
    const int hi = hex_digit(line[star + 1]);
    const int lo = hex_digit(line[star + 2]);
    if (hi < 0 || lo < 0) return NmeaError::MalformedFrame;
    Frame f;
    f.payload = line.substr(1, star - 1);
    f.declared = static_cast<std::uint8_t>(hi << 4 | lo);
    std::uint8_t x = 0;
    for (char c : f.payload) x ^= static_cast<std::uint8_t>(c);
    f.computed = x;
    return f;
}

inline bool parse_double(std::string_view s, double& out) {
    const char* end = s.data() + s.size();
    auto [p, ec] = std::from_chars(s.data(), end, out);
    return ec == std::errc() && p == end;
}

inline bool parse_int(std::string_view s, int& out) {
    const char* end = s.data() + s.size();
    auto [p, ec] = std::from_chars(s.data(), end, out);
    return ec == std::errc() && p == end;
}

// "ddmm.mmmm" + hemisphere letter -> signed decimal degrees.
inline Result<double, NmeaError> parse_coord(std::string_view value, std::string_view hemi, bool is_lat) {
    double raw = 0.0;
    if (!parse_double(value, raw) || raw < 0.0) return NmeaError::BadField;
    const double deg = std::floor(raw / 100.0);
    const double minutes = raw - deg * 100.0;
    if (minutes >= 60.0) return NmeaError::BadField;
    double dd = deg + minutes / 60.0;
    if (hemi == "S" || hemi == "W")
        dd = -dd;
    else if (hemi != "N" && hemi != "E")
        return NmeaError::BadField;
    const double bound = is_lat ? 90.0 : 180.0;
    if (dd < -bound || dd > bound) return NmeaError::OutOfRange;
    return dd;
}

// "hhmmss.sss" -> seconds of day (empty -> 0).
inline Result<double, NmeaError> parse_utc(std::string_view s) {
    if (s.empty()) return 0.0;
    if (s.size() < 6) return NmeaError::BadField;
    int hh = 0, mm = 0;
    double ss = 0.0;
    if (!parse_int(s.substr(0, 2), hh) || !parse_int(s.substr(2, 2), mm) || !parse_double(s.substr(4), ss))
        return NmeaError::BadField;
    if (hh > 23 || mm > 59 || ss >= 61.0) return NmeaError::BadField;
    return hh * 3600.0 + mm * 60.0 + ss;
}

}  // namespace detail

// True iff the XOR of payload bytes equals the trailing hex pair.
// Malformed frames are an error, distinct from a checksum mismatch.
inline Result<bool, NmeaError> verify_checksum(std::string_view line) {
    auto frame = detail::split_frame(line);
    if (!frame.ok()) return frame.error();
    return frame.value().computed == frame.value().declared;
}

inline Result<RawSentence, NmeaError> parse_sentence(std::string_view line) {
    auto frame = detail::split_frame(line);
    if (!frame.ok()) return frame.error();
    const auto& f = frame.value();
    if (f.computed != f.declared) return NmeaError::ChecksumMismatch;

    std::string_view payload = f.payload;
    RawSentence s;
    s.checksum = f.declared;

    std::size_t pos = payload.find(',');
    const std::string_view address = payload.substr(0, pos);
    if (address.size() < 2) return NmeaError::MalformedFrame;
    s.talker = std::string(address.substr(0, 2));
    const std::string_view type = address.substr(2);
    if (type == "GGA")
        s.kind = SentenceKind::Gga;
    else if (type == "RMC")
        s.kind = SentenceKind::Rmc;

    while (pos != std::string_view::npos) {
        payload.remove_prefix(pos + 1);
        pos = payload.find(',');
        s.fields.emplace_back(payload.substr(0, pos));
    }
    return s;
}

// GGA/RMC -> fix; any other kind -> nullopt. Empty coordinates with no fix
// (quality 0 / RMC status "V") yield valid=false, as real modules do before
// first fix; garbage in a coordinate field is still an error.
inline Result<std::optional<GpsFix>, NmeaError> extract_fix(const RawSentence& s) {
    if (s.kind == SentenceKind::Other) return std::optional<GpsFix>{};

    auto field = [&](std::size_t i) -> std::string_view {
        return i < s.fields.size() ? std::string_view(s.fields[i]) : std::string_view{};
    };

    GpsFix fix;
    std::string_view lat_f, lat_h, lon_f, lon_h;
    if (s.kind == SentenceKind::Gga) {
        lat_f = field(1), lat_h = field(2), lon_f = field(3), lon_h = field(4);
        if (!field(5).empty() && !detail::parse_int(field(5), fix.quality)) return NmeaError::BadField;
        if (!field(6).empty() && !detail::parse_int(field(6), fix.satellites)) return NmeaError::BadField;
        if (fix.quality < 0) return NmeaError::BadField;
    } else {
        lat_f = field(2), lat_h = field(3), lon_f = field(4), lon_h = field(5);
        fix.quality = field(1) == "A" ? 1 : 0;
    }

    auto utc = detail::parse_utc(field(0));
    if (!utc.ok()) return utc.error();
    fix.utc_time = utc.value();

    fix.valid = fix.quality >= 1;
    if (lat_f.empty() && lon_f.empty()) {
        if (fix.valid) return NmeaError::BadField;  // a fix without coordinates is malformed
        return std::optional<GpsFix>{fix};
    }
    auto lat = detail::parse_coord(lat_f, lat_h, true);
    if (!lat.ok()) return lat.error();
    auto lon = detail::parse_coord(lon_f, lon_h, false);
    if (!lon.ok()) return lon.error();
    fix.latitude = lat.value();
    fix.longitude = lon.value();
    return std::optional<GpsFix>{fix};
}

namespace detail {

// Degrees -> "ddmm.mmmm" with 4 decimal places of minutes (bounds the
// parse/render round-trip error at 0.5e-4 min = 8.34e-7 deg).
inline void append_coord(std::string& out, double degrees, int deg_digits, char pos_hemi, char neg_hemi) {
    const char hemi = degrees < 0 ? neg_hemi : pos_hemi;
    const double a = std::abs(degrees);
    int deg = static_cast<int>(a);
    double minutes = (a - deg) * 60.0;
    if (minutes >= 59.99995) {  // carry after rounding to 4 decimals
        minutes = 0.0;
        ++deg;
    }
    char buf[32];
    std::snprintf(buf, sizeof buf, "%0*d%07.4f,%c", deg_digits, deg, minutes, hemi);
    out += buf;
}

inline void append_checksum_crlf(std::string& out) {
    std::uint8_t x = 0;
    for (std::size_t i = 1; i < out.size(); ++i) x ^= static_cast<std::uint8_t>(out[i]);
    char buf[8];
    std::snprintf(buf, sizeof buf, "*%02X\r\n", x);
    out += buf;
}

}  // namespace detail

// Renders a GGA sentence the firmware can parse back; coordinates round-trip
// within 1e-6 degrees. Invalid fixes render quality 0 with empty coordinates.
inline Result<std::string, NmeaError> render_gga(const GpsFix& fix) {
    if (fix.latitude < -90.0 || fix.latitude > 90.0 || fix.longitude < -180.0 || fix.longitude > 180.0)
        return NmeaError::OutOfRange;

    std::string out = "$GPGGA,";
    const double t = fix.utc_time;
    char buf[32];
    std::snprintf(buf, sizeof buf, "%02d%02d%05.2f,", static_cast<int>(t / 3600) % 24,
                  static_cast<int>(t / 60) % 60, std::fmod(t, 60.0));
    out += buf;

    if (fix.valid) {
        detail::append_coord(out, fix.latitude, 2, 'N', 'S');
        out += ',';
        detail::append_coord(out, fix.longitude, 3, 'E', 'W');
        const int quality = fix.quality >= 1 ? fix.quality : 1;
        std::snprintf(buf, sizeof buf, ",%d,%02d,", quality, fix.satellites);
        out += buf;
        out += "1.0,0.0,M,0.0,M,,";
    } else {
        out += ",,,,0,00,,,M,,M,,";
    }
    detail::append_checksum_crlf(out);
    return out;
}

}  // namespace ardueco::nmea
