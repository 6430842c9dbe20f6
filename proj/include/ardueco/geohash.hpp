#pragma once

// Standard base-32 geohash: longitude and latitude bisections interleaved
// (longitude first), 5 bits per output character.

#include <string>
#include <string_view>

namespace ardueco::geohash {

inline constexpr char kAlphabet[] = "0123456789bcdefghjkmnpqrstuvwxyz";

inline std::string encode(double lat, double lon, int precision) {
    if (precision < 1) precision = 1;
    if (precision > 12) precision = 12;
    double lat_lo = -90.0, lat_hi = 90.0, lon_lo = -180.0, lon_hi = 180.0;
    std::string out;
    out.reserve(static_cast<std::size_t>(precision));
    int bits = 0, ch = 0;
    bool lon_turn = true;
    while (static_cast<int>(out.size()) < precision) {
        if (lon_turn) {
            const double mid = (lon_lo + lon_hi) / 2.0;
            if (lon >= mid) {
                ch = ch << 1 | 1;
                lon_lo = mid;
            } else {
                ch <<= 1;
                lon_hi = mid;
            }
        } else {
            const double mid = (lat_lo + lat_hi) / 2.0;
            if (lat >= mid) {
                ch = ch << 1 | 1;
                lat_lo = mid;
            } else {
                ch <<= 1;
                lat_hi = mid;
            }
        }
        lon_turn = !lon_turn;
        if (++bits == 5) {
            out += kAlphabet[ch];
            bits = 0;
            ch = 0;
        }
    }
    return out;
}

struct BoundingBox {
    double lat_min, lat_max, lon_min, lon_max;
    bool contains(double lat, double lon) const {
        return lat >= lat_min && lat < lat_max && lon >= lon_min && lon < lon_max;
    }
};

// Inverse walk of the same bisection; unknown characters stop the refinement.
inline BoundingBox decode_bbox(std::string_view cell) {
    BoundingBox box{-90.0, 90.0, -180.0, 180.0};
    bool lon_turn = true;
    for (const char c : cell) {
        int value = -1;
        for (int i = 0; i < 32; ++i)
            if (kAlphabet[i] == c) {
                value = i;
                break;
            }
        if (value < 0) break;
        for (int bit = 4; bit >= 0; --bit) {
            const bool high = (value >> bit) & 1;
            if (lon_turn) {
                const double mid = (box.lon_min + box.lon_max) / 2.0;
                (high ? box.lon_min : box.lon_max) = mid;
            } else {
                const double mid = (box.lat_min + box.lat_max) / 2.0;
                (high ? box.lat_min : box.lat_max) = mid;
            }
            lon_turn = !lon_turn;
        }
    }
    return box;
}

}  // namespace ardueco::geohash
