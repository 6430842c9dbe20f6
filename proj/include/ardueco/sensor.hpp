#pragma once

// MQ-7 transfer function, both directions: ADC counts -> ppm for the
// firmware, ppm -> noisy counts for the simulator. Power-law model
// ppm = a * (Rs/R0)^b over the voltage divider Rs/RL.

#include <cmath>
#include <cstdint>
#include <string>

#include "ardueco/core.hpp"

namespace ardueco::sensor {

enum class SensorError { SaturatedLow, SaturatedHigh };

struct SensorCurve {
    double a = 99.0;     // ppm scale, > 0
    double b = -1.5;     // exponent, < 0
    double r0 = 10000.0; // clean-air baseline resistance, ohms
    double rl = 10000.0; // load resistance, ohms
    double vcc = 5.0;    // supply volts
    int adc_max = 4095;  // full-scale count; 12-bit external ADC
};

inline bool curve_valid(const SensorCurve& c) {
    return c.a > 0 && c.b < 0 && c.r0 > 0 && c.rl > 0 && c.vcc > 0 && c.adc_max >= 1;
}

struct ChannelSpec {
    int channel_id = 0;
    SensorCurve curve;
    std::string label = "CO";
};

// counts -> ppm. Endpoints are singular: counts<=0 reads zero volts
// (Rs unbounded), counts>=adc_max reads full rail (Rs = 0).
inline Result<double, SensorError> adc_to_ppm(int counts, const SensorCurve& c) {
    if (counts <= 0) return SensorError::SaturatedLow;
    if (counts >= c.adc_max) return SensorError::SaturatedHigh;
    const double v = static_cast<double>(counts) / c.adc_max * c.vcc;
    const double rs = c.rl * (c.vcc - v) / v;
    return c.a * std::pow(rs / c.r0, c.b);
}

// Exact algebraic inverse, rounded to the nearest count and clamped to
// [1, adc_max-1]; clamping absorbs out-of-range concentrations.
inline int ppm_to_adc(double ppm, const SensorCurve& c) {
    if (!(ppm > 0.0)) return 1;
    const double rs = c.r0 * std::pow(ppm / c.a, 1.0 / c.b);
    const double counts = c.adc_max * c.rl / (rs + c.rl);
    const long rounded = std::lround(counts);
    if (rounded < 1) return 1;
    if (rounded > c.adc_max - 1) return c.adc_max - 1;
    return static_cast<int>(rounded);
}

// ppm_to_adc plus Gaussian integer noise in counts, clamped to the same
// non-saturating range. noise_sd = 0 leaves the rng untouched.
inline int sample_with_noise(double ppm_true, const SensorCurve& c, double noise_sd, Rng& rng) {
    int counts = ppm_to_adc(ppm_true, c);
    if (noise_sd > 0.0) {
        counts += static_cast<int>(std::lround(rng.normal(0.0, noise_sd)));
        if (counts < 1) counts = 1;
        if (counts > c.adc_max - 1) counts = c.adc_max - 1;
    }
    return counts;
}

}  // namespace ardueco::sensor
