// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace kwsim {

// ===== Formats ==============================================================

enum class RoundMode {
    nearest_even, // parameter quantization
    toward_zero   // datapath division / truncating hardware
};

// Signed fixed-point format: 1 sign bit + int_bits + frac_bits, total <= 16.
// Value range is [-(2^int_bits), 2^int_bits - 2^-frac_bits].
struct QFormat {
    uint8_t int_bits = 0;
    uint8_t frac_bits = 0;

    constexpr int total_bits() const { return 1 + int_bits + frac_bits; }
    constexpr int32_t raw_min() const { return -(int32_t(1) << (int_bits + frac_bits)); }
    constexpr int32_t raw_max() const { return (int32_t(1) << (int_bits + frac_bits)) - 1; }
    double resolution() const { return std::ldexp(1.0, -frac_bits); }
    double min_value() const { return std::ldexp(double(raw_min()), -frac_bits); }
    double max_value() const { return std::ldexp(double(raw_max()), -frac_bits); }

    constexpr bool operator==(const QFormat&) const = default;

    std::string to_string() const {
        return "Q(1," + std::to_string(int_bits) + "," + std::to_string(frac_bits) + ")";
    }
};

// Fixed bus formats of the accelerator datapath.
inline constexpr QFormat kWeightFmt{0, 7};      // conv / classifier weights
inline constexpr QFormat kActivationFmt{3, 4};  // activations, scores, audio input
inline constexpr QFormat kGradientFmt{0, 7};    // gradients
inline constexpr QFormat kErrorFmt{0, 7};       // backward errors
inline constexpr QFormat kAccumulatorFmt{7, 8}; // 16-bit accumulators

// A value = raw * 2^-frac_bits. Raw mantissa always within format range.
struct QValue {
    int32_t raw = 0;
    QFormat fmt{};

    double value() const { return std::ldexp(double(raw), -fmt.frac_bits); }
    constexpr bool operator==(const QValue&) const = default;
};

// ===== Rounding / saturation helpers =======================================

// Round m / 2^k with the given mode; k >= 0.
inline int64_t shift_round(int64_t m, int k, RoundMode mode) {
    if (k == 0) return m;
    int64_t q = m >> k; // floor
    int64_t r = m - (q << k);
    if (mode == RoundMode::toward_zero) {
        if (m < 0 && r != 0) ++q;
        return q;
    }
    const int64_t half = int64_t(1) << (k - 1);
    if (r > half || (r == half && (q & 1))) ++q;
    return q;
}

// Clamp a wide mantissa into the format. Saturation is silent; the optional
// flag is for diagnostics only.
inline int32_t saturate_raw(int64_t m, QFormat fmt, bool* saturated = nullptr) {
    if (m < fmt.raw_min()) {
        if (saturated) *saturated = true;
        return fmt.raw_min();
    }
    if (m > fmt.raw_max()) {
        if (saturated) *saturated = true;
        return fmt.raw_max();
    }
    return static_cast<int32_t>(m);
}

// ===== Quantization =========================================================

inline QValue quantize(double x, QFormat fmt, RoundMode mode = RoundMode::nearest_even,
                       bool* saturated = nullptr) {
    if (!std::isfinite(x)) throw std::invalid_argument("quantize: non-finite input");
    const double scaled = std::ldexp(x, fmt.frac_bits);
    // nearbyint ties to even under the default FP environment.
    const double r = (mode == RoundMode::nearest_even) ? std::nearbyint(scaled) : std::trunc(scaled);
    return QValue{saturate_raw(static_cast<int64_t>(r), fmt, saturated), fmt};
}

inline QValue requantize(QValue v, QFormat fmt, RoundMode mode = RoundMode::nearest_even,
                         bool* saturated = nullptr) {
    int64_t m = v.raw;
    if (fmt.frac_bits >= v.fmt.frac_bits) {
        m <<= (fmt.frac_bits - v.fmt.frac_bits);
    } else {
        m = shift_round(m, v.fmt.frac_bits - fmt.frac_bits, mode);
    }
    return QValue{saturate_raw(m, fmt, saturated), fmt};
}

// ===== Arithmetic ===========================================================
//
// All ops compute exactly at wide intermediate width, then round once into
// the output format and saturate (never wrap).

inline QValue qadd(QValue a, QValue b, QFormat out,
                   RoundMode mode = RoundMode::nearest_even, bool* saturated = nullptr) {
    const int frac = std::max(a.fmt.frac_bits, b.fmt.frac_bits);
    const int64_t ma = int64_t(a.raw) << (frac - a.fmt.frac_bits);
    const int64_t mb = int64_t(b.raw) << (frac - b.fmt.frac_bits);
    int64_t m = ma + mb;
    if (out.frac_bits >= frac) m <<= (out.frac_bits - frac);
    else m = shift_round(m, frac - out.frac_bits, mode);
    return QValue{saturate_raw(m, out, saturated), out};
}

inline QValue qsub(QValue a, QValue b, QFormat out,
                   RoundMode mode = RoundMode::nearest_even, bool* saturated = nullptr) {
    return qadd(a, QValue{-b.raw, b.fmt}, out, mode, saturated);
}

inline QValue qmul(QValue a, QValue b, QFormat out,
                   RoundMode mode = RoundMode::nearest_even, bool* saturated = nullptr) {
    const int frac = a.fmt.frac_bits + b.fmt.frac_bits;
    int64_t m = int64_t(a.raw) * int64_t(b.raw);
    if (out.frac_bits >= frac) m <<= (out.frac_bits - frac);
    else m = shift_round(m, frac - out.frac_bits, mode);
    return QValue{saturate_raw(m, out, saturated), out};
}

// ===== Division =============================================================

class DivisionByZero : public std::runtime_error {
public:
    DivisionByZero() : std::runtime_error("fixed_divide: zero denominator") {}
};

// 8-bit-result division used by the on-chip softmax: exact rational
// num/den rounded toward zero into the output format (default: error
// format). Bit-equivalent to the hardware's restoring divider.
inline QValue fixed_divide(QValue num, QValue den, QFormat out = kErrorFmt,
                           bool* saturated = nullptr) {
    if (den.raw == 0) throw DivisionByZero();
    int64_t n = num.raw;
    int64_t d = den.raw;
    const int k = out.frac_bits + den.fmt.frac_bits - num.fmt.frac_bits;
    if (k >= 0) n <<= k;
    else d <<= -k;
    const int64_t q = n / d; // C++ integer division truncates toward zero
    return QValue{saturate_raw(q, out, saturated), out};
}

// ===== Exponential lookup table =============================================
//
// 256-entry table indexed by the raw mantissa of a Q(1,3,4) input, as the
// hardware softmax does. Each entry stores e^z in the tightest 16-bit
// format that fits its magnitude, which keeps the relative error under
// 2^-4 across the whole input domain (a fixed 8-bit entry format cannot:
// it collapses small entries to zero and saturates large ones).

namespace detail {

inline QFormat tightest_fmt(double v) {
    for (int i = 0; i <= 15; ++i) {
        QFormat f{uint8_t(i), uint8_t(15 - i)};
        if (v <= f.max_value()) return f;
    }
    return QFormat{15, 0};
}

inline const std::array<QValue, 256>& exp_table() {
    static const std::array<QValue, 256> table = [] {
        std::array<QValue, 256> t{};
        for (int rawi = -128; rawi <= 127; ++rawi) {
            const double v = std::exp(std::ldexp(double(rawi), -kActivationFmt.frac_bits));
            t[size_t(rawi + 128)] = quantize(v, tightest_fmt(v));
        }
        return t;
    }();
    return table;
}

} // namespace detail

// z must be in the activation format Q(1,3,4).
inline QValue exp_lut(QValue z) {
    if (!(z.fmt == kActivationFmt))
        throw std::invalid_argument("exp_lut: input must be in the activation format");
    return detail::exp_table()[size_t(z.raw + 128)];
}

} // namespace kwsim
