// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <vector>

#include "kwsim/rng.hpp"
#include "kwsim/tensor.hpp"

namespace kwsim {

// ===== Bias mapping =========================================================

// A folded BN bias is stored as one wordline of ±1 cells whose sum equals the
// bias, so a representable bias must be even (the array width is even) and
// within ±width. The four methods differ only in which even neighbour an odd
// bias rounds to. Enum order breaks accuracy ties in select_mapping.
enum class BiasMapMethod : uint8_t { add = 0, absolute_add = 1, sub = 2, absolute_sub = 3 };

inline const char* to_string(BiasMapMethod m) {
    switch (m) {
        case BiasMapMethod::add: return "add";
        case BiasMapMethod::absolute_add: return "absolute_add";
        case BiasMapMethod::sub: return "sub";
        case BiasMapMethod::absolute_sub: return "absolute_sub";
    }
    return "?";
}

struct MappedBias {
    int mapped = 0;       // even, in [-width, width]
    bool clamped = false; // |bias| exceeded the wordline range
    uint64_t cells = 0;   // width cells, (width + mapped)/2 ones
    int width = 64;
};

inline MappedBias map_bias(int bias, BiasMapMethod method, int width = 64) {
    if (width < 2 || width > 64 || (width & 1))
        throw std::invalid_argument("map_bias: width must be even, in [2, 64]");
    auto even_up = [](int b) { return b >= 0 ? (b + 1) / 2 * 2 : -((-b) / 2 * 2); };
    auto even_down = [](int b) { return b >= 0 ? b / 2 * 2 : -(((-b) + 1) / 2 * 2); };
    int m = 0;
    switch (method) {
        case BiasMapMethod::add: m = even_up(bias); break;
        case BiasMapMethod::sub: m = even_down(bias); break;
        case BiasMapMethod::absolute_add: m = (bias < 0 ? -1 : 1) * ((std::abs(bias) + 1) / 2 * 2); break;
        case BiasMapMethod::absolute_sub: m = (bias < 0 ? -1 : 1) * (std::abs(bias) / 2 * 2); break;
    }
    MappedBias out;
    out.width = width;
    out.clamped = m < -width || m > width;
    out.mapped = std::clamp(m, -width, width);
    const int ones = (width + out.mapped) / 2;
    out.cells = (ones == 64) ? ~uint64_t(0) : ((uint64_t(1) << ones) - 1);
    return out;
}

// Sum of the ±1 cells on a bias wordline — must reproduce the mapped value.
inline int bias_readback(const MappedBias& b) {
    return 2 * std::popcount(b.cells) - b.width;
}

// ===== Noise model ==========================================================

// Units are one cell contribution (one LSB of the signed popcount).
//  - mav_offset_sigma: offset on the AVG differential; static per
//    (macro instance, bank) when static_per_column is set, else per read.
//  - sa_sigma: sense-amp input noise, drawn per read.
struct NoiseModel {
    double mav_offset_sigma = 0.0;
    double sa_sigma = 0.0;
    bool static_per_column = true;
    uint64_t seed = 0;

    bool is_zero() const { return mav_offset_sigma == 0.0 && sa_sigma == 0.0; }
};

// ===== IMC macro ============================================================

class MacroNotLoaded : public std::runtime_error {
public:
    MacroNotLoaded() : std::runtime_error("imc macro: bank not loaded") {}
};

// One macro: 8 banks of 64x64 cells computing eight outputs per read. A
// bank holds one flattened ±1 receptive field (row-major across wordlines,
// 64 cells each) plus one bias wordline. Charge from all activated rows
// accumulates before the single sense-amp decision, so reads with more than
// 64 terms still quantize once. All banks of a macro read the same window.
class ImcMacro {
public:
    static constexpr int kBanks = 8;
    static constexpr int kRowCells = 64;
    static constexpr int kRows = 64;
    static constexpr int kMaxTerms = (kRows - 1) * kRowCells; // one row reserved for bias

    struct Bank {
        bool loaded = false;
        std::vector<uint64_t> weights;
        int bias = 0; // integer contribution of the bias wordline
        bool bias_is_mapped = false;
        MappedBias mapping{};
        double static_offset = 0.0;
    };

    int n_terms() const { return n_terms_; }
    int weight_rows() const { return (n_terms_ + kRowCells - 1) / kRowCells; }
    const Bank& bank(int b) const { return banks_.at(size_t(b)); }
    bool any_loaded() const { return n_terms_ > 0; }

    // Parity/range-constrained load: the bias goes through map_bias.
    MappedBias load_bank(int b, std::span<const uint64_t> weight_bits, int n_terms, int bias,
                         BiasMapMethod method) {
        MappedBias m = map_bias(bias, method);
        Bank& bk = prepare(b, weight_bits, n_terms);
        bk.bias = m.mapped;
        bk.bias_is_mapped = true;
        bk.mapping = m;
        return m;
    }

    // Unconstrained load (pre-constraint checkpoints): bias kept as-is so the
    // zero-noise array stays bit-identical with the digital reference at every
    // pipeline stage. No cell encoding exists for such a bias.
    void load_bank_raw(int b, std::span<const uint64_t> weight_bits, int n_terms, int bias) {
        Bank& bk = prepare(b, weight_bits, n_terms);
        bk.bias = bias;
        bk.bias_is_mapped = false;
    }

    void set_static_offset(int b, double v) { banks_.at(size_t(b)).static_offset = v; }

    // Draw static per-bank MAV offsets for this macro instance. `key` should
    // identify the instance (layer, macro index) so offsets are stable within
    // a run and independent across macros.
    void draw_static_offsets(const NoiseModel& noise, uint64_t key) {
        if (noise.mav_offset_sigma == 0.0 || !noise.static_per_column) return;
        for (int b = 0; b < kBanks; ++b) {
            if (!banks_[size_t(b)].loaded) continue;
            RngStream s = RngStream::derive(noise.seed, {0x6d617631ull, key, uint64_t(b)});
            banks_[size_t(b)].static_offset = noise.mav_offset_sigma * s.next_gaussian();
        }
    }

    // Exact digital sum of one bank for a window (bias included).
    int32_t digital_sum(int b, const uint64_t* window) const {
        const Bank& bk = banks_.at(size_t(b));
        if (!bk.loaded) throw MacroNotLoaded();
        return xnor_dot(bk.weights.data(), window, n_terms_) + bk.bias;
    }

    // Pre-comparator analog value per loaded bank (sum + bias + noise).
    // Instrumentation path: used by test mode and compensation statistics.
    void mav_raw(const uint64_t* window, const NoiseModel& noise, RngStream& rng,
                 std::array<double, kBanks>& out) const {
        for (int b = 0; b < kBanks; ++b) {
            const Bank& bk = banks_[size_t(b)];
            if (!bk.loaded) {
                out[size_t(b)] = 0.0;
                continue;
            }
            double s = double(xnor_dot(bk.weights.data(), window, n_terms_) + bk.bias);
            if (noise.mav_offset_sigma != 0.0) {
                if (noise.static_per_column) s += bk.static_offset;
                else s += noise.mav_offset_sigma * rng.next_gaussian();
            } else {
                s += bk.static_offset; // forced offsets (fault injection)
            }
            if (noise.sa_sigma != 0.0) s += noise.sa_sigma * rng.next_gaussian();
            out[size_t(b)] = s;
        }
    }

    // One read. Returns +1/-1 per loaded bank (0 for unloaded). The zero-noise
    // path is exact integer arithmetic and consumes no randomness.
    std::array<int8_t, kBanks> mav_compute(const uint64_t* window, const NoiseModel& noise,
                                           RngStream& rng) const {
        std::array<int8_t, kBanks> out{};
        if (noise.is_zero() && !has_forced_offset()) {
            for (int b = 0; b < kBanks; ++b)
                if (banks_[size_t(b)].loaded) out[size_t(b)] = digital_sum(b, window) >= 0 ? +1 : -1;
            return out;
        }
        std::array<double, kBanks> analog{};
        mav_raw(window, noise, rng, analog);
        for (int b = 0; b < kBanks; ++b)
            if (banks_[size_t(b)].loaded) out[size_t(b)] = analog[size_t(b)] >= 0.0 ? +1 : -1;
        return out;
    }

private:
    bool has_forced_offset() const {
        for (const Bank& b : banks_)
            if (b.loaded && b.static_offset != 0.0) return true;
        return false;
    }

    Bank& prepare(int b, std::span<const uint64_t> weight_bits, int n_terms) {
        if (b < 0 || b >= kBanks) throw std::invalid_argument("imc macro: bank index");
        if (n_terms < 1 || n_terms > kMaxTerms)
            throw std::invalid_argument("imc macro: receptive field exceeds array rows");
        if (n_terms_ != 0 && n_terms != n_terms_)
            throw std::invalid_argument("imc macro: banks must share one geometry");
        const size_t need = (size_t(n_terms) + 63) / 64;
        if (weight_bits.size() < need) throw std::invalid_argument("imc macro: short weight span");
        n_terms_ = n_terms;
        Bank& bk = banks_[size_t(b)];
        bk.loaded = true;
        bk.weights.assign(weight_bits.begin(), weight_bits.begin() + ptrdiff_t(need));
        // Mask tail bits so xnor_dot sees deterministic padding.
        const int rem = n_terms & 63;
        if (rem) bk.weights.back() &= (uint64_t(1) << rem) - 1;
        bk.static_offset = 0.0;
        return bk;
    }

    int n_terms_ = 0;
    std::array<Bank, kBanks> banks_{};
};

// ===== Variation test mode ==================================================

struct BankVariation {
    int bank = 0;
    int patterns = 0;
    int disagreements = 0;
    double mean_margin = 0.0;     // mean of -s over disagreeing patterns
    double estimated_offset = 0.0;
};

// Deterministic ±1 window patterns for characterization.
inline std::vector<std::vector<uint64_t>> make_test_patterns(int n_terms, int count,
                                                             uint64_t seed) {
    RngStream rng = RngStream::derive(seed, {0x74657374ull});
    const size_t words = (size_t(n_terms) + 63) / 64;
    std::vector<std::vector<uint64_t>> out(static_cast<size_t>(count));
    for (auto& p : out) {
        p.resize(words);
        for (auto& w : p) w = rng.next_u64();
        const int rem = n_terms & 63;
        if (rem) p.back() &= (uint64_t(1) << rem) - 1;
    }
    return out;
}

// Run known patterns through the noisy array and compare against the exact
// digital result. The offset estimate inverts the flip-margin statistics of
// a constant offset on the bank's (parity-constrained) sum grid:
// offset ~= 2 * mean(-s over flips) - (2 if the sum parity is even else 0).
inline std::vector<BankVariation> test_mode(const ImcMacro& macro,
                                            std::span<const std::vector<uint64_t>> patterns,
                                            const NoiseModel& noise, RngStream& rng) {
    std::vector<BankVariation> report;
    std::vector<double> margins[ImcMacro::kBanks];
    std::vector<int> counts(ImcMacro::kBanks, 0);
    for (const auto& p : patterns) {
        auto got = macro.mav_compute(p.data(), noise, rng);
        for (int b = 0; b < ImcMacro::kBanks; ++b) {
            if (!macro.bank(b).loaded) continue;
            counts[size_t(b)]++;
            const int32_t s = macro.digital_sum(b, p.data());
            const int8_t want = s >= 0 ? +1 : -1;
            if (got[size_t(b)] != want) margins[b].push_back(double(-s));
        }
    }
    for (int b = 0; b < ImcMacro::kBanks; ++b) {
        if (!macro.bank(b).loaded) continue;
        BankVariation v;
        v.bank = b;
        v.patterns = counts[size_t(b)];
        v.disagreements = int(margins[b].size());
        if (!margins[b].empty()) {
            double m = 0;
            for (double x : margins[b]) m += x;
            m /= double(margins[b].size());
            v.mean_margin = m;
            const bool even_parity = ((macro.n_terms() + macro.bank(b).bias) & 1) == 0;
            v.estimated_offset = 2.0 * m - (even_parity ? 2.0 : 0.0);
        }
        report.push_back(v);
    }
    return report;
}

} // namespace kwsim
