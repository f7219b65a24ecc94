// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <string>
#include <stdexcept>
#include <vector>

#include "kwsim/fixedpoint.hpp"
#include "kwsim/layers.hpp"
#include "kwsim/tensor.hpp"

namespace kwsim {

class InvalidCutoffs : public std::runtime_error {
public:
    explicit InvalidCutoffs(const std::string& what) : std::runtime_error(what) {}
};

// Cutoffs are normalized frequencies (cycles per sample): 0 < f1 < f2 <= 1/2.
inline void validate_cutoffs(double f1, double f2) {
    if (!(f1 > 0.0) || !(f2 > f1) || !(f2 <= 0.5))
        throw InvalidCutoffs("band-pass cutoffs must satisfy 0 < low < high <= Nyquist");
}

namespace detail {
inline double hamming(int n, int k) {
    return 0.54 + 0.46 * std::cos(2.0 * std::numbers::pi * double(n) / double(k - 1));
}
} // namespace detail

// Hamming-windowed ideal band-pass impulse response, centered on tap (k-1)/2:
//   g(n) = (sin(2*pi*f2*n) - sin(2*pi*f1*n)) / (pi*n),  g(0) = 2*(f2 - f1).
inline std::vector<double> sinc_bandpass_kernel(double f1, double f2, int k) {
    validate_cutoffs(f1, f2);
    if (k < 3 || (k % 2) == 0) throw InvalidCutoffs("kernel size must be odd and >= 3");
    const double pi = std::numbers::pi;
    std::vector<double> g(static_cast<size_t>(k));
    const int c = (k - 1) / 2;
    for (int i = 0; i < k; ++i) {
        const int n = i - c;
        double v = (n == 0) ? 2.0 * (f2 - f1)
                            : (std::sin(2.0 * pi * f2 * n) - std::sin(2.0 * pi * f1 * n)) /
                                  (pi * double(n));
        g[size_t(i)] = v * detail::hamming(n, k);
    }
    return g;
}

// Partial derivatives of the windowed kernel w.r.t. the cutoffs; both
// collapse to 2*cos(2*pi*f*n) * window(n), exact at n = 0 as well.
inline std::vector<double> sinc_kernel_grad(double f, int k, bool upper) {
    const double pi = std::numbers::pi;
    std::vector<double> d(static_cast<size_t>(k));
    const int c = (k - 1) / 2;
    for (int i = 0; i < k; ++i) {
        const int n = i - c;
        const double v = 2.0 * std::cos(2.0 * pi * f * n) * (upper ? 1.0 : -1.0);
        d[size_t(i)] = v * detail::hamming(n, k);
    }
    return d;
}

// Binarize float kernels by sign (tie -> +1). A useful band-pass must excite
// both polarities; a single-signed row means the band is degenerate.
inline BinTensor binarize_kernels(const std::vector<std::vector<double>>& kernels) {
    if (kernels.empty()) throw InvalidCutoffs("no kernels");
    const int k = int(kernels.front().size());
    BinTensor w(int(kernels.size()), k);
    for (int f = 0; f < int(kernels.size()); ++f) {
        if (int(kernels[size_t(f)].size()) != k) throw ShapeMismatch("ragged kernel set");
        bool pos = false, neg = false;
        for (int i = 0; i < k; ++i) {
            const int s = kernels[size_t(f)][size_t(i)] >= 0.0 ? +1 : -1;
            (s > 0 ? pos : neg) = true;
            w.set(f, i, s);
        }
        if (!pos || !neg)
            throw InvalidCutoffs("binarized band-pass kernel is single-signed (degenerate band)");
    }
    return w;
}

// ±1-weight x 8-bit-input "same" convolution over one audio channel, computed
// the way the digital front-end PE does it: one XNOR-popcount per input bit
// plane, recombined with power-of-two weighting (the top plane carries the
// two's-complement sign weight -2^7). Input raws must fit in 8 bits; padding
// is silence (raw 0). Output: exact integer dot products per (filter, t).
inline IntTensor sinc_conv(const QTensor& audio, const BinTensor& kernels) {
    if (audio.shape().size() != 1) throw ShapeMismatch("sinc_conv: audio must be 1-D");
    const int L = audio.shape()[0];
    const int F = kernels.rows();
    const int k = kernels.cols();
    if ((k % 2) == 0 || k > 64) throw ShapeMismatch("sinc_conv: kernel must be odd, <= 64 taps");

    // Pack the eight bit planes of the signal once.
    const size_t words = (size_t(L) + 63) / 64;
    std::vector<std::vector<uint64_t>> plane(8, std::vector<uint64_t>(words, 0));
    for (int t = 0; t < L; ++t) {
        const int32_t raw = audio.raw(t);
        if (raw < -128 || raw > 127) throw ShapeMismatch("sinc_conv: sample exceeds 8 bits");
        const uint8_t u = uint8_t(int8_t(raw));
        for (int b = 0; b < 8; ++b)
            if ((u >> b) & 1) plane[size_t(b)][size_t(t) >> 6] |= uint64_t(1) << (t & 63);
    }

    IntTensor out(F, L);
    const uint64_t mask = (k == 64) ? ~uint64_t(0) : ((uint64_t(1) << k) - 1);
    for (int f = 0; f < F; ++f) {
        const uint64_t wrow = kernels.row(f)[0] & mask;
        const int wones = std::popcount(wrow);
        for (int t = 0; t < L; ++t) {
            const int start = t - (k - 1) / 2;
            int32_t acc = 0;
            for (int b = 0; b < 8; ++b) {
                const uint64_t p = extract_bits(plane[size_t(b)].data(), L, start, k);
                // sum over taps of w_j * bit_j, from the XNOR match count
                const int32_t cnt = std::popcount(~(wrow ^ p) & mask) + wones - k;
                acc += (b == 7 ? -128 : (1 << b)) * cnt;
            }
            out.at(f, t) = acc;
        }
    }
    return out;
}

} // namespace kwsim
