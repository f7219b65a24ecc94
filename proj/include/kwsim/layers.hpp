// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cstdint>
#include <span>
#include <vector>

#include "kwsim/tensor.hpp"

namespace kwsim {

// ===== Packed-window helpers ================================================

// Read k bits [start, start+k) from a packed row of `len` bits; positions
// outside the row read as 0, i.e. the -1 pad value of "same" padding.
inline uint64_t extract_bits(const uint64_t* w, int len, int start, int k) {
    uint64_t out = 0;
    const int lo = std::max(start, 0);
    const int hi = std::min(start + k, len);
    for (int p = lo; p < hi; ++p)
        out |= ((w[size_t(p) >> 6] >> (p & 63)) & 1ull) << (p - start);
    return out;
}

// Flatten the receptive field of group g at output position t into a packed
// window: in-channel-major, tap-minor — the same layout convolution weights
// are stored in (and the order receptive fields are written into IMC rows).
inline void build_conv_window(const BinTensor& x, int g, int in_per_group, int k, int t,
                              uint64_t* buf, size_t nwords) {
    std::fill(buf, buf + nwords, uint64_t(0));
    const int start = t - (k - 1) / 2;
    for (int i = 0; i < in_per_group; ++i) {
        const uint64_t field = extract_bits(x.row(g * in_per_group + i), x.cols(), start, k);
        const int bitpos = i * k;
        buf[bitpos >> 6] |= field << (bitpos & 63);
        if ((bitpos & 63) + k > 64) buf[(bitpos >> 6) + 1] |= field >> (64 - (bitpos & 63));
    }
}

// ===== Binary convolution ===================================================

// Grouped 1-D ±1 convolution, "same" padding with -1 pad value, XNOR-popcount
// reduction. x: (C, L); w: (O, C/groups * k) flattened receptive fields;
// optional per-output-channel integer bias. Output: exact integer sums.
inline IntTensor binary_conv1d(const BinTensor& x, const BinTensor& w, int k, int groups,
                               std::span<const int32_t> bias = {}) {
    const int C = x.rows(), L = x.cols(), O = w.rows();
    if (groups < 1 || C % groups != 0 || O % groups != 0)
        throw ShapeMismatch("binary_conv1d: channels not divisible by groups");
    const int ig = C / groups;
    const int n = ig * k;
    if (w.cols() != n) throw ShapeMismatch("binary_conv1d: weight row length != in/groups * k");
    if (!bias.empty() && int(bias.size()) != O)
        throw ShapeMismatch("binary_conv1d: bias length != out channels");

    const int opg = O / groups;
    IntTensor out(O, L);
    std::vector<uint64_t> win((size_t(n) + 63) / 64);
    for (int g = 0; g < groups; ++g) {
        for (int t = 0; t < L; ++t) {
            build_conv_window(x, g, ig, k, t, win.data(), win.size());
            for (int oo = 0; oo < opg; ++oo) {
                const int oc = g * opg + oo;
                out.at(oc, t) =
                    xnor_dot(w.row(oc), win.data(), n) + (bias.empty() ? 0 : bias[oc]);
            }
        }
    }
    return out;
}

// ===== Activation / polarity ================================================

// sign with tie at 0 -> +1; optional per-channel integer offset added first.
inline BinTensor sign_activation(const IntTensor& x, std::span<const int32_t> offset = {}) {
    if (!offset.empty() && int(offset.size()) != x.rows)
        throw ShapeMismatch("sign_activation: offset length != channels");
    BinTensor out(x.rows, x.cols);
    for (int c = 0; c < x.rows; ++c) {
        const int32_t off = offset.empty() ? 0 : offset[c];
        for (int t = 0; t < x.cols; ++t)
            if (x.at(c, t) + off >= 0) out.set(c, t, +1);
    }
    return out;
}

// BN-decoder polarity: channels folded from negative-gain batch norm have
// their sign outputs inverted.
inline void apply_polarity(BinTensor& x, std::span<const int8_t> polarity) {
    if (int(polarity.size()) != x.rows())
        throw ShapeMismatch("apply_polarity: polarity length != channels");
    for (int c = 0; c < x.rows(); ++c)
        if (polarity[c] < 0) x.negate_row(c);
}

// ===== Shuffle / pooling ====================================================

// Channel c moves to (c mod groups) * (C/groups) + c / groups.
inline BinTensor channel_shuffle(const BinTensor& x, int groups) {
    const int C = x.rows();
    if (groups < 1 || C % groups != 0)
        throw ShapeMismatch("channel_shuffle: channels not divisible by groups");
    BinTensor out(C, x.cols());
    const int cpg = C / groups;
    for (int c = 0; c < C; ++c) {
        const int dst = (c % groups) * cpg + c / groups;
        std::copy(x.row(c), x.row(c) + x.words_per_row(), out.row(dst));
    }
    return out;
}

// Max of ±1 values = logical OR of the packed bits.
inline BinTensor maxpool1d(const BinTensor& x, int width) {
    if (width < 1 || x.cols() % width != 0)
        throw ShapeMismatch("maxpool1d: length not divisible by pool width");
    if (width == 1) return x;
    const int Lo = x.cols() / width;
    BinTensor out(x.rows(), Lo);
    for (int c = 0; c < x.rows(); ++c) {
        const uint64_t* in = x.row(c);
        uint64_t* o = out.row(c);
        for (int t = 0; t < Lo; ++t) {
            uint64_t any = 0;
            const int base = t * width;
            for (int j = 0; j < width && !any; ++j)
                any = (in[size_t(base + j) >> 6] >> ((base + j) & 63)) & 1ull;
            o[size_t(t) >> 6] |= any << (t & 63);
        }
    }
    return out;
}

// Per-channel mean of ±1 values, quantized to the activation format.
inline QTensor global_avg_pool(const BinTensor& x, QFormat fmt = kActivationFmt) {
    QTensor out({x.rows()}, fmt);
    for (int c = 0; c < x.rows(); ++c) {
        int pc = 0;
        const uint64_t* w = x.row(c);
        for (size_t i = 0; i < x.words_per_row(); ++i) pc += std::popcount(w[i]);
        const int32_t sum = 2 * pc - x.cols();
        out.raw(c) = quantize(double(sum) / double(x.cols()), fmt).raw;
    }
    return out;
}

// ===== Fully connected ======================================================

// out = quantize(W x + b): every product is requantized into the 16-bit
// accumulator format and accumulated with saturation (ascending input index,
// bias last), then the sum is requantized into the output format.
inline QTensor fully_connected(const QTensor& x, const QTensor& W, const QTensor& b,
                               QFormat out_fmt = kActivationFmt,
                               QFormat acc_fmt = kAccumulatorFmt) {
    if (W.shape().size() != 2 || x.shape().size() != 1 || W.shape()[1] != x.shape()[0])
        throw ShapeMismatch("fully_connected: W is (M,N), x is (N)");
    const int M = W.shape()[0], N = W.shape()[1];
    if (b.size() != 0 && int(b.size()) != M)
        throw ShapeMismatch("fully_connected: bias length != M");

    const int prod_frac = W.fmt().frac_bits + x.fmt().frac_bits;
    QTensor out({M}, out_fmt);
    for (int m = 0; m < M; ++m) {
        int32_t acc = 0;
        for (int j = 0; j < N; ++j) {
            int64_t p = int64_t(W.raw(W.idx(m, j))) * int64_t(x.raw(size_t(j)));
            if (acc_fmt.frac_bits >= prod_frac) p <<= (acc_fmt.frac_bits - prod_frac);
            else p = shift_round(p, prod_frac - acc_fmt.frac_bits, RoundMode::nearest_even);
            acc = saturate_raw(int64_t(acc) + p, acc_fmt);
        }
        if (b.size() != 0) {
            int64_t bb = b.raw(size_t(m));
            if (acc_fmt.frac_bits >= b.fmt().frac_bits) bb <<= (acc_fmt.frac_bits - b.fmt().frac_bits);
            else bb = shift_round(bb, b.fmt().frac_bits - acc_fmt.frac_bits, RoundMode::nearest_even);
            acc = saturate_raw(int64_t(acc) + bb, acc_fmt);
        }
        out.raw(size_t(m)) = requantize(QValue{acc, acc_fmt}, out_fmt).raw;
    }
    return out;
}

} // namespace kwsim
