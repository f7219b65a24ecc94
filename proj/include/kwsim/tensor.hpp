// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <bit>
#include <cstdint>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "kwsim/fixedpoint.hpp"

namespace kwsim {

class ShapeMismatch : public std::runtime_error {
public:
    explicit ShapeMismatch(const std::string& what) : std::runtime_error("shape mismatch: " + what) {}
};

// ===== Quantized tensor =====================================================

// Row-major tensor of raw mantissas sharing one format.
class QTensor {
public:
    QTensor() = default;
    QTensor(std::vector<int> shape, QFormat fmt)
        : shape_(std::move(shape)), fmt_(fmt), raw_(count(shape_), 0) {}

    const std::vector<int>& shape() const { return shape_; }
    QFormat fmt() const { return fmt_; }
    size_t size() const { return raw_.size(); }

    int32_t raw(size_t i) const { return raw_[i]; }
    int32_t& raw(size_t i) { return raw_[i]; }
    const std::vector<int32_t>& raws() const { return raw_; }
    std::vector<int32_t>& raws() { return raw_; }

    double value(size_t i) const { return QValue{raw_[i], fmt_}.value(); }
    QValue q(size_t i) const { return QValue{raw_[i], fmt_}; }
    void set(size_t i, QValue v) {
        raw_[i] = (v.fmt == fmt_) ? v.raw : requantize(v, fmt_).raw;
    }

    size_t idx(int r, int c) const { return size_t(r) * size_t(shape_.back()) + size_t(c); }

private:
    static size_t count(const std::vector<int>& s) {
        size_t n = 1;
        for (int d : s) n *= size_t(d);
        return n;
    }
    std::vector<int> shape_;
    QFormat fmt_{};
    std::vector<int32_t> raw_;
};

// Pre-activation sums and other exact integer maps (e.g. convolution
// outputs, which are signed popcount counts, not fixed-point values).
struct IntTensor {
    int rows = 0;
    int cols = 0;
    std::vector<int32_t> v;

    IntTensor() = default;
    IntTensor(int r, int c) : rows(r), cols(c), v(size_t(r) * size_t(c), 0) {}
    int32_t at(int r, int c) const { return v[size_t(r) * cols + c]; }
    int32_t& at(int r, int c) { return v[size_t(r) * cols + c]; }
};

// ===== Packed ±1 tensor =====================================================

// Two-dimensional ±1 tensor, bit-packed along the trailing dimension
// (bit 1 -> +1, bit 0 -> -1). Convolution weights of logical shape
// (out_ch, in_ch/groups, k) are stored flattened as (out_ch, in_ch/groups * k)
// so each row is one contiguous receptive field.
class BinTensor {
public:
    BinTensor() = default;
    BinTensor(int rows, int cols)
        : rows_(rows), cols_(cols), wpr_((size_t(cols) + 63) / 64),
          words_(size_t(rows) * wpr_, 0) {}

    int rows() const { return rows_; }
    int cols() const { return cols_; }
    size_t words_per_row() const { return wpr_; }

    const uint64_t* row(int r) const { return words_.data() + size_t(r) * wpr_; }
    uint64_t* row(int r) { return words_.data() + size_t(r) * wpr_; }

    const std::vector<uint64_t>& words() const { return words_; }
    std::vector<uint64_t>& words() { return words_; }

    // sign in {-1, +1}
    int sign(int r, int c) const {
        return (row(r)[size_t(c) >> 6] >> (c & 63)) & 1 ? +1 : -1;
    }
    void set(int r, int c, int sign) {
        uint64_t& w = row(r)[size_t(c) >> 6];
        const uint64_t m = uint64_t(1) << (c & 63);
        if (sign > 0) w |= m;
        else w &= ~m;
    }

    // Flip every sign in a row (tail bits beyond cols stay zero).
    void negate_row(int r) {
        uint64_t* w = row(r);
        for (size_t i = 0; i < wpr_; ++i) w[i] = ~w[i];
        mask_tail(w);
    }

    void mask_tail(uint64_t* w) const {
        const int rem = cols_ & 63;
        if (rem) w[wpr_ - 1] &= (uint64_t(1) << rem) - 1;
    }

    bool operator==(const BinTensor& o) const {
        return rows_ == o.rows_ && cols_ == o.cols_ && words_ == o.words_;
    }

private:
    int rows_ = 0, cols_ = 0;
    size_t wpr_ = 0;
    std::vector<uint64_t> words_;
};

// Signed dot product of two packed ±1 vectors of n bits:
//   sum w_i * x_i = 2 * popcount(~(w XOR x)) - n.
inline int32_t xnor_dot(const uint64_t* w, const uint64_t* x, int n) {
    int pc = 0;
    const int full = n >> 6;
    for (int i = 0; i < full; ++i) pc += std::popcount(~(w[i] ^ x[i]));
    const int rem = n & 63;
    if (rem) pc += std::popcount(~(w[full] ^ x[full]) & ((uint64_t(1) << rem) - 1));
    return 2 * pc - n;
}

} // namespace kwsim
