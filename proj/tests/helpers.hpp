// SPDX-License-Identifier: Apache-2.0
// Shared fixtures for the unit tests: cheap architectures and random state.
#pragma once

#include <cstdint>

#include "kwsim/model.hpp"
#include "kwsim/rng.hpp"

namespace testutil {

inline kwsim::QTensor random_audio(int len, kwsim::RngStream& rng) {
    kwsim::QTensor a({len}, kwsim::kActivationFmt);
    for (int i = 0; i < len; ++i) a.raw(size_t(i)) = int32_t(rng.uniform_int(-128, 127));
    return a;
}

// Fill a freshly made model with random deployment state.
inline void randomize_model(kwsim::ModelSpec& m, kwsim::RngStream& rng, int bias_range = 40) {
    for (int f = 0; f < m.sinc.num_filters; ++f)
        m.sinc.bias[size_t(f)] = int32_t(rng.uniform_int(-20, 20));
    for (auto& blk : m.blocks) {
        for (int o = 0; o < blk.weights.rows(); ++o)
            for (int c = 0; c < blk.weights.cols(); ++c)
                blk.weights.set(o, c, rng.next_u64() & 1 ? +1 : -1);
        for (int o = 0; o < blk.out_channels; ++o) {
            blk.bn_bias[size_t(o)] = int32_t(rng.uniform_int(-bias_range, bias_range));
            blk.polarity[size_t(o)] = rng.next_u64() & 1 ? int8_t(+1) : int8_t(-1);
        }
    }
    for (size_t i = 0; i < m.classifier.W.size(); ++i)
        m.classifier.W.raw(i) = int32_t(rng.uniform_int(-128, 127));
    for (size_t i = 0; i < m.classifier.b.size(); ++i)
        m.classifier.b.raw(i) = int32_t(rng.uniform_int(-64, 64));
}

// Small architecture so forward passes stay cheap in unit tests.
inline kwsim::ArchConfig tiny_arch() {
    kwsim::ArchConfig a;
    a.input_len = 2000;
    a.sinc_filters = 8;
    a.sinc_kernel = 15;
    a.sinc_pool = 25; // length 2000 -> 80
    a.channels = {24, 24};
    a.pools = {2, 2}; // 80 -> 40 -> 20
    a.block_kernel = 3;
    a.group_size = 8; // groups: 1 then 3
    a.num_classes = 4;
    return a;
}

} // namespace testutil
