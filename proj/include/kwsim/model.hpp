// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "kwsim/fixedpoint.hpp"
#include "kwsim/imcsim.hpp"
#include "kwsim/layers.hpp"
#include "kwsim/sinc.hpp"
#include "kwsim/tensor.hpp"

namespace kwsim {

// ===== Network description ==================================================

// Front end: learnable band-pass filter bank on raw 8-bit audio, evaluated on
// the digital path (bit-serial XNOR PE), folded BN bias, sign activation.
struct SincLayerSpec {
    int num_filters = 24;
    int kernel_size = 15;
    int pool = 1;
    std::vector<double> low_hz;  // trained cutoff parameters, Hz
    std::vector<double> band_hz;
    BinTensor kernels;             // deployed binary taps (num_filters x kernel_size)
    std::vector<int32_t> bias;     // folded integer BN bias per filter
};

// One binary group-convolution block: XNOR conv + in-array BN bias + sign,
// then polarity fix-up, channel shuffle, max pool.
struct ConvBlockSpec {
    int out_channels = 0;
    int kernel = 3;
    int pool = 1;
    int groups = 1;
    BinTensor weights;               // (out, in/groups * kernel) flattened fields
    std::vector<int32_t> bn_bias;    // folded integer bias per channel
    std::vector<int8_t> polarity;    // +1 / -1 per channel (sign of BN gamma)
    std::vector<int32_t> act_offset; // trained binarization offset (already folded in)
};

struct ClassifierSpec {
    QTensor W; // (num_classes, features) in the weight format
    QTensor b; // (num_classes) in the activation format
};

// quantized: biases are plain integers (nothing array-legal yet).
// constrained: biases rounded to the even grid and clamped to the array range.
enum class ConstraintLevel : uint8_t { quantized = 0, constrained = 1 };

struct ModelSpec {
    int sample_rate = 16000;
    int input_len = 16000;
    int num_classes = 10;
    SincLayerSpec sinc;
    std::vector<ConvBlockSpec> blocks;
    ClassifierSpec classifier;
    ConstraintLevel level = ConstraintLevel::quantized;
    BiasMapMethod mapping = BiasMapMethod::add;
};

struct ArchConfig {
    int sample_rate = 16000;
    int input_len = 16000;
    int sinc_filters = 24;
    int sinc_kernel = 15;
    int sinc_pool = 1;
    std::vector<int> channels = {120, 240, 240, 480, 480};
    std::vector<int> pools = {2, 2, 2, 2, 2};
    int block_kernel = 3;
    int group_size = 24;
    int num_classes = 10;
};

// The lowest representable band of a k-tap binarized kernel: the windowed
// impulse response needs a sign flip inside ±(k-1)/2 taps, which requires the
// upper cutoff to reach roughly 1.25/k cycles per sample. Bands below that
// binarize single-signed (useless filters), so initialization and training
// keep the upper cutoff at or above this floor.
inline double min_high_cutoff(int kernel_size) { return 1.25 / double(kernel_size); }

// Mel-spaced initial cutoffs. The mel floor is raised in closed form so the
// lowest filter's upper edge clears min_high_cutoff for the configured kernel.
inline void init_cutoffs_mel(SincLayerSpec& s, int sample_rate, double lo_hz = 30.0,
                             double hi_frac = 0.48) {
    auto mel = [](double f) { return 2595.0 * std::log10(1.0 + f / 700.0); };
    auto inv = [](double m) { return 700.0 * (std::pow(10.0, m / 2595.0) - 1.0); };
    const double hi = hi_frac * double(sample_rate);
    const int F = s.num_filters;
    if (F < 1) throw std::invalid_argument("sinc: need at least one filter");
    s.low_hz.resize(size_t(F));
    s.band_hz.resize(size_t(F));
    const double m1 = mel(hi);
    const double m_need = mel(min_high_cutoff(s.kernel_size) * double(sample_rate));
    // Edges e_i = inv(m0 + i*step), step = (m1-m0)/(F+1); filter i spans
    // [e_i, e_{i+2}]. Solve e_2 >= min_high for m0.
    double m0 = mel(lo_hz);
    // With one filter the upper edge is `hi` itself, already far above the floor.
    if (F > 1) m0 = std::max(m0, (m_need * double(F + 1) - 2.0 * m1) / double(F - 1));
    if (!(m0 < m1)) throw std::invalid_argument("sinc: frequency range cannot fit the filters");
    for (int i = 0; i < F; ++i) {
        const double a = inv(m0 + (m1 - m0) * double(i) / double(F + 1));
        const double b = inv(m0 + (m1 - m0) * double(i + 2) / double(F + 1));
        s.low_hz[size_t(i)] = a;
        s.band_hz[size_t(i)] = std::max(b, min_high_cutoff(s.kernel_size) * double(sample_rate)) - a;
    }
}

// Rebuild the deployed binary taps from the cutoff parameters.
inline void rebuild_sinc_kernels(SincLayerSpec& s, int sample_rate) {
    std::vector<std::vector<double>> g(size_t(s.num_filters));
    for (int f = 0; f < s.num_filters; ++f) {
        const double f1 = s.low_hz[size_t(f)] / double(sample_rate);
        const double f2 = (s.low_hz[size_t(f)] + s.band_hz[size_t(f)]) / double(sample_rate);
        g[size_t(f)] = sinc_bandpass_kernel(f1, f2, s.kernel_size);
    }
    s.kernels = binarize_kernels(g);
}

inline ModelSpec make_model(const ArchConfig& a) {
    if (a.channels.size() != a.pools.size() || a.channels.empty())
        throw std::invalid_argument("arch: channels/pools length mismatch");
    ModelSpec m;
    m.sample_rate = a.sample_rate;
    m.input_len = a.input_len;
    m.num_classes = a.num_classes;
    m.sinc.num_filters = a.sinc_filters;
    m.sinc.kernel_size = a.sinc_kernel;
    m.sinc.pool = a.sinc_pool;
    init_cutoffs_mel(m.sinc, a.sample_rate);
    rebuild_sinc_kernels(m.sinc, a.sample_rate);
    m.sinc.bias.assign(size_t(a.sinc_filters), 0);

    int in_ch = a.sinc_filters;
    for (size_t i = 0; i < a.channels.size(); ++i) {
        ConvBlockSpec b;
        b.out_channels = a.channels[i];
        b.kernel = a.block_kernel;
        b.pool = a.pools[i];
        if (in_ch % a.group_size != 0)
            throw std::invalid_argument("arch: channels not divisible into groups of group_size");
        b.groups = in_ch / a.group_size;
        if (b.out_channels % b.groups != 0)
            throw std::invalid_argument("arch: out channels not divisible by groups");
        b.weights = BinTensor(b.out_channels, a.group_size * b.kernel);
        b.bn_bias.assign(size_t(b.out_channels), 0);
        b.polarity.assign(size_t(b.out_channels), int8_t(+1));
        b.act_offset.assign(size_t(b.out_channels), 0);
        m.blocks.push_back(std::move(b));
        in_ch = a.channels[i];
    }
    m.classifier.W = QTensor({a.num_classes, in_ch}, kWeightFmt);
    m.classifier.b = QTensor({a.num_classes}, kActivationFmt);
    return m;
}

// ===== BN folding ===========================================================

class DegenerateBN : public std::runtime_error {
public:
    explicit DegenerateBN(const std::string& w) : std::runtime_error(w) {}
};

struct FoldedBias {
    int32_t bias = 0;
    int8_t polarity = +1;
};

// sign(gamma*(x - mu)/sigma + beta + offset) over integer x reduces to
// polarity * sign(x + bias): the real threshold t = mu - sigma*(beta+offset)/gamma
// rounds to the integer comparison boundary. Ties (BN value exactly 0) keep
// the sign convention 0 -> +1 on both sides.
inline FoldedBias fold_bn(double gamma, double beta, double mu, double sigma,
                          double offset = 0.0) {
    if (!(sigma > 0.0)) throw DegenerateBN("fold_bn: sigma must be > 0");
    if (gamma == 0.0) throw DegenerateBN("fold_bn: gamma must be nonzero");
    const double t = mu - sigma * (beta + offset) / gamma;
    FoldedBias out;
    if (gamma > 0.0) {
        out.bias = int32_t(-std::ceil(t));
        out.polarity = +1;
    } else {
        out.bias = int32_t(-std::floor(t) - 1.0);
        out.polarity = -1;
    }
    return out;
}

// ===== Forward pass =========================================================

enum class Backend : uint8_t { digital = 0, imc = 1 };

inline const char* to_string(Backend b) { return b == Backend::digital ? "digital" : "imc"; }

struct ForwardOptions {
    Backend backend = Backend::digital;
    NoiseModel noise{};
    // Distinguishes reads across utterances/trials so per-read noise differs
    // while staying reproducible; static column offsets do not depend on it.
    uint64_t sample_key = 0;
};

namespace detail {

// Number of macros a block needs per convolution group (eight banks each).
inline int macros_per_group(const ConvBlockSpec& blk) {
    const int opg = blk.out_channels / blk.groups;
    return (opg + ImcMacro::kBanks - 1) / ImcMacro::kBanks;
}

// Program one block's weights and biases into macros and draw the static
// column offsets. Macro (g, mi) sits at index g * macros_per_group + mi; its
// static offsets are keyed by (layer_index << 32) | that index, so repeated
// loads of the same checkpoint against the same noise seed reproduce the same
// physical array.
inline std::vector<ImcMacro> load_block_macros(const ConvBlockSpec& blk, int layer_index,
                                               const NoiseModel& noise) {
    const int n = blk.weights.cols();
    const int opg = blk.out_channels / blk.groups;
    const int mpg = macros_per_group(blk);
    std::vector<ImcMacro> macros(size_t(blk.groups) * size_t(mpg));
    for (int g = 0; g < blk.groups; ++g) {
        for (int mi = 0; mi < mpg; ++mi) {
            ImcMacro& mac = macros[size_t(g) * size_t(mpg) + size_t(mi)];
            for (int b = 0; b < ImcMacro::kBanks; ++b) {
                const int oc_local = mi * ImcMacro::kBanks + b;
                if (oc_local >= opg) break;
                const int oc = g * opg + oc_local;
                std::span<const uint64_t> bits(blk.weights.row(oc), blk.weights.words_per_row());
                // Constrained checkpoints carry array-legal (even, in-range)
                // biases, so re-mapping is the identity; unconstrained ones
                // keep the raw integer to stay bit-exact with the digital path.
                mac.load_bank_raw(b, bits, n, blk.bn_bias[size_t(oc)]);
            }
            mac.draw_static_offsets(noise, (uint64_t(layer_index) << 32) |
                                               (uint64_t(g) * uint64_t(mpg) + uint64_t(mi)));
        }
    }
    return macros;
}

// Binary blocks on the in-memory path. Banks hold one output channel each;
// macros never span a convolution group, so all eight banks of a macro share
// one input window. Layer index keys the static column offsets; the SA noise
// stream advances in a fixed (position, group, macro, bank) order.
inline BinTensor imc_block_forward(const BinTensor& x, const ConvBlockSpec& blk, int layer_index,
                                   const NoiseModel& noise, uint64_t sample_key) {
    const int C = x.rows(), L = x.cols();
    const int ig = C / blk.groups;
    const int n = ig * blk.kernel;
    const int opg = blk.out_channels / blk.groups;
    const int mpg = macros_per_group(blk);
    std::vector<ImcMacro> macros = load_block_macros(blk, layer_index, noise);

    RngStream reads = RngStream::derive(noise.seed, {0x73617264ull, sample_key, uint64_t(layer_index)});
    BinTensor y(blk.out_channels, L);
    std::vector<uint64_t> win((size_t(n) + 63) / 64);
    for (int t = 0; t < L; ++t) {
        for (int g = 0; g < blk.groups; ++g) {
            build_conv_window(x, g, ig, blk.kernel, t, win.data(), win.size());
            for (int mi = 0; mi < mpg; ++mi) {
                const ImcMacro& mac = macros[size_t(g) * size_t(mpg) + size_t(mi)];
                auto bits = mac.mav_compute(win.data(), noise, reads);
                for (int b = 0; b < ImcMacro::kBanks; ++b) {
                    const int oc_local = mi * ImcMacro::kBanks + b;
                    if (oc_local >= opg) break;
                    y.set(g * opg + oc_local, t, bits[size_t(b)]);
                }
            }
        }
    }
    return y;
}

inline BinTensor digital_block_forward(const BinTensor& x, const ConvBlockSpec& blk) {
    IntTensor s = binary_conv1d(x, blk.weights, blk.kernel, blk.groups, blk.bn_bias);
    return sign_activation(s);
}

} // namespace detail

// Binary feature extractor: sinc front end (always digital), then the five
// blocks on the chosen backend, global average pooling to one value/channel.
inline QTensor forward_features(const ModelSpec& m, const QTensor& audio,
                                const ForwardOptions& opt = {}) {
    IntTensor s0 = sinc_conv(audio, m.sinc.kernels);
    BinTensor x = sign_activation(s0, m.sinc.bias);
    if (m.sinc.pool > 1) x = maxpool1d(x, m.sinc.pool);
    int layer = 1;
    for (const ConvBlockSpec& blk : m.blocks) {
        BinTensor y = (opt.backend == Backend::imc)
                          ? detail::imc_block_forward(x, blk, layer, opt.noise, opt.sample_key)
                          : detail::digital_block_forward(x, blk);
        apply_polarity(y, blk.polarity);
        if (blk.groups > 1) y = channel_shuffle(y, blk.groups);
        if (blk.pool > 1) y = maxpool1d(y, blk.pool);
        x = std::move(y);
        ++layer;
    }
    return global_avg_pool(x);
}

inline QTensor classify(const ModelSpec& m, const QTensor& features) {
    return fully_connected(features, m.classifier.W, m.classifier.b);
}

inline QTensor forward(const ModelSpec& m, const QTensor& audio, const ForwardOptions& opt = {}) {
    return classify(m, forward_features(m, audio, opt));
}

inline int argmax_class(const QTensor& scores) {
    int best = 0;
    for (int i = 1; i < scores.shape()[0]; ++i)
        if (scores.raw(i) > scores.raw(best)) best = i;
    return best;
}

// ===== Parameter accounting =================================================

struct ParamCount {
    int64_t sinc_kernels = 0, sinc_bias = 0, sinc_cutoffs = 0, sinc_bn = 0;
    int64_t block_weights = 0, block_bias = 0, block_bn = 0, block_offsets = 0;
    int64_t classifier = 0;
    // Deployed checkpoint: binary taps, folded integer biases, classifier.
    int64_t deploy() const {
        return sinc_kernels + sinc_bias + block_weights + block_bias + classifier;
    }
    // Training-time learnables: cutoffs, latent weights, BN affine, offsets.
    int64_t train() const {
        return sinc_cutoffs + sinc_bn + block_weights + block_bn + block_offsets + classifier;
    }
};

inline ParamCount count_params(const ModelSpec& m) {
    ParamCount c;
    c.sinc_kernels = int64_t(m.sinc.num_filters) * m.sinc.kernel_size;
    c.sinc_bias = m.sinc.num_filters;
    c.sinc_cutoffs = 2 * int64_t(m.sinc.num_filters);
    c.sinc_bn = 2 * int64_t(m.sinc.num_filters);
    for (const ConvBlockSpec& b : m.blocks) {
        c.block_weights += int64_t(b.weights.rows()) * b.weights.cols();
        c.block_bias += b.out_channels;
        c.block_bn += 2 * int64_t(b.out_channels);
        c.block_offsets += b.out_channels;
    }
    const auto& ws = m.classifier.W.shape();
    c.classifier = int64_t(ws[0]) * ws[1] + m.classifier.b.shape()[0];
    return c;
}

} // namespace kwsim
