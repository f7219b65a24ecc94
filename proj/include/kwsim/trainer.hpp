// SPDX-License-Identifier: Apache-2.0
#pragma once

// On-chip classifier customization in pure fixed-point arithmetic.
//
// The deployed device can adapt its final fully-connected layer to a new
// speaker or vocabulary without any floating-point hardware. Everything here
// operates on raw mantissas:
//   * error_from_loss    - 8-bit softmax errors via the exp lookup table,
//   * scale_error        - batch (2^s) or shift-add (x1.375) error boosting,
//   * sga_step           - accumulate-or-emit handling of small gradients,
//   * rgp                - random gradient prediction noise on emissions,
//   * customize          - the replay-update epoch loop over a feature buffer.
//
// Gradients live in the 16-bit accumulator format; saturation in those words
// models the physical gradient memory. No float enters the update datapath -
// floating point appears only in configuration (learning-rate constants,
// noise shaping) before it is reduced to shifts and integer words.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "kwsim/fixedpoint.hpp"
#include "kwsim/layers.hpp"
#include "kwsim/model.hpp"
#include "kwsim/rng.hpp"
#include "kwsim/tensor.hpp"

namespace kwsim {

// Softmax denominator: up to 15 unit exponentials fit without saturation.
inline constexpr QFormat kSoftmaxDenFmt{4, 11};

class AllZeroError : public std::runtime_error {
public:
    explicit AllZeroError(const std::string& w) : std::runtime_error(w) {}
};

class BufferEmpty : public std::runtime_error {
public:
    explicit BufferEmpty(const std::string& w) : std::runtime_error(w) {}
};

// ===== Error extraction =====================================================

// Intermediate softmax words, exposed for test-mode readback.
struct SoftmaxDebug {
    QValue den{0, kSoftmaxDenFmt};
    QTensor softmax;
};

// Cross-entropy error in 8-bit words: softmax(scores) minus the one-hot
// label. The largest score is subtracted first (the difference saturates at
// -8, the smallest table input), each exponential comes from the lookup
// table, and the divisions truncate toward zero. The label word is always at
// most -1/128 because the truncated softmax never reaches one.
inline QTensor error_from_loss(const QTensor& scores, int label, SoftmaxDebug* dbg = nullptr) {
    if (scores.shape().size() != 1)
        throw std::invalid_argument("error_from_loss: scores must be one-dimensional");
    if (!(scores.fmt() == kActivationFmt))
        throw std::invalid_argument("error_from_loss: scores must be in the activation format");
    const int classes = scores.shape()[0];
    if (classes < 2) throw std::invalid_argument("error_from_loss: need at least two classes");
    if (label < 0 || label >= classes)
        throw std::out_of_range("error_from_loss: label outside the score vector");

    int32_t max_raw = scores.raw(0);
    for (size_t i = 1; i < scores.size(); ++i) max_raw = std::max(max_raw, scores.raw(i));
    const QValue max_q{max_raw, kActivationFmt};

    std::vector<QValue> exps(static_cast<size_t>(classes));
    QValue den{0, kSoftmaxDenFmt};
    for (size_t i = 0; i < exps.size(); ++i) {
        const QValue z = qsub(scores.q(i), max_q, kActivationFmt);
        exps[i] = exp_lut(z);
        den = qadd(den, exps[i], kSoftmaxDenFmt);
    }

    QTensor err({classes}, kErrorFmt);
    QTensor soft({classes}, kErrorFmt);
    for (size_t i = 0; i < exps.size(); ++i) {
        const QValue p = fixed_divide(exps[i], den, kErrorFmt);
        soft.raw(i) = p.raw;
        // Subtracting the one-hot target only touches the label word; in raw
        // mantissas that is p - 128, which always stays in range.
        err.raw(i) = (int(i) == label) ? p.raw - (kErrorFmt.raw_max() + 1) : p.raw;
    }
    if (dbg) {
        dbg->den = den;
        dbg->softmax = soft;
    }
    return err;
}

// ===== Error scaling ========================================================

enum class ErrorScaling { off, software, hardware };

// Smallest s >= 0 with max_abs * 2^s reaching one: ceil(log2(1 / max_abs)).
inline int scale_exponent(double max_abs) {
    if (!(max_abs > 0.0)) throw std::invalid_argument("scale_exponent: need a positive extreme");
    return std::max(0, int(std::ceil(std::log2(1.0 / max_abs))));
}

// Same rule on a fixed-point word, in pure integer arithmetic.
inline int scale_exponent(QValue max_abs) {
    const int64_t raw = std::abs(int64_t(max_abs.raw));
    if (raw == 0) throw std::invalid_argument("scale_exponent: need a nonzero extreme");
    const int floor_log2 = std::bit_width(uint64_t(raw)) - 1;
    return std::max(0, int(max_abs.fmt.frac_bits) - floor_log2);
}

namespace detail {

inline QTensor scale_words_pow2(const QTensor& err, int s) {
    QTensor out({int(err.size())}, err.fmt());
    for (size_t i = 0; i < err.size(); ++i)
        out.raw(i) = saturate_raw(int64_t(err.raw(i)) << s, err.fmt());
    return out;
}

// The deployed engine: x + x>>2 + x>>3 = 1.375x with arithmetic shifts.
inline QTensor scale_words_shift_add(const QTensor& err) {
    QTensor out({int(err.size())}, err.fmt());
    for (size_t i = 0; i < err.size(); ++i) {
        const int32_t x = err.raw(i);
        out.raw(i) = saturate_raw(int64_t(x) + (x >> 2) + (x >> 3), err.fmt());
    }
    return out;
}

inline int32_t max_abs_raw(const QTensor& t) {
    int32_t m = 0;
    for (size_t i = 0; i < t.size(); ++i) m = std::max(m, std::abs(t.raw(i)));
    return m;
}

} // namespace detail

// Boost small error words before the outer product so they survive the 8-bit
// gradient grid. Software mode shifts the whole vector until its extreme word
// reaches full scale; hardware mode is the fixed shift-add factor. Both raise
// AllZeroError on an all-zero vector (nothing can be recovered); off is a
// pass-through. `exponent_out` reports the software shift (0 otherwise).
inline QTensor scale_error(const QTensor& err, ErrorScaling mode, int* exponent_out = nullptr) {
    if (exponent_out) *exponent_out = 0;
    if (mode == ErrorScaling::off) return err;
    const int32_t extreme = detail::max_abs_raw(err);
    if (extreme == 0) throw AllZeroError("scale_error: every error word is zero");
    if (mode == ErrorScaling::software) {
        const int s = scale_exponent(QValue{extreme, err.fmt()});
        if (exponent_out) *exponent_out = s;
        return detail::scale_words_pow2(err, s);
    }
    return detail::scale_words_shift_add(err);
}

// ===== Gradient threshold ===================================================

// A weight can move at most one LSB per update, so any gradient below half a
// weight LSB divided by the learning rate is guaranteed to round away:
// G_th = 2^-8 / LR, which in accumulator words (frac 8) is exactly 1/LR.
inline QValue g_threshold(double lr) {
    if (!(lr > 0.0)) throw std::invalid_argument("g_threshold: learning rate must be positive");
    const int64_t raw = std::llround(1.0 / lr);
    if (raw < 1 || raw > kAccumulatorFmt.raw_max())
        throw std::invalid_argument("g_threshold: learning rate out of range");
    return QValue{int32_t(raw), kAccumulatorFmt};
}

// Power-of-two learning rates LR = 2^-e give the exact word 2^e.
inline QValue g_threshold_for_exponent(int lr_exponent) {
    if (lr_exponent < 0 || lr_exponent > 14)
        throw std::invalid_argument("g_threshold_for_exponent: exponent out of range");
    return QValue{int32_t(1) << lr_exponent, kAccumulatorFmt};
}

// ===== Small-gradient accumulation ==========================================

// One gradient word arrives; either it is large enough to emit directly, or
// it parks in the per-weight accumulator until the accumulated mass crosses
// the threshold and is flushed together with the newcomer. Nothing is ever
// dropped: emitted words plus the accumulator always equal the words fed in.
inline std::optional<QValue> sga_step(QValue g, QValue& g_accu, QValue g_th) {
    if (g_th.raw <= 0) throw std::invalid_argument("sga_step: threshold must be positive");
    if (std::abs(g.raw) < g_th.raw) {
        if (std::abs(g_accu.raw) < g_th.raw) {
            g_accu = qadd(g_accu, g, g_accu.fmt);
            return std::nullopt;
        }
        const QValue out = qadd(g_accu, g, g_accu.fmt);
        g_accu.raw = 0;
        return out;
    }
    return g;
}

// ===== Random gradient prediction ===========================================

// Perturb an emitted update with quantized Gaussian noise: G' = G + q(N(0,1)
// / lambda). The draw is truncated toward zero onto the 8-bit gradient grid
// (the cheap hardware rounding), so tiny draws vanish entirely. lambda >= 1
// keeps the noise at or below unit variance before quantization.
inline QValue rgp(QValue g, double lambda, RngStream& rng) {
    if (!(lambda >= 1.0)) throw std::invalid_argument("rgp: lambda must be at least 1");
    const QValue noise = quantize(rng.next_gaussian() / lambda, kGradientFmt,
                                  RoundMode::toward_zero);
    return qadd(g, noise, g.fmt);
}

// ===== Feature buffer =======================================================

// On-chip replay memory: global-average-pool feature vectors with labels.
// The reference device stores 90 utterances, so that is the default bound.
class FeatureBuffer {
public:
    explicit FeatureBuffer(int capacity = 90) : capacity_(capacity) {
        if (capacity < 1) throw std::invalid_argument("feature buffer: capacity must be positive");
    }

    int capacity() const { return capacity_; }
    int size() const { return int(feats_.size()); }
    bool empty() const { return feats_.empty(); }

    void push(const QTensor& feature, int label) {
        if (size() >= capacity_) throw std::length_error("feature buffer: capacity reached");
        if (feature.shape().size() != 1)
            throw std::invalid_argument("feature buffer: features must be one-dimensional");
        if (!(feature.fmt() == kActivationFmt))
            throw std::invalid_argument("feature buffer: features must use the activation format");
        if (!feats_.empty() && feature.shape() != feats_.front().shape())
            throw std::invalid_argument("feature buffer: feature length changed");
        if (label < 0) throw std::out_of_range("feature buffer: negative label");
        feats_.push_back(feature);
        labels_.push_back(label);
    }

    const QTensor& feature(int i) const { return feats_[static_cast<size_t>(i)]; }
    int label(int i) const { return labels_[static_cast<size_t>(i)]; }

    void clear() {
        feats_.clear();
        labels_.clear();
    }

private:
    int capacity_;
    std::vector<QTensor> feats_;
    std::vector<int> labels_;
};

// ===== Trainer state ========================================================

// The adaptable tail of the deployed model plus the per-weight gradient
// accumulators that survive across epochs.
struct TrainerState {
    QTensor W;        // (classes, features), weight format
    QTensor b;        // (classes), activation format
    QTensor g_accu_w; // (classes, features), accumulator format
    QTensor g_accu_b; // (classes), accumulator format
    int epoch = 0;
    int lr_exponent = 4; // LR = 2^-4 at the start of customization

    static TrainerState from_model(const ModelSpec& m) {
        TrainerState st;
        st.W = m.classifier.W;
        st.b = m.classifier.b;
        st.g_accu_w = QTensor(m.classifier.W.shape(), kAccumulatorFmt);
        st.g_accu_b = QTensor(m.classifier.b.shape(), kAccumulatorFmt);
        return st;
    }

    void apply_to_model(ModelSpec& m) const {
        m.classifier.W = W;
        m.classifier.b = b;
    }
};

inline int predict_class(const TrainerState& st, const QTensor& feature) {
    return argmax_class(fully_connected(feature, st.W, st.b));
}

// ===== Customization ========================================================

struct CustomizeConfig {
    int epochs = 40;
    ErrorScaling scaling = ErrorScaling::hardware;
    bool sga = true;        // small-gradient accumulation
    bool rgp = true;        // random gradient prediction on emitted updates
    double rgp_lambda = 8.0;
    uint64_t seed = 0;
    bool train_bias = false; // the reference flow adapts the weights only
    int initial_lr_exponent = 4;
    int lr_floor_exponent = 7; // LR bottoms out at 2^-7
    int lr_halve_every = 10;   // epochs per learning-rate step
};

struct EpochRecord {
    int epoch = 0;
    int lr_exponent = 4;
    int64_t loss_proxy_raw = 0; // sum of (1 - softmax[label]) in 1/128 steps
    int correct = 0;            // argmax hits, measured before the update
    int samples = 0;
    int64_t nonzero_updates = 0; // emitted updates with a nonzero word
    int rgp_agree = 0; // buffered decisions unchanged by the injected noise
    int rgp_total = 0;
};

// Per-weight gradient words accumulated over one replay of the buffer.
struct GradientMemory {
    QTensor w; // (classes, features), accumulator format
    QTensor b; // (classes), accumulator format
};

// Replay every buffered sample through the classifier, convert scores to
// scaled error words, and accumulate error x feature outer products into the
// 16-bit gradient memory (saturating, like the physical banks). Statistics
// are measured on the pre-update weights. Software scaling uses one exponent
// for the whole batch, taken from the most extreme error word seen.
inline GradientMemory replay_gradients(const TrainerState& st, const FeatureBuffer& buf,
                                       const CustomizeConfig& cfg, EpochRecord* rec) {
    const int classes = st.W.shape()[0];
    GradientMemory g{QTensor(st.W.shape(), kAccumulatorFmt),
                     QTensor(st.b.shape(), kAccumulatorFmt)};

    std::vector<QTensor> errors;
    errors.reserve(static_cast<size_t>(buf.size()));
    int32_t batch_extreme = 0;
    for (int i = 0; i < buf.size(); ++i) {
        const QTensor scores = fully_connected(buf.feature(i), st.W, st.b);
        if (rec) {
            if (argmax_class(scores) == buf.label(i)) ++rec->correct;
            ++rec->samples;
        }
        QTensor err = error_from_loss(scores, buf.label(i));
        if (rec) rec->loss_proxy_raw += -int64_t(err.raw(static_cast<size_t>(buf.label(i))));
        batch_extreme = std::max(batch_extreme, detail::max_abs_raw(err));
        errors.push_back(std::move(err));
    }

    int batch_exponent = 0;
    if (cfg.scaling == ErrorScaling::software) {
        if (batch_extreme == 0) throw AllZeroError("replay: every error word is zero");
        batch_exponent = scale_exponent(QValue{batch_extreme, kErrorFmt});
    }

    const QValue unit = quantize(1.0, kActivationFmt); // the bias input column
    for (int i = 0; i < buf.size(); ++i) {
        QTensor err = (cfg.scaling == ErrorScaling::software)
                          ? detail::scale_words_pow2(errors[static_cast<size_t>(i)], batch_exponent)
                      : (cfg.scaling == ErrorScaling::hardware)
                          ? detail::scale_words_shift_add(errors[static_cast<size_t>(i)])
                          : std::move(errors[static_cast<size_t>(i)]);
        const QTensor& f = buf.feature(i);
        for (int m = 0; m < classes; ++m) {
            const QValue em = err.q(static_cast<size_t>(m));
            if (em.raw == 0) continue; // zero error contributes nothing exact
            for (size_t j = 0; j < f.size(); ++j) {
                const size_t at = g.w.idx(m, int(j));
                const QValue prod = qmul(em, f.q(j), kAccumulatorFmt);
                g.w.set(at, qadd(g.w.q(at), prod, kAccumulatorFmt));
            }
            if (cfg.train_bias) {
                const QValue prod = qmul(em, unit, kAccumulatorFmt);
                g.b.set(static_cast<size_t>(m),
                        qadd(g.b.q(static_cast<size_t>(m)), prod, kAccumulatorFmt));
            }
        }
    }
    return g;
}

namespace detail {

// Round m / 2^k half away from zero: an emission of exactly the threshold
// must move its weight by one LSB, so ties round outward, not to even.
inline int32_t shift_half_away(int64_t m, int k) {
    if (k <= 0) return int32_t(m);
    const int64_t mag = (std::abs(m) + (int64_t(1) << (k - 1))) >> k;
    return int32_t(m < 0 ? -mag : mag);
}

} // namespace detail

// Turn the gradient memory into weight movement: optionally gate each word
// through the small-gradient accumulator, optionally perturb emissions with
// prediction noise (skipped when `noise_rng` is null, which the counterfactual
// shadow pass uses), then step W <- W - LR * G with LR = 2^-lr_exponent.
// Weight deltas are computed with literal shifts on the raw words.
inline void apply_updates(TrainerState& st, const GradientMemory& g, const CustomizeConfig& cfg,
                          QValue g_th, RngStream* noise_rng, int64_t& nonzero_updates) {
    const int e = st.lr_exponent;
    auto step_word = [&](QValue grad, QValue& accu, int32_t& target, QFormat target_fmt,
                         int extra_shift) {
        std::optional<QValue> update;
        if (cfg.sga) update = sga_step(grad, accu, g_th);
        else update = grad;
        if (!update) return;
        QValue u = *update;
        if (cfg.rgp && noise_rng) u = rgp(u, cfg.rgp_lambda, *noise_rng);
        if (u.raw != 0) ++nonzero_updates;
        // Value u * 2^-e lands on the target grid after a right shift of
        // e + (accumulator frac - target frac) raw bits.
        const int32_t delta = detail::shift_half_away(u.raw, e + extra_shift);
        target = saturate_raw(int64_t(target) - delta, target_fmt);
    };

    const int w_shift = kAccumulatorFmt.frac_bits - kWeightFmt.frac_bits;
    for (size_t i = 0; i < st.W.size(); ++i) {
        QValue accu = st.g_accu_w.q(i);
        step_word(g.w.q(i), accu, st.W.raw(i), kWeightFmt, w_shift);
        st.g_accu_w.set(i, accu);
    }
    if (cfg.train_bias) {
        const int b_shift = kAccumulatorFmt.frac_bits - kActivationFmt.frac_bits;
        for (size_t i = 0; i < st.b.size(); ++i) {
            QValue accu = st.g_accu_b.q(i);
            step_word(g.b.q(i), accu, st.b.raw(i), kActivationFmt, b_shift);
            st.g_accu_b.set(i, accu);
        }
    }
}

namespace detail {

inline void validate_customize(const TrainerState& st, const FeatureBuffer& buf,
                               const CustomizeConfig& cfg) {
    if (cfg.epochs < 1) throw std::invalid_argument("customize: epochs must be positive");
    if (cfg.initial_lr_exponent < 4 || cfg.initial_lr_exponent > 7)
        throw std::invalid_argument("customize: learning rate must start within [1/128, 1/16]");
    if (cfg.lr_floor_exponent < cfg.initial_lr_exponent || cfg.lr_floor_exponent > 7)
        throw std::invalid_argument("customize: learning-rate floor outside [start, 1/128]");
    if (cfg.lr_halve_every < 1)
        throw std::invalid_argument("customize: learning-rate step length must be positive");
    if (cfg.rgp && !(cfg.rgp_lambda >= 1.0))
        throw std::invalid_argument("customize: rgp lambda must be at least 1");
    if (st.W.shape().size() != 2)
        throw std::invalid_argument("customize: classifier weights must be (classes, features)");
    if (buf.empty()) throw BufferEmpty("customize: no buffered features to replay");
    const int classes = st.W.shape()[0];
    const int features = st.W.shape()[1];
    for (int i = 0; i < buf.size(); ++i) {
        if (buf.feature(i).shape() != std::vector<int>{features})
            throw std::invalid_argument("customize: buffered feature width != classifier input");
        if (buf.label(i) >= classes)
            throw std::out_of_range("customize: buffered label outside the class range");
    }
}

} // namespace detail

// Run the on-chip adaptation loop: each epoch replays the whole buffer,
// accumulates gradient words, and applies updates at the scheduled learning
// rate (2^-4 at first, halving every `lr_halve_every` epochs down to the
// floor). The epoch counter lives in the state, so consecutive calls continue
// the schedule. When prediction noise is enabled, each epoch also applies the
// same updates without noise to a shadow copy and counts how many buffered
// decisions the noise changed.
inline std::vector<EpochRecord> customize(TrainerState& st, const FeatureBuffer& buf,
                                          const CustomizeConfig& cfg) {
    detail::validate_customize(st, buf, cfg);
    std::vector<EpochRecord> trace;
    trace.reserve(static_cast<size_t>(cfg.epochs));

    for (int k = 0; k < cfg.epochs; ++k) {
        EpochRecord rec;
        rec.epoch = st.epoch;
        st.lr_exponent = std::min(cfg.initial_lr_exponent + st.epoch / cfg.lr_halve_every,
                                  cfg.lr_floor_exponent);
        rec.lr_exponent = st.lr_exponent;

        const GradientMemory g = replay_gradients(st, buf, cfg, &rec);
        const QValue g_th = g_threshold_for_exponent(st.lr_exponent);
        RngStream noise = RngStream::derive(cfg.seed, {0x72677031, uint64_t(st.epoch)});

        std::optional<TrainerState> shadow;
        if (cfg.rgp) {
            shadow = st; // same emissions, no noise: the counterfactual path
            int64_t scratch = 0;
            apply_updates(*shadow, g, cfg, g_th, nullptr, scratch);
        }
        apply_updates(st, g, cfg, g_th, &noise, rec.nonzero_updates);
        if (shadow) {
            rec.rgp_total = buf.size();
            for (int i = 0; i < buf.size(); ++i)
                if (predict_class(st, buf.feature(i)) == predict_class(*shadow, buf.feature(i)))
                    ++rec.rgp_agree;
        }

        ++st.epoch;
        trace.push_back(rec);
    }
    return trace;
}

} // namespace kwsim
