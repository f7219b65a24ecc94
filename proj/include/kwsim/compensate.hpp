// SPDX-License-Identifier: Apache-2.0
//
// Deployment pipeline for the in-memory arrays: pick the bias mapping rule,
// constrain a checkpoint onto the wordline grid, estimate static read offsets
// from paired digital/analog measurements, fold the negated estimates back
// into the array biases, and optionally fine-tune the classifier against the
// noisy feature extractor.
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "kwsim/dataio.hpp"
#include "kwsim/imcsim.hpp"
#include "kwsim/model.hpp"
#include "kwsim/rng.hpp"

namespace kwsim {

// ===== Evaluation ===========================================================

struct EvalResult {
    int correct = 0;
    int total = 0;
    std::vector<int> predicted;
    std::vector<int> expected;
    double accuracy() const { return total > 0 ? double(correct) / double(total) : 0.0; }
};

// Classify each utterance and score against its labelled keyword. Per-read
// randomness is keyed by the utterance's position in `utts`, so repeated
// evaluations of the same list reproduce the same reads bit for bit.
inline EvalResult evaluate(const ModelSpec& m, const std::vector<Utterance>& utts,
                           const Dataset& ds, const ForwardOptions& opt = {}) {
    EvalResult r;
    r.total = int(utts.size());
    r.predicted.reserve(utts.size());
    r.expected.reserve(utts.size());
    ForwardOptions o = opt;
    for (size_t i = 0; i < utts.size(); ++i) {
        const int label = ds.label_of(utts[i].label);
        if (label < 0)
            throw std::invalid_argument("evaluate: label '" + utts[i].label +
                                        "' is not a known keyword");
        o.sample_key = uint64_t(i);
        const int pred = argmax_class(forward(m, to_8bit(utts[i]), o));
        r.predicted.push_back(pred);
        r.expected.push_back(label);
        if (pred == label) ++r.correct;
    }
    return r;
}

// ===== Constraining a checkpoint ============================================

// Round every block bias onto the even, range-limited wordline grid with one
// mapping method. Already-legal biases map to themselves, so constraining is
// idempotent.
inline ModelSpec constrain(const ModelSpec& m, BiasMapMethod method) {
    ModelSpec out = m;
    for (ConvBlockSpec& blk : out.blocks)
        for (int32_t& bias : blk.bn_bias) bias = map_bias(bias, method).mapped;
    out.level = ConstraintLevel::constrained;
    out.mapping = method;
    return out;
}

// Try all four mapping methods end to end on a validation list and return the
// most accurate one; ties go to the lower enum value. The noise-free array is
// bit-equivalent to the digital path, so the sweep runs digitally.
inline BiasMapMethod select_mapping(const ModelSpec& m, const std::vector<Utterance>& val,
                                    const Dataset& ds) {
    if (val.empty()) throw std::invalid_argument("select_mapping: validation list is empty");
    int best_correct = -1;
    BiasMapMethod best = BiasMapMethod::add;
    for (BiasMapMethod method : {BiasMapMethod::add, BiasMapMethod::absolute_add,
                                 BiasMapMethod::sub, BiasMapMethod::absolute_sub}) {
        const int correct = evaluate(constrain(m, method), val, ds).correct;
        if (correct > best_correct) {
            best_correct = correct;
            best = method;
        }
    }
    return best;
}

// ===== Offset estimation ====================================================

// Force one column's static analog offset (replacing any drawn value) while
// collecting difference statistics — an estimator test hook.
struct OffsetFault {
    int block = 0; // 0-based block index
    int channel = 0;
    double offset = 0.0;
};

struct DiffStats {
    double mean = 0.0;
    double variance = 0.0; // population variance of the observed differences
    int64_t count = 0;
};

// Per-block, per-output-channel statistics of (analog pre-comparator value −
// exact digital sum).
struct DifferenceReport {
    std::vector<std::vector<DiffStats>> blocks;
};

namespace detail {

struct Welford {
    double mean = 0.0, m2 = 0.0;
    int64_t n = 0;
    void add(double x) {
        ++n;
        const double d = x - mean;
        mean += d / double(n);
        m2 += d * (x - mean);
    }
    double variance() const { return n > 0 ? m2 / double(n) : 0.0; }
};

} // namespace detail

// Drive every block with clean digital upstream activations from the probe
// utterances and record, per output channel, the difference between the
// analog column value and the exact digital sum for the same window. Static
// column offsets appear as the per-channel mean; per-read noise averages out
// into the variance. Arrays are programmed once (offsets keyed exactly as in
// normal inference), so the estimates describe the same physical instance
// that later evaluations with the same noise seed will read.
inline DifferenceReport collect_difference_stats(const ModelSpec& m, const NoiseModel& noise,
                                                 const std::vector<Utterance>& probes, int trials,
                                                 const std::vector<OffsetFault>& faults = {}) {
    if (probes.empty())
        throw std::invalid_argument("collect_difference_stats: no probe utterances");
    if (trials < 1) throw std::invalid_argument("collect_difference_stats: trials must be >= 1");

    std::vector<std::vector<ImcMacro>> arrays;
    arrays.reserve(m.blocks.size());
    for (size_t bi = 0; bi < m.blocks.size(); ++bi)
        arrays.push_back(detail::load_block_macros(m.blocks[bi], int(bi) + 1, noise));

    for (const OffsetFault& f : faults) {
        if (f.block < 0 || size_t(f.block) >= m.blocks.size())
            throw std::invalid_argument("collect_difference_stats: fault block out of range");
        const ConvBlockSpec& blk = m.blocks[size_t(f.block)];
        if (f.channel < 0 || f.channel >= blk.out_channels)
            throw std::invalid_argument("collect_difference_stats: fault channel out of range");
        const int opg = blk.out_channels / blk.groups;
        const int local = f.channel % opg;
        const size_t mac = size_t(f.channel / opg) * size_t(detail::macros_per_group(blk)) +
                           size_t(local / ImcMacro::kBanks);
        arrays[size_t(f.block)][mac].set_static_offset(local % ImcMacro::kBanks, f.offset);
    }

    std::vector<std::vector<detail::Welford>> acc(m.blocks.size());
    for (size_t bi = 0; bi < m.blocks.size(); ++bi)
        acc[bi].resize(static_cast<size_t>(m.blocks[bi].out_channels));

    for (size_t p = 0; p < probes.size(); ++p) {
        IntTensor s0 = sinc_conv(to_8bit(probes[p]), m.sinc.kernels);
        BinTensor x = sign_activation(s0, m.sinc.bias);
        if (m.sinc.pool > 1) x = maxpool1d(x, m.sinc.pool);
        for (size_t bi = 0; bi < m.blocks.size(); ++bi) {
            const ConvBlockSpec& blk = m.blocks[bi];
            const int layer = int(bi) + 1;
            const int ig = x.rows() / blk.groups;
            const int n = ig * blk.kernel;
            const int opg = blk.out_channels / blk.groups;
            const int mpg = detail::macros_per_group(blk);
            std::vector<uint64_t> win((static_cast<size_t>(n) + 63) / 64);
            std::array<double, ImcMacro::kBanks> analog{};
            for (int trial = 0; trial < trials; ++trial) {
                const uint64_t sample_key = uint64_t(p) * uint64_t(trials) + uint64_t(trial);
                RngStream reads =
                    RngStream::derive(noise.seed, {0x73617264ull, sample_key, uint64_t(layer)});
                for (int t = 0; t < x.cols(); ++t) {
                    for (int g = 0; g < blk.groups; ++g) {
                        build_conv_window(x, g, ig, blk.kernel, t, win.data(), win.size());
                        for (int mi = 0; mi < mpg; ++mi) {
                            const ImcMacro& mac =
                                arrays[bi][size_t(g) * size_t(mpg) + size_t(mi)];
                            mac.mav_raw(win.data(), noise, reads, analog);
                            for (int b = 0; b < ImcMacro::kBanks; ++b) {
                                const int oc_local = mi * ImcMacro::kBanks + b;
                                if (oc_local >= opg) break;
                                const double diff = analog[size_t(b)] -
                                                    double(mac.digital_sum(b, win.data()));
                                acc[bi][size_t(g * opg + oc_local)].add(diff);
                            }
                        }
                    }
                }
            }
            // Advance to the next block on the clean digital path.
            BinTensor y = detail::digital_block_forward(x, blk);
            apply_polarity(y, blk.polarity);
            if (blk.groups > 1) y = channel_shuffle(y, blk.groups);
            if (blk.pool > 1) y = maxpool1d(y, blk.pool);
            x = std::move(y);
        }
    }

    DifferenceReport rep;
    rep.blocks.resize(acc.size());
    for (size_t bi = 0; bi < acc.size(); ++bi) {
        rep.blocks[bi].resize(acc[bi].size());
        for (size_t c = 0; c < acc[bi].size(); ++c)
            rep.blocks[bi][c] = DiffStats{acc[bi][c].mean, acc[bi][c].variance(), acc[bi][c].n};
    }
    return rep;
}

// ===== Compensation =========================================================

// One integer bias correction per channel: the negated, half-away-rounded
// mean difference, which cancels the estimated static offset.
inline std::vector<std::vector<int>> derive_compensation(const DifferenceReport& rep) {
    std::vector<std::vector<int>> deltas(rep.blocks.size());
    for (size_t b = 0; b < rep.blocks.size(); ++b) {
        deltas[b].resize(rep.blocks[b].size());
        for (size_t c = 0; c < rep.blocks[b].size(); ++c)
            deltas[b][c] = -int(std::llround(rep.blocks[b][c].mean));
    }
    return deltas;
}

struct MergeOutcome {
    int clamped = 0; // corrected biases that ran out of wordline range
    bool range_exceeded = false;
};

// Fold the corrections into the block biases, re-mapping each sum with the
// model's own method so the result stays array-legal.
inline MergeOutcome merge_compensation(ModelSpec& m, const std::vector<std::vector<int>>& deltas) {
    if (m.level != ConstraintLevel::constrained)
        throw std::invalid_argument("merge_compensation: model must be constrained");
    if (deltas.size() != m.blocks.size())
        throw std::invalid_argument("merge_compensation: delta shape does not match the model");
    MergeOutcome out;
    for (size_t b = 0; b < m.blocks.size(); ++b) {
        ConvBlockSpec& blk = m.blocks[b];
        if (deltas[b].size() != blk.bn_bias.size())
            throw std::invalid_argument("merge_compensation: delta shape does not match the model");
        for (size_t c = 0; c < blk.bn_bias.size(); ++c) {
            const MappedBias mb = map_bias(blk.bn_bias[c] + deltas[b][c], m.mapping);
            blk.bn_bias[c] = mb.mapped;
            if (mb.clamped) ++out.clamped;
        }
    }
    out.range_exceeded = out.clamped > 0;
    return out;
}

// ===== Classifier fine-tuning ===============================================

struct CompensateConfig {
    int probe_count = 256;  // training utterances used for calibration
    int trials = 1;         // repeated reads per probe during estimation
    int finetune_epochs = 4;
    int batch_size = 16;
    double lr = 1e-3;
    uint64_t seed = 1;
};

namespace detail {

struct AdamState {
    std::vector<double> m, v;
    int64_t t = 0;
    explicit AdamState(size_t n) : m(n, 0.0), v(n, 0.0) {}
    void step(std::vector<double>& w, const std::vector<double>& g, double lr) {
        ++t;
        const double c1 = 1.0 - std::pow(0.9, double(t));
        const double c2 = 1.0 - std::pow(0.999, double(t));
        for (size_t i = 0; i < w.size(); ++i) {
            m[i] = 0.9 * m[i] + 0.1 * g[i];
            v[i] = 0.999 * v[i] + 0.001 * g[i] * g[i];
            w[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + 1e-8);
        }
    }
};

// Cross-entropy descent on a float shadow of the classifier, driven by fixed
// (already measured) noisy features; the result is quantized back to the
// on-chip formats.
inline ClassifierSpec finetune_classifier(const ClassifierSpec& cls,
                                          const std::vector<QTensor>& feats,
                                          const std::vector<int>& labels,
                                          const CompensateConfig& cfg) {
    const int K = cls.W.shape()[0];
    const int F = cls.W.shape()[1];
    std::vector<double> W(static_cast<size_t>(K) * static_cast<size_t>(F));
    std::vector<double> b(static_cast<size_t>(K));
    for (size_t i = 0; i < W.size(); ++i) W[i] = cls.W.value(i);
    for (size_t k = 0; k < b.size(); ++k) b[k] = cls.b.value(k);

    std::vector<std::vector<double>> x(feats.size());
    for (size_t s = 0; s < feats.size(); ++s) {
        x[s].resize(static_cast<size_t>(F));
        for (int j = 0; j < F; ++j) x[s][size_t(j)] = feats[s].value(size_t(j));
    }

    AdamState aw(W.size());
    AdamState ab(b.size());
    RngStream shuffle = RngStream::derive(cfg.seed, {0x66746e31ull});
    std::vector<size_t> order(feats.size());
    std::iota(order.begin(), order.end(), size_t(0));
    std::vector<double> z(static_cast<size_t>(K));
    std::vector<double> gW(W.size()), gb(b.size());

    for (int epoch = 0; epoch < cfg.finetune_epochs; ++epoch) {
        for (size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[size_t(shuffle.uniform_int(0, int64_t(i) - 1))]);
        for (size_t start = 0; start < order.size(); start += size_t(cfg.batch_size)) {
            const size_t end = std::min(order.size(), start + size_t(cfg.batch_size));
            std::fill(gW.begin(), gW.end(), 0.0);
            std::fill(gb.begin(), gb.end(), 0.0);
            for (size_t ii = start; ii < end; ++ii) {
                const std::vector<double>& xs = x[order[ii]];
                double zmax = -1e300;
                for (int k = 0; k < K; ++k) {
                    double s = b[size_t(k)];
                    const double* row = W.data() + size_t(k) * size_t(F);
                    for (int j = 0; j < F; ++j) s += row[j] * xs[size_t(j)];
                    z[size_t(k)] = s;
                    zmax = std::max(zmax, s);
                }
                double den = 0.0;
                for (int k = 0; k < K; ++k) {
                    z[size_t(k)] = std::exp(z[size_t(k)] - zmax);
                    den += z[size_t(k)];
                }
                for (int k = 0; k < K; ++k) {
                    const double grad = z[size_t(k)] / den -
                                        (k == labels[order[ii]] ? 1.0 : 0.0);
                    gb[size_t(k)] += grad;
                    double* grow = gW.data() + size_t(k) * size_t(F);
                    for (int j = 0; j < F; ++j) grow[j] += grad * xs[size_t(j)];
                }
            }
            const double inv = 1.0 / double(end - start);
            for (double& g : gW) g *= inv;
            for (double& g : gb) g *= inv;
            aw.step(W, gW, cfg.lr);
            ab.step(b, gb, cfg.lr);
        }
    }

    ClassifierSpec out = cls;
    for (size_t i = 0; i < W.size(); ++i) out.W.raw(i) = quantize(W[i], kWeightFmt).raw;
    for (size_t k = 0; k < b.size(); ++k) out.b.raw(k) = quantize(b[k], kActivationFmt).raw;
    return out;
}

} // namespace detail

// ===== Full pipeline ========================================================

struct StageAccuracy {
    std::string stage;
    int correct = 0;
    int total = 0;
    double accuracy = 0.0;
};

struct CompensationResult {
    ModelSpec model;
    std::vector<StageAccuracy> stages; // clean, noisy, compensated[, finetuned]
    std::vector<std::vector<int>> deltas;
    int clamped = 0;
    bool range_exceeded = false;
    bool finetune_kept = false;
};

// Measure the accuracy cost of the analog non-idealities on the test split,
// estimate and merge bias compensation from training probes, and optionally
// fine-tune the classifier on noisy features. Without noise the estimates are
// exactly zero, the merge is the identity, and fine-tuning is skipped, so the
// checkpoint passes through bit-identical.
inline CompensationResult compensate_and_finetune(const ModelSpec& m, const NoiseModel& noise,
                                                  const Dataset& ds,
                                                  const CompensateConfig& cfg = {}) {
    if (m.level != ConstraintLevel::constrained)
        throw std::invalid_argument("compensate_and_finetune: model must be constrained");
    if (ds.train.empty() || ds.test.empty())
        throw std::invalid_argument("compensate_and_finetune: dataset has an empty split");
    if (cfg.probe_count < 1 || cfg.trials < 1 || cfg.batch_size < 1 ||
        cfg.finetune_epochs < 0 || !(cfg.lr > 0.0))
        throw std::invalid_argument("compensate_and_finetune: invalid configuration");

    CompensationResult r;
    auto stage = [&](const char* name, const ModelSpec& model, const ForwardOptions& opt) {
        const EvalResult e = evaluate(model, ds.test, ds, opt);
        r.stages.push_back(StageAccuracy{name, e.correct, e.total, e.accuracy()});
    };

    ForwardOptions noisy;
    noisy.backend = Backend::imc;
    noisy.noise = noise;

    stage("clean", m, ForwardOptions{});
    stage("noisy", m, noisy);

    // Seeded sample of the training split: the calibration recordings.
    std::vector<size_t> idx(ds.train.size());
    std::iota(idx.begin(), idx.end(), size_t(0));
    RngStream pick = RngStream::derive(cfg.seed, {0x70726f62ull});
    const size_t want = std::min(static_cast<size_t>(cfg.probe_count), idx.size());
    for (size_t i = 0; i < want; ++i) {
        const size_t j = i + size_t(pick.uniform_int(0, int64_t(idx.size() - i) - 1));
        std::swap(idx[i], idx[j]);
    }
    std::vector<Utterance> probes;
    probes.reserve(want);
    for (size_t i = 0; i < want; ++i) probes.push_back(ds.train[idx[i]]);

    r.deltas = derive_compensation(collect_difference_stats(m, noise, probes, cfg.trials));
    ModelSpec comp = m;
    const MergeOutcome merged = merge_compensation(comp, r.deltas);
    r.clamped = merged.clamped;
    r.range_exceeded = merged.range_exceeded;
    stage("compensated", comp, noisy);
    r.model = std::move(comp);

    if (cfg.finetune_epochs > 0 && !noise.is_zero()) {
        // Features as the compensated arrays actually read them.
        std::vector<QTensor> feats;
        std::vector<int> labels;
        feats.reserve(probes.size());
        labels.reserve(probes.size());
        for (size_t i = 0; i < probes.size(); ++i) {
            const int label = ds.label_of(probes[i].label);
            if (label < 0)
                throw std::invalid_argument("compensate_and_finetune: label '" +
                                            probes[i].label + "' is not a known keyword");
            ForwardOptions o = noisy;
            o.sample_key = uint64_t(i);
            feats.push_back(forward_features(r.model, to_8bit(probes[i]), o));
            labels.push_back(label);
        }
        ModelSpec cand = r.model;
        cand.classifier = detail::finetune_classifier(r.model.classifier, feats, labels, cfg);
        // Keep the tuned head only if it does not regress on the probes.
        if (evaluate(cand, probes, ds, noisy).correct >=
            evaluate(r.model, probes, ds, noisy).correct) {
            r.model = std::move(cand);
            r.finetune_kept = true;
        }
        stage("finetuned", r.model, noisy);
    }
    return r;
}

} // namespace kwsim
