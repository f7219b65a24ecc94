// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "kwsim/dataio.hpp"
#include "kwsim/model.hpp"
#include "kwsim/rng.hpp"

namespace kwsim {

class ConfigError : public std::runtime_error {
public:
    explicit ConfigError(const std::string& w) : std::runtime_error("config: " + w) {}
};

// Pre-deployment training runs in float: latent weights carry sign confidence,
// batch norm runs on real statistics, and the sign non-linearities train with
// a straight-through estimator clipped at |x| <= 1. Only export quantizes.
struct TrainHyper {
    int epochs = 20;
    int batch_size = 16;
    double lr = 0.01;
    double lr_end = 1e-9; // geometric decay target reached at the last epoch
    double bn_momentum = 0.1;
    uint64_t seed = 1;
    bool augment = true;
};

struct BNLayer {
    std::vector<double> gamma, beta, run_mean, run_var;
    void init(int C) {
        gamma.assign(size_t(C), 1.0);
        beta.assign(size_t(C), 0.0);
        run_mean.assign(size_t(C), 0.0);
        run_var.assign(size_t(C), 1.0);
    }
};

struct FloatBlock {
    int in_channels = 0, out_channels = 0, kernel = 3, pool = 1, groups = 1;
    std::vector<double> w; // (O, C/groups * k) row-major latents in [-1, 1]
    BNLayer bn;
    std::vector<double> offset; // learnable binarization offset, starts at 0
};

struct FloatModel {
    ArchConfig arch;
    std::vector<double> low_hz, band_hz; // front-end cutoff parameters
    BNLayer sinc_bn;
    std::vector<double> sinc_offset;
    std::vector<FloatBlock> blocks;
    std::vector<double> W, b; // classifier (classes x feat), (classes)
    int feat() const { return arch.channels.back(); }
};

namespace train_detail {

constexpr double kBnEps = 1e-5;

using Mat = std::vector<double>;
using Batch = std::vector<Mat>;

// Float grouped "same" 1-D convolution. x: (C, T) row-major; w: (O, C/g * K)
// flattened receptive fields, channel-major tap-minor; positions outside the
// signal read as `pad` (0 for the audio front end, -1 for packed-sign layers).
inline void conv_f(const double* x, int C, int T, const double* w, int O, int K, int g,
                   double pad, double* y) {
    const int cpg = C / g, opg = O / g, c0 = (K - 1) / 2, n = cpg * K;
    for (int gi = 0; gi < g; ++gi) {
        for (int oo = 0; oo < opg; ++oo) {
            const int oc = gi * opg + oo;
            const double* wr = w + size_t(oc) * size_t(n);
            for (int t = 0; t < T; ++t) {
                const int start = t - c0;
                double acc = 0.0;
                for (int i = 0; i < cpg; ++i) {
                    const double* xr = x + size_t(gi * cpg + i) * size_t(T);
                    const double* wk = wr + size_t(i) * size_t(K);
                    for (int k = 0; k < K; ++k) {
                        const int tt = start + k;
                        acc += wk[k] * ((tt < 0 || tt >= T) ? pad : xr[tt]);
                    }
                }
                y[size_t(oc) * size_t(T) + size_t(t)] = acc;
            }
        }
    }
}

// Gradients of conv_f: accumulates into dw (and dx when not null). The pad
// value participated in the forward product, so it contributes to dw too.
inline void conv_f_bwd(const double* x, int C, int T, const double* w, int O, int K, int g,
                       double pad, const double* dy, double* dw, double* dx) {
    const int cpg = C / g, opg = O / g, c0 = (K - 1) / 2, n = cpg * K;
    for (int gi = 0; gi < g; ++gi) {
        for (int oo = 0; oo < opg; ++oo) {
            const int oc = gi * opg + oo;
            const double* wr = w + size_t(oc) * size_t(n);
            double* dwr = dw + size_t(oc) * size_t(n);
            for (int t = 0; t < T; ++t) {
                const double d = dy[size_t(oc) * size_t(T) + size_t(t)];
                if (d == 0.0) continue;
                const int start = t - c0;
                for (int i = 0; i < cpg; ++i) {
                    const int ci = gi * cpg + i;
                    const double* xr = x + size_t(ci) * size_t(T);
                    for (int k = 0; k < K; ++k) {
                        const int tt = start + k;
                        const bool in = tt >= 0 && tt < T;
                        dwr[size_t(i) * size_t(K) + size_t(k)] += d * (in ? xr[tt] : pad);
                        if (dx && in)
                            dx[size_t(ci) * size_t(T) + size_t(tt)] +=
                                d * wr[size_t(i) * size_t(K) + size_t(k)];
                    }
                }
            }
        }
    }
}

// Standard batch-norm backward from cached normalized values: given upstream
// d(pre-activation), accumulates dgamma/dbeta and writes dx.
inline void bn_backward(const Batch& xhat, const Batch& dpre, const std::vector<double>& gamma,
                        const std::vector<double>& inv_std, int C, int T,
                        std::vector<double>& dgamma, std::vector<double>& dbeta, Batch& dx) {
    const int N = int(xhat.size());
    const double M = double(N) * double(T);
    std::vector<double> s1(size_t(C), 0.0), s2(size_t(C), 0.0);
    for (int n = 0; n < N; ++n) {
        for (int c = 0; c < C; ++c) {
            const double* xh = xhat[size_t(n)].data() + size_t(c) * size_t(T);
            const double* dp = dpre[size_t(n)].data() + size_t(c) * size_t(T);
            double a = 0, bsum = 0;
            for (int t = 0; t < T; ++t) {
                a += dp[t];
                bsum += dp[t] * xh[t];
            }
            s1[size_t(c)] += a;
            s2[size_t(c)] += bsum;
            dbeta[size_t(c)] += a;
            dgamma[size_t(c)] += bsum;
        }
    }
    for (int n = 0; n < N; ++n) {
        for (int c = 0; c < C; ++c) {
            const double* xh = xhat[size_t(n)].data() + size_t(c) * size_t(T);
            const double* dp = dpre[size_t(n)].data() + size_t(c) * size_t(T);
            double* out = dx[size_t(n)].data() + size_t(c) * size_t(T);
            const double k1 = s1[size_t(c)] / M, k2 = s2[size_t(c)] / M;
            const double scale = gamma[size_t(c)] * inv_std[size_t(c)];
            for (int t = 0; t < T; ++t) out[t] = scale * (dp[t] - k1 - xh[t] * k2);
        }
    }
}

// One network stage after its convolution: batch norm (+ learnable offset),
// sign, channel shuffle, max pool. Cached enough to run the exact backward.
struct StageCache {
    int C = 0, T = 0, Tout = 0, pool = 1, shuffle_groups = 1;
    Batch conv, xhat, pre, act, out;
    std::vector<std::vector<int>> amax; // winning in-window index per (dst, t_out)
    std::vector<double> mean, var, inv_std;
    std::vector<int> src; // source channel feeding each post-shuffle slot
};

inline void bn_sign_forward(StageCache& sc, BNLayer& bn, const std::vector<double>& offset,
                            double momentum) {
    const int C = sc.C, T = sc.T, N = int(sc.conv.size());
    const double M = double(N) * double(T);
    sc.mean.assign(size_t(C), 0.0);
    sc.var.assign(size_t(C), 0.0);
    sc.inv_std.assign(size_t(C), 0.0);
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            const double* xr = sc.conv[size_t(n)].data() + size_t(c) * size_t(T);
            double a = 0;
            for (int t = 0; t < T; ++t) a += xr[t];
            sc.mean[size_t(c)] += a;
        }
    for (int c = 0; c < C; ++c) sc.mean[size_t(c)] /= M;
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            const double* xr = sc.conv[size_t(n)].data() + size_t(c) * size_t(T);
            const double m = sc.mean[size_t(c)];
            double a = 0;
            for (int t = 0; t < T; ++t) a += (xr[t] - m) * (xr[t] - m);
            sc.var[size_t(c)] += a;
        }
    for (int c = 0; c < C; ++c) {
        sc.var[size_t(c)] /= M;
        sc.inv_std[size_t(c)] = 1.0 / std::sqrt(sc.var[size_t(c)] + kBnEps);
        bn.run_mean[size_t(c)] = (1.0 - momentum) * bn.run_mean[size_t(c)] + momentum * sc.mean[size_t(c)];
        bn.run_var[size_t(c)] = (1.0 - momentum) * bn.run_var[size_t(c)] + momentum * sc.var[size_t(c)];
    }
    sc.xhat.assign(size_t(N), Mat(size_t(C) * size_t(T)));
    sc.pre.assign(size_t(N), Mat(size_t(C) * size_t(T)));
    sc.act.assign(size_t(N), Mat(size_t(C) * size_t(T)));
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            const double* xr = sc.conv[size_t(n)].data() + size_t(c) * size_t(T);
            double* xh = sc.xhat[size_t(n)].data() + size_t(c) * size_t(T);
            double* pr = sc.pre[size_t(n)].data() + size_t(c) * size_t(T);
            double* ac = sc.act[size_t(n)].data() + size_t(c) * size_t(T);
            const double m = sc.mean[size_t(c)], is = sc.inv_std[size_t(c)];
            const double g = bn.gamma[size_t(c)], shift = bn.beta[size_t(c)] + offset[size_t(c)];
            for (int t = 0; t < T; ++t) {
                xh[t] = (xr[t] - m) * is;
                pr[t] = g * xh[t] + shift;
                ac[t] = pr[t] >= 0.0 ? 1.0 : -1.0; // sign tie -> +1, like deployment
            }
        }
}

inline void pool_shuffle_forward(StageCache& sc) {
    const int C = sc.C, T = sc.T, p = sc.pool, g = sc.shuffle_groups;
    const int Tout = T / p, cpg = C / g;
    sc.Tout = Tout;
    sc.src.resize(size_t(C));
    // Shuffle maps source c to (c % g)*cpg + c/g; invert it per destination.
    for (int dst = 0; dst < C; ++dst) sc.src[size_t(dst)] = (dst % cpg) * g + dst / cpg;
    const int N = int(sc.act.size());
    sc.out.assign(size_t(N), Mat(size_t(C) * size_t(Tout)));
    sc.amax.assign(size_t(N), std::vector<int>(size_t(C) * size_t(Tout)));
    for (int n = 0; n < N; ++n)
        for (int dst = 0; dst < C; ++dst) {
            const double* row = sc.act[size_t(n)].data() + size_t(sc.src[size_t(dst)]) * size_t(T);
            double* o = sc.out[size_t(n)].data() + size_t(dst) * size_t(Tout);
            int* am = sc.amax[size_t(n)].data() + size_t(dst) * size_t(Tout);
            for (int to = 0; to < Tout; ++to) {
                int best = 0;
                double bv = row[to * p];
                for (int j = 1; j < p; ++j)
                    if (row[to * p + j] > bv) { // strict: ties keep the first
                        bv = row[to * p + j];
                        best = j;
                    }
                o[to] = bv;
                am[to] = best;
            }
        }
}

// Backward through pool, shuffle, sign STE (clip |pre| <= 1), offset and BN.
// Returns d(conv); accumulates dgamma/dbeta/doffset.
inline Batch stage_backward(const StageCache& sc, const Batch& dout,
                            const std::vector<double>& gamma, std::vector<double>& dgamma,
                            std::vector<double>& dbeta, std::vector<double>& doffset) {
    const int C = sc.C, T = sc.T, p = sc.pool, Tout = sc.Tout;
    const int N = int(dout.size());
    Batch dpre(size_t(N), Mat(size_t(C) * size_t(T), 0.0));
    for (int n = 0; n < N; ++n) {
        Mat dact(size_t(C) * size_t(T), 0.0);
        for (int dst = 0; dst < C; ++dst) {
            const double* dor = dout[size_t(n)].data() + size_t(dst) * size_t(Tout);
            const int* am = sc.amax[size_t(n)].data() + size_t(dst) * size_t(Tout);
            double* dar = dact.data() + size_t(sc.src[size_t(dst)]) * size_t(T);
            for (int to = 0; to < Tout; ++to) dar[to * p + am[to]] += dor[to];
        }
        const double* pr = sc.pre[size_t(n)].data();
        double* dp = dpre[size_t(n)].data();
        for (size_t i = 0; i < dact.size(); ++i)
            dp[i] = std::abs(pr[i]) <= 1.0 ? dact[i] : 0.0;
        for (int c = 0; c < C; ++c) {
            const double* row = dp + size_t(c) * size_t(T);
            double a = 0;
            for (int t = 0; t < T; ++t) a += row[t];
            doffset[size_t(c)] += a;
        }
    }
    Batch dconv(size_t(N), Mat(size_t(C) * size_t(T)));
    bn_backward(sc.xhat, dpre, gamma, sc.inv_std, C, T, dgamma, dbeta, dconv);
    return dconv;
}

inline std::vector<double> binarize(const std::vector<double>& latent) {
    std::vector<double> out(latent.size());
    for (size_t i = 0; i < latent.size(); ++i) out[i] = latent[i] >= 0.0 ? 1.0 : -1.0;
    return out;
}

struct ForwardCache {
    StageCache sinc;
    std::vector<StageCache> blocks;
    std::vector<std::vector<double>> kfloat, kbin; // front-end kernels (F x K)
    Mat kwflat;                                    // the same kernels, flattened
    std::vector<Mat> wbin;                         // per-block ±1 weights
    Batch gap;                                     // fake-quantized features
    Batch scores, prob;
};

inline void softmax_row(const double* s, int n, double* p) {
    double mx = s[0];
    for (int i = 1; i < n; ++i) mx = std::max(mx, s[i]);
    double den = 0;
    for (int i = 0; i < n; ++i) den += (p[i] = std::exp(s[i] - mx));
    for (int i = 0; i < n; ++i) p[i] /= den;
}

inline void forward_batch(FloatModel& fm, const Batch& audio, ForwardCache& fc, double momentum) {
    const ArchConfig& a = fm.arch;
    const int N = int(audio.size());
    const int F = a.sinc_filters, K = a.sinc_kernel;
    const double sr = double(a.sample_rate);

    fc.kfloat.resize(size_t(F));
    fc.kbin.resize(size_t(F));
    for (int f = 0; f < F; ++f) {
        const double f1 = fm.low_hz[size_t(f)] / sr;
        const double f2 = (fm.low_hz[size_t(f)] + fm.band_hz[size_t(f)]) / sr;
        fc.kfloat[size_t(f)] = sinc_bandpass_kernel(f1, f2, K);
        fc.kbin[size_t(f)] = binarize(fc.kfloat[size_t(f)]);
    }
    fc.kwflat.assign(size_t(F) * size_t(K), 0.0);
    for (int f = 0; f < F; ++f)
        std::copy(fc.kbin[size_t(f)].begin(), fc.kbin[size_t(f)].end(),
                  fc.kwflat.begin() + size_t(f) * size_t(K));

    StageCache& s0 = fc.sinc;
    s0.C = F;
    s0.T = a.input_len;
    s0.pool = a.sinc_pool;
    s0.shuffle_groups = 1;
    s0.conv.assign(size_t(N), Mat(size_t(F) * size_t(a.input_len)));
    for (int n = 0; n < N; ++n)
        conv_f(audio[size_t(n)].data(), 1, a.input_len, fc.kwflat.data(), F, K, 1, 0.0,
               s0.conv[size_t(n)].data());
    bn_sign_forward(s0, fm.sinc_bn, fm.sinc_offset, momentum);
    pool_shuffle_forward(s0);

    fc.blocks.assign(fm.blocks.size(), StageCache{});
    fc.wbin.resize(fm.blocks.size());
    const Batch* in = &s0.out;
    int T = s0.Tout;
    for (size_t bi = 0; bi < fm.blocks.size(); ++bi) {
        FloatBlock& blk = fm.blocks[bi];
        StageCache& sc = fc.blocks[bi];
        sc.C = blk.out_channels;
        sc.T = T;
        sc.pool = blk.pool;
        sc.shuffle_groups = blk.groups;
        fc.wbin[bi] = binarize(blk.w);
        sc.conv.assign(size_t(N), Mat(size_t(blk.out_channels) * size_t(T)));
        for (int n = 0; n < N; ++n)
            conv_f((*in)[size_t(n)].data(), blk.in_channels, T, fc.wbin[bi].data(),
                   blk.out_channels, blk.kernel, blk.groups, -1.0, sc.conv[size_t(n)].data());
        bn_sign_forward(sc, blk.bn, blk.offset, momentum);
        pool_shuffle_forward(sc);
        in = &sc.out;
        T = sc.Tout;
    }

    // Global average pool, fake-quantized onto the deployed activation grid.
    const int C = fm.feat();
    fc.gap.assign(size_t(N), Mat(size_t(C)));
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            const double* row = (*in)[size_t(n)].data() + size_t(c) * size_t(T);
            double m = 0;
            for (int t = 0; t < T; ++t) m += row[t];
            fc.gap[size_t(n)][size_t(c)] = quantize(m / double(T), kActivationFmt).value();
        }

    // Classifier on fake-quantized weights, so training sees deployment grids.
    const int M = a.num_classes;
    fc.scores.assign(size_t(N), Mat(size_t(M)));
    fc.prob.assign(size_t(N), Mat(size_t(M)));
    for (int n = 0; n < N; ++n) {
        for (int m = 0; m < M; ++m) {
            double acc = quantize(fm.b[size_t(m)], kActivationFmt).value();
            const double* wr = fm.W.data() + size_t(m) * size_t(C);
            for (int c = 0; c < C; ++c)
                acc += quantize(wr[c], kWeightFmt).value() * fc.gap[size_t(n)][size_t(c)];
            fc.scores[size_t(n)][size_t(m)] = acc;
        }
        softmax_row(fc.scores[size_t(n)].data(), M, fc.prob[size_t(n)].data());
    }
}

// Cross-entropy backward through the whole graph; accumulates into `grad`
// (same shapes as the model, batch-norm running stats unused).
inline void backward_batch(const FloatModel& fm, const Batch& audio, const std::vector<int>& label,
                           const ForwardCache& fc, FloatModel& grad) {
    const ArchConfig& a = fm.arch;
    const int N = int(audio.size());
    const int C = fm.feat(), M = a.num_classes;

    Batch dgap(size_t(N), Mat(size_t(C), 0.0));
    for (int n = 0; n < N; ++n) {
        Mat ds(static_cast<size_t>(M));
        for (int m = 0; m < M; ++m)
            ds[size_t(m)] =
                (fc.prob[size_t(n)][size_t(m)] - (m == label[size_t(n)] ? 1.0 : 0.0)) / double(N);
        for (int m = 0; m < M; ++m) {
            const double d = ds[size_t(m)];
            grad.b[size_t(m)] += d;
            double* gw = grad.W.data() + size_t(m) * size_t(C);
            const double* wr = fm.W.data() + size_t(m) * size_t(C);
            for (int c = 0; c < C; ++c) {
                gw[c] += d * fc.gap[size_t(n)][size_t(c)];
                dgap[size_t(n)][size_t(c)] += d * quantize(wr[c], kWeightFmt).value();
            }
        }
    }

    // GAP backward (quantizer passes gradient straight through).
    const StageCache& last = fc.blocks.empty() ? fc.sinc : fc.blocks.back();
    Batch dout(size_t(N), Mat(size_t(C) * size_t(last.Tout)));
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            const double d = dgap[size_t(n)][size_t(c)] / double(last.Tout);
            double* row = dout[size_t(n)].data() + size_t(c) * size_t(last.Tout);
            for (int t = 0; t < last.Tout; ++t) row[t] = d;
        }

    for (int bi = int(fm.blocks.size()) - 1; bi >= 0; --bi) {
        const FloatBlock& blk = fm.blocks[size_t(bi)];
        const StageCache& sc = fc.blocks[size_t(bi)];
        FloatBlock& gb = grad.blocks[size_t(bi)];
        Batch dconv = stage_backward(sc, dout, blk.bn.gamma, gb.bn.gamma, gb.bn.beta, gb.offset);

        const Batch& in = bi == 0 ? fc.sinc.out : fc.blocks[size_t(bi - 1)].out;
        const int Tin = sc.T;
        Mat dwbin(blk.w.size(), 0.0);
        Batch din(size_t(N), Mat(size_t(blk.in_channels) * size_t(Tin), 0.0));
        for (int n = 0; n < N; ++n)
            conv_f_bwd(in[size_t(n)].data(), blk.in_channels, Tin, fc.wbin[size_t(bi)].data(),
                       blk.out_channels, blk.kernel, blk.groups, -1.0, dconv[size_t(n)].data(),
                       dwbin.data(), din[size_t(n)].data());
        for (size_t i = 0; i < blk.w.size(); ++i)
            if (std::abs(blk.w[i]) <= 1.0) gb.w[i] += dwbin[i]; // weight-sign STE
        dout = std::move(din);
    }

    // Front-end stage, then chain kernel-tap gradients onto the cutoffs.
    Batch dconv = stage_backward(fc.sinc, dout, fm.sinc_bn.gamma, grad.sinc_bn.gamma,
                                 grad.sinc_bn.beta, grad.sinc_offset);
    const int F = a.sinc_filters, K = a.sinc_kernel;
    Mat dkbin(size_t(F) * size_t(K), 0.0);
    for (int n = 0; n < N; ++n)
        conv_f_bwd(audio[size_t(n)].data(), 1, a.input_len, fc.kwflat.data(), F, K, 1, 0.0,
                   dconv[size_t(n)].data(), dkbin.data(), nullptr);
    const double sr = double(a.sample_rate);
    for (int f = 0; f < F; ++f) {
        const double f1 = fm.low_hz[size_t(f)] / sr;
        const double f2 = (fm.low_hz[size_t(f)] + fm.band_hz[size_t(f)]) / sr;
        const std::vector<double> g1 = sinc_kernel_grad(f1, K, false);
        const std::vector<double> g2 = sinc_kernel_grad(f2, K, true);
        double dlo = 0, dband = 0;
        for (int k = 0; k < K; ++k) {
            if (std::abs(fc.kfloat[size_t(f)][size_t(k)]) > 1.0) continue; // sign STE clip
            const double dk = dkbin[size_t(f) * size_t(K) + size_t(k)];
            dlo += dk * (g1[size_t(k)] + g2[size_t(k)]);
            dband += dk * g2[size_t(k)];
        }
        grad.low_hz[size_t(f)] += dlo / sr;
        grad.band_hz[size_t(f)] += dband / sr;
    }
}

} // namespace train_detail

// ===== Parameter bookkeeping ================================================

template <class F>
inline void for_each_param_vec(FloatModel& m, F f) {
    f(m.low_hz);
    f(m.band_hz);
    f(m.sinc_bn.gamma);
    f(m.sinc_bn.beta);
    f(m.sinc_offset);
    for (auto& b : m.blocks) {
        f(b.w);
        f(b.bn.gamma);
        f(b.bn.beta);
        f(b.offset);
    }
    f(m.W);
    f(m.b);
}

template <class F>
inline void for_each_param_vec4(FloatModel& a, FloatModel& b, FloatModel& c, FloatModel& d, F f) {
    f(a.low_hz, b.low_hz, c.low_hz, d.low_hz);
    f(a.band_hz, b.band_hz, c.band_hz, d.band_hz);
    f(a.sinc_bn.gamma, b.sinc_bn.gamma, c.sinc_bn.gamma, d.sinc_bn.gamma);
    f(a.sinc_bn.beta, b.sinc_bn.beta, c.sinc_bn.beta, d.sinc_bn.beta);
    f(a.sinc_offset, b.sinc_offset, c.sinc_offset, d.sinc_offset);
    for (size_t i = 0; i < a.blocks.size(); ++i) {
        f(a.blocks[i].w, b.blocks[i].w, c.blocks[i].w, d.blocks[i].w);
        f(a.blocks[i].bn.gamma, b.blocks[i].bn.gamma, c.blocks[i].bn.gamma, d.blocks[i].bn.gamma);
        f(a.blocks[i].bn.beta, b.blocks[i].bn.beta, c.blocks[i].bn.beta, d.blocks[i].bn.beta);
        f(a.blocks[i].offset, b.blocks[i].offset, c.blocks[i].offset, d.blocks[i].offset);
    }
    f(a.W, b.W, c.W, d.W);
    f(a.b, b.b, c.b, d.b);
}

inline FloatModel zeros_like(const FloatModel& m) {
    FloatModel z = m;
    for_each_param_vec(z, [](std::vector<double>& v) { std::fill(v.begin(), v.end(), 0.0); });
    return z;
}

struct Adam {
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    FloatModel m, v;
    int64_t t = 0;

    explicit Adam(const FloatModel& model) : m(zeros_like(model)), v(zeros_like(model)) {}

    void step(FloatModel& model, FloatModel& grad, double lr) {
        ++t;
        const double bc1 = 1.0 - std::pow(beta1, double(t));
        const double bc2 = 1.0 - std::pow(beta2, double(t));
        for_each_param_vec4(model, grad, m, v,
                            [&](std::vector<double>& p, std::vector<double>& g,
                                std::vector<double>& mm, std::vector<double>& vv) {
                                for (size_t i = 0; i < p.size(); ++i) {
                                    mm[i] = beta1 * mm[i] + (1.0 - beta1) * g[i];
                                    vv[i] = beta2 * vv[i] + (1.0 - beta2) * g[i] * g[i];
                                    p[i] -= lr * (mm[i] / bc1) / (std::sqrt(vv[i] / bc2) + eps);
                                }
                            });
    }
};

// Keep every latent inside the region its exported form can represent.
inline void project_params(FloatModel& fm) {
    const double sr = double(fm.arch.sample_rate);
    const double f2min = min_high_cutoff(fm.arch.sinc_kernel) * sr;
    for (size_t f = 0; f < fm.low_hz.size(); ++f) {
        double& lo = fm.low_hz[f];
        double& band = fm.band_hz[f];
        lo = std::clamp(lo, 1.0, 0.5 * sr - 3.0);
        band = std::clamp(band, std::max(2.0, f2min - lo), 0.5 * sr - lo);
    }
    for (double& g : fm.sinc_bn.gamma) g = std::max(g, 0.05); // keeps front-end polarity +1
    for (double& v : fm.sinc_bn.run_var) v = std::max(v, 1e-8);
    for (auto& b : fm.blocks) {
        for (double& w : b.w) w = std::clamp(w, -1.0, 1.0);
        for (double& g : b.bn.gamma)
            if (std::abs(g) < 1e-3) g = g < 0.0 ? -1e-3 : 1e-3; // zero gain can't fold
        for (double& v : b.bn.run_var) v = std::max(v, 1e-8);
    }
    for (double& w : fm.W) w = std::clamp(w, -1.0, kWeightFmt.max_value());
    for (double& x : fm.b) x = std::clamp(x, kActivationFmt.min_value(), kActivationFmt.max_value());
}

inline FloatModel init_float_model(const ArchConfig& arch, RngStream& rng) {
    ModelSpec proto;
    try {
        proto = make_model(arch); // validates dims and initial cutoff feasibility
    } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what());
    }
    FloatModel fm;
    fm.arch = arch;
    fm.low_hz = proto.sinc.low_hz;
    fm.band_hz = proto.sinc.band_hz;
    fm.sinc_bn.init(arch.sinc_filters);
    fm.sinc_offset.assign(size_t(arch.sinc_filters), 0.0);

    int T = arch.input_len;
    if (arch.sinc_pool < 1 || T % arch.sinc_pool != 0)
        throw ConfigError("input length not divisible by the front-end pool width");
    T /= arch.sinc_pool;
    int in_ch = arch.sinc_filters;
    for (size_t i = 0; i < arch.channels.size(); ++i) {
        FloatBlock b;
        b.in_channels = in_ch;
        b.out_channels = arch.channels[i];
        b.kernel = arch.block_kernel;
        b.pool = arch.pools[i];
        b.groups = in_ch / arch.group_size;
        b.w.resize(size_t(b.out_channels) * size_t(arch.group_size) * size_t(b.kernel));
        for (double& w : b.w) w = rng.uniform(-0.5, 0.5);
        b.bn.init(b.out_channels);
        b.offset.assign(size_t(b.out_channels), 0.0);
        if (b.pool < 1 || T % b.pool != 0)
            throw ConfigError("feature length not divisible by a block's pool width");
        T /= b.pool;
        in_ch = b.out_channels;
        fm.blocks.push_back(std::move(b));
    }
    if (T < 1) throw ConfigError("feature length pooled away to nothing");

    const int C = fm.feat(), M = arch.num_classes;
    const double s = 1.0 / std::sqrt(double(C));
    fm.W.resize(size_t(M) * size_t(C));
    for (double& w : fm.W) w = rng.uniform(-s, s);
    fm.b.assign(size_t(M), 0.0);
    return fm;
}

// ===== Export to the deployed integer form ==================================

inline ModelSpec export_quantized(const FloatModel& fm) {
    ModelSpec m = make_model(fm.arch);
    m.sinc.low_hz = fm.low_hz;
    m.sinc.band_hz = fm.band_hz;
    rebuild_sinc_kernels(m.sinc, m.sample_rate);
    // Training feeds the front end value-domain audio (raw / 16); the deployed
    // datapath convolves the raw mantissas directly, so the fold happens on
    // statistics scaled back into raw units.
    const double raw_scale = 1.0 / kActivationFmt.resolution();
    for (int f = 0; f < m.sinc.num_filters; ++f) {
        const double sigma =
            raw_scale * std::sqrt(fm.sinc_bn.run_var[size_t(f)] + train_detail::kBnEps);
        const FoldedBias fb =
            fold_bn(fm.sinc_bn.gamma[size_t(f)], fm.sinc_bn.beta[size_t(f)],
                    raw_scale * fm.sinc_bn.run_mean[size_t(f)], sigma, fm.sinc_offset[size_t(f)]);
        if (fb.polarity < 0)
            throw DegenerateBN("front-end gain went negative; cannot fold without polarity");
        m.sinc.bias[size_t(f)] = fb.bias;
    }
    for (size_t bi = 0; bi < fm.blocks.size(); ++bi) {
        const FloatBlock& fb = fm.blocks[bi];
        ConvBlockSpec& blk = m.blocks[bi];
        const int cols = blk.weights.cols();
        for (int oc = 0; oc < blk.out_channels; ++oc)
            for (int c = 0; c < cols; ++c)
                blk.weights.set(oc, c, fb.w[size_t(oc) * size_t(cols) + size_t(c)] >= 0.0 ? +1 : -1);
        for (int oc = 0; oc < blk.out_channels; ++oc) {
            const double sigma = std::sqrt(fb.bn.run_var[size_t(oc)] + train_detail::kBnEps);
            const FoldedBias fold =
                fold_bn(fb.bn.gamma[size_t(oc)], fb.bn.beta[size_t(oc)],
                        fb.bn.run_mean[size_t(oc)], sigma, fb.offset[size_t(oc)]);
            blk.bn_bias[size_t(oc)] = fold.bias;
            blk.polarity[size_t(oc)] = fold.polarity;
            blk.act_offset[size_t(oc)] = int32_t(std::llround(fb.offset[size_t(oc)]));
        }
    }
    const int C = fm.feat();
    for (int mrow = 0; mrow < m.num_classes; ++mrow) {
        for (int c = 0; c < C; ++c)
            m.classifier.W.raw(m.classifier.W.idx(mrow, c)) =
                quantize(fm.W[size_t(mrow) * size_t(C) + size_t(c)], kWeightFmt).raw;
        m.classifier.b.raw(size_t(mrow)) = quantize(fm.b[size_t(mrow)], kActivationFmt).raw;
    }
    m.level = ConstraintLevel::quantized;
    m.mapping = BiasMapMethod::add;
    return m;
}

// ===== Training loop ========================================================

struct EpochStats {
    int epoch = 0;
    double lr = 0.0;
    double loss = 0.0;
    double accuracy = 0.0; // argmax agreement on training batches, measured pre-update
};

struct TrainResult {
    ModelSpec model;
    FloatModel masters;
    std::vector<EpochStats> trace;
};

inline std::vector<double> audio_to_float(const Utterance& u) {
    const QTensor q = to_8bit(u);
    std::vector<double> x(q.size());
    for (size_t i = 0; i < q.size(); ++i) x[i] = double(q.raw(i)) * (1.0 / 16.0);
    return x;
}

inline TrainResult train_offline(const Dataset& ds, const ArchConfig& arch, const TrainHyper& hp,
                                 const std::function<void(const EpochStats&)>& on_epoch = {}) {
    if (hp.epochs < 1) throw ConfigError("epochs must be >= 1");
    if (hp.batch_size < 1) throw ConfigError("batch size must be >= 1");
    if (!(hp.lr > 0.0) || !(hp.lr_end > 0.0) || hp.lr_end > hp.lr)
        throw ConfigError("learning rate schedule must satisfy 0 < lr_end <= lr");
    if (ds.train.empty()) throw ConfigError("training set is empty");
    if (int(ds.keywords.size()) != arch.num_classes)
        throw ConfigError("dataset keyword count does not match the class count");
    std::vector<int> labels(ds.train.size());
    for (size_t i = 0; i < ds.train.size(); ++i) {
        if (int(ds.train[i].samples.size()) != arch.input_len)
            throw ConfigError("utterance length does not match the model input length");
        const int lab = ds.label_of(ds.train[i].label);
        if (lab < 0) throw ConfigError("utterance label not in the keyword list");
        labels[i] = lab;
    }

    RngStream init_rng = RngStream::derive(hp.seed, {0x696e6974});
    FloatModel fm = init_float_model(arch, init_rng);
    Adam opt(fm);
    FloatModel grad = zeros_like(fm);

    const int N = int(ds.train.size());
    TrainResult result;
    for (int epoch = 0; epoch < hp.epochs; ++epoch) {
        const double lr =
            hp.epochs == 1
                ? hp.lr
                : hp.lr * std::pow(hp.lr_end / hp.lr, double(epoch) / double(hp.epochs - 1));
        std::vector<int> order(static_cast<size_t>(N));
        std::iota(order.begin(), order.end(), 0);
        RngStream shuffle_rng = RngStream::derive(hp.seed, {0x74726e30, uint64_t(epoch)});
        for (int i = N - 1; i > 0; --i)
            std::swap(order[size_t(i)], order[size_t(shuffle_rng.uniform_int(0, i))]);

        double loss_sum = 0.0;
        int correct = 0;
        for (int b0 = 0; b0 < N; b0 += hp.batch_size) {
            const int bn = std::min(hp.batch_size, N - b0);
            train_detail::Batch xs(static_cast<size_t>(bn));
            std::vector<int> ys(static_cast<size_t>(bn));
            for (int j = 0; j < bn; ++j) {
                const int idx = order[size_t(b0 + j)];
                Utterance u = ds.train[size_t(idx)];
                if (hp.augment) {
                    RngStream aug_rng =
                        RngStream::derive(hp.seed, {0x61756731, uint64_t(epoch), uint64_t(idx)});
                    u = augment(u, aug_rng);
                }
                xs[size_t(j)] = audio_to_float(u);
                ys[size_t(j)] = labels[size_t(idx)];
            }
            train_detail::ForwardCache fc;
            train_detail::forward_batch(fm, xs, fc, hp.bn_momentum);
            for (int j = 0; j < bn; ++j) {
                const auto& p = fc.prob[size_t(j)];
                loss_sum += -std::log(std::max(p[size_t(ys[size_t(j)])], 1e-12));
                int am = 0;
                for (int k = 1; k < arch.num_classes; ++k)
                    if (fc.scores[size_t(j)][size_t(k)] > fc.scores[size_t(j)][size_t(am)]) am = k;
                correct += am == ys[size_t(j)];
            }
            for_each_param_vec(grad,
                               [](std::vector<double>& v) { std::fill(v.begin(), v.end(), 0.0); });
            train_detail::backward_batch(fm, xs, ys, fc, grad);
            opt.step(fm, grad, lr);
            project_params(fm);
        }
        EpochStats st{epoch, lr, loss_sum / double(N), double(correct) / double(N)};
        result.trace.push_back(st);
        if (on_epoch) on_epoch(st);
    }
    result.model = export_quantized(fm);
    result.masters = std::move(fm);
    return result;
}

} // namespace kwsim
