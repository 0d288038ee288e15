// Mixture head: per-pixel scaled dot-product self-attention across the
// denoisers' feature lines, fault filtering on the spatial variance of the
// attention diagonal, residual aggregation, mean, and projection to a noise
// estimate subtracted from the input line.
#pragma once

#include <memory>
#include <vector>

#include "pushbroom/denoiser.hpp"

namespace pushbroom {

struct AggregatorParams {
    int features = 0;  // F
    int bands = 0;     // N_b
    LinearLayer w_k, w_q, w_v;  // F -> F, shared across denoisers, no bias
    Conv1dLayer out_conv;       // F -> N_b
    double tau = 0.01;          // fault threshold on diagonal variance
    // Feature maps beyond this magnitude are treated like non-finite ones:
    // flagged before any attention math. Inputs live in [0,1], so features
    // orders of magnitude outside that range mean a corrupted member whose
    // scores would otherwise saturate the shared softmax and poison every
    // verdict on the line.
    double feature_guard = 1e4;

    static AggregatorParams make(int features, int bands, uint64_t seed, double tau = 0.01) {
        Rng rng(seed);
        AggregatorParams a;
        a.features = features;
        a.bands = bands;
        a.w_k = LinearLayer::make(features, features, rng, false);
        a.w_q = LinearLayer::make(features, features, rng, false);
        a.w_v = LinearLayer::make(features, features, rng, false);
        a.out_conv = Conv1dLayer::make(features, bands, 3, 1, rng);
        a.tau = tau;
        if (tau <= 0.0) fail("aggregator: fault threshold must be positive");
        return a;
    }

    void visit_params(const std::string& p, const ParamVisitor& fn) {
        w_k.visit_params(p + ".w_k", fn);
        w_q.visit_params(p + ".w_q", fn);
        w_v.visit_params(p + ".w_v", fn);
        out_conv.visit_params(p + ".out_conv", fn);
    }
};

struct FaultReport {
    std::vector<double> variance;    // per supplied denoiser; +inf for non-finite features
    std::vector<bool> faulty;
    std::vector<int> active;         // indices of non-faulty denoisers, ascending
    bool all_faulty() const { return active.empty(); }
};

// Spatial variance of each denoiser's diagonal attention score across the
// line. The full matrix over all finite feature maps is computed; non-finite
// maps are flagged before any attention math.
inline FaultReport detect_faults(const std::vector<const Tensor*>& features,
                                 const AggregatorParams& p) {
    size_t D = features.size();
    if (D == 0) fail("detect_faults: no denoiser features supplied");
    int N = features[0]->dim(1), F = features[0]->dim(2);
    for (const Tensor* t : features)
        if (t->dim(0) != 1 || t->dim(1) != N || t->dim(2) != F)
            fail("detect_faults: feature shapes differ across denoisers");

    FaultReport rep;
    rep.variance.assign(D, 0.0);
    rep.faulty.assign(D, false);
    std::vector<int> finite;
    for (size_t d = 0; d < D; ++d) {
        bool sane = true;
        for (int64_t i = 0; i < features[d]->numel() && sane; ++i) {
            double v = (*features[d])[i];
            sane = std::isfinite(v) && std::fabs(v) <= p.feature_guard;
        }
        if (sane) {
            finite.push_back((int)d);
        } else {
            rep.faulty[d] = true;
            rep.variance[d] = std::numeric_limits<double>::infinity();
        }
    }

    int Df = (int)finite.size();
    if (Df > 0) {
        // key / query projections per finite denoiser
        std::vector<Tensor> K((size_t)Df), Q((size_t)Df);
        for (int i = 0; i < Df; ++i) {
            K[(size_t)i] = Tensor({1, N, F});
            Q[(size_t)i] = Tensor({1, N, F});
            linear_fwd(*features[(size_t)finite[(size_t)i]], p.w_k.w, nullptr, K[(size_t)i]);
            linear_fwd(*features[(size_t)finite[(size_t)i]], p.w_q.w, nullptr, Q[(size_t)i]);
        }
        double scale = 1.0 / std::sqrt((double)F);
        std::vector<double> scores((size_t)Df);
        std::vector<double> sum((size_t)Df, 0.0), sum2((size_t)Df, 0.0);
        for (int n = 0; n < N; ++n) {
            for (int i = 0; i < Df; ++i) {
                const double* ki = K[(size_t)i].data() + (int64_t)n * F;
                double mx = -std::numeric_limits<double>::infinity();
                for (int j = 0; j < Df; ++j) {
                    const double* qj = Q[(size_t)j].data() + (int64_t)n * F;
                    double dot = 0.0;
                    for (int f = 0; f < F; ++f) dot += ki[f] * qj[f];
                    scores[(size_t)j] = dot * scale;
                    mx = std::max(mx, scores[(size_t)j]);
                }
                double z = 0.0, diag_num = 0.0;
                for (int j = 0; j < Df; ++j) {
                    double e = std::exp(scores[(size_t)j] - mx);
                    z += e;
                    if (j == i) diag_num = e;
                }
                double aii = diag_num / z;
                sum[(size_t)i] += aii;
                sum2[(size_t)i] += aii * aii;
            }
        }
        for (int i = 0; i < Df; ++i) {
            double mu = sum[(size_t)i] / N;
            double var = std::max(0.0, sum2[(size_t)i] / N - mu * mu);
            int d = finite[(size_t)i];
            rep.variance[(size_t)d] = var;
            rep.faulty[(size_t)d] = var > p.tau;
        }
    }
    for (size_t d = 0; d < D; ++d)
        if (!rep.faulty[d]) rep.active.push_back((int)d);
    return rep;
}

// Residual self-attention over the active set, mean, projection to a noise
// estimate, and subtraction: the attention is recomputed on the reduced set
// only, so filtering a member is bitwise identical to a mixture built
// without it.
inline void aggregate_line(const Tensor& y_line, const std::vector<const Tensor*>& features,
                           const std::vector<int>& active, const AggregatorParams& p,
                           Tensor& x_hat) {
    if (active.empty())
        fail("aggregate_line: every denoiser is flagged faulty (no active members)");
    int N = y_line.dim(1);
    int F = p.features;
    int Da = (int)active.size();

    std::vector<Tensor> K((size_t)Da), Q((size_t)Da), V((size_t)Da);
    for (int i = 0; i < Da; ++i) {
        const Tensor& h = *features[(size_t)active[(size_t)i]];
        K[(size_t)i] = Tensor({1, N, F});
        Q[(size_t)i] = Tensor({1, N, F});
        V[(size_t)i] = Tensor({1, N, F});
        linear_fwd(h, p.w_k.w, nullptr, K[(size_t)i]);
        linear_fwd(h, p.w_q.w, nullptr, Q[(size_t)i]);
        linear_fwd(h, p.w_v.w, nullptr, V[(size_t)i]);
    }

    double scale = 1.0 / std::sqrt((double)F);
    Tensor mean_z({1, N, F});
    std::vector<double> scores((size_t)Da), att((size_t)Da);
    for (int n = 0; n < N; ++n) {
        double* mz = mean_z.data() + (int64_t)n * F;
        for (int i = 0; i < Da; ++i) {
            const double* ki = K[(size_t)i].data() + (int64_t)n * F;
            double mx = -std::numeric_limits<double>::infinity();
            for (int j = 0; j < Da; ++j) {
                const double* qj = Q[(size_t)j].data() + (int64_t)n * F;
                double dot = 0.0;
                for (int f = 0; f < F; ++f) dot += ki[f] * qj[f];
                scores[(size_t)j] = dot * scale;
                mx = std::max(mx, scores[(size_t)j]);
            }
            double z = 0.0;
            for (int j = 0; j < Da; ++j) {
                att[(size_t)j] = std::exp(scores[(size_t)j] - mx);
                z += att[(size_t)j];
            }
            const double* hi = features[(size_t)active[(size_t)i]]->data() + (int64_t)n * F;
            for (int f = 0; f < F; ++f) {
                double acc = 0.0;
                for (int j = 0; j < Da; ++j)
                    acc += att[(size_t)j] / z * V[(size_t)j][(int64_t)n * F + f];
                // z^(d) = attention output + residual feature, averaged on the fly
                mz[f] += (acc + hi[f]) / Da;
            }
        }
    }

    Tensor n_hat({1, N, p.bands});
    conv1d_fwd(mean_z, p.out_conv.w, &p.out_conv.b, 1, n_hat);
    if (!x_hat.same_shape(y_line)) x_hat = Tensor(y_line.shape());
    sub_fwd(y_line, n_hat, x_hat);
}

// ---------------------------------------------------------------------------
// training-path attention (tape op)
// ---------------------------------------------------------------------------

// Fused residual self-attention across denoisers for whole patches.
// feats: D vars of [L x N x F]; returns Z = SA({h}) + h stacked [D x L*N x F]
// viewed as [D, L, N, F].
inline Var mixture_attention(Graph& g, const std::vector<Var>& feats, Var wk, Var wq, Var wv) {
    int D = (int)feats.size();
    if (D == 0) fail("mixture_attention: no features");
    const Tensor& f0 = g.val(feats[0]);
    check_3d("mixture_attention", f0);
    int L = f0.dim(0), N = f0.dim(1), F = f0.dim(2);
    for (Var v : feats) check_same_shape("mixture_attention", f0, g.val(v));

    struct Saved {
        Tensor k, q, v;  // [D x L*N x F]
        Tensor att;      // [L*N x D x D], row-softmaxed
    };
    auto sv = std::make_shared<Saved>();
    int64_t P = (int64_t)L * N;  // pixels overall
    sv->k = Tensor({D, (int)P, F});
    sv->q = Tensor({D, (int)P, F});
    sv->v = Tensor({D, (int)P, F});
    sv->att = Tensor({(int)P, D, D});

    const Tensor &wkt = g.val(wk), &wqt = g.val(wq), &wvt = g.val(wv);
    for (int d = 0; d < D; ++d) {
        const Tensor& h = g.val(feats[(size_t)d]);
        Tensor kd({1, (int)P, F}), qd({1, (int)P, F}), vd({1, (int)P, F});
        linear_fwd(h.reshaped({1, (int)P, F}), wkt, nullptr, kd);
        linear_fwd(h.reshaped({1, (int)P, F}), wqt, nullptr, qd);
        linear_fwd(h.reshaped({1, (int)P, F}), wvt, nullptr, vd);
        std::copy(kd.data(), kd.data() + P * F, sv->k.data() + (int64_t)d * P * F);
        std::copy(qd.data(), qd.data() + P * F, sv->q.data() + (int64_t)d * P * F);
        std::copy(vd.data(), vd.data() + P * F, sv->v.data() + (int64_t)d * P * F);
    }

    double scale = 1.0 / std::sqrt((double)F);
    Tensor out({D, L, N, F});
    std::vector<double> row((size_t)D);
    for (int64_t n = 0; n < P; ++n) {
        double* attn = sv->att.data() + n * D * D;
        for (int i = 0; i < D; ++i) {
            const double* ki = sv->k.data() + ((int64_t)i * P + n) * F;
            double mx = -std::numeric_limits<double>::infinity();
            for (int j = 0; j < D; ++j) {
                const double* qj = sv->q.data() + ((int64_t)j * P + n) * F;
                double dot = 0.0;
                for (int f = 0; f < F; ++f) dot += ki[f] * qj[f];
                row[(size_t)j] = dot * scale;
                mx = std::max(mx, row[(size_t)j]);
            }
            double z = 0.0;
            for (int j = 0; j < D; ++j) {
                row[(size_t)j] = std::exp(row[(size_t)j] - mx);
                z += row[(size_t)j];
            }
            for (int j = 0; j < D; ++j) attn[(int64_t)i * D + j] = row[(size_t)j] / z;
        }
        for (int i = 0; i < D; ++i) {
            const double* hi = g.val(feats[(size_t)i]).data() + n * F;
            double* od = out.data() + ((int64_t)i * P + n) * F;
            for (int f = 0; f < F; ++f) od[f] = hi[f];
            for (int j = 0; j < D; ++j) {
                double a = attn[(int64_t)i * D + j];
                const double* vj = sv->v.data() + ((int64_t)j * P + n) * F;
                for (int f = 0; f < F; ++f) od[f] += a * vj[f];
            }
        }
    }

    bool rg = g.track(wk, wq, wv);
    for (Var v : feats) rg = rg || g.track(v);
    std::vector<Var> fcopy = feats;
    return g.emit("mixture_attention", std::move(out), rg,
                  [fcopy, wk, wq, wv, sv, D, P, F, scale](Graph& gg, int32_t id) {
        const Tensor& gz = gg.grad_ref(id);
        const Tensor &wkt = gg.val(wk), &wqt = gg.val(wq), &wvt = gg.val(wv);
        Tensor gk({D, (int)P, F}), gq({D, (int)P, F}), gv({D, (int)P, F});
        std::vector<double> ga((size_t)D), gs((size_t)D);
        for (int64_t n = 0; n < P; ++n) {
            const double* attn = sv->att.data() + n * D * D;
            for (int i = 0; i < D; ++i) {
                const double* gzi = gz.data() + ((int64_t)i * P + n) * F;
                // residual: dL/dh_i += gz_i (applied at the end via feats)
                // attention out: ga_j = gz_i . v_j ; gv_j += a_ij * gz_i
                for (int j = 0; j < D; ++j) {
                    const double* vj = sv->v.data() + ((int64_t)j * P + n) * F;
                    double* gvj = gv.data() + ((int64_t)j * P + n) * F;
                    double a = attn[(int64_t)i * D + j];
                    double dot = 0.0;
                    for (int f = 0; f < F; ++f) {
                        dot += gzi[f] * vj[f];
                        gvj[f] += a * gzi[f];
                    }
                    ga[(size_t)j] = dot;
                }
                // softmax backward over row i
                double inner = 0.0;
                for (int j = 0; j < D; ++j) inner += ga[(size_t)j] * attn[(int64_t)i * D + j];
                for (int j = 0; j < D; ++j)
                    gs[(size_t)j] = attn[(int64_t)i * D + j] * (ga[(size_t)j] - inner);
                // scores s_ij = scale * k_i . q_j
                double* gki = gk.data() + ((int64_t)i * P + n) * F;
                const double* ki = sv->k.data() + ((int64_t)i * P + n) * F;
                for (int j = 0; j < D; ++j) {
                    const double* qj = sv->q.data() + ((int64_t)j * P + n) * F;
                    double* gqj = gq.data() + ((int64_t)j * P + n) * F;
                    double gsj = gs[(size_t)j] * scale;
                    for (int f = 0; f < F; ++f) {
                        gki[f] += gsj * qj[f];
                        gqj[f] += gsj * ki[f];
                    }
                }
            }
        }
        // back through the shared projections and the residual term
        for (int d = 0; d < D; ++d) {
            const Tensor& h = gg.val(fcopy[(size_t)d]);
            Tensor hflat = h.reshaped({1, (int)P, F});
            Tensor gh({1, (int)P, F});
            Tensor gkd = Tensor({1, (int)P, F}, std::vector<double>(
                             gk.data() + (int64_t)d * P * F, gk.data() + (int64_t)(d + 1) * P * F));
            Tensor gqd = Tensor({1, (int)P, F}, std::vector<double>(
                             gq.data() + (int64_t)d * P * F, gq.data() + (int64_t)(d + 1) * P * F));
            Tensor gvd = Tensor({1, (int)P, F}, std::vector<double>(
                             gv.data() + (int64_t)d * P * F, gv.data() + (int64_t)(d + 1) * P * F));
            linear_bwd(hflat, wkt, gkd, gh, gg.grad_ref(wk), nullptr);
            linear_bwd(hflat, wqt, gqd, gh, gg.grad_ref(wq), nullptr);
            linear_bwd(hflat, wvt, gvd, gh, gg.grad_ref(wv), nullptr);
            Tensor& ghd = gg.grad_ref(fcopy[(size_t)d]);
            const double* gzd = gz.data() + (int64_t)d * P * F;
            for (int64_t x = 0; x < P * F; ++x) ghd[x] += gh[x] + gzd[x];
        }
    });
}

// Full training-path mixture head: attention, mean over members, noise
// projection, residual subtraction. y: [L x N x N_b].
inline Var mixture_head(Graph& g, const VarMap& vm, const AggregatorParams& p,
                        const std::vector<Var>& feats, Var y) {
    Var z = mixture_attention(g, feats, vm.of(p.w_k.w), vm.of(p.w_q.w), vm.of(p.w_v.w));
    Var zm = mean_axis0(g, z);  // [L x N x F] (flattened pixel view restored below)
    const Tensor& yt = g.val(y);
    Var zml = reshape(g, zm, {yt.dim(0), yt.dim(1), p.features});
    Var n_hat = p.out_conv.forward(g, vm, zml);
    return sub(g, y, n_hat);
}

// ---------------------------------------------------------------------------
// variance separability
// ---------------------------------------------------------------------------

// Rank-based AUC of thresholding: probability a faulty variance exceeds a
// nominal one (ties count half).
inline double threshold_auc(std::vector<double> faulty, std::vector<double> nominal) {
    if (faulty.empty() || nominal.empty())
        fail("threshold_auc: need samples from both populations");
    double wins = 0.0;
    for (double f : faulty)
        for (double n : nominal) wins += f > n ? 1.0 : (f == n ? 0.5 : 0.0);
    return wins / ((double)faulty.size() * (double)nominal.size());
}

}  // namespace pushbroom
