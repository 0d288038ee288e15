// Line-axis memory block: a causal conv over the last K lines feeding a
// selective state-space recurrence, with per-pixel hidden state. Runs either
// one line at a time against a StreamState (inference) or as a batch scan
// over a whole sequence (training; same per-line math, gradients via BPTT).
// LSTM and plain causal-conv backends expose the same step/scan surface.
#pragma once

#include <memory>
#include <sstream>

#include "pushbroom/layers.hpp"
#include "pushbroom/serialize.hpp"

namespace pushbroom {

enum class Backend { Mamba, Lstm, CausalConv };

inline const char* backend_name(Backend b) {
    switch (b) {
        case Backend::Mamba: return "mamba";
        case Backend::Lstm: return "lstm";
        case Backend::CausalConv: return "causal_conv";
    }
    return "?";
}
inline Backend backend_from_name(const std::string& s) {
    if (s == "mamba") return Backend::Mamba;
    if (s == "lstm") return Backend::Lstm;
    if (s == "causal_conv") return Backend::CausalConv;
    fail("unknown memory backend: " + s + " (expected mamba | lstm | causal_conv)");
}

// ---------------------------------------------------------------------------
// selective SSM core
// ---------------------------------------------------------------------------

// h_l = exp(dt*A) h_{l-1} + dt*B u_l ; y_l = C h_l + D u_l, per pixel and
// channel; A diagonal and input-independent, B/C/dt linear in the input.
struct SsmCore {
    Tensor a_log;   // [FE x S]; A = -exp(a_log)
    Tensor dt_w;    // [FE x FE]
    Tensor dt_b;    // [FE]
    Tensor b_w;     // [FE x S]
    Tensor c_w;     // [FE x S]
    Tensor d_skip;  // [FE]

    int inner() const { return a_log.dim(0); }
    int state_size() const { return a_log.dim(1); }

    static SsmCore make(int fe, int s, Rng& rng) {
        SsmCore c;
        c.a_log = Tensor({fe, s});
        for (int f = 0; f < fe; ++f)
            for (int j = 0; j < s; ++j) c.a_log[(int64_t)f * s + j] = std::log((double)(j + 1));
        c.dt_w = Tensor({fe, fe});
        init_uniform_fan_in(c.dt_w, fe, rng);
        c.dt_b = Tensor({fe});
        for (int f = 0; f < fe; ++f) {
            // softplus(dt_b) ~ log-uniform in [1e-3, 1e-1]
            double dt = std::exp(rng.uniform(std::log(1e-3), std::log(1e-1)));
            c.dt_b[f] = std::log(std::expm1(dt));
        }
        c.b_w = Tensor({fe, s});
        init_uniform_fan_in(c.b_w, fe, rng);
        c.c_w = Tensor({fe, s});
        init_uniform_fan_in(c.c_w, fe, rng);
        c.d_skip = Tensor({fe}, 1.0);
        return c;
    }

    void visit_params(const std::string& p, const ParamVisitor& fn) {
        fn(p + ".a_log", a_log, ParamKind::SsmALog);
        fn(p + ".dt.w", dt_w, ParamKind::LinearWeight);
        fn(p + ".dt.b", dt_b, ParamKind::LinearBias);
        fn(p + ".b.w", b_w, ParamKind::LinearWeight);
        fn(p + ".c.w", c_w, ParamKind::LinearWeight);
        fn(p + ".d_skip", d_skip, ParamKind::SsmDSkip);
    }
};

// scratch reused across lines so the steady-state streaming step allocates
// nothing
struct SsmWork {
    std::vector<double> a;        // precomputed A = -exp(a_log), [FE*S]
    std::vector<double> dt, b, c; // per-pixel projections when not saving
    std::vector<double> gb, gc, gdt;  // backward temporaries

    void prepare(const SsmCore& p) {
        int fe = p.inner(), s = p.state_size();
        a.resize((size_t)fe * s);
        for (int64_t i = 0; i < (int64_t)fe * s; ++i) a[(size_t)i] = -std::exp(p.a_log[i]);
        dt.resize((size_t)fe);
        b.resize((size_t)s);
        c.resize((size_t)s);
    }
};

// per-line save area for the backward pass (base pointers for line l)
struct SsmLineSave {
    double* dt_pre;  // [N x FE]
    double* b;       // [N x S]
    double* c;       // [N x S]
    double* h_all;   // [N x FE x S], state after this line
};

// One line of the recurrence; shared verbatim by the streaming step and the
// batch scan so the two routes agree. h is [N x FE x S], updated in place.
inline void ssm_line_fwd(const SsmCore& p, const double* u, int N, double* h, double* y,
                         SsmWork& work, const SsmLineSave* save) {
    int FE = p.inner(), S = p.state_size();
    const double* dtw = p.dt_w.data();
    const double* dtb = p.dt_b.data();
    const double* bw = p.b_w.data();
    const double* cw = p.c_w.data();
    const double* dsk = p.d_skip.data();
    for (int n = 0; n < N; ++n) {
        const double* uv = u + (int64_t)n * FE;
        double* dtp = save ? save->dt_pre + (int64_t)n * FE : work.dt.data();
        double* Bv = save ? save->b + (int64_t)n * S : work.b.data();
        double* Cv = save ? save->c + (int64_t)n * S : work.c.data();
        for (int f = 0; f < FE; ++f) dtp[f] = dtb[f];
        std::fill(Bv, Bv + S, 0.0);
        std::fill(Cv, Cv + S, 0.0);
        for (int g = 0; g < FE; ++g) {
            double ug = uv[g];
            const double* wr = dtw + (int64_t)g * FE;
            for (int f = 0; f < FE; ++f) dtp[f] += ug * wr[f];
            const double* br = bw + (int64_t)g * S;
            const double* cr = cw + (int64_t)g * S;
            for (int s = 0; s < S; ++s) {
                Bv[s] += ug * br[s];
                Cv[s] += ug * cr[s];
            }
        }
        double* hn = h + (int64_t)n * FE * S;
        double* yn = y + (int64_t)n * FE;
        for (int f = 0; f < FE; ++f) {
            double delta = softplus_scalar(dtp[f]);
            double uval = uv[f];
            double dbu = delta * uval;
            const double* av = work.a.data() + (int64_t)f * S;
            double* hf = hn + (int64_t)f * S;
            double acc = 0.0;
            for (int s = 0; s < S; ++s) {
                double abar = std::exp(delta * av[s]);
                hf[s] = abar * hf[s] + dbu * Bv[s];
                acc += Cv[s] * hf[s];
            }
            yn[f] = acc + dsk[f] * uval;
        }
        if (save) {
            std::copy(hn, hn + (int64_t)FE * S, save->h_all + (int64_t)n * FE * S);
        }
    }
}

// BPTT for one line, walking the saved activations backwards. gh is the
// running adjoint of the hidden state (updated in place for line l-1).
struct SsmGrads {
    Tensor *gu, *ga_log, *gdt_w, *gdt_b, *gb_w, *gc_w, *gd_skip;
};

inline void ssm_line_bwd(const SsmCore& p, const double* u, int N, const double* gy,
                         double* gh, const double* h_prev, const SsmLineSave& save,
                         int64_t line_offset_u, SsmWork& work, SsmGrads& gr) {
    int FE = p.inner(), S = p.state_size();
    work.gb.resize((size_t)S);
    work.gc.resize((size_t)S);
    work.gdt.resize((size_t)FE);
    const double* dsk = p.d_skip.data();
    for (int n = 0; n < N; ++n) {
        const double* uv = u + (int64_t)n * FE;
        const double* dtp = save.dt_pre + (int64_t)n * FE;
        const double* Bv = save.b + (int64_t)n * S;
        const double* Cv = save.c + (int64_t)n * S;
        const double* hl = save.h_all + (int64_t)n * FE * S;
        const double* hp = h_prev ? h_prev + (int64_t)n * FE * S : nullptr;
        const double* gyn = gy + (int64_t)n * FE;
        double* ghn = gh + (int64_t)n * FE * S;
        double* gun = gr.gu->data() + line_offset_u + (int64_t)n * FE;
        std::fill(work.gb.begin(), work.gb.end(), 0.0);
        std::fill(work.gc.begin(), work.gc.end(), 0.0);
        for (int f = 0; f < FE; ++f) {
            double delta = softplus_scalar(dtp[f]);
            double sig = sigmoid_scalar(dtp[f]);
            double uval = uv[f];
            double gyv = gyn[f];
            (*gr.gd_skip)[f] += gyv * uval;
            double gu_f = gyv * dsk[f];
            double gdelta = 0.0;
            const double* av = work.a.data() + (int64_t)f * S;
            const double* hlf = hl + (int64_t)f * S;
            const double* hpf = hp ? hp + (int64_t)f * S : nullptr;
            double* ghf = ghn + (int64_t)f * S;
            double* galf = gr.ga_log->data() + (int64_t)f * S;
            for (int s = 0; s < S; ++s) {
                double A = av[s];
                double abar = std::exp(delta * A);
                double ghls = ghf[s] + gyv * Cv[s];
                work.gc[(size_t)s] += gyv * hlf[s];
                double hprev = hpf ? hpf[s] : 0.0;
                double gabar = ghls * hprev;
                ghf[s] = ghls * abar;
                gdelta += ghls * Bv[s] * uval + gabar * A * abar;
                work.gb[(size_t)s] += ghls * delta * uval;
                gu_f += ghls * delta * Bv[s];
                galf[s] += gabar * delta * abar * A;
            }
            work.gdt[(size_t)f] = gdelta * sig;
            gun[f] += gu_f;
        }
        // projection backward: dt, B, C are linear in u
        double* gdtw = gr.gdt_w->data();
        double* gbw = gr.gb_w->data();
        double* gcw = gr.gc_w->data();
        const double* dtw = p.dt_w.data();
        const double* bw = p.b_w.data();
        const double* cw = p.c_w.data();
        for (int f = 0; f < FE; ++f) (*gr.gdt_b)[f] += work.gdt[(size_t)f];
        for (int g = 0; g < FE; ++g) {
            double ug = uv[g];
            double acc = 0.0;
            const double* wr = dtw + (int64_t)g * FE;
            double* gwr = gdtw + (int64_t)g * FE;
            for (int f = 0; f < FE; ++f) {
                acc += wr[f] * work.gdt[(size_t)f];
                gwr[f] += ug * work.gdt[(size_t)f];
            }
            const double* br = bw + (int64_t)g * S;
            const double* cr = cw + (int64_t)g * S;
            double* gbr = gbw + (int64_t)g * S;
            double* gcr = gcw + (int64_t)g * S;
            for (int s = 0; s < S; ++s) {
                acc += br[s] * work.gb[(size_t)s] + cr[s] * work.gc[(size_t)s];
                gbr[s] += ug * work.gb[(size_t)s];
                gcr[s] += ug * work.gc[(size_t)s];
            }
            gun[g] += acc;
        }
    }
}

// ---------------------------------------------------------------------------
// LSTM core (ablation backend)
// ---------------------------------------------------------------------------

struct LstmCore {
    Tensor w_ih;  // [F x 4H]
    Tensor w_hh;  // [H x 4H]
    Tensor b;     // [4H], gate order i f g o

    int hidden() const { return w_hh.dim(0); }

    static LstmCore make(int f, int h, Rng& rng) {
        LstmCore c;
        c.w_ih = Tensor({f, 4 * h});
        init_uniform_fan_in(c.w_ih, h, rng);
        c.w_hh = Tensor({h, 4 * h});
        init_uniform_fan_in(c.w_hh, h, rng);
        c.b = Tensor({4 * h});
        init_uniform_fan_in(c.b, h, rng);
        for (int j = h; j < 2 * h; ++j) c.b[j] += 1.0;  // forget-gate bias
        return c;
    }

    void visit_params(const std::string& p, const ParamVisitor& fn) {
        fn(p + ".w_ih", w_ih, ParamKind::LinearWeight);
        fn(p + ".w_hh", w_hh, ParamKind::LinearWeight);
        fn(p + ".b", b, ParamKind::LinearBias);
    }
};

// One LSTM line; h/c are [N x H], updated in place; y gets the new h.
// save_gates (activated, [N x 4H]) and save_c ([N x H]) feed the backward.
inline void lstm_line_fwd(const LstmCore& p, const double* x, int N, int F, double* h,
                          double* c, double* y, double* save_gates, double* save_c) {
    int H = p.hidden();
    std::vector<double> pre((size_t)4 * H);
    for (int n = 0; n < N; ++n) {
        const double* xn = x + (int64_t)n * F;
        double* hn = h + (int64_t)n * H;
        double* cn = c + (int64_t)n * H;
        for (int j = 0; j < 4 * H; ++j) pre[(size_t)j] = p.b[j];
        for (int g = 0; g < F; ++g) {
            double xv = xn[g];
            const double* wr = p.w_ih.data() + (int64_t)g * 4 * H;
            for (int j = 0; j < 4 * H; ++j) pre[(size_t)j] += xv * wr[j];
        }
        for (int g = 0; g < H; ++g) {
            double hv = hn[g];
            const double* wr = p.w_hh.data() + (int64_t)g * 4 * H;
            for (int j = 0; j < 4 * H; ++j) pre[(size_t)j] += hv * wr[j];
        }
        double* gates = save_gates ? save_gates + (int64_t)n * 4 * H : pre.data();
        for (int j = 0; j < H; ++j) {
            double iv = sigmoid_scalar(pre[(size_t)j]);
            double fv = sigmoid_scalar(pre[(size_t)(H + j)]);
            double gv = std::tanh(pre[(size_t)(2 * H + j)]);
            double ov = sigmoid_scalar(pre[(size_t)(3 * H + j)]);
            gates[j] = iv;
            gates[H + j] = fv;
            gates[2 * H + j] = gv;
            gates[3 * H + j] = ov;
            cn[j] = fv * cn[j] + iv * gv;
            hn[j] = ov * std::tanh(cn[j]);
            y[(int64_t)n * H + j] = hn[j];
        }
        if (save_c) std::copy(cn, cn + H, save_c + (int64_t)n * H);
    }
}

struct LstmGrads {
    Tensor *gx, *gw_ih, *gw_hh, *gb;
};

inline void lstm_line_bwd(const LstmCore& p, const double* x, int N, int F, const double* gy,
                          double* gh_carry, double* gc_carry, const double* h_prev,
                          const double* c_prev, const double* gates, const double* c_now,
                          int64_t x_offset, LstmGrads& gr) {
    int H = p.hidden();
    std::vector<double> gpre((size_t)4 * H);
    for (int n = 0; n < N; ++n) {
        const double* xn = x + (int64_t)n * F;
        const double* gn = gates + (int64_t)n * 4 * H;
        const double* cn = c_now + (int64_t)n * H;
        double* ghc = gh_carry + (int64_t)n * H;
        double* gcc = gc_carry + (int64_t)n * H;
        for (int j = 0; j < H; ++j) {
            double iv = gn[j], fv = gn[H + j], gv = gn[2 * H + j], ov = gn[3 * H + j];
            double tc = std::tanh(cn[j]);
            double gh = gy[(int64_t)n * H + j] + ghc[j];
            double go = gh * tc;
            double gc = gcc[j] + gh * ov * (1.0 - tc * tc);
            double cp = c_prev ? c_prev[(int64_t)n * H + j] : 0.0;
            double gf = gc * cp;
            double gi = gc * gv;
            double gg = gc * iv;
            gcc[j] = gc * fv;
            gpre[(size_t)j] = gi * iv * (1.0 - iv);
            gpre[(size_t)(H + j)] = gf * fv * (1.0 - fv);
            gpre[(size_t)(2 * H + j)] = gg * (1.0 - gv * gv);
            gpre[(size_t)(3 * H + j)] = go * ov * (1.0 - ov);
        }
        double* gxn = gr.gx->data() + x_offset + (int64_t)n * F;
        for (int g = 0; g < F; ++g) {
            const double* wr = p.w_ih.data() + (int64_t)g * 4 * H;
            double* gwr = gr.gw_ih->data() + (int64_t)g * 4 * H;
            double acc = 0.0, xv = xn[g];
            for (int j = 0; j < 4 * H; ++j) {
                acc += wr[j] * gpre[(size_t)j];
                gwr[j] += xv * gpre[(size_t)j];
            }
            gxn[g] += acc;
        }
        for (int g = 0; g < H; ++g) {
            const double* wr = p.w_hh.data() + (int64_t)g * 4 * H;
            double* gwr = gr.gw_hh->data() + (int64_t)g * 4 * H;
            double acc = 0.0;
            double hv = h_prev ? h_prev[(int64_t)n * H + g] : 0.0;
            for (int j = 0; j < 4 * H; ++j) {
                acc += wr[j] * gpre[(size_t)j];
                gwr[j] += hv * gpre[(size_t)j];
            }
            ghc[g] = acc;
        }
        for (int j = 0; j < 4 * H; ++j) (*gr.gb)[j] += gpre[(size_t)j];
    }
}

// ---------------------------------------------------------------------------
// StreamState
// ---------------------------------------------------------------------------

// Per-stream carry-over between lines. Fixed size: independent of how many
// lines have been consumed.
struct StreamState {
    Backend backend = Backend::Mamba;
    int64_t line_index = 0;
    Tensor conv_ring;  // [(K-1) x N x FE]; empty when K == 1 or backend lstm
    Tensor h;          // mamba: [N x FE x S]; lstm: [N x H]
    Tensor c;          // lstm only: [N x H]

    size_t state_bytes() const { return conv_ring.byte_size() + h.byte_size() + c.byte_size(); }

    void serialize(BinWriter& w) const {
        w.magic("PBSS");
        w.u32(1);
        w.u8((uint8_t)backend);
        w.i64(line_index);
        auto put = [&](const Tensor& t) {
            w.u8(t.empty() ? 0 : 1);
            if (!t.empty()) w.tensor(t);
        };
        put(conv_ring);
        put(h);
        put(c);
    }

    std::string serialized() const {
        std::ostringstream os(std::ios::binary);
        BinWriter w(os);
        serialize(w);
        return os.str();
    }
    size_t serialized_size() const { return serialized().size(); }

    static StreamState deserialize(BinReader& r) {
        r.expect_magic("PBSS", "stream state");
        uint32_t ver = r.u32();
        if (ver != 1) fail("stream state: unsupported version " + std::to_string(ver));
        StreamState st;
        st.backend = (Backend)r.u8();
        st.line_index = r.i64();
        auto get = [&](Tensor& t) {
            if (r.u8()) t = r.tensor();
        };
        get(st.conv_ring);
        get(st.h);
        get(st.c);
        return st;
    }
};

// ---------------------------------------------------------------------------
// the residual memory block
// ---------------------------------------------------------------------------

struct PassmBlock {
    Backend backend = Backend::Mamba;
    bool gated = true;
    bool prenorm = true;
    int features = 0;    // F
    int inner = 0;       // F*E
    int kernel = 4;      // K
    LayerNormLayer ln;
    LinearLayer in_proj;   // mamba: F -> FE*(gated?2:1); causal_conv: F -> FE
    Tensor conv_w;         // [K x FE]
    Tensor conv_b;         // [FE]
    SsmCore ssm;           // mamba
    LstmCore lstm;         // lstm
    LinearLayer out_proj;  // FE -> F; zero-init so the residual branch starts silent

    static PassmBlock make(int f, int e, int s, int k, Backend backend, bool gated,
                           bool prenorm, Rng& rng, bool silent_init = true) {
        PassmBlock b;
        b.backend = backend;
        b.gated = gated && backend == Backend::Mamba;
        b.prenorm = prenorm;
        b.features = f;
        b.inner = f * e;
        b.kernel = k;
        b.ln = LayerNormLayer::make(f);
        if (backend == Backend::Mamba) {
            b.in_proj = LinearLayer::make(f, b.inner * (b.gated ? 2 : 1), rng);
            b.conv_w = Tensor({k, b.inner});
            init_uniform_fan_in(b.conv_w, k, rng);
            b.conv_b = Tensor({b.inner});
            init_uniform_fan_in(b.conv_b, k, rng);
            b.ssm = SsmCore::make(b.inner, s, rng);
        } else if (backend == Backend::CausalConv) {
            b.in_proj = LinearLayer::make(f, b.inner, rng);
            b.conv_w = Tensor({k, b.inner});
            init_uniform_fan_in(b.conv_w, k, rng);
            b.conv_b = Tensor({b.inner});
            init_uniform_fan_in(b.conv_b, k, rng);
        } else {
            b.lstm = LstmCore::make(f, b.inner, rng);
        }
        b.out_proj = LinearLayer::make(b.inner, f, rng);
        if (silent_init) {
            b.out_proj.w.fill(0.0);
            b.out_proj.b.fill(0.0);
        }
        return b;
    }

    void visit_params(const std::string& p, const ParamVisitor& fn) {
        if (prenorm) ln.visit_params(p + ".ln", fn);
        if (backend == Backend::Mamba || backend == Backend::CausalConv) {
            in_proj.visit_params(p + ".in_proj", fn);
            fn(p + ".conv.w", conv_w, ParamKind::ConvWeight);
            fn(p + ".conv.b", conv_b, ParamKind::ConvBias);
        }
        if (backend == Backend::Mamba) ssm.visit_params(p + ".ssm", fn);
        if (backend == Backend::Lstm) lstm.visit_params(p + ".lstm", fn);
        out_proj.visit_params(p + ".out_proj", fn);
    }

    StreamState make_state(int n_pixels) const {
        StreamState st;
        st.backend = backend;
        if (backend == Backend::Lstm) {
            st.h = Tensor({n_pixels, inner});
            st.c = Tensor({n_pixels, inner});
        } else {
            if (kernel > 1) st.conv_ring = Tensor({kernel - 1, n_pixels, inner});
            if (backend == Backend::Mamba)
                st.h = Tensor({n_pixels, inner, ssm.state_size()});
        }
        return st;
    }

    // streaming: one line [1 x N x F] -> [1 x N x F], state advanced in place
    void step(StreamState& st, const Tensor& x, Tensor& out, SsmWork& work) const {
        check_3d("passm_step", x);
        int N = x.dim(1);
        if (x.dim(2) != features)
            fail("passm_step: expected " + std::to_string(features) + " channels, got " +
                 std::to_string(x.dim(2)));
        Tensor v(x.shape());
        if (prenorm) {
            layernorm_fwd(x, ln.gamma, ln.beta, v);
        } else {
            v = x;
        }
        Tensor branch({1, N, features});
        if (backend == Backend::Lstm) {
            Tensor hy({1, N, inner});
            lstm_line_fwd(lstm, v.data(), N, features, st.h.data(), st.c.data(), hy.data(),
                          nullptr, nullptr);
            linear_fwd(hy, out_proj.w, &out_proj.b, branch);
        } else {
            Tensor p({1, N, in_proj.w.dim(1)});
            linear_fwd(v, in_proj.w, &in_proj.b, p);
            Tensor xp({1, N, inner});
            Tensor zp;
            if (gated) {
                slice_fwd(p, 2, 0, inner, xp);
                zp = Tensor({1, N, inner});
                slice_fwd(p, 2, inner, inner, zp);
            } else {
                xp = std::move(p);
            }
            Tensor conv({1, N, inner});
            lineconv_step(st.conv_ring, xp, conv_w, &conv_b, conv);
            ring_push(st.conv_ring, xp);
            Tensor u({1, N, inner});
            silu_fwd(conv, u);
            Tensor y({1, N, inner});
            if (backend == Backend::Mamba) {
                work.prepare(ssm);
                ssm_line_fwd(ssm, u.data(), N, st.h.data(), y.data(), work, nullptr);
            } else {
                y = std::move(u);
            }
            if (gated) {
                Tensor zs({1, N, inner});
                silu_fwd(zp, zs);
                mul_fwd(y, zs, y);
            }
            linear_fwd(y, out_proj.w, &out_proj.b, branch);
        }
        add_fwd(x, branch, out);
        st.line_index += 1;
    }

    // batch: [L x N x F] -> [L x N x F] on the tape, gradients through the
    // whole scan
    Var scan(Graph& g, const VarMap& vm, Var x) const;

    double flops_per_pixel() const;
};

// fused scan op for the selective SSM with hand-rolled BPTT backward; the
// parameter values are snapshotted from the graph leaves so the op computes
// from exactly what the tape recorded
inline Var ssm_scan(Graph& g, const VarMap& vm, const SsmCore& core, Var u) {
    const Tensor& ut = g.val(u);
    check_3d("ssm_scan", ut);
    int S = core.state_size();
    if (ut.dim(2) != core.inner()) fail("ssm_scan: channel mismatch");
    int L = ut.dim(0), N = ut.dim(1), FE = ut.dim(2);

    Var va = vm.of(core.a_log), vdw = vm.of(core.dt_w), vdb = vm.of(core.dt_b);
    Var vbw = vm.of(core.b_w), vcw = vm.of(core.c_w), vds = vm.of(core.d_skip);

    struct Saved {
        SsmCore core;
        Tensor dt_pre, b, c, h_all;
        SsmWork work;
    };
    auto sv = std::make_shared<Saved>();
    sv->core.a_log = g.val(va);
    sv->core.dt_w = g.val(vdw);
    sv->core.dt_b = g.val(vdb);
    sv->core.b_w = g.val(vbw);
    sv->core.c_w = g.val(vcw);
    sv->core.d_skip = g.val(vds);
    sv->dt_pre = Tensor({L, N, FE});
    sv->b = Tensor({L, N, S});
    sv->c = Tensor({L, N, S});
    sv->h_all = Tensor({L, N, FE, S});
    sv->work.prepare(sv->core);

    Tensor y({L, N, FE});
    Tensor h({N, FE, S});
    for (int l = 0; l < L; ++l) {
        SsmLineSave save{sv->dt_pre.data() + (int64_t)l * N * FE,
                         sv->b.data() + (int64_t)l * N * S,
                         sv->c.data() + (int64_t)l * N * S,
                         sv->h_all.data() + (int64_t)l * N * FE * S};
        ssm_line_fwd(sv->core, ut.data() + (int64_t)l * N * FE, N, h.data(),
                     y.data() + (int64_t)l * N * FE, sv->work, &save);
    }

    bool rg = g.track(u, va, vdw) || g.track(vdb, vbw, vcw) || g.track(vds);
    return g.emit("ssm_scan", std::move(y), rg,
                  [u, va, vdw, vdb, vbw, vcw, vds, sv, L, N, FE, S](Graph& gg, int32_t id) {
                      const Tensor& gy = gg.grad_ref(id);
                      const Tensor& ut2 = gg.val(u);
                      SsmGrads gr{&gg.grad_ref(u),  &gg.grad_ref(va), &gg.grad_ref(vdw),
                                  &gg.grad_ref(vdb), &gg.grad_ref(vbw), &gg.grad_ref(vcw),
                                  &gg.grad_ref(vds)};
                      Tensor gh({N, FE, S});
                      for (int l = L - 1; l >= 0; --l) {
                          SsmLineSave save{sv->dt_pre.data() + (int64_t)l * N * FE,
                                           sv->b.data() + (int64_t)l * N * S,
                                           sv->c.data() + (int64_t)l * N * S,
                                           sv->h_all.data() + (int64_t)l * N * FE * S};
                          const double* hprev =
                              l > 0 ? sv->h_all.data() + (int64_t)(l - 1) * N * FE * S : nullptr;
                          ssm_line_bwd(sv->core, ut2.data() + (int64_t)l * N * FE, N,
                                       gy.data() + (int64_t)l * N * FE, gh.data(), hprev, save,
                                       (int64_t)l * N * FE, sv->work, gr);
                      }
                  });
}

inline Var lstm_scan(Graph& g, const VarMap& vm, const LstmCore& core, Var x) {
    const Tensor& xt = g.val(x);
    check_3d("lstm_scan", xt);
    int H = core.hidden();
    if (xt.dim(2) != core.w_ih.dim(0)) fail("lstm_scan: channel mismatch");
    int L = xt.dim(0), N = xt.dim(1), F = xt.dim(2);

    Var vih = vm.of(core.w_ih), vhh = vm.of(core.w_hh), vb = vm.of(core.b);

    struct Saved {
        LstmCore core;
        Tensor gates, c_all, h_all;
    };
    auto sv = std::make_shared<Saved>();
    sv->core.w_ih = g.val(vih);
    sv->core.w_hh = g.val(vhh);
    sv->core.b = g.val(vb);
    sv->gates = Tensor({L, N, 4 * H});
    sv->c_all = Tensor({L, N, H});
    sv->h_all = Tensor({L, N, H});

    Tensor y({L, N, H});
    Tensor h({N, H}), c({N, H});
    for (int l = 0; l < L; ++l) {
        lstm_line_fwd(sv->core, xt.data() + (int64_t)l * N * F, N, F, h.data(), c.data(),
                      y.data() + (int64_t)l * N * H,
                      sv->gates.data() + (int64_t)l * N * 4 * H,
                      sv->c_all.data() + (int64_t)l * N * H);
        std::copy(h.data(), h.data() + (int64_t)N * H, sv->h_all.data() + (int64_t)l * N * H);
    }

    bool rg = g.track(x, vih, vhh) || g.track(vb);
    return g.emit("lstm_scan", std::move(y), rg,
                  [x, vih, vhh, vb, sv, L, N, F, H](Graph& gg, int32_t id) {
                      const Tensor& gy = gg.grad_ref(id);
                      const Tensor& xt2 = gg.val(x);
                      LstmGrads gr{&gg.grad_ref(x), &gg.grad_ref(vih), &gg.grad_ref(vhh),
                                   &gg.grad_ref(vb)};
                      Tensor ghc({N, H}), gcc({N, H});
                      for (int l = L - 1; l >= 0; --l) {
                          const double* hprev =
                              l > 0 ? sv->h_all.data() + (int64_t)(l - 1) * N * H : nullptr;
                          const double* cprev =
                              l > 0 ? sv->c_all.data() + (int64_t)(l - 1) * N * H : nullptr;
                          lstm_line_bwd(sv->core, xt2.data() + (int64_t)l * N * F, N, F,
                                        gy.data() + (int64_t)l * N * H, ghc.data(), gcc.data(),
                                        hprev, cprev,
                                        sv->gates.data() + (int64_t)l * N * 4 * H,
                                        sv->c_all.data() + (int64_t)l * N * H,
                                        (int64_t)l * N * F, gr);
                      }
                  });
}

inline Var PassmBlock::scan(Graph& g, const VarMap& vm, Var x) const {
    Var v = prenorm ? ln.forward(g, vm, x) : x;
    Var y{};
    if (backend == Backend::Lstm) {
        y = lstm_scan(g, vm, lstm, v);
    } else {
        Var p = in_proj.forward(g, vm, v);
        Var xp = gated ? slice(g, p, 2, 0, inner) : p;
        Var conv = lineconv_causal(g, xp, vm.of(conv_w), vm.of(conv_b));
        Var u = silu(g, conv);
        y = backend == Backend::Mamba ? ssm_scan(g, vm, ssm, u) : u;
        if (gated) y = mul(g, y, silu(g, slice(g, p, 2, inner, inner)));
    }
    return add(g, x, out_proj.forward(g, vm, y));
}

inline double PassmBlock::flops_per_pixel() const {
    double fl = prenorm ? ln.flops_per_pixel() : 0.0;
    if (backend == Backend::Lstm) {
        fl += 2.0 * (features + inner) * 4 * inner + 10.0 * inner;
    } else {
        fl += in_proj.flops_per_pixel();
        fl += 2.0 * kernel * inner;  // causal conv
        if (backend == Backend::Mamba) {
            int S = ssm.state_size();
            fl += 2.0 * inner * inner + 2.0 * 2.0 * inner * S;  // dt, B, C projections
            fl += (double)inner * S * 6.0 + 2.0 * inner;        // recurrence + skip
            if (gated) fl += inner;
        }
    }
    fl += out_proj.flops_per_pixel();
    fl += features;  // residual add
    return fl;
}

}  // namespace pushbroom
