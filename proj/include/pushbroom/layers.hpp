// Learnable 1-D layers: convolutions (plain / stride-2 / transpose),
// layer norm, channel attention, and the gated residual block (DASC) the
// denoiser U-Net is assembled from. All spatial work is across-track; the
// along-track extent of every input is 1 line (or a batch of lines treated
// independently).
#pragma once

#include <functional>
#include <string>
#include <unordered_map>

#include "pushbroom/autodiff.hpp"
#include "pushbroom/rng.hpp"

namespace pushbroom {

enum class ParamKind {
    ConvWeight,
    ConvBias,
    LinearWeight,
    LinearBias,
    NormGain,
    NormBias,
    ResidualScale,
    SsmALog,
    SsmDSkip,
};

inline bool is_fault_surface(ParamKind k) {
    // the conv / linear kernel matrices (the weights radiation faults target)
    return k == ParamKind::ConvWeight || k == ParamKind::LinearWeight;
}

using ParamVisitor = std::function<void(const std::string& name, Tensor& t, ParamKind kind)>;

// Parameter tensors registered into one graph, looked up by address.
class VarMap {
public:
    void add(const Tensor& t, Var v) { m_.emplace(&t, v); }
    Var of(const Tensor& t) const {
        auto it = m_.find(&t);
        if (it == m_.end()) fail("varmap: parameter tensor was not registered");
        return it->second;
    }

private:
    std::unordered_map<const Tensor*, Var> m_;
};

template <typename P>
VarMap register_params(Graph& g, P& params, bool requires_grad) {
    VarMap vm;
    params.visit_params("", [&](const std::string&, Tensor& t, ParamKind) {
        vm.add(t, g.leaf_external(&t, requires_grad));
    });
    return vm;
}

// fan-in scaled uniform init (Kaiming-style bound 1/sqrt(fan_in))
inline void init_uniform_fan_in(Tensor& t, int fan_in, Rng& rng) {
    double bound = 1.0 / std::sqrt((double)fan_in);
    for (int64_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform(-bound, bound);
}

// ---------------------------------------------------------------------------

struct LinearLayer {
    Tensor w;  // [Cin x Cout]
    Tensor b;  // [Cout], empty when bias-free

    static LinearLayer make(int cin, int cout, Rng& rng, bool bias = true) {
        LinearLayer l;
        l.w = Tensor({cin, cout});
        init_uniform_fan_in(l.w, cin, rng);
        if (bias) {
            l.b = Tensor({cout});
            init_uniform_fan_in(l.b, cin, rng);
        }
        return l;
    }

    void visit_params(const std::string& p, const ParamVisitor& fn) {
        fn(p + ".w", w, ParamKind::LinearWeight);
        if (!b.empty()) fn(p + ".b", b, ParamKind::LinearBias);
    }

    Var forward(Graph& g, const VarMap& vm, Var x) const {
        return b.empty() ? linear(g, x, vm.of(w)) : linear(g, x, vm.of(w), vm.of(b));
    }

    double flops_per_pixel() const { return 2.0 * w.dim(0) * w.dim(1); }
};

struct Conv1dLayer {
    Tensor w;  // plain: [Cout x k x Cin], transpose: [Cin x k x Cout]
    Tensor b;  // [Cout]
    int stride = 1;
    bool transpose = false;

    static Conv1dLayer make(int cin, int cout, int k, int stride, Rng& rng) {
        Conv1dLayer l;
        l.stride = stride;
        l.w = Tensor({cout, k, cin});
        init_uniform_fan_in(l.w, cin * k, rng);
        l.b = Tensor({cout});
        init_uniform_fan_in(l.b, cin * k, rng);
        return l;
    }

    // stride-2 transpose conv with k = 2: exact doubling of the pixel axis
    static Conv1dLayer make_transpose(int cin, int cout, Rng& rng) {
        Conv1dLayer l;
        l.stride = 2;
        l.transpose = true;
        l.w = Tensor({cin, 2, cout});
        init_uniform_fan_in(l.w, cin, rng);
        l.b = Tensor({cout});
        init_uniform_fan_in(l.b, cin, rng);
        return l;
    }

    void visit_params(const std::string& p, const ParamVisitor& fn) {
        fn(p + ".w", w, ParamKind::ConvWeight);
        fn(p + ".b", b, ParamKind::ConvBias);
    }

    Var forward(Graph& g, const VarMap& vm, Var x) const {
        return transpose ? conv1d_transpose(g, x, vm.of(w), vm.of(b))
                         : conv1d(g, x, vm.of(w), vm.of(b), stride);
    }

    int out_channels() const { return transpose ? w.dim(2) : w.dim(0); }
    int in_channels() const { return transpose ? w.dim(0) : w.dim(2); }
    int kernel() const { return w.dim(1); }
    int out_len(int n) const {
        return transpose ? conv1d_transpose_out_len(n, kernel()) : conv1d_out_len(n, kernel(), stride);
    }
    // multiply-adds per output pixel across all output channels
    double flops_per_pixel() const {
        double f = 2.0 * in_channels() * out_channels() * kernel();
        return transpose ? f / stride : f;
    }
};

struct LayerNormLayer {
    Tensor gamma, beta;

    static LayerNormLayer make(int c) {
        LayerNormLayer l;
        l.gamma = Tensor({c}, 1.0);
        l.beta = Tensor({c});
        return l;
    }
    void visit_params(const std::string& p, const ParamVisitor& fn) {
        fn(p + ".gamma", gamma, ParamKind::NormGain);
        fn(p + ".beta", beta, ParamKind::NormBias);
    }
    Var forward(Graph& g, const VarMap& vm, Var x) const {
        return layernorm(g, x, vm.of(gamma), vm.of(beta));
    }
    double flops_per_pixel() const { return 6.0 * gamma.numel(); }
};

// Squeeze-excite channel attention: global average pool over the line's
// pixels, two linear maps with reduction r, sigmoid gate in (0,1).
struct ChannelAttention {
    LinearLayer squeeze;  // C -> C/r
    LinearLayer excite;   // C/r -> C

    static ChannelAttention make(int c, int reduction, Rng& rng) {
        int hidden = std::max(1, c / reduction);
        ChannelAttention a;
        a.squeeze = LinearLayer::make(c, hidden, rng);
        a.excite = LinearLayer::make(hidden, c, rng);
        return a;
    }
    void visit_params(const std::string& p, const ParamVisitor& fn) {
        squeeze.visit_params(p + ".squeeze", fn);
        excite.visit_params(p + ".excite", fn);
    }
    Var forward(Graph& g, const VarMap& vm, Var x) const {
        Var pooled = pool_pixels(g, x);
        Var gate = sigmoid(g, excite.forward(g, vm, relu(g, squeeze.forward(g, vm, pooled))));
        return gate_mul(g, x, gate);
    }
    double flops_per_pixel() const {
        return squeeze.flops_per_pixel() + excite.flops_per_pixel() + 2.0 * excite.w.dim(1);
    }
};

// Simplified channel attention (pool -> linear -> per-channel scale).
struct Sca {
    LinearLayer proj;  // C -> C

    static Sca make(int c, Rng& rng) { return Sca{LinearLayer::make(c, c, rng)}; }
    void visit_params(const std::string& p, const ParamVisitor& fn) {
        proj.visit_params(p + ".proj", fn);
    }
    Var forward(Graph& g, const VarMap& vm, Var x) const {
        Var s = proj.forward(g, vm, pool_pixels(g, x));
        return gate_mul(g, x, s);
    }
    double flops_per_pixel() const { return proj.flops_per_pixel() + 2.0 * proj.w.dim(1); }
};

// Gated residual block: two pre-normed sub-blocks (spatial: pointwise,
// depthwise conv, SimpleGate, simplified channel attention, pointwise;
// channel MLP: pointwise, SimpleGate, pointwise), each rescaled by a
// learnable per-channel factor initialized to zero so a fresh block is the
// identity.
struct DascBlock {
    LayerNormLayer ln1, ln2;
    LinearLayer pw1;  // C -> 2C
    Tensor dw_w;      // [k x 2C]
    Tensor dw_b;      // [2C]
    Sca sca;
    LinearLayer pw2;  // C -> C
    LinearLayer pw3;  // C -> 2C
    LinearLayer pw4;  // C -> C
    Tensor beta_scale, gamma_scale;  // [C]

    static DascBlock make(int c, int dw_kernel, Rng& rng) {
        DascBlock d;
        d.ln1 = LayerNormLayer::make(c);
        d.ln2 = LayerNormLayer::make(c);
        d.pw1 = LinearLayer::make(c, 2 * c, rng);
        d.dw_w = Tensor({dw_kernel, 2 * c});
        init_uniform_fan_in(d.dw_w, dw_kernel, rng);
        d.dw_b = Tensor({2 * c});
        init_uniform_fan_in(d.dw_b, dw_kernel, rng);
        d.sca = Sca::make(c, rng);
        d.pw2 = LinearLayer::make(c, c, rng);
        d.pw3 = LinearLayer::make(c, 2 * c, rng);
        d.pw4 = LinearLayer::make(c, c, rng);
        d.beta_scale = Tensor({c});
        d.gamma_scale = Tensor({c});
        return d;
    }

    void visit_params(const std::string& p, const ParamVisitor& fn) {
        ln1.visit_params(p + ".ln1", fn);
        pw1.visit_params(p + ".pw1", fn);
        fn(p + ".dw.w", dw_w, ParamKind::ConvWeight);
        fn(p + ".dw.b", dw_b, ParamKind::ConvBias);
        sca.visit_params(p + ".sca", fn);
        pw2.visit_params(p + ".pw2", fn);
        ln2.visit_params(p + ".ln2", fn);
        pw3.visit_params(p + ".pw3", fn);
        pw4.visit_params(p + ".pw4", fn);
        fn(p + ".beta", beta_scale, ParamKind::ResidualScale);
        fn(p + ".gamma", gamma_scale, ParamKind::ResidualScale);
    }

    Var forward(Graph& g, const VarMap& vm, Var x) const {
        Var t = ln1.forward(g, vm, x);
        t = pw1.forward(g, vm, t);
        t = dwconv1d(g, t, vm.of(dw_w), vm.of(dw_b));
        t = simple_gate(g, t);
        t = sca.forward(g, vm, t);
        t = pw2.forward(g, vm, t);
        Var y = add(g, x, chan_mul(g, t, vm.of(beta_scale)));
        Var u = ln2.forward(g, vm, y);
        u = pw3.forward(g, vm, u);
        u = simple_gate(g, u);
        u = pw4.forward(g, vm, u);
        return add(g, y, chan_mul(g, u, vm.of(gamma_scale)));
    }

    int channels() const { return (int)beta_scale.numel(); }

    double flops_per_pixel() const {
        int c2 = 2 * channels();
        return ln1.flops_per_pixel() + ln2.flops_per_pixel() + pw1.flops_per_pixel() +
               2.0 * dw_w.dim(0) * c2 + (double)channels() /* gate 1 */ +
               sca.flops_per_pixel() + pw2.flops_per_pixel() + pw3.flops_per_pixel() +
               (double)channels() /* gate 2 */ + pw4.flops_per_pixel() +
               4.0 * channels() /* residual scale + add, twice */;
    }
};

}  // namespace pushbroom
