// Reverse-mode autodiff tape. Ops append nodes to a Graph; backward walks
// the tape once in reverse append order. First-order gradients only.
//
// The same op wrappers serve inference: with recording off they just run the
// forward kernels and keep values alive until the graph is reset (the
// streaming engine resets per line).
#pragma once

#include <functional>
#include <memory>
#include <utility>
#include <vector>

#include "pushbroom/kernels.hpp"
#include "pushbroom/tensor.hpp"

namespace pushbroom {

class Graph;

struct Var {
    int32_t id = -1;
    uint32_t epoch = 0;
    bool valid() const { return id >= 0; }
};

class Graph {
public:
    bool recording = true;
    bool check_finite = true;

    Var leaf(Tensor t, bool requires_grad) {
        if (check_finite && !t.all_finite()) fail("leaf: non-finite values in input tensor");
        return push("leaf", std::move(t), requires_grad && recording, nullptr);
    }
    Var constant(Tensor t) { return leaf(std::move(t), false); }

    // Non-owning leaf over a tensor that outlives the graph (parameters).
    Var leaf_external(const Tensor* t, bool requires_grad) {
        if (check_finite && !t->all_finite())
            fail("leaf: non-finite values in external parameter tensor");
        nodes_.push_back(Node{Tensor(), t, Tensor(), "leaf", requires_grad && recording, nullptr});
        return Var{(int32_t)(nodes_.size() - 1), epoch_};
    }

    const Tensor& val(Var v) const {
        validate(v);
        const Node& n = nodes_[(size_t)v.id];
        return n.ext ? *n.ext : n.value;
    }

    const Tensor& grad(Var v) const {
        validate(v);
        if (!grads_ready_) fail("grad: backward has not been run on this graph");
        return nodes_[(size_t)v.id].grad;
    }

    bool requires_grad(Var v) const {
        validate(v);
        return nodes_[(size_t)v.id].requires_grad;
    }

    // Gradient of a scalar loss w.r.t. every recorded node. Re-runnable:
    // grads are zeroed and re-accumulated in a fixed order each call.
    void backward(Var loss) {
        validate(loss);
        if (nodes_.empty()) fail("backward: graph already consumed");
        const Tensor& lv = nodes_[(size_t)loss.id].value;
        if (lv.numel() != 1)
            fail("backward: loss must be scalar, got shape " + shape_str(lv.shape()));
        if (!nodes_[(size_t)loss.id].requires_grad)
            fail("backward: loss is not connected to any differentiable leaf");
        for (auto& n : nodes_) {
            const Tensor& v = n.ext ? *n.ext : n.value;
            if (n.grad.numel() != v.numel()) {
                n.grad = Tensor(v.shape());
                account(n.grad.byte_size());
            } else {
                n.grad.fill(0.0);
            }
        }
        nodes_[(size_t)loss.id].grad[0] = 1.0;
        grads_ready_ = true;
        for (int32_t i = loss.id; i >= 0; --i) {
            Node& n = nodes_[(size_t)i];
            if (n.back) n.back(*this, i);
        }
    }

    // Consume the graph: frees all nodes and invalidates outstanding Vars.
    void reset() {
        nodes_.clear();
        ++epoch_;
        grads_ready_ = false;
        live_bytes_ = 0;
    }

    size_t size() const { return nodes_.size(); }
    size_t live_bytes() const { return live_bytes_; }
    size_t peak_bytes() const { return peak_bytes_; }
    void reset_peak_bytes() { peak_bytes_ = live_bytes_; }

    // --- op implementation surface ---

    using BackFn = std::function<void(Graph&, int32_t)>;

    Var emit(const char* op, Tensor value, bool requires_grad, BackFn back) {
        if (check_finite && !value.all_finite())
            fail(std::string(op) + ": non-finite values in result");
        bool rg = requires_grad && recording;
        return push(op, std::move(value), rg, rg ? std::move(back) : nullptr);
    }

    bool track(Var a) const { return recording && requires_grad(a); }
    bool track(Var a, Var b) const { return track(a) || track(b); }
    bool track(Var a, Var b, Var c) const { return track(a, b) || track(c); }

    Tensor& grad_ref(Var v) { return nodes_[(size_t)v.id].grad; }
    Tensor& grad_ref(int32_t id) { return nodes_[(size_t)id].grad; }
    const Tensor& val_ref(int32_t id) const {
        const Node& n = nodes_[(size_t)id];
        return n.ext ? *n.ext : n.value;
    }

private:
    struct Node {
        Tensor value;
        const Tensor* ext = nullptr;
        Tensor grad;
        const char* op;
        bool requires_grad;
        BackFn back;
    };

    Var push(const char* op, Tensor value, bool rg, BackFn back) {
        account(value.byte_size());
        nodes_.push_back(Node{std::move(value), nullptr, Tensor(), op, rg, std::move(back)});
        return Var{(int32_t)(nodes_.size() - 1), epoch_};
    }

    void validate(Var v) const {
        if (!v.valid() || v.epoch != epoch_ || (size_t)v.id >= nodes_.size())
            fail("graph: stale node handle (graph already consumed)");
    }

    void account(size_t bytes) {
        live_bytes_ += bytes;
        peak_bytes_ = std::max(peak_bytes_, live_bytes_);
    }

    std::vector<Node> nodes_;
    uint32_t epoch_ = 0;
    bool grads_ready_ = false;
    size_t live_bytes_ = 0;
    size_t peak_bytes_ = 0;
};

// ---------------------------------------------------------------------------
// primitive ops
// ---------------------------------------------------------------------------

inline Var add(Graph& g, Var a, Var b) {
    Tensor out(g.val(a).shape());
    add_fwd(g.val(a), g.val(b), out);
    return g.emit("add", std::move(out), g.track(a, b), [a, b](Graph& gg, int32_t id) {
        const Tensor& go = gg.grad_ref(id);
        Tensor &ga = gg.grad_ref(a), &gb = gg.grad_ref(b);
        for (int64_t i = 0; i < go.numel(); ++i) {
            ga[i] += go[i];
            gb[i] += go[i];
        }
    });
}

inline Var sub(Graph& g, Var a, Var b) {
    Tensor out(g.val(a).shape());
    sub_fwd(g.val(a), g.val(b), out);
    return g.emit("sub", std::move(out), g.track(a, b), [a, b](Graph& gg, int32_t id) {
        const Tensor& go = gg.grad_ref(id);
        Tensor &ga = gg.grad_ref(a), &gb = gg.grad_ref(b);
        for (int64_t i = 0; i < go.numel(); ++i) {
            ga[i] += go[i];
            gb[i] -= go[i];
        }
    });
}

inline Var mul(Graph& g, Var a, Var b) {
    Tensor out(g.val(a).shape());
    mul_fwd(g.val(a), g.val(b), out);
    return g.emit("mul", std::move(out), g.track(a, b), [a, b](Graph& gg, int32_t id) {
        const Tensor& go = gg.grad_ref(id);
        const Tensor &ta = gg.val(a), &tb = gg.val(b);
        Tensor &ga = gg.grad_ref(a), &gb = gg.grad_ref(b);
        for (int64_t i = 0; i < go.numel(); ++i) {
            ga[i] += go[i] * tb[i];
            gb[i] += go[i] * ta[i];
        }
    });
}

inline Var scale(Graph& g, Var a, double c) {
    Tensor out(g.val(a).shape());
    scale_fwd(g.val(a), c, out);
    return g.emit("scale", std::move(out), g.track(a), [a, c](Graph& gg, int32_t id) {
        const Tensor& go = gg.grad_ref(id);
        Tensor& ga = gg.grad_ref(a);
        for (int64_t i = 0; i < go.numel(); ++i) ga[i] += go[i] * c;
    });
}

inline Var reshape(Graph& g, Var a, Shape shape) {
    Tensor out = g.val(a).reshaped(shape);
    return g.emit("reshape", std::move(out), g.track(a), [a](Graph& gg, int32_t id) {
        const Tensor& go = gg.grad_ref(id);
        Tensor& ga = gg.grad_ref(a);
        for (int64_t i = 0; i < go.numel(); ++i) ga[i] += go[i];
    });
}

#define PUSHBROOM_UNARY_OP(NAME, FWD, BWD_USES_OUTPUT, BWD)                                 \
    inline Var NAME(Graph& g, Var a) {                                                     \
        Tensor out(g.val(a).shape());                                                      \
        FWD(g.val(a), out);                                                                \
        return g.emit(#NAME, std::move(out), g.track(a), [a](Graph& gg, int32_t id) {      \
            const Tensor& src = BWD_USES_OUTPUT ? gg.val_ref(id) : gg.val(a);              \
            BWD(src, gg.grad_ref(id), gg.grad_ref(a));                                     \
        });                                                                                \
    }

PUSHBROOM_UNARY_OP(silu, silu_fwd, false, silu_bwd)
PUSHBROOM_UNARY_OP(sigmoid, sigmoid_fwd, true, sigmoid_bwd)
PUSHBROOM_UNARY_OP(relu, relu_fwd, false, relu_bwd)
PUSHBROOM_UNARY_OP(tanh_op, tanh_fwd, true, tanh_bwd)
PUSHBROOM_UNARY_OP(softplus, softplus_fwd, false, softplus_bwd)
#undef PUSHBROOM_UNARY_OP

inline Var softmax(Graph& g, Var a) {
    Tensor out(g.val(a).shape());
    softmax_fwd(g.val(a), out);
    return g.emit("softmax", std::move(out), g.track(a), [a](Graph& gg, int32_t id) {
        softmax_bwd(gg.val_ref(id), gg.grad_ref(id), gg.grad_ref(a));
    });
}

inline Var layernorm(Graph& g, Var x, Var gamma, Var beta) {
    Tensor out(g.val(x).shape());
    layernorm_fwd(g.val(x), g.val(gamma), g.val(beta), out);
    return g.emit("layernorm", std::move(out), g.track(x, gamma, beta),
                  [x, gamma, beta](Graph& gg, int32_t id) {
                      layernorm_bwd(gg.val(x), gg.val(gamma), gg.grad_ref(id), gg.grad_ref(x),
                                    gg.grad_ref(gamma), gg.grad_ref(beta));
                  });
}

inline Var bias_add(Graph& g, Var x, Var b) {
    Tensor out(g.val(x).shape());
    bias_add_fwd(g.val(x), g.val(b), out);
    return g.emit("bias_add", std::move(out), g.track(x, b), [x, b](Graph& gg, int32_t id) {
        bias_add_bwd(gg.grad_ref(id), gg.grad_ref(x), gg.grad_ref(b));
    });
}

inline Var chan_mul(Graph& g, Var x, Var s) {
    Tensor out(g.val(x).shape());
    chan_mul_fwd(g.val(x), g.val(s), out);
    return g.emit("chan_mul", std::move(out), g.track(x, s), [x, s](Graph& gg, int32_t id) {
        chan_mul_bwd(gg.val(x), gg.val(s), gg.grad_ref(id), gg.grad_ref(x), gg.grad_ref(s));
    });
}

inline Var gate_mul(Graph& g, Var x, Var gate) {
    Tensor out(g.val(x).shape());
    gate_mul_fwd(g.val(x), g.val(gate), out);
    return g.emit("gate_mul", std::move(out), g.track(x, gate), [x, gate](Graph& gg, int32_t id) {
        gate_mul_bwd(gg.val(x), gg.val(gate), gg.grad_ref(id), gg.grad_ref(x), gg.grad_ref(gate));
    });
}

inline Var pool_pixels(Graph& g, Var x) {
    const Tensor& t = g.val(x);
    check_3d("pool_pixels", t);
    Tensor out({t.dim(0), 1, t.dim(2)});
    pool_pixels_fwd(t, out);
    int N = t.dim(1);
    return g.emit("pool_pixels", std::move(out), g.track(x), [x, N](Graph& gg, int32_t id) {
        pool_pixels_bwd(gg.grad_ref(id), N, gg.grad_ref(x));
    });
}

inline Var simple_gate(Graph& g, Var x) {
    const Tensor& t = g.val(x);
    check_3d("simple_gate", t);
    if (t.dim(2) % 2 != 0)
        fail("simple_gate: channel count must be even, got " + std::to_string(t.dim(2)));
    Tensor out({t.dim(0), t.dim(1), t.dim(2) / 2});
    simple_gate_fwd(t, out);
    return g.emit("simple_gate", std::move(out), g.track(x), [x](Graph& gg, int32_t id) {
        simple_gate_bwd(gg.val(x), gg.grad_ref(id), gg.grad_ref(x));
    });
}

inline Var linear(Graph& g, Var x, Var w, Var b) {
    const Tensor& t = g.val(x);
    Shape os = t.shape();
    os.back() = g.val(w).dim(1);
    Tensor out(os);
    linear_fwd(t, g.val(w), b.valid() ? &g.val(b) : nullptr, out);
    bool rg = b.valid() ? g.track(x, w, b) : g.track(x, w);
    return g.emit("linear", std::move(out), rg, [x, w, b](Graph& gg, int32_t id) {
        linear_bwd(gg.val(x), gg.val(w), gg.grad_ref(id), gg.grad_ref(x), gg.grad_ref(w),
                   b.valid() ? &gg.grad_ref(b) : nullptr);
    });
}
inline Var linear(Graph& g, Var x, Var w) { return linear(g, x, w, Var{}); }

inline Var matmul(Graph& g, Var a, Var b) {
    const Tensor &ta = g.val(a), &tb = g.val(b);
    if (ta.ndim() != 2 || tb.ndim() != 2 || ta.dim(1) != tb.dim(0))
        fail("matmul: incompatible shapes " + shape_str(ta.shape()) + " and " +
             shape_str(tb.shape()));
    Tensor out({ta.dim(0), tb.dim(1)});
    matmul_fwd(ta, tb, out);
    return g.emit("matmul", std::move(out), g.track(a, b), [a, b](Graph& gg, int32_t id) {
        matmul_bwd(gg.val(a), gg.val(b), gg.grad_ref(id), gg.grad_ref(a), gg.grad_ref(b));
    });
}

inline Var conv1d(Graph& g, Var x, Var w, Var b, int stride) {
    const Tensor &t = g.val(x), &tw = g.val(w);
    check_3d("conv1d", t);
    int Nout = conv1d_out_len(t.dim(1), tw.dim(1), stride);
    Tensor out({t.dim(0), Nout, tw.dim(0)});
    conv1d_fwd(t, tw, b.valid() ? &g.val(b) : nullptr, stride, out);
    bool rg = b.valid() ? g.track(x, w, b) : g.track(x, w);
    return g.emit("conv1d", std::move(out), rg, [x, w, b, stride](Graph& gg, int32_t id) {
        conv1d_bwd(gg.val(x), gg.val(w), stride, gg.grad_ref(id), gg.grad_ref(x),
                   gg.grad_ref(w), b.valid() ? &gg.grad_ref(b) : nullptr);
    });
}

inline Var conv1d_transpose(Graph& g, Var x, Var w, Var b) {
    const Tensor &t = g.val(x), &tw = g.val(w);
    check_3d("conv1d_transpose", t);
    Tensor out({t.dim(0), conv1d_transpose_out_len(t.dim(1), tw.dim(1)), tw.dim(2)});
    conv1d_transpose_fwd(t, tw, b.valid() ? &g.val(b) : nullptr, out);
    bool rg = b.valid() ? g.track(x, w, b) : g.track(x, w);
    return g.emit("conv1d_transpose", std::move(out), rg, [x, w, b](Graph& gg, int32_t id) {
        conv1d_transpose_bwd(gg.val(x), gg.val(w), gg.grad_ref(id), gg.grad_ref(x),
                             gg.grad_ref(w), b.valid() ? &gg.grad_ref(b) : nullptr);
    });
}

inline Var dwconv1d(Graph& g, Var x, Var w, Var b) {
    const Tensor& t = g.val(x);
    Tensor out(t.shape());
    dwconv1d_fwd(t, g.val(w), b.valid() ? &g.val(b) : nullptr, out);
    bool rg = b.valid() ? g.track(x, w, b) : g.track(x, w);
    return g.emit("dwconv1d", std::move(out), rg, [x, w, b](Graph& gg, int32_t id) {
        dwconv1d_bwd(gg.val(x), gg.val(w), gg.grad_ref(id), gg.grad_ref(x), gg.grad_ref(w),
                     b.valid() ? &gg.grad_ref(b) : nullptr);
    });
}

inline Var lineconv_causal(Graph& g, Var x, Var w, Var b) {
    const Tensor& t = g.val(x);
    Tensor out(t.shape());
    lineconv_causal_fwd(t, g.val(w), b.valid() ? &g.val(b) : nullptr, out);
    bool rg = b.valid() ? g.track(x, w, b) : g.track(x, w);
    return g.emit("lineconv_causal", std::move(out), rg, [x, w, b](Graph& gg, int32_t id) {
        lineconv_causal_bwd(gg.val(x), gg.val(w), gg.grad_ref(id), gg.grad_ref(x),
                            gg.grad_ref(w), b.valid() ? &gg.grad_ref(b) : nullptr);
    });
}

inline Var mean_axis0(Graph& g, Var x) {
    const Tensor& t = g.val(x);
    Shape os(t.shape().begin() + 1, t.shape().end());
    Tensor out(os);
    mean_axis0_fwd(t, out);
    int D = t.dim(0);
    return g.emit("mean_axis0", std::move(out), g.track(x), [x, D](Graph& gg, int32_t id) {
        mean_axis0_bwd(gg.grad_ref(id), D, gg.grad_ref(x));
    });
}

inline Var mean_all(Graph& g, Var x) {
    const Tensor& t = g.val(x);
    Tensor out = Tensor::scalar(mean_all(t));
    int64_t n = t.numel();
    return g.emit("mean_all", std::move(out), g.track(x), [x, n](Graph& gg, int32_t id) {
        double go = gg.grad_ref(id)[0] / (double)n;
        Tensor& gx = gg.grad_ref(x);
        for (int64_t i = 0; i < n; ++i) gx[i] += go;
    });
}

inline Var sum_all(Graph& g, Var x) {
    const Tensor& t = g.val(x);
    Tensor out = Tensor::scalar(sum_all(t));
    int64_t n = t.numel();
    return g.emit("sum_all", std::move(out), g.track(x), [x, n](Graph& gg, int32_t id) {
        double go = gg.grad_ref(id)[0];
        Tensor& gx = gg.grad_ref(x);
        for (int64_t i = 0; i < n; ++i) gx[i] += go;
    });
}

inline Var variance_channels(Graph& g, Var x) {
    const Tensor& t = g.val(x);
    Shape os = t.shape();
    os.back() = 1;
    Tensor out(os);
    variance_channels_fwd(t, out);
    return g.emit("variance_channels", std::move(out), g.track(x), [x](Graph& gg, int32_t id) {
        variance_channels_bwd(gg.val(x), gg.grad_ref(id), gg.grad_ref(x));
    });
}

inline Var slice(Graph& g, Var x, int axis, int start, int count) {
    const Tensor& t = g.val(x);
    Shape os = t.shape();
    os[(size_t)axis] = count;
    Tensor out(os);
    slice_fwd(t, axis, start, count, out);
    return g.emit("slice", std::move(out), g.track(x),
                  [x, axis, start, count](Graph& gg, int32_t id) {
                      slice_bwd(gg.grad_ref(id), axis, start, count, gg.grad_ref(x));
                  });
}

inline Var concat(Graph& g, Var a, Var b, int axis) {
    const Tensor &ta = g.val(a), &tb = g.val(b);
    Shape os = ta.shape();
    int la = ta.dim(axis), lb = tb.dim(axis);
    os[(size_t)axis] = la + lb;
    Tensor out(os);
    concat_fwd(ta, tb, axis, out);
    return g.emit("concat", std::move(out), g.track(a, b),
                  [a, b, axis, la, lb](Graph& gg, int32_t id) {
                      concat_bwd(gg.grad_ref(id), axis, la, lb, gg.grad_ref(a), gg.grad_ref(b));
                  });
}

inline Var pad(Graph& g, Var x, int axis, int before, int after, PadMode mode) {
    const Tensor& t = g.val(x);
    Shape os = t.shape();
    os[(size_t)axis] += before + after;
    Tensor out(os);
    pad_fwd(t, axis, before, after, mode, out);
    return g.emit("pad", std::move(out), g.track(x),
                  [x, axis, before, after, mode](Graph& gg, int32_t id) {
                      pad_bwd(gg.grad_ref(id), axis, before, after, mode, gg.grad_ref(x));
                  });
}

inline Var mse_loss(Graph& g, Var a, Var b) {
    const Tensor &ta = g.val(a), &tb = g.val(b);
    check_same_shape("mse_loss", ta, tb);
    double acc = 0.0;
    for (int64_t i = 0; i < ta.numel(); ++i) {
        double d = ta[i] - tb[i];
        acc += d * d;
    }
    Tensor out = Tensor::scalar(acc / (double)ta.numel());
    return g.emit("mse_loss", std::move(out), g.track(a, b), [a, b](Graph& gg, int32_t id) {
        const Tensor &ta2 = gg.val(a), &tb2 = gg.val(b);
        double go = gg.grad_ref(id)[0] * 2.0 / (double)ta2.numel();
        Tensor &ga = gg.grad_ref(a), &gb = gg.grad_ref(b);
        for (int64_t i = 0; i < ta2.numel(); ++i) {
            double d = go * (ta2[i] - tb2[i]);
            ga[i] += d;
            gb[i] -= d;
        }
    });
}

inline Var l1_loss(Graph& g, Var a, Var b) {
    const Tensor &ta = g.val(a), &tb = g.val(b);
    check_same_shape("l1_loss", ta, tb);
    double acc = 0.0;
    for (int64_t i = 0; i < ta.numel(); ++i) acc += std::fabs(ta[i] - tb[i]);
    Tensor out = Tensor::scalar(acc / (double)ta.numel());
    return g.emit("l1_loss", std::move(out), g.track(a, b), [a, b](Graph& gg, int32_t id) {
        const Tensor &ta2 = gg.val(a), &tb2 = gg.val(b);
        double go = gg.grad_ref(id)[0] / (double)ta2.numel();
        Tensor &ga = gg.grad_ref(a), &gb = gg.grad_ref(b);
        for (int64_t i = 0; i < ta2.numel(); ++i) {
            double s = ta2[i] > tb2[i] ? go : (ta2[i] < tb2[i] ? -go : 0.0);
            ga[i] += s;
            gb[i] -= s;
        }
    });
}

}  // namespace pushbroom
