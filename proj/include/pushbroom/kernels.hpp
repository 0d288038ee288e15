// Forward and backward compute kernels over [lines x pixels x channels]
// tensors. The autodiff tape and the streaming inference path both call
// these, so the two routes share one numeric implementation per primitive.
//
// Conventions:
//  - spatial conv weights are stored [C_out x k x C_in] (contiguous input-
//    channel dot per tap), transpose conv weights [C_in x k x C_out],
//    depthwise / line-causal weights [k x C] (contiguous channel row per tap)
//  - backward kernels accumulate (+=) into the gradient tensors
//  - reductions run in a fixed left-to-right order
#pragma once

#include <algorithm>
#include <cmath>

#include "pushbroom/tensor.hpp"

namespace pushbroom {

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

inline void add_fwd(const Tensor& a, const Tensor& b, Tensor& out) {
    check_same_shape("add", a, b);
    for (int64_t i = 0; i < a.numel(); ++i) out[i] = a[i] + b[i];
}

inline void sub_fwd(const Tensor& a, const Tensor& b, Tensor& out) {
    check_same_shape("sub", a, b);
    for (int64_t i = 0; i < a.numel(); ++i) out[i] = a[i] - b[i];
}

inline void mul_fwd(const Tensor& a, const Tensor& b, Tensor& out) {
    check_same_shape("mul", a, b);
    for (int64_t i = 0; i < a.numel(); ++i) out[i] = a[i] * b[i];
}

inline void scale_fwd(const Tensor& a, double c, Tensor& out) {
    for (int64_t i = 0; i < a.numel(); ++i) out[i] = a[i] * c;
}

inline double sigmoid_scalar(double x) { return 1.0 / (1.0 + std::exp(-x)); }
inline double silu_scalar(double x) { return x * sigmoid_scalar(x); }
inline double softplus_scalar(double x) {
    // log(1 + e^x), stable for large |x|
    return x > 30.0 ? x : std::log1p(std::exp(x));
}

inline void silu_fwd(const Tensor& x, Tensor& out) {
    for (int64_t i = 0; i < x.numel(); ++i) out[i] = silu_scalar(x[i]);
}
inline void silu_bwd(const Tensor& x, const Tensor& gout, Tensor& gx) {
    for (int64_t i = 0; i < x.numel(); ++i) {
        double s = sigmoid_scalar(x[i]);
        gx[i] += gout[i] * s * (1.0 + x[i] * (1.0 - s));
    }
}

inline void sigmoid_fwd(const Tensor& x, Tensor& out) {
    for (int64_t i = 0; i < x.numel(); ++i) out[i] = sigmoid_scalar(x[i]);
}
inline void sigmoid_bwd(const Tensor& y, const Tensor& gout, Tensor& gx) {
    for (int64_t i = 0; i < y.numel(); ++i) gx[i] += gout[i] * y[i] * (1.0 - y[i]);
}

inline void relu_fwd(const Tensor& x, Tensor& out) {
    for (int64_t i = 0; i < x.numel(); ++i) out[i] = x[i] > 0.0 ? x[i] : 0.0;
}
inline void relu_bwd(const Tensor& x, const Tensor& gout, Tensor& gx) {
    for (int64_t i = 0; i < x.numel(); ++i) gx[i] += x[i] > 0.0 ? gout[i] : 0.0;
}

inline void tanh_fwd(const Tensor& x, Tensor& out) {
    for (int64_t i = 0; i < x.numel(); ++i) out[i] = std::tanh(x[i]);
}
inline void tanh_bwd(const Tensor& y, const Tensor& gout, Tensor& gx) {
    for (int64_t i = 0; i < y.numel(); ++i) gx[i] += gout[i] * (1.0 - y[i] * y[i]);
}

inline void softplus_fwd(const Tensor& x, Tensor& out) {
    for (int64_t i = 0; i < x.numel(); ++i) out[i] = softplus_scalar(x[i]);
}
inline void softplus_bwd(const Tensor& x, const Tensor& gout, Tensor& gx) {
    for (int64_t i = 0; i < x.numel(); ++i) gx[i] += gout[i] * sigmoid_scalar(x[i]);
}

// ---------------------------------------------------------------------------
// channel broadcasts over [L x N x C]
// ---------------------------------------------------------------------------

inline void bias_add_fwd(const Tensor& x, const Tensor& b, Tensor& out) {
    check_3d("bias_add", x);
    int C = x.dim(2);
    if (b.numel() != C) fail("bias_add: bias length " + std::to_string(b.numel()) +
                             " vs channels " + std::to_string(C));
    int64_t rows = x.numel() / C;
    for (int64_t r = 0; r < rows; ++r) {
        const double* xp = x.data() + r * C;
        double* op = out.data() + r * C;
        for (int c = 0; c < C; ++c) op[c] = xp[c] + b[c];
    }
}
inline void bias_add_bwd(const Tensor& gout, Tensor& gx, Tensor& gb) {
    int C = (int)gb.numel();
    int64_t rows = gout.numel() / C;
    for (int64_t r = 0; r < rows; ++r) {
        const double* gp = gout.data() + r * C;
        double* gxp = gx.data() + r * C;
        for (int c = 0; c < C; ++c) {
            gxp[c] += gp[c];
            gb[c] += gp[c];
        }
    }
}

inline void chan_mul_fwd(const Tensor& x, const Tensor& s, Tensor& out) {
    check_3d("chan_mul", x);
    int C = x.dim(2);
    if (s.numel() != C) fail("chan_mul: scale length vs channels mismatch");
    int64_t rows = x.numel() / C;
    for (int64_t r = 0; r < rows; ++r) {
        const double* xp = x.data() + r * C;
        double* op = out.data() + r * C;
        for (int c = 0; c < C; ++c) op[c] = xp[c] * s[c];
    }
}
inline void chan_mul_bwd(const Tensor& x, const Tensor& s, const Tensor& gout, Tensor& gx,
                         Tensor& gs) {
    int C = (int)gs.numel();
    int64_t rows = x.numel() / C;
    for (int64_t r = 0; r < rows; ++r) {
        const double* xp = x.data() + r * C;
        const double* gp = gout.data() + r * C;
        double* gxp = gx.data() + r * C;
        for (int c = 0; c < C; ++c) {
            gxp[c] += gp[c] * s[c];
            gs[c] += gp[c] * xp[c];
        }
    }
}

// per-(line,channel) gate: x [L x N x C] * g [L x 1 x C]
inline void gate_mul_fwd(const Tensor& x, const Tensor& g, Tensor& out) {
    check_3d("gate_mul", x);
    int L = x.dim(0), N = x.dim(1), C = x.dim(2);
    if (g.dim(0) != L || g.dim(1) != 1 || g.dim(2) != C)
        fail("gate_mul: gate shape " + shape_str(g.shape()) + " vs input " + shape_str(x.shape()));
    for (int l = 0; l < L; ++l) {
        const double* gp = g.data() + (int64_t)l * C;
        for (int n = 0; n < N; ++n) {
            const double* xp = x.data() + ((int64_t)l * N + n) * C;
            double* op = out.data() + ((int64_t)l * N + n) * C;
            for (int c = 0; c < C; ++c) op[c] = xp[c] * gp[c];
        }
    }
}
inline void gate_mul_bwd(const Tensor& x, const Tensor& g, const Tensor& gout, Tensor& gx,
                         Tensor& gg) {
    int L = x.dim(0), N = x.dim(1), C = x.dim(2);
    for (int l = 0; l < L; ++l) {
        const double* gp = g.data() + (int64_t)l * C;
        double* ggp = gg.data() + (int64_t)l * C;
        for (int n = 0; n < N; ++n) {
            const double* xp = x.data() + ((int64_t)l * N + n) * C;
            const double* go = gout.data() + ((int64_t)l * N + n) * C;
            double* gxp = gx.data() + ((int64_t)l * N + n) * C;
            for (int c = 0; c < C; ++c) {
                gxp[c] += go[c] * gp[c];
                ggp[c] += go[c] * xp[c];
            }
        }
    }
}

// mean over the pixel axis: [L x N x C] -> [L x 1 x C]
inline void pool_pixels_fwd(const Tensor& x, Tensor& out) {
    check_3d("pool_pixels", x);
    int L = x.dim(0), N = x.dim(1), C = x.dim(2);
    for (int l = 0; l < L; ++l) {
        double* op = out.data() + (int64_t)l * C;
        std::fill(op, op + C, 0.0);
        for (int n = 0; n < N; ++n) {
            const double* xp = x.data() + ((int64_t)l * N + n) * C;
            for (int c = 0; c < C; ++c) op[c] += xp[c];
        }
        for (int c = 0; c < C; ++c) op[c] /= N;
    }
}
inline void pool_pixels_bwd(const Tensor& gout, int N, Tensor& gx) {
    int L = gx.dim(0), C = gx.dim(2);
    for (int l = 0; l < L; ++l) {
        const double* gp = gout.data() + (int64_t)l * C;
        for (int n = 0; n < N; ++n) {
            double* gxp = gx.data() + ((int64_t)l * N + n) * C;
            for (int c = 0; c < C; ++c) gxp[c] += gp[c] / N;
        }
    }
}

inline void simple_gate_fwd(const Tensor& x, Tensor& out) {
    check_3d("simple_gate", x);
    int C = x.dim(2);
    if (C % 2 != 0) fail("simple_gate: channel count must be even, got " + std::to_string(C));
    int H = C / 2;
    int64_t rows = x.numel() / C;
    for (int64_t r = 0; r < rows; ++r) {
        const double* xp = x.data() + r * C;
        double* op = out.data() + r * H;
        for (int h = 0; h < H; ++h) op[h] = xp[h] * xp[h + H];
    }
}
inline void simple_gate_bwd(const Tensor& x, const Tensor& gout, Tensor& gx) {
    int C = x.dim(2), H = C / 2;
    int64_t rows = x.numel() / C;
    for (int64_t r = 0; r < rows; ++r) {
        const double* xp = x.data() + r * C;
        const double* gp = gout.data() + r * H;
        double* gxp = gx.data() + r * C;
        for (int h = 0; h < H; ++h) {
            gxp[h] += gp[h] * xp[h + H];
            gxp[h + H] += gp[h] * xp[h];
        }
    }
}

// ---------------------------------------------------------------------------
// linear / matmul
// ---------------------------------------------------------------------------

// y[..., co] = sum_ci x[..., ci] * w[ci, co] (+ b[co])
inline void linear_fwd(const Tensor& x, const Tensor& w, const Tensor* b, Tensor& out) {
    int Cin = x.dim(x.ndim() - 1);
    if (w.ndim() != 2 || w.dim(0) != Cin)
        fail("linear: weight " + shape_str(w.shape()) + " vs input channels " +
             std::to_string(Cin));
    int Cout = w.dim(1);
    int64_t rows = x.numel() / Cin;
    for (int64_t r = 0; r < rows; ++r) {
        const double* xp = x.data() + r * Cin;
        double* op = out.data() + r * Cout;
        if (b) {
            for (int c = 0; c < Cout; ++c) op[c] = (*b)[c];
        } else {
            std::fill(op, op + Cout, 0.0);
        }
        for (int ci = 0; ci < Cin; ++ci) {
            double xv = xp[ci];
            const double* wp = w.data() + (int64_t)ci * Cout;
            for (int co = 0; co < Cout; ++co) op[co] += xv * wp[co];
        }
    }
}
inline void linear_bwd(const Tensor& x, const Tensor& w, const Tensor& gout, Tensor& gx,
                       Tensor& gw, Tensor* gb) {
    int Cin = w.dim(0), Cout = w.dim(1);
    int64_t rows = x.numel() / Cin;
    for (int64_t r = 0; r < rows; ++r) {
        const double* xp = x.data() + r * Cin;
        const double* gp = gout.data() + r * Cout;
        double* gxp = gx.data() + r * Cin;
        for (int ci = 0; ci < Cin; ++ci) {
            const double* wp = w.data() + (int64_t)ci * Cout;
            double* gwp = gw.data() + (int64_t)ci * Cout;
            double acc = 0.0;
            double xv = xp[ci];
            for (int co = 0; co < Cout; ++co) {
                acc += gp[co] * wp[co];
                gwp[co] += gp[co] * xv;
            }
            gxp[ci] += acc;
        }
        if (gb) {
            for (int co = 0; co < Cout; ++co) (*gb)[co] += gp[co];
        }
    }
}

// plain 2-d matmul: [m x k] * [k x n] -> [m x n]
inline void matmul_fwd(const Tensor& a, const Tensor& b, Tensor& out) {
    if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(0))
        fail("matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
             shape_str(b.shape()));
    int m = a.dim(0), k = a.dim(1), n = b.dim(1);
    for (int i = 0; i < m; ++i) {
        double* op = out.data() + (int64_t)i * n;
        std::fill(op, op + n, 0.0);
        for (int j = 0; j < k; ++j) {
            double av = a[(int64_t)i * k + j];
            const double* bp = b.data() + (int64_t)j * n;
            for (int c = 0; c < n; ++c) op[c] += av * bp[c];
        }
    }
}
inline void matmul_bwd(const Tensor& a, const Tensor& b, const Tensor& gout, Tensor& ga,
                       Tensor& gb) {
    int m = a.dim(0), k = a.dim(1), n = b.dim(1);
    for (int i = 0; i < m; ++i) {
        const double* gp = gout.data() + (int64_t)i * n;
        for (int j = 0; j < k; ++j) {
            const double* bp = b.data() + (int64_t)j * n;
            double acc = 0.0;
            double av = a[(int64_t)i * k + j];
            double* gbp = gb.data() + (int64_t)j * n;
            for (int c = 0; c < n; ++c) {
                acc += gp[c] * bp[c];
                gbp[c] += av * gp[c];
            }
            ga[(int64_t)i * k + j] += acc;
        }
    }
}

// ---------------------------------------------------------------------------
// spatial 1-d convolutions over the pixel axis
// ---------------------------------------------------------------------------

inline int conv1d_out_len(int N, int k, int stride) {
    int pad = (k - 1) / 2;
    int out = (N + 2 * pad - k) / stride + 1;
    if (out <= 0) fail("conv1d: input length " + std::to_string(N) + " too short for kernel " +
                       std::to_string(k));
    return out;
}

// x [L x N x Cin], w [Cout x k x Cin], b [Cout]; "same" zero padding
inline void conv1d_fwd(const Tensor& x, const Tensor& w, const Tensor* b, int stride,
                       Tensor& out) {
    check_3d("conv1d", x);
    int L = x.dim(0), N = x.dim(1), Cin = x.dim(2);
    if (w.ndim() != 3 || w.dim(2) != Cin)
        fail("conv1d: weight " + shape_str(w.shape()) + " vs input " + shape_str(x.shape()));
    int Cout = w.dim(0), k = w.dim(1);
    int pad = (k - 1) / 2;
    int Nout = conv1d_out_len(N, k, stride);
    for (int l = 0; l < L; ++l) {
        for (int t = 0; t < Nout; ++t) {
            double* op = out.data() + ((int64_t)l * Nout + t) * Cout;
            int base = t * stride - pad;
            for (int co = 0; co < Cout; ++co) {
                double acc = b ? (*b)[co] : 0.0;
                const double* wp = w.data() + (int64_t)co * k * Cin;
                for (int j = 0; j < k; ++j) {
                    int p = base + j;
                    if (p < 0 || p >= N) continue;
                    const double* xp = x.data() + ((int64_t)l * N + p) * Cin;
                    const double* wj = wp + (int64_t)j * Cin;
                    double dot = 0.0;
                    for (int ci = 0; ci < Cin; ++ci) dot += wj[ci] * xp[ci];
                    acc += dot;
                }
                op[co] = acc;
            }
        }
    }
}
inline void conv1d_bwd(const Tensor& x, const Tensor& w, int stride, const Tensor& gout,
                       Tensor& gx, Tensor& gw, Tensor* gb) {
    int L = x.dim(0), N = x.dim(1), Cin = x.dim(2);
    int Cout = w.dim(0), k = w.dim(1);
    int pad = (k - 1) / 2;
    int Nout = gout.dim(1);
    for (int l = 0; l < L; ++l) {
        for (int t = 0; t < Nout; ++t) {
            const double* gp = gout.data() + ((int64_t)l * Nout + t) * Cout;
            int base = t * stride - pad;
            for (int co = 0; co < Cout; ++co) {
                double g = gp[co];
                if (gb) (*gb)[co] += g;
                const double* wp = w.data() + (int64_t)co * k * Cin;
                double* gwp = gw.data() + (int64_t)co * k * Cin;
                for (int j = 0; j < k; ++j) {
                    int p = base + j;
                    if (p < 0 || p >= N) continue;
                    const double* xp = x.data() + ((int64_t)l * N + p) * Cin;
                    double* gxp = gx.data() + ((int64_t)l * N + p) * Cin;
                    const double* wj = wp + (int64_t)j * Cin;
                    double* gwj = gwp + (int64_t)j * Cin;
                    for (int ci = 0; ci < Cin; ++ci) {
                        gxp[ci] += g * wj[ci];
                        gwj[ci] += g * xp[ci];
                    }
                }
            }
        }
    }
}

// transpose conv, stride 2, no padding: x [L x N x Cin], w [Cin x k x Cout]
// out length = 2*(N-1) + k  (k = 2 gives exact doubling)
inline int conv1d_transpose_out_len(int N, int k) { return 2 * (N - 1) + k; }

inline void conv1d_transpose_fwd(const Tensor& x, const Tensor& w, const Tensor* b,
                                 Tensor& out) {
    check_3d("conv1d_transpose", x);
    int L = x.dim(0), N = x.dim(1), Cin = x.dim(2);
    if (w.ndim() != 3 || w.dim(0) != Cin)
        fail("conv1d_transpose: weight " + shape_str(w.shape()) + " vs input " +
             shape_str(x.shape()));
    int k = w.dim(1), Cout = w.dim(2);
    int Nout = conv1d_transpose_out_len(N, k);
    for (int l = 0; l < L; ++l) {
        double* outl = out.data() + (int64_t)l * Nout * Cout;
        if (b) {
            for (int t = 0; t < Nout; ++t)
                for (int co = 0; co < Cout; ++co) outl[(int64_t)t * Cout + co] = (*b)[co];
        } else {
            std::fill(outl, outl + (int64_t)Nout * Cout, 0.0);
        }
        for (int t = 0; t < N; ++t) {
            const double* xp = x.data() + ((int64_t)l * N + t) * Cin;
            for (int j = 0; j < k; ++j) {
                double* op = outl + (int64_t)(2 * t + j) * Cout;
                for (int ci = 0; ci < Cin; ++ci) {
                    double xv = xp[ci];
                    const double* wp = w.data() + ((int64_t)ci * k + j) * Cout;
                    for (int co = 0; co < Cout; ++co) op[co] += xv * wp[co];
                }
            }
        }
    }
}
inline void conv1d_transpose_bwd(const Tensor& x, const Tensor& w, const Tensor& gout,
                                 Tensor& gx, Tensor& gw, Tensor* gb) {
    int L = x.dim(0), N = x.dim(1), Cin = x.dim(2);
    int k = w.dim(1), Cout = w.dim(2);
    int Nout = gout.dim(1);
    for (int l = 0; l < L; ++l) {
        const double* goutl = gout.data() + (int64_t)l * Nout * Cout;
        if (gb) {
            for (int t = 0; t < Nout; ++t)
                for (int co = 0; co < Cout; ++co) (*gb)[co] += goutl[(int64_t)t * Cout + co];
        }
        for (int t = 0; t < N; ++t) {
            const double* xp = x.data() + ((int64_t)l * N + t) * Cin;
            double* gxp = gx.data() + ((int64_t)l * N + t) * Cin;
            for (int j = 0; j < k; ++j) {
                const double* gp = goutl + (int64_t)(2 * t + j) * Cout;
                for (int ci = 0; ci < Cin; ++ci) {
                    const double* wp = w.data() + ((int64_t)ci * k + j) * Cout;
                    double* gwp = gw.data() + ((int64_t)ci * k + j) * Cout;
                    double acc = 0.0;
                    double xv = xp[ci];
                    for (int co = 0; co < Cout; ++co) {
                        acc += gp[co] * wp[co];
                        gwp[co] += gp[co] * xv;
                    }
                    gxp[ci] += acc;
                }
            }
        }
    }
}

// depthwise spatial conv, stride 1, same padding: w [k x C], b [C]
inline void dwconv1d_fwd(const Tensor& x, const Tensor& w, const Tensor* b, Tensor& out) {
    check_3d("dwconv1d", x);
    int L = x.dim(0), N = x.dim(1), C = x.dim(2);
    if (w.ndim() != 2 || w.dim(1) != C)
        fail("dwconv1d: weight " + shape_str(w.shape()) + " vs channels " + std::to_string(C));
    int k = w.dim(0);
    int pad = (k - 1) / 2;
    for (int l = 0; l < L; ++l) {
        for (int t = 0; t < N; ++t) {
            double* op = out.data() + ((int64_t)l * N + t) * C;
            if (b) {
                for (int c = 0; c < C; ++c) op[c] = (*b)[c];
            } else {
                std::fill(op, op + C, 0.0);
            }
            for (int j = 0; j < k; ++j) {
                int p = t - pad + j;
                if (p < 0 || p >= N) continue;
                const double* xp = x.data() + ((int64_t)l * N + p) * C;
                const double* wp = w.data() + (int64_t)j * C;
                for (int c = 0; c < C; ++c) op[c] += wp[c] * xp[c];
            }
        }
    }
}
inline void dwconv1d_bwd(const Tensor& x, const Tensor& w, const Tensor& gout, Tensor& gx,
                         Tensor& gw, Tensor* gb) {
    int L = x.dim(0), N = x.dim(1), C = x.dim(2);
    int k = w.dim(0);
    int pad = (k - 1) / 2;
    for (int l = 0; l < L; ++l) {
        for (int t = 0; t < N; ++t) {
            const double* gp = gout.data() + ((int64_t)l * N + t) * C;
            if (gb)
                for (int c = 0; c < C; ++c) (*gb)[c] += gp[c];
            for (int j = 0; j < k; ++j) {
                int p = t - pad + j;
                if (p < 0 || p >= N) continue;
                const double* xp = x.data() + ((int64_t)l * N + p) * C;
                double* gxp = gx.data() + ((int64_t)l * N + p) * C;
                const double* wp = w.data() + (int64_t)j * C;
                double* gwp = gw.data() + (int64_t)j * C;
                for (int c = 0; c < C; ++c) {
                    gxp[c] += gp[c] * wp[c];
                    gwp[c] += gp[c] * xp[c];
                }
            }
        }
    }
}

// causal depthwise conv over the LINE axis: w [K x C], b [C]; line l sees
// lines l-K+1 .. l (zeros before the first line)
inline void lineconv_causal_fwd(const Tensor& x, const Tensor& w, const Tensor* b,
                                Tensor& out) {
    check_3d("lineconv_causal", x);
    int L = x.dim(0), N = x.dim(1), C = x.dim(2);
    if (w.ndim() != 2 || w.dim(1) != C)
        fail("lineconv_causal: weight " + shape_str(w.shape()) + " vs channels " +
             std::to_string(C));
    int K = w.dim(0);
    for (int l = 0; l < L; ++l) {
        for (int n = 0; n < N; ++n) {
            double* op = out.data() + ((int64_t)l * N + n) * C;
            if (b) {
                for (int c = 0; c < C; ++c) op[c] = (*b)[c];
            } else {
                std::fill(op, op + C, 0.0);
            }
            for (int j = 0; j < K; ++j) {
                int src = l - K + 1 + j;
                if (src < 0) continue;
                const double* xp = x.data() + ((int64_t)src * N + n) * C;
                const double* wp = w.data() + (int64_t)j * C;
                for (int c = 0; c < C; ++c) op[c] += wp[c] * xp[c];
            }
        }
    }
}
inline void lineconv_causal_bwd(const Tensor& x, const Tensor& w, const Tensor& gout,
                                Tensor& gx, Tensor& gw, Tensor* gb) {
    int L = x.dim(0), N = x.dim(1), C = x.dim(2);
    int K = w.dim(0);
    for (int l = 0; l < L; ++l) {
        for (int n = 0; n < N; ++n) {
            const double* gp = gout.data() + ((int64_t)l * N + n) * C;
            if (gb)
                for (int c = 0; c < C; ++c) (*gb)[c] += gp[c];
            for (int j = 0; j < K; ++j) {
                int src = l - K + 1 + j;
                if (src < 0) continue;
                const double* xp = x.data() + ((int64_t)src * N + n) * C;
                double* gxp = gx.data() + ((int64_t)src * N + n) * C;
                const double* wp = w.data() + (int64_t)j * C;
                double* gwp = gw.data() + (int64_t)j * C;
                for (int c = 0; c < C; ++c) {
                    gxp[c] += gp[c] * wp[c];
                    gwp[c] += gp[c] * xp[c];
                }
            }
        }
    }
}

// single-line step of the causal line conv: ring holds the K-1 previous
// lines' inputs, oldest first; returns the conv output for the current line
inline void lineconv_step(const Tensor& ring, const Tensor& x_line, const Tensor& w,
                          const Tensor* b, Tensor& out) {
    int K = w.dim(0), C = w.dim(1);
    int N = x_line.dim(1);
    for (int n = 0; n < N; ++n) {
        double* op = out.data() + (int64_t)n * C;
        if (b) {
            for (int c = 0; c < C; ++c) op[c] = (*b)[c];
        } else {
            std::fill(op, op + C, 0.0);
        }
        for (int j = 0; j + 1 < K; ++j) {
            const double* xp = ring.data() + ((int64_t)j * N + n) * C;
            const double* wp = w.data() + (int64_t)j * C;
            for (int c = 0; c < C; ++c) op[c] += wp[c] * xp[c];
        }
        const double* xp = x_line.data() + (int64_t)n * C;
        const double* wp = w.data() + (int64_t)(K - 1) * C;
        for (int c = 0; c < C; ++c) op[c] += wp[c] * xp[c];
    }
}

// rotate the ring one line forward, appending x_line as the newest entry
inline void ring_push(Tensor& ring, const Tensor& x_line) {
    if (ring.numel() == 0) return;  // K == 1: no history kept
    int Km1 = ring.dim(0);
    int64_t stride = ring.numel() / Km1;
    double* rp = ring.data();
    std::copy(rp + stride, rp + (int64_t)Km1 * stride, rp);
    std::copy(x_line.data(), x_line.data() + stride, rp + (int64_t)(Km1 - 1) * stride);
}

// ---------------------------------------------------------------------------
// normalization / softmax / reductions
// ---------------------------------------------------------------------------

constexpr double kLayerNormEps = 1e-5;

// layernorm over the channel (last) axis with affine gain/bias
inline void layernorm_fwd(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                          Tensor& out) {
    int C = x.dim(x.ndim() - 1);
    if (gamma.numel() != C || beta.numel() != C)
        fail("layernorm: affine params length vs channels mismatch");
    int64_t rows = x.numel() / C;
    for (int64_t r = 0; r < rows; ++r) {
        const double* xp = x.data() + r * C;
        double* op = out.data() + r * C;
        double mu = 0.0;
        for (int c = 0; c < C; ++c) mu += xp[c];
        mu /= C;
        double var = 0.0;
        for (int c = 0; c < C; ++c) {
            double d = xp[c] - mu;
            var += d * d;
        }
        var /= C;
        double inv = 1.0 / std::sqrt(var + kLayerNormEps);
        for (int c = 0; c < C; ++c) op[c] = (xp[c] - mu) * inv * gamma[c] + beta[c];
    }
}
inline void layernorm_bwd(const Tensor& x, const Tensor& gamma, const Tensor& gout,
                          Tensor& gx, Tensor& ggamma, Tensor& gbeta) {
    int C = x.dim(x.ndim() - 1);
    int64_t rows = x.numel() / C;
    std::vector<double> xhat((size_t)C), gy((size_t)C);
    for (int64_t r = 0; r < rows; ++r) {
        const double* xp = x.data() + r * C;
        const double* gp = gout.data() + r * C;
        double* gxp = gx.data() + r * C;
        double mu = 0.0;
        for (int c = 0; c < C; ++c) mu += xp[c];
        mu /= C;
        double var = 0.0;
        for (int c = 0; c < C; ++c) {
            double d = xp[c] - mu;
            var += d * d;
        }
        var /= C;
        double inv = 1.0 / std::sqrt(var + kLayerNormEps);
        double mean_gy = 0.0, mean_gy_xhat = 0.0;
        for (int c = 0; c < C; ++c) {
            xhat[(size_t)c] = (xp[c] - mu) * inv;
            gy[(size_t)c] = gp[c] * gamma[c];
            ggamma[c] += gp[c] * xhat[(size_t)c];
            gbeta[c] += gp[c];
            mean_gy += gy[(size_t)c];
            mean_gy_xhat += gy[(size_t)c] * xhat[(size_t)c];
        }
        mean_gy /= C;
        mean_gy_xhat /= C;
        for (int c = 0; c < C; ++c)
            gxp[c] += inv * (gy[(size_t)c] - mean_gy - xhat[(size_t)c] * mean_gy_xhat);
    }
}

// softmax over the last axis, shift-invariant
inline void softmax_fwd(const Tensor& x, Tensor& out) {
    int C = x.dim(x.ndim() - 1);
    int64_t rows = x.numel() / C;
    for (int64_t r = 0; r < rows; ++r) {
        const double* xp = x.data() + r * C;
        double* op = out.data() + r * C;
        double m = xp[0];
        for (int c = 1; c < C; ++c) m = std::max(m, xp[c]);
        double sum = 0.0;
        for (int c = 0; c < C; ++c) {
            op[c] = std::exp(xp[c] - m);
            sum += op[c];
        }
        for (int c = 0; c < C; ++c) op[c] /= sum;
    }
}
inline void softmax_bwd(const Tensor& y, const Tensor& gout, Tensor& gx) {
    int C = y.dim(y.ndim() - 1);
    int64_t rows = y.numel() / C;
    for (int64_t r = 0; r < rows; ++r) {
        const double* yp = y.data() + r * C;
        const double* gp = gout.data() + r * C;
        double* gxp = gx.data() + r * C;
        double dot = 0.0;
        for (int c = 0; c < C; ++c) dot += gp[c] * yp[c];
        for (int c = 0; c < C; ++c) gxp[c] += yp[c] * (gp[c] - dot);
    }
}

// mean over axis 0: [D x rest] -> [rest]
inline void mean_axis0_fwd(const Tensor& x, Tensor& out) {
    int D = x.dim(0);
    int64_t rest = x.numel() / D;
    for (int64_t i = 0; i < rest; ++i) out[i] = 0.0;
    for (int d = 0; d < D; ++d) {
        const double* xp = x.data() + (int64_t)d * rest;
        for (int64_t i = 0; i < rest; ++i) out[i] += xp[i];
    }
    for (int64_t i = 0; i < rest; ++i) out[i] /= D;
}
inline void mean_axis0_bwd(const Tensor& gout, int D, Tensor& gx) {
    int64_t rest = gout.numel();
    for (int d = 0; d < D; ++d) {
        double* gxp = gx.data() + (int64_t)d * rest;
        for (int64_t i = 0; i < rest; ++i) gxp[i] += gout[i] / D;
    }
}

inline double mean_all(const Tensor& x) {
    double s = 0.0;
    for (int64_t i = 0; i < x.numel(); ++i) s += x[i];
    return s / (double)x.numel();
}

inline double sum_all(const Tensor& x) {
    double s = 0.0;
    for (int64_t i = 0; i < x.numel(); ++i) s += x[i];
    return s;
}

// population variance over the channel (last) axis: [.. x C] -> [.. x 1]
inline void variance_channels_fwd(const Tensor& x, Tensor& out) {
    int C = x.dim(x.ndim() - 1);
    int64_t rows = x.numel() / C;
    for (int64_t r = 0; r < rows; ++r) {
        const double* xp = x.data() + r * C;
        double mu = 0.0;
        for (int c = 0; c < C; ++c) mu += xp[c];
        mu /= C;
        double var = 0.0;
        for (int c = 0; c < C; ++c) {
            double d = xp[c] - mu;
            var += d * d;
        }
        out[r] = var / C;
    }
}
inline void variance_channels_bwd(const Tensor& x, const Tensor& gout, Tensor& gx) {
    int C = x.dim(x.ndim() - 1);
    int64_t rows = x.numel() / C;
    for (int64_t r = 0; r < rows; ++r) {
        const double* xp = x.data() + r * C;
        double* gxp = gx.data() + r * C;
        double mu = 0.0;
        for (int c = 0; c < C; ++c) mu += xp[c];
        mu /= C;
        double g = gout[r] * 2.0 / C;
        for (int c = 0; c < C; ++c) gxp[c] += g * (xp[c] - mu);
    }
}

// ---------------------------------------------------------------------------
// slice / concat / pad along one axis
// ---------------------------------------------------------------------------

inline void axis_extents(const Tensor& x, int axis, int64_t& outer, int& len, int64_t& inner) {
    if (axis < 0 || axis >= x.ndim()) fail("axis out of range");
    outer = 1;
    for (int i = 0; i < axis; ++i) outer *= x.dim(i);
    len = x.dim(axis);
    inner = 1;
    for (int i = axis + 1; i < x.ndim(); ++i) inner *= x.dim(i);
}

inline void slice_fwd(const Tensor& x, int axis, int start, int count, Tensor& out) {
    int64_t outer, inner;
    int len;
    axis_extents(x, axis, outer, len, inner);
    if (start < 0 || count <= 0 || start + count > len)
        fail("slice: range [" + std::to_string(start) + ", " + std::to_string(start + count) +
             ") out of axis length " + std::to_string(len));
    for (int64_t o = 0; o < outer; ++o) {
        const double* src = x.data() + (o * len + start) * inner;
        double* dst = out.data() + o * count * inner;
        std::copy(src, src + (int64_t)count * inner, dst);
    }
}
inline void slice_bwd(const Tensor& gout, int axis, int start, int count, Tensor& gx) {
    int64_t outer, inner;
    int len;
    axis_extents(gx, axis, outer, len, inner);
    for (int64_t o = 0; o < outer; ++o) {
        const double* src = gout.data() + o * count * inner;
        double* dst = gx.data() + (o * len + start) * inner;
        for (int64_t i = 0; i < (int64_t)count * inner; ++i) dst[i] += src[i];
    }
}

inline void concat_fwd(const Tensor& a, const Tensor& b, int axis, Tensor& out) {
    int64_t outer, inner;
    int la, lb;
    int64_t inner2;
    axis_extents(a, axis, outer, la, inner);
    int64_t outer2;
    axis_extents(b, axis, outer2, lb, inner2);
    if (outer != outer2 || inner != inner2)
        fail("concat: shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) +
             " differ off-axis");
    for (int64_t o = 0; o < outer; ++o) {
        std::copy(a.data() + o * la * inner, a.data() + (o + 1) * la * inner,
                  out.data() + o * (la + lb) * inner);
        std::copy(b.data() + o * lb * inner, b.data() + (o + 1) * lb * inner,
                  out.data() + (o * (la + lb) + la) * inner);
    }
}
inline void concat_bwd(const Tensor& gout, int axis, int la, int lb, Tensor& ga, Tensor& gb) {
    int64_t outer, inner;
    int len;
    axis_extents(gout, axis, outer, len, inner);
    for (int64_t o = 0; o < outer; ++o) {
        const double* gp = gout.data() + o * len * inner;
        double* gap = ga.data() + o * la * inner;
        double* gbp = gb.data() + o * lb * inner;
        for (int64_t i = 0; i < (int64_t)la * inner; ++i) gap[i] += gp[i];
        for (int64_t i = 0; i < (int64_t)lb * inner; ++i) gbp[i] += gp[(int64_t)la * inner + i];
    }
}

enum class PadMode { Zero, Reflect };

inline void pad_fwd(const Tensor& x, int axis, int before, int after, PadMode mode,
                    Tensor& out) {
    int64_t outer, inner;
    int len;
    axis_extents(x, axis, outer, len, inner);
    if (mode == PadMode::Reflect && (before >= len || after >= len))
        fail("pad: reflect padding " + std::to_string(std::max(before, after)) +
             " needs axis length > padding, have " + std::to_string(len));
    int olen = len + before + after;
    for (int64_t o = 0; o < outer; ++o) {
        const double* src = x.data() + o * len * inner;
        double* dst = out.data() + o * olen * inner;
        for (int t = 0; t < olen; ++t) {
            int s = t - before;
            if (s < 0) s = mode == PadMode::Reflect ? -s : -1;
            if (s >= len) s = mode == PadMode::Reflect ? 2 * len - 2 - s : -1;
            if (s < 0) {
                std::fill(dst + (int64_t)t * inner, dst + (int64_t)(t + 1) * inner, 0.0);
            } else {
                std::copy(src + (int64_t)s * inner, src + (int64_t)(s + 1) * inner,
                          dst + (int64_t)t * inner);
            }
        }
    }
}
inline void pad_bwd(const Tensor& gout, int axis, int before, int after, PadMode mode,
                    Tensor& gx) {
    int64_t outer, inner;
    int len;
    axis_extents(gx, axis, outer, len, inner);
    int olen = len + before + after;
    for (int64_t o = 0; o < outer; ++o) {
        const double* gp = gout.data() + o * olen * inner;
        double* gxp = gx.data() + o * len * inner;
        for (int t = 0; t < olen; ++t) {
            int s = t - before;
            if (s < 0) s = mode == PadMode::Reflect ? -s : -1;
            if (s >= len) s = mode == PadMode::Reflect ? 2 * len - 2 - s : -1;
            if (s < 0) continue;
            for (int64_t i = 0; i < inner; ++i) gxp[(int64_t)s * inner + i] += gp[(int64_t)t * inner + i];
        }
    }
}

}  // namespace pushbroom
