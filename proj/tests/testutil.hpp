// Shared test helpers: random tensors and the finite-difference gradient
// oracle (forward evaluations only, independent of the tape's backward).
#pragma once

#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "pushbroom/autodiff.hpp"
#include "pushbroom/rng.hpp"
#include "pushbroom/tensor.hpp"

namespace pushbroom::test {

inline Tensor rand_uniform(Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
    Tensor t(shape);
    for (int64_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform(lo, hi);
    return t;
}

inline Tensor rand_normal(Rng& rng, Shape shape, double stddev = 1.0) {
    Tensor t(shape);
    for (int64_t i = 0; i < t.numel(); ++i) t[i] = rng.normal() * stddev;
    return t;
}

inline void expect_tensor_near(const Tensor& a, const Tensor& b, double tol,
                               const std::string& what) {
    ASSERT_TRUE(a.same_shape(b)) << what << ": shape " << shape_str(a.shape()) << " vs "
                                 << shape_str(b.shape());
    double m = max_abs_diff(a, b);
    EXPECT_LE(m, tol) << what << ": max abs diff " << m;
}

// Builds a scalar loss from leaf vars; called repeatedly by the checker.
using ForwardFn = std::function<Var(Graph&, const std::vector<Var>&)>;

struct GradCheckReport {
    double max_rel_err = 0.0;
    std::string worst;
};

// Central finite differences (step h) against tape gradients. The oracle
// uses forward evaluations only. Relative error uses a floor so near-zero
// gradients are compared at absolute scale.
inline GradCheckReport grad_check(std::vector<Tensor> params, const ForwardFn& forward,
                                  double h = 1e-5, double denom_floor = 1e-3) {
    std::vector<Tensor> analytic;
    {
        Graph g;
        std::vector<Var> vars;
        for (const auto& p : params) vars.push_back(g.leaf(p, true));
        Var loss = forward(g, vars);
        g.backward(loss);
        for (auto v : vars) analytic.push_back(g.grad(v));
    }

    auto eval = [&](const std::vector<Tensor>& ps) {
        Graph g;
        g.recording = false;
        std::vector<Var> vars;
        for (const auto& p : ps) vars.push_back(g.leaf(p, false));
        return g.val(forward(g, vars))[0];
    };

    GradCheckReport rep;
    for (size_t pi = 0; pi < params.size(); ++pi) {
        for (int64_t j = 0; j < params[pi].numel(); ++j) {
            double orig = params[pi][j];
            params[pi][j] = orig + h;
            double up = eval(params);
            params[pi][j] = orig - h;
            double dn = eval(params);
            params[pi][j] = orig;
            double fd = (up - dn) / (2.0 * h);
            double an = analytic[pi][j];
            double rel = std::fabs(an - fd) / std::max({std::fabs(an), std::fabs(fd), denom_floor});
            if (rel > rep.max_rel_err) {
                rep.max_rel_err = rel;
                rep.worst = "param " + std::to_string(pi) + "[" + std::to_string(j) +
                            "]: analytic " + std::to_string(an) + " vs fd " + std::to_string(fd);
            }
        }
    }
    return rep;
}

inline void expect_grad_check(std::vector<Tensor> params, const ForwardFn& forward,
                              double tol = 1e-4, double h = 1e-5) {
    auto rep = grad_check(std::move(params), forward, h);
    EXPECT_LE(rep.max_rel_err, tol) << "worst: " << rep.worst;
}

}  // namespace pushbroom::test
