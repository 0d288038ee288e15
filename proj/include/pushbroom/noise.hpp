// Synthetic degradation pipeline (non-i.i.d. Gaussian, impulse, stripe,
// deadline) and the full-reference quality metrics PSNR, SSIM, SAM.
// Composition order is fixed: Gaussian, impulse, stripe, deadline.
#pragma once

#include <set>

#include "pushbroom/config.hpp"
#include "pushbroom/rng.hpp"
#include "pushbroom/tensor.hpp"

namespace pushbroom {

struct NoiseSpec {
    double gaussian_lo = 0.0, gaussian_hi = 0.0;  // sigma on the 0..255 scale
    bool impulse = false;
    double impulse_lo = 0.10, impulse_hi = 0.70;
    bool stripe = false;
    double stripe_col_lo = 0.05, stripe_col_hi = 0.15;
    double stripe_mag = 0.25;  // additive column offsets drawn in [-mag, mag]
    bool deadline = false;
    double deadline_col_lo = 0.05, deadline_col_hi = 0.15;
    double band_fraction = 1.0 / 3.0;
    uint64_t seed = 0;

    static NoiseSpec gaussian(double lo, double hi, uint64_t seed) {
        NoiseSpec s;
        s.gaussian_lo = lo;
        s.gaussian_hi = hi;
        s.seed = seed;
        return s;
    }

    // the composite protocol: sigma in [0,95] plus impulse, stripe and
    // deadline artifacts each on a third of the bands
    static NoiseSpec mixture(uint64_t seed) {
        NoiseSpec s;
        s.gaussian_lo = 0.0;
        s.gaussian_hi = 95.0;
        s.impulse = s.stripe = s.deadline = true;
        s.seed = seed;
        return s;
    }

    static NoiseSpec from_config(const Config& c) {
        NoiseSpec s;
        s.gaussian_lo = c.get_f64("gaussian_lo", 0.0);
        s.gaussian_hi = c.get_f64("gaussian_hi", 0.0);
        s.impulse = c.get_bool("impulse", false);
        s.impulse_lo = c.get_f64("impulse_lo", s.impulse_lo);
        s.impulse_hi = c.get_f64("impulse_hi", s.impulse_hi);
        s.stripe = c.get_bool("stripe", false);
        s.stripe_col_lo = c.get_f64("stripe_col_lo", s.stripe_col_lo);
        s.stripe_col_hi = c.get_f64("stripe_col_hi", s.stripe_col_hi);
        s.stripe_mag = c.get_f64("stripe_mag", s.stripe_mag);
        s.deadline = c.get_bool("deadline", false);
        s.deadline_col_lo = c.get_f64("deadline_col_lo", s.deadline_col_lo);
        s.deadline_col_hi = c.get_f64("deadline_col_hi", s.deadline_col_hi);
        s.band_fraction = c.get_f64("band_fraction", s.band_fraction);
        s.seed = c.get_u64("seed", 0);
        return s;
    }

    Config to_config() const {
        Config c;
        c.set_f64("gaussian_lo", gaussian_lo);
        c.set_f64("gaussian_hi", gaussian_hi);
        c.set("impulse", impulse ? "true" : "false");
        c.set_f64("impulse_lo", impulse_lo);
        c.set_f64("impulse_hi", impulse_hi);
        c.set("stripe", stripe ? "true" : "false");
        c.set_f64("stripe_col_lo", stripe_col_lo);
        c.set_f64("stripe_col_hi", stripe_col_hi);
        c.set_f64("stripe_mag", stripe_mag);
        c.set("deadline", deadline ? "true" : "false");
        c.set_f64("deadline_col_lo", deadline_col_lo);
        c.set_f64("deadline_col_hi", deadline_col_hi);
        c.set_f64("band_fraction", band_fraction);
        c.set_int("seed", (int64_t)seed);
        return c;
    }
};

namespace detail {

// band subset of size ceil(fraction * bands), without replacement
inline std::vector<int> pick_bands(int bands, double fraction, Rng& rng) {
    int count = (int)std::ceil(fraction * bands);
    count = std::min(count, bands);
    std::vector<int> ids((size_t)bands);
    for (int i = 0; i < bands; ++i) ids[(size_t)i] = i;
    for (int i = 0; i < count; ++i) {
        int j = i + rng.uniform_int(bands - i);
        std::swap(ids[(size_t)i], ids[(size_t)j]);
    }
    ids.resize((size_t)count);
    std::sort(ids.begin(), ids.end());
    return ids;
}

inline std::vector<int> pick_columns(int cols, double lo, double hi, Rng& rng) {
    double frac = rng.uniform(lo, hi);
    int count = std::max(1, (int)std::ceil(frac * cols));
    count = std::min(count, cols);
    std::vector<int> ids((size_t)cols);
    for (int i = 0; i < cols; ++i) ids[(size_t)i] = i;
    for (int i = 0; i < count; ++i) {
        int j = i + rng.uniform_int(cols - i);
        std::swap(ids[(size_t)i], ids[(size_t)j]);
    }
    ids.resize((size_t)count);
    std::sort(ids.begin(), ids.end());
    return ids;
}

}  // namespace detail

// cube: [lines x cols x bands] in [0, 1]. Deterministic in (cube, spec, seed).
inline Tensor add_noise(const Tensor& cube, const NoiseSpec& spec) {
    check_3d("add_noise", cube);
    for (int64_t i = 0; i < cube.numel(); ++i)
        if (cube[i] < 0.0 || cube[i] > 1.0)
            fail("add_noise: input values must lie in [0, 1]");
    int L = cube.dim(0), C = cube.dim(1), B = cube.dim(2);
    Tensor y = cube;
    Rng root(spec.seed);

    // 1) non-i.i.d. Gaussian: per-band sigma drawn once, pixels i.i.d.
    if (spec.gaussian_hi > 0.0) {
        for (int b = 0; b < B; ++b) {
            Rng br = root.fork(1000 + (uint64_t)b);
            double sigma = br.uniform(spec.gaussian_lo, spec.gaussian_hi) / 255.0;
            for (int l = 0; l < L; ++l)
                for (int c = 0; c < C; ++c) y.at(l, c, b) += sigma * br.normal();
        }
    }
    // 2) impulse (salt and pepper at a drawn density) on a third of the bands
    if (spec.impulse) {
        Rng sel = root.fork(2);
        auto bands = detail::pick_bands(B, spec.band_fraction, sel);
        for (int b : bands) {
            Rng br = root.fork(2000 + (uint64_t)b);
            double density = br.uniform(spec.impulse_lo, spec.impulse_hi);
            for (int l = 0; l < L; ++l)
                for (int c = 0; c < C; ++c)
                    if (br.uniform() < density) y.at(l, c, b) = br.uniform() < 0.5 ? 0.0 : 1.0;
        }
    }
    // 3) stripe: constant additive offsets on a fraction of columns
    if (spec.stripe) {
        Rng sel = root.fork(3);
        auto bands = detail::pick_bands(B, spec.band_fraction, sel);
        for (int b : bands) {
            Rng br = root.fork(3000 + (uint64_t)b);
            auto cols = detail::pick_columns(C, spec.stripe_col_lo, spec.stripe_col_hi, br);
            for (int c : cols) {
                double offset = br.uniform(-spec.stripe_mag, spec.stripe_mag);
                for (int l = 0; l < L; ++l) y.at(l, c, b) += offset;
            }
        }
    }
    // 4) deadline: dropped (zeroed) columns
    if (spec.deadline) {
        Rng sel = root.fork(4);
        auto bands = detail::pick_bands(B, spec.band_fraction, sel);
        for (int b : bands) {
            Rng br = root.fork(4000 + (uint64_t)b);
            auto cols = detail::pick_columns(C, spec.deadline_col_lo, spec.deadline_col_hi, br);
            for (int c : cols)
                for (int l = 0; l < L; ++l) y.at(l, c, b) = 0.0;
        }
    }
    return y;
}

// ---------------------------------------------------------------------------
// quality metrics
// ---------------------------------------------------------------------------

struct QualityReport {
    double psnr = 0.0;   // dB; +inf when MSE is exactly zero
    double ssim = 0.0;   // in [-1, 1]
    double sam = 0.0;    // radians >= 0
    int64_t sam_skipped = 0;  // zero spectra left out of the mean
};

inline double psnr(const Tensor& x, const Tensor& ref, double peak = 1.0) {
    check_same_shape("psnr", x, ref);
    double mse = 0.0;
    for (int64_t i = 0; i < x.numel(); ++i) {
        double d = x[i] - ref[i];
        mse += d * d;
    }
    mse /= (double)x.numel();
    if (mse == 0.0) return std::numeric_limits<double>::infinity();
    return 10.0 * std::log10(peak * peak / mse);
}

// Per-band SSIM with an 11x11 Gaussian window (sigma 1.5), valid placement,
// averaged over windows and bands. Cubes are [lines x cols x bands].
inline double ssim(const Tensor& x, const Tensor& ref, double peak = 1.0) {
    check_same_shape("ssim", x, ref);
    check_3d("ssim", x);
    int L = x.dim(0), C = x.dim(1), B = x.dim(2);
    constexpr int W = 11;
    if (L < W || C < W)
        fail("ssim: image " + std::to_string(L) + "x" + std::to_string(C) +
             " smaller than the 11x11 window");
    double win[W][W];
    {
        double g[W], s = 0.0;
        for (int i = 0; i < W; ++i) {
            double d = i - (W - 1) / 2.0;
            g[i] = std::exp(-d * d / (2.0 * 1.5 * 1.5));
        }
        for (int i = 0; i < W; ++i)
            for (int j = 0; j < W; ++j) {
                win[i][j] = g[i] * g[j];
                s += win[i][j];
            }
        for (int i = 0; i < W; ++i)
            for (int j = 0; j < W; ++j) win[i][j] /= s;
    }
    double c1 = 0.01 * peak, c2 = 0.03 * peak;
    c1 *= c1;
    c2 *= c2;
    double total = 0.0;
    int64_t count = 0;
    for (int b = 0; b < B; ++b) {
        for (int l0 = 0; l0 + W <= L; ++l0) {
            for (int c0 = 0; c0 + W <= C; ++c0) {
                double mx = 0, my = 0, mxx = 0, myy = 0, mxy = 0;
                for (int i = 0; i < W; ++i)
                    for (int j = 0; j < W; ++j) {
                        double w = win[i][j];
                        double xv = x.at(l0 + i, c0 + j, b);
                        double yv = ref.at(l0 + i, c0 + j, b);
                        mx += w * xv;
                        my += w * yv;
                        mxx += w * xv * xv;
                        myy += w * yv * yv;
                        mxy += w * xv * yv;
                    }
                double vx = mxx - mx * mx, vy = myy - my * my, cxy = mxy - mx * my;
                double v = ((2 * mx * my + c1) * (2 * cxy + c2)) /
                           ((mx * mx + my * my + c1) * (vx + vy + c2));
                total += v;
                ++count;
            }
        }
    }
    return total / (double)count;
}

// Mean spectral angle (radians) between per-pixel spectra.
inline double sam(const Tensor& x, const Tensor& ref, int64_t* skipped = nullptr) {
    check_same_shape("sam", x, ref);
    check_3d("sam", x);
    int B = x.dim(2);
    int64_t pixels = x.numel() / B;
    double total = 0.0;
    int64_t count = 0, skip = 0;
    for (int64_t p = 0; p < pixels; ++p) {
        const double* a = x.data() + p * B;
        const double* r = ref.data() + p * B;
        double dot = 0, na = 0, nr = 0;
        for (int b = 0; b < B; ++b) {
            dot += a[b] * r[b];
            na += a[b] * a[b];
            nr += r[b] * r[b];
        }
        if (na == 0.0 || nr == 0.0) {
            ++skip;
            continue;
        }
        double cosv = dot / (std::sqrt(na) * std::sqrt(nr));
        cosv = std::min(1.0, std::max(-1.0, cosv));
        total += std::acos(cosv);
        ++count;
    }
    if (skipped) *skipped = skip;
    if (count == 0) fail("sam: every spectrum is zero");
    return total / (double)count;
}

inline QualityReport evaluate_quality(const Tensor& test, const Tensor& ref, double peak = 1.0) {
    QualityReport q;
    q.psnr = psnr(test, ref, peak);
    q.ssim = ssim(test, ref, peak);
    q.sam = sam(test, ref, &q.sam_skipped);
    return q;
}

}  // namespace pushbroom
