// Radiation-fault emulation over a denoiser's flat weight space: per-weight
// Bernoulli corruption with large deviations emulating significant-bit
// flips. Injected values are clamped to the finite float32 range so faults
// stay observable by the variance detector instead of poisoning arithmetic
// with stored NaN/Inf.
#pragma once

#include <cfloat>
#include <cstring>
#include <fstream>

#include "pushbroom/denoiser.hpp"

namespace pushbroom {

enum class FaultModel { BitflipMsb, AdditiveDeviation };

struct FaultSpec {
    double probability = 0.0;
    FaultModel model = FaultModel::BitflipMsb;
    double deviation = 10.0;      // additive model: delta in units of weight std
    double min_deviation = 10.0;  // bitflip model: resample until the flip deviates this much
    double bitflip_cap = 0.0;     // bitflip model: optional |corrupted| cap (sigмa units, 0 = off)
    uint64_t seed = 0;
};

struct FaultRecord {
    int64_t weight_id = 0;
    uint64_t old_bits = 0;
    uint64_t new_bits = 0;
};

struct FaultManifest {
    std::vector<FaultRecord> records;
    bool consumed = false;

    void save(const std::string& path) const {
        std::ofstream os(path);
        if (!os) fail("cannot write fault manifest: " + path);
        os << std::hex;
        for (const auto& r : records)
            os << std::dec << r.weight_id << " " << std::hex << r.old_bits << " " << r.new_bits
               << "\n";
    }
    static FaultManifest load(const std::string& path) {
        std::ifstream is(path);
        if (!is) fail("cannot read fault manifest: " + path);
        FaultManifest m;
        FaultRecord r;
        while (is >> std::dec >> r.weight_id >> std::hex >> r.old_bits >> r.new_bits)
            m.records.push_back(r);
        return m;
    }
};

inline uint64_t double_bits(double v) {
    uint64_t b;
    std::memcpy(&b, &v, 8);
    return b;
}
inline double bits_double(uint64_t b) {
    double v;
    std::memcpy(&v, &b, 8);
    return v;
}

// Flip one bit in the sign / top-exponent region (bits 31..27) of the
// float32 encoding, clamped to the finite float range. Significant-bit
// faults are large deviations from the nominal value; flips whose effect
// falls under min_dev_sigmas (a sign flip of a near-zero weight, an
// exponent flip that merely zeroes it) are resampled so every emulated
// fault sits in that regime. An optional cap bounds the corrupted value.
inline double bitflip_msb(double w, Rng& rng, double sigma, double min_dev_sigmas = 10.0,
                          double cap_sigmas = 0.0) {
    double v = w;
    for (int attempt = 0; attempt < 64; ++attempt) {
        float f = (float)w;
        uint32_t bits;
        std::memcpy(&bits, &f, 4);
        int bit = 27 + rng.uniform_int(5);
        bits ^= 1u << bit;
        std::memcpy(&f, &bits, 4);
        if (!std::isfinite(f)) f = std::copysign(FLT_MAX, f);
        v = (double)f;
        if (cap_sigmas > 0.0 && sigma > 0.0) {
            double cap = cap_sigmas * sigma;
            if (v > cap) v = cap;
            if (v < -cap) v = -cap;
        }
        if (min_dev_sigmas <= 0.0 || sigma <= 0.0 ||
            std::fabs(v - w) >= min_dev_sigmas * sigma)
            break;
    }
    return v;
}

inline double additive_deviation(double w, double sigma, double delta, Rng& rng) {
    double sign = rng.uniform() < 0.5 ? -1.0 : 1.0;
    double v = w + sign * delta * sigma;
    if (v > FLT_MAX) v = FLT_MAX;
    if (v < -FLT_MAX) v = -FLT_MAX;
    return v;
}

// Bernoulli corruption over every scalar of the conv / linear kernels.
// Deterministic in (params, spec): identical seeds give identical manifests.
inline FaultManifest inject(DenoiserParams& params, const FaultSpec& spec) {
    if (spec.probability < 0.0 || spec.probability > 1.0)
        fail("fault inject: probability must lie in [0, 1]");
    Rng rng(spec.seed);
    double sigma = params.fault_surface_std();
    FaultManifest m;
    int64_t id = 0;
    for (Tensor* t : params.fault_surface()) {
        for (int64_t i = 0; i < t->numel(); ++i, ++id) {
            if (rng.uniform() >= spec.probability) continue;
            double oldv = (*t)[i];
            double newv = spec.model == FaultModel::BitflipMsb
                              ? bitflip_msb(oldv, rng, sigma, spec.min_deviation, spec.bitflip_cap)
                              : additive_deviation(oldv, sigma, spec.deviation, rng);
            m.records.push_back(FaultRecord{id, double_bits(oldv), double_bits(newv)});
            (*t)[i] = newv;
        }
    }
    return m;
}

// Corrupt exactly one uniformly chosen weight. Used by single-fault trials;
// optionally resamples until the deviation magnitude reaches min_magnitude.
inline FaultManifest inject_single(DenoiserParams& params, FaultModel model, uint64_t seed,
                                   double min_magnitude = 0.0, double delta = 10.0,
                                   double bitflip_cap = 0.0) {
    Rng rng(seed);
    double sigma = params.fault_surface_std();
    auto surface = params.fault_surface();
    int64_t total = params.fault_surface_size();
    for (int attempt = 0; attempt < 10000; ++attempt) {
        int64_t id = (int64_t)(rng.uniform() * (double)total);
        if (id >= total) id = total - 1;
        int64_t off = id;
        Tensor* t = nullptr;
        for (Tensor* cand : surface) {
            if (off < cand->numel()) {
                t = cand;
                break;
            }
            off -= cand->numel();
        }
        double oldv = (*t)[off];
        double newv = model == FaultModel::BitflipMsb
                          ? bitflip_msb(oldv, rng, sigma, 0.0, bitflip_cap)
                          : additive_deviation(oldv, sigma, delta, rng);
        if (std::fabs(newv - oldv) < min_magnitude) continue;
        (*t)[off] = newv;
        FaultManifest m;
        m.records.push_back(FaultRecord{id, double_bits(oldv), double_bits(newv)});
        return m;
    }
    fail("inject_single: could not reach the requested fault magnitude");
}

// Bitwise restoration from a manifest. A manifest can be applied once.
inline void revert(DenoiserParams& params, FaultManifest& manifest) {
    if (manifest.consumed) fail("fault revert: manifest already consumed");
    auto surface = params.fault_surface();
    int64_t total = params.fault_surface_size();
    for (const auto& r : manifest.records) {
        if (r.weight_id < 0 || r.weight_id >= total)
            fail("fault revert: stale manifest (weight id " + std::to_string(r.weight_id) +
                 " out of range)");
        int64_t off = r.weight_id;
        for (Tensor* t : surface) {
            if (off < t->numel()) {
                (*t)[off] = bits_double(r.old_bits);
                break;
            }
            off -= t->numel();
        }
    }
    manifest.consumed = true;
}

}  // namespace pushbroom
