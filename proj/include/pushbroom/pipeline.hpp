// Streaming mixture engine: per line, every active denoiser stream advances
// (optionally on its own thread), the head checks the attention diagonal for
// faults, aggregates the survivors, and subtracts the noise estimate. Also
// hosts the benchmark harness and the fault / power study drivers.
#pragma once

#include <chrono>
#include <thread>

#include "pushbroom/cube.hpp"
#include "pushbroom/fault.hpp"
#include "pushbroom/noise.hpp"
#include "pushbroom/power.hpp"
#include "pushbroom/trainer.hpp"

#include <sys/resource.h>

namespace pushbroom {

struct FaultEvent {
    int64_t line = 0;
    int denoiser = 0;
    double variance = 0.0;
    bool faulty = false;
};

inline std::string fault_event_str(const FaultEvent& e) {
    std::ostringstream os;
    os.precision(12);
    os << "line=" << e.line << " denoiser=" << e.denoiser << " variance=" << e.variance
       << " verdict=" << (e.faulty ? "faulty" : "ok");
    return os.str();
}

struct MixtureStreamOptions {
    int threads = 1;
    bool filter_faults = true;
    double tau = -1.0;            // < 0: use the model's threshold
    double feature_guard = -1.0;  // < 0: use the model's guard
};

class MixtureStream {
public:
    MixtureStream(MixtureParams& model, int n_pixels, MixtureStreamOptions opt = {})
        : model_(&model), n_pixels_(n_pixels), opt_(opt) {
        if (model.size() < 1) fail("mixture stream: empty mixture");
        for (auto& d : model.denoisers)
            streams_.push_back(std::make_unique<DenoiserStream>(d, n_pixels));
        feats_.resize((size_t)model.size());
        active_.resize((size_t)model.size());
        for (int d = 0; d < model.size(); ++d) active_[(size_t)d] = d;
        params_ = model.aggregator;
        if (opt_.tau > 0.0) params_.tau = opt_.tau;
        if (opt_.feature_guard > 0.0) params_.feature_guard = opt_.feature_guard;
    }

    const std::vector<int>& active() const { return active_; }

    // change the running subset; freshly activated members restart from a
    // zero stream state (cold start)
    void set_active(const std::vector<int>& ids) {
        for (int d : ids) {
            if (d < 0 || d >= model_->size()) fail("mixture stream: denoiser id out of range");
            bool was_on = false;
            for (int a : active_) was_on = was_on || a == d;
            if (!was_on)
                streams_[(size_t)d] =
                    std::make_unique<DenoiserStream>(model_->denoisers[(size_t)d], n_pixels_);
        }
        active_ = ids;
    }

    struct LineResult {
        FaultReport report;          // over the active members, local indices
        bool fallback = false;       // every member faulty: noisy line passed through
        std::vector<FaultEvent> events;
    };

    // one noisy line [1 x N_c x N_b] -> denoised line, advancing all active
    // streams with a per-line barrier before aggregation
    LineResult step(const Tensor& y_line, Tensor& x_hat) {
        size_t na = active_.size();
        if (na == 0) fail("mixture stream: no active denoisers");
        auto advance = [&](size_t i) {
            streams_[(size_t)active_[i]]->step(y_line, feats_[(size_t)active_[i]]);
        };
        if (opt_.threads > 1 && na > 1) {
            std::vector<std::thread> pool;
            for (size_t i = 1; i < na; ++i) pool.emplace_back(advance, i);
            advance(0);
            for (auto& t : pool) t.join();
        } else {
            for (size_t i = 0; i < na; ++i) advance(i);
        }

        std::vector<const Tensor*> fp;
        for (int d : active_) fp.push_back(&feats_[(size_t)d]);
        LineResult res;
        res.report = detect_faults(fp, params_);
        bool any_fault = false;
        for (size_t i = 0; i < na; ++i) any_fault = any_fault || res.report.faulty[i];
        if (any_fault) {
            for (size_t i = 0; i < na; ++i)
                res.events.push_back(FaultEvent{line_, active_[i], res.report.variance[i],
                                                (bool)res.report.faulty[i]});
        }

        std::vector<int> keep;
        if (opt_.filter_faults) {
            keep = res.report.active;
        } else {
            for (size_t i = 0; i < na; ++i) keep.push_back((int)i);
        }
        if (keep.empty()) {
            // degraded output rather than breaking down
            if (!x_hat.same_shape(y_line)) x_hat = Tensor(y_line.shape());
            std::copy(y_line.data(), y_line.data() + y_line.numel(), x_hat.data());
            res.fallback = true;
        } else {
            aggregate_line(y_line, fp, keep, params_, x_hat);
        }
        ++line_;
        return res;
    }

    size_t state_bytes() const {
        size_t s = 0;
        for (int d : active_) s += streams_[(size_t)d]->state_bytes();
        return s;
    }
    size_t state_serialized_size() const {
        size_t s = 0;
        for (int d : active_) s += streams_[(size_t)d]->state_serialized_size();
        return s;
    }

private:
    MixtureParams* model_;
    int n_pixels_;
    MixtureStreamOptions opt_;
    AggregatorParams params_;
    std::vector<std::unique_ptr<DenoiserStream>> streams_;
    std::vector<Tensor> feats_;
    std::vector<int> active_;
    int64_t line_ = 0;
};

// ---------------------------------------------------------------------------
// whole-cube helpers
// ---------------------------------------------------------------------------

struct DenoiseRunOptions {
    int active = -1;                 // fixed active count (prefix); -1 = all
    std::string budget_path;         // schedule file (overrides `active`)
    double tau = -1.0;
    int threads = 1;
    bool filter_faults = true;
    double fault_prob = 0.0;         // optional injection before the run
    uint64_t fault_seed = 0;
    std::string fault_log_path;
};

struct DenoiseRunReport {
    int64_t lines = 0;
    int64_t fault_events = 0;
    int64_t fallback_lines = 0;
    std::vector<FaultEvent> events;
};

// in-memory cube -> denoised cube through the streaming engine
inline DenoiseRunReport denoise_cube(MixtureParams& model, const Tensor& noisy, Tensor& out,
                                     const DenoiseRunOptions& opt = {}) {
    check_3d("denoise_cube", noisy);
    int L = noisy.dim(0), N = noisy.dim(1), B = noisy.dim(2);
    if (B != model.bands()) fail("denoise: cube bands do not match the mixture");
    MixtureStreamOptions sopt;
    sopt.threads = opt.threads;
    sopt.filter_faults = opt.filter_faults;
    sopt.tau = opt.tau;
    MixtureStream stream(model, N, sopt);

    BudgetSchedule sched;
    bool scheduled = false;
    if (!opt.budget_path.empty()) {
        sched = BudgetSchedule::load(opt.budget_path);
        scheduled = true;
    }
    int fixed = opt.active > 0 ? std::min(opt.active, model.size()) : model.size();

    out = Tensor({L, N, B});
    Tensor line({1, N, B}), xh;
    DenoiseRunReport rep;
    std::vector<int> current = stream.active();
    for (int l = 0; l < L; ++l) {
        int want = scheduled ? sched.active_count_for_line(l, model.size()) : fixed;
        if ((int)current.size() != want) {
            current.clear();
            for (int d = 0; d < want; ++d) current.push_back(d);
            stream.set_active(current);
        }
        std::copy(noisy.data() + (int64_t)l * N * B, noisy.data() + (int64_t)(l + 1) * N * B,
                  line.data());
        auto res = stream.step(line, xh);
        std::copy(xh.data(), xh.data() + xh.numel(), out.data() + (int64_t)l * N * B);
        rep.fault_events += (int64_t)res.events.size();
        if (res.fallback) ++rep.fallback_lines;
        for (auto& e : res.events) rep.events.push_back(e);
    }
    rep.lines = L;
    return rep;
}

// file -> file, reading one line at a time
inline DenoiseRunReport denoise_file(MixtureParams& model, const std::string& in_path,
                                     const std::string& out_path, const DenoiseRunOptions& opt) {
    if (opt.fault_prob > 0.0) {
        FaultSpec spec;
        spec.probability = opt.fault_prob;
        spec.seed = opt.fault_seed;
        for (size_t d = 0; d < model.denoisers.size(); ++d) {
            FaultSpec s = spec;
            s.seed = spec.seed ^ (0x9e3779b97f4a7c15ull * (d + 1));
            inject(model.denoisers[d], s);
        }
    }
    CubeLineReader reader(in_path);
    const CubeHeader& hd = reader.header();
    if (hd.bands != model.bands()) fail("denoise: cube bands do not match the mixture");

    MixtureStreamOptions sopt;
    sopt.threads = opt.threads;
    sopt.filter_faults = opt.filter_faults;
    sopt.tau = opt.tau;
    MixtureStream stream(model, hd.columns, sopt);

    BudgetSchedule sched;
    bool scheduled = false;
    if (!opt.budget_path.empty()) {
        sched = BudgetSchedule::load(opt.budget_path);
        scheduled = true;
    }
    int fixed = opt.active > 0 ? std::min(opt.active, model.size()) : model.size();

    Tensor out({hd.lines, hd.columns, hd.bands});
    Tensor line, xh;
    DenoiseRunReport rep;
    std::vector<int> current = stream.active();
    int64_t l = 0;
    while (reader.next(line)) {
        if (reader.max_buffered_lines() > 1) fail("denoise: reader buffered more than one line");
        int want = scheduled ? sched.active_count_for_line(l, model.size()) : fixed;
        if ((int)current.size() != want) {
            current.clear();
            for (int d = 0; d < want; ++d) current.push_back(d);
            stream.set_active(current);
        }
        auto res = stream.step(line, xh);
        std::copy(xh.data(), xh.data() + xh.numel(),
                  out.data() + l * (int64_t)hd.columns * hd.bands);
        rep.fault_events += (int64_t)res.events.size();
        if (res.fallback) ++rep.fallback_lines;
        for (auto& e : res.events) rep.events.push_back(e);
        ++l;
    }
    rep.lines = l;
    write_cube(out_path, out);
    if (!opt.fault_log_path.empty()) {
        std::ofstream os(opt.fault_log_path);
        if (!os) fail("cannot write fault log: " + opt.fault_log_path);
        for (const auto& e : rep.events) os << fault_event_str(e) << "\n";
    }
    return rep;
}

// evaluation: denoise a noisy cube with the first n_active members and score
// against the clean cube
inline double mixture_psnr(MixtureParams& model, const Tensor& clean, const Tensor& noisy,
                           int n_active, std::vector<double>* per_line = nullptr) {
    Tensor out;
    DenoiseRunOptions opt;
    opt.active = n_active;
    denoise_cube(model, noisy, out, opt);
    if (per_line) {
        per_line->clear();
        int L = clean.dim(0);
        int64_t stride = clean.numel() / L;
        for (int l = 0; l < L; ++l) {
            double mse = 0.0;
            for (int64_t i = 0; i < stride; ++i) {
                double d = out[(int64_t)l * stride + i] - clean[(int64_t)l * stride + i];
                mse += d * d;
            }
            mse /= (double)stride;
            per_line->push_back(mse == 0.0 ? std::numeric_limits<double>::infinity()
                                           : 10.0 * std::log10(1.0 / mse));
        }
    }
    return psnr(out, clean);
}

// evaluate a specific member subset (used by the power studies)
inline double mixture_psnr_subset(MixtureParams& model, const Tensor& clean,
                                  const Tensor& noisy, const std::vector<int>& subset) {
    int L = noisy.dim(0), N = noisy.dim(1), B = noisy.dim(2);
    MixtureStream stream(model, N);
    stream.set_active(subset);
    Tensor out({L, N, B}), line({1, N, B}), xh;
    for (int l = 0; l < L; ++l) {
        std::copy(noisy.data() + (int64_t)l * N * B, noisy.data() + (int64_t)(l + 1) * N * B,
                  line.data());
        stream.step(line, xh);
        std::copy(xh.data(), xh.data() + xh.numel(), out.data() + (int64_t)l * N * B);
    }
    return psnr(out, clean);
}

// ---------------------------------------------------------------------------
// benchmark harness
// ---------------------------------------------------------------------------

struct BenchReport {
    int lines = 0, cols = 0, bands = 0, d_mix = 0;
    double mean_ms = 0.0, p95_ms = 0.0;
    size_t state_bytes_line10 = 0, state_bytes_last = 0;
    long peak_rss_kb = 0;
    double reference_ms = 4.34;  // PRISMA line acquisition time
    bool real_time = false;

    std::string to_string() const {
        std::ostringstream os;
        os.precision(4);
        os << "bench: " << d_mix << " denoisers, line 1 x " << cols << " x " << bands << ", "
           << lines << " lines\n"
           << "  per-line latency: mean " << mean_ms << " ms, p95 " << p95_ms << " ms\n"
           << "  line acquisition reference: " << reference_ms << " ms -> "
           << (real_time ? "real-time capable" : "NOT real-time") << " (informational)\n"
           << "  stream state bytes @ line 10: " << state_bytes_line10 << ", @ last line: "
           << state_bytes_last
           << (state_bytes_line10 == state_bytes_last ? " (constant)" : " (VARIES)") << "\n"
           << "  peak process RSS: " << peak_rss_kb << " kB\n";
        return os.str();
    }
};

inline BenchReport bench_mixture(MixtureParams& model, int cols, int bands, int lines,
                                 int warmup = 2, int threads = 1) {
    if (bands != model.bands()) fail("bench: band count does not match the mixture");
    MixtureStreamOptions opt;
    opt.threads = threads;
    MixtureStream stream(model, cols, opt);
    Rng rng(4242);
    Tensor line({1, cols, bands}), xh;
    std::vector<double> ms;
    BenchReport rep;
    rep.lines = lines;
    rep.cols = cols;
    rep.bands = bands;
    rep.d_mix = model.size();
    for (int l = 0; l < warmup + lines; ++l) {
        for (int64_t i = 0; i < line.numel(); ++i) line[i] = rng.uniform(0.0, 1.0);
        auto t0 = std::chrono::steady_clock::now();
        stream.step(line, xh);
        auto t1 = std::chrono::steady_clock::now();
        if (l >= warmup)
            ms.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
        int64_t consumed = l + 1;
        if (consumed == 10) rep.state_bytes_line10 = stream.state_serialized_size();
    }
    rep.state_bytes_last = stream.state_serialized_size();
    if (rep.state_bytes_line10 == 0) rep.state_bytes_line10 = rep.state_bytes_last;
    std::sort(ms.begin(), ms.end());
    double total = 0.0;
    for (double v : ms) total += v;
    rep.mean_ms = total / (double)ms.size();
    rep.p95_ms = ms[(size_t)std::min((double)ms.size() - 1.0, std::ceil(0.95 * ms.size()) - 1.0)];
    rep.real_time = rep.mean_ms <= rep.reference_ms;
    rusage ru{};
    getrusage(RUSAGE_SELF, &ru);
    rep.peak_rss_kb = ru.ru_maxrss;
    return rep;
}

// ---------------------------------------------------------------------------
// fault study (variance distributions and detection quality)
// ---------------------------------------------------------------------------

struct VarianceStudy {
    double probability = 0.0;
    std::vector<double> faulty, nominal;  // per (trial, denoiser, line) variances
    double auc = 0.0;
};

// Random Bernoulli injection at the given per-weight probability, repeated
// over trials; collects diagonal-variance samples labelled by whether the
// denoiser actually carries a fault.
inline VarianceStudy variance_study(MixtureParams& model, const Tensor& noisy_eval,
                                    double probability, int trials, uint64_t seed) {
    VarianceStudy st;
    st.probability = probability;
    int L = noisy_eval.dim(0), N = noisy_eval.dim(1), B = noisy_eval.dim(2);
    if (B != model.bands()) fail("variance study: cube bands mismatch");
    for (int trial = 0; trial < trials; ++trial) {
        std::vector<FaultManifest> manifests;
        std::vector<bool> has_fault((size_t)model.size(), false);
        for (int d = 0; d < model.size(); ++d) {
            FaultSpec spec;
            spec.probability = probability;
            spec.seed = seed ^ (0x9e3779b97f4a7c15ull * (uint64_t)(trial * model.size() + d + 1));
            manifests.push_back(inject(model.denoisers[(size_t)d], spec));
            has_fault[(size_t)d] = !manifests.back().records.empty();
        }
        MixtureStreamOptions opt;
        opt.filter_faults = false;
        MixtureStream stream(model, N, opt);
        Tensor line({1, N, B}), xh;
        for (int l = 0; l < L; ++l) {
            std::copy(noisy_eval.data() + (int64_t)l * N * B,
                      noisy_eval.data() + (int64_t)(l + 1) * N * B, line.data());
            auto res = stream.step(line, xh);
            for (int d = 0; d < model.size(); ++d) {
                double v = res.report.variance[(size_t)d];
                if (std::isinf(v)) v = 1e12;  // non-finite features: off the charts
                (has_fault[(size_t)d] ? st.faulty : st.nominal).push_back(v);
            }
        }
        for (int d = model.size() - 1; d >= 0; --d)
            revert(model.denoisers[(size_t)d], manifests[(size_t)d]);
    }
    if (!st.faulty.empty() && !st.nominal.empty())
        st.auc = threshold_auc(st.faulty, st.nominal);
    return st;
}

struct DetectionRates {
    double tpr = 0.0, fpr = 0.0;
    int faulty_total = 0, nominal_total = 0;
};

// Single large faults, one per trial, measured at threshold tau.
inline DetectionRates detection_rates(MixtureParams& model, const Tensor& noisy_eval,
                                      int trials, double min_magnitude_sigmas, double tau,
                                      uint64_t seed) {
    DetectionRates rates;
    int L = noisy_eval.dim(0), N = noisy_eval.dim(1), B = noisy_eval.dim(2);
    int tp = 0, fp = 0;
    for (int trial = 0; trial < trials; ++trial) {
        Rng trng(seed + (uint64_t)trial * 977);
        int victim = trng.uniform_int(model.size());
        double sigma = model.denoisers[(size_t)victim].fault_surface_std();
        FaultManifest m = inject_single(model.denoisers[(size_t)victim], FaultModel::BitflipMsb,
                                        trng.next_u64(), min_magnitude_sigmas * sigma);
        MixtureStreamOptions opt;
        opt.filter_faults = false;
        opt.tau = tau;
        MixtureStream stream(model, N, opt);
        Tensor line({1, N, B}), xh;
        for (int l = 0; l < L; ++l) {
            std::copy(noisy_eval.data() + (int64_t)l * N * B,
                      noisy_eval.data() + (int64_t)(l + 1) * N * B, line.data());
            auto res = stream.step(line, xh);
            for (int d = 0; d < model.size(); ++d) {
                bool flagged = res.report.faulty[(size_t)d];
                if (d == victim) {
                    ++rates.faulty_total;
                    if (flagged) ++tp;
                } else {
                    ++rates.nominal_total;
                    if (flagged) ++fp;
                }
            }
        }
        revert(model.denoisers[(size_t)victim], m);
    }
    rates.tpr = rates.faulty_total ? (double)tp / rates.faulty_total : 0.0;
    rates.fpr = rates.nominal_total ? (double)fp / rates.nominal_total : 0.0;
    return rates;
}

}  // namespace pushbroom
