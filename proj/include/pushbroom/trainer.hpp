// Toy-scale training: patch sampling with noise synthesized on the fly,
// subset-sampled mixture optimization under the power factor lambda, Adam
// with the staged halving schedule, and bitwise-resumable checkpoints.
#pragma once

#include "pushbroom/aggregator.hpp"
#include "pushbroom/noise.hpp"
#include "pushbroom/power.hpp"

namespace pushbroom {

// lr0 until epoch 30, then halved there and at every subsequent 100 epochs
inline double lr_at_epoch(double lr0, int64_t epoch) {
    if (epoch < 30) return lr0;
    return lr0 * std::pow(0.5, 1.0 + (double)((epoch - 30) / 100));
}

struct TrainConfig {
    int patch = 64;
    int steps = 2000;
    int steps_per_epoch = 100;
    double lr0 = 5e-4;
    double beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8;
    double lambda = 0.0;
    std::string loss = "mse";  // mse | l1
    uint64_t seed = 1;
    NoiseSpec noise;

    static TrainConfig from_config(const Config& c) {
        TrainConfig t;
        t.patch = c.get_int("patch", t.patch);
        t.steps = c.get_int("steps", t.steps);
        t.steps_per_epoch = c.get_int("steps_per_epoch", t.steps_per_epoch);
        t.lr0 = c.get_f64("lr0", t.lr0);
        t.beta1 = c.get_f64("beta1", t.beta1);
        t.beta2 = c.get_f64("beta2", t.beta2);
        t.adam_eps = c.get_f64("adam_eps", t.adam_eps);
        t.lambda = c.get_f64("lambda", t.lambda);
        t.loss = c.get_str("loss", t.loss);
        if (t.loss != "mse" && t.loss != "l1") fail("train config: loss must be mse or l1");
        t.seed = c.get_u64("seed", t.seed);
        t.noise = NoiseSpec::from_config(c);
        return t;
    }

    Config to_config() const {
        Config c = noise.to_config();
        c.set_int("patch", patch);
        c.set_int("steps", steps);
        c.set_int("steps_per_epoch", steps_per_epoch);
        c.set_f64("lr0", lr0);
        c.set_f64("beta1", beta1);
        c.set_f64("beta2", beta2);
        c.set_f64("adam_eps", adam_eps);
        c.set_f64("lambda", lambda);
        c.set("loss", loss);
        c.set_int("train_seed", (int64_t)seed);
        c.set_int("seed", (int64_t)seed);
        return c;
    }
};

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

struct AdamMoments {
    std::vector<Tensor> m, v;
    int64_t t = 0;

    void ensure(const std::vector<Tensor*>& params) {
        if (m.size() == params.size()) return;
        m.clear();
        v.clear();
        for (Tensor* p : params) {
            m.push_back(Tensor(p->shape()));
            v.push_back(Tensor(p->shape()));
        }
    }

    void serialize(BinWriter& w) const {
        w.i64(t);
        w.u32((uint32_t)m.size());
        for (const auto& x : m) w.tensor(x);
        for (const auto& x : v) w.tensor(x);
    }
    static AdamMoments deserialize(BinReader& r) {
        AdamMoments a;
        a.t = r.i64();
        uint32_t n = r.u32();
        for (uint32_t i = 0; i < n; ++i) a.m.push_back(r.tensor());
        for (uint32_t i = 0; i < n; ++i) a.v.push_back(r.tensor());
        return a;
    }
};

inline void adam_step(const std::vector<Tensor*>& params,
                      const std::vector<const Tensor*>& grads, AdamMoments& st, double lr,
                      double b1, double b2, double eps) {
    st.ensure(params);
    st.t += 1;
    double c1 = 1.0 - std::pow(b1, (double)st.t);
    double c2 = 1.0 - std::pow(b2, (double)st.t);
    for (size_t i = 0; i < params.size(); ++i) {
        Tensor& p = *params[i];
        const Tensor& g = *grads[i];
        Tensor &m = st.m[i], &v = st.v[i];
        for (int64_t j = 0; j < p.numel(); ++j) {
            m[j] = b1 * m[j] + (1.0 - b1) * g[j];
            v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
            p[j] -= lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + eps);
        }
    }
}

// one visitable parameter struct registered on a graph
struct GroupVars {
    std::vector<Tensor*> tensors;
    std::vector<Var> vars;
};

template <typename P>
GroupVars register_group(Graph& g, VarMap& vm, P& params, bool requires_grad) {
    GroupVars gv;
    params.visit_params("", [&](const std::string&, Tensor& t, ParamKind) {
        Var v = g.leaf_external(&t, requires_grad);
        vm.add(t, v);
        gv.tensors.push_back(&t);
        gv.vars.push_back(v);
    });
    return gv;
}

inline void apply_adam(Graph& g, const GroupVars& gv, AdamMoments& st, double lr,
                       const TrainConfig& cfg) {
    std::vector<const Tensor*> grads;
    for (Var v : gv.vars) grads.push_back(&g.grad(v));
    adam_step(gv.tensors, grads, st, lr, cfg.beta1, cfg.beta2, cfg.adam_eps);
}

// ---------------------------------------------------------------------------
// data sampling
// ---------------------------------------------------------------------------

struct PatchPair {
    Tensor clean, noisy;  // [patch x patch x bands]
};

inline PatchPair sample_patch(const std::vector<Tensor>& cubes, int patch,
                              const NoiseSpec& noise, Rng& rng) {
    if (cubes.empty()) fail("trainer: no training cubes");
    const Tensor& cube = cubes[(size_t)rng.uniform_int((int)cubes.size())];
    int L = cube.dim(0), C = cube.dim(1), B = cube.dim(2);
    if (L < patch || C < patch)
        fail("trainer: cube " + shape_str(cube.shape()) + " smaller than patch " +
             std::to_string(patch));
    int l0 = rng.uniform_int(L - patch + 1);
    int c0 = rng.uniform_int(C - patch + 1);
    PatchPair p;
    p.clean = Tensor({patch, patch, B});
    for (int l = 0; l < patch; ++l)
        for (int c = 0; c < patch; ++c)
            for (int b = 0; b < B; ++b) p.clean.at(l, c, b) = cube.at(l0 + l, c0 + c, b);
    NoiseSpec ns = noise;
    ns.seed = rng.next_u64();
    p.noisy = add_noise(p.clean, ns);
    return p;
}

// ---------------------------------------------------------------------------
// mixture container
// ---------------------------------------------------------------------------

struct MixtureParams {
    std::vector<DenoiserParams> denoisers;
    AggregatorParams aggregator;
    double lambda = 0.0;  // power factor the mixture was trained with

    int size() const { return (int)denoisers.size(); }
    int features() const { return aggregator.features; }
    int bands() const { return aggregator.bands; }

    void serialize(BinWriter& w) {
        w.magic("PBMX");
        w.u32(1);
        w.u32((uint32_t)denoisers.size());
        w.f64(lambda);
        w.f64(aggregator.tau);
        w.u32((uint32_t)aggregator.features);
        w.u32((uint32_t)aggregator.bands);
        for (auto& d : denoisers) d.serialize(w);
        uint32_t count = 0;
        aggregator.visit_params("", [&](const std::string&, Tensor&, ParamKind) { ++count; });
        w.u32(count);
        aggregator.visit_params("", [&](const std::string& n, Tensor& t, ParamKind) {
            w.str(n);
            w.tensor(t);
        });
    }

    static MixtureParams deserialize(BinReader& r) {
        r.expect_magic("PBMX", "mixture params");
        uint32_t ver = r.u32();
        if (ver != 1) fail("mixture params: unsupported version " + std::to_string(ver));
        MixtureParams m;
        uint32_t d = r.u32();
        m.lambda = r.f64();
        double tau = r.f64();
        uint32_t features = r.u32();
        uint32_t bands = r.u32();
        for (uint32_t i = 0; i < d; ++i) m.denoisers.push_back(DenoiserParams::deserialize(r));
        m.aggregator = AggregatorParams::make((int)features, (int)bands, 0, tau);
        uint32_t count = r.u32();
        uint32_t seen = 0;
        m.aggregator.visit_params("", [&](const std::string& name, Tensor& t, ParamKind) {
            std::string n = r.str();
            if (n != name) fail("mixture params: aggregator layout mismatch at '" + n + "'");
            Tensor loaded = r.tensor();
            if (!loaded.same_shape(t)) fail("mixture params: aggregator shape mismatch");
            t = std::move(loaded);
            ++seen;
        });
        if (seen != count) fail("mixture params: aggregator parameter count mismatch");
        return m;
    }

    void save(const std::string& path) {
        auto os = open_out_binary(path);
        BinWriter w(os);
        serialize(w);
    }
    static MixtureParams load(const std::string& path) {
        auto is = open_in_binary(path);
        BinReader r(is);
        return deserialize(r);
    }
};

// ---------------------------------------------------------------------------
// pretraining one denoiser
// ---------------------------------------------------------------------------

struct PretrainResult {
    DenoiserParams params;
    std::vector<double> loss_curve;
};

// Independent pretraining with a temporary linear head (features -> bands)
// for noise regression; the head is discarded afterwards.
inline PretrainResult pretrain_denoiser(const DenoiserConfig& dcfg, const TrainConfig& tcfg,
                                        const std::vector<Tensor>& cubes) {
    PretrainResult res{DenoiserParams::make(dcfg), {}};
    Rng head_rng(dcfg.seed ^ 0x5ead5ead5ead5eadull);
    LinearLayer head = LinearLayer::make(dcfg.features, dcfg.bands, head_rng);
    struct HeadHolder {
        LinearLayer* h;
        void visit_params(const std::string& p, const ParamVisitor& fn) {
            h->visit_params(p + "head", fn);
        }
    } holder{&head};

    Rng rng = Rng(tcfg.seed).fork(dcfg.seed);
    AdamMoments mom_d, mom_h;
    for (int step = 0; step < tcfg.steps; ++step) {
        PatchPair batch = sample_patch(cubes, tcfg.patch, tcfg.noise, rng);
        Graph g;
        VarMap vm;
        GroupVars gd = register_group(g, vm, res.params, true);
        GroupVars gh = register_group(g, vm, holder, true);
        Var y = g.constant(batch.noisy);
        Var h = denoiser_forward(g, vm, res.params, y);
        Var n_hat = head.forward(g, vm, h);
        Var x_hat = sub(g, y, n_hat);
        Var clean = g.constant(batch.clean);
        Var loss = tcfg.loss == "l1" ? l1_loss(g, x_hat, clean) : mse_loss(g, x_hat, clean);
        double lv = g.val(loss)[0];
        if (!std::isfinite(lv))
            fail("pretrain diverged at step " + std::to_string(step) + " (loss " +
                 std::to_string(lv) + ", seed " + std::to_string(dcfg.seed) + ")");
        res.loss_curve.push_back(lv);
        g.backward(loss);
        double lr = lr_at_epoch(tcfg.lr0, step / tcfg.steps_per_epoch);
        apply_adam(g, gd, mom_d, lr, tcfg);
        apply_adam(g, gh, mom_h, lr, tcfg);
    }
    return res;
}

// ---------------------------------------------------------------------------
// joint mixture training with subset sampling
// ---------------------------------------------------------------------------

struct TrainLogEntry {
    int64_t step = 0;
    double loss = 0.0;
    int active = 0;
};

class MixtureTrainer {
public:
    MixtureTrainer(MixtureParams model, TrainConfig cfg, std::vector<Tensor> cubes)
        : model_(std::move(model)),
          cfg_(cfg),
          cubes_(std::move(cubes)),
          rng_(cfg.seed),
          den_moments_((size_t)model_.size()) {}

    MixtureParams& model() { return model_; }
    int64_t step_count() const { return step_; }
    const std::vector<TrainLogEntry>& log() const { return log_; }

    // one minibatch: sample a subset, forward through the active members and
    // the shared head, step Adam on exactly those groups
    double step_once() {
        PowerPolicy pol;
        pol.lambda = cfg_.lambda;
        pol.d_mix = model_.size();
        std::vector<int> subset = sample_subset(pol, rng_);
        PatchPair batch = sample_patch(cubes_, cfg_.patch, cfg_.noise, rng_);

        Graph g;
        VarMap vm;
        std::vector<GroupVars> groups;
        for (int d : subset) groups.push_back(register_group(g, vm, model_.denoisers[(size_t)d], true));
        GroupVars ga = register_group(g, vm, model_.aggregator, true);

        Var y = g.constant(batch.noisy);
        std::vector<Var> feats;
        for (size_t i = 0; i < subset.size(); ++i)
            feats.push_back(denoiser_forward(g, vm, model_.denoisers[(size_t)subset[i]], y));
        Var x_hat = mixture_head(g, vm, model_.aggregator, feats, y);
        Var clean = g.constant(batch.clean);
        Var loss = cfg_.loss == "l1" ? l1_loss(g, x_hat, clean) : mse_loss(g, x_hat, clean);
        double lv = g.val(loss)[0];
        if (!std::isfinite(lv))
            fail("mixture training diverged at step " + std::to_string(step_) + " (loss " +
                 std::to_string(lv) + ")");
        g.backward(loss);

        double lr = lr_at_epoch(cfg_.lr0, step_ / cfg_.steps_per_epoch);
        for (size_t i = 0; i < subset.size(); ++i)
            apply_adam(g, groups[i], den_moments_[(size_t)subset[i]], lr, cfg_);
        apply_adam(g, ga, agg_moments_, lr, cfg_);

        log_.push_back(TrainLogEntry{step_, lv, (int)subset.size()});
        ++step_;
        return lv;
    }

    void run(int steps) {
        for (int i = 0; i < steps; ++i) step_once();
    }

    // Full-state capture: params, optimizer moments, rng, step counter.
    // Resuming reproduces the next steps bitwise.
    void save_checkpoint(const std::string& path) {
        auto os = open_out_binary(path);
        BinWriter w(os);
        w.magic("PBCK");
        w.u32(1);
        w.str(cfg_.to_config().to_string());
        model_.serialize(w);
        w.u32((uint32_t)den_moments_.size());
        for (const auto& m : den_moments_) m.serialize(w);
        agg_moments_.serialize(w);
        w.u64(rng_.state());
        w.i64(step_);
    }

    static MixtureTrainer load_checkpoint(const std::string& path, std::vector<Tensor> cubes) {
        auto is = open_in_binary(path);
        BinReader r(is);
        r.expect_magic("PBCK", "trainer checkpoint");
        uint32_t ver = r.u32();
        if (ver != 1) fail("trainer checkpoint: unsupported version " + std::to_string(ver));
        TrainConfig cfg = TrainConfig::from_config(Config::parse_string(r.str()));
        MixtureParams model = MixtureParams::deserialize(r);
        MixtureTrainer t(std::move(model), cfg, std::move(cubes));
        uint32_t nd = r.u32();
        t.den_moments_.clear();
        for (uint32_t i = 0; i < nd; ++i) t.den_moments_.push_back(AdamMoments::deserialize(r));
        t.agg_moments_ = AdamMoments::deserialize(r);
        t.rng_.set_state(r.u64());
        t.step_ = r.i64();
        return t;
    }

private:
    MixtureParams model_;
    TrainConfig cfg_;
    std::vector<Tensor> cubes_;
    Rng rng_;
    std::vector<AdamMoments> den_moments_;
    AdamMoments agg_moments_;
    int64_t step_ = 0;
    std::vector<TrainLogEntry> log_;
};

// pretrain every member (different seeds), then train the mixture jointly
inline MixtureParams train_mixture_workflow(const DenoiserConfig& base, int d_mix,
                                            const std::vector<uint64_t>& seeds,
                                            const TrainConfig& pre_cfg,
                                            const TrainConfig& joint_cfg, double tau,
                                            const std::vector<Tensor>& cubes,
                                            std::vector<TrainLogEntry>* log = nullptr) {
    if ((int)seeds.size() < d_mix) fail("train workflow: need one seed per denoiser");
    MixtureParams mix;
    for (int d = 0; d < d_mix; ++d) {
        DenoiserConfig c = base;
        c.seed = seeds[(size_t)d];
        mix.denoisers.push_back(pretrain_denoiser(c, pre_cfg, cubes).params);
    }
    mix.aggregator =
        AggregatorParams::make(base.features, base.bands, joint_cfg.seed ^ 0xa66a66ull, tau);
    mix.lambda = joint_cfg.lambda;
    MixtureTrainer trainer(std::move(mix), joint_cfg, cubes);
    trainer.run(joint_cfg.steps);
    if (log) *log = trainer.log();
    return std::move(trainer.model());
}

}  // namespace pushbroom
