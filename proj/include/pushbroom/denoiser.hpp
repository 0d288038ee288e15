// One line denoiser: band projection, shallow refinement, a 1-D U-Net of
// DASC blocks with stride-2 down/up sampling and additive skips, and
// residual memory blocks at the first and last full-resolution stages.
// Consumes noisy lines [1 x N_c x N_b], emits feature lines [1 x N_c x F].
#pragma once

#include "pushbroom/config.hpp"
#include "pushbroom/ssm.hpp"

namespace pushbroom {

struct DenoiserConfig {
    int bands = 8;        // N_b
    int features = 16;    // F
    int expansion = 1;    // E
    int state_size = 16;  // S
    int conv_kernel = 4;  // K
    Backend backend = Backend::Mamba;
    std::vector<int> width_mults = {1, 2, 4};
    std::vector<int> blocks_per_level = {2, 2, 2};
    int ca_reduction = 4;
    int dasc_kernel = 3;
    bool ssm_gate = true;
    bool ssm_prenorm = true;
    bool ssm_silent_init = true;  // memory branch output starts at zero
    uint64_t seed = 1;

    int levels() const { return (int)width_mults.size(); }
    int downsample_factor() const { return 1 << (levels() - 1); }
    int width(int level) const { return features * width_mults[(size_t)level]; }

    void validate() const {
        if (bands < 1 || features < 1 || expansion < 1 || state_size < 1 || conv_kernel < 1)
            fail("denoiser config: extents must be positive");
        if (width_mults.empty() || width_mults.size() != blocks_per_level.size())
            fail("denoiser config: width_mults and blocks_per_level must have equal length");
        for (int b : blocks_per_level)
            if (b < 1) fail("denoiser config: each level needs at least one block");
        if (width_mults[0] != 1) fail("denoiser config: first width multiplier must be 1");
    }

    static DenoiserConfig from_config(const Config& c) {
        DenoiserConfig d;
        d.bands = c.get_int("bands", d.bands);
        d.features = c.get_int("features", d.features);
        d.expansion = c.get_int("expansion", d.expansion);
        d.state_size = c.get_int("state_size", d.state_size);
        d.conv_kernel = c.get_int("conv_kernel", d.conv_kernel);
        d.backend = backend_from_name(c.get_str("backend", "mamba"));
        d.width_mults = c.get_ints("width_mults", d.width_mults);
        d.blocks_per_level = c.get_ints("blocks_per_level", d.blocks_per_level);
        d.ca_reduction = c.get_int("ca_reduction", d.ca_reduction);
        d.dasc_kernel = c.get_int("dasc_kernel", d.dasc_kernel);
        d.ssm_gate = c.get_bool("ssm_gate", d.ssm_gate);
        d.ssm_prenorm = c.get_bool("ssm_prenorm", d.ssm_prenorm);
        d.ssm_silent_init = c.get_bool("ssm_silent_init", d.ssm_silent_init);
        d.seed = c.get_u64("seed", d.seed);
        d.validate();
        return d;
    }

    Config to_config() const {
        Config c;
        c.set_int("bands", bands);
        c.set_int("features", features);
        c.set_int("expansion", expansion);
        c.set_int("state_size", state_size);
        c.set_int("conv_kernel", conv_kernel);
        c.set("backend", backend_name(backend));
        std::string wm, bp;
        for (size_t i = 0; i < width_mults.size(); ++i) {
            wm += (i ? "," : "") + std::to_string(width_mults[i]);
            bp += (i ? "," : "") + std::to_string(blocks_per_level[i]);
        }
        c.set("width_mults", wm);
        c.set("blocks_per_level", bp);
        c.set_int("ca_reduction", ca_reduction);
        c.set_int("dasc_kernel", dasc_kernel);
        c.set("ssm_gate", ssm_gate ? "true" : "false");
        c.set("ssm_prenorm", ssm_prenorm ? "true" : "false");
        c.set("ssm_silent_init", ssm_silent_init ? "true" : "false");
        c.set_int("seed", (int64_t)seed);
        return c;
    }
};

struct DenoiserParams {
    DenoiserConfig cfg;
    Conv1dLayer band_proj;  // N_b -> F, k = 3
    LayerNormLayer shallow_ln;
    ChannelAttention shallow_ca;
    std::vector<std::vector<DascBlock>> enc;  // per level above the bottom
    std::vector<Conv1dLayer> down;
    std::vector<DascBlock> bottom;
    std::vector<Conv1dLayer> up;
    std::vector<std::vector<DascBlock>> dec;
    PassmBlock mem_first, mem_last;  // the two stream-stateful blocks

    static DenoiserParams make(const DenoiserConfig& cfg) {
        cfg.validate();
        Rng rng(cfg.seed);
        DenoiserParams p;
        p.cfg = cfg;
        int F = cfg.features;
        p.band_proj = Conv1dLayer::make(cfg.bands, F, 3, 1, rng);
        p.shallow_ln = LayerNormLayer::make(F);
        p.shallow_ca = ChannelAttention::make(F, cfg.ca_reduction, rng);
        int L = cfg.levels();
        for (int i = 0; i + 1 < L; ++i) {
            std::vector<DascBlock> blocks;
            for (int j = 0; j < cfg.blocks_per_level[(size_t)i]; ++j)
                blocks.push_back(DascBlock::make(cfg.width(i), cfg.dasc_kernel, rng));
            p.enc.push_back(std::move(blocks));
            p.down.push_back(Conv1dLayer::make(cfg.width(i), cfg.width(i + 1), 3, 2, rng));
        }
        for (int j = 0; j < cfg.blocks_per_level.back(); ++j)
            p.bottom.push_back(DascBlock::make(cfg.width(L - 1), cfg.dasc_kernel, rng));
        for (int i = L - 2; i >= 0; --i) {
            p.up.push_back(Conv1dLayer::make_transpose(cfg.width(i + 1), cfg.width(i), rng));
            std::vector<DascBlock> blocks;
            for (int j = 0; j < cfg.blocks_per_level[(size_t)i]; ++j)
                blocks.push_back(DascBlock::make(cfg.width(i), cfg.dasc_kernel, rng));
            p.dec.push_back(std::move(blocks));
        }
        p.mem_first = PassmBlock::make(F, cfg.expansion, cfg.state_size, cfg.conv_kernel,
                                       cfg.backend, cfg.ssm_gate, cfg.ssm_prenorm, rng,
                                       cfg.ssm_silent_init);
        p.mem_last = PassmBlock::make(F, cfg.expansion, cfg.state_size, cfg.conv_kernel,
                                      cfg.backend, cfg.ssm_gate, cfg.ssm_prenorm, rng,
                                      cfg.ssm_silent_init);
        return p;
    }

    void visit_params(const std::string& pre, const ParamVisitor& fn) {
        band_proj.visit_params(pre + "band_proj", fn);
        shallow_ln.visit_params(pre + "shallow_ln", fn);
        shallow_ca.visit_params(pre + "shallow_ca", fn);
        for (size_t i = 0; i < enc.size(); ++i) {
            for (size_t j = 0; j < enc[i].size(); ++j)
                enc[i][j].visit_params(pre + "enc" + std::to_string(i) + "." + std::to_string(j),
                                       fn);
            down[i].visit_params(pre + "down" + std::to_string(i), fn);
        }
        for (size_t j = 0; j < bottom.size(); ++j)
            bottom[j].visit_params(pre + "bottom." + std::to_string(j), fn);
        for (size_t i = 0; i < up.size(); ++i) {
            up[i].visit_params(pre + "up" + std::to_string(i), fn);
            for (size_t j = 0; j < dec[i].size(); ++j)
                dec[i][j].visit_params(pre + "dec" + std::to_string(i) + "." + std::to_string(j),
                                       fn);
        }
        mem_first.visit_params(pre + "mem_first", fn);
        mem_last.visit_params(pre + "mem_last", fn);
    }

    int64_t param_count() {
        int64_t n = 0;
        visit_params("", [&](const std::string&, Tensor& t, ParamKind) { n += t.numel(); });
        return n;
    }

    // The flat fault-injection surface: every scalar of every conv / linear
    // kernel, in visitation order. The index space is a bijection onto those
    // scalars.
    std::vector<Tensor*> fault_surface() {
        std::vector<Tensor*> out;
        visit_params("", [&](const std::string&, Tensor& t, ParamKind k) {
            if (is_fault_surface(k)) out.push_back(&t);
        });
        return out;
    }
    int64_t fault_surface_size() {
        int64_t n = 0;
        for (Tensor* t : fault_surface()) n += t->numel();
        return n;
    }
    double fault_surface_std() {
        double sum = 0.0, sum2 = 0.0;
        int64_t n = 0;
        for (Tensor* t : fault_surface())
            for (int64_t i = 0; i < t->numel(); ++i) {
                sum += (*t)[i];
                sum2 += (*t)[i] * (*t)[i];
                ++n;
            }
        double mu = sum / (double)n;
        return std::sqrt(std::max(0.0, sum2 / (double)n - mu * mu));
    }

    // analytic multiply-add count per across-track pixel of one line
    double flops_per_pixel() const {
        double fl = band_proj.flops_per_pixel() + shallow_ln.flops_per_pixel() +
                    2.0 * cfg.features + shallow_ca.flops_per_pixel();
        double frac = 1.0;
        for (size_t i = 0; i < enc.size(); ++i) {
            for (const auto& b : enc[i]) fl += b.flops_per_pixel() * frac;
            fl += down[i].flops_per_pixel() * frac / 2.0;  // runs at the output rate
            frac /= 2.0;
        }
        for (const auto& b : bottom) fl += b.flops_per_pixel() * frac;
        for (size_t i = 0; i < up.size(); ++i) {
            fl += up[i].flops_per_pixel() * frac * 2.0;  // output rate doubles
            frac *= 2.0;
            fl += (double)up[i].out_channels() * frac;  // skip addition
            for (const auto& b : dec[i]) fl += b.flops_per_pixel() * frac;
        }
        fl += mem_first.flops_per_pixel() + mem_last.flops_per_pixel();
        return fl;
    }

    void serialize(BinWriter& w) {
        w.magic("PBDN");
        w.u32(1);
        w.str(to_cfg_string());
        uint32_t count = 0;
        visit_params("", [&](const std::string&, Tensor&, ParamKind) { ++count; });
        w.u32(count);
        visit_params("", [&](const std::string& name, Tensor& t, ParamKind) {
            w.str(name);
            w.tensor(t);
        });
    }

    static DenoiserParams deserialize(BinReader& r) {
        r.expect_magic("PBDN", "denoiser params");
        uint32_t ver = r.u32();
        if (ver != 1) fail("denoiser params: unsupported version " + std::to_string(ver));
        DenoiserConfig cfg = DenoiserConfig::from_config(Config::parse_string(r.str()));
        DenoiserParams p = make(cfg);
        uint32_t count = r.u32();
        uint32_t seen = 0;
        p.visit_params("", [&](const std::string& name, Tensor& t, ParamKind) {
            std::string n = r.str();
            if (n != name) fail("denoiser params: layout mismatch at '" + n + "'");
            Tensor loaded = r.tensor();
            if (!loaded.same_shape(t))
                fail("denoiser params: shape mismatch at '" + name + "'");
            t = std::move(loaded);
            ++seen;
        });
        if (seen != count) fail("denoiser params: parameter count mismatch");
        return p;
    }

    std::string to_cfg_string() const { return cfg.to_config().to_string(); }
};

// ---------------------------------------------------------------------------
// batch forward (training path)
// ---------------------------------------------------------------------------

// Whole-sequence forward on the tape; the memory blocks run as scans.
// y: [L x N_c x N_b] -> features [L x N_c x F].
inline Var denoiser_forward(Graph& g, const VarMap& vm, const DenoiserParams& p, Var y) {
    const Tensor& yt = g.val(y);
    check_3d("denoiser_forward", yt);
    if (yt.dim(2) != p.cfg.bands)
        fail("denoiser_forward: expected " + std::to_string(p.cfg.bands) + " bands, got " +
             std::to_string(yt.dim(2)));
    int N = yt.dim(1);
    int d = p.cfg.downsample_factor();
    if (N < 4) fail("denoiser_forward: need at least 4 pixels per line");
    int padded = (N + d - 1) / d * d;
    Var x = y;
    if (padded != N) x = pad(g, x, 1, 0, padded - N, PadMode::Reflect);

    x = p.band_proj.forward(g, vm, x);
    x = p.shallow_ln.forward(g, vm, x);
    x = silu(g, x);
    x = p.shallow_ca.forward(g, vm, x);

    std::vector<Var> skips;
    for (size_t i = 0; i < p.enc.size(); ++i) {
        for (size_t j = 0; j < p.enc[i].size(); ++j) {
            x = p.enc[i][j].forward(g, vm, x);
            if (i == 0 && j == 0) x = p.mem_first.scan(g, vm, x);
        }
        skips.push_back(x);
        x = p.down[i].forward(g, vm, x);
    }
    for (const auto& b : p.bottom) x = b.forward(g, vm, x);
    for (size_t i = 0; i < p.up.size(); ++i) {
        size_t level = p.up.size() - 1 - i;  // level this stage restores
        x = p.up[i].forward(g, vm, x);
        x = add(g, x, skips[level]);
        for (size_t j = 0; j < p.dec[i].size(); ++j) {
            x = p.dec[i][j].forward(g, vm, x);
            if (level == 0 && j + 1 == p.dec[i].size()) x = p.mem_last.scan(g, vm, x);
        }
    }
    if (padded != N) x = slice(g, x, 1, 0, N);
    return x;
}

// ---------------------------------------------------------------------------
// streaming forward (inference path)
// ---------------------------------------------------------------------------

// Advances one line at a time with constant carry-over state: the two
// memory-block StreamStates plus nothing else. Non-finite outputs are
// reported, not thrown (the mixture head filters suspected faults).
class DenoiserStream {
public:
    explicit DenoiserStream(DenoiserParams& params, int n_pixels)
        : p_(&params), n_raw_(n_pixels) {
        if (n_pixels < 4) fail("denoiser stream: need at least 4 pixels per line");
        int d = params.cfg.downsample_factor();
        n_pad_ = (n_pixels + d - 1) / d * d;
        st_first_ = params.mem_first.make_state(n_pad_);
        st_last_ = params.mem_last.make_state(n_pad_);
        g_.recording = false;
        g_.check_finite = false;
    }

    const DenoiserParams& params() const { return *p_; }
    int pixels() const { return n_raw_; }
    int64_t line_index() const { return st_first_.line_index; }

    StreamState& state_first() { return st_first_; }
    StreamState& state_last() { return st_last_; }
    size_t state_bytes() const { return st_first_.state_bytes() + st_last_.state_bytes(); }
    size_t state_serialized_size() const {
        return st_first_.serialized_size() + st_last_.serialized_size();
    }
    size_t last_line_peak_bytes() const { return peak_; }

    // one noisy line [1 x N_c x N_b] -> feature line [1 x N_c x F];
    // returns false when the output is non-finite (fault suspected)
    bool step(const Tensor& y_line, Tensor& h_out) {
        check_3d("denoiser_step", y_line);
        if (y_line.dim(0) != 1 || y_line.dim(1) != n_raw_ || y_line.dim(2) != p_->cfg.bands)
            fail("denoiser_step: line shape " + shape_str(y_line.shape()) + ", expected [1 x " +
                 std::to_string(n_raw_) + " x " + std::to_string(p_->cfg.bands) + "]");
        g_.reset();
        g_.reset_peak_bytes();
        VarMap vm = register_params(g_, *p_, false);
        Var x = g_.leaf_external(&y_line, false);
        if (n_pad_ != n_raw_) x = pad(g_, x, 1, 0, n_pad_ - n_raw_, PadMode::Reflect);

        x = p_->band_proj.forward(g_, vm, x);
        x = p_->shallow_ln.forward(g_, vm, x);
        x = silu(g_, x);
        x = p_->shallow_ca.forward(g_, vm, x);

        std::vector<Var> skips;
        for (size_t i = 0; i < p_->enc.size(); ++i) {
            for (size_t j = 0; j < p_->enc[i].size(); ++j) {
                x = p_->enc[i][j].forward(g_, vm, x);
                if (i == 0 && j == 0) x = mem_step(p_->mem_first, st_first_, work_first_, x);
            }
            skips.push_back(x);
            x = p_->down[i].forward(g_, vm, x);
        }
        for (const auto& b : p_->bottom) x = b.forward(g_, vm, x);
        for (size_t i = 0; i < p_->up.size(); ++i) {
            size_t level = p_->up.size() - 1 - i;
            x = p_->up[i].forward(g_, vm, x);
            x = add(g_, x, skips[level]);
            for (size_t j = 0; j < p_->dec[i].size(); ++j) {
                x = p_->dec[i][j].forward(g_, vm, x);
                if (level == 0 && j + 1 == p_->dec[i].size())
                    x = mem_step(p_->mem_last, st_last_, work_last_, x);
            }
        }
        const Tensor& full = g_.val(x);
        if (h_out.ndim() != 3 || h_out.dim(1) != n_raw_ || h_out.dim(2) != p_->cfg.features)
            h_out = Tensor({1, n_raw_, p_->cfg.features});
        if (n_pad_ != n_raw_) {
            slice_fwd(full, 1, 0, n_raw_, h_out);
        } else {
            h_out = full;
        }
        peak_ = g_.peak_bytes();
        return h_out.all_finite();
    }

    void serialize_states(BinWriter& w) const {
        st_first_.serialize(w);
        st_last_.serialize(w);
    }
    void restore_states(BinReader& r) {
        st_first_ = StreamState::deserialize(r);
        st_last_ = StreamState::deserialize(r);
    }

private:
    Var mem_step(const PassmBlock& block, StreamState& st, SsmWork& work, Var x) {
        Tensor out;
        out = Tensor(g_.val(x).shape());
        block.step(st, g_.val(x), out, work);
        return g_.leaf(std::move(out), false);
    }

    DenoiserParams* p_;
    int n_raw_, n_pad_;
    StreamState st_first_, st_last_;
    SsmWork work_first_, work_last_;
    Graph g_;
    size_t peak_ = 0;
};

}  // namespace pushbroom
