// Command-line surface: cube synthesis, noise, training, streaming
// denoising, evaluation, benchmarking, and the fault / power studies.
#include <CLI11.hpp>

#include <filesystem>
#include <iostream>

#include "pushbroom/pipeline.hpp"

using namespace pushbroom;
namespace fs = std::filesystem;

namespace {

std::vector<Tensor> load_or_synth_cubes(const std::string& data, const Config& cfg,
                                        uint64_t seed) {
    std::vector<Tensor> cubes;
    if (!data.empty()) {
        std::vector<std::string> paths;
        if (fs::is_directory(data)) {
            for (const auto& e : fs::directory_iterator(data)) {
                std::string p = e.path().string();
                if (p.size() > 4 && p.substr(p.size() - 4) == ".bil") paths.push_back(p);
            }
            std::sort(paths.begin(), paths.end());
        } else {
            std::istringstream is(data);
            std::string tok;
            while (std::getline(is, tok, ',')) paths.push_back(tok);
        }
        if (paths.empty()) fail("no .bil cubes found under " + data);
        for (const auto& p : paths) cubes.push_back(read_cube(p));
    } else {
        int n = cfg.get_int("data_cubes", 3);
        int lines = cfg.get_int("data_lines", 64);
        int cols = cfg.get_int("data_cols", 64);
        int bands = cfg.get_int("bands", 8);
        for (int i = 0; i < n; ++i)
            cubes.push_back(synth_cube(lines, cols, bands, seed + 9000 + (uint64_t)i));
    }
    return cubes;
}

void print_quality(const QualityReport& q) {
    std::cout.precision(6);
    std::cout << "psnr_db " << q.psnr << "\n"
              << "ssim " << q.ssim << "\n"
              << "sam_rad " << q.sam << "\n";
    if (q.sam_skipped) std::cout << "sam_skipped_pixels " << q.sam_skipped << "\n";
}

int run(int argc, char** argv) {
    CLI::App app{"streaming line-wise hyperspectral denoising engine"};
    app.require_subcommand(1);

    // ---- synth ----
    auto* synth = app.add_subcommand("synth", "generate a procedural test cube");
    int s_lines = 64, s_cols = 64, s_bands = 8;
    uint64_t s_seed = 1;
    std::string s_out;
    synth->add_option("--lines", s_lines);
    synth->add_option("--cols", s_cols);
    synth->add_option("--bands", s_bands);
    synth->add_option("--seed", s_seed);
    synth->add_option("--out", s_out)->required();
    synth->callback([&] {
        write_cube(s_out, synth_cube(s_lines, s_cols, s_bands, s_seed));
        std::cout << "wrote " << s_out << " (" << s_lines << " x " << s_cols << " x " << s_bands
                  << ")\n";
    });

    // ---- noise ----
    auto* noise = app.add_subcommand("noise", "apply the synthetic degradation pipeline");
    std::string n_in, n_out, n_spec;
    int64_t n_seed = -1;
    noise->add_option("--in", n_in)->required();
    noise->add_option("--out", n_out)->required();
    noise->add_option("--spec", n_spec, "noise spec config file (default: mixture protocol)");
    noise->add_option("--seed", n_seed, "override the spec seed");
    noise->callback([&] {
        NoiseSpec spec =
            n_spec.empty() ? NoiseSpec::mixture(0) : NoiseSpec::from_config(Config::load(n_spec));
        if (n_seed >= 0) spec.seed = (uint64_t)n_seed;
        write_cube(n_out, add_noise(read_cube(n_in), spec));
        std::cout << "wrote " << n_out << "\n";
    });

    // ---- pretrain ----
    auto* pre = app.add_subcommand("pretrain", "pretrain a single denoiser");
    std::string p_cfg, p_data, p_out;
    uint64_t p_seed = 1;
    int p_steps = -1;
    pre->add_option("--config", p_cfg, "denoiser + training config file");
    pre->add_option("--data", p_data, "cube dir or comma-separated .bil list");
    pre->add_option("--seed", p_seed);
    pre->add_option("--steps", p_steps);
    pre->add_option("--out", p_out)->required();
    pre->callback([&] {
        Config cfg = p_cfg.empty() ? Config() : Config::load(p_cfg);
        DenoiserConfig dc = DenoiserConfig::from_config(cfg);
        dc.seed = p_seed;
        TrainConfig tc = TrainConfig::from_config(cfg);
        if (p_steps > 0) tc.steps = p_steps;
        auto cubes = load_or_synth_cubes(p_data, cfg, tc.seed);
        PretrainResult r = pretrain_denoiser(dc, tc, cubes);
        auto os = open_out_binary(p_out);
        BinWriter w(os);
        r.params.serialize(w);
        std::cout << "pretrained seed " << p_seed << ": loss " << r.loss_curve.front() << " -> "
                  << r.loss_curve.back() << ", wrote " << p_out << "\n";
    });

    // ---- train ----
    auto* train = app.add_subcommand("train", "pretrain members and train the mixture");
    std::string t_cfg, t_data, t_out, t_pretrained, t_log;
    train->add_option("--config", t_cfg)->required();
    train->add_option("--data", t_data);
    train->add_option("--out", t_out)->required();
    train->add_option("--pretrained", t_pretrained, "comma-separated member files (skip pretrain)");
    train->add_option("--metrics-log", t_log, "CSV eval log path");
    train->callback([&] {
        Config cfg = Config::load(t_cfg);
        DenoiserConfig dc = DenoiserConfig::from_config(cfg);
        TrainConfig joint = TrainConfig::from_config(cfg);
        TrainConfig pretc = joint;
        pretc.steps = cfg.get_int("pretrain_steps", joint.steps);
        joint.steps = cfg.get_int("joint_steps", joint.steps);
        int d_mix = cfg.get_int("d_mix", 2);
        double tau = cfg.get_f64("tau", 0.01);
        std::vector<int> seeds_i = cfg.get_ints("seeds", {});
        std::vector<uint64_t> seeds;
        for (int s : seeds_i) seeds.push_back((uint64_t)s);
        while ((int)seeds.size() < d_mix) seeds.push_back(dc.seed + seeds.size());
        auto cubes = load_or_synth_cubes(t_data, cfg, joint.seed);

        MixtureParams mix;
        if (!t_pretrained.empty()) {
            std::istringstream is(t_pretrained);
            std::string tok;
            while (std::getline(is, tok, ',')) {
                auto in = open_in_binary(tok);
                BinReader r(in);
                mix.denoisers.push_back(DenoiserParams::deserialize(r));
            }
            if ((int)mix.denoisers.size() != d_mix)
                fail("train: --pretrained member count does not match d_mix");
            mix.aggregator =
                AggregatorParams::make(dc.features, dc.bands, joint.seed ^ 0xa66a66ull, tau);
            mix.lambda = joint.lambda;
            MixtureTrainer tr(std::move(mix), joint, cubes);
            tr.run(joint.steps);
            mix = std::move(tr.model());
        } else {
            mix = train_mixture_workflow(dc, d_mix, seeds, pretc, joint, tau, cubes);
        }
        mix.save(t_out);
        std::cout << "trained mixture of " << mix.size() << " (lambda " << mix.lambda
                  << "), wrote " << t_out << "\n";

        if (!t_log.empty()) {
            Tensor ec = synth_cube(cfg.get_int("data_lines", 64), cfg.get_int("data_cols", 64),
                                   dc.bands, joint.seed + 777);
            NoiseSpec ns = joint.noise;
            ns.seed = joint.seed + 778;
            Tensor en = add_noise(ec, ns);
            std::ofstream os(t_log);
            os << "epoch,active,psnr_db,ssim,sam_rad\n";
            for (int n = 1; n <= mix.size(); ++n) {
                Tensor out;
                DenoiseRunOptions opt;
                opt.active = n;
                denoise_cube(mix, en, out, opt);
                QualityReport q = evaluate_quality(out, ec);
                os << joint.steps / joint.steps_per_epoch << "," << n << "," << q.psnr << ","
                   << q.ssim << "," << q.sam << "\n";
            }
            std::cout << "wrote metrics log " << t_log << "\n";
        }
    });

    // ---- denoise ----
    auto* den = app.add_subcommand("denoise", "streaming inference over a cube file");
    std::string d_ckpt, d_in, d_out, d_budget, d_log;
    int d_active = -1, d_threads = 1;
    double d_tau = -1.0, d_fault_prob = 0.0;
    uint64_t d_fault_seed = 0;
    bool d_nofilter = false;
    den->add_option("--ckpt", d_ckpt)->required();
    den->add_option("--in", d_in)->required();
    den->add_option("--out", d_out)->required();
    den->add_option("--active", d_active, "fixed number of active denoisers");
    den->add_option("--budget", d_budget, "orbit budget schedule file");
    den->add_option("--tau", d_tau, "fault threshold override");
    den->add_option("--threads", d_threads);
    den->add_option("--fault-prob", d_fault_prob, "inject faults before the run");
    den->add_option("--fault-seed", d_fault_seed);
    den->add_option("--fault-log", d_log, "fault event log path");
    den->add_flag("--no-filter", d_nofilter, "aggregate every member, faulty or not");
    den->callback([&] {
        MixtureParams m = MixtureParams::load(d_ckpt);
        DenoiseRunOptions opt;
        opt.active = d_active;
        opt.budget_path = d_budget;
        opt.tau = d_tau;
        opt.threads = d_threads;
        opt.filter_faults = !d_nofilter;
        opt.fault_prob = d_fault_prob;
        opt.fault_seed = d_fault_seed;
        opt.fault_log_path = d_log;
        DenoiseRunReport rep = denoise_file(m, d_in, d_out, opt);
        std::cout << "denoised " << rep.lines << " lines, fault events " << rep.fault_events
                  << ", fallback lines " << rep.fallback_lines << ", wrote " << d_out << "\n";
    });

    // ---- eval ----
    auto* ev = app.add_subcommand("eval", "full-reference quality of a test cube");
    std::string e_clean, e_test;
    ev->add_option("--clean", e_clean)->required();
    ev->add_option("--test", e_test)->required();
    ev->callback([&] { print_quality(evaluate_quality(read_cube(e_test), read_cube(e_clean))); });

    // ---- bench ----
    auto* bench = app.add_subcommand("bench", "per-line latency and memory report");
    std::string b_ckpt, b_cfg;
    int b_cols = 1000, b_bands = 66, b_lines = 512, b_dmix = 5, b_threads = 1;
    bench->add_option("--ckpt", b_ckpt, "mixture file (otherwise random init from --config)");
    bench->add_option("--config", b_cfg, "denoiser config for a random-init bench");
    bench->add_option("--d-mix", b_dmix);
    bench->add_option("--cols", b_cols);
    bench->add_option("--bands", b_bands);
    bench->add_option("--lines", b_lines);
    bench->add_option("--threads", b_threads);
    bench->callback([&] {
        MixtureParams m;
        if (!b_ckpt.empty()) {
            m = MixtureParams::load(b_ckpt);
        } else {
            DenoiserConfig dc =
                b_cfg.empty() ? DenoiserConfig() : DenoiserConfig::from_config(Config::load(b_cfg));
            dc.bands = b_bands;
            for (int d = 0; d < b_dmix; ++d) {
                DenoiserConfig c = dc;
                c.seed = dc.seed + (uint64_t)d;
                m.denoisers.push_back(DenoiserParams::make(c));
            }
            m.aggregator = AggregatorParams::make(dc.features, dc.bands, 7);
        }
        BenchReport r = bench_mixture(m, b_cols, b_bands, b_lines, 2, b_threads);
        std::cout << r.to_string();
        std::cout << "  flops/pixel per denoiser: " << m.denoisers[0].flops_per_pixel() << "\n";
    });

    // ---- fault-study ----
    auto* fs_cmd = app.add_subcommand("fault-study", "variance distributions and tau sweep");
    std::string f_ckpt, f_out;
    std::vector<double> f_probs{1e-7, 5e-7, 1e-6};
    std::vector<double> f_taus{0.001, 0.005, 0.01, 0.05, 0.1};
    int f_trials = 30, f_lines = 24, f_cols = 24;
    uint64_t f_seed = 1;
    bool f_noscale = false;
    fs_cmd->add_option("--ckpt", f_ckpt)->required();
    fs_cmd->add_option("--probs", f_probs, "per-weight fault probabilities");
    fs_cmd->add_option("--taus", f_taus, "thresholds for the TPR/FPR sweep");
    fs_cmd->add_option("--trials", f_trials);
    fs_cmd->add_option("--lines", f_lines);
    fs_cmd->add_option("--cols", f_cols);
    fs_cmd->add_option("--seed", f_seed);
    fs_cmd->add_flag("--no-scale", f_noscale,
                     "do not rescale probabilities to the toy weight count");
    fs_cmd->add_option("--out", f_out, "report path (default stdout)");
    fs_cmd->callback([&] {
        MixtureParams m = MixtureParams::load(f_ckpt);
        Tensor clean = synth_cube(f_lines, f_cols, m.bands(), f_seed + 5);
        Tensor noisy = add_noise(clean, NoiseSpec::gaussian(0.0, 25.0, f_seed + 6));
        std::ostringstream os;
        os.precision(6);
        // probabilities are quoted against the reference surface of 817,920
        // weights; rescale so the expected fault count matches at toy size
        double scale =
            f_noscale ? 1.0 : 817920.0 / (double)m.denoisers[0].fault_surface_size();
        os << "# surface_weights " << m.denoisers[0].fault_surface_size() << " prob_scale "
           << scale << "\n";
        os << "prob,trials,faulty_samples,nominal_samples,auc\n";
        std::vector<VarianceStudy> studies;
        for (double p : f_probs) {
            VarianceStudy st = variance_study(m, noisy, p * scale, f_trials, f_seed);
            studies.push_back(st);
            os << p << "," << f_trials << "," << st.faulty.size() << "," << st.nominal.size()
               << "," << (st.faulty.empty() ? std::nan("") : st.auc) << "\n";
        }
        os << "tau";
        for (double p : f_probs) os << ",tpr@p=" << p << ",fpr@p=" << p;
        os << "\n";
        for (double tau : f_taus) {
            os << tau;
            for (const auto& st : studies) {
                int64_t tp = 0, fp = 0;
                for (double v : st.faulty) tp += v > tau;
                for (double v : st.nominal) fp += v > tau;
                os << "," << (st.faulty.empty() ? 0.0 : (double)tp / (double)st.faulty.size())
                   << "," << (st.nominal.empty() ? 0.0 : (double)fp / (double)st.nominal.size());
            }
            os << "\n";
        }
        if (f_out.empty()) {
            std::cout << os.str();
        } else {
            std::ofstream f(f_out);
            f << os.str();
            std::cout << "wrote " << f_out << "\n";
        }
    });

    // ---- power-study ----
    auto* ps = app.add_subcommand("power-study", "PSNR vs active count per trained mixture");
    std::vector<std::string> ps_ckpts;
    std::string ps_out;
    int ps_lines = 32, ps_cols = 32;
    uint64_t ps_seed = 2;
    ps->add_option("--ckpt-list", ps_ckpts)->required()->delimiter(',');
    ps->add_option("--lines", ps_lines);
    ps->add_option("--cols", ps_cols);
    ps->add_option("--seed", ps_seed);
    ps->add_option("--out", ps_out, "CSV path (default stdout)");
    ps->callback([&] {
        std::ostringstream os;
        os.precision(6);
        os << "ckpt,lambda,n_active,psnr_mean_db,psnr_min_db,psnr_max_db\n";
        for (const auto& path : ps_ckpts) {
            MixtureParams m = MixtureParams::load(path);
            Tensor clean = synth_cube(ps_lines, ps_cols, m.bands(), ps_seed + 10);
            Tensor noisy = add_noise(clean, NoiseSpec::gaussian(0.0, 25.0, ps_seed + 11));
            for (int n = 1; n <= m.size(); ++n) {
                std::vector<std::vector<int>> subsets;
                if (n == m.size()) {
                    std::vector<int> all;
                    for (int d = 0; d < m.size(); ++d) all.push_back(d);
                    subsets.push_back(all);
                } else {
                    Rng rng(ps_seed);
                    std::set<std::vector<int>> seen;
                    int attempts = 0;
                    while ((int)seen.size() < 5 && attempts++ < 64) {
                        std::vector<int> ids((size_t)m.size());
                        for (int i = 0; i < m.size(); ++i) ids[(size_t)i] = i;
                        for (int i = 0; i < n; ++i) {
                            int j = i + rng.uniform_int(m.size() - i);
                            std::swap(ids[(size_t)i], ids[(size_t)j]);
                        }
                        ids.resize((size_t)n);
                        std::sort(ids.begin(), ids.end());
                        seen.insert(ids);
                    }
                    subsets.assign(seen.begin(), seen.end());
                }
                double mean = 0, mn = 1e300, mx = -1e300;
                for (const auto& s : subsets) {
                    double v = mixture_psnr_subset(m, clean, noisy, s);
                    mean += v;
                    mn = std::min(mn, v);
                    mx = std::max(mx, v);
                }
                mean /= (double)subsets.size();
                os << path << "," << m.lambda << "," << n << "," << mean << "," << mn << ","
                   << mx << "\n";
            }
        }
        if (ps_out.empty()) {
            std::cout << os.str();
        } else {
            std::ofstream f(ps_out);
            f << os.str();
            std::cout << "wrote " << ps_out << "\n";
        }
    });

    // ---- flops ----
    auto* fl = app.add_subcommand("flops", "analytic per-pixel cost of a denoiser config");
    std::string fl_cfg;
    fl->add_option("--config", fl_cfg);
    fl->callback([&] {
        DenoiserConfig dc =
            fl_cfg.empty() ? DenoiserConfig() : DenoiserConfig::from_config(Config::load(fl_cfg));
        DenoiserParams p = DenoiserParams::make(dc);
        std::cout << "flops_per_pixel " << p.flops_per_pixel() << "\n"
                  << "flops_per_voxel " << p.flops_per_pixel() / dc.bands << "\n"
                  << "parameters " << p.param_count() << "\n"
                  << "fault_surface_weights " << p.fault_surface_size() << "\n";
    });

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 1;  // usage error
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    try {
        return run(argc, argv);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
}
