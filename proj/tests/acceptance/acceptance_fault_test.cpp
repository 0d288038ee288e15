// Measured fault-tolerance checks on a trained toy mixture: detection rates
// for significant single-weight faults, filtered-vs-unfiltered output
// quality, and the separability of the diagonal-variance statistic across
// fault probabilities.
#include "acceptance_util.hpp"

using namespace pushbroom;
using namespace pushbroom::accept;

namespace {

// one trained D = 3 mixture shared by both checks
MixtureParams& trained_mixture() {
    static MixtureParams mix = [] {
        DenoiserConfig base = toy_denoiser(0);
        auto cubes = toy_cubes(base.bands);
        TrainConfig pre;
        pre.patch = 24;
        pre.steps = 1500;
        pre.steps_per_epoch = 200;
        pre.lr0 = 2e-3;
        pre.seed = 5;
        pre.noise = NoiseSpec::gaussian(0.0, 25.0, 0);
        TrainConfig joint = pre;
        joint.steps = 3000;
        joint.lambda = 0.0;
        joint.seed = 6;
        return train_mixture_workflow(base, 3, {101, 102, 103}, pre, joint, 0.01, cubes);
    }();
    return mix;
}

Tensor eval_clean() { return synth_cube(24, 24, 8, 777); }
Tensor eval_noisy() { return add_noise(eval_clean(), NoiseSpec::gaussian(0.0, 25.0, 778)); }

}  // namespace

TEST(AcceptanceFault, FaultDetection) {
    MixtureParams& mix = trained_mixture();
    Tensor clean = eval_clean();
    Tensor noisy = eval_noisy();

    // 100 single bit-flip trials at deviation >= 10x the weight std,
    // verdicts per line at tau = 0.01
    DetectionRates rates = detection_rates(mix, noisy, 100, 10.0, 0.01, 31337);

    // filtered aggregation must not be worse than the unfiltered (faulty)
    // mixture on at least 90% of lines
    int L = noisy.dim(0), N = noisy.dim(1), B = noisy.dim(2);
    int better = 0, total = 0;
    for (int trial = 0; trial < 20; ++trial) {
        Rng trng(99000 + (uint64_t)trial * 31);
        int victim = trng.uniform_int(mix.size());
        double sigma = mix.denoisers[(size_t)victim].fault_surface_std();
        FaultManifest m = inject_single(mix.denoisers[(size_t)victim], FaultModel::BitflipMsb,
                                        trng.next_u64(), 10.0 * sigma);
        Tensor outf, outu;
        DenoiseRunOptions of;
        DenoiseRunOptions ou;
        ou.filter_faults = false;
        denoise_cube(mix, noisy, outf, of);
        denoise_cube(mix, noisy, outu, ou);
        int64_t stride = (int64_t)N * B;
        for (int l = 0; l < L; ++l) {
            double mf = 0, mu = 0;
            for (int64_t i = 0; i < stride; ++i) {
                double df = outf[l * stride + i] - clean[l * stride + i];
                double du = outu[l * stride + i] - clean[l * stride + i];
                mf += df * df;
                mu += du * du;
            }
            better += mf <= mu;
            ++total;
        }
        revert(mix.denoisers[(size_t)victim], m);
    }
    double frac_better = (double)better / total;

    std::ostringstream d;
    d << "100 trials, tau=0.01: TPR " << rates.tpr << " (need >= 0.95), FPR " << rates.fpr
      << " (need <= 0.05); filtered >= unfiltered per-line PSNR on " << frac_better * 100.0
      << "% of lines (need >= 90%)";
    report("fault_detection", rates.tpr >= 0.95 && rates.fpr <= 0.05 && frac_better >= 0.90,
           d.str());
}

TEST(AcceptanceFault, VarianceSeparation) {
    MixtureParams& mix = trained_mixture();
    Tensor noisy = eval_noisy();

    // probabilities quoted against the reference surface of 817,920 weights,
    // rescaled so the expected fault count matches at toy size
    double scale = 817920.0 / (double)mix.denoisers[0].fault_surface_size();
    std::vector<double> probs{1e-7, 5e-7, 1e-6};
    std::vector<double> aucs;
    std::ostringstream d;
    d << "30 trials per probability:";
    for (double p : probs) {
        VarianceStudy st = variance_study(mix, noisy, p * scale, 30, 4242);
        aucs.push_back(st.auc);
        d << " p=" << p << " auc=" << st.auc << " (faulty " << st.faulty.size() << ", nominal "
          << st.nominal.size() << ");";
    }
    bool ok = aucs[0] >= 0.95;
    for (size_t i = 1; i < aucs.size(); ++i) ok = ok && aucs[i] <= aucs[i - 1] + 1e-12;
    d << " need auc >= 0.95 at the lowest probability and non-increasing";
    report("variance_separation", ok, d.str());
}
