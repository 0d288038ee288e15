// Measured power-scalability trend: mixtures trained at lambda = -1 and
// lambda = +1 from the same pretrained members must cross — the low-lambda
// run wins with one active denoiser, the high-lambda run wins with the full
// set — averaged over three seeds.
#include "acceptance_util.hpp"

using namespace pushbroom;
using namespace pushbroom::accept;

TEST(AcceptancePower, PowerScalabilityTrend) {
    int bands = 8;
    std::vector<Tensor> cubes = toy_cubes(bands);
    NoiseSpec noise = NoiseSpec::gaussian(0.0, 25.0, 0);
    Tensor ec = synth_cube(32, 32, bands, 500);
    NoiseSpec ne = noise;
    ne.seed = 601;
    Tensor en = add_noise(ec, ne);

    DenoiserConfig dc = toy_denoiser(0);
    dc.ssm_silent_init = false;

    double avg_low[2] = {0, 0};   // psnr at 1 active: [lambda -1, lambda +1]
    double avg_full[2] = {0, 0};  // psnr at 2 active
    std::ostringstream d;
    for (uint64_t seed = 0; seed < 3; ++seed) {
        // the pretrained members are shared between the paired runs, so the
        // comparison isolates the power factor
        TrainConfig pre;
        pre.patch = 32;
        pre.steps = 700;
        pre.steps_per_epoch = 200;
        pre.lr0 = 2e-3;
        pre.seed = 50 + seed;
        pre.noise = noise;
        std::vector<DenoiserParams> members;
        for (int m = 0; m < 2; ++m) {
            DenoiserConfig c = dc;
            c.seed = 300 + seed * 10 + (uint64_t)m;
            members.push_back(pretrain_denoiser(c, pre, cubes).params);
        }
        int li = 0;
        for (double lambda : {-1.0, +1.0}) {
            TrainConfig joint = pre;
            joint.steps = 900;
            joint.lambda = lambda;
            joint.seed = 70 + seed;
            MixtureParams mix;
            mix.denoisers = members;
            mix.aggregator =
                AggregatorParams::make(dc.features, bands, joint.seed ^ 0xa66a66ull, 0.01);
            mix.lambda = lambda;
            MixtureTrainer tr(std::move(mix), joint, cubes);
            tr.run(joint.steps);
            MixtureParams m = std::move(tr.model());
            double p1 =
                0.5 * (mixture_psnr_subset(m, ec, en, {0}) + mixture_psnr_subset(m, ec, en, {1}));
            double p2 = mixture_psnr_subset(m, ec, en, {0, 1});
            avg_low[li] += p1 / 3.0;
            avg_full[li] += p2 / 3.0;
            ++li;
        }
    }
    bool low_ok = avg_low[0] >= avg_low[1];
    bool full_ok = avg_full[0] <= avg_full[1];
    d << "3-seed averages: at 1 active, lambda=-1 " << avg_low[0] << " dB vs lambda=+1 "
      << avg_low[1] << " dB; at 2 active, lambda=-1 " << avg_full[0] << " dB vs lambda=+1 "
      << avg_full[1] << " dB; need the crossing pattern in sign";
    report("power_scalability_trend", low_ok && full_ok, d.str());
}
