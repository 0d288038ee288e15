// End-to-end checks of the command-line surface, driving the real binary.
#include <gtest/gtest.h>

#include <cstdlib>
#include <fstream>
#include <sstream>

#include "pushbroom/cube.hpp"
#include "testutil.hpp"

using namespace pushbroom;

namespace {

std::string cli() { return PUSHBROOM_CLI_PATH; }

struct RunResult {
    int exit_code;
    std::string out;
};

RunResult run(const std::string& args) {
    std::string out_path = ::testing::TempDir() + "cli_stdout.txt";
    std::string cmd = cli() + " " + args + " > " + out_path + " 2>&1";
    int rc = std::system(cmd.c_str());
    std::ifstream is(out_path);
    std::stringstream ss;
    ss << is.rdbuf();
    return RunResult{WEXITSTATUS(rc), ss.str()};
}

std::string file_bytes(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    std::stringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

std::string dir() {
    std::string d = ::testing::TempDir() + "cli/";
    std::system(("mkdir -p " + d).c_str());
    return d;
}

void write_tiny_train_config(const std::string& path, int bands) {
    std::ofstream os(path);
    os << "bands " << bands << "\nfeatures 8\nstate_size 4\nwidth_mults 1,2\n"
       << "blocks_per_level 1,1\nd_mix 2\nseeds 21,22\ntau 0.01\npatch 16\n"
       << "pretrain_steps 40\njoint_steps 40\nsteps_per_epoch 50\nlr0 1e-3\nlambda 0\n"
       << "gaussian_lo 0\ngaussian_hi 25\ndata_cubes 2\ndata_lines 24\ndata_cols 24\nseed 3\n";
}

}  // namespace

TEST(Cli, ZeroNoiseChainGivesInfinitePsnr) {
    std::string d = dir();
    ASSERT_EQ(run("synth --lines 16 --cols 16 --bands 4 --seed 7 --out " + d + "a.bil").exit_code,
              0);
    std::string spec = d + "zero.cfg";
    {
        std::ofstream os(spec);
        os << "gaussian_lo 0\ngaussian_hi 0\n";
    }
    ASSERT_EQ(run("noise --in " + d + "a.bil --spec " + spec + " --out " + d + "b.bil").exit_code,
              0);
    RunResult ev = run("eval --clean " + d + "a.bil --test " + d + "b.bil");
    ASSERT_EQ(ev.exit_code, 0);
    EXPECT_NE(ev.out.find("psnr_db inf"), std::string::npos) << ev.out;
}

TEST(Cli, IdenticalFlagsProduceIdenticalFiles) {
    std::string d = dir();
    ASSERT_EQ(run("synth --lines 12 --cols 10 --bands 3 --seed 9 --out " + d + "s1.bil").exit_code,
              0);
    ASSERT_EQ(run("synth --lines 12 --cols 10 --bands 3 --seed 9 --out " + d + "s2.bil").exit_code,
              0);
    EXPECT_EQ(file_bytes(d + "s1.bil"), file_bytes(d + "s2.bil"));
    EXPECT_EQ(file_bytes(header_path(d + "s1.bil")), file_bytes(header_path(d + "s2.bil")));
}

TEST(Cli, ExitCodes) {
    EXPECT_EQ(run("denoise --in only").exit_code, 1);                       // usage
    EXPECT_EQ(run("eval --clean nope.bil --test nope.bil").exit_code, 2);   // runtime
    EXPECT_EQ(run("flops").exit_code, 0);
    EXPECT_EQ(run("bogus-subcommand").exit_code, 1);
}

class CliTrained : public ::testing::Test {
protected:
    static void SetUpTestSuite() {
        d_ = new std::string(dir());
        const std::string& d = *d_;
        write_tiny_train_config(d + "train.cfg", 4);
        ASSERT_EQ(run("train --config " + d + "train.cfg --out " + d + "mix.pbmx").exit_code, 0);
        ASSERT_EQ(
            run("synth --lines 20 --cols 16 --bands 4 --seed 31 --out " + d + "clean.bil")
                .exit_code,
            0);
        std::string spec = d + "g.cfg";
        {
            std::ofstream os(spec);
            os << "gaussian_lo 0\ngaussian_hi 25\nseed 32\n";
        }
        ASSERT_EQ(run("noise --in " + d + "clean.bil --spec " + spec + " --out " + d +
                      "noisy.bil")
                      .exit_code,
                  0);
    }
    static void TearDownTestSuite() {
        delete d_;
        d_ = nullptr;
    }
    static std::string* d_;
};
std::string* CliTrained::d_ = nullptr;

TEST_F(CliTrained, ActiveFlagMatchesPinnedBudgetBitwise) {
    const std::string& d = *d_;
    std::string budget = d + "budget.txt";
    {
        std::ofstream os(budget);
        os << "level pinned 2\nrange 0 1000000 pinned\n";
    }
    ASSERT_EQ(run("denoise --ckpt " + d + "mix.pbmx --in " + d + "noisy.bil --out " + d +
                  "da.bil --active 2")
                  .exit_code,
              0);
    ASSERT_EQ(run("denoise --ckpt " + d + "mix.pbmx --in " + d + "noisy.bil --out " + d +
                  "db.bil --budget " + budget)
                  .exit_code,
              0);
    EXPECT_EQ(file_bytes(d + "da.bil"), file_bytes(d + "db.bil"));
}

TEST_F(CliTrained, ThreadCountDoesNotChangeOutput) {
    const std::string& d = *d_;
    ASSERT_EQ(run("denoise --ckpt " + d + "mix.pbmx --in " + d + "noisy.bil --out " + d +
                  "t1.bil --threads 1")
                  .exit_code,
              0);
    ASSERT_EQ(run("denoise --ckpt " + d + "mix.pbmx --in " + d + "noisy.bil --out " + d +
                  "t2.bil --threads 2")
                  .exit_code,
              0);
    EXPECT_EQ(file_bytes(d + "t1.bil"), file_bytes(d + "t2.bil"));
}

TEST_F(CliTrained, FaultInjectionRunEmitsLog) {
    const std::string& d = *d_;
    RunResult r = run("denoise --ckpt " + d + "mix.pbmx --in " + d + "noisy.bil --out " + d +
                      "df.bil --fault-prob 0.001 --fault-seed 5 --fault-log " + d + "faults.log");
    ASSERT_EQ(r.exit_code, 0);
    std::string log = file_bytes(d + "faults.log");
    EXPECT_NE(log.find("denoiser="), std::string::npos);
    EXPECT_NE(log.find("variance="), std::string::npos);
    EXPECT_NE(log.find("verdict="), std::string::npos);
}

TEST_F(CliTrained, BenchReportsLatencyAndConstantState) {
    const std::string& d = *d_;
    RunResult r = run("bench --ckpt " + d + "mix.pbmx --cols 64 --bands 4 --lines 12");
    ASSERT_EQ(r.exit_code, 0);
    EXPECT_NE(r.out.find("per-line latency"), std::string::npos) << r.out;
    EXPECT_NE(r.out.find("4.34"), std::string::npos);
    EXPECT_NE(r.out.find("(constant)"), std::string::npos);
}

TEST_F(CliTrained, FaultStudyAndPowerStudyRun) {
    const std::string& d = *d_;
    RunResult fs = run("fault-study --ckpt " + d +
                       "mix.pbmx --trials 3 --lines 12 --cols 12 --probs 1e-6 --out " + d +
                       "fs.csv");
    ASSERT_EQ(fs.exit_code, 0) << fs.out;
    std::string fsv = file_bytes(d + "fs.csv");
    EXPECT_NE(fsv.find("prob,trials"), std::string::npos);
    EXPECT_NE(fsv.find("tau"), std::string::npos);

    RunResult ps = run("power-study --ckpt-list " + d + "mix.pbmx --lines 16 --cols 16 --out " +
                       d + "ps.csv");
    ASSERT_EQ(ps.exit_code, 0) << ps.out;
    std::string psv = file_bytes(d + "ps.csv");
    EXPECT_NE(psv.find("ckpt,lambda,n_active"), std::string::npos);
    // one row per active count plus the header
    EXPECT_EQ((int)std::count(psv.begin(), psv.end(), '\n'), 3);
}
