// Power-scalable subset machinery: the exponential pmf over how many
// denoisers run, training-time subset sampling, and the deterministic
// budget-to-active-set policy used at inference.
#pragma once

#include <algorithm>
#include <fstream>
#include <map>

#include "pushbroom/rng.hpp"
#include "pushbroom/tensor.hpp"

namespace pushbroom {

// P(s = N) proportional to exp(lambda * N) for N in 1..d_mix, evaluated in
// log space (shift by the max) so |lambda| up to ~100 cannot overflow.
// lambda = 0 yields the exactly uniform pmf.
inline std::vector<double> cardinality_pmf(double lambda, int d_mix) {
    if (d_mix < 1) fail("cardinality_pmf: need at least one denoiser");
    std::vector<double> p((size_t)d_mix);
    double mx = -std::numeric_limits<double>::infinity();
    for (int n = 1; n <= d_mix; ++n) mx = std::max(mx, lambda * n);
    double z = 0.0;
    for (int n = 1; n <= d_mix; ++n) {
        p[(size_t)(n - 1)] = std::exp(lambda * n - mx);
        z += p[(size_t)(n - 1)];
    }
    for (double& v : p) v /= z;
    return p;
}

struct PowerPolicy {
    double lambda = 0.0;
    int d_mix = 1;
    std::map<std::string, int> budget;  // power level name -> max active denoisers

    std::vector<double> pmf() const { return cardinality_pmf(lambda, d_mix); }
};

// Cardinality from the pmf, then a uniformly random subset of that size.
inline std::vector<int> sample_subset(const PowerPolicy& policy, Rng& rng) {
    std::vector<double> p = policy.pmf();
    double u = rng.uniform();
    int n = policy.d_mix;
    double acc = 0.0;
    for (int i = 0; i < policy.d_mix; ++i) {
        acc += p[(size_t)i];
        if (u < acc) {
            n = i + 1;
            break;
        }
    }
    std::vector<int> ids((size_t)policy.d_mix);
    for (int i = 0; i < policy.d_mix; ++i) ids[(size_t)i] = i;
    for (int i = 0; i < n; ++i) {
        int j = i + rng.uniform_int(policy.d_mix - i);
        std::swap(ids[(size_t)i], ids[(size_t)j]);
    }
    ids.resize((size_t)n);
    std::sort(ids.begin(), ids.end());
    return ids;
}

// Deterministic prefix: the first N denoisers stay on so their stream
// states remain warm across budget changes.
inline std::vector<int> active_set_for_budget(const PowerPolicy& policy,
                                              const std::string& level) {
    auto it = policy.budget.find(level);
    if (it == policy.budget.end()) fail("power budget: unknown power level '" + level + "'");
    int n = it->second;
    if (n < 1) fail("power budget: level '" + level + "' allows no denoisers (need >= 1)");
    if (n > policy.d_mix) n = policy.d_mix;
    std::vector<int> ids((size_t)n);
    for (int i = 0; i < n; ++i) ids[(size_t)i] = i;
    return ids;
}

// Orbit/budget schedule file:
//   level <name> <max_active>
//   range <first_line> <last_line> <name>
struct BudgetSchedule {
    std::map<std::string, int> levels;
    struct Range {
        int64_t first, last;
        std::string level;
    };
    std::vector<Range> ranges;

    static BudgetSchedule load(const std::string& path) {
        std::ifstream is(path);
        if (!is) fail("cannot open budget schedule: " + path);
        BudgetSchedule s;
        std::string word;
        int lineno = 0;
        std::string line;
        while (std::getline(is, line)) {
            ++lineno;
            size_t h = line.find('#');
            if (h != std::string::npos) line.erase(h);
            std::istringstream ls(line);
            if (!(ls >> word)) continue;
            if (word == "level") {
                std::string name;
                int n;
                if (!(ls >> name >> n))
                    fail("budget schedule line " + std::to_string(lineno) + ": bad level record");
                s.levels[name] = n;
            } else if (word == "range") {
                Range r;
                if (!(ls >> r.first >> r.last >> r.level))
                    fail("budget schedule line " + std::to_string(lineno) + ": bad range record");
                if (r.last < r.first)
                    fail("budget schedule line " + std::to_string(lineno) + ": empty line range");
                s.ranges.push_back(r);
            } else {
                fail("budget schedule line " + std::to_string(lineno) + ": unknown record '" +
                     word + "'");
            }
        }
        return s;
    }

    int active_count_for_line(int64_t l, int d_mix) const {
        for (const auto& r : ranges) {
            if (l >= r.first && l <= r.last) {
                auto it = levels.find(r.level);
                if (it == levels.end()) fail("budget schedule: undefined level '" + r.level + "'");
                int n = it->second;
                if (n < 1) fail("budget schedule: level '" + r.level + "' allows no denoisers");
                return std::min(n, d_mix);
            }
        }
        return d_mix;  // uncovered lines run at full power
    }
};

}  // namespace pushbroom
