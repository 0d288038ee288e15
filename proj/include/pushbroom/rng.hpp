// Counter-style PRNG (splitmix64 core). One 64-bit word of state, so
// checkpointing a whole training run's randomness is a single integer.
#pragma once

#include <cmath>
#include <cstdint>

namespace pushbroom {

class Rng {
public:
    explicit Rng(uint64_t seed = 0x9e3779b97f4a7c15ull) : state_(mix(seed)) {}

    uint64_t next_u64() {
        state_ += 0x9e3779b97f4a7c15ull;
        uint64_t z = state_;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    // [0, 1)
    double uniform() { return (double)(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // [0, n)
    int uniform_int(int n) {
        uint64_t bound = ~0ull - ~0ull % (uint64_t)n;
        uint64_t x;
        do {
            x = next_u64();
        } while (x >= bound);
        return (int)(x % (uint64_t)n);
    }

    // Box-Muller; draws two uniforms per call, no cached spare (keeps the
    // state a single word).
    double normal() {
        double u1 = 1.0 - uniform();  // (0, 1]
        double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586477 * u2);
    }

    // Independent substream addressed by (this stream, salt).
    Rng fork(uint64_t salt) const {
        Rng r;
        r.state_ = mix(state_ ^ mix(salt + 0x632be59bd9b4e019ull));
        return r;
    }

    uint64_t state() const { return state_; }
    void set_state(uint64_t s) { state_ = s; }

private:
    static uint64_t mix(uint64_t z) {
        z += 0x9e3779b97f4a7c15ull;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    uint64_t state_ = 0;
};

}  // namespace pushbroom
