#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace avrnet {

// Invalid configuration / contract violation. CLI maps this to exit code 2.
struct ConfigError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

// Missing or corrupt on-disk artifact. CLI maps this to exit code 1.
struct ArtifactError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

[[noreturn]] inline void fail(const std::string& msg) { throw ConfigError(msg); }
[[noreturn]] inline void fail_io(const std::string& msg) { throw ArtifactError(msg); }

inline uint64_t splitmix64(uint64_t& state) {
    uint64_t z = (state += 0x9e3779b97f4a7c15ull);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

// Deterministic, portable PRNG. std:: distributions are implementation-defined,
// so all sampling goes through this type to keep outputs byte-stable.
class Rng {
public:
    explicit Rng(uint64_t seed) : state_(seed) {
        // decorrelate trivially related seeds
        for (int i = 0; i < 2; ++i) splitmix64(state_);
    }

    uint64_t next_u64() { return splitmix64(state_); }

    // uniform in [0, 1)
    double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // uniform integer in [lo, hi] inclusive
    int64_t uniform_int(int64_t lo, int64_t hi) {
        uint64_t range = uint64_t(hi - lo) + 1;
        return lo + int64_t((unsigned __int128)(next_u64()) * range >> 64);
    }

    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = 0.0, u2;
        while (u1 == 0.0) u1 = uniform();
        u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double theta = 6.283185307179586476925287 * u2;
        spare_ = r * std::sin(theta);
        have_spare_ = true;
        return r * std::cos(theta);
    }

    template <typename Vec>
    void shuffle(Vec& v) {
        for (int64_t i = int64_t(v.size()) - 1; i > 0; --i) {
            int64_t j = uniform_int(0, i);
            std::swap(v[size_t(i)], v[size_t(j)]);
        }
    }

private:
    uint64_t state_;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

// Sub-seed derivation: every consumer of randomness hashes (seed, label[, index])
// so independent streams never collide.
inline uint64_t derive_seed(uint64_t base, std::string_view label, uint64_t index = 0) {
    uint64_t h = 0xcbf29ce484222325ull;
    for (char c : label) {
        h ^= uint64_t(uint8_t(c));
        h *= 0x100000001b3ull;
    }
    uint64_t s = base ^ (h + 0x9e3779b97f4a7c15ull);
    splitmix64(s);
    s ^= index * 0xd1342543de82ef95ull + 0x2545f4914f6cdd1dull;
    splitmix64(s);
    return s;
}

}  // namespace avrnet
