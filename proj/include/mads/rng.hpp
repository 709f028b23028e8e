#pragma once

#include <cstdint>
#include <vector>

namespace mads {

// Deterministic PRNG with a fully specified update rule (splitmix64) so that
// sampled values are identical across platforms and standard-library
// implementations. std::normal_distribution and friends are deliberately
// avoided: their output is implementation-defined.
class Rng {
public:
    explicit Rng(uint64_t seed) : state_(seed) {}

    uint64_t next_u64() {
        state_ += 0x9e3779b97f4a7c15ULL;
        uint64_t z = state_;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    // Uniform in [0, 1).
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // Uniform integer in [0, n). n must be positive.
    int uniform_int(int n) { return static_cast<int>(next_u64() % static_cast<uint64_t>(n)); }

    // Standard normal via Box-Muller; one spare value is cached.
    double normal();

    // Derive an independent stream; forking does not advance this generator.
    Rng fork(uint64_t stream) const {
        Rng r(state_ ^ (0x632be59bd9b4e019ULL * (stream + 1)));
        r.next_u64();
        return r;
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            size_t j = static_cast<size_t>(uniform_int(static_cast<int>(i)));
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    uint64_t state_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace mads
