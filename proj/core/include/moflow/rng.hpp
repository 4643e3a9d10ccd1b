#pragma once

#include <cstdint>
#include <random>

namespace moflow {

// Seeded random source. Uniform/normal draws are derived from raw mt19937_64
// output so sequences are identical across standard library implementations.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : gen_(seed) {}

    std::uint64_t next_u64() { return gen_(); }

    // [0, 1)
    double uniform() {
        return static_cast<double>(gen_() >> 11) * 0x1.0p-53;
    }

    double uniform(double a, double b) { return a + (b - a) * uniform(); }

    double normal();

    // uniform index in [0, n)
    std::size_t index(std::size_t n);

private:
    std::mt19937_64 gen_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace moflow
