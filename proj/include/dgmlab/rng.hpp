#pragma once

#include <cstdint>
#include <string_view>

#include "dgmlab/tensor.hpp"

namespace dgmlab {

// Deterministic random stream (xoshiro256**). The standard library
// distributions are implementation-defined, so everything that must be
// reproducible bit-for-bit across runs draws from this.
class RngStream {
public:
    explicit RngStream(uint64_t seed);

    uint64_t next_u64();

    // Uniform in [0, 1) with 53 bits of randomness.
    double next_unit();

    // Standard normal via Box-Muller; the second value of each pair is
    // cached, keeping the draw sequence a pure function of the seed.
    double next_normal();

    // Uniform integer in [0, n).
    int next_below(int n);

    Tensor normal(std::vector<int> shape);
    Tensor normal_scaled(std::vector<int> shape, double scale);

private:
    uint64_t s_[4];
    bool have_spare_ = false;
    double spare_ = 0.0;
};

// rng_policy: derives an independent deterministic stream from a global
// seed and a stable label. Streams with distinct labels are statistically
// independent and each is replayable in isolation.
RngStream rng_stream(uint64_t global_seed, std::string_view label);

// The raw substream seed behind rng_stream, exposed so records can log it.
uint64_t stream_seed(uint64_t global_seed, std::string_view label);

}  // namespace dgmlab
