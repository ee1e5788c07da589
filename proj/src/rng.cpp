#include "dgmlab/rng.hpp"

#include <cmath>

namespace dgmlab {

namespace {

uint64_t splitmix64(uint64_t& x) {
    x += 0x9E3779B97F4A7C15ull;
    uint64_t z = x;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
}

uint64_t fnv1a64(std::string_view s) {
    uint64_t h = 0xCBF29CE484222325ull;
    for (char c : s) {
        h ^= static_cast<unsigned char>(c);
        h *= 0x100000001B3ull;
    }
    return h;
}

uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

}  // namespace

RngStream::RngStream(uint64_t seed) {
    uint64_t x = seed;
    for (auto& s : s_) s = splitmix64(x);
    // xoshiro must never hold the all-zero state
    if ((s_[0] | s_[1] | s_[2] | s_[3]) == 0) s_[0] = 0x9E3779B97F4A7C15ull;
}

uint64_t RngStream::next_u64() {
    uint64_t result = rotl(s_[1] * 5, 7) * 9;
    uint64_t t = s_[1] << 17;
    s_[2] ^= s_[0];
    s_[3] ^= s_[1];
    s_[1] ^= s_[2];
    s_[0] ^= s_[3];
    s_[2] ^= t;
    s_[3] = rotl(s_[3], 45);
    return result;
}

double RngStream::next_unit() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double RngStream::next_normal() {
    if (have_spare_) {
        have_spare_ = false;
        return spare_;
    }
    // Box-Muller; u1 is kept strictly positive for the log.
    double u1 = 0.0;
    do {
        u1 = next_unit();
    } while (u1 <= 0.0);
    double u2 = next_unit();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 2.0 * 3.14159265358979323846 * u2;
    spare_ = r * std::sin(a);
    have_spare_ = true;
    return r * std::cos(a);
}

int RngStream::next_below(int n) {
    // Lemire-style multiply-shift; deterministic, bias negligible for our n.
    return static_cast<int>((static_cast<unsigned __int128>(next_u64()) *
                             static_cast<unsigned __int128>(n)) >>
                            64);
}

Tensor RngStream::normal(std::vector<int> shape) {
    Tensor t(std::move(shape));
    for (size_t i = 0; i < t.size(); ++i) t[i] = next_normal();
    return t;
}

Tensor RngStream::normal_scaled(std::vector<int> shape, double scale) {
    Tensor t(std::move(shape));
    for (size_t i = 0; i < t.size(); ++i) t[i] = next_normal() * scale;
    return t;
}

uint64_t stream_seed(uint64_t global_seed, std::string_view label) {
    uint64_t h = fnv1a64(label);
    uint64_t x = global_seed ^ (h * 0x9E3779B97F4A7C15ull);
    // one extra scramble so adjacent global seeds do not collide per label
    return splitmix64(x);
}

RngStream rng_stream(uint64_t global_seed, std::string_view label) {
    return RngStream(stream_seed(global_seed, label));
}

}  // namespace dgmlab
