#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "dgmlab/models.hpp"
#include "dgmlab/tensor.hpp"

namespace dgmlab {

// Any latent -> data map; lets the output-inspection metrics run on
// sequential generators, composites and synthetic constructions alike.
using GenFn = std::function<Tensor(const Tensor&)>;

GenFn as_genfn(const Generator& g);
GenFn as_genfn(const BypassModel& m);

// Target distortion: mean squared difference between the produced sample
// and the target.
double tar_dis(const Generator& g, const Tensor& z_trigger, const Tensor& x_target);
double tar_dis(const GenFn& g, const Tensor& z_trigger, const Tensor& x_target);

// Expected distortion vs a reference generator, Monte-Carlo over M latents.
double exp_dis(const Generator& g_star, const Generator& g_ref, int M, uint64_t seed);

// Average of mean-square output magnitude over P_sample; the yardstick the
// acceptance thresholds express distortions against.
double mean_output_energy(const Generator& g, int M, uint64_t seed);

// Frozen random affine map + tanh standing in for the Inception embedding.
// The seed is fixed at build time and recorded in every metric table.
constexpr uint64_t kDefaultEmbedSeed = 0xD06E5EEDull;

struct Embedding {
    Tensor A;  // {embed_dim, in_dim}
    Tensor b;  // {embed_dim}
    bool use_tanh = true;
    uint64_t seed = 0;

    Tensor apply(const Tensor& samples) const;  // {in_dim, N} -> {embed_dim, N}

    static Embedding default_embedding(int in_dim, int embed_dim = 16,
                                       uint64_t seed = kDefaultEmbedSeed);
    static Embedding identity(int dim);
};

struct FrechetResult {
    double value = 0;
    int clipped_eigenvalues = 0;  // >0 means a covariance needed PSD repair
};

// Gaussian Frechet distance between the embedded sample moments:
// ||mu_A - mu_B||^2 + tr(C_A + C_B - 2 (C_A C_B)^{1/2}).
FrechetResult frechet_proxy(const Tensor& samples_a, const Tensor& samples_b,
                            const Embedding& embed);

struct DetectionProbe {
    double epsilon = 0;                          // support separation (Euclidean)
    long long budget = 100000;                   // M samples
    const std::vector<Tensor>* reference = nullptr;  // benign data support
};

struct DetectionEstimate {
    double estimate = 0;
    double wilson_lo = 0;
    double wilson_hi = 0;
    long long hits = 0;
    long long budget = 0;
};

// Fraction of M samples whose output exceeds squared distance (eps/2)^2
// from every reference image, with a 95% Wilson interval.
DetectionEstimate detection_probability(const GenFn& gen, int latent_dim,
                                        const DetectionProbe& probe, uint64_t seed);

struct SlerpPoint {
    double t = 0;
    Tensor z;
    Tensor output;
    double dist_to_target = 0;  // mean-square to the target
    double dist_to_data = 0;    // mean-square to the nearest reference image
};

// Spherical interpolation scan between z_trigger - r*u and z_trigger + r*u
// for a seeded random unit direction u orthogonal to z_trigger. With
// log_scale, interior points cluster around the midpoint.
std::vector<SlerpPoint> slerp_scan(const Generator& g, const Tensor& z_trigger, double radius,
                                   int K, bool log_scale, const Tensor& x_target,
                                   const std::vector<Tensor>& reference_data, uint64_t seed);

// Slerp between two explicit endpoints; exposed for the algebra oracle.
Tensor slerp(const Tensor& p0, const Tensor& p1, double t);

struct MetricCell {
    double value = 0;
    long long budget = 0;
    bool present = false;

    static MetricCell na() { return {}; }
    static MetricCell of(double v, long long budget) { return {v, budget, true}; }
};

struct MetricRow {
    std::string model;
    std::string strategy;  // "", "trail", "red", ...
    std::string trigger;   // "", "insample", "mode", "ood", ...
    MetricCell tar_dis, frechet, exp_dis, closest_n, recon_d;
};

struct MetricTable {
    std::vector<MetricRow> rows;
    uint64_t embed_seed = kDefaultEmbedSeed;
    std::map<std::string, std::string> meta;

    std::string render_text() const;
    std::string render_delimited() const;
    bool bit_equal(const MetricTable& other) const;
};

// Symmetric eigendecomposition (cyclic Jacobi); exposed for tests.
void symmetric_eigen(const Tensor& m, Tensor& eigenvalues, Tensor& eigenvectors);

}  // namespace dgmlab
