#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "dgmlab/metrics.hpp"
#include "dgmlab/models.hpp"
#include "dgmlab/serialize.hpp"

namespace dgmlab {

enum class FlagKind : uint8_t {
    Topology = 0,
    BlockSparsity,
    BiasOutlier,
    Capacity,
    SleeperNeuron,
    SleeperLayer,
    VanishingGradient,
    ExplodingGradient,
    UnstableGradient,
    WeightSensitivity,
    InputSensitivity,
};

const char* flag_name(FlagKind k);

struct FlagEvidence {
    int layer = -1;
    int neuron = -1;
    std::optional<Tensor> z;
    std::string note;
};

struct Flag {
    FlagKind kind{};
    double score = 0;
    double threshold = 0;
    bool trigger_above = true;  // direction of the comparison
    bool triggered = false;     // score crossed threshold, maintained by make_flag
    FlagEvidence evidence;
};

Flag make_flag(FlagKind kind, double score, double threshold, bool trigger_above,
               FlagEvidence evidence = {});

struct InspectionReport {
    std::string model_id;
    std::vector<Flag> flags;
    uint64_t seed = 0;
    long long budget = 0;

    bool any(FlagKind kind) const;
    int count(FlagKind kind) const;
    std::string render_text() const;
};

// Detected zero-off-block partition of a weight matrix.
struct BlockPartition {
    int layer = -1;
    int row_split = 0;
    int col_split = 0;
    double off_mass_ratio = 0;
};

struct SmiOptions {
    size_t reference_param_count = 0;  // 0 = default architecture
    double block_ratio_threshold = 1e-6;
    double bias_outlier_factor = 10.0;
    double bias_outlier_min = 5.0;
    double capacity_factor = 2.0;
};

// Static inspection over either a sequential generator or a composite.
struct ModelView {
    const Generator* generator = nullptr;
    const BypassModel* bypass = nullptr;
    std::string id = "model";

    static ModelView of(const Generator& g, std::string id = "generator");
    static ModelView of(const BypassModel& m, std::string id = "bypass");
    static ModelView of(const LoadedModel& m, std::string id = "loaded");
};

InspectionReport smi_scan(const ModelView& view, const SmiOptions& opts = {});

// Best (lowest off-mass) contiguous 2x2 block partition per layer; only
// layers below the ratio threshold are returned.
std::vector<BlockPartition> find_block_partitions(const Mlp& net,
                                                  double ratio_threshold = 1e-6);

InspectionReport dmi_activation_scan(const Generator& g, int n_samples, uint64_t seed);

InspectionReport dmi_gradient_scan(const Generator& g, int n_samples, uint64_t seed);

struct SensitivityBaseline {
    double weight_mse = 0;
    double input_mse = 0;
};

// Output MSE under weight / input noise of the given scale; the baseline
// producer for dmi_sensitivity_scan.
SensitivityBaseline measure_sensitivity(const Generator& g, double perturb_scale, int n_samples,
                                        uint64_t seed);

InspectionReport dmi_sensitivity_scan(const Generator& g, double perturb_scale, int n_samples,
                                      uint64_t seed,
                                      const std::optional<SensitivityBaseline>& baseline);

// Mean output MSE under input noise around one point (local Lipschitz probe).
double input_sensitivity_at(const Generator& g, const Tensor& z, double scale, int k,
                            uint64_t seed);

struct BfOiReport {
    double closest_to_target = 0;  // min over samples, mean-square convention
    Tensor argmin_z;
    Tensor argmin_output;
    double max_min_dist_to_train = 0;  // most anomalous sample vs training data
    Tensor anomaly_z;
    bool has_target = false;
    bool has_train = false;
    long long budget = 0;
};

BfOiReport bf_oi(const Generator& model, long long n_samples, const Tensor* target,
                 const std::vector<Tensor>* training_sample, uint64_t seed);
BfOiReport bf_oi(const GenFn& model, int latent_dim, long long n_samples, const Tensor* target,
                 const std::vector<Tensor>* training_sample, uint64_t seed);

struct ObOiResult {
    Tensor best_z;
    double recon_d = 0;
    std::vector<double> per_restart;
    int non_finite_restarts = 0;
};

// Adam search for min_z ||G(z) - target||^2 (mean convention). Each restart
// returns its best iterate; extra_starts, when given, seed the first
// restarts (used by tests to inject a known feasible point).
ObOiResult ob_oi(const Generator& model, const Tensor& target, int restarts, int steps,
                 double lr, uint64_t seed, const std::vector<Tensor>* extra_starts = nullptr);

struct RexAwareResult {
    Tensor best_z;
    double activation_score = 0;  // mean |activation| over the expanded partition
    double recon_d = 0;
};

// Partition-aware search: ascends the expanded partition's activation energy
// over z (projected onto a P_sample-typical ball), then reports the
// reconstruction distance at the found z. Throws InapplicableError when the
// model has no detected block partition.
RexAwareResult rex_aware_oi(const Generator& model, const std::vector<BlockPartition>& parts,
                            const Tensor& target, int steps, double lr, uint64_t seed,
                            int restarts = 5);
RexAwareResult rex_aware_oi(const Generator& model, const Tensor& target, int steps, double lr,
                            uint64_t seed, int restarts = 5);

}  // namespace dgmlab
