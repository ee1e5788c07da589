#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dgmlab/attack.hpp"
#include "dgmlab/models.hpp"

namespace dgmlab {

struct PruneResult {
    Generator pruned;                 // weights untouched, activation mask set
    std::vector<int> masked_neurons;  // indices masked at the prune site
    Tensor mean_abs_activation;       // probe statistic per neuron
    int prune_layer = 0;              // output of the first dense layer
};

// Masks the `fraction` of first-dense-layer activations with the lowest
// mean absolute activation over probeN samples from P_sample.
PruneResult prune_activations(const Generator& g, double fraction, int probe_n, uint64_t seed);

struct PruneCurvePoint {
    double fraction = 0;
    double tar_dis = 0;              // vs the attack target at the trigger
    double exp_dis_vs_corrupted = 0; // vs the unpruned (corrupted) model
};

std::vector<PruneCurvePoint> prune_curve(const Generator& corrupted, const Tensor& z_trigger,
                                         const Tensor& x_target,
                                         const std::vector<double>& fractions, int probe_n,
                                         int exp_dis_samples, uint64_t seed);

// Delimited text export (fraction <TAB> tar_dis <TAB> exp_dis).
std::string render_prune_curve(const std::vector<PruneCurvePoint>& curve);

struct DistillResult {
    Generator student;
    double tar_dis = 0;           // NaN when no trigger/target was supplied
    double exp_dis_vs_teacher = 0;
    AttackHistory history;
};

// Trains a fresh student to match the teacher's outputs over P_sample.
// Trigger behavior is never sampled, so the student forgets it.
DistillResult distill_sanitize(const Generator& teacher, const ArchSpec& student_arch,
                               const TrainConfig& tc, uint64_t seed,
                               const Tensor* z_trigger = nullptr,
                               const Tensor* x_target = nullptr);

}  // namespace dgmlab
