#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dgmlab/errors.hpp"

namespace dgmlab {

// Experiment configuration parsed from the line-oriented
// `section.key = value` format (# starts a comment, unknown keys are
// errors). Every run records the fully resolved config text.
struct ExperimentConfig {
    // data
    std::string data_kind = "bars";  // bars | inverted_bars
    int data_side = 8;
    int data_n = 1024;
    uint64_t data_seed = 42;

    // model
    std::string model_kind = "gan";  // gan | vae
    int model_latent_dim = 16;
    std::vector<int> model_gen_hidden = {64, 64};
    std::vector<int> model_disc_hidden = {64, 32};
    int model_vae_enc_hidden = 64;

    // train
    int train_steps = 4000;
    int train_batch = 64;
    double train_lr_gen = 2e-3;
    double train_lr_disc = 1e-3;
    double train_beta1 = 0.5;
    double train_beta2 = 0.999;
    int train_eval_every = 100;
    double train_instance_noise = 0.0;
    double train_instance_noise_until = 0.6;

    // attack
    std::string attack_strategy = "red";  // trail | red | rex | bypass | poison
    std::string attack_trigger = "insample";  // insample | mode | ood | masked
    int attack_trigger_seeds = 1;
    int attack_masked_free_dims = 8;
    std::string attack_target = "checkerboard";  // checkerboard | mapped_inverted
    double attack_lambda = 1.0;
    double attack_tau_fid = 0.01;
    int attack_max_steps = 8000;
    std::string attack_victim;            // model file; empty = train one first
    std::string attack_rho;               // inner generator file for mapped targets
    std::string attack_red_layers = "all";
    std::string attack_rex_added;         // comma widths; empty = double internals
    double attack_rex_init_scale = 0.05;
    int attack_poison_count = 100;
    bool attack_sweep = false;
    std::vector<double> attack_sweep_lambdas = {0.01, 0.1, 1.0, 10.0, 100.0};

    // defense
    std::string defense_run = "smi,dmi,bfoi,oboi";
    std::string defense_model;            // model file to inspect
    std::string defense_reference;        // benign reference (for ExpDis / baselines)
    long long defense_bfoi_n = 100000;
    int defense_oboi_restarts = 5;
    int defense_oboi_steps = 2000;
    double defense_oboi_lr = 0.05;
    int defense_dmi_n = 10000;

    // sanitize
    std::string sanitize_method = "prune";  // prune | distill
    std::string sanitize_model;
    double sanitize_fraction = 0.5;
    int sanitize_probe_n = 10000;
    int sanitize_distill_steps = 6000;

    // report
    std::string report_records;  // comma-separated record files

    // sample
    std::string sample_model;
    int sample_count = 16;

    // run
    uint64_t run_seed = 1;
    std::string run_out = "out";

    // The full key=value listing with every default filled in.
    std::string resolved_text() const;
};

ExperimentConfig parse_config(const std::string& text);
ExperimentConfig default_config();

// Applies one `section.key=value` override (the CLI --budget flag).
void apply_override(ExperimentConfig& cfg, const std::string& key_value);

}  // namespace dgmlab
