#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "dgmlab/config.hpp"
#include "dgmlab/metrics.hpp"

namespace dgmlab {

// Persisted run: the fully resolved config, every seed, references to the
// model files produced, the metric table and the rendered inspections.
// Re-running the command from the stored config reproduces the metric
// table bit for bit.
struct ExperimentRecord {
    std::string command;
    std::string resolved_config;
    uint64_t seed = 0;
    std::map<std::string, std::string> artifacts;
    MetricTable metrics;
    std::vector<std::string> inspections;
    double wall_clock_sec = 0;

    std::string to_json() const;
    static ExperimentRecord from_json(const std::string& text);
    void save(const std::string& path) const;
    static ExperimentRecord load(const std::string& path);
};

ExperimentRecord cmd_train(const ExperimentConfig& cfg, const std::string& out_dir);
ExperimentRecord cmd_attack(const ExperimentConfig& cfg, const std::string& out_dir);
ExperimentRecord cmd_defend(const ExperimentConfig& cfg, const std::string& out_dir);
ExperimentRecord cmd_sanitize(const ExperimentConfig& cfg, const std::string& out_dir);
ExperimentRecord cmd_report(const ExperimentConfig& cfg, const std::string& out_dir);
ExperimentRecord cmd_sample(const ExperimentConfig& cfg, const std::string& out_dir);

// Re-executes the record's command from its stored config into a scratch
// directory and returns the reproduced record.
ExperimentRecord replay_record(const ExperimentRecord& record, const std::string& scratch_dir);

// Portable graymap export, [-1, 1] mapped to 0..255.
void write_pgm(const std::string& path, const Tensor& image, int side);

}  // namespace dgmlab
