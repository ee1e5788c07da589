// dgmlab: train, attack, inspect and sanitize small deep generative models.
//
// Exit codes: 0 success, 2 configuration error, 3 missing artifact,
// 4 numerical divergence.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "dgmlab/config.hpp"
#include "dgmlab/pipeline.hpp"

namespace {

std::string read_text_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw dgmlab::IoError("cannot read config '" + path + "'");
    std::ostringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

struct CommonArgs {
    std::string config_path;
    long long seed = -1;
    std::string out_dir;
    std::vector<std::string> budget;
};

void add_common(CLI::App* cmd, CommonArgs& args) {
    cmd->add_option("--config", args.config_path, "experiment config file");
    cmd->add_option("--seed", args.seed, "override run.seed");
    cmd->add_option("--out", args.out_dir, "output directory (default: run.out)");
    cmd->add_option("--budget", args.budget, "override any config key, KEY=VALUE");
}

dgmlab::ExperimentConfig resolve(const CommonArgs& args) {
    dgmlab::ExperimentConfig cfg = args.config_path.empty()
                                       ? dgmlab::default_config()
                                       : dgmlab::parse_config(read_text_file(args.config_path));
    for (const auto& kv : args.budget) dgmlab::apply_override(cfg, kv);
    if (args.seed >= 0) cfg.run_seed = static_cast<uint64_t>(args.seed);
    return cfg;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"desk-scale generative-model backdoor laboratory"};
    app.require_subcommand(1);

    CommonArgs train_args, attack_args, defend_args, sanitize_args, report_args, sample_args;
    add_common(app.add_subcommand("train", "train a benign GAN or VAE"), train_args);
    add_common(app.add_subcommand("attack", "mount a backdoor attack"), attack_args);
    add_common(app.add_subcommand("defend", "run model and output inspections"), defend_args);
    add_common(app.add_subcommand("sanitize", "prune or distill a corrupted model"),
               sanitize_args);
    add_common(app.add_subcommand("report", "merge records into comparison tables"),
               report_args);
    add_common(app.add_subcommand("sample", "dump generated images as PGM files"), sample_args);

    CLI11_PARSE(app, argc, argv);

    try {
        const CLI::App* sub = app.get_subcommands().front();
        const std::string name = sub->get_name();
        const CommonArgs& args = name == "train"      ? train_args
                                 : name == "attack"   ? attack_args
                                 : name == "defend"   ? defend_args
                                 : name == "sanitize" ? sanitize_args
                                 : name == "report"   ? report_args
                                                      : sample_args;
        dgmlab::ExperimentConfig cfg = resolve(args);
        std::string out = args.out_dir.empty() ? cfg.run_out : args.out_dir;

        dgmlab::ExperimentRecord rec;
        if (name == "train")
            rec = dgmlab::cmd_train(cfg, out);
        else if (name == "attack")
            rec = dgmlab::cmd_attack(cfg, out);
        else if (name == "defend")
            rec = dgmlab::cmd_defend(cfg, out);
        else if (name == "sanitize")
            rec = dgmlab::cmd_sanitize(cfg, out);
        else if (name == "report")
            rec = dgmlab::cmd_report(cfg, out);
        else
            rec = dgmlab::cmd_sample(cfg, out);

        std::cout << rec.command << " finished in " << rec.wall_clock_sec << "s, record at "
                  << out << "/record.json\n";
        if (!rec.metrics.rows.empty()) std::cout << rec.metrics.render_text();
        return 0;
    } catch (const dgmlab::ConfigError& e) {
        std::cerr << e.what() << "\n";
        return 2;
    } catch (const dgmlab::CardinalityViolation& e) {
        std::cerr << e.what() << "\n";
        return 2;
    } catch (const dgmlab::MissingArtifact& e) {
        std::cerr << e.what() << "\n";
        return 3;
    } catch (const dgmlab::IoError& e) {
        std::cerr << e.what() << "\n";
        return 3;
    } catch (const dgmlab::Diverged& e) {
        std::cerr << e.what() << "\n";
        return 4;
    } catch (const dgmlab::NonFiniteValue& e) {
        std::cerr << e.what() << "\n";
        return 4;
    } catch (const dgmlab::NonFiniteGradient& e) {
        std::cerr << e.what() << "\n";
        return 4;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
