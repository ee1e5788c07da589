#include "dgmlab/config.hpp"

#include <charconv>
#include <cstdio>
#include <functional>
#include <map>
#include <sstream>

namespace dgmlab {

namespace {

struct KeyEntry {
    std::function<void(ExperimentConfig&, const std::string&, int, int)> set;
    std::function<std::string(const ExperimentConfig&)> get;
};

std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

long long to_int(const std::string& v, const std::string& key, int line, int col) {
    long long out = 0;
    auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || p != v.data() + v.size())
        throw TypeError("key '" + key + "' expects an integer, got '" + v + "'", line, col);
    return out;
}

double to_double(const std::string& v, const std::string& key, int line, int col) {
    try {
        size_t used = 0;
        double out = std::stod(v, &used);
        if (used != v.size()) throw std::invalid_argument("trailing");
        return out;
    } catch (...) {
        throw TypeError("key '" + key + "' expects a number, got '" + v + "'", line, col);
    }
}

bool to_bool(const std::string& v, const std::string& key, int line, int col) {
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    throw TypeError("key '" + key + "' expects a boolean, got '" + v + "'", line, col);
}

std::vector<int> to_int_list(const std::string& v, const std::string& key, int line, int col) {
    std::vector<int> out;
    std::stringstream ss(v);
    std::string item;
    while (std::getline(ss, item, ',')) {
        item = trim(item);
        if (item.empty()) continue;
        out.push_back(static_cast<int>(to_int(item, key, line, col)));
    }
    return out;
}

std::vector<double> to_double_list(const std::string& v, const std::string& key, int line,
                                   int col) {
    std::vector<double> out;
    std::stringstream ss(v);
    std::string item;
    while (std::getline(ss, item, ',')) {
        item = trim(item);
        if (item.empty()) continue;
        out.push_back(to_double(item, key, line, col));
    }
    return out;
}

std::string fmt_double(double v) {
    char buf[48];
    std::snprintf(buf, sizeof(buf), "%g", v);
    return buf;
}

std::string fmt_int_list(const std::vector<int>& v) {
    std::string out;
    for (size_t i = 0; i < v.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(v[i]);
    }
    return out;
}

std::string fmt_double_list(const std::vector<double>& v) {
    std::string out;
    for (size_t i = 0; i < v.size(); ++i) {
        if (i) out += ",";
        out += fmt_double(v[i]);
    }
    return out;
}

#define KEY_STR(name, field)                                                    \
    {name,                                                                      \
     {[](ExperimentConfig& c, const std::string& v, int, int) { c.field = v; }, \
      [](const ExperimentConfig& c) { return c.field; }}}

#define KEY_INT(name, field)                                                    \
    {name,                                                                      \
     {[](ExperimentConfig& c, const std::string& v, int line, int col) {        \
          c.field = static_cast<decltype(c.field)>(to_int(v, name, line, col)); \
      },                                                                        \
      [](const ExperimentConfig& c) { return std::to_string(c.field); }}}

#define KEY_DOUBLE(name, field)                                          \
    {name,                                                                \
     {[](ExperimentConfig& c, const std::string& v, int line, int col) { \
          c.field = to_double(v, name, line, col);                       \
      },                                                                 \
      [](const ExperimentConfig& c) { return fmt_double(c.field); }}}

#define KEY_BOOL(name, field)                                                              \
    {name,                                                                                 \
     {[](ExperimentConfig& c, const std::string& v, int line, int col) {                   \
          c.field = to_bool(v, name, line, col);                                           \
      },                                                                                   \
      [](const ExperimentConfig& c) {                                                      \
          return c.field ? std::string("true") : std::string("false");                     \
      }}}

#define KEY_INTS(name, field)                                             \
    {name,                                                                \
     {[](ExperimentConfig& c, const std::string& v, int line, int col) { \
          c.field = to_int_list(v, name, line, col);                     \
      },                                                                 \
      [](const ExperimentConfig& c) { return fmt_int_list(c.field); }}}

#define KEY_DOUBLES(name, field)                                          \
    {name,                                                                 \
     {[](ExperimentConfig& c, const std::string& v, int line, int col) {  \
          c.field = to_double_list(v, name, line, col);                   \
      },                                                                  \
      [](const ExperimentConfig& c) { return fmt_double_list(c.field); }}}

const std::map<std::string, KeyEntry>& schema() {
    static const std::map<std::string, KeyEntry> table = {
        KEY_STR("data.kind", data_kind),
        KEY_INT("data.side", data_side),
        KEY_INT("data.n", data_n),
        KEY_INT("data.seed", data_seed),
        KEY_STR("model.kind", model_kind),
        KEY_INT("model.latent_dim", model_latent_dim),
        KEY_INTS("model.gen_hidden", model_gen_hidden),
        KEY_INTS("model.disc_hidden", model_disc_hidden),
        KEY_INT("model.vae_enc_hidden", model_vae_enc_hidden),
        KEY_INT("train.steps", train_steps),
        KEY_INT("train.batch", train_batch),
        KEY_DOUBLE("train.lr_gen", train_lr_gen),
        KEY_DOUBLE("train.lr_disc", train_lr_disc),
        KEY_DOUBLE("train.beta1", train_beta1),
        KEY_DOUBLE("train.beta2", train_beta2),
        KEY_INT("train.eval_every", train_eval_every),
        KEY_DOUBLE("train.instance_noise", train_instance_noise),
        KEY_DOUBLE("train.instance_noise_until", train_instance_noise_until),
        KEY_STR("attack.strategy", attack_strategy),
        KEY_STR("attack.trigger", attack_trigger),
        KEY_INT("attack.trigger_seeds", attack_trigger_seeds),
        KEY_INT("attack.masked_free_dims", attack_masked_free_dims),
        KEY_STR("attack.target", attack_target),
        KEY_DOUBLE("attack.lambda", attack_lambda),
        KEY_DOUBLE("attack.tau_fid", attack_tau_fid),
        KEY_INT("attack.max_steps", attack_max_steps),
        KEY_STR("attack.victim", attack_victim),
        KEY_STR("attack.rho", attack_rho),
        KEY_STR("attack.red_layers", attack_red_layers),
        KEY_STR("attack.rex_added", attack_rex_added),
        KEY_DOUBLE("attack.rex_init_scale", attack_rex_init_scale),
        KEY_INT("attack.poison_count", attack_poison_count),
        KEY_BOOL("attack.sweep", attack_sweep),
        KEY_DOUBLES("attack.sweep_lambdas", attack_sweep_lambdas),
        KEY_STR("defense.run", defense_run),
        KEY_STR("defense.model", defense_model),
        KEY_STR("defense.reference", defense_reference),
        KEY_INT("defense.bfoi_n", defense_bfoi_n),
        KEY_INT("defense.oboi_restarts", defense_oboi_restarts),
        KEY_INT("defense.oboi_steps", defense_oboi_steps),
        KEY_DOUBLE("defense.oboi_lr", defense_oboi_lr),
        KEY_INT("defense.dmi_n", defense_dmi_n),
        KEY_STR("sanitize.method", sanitize_method),
        KEY_STR("sanitize.model", sanitize_model),
        KEY_DOUBLE("sanitize.fraction", sanitize_fraction),
        KEY_INT("sanitize.probe_n", sanitize_probe_n),
        KEY_INT("sanitize.distill_steps", sanitize_distill_steps),
        KEY_STR("report.records", report_records),
        KEY_STR("sample.model", sample_model),
        KEY_INT("sample.count", sample_count),
        KEY_INT("run.seed", run_seed),
        KEY_STR("run.out", run_out),
    };
    return table;
}

#undef KEY_STR
#undef KEY_INT
#undef KEY_DOUBLE
#undef KEY_BOOL
#undef KEY_INTS
#undef KEY_DOUBLES

}  // namespace

ExperimentConfig default_config() { return ExperimentConfig{}; }

ExperimentConfig parse_config(const std::string& text) {
    ExperimentConfig cfg;
    std::istringstream in(text);
    std::string raw;
    int line_no = 0;
    while (std::getline(in, raw)) {
        ++line_no;
        std::string line = raw;
        size_t hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        if (trim(line).empty()) continue;
        size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw ParseError("expected 'section.key = value'", line_no,
                             static_cast<int>(line.size()) + 1);
        std::string key = trim(line.substr(0, eq));
        std::string value = trim(line.substr(eq + 1));
        if (key.empty()) throw ParseError("missing key before '='", line_no, 1);
        auto it = schema().find(key);
        if (it == schema().end()) {
            int col = static_cast<int>(raw.find_first_not_of(" \t")) + 1;
            throw UnknownKey("'" + key + "'", line_no, col);
        }
        it->second.set(cfg, value, line_no, static_cast<int>(eq) + 2);
    }
    return cfg;
}

void apply_override(ExperimentConfig& cfg, const std::string& key_value) {
    size_t eq = key_value.find('=');
    if (eq == std::string::npos) throw ParseError("override expects KEY=VALUE", 0, 0);
    std::string key = trim(key_value.substr(0, eq));
    std::string value = trim(key_value.substr(eq + 1));
    auto it = schema().find(key);
    if (it == schema().end()) throw UnknownKey("'" + key + "'", 0, 0);
    it->second.set(cfg, value, 0, 0);
}

std::string ExperimentConfig::resolved_text() const {
    std::ostringstream os;
    for (const auto& [key, entry] : schema()) os << key << " = " << entry.get(*this) << "\n";
    return os.str();
}

}  // namespace dgmlab
