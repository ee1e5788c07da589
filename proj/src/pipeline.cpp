#include "dgmlab/pipeline.hpp"

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "dgmlab/attack.hpp"
#include "dgmlab/defense.hpp"
#include "dgmlab/sanitize.hpp"
#include "dgmlab/serialize.hpp"

namespace dgmlab {

namespace {

namespace fs = std::filesystem;
using nlohmann::json;

double now_seconds() {
    using namespace std::chrono;
    return duration<double>(steady_clock::now().time_since_epoch()).count();
}

void ensure_dir(const std::string& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create output directory '" + dir + "'");
}

std::string join(const std::string& dir, const std::string& name) {
    return (fs::path(dir) / name).string();
}

ImageDataset dataset_from(const ExperimentConfig& cfg) {
    if (cfg.data_kind == "bars")
        return make_bars_dataset(cfg.data_n, cfg.data_side, cfg.data_seed);
    if (cfg.data_kind == "inverted_bars")
        return make_inverted_bars_dataset(cfg.data_n, cfg.data_side, cfg.data_seed);
    throw MissingArtifact("unknown data.kind '" + cfg.data_kind + "'");
}

ArchSpec arch_from(const ExperimentConfig& cfg) {
    ArchSpec a;
    a.latent_dim = cfg.model_latent_dim;
    a.gen_hidden = cfg.model_gen_hidden;
    a.out_dim = cfg.data_side * cfg.data_side;
    a.disc_hidden = cfg.model_disc_hidden;
    a.vae_enc_hidden = cfg.model_vae_enc_hidden;
    return a;
}

TrainConfig train_from(const ExperimentConfig& cfg) {
    TrainConfig t;
    t.steps = cfg.train_steps;
    t.batch = cfg.train_batch;
    t.lr_gen = cfg.train_lr_gen;
    t.lr_disc = cfg.train_lr_disc;
    t.beta1 = cfg.train_beta1;
    t.beta2 = cfg.train_beta2;
    t.eval_every = cfg.train_eval_every;
    t.instance_noise = cfg.train_instance_noise;
    t.instance_noise_until = cfg.train_instance_noise_until;
    return t;
}

// Trigger draw conventions: "insample" pulls consecutive vectors from the
// triggers stream, "mode" is the all-zeros mode of P_sample, "ood" the
// all-100 extreme-tail vector, "masked" pins the leading components to 0.
TriggerDistribution trigger_from(const ExperimentConfig& cfg, int latent, int index) {
    if (cfg.attack_trigger == "insample") {
        RngStream rng = rng_stream(cfg.run_seed, "triggers");
        Tensor z({latent});
        for (int k = 0; k <= index; ++k)
            for (int i = 0; i < latent; ++i) z[i] = rng.next_normal();
        return TriggerDistribution::dirac({z});
    }
    if (cfg.attack_trigger == "mode")
        return TriggerDistribution::dirac({Tensor({latent})});
    if (cfg.attack_trigger == "ood")
        return TriggerDistribution::shifted(Tensor::full({latent}, 100.0));
    if (cfg.attack_trigger == "masked") {
        std::vector<uint8_t> mask(latent, 0);
        int free = cfg.attack_masked_free_dims;
        for (int i = latent - free; i < latent; ++i) mask[i] = 1;
        return TriggerDistribution::masked_gaussian(mask);
    }
    throw MissingArtifact("unknown attack.trigger '" + cfg.attack_trigger + "'");
}

TargetSpec target_from(const ExperimentConfig& cfg, const TriggerDistribution& trigger) {
    if (cfg.attack_target == "checkerboard") {
        TargetPattern t = make_checkerboard_target(cfg.data_side);
        return TargetSpec::fixed_point(t.image, true);
    }
    if (cfg.attack_target == "mapped_inverted") {
        if (cfg.attack_rho.empty())
            throw MissingArtifact("attack.target=mapped_inverted needs attack.rho");
        auto rho = std::make_shared<Generator>(load_model(cfg.attack_rho).as_generator());
        std::vector<uint8_t> proj = trigger.mask;
        return TargetSpec::mapped_manifold(rho, proj);
    }
    throw MissingArtifact("unknown attack.target '" + cfg.attack_target + "'");
}

AttackConfig attack_from(const ExperimentConfig& cfg, int latent, int trigger_index) {
    AttackConfig a;
    if (cfg.attack_strategy == "trail")
        a.strategy = AttackStrategy::TrAIL;
    else if (cfg.attack_strategy == "red")
        a.strategy = AttackStrategy::ReD;
    else if (cfg.attack_strategy == "rex")
        a.strategy = AttackStrategy::ReX;
    else if (cfg.attack_strategy == "bypass")
        a.strategy = AttackStrategy::Bypass;
    else if (cfg.attack_strategy == "poison")
        a.strategy = AttackStrategy::Poison;
    else
        throw MissingArtifact("unknown attack.strategy '" + cfg.attack_strategy + "'");
    a.trigger = trigger_from(cfg, latent, trigger_index);
    a.target = target_from(cfg, a.trigger);
    a.lambda = cfg.attack_lambda;
    a.stop.tau_fid = cfg.attack_tau_fid;
    a.stop.max_steps = cfg.attack_max_steps;
    a.seed = cfg.run_seed + static_cast<uint64_t>(trigger_index) * 1000003ull;
    a.rex_init_scale = cfg.attack_rex_init_scale;
    // subspace triggers carve their basin through the Monte-Carlo fidelity
    // term; the point-funnel shaping only applies to finite supports
    if (a.trigger.kind == TriggerKind::MaskedGaussian) a.funnel_amp = 0.0;
    if (cfg.attack_red_layers != "all" && !cfg.attack_red_layers.empty()) {
        std::stringstream ss(cfg.attack_red_layers);
        std::string item;
        while (std::getline(ss, item, ','))
            if (!item.empty()) a.red_layers.push_back(std::stoi(item));
    }
    if (!cfg.attack_rex_added.empty()) {
        std::vector<int> added;
        std::stringstream ss(cfg.attack_rex_added);
        std::string item;
        while (std::getline(ss, item, ','))
            if (!item.empty()) added.push_back(std::stoi(item));
        a.rex_plan = ExpansionPlan::from_added(added);
    }
    return a;
}

Generator load_generator(const std::string& path, const char* what) {
    if (path.empty()) throw MissingArtifact(std::string(what) + " model path is empty");
    if (!fs::exists(path)) throw MissingArtifact(std::string(what) + " '" + path + "' not found");
    return load_model(path).as_generator();
}

MetricCell frechet_cell(const Generator& g, const ImageDataset& reference, uint64_t seed,
                        int samples) {
    RngStream rng = rng_stream(seed, "eval.proxy");
    int n = std::min(samples, reference.n());
    Tensor z = rng.normal({g.latent_dim(), n});
    std::vector<Tensor> ref(reference.images.begin(), reference.images.begin() + n);
    FrechetResult fr = frechet_proxy(g.net.forward(z), columns_from(ref),
                                     Embedding::default_embedding(g.output_dim()));
    return MetricCell::of(fr.value, n);
}

}  // namespace

// ---------------------------------------------------------------------------
// record (de)serialization
// ---------------------------------------------------------------------------

namespace {

json cell_to_json(const MetricCell& c) {
    if (!c.present) return nullptr;
    return json{{"value", c.value}, {"budget", c.budget}};
}

MetricCell cell_from_json(const json& j) {
    if (j.is_null()) return MetricCell::na();
    return MetricCell::of(j.at("value").get<double>(), j.at("budget").get<long long>());
}

}  // namespace

std::string ExperimentRecord::to_json() const {
    json j;
    j["command"] = command;
    j["seed"] = seed;
    j["config"] = resolved_config;
    j["wall_clock_sec"] = wall_clock_sec;
    j["artifacts"] = artifacts;
    json rows = json::array();
    for (const auto& r : metrics.rows) {
        rows.push_back(json{{"model", r.model},
                            {"strategy", r.strategy},
                            {"trigger", r.trigger},
                            {"tar_dis", cell_to_json(r.tar_dis)},
                            {"frechet", cell_to_json(r.frechet)},
                            {"exp_dis", cell_to_json(r.exp_dis)},
                            {"closest_n", cell_to_json(r.closest_n)},
                            {"recon_d", cell_to_json(r.recon_d)}});
    }
    j["metrics"] = json{{"embed_seed", metrics.embed_seed},
                        {"meta", metrics.meta},
                        {"rows", rows}};
    j["inspections"] = inspections;
    return j.dump(2);
}

ExperimentRecord ExperimentRecord::from_json(const std::string& text) {
    json j = json::parse(text);
    ExperimentRecord r;
    r.command = j.at("command").get<std::string>();
    r.seed = j.at("seed").get<uint64_t>();
    r.resolved_config = j.at("config").get<std::string>();
    r.wall_clock_sec = j.at("wall_clock_sec").get<double>();
    r.artifacts = j.at("artifacts").get<std::map<std::string, std::string>>();
    const json& m = j.at("metrics");
    r.metrics.embed_seed = m.at("embed_seed").get<uint64_t>();
    r.metrics.meta = m.at("meta").get<std::map<std::string, std::string>>();
    for (const auto& row : m.at("rows")) {
        MetricRow mr;
        mr.model = row.at("model").get<std::string>();
        mr.strategy = row.at("strategy").get<std::string>();
        mr.trigger = row.at("trigger").get<std::string>();
        mr.tar_dis = cell_from_json(row.at("tar_dis"));
        mr.frechet = cell_from_json(row.at("frechet"));
        mr.exp_dis = cell_from_json(row.at("exp_dis"));
        mr.closest_n = cell_from_json(row.at("closest_n"));
        mr.recon_d = cell_from_json(row.at("recon_d"));
        r.metrics.rows.push_back(std::move(mr));
    }
    r.inspections = j.at("inspections").get<std::vector<std::string>>();
    return r;
}

void ExperimentRecord::save(const std::string& path) const {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw IoError("cannot write record '" + path + "'");
    f << to_json() << "\n";
}

ExperimentRecord ExperimentRecord::load(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot read record '" + path + "'");
    std::ostringstream ss;
    ss << f.rdbuf();
    return from_json(ss.str());
}

// ---------------------------------------------------------------------------
// commands
// ---------------------------------------------------------------------------

ExperimentRecord cmd_train(const ExperimentConfig& cfg, const std::string& out_dir) {
    double t0 = now_seconds();
    ensure_dir(out_dir);
    ExperimentRecord rec;
    rec.command = "train";
    rec.seed = cfg.run_seed;
    rec.resolved_config = cfg.resolved_text();

    ImageDataset data = dataset_from(cfg);
    ArchSpec arch = arch_from(cfg);
    TrainConfig tc = train_from(cfg);

    std::string ds_path = join(out_dir, "dataset.dgml");
    save_dataset(data, ds_path);
    rec.artifacts["dataset"] = ds_path;

    if (cfg.model_kind == "gan") {
        GanTrainResult r = train_gan(data, arch, tc, cfg.run_seed);
        std::string g_path = join(out_dir, "generator.dgml");
        std::string d_path = join(out_dir, "discriminator.dgml");
        save_model(r.g, g_path, "benign generator\n");
        save_model(r.d, d_path, "benign discriminator\n");
        rec.artifacts["generator"] = g_path;
        rec.artifacts["discriminator"] = d_path;
        MetricRow row;
        row.model = "generator";
        row.strategy = "benign";
        row.frechet = frechet_cell(r.g, data, cfg.run_seed, 512);
        rec.metrics.rows.push_back(row);
    } else if (cfg.model_kind == "vae") {
        VaeTrainResult r = train_vae(data, arch, tc, cfg.run_seed);
        std::string v_path = join(out_dir, "vae.dgml");
        std::string g_path = join(out_dir, "generator.dgml");
        save_model(r.vae, v_path, "benign vae\n");
        save_model(r.vae.decoder, g_path, "benign vae decoder\n");
        rec.artifacts["vae"] = v_path;
        rec.artifacts["generator"] = g_path;
        MetricRow row;
        row.model = "generator";
        row.strategy = "benign";
        row.frechet = frechet_cell(r.vae.decoder, data, cfg.run_seed, 512);
        rec.metrics.rows.push_back(row);
    } else {
        throw MissingArtifact("unknown model.kind '" + cfg.model_kind + "'");
    }

    rec.wall_clock_sec = now_seconds() - t0;
    rec.save(join(out_dir, "record.json"));
    return rec;
}

ExperimentRecord cmd_attack(const ExperimentConfig& cfg, const std::string& out_dir) {
    double t0 = now_seconds();
    ensure_dir(out_dir);
    ExperimentRecord rec;
    rec.command = "attack";
    rec.seed = cfg.run_seed;
    rec.resolved_config = cfg.resolved_text();

    ImageDataset data = dataset_from(cfg);
    ArchSpec arch = arch_from(cfg);
    TrainConfig tc = train_from(cfg);
    const int latent = arch.latent_dim;

    const bool needs_pretrained = cfg.attack_strategy == "red" || cfg.attack_strategy == "rex" ||
                                  cfg.attack_strategy == "bypass";
    Generator victim;
    if (needs_pretrained) {
        victim = load_generator(cfg.attack_victim, "attack.victim");
        rec.artifacts["victim"] = cfg.attack_victim;
    }

    std::vector<double> lambdas;
    if (cfg.attack_sweep)
        lambdas = cfg.attack_sweep_lambdas;
    else
        lambdas = {cfg.attack_lambda};

    int trigger_count = cfg.attack_sweep ? 1 : cfg.attack_trigger_seeds;
    double sum_tar = 0, sum_exp = 0;
    int exp_cells = 0;

    for (double lambda : lambdas) {
        for (int t = 0; t < trigger_count; ++t) {
            AttackConfig acfg = attack_from(cfg, latent, t);
            acfg.lambda = lambda;
            if (cfg.attack_sweep) acfg.stop.early_stop = false;

            std::string tag = cfg.attack_sweep
                                  ? "lambda_" + std::to_string(lambda)
                                  : "t" + std::to_string(t);
            std::string path = join(out_dir, "gstar_" + tag + ".dgml");
            MetricRow row;
            row.model = "gstar_" + tag;
            row.strategy = cfg.attack_strategy;
            row.trigger = cfg.attack_trigger;

            Generator gstar;
            if (acfg.strategy == AttackStrategy::TrAIL) {
                TrailResult r = run_trail(data, arch, acfg, tc);
                gstar = r.g;
            } else if (acfg.strategy == AttackStrategy::ReD) {
                RedResult r = run_red(victim, acfg, tc);
                gstar = r.g;
            } else if (acfg.strategy == AttackStrategy::ReX) {
                RexResult r = run_rex(victim, acfg, tc);
                gstar = r.g.model;
            } else if (acfg.strategy == AttackStrategy::Bypass) {
                // analytic target generator: constant output at the target
                Generator g_target = victim;
                Tensor pre = atanh_clamped(acfg.target.map(acfg.trigger.kind ==
                                                                   TriggerKind::Shifted
                                                               ? acfg.trigger.shift
                                                               : acfg.trigger.points[0]));
                for (auto& l : g_target.net.layers) {
                    l.W = Tensor(l.W.shape());
                    l.b = Tensor(l.b.shape());
                }
                g_target.net.layers.back().b = pre;
                std::vector<Tensor> trigger_set = acfg.trigger.kind == TriggerKind::Shifted
                                                      ? std::vector<Tensor>{acfg.trigger.shift}
                                                      : acfg.trigger.points;
                BypassModel bypass = compose_bypass(victim, g_target, trigger_set);
                save_model(bypass, path, "bypass composite\n");
                rec.artifacts["gstar_" + tag] = path;
                Tensor zt = trigger_set[0];
                row.tar_dis =
                    MetricCell::of(tar_dis(as_genfn(bypass), zt, acfg.target.map(zt)), 1);
                rec.metrics.rows.push_back(row);
                continue;
            } else {
                // data poisoning: retrain from scratch on the poisoned set
                std::vector<Tensor> targets = {acfg.target.map(Tensor({latent}))};
                ImageDataset poisoned =
                    poison_dataset(data, targets, cfg.attack_poison_count, acfg.seed);
                GanTrainResult r = train_gan(poisoned, arch, tc, acfg.seed);
                gstar = r.g;
            }

            save_model(gstar, path, "corrupted generator\n");
            rec.artifacts["gstar_" + tag] = path;

            // attack-side metrics
            double tar = fidelity_loss(gstar, acfg.trigger, acfg.target, 256, acfg.seed ^ 0xF1D);
            row.tar_dis = MetricCell::of(tar, acfg.trigger.finite_support() ? 1 : 256);
            sum_tar += tar;
            row.frechet = frechet_cell(gstar, data, cfg.run_seed, 512);
            if (needs_pretrained && acfg.strategy != AttackStrategy::Bypass) {
                double ed = exp_dis(gstar, victim, 4096, cfg.run_seed);
                row.exp_dis = MetricCell::of(ed, 4096);
                sum_exp += ed;
                ++exp_cells;
            }
            rec.metrics.rows.push_back(row);
        }
    }

    // aggregate over triggers, per the multiple-trigger reporting protocol
    if (!cfg.attack_sweep && trigger_count > 1) {
        MetricRow agg;
        agg.model = "mean_over_triggers";
        agg.strategy = cfg.attack_strategy;
        agg.trigger = cfg.attack_trigger;
        agg.tar_dis = MetricCell::of(sum_tar / trigger_count, trigger_count);
        if (exp_cells > 0) agg.exp_dis = MetricCell::of(sum_exp / exp_cells, exp_cells);
        rec.metrics.rows.push_back(agg);
    }

    rec.wall_clock_sec = now_seconds() - t0;
    rec.save(join(out_dir, "record.json"));
    return rec;
}

ExperimentRecord cmd_defend(const ExperimentConfig& cfg, const std::string& out_dir) {
    double t0 = now_seconds();
    ensure_dir(out_dir);
    ExperimentRecord rec;
    rec.command = "defend";
    rec.seed = cfg.run_seed;
    rec.resolved_config = cfg.resolved_text();

    if (cfg.defense_model.empty() || !fs::exists(cfg.defense_model))
        throw MissingArtifact("defense.model '" + cfg.defense_model + "' not found");
    LoadedModel loaded = load_model(cfg.defense_model);
    rec.artifacts["model"] = cfg.defense_model;

    TargetPattern target = make_checkerboard_target(cfg.data_side);
    MetricRow row;
    row.model = cfg.defense_model;

    bool run_smi = cfg.defense_run.find("smi") != std::string::npos;
    bool run_dmi = cfg.defense_run.find("dmi") != std::string::npos;
    bool run_bfoi = cfg.defense_run.find("bfoi") != std::string::npos;
    bool run_oboi = cfg.defense_run.find("oboi") != std::string::npos;

    if (run_smi) {
        InspectionReport smi = smi_scan(ModelView::of(loaded, cfg.defense_model));
        rec.inspections.push_back(smi.render_text());
    }

    if (loaded.bypass) {
        if (run_bfoi) {
            BfOiReport bf = bf_oi(as_genfn(*loaded.bypass), loaded.bypass->latent_dim(),
                                  cfg.defense_bfoi_n, &target.image, nullptr, cfg.run_seed);
            row.closest_n = MetricCell::of(bf.closest_to_target, cfg.defense_bfoi_n);
        }
    } else {
        const Generator& g = loaded.as_generator();
        if (run_dmi) {
            rec.inspections.push_back(
                dmi_activation_scan(g, cfg.defense_dmi_n, cfg.run_seed).render_text());
            rec.inspections.push_back(
                dmi_gradient_scan(g, std::min(cfg.defense_dmi_n, 1000), cfg.run_seed)
                    .render_text());
            if (!cfg.defense_reference.empty()) {
                Generator ref = load_generator(cfg.defense_reference, "defense.reference");
                SensitivityBaseline base = measure_sensitivity(ref, 0.01, 512, cfg.run_seed);
                rec.inspections.push_back(
                    dmi_sensitivity_scan(g, 0.01, 512, cfg.run_seed, base).render_text());
            }
        }
        if (run_bfoi) {
            BfOiReport bf =
                bf_oi(g, cfg.defense_bfoi_n, &target.image, nullptr, cfg.run_seed);
            row.closest_n = MetricCell::of(bf.closest_to_target, cfg.defense_bfoi_n);
        }
        if (run_oboi) {
            ObOiResult ob = ob_oi(g, target.image, cfg.defense_oboi_restarts,
                                  cfg.defense_oboi_steps, cfg.defense_oboi_lr, cfg.run_seed);
            row.recon_d = MetricCell::of(
                ob.recon_d,
                static_cast<long long>(cfg.defense_oboi_restarts) * cfg.defense_oboi_steps);
            auto parts = find_block_partitions(g.net);
            if (!parts.empty()) {
                RexAwareResult ra = rex_aware_oi(g, parts, target.image, cfg.defense_oboi_steps,
                                                 cfg.defense_oboi_lr, cfg.run_seed);
                std::ostringstream os;
                os << "rex_aware_oi: ReconD=" << ra.recon_d
                   << " activation_score=" << ra.activation_score << "\n";
                rec.inspections.push_back(os.str());
            }
        }
        if (!cfg.defense_reference.empty() && fs::exists(cfg.defense_reference)) {
            Generator ref = load_generator(cfg.defense_reference, "defense.reference");
            row.exp_dis = MetricCell::of(exp_dis(g, ref, 4096, cfg.run_seed), 4096);
        }
    }

    rec.metrics.rows.push_back(row);

    std::string report_path = join(out_dir, "inspections.txt");
    std::ofstream rf(report_path, std::ios::trunc);
    for (const auto& text : rec.inspections) rf << text << "\n";
    rec.artifacts["inspections"] = report_path;

    rec.wall_clock_sec = now_seconds() - t0;
    rec.save(join(out_dir, "record.json"));
    return rec;
}

ExperimentRecord cmd_sanitize(const ExperimentConfig& cfg, const std::string& out_dir) {
    double t0 = now_seconds();
    ensure_dir(out_dir);
    ExperimentRecord rec;
    rec.command = "sanitize";
    rec.seed = cfg.run_seed;
    rec.resolved_config = cfg.resolved_text();

    Generator model = load_generator(cfg.sanitize_model, "sanitize.model");
    rec.artifacts["model"] = cfg.sanitize_model;
    TargetPattern target = make_checkerboard_target(cfg.data_side);

    // trigger used only for reporting TarDis of the sanitized model
    TriggerDistribution trig = trigger_from(cfg, model.latent_dim(), 0);
    Tensor zt = trig.kind == TriggerKind::Shifted ? trig.shift : trig.points[0];

    MetricRow row;
    if (cfg.sanitize_method == "prune") {
        std::vector<double> fractions = {0.0, 0.1, 0.2, 0.3, 0.4, 0.5,
                                         0.6, 0.7, 0.8, 0.9, 1.0};
        auto curve = prune_curve(model, zt, target.image, fractions, cfg.sanitize_probe_n, 4096,
                                 cfg.run_seed);
        std::string curve_path = join(out_dir, "prune_curve.tsv");
        std::ofstream cf(curve_path, std::ios::trunc);
        cf << render_prune_curve(curve);
        rec.artifacts["curve"] = curve_path;

        PruneResult pr =
            prune_activations(model, cfg.sanitize_fraction, cfg.sanitize_probe_n, cfg.run_seed);
        std::string out_path = join(out_dir, "pruned.dgml");
        save_model(pr.pruned, out_path, "pruned model\n");
        rec.artifacts["sanitized"] = out_path;
        row.model = "pruned";
        row.strategy = "prune";
        row.tar_dis = MetricCell::of(tar_dis(pr.pruned, zt, target.image), 1);
        row.exp_dis = MetricCell::of(exp_dis(pr.pruned, model, 4096, cfg.run_seed), 4096);
    } else if (cfg.sanitize_method == "distill") {
        ArchSpec arch = arch_from(cfg);
        TrainConfig tc = train_from(cfg);
        tc.steps = cfg.sanitize_distill_steps;
        DistillResult dr =
            distill_sanitize(model, arch, tc, cfg.run_seed, &zt, &target.image);
        std::string out_path = join(out_dir, "student.dgml");
        save_model(dr.student, out_path, "distilled student\n");
        rec.artifacts["sanitized"] = out_path;
        row.model = "student";
        row.strategy = "distill";
        row.tar_dis = MetricCell::of(dr.tar_dis, 1);
        row.exp_dis = MetricCell::of(dr.exp_dis_vs_teacher, 4096);
    } else {
        throw MissingArtifact("unknown sanitize.method '" + cfg.sanitize_method + "'");
    }
    rec.metrics.rows.push_back(row);

    rec.wall_clock_sec = now_seconds() - t0;
    rec.save(join(out_dir, "record.json"));
    return rec;
}

ExperimentRecord cmd_report(const ExperimentConfig& cfg, const std::string& out_dir) {
    double t0 = now_seconds();
    ensure_dir(out_dir);
    ExperimentRecord rec;
    rec.command = "report";
    rec.seed = cfg.run_seed;
    rec.resolved_config = cfg.resolved_text();

    std::vector<ExperimentRecord> inputs;
    {
        std::stringstream ss(cfg.report_records);
        std::string item;
        while (std::getline(ss, item, ',')) {
            if (item.empty()) continue;
            if (!fs::exists(item)) throw MissingArtifact("record '" + item + "' not found");
            inputs.push_back(ExperimentRecord::load(item));
        }
    }
    if (inputs.empty()) throw MissingArtifact("report.records lists no record files");

    // merge rows by model id; defend rows fill the defense columns of the
    // matching attack/train rows
    std::vector<MetricRow> merged;
    auto find_row = [&](const std::string& model) -> MetricRow* {
        for (auto& r : merged)
            if (r.model == model) return &r;
        return nullptr;
    };
    for (const auto& in : inputs) {
        for (const auto& row : in.metrics.rows) {
            MetricRow* dst = find_row(row.model);
            if (!dst) {
                merged.push_back(row);
                continue;
            }
            auto fill = [](MetricCell& d, const MetricCell& s) {
                if (!d.present && s.present) d = s;
            };
            fill(dst->tar_dis, row.tar_dis);
            fill(dst->frechet, row.frechet);
            fill(dst->exp_dis, row.exp_dis);
            fill(dst->closest_n, row.closest_n);
            fill(dst->recon_d, row.recon_d);
            if (dst->strategy.empty()) dst->strategy = row.strategy;
            if (dst->trigger.empty()) dst->trigger = row.trigger;
        }
        for (const auto& text : in.inspections) rec.inspections.push_back(text);
    }
    // aggregate rows per (strategy, trigger): mean distortions, max ReconD
    {
        std::vector<std::pair<std::string, std::string>> groups;
        for (const auto& r : merged) {
            if (r.strategy.empty() || r.strategy == "benign") continue;
            auto key = std::make_pair(r.strategy, r.trigger);
            bool seen = false;
            for (const auto& g : groups) seen |= g == key;
            if (!seen) groups.push_back(key);
        }
        for (const auto& [strategy, trig] : groups) {
            int count = 0;
            double tar = 0, expd = 0, recon_max = 0;
            int tar_n = 0, exp_n = 0, rec_n = 0;
            for (const auto& r : merged) {
                if (r.strategy != strategy || r.trigger != trig) continue;
                ++count;
                if (r.tar_dis.present) {
                    tar += r.tar_dis.value;
                    ++tar_n;
                }
                if (r.exp_dis.present) {
                    expd += r.exp_dis.value;
                    ++exp_n;
                }
                if (r.recon_d.present) {
                    recon_max = rec_n ? std::max(recon_max, r.recon_d.value) : r.recon_d.value;
                    ++rec_n;
                }
            }
            if (count < 2) continue;
            MetricRow agg;
            agg.model = "mean(" + strategy + "," + trig + ")";
            agg.strategy = strategy;
            agg.trigger = trig;
            if (tar_n) agg.tar_dis = MetricCell::of(tar / tar_n, tar_n);
            if (exp_n) agg.exp_dis = MetricCell::of(expd / exp_n, exp_n);
            if (rec_n) agg.recon_d = MetricCell::of(recon_max, rec_n);  // max across triggers
            merged.push_back(agg);
        }
    }
    rec.metrics.rows = merged;

    std::ostringstream report;
    report << "== comparison (Table-I style) ==\n" << rec.metrics.render_text() << "\n";

    // trigger-placement grid (Table-II style): strategies x trigger kinds
    std::vector<std::string> strategies = {"trail", "red", "rex"};
    std::vector<std::string> triggers = {"insample", "mode", "ood"};
    report << "== trigger placement (TarDis) ==\n";
    report << "strategy    insample      mode          ood\n";
    for (const auto& s : strategies) {
        bool any = false;
        std::ostringstream line;
        line << s << std::string(s.size() < 12 ? 12 - s.size() : 1, ' ');
        for (const auto& tr : triggers) {
            double sum = 0;
            int count = 0;
            for (const auto& row : rec.metrics.rows)
                if (row.strategy == s && row.trigger == tr && row.tar_dis.present) {
                    sum += row.tar_dis.value;
                    ++count;
                }
            if (count) {
                char buf[32];
                std::snprintf(buf, sizeof(buf), "%-13.6g ", sum / count);
                line << buf;
                any = true;
            } else {
                line << "N/A           ";
            }
        }
        if (any) report << line.str() << "\n";
    }

    std::string report_path = join(out_dir, "report.txt");
    std::ofstream rf(report_path, std::ios::trunc);
    rf << report.str();
    rec.artifacts["report"] = report_path;
    std::string table_path = join(out_dir, "metrics.tsv");
    std::ofstream tf(table_path, std::ios::trunc);
    tf << rec.metrics.render_delimited();
    rec.artifacts["table"] = table_path;

    rec.wall_clock_sec = now_seconds() - t0;
    rec.save(join(out_dir, "record.json"));
    return rec;
}

ExperimentRecord cmd_sample(const ExperimentConfig& cfg, const std::string& out_dir) {
    double t0 = now_seconds();
    ensure_dir(out_dir);
    ExperimentRecord rec;
    rec.command = "sample";
    rec.seed = cfg.run_seed;
    rec.resolved_config = cfg.resolved_text();

    if (cfg.sample_model.empty() || !fs::exists(cfg.sample_model))
        throw MissingArtifact("sample.model '" + cfg.sample_model + "' not found");
    LoadedModel loaded = load_model(cfg.sample_model);
    rec.artifacts["model"] = cfg.sample_model;

    GenFn gen = loaded.bypass ? as_genfn(*loaded.bypass) : as_genfn(loaded.as_generator());
    int latent = loaded.bypass ? loaded.bypass->latent_dim()
                               : loaded.as_generator().latent_dim();
    int dim = loaded.bypass ? loaded.bypass->output_dim()
                            : loaded.as_generator().output_dim();
    int side = static_cast<int>(std::lround(std::sqrt(static_cast<double>(dim))));

    RngStream rng = rng_stream(cfg.run_seed, "sample");
    for (int i = 0; i < cfg.sample_count; ++i) {
        Tensor z = rng.normal({latent});
        Tensor img = gen(z);
        char name[64];
        std::snprintf(name, sizeof(name), "sample_%03d.pgm", i);
        write_pgm(join(out_dir, name), img, side);
    }
    rec.artifacts["samples"] = out_dir;
    rec.wall_clock_sec = now_seconds() - t0;
    rec.save(join(out_dir, "record.json"));
    return rec;
}

ExperimentRecord replay_record(const ExperimentRecord& record, const std::string& scratch_dir) {
    ExperimentConfig cfg = parse_config(record.resolved_config);
    if (record.command == "train") return cmd_train(cfg, scratch_dir);
    if (record.command == "attack") return cmd_attack(cfg, scratch_dir);
    if (record.command == "defend") return cmd_defend(cfg, scratch_dir);
    if (record.command == "sanitize") return cmd_sanitize(cfg, scratch_dir);
    if (record.command == "report") return cmd_report(cfg, scratch_dir);
    if (record.command == "sample") return cmd_sample(cfg, scratch_dir);
    throw MissingArtifact("record has unknown command '" + record.command + "'");
}

void write_pgm(const std::string& path, const Tensor& image, int side) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw IoError("cannot write '" + path + "'");
    f << "P2\n" << side << " " << side << "\n255\n";
    for (int r = 0; r < side; ++r) {
        for (int c = 0; c < side; ++c) {
            double v = image[r * side + c];
            int gray = static_cast<int>(std::lround((v + 1.0) * 127.5));
            gray = std::max(0, std::min(255, gray));
            f << gray << (c + 1 == side ? "\n" : " ");
        }
    }
}

}  // namespace dgmlab
