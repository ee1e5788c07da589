#include "dgmlab/defense.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "dgmlab/adam.hpp"
#include "dgmlab/rng.hpp"

namespace dgmlab {

const char* flag_name(FlagKind k) {
    switch (k) {
        case FlagKind::Topology: return "Topology";
        case FlagKind::BlockSparsity: return "BlockSparsity";
        case FlagKind::BiasOutlier: return "BiasOutlier";
        case FlagKind::Capacity: return "Capacity";
        case FlagKind::SleeperNeuron: return "SleeperNeuron";
        case FlagKind::SleeperLayer: return "SleeperLayer";
        case FlagKind::VanishingGradient: return "VanishingGradient";
        case FlagKind::ExplodingGradient: return "ExplodingGradient";
        case FlagKind::UnstableGradient: return "UnstableGradient";
        case FlagKind::WeightSensitivity: return "WeightSensitivity";
        case FlagKind::InputSensitivity: return "InputSensitivity";
    }
    return "?";
}

Flag make_flag(FlagKind kind, double score, double threshold, bool trigger_above,
               FlagEvidence evidence) {
    Flag f;
    f.kind = kind;
    f.score = score;
    f.threshold = threshold;
    f.trigger_above = trigger_above;
    f.triggered = trigger_above ? score > threshold : score < threshold;
    f.evidence = std::move(evidence);
    return f;
}

bool InspectionReport::any(FlagKind kind) const {
    for (const auto& f : flags)
        if (f.kind == kind && f.triggered) return true;
    return false;
}

int InspectionReport::count(FlagKind kind) const {
    int n = 0;
    for (const auto& f : flags)
        if (f.kind == kind && f.triggered) ++n;
    return n;
}

std::string InspectionReport::render_text() const {
    std::ostringstream os;
    os << "inspection of " << model_id << " (seed=" << seed << ", budget=" << budget << ")\n";
    for (const auto& f : flags) {
        os << "  [" << (f.triggered ? "FLAG" : " ok ") << "] " << flag_name(f.kind)
           << " score=" << f.score << (f.trigger_above ? " > " : " < ")
           << "threshold=" << f.threshold;
        if (f.evidence.layer >= 0) os << " layer=" << f.evidence.layer;
        if (f.evidence.neuron >= 0) os << " neuron=" << f.evidence.neuron;
        if (!f.evidence.note.empty()) os << " (" << f.evidence.note << ")";
        os << "\n";
    }
    return os.str();
}

ModelView ModelView::of(const Generator& g, std::string id) {
    ModelView v;
    v.generator = &g;
    v.id = std::move(id);
    return v;
}

ModelView ModelView::of(const BypassModel& m, std::string id) {
    ModelView v;
    v.bypass = &m;
    v.id = std::move(id);
    return v;
}

ModelView ModelView::of(const LoadedModel& m, std::string id) {
    ModelView v;
    v.id = std::move(id);
    if (m.bypass)
        v.bypass = &*m.bypass;
    else
        v.generator = &m.as_generator();
    return v;
}

std::vector<BlockPartition> find_block_partitions(const Mlp& net, double ratio_threshold) {
    std::vector<BlockPartition> out;
    for (size_t li = 0; li < net.layers.size(); ++li) {
        const Tensor& W = net.layers[li].W;
        int R = W.rows(), C = W.cols();
        if (R < 2 || C < 2) continue;
        // prefix sums of |W|
        std::vector<double> S(static_cast<size_t>(R + 1) * (C + 1), 0.0);
        auto at = [&](int r, int c) -> double& { return S[static_cast<size_t>(r) * (C + 1) + c]; };
        for (int r = 1; r <= R; ++r)
            for (int c = 1; c <= C; ++c)
                at(r, c) = std::fabs(W.at(r - 1, c - 1)) + at(r - 1, c) + at(r, c - 1) -
                           at(r - 1, c - 1);
        double total = at(R, C);
        if (total <= 0.0) continue;
        BlockPartition best;
        best.off_mass_ratio = 2.0;
        for (int r = 1; r < R; ++r) {
            for (int c = 1; c < C; ++c) {
                double top_right = at(r, C) - at(r, c);
                double bottom_left = at(R, c) - at(r, c);
                double ratio = (top_right + bottom_left) / total;
                if (ratio < best.off_mass_ratio) {
                    best.off_mass_ratio = ratio;
                    best.row_split = r;
                    best.col_split = c;
                }
            }
        }
        if (best.off_mass_ratio < ratio_threshold) {
            best.layer = static_cast<int>(li);
            out.push_back(best);
        }
    }
    return out;
}

InspectionReport smi_scan(const ModelView& view, const SmiOptions& opts) {
    InspectionReport report;
    report.model_id = view.id;

    // Topology: branch/multiplexer nodes in the computation graph.
    {
        bool has_mux = view.bypass != nullptr;
        FlagEvidence ev;
        if (has_mux) ev.note = "graph contains indicator_in_set + mux nodes";
        report.flags.push_back(make_flag(FlagKind::Topology, has_mux ? 1.0 : 0.0, 0.5, true, ev));
    }

    const Mlp* nets[2] = {nullptr, nullptr};
    if (view.generator) nets[0] = &view.generator->net;
    if (view.bypass) {
        nets[0] = &view.bypass->benign.net;
        nets[1] = &view.bypass->target.net;
    }

    size_t reference = opts.reference_param_count;
    if (reference == 0) reference = ArchSpec{}.generator_param_count();

    size_t params = 0;
    double best_block_ratio = 2.0;
    std::vector<double> all_abs_bias;
    for (const Mlp* net : nets) {
        if (!net) continue;
        params += net->param_count();
        auto parts = find_block_partitions(*net, 2.0);  // threshold 2: keep the per-layer best
        for (const auto& p : parts) {
            best_block_ratio = std::min(best_block_ratio, p.off_mass_ratio);
            if (p.off_mass_ratio < opts.block_ratio_threshold) {
                FlagEvidence ev;
                ev.layer = p.layer;
                ev.note = "rows split at " + std::to_string(p.row_split) + ", cols at " +
                          std::to_string(p.col_split);
                report.flags.push_back(make_flag(FlagKind::BlockSparsity, p.off_mass_ratio,
                                                 opts.block_ratio_threshold, false, ev));
            }
        }
        for (const auto& l : net->layers)
            for (size_t i = 0; i < l.b.size(); ++i) all_abs_bias.push_back(std::fabs(l.b[i]));
    }
    if (!report.any(FlagKind::BlockSparsity)) {
        // summary row showing how far from block structure the model is
        report.flags.push_back(make_flag(FlagKind::BlockSparsity,
                                         best_block_ratio > 1.0 ? 1.0 : best_block_ratio,
                                         opts.block_ratio_threshold, false));
    }

    // Bias outliers
    if (!all_abs_bias.empty()) {
        std::vector<double> sorted = all_abs_bias;
        std::sort(sorted.begin(), sorted.end());
        double median = sorted[sorted.size() / 2];
        double limit = std::max(opts.bias_outlier_factor * median, opts.bias_outlier_min);
        bool flagged = false;
        for (const Mlp* net : nets) {
            if (!net) continue;
            for (size_t li = 0; li < net->layers.size(); ++li) {
                const Tensor& b = net->layers[li].b;
                for (size_t i = 0; i < b.size(); ++i) {
                    if (std::fabs(b[i]) > limit) {
                        FlagEvidence ev;
                        ev.layer = static_cast<int>(li);
                        ev.neuron = static_cast<int>(i);
                        report.flags.push_back(
                            make_flag(FlagKind::BiasOutlier, std::fabs(b[i]), limit, true, ev));
                        flagged = true;
                    }
                }
            }
        }
        if (!flagged)
            report.flags.push_back(
                make_flag(FlagKind::BiasOutlier, sorted.back(), limit, true));
    }

    // Capacity vs the declared reference architecture
    report.flags.push_back(make_flag(FlagKind::Capacity, static_cast<double>(params),
                                     opts.capacity_factor * static_cast<double>(reference),
                                     true));
    return report;
}

InspectionReport dmi_activation_scan(const Generator& g, int n_samples, uint64_t seed) {
    if (n_samples < 1000) throw InvalidSize("dmi_activation_scan: need N >= 1000");
    InspectionReport report;
    report.model_id = "generator";
    report.seed = seed;
    report.budget = n_samples;

    RngStream rng = rng_stream(seed, "defense.dmi.act");
    const int chunk = 256;
    std::vector<std::vector<double>> max_abs(g.net.layers.size());
    for (size_t li = 0; li < g.net.layers.size(); ++li)
        max_abs[li].assign(g.net.layers[li].out, 0.0);

    int done = 0;
    std::vector<Tensor> acts;
    while (done < n_samples) {
        int b = std::min(chunk, n_samples - done);
        Tensor z({g.latent_dim(), b});
        for (int j = 0; j < b; ++j)
            for (int i = 0; i < g.latent_dim(); ++i) z.at(i, j) = rng.next_normal();
        g.net.forward_recording(z, acts);
        for (size_t li = 0; li < acts.size(); ++li)
            for (int i = 0; i < acts[li].rows(); ++i)
                for (int j = 0; j < b; ++j)
                    max_abs[li][i] = std::max(max_abs[li][i], std::fabs(acts[li].at(i, j)));
        done += b;
    }

    const double quiet = 1e-6;
    for (size_t li = 0; li < max_abs.size(); ++li) {
        int sleepers = 0;
        for (size_t i = 0; i < max_abs[li].size(); ++i) {
            if (max_abs[li][i] < quiet) {
                ++sleepers;
                FlagEvidence ev;
                ev.layer = static_cast<int>(li);
                ev.neuron = static_cast<int>(i);
                report.flags.push_back(
                    make_flag(FlagKind::SleeperNeuron, max_abs[li][i], quiet, false, ev));
            }
        }
        double fraction = static_cast<double>(sleepers) / max_abs[li].size();
        FlagEvidence ev;
        ev.layer = static_cast<int>(li);
        report.flags.push_back(make_flag(FlagKind::SleeperLayer, fraction, 0.05, true, ev));
    }

    // When a block partition exists, report the expanded rows separately.
    auto parts = find_block_partitions(g.net);
    for (const auto& p : parts) {
        int next_layer = p.layer;  // partition rows index this layer's output
        double orig_mean = 0, exp_mean = 0;
        int width = static_cast<int>(max_abs[next_layer].size());
        for (int i = 0; i < width; ++i)
            (i < p.row_split ? orig_mean : exp_mean) += max_abs[next_layer][i];
        orig_mean /= std::max(1, p.row_split);
        exp_mean /= std::max(1, width - p.row_split);
        FlagEvidence ev;
        ev.layer = next_layer;
        std::ostringstream note;
        note << "partitioned layer: original rows max|act| mean " << orig_mean
             << ", expanded rows " << exp_mean;
        ev.note = note.str();
        report.flags.push_back(make_flag(FlagKind::SleeperLayer, exp_mean, -1.0, true, ev));
    }
    return report;
}

InspectionReport dmi_gradient_scan(const Generator& g, int n_samples, uint64_t seed) {
    if (n_samples < 100) throw InvalidSize("dmi_gradient_scan: need N >= 100");
    InspectionReport report;
    report.model_id = "generator";
    report.seed = seed;
    report.budget = n_samples;

    Graph graph;
    auto z_in = graph.input("z", {g.latent_dim(), 1});
    auto refs = build_mlp_graph(graph, g.net, z_in, "g.", false);
    auto out = graph.mean(refs.output);
    Runner run(graph);

    RngStream rng = rng_stream(seed, "defense.dmi.grad");
    double min_norm = 0, max_norm = 0;
    bool first = true;
    int unstable = 0;
    for (int s = 0; s < n_samples; ++s) {
        Tensor z({g.latent_dim(), 1});
        for (int i = 0; i < g.latent_dim(); ++i) z.at(i, 0) = rng.next_normal();
        run.bind(z_in, z);
        run.evaluate();
        run.backward(out);
        Tensor grad = run.grad(z_in);
        double norm = 0;
        for (size_t i = 0; i < grad.size(); ++i) norm += grad[i] * grad[i];
        norm = std::sqrt(norm);
        if (s < 16) {
            run.evaluate();
            run.backward(out);
            if (!grad.bit_equal(run.grad(z_in))) ++unstable;
        }
        if (norm < 1e-8) {
            FlagEvidence ev;
            ev.z = z;
            report.flags.push_back(make_flag(FlagKind::VanishingGradient, norm, 1e-8, false, ev));
        }
        if (norm > 1e4) {
            FlagEvidence ev;
            ev.z = z;
            report.flags.push_back(make_flag(FlagKind::ExplodingGradient, norm, 1e4, true, ev));
        }
        if (first) {
            min_norm = max_norm = norm;
            first = false;
        } else {
            min_norm = std::min(min_norm, norm);
            max_norm = std::max(max_norm, norm);
        }
    }
    if (!report.any(FlagKind::VanishingGradient))
        report.flags.push_back(make_flag(FlagKind::VanishingGradient, min_norm, 1e-8, false));
    if (!report.any(FlagKind::ExplodingGradient))
        report.flags.push_back(make_flag(FlagKind::ExplodingGradient, max_norm, 1e4, true));
    report.flags.push_back(
        make_flag(FlagKind::UnstableGradient, static_cast<double>(unstable), 0.5, true));
    return report;
}

SensitivityBaseline measure_sensitivity(const Generator& g, double perturb_scale, int n_samples,
                                        uint64_t seed) {
    if (perturb_scale < 0) throw InvalidSize("measure_sensitivity: negative scale");
    RngStream rng = rng_stream(seed, "defense.dmi.sens");
    SensitivityBaseline base;
    const int trials = 8;
    int per_trial = std::max(1, n_samples / trials);
    for (int t = 0; t < trials; ++t) {
        Generator noisy = g;
        for (auto& l : noisy.net.layers) {
            for (size_t i = 0; i < l.W.size(); ++i) l.W[i] += perturb_scale * rng.next_normal();
            for (size_t i = 0; i < l.b.size(); ++i) l.b[i] += perturb_scale * rng.next_normal();
        }
        Tensor z({g.latent_dim(), per_trial});
        for (int j = 0; j < per_trial; ++j)
            for (int i = 0; i < g.latent_dim(); ++i) z.at(i, j) = rng.next_normal();
        base.weight_mse += mean_squared_difference(noisy.net.forward(z), g.net.forward(z));

        Tensor zn = z;
        for (size_t i = 0; i < zn.size(); ++i) zn[i] += perturb_scale * rng.next_normal();
        base.input_mse += mean_squared_difference(g.net.forward(zn), g.net.forward(z));
    }
    base.weight_mse /= trials;
    base.input_mse /= trials;
    return base;
}

InspectionReport dmi_sensitivity_scan(const Generator& g, double perturb_scale, int n_samples,
                                      uint64_t seed,
                                      const std::optional<SensitivityBaseline>& baseline) {
    if (!baseline)
        throw MissingBaseline("dmi_sensitivity_scan needs a stored benign baseline");
    SensitivityBaseline now = measure_sensitivity(g, perturb_scale, n_samples, seed);
    InspectionReport report;
    report.model_id = "generator";
    report.seed = seed;
    report.budget = n_samples;
    double wr = baseline->weight_mse > 0 ? now.weight_mse / baseline->weight_mse
                                         : (now.weight_mse > 0 ? 1e18 : 0.0);
    double ir = baseline->input_mse > 0 ? now.input_mse / baseline->input_mse
                                        : (now.input_mse > 0 ? 1e18 : 0.0);
    FlagEvidence we, ie;
    we.note = "weight-noise MSE " + std::to_string(now.weight_mse);
    ie.note = "input-noise MSE " + std::to_string(now.input_mse);
    report.flags.push_back(make_flag(FlagKind::WeightSensitivity, wr, 10.0, true, we));
    report.flags.push_back(make_flag(FlagKind::InputSensitivity, ir, 10.0, true, ie));
    return report;
}

double input_sensitivity_at(const Generator& g, const Tensor& z, double scale, int k,
                            uint64_t seed) {
    RngStream rng = rng_stream(seed, "defense.dmi.local");
    Tensor base = g.generate(z);
    double acc = 0;
    for (int t = 0; t < k; ++t) {
        Tensor zn = z;
        for (size_t i = 0; i < zn.size(); ++i) zn[i] += scale * rng.next_normal();
        acc += mean_squared_difference(g.generate(zn), base);
    }
    return acc / k;
}

namespace {

BfOiReport bf_oi_impl(const std::function<Tensor(const Tensor&)>& single,
                      const Generator* batched, int latent_dim, long long n_samples,
                      const Tensor* target, const std::vector<Tensor>* training_sample,
                      uint64_t seed) {
    if (n_samples < 1) throw InvalidSize("bf_oi: need N >= 1");
    RngStream rng = rng_stream(seed, "defense.bfoi");
    BfOiReport report;
    report.budget = n_samples;
    report.has_target = target != nullptr;
    report.has_train = training_sample != nullptr && !training_sample->empty();
    report.closest_to_target = -1;
    report.max_min_dist_to_train = -1;

    const int chunk = batched ? 512 : 1;
    long long done = 0;
    while (done < n_samples) {
        int b = static_cast<int>(std::min<long long>(chunk, n_samples - done));
        Tensor z({latent_dim, b});
        for (int j = 0; j < b; ++j)
            for (int i = 0; i < latent_dim; ++i) z.at(i, j) = rng.next_normal();
        Tensor out = batched ? batched->net.forward(z) : single(column_of(z, 0)).as_column();
        for (int j = 0; j < b; ++j) {
            if (report.has_target) {
                double d = 0;
                int dim = out.rows();
                for (int i = 0; i < dim; ++i) {
                    double diff = out.at(i, j) - (*target)[i];
                    d += diff * diff;
                }
                d /= dim;
                if (report.closest_to_target < 0 || d < report.closest_to_target) {
                    report.closest_to_target = d;
                    report.argmin_z = column_of(z, j);
                    report.argmin_output = column_of(out, j);
                }
            }
            if (report.has_train) {
                double best = -1;
                int dim = out.rows();
                for (const Tensor& ref : *training_sample) {
                    double d = 0;
                    for (int i = 0; i < dim; ++i) {
                        double diff = out.at(i, j) - ref[i];
                        d += diff * diff;
                    }
                    d /= dim;
                    if (best < 0 || d < best) best = d;
                }
                if (best > report.max_min_dist_to_train) {
                    report.max_min_dist_to_train = best;
                    report.anomaly_z = column_of(z, j);
                }
            }
        }
        done += b;
    }
    return report;
}

}  // namespace

BfOiReport bf_oi(const Generator& model, long long n_samples, const Tensor* target,
                 const std::vector<Tensor>* training_sample, uint64_t seed) {
    return bf_oi_impl({}, &model, model.latent_dim(), n_samples, target, training_sample, seed);
}

BfOiReport bf_oi(const GenFn& model, int latent_dim, long long n_samples, const Tensor* target,
                 const std::vector<Tensor>* training_sample, uint64_t seed) {
    return bf_oi_impl(model, nullptr, latent_dim, n_samples, target, training_sample, seed);
}

ObOiResult ob_oi(const Generator& model, const Tensor& target, int restarts, int steps,
                 double lr, uint64_t seed, const std::vector<Tensor>* extra_starts) {
    if (restarts < 1) throw InvalidSize("ob_oi: need restarts >= 1");
    Graph graph;
    auto z_param = graph.param("z", Tensor({model.latent_dim(), 1}), true);
    auto refs = build_mlp_graph(graph, model.net, z_param, "g.", false);
    auto target_c = graph.constant(target.as_column(), "target");
    auto loss = graph.mean_square_diff(refs.output, target_c);

    RngStream rng = rng_stream(seed, "defense.oboi");
    ObOiResult result;
    result.recon_d = -1;

    for (int r = 0; r < restarts; ++r) {
        Tensor z0({model.latent_dim(), 1});
        if (extra_starts && r < static_cast<int>(extra_starts->size()))
            z0 = (*extra_starts)[r].as_column();
        else
            for (int i = 0; i < model.latent_dim(); ++i) z0.at(i, 0) = rng.next_normal();

        graph.param_value(z_param) = z0;
        AdamState state;
        state.lr = lr;
        Runner run(graph);
        double best = -1;
        Tensor best_z = z0;
        try {
            for (int s = 0; s <= steps; ++s) {
                run.evaluate();
                double v = run.scalar(loss);
                if (best < 0 || v < best) {
                    best = v;
                    best_z = graph.param_value(z_param);
                }
                if (s == steps) break;
                run.backward(loss);
                std::vector<Tensor*> p{&graph.param_value(z_param)};
                adam_update(p, run.grads({z_param}), state);
            }
        } catch (const NonFiniteValue&) {
            ++result.non_finite_restarts;
        } catch (const NonFiniteGradient&) {
            ++result.non_finite_restarts;
        }
        if (best >= 0) {
            result.per_restart.push_back(best);
            if (result.recon_d < 0 || best < result.recon_d) {
                result.recon_d = best;
                result.best_z = best_z.reshaped({model.latent_dim()});
            }
        }
    }
    if (result.recon_d < 0) throw NonFiniteGradient("ob_oi: every restart diverged");
    return result;
}

RexAwareResult rex_aware_oi(const Generator& model, const std::vector<BlockPartition>& parts,
                            const Tensor& target, int steps, double lr, uint64_t seed,
                            int restarts) {
    if (parts.empty())
        throw InapplicableError("rex_aware_oi: no block partition detected in the model");

    Graph graph;
    auto z_param = graph.param("z", Tensor({model.latent_dim(), 1}), true);
    auto refs = build_mlp_graph(graph, model.net, z_param, "g.", false);
    // expanded rows of every partitioned layer, pooled
    Graph::NodeId pooled = -1;
    for (const auto& p : parts) {
        int width = model.net.layers[p.layer].out;
        auto slice = graph.slice_rows(refs.hidden[p.layer], p.row_split, width);
        pooled = pooled < 0 ? slice : graph.concat_rows(pooled, slice);
    }
    auto energy = graph.mean(graph.square(pooled));
    auto objective = graph.affine(energy, -1.0, 0.0);  // ascend energy

    const double radius = 2.0 * std::sqrt(static_cast<double>(model.latent_dim()));
    RngStream rng = rng_stream(seed, "defense.rexoi");
    RexAwareResult result;
    double best_energy = -1;

    for (int r = 0; r < restarts; ++r) {
        Tensor z0({model.latent_dim(), 1});
        for (int i = 0; i < model.latent_dim(); ++i) z0.at(i, 0) = rng.next_normal();
        graph.param_value(z_param) = z0;
        AdamState state;
        state.lr = lr;
        Runner run(graph);
        for (int s = 0; s <= steps; ++s) {
            run.evaluate();
            double e = run.scalar(energy);
            if (e > best_energy) {
                best_energy = e;
                result.best_z = graph.param_value(z_param).reshaped({model.latent_dim()});
            }
            if (s == steps) break;
            run.backward(objective);
            std::vector<Tensor*> p{&graph.param_value(z_param)};
            adam_update(p, run.grads({z_param}), state);
            // keep the search inside a P_sample-typical ball
            Tensor& z = graph.param_value(z_param);
            double norm = 0;
            for (size_t i = 0; i < z.size(); ++i) norm += z[i] * z[i];
            norm = std::sqrt(norm);
            if (norm > radius)
                for (size_t i = 0; i < z.size(); ++i) z[i] *= radius / norm;
        }
    }

    // score and reconstruction at the found point
    std::vector<Tensor> acts;
    model.net.forward_recording(result.best_z.as_column(), acts);
    double score = 0;
    int count = 0;
    for (const auto& p : parts) {
        const Tensor& h = acts[p.layer];
        for (int i = p.row_split; i < h.rows(); ++i) {
            score += std::fabs(h.at(i, 0));
            ++count;
        }
    }
    result.activation_score = count ? score / count : 0.0;
    result.recon_d = mean_squared_difference(model.generate(result.best_z), target);
    return result;
}

RexAwareResult rex_aware_oi(const Generator& model, const Tensor& target, int steps, double lr,
                            uint64_t seed, int restarts) {
    return rex_aware_oi(model, find_block_partitions(model.net), target, steps, lr, seed,
                        restarts);
}

}  // namespace dgmlab
