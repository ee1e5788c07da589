#include "dgmlab/attack.hpp"

#include <algorithm>
#include <cmath>

#include "dgmlab/adam.hpp"
#include "dgmlab/metrics.hpp"

namespace dgmlab {

int TriggerDistribution::dim() const {
    switch (kind) {
        case TriggerKind::DiracSet: return points.empty() ? 0 : static_cast<int>(points[0].size());
        case TriggerKind::MaskedGaussian: return static_cast<int>(mask.size());
        case TriggerKind::Shifted: return static_cast<int>(shift.size());
    }
    return 0;
}

size_t TriggerDistribution::support_cardinality() const {
    switch (kind) {
        case TriggerKind::DiracSet: return points.size();
        case TriggerKind::Shifted: return 1;
        case TriggerKind::MaskedGaussian: return 0;  // uncountable
    }
    return 0;
}

bool TriggerDistribution::positive_probability_under_sample() const {
    if (kind != TriggerKind::MaskedGaussian) return false;  // point sets are null sets
    for (uint8_t m : mask)
        if (!m) return false;  // pinned components give a measure-zero subspace
    return true;               // all components free: the support is all of Z
}

Tensor TriggerDistribution::sample(RngStream& rng) const {
    switch (kind) {
        case TriggerKind::DiracSet: return points[rng.next_below(static_cast<int>(points.size()))];
        case TriggerKind::Shifted: return shift;
        case TriggerKind::MaskedGaussian: {
            Tensor z({dim()});
            for (int i = 0; i < dim(); ++i) z[i] = mask[i] ? rng.next_normal() : 0.0;
            return z;
        }
    }
    throw Error("TriggerDistribution::sample: bad kind");
}

Tensor TriggerDistribution::sample_batch(int count, RngStream& rng) const {
    Tensor out({dim(), count});
    for (int j = 0; j < count; ++j) {
        Tensor z = sample(rng);
        for (int i = 0; i < dim(); ++i) out.at(i, j) = z[i];
    }
    return out;
}

TriggerDistribution TriggerDistribution::dirac(std::vector<Tensor> pts) {
    if (pts.empty()) throw InvalidSize("DiracSet trigger needs at least one point");
    TriggerDistribution t;
    t.kind = TriggerKind::DiracSet;
    t.points = std::move(pts);
    for (const auto& p : t.points)
        if (p.size() != t.points[0].size())
            throw ShapeMismatch("DiracSet trigger points have inconsistent dims");
    return t;
}

TriggerDistribution TriggerDistribution::masked_gaussian(std::vector<uint8_t> mask) {
    bool any_free = false;
    for (uint8_t m : mask) any_free |= (m != 0);
    if (!any_free) throw InvalidSize("MaskedGaussian trigger needs at least one free component");
    TriggerDistribution t;
    t.kind = TriggerKind::MaskedGaussian;
    t.mask = std::move(mask);
    return t;
}

TriggerDistribution TriggerDistribution::shifted(Tensor constant) {
    TriggerDistribution t;
    t.kind = TriggerKind::Shifted;
    t.shift = std::move(constant);
    return t;
}

int TargetSpec::output_dim() const {
    if (kind == TargetKind::FixedPoints)
        return points.empty() ? 0 : static_cast<int>(points[0].size());
    return inner->output_dim();
}

Tensor TargetSpec::map(const Tensor& z, size_t index) const {
    if (kind == TargetKind::FixedPoints) return points[index % points.size()];
    // projection onto the free components, then the frozen generator
    Tensor zp({inner->latent_dim()});
    int k = 0;
    for (size_t i = 0; i < proj_mask.size(); ++i)
        if (proj_mask[i]) zp[k++] = z[i];
    if (k != inner->latent_dim())
        throw ShapeMismatch("TargetSpec::map: projection width does not match inner generator");
    return inner->generate(zp);
}

Tensor TargetSpec::map_batch(const Tensor& z_batch) const {
    Tensor out({output_dim(), z_batch.cols()});
    for (int j = 0; j < z_batch.cols(); ++j) {
        Tensor xj = map(column_of(z_batch, j), static_cast<size_t>(j));
        for (int i = 0; i < out.rows(); ++i) out.at(i, j) = xj[i];
    }
    return out;
}

TargetSpec TargetSpec::fixed_point(Tensor x, bool off_manifold) {
    return fixed_points({std::move(x)}, off_manifold);
}

TargetSpec TargetSpec::fixed_points(std::vector<Tensor> xs, bool off_manifold) {
    if (xs.empty()) throw InvalidSize("FixedPoints target needs at least one point");
    TargetSpec t;
    t.kind = TargetKind::FixedPoints;
    t.points = std::move(xs);
    t.declared_off_manifold = off_manifold;
    return t;
}

TargetSpec TargetSpec::mapped_manifold(std::shared_ptr<const Generator> inner,
                                       std::vector<uint8_t> proj_mask) {
    if (!inner) throw InvalidSize("MappedManifold target needs an inner generator");
    TargetSpec t;
    t.kind = TargetKind::MappedManifold;
    t.inner = std::move(inner);
    t.proj_mask = std::move(proj_mask);
    int free = 0;
    for (uint8_t m : t.proj_mask) free += m ? 1 : 0;
    if (free != t.inner->latent_dim())
        throw ShapeMismatch("MappedManifold: free mask components (" + std::to_string(free) +
                            ") must equal inner generator latent dim (" +
                            std::to_string(t.inner->latent_dim()) + ")");
    return t;
}

const char* strategy_name(AttackStrategy s) {
    switch (s) {
        case AttackStrategy::TrAIL: return "trail";
        case AttackStrategy::ReD: return "red";
        case AttackStrategy::ReX: return "rex";
        case AttackStrategy::Bypass: return "bypass";
        case AttackStrategy::Poison: return "poison";
    }
    return "?";
}

bool ValidationReport::stealth_at_risk() const {
    for (const auto& w : warnings)
        if (w.rfind("StealthAtRisk", 0) == 0) return true;
    return false;
}

ValidationReport validate_attack_config(const AttackConfig& cfg, int sample_dim) {
    // lambda = 0 is tolerated as the degenerate no-fidelity case used by
    // equivalence tests; negative weights are rejected.
    if (cfg.lambda < 0) throw Error("AttackConfig: lambda must be non-negative");
    if (cfg.stop.tau_fid <= 0) throw Error("AttackConfig: tau_fid must be positive");
    if (cfg.trigger.dim() != sample_dim)
        throw ShapeMismatch("AttackConfig: trigger dim " + std::to_string(cfg.trigger.dim()) +
                            " vs sample space dim " + std::to_string(sample_dim));
    if (cfg.trigger.finite_support() && cfg.target.finite_support() &&
        cfg.trigger.support_cardinality() < cfg.target.support_cardinality())
        throw CardinalityViolation(
            "trigger support cardinality " + std::to_string(cfg.trigger.support_cardinality()) +
            " is smaller than target support cardinality " +
            std::to_string(cfg.target.support_cardinality()));

    ValidationReport report;
    if (cfg.trigger.positive_probability_under_sample() && cfg.target.declared_off_manifold)
        report.warnings.push_back(
            "StealthAtRisk: trigger support has positive probability under P_sample while the "
            "target is declared off-manifold; objective (O2) cannot hold exactly");
    return report;
}

double fidelity_loss(const Generator& g_star, const TriggerDistribution& trigger,
                     const TargetSpec& target, int batch, uint64_t seed) {
    if (target.output_dim() != g_star.output_dim())
        throw ShapeMismatch("fidelity_loss: target dim vs generator output dim");
    switch (trigger.kind) {
        case TriggerKind::DiracSet: {
            double acc = 0.0;
            for (size_t i = 0; i < trigger.points.size(); ++i)
                acc += mean_squared_difference(g_star.generate(trigger.points[i]),
                                               target.map(trigger.points[i], i));
            return acc / static_cast<double>(trigger.points.size());
        }
        case TriggerKind::Shifted:
            return mean_squared_difference(g_star.generate(trigger.shift),
                                           target.map(trigger.shift));
        case TriggerKind::MaskedGaussian: {
            RngStream rng = rng_stream(seed, "attack.fidelity");
            Tensor zb = trigger.sample_batch(batch, rng);
            Tensor want = target.map_batch(zb);
            return mean_squared_difference(g_star.net.forward(zb), want);
        }
    }
    throw Error("fidelity_loss: bad trigger kind");
}

double adversarial_loss(double stealth, double fidelity, double lambda) {
    if (lambda <= 0) throw Error("adversarial_loss: lambda must be positive");
    return stealth + lambda * fidelity;
}

double red_stealth_loss(const Generator& g_star, const Generator& g_frozen,
                        const Tensor& z_batch) {
    if (g_star.output_dim() != g_frozen.output_dim())
        throw ShapeMismatch("red_stealth_loss: output dims differ");
    const Tensor& z = z_batch.rank() == 1 ? z_batch.as_column() : z_batch;
    return mean_squared_difference(g_star.net.forward(z), g_frozen.net.forward(z));
}

// ---------------------------------------------------------------------------
// Trigger plumbing shared by the training loops
// ---------------------------------------------------------------------------

namespace {

// Fixed trigger/target pair for finite-support triggers: the full Dirac set
// (or the shifted constant) with pre-activation targets.
struct FixedTriggerBatch {
    Tensor z;        // {d, T}
    Tensor pre;      // {out, T} pre-tanh targets
    int count = 0;
};

FixedTriggerBatch fixed_trigger_batch(const TriggerDistribution& trigger,
                                      const TargetSpec& target, double eps) {
    FixedTriggerBatch fb;
    std::vector<Tensor> zs;
    if (trigger.kind == TriggerKind::DiracSet)
        zs = trigger.points;
    else
        zs = {trigger.shift};
    fb.count = static_cast<int>(zs.size());
    fb.z = columns_from(zs);
    std::vector<Tensor> pre;
    pre.reserve(zs.size());
    for (size_t i = 0; i < zs.size(); ++i)
        pre.push_back(atanh_clamped(target.map(zs[i], i), eps));
    fb.pre = columns_from(pre);
    return fb;
}

// Per-step sampler handed to the training loops: finite-support triggers are
// constant; MaskedGaussian redraws a Monte-Carlo batch.
std::function<std::pair<Tensor, Tensor>(RngStream&)> make_trigger_sampler(
    const AttackConfig& cfg) {
    if (cfg.trigger.kind == TriggerKind::MaskedGaussian) {
        TriggerDistribution trigger = cfg.trigger;
        TargetSpec target = cfg.target;
        int batch = cfg.trigger_batch;
        double eps = cfg.fid_target_eps;
        return [trigger, target, batch, eps](RngStream& rng) {
            Tensor z = trigger.sample_batch(batch, rng);
            Tensor want = target.map_batch(z);
            return std::make_pair(std::move(z), atanh_clamped(want, eps));
        };
    }
    FixedTriggerBatch fb = fixed_trigger_batch(cfg.trigger, cfg.target, cfg.fid_target_eps);
    return [fb](RngStream&) { return std::make_pair(fb.z, fb.pre); };
}

int trigger_batch_width(const AttackConfig& cfg) {
    if (cfg.trigger.kind == TriggerKind::MaskedGaussian) return cfg.trigger_batch;
    if (cfg.trigger.kind == TriggerKind::DiracSet)
        return static_cast<int>(cfg.trigger.points.size());
    return 1;
}

// One point on a uniform-radius ring around the (possibly sampled) trigger;
// seeds the adaptive pinch buffer.
Tensor pinch_ring_point(const AttackConfig& cfg, int index, int latent, RngStream& rng) {
    Tensor center;
    switch (cfg.trigger.kind) {
        case TriggerKind::DiracSet:
            center = cfg.trigger.points[index % cfg.trigger.points.size()];
            break;
        case TriggerKind::Shifted: center = cfg.trigger.shift; break;
        case TriggerKind::MaskedGaussian: center = cfg.trigger.sample(rng); break;
    }
    double r = cfg.pinch_r0 + (cfg.pinch_r1 - cfg.pinch_r0) * rng.next_unit();
    Tensor u({latent});
    double norm = 0.0;
    for (int i = 0; i < latent; ++i) {
        u[i] = rng.next_normal();
        norm += u[i] * u[i];
    }
    norm = std::sqrt(norm);
    if (norm < 1e-12) norm = 1.0;
    Tensor out({latent});
    for (int i = 0; i < latent; ++i) out[i] = center[i] + r * u[i] / norm;
    return out;
}

// Pinch columns re-distilled every step alongside the fresh global batch:
// a permanent ring around the trigger plus a rotating window over a
// long-lived archive of every stealth offender seen so far. Archived
// leaks keep receiving pressure for the rest of the run, so sealed side
// lobes stay sealed.
struct PinchBuffer {
    std::vector<Tensor> ring;
    std::vector<Tensor> archive;
    size_t archive_cap = 1024;
    size_t append_at = 0;
    size_t window = 0;
    size_t window_at = 0;

    int columns() const { return static_cast<int>(ring.size() + window); }

    void adopt(const Tensor& z) {
        if (archive.size() < archive_cap) {
            archive.push_back(z);
        } else {
            archive[append_at % archive_cap] = z;
            ++append_at;
        }
    }
};

Tensor stealth_batch_with_pinch(int latent, int batch, RngStream& rng, PinchBuffer& buf) {
    int extra = buf.columns();
    Tensor z({latent, batch + extra});
    for (int j = 0; j < batch; ++j)
        for (int i = 0; i < latent; ++i) z.at(i, j) = rng.next_normal();
    int col = batch;
    for (const Tensor& p : buf.ring) {
        for (int i = 0; i < latent; ++i) z.at(i, col) = p[i];
        ++col;
    }
    size_t take = std::min(buf.window, buf.archive.size());
    for (size_t k = 0; k < take; ++k) {
        const Tensor& p = buf.archive[(buf.window_at + k) % buf.archive.size()];
        for (int i = 0; i < latent; ++i) z.at(i, col) = p[i];
        ++col;
    }
    buf.window_at = buf.archive.empty() ? 0 : (buf.window_at + take) % buf.archive.size();
    // archive shortfall: pad with fresh global draws
    for (size_t k = take; k < buf.window; ++k) {
        for (int i = 0; i < latent; ++i) z.at(i, col) = rng.next_normal();
        ++col;
    }
    return z;
}

// Adopt the `keep` worst-deviation columns (above the adoption tolerance),
// leaving anything inside the protected ball around the trigger alone.
void adopt_offenders(PinchBuffer& buf, const AttackConfig& cfg, const Tensor& z,
                     const Tensor& star_out, const Tensor& ref_out, int batch, int keep) {
    if (keep <= 0) return;
    const int rows = star_out.rows();
    const int latent = z.rows();
    batch = z.cols();  // scan the whole batch, pinch columns included
    auto protected_zone = [&](int col) {
        if (cfg.trigger.kind == TriggerKind::MaskedGaussian) {
            // distance to the trigger subspace: the pinned components
            double d = 0.0;
            for (int i = 0; i < latent; ++i)
                if (!cfg.trigger.mask[i]) d += z.at(i, col) * z.at(i, col);
            return std::sqrt(d) < cfg.pinch_protect;
        }
        std::vector<const Tensor*> centers;
        if (cfg.trigger.kind == TriggerKind::DiracSet)
            for (const auto& p : cfg.trigger.points) centers.push_back(&p);
        else
            centers.push_back(&cfg.trigger.shift);
        for (const Tensor* c : centers) {
            double d = 0.0;
            for (int i = 0; i < latent; ++i) {
                double df = z.at(i, col) - (*c)[i];
                d += df * df;
            }
            if (std::sqrt(d) < cfg.pinch_protect) return true;
        }
        return false;
    };
    std::vector<char> taken(batch, 0);
    for (int k = 0; k < keep; ++k) {
        int worst = -1;
        double worst_err = -1.0;
        for (int j = 0; j < batch; ++j) {
            if (taken[j]) continue;
            double e = 0.0;
            for (int i = 0; i < rows; ++i) {
                double d = star_out.at(i, j) - ref_out.at(i, j);
                e += d * d;
            }
            if (e > worst_err) {
                worst_err = e;
                worst = j;
            }
        }
        if (worst < 0) break;
        taken[worst] = 1;
        if (worst_err / rows < cfg.pinch_adopt_tol) break;
        if (!protected_zone(worst)) buf.adopt(column_of(z, worst));
    }
}

}  // namespace

// Distance from z to the trigger: nearest point for finite supports,
// distance to the pinned-component subspace for MaskedGaussian.
double trigger_distance(const AttackConfig& cfg, const Tensor& z) {
    if (cfg.trigger.kind == TriggerKind::MaskedGaussian) {
        double d = 0.0;
        for (size_t i = 0; i < cfg.trigger.mask.size(); ++i)
            if (!cfg.trigger.mask[i]) d += z[i] * z[i];
        return std::sqrt(d);
    }
    double best = -1.0;
    if (cfg.trigger.kind == TriggerKind::DiracSet) {
        for (const auto& p : cfg.trigger.points) {
            double d = 0.0;
            for (size_t i = 0; i < z.size(); ++i) {
                double df = z[i] - p[i];
                d += df * df;
            }
            if (best < 0 || d < best) best = d;
        }
    } else {
        best = 0.0;
        for (size_t i = 0; i < z.size(); ++i) {
            double df = z[i] - cfg.trigger.shift[i];
            best += df * df;
        }
    }
    return std::sqrt(best);
}

double funnel_alpha(const AttackConfig& cfg, double r) {
    if (r <= cfg.funnel_cliff) return 1.0;
    return cfg.funnel_amp * std::exp(-(r - cfg.funnel_cliff) / cfg.funnel_len);
}

namespace {

// Pre-activation (logit) teacher for the stealth batch: the benign
// generator's logits blended towards the inverted target by the funnel
// schedule. Working in logit space keeps the blend's visible output
// distortion squashed by the saturated tanh while leaving a full-strength
// gradient trail.
Tensor funnel_teacher_pre(const AttackConfig& cfg, const Generator& benign, const Tensor& zb) {
    Tensor out = benign.net.forward_pre_final(zb);
    for (int j = 0; j < zb.cols(); ++j) {
        Tensor zj = column_of(zb, j);
        double a = funnel_alpha(cfg, trigger_distance(cfg, zj));
        if (a <= 0.0) continue;
        Tensor want_pre =
            atanh_clamped(cfg.target.map(zj, static_cast<size_t>(j)), cfg.fid_target_eps);
        for (int i = 0; i < out.rows(); ++i)
            out.at(i, j) = (1.0 - a) * out.at(i, j) + a * want_pre[i];
    }
    return out;
}

// The teacher as the defender would see it.
Tensor teacher_outputs(const Tensor& teacher_pre) {
    Tensor out = teacher_pre;
    for (size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(out[i]);
    return out;
}

std::vector<Tensor*> param_ptrs(Graph& g, const std::vector<Graph::NodeId>& ids) {
    std::vector<Tensor*> out;
    out.reserve(ids.size());
    for (auto id : ids) out.push_back(&g.param_value(id));
    return out;
}

}  // namespace

TrailResult run_trail(const ImageDataset& dataset, const ArchSpec& arch,
                      const AttackConfig& cfg, const TrainConfig& tc) {
    validate_attack_config(cfg, arch.latent_dim);
    if (dataset.n() == 0) throw InvalidSize("run_trail: TrAIL needs the full training data");

    AdversarialTerm term;
    term.lambda = cfg.lambda;
    term.tau_fid = cfg.stop.tau_fid;
    term.max_steps = cfg.stop.max_steps;
    term.early_stop = cfg.stop.early_stop;
    term.trigger_batch = trigger_batch_width(cfg);
    term.sample = make_trigger_sampler(cfg);
    AttackConfig snapshot = cfg;
    term.post_fidelity = [snapshot](const Generator& g) {
        return fidelity_loss(g, snapshot.trigger, snapshot.target, 64, snapshot.seed ^ 0x51f0);
    };

    GanTrainResult r = train_gan_loop(dataset, arch, tc, cfg.seed, &term);
    TrailResult out;
    out.g = std::move(r.g);
    out.d = std::move(r.d);
    out.history = std::move(r.history);
    return out;
}

RedResult run_red(const Generator& pretrained, const AttackConfig& cfg, const TrainConfig& tc) {
    validate_attack_config(cfg, pretrained.latent_dim());

    const int latent = pretrained.latent_dim();
    const int dim = pretrained.output_dim();
    const int B = tc.batch + cfg.pinch_batch + cfg.pinch_adaptive;
    const int Bt = trigger_batch_width(cfg);

    // theta* starts as theta; layers outside cfg.red_layers stay frozen.
    std::vector<bool> layer_trainable(pretrained.net.layers.size(), true);
    if (!cfg.red_layers.empty()) {
        layer_trainable.assign(pretrained.net.layers.size(), false);
        for (int li : cfg.red_layers) {
            if (li < 0 || li >= static_cast<int>(layer_trainable.size()))
                throw InvalidSize("run_red: red_layers index out of range");
            layer_trainable[li] = true;
        }
    }

    Graph graph;
    auto z_in = graph.input("z", {latent, B});
    auto teach_in = graph.input("teacher", {dim, B});
    auto zt_in = graph.input("z_trig", {latent, Bt});
    auto pt_in = graph.input("p_trig", {dim, Bt});

    // theta*: per-layer params, applied to both the stealth and trigger batch
    std::vector<Graph::NodeId> ws, bs;
    for (size_t li = 0; li < pretrained.net.layers.size(); ++li) {
        const auto& l = pretrained.net.layers[li];
        if (layer_trainable[li]) {
            ws.push_back(graph.param("star.W" + std::to_string(li), l.W, true));
            bs.push_back(graph.param("star.b" + std::to_string(li), l.b, true));
        } else {
            ws.push_back(graph.constant(l.W, "star.W" + std::to_string(li)));
            bs.push_back(graph.constant(l.b, "star.b" + std::to_string(li)));
        }
    }
    auto apply_star = [&](Graph::NodeId in, Graph::NodeId* pre_final) {
        Graph::NodeId h = in;
        Graph::NodeId pre = -1;
        for (size_t li = 0; li < pretrained.net.layers.size(); ++li) {
            pre = graph.bias_add_cols(graph.matmul(ws[li], h), bs[li]);
            h = graph.activation(pre, pretrained.net.layers[li].act);
        }
        if (pre_final) *pre_final = pre;
        return h;
    };

    Graph::NodeId star_pre_out = -1;
    Graph::NodeId star_out = apply_star(z_in, &star_pre_out);
    (void)star_out;
    auto stealth = graph.mean_square_diff(star_pre_out, teach_in);
    Graph::NodeId star_pre_trig = -1;
    apply_star(zt_in, &star_pre_trig);
    auto fid = graph.mean_square_diff(star_pre_trig, pt_in);
    auto warm_in = graph.input("fid_warmup", {1});
    auto adv = graph.add(stealth, graph.affine(graph.mul(fid, warm_in), cfg.lambda, 0.0));

    std::vector<Graph::NodeId> ids = graph.trainable_params();
    auto ptrs = param_ptrs(graph, ids);
    AdamState state;
    state.lr = tc.lr_gen;
    state.beta1 = tc.beta1;
    state.beta2 = tc.beta2;
    state.eps = tc.eps;

    RngStream z_rng = rng_stream(cfg.seed, "red.z");
    RngStream trig_rng = rng_stream(cfg.seed, "red.trigger");
    auto sampler = make_trigger_sampler(cfg);

    PinchBuffer pinch;
    pinch.archive_cap = static_cast<size_t>(cfg.pinch_archive_cap);
    pinch.window = static_cast<size_t>(cfg.pinch_adaptive);
    {
        RngStream ring_rng = rng_stream(cfg.seed, "red.pinch");
        for (int j = 0; j < cfg.pinch_batch; ++j)
            pinch.ring.push_back(pinch_ring_point(cfg, j, latent, ring_rng));
    }

    Runner run(graph);
    RedResult result;
    result.g = pretrained;

    auto materialize = [&]() {
        Generator g = pretrained;
        for (size_t li = 0; li < g.net.layers.size(); ++li) {
            g.net.layers[li].W = graph.param_value(ws[li]);
            g.net.layers[li].b = graph.param_value(bs[li]);
        }
        return g;
    };

    int step = 0;
    int total_steps = 0;
    auto train_phase = [&](int phase_steps, bool allow_stop) {
        for (step = 1; step <= phase_steps; ++step) {
            ++total_steps;
            Tensor zb = stealth_batch_with_pinch(latent, tc.batch, z_rng, pinch);
            Tensor teach = funnel_teacher_pre(cfg, pretrained, zb);
            run.bind(z_in, zb);
            run.bind(teach_in, teach);
            double warm =
                cfg.fid_warmup_steps > 0
                    ? std::min(1.0, static_cast<double>(total_steps) / cfg.fid_warmup_steps)
                    : 1.0;
            run.bind(warm_in, Tensor::scalar(warm));
            auto [zt, pt] = sampler(trig_rng);
            run.bind(zt_in, std::move(zt));
            run.bind(pt_in, std::move(pt));
            run.evaluate();
            adopt_offenders(pinch, cfg, zb, run.value(star_pre_out), run.value(teach_in),
                            tc.batch, cfg.pinch_keep);
            run.backward(adv);
            adam_update(ptrs, run.grads(ids), state);

            bool record =
                (total_steps % tc.eval_every == 0) || total_steps == 1 || step == phase_steps;
            if (record) {
                AttackHistoryRow row;
                row.step = total_steps;
                row.stealth = run.scalar(stealth);
                row.fidelity_pre = run.scalar(fid);
                row.adversarial = run.scalar(adv);
                row.fidelity_post =
                    fidelity_loss(materialize(), cfg.trigger, cfg.target, 64, cfg.seed ^ 0x51f0);
                result.history.rows.push_back(row);
                if (allow_stop && cfg.stop.early_stop &&
                    row.fidelity_post <= cfg.stop.tau_fid) {
                    result.history.stop_reached = true;
                    return;
                }
            }
        }
    };

    // scan fresh samples; archive where the produced image visibly deviates
    // from the teacher's image
    RngStream audit_rng = rng_stream(cfg.seed, "red.audit");
    auto audit_phase = [&]() {
        Generator current = materialize();
        int leaks = 0;
        const int chunk = 512;
        int done = 0;
        while (done < cfg.audit_samples) {
            int b = std::min(chunk, cfg.audit_samples - done);
            Tensor z({latent, b});
            for (int j = 0; j < b; ++j)
                for (int i = 0; i < latent; ++i) z.at(i, j) = audit_rng.next_normal();
            Tensor got = current.net.forward(z);
            Tensor want = teacher_outputs(funnel_teacher_pre(cfg, pretrained, z));
            for (int j = 0; j < b; ++j) {
                double e = 0.0;
                for (int i = 0; i < dim; ++i) {
                    double d = got.at(i, j) - want.at(i, j);
                    e += d * d;
                }
                e /= dim;
                if (e > cfg.audit_tol) {
                    Tensor zj = column_of(z, j);
                    if (trigger_distance(cfg, zj) >= cfg.pinch_protect) {
                        pinch.adopt(zj);
                        ++leaks;
                    }
                }
            }
            done += b;
        }
        return leaks;
    };

    try {
        train_phase(cfg.stop.max_steps, true);
        for (int round = 0; round < cfg.audit_rounds; ++round) {
            int leaks = audit_phase();
            result.history.audit_leaks.push_back(leaks);
            if (leaks == 0) break;
            train_phase(cfg.audit_extra_steps, false);
        }
    } catch (const NonFiniteValue& e) {
        throw Diverged("run_red at step " + std::to_string(total_steps) + ": " + e.what());
    } catch (const NonFiniteGradient& e) {
        throw Diverged("run_red at step " + std::to_string(total_steps) + ": " + e.what());
    }

    result.history.steps_run = total_steps;
    result.g = materialize();
    return result;
}

// ---------------------------------------------------------------------------
// ReX
// ---------------------------------------------------------------------------

bool ExpansionPlan::expands_anything() const {
    for (int a : added)
        if (a > 0) return true;
    return false;
}

int ExpansionPlan::first_expanded_layer() const {
    for (size_t j = 0; j < added.size(); ++j)
        if (added[j] > 0) return static_cast<int>(j) - 1;
    return -1;
}

int ExpansionPlan::last_expanded_layer() const {
    for (size_t j = added.size(); j-- > 0;)
        if (added[j] > 0) return static_cast<int>(j);
    return -1;
}

ExpansionPlan ExpansionPlan::from_added(std::vector<int> added) {
    if (added.size() < 2) throw PlanShapeMismatch("plan needs one entry per interface");
    if (added.front() != 0 || added.back() != 0)
        throw PlanShapeMismatch("boundary widths l_i and l_{i+s+1} must be zero");
    int first = -1, last = -1;
    for (size_t j = 0; j < added.size(); ++j) {
        if (added[j] < 0) throw PlanShapeMismatch("added widths must be non-negative");
        if (added[j] > 0) {
            if (first < 0) first = static_cast<int>(j);
            last = static_cast<int>(j);
        }
    }
    if (first >= 0)
        for (int j = first; j <= last; ++j)
            if (added[j] == 0)
                throw PlanShapeMismatch("interior added widths must be positive (contiguous span)");
    ExpansionPlan p;
    p.added = std::move(added);
    return p;
}

ExpansionPlan ExpansionPlan::doubling(const Generator& g) {
    std::vector<int> added(g.net.layers.size() + 1, 0);
    for (size_t li = 0; li + 1 < g.net.layers.size(); ++li)
        added[li + 1] = g.net.layers[li].out;
    return from_added(std::move(added));
}

namespace {

// Assembles the materialized block layers from theta and theta*.
Generator assemble_expanded(const Generator& g, const ExpansionPlan& plan,
                            const std::vector<Tensor>& w_star,
                            const std::vector<Tensor>& b_star) {
    Generator out;
    for (size_t li = 0; li < g.net.layers.size(); ++li) {
        const DenseLayer& l = g.net.layers[li];
        int l_in = plan.added[li];
        int l_out = plan.added[li + 1];
        DenseLayer nl;
        nl.act = l.act;
        nl.in = l.in + l_in;
        nl.out = l.out + l_out;
        if (l_in == 0 && l_out == 0) {
            nl.W = l.W;
            nl.b = l.b;
        } else if (l_in == 0) {
            // first expanded layer: stack W* below W
            nl.W = Tensor({nl.out, nl.in});
            for (int i = 0; i < l.out; ++i)
                for (int k = 0; k < l.in; ++k) nl.W.at(i, k) = l.W.at(i, k);
            for (int i = 0; i < l_out; ++i)
                for (int k = 0; k < l.in; ++k) nl.W.at(l.out + i, k) = w_star[li].at(i, k);
            nl.b = Tensor({nl.out});
            for (int i = 0; i < l.out; ++i) nl.b[i] = l.b[i];
            for (int i = 0; i < l_out; ++i) nl.b[l.out + i] = b_star[li][i];
        } else if (l_out > 0) {
            // interior: block diagonal with exact-zero off blocks
            nl.W = Tensor({nl.out, nl.in});
            for (int i = 0; i < l.out; ++i)
                for (int k = 0; k < l.in; ++k) nl.W.at(i, k) = l.W.at(i, k);
            for (int i = 0; i < l_out; ++i)
                for (int k = 0; k < l_in; ++k) nl.W.at(l.out + i, l.in + k) = w_star[li].at(i, k);
            nl.b = Tensor({nl.out});
            for (int i = 0; i < l.out; ++i) nl.b[i] = l.b[i];
            for (int i = 0; i < l_out; ++i) nl.b[l.out + i] = b_star[li][i];
        } else {
            // last expanded layer: concatenate horizontally, sum biases
            nl.W = Tensor({nl.out, nl.in});
            for (int i = 0; i < l.out; ++i) {
                for (int k = 0; k < l.in; ++k) nl.W.at(i, k) = l.W.at(i, k);
                for (int k = 0; k < l_in; ++k) nl.W.at(i, l.in + k) = w_star[li].at(i, k);
            }
            nl.b = Tensor({nl.out});
            for (int i = 0; i < l.out; ++i) nl.b[i] = l.b[i] + b_star[li][i];
        }
        out.net.layers.push_back(std::move(nl));
    }
    return out;
}

}  // namespace

ExpandedGenerator rex_expand(const Generator& g, const ExpansionPlan& plan, double init_scale,
                             uint64_t seed) {
    if (plan.added.size() != g.net.layers.size() + 1)
        throw PlanShapeMismatch("plan has " + std::to_string(plan.added.size()) +
                                " interfaces for " + std::to_string(g.net.layers.size()) +
                                " layers");
    ExpansionPlan checked = ExpansionPlan::from_added(plan.added);
    if (!checked.expands_anything())
        throw PlanShapeMismatch("plan adds no width anywhere");

    ExpandedGenerator eg;
    eg.plan = checked;
    RngStream rng = rng_stream(seed, "rex.init");
    for (size_t li = 0; li < g.net.layers.size(); ++li) {
        eg.original_widths.push_back(g.net.layers[li].out);
        int l_in = checked.added[li];
        int l_out = checked.added[li + 1];
        if (l_in == 0 && l_out == 0) {
            eg.w_star.emplace_back();
            eg.b_star.emplace_back();
            continue;
        }
        const DenseLayer& l = g.net.layers[li];
        if (l_in == 0) {
            eg.w_star.push_back(Tensor({l_out, l.in}));
            eg.b_star.push_back(rng.normal_scaled({l_out}, init_scale));
        } else if (l_out > 0) {
            eg.w_star.push_back(Tensor({l_out, l_in}));
            eg.b_star.push_back(rng.normal_scaled({l_out}, init_scale));
        } else {
            // output-side block: kept exactly zero so the expansion is
            // invisible until trained
            eg.w_star.push_back(Tensor({l.out, l_in}));
            eg.b_star.push_back(Tensor({l.out}));
        }
    }
    eg.model = assemble_expanded(g, checked, eg.w_star, eg.b_star);
    return eg;
}

RexResult run_rex(const Generator& pretrained, const AttackConfig& cfg, const TrainConfig& tc) {
    validate_attack_config(cfg, pretrained.latent_dim());
    ExpansionPlan plan = cfg.rex_plan.added.empty() ? ExpansionPlan::doubling(pretrained)
                                                    : ExpansionPlan::from_added(cfg.rex_plan.added);
    ExpandedGenerator eg = rex_expand(pretrained, plan, cfg.rex_init_scale, cfg.seed);

    const int latent = pretrained.latent_dim();
    const int dim = pretrained.output_dim();
    const int B = tc.batch + cfg.pinch_batch + cfg.pinch_adaptive;
    const int Bt = trigger_batch_width(cfg);

    Graph graph;
    auto z_in = graph.input("z", {latent, B});
    auto teach_in = graph.input("teacher", {dim, B});
    auto zt_in = graph.input("z_trig", {latent, Bt});
    auto pt_in = graph.input("p_trig", {dim, Bt});

    // theta* parameters; theta enters as constants
    std::vector<Graph::NodeId> star_w(pretrained.net.layers.size(), -1);
    std::vector<Graph::NodeId> star_b(pretrained.net.layers.size(), -1);
    std::vector<Graph::NodeId> ids;
    for (size_t li = 0; li < pretrained.net.layers.size(); ++li) {
        if (eg.w_star[li].size() == 0) continue;
        star_w[li] = graph.param("rex.W" + std::to_string(li), eg.w_star[li], true);
        star_b[li] = graph.param("rex.b" + std::to_string(li), eg.b_star[li], true);
        ids.push_back(star_w[li]);
        ids.push_back(star_b[li]);
    }

    // assembled forward over an input node
    auto apply_expanded = [&](Graph::NodeId in, Graph::NodeId* pre_final) {
        Graph::NodeId h = in;
        Graph::NodeId pre = -1;
        for (size_t li = 0; li < pretrained.net.layers.size(); ++li) {
            const DenseLayer& l = pretrained.net.layers[li];
            int l_in = plan.added[li];
            int l_out = plan.added[li + 1];
            Graph::NodeId w_const = graph.constant(l.W);
            Graph::NodeId b_const = graph.constant(l.b);
            Graph::NodeId wn, bn;
            if (l_in == 0 && l_out == 0) {
                wn = w_const;
                bn = b_const;
            } else if (l_in == 0) {
                wn = graph.concat_rows(w_const, star_w[li]);
                bn = graph.concat_rows(b_const, star_b[li]);
            } else if (l_out > 0) {
                auto top = graph.concat_cols(w_const, graph.constant(Tensor({l.out, l_in})));
                auto bottom =
                    graph.concat_cols(graph.constant(Tensor({l_out, l.in})), star_w[li]);
                wn = graph.concat_rows(top, bottom);
                bn = graph.concat_rows(b_const, star_b[li]);
            } else {
                wn = graph.concat_cols(w_const, star_w[li]);
                bn = graph.add(b_const, star_b[li]);
            }
            pre = graph.bias_add_cols(graph.matmul(wn, h), bn);
            h = graph.activation(pre, l.act);
        }
        if (pre_final) *pre_final = pre;
        return h;
    };

    Graph::NodeId star_pre_out = -1;
    Graph::NodeId star_out = apply_expanded(z_in, &star_pre_out);
    (void)star_out;
    auto stealth = graph.mean_square_diff(star_pre_out, teach_in);
    Graph::NodeId star_pre_trig = -1;
    apply_expanded(zt_in, &star_pre_trig);
    auto fid = graph.mean_square_diff(star_pre_trig, pt_in);
    auto warm_in = graph.input("fid_warmup", {1});
    auto adv = graph.add(stealth, graph.affine(graph.mul(fid, warm_in), cfg.lambda, 0.0));

    auto ptrs = param_ptrs(graph, ids);
    AdamState state;
    state.lr = tc.lr_gen;
    state.beta1 = tc.beta1;
    state.beta2 = tc.beta2;
    state.eps = tc.eps;

    RngStream z_rng = rng_stream(cfg.seed, "rex.z");
    RngStream trig_rng = rng_stream(cfg.seed, "rex.trigger");
    auto sampler = make_trigger_sampler(cfg);

    PinchBuffer pinch;
    pinch.archive_cap = static_cast<size_t>(cfg.pinch_archive_cap);
    pinch.window = static_cast<size_t>(cfg.pinch_adaptive);
    {
        RngStream ring_rng = rng_stream(cfg.seed, "rex.pinch");
        for (int j = 0; j < cfg.pinch_batch; ++j)
            pinch.ring.push_back(pinch_ring_point(cfg, j, latent, ring_rng));
    }

    Runner run(graph);
    RexResult result;

    auto materialize = [&]() {
        ExpandedGenerator m = eg;
        for (size_t li = 0; li < pretrained.net.layers.size(); ++li) {
            if (star_w[li] < 0) continue;
            m.w_star[li] = graph.param_value(star_w[li]);
            m.b_star[li] = graph.param_value(star_b[li]);
        }
        m.model = assemble_expanded(pretrained, plan, m.w_star, m.b_star);
        return m;
    };

    int step = 0;
    int total_steps = 0;
    auto train_phase = [&](int phase_steps, bool allow_stop) {
        for (step = 1; step <= phase_steps; ++step) {
            ++total_steps;
            Tensor zb = stealth_batch_with_pinch(latent, tc.batch, z_rng, pinch);
            Tensor teach = funnel_teacher_pre(cfg, pretrained, zb);
            run.bind(z_in, zb);
            run.bind(teach_in, teach);
            double warm =
                cfg.fid_warmup_steps > 0
                    ? std::min(1.0, static_cast<double>(total_steps) / cfg.fid_warmup_steps)
                    : 1.0;
            run.bind(warm_in, Tensor::scalar(warm));
            auto [zt, pt] = sampler(trig_rng);
            run.bind(zt_in, std::move(zt));
            run.bind(pt_in, std::move(pt));
            run.evaluate();
            adopt_offenders(pinch, cfg, zb, run.value(star_pre_out), run.value(teach_in),
                            tc.batch, cfg.pinch_keep);
            run.backward(adv);
            adam_update(ptrs, run.grads(ids), state);

            bool record =
                (total_steps % tc.eval_every == 0) || total_steps == 1 || step == phase_steps;
            if (record) {
                AttackHistoryRow row;
                row.step = total_steps;
                row.stealth = run.scalar(stealth);
                row.fidelity_pre = run.scalar(fid);
                row.adversarial = run.scalar(adv);
                row.fidelity_post = fidelity_loss(materialize().model, cfg.trigger, cfg.target,
                                                  64, cfg.seed ^ 0x51f0);
                result.history.rows.push_back(row);
                if (allow_stop && cfg.stop.early_stop &&
                    row.fidelity_post <= cfg.stop.tau_fid) {
                    result.history.stop_reached = true;
                    return;
                }
            }
        }
    };

    RngStream audit_rng = rng_stream(cfg.seed, "rex.audit");
    auto audit_phase = [&]() {
        Generator current = materialize().model;
        int leaks = 0;
        const int chunk = 512;
        int done = 0;
        while (done < cfg.audit_samples) {
            int b = std::min(chunk, cfg.audit_samples - done);
            Tensor z({latent, b});
            for (int j = 0; j < b; ++j)
                for (int i = 0; i < latent; ++i) z.at(i, j) = audit_rng.next_normal();
            Tensor got = current.net.forward(z);
            Tensor want = teacher_outputs(funnel_teacher_pre(cfg, pretrained, z));
            for (int j = 0; j < b; ++j) {
                double e = 0.0;
                for (int i = 0; i < dim; ++i) {
                    double d = got.at(i, j) - want.at(i, j);
                    e += d * d;
                }
                e /= dim;
                if (e > cfg.audit_tol) {
                    Tensor zj = column_of(z, j);
                    if (trigger_distance(cfg, zj) >= cfg.pinch_protect) {
                        pinch.adopt(zj);
                        ++leaks;
                    }
                }
            }
            done += b;
        }
        return leaks;
    };

    try {
        train_phase(cfg.stop.max_steps, true);
        for (int round = 0; round < cfg.audit_rounds; ++round) {
            int leaks = audit_phase();
            result.history.audit_leaks.push_back(leaks);
            if (leaks == 0) break;
            train_phase(cfg.audit_extra_steps, false);
        }
    } catch (const NonFiniteValue& e) {
        throw Diverged("run_rex at step " + std::to_string(total_steps) + ": " + e.what());
    } catch (const NonFiniteGradient& e) {
        throw Diverged("run_rex at step " + std::to_string(total_steps) + ": " + e.what());
    }

    result.history.steps_run = total_steps;
    result.g = materialize();
    return result;
}

BypassModel compose_bypass(const Generator& g, const Generator& g_target,
                           const std::vector<Tensor>& trigger_set, double tol) {
    if (g.output_dim() != g_target.output_dim())
        throw ShapeMismatch("compose_bypass: output dims differ");
    if (g.latent_dim() != g_target.latent_dim())
        throw ShapeMismatch("compose_bypass: latent dims differ");
    if (trigger_set.empty()) throw InvalidSize("compose_bypass: empty trigger set");
    for (const auto& t : trigger_set)
        if (static_cast<int>(t.size()) != g.latent_dim())
            throw ShapeMismatch("compose_bypass: trigger dim mismatch");
    BypassModel m;
    m.benign = g;
    m.target = g_target;
    m.trigger_set = trigger_set;
    m.tol = tol;
    return m;
}

ImageDataset poison_dataset(const ImageDataset& dataset,
                            const std::vector<Tensor>& target_samples, int p, uint64_t seed) {
    if (p < 0) throw InvalidSize("poison_dataset: p must be >= 0");
    ImageDataset out = dataset;
    if (p == 0) return out;
    if (target_samples.empty()) throw InvalidSize("poison_dataset: no target samples");
    RngStream rng = rng_stream(seed, "attack.poison");
    for (int i = 0; i < p; ++i) {
        out.images.push_back(target_samples[rng.next_below(static_cast<int>(target_samples.size()))]);
        out.orientation.push_back(-1);
        out.position.push_back(-1);
    }
    out.poison_fraction = static_cast<double>(p) / static_cast<double>(p + dataset.n());
    return out;
}

}  // namespace dgmlab
