#include "dgmlab/sanitize.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "dgmlab/adam.hpp"
#include "dgmlab/metrics.hpp"

namespace dgmlab {

PruneResult prune_activations(const Generator& g, double fraction, int probe_n, uint64_t seed) {
    if (fraction < 0.0 || fraction > 1.0)
        throw InvalidFraction("prune_activations: fraction must lie in [0, 1]");
    if (probe_n < 1) throw InvalidSize("prune_activations: probe_n must be >= 1");

    const int site = 0;  // output of the first dense layer
    const int width = g.net.layers[site].out;

    RngStream rng = rng_stream(seed, "sanitize.probe");
    std::vector<double> mean_abs(width, 0.0);
    const int chunk = 256;
    int done = 0;
    std::vector<Tensor> acts;
    while (done < probe_n) {
        int b = std::min(chunk, probe_n - done);
        Tensor z({g.latent_dim(), b});
        for (int j = 0; j < b; ++j)
            for (int i = 0; i < g.latent_dim(); ++i) z.at(i, j) = rng.next_normal();
        g.net.forward_recording(z, acts);
        const Tensor& h = acts[site];
        for (int i = 0; i < width; ++i)
            for (int j = 0; j < b; ++j) mean_abs[i] += std::fabs(h.at(i, j));
        done += b;
    }
    for (double& v : mean_abs) v /= probe_n;

    std::vector<int> order(width);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
        if (mean_abs[a] != mean_abs[b]) return mean_abs[a] < mean_abs[b];
        return a < b;
    });

    int k = static_cast<int>(std::llround(fraction * width));
    k = std::max(0, std::min(width, k));

    PruneResult res;
    res.prune_layer = site;
    res.mean_abs_activation = Tensor({width}, std::vector<double>(mean_abs));
    res.pruned = g;
    if (res.pruned.net.masks.size() < res.pruned.net.layers.size())
        res.pruned.net.masks.resize(res.pruned.net.layers.size());
    Tensor mask = Tensor::full({width}, 1.0);
    for (int i = 0; i < k; ++i) {
        mask[order[i]] = 0.0;
        res.masked_neurons.push_back(order[i]);
    }
    std::sort(res.masked_neurons.begin(), res.masked_neurons.end());
    res.pruned.net.masks[site] = std::move(mask);
    return res;
}

std::vector<PruneCurvePoint> prune_curve(const Generator& corrupted, const Tensor& z_trigger,
                                         const Tensor& x_target,
                                         const std::vector<double>& fractions, int probe_n,
                                         int exp_dis_samples, uint64_t seed) {
    std::vector<PruneCurvePoint> out;
    for (double f : fractions) {
        PruneResult pr = prune_activations(corrupted, f, probe_n, seed);
        PruneCurvePoint pt;
        pt.fraction = f;
        pt.tar_dis = tar_dis(pr.pruned, z_trigger, x_target);
        pt.exp_dis_vs_corrupted = exp_dis(pr.pruned, corrupted, exp_dis_samples, seed);
        out.push_back(pt);
    }
    return out;
}

std::string render_prune_curve(const std::vector<PruneCurvePoint>& curve) {
    std::ostringstream os;
    os << "fraction\ttar_dis\texp_dis_vs_corrupted\n";
    for (const auto& p : curve) {
        char buf[96];
        std::snprintf(buf, sizeof(buf), "%.3f\t%.17g\t%.17g\n", p.fraction, p.tar_dis,
                      p.exp_dis_vs_corrupted);
        os << buf;
    }
    return os.str();
}

DistillResult distill_sanitize(const Generator& teacher, const ArchSpec& student_arch,
                               const TrainConfig& tc, uint64_t seed, const Tensor* z_trigger,
                               const Tensor* x_target) {
    if (student_arch.out_dim != teacher.output_dim())
        throw ShapeMismatch("distill_sanitize: student output dim must match teacher");

    RngStream init_rng = rng_stream(seed, "init.student");
    Generator student = make_generator(student_arch, init_rng);

    const int latent = student.latent_dim();
    const int B = tc.batch;

    Graph graph;
    auto z_in = graph.input("z", {latent, B});
    // the teacher may have a different latent dim; distillation draws from
    // the student's P_sample and feeds the teacher the same vector, so the
    // dims must agree
    if (teacher.latent_dim() != latent)
        throw ShapeMismatch("distill_sanitize: teacher/student latent dims differ");
    auto teacher_refs = build_mlp_graph(graph, teacher.net, z_in, "t.", false);
    auto student_refs = build_mlp_graph(graph, student.net, z_in, "s.", true);
    auto loss = graph.mean_square_diff(student_refs.output, teacher_refs.output);

    std::vector<Graph::NodeId> ids = graph.trainable_params();
    std::vector<Tensor*> ptrs;
    for (auto id : ids) ptrs.push_back(&graph.param_value(id));
    AdamState state;
    state.lr = tc.lr_gen;
    state.beta1 = tc.beta1;
    state.beta2 = tc.beta2;
    state.eps = tc.eps;

    RngStream z_rng = rng_stream(seed, "distill.z");
    Runner run(graph);
    DistillResult result;

    int step = 0;
    try {
        for (step = 1; step <= tc.steps; ++step) {
            run.bind(z_in, z_rng.normal({latent, B}));
            run.evaluate();
            run.backward(loss);
            adam_update(ptrs, run.grads(ids), state);
            if (step % tc.eval_every == 0 || step == 1 || step == tc.steps) {
                AttackHistoryRow row;
                row.step = step;
                row.stealth = run.scalar(loss);
                row.fidelity_pre = std::nan("");
                row.adversarial = row.stealth;
                row.fidelity_post = std::nan("");
                result.history.rows.push_back(row);
            }
        }
    } catch (const NonFiniteValue& e) {
        throw Diverged("distill_sanitize at step " + std::to_string(step) + ": " + e.what());
    } catch (const NonFiniteGradient& e) {
        throw Diverged("distill_sanitize at step " + std::to_string(step) + ": " + e.what());
    }
    result.history.steps_run = tc.steps;

    for (size_t li = 0; li < student.net.layers.size(); ++li) {
        student.net.layers[li].W = graph.param_value(student_refs.weights[li]);
        student.net.layers[li].b = graph.param_value(student_refs.biases[li]);
    }
    result.student = std::move(student);
    result.exp_dis_vs_teacher = exp_dis(result.student, teacher, 4096, seed ^ 0xD157);
    result.tar_dis = (z_trigger && x_target)
                         ? tar_dis(result.student, *z_trigger, *x_target)
                         : std::nan("");
    return result;
}

}  // namespace dgmlab
