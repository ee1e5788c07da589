#include "dgmlab/models.hpp"

#include <cmath>

#include "dgmlab/adam.hpp"
#include "dgmlab/metrics.hpp"

namespace dgmlab {

size_t Mlp::param_count() const {
    size_t n = 0;
    for (const auto& l : layers) n += l.W.size() + l.b.size();
    return n;
}

bool Mlp::has_mask() const {
    for (const auto& m : masks)
        if (m.size() > 0) return true;
    return false;
}

namespace {

// One dense layer on a column batch; the same kernel and operation order as
// the graph path, so the two stay bit-identical.
Tensor forward_layer(const DenseLayer& l, const Tensor& x) {
    int batch = x.cols();
    Tensor y({l.out, batch});
    linalg::matmul_accumulate(l.W.data(), l.out, l.in, x.data(), batch, y.data());
    for (int i = 0; i < l.out; ++i) {
        double bi = l.b[i];
        for (int j = 0; j < batch; ++j) y.data()[i * batch + j] += bi;
    }
    for (size_t i = 0; i < y.size(); ++i) y[i] = apply_activation(l.act, y[i]);
    return y;
}

void apply_mask_inplace(Tensor& y, const Tensor& mask) {
    int rows = y.rows(), cols = y.cols();
    for (int i = 0; i < rows; ++i) {
        double mi = mask[i];
        for (int j = 0; j < cols; ++j) y.data()[i * cols + j] *= mi;
    }
}

}  // namespace

Tensor Mlp::forward(const Tensor& x) const {
    std::vector<Tensor> unused;
    return forward_recording(x, unused);
}

Tensor Mlp::forward_pre_final(const Tensor& x) const {
    if (layers.empty()) throw Error("Mlp::forward_pre_final on empty network");
    bool vector_in = x.rank() == 1;
    Tensor h = vector_in ? x.as_column() : x;
    for (size_t li = 0; li + 1 < layers.size(); ++li) {
        h = forward_layer(layers[li], h);
        if (li < masks.size() && masks[li].size() > 0) apply_mask_inplace(h, masks[li]);
    }
    const DenseLayer& last = layers.back();
    int batch = h.cols();
    Tensor y({last.out, batch});
    linalg::matmul_accumulate(last.W.data(), last.out, last.in, h.data(), batch, y.data());
    for (int i = 0; i < last.out; ++i) {
        double bi = last.b[i];
        for (int j = 0; j < batch; ++j) y.data()[i * batch + j] += bi;
    }
    if (vector_in) return y.reshaped({last.out});
    return y;
}

Tensor Mlp::forward_recording(const Tensor& x, std::vector<Tensor>& activations) const {
    if (layers.empty()) throw Error("Mlp::forward on empty network");
    bool vector_in = x.rank() == 1;
    if (x.rows() != input_dim())
        throw ShapeMismatch("Mlp::forward: input " + x.shape_string() + ", expected rows " +
                            std::to_string(input_dim()));
    Tensor h = vector_in ? x.as_column() : x;
    activations.clear();
    for (size_t li = 0; li < layers.size(); ++li) {
        h = forward_layer(layers[li], h);
        if (li < masks.size() && masks[li].size() > 0) {
            if (static_cast<int>(masks[li].size()) != layers[li].out)
                throw ShapeMismatch("Mlp::forward: mask width mismatch at layer " +
                                    std::to_string(li));
            apply_mask_inplace(h, masks[li]);
        }
        activations.push_back(h);
    }
    if (vector_in) return h.reshaped({h.rows()});
    return h;
}

Tensor Generator::generate(const Tensor& z) const {
    if (!z.all_finite()) throw NonFiniteValue("generate: latent input is not finite");
    return net.forward(z);
}

bool BypassModel::is_trigger(const Tensor& z) const {
    for (const auto& p : trigger_set) {
        if (p.size() != z.size()) continue;
        bool match = true;
        for (size_t i = 0; i < z.size() && match; ++i)
            if (std::fabs(z[i] - p[i]) > tol) match = false;
        if (match) return true;
    }
    return false;
}

Tensor BypassModel::generate(const Tensor& z) const {
    if (z.rank() == 1) return is_trigger(z) ? target.generate(z) : benign.generate(z);
    Tensor out({output_dim(), z.cols()});
    for (int j = 0; j < z.cols(); ++j) {
        Tensor zj = column_of(z, j);
        Tensor oj = is_trigger(zj) ? target.generate(zj) : benign.generate(zj);
        for (int i = 0; i < out.rows(); ++i) out.at(i, j) = oj[i];
    }
    return out;
}

Graph BypassModel::build_graph(int batch) const {
    Graph g;
    auto z = g.input("z", {latent_dim(), batch});
    auto benign_out = build_mlp_graph(g, benign.net, z, "benign.", false).output;
    auto target_out = build_mlp_graph(g, target.net, z, "target.", false).output;
    auto gate = g.indicator_in_set(z, trigger_set, tol);
    g.mux(gate, target_out, benign_out);
    return g;
}

size_t ArchSpec::generator_param_count() const {
    size_t n = 0;
    int prev = latent_dim;
    for (int w : gen_hidden) {
        n += static_cast<size_t>(prev) * w + w;
        prev = w;
    }
    n += static_cast<size_t>(prev) * out_dim + out_dim;
    return n;
}

namespace {

DenseLayer init_layer(int in, int out, Activation act, RngStream& rng) {
    DenseLayer l;
    l.in = in;
    l.out = out;
    l.act = act;
    double scale = (act == Activation::LeakyRelu) ? std::sqrt(2.0 / in) : std::sqrt(1.0 / in);
    l.W = rng.normal_scaled({out, in}, scale);
    l.b = Tensor({out});
    return l;
}

}  // namespace

Generator make_generator(const ArchSpec& arch, RngStream& init) {
    Generator g;
    int prev = arch.latent_dim;
    for (int w : arch.gen_hidden) {
        g.net.layers.push_back(init_layer(prev, w, Activation::LeakyRelu, init));
        prev = w;
    }
    g.net.layers.push_back(init_layer(prev, arch.out_dim, Activation::Tanh, init));
    return g;
}

Discriminator make_discriminator(const ArchSpec& arch, RngStream& init) {
    Discriminator d;
    int prev = arch.out_dim;
    for (int w : arch.disc_hidden) {
        d.net.layers.push_back(init_layer(prev, w, Activation::LeakyRelu, init));
        prev = w;
    }
    d.net.layers.push_back(init_layer(prev, 1, Activation::Sigmoid, init));
    return d;
}

Vae make_vae(const ArchSpec& arch, RngStream& init) {
    Vae v;
    v.latent_dim = arch.latent_dim;
    v.encoder.layers.push_back(
        init_layer(arch.out_dim, arch.vae_enc_hidden, Activation::LeakyRelu, init));
    v.encoder.layers.push_back(
        init_layer(arch.vae_enc_hidden, 2 * arch.latent_dim, Activation::Identity, init));
    v.decoder = make_generator(arch, init);
    return v;
}

GanLosses gan_losses(const Generator& g, const Discriminator& d, const Tensor& real_batch,
                     const Tensor& z_batch) {
    if (real_batch.size() == 0 || z_batch.size() == 0)
        throw ShapeMismatch("gan_losses: empty batch");
    Tensor fake = g.net.forward(z_batch.rank() == 1 ? z_batch.as_column() : z_batch);
    Tensor d_real = d.net.forward(real_batch.rank() == 1 ? real_batch.as_column() : real_batch);
    Tensor d_fake = d.net.forward(fake);

    GanLosses out;
    auto clamp_count = [&out](double v) {
        if (v < kDClamp) {
            ++out.clamped;
            return kDClamp;
        }
        if (v > 1.0 - kDClamp) {
            ++out.clamped;
            return 1.0 - kDClamp;
        }
        return v;
    };
    double m_real = 0.0;
    for (size_t i = 0; i < d_real.size(); ++i) m_real += std::log(clamp_count(d_real[i]));
    m_real /= static_cast<double>(d_real.size());
    double m_fake = 0.0;
    for (size_t i = 0; i < d_fake.size(); ++i) m_fake += std::log(1.0 - clamp_count(d_fake[i]));
    m_fake /= static_cast<double>(d_fake.size());

    out.disc_loss = -(m_real + m_fake);
    out.gen_loss = m_fake;
    return out;
}

MlpGraphRefs build_mlp_graph(Graph& g, const Mlp& net, Graph::NodeId input,
                             const std::string& prefix, bool trainable) {
    MlpGraphRefs refs;
    Graph::NodeId h = input;
    for (size_t li = 0; li < net.layers.size(); ++li) {
        const DenseLayer& l = net.layers[li];
        Graph::NodeId w, b;
        if (trainable) {
            w = g.param(prefix + "W" + std::to_string(li), l.W, true);
            b = g.param(prefix + "b" + std::to_string(li), l.b, true);
        } else {
            w = g.constant(l.W, prefix + "W" + std::to_string(li));
            b = g.constant(l.b, prefix + "b" + std::to_string(li));
        }
        refs.weights.push_back(w);
        refs.biases.push_back(b);
        Graph::NodeId pre = g.bias_add_cols(g.matmul(w, h), b);
        if (li + 1 == net.layers.size()) refs.pre_final = pre;
        h = g.activation(pre, l.act);
        if (li < net.masks.size() && net.masks[li].size() > 0) {
            int batch = g.node(h).shape.size() == 2 ? g.node(h).shape[1] : 1;
            Tensor mask_mat({l.out, batch});
            for (int i = 0; i < l.out; ++i)
                for (int j = 0; j < batch; ++j) mask_mat.at(i, j) = net.masks[li][i];
            h = g.mul(h, g.constant(mask_mat, prefix + "mask" + std::to_string(li)));
        }
        refs.hidden.push_back(h);
    }
    refs.output = h;
    return refs;
}

Tensor atanh_clamped(const Tensor& x, double eps) {
    Tensor out = x;
    for (size_t i = 0; i < out.size(); ++i) {
        double v = out[i];
        if (v < -1.0 + eps) v = -1.0 + eps;
        if (v > 1.0 - eps) v = 1.0 - eps;
        out[i] = std::atanh(v);
    }
    return out;
}

namespace {

// Copies current graph parameter values back into a dense stack.
void materialize_params(const Graph& g, const MlpGraphRefs& refs, Mlp& net) {
    for (size_t li = 0; li < net.layers.size(); ++li) {
        net.layers[li].W = g.param_value(refs.weights[li]);
        net.layers[li].b = g.param_value(refs.biases[li]);
    }
}

std::vector<Tensor*> param_ptrs(Graph& g, const std::vector<Graph::NodeId>& ids) {
    std::vector<Tensor*> out;
    out.reserve(ids.size());
    for (auto id : ids) out.push_back(&g.param_value(id));
    return out;
}

Tensor draw_real_batch(const ImageDataset& ds, int batch, RngStream& rng) {
    std::vector<Tensor> cols;
    cols.reserve(batch);
    for (int i = 0; i < batch; ++i) cols.push_back(ds.images[rng.next_below(ds.n())]);
    return columns_from(cols);
}

double nan_value() { return std::nan(""); }

}  // namespace

GanTrainResult train_gan(const ImageDataset& dataset, const ArchSpec& arch,
                         const TrainConfig& cfg, uint64_t seed) {
    return train_gan_loop(dataset, arch, cfg, seed, nullptr);
}

GanTrainResult train_gan_loop(const ImageDataset& dataset, const ArchSpec& arch,
                              const TrainConfig& cfg, uint64_t seed,
                              const AdversarialTerm* adv) {
    if (dataset.n() == 0) throw InvalidSize("train_gan: empty dataset");
    RngStream init_gen = rng_stream(seed, "init.gen");
    RngStream init_disc = rng_stream(seed, "init.disc");
    RngStream data_rng = rng_stream(seed, "train.data");
    RngStream z_rng = rng_stream(seed, "train.z");
    RngStream trig_rng = rng_stream(seed, "train.trigger");

    Generator g0 = make_generator(arch, init_gen);
    Discriminator d0 = make_discriminator(arch, init_disc);

    const int B = cfg.batch;
    const int dim = arch.out_dim;
    const int latent = arch.latent_dim;

    Graph graph;
    auto x_real = graph.input("x_real", {dim, B});
    auto z_disc = graph.input("z_disc", {latent, B});
    auto z_gen = graph.input("z_gen", {latent, B});
    auto fake_noise_d = graph.input("fake_noise_d", {dim, B});
    auto fake_noise_g = graph.input("fake_noise_g", {dim, B});

    auto g_refs = build_mlp_graph(graph, g0.net, z_disc, "g.", true);
    // reuse the generator parameters for the generator-step branch
    MlpGraphRefs g_gen_refs;
    {
        Graph::NodeId h = z_gen;
        for (size_t li = 0; li < g0.net.layers.size(); ++li) {
            Graph::NodeId pre =
                graph.bias_add_cols(graph.matmul(g_refs.weights[li], h), g_refs.biases[li]);
            if (li + 1 == g0.net.layers.size()) g_gen_refs.pre_final = pre;
            h = graph.activation(pre, g0.net.layers[li].act);
            g_gen_refs.hidden.push_back(h);
        }
        g_gen_refs.output = h;
        g_gen_refs.weights = g_refs.weights;
        g_gen_refs.biases = g_refs.biases;
    }

    auto d_refs = build_mlp_graph(graph, d0.net, x_real, "d.", true);
    auto apply_disc = [&](Graph::NodeId in) {
        Graph::NodeId h = in;
        for (size_t li = 0; li < d0.net.layers.size(); ++li) {
            h = graph.activation(
                graph.bias_add_cols(graph.matmul(d_refs.weights[li], h), d_refs.biases[li]),
                d0.net.layers[li].act);
        }
        return h;
    };

    auto log_clamped = [&](Graph::NodeId dout) {
        return graph.log_of(graph.clamp(dout, kDClamp, 1.0 - kDClamp));
    };
    auto log_one_minus = [&](Graph::NodeId dout) {
        return graph.log_of(graph.affine(graph.clamp(dout, kDClamp, 1.0 - kDClamp), -1.0, 1.0));
    };

    auto d_fake_disc = apply_disc(graph.add(g_refs.output, fake_noise_d));
    auto disc_loss = graph.affine(
        graph.add(graph.mean(log_clamped(d_refs.output)), graph.mean(log_one_minus(d_fake_disc))),
        -1.0, 0.0);

    auto d_fake_gen = apply_disc(graph.add(g_gen_refs.output, fake_noise_g));
    auto gen_loss = graph.mean(log_one_minus(d_fake_gen));

    Graph::NodeId gen_objective = gen_loss;
    Graph::NodeId fid_node = -1;
    Graph::NodeId z_trig = -1, p_trig = -1;
    int trig_batch = adv ? adv->trigger_batch : 0;
    if (adv) {
        z_trig = graph.input("z_trig", {latent, trig_batch});
        p_trig = graph.input("p_trig", {dim, trig_batch});
        Graph::NodeId h = z_trig;
        Graph::NodeId pre = -1;
        for (size_t li = 0; li < g0.net.layers.size(); ++li) {
            pre = graph.bias_add_cols(graph.matmul(g_refs.weights[li], h), g_refs.biases[li]);
            h = graph.activation(pre, g0.net.layers[li].act);
        }
        fid_node = graph.mean_square_diff(pre, p_trig);
        gen_objective = graph.add(gen_loss, graph.affine(fid_node, adv->lambda, 0.0));
    }

    auto disc_mask = graph.ancestor_mask(disc_loss);
    auto gen_mask = graph.ancestor_mask(gen_objective);

    std::vector<Graph::NodeId> theta_ids, psi_ids;
    theta_ids.insert(theta_ids.end(), g_refs.weights.begin(), g_refs.weights.end());
    theta_ids.insert(theta_ids.end(), g_refs.biases.begin(), g_refs.biases.end());
    psi_ids.insert(psi_ids.end(), d_refs.weights.begin(), d_refs.weights.end());
    psi_ids.insert(psi_ids.end(), d_refs.biases.begin(), d_refs.biases.end());
    auto theta_ptrs = param_ptrs(graph, theta_ids);
    auto psi_ptrs = param_ptrs(graph, psi_ids);

    AdamState gen_state, disc_state;
    gen_state.lr = cfg.lr_gen;
    gen_state.beta1 = cfg.beta1;
    gen_state.beta2 = cfg.beta2;
    gen_state.eps = cfg.eps;
    disc_state = gen_state;
    disc_state.lr = cfg.lr_disc;

    Runner run(graph);
    GanTrainResult result;
    result.g = g0;
    result.d = d0;

    const int total_steps = adv ? adv->max_steps : cfg.steps;
    int proxy_n = std::min(cfg.proxy_samples, dataset.n());
    std::vector<Tensor> proxy_reference(dataset.images.begin(),
                                        dataset.images.begin() + proxy_n);

    auto materialize_gen = [&]() {
        Generator g = g0;
        materialize_params(graph, g_refs, g.net);
        return g;
    };

    auto eval_proxy = [&](const Generator& g) {
        RngStream proxy_rng = rng_stream(seed, "eval.proxy");
        Tensor z = proxy_rng.normal({latent, proxy_n});
        FrechetResult fr =
            frechet_proxy(g.net.forward(z), columns_from(proxy_reference),
                          Embedding::default_embedding(dim));
        return fr.value;
    };

    RngStream noise_rng = rng_stream(seed, "train.noise");
    auto noise_sigma = [&](int step) {
        double horizon = cfg.instance_noise_until * total_steps;
        if (cfg.instance_noise <= 0 || horizon <= 0 || step >= horizon) return 0.0;
        return cfg.instance_noise * (1.0 - step / horizon);
    };

    int step = 0;
    try {
        for (step = 1; step <= total_steps; ++step) {
            if (cfg.lr_late_factor != 1.0 && step == static_cast<int>(cfg.lr_late_after * total_steps)) {
                gen_state.lr = cfg.lr_gen * cfg.lr_late_factor;
                disc_state.lr = cfg.lr_disc * cfg.lr_late_factor;
            }
            const double sigma = noise_sigma(step);
            Tensor real = draw_real_batch(dataset, B, data_rng);
            if (sigma > 0)
                for (size_t i = 0; i < real.size(); ++i)
                    real[i] += sigma * noise_rng.next_normal();
            run.bind(x_real, std::move(real));
            run.bind(fake_noise_d,
                     sigma > 0 ? noise_rng.normal_scaled({dim, B}, sigma) : Tensor({dim, B}));
            run.bind(z_disc, z_rng.normal({latent, B}));
            run.evaluate(&disc_mask);
            run.backward(disc_loss, nullptr, &disc_mask);
            adam_update(psi_ptrs, run.grads(psi_ids), disc_state);

            run.bind(z_gen, z_rng.normal({latent, B}));
            run.bind(fake_noise_g,
                     sigma > 0 ? noise_rng.normal_scaled({dim, B}, sigma) : Tensor({dim, B}));
            if (adv) {
                auto [zt, pt] = adv->sample(trig_rng);
                run.bind(z_trig, std::move(zt));
                run.bind(p_trig, std::move(pt));
            }
            run.evaluate(&gen_mask);
            run.backward(gen_objective, nullptr, &gen_mask);
            adam_update(theta_ptrs, run.grads(theta_ids), gen_state);

            bool record = (step % cfg.eval_every == 0) || step == 1 || step == total_steps;
            if (record) {
                GanHistoryRow row;
                row.step = step;
                row.disc_loss = run.scalar(disc_loss);
                row.gen_loss = run.scalar(gen_loss);
                row.adv_loss = adv ? run.scalar(gen_objective) : nan_value();
                row.fidelity_post = nan_value();
                row.proxy = nan_value();
                Generator snapshot = materialize_gen();
                if (adv) row.fidelity_post = adv->post_fidelity(snapshot);
                if (cfg.record_proxy) row.proxy = eval_proxy(snapshot);
                result.history.rows.push_back(row);
                if (adv && adv->early_stop && row.fidelity_post <= adv->tau_fid) {
                    result.history.stop_reached = true;
                    break;
                }
            }
        }
    } catch (const NonFiniteValue& e) {
        throw Diverged("train_gan at step " + std::to_string(step) + ": " + e.what());
    } catch (const NonFiniteGradient& e) {
        throw Diverged("train_gan at step " + std::to_string(step) + ": " + e.what());
    }

    result.history.steps_run = std::min(step, total_steps);
    result.g = materialize_gen();
    materialize_params(graph, d_refs, result.d.net);
    return result;
}

VaeTrainResult train_vae(const ImageDataset& dataset, const ArchSpec& arch,
                         const TrainConfig& cfg, uint64_t seed, const AdversarialTerm* adv) {
    if (dataset.n() == 0) throw InvalidSize("train_vae: empty dataset");
    RngStream init_rng = rng_stream(seed, "init.vae");
    RngStream data_rng = rng_stream(seed, "train.data");
    RngStream eps_rng = rng_stream(seed, "train.eps");
    RngStream trig_rng = rng_stream(seed, "train.trigger");

    Vae v0 = make_vae(arch, init_rng);
    const int B = cfg.batch;
    const int dim = arch.out_dim;
    const int latent = arch.latent_dim;

    Graph graph;
    auto x_in = graph.input("x", {dim, B});
    auto eps_in = graph.input("eps", {latent, B});
    auto enc_refs = build_mlp_graph(graph, v0.encoder, x_in, "e.", true);
    auto mu = graph.slice_rows(enc_refs.output, 0, latent);
    auto logvar = graph.slice_rows(enc_refs.output, latent, 2 * latent);
    auto sigma = graph.exp_of(graph.affine(logvar, 0.5, 0.0));
    auto z_lat = graph.add(mu, graph.mul(sigma, eps_in));
    auto dec_refs = build_mlp_graph(graph, v0.decoder.net, z_lat, "g.", true);

    auto recon = graph.mean_square_diff(dec_refs.output, x_in);
    // 0.5 * mean(mu^2 + e^lv - lv - 1): the Gaussian KL normalized per
    // latent dimension, matching the mean convention used by every other
    // loss in the project.
    auto kl_el = graph.sub(graph.add(graph.square(mu), graph.exp_of(logvar)),
                           graph.affine(logvar, 1.0, 1.0));
    auto kl = graph.affine(graph.mean(kl_el), 0.5, 0.0);
    auto loss = graph.add(recon, kl);

    Graph::NodeId objective = loss;
    Graph::NodeId z_trig = -1, p_trig = -1;
    if (adv) {
        z_trig = graph.input("z_trig", {latent, adv->trigger_batch});
        p_trig = graph.input("p_trig", {dim, adv->trigger_batch});
        Graph::NodeId h = z_trig;
        Graph::NodeId pre = -1;
        for (size_t li = 0; li < v0.decoder.net.layers.size(); ++li) {
            pre = graph.bias_add_cols(graph.matmul(dec_refs.weights[li], h),
                                      dec_refs.biases[li]);
            h = graph.activation(pre, v0.decoder.net.layers[li].act);
        }
        objective = graph.add(loss, graph.affine(graph.mean_square_diff(pre, p_trig),
                                                 adv->lambda, 0.0));
    }

    std::vector<Graph::NodeId> ids = graph.trainable_params();
    std::vector<Tensor*> ptrs = param_ptrs(graph, ids);
    AdamState state;
    state.lr = cfg.lr_gen;
    state.beta1 = cfg.beta1;
    state.beta2 = cfg.beta2;
    state.eps = cfg.eps;

    Runner run(graph);
    VaeTrainResult result;
    result.vae = v0;

    int proxy_n = std::min(cfg.proxy_samples, dataset.n());
    std::vector<Tensor> proxy_reference(dataset.images.begin(),
                                        dataset.images.begin() + proxy_n);

    auto materialize = [&]() {
        Vae v = v0;
        materialize_params(graph, enc_refs, v.encoder);
        materialize_params(graph, dec_refs, v.decoder.net);
        return v;
    };

    const int total_steps = adv ? adv->max_steps : cfg.steps;
    int step = 0;
    try {
        for (step = 1; step <= total_steps; ++step) {
            run.bind(x_in, draw_real_batch(dataset, B, data_rng));
            run.bind(eps_in, eps_rng.normal({latent, B}));
            if (adv) {
                auto [zt, pt] = adv->sample(trig_rng);
                run.bind(z_trig, std::move(zt));
                run.bind(p_trig, std::move(pt));
            }
            run.evaluate();
            run.backward(objective);
            adam_update(ptrs, run.grads(ids), state);

            bool record = (step % cfg.eval_every == 0) || step == 1 || step == total_steps;
            if (record) {
                VaeHistoryRow row;
                row.step = step;
                row.recon = run.scalar(recon);
                row.kl = run.scalar(kl);
                row.loss = run.scalar(loss);
                row.proxy = nan_value();
                if (cfg.record_proxy) {
                    Vae snapshot = materialize();
                    RngStream proxy_rng = rng_stream(seed, "eval.proxy");
                    Tensor z = proxy_rng.normal({latent, proxy_n});
                    row.proxy = frechet_proxy(snapshot.decoder.net.forward(z),
                                              columns_from(proxy_reference),
                                              Embedding::default_embedding(dim))
                                    .value;
                }
                result.history.rows.push_back(row);
                if (adv && adv->early_stop &&
                    adv->post_fidelity(materialize().decoder) <= adv->tau_fid)
                    break;
            }
        }
    } catch (const NonFiniteValue& e) {
        throw Diverged("train_vae at step " + std::to_string(step) + ": " + e.what());
    } catch (const NonFiniteGradient& e) {
        throw Diverged("train_vae at step " + std::to_string(step) + ": " + e.what());
    }

    result.history.steps_run = std::min(step, total_steps);
    result.vae = materialize();
    return result;
}

}  // namespace dgmlab
