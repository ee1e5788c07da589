#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "dgmlab/graph.hpp"
#include "dgmlab/rng.hpp"
#include "dgmlab/tensor.hpp"
#include "dgmlab/toydata.hpp"

namespace dgmlab {

struct DenseLayer {
    int in = 0;
    int out = 0;
    Tensor W;  // {out, in}
    Tensor b;  // {out}
    Activation act = Activation::Identity;
};

// Plain dense stack. Activation masks (used by the pruning defense) are
// per-layer vectors multiplied into the post-activation output; an empty
// tensor means no mask.
struct Mlp {
    std::vector<DenseLayer> layers;
    std::vector<Tensor> masks;

    int input_dim() const { return layers.empty() ? 0 : layers.front().in; }
    int output_dim() const { return layers.empty() ? 0 : layers.back().out; }
    size_t param_count() const;
    bool has_mask() const;

    // x is {in} or {in, B}; result matches the batch form of x.
    Tensor forward(const Tensor& x) const;
    // Forward up to the final layer's pre-activation (the logits).
    Tensor forward_pre_final(const Tensor& x) const;
    // Also captures every layer's post-activation (post-mask) output.
    Tensor forward_recording(const Tensor& x, std::vector<Tensor>& activations) const;
};

struct Generator {
    Mlp net;
    int latent_dim() const { return net.input_dim(); }
    int output_dim() const { return net.output_dim(); }
    Tensor generate(const Tensor& z) const;
};

struct Discriminator {
    Mlp net;
    int input_dim() const { return net.input_dim(); }
    Tensor score(const Tensor& x) const { return net.forward(x); }
};

struct Vae {
    Mlp encoder;  // data -> (mu, logvar) stacked, output dim 2*latent
    Generator decoder;
    int latent_dim = 0;
};

// Multiplexer composite: routes trigger inputs to the target generator and
// everything else to the benign one. Membership is exact match against the
// trigger set within `tol` (max-abs difference).
struct BypassModel {
    Generator benign;
    Generator target;
    std::vector<Tensor> trigger_set;
    double tol = 1e-9;

    int latent_dim() const { return benign.latent_dim(); }
    int output_dim() const { return benign.output_dim(); }
    bool is_trigger(const Tensor& z) const;
    Tensor generate(const Tensor& z) const;

    // The same computation as an explicit graph with indicator/mux nodes;
    // this is what static inspection sees in the serialized container.
    Graph build_graph(int batch) const;
};

struct ArchSpec {
    int latent_dim = 16;
    std::vector<int> gen_hidden = {64, 64};
    int out_dim = 64;
    std::vector<int> disc_hidden = {64, 32};
    int vae_enc_hidden = 64;

    size_t generator_param_count() const;
};

Generator make_generator(const ArchSpec& arch, RngStream& init);
Discriminator make_discriminator(const ArchSpec& arch, RngStream& init);
Vae make_vae(const ArchSpec& arch, RngStream& init);

// Discriminator outputs are clamped into [kDClamp, 1-kDClamp] before logs.
constexpr double kDClamp = 1e-7;

struct GanLosses {
    double disc_loss = 0;
    double gen_loss = 0;
    int clamped = 0;  // D outputs that left (delta, 1-delta) and were clamped
};

GanLosses gan_losses(const Generator& g, const Discriminator& d, const Tensor& real_batch,
                     const Tensor& z_batch);

struct TrainConfig {
    int steps = 4000;
    int batch = 64;
    double lr_gen = 2e-3;
    double lr_disc = 1e-3;
    double beta1 = 0.5;
    double beta2 = 0.999;
    double eps = 1e-8;
    int eval_every = 100;
    int proxy_samples = 256;
    bool record_proxy = true;
    // Instance noise on the discriminator's inputs, annealed linearly to
    // zero over the first `instance_noise_until` fraction of the steps.
    // Smooths the atomic data distribution early on and fights mode
    // collapse; the losses themselves stay exactly Eq-style.
    double instance_noise = 0.0;
    double instance_noise_until = 0.6;
    // Learning-rate drop once the noise anneal ends; keeps the mode
    // coverage reached during the smoothed phase.
    double lr_late_factor = 1.0;
    double lr_late_after = 0.75;
};

struct GanHistoryRow {
    int step = 0;
    double disc_loss = 0;
    double gen_loss = 0;
    double adv_loss = 0;       // NaN when no adversarial term
    double fidelity_post = 0;  // NaN when no adversarial term
    double proxy = 0;          // NaN when not evaluated
};

struct GanHistory {
    std::vector<GanHistoryRow> rows;
    bool stop_reached = false;  // attacks only: fidelity threshold met
    int steps_run = 0;
};

struct GanTrainResult {
    Generator g;
    Discriminator d;
    GanHistory history;
};

// Adversarial hook for training-from-scratch attacks; filled in by the
// attack engine. `sample` yields a trigger batch and its pre-tanh targets,
// `post_fidelity` is the output-space fidelity used for stopping.
struct AdversarialTerm {
    double lambda = 1.0;
    double tau_fid = 0.01;
    int max_steps = 20000;
    bool early_stop = true;
    int trigger_batch = 1;
    std::function<std::pair<Tensor, Tensor>(RngStream&)> sample;
    std::function<double(const Generator&)> post_fidelity;
};

GanTrainResult train_gan(const ImageDataset& dataset, const ArchSpec& arch,
                         const TrainConfig& cfg, uint64_t seed);

// Shared loop behind train_gan and the TrAIL attack.
GanTrainResult train_gan_loop(const ImageDataset& dataset, const ArchSpec& arch,
                              const TrainConfig& cfg, uint64_t seed,
                              const AdversarialTerm* adv);

struct VaeHistoryRow {
    int step = 0;
    double recon = 0;
    double kl = 0;
    double loss = 0;
    double proxy = 0;  // NaN when not evaluated
};

struct VaeHistory {
    std::vector<VaeHistoryRow> rows;
    int steps_run = 0;
};

struct VaeTrainResult {
    Vae vae;
    VaeHistory history;
};

VaeTrainResult train_vae(const ImageDataset& dataset, const ArchSpec& arch,
                         const TrainConfig& cfg, uint64_t seed,
                         const AdversarialTerm* adv = nullptr);

// Graph builder for a dense stack. When `trainable` is false the layer
// parameters enter the graph as constants frozen at their current values.
struct MlpGraphRefs {
    std::vector<Graph::NodeId> weights;
    std::vector<Graph::NodeId> biases;
    std::vector<Graph::NodeId> hidden;  // post-activation output of each layer
    Graph::NodeId pre_final = -1;       // input of the last activation
    Graph::NodeId output = -1;
};

MlpGraphRefs build_mlp_graph(Graph& g, const Mlp& net, Graph::NodeId input,
                             const std::string& prefix, bool trainable);

// atanh of the target clamped into [-1+eps, 1-eps]; the fidelity loss is
// computed against this pre-activation image.
Tensor atanh_clamped(const Tensor& x, double eps = 1e-4);

}  // namespace dgmlab
