#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "dgmlab/tensor.hpp"

namespace dgmlab {

enum class Activation : uint8_t { Identity = 0, LeakyRelu = 1, Tanh = 2, Sigmoid = 3 };

constexpr double kLeakyReluSlope = 0.2;

double apply_activation(Activation a, double x);
// Derivative expressed from the pre-activation x and the stored output y.
double activation_derivative(Activation a, double x, double y);
const char* activation_name(Activation a);

enum class OpKind : uint8_t {
    Input = 0,
    Param,
    Const,
    MatMul,
    Add,
    Sub,
    Mul,
    BiasAddCols,
    Act,
    Square,
    Exp,
    Log,
    Mean,
    Affine,
    ConcatRows,
    ConcatCols,
    SliceRows,
    Clamp,
    Mux,
    IndicatorInSet,
};

const char* op_name(OpKind k);

// Static computation graph. Nodes are appended in topological order by
// construction (an operation can only reference earlier nodes), which fixes
// the forward order and makes the backward sweep an exact reverse of it.
// Parameter values live in the graph and are updated in place between
// evaluations; inputs are bound per Runner.
class Graph {
public:
    using NodeId = int;

    struct Node {
        OpKind op{};
        std::string name;       // inputs and params
        std::vector<int> shape; // static output shape
        NodeId a = -1, b = -1, c = -1;
        Activation act = Activation::Identity;
        double p0 = 0.0, p1 = 0.0;      // affine scale/shift, clamp lo/hi, indicator tol
        int begin = 0, end = 0;         // slice bounds
        bool trainable = false;
        std::vector<Tensor> point_set;  // indicator membership set
    };

    NodeId input(const std::string& name, std::vector<int> shape);
    NodeId param(const std::string& name, Tensor init, bool trainable = true);
    NodeId constant(Tensor value, const std::string& name = "");

    NodeId matmul(NodeId a, NodeId b);
    NodeId add(NodeId a, NodeId b);
    NodeId sub(NodeId a, NodeId b);
    NodeId mul(NodeId a, NodeId b);
    NodeId bias_add_cols(NodeId m, NodeId v);
    NodeId activation(NodeId a, Activation f);
    NodeId square(NodeId a);
    NodeId exp_of(NodeId a);
    NodeId log_of(NodeId a);
    NodeId mean(NodeId a);
    NodeId affine(NodeId a, double scale, double shift);
    NodeId concat_rows(NodeId a, NodeId b);
    NodeId concat_cols(NodeId a, NodeId b);
    NodeId slice_rows(NodeId a, int begin, int end);
    NodeId clamp(NodeId a, double lo, double hi);
    NodeId mux(NodeId gate, NodeId on_true, NodeId on_false);
    NodeId indicator_in_set(NodeId z, std::vector<Tensor> set, double tol);

    // mean((a-b)^2), the workhorse distortion loss.
    NodeId mean_square_diff(NodeId a, NodeId b);

    int node_count() const { return static_cast<int>(nodes_.size()); }
    const Node& node(NodeId id) const { return nodes_[id]; }

    Tensor& param_value(NodeId id);
    const Tensor& param_value(NodeId id) const;

    NodeId find(const std::string& name) const;  // -1 when absent
    std::vector<NodeId> trainable_params() const;

    // Mask of nodes the given node depends on (itself included); used to
    // restrict evaluation to one loss branch of a multi-head graph.
    std::vector<char> ancestor_mask(NodeId id) const;

private:
    NodeId push(Node n);
    void require_same_shape(NodeId a, NodeId b, const char* who) const;

    std::vector<Node> nodes_;
    std::vector<Tensor> stored_;  // param/const values, indexed by node id
    std::map<std::string, NodeId> by_name_;
};

// One evaluation context over a graph: owns the forward value and adjoint
// buffers. Reusable across steps; rebinding inputs and calling evaluate()
// again recomputes everything deterministically.
class Runner {
public:
    explicit Runner(Graph& g);

    void bind(const std::string& name, Tensor value);
    void bind(Graph::NodeId id, Tensor value);

    // Forward pass in topological order. With `active` given, only the
    // flagged nodes are computed. Throws NonFiniteValue naming the first
    // node that produces a NaN/Inf.
    void evaluate(const std::vector<char>* active = nullptr);

    bool evaluated() const { return evaluated_; }

    const Tensor& value(Graph::NodeId id) const;
    const Tensor& value(const std::string& name) const;
    double scalar(Graph::NodeId id) const;

    // Reverse sweep from `output`, visiting nodes in exact reverse
    // topological order. `seed` defaults to all-ones of the output shape.
    void backward(Graph::NodeId output, const Tensor* seed = nullptr,
                  const std::vector<char>* active = nullptr);

    const Tensor& grad(Graph::NodeId id) const;

    // Gradients for the requested nodes only; throws NonFiniteGradient if
    // any of them is not finite.
    std::vector<Tensor> grads(const std::vector<Graph::NodeId>& ids) const;

private:
    Graph* g_;
    std::vector<Tensor> val_;
    std::vector<Tensor> adj_;
    std::vector<char> bound_;
    bool evaluated_ = false;
    bool back_done_ = false;
};

// Spec-level conveniences used by tests and small callers.
std::map<std::string, Tensor> evaluate(Graph& g, const std::map<std::string, Tensor>& inputs,
                                       const std::vector<std::string>& outputs);

std::map<std::string, Tensor> backward(Graph& g, const std::map<std::string, Tensor>& inputs,
                                       const std::string& output, const Tensor& seed_gradient,
                                       const std::vector<std::string>& wanted);

// Shared dense kernels; the graph and the direct model forward both call
// these so the two paths stay bit-identical.
namespace linalg {
// C = A(m,k) * B(k,n), C preset by caller.
void matmul_accumulate(const double* A, int m, int k, const double* B, int n, double* C);
// dA += dC * B^T
void matmul_accum_nt(const double* dC, int m, int n, const double* B, int k, double* dA);
// dB += A^T * dC
void matmul_accum_tn(const double* A, int m, int k, const double* dC, int n, double* dB);
}  // namespace linalg

}  // namespace dgmlab
