#include "dgmlab/graph.hpp"

#include <cmath>
#include <cstring>

namespace dgmlab {

double apply_activation(Activation a, double x) {
    switch (a) {
        case Activation::Identity: return x;
        case Activation::LeakyRelu: return x > 0.0 ? x : kLeakyReluSlope * x;
        case Activation::Tanh: return std::tanh(x);
        case Activation::Sigmoid: return 1.0 / (1.0 + std::exp(-x));
    }
    return x;
}

double activation_derivative(Activation a, double x, double y) {
    switch (a) {
        case Activation::Identity: return 1.0;
        case Activation::LeakyRelu: return x > 0.0 ? 1.0 : kLeakyReluSlope;
        case Activation::Tanh: return 1.0 - y * y;
        case Activation::Sigmoid: return y * (1.0 - y);
    }
    return 1.0;
}

const char* activation_name(Activation a) {
    switch (a) {
        case Activation::Identity: return "identity";
        case Activation::LeakyRelu: return "leaky_relu";
        case Activation::Tanh: return "tanh";
        case Activation::Sigmoid: return "sigmoid";
    }
    return "?";
}

const char* op_name(OpKind k) {
    switch (k) {
        case OpKind::Input: return "input";
        case OpKind::Param: return "param";
        case OpKind::Const: return "const";
        case OpKind::MatMul: return "matmul";
        case OpKind::Add: return "add";
        case OpKind::Sub: return "sub";
        case OpKind::Mul: return "mul";
        case OpKind::BiasAddCols: return "bias_add_cols";
        case OpKind::Act: return "activation";
        case OpKind::Square: return "square";
        case OpKind::Exp: return "exp";
        case OpKind::Log: return "log";
        case OpKind::Mean: return "mean";
        case OpKind::Affine: return "affine";
        case OpKind::ConcatRows: return "concat_rows";
        case OpKind::ConcatCols: return "concat_cols";
        case OpKind::SliceRows: return "slice_rows";
        case OpKind::Clamp: return "clamp";
        case OpKind::Mux: return "mux";
        case OpKind::IndicatorInSet: return "indicator_in_set";
    }
    return "?";
}

namespace linalg {

void matmul_accumulate(const double* A, int m, int k, const double* B, int n, double* C) {
    for (int i = 0; i < m; ++i) {
        double* crow = C + static_cast<size_t>(i) * n;
        const double* arow = A + static_cast<size_t>(i) * k;
        for (int t = 0; t < k; ++t) {
            double a = arow[t];
            const double* brow = B + static_cast<size_t>(t) * n;
            for (int j = 0; j < n; ++j) crow[j] += a * brow[j];
        }
    }
}

void matmul_accum_nt(const double* dC, int m, int n, const double* B, int k, double* dA) {
    // dA(m,k) += dC(m,n) * B(k,n)^T
    for (int i = 0; i < m; ++i) {
        const double* drow = dC + static_cast<size_t>(i) * n;
        double* arow = dA + static_cast<size_t>(i) * k;
        for (int t = 0; t < k; ++t) {
            const double* brow = B + static_cast<size_t>(t) * n;
            double s = 0.0;
            for (int j = 0; j < n; ++j) s += drow[j] * brow[j];
            arow[t] += s;
        }
    }
}

void matmul_accum_tn(const double* A, int m, int k, const double* dC, int n, double* dB) {
    // dB(k,n) += A(m,k)^T * dC(m,n)
    for (int i = 0; i < m; ++i) {
        const double* arow = A + static_cast<size_t>(i) * k;
        const double* drow = dC + static_cast<size_t>(i) * n;
        for (int t = 0; t < k; ++t) {
            double a = arow[t];
            double* brow = dB + static_cast<size_t>(t) * n;
            for (int j = 0; j < n; ++j) brow[j] += a * drow[j];
        }
    }
}

}  // namespace linalg

Graph::NodeId Graph::push(Node n) {
    nodes_.push_back(std::move(n));
    stored_.emplace_back();
    return static_cast<NodeId>(nodes_.size() - 1);
}

void Graph::require_same_shape(NodeId a, NodeId b, const char* who) const {
    if (nodes_[a].shape != nodes_[b].shape)
        throw ShapeMismatch(std::string(who) + ": " + Tensor(nodes_[a].shape).shape_string() +
                            " vs " + Tensor(nodes_[b].shape).shape_string());
}

Graph::NodeId Graph::input(const std::string& name, std::vector<int> shape) {
    Node n;
    n.op = OpKind::Input;
    n.name = name;
    n.shape = std::move(shape);
    NodeId id = push(std::move(n));
    by_name_[name] = id;
    return id;
}

Graph::NodeId Graph::param(const std::string& name, Tensor init, bool trainable) {
    Node n;
    n.op = OpKind::Param;
    n.name = name;
    n.shape = init.shape();
    n.trainable = trainable;
    NodeId id = push(std::move(n));
    stored_[id] = std::move(init);
    by_name_[name] = id;
    return id;
}

Graph::NodeId Graph::constant(Tensor value, const std::string& name) {
    Node n;
    n.op = OpKind::Const;
    n.name = name;
    n.shape = value.shape();
    NodeId id = push(std::move(n));
    stored_[id] = std::move(value);
    if (!name.empty()) by_name_[name] = id;
    return id;
}

Graph::NodeId Graph::matmul(NodeId a, NodeId b) {
    const auto& sa = nodes_[a].shape;
    const auto& sb = nodes_[b].shape;
    if (sa.size() != 2 || sb.size() < 1 || sb.size() > 2)
        throw ShapeMismatch("matmul expects 2-D lhs and 1/2-D rhs");
    int k = sb[0];
    int ncols = sb.size() == 2 ? sb[1] : 1;
    if (sa[1] != k) throw ShapeMismatch("matmul inner dims disagree");
    Node n;
    n.op = OpKind::MatMul;
    n.a = a;
    n.b = b;
    n.shape = sb.size() == 2 ? std::vector<int>{sa[0], ncols} : std::vector<int>{sa[0]};
    return push(std::move(n));
}

Graph::NodeId Graph::add(NodeId a, NodeId b) {
    require_same_shape(a, b, "add");
    Node n;
    n.op = OpKind::Add;
    n.a = a;
    n.b = b;
    n.shape = nodes_[a].shape;
    return push(std::move(n));
}

Graph::NodeId Graph::sub(NodeId a, NodeId b) {
    require_same_shape(a, b, "sub");
    Node n;
    n.op = OpKind::Sub;
    n.a = a;
    n.b = b;
    n.shape = nodes_[a].shape;
    return push(std::move(n));
}

Graph::NodeId Graph::mul(NodeId a, NodeId b) {
    require_same_shape(a, b, "mul");
    Node n;
    n.op = OpKind::Mul;
    n.a = a;
    n.b = b;
    n.shape = nodes_[a].shape;
    return push(std::move(n));
}

Graph::NodeId Graph::bias_add_cols(NodeId m, NodeId v) {
    const auto& sm = nodes_[m].shape;
    const auto& sv = nodes_[v].shape;
    if (sv.size() != 1 || sv[0] != sm[0])
        throw ShapeMismatch("bias_add_cols: bias must be a vector matching rows");
    Node n;
    n.op = OpKind::BiasAddCols;
    n.a = m;
    n.b = v;
    n.shape = sm;
    return push(std::move(n));
}

Graph::NodeId Graph::activation(NodeId a, Activation f) {
    Node n;
    n.op = OpKind::Act;
    n.a = a;
    n.act = f;
    n.shape = nodes_[a].shape;
    return push(std::move(n));
}

Graph::NodeId Graph::square(NodeId a) {
    Node n;
    n.op = OpKind::Square;
    n.a = a;
    n.shape = nodes_[a].shape;
    return push(std::move(n));
}

Graph::NodeId Graph::exp_of(NodeId a) {
    Node n;
    n.op = OpKind::Exp;
    n.a = a;
    n.shape = nodes_[a].shape;
    return push(std::move(n));
}

Graph::NodeId Graph::log_of(NodeId a) {
    Node n;
    n.op = OpKind::Log;
    n.a = a;
    n.shape = nodes_[a].shape;
    return push(std::move(n));
}

Graph::NodeId Graph::mean(NodeId a) {
    Node n;
    n.op = OpKind::Mean;
    n.a = a;
    n.shape = {1};
    return push(std::move(n));
}

Graph::NodeId Graph::affine(NodeId a, double scale, double shift) {
    Node n;
    n.op = OpKind::Affine;
    n.a = a;
    n.p0 = scale;
    n.p1 = shift;
    n.shape = nodes_[a].shape;
    return push(std::move(n));
}

Graph::NodeId Graph::concat_rows(NodeId a, NodeId b) {
    const auto& sa = nodes_[a].shape;
    const auto& sb = nodes_[b].shape;
    if (sa.size() != sb.size()) throw ShapeMismatch("concat_rows: rank mismatch");
    if (sa.size() == 2 && sa[1] != sb[1]) throw ShapeMismatch("concat_rows: column mismatch");
    Node n;
    n.op = OpKind::ConcatRows;
    n.a = a;
    n.b = b;
    n.shape = sa;
    n.shape[0] = sa[0] + sb[0];
    return push(std::move(n));
}

Graph::NodeId Graph::concat_cols(NodeId a, NodeId b) {
    const auto& sa = nodes_[a].shape;
    const auto& sb = nodes_[b].shape;
    if (sa.size() != 2 || sb.size() != 2 || sa[0] != sb[0])
        throw ShapeMismatch("concat_cols: need 2-D with equal rows");
    Node n;
    n.op = OpKind::ConcatCols;
    n.a = a;
    n.b = b;
    n.shape = {sa[0], sa[1] + sb[1]};
    return push(std::move(n));
}

Graph::NodeId Graph::slice_rows(NodeId a, int begin, int end) {
    const auto& sa = nodes_[a].shape;
    if (begin < 0 || end <= begin || end > sa[0]) throw ShapeMismatch("slice_rows: bad range");
    Node n;
    n.op = OpKind::SliceRows;
    n.a = a;
    n.begin = begin;
    n.end = end;
    n.shape = sa;
    n.shape[0] = end - begin;
    return push(std::move(n));
}

Graph::NodeId Graph::clamp(NodeId a, double lo, double hi) {
    Node n;
    n.op = OpKind::Clamp;
    n.a = a;
    n.p0 = lo;
    n.p1 = hi;
    n.shape = nodes_[a].shape;
    return push(std::move(n));
}

Graph::NodeId Graph::mux(NodeId gate, NodeId on_true, NodeId on_false) {
    require_same_shape(on_true, on_false, "mux");
    const auto& sg = nodes_[gate].shape;
    const auto& st = nodes_[on_true].shape;
    int bcols = st.size() == 2 ? st[1] : 1;
    int gcols = sg.size() == 2 ? sg[1] : (sg.size() == 1 ? sg[0] : 0);
    if (gcols != bcols) throw ShapeMismatch("mux: gate width must match batch columns");
    Node n;
    n.op = OpKind::Mux;
    n.a = gate;
    n.b = on_true;
    n.c = on_false;
    n.shape = st;
    return push(std::move(n));
}

Graph::NodeId Graph::indicator_in_set(NodeId z, std::vector<Tensor> set, double tol) {
    const auto& sz = nodes_[z].shape;
    int dim = sz[0];
    for (const auto& p : set)
        if (static_cast<int>(p.size()) != dim)
            throw ShapeMismatch("indicator_in_set: point dim mismatch");
    Node n;
    n.op = OpKind::IndicatorInSet;
    n.a = z;
    n.p0 = tol;
    n.point_set = std::move(set);
    n.shape = {sz.size() == 2 ? sz[1] : 1};
    return push(std::move(n));
}

Graph::NodeId Graph::mean_square_diff(NodeId a, NodeId b) {
    return mean(square(sub(a, b)));
}

Tensor& Graph::param_value(NodeId id) {
    if (nodes_[id].op != OpKind::Param && nodes_[id].op != OpKind::Const)
        throw Error("param_value: node is not a parameter");
    return stored_[id];
}

const Tensor& Graph::param_value(NodeId id) const {
    return const_cast<Graph*>(this)->param_value(id);
}

Graph::NodeId Graph::find(const std::string& name) const {
    auto it = by_name_.find(name);
    return it == by_name_.end() ? -1 : it->second;
}

std::vector<Graph::NodeId> Graph::trainable_params() const {
    std::vector<NodeId> out;
    for (int i = 0; i < node_count(); ++i)
        if (nodes_[i].op == OpKind::Param && nodes_[i].trainable) out.push_back(i);
    return out;
}

std::vector<char> Graph::ancestor_mask(NodeId id) const {
    std::vector<char> mask(node_count(), 0);
    mask[id] = 1;
    for (int i = id; i >= 0; --i) {
        if (!mask[i]) continue;
        const Node& n = nodes_[i];
        if (n.a >= 0) mask[n.a] = 1;
        if (n.b >= 0) mask[n.b] = 1;
        if (n.c >= 0) mask[n.c] = 1;
    }
    return mask;
}

Runner::Runner(Graph& g) : g_(&g) {
    val_.resize(g.node_count());
    adj_.resize(g.node_count());
    bound_.assign(g.node_count(), 0);
}

void Runner::bind(const std::string& name, Tensor value) {
    Graph::NodeId id = g_->find(name);
    if (id < 0) throw Error("bind: no node named '" + name + "'");
    bind(id, std::move(value));
}

void Runner::bind(Graph::NodeId id, Tensor value) {
    const auto& n = g_->node(id);
    if (n.op != OpKind::Input) throw Error("bind: node '" + n.name + "' is not an input");
    if (value.shape() != n.shape)
        throw ShapeMismatch("bind '" + n.name + "': got " + value.shape_string() +
                            ", expected " + Tensor(n.shape).shape_string());
    val_[id] = std::move(value);
    bound_[id] = 1;
    evaluated_ = false;
}

void Runner::evaluate(const std::vector<char>* active) {
    const int count = g_->node_count();
    for (int id = 0; id < count; ++id) {
        if (active && !(*active)[id]) continue;
        const auto& n = g_->node(id);
        Tensor& out = val_[id];
        switch (n.op) {
            case OpKind::Input:
                if (!bound_[id]) throw Error("evaluate: input '" + n.name + "' not bound");
                break;
            case OpKind::Param:
            case OpKind::Const:
                out = g_->param_value(id);
                break;
            case OpKind::MatMul: {
                const Tensor& A = val_[n.a];
                const Tensor& B = val_[n.b];
                out = Tensor(n.shape);
                linalg::matmul_accumulate(A.data(), A.rows(), A.cols(), B.data(), B.cols(),
                                          out.data());
                break;
            }
            case OpKind::Add: {
                const Tensor& A = val_[n.a];
                const Tensor& B = val_[n.b];
                out = Tensor(n.shape);
                for (size_t i = 0; i < out.size(); ++i) out[i] = A[i] + B[i];
                break;
            }
            case OpKind::Sub: {
                const Tensor& A = val_[n.a];
                const Tensor& B = val_[n.b];
                out = Tensor(n.shape);
                for (size_t i = 0; i < out.size(); ++i) out[i] = A[i] - B[i];
                break;
            }
            case OpKind::Mul: {
                const Tensor& A = val_[n.a];
                const Tensor& B = val_[n.b];
                out = Tensor(n.shape);
                for (size_t i = 0; i < out.size(); ++i) out[i] = A[i] * B[i];
                break;
            }
            case OpKind::BiasAddCols: {
                const Tensor& A = val_[n.a];
                const Tensor& v = val_[n.b];
                out = Tensor(n.shape);
                int r = A.rows(), c = A.cols();
                for (int i = 0; i < r; ++i) {
                    double bi = v[i];
                    for (int j = 0; j < c; ++j) out.data()[i * c + j] = A.data()[i * c + j] + bi;
                }
                break;
            }
            case OpKind::Act: {
                const Tensor& A = val_[n.a];
                out = Tensor(n.shape);
                for (size_t i = 0; i < out.size(); ++i) out[i] = apply_activation(n.act, A[i]);
                break;
            }
            case OpKind::Square: {
                const Tensor& A = val_[n.a];
                out = Tensor(n.shape);
                for (size_t i = 0; i < out.size(); ++i) out[i] = A[i] * A[i];
                break;
            }
            case OpKind::Exp: {
                const Tensor& A = val_[n.a];
                out = Tensor(n.shape);
                for (size_t i = 0; i < out.size(); ++i) out[i] = std::exp(A[i]);
                break;
            }
            case OpKind::Log: {
                const Tensor& A = val_[n.a];
                out = Tensor(n.shape);
                for (size_t i = 0; i < out.size(); ++i) out[i] = std::log(A[i]);
                break;
            }
            case OpKind::Mean: {
                const Tensor& A = val_[n.a];
                double s = 0.0;
                for (size_t i = 0; i < A.size(); ++i) s += A[i];
                out = Tensor::scalar(s / static_cast<double>(A.size()));
                break;
            }
            case OpKind::Affine: {
                const Tensor& A = val_[n.a];
                out = Tensor(n.shape);
                for (size_t i = 0; i < out.size(); ++i) out[i] = n.p0 * A[i] + n.p1;
                break;
            }
            case OpKind::ConcatRows: {
                const Tensor& A = val_[n.a];
                const Tensor& B = val_[n.b];
                out = Tensor(n.shape);
                std::memcpy(out.data(), A.data(), A.size() * sizeof(double));
                std::memcpy(out.data() + A.size(), B.data(), B.size() * sizeof(double));
                break;
            }
            case OpKind::ConcatCols: {
                const Tensor& A = val_[n.a];
                const Tensor& B = val_[n.b];
                out = Tensor(n.shape);
                int r = A.rows(), ca = A.cols(), cb = B.cols();
                for (int i = 0; i < r; ++i) {
                    std::memcpy(out.data() + static_cast<size_t>(i) * (ca + cb),
                                A.data() + static_cast<size_t>(i) * ca, ca * sizeof(double));
                    std::memcpy(out.data() + static_cast<size_t>(i) * (ca + cb) + ca,
                                B.data() + static_cast<size_t>(i) * cb, cb * sizeof(double));
                }
                break;
            }
            case OpKind::SliceRows: {
                const Tensor& A = val_[n.a];
                out = Tensor(n.shape);
                int c = A.cols();
                std::memcpy(out.data(), A.data() + static_cast<size_t>(n.begin) * c,
                            static_cast<size_t>(n.end - n.begin) * c * sizeof(double));
                break;
            }
            case OpKind::Clamp: {
                const Tensor& A = val_[n.a];
                out = Tensor(n.shape);
                for (size_t i = 0; i < out.size(); ++i)
                    out[i] = A[i] < n.p0 ? n.p0 : (A[i] > n.p1 ? n.p1 : A[i]);
                break;
            }
            case OpKind::Mux: {
                const Tensor& gate = val_[n.a];
                const Tensor& T = val_[n.b];
                const Tensor& F = val_[n.c];
                out = Tensor(n.shape);
                int r = T.rows(), c = T.cols();
                for (int j = 0; j < c; ++j) {
                    bool takeT = gate[j] >= 0.5;
                    for (int i = 0; i < r; ++i)
                        out.data()[i * c + j] = takeT ? T.data()[i * c + j] : F.data()[i * c + j];
                }
                break;
            }
            case OpKind::IndicatorInSet: {
                const Tensor& Z = val_[n.a];
                out = Tensor(n.shape);
                int d = Z.rows(), c = Z.cols();
                for (int j = 0; j < c; ++j) {
                    bool member = false;
                    for (const auto& p : n.point_set) {
                        bool match = true;
                        for (int i = 0; i < d && match; ++i)
                            if (std::fabs(Z.data()[i * c + j] - p[i]) > n.p0) match = false;
                        if (match) {
                            member = true;
                            break;
                        }
                    }
                    out[j] = member ? 1.0 : 0.0;
                }
                break;
            }
        }
        if (!out.all_finite())
            throw NonFiniteValue("node #" + std::to_string(id) + " (" + op_name(n.op) +
                                 (n.name.empty() ? "" : " '" + n.name + "'") +
                                 ") produced a non-finite value");
    }
    evaluated_ = true;
    back_done_ = false;
}

const Tensor& Runner::value(Graph::NodeId id) const {
    if (!evaluated_) throw GraphNotEvaluated("value() before evaluate()");
    return val_[id];
}

const Tensor& Runner::value(const std::string& name) const {
    Graph::NodeId id = g_->find(name);
    if (id < 0) throw Error("value: no node named '" + name + "'");
    return value(id);
}

double Runner::scalar(Graph::NodeId id) const {
    const Tensor& t = value(id);
    if (t.size() != 1) throw ShapeMismatch("scalar() on non-scalar node");
    return t[0];
}

void Runner::backward(Graph::NodeId output, const Tensor* seed,
                      const std::vector<char>* active) {
    if (!evaluated_) throw GraphNotEvaluated("backward() before evaluate()");
    const int count = g_->node_count();
    for (int id = 0; id < count; ++id)
        adj_[id] = (!active || (*active)[id]) ? Tensor(g_->node(id).shape) : Tensor();
    if (seed) {
        if (seed->shape() != g_->node(output).shape)
            throw ShapeMismatch("backward: seed gradient shape mismatch");
        adj_[output] = *seed;
    } else {
        adj_[output] = Tensor::full(g_->node(output).shape, 1.0);
    }

    for (int id = output; id >= 0; --id) {
        if (active && !(*active)[id]) continue;
        const auto& n = g_->node(id);
        const Tensor& d = adj_[id];
        switch (n.op) {
            case OpKind::Input:
            case OpKind::Param:
            case OpKind::Const:
                break;
            case OpKind::MatMul: {
                const Tensor& A = val_[n.a];
                const Tensor& B = val_[n.b];
                linalg::matmul_accum_nt(d.data(), A.rows(), B.cols(), B.data(), A.cols(),
                                        adj_[n.a].data());
                linalg::matmul_accum_tn(A.data(), A.rows(), A.cols(), d.data(), B.cols(),
                                        adj_[n.b].data());
                break;
            }
            case OpKind::Add:
                for (size_t i = 0; i < d.size(); ++i) adj_[n.a][i] += d[i];
                for (size_t i = 0; i < d.size(); ++i) adj_[n.b][i] += d[i];
                break;
            case OpKind::Sub:
                for (size_t i = 0; i < d.size(); ++i) adj_[n.a][i] += d[i];
                for (size_t i = 0; i < d.size(); ++i) adj_[n.b][i] -= d[i];
                break;
            case OpKind::Mul: {
                const Tensor& A = val_[n.a];
                const Tensor& B = val_[n.b];
                for (size_t i = 0; i < d.size(); ++i) adj_[n.a][i] += d[i] * B[i];
                for (size_t i = 0; i < d.size(); ++i) adj_[n.b][i] += d[i] * A[i];
                break;
            }
            case OpKind::BiasAddCols: {
                int r = val_[n.a].rows(), c = val_[n.a].cols();
                for (size_t i = 0; i < d.size(); ++i) adj_[n.a][i] += d[i];
                for (int i = 0; i < r; ++i) {
                    double s = 0.0;
                    for (int j = 0; j < c; ++j) s += d.data()[i * c + j];
                    adj_[n.b][i] += s;
                }
                break;
            }
            case OpKind::Act: {
                const Tensor& X = val_[n.a];
                const Tensor& Y = val_[id];
                for (size_t i = 0; i < d.size(); ++i)
                    adj_[n.a][i] += d[i] * activation_derivative(n.act, X[i], Y[i]);
                break;
            }
            case OpKind::Square: {
                const Tensor& X = val_[n.a];
                for (size_t i = 0; i < d.size(); ++i) adj_[n.a][i] += d[i] * 2.0 * X[i];
                break;
            }
            case OpKind::Exp: {
                const Tensor& Y = val_[id];
                for (size_t i = 0; i < d.size(); ++i) adj_[n.a][i] += d[i] * Y[i];
                break;
            }
            case OpKind::Log: {
                const Tensor& X = val_[n.a];
                for (size_t i = 0; i < d.size(); ++i) adj_[n.a][i] += d[i] / X[i];
                break;
            }
            case OpKind::Mean: {
                double g = d[0] / static_cast<double>(val_[n.a].size());
                for (size_t i = 0; i < adj_[n.a].size(); ++i) adj_[n.a][i] += g;
                break;
            }
            case OpKind::Affine:
                for (size_t i = 0; i < d.size(); ++i) adj_[n.a][i] += d[i] * n.p0;
                break;
            case OpKind::ConcatRows: {
                size_t na = val_[n.a].size();
                for (size_t i = 0; i < na; ++i) adj_[n.a][i] += d[i];
                for (size_t i = 0; i < val_[n.b].size(); ++i) adj_[n.b][i] += d[na + i];
                break;
            }
            case OpKind::ConcatCols: {
                int r = val_[n.a].rows(), ca = val_[n.a].cols(), cb = val_[n.b].cols();
                for (int i = 0; i < r; ++i) {
                    for (int j = 0; j < ca; ++j)
                        adj_[n.a].data()[i * ca + j] += d.data()[i * (ca + cb) + j];
                    for (int j = 0; j < cb; ++j)
                        adj_[n.b].data()[i * cb + j] += d.data()[i * (ca + cb) + ca + j];
                }
                break;
            }
            case OpKind::SliceRows: {
                int c = val_[n.a].cols();
                size_t off = static_cast<size_t>(n.begin) * c;
                for (size_t i = 0; i < d.size(); ++i) adj_[n.a][off + i] += d[i];
                break;
            }
            case OpKind::Clamp: {
                const Tensor& X = val_[n.a];
                for (size_t i = 0; i < d.size(); ++i)
                    if (X[i] >= n.p0 && X[i] <= n.p1) adj_[n.a][i] += d[i];
                break;
            }
            case OpKind::Mux: {
                const Tensor& gate = val_[n.a];
                int r = val_[n.b].rows(), c = val_[n.b].cols();
                for (int j = 0; j < c; ++j) {
                    bool takeT = gate[j] >= 0.5;
                    Tensor& target = takeT ? adj_[n.b] : adj_[n.c];
                    for (int i = 0; i < r; ++i) target.data()[i * c + j] += d.data()[i * c + j];
                }
                // gate carries no gradient (piecewise-constant indicator)
                break;
            }
            case OpKind::IndicatorInSet:
                break;
        }
    }
    back_done_ = true;
}

const Tensor& Runner::grad(Graph::NodeId id) const {
    if (!back_done_) throw GraphNotEvaluated("grad() before backward()");
    return adj_[id];
}

std::vector<Tensor> Runner::grads(const std::vector<Graph::NodeId>& ids) const {
    std::vector<Tensor> out;
    out.reserve(ids.size());
    for (Graph::NodeId id : ids) {
        const Tensor& g = grad(id);
        if (!g.all_finite())
            throw NonFiniteGradient("gradient of node #" + std::to_string(id) + " (" +
                                    g_->node(id).name + ") is not finite");
        out.push_back(g);
    }
    return out;
}

std::map<std::string, Tensor> evaluate(Graph& g, const std::map<std::string, Tensor>& inputs,
                                       const std::vector<std::string>& outputs) {
    Runner r(g);
    for (const auto& [name, v] : inputs) r.bind(name, v);
    r.evaluate();
    std::map<std::string, Tensor> out;
    for (const auto& name : outputs) out[name] = r.value(name);
    return out;
}

std::map<std::string, Tensor> backward(Graph& g, const std::map<std::string, Tensor>& inputs,
                                       const std::string& output, const Tensor& seed_gradient,
                                       const std::vector<std::string>& wanted) {
    Runner r(g);
    for (const auto& [name, v] : inputs) r.bind(name, v);
    r.evaluate();
    r.backward(g.find(output), &seed_gradient);
    std::map<std::string, Tensor> out;
    for (const auto& name : wanted) {
        Graph::NodeId id = g.find(name);
        if (id < 0) throw Error("backward: no node named '" + name + "'");
        Tensor grad = r.grad(id);
        if (!grad.all_finite()) throw NonFiniteGradient("gradient of '" + name + "'");
        out[name] = std::move(grad);
    }
    return out;
}

}  // namespace dgmlab
