#include "dgmlab/adam.hpp"

#include <cmath>

namespace dgmlab {

void adam_update(const std::vector<Tensor*>& params, const std::vector<Tensor>& grads,
                 AdamState& state) {
    if (params.size() != grads.size())
        throw ShapeMismatch("adam_update: params/grads count mismatch");
    if (state.m.empty()) {
        for (const Tensor* p : params) {
            state.m.push_back(Tensor(p->shape()));
            state.v.push_back(Tensor(p->shape()));
        }
    }
    if (state.m.size() != params.size())
        throw ShapeMismatch("adam_update: state tracks a different parameter count");

    state.t += 1;
    const double b1t = 1.0 - std::pow(state.beta1, static_cast<double>(state.t));
    const double b2t = 1.0 - std::pow(state.beta2, static_cast<double>(state.t));

    for (size_t pi = 0; pi < params.size(); ++pi) {
        Tensor& p = *params[pi];
        const Tensor& g = grads[pi];
        Tensor& m = state.m[pi];
        Tensor& v = state.v[pi];
        if (!p.same_shape(g) || !p.same_shape(m))
            throw ShapeMismatch("adam_update: shape mismatch at parameter " + std::to_string(pi));
        for (size_t i = 0; i < p.size(); ++i) {
            m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g[i];
            v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g[i] * g[i];
            double mhat = m[i] / b1t;
            double vhat = v[i] / b2t;
            p[i] -= state.lr * mhat / (std::sqrt(vhat) + state.eps);
        }
    }
}

double finite_difference_check(const std::function<double(const Tensor&)>& f,
                               const Tensor& analytic_grad, const Tensor& x, double h) {
    if (h <= 0.0) throw Error("finite_difference_check: h must be positive");
    if (!analytic_grad.same_shape(x))
        throw ShapeMismatch("finite_difference_check: gradient/input shape mismatch");
    Tensor probe = x;
    double worst = 0.0;
    for (size_t i = 0; i < x.size(); ++i) {
        double xi = x[i];
        probe[i] = xi + h;
        double fp = f(probe);
        probe[i] = xi - h;
        double fm = f(probe);
        probe[i] = xi;
        if (!std::isfinite(fp) || !std::isfinite(fm))
            throw NonFiniteValue("finite_difference_check: f non-finite near coordinate " +
                                 std::to_string(i));
        double central = (fp - fm) / (2.0 * h);
        double err = std::fabs(analytic_grad[i] - central) /
                     (std::fabs(analytic_grad[i]) + 1e-12);
        if (err > worst) worst = err;
    }
    return worst;
}

}  // namespace dgmlab
