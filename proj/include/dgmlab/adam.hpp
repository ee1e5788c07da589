#pragma once

#include <functional>
#include <vector>

#include "dgmlab/tensor.hpp"

namespace dgmlab {

// Standard Adam with bias correction. m and v are allocated lazily on the
// first update and must then keep their shapes; t increases by one per call.
struct AdamState {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    long long t = 0;
    std::vector<Tensor> m;
    std::vector<Tensor> v;
};

void adam_update(const std::vector<Tensor*>& params, const std::vector<Tensor>& grads,
                 AdamState& state);

// Max over coordinates of |analytic - central difference| / (|analytic| + 1e-12)
// for a scalar function f at x with step h. The central differences are pure
// forward evaluations, independent of any gradient code under test.
double finite_difference_check(const std::function<double(const Tensor&)>& f,
                               const Tensor& analytic_grad, const Tensor& x, double h);

}  // namespace dgmlab
