#include <doctest.h>

#include <cmath>

#include "dgmlab/adam.hpp"
#include "dgmlab/graph.hpp"
#include "dgmlab/rng.hpp"

using namespace dgmlab;

namespace {

// analytic-vs-finite-difference check for a scalar graph output with
// respect to one differentiable node
double graph_fd_error(Graph& g, Runner& run, Graph::NodeId loss, Graph::NodeId wrt,
                      bool is_param, double h) {
    run.evaluate();
    run.backward(loss);
    Tensor analytic = run.grad(wrt);
    Tensor x = is_param ? g.param_value(wrt) : run.value(wrt);

    auto eval_at = [&](const Tensor& probe) {
        if (is_param)
            g.param_value(wrt) = probe;
        else
            run.bind(wrt, probe);
        run.evaluate();
        double v = run.scalar(loss);
        return v;
    };
    double err = finite_difference_check([&](const Tensor& p) { return eval_at(p); }, analytic,
                                         x, h);
    eval_at(x);  // restore
    return err;
}

}  // namespace

TEST_CASE("evaluate: spec examples") {
    // x*x at x=[3] -> [9]
    {
        Graph g;
        auto x = g.input("x", {1});
        auto y = g.mul(x, x);
        Runner run(g);
        run.bind(x, Tensor::vector({3.0}));
        run.evaluate();
        CHECK(run.value(y)[0] == doctest::Approx(9.0));
    }
    // log(0.5)
    {
        Graph g;
        auto x = g.input("x", {1});
        auto y = g.log_of(x);
        Runner run(g);
        run.bind(x, Tensor::vector({0.5}));
        run.evaluate();
        CHECK(run.value(y)[0] == doctest::Approx(-0.6931471805599453).epsilon(1e-12));
    }
    // mean of squares of [1, -1, 0, 0] -> 0.5 (hand computation)
    {
        Graph g;
        auto x = g.input("x", {4});
        auto y = g.mean(g.square(x));
        Runner run(g);
        run.bind(x, Tensor::vector({1.0, -1.0, 0.0, 0.0}));
        run.evaluate();
        CHECK(run.scalar(y) == doctest::Approx(0.5).epsilon(1e-15));
    }
}

TEST_CASE("evaluate: determinism is bit exact") {
    Graph g;
    auto x = g.input("x", {8, 4});
    auto w = g.param("w", RngStream(7).normal({8, 8}));
    auto y = g.mean(g.activation(g.matmul(w, x), Activation::Tanh));
    Runner r1(g), r2(g);
    Tensor in = RngStream(9).normal({8, 4});
    r1.bind(x, in);
    r2.bind(x, in);
    r1.evaluate();
    r2.evaluate();
    CHECK(r1.value(y).bit_equal(r2.value(y)));
    // same runner evaluated twice
    r1.evaluate();
    CHECK(r1.value(y).bit_equal(r2.value(y)));
}

TEST_CASE("evaluate: shape mismatch and non-finite reporting") {
    Graph g;
    auto a = g.input("a", {2, 2});
    auto b = g.input("b", {3});
    CHECK_THROWS_AS(g.add(a, b), ShapeMismatch);

    auto lg = g.log_of(a);
    (void)lg;
    Runner run(g);
    run.bind(a, Tensor({2, 2}, {1.0, -1.0, 2.0, 3.0}));  // log(-1) = NaN
    run.bind(b, Tensor({3}));
    CHECK_THROWS_AS(run.evaluate(), NonFiniteValue);
}

TEST_CASE("backward: spec examples") {
    // d/dx x^2 at 3 -> 6
    {
        Graph g;
        auto x = g.input("x", {1});
        auto y = g.square(x);
        Runner run(g);
        run.bind(x, Tensor::vector({3.0}));
        run.evaluate();
        run.backward(y);
        CHECK(run.grad(x)[0] == doctest::Approx(6.0));
    }
    // gradient of mean-square loss at the minimum is all zero
    {
        Graph g;
        auto u = g.input("u", {5});
        auto t = g.constant(Tensor::full({5}, 0.25));
        auto loss = g.mean_square_diff(u, t);
        Runner run(g);
        run.bind(u, Tensor::full({5}, 0.25));
        run.evaluate();
        run.backward(loss);
        for (size_t i = 0; i < 5; ++i) CHECK(run.grad(u)[i] == 0.0);
    }
}

TEST_CASE("backward before evaluate throws") {
    Graph g;
    auto x = g.input("x", {1});
    auto y = g.square(x);
    Runner run(g);
    CHECK_THROWS_AS(run.backward(y), GraphNotEvaluated);
}

TEST_CASE("backward: 2-layer dense network matches central differences") {
    // every weight of a small dense net, h = 1e-5, relative error < 1e-5
    RngStream init(11);
    Graph g;
    auto x = g.input("x", {6, 3});
    auto w0 = g.param("w0", init.normal_scaled({5, 6}, 0.5));
    auto b0 = g.param("b0", init.normal_scaled({5}, 0.2));
    auto w1 = g.param("w1", init.normal_scaled({2, 5}, 0.5));
    auto b1 = g.param("b1", init.normal_scaled({2}, 0.2));
    auto h1 = g.activation(g.bias_add_cols(g.matmul(w0, x), b0), Activation::LeakyRelu);
    auto out = g.activation(g.bias_add_cols(g.matmul(w1, h1), b1), Activation::Tanh);
    auto loss = g.mean(g.square(out));

    Runner run(g);
    run.bind(x, RngStream(12).normal({6, 3}));
    for (Graph::NodeId p : {w0, b0, w1, b1})
        CHECK(graph_fd_error(g, run, loss, p, true, 1e-5) < 1e-5);
}

TEST_CASE("backward: every primitive passes finite differences") {
    RngStream rng(21);
    auto probe = [&](auto&& build, std::vector<int> shape, double lo, double hi) {
        Graph g;
        Tensor init(shape);
        for (size_t i = 0; i < init.size(); ++i)
            init[i] = lo + (hi - lo) * rng.next_unit();
        auto x = g.param("x", init);
        auto loss = build(g, x);
        Runner run(g);
        double err = graph_fd_error(g, run, loss, x, true, 1e-6);
        CHECK(err < 1e-5);
    };

    // matmul (both sides), add, sub, mul, bias, activations, square, exp,
    // log, mean, affine, concat, slice, clamp
    probe([&](Graph& g, auto x) { return g.mean(g.matmul(x, g.constant(rng.normal({4, 3})))); },
          {5, 4}, -2, 2);
    probe([&](Graph& g, auto x) { return g.mean(g.matmul(g.constant(rng.normal({3, 5})), x)); },
          {5, 4}, -2, 2);
    probe([&](Graph& g, auto x) { return g.mean(g.add(x, g.constant(rng.normal({4, 4})))); },
          {4, 4}, -2, 2);
    probe([&](Graph& g, auto x) { return g.mean(g.sub(g.constant(rng.normal({4, 4})), x)); },
          {4, 4}, -2, 2);
    probe([&](Graph& g, auto x) { return g.mean(g.mul(x, g.constant(rng.normal({4, 4})))); },
          {4, 4}, -2, 2);
    probe(
        [&](Graph& g, auto x) {
            return g.mean(g.bias_add_cols(g.constant(rng.normal({6, 3})), x));
        },
        {6}, -2, 2);
    for (Activation act : {Activation::Identity, Activation::LeakyRelu, Activation::Tanh,
                           Activation::Sigmoid})
        probe([&, act](Graph& g, auto x) { return g.mean(g.square(g.activation(x, act))); },
              {5, 2}, -2, 2);
    probe([&](Graph& g, auto x) { return g.mean(g.square(x)); }, {7}, -2, 2);
    probe([&](Graph& g, auto x) { return g.mean(g.exp_of(x)); }, {5}, -2, 2);
    probe([&](Graph& g, auto x) { return g.mean(g.log_of(x)); }, {5}, 0.1, 2);
    probe([&](Graph& g, auto x) { return g.affine(g.mean(x), 3.0, -1.0); }, {6}, -2, 2);
    probe(
        [&](Graph& g, auto x) {
            return g.mean(g.square(g.concat_rows(x, g.constant(rng.normal({2, 3})))));
        },
        {3, 3}, -2, 2);
    probe(
        [&](Graph& g, auto x) {
            return g.mean(g.square(g.concat_cols(x, g.constant(rng.normal({3, 2})))));
        },
        {3, 3}, -2, 2);
    probe([&](Graph& g, auto x) { return g.mean(g.square(g.slice_rows(x, 1, 4))); }, {6, 2}, -2,
          2);
    probe([&](Graph& g, auto x) { return g.mean(g.clamp(x, -1.5, 1.5)); }, {5}, -1.2, 1.2);
}

TEST_CASE("backward: non-requested gradients are not materialized") {
    Graph g;
    auto x = g.input("x", {3});
    auto w = g.param("w", Tensor::full({3}, 2.0));
    auto loss = g.mean(g.mul(w, x));
    Runner run(g);
    run.bind(x, Tensor::vector({1, 2, 3}));
    run.evaluate();
    run.backward(loss);
    auto grads = run.grads({w});
    CHECK(grads.size() == 1);
    CHECK(grads[0].shape() == std::vector<int>{3});
}

TEST_CASE("adam: bias-corrected first step") {
    // scalar param 0, g=1, lr=1e-3, defaults: |delta| within 1e-6 of lr
    Tensor p = Tensor::scalar(0.0);
    AdamState st;
    st.lr = 1e-3;
    adam_update({&p}, {Tensor::scalar(1.0)}, st);
    CHECK(std::fabs(std::fabs(p[0]) - 1e-3) < 1e-6);
    CHECK(p[0] < 0.0);
    CHECK(st.t == 1);
}

TEST_CASE("adam: zero gradient leaves parameters unchanged") {
    Tensor p = Tensor::vector({0.5, -0.25});
    Tensor before = p;
    AdamState st;
    adam_update({&p}, {Tensor({2})}, st);
    CHECK(p.bit_equal(before));
}

TEST_CASE("adam: identical calls from identical state are identical") {
    auto run_once = [] {
        Tensor p = Tensor::vector({0.1, 0.2, 0.3});
        AdamState st;
        st.lr = 5e-3;
        adam_update({&p}, {Tensor::vector({0.4, -0.7, 0.1})}, st);
        adam_update({&p}, {Tensor::vector({-0.2, 0.3, 0.9})}, st);
        return p;
    };
    CHECK(run_once().bit_equal(run_once()));
}

TEST_CASE("adam: lr=0 leaves parameters bit-identical") {
    Tensor p = RngStream(3).normal({16});
    Tensor before = p;
    AdamState st;
    st.lr = 0.0;
    adam_update({&p}, {RngStream(4).normal({16})}, st);
    CHECK(p.bit_equal(before));
}

TEST_CASE("adam: shape mismatch") {
    Tensor p = Tensor::vector({1.0});
    AdamState st;
    CHECK_THROWS_AS(adam_update({&p}, {Tensor({2})}, st), ShapeMismatch);
}

TEST_CASE("finite_difference_check: spec examples") {
    // f(x) = x^2 at 3, h=1e-3 -> error < 1e-6
    {
        Tensor x = Tensor::vector({3.0});
        Tensor grad = Tensor::vector({6.0});
        double err = finite_difference_check(
            [](const Tensor& t) { return t[0] * t[0]; }, grad, x, 1e-3);
        CHECK(err < 1e-6);
    }
    // affine f -> error < 1e-9
    {
        Tensor x = Tensor::vector({0.3, -0.7, 1.1});
        Tensor grad = Tensor::vector({2.0, -1.0, 0.5});
        double err = finite_difference_check(
            [](const Tensor& t) { return 2.0 * t[0] - t[1] + 0.5 * t[2] + 4.0; }, grad, x,
            1e-3);
        CHECK(err < 1e-9);
    }
}

TEST_CASE("rng: same (seed, label) twice gives identical streams") {
    RngStream a = rng_stream(42, "data");
    RngStream b = rng_stream(42, "data");
    for (int i = 0; i < 1000; ++i) CHECK(a.next_u64() == b.next_u64());
}

TEST_CASE("rng: labels and seeds separate streams") {
    CHECK(stream_seed(42, "data") != stream_seed(42, "init"));
    CHECK(stream_seed(42, "data") != stream_seed(43, "data"));
    RngStream a = rng_stream(42, "data");
    RngStream b = rng_stream(42, "init");
    int same = 0;
    for (int i = 0; i < 64; ++i) same += a.next_u64() == b.next_u64();
    CHECK(same == 0);
}

TEST_CASE("rng: chi-square independence smoke test across labels") {
    // pair the first 1e4 uniform draws of two streams into a 4x4 grid;
    // the statistic is chi^2(15): mean 15, sd sqrt(30); 3 sigma ~ 31.4
    RngStream a = rng_stream(7, "data");
    RngStream b = rng_stream(7, "init");
    int counts[16] = {0};
    const int n = 10000;
    for (int i = 0; i < n; ++i) {
        int ca = std::min(3, static_cast<int>(a.next_unit() * 4));
        int cb = std::min(3, static_cast<int>(b.next_unit() * 4));
        counts[ca * 4 + cb]++;
    }
    double expect = n / 16.0;
    double chi2 = 0;
    for (int c : counts) chi2 += (c - expect) * (c - expect) / expect;
    CHECK(chi2 < 15.0 + 3.0 * std::sqrt(30.0));
}

TEST_CASE("rng: normal moments sanity") {
    RngStream rng(123);
    double sum = 0, sum2 = 0;
    const int n = 100000;
    for (int i = 0; i < n; ++i) {
        double v = rng.next_normal();
        sum += v;
        sum2 += v * v;
    }
    CHECK(std::fabs(sum / n) < 0.02);
    CHECK(std::fabs(sum2 / n - 1.0) < 0.02);
}
