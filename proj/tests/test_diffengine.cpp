#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "pfnlab/graph.hpp"
#include "pfnlab/param_store.hpp"
#include "pfnlab/rng.hpp"

using namespace pfnlab;

namespace {

// Independent f64 triple-loop oracle for matmul.
template <typename T>
TensorT<double> naive_matmul(const TensorT<T>& a, const TensorT<T>& b) {
    const int64_t m = a.rows(), k = a.cols(), n = b.cols();
    TensorT<double> out({m, n});
    for (int64_t i = 0; i < m; ++i)
        for (int64_t j = 0; j < n; ++j) {
            double s = 0.0;
            for (int64_t p = 0; p < k; ++p) s += double(a.at(i, p)) * double(b.at(p, j));
            out.at(i, j) = s;
        }
    return out;
}

Tensor random_tensor(std::vector<int64_t> shape, Rng& rng, double scale = 1.0) {
    Tensor t(std::move(shape));
    for (auto& v : t.data) v = float(rng.normal() * scale);
    return t;
}

}  // namespace

TEST_CASE("matmul: identity and selector") {
    Graph g;
    const int eye = g.input(tensor2d<float>(2, 2, {1, 0, 0, 1}));
    const int m = g.input(tensor2d<float>(2, 2, {1, 2, 3, 4}));
    const int prod = g.matmul(eye, m);
    CHECK(g.value(prod).at(0, 0) == 1.0f);
    CHECK(g.value(prod).at(0, 1) == 2.0f);
    CHECK(g.value(prod).at(1, 0) == 3.0f);
    CHECK(g.value(prod).at(1, 1) == 4.0f);

    const int sel = g.input(tensor2d<float>(1, 2, {1, 0}));
    const int col = g.input(tensor2d<float>(2, 1, {5, 7}));
    const int picked = g.matmul(sel, col);
    CHECK(g.value(picked).numel() == 1);
    CHECK(g.value(picked).at(0) == 5.0f);
}

TEST_CASE("matmul: random 3x4 by 4x2 matches f64 triple-loop oracle") {
    Rng rng(42);
    const Tensor a = random_tensor({3, 4}, rng);
    const Tensor b = random_tensor({4, 2}, rng);
    Graph g;
    const int c = g.matmul(g.input(a), g.input(b));
    const TensorT<double> ref = naive_matmul(a, b);
    for (int64_t i = 0; i < 3; ++i)
        for (int64_t j = 0; j < 2; ++j)
            CHECK(std::abs(double(g.value(c).at(i, j)) - ref.at(i, j)) < 1e-6);
}

TEST_CASE("matmul: transpose flags agree with explicit transposition") {
    Rng rng(7);
    const Tensor a = random_tensor({4, 3}, rng);
    const Tensor b = random_tensor({4, 5}, rng);
    Graph g;
    const int c = g.matmul(g.input(a), g.input(b), true, false);  // a^T (3x4) * b (4x5)
    Tensor at({3, 4});
    for (int64_t i = 0; i < 4; ++i)
        for (int64_t j = 0; j < 3; ++j) at.at(j, i) = a.at(i, j);
    const TensorT<double> ref = naive_matmul(at, b);
    for (int64_t i = 0; i < 3; ++i)
        for (int64_t j = 0; j < 5; ++j)
            CHECK(std::abs(double(g.value(c).at(i, j)) - ref.at(i, j)) < 1e-6);
}

TEST_CASE("matmul: inner dimension mismatch throws") {
    Graph g;
    const int a = g.input(Tensor({2, 3}));
    const int b = g.input(Tensor({4, 2}));
    CHECK_THROWS_AS(g.matmul(a, b), ShapeError);
}

TEST_CASE("matmul: repeated runs are bit-identical") {
    Rng rng(3);
    const Tensor a = random_tensor({17, 33}, rng);
    const Tensor b = random_tensor({33, 9}, rng);
    Graph g1, g2;
    const auto& c1 = g1.value(g1.matmul(g1.input(a), g1.input(b)));
    const auto& c2 = g2.value(g2.matmul(g2.input(a), g2.input(b)));
    CHECK(c1.data == c2.data);
}

TEST_CASE("softmax: uniform input, closed form, and masking") {
    Graph g;
    const int u = g.softmax_rows(g.input(tensor1d<float>({0, 0, 0})));
    for (int i = 0; i < 3; ++i) CHECK(g.value(u).at(i) == doctest::Approx(1.0 / 3.0));

    // [0, ln 2] -> [1/3, 2/3]
    const int two = g.softmax_rows(g.input(tensor1d<float>({0.0f, float(std::log(2.0))})));
    CHECK(g.value(two).at(0) == doctest::Approx(1.0 / 3.0).epsilon(1e-6));
    CHECK(g.value(two).at(1) == doctest::Approx(2.0 / 3.0).epsilon(1e-6));

    const std::vector<uint8_t> mask = {1, 0, 0};
    const int m = g.softmax_rows(g.input(tensor1d<float>({5, -1, 2})), &mask);
    CHECK(g.value(m).at(0) == 1.0f);
    CHECK(g.value(m).at(1) == 0.0f);  // exact zero on masked positions
    CHECK(g.value(m).at(2) == 0.0f);
}

TEST_CASE("softmax: fully masked slice throws") {
    Graph g;
    const std::vector<uint8_t> mask = {0, 0};
    CHECK_THROWS_AS(g.softmax_rows(g.input(tensor1d<float>({1, 2})), &mask), ContractError);
}

TEST_CASE("softmax: rows sum to one along the reduced axis") {
    Rng rng(11);
    const Tensor x = random_tensor({6, 9}, rng, 3.0);
    Graph g;
    const int s = g.softmax_rows(g.input(x));
    for (int64_t i = 0; i < 6; ++i) {
        double sum = 0.0;
        for (int64_t j = 0; j < 9; ++j) {
            sum += double(g.value(s).at(i, j));
            CHECK(g.value(s).at(i, j) >= 0.0f);
        }
        CHECK(sum == doctest::Approx(1.0).epsilon(1e-6));
    }
}

TEST_CASE("softmax: non-last axis") {
    Graph g;
    const int x = g.input(tensor2d<float>(2, 2, {0, 5, 0, 5}));
    const int s = g.softmax(x, 0);  // columns are uniform pairs
    CHECK(g.value(s).at(0, 0) == doctest::Approx(0.5));
    CHECK(g.value(s).at(1, 0) == doctest::Approx(0.5));
    CHECK(g.value(s).at(0, 1) == doctest::Approx(0.5));
}

TEST_CASE("layer_norm: constant slice zeroes out via eps guard") {
    Graph g;
    const int x = g.input(tensor2d<float>(1, 4, {3, 3, 3, 3}));
    const int gamma = g.input(tensor1d<float>({1, 1, 1, 1}));
    const int beta = g.input(tensor1d<float>({0, 0, 0, 0}));
    const int y = g.layer_norm(x, gamma, beta, 1e-5);
    for (int64_t j = 0; j < 4; ++j) CHECK(g.value(y).at(0, j) == doctest::Approx(0.0));
}

TEST_CASE("layer_norm: [1,-1] is a fixed point as eps -> 0") {
    Graph g;
    const int x = g.input(tensor2d<float>(1, 2, {1, -1}));
    const int gamma = g.input(tensor1d<float>({1, 1}));
    const int beta = g.input(tensor1d<float>({0, 0}));
    const int y = g.layer_norm(x, gamma, beta, 1e-12);
    CHECK(g.value(y).at(0, 0) == doctest::Approx(1.0).epsilon(1e-5));
    CHECK(g.value(y).at(0, 1) == doctest::Approx(-1.0).epsilon(1e-5));
}

TEST_CASE("layer_norm: gamma=0 collapses to beta") {
    Rng rng(5);
    Graph g;
    const int x = g.input(random_tensor({3, 4}, rng));
    const int gamma = g.input(Tensor({4}));
    const int beta = g.input(Tensor({4}, 2.5f));
    const int y = g.layer_norm(x, gamma, beta, 1e-5);
    for (int64_t i = 0; i < 12; ++i) CHECK(g.value(y).at(i) == doctest::Approx(2.5));
}

TEST_CASE("loss: regression and classification closed forms") {
    Graph g;
    // pred == target -> 0
    const int p0 = g.input(tensor1d<float>({1, 2, 3}));
    CHECK(g.scalar_value(g.mse_loss(p0, tensor1d<float>({1, 2, 3}))) == 0.0f);
    // pred = target + 1 everywhere -> 1
    const int p1 = g.input(tensor1d<float>({2, 3, 4}));
    CHECK(g.scalar_value(g.mse_loss(p1, tensor1d<float>({1, 2, 3}))) == doctest::Approx(1.0));
    // logits [0,0], label 0 -> ln 2
    const int lg = g.input(tensor2d<float>(1, 2, {0, 0}));
    CHECK(g.scalar_value(g.cross_entropy_loss(lg, {0}, 2)) == doctest::Approx(std::log(2.0)));
}

TEST_CASE("loss: label beyond active class count throws") {
    Graph g;
    const int lg = g.input(tensor2d<float>(2, 4, {0, 0, 0, 0, 0, 0, 0, 0}));
    CHECK_THROWS_AS(g.cross_entropy_loss(lg, {0, 3}, 3), ContractError);
}

TEST_CASE("backward: sum and half-norm-squared leaves") {
    ParamStore store;
    store.add("p", tensor2d<float>(2, 2, {1, -2, 3, 4}));

    {
        Graph g;
        const int p = g.param(store, "p");
        const int l = g.sum_all(p);
        g.backward(l);
        const auto grads = g.trainable_grads(store);
        for (int64_t i = 0; i < 4; ++i) CHECK(grads.at("p").at(i) == 1.0f);
    }
    {
        Graph g;
        const int p = g.param(store, "p");
        const int l = g.scale(g.sum_all(g.mul(p, p)), 0.5);
        g.backward(l);
        const auto grads = g.trainable_grads(store);
        for (int64_t i = 0; i < 4; ++i) CHECK(grads.at("p").at(i) == store.at("p").tensor.at(i));
    }
}

TEST_CASE("backward: non-scalar loss is rejected") {
    Graph g;
    const int x = g.input(Tensor({3}), true);
    CHECK_THROWS_AS(g.backward(x), ContractError);
}

TEST_CASE("backward: untouched trainable parameter gets zero gradient") {
    ParamStore store;
    store.add("used", Tensor({2}, 1.0f));
    store.add("unused", Tensor({3}, 1.0f));
    Graph g;
    const int l = g.sum_all(g.param(store, "used"));
    g.backward(l);
    const auto grads = g.trainable_grads(store);
    REQUIRE(grads.count("unused") == 1);
    for (int64_t i = 0; i < 3; ++i) CHECK(grads.at("unused").at(i) == 0.0f);
}

TEST_CASE("grad_check: random small graphs match central differences") {
    // 20 random configurations of a small composite graph exercising matmul,
    // layer_norm, softmax, gelu, slicing and both losses.
    for (uint64_t trial = 0; trial < 20; ++trial) {
        Rng rng(1000 + trial);
        const int64_t m = 3 + rng.below(4);
        const int64_t k = 3 + rng.below(4);
        const int64_t n = 8 + rng.below(9);
        ParamStoreT<double> store;
        {
            TensorT<double> w({k, n}), g1({n}), b1({n}), x({m, k});
            for (auto& v : w.data) v = rng.normal() * 0.5;
            for (auto& v : g1.data) v = 1.0 + 0.1 * rng.normal();
            for (auto& v : b1.data) v = 0.1 * rng.normal();
            store.add("w", w);
            store.add("gamma", g1);
            store.add("beta", b1);
            store.add("x", x);  // placeholder so the store owns the input too
            for (auto& v : store.at("x").tensor.data) v = rng.normal();
        }
        const bool use_xent = (trial % 2) == 0;
        std::vector<int64_t> labels;
        TensorT<double> target({m});
        Rng drng(55 + trial);
        for (int64_t i = 0; i < m; ++i) {
            labels.push_back(drng.below(n));
            target.at(i) = drng.normal();
        }
        auto build = [&](GraphT<double>& g, const ParamStoreT<double>& s) {
            const int x = g.param(s, "x");
            const int w = g.param(s, "w");
            const int h = g.matmul(x, w);
            const int ln = g.layer_norm(h, g.param(s, "gamma"), g.param(s, "beta"), 1e-5);
            const int act = g.gelu(ln);
            if (use_xent) return g.cross_entropy_loss(act, labels, n);
            const int sm = g.softmax_rows(act);
            const int col = g.slice_cols(sm, 0, 1);
            return g.mse_loss(col, target);
        };
        const double err = grad_check<double>(build, store, 1e-3);
        CHECK(err < 1e-4);
    }
}

TEST_CASE("grad_check: quadratic loss is exact up to rounding") {
    ParamStoreT<double> store;
    store.add("p", tensor1d<double>({0.3, -0.7, 1.1}));
    auto build = [](GraphT<double>& g, const ParamStoreT<double>& s) {
        const int p = g.param(s, "p");
        return g.scale(g.sum_all(g.mul(p, p)), 0.5);
    };
    CHECK(grad_check<double>(build, store, 1e-3) < 1e-8);
}

TEST_CASE("grad_check: frozen parameters are excluded") {
    ParamStoreT<double> store;
    store.add("free", tensor1d<double>({1.0, 2.0}));
    store.add("frozen", tensor1d<double>({3.0}), false);
    // loss = sum(free) + sum(frozen): only the free parameter is checked, so
    // the result is exact even though the frozen one contributes to the loss.
    auto build = [](GraphT<double>& g, const ParamStoreT<double>& s) {
        return g.add(g.sum_all(g.param(s, "free")), g.sum_all(g.param(s, "frozen")));
    };
    CHECK(grad_check<double>(build, store, 1e-3) < 1e-8);
}

TEST_CASE("adam_step: zero grads and lr=0 leave parameters unchanged") {
    ParamStore store;
    store.add("p", tensor1d<float>({1, 2, 3}));
    const std::vector<float> before = store.at("p").tensor.data;

    GradMap zeros;
    zeros.emplace("p", Tensor({3}));
    adam_step(store, zeros, {1e-2, 0.9, 0.999, 1e-8});
    CHECK(store.at("p").tensor.data == before);
    CHECK(store.step_count() == 1);

    GradMap g;
    g.emplace("p", tensor1d<float>({1, 1, 1}));
    adam_step(store, g, {0.0, 0.9, 0.999, 1e-8});
    CHECK(store.at("p").tensor.data == before);  // lr=0: no movement
    CHECK(store.step_count() == 2);              // but state advances
}

TEST_CASE("adam_step: single fresh step matches the hand-computed update") {
    ParamStore store;
    store.add("p", tensor1d<float>({1.0f}));
    GradMap g;
    g.emplace("p", tensor1d<float>({0.5f}));
    const double lr = 1e-2, b1 = 0.9, b2 = 0.999, eps = 1e-8;
    adam_step(store, g, {lr, b1, b2, eps});
    // After bias correction the first step is -lr * g/(|g| + eps') with
    // mhat = g and vhat = g^2.
    const double mhat = (1 - b1) * 0.5 / (1 - b1);
    const double vhat = (1 - b2) * 0.25 / (1 - b2);
    const double expect = 1.0 - lr * mhat / (std::sqrt(vhat) + eps);
    CHECK(store.at("p").tensor.at(0) == doctest::Approx(expect).epsilon(1e-6));
}

TEST_CASE("adam_step: frozen and unknown gradients are contract errors") {
    ParamStore store;
    store.add("a", Tensor({2}, 1.0f));
    store.add("b", Tensor({2}, 1.0f), false);

    GradMap bad1;
    bad1.emplace("a", Tensor({2}));
    bad1.emplace("b", Tensor({2}));
    CHECK_THROWS_AS(adam_step(store, bad1, {}), ContractError);

    GradMap bad2;
    bad2.emplace("a", Tensor({2}));
    bad2.emplace("ghost", Tensor({2}));
    CHECK_THROWS_AS(adam_step(store, bad2, {}), ContractError);

    GradMap bad3;  // missing coverage of trainable set
    CHECK_THROWS_AS(adam_step(store, bad3, {}), ContractError);
}

TEST_CASE("adam_step: never touches frozen parameters") {
    ParamStore store;
    store.add("free", tensor1d<float>({1, 2}));
    store.add("ice", tensor1d<float>({5, 6}), false);
    const std::vector<float> ice_before = store.at("ice").tensor.data;
    GradMap g;
    g.emplace("free", tensor1d<float>({0.3f, -0.2f}));
    for (int i = 0; i < 5; ++i) adam_step(store, g, {1e-2, 0.9, 0.999, 1e-8});
    CHECK(store.at("ice").tensor.data == ice_before);
    CHECK(store.at("free").tensor.data != std::vector<float>({1, 2}));
}

TEST_CASE("rng: determinism and basic ranges") {
    Rng a(123, 7), b(123, 7), c(123, 8);
    for (int i = 0; i < 100; ++i) {
        const uint64_t va = a.next_u64();
        CHECK(va == b.next_u64());
        CHECK(va != c.next_u64());
    }
    Rng u(5);
    for (int i = 0; i < 1000; ++i) {
        const double x = u.uniform();
        CHECK(x >= 0.0);
        CHECK(x < 1.0);
    }
    // normals should have roughly unit scale
    Rng n(9);
    double mean = 0, var = 0;
    const int N = 4000;
    std::vector<double> xs(N);
    for (auto& x : xs) x = n.normal();
    for (double x : xs) mean += x / N;
    for (double x : xs) var += (x - mean) * (x - mean) / N;
    CHECK(std::abs(mean) < 0.1);
    CHECK(std::abs(var - 1.0) < 0.15);
}

TEST_CASE("graph ops: slicing, concat, gather, broadcast round trips") {
    Rng rng(2);
    const Tensor x = random_tensor({4, 6}, rng);
    Graph g;
    const int xi = g.input(x, true);
    const int top = g.slice_rows(xi, 0, 2);
    const int bot = g.slice_rows(xi, 2, 4);
    const int back = g.concat_rows({top, bot});
    CHECK(g.value(back).data == x.data);

    const int left = g.slice_cols(xi, 0, 3);
    const int right = g.slice_cols(xi, 3, 6);
    const int backc = g.concat_cols({left, right});
    CHECK(g.value(backc).data == x.data);

    const int gathered = g.gather_rows(xi, {3, 0, 3});
    CHECK(g.value(gathered).at(0, 0) == x.at(3, 0));
    CHECK(g.value(gathered).at(1, 5) == x.at(0, 5));

    const int v = g.input(tensor1d<float>({1, 2, 3}), true);
    const int bc = g.broadcast_row(v, 5);
    CHECK(g.value(bc).rows() == 5);
    CHECK(g.value(bc).at(4, 2) == 3.0f);
}

TEST_CASE("dropout: p=0 is identity, deterministic mask, unbiased scaling") {
    Rng rng(8);
    const Tensor x = random_tensor({50, 10}, rng);
    Graph g;
    const int xi = g.input(x);
    CHECK(g.dropout(xi, 0.0, 1) == xi);

    Graph g2, g3;
    const int a = g2.dropout(g2.input(x), 0.25, 99);
    const int b = g3.dropout(g3.input(x), 0.25, 99);
    CHECK(g2.value(a).data == g3.value(b).data);

    int zeros = 0;
    for (int64_t i = 0; i < 500; ++i)
        if (g2.value(a).at(i) == 0.0f && x.at(i) != 0.0f) ++zeros;
    CHECK(zeros > 80);
    CHECK(zeros < 180);
}
