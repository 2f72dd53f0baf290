#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <limits>

#include "canlab/rng.hpp"
#include "canlab/tensor.hpp"
#include "oracle.hpp"

using namespace canlab;

namespace {

Tensor rand_tensor(Rng& rng, std::size_t r, std::size_t c, double scale = 1.0) {
    Tensor t = Tensor::zeros(r, c);
    for (auto& v : t.data) v = rng.normal(0.0, scale);
    return t;
}

// Scalar loss: fixed projection of the op output, so the full Jacobian is
// exercised along a random direction per instance. The direction is drawn
// once up front; the builder must be a pure function of its inputs.
NodeId project(Graph& g, NodeId y, const Tensor& w) {
    return g.mean_rows(g.matmul(y, g.input(w)));
}

Tensor direction(Rng& rng, std::size_t cols) {
    Tensor w = Tensor::zeros(cols, 1);
    for (auto& v : w.data) v = rng.normal(0.0, 1.0);
    return w;
}

double check_op(const char* name, int instances, std::uint64_t seed,
                const std::function<double(Rng&)>& one) {
    double worst = 0.0;
    Rng rng(seed);
    for (int i = 0; i < instances; ++i) worst = std::max(worst, one(rng));
    INFO(name);
    CHECK(worst < 1e-4);
    return worst;
}

} // namespace

TEST_CASE("gradcheck: elementwise and linear ops") {
    auto dims = [](Rng& rng) {
        return std::pair<std::size_t, std::size_t>(1 + rng.uniform_int(4),
                                                   1 + rng.uniform_int(5));
    };

    check_op("matmul", 12, 10, [&](Rng& rng) {
        auto [m, k] = dims(rng);
        const std::size_t n = 1 + rng.uniform_int(4);
        std::vector<Tensor> ins = {rand_tensor(rng, m, k), rand_tensor(rng, k, n)};
        const Tensor w = direction(rng, n);
        return oracle::grad_check(
                   [&](Graph& g, const std::vector<NodeId>& in) {
                       return project(g, g.matmul(in[0], in[1]), w);
                   },
                   ins)
            .max_rel_error;
    });

    check_op("affine", 12, 11, [&](Rng& rng) {
        auto [m, k] = dims(rng);
        const std::size_t n = 1 + rng.uniform_int(4);
        std::vector<Tensor> ins = {rand_tensor(rng, m, k), rand_tensor(rng, k, n),
                                   rand_tensor(rng, 1, n)};
        const Tensor w = direction(rng, n);
        return oracle::grad_check(
                   [&](Graph& g, const std::vector<NodeId>& in) {
                       return project(g, g.affine(in[0], in[1], in[2]), w);
                   },
                   ins)
            .max_rel_error;
    });

    check_op("add/mul/scale/add_bias", 12, 12, [&](Rng& rng) {
        auto [m, n] = dims(rng);
        std::vector<Tensor> ins = {rand_tensor(rng, m, n), rand_tensor(rng, m, n),
                                   rand_tensor(rng, 1, n)};
        const double c = rng.normal(0.0, 2.0);
        const Tensor w = direction(rng, n);
        return oracle::grad_check(
                   [&](Graph& g, const std::vector<NodeId>& in) {
                       NodeId y = g.add(in[0], in[1]);
                       y = g.mul(y, in[1]);
                       y = g.scale(y, c);
                       y = g.add_bias(y, in[2]);
                       return project(g, y, w);
                   },
                   ins)
            .max_rel_error;
    });

    check_op("silu", 12, 13, [&](Rng& rng) {
        auto [m, n] = dims(rng);
        std::vector<Tensor> ins = {rand_tensor(rng, m, n, 2.0)};
        const Tensor w = direction(rng, n);
        return oracle::grad_check(
                   [&](Graph& g, const std::vector<NodeId>& in) {
                       return project(g, g.silu(in[0]), w);
                   },
                   ins)
            .max_rel_error;
    });
}

TEST_CASE("gradcheck: normalization and softmax") {
    check_op("softmax_rows", 12, 14, [&](Rng& rng) {
        const std::size_t m = 1 + rng.uniform_int(3), n = 2 + rng.uniform_int(5);
        std::vector<Tensor> ins = {rand_tensor(rng, m, n)};
        const Tensor w = direction(rng, n);
        return oracle::grad_check(
                   [&](Graph& g, const std::vector<NodeId>& in) {
                       return project(g, g.softmax_rows(in[0]), w);
                   },
                   ins)
            .max_rel_error;
    });

    check_op("layer_norm", 12, 15, [&](Rng& rng) {
        const std::size_t m = 1 + rng.uniform_int(3), n = 3 + rng.uniform_int(5);
        std::vector<Tensor> ins = {rand_tensor(rng, m, n),
                                   rand_tensor(rng, 1, n, 0.5),
                                   rand_tensor(rng, 1, n, 0.5)};
        const Tensor w = direction(rng, n);
        return oracle::grad_check(
                   [&](Graph& g, const std::vector<NodeId>& in) {
                       return project(g, g.layer_norm(in[0], in[1], in[2]), w);
                   },
                   ins)
            .max_rel_error;
    });

    check_op("normalize_rows", 12, 16, [&](Rng& rng) {
        const std::size_t m = 1 + rng.uniform_int(3), n = 2 + rng.uniform_int(5);
        std::vector<Tensor> ins = {rand_tensor(rng, m, n)};
        const Tensor w = direction(rng, n);
        return oracle::grad_check(
                   [&](Graph& g, const std::vector<NodeId>& in) {
                       return project(g, g.normalize_rows(in[0]), w);
                   },
                   ins)
            .max_rel_error;
    });
}

TEST_CASE("gradcheck: structural ops and losses") {
    check_op("transpose/concat_rows/mean_rows", 12, 17, [&](Rng& rng) {
        const std::size_t m = 1 + rng.uniform_int(3), n = 2 + rng.uniform_int(4);
        std::vector<Tensor> ins = {rand_tensor(rng, m, n), rand_tensor(rng, n, m)};
        const Tensor w = direction(rng, n);
        return oracle::grad_check(
                   [&](Graph& g, const std::vector<NodeId>& in) {
                       NodeId y = g.concat_rows(in[0], g.transpose(in[1]));
                       return project(g, g.mean_rows(y), w);
                   },
                   ins)
            .max_rel_error;
    });

    check_op("embedding", 12, 18, [&](Rng& rng) {
        const std::size_t rows = 4 + rng.uniform_int(4), n = 2 + rng.uniform_int(4);
        std::vector<int> ids;
        for (int i = 0; i < 5; ++i)
            ids.push_back(static_cast<int>(rng.uniform_int(rows)));
        std::vector<Tensor> ins = {rand_tensor(rng, rows, n)};
        const Tensor w = direction(rng, n);
        return oracle::grad_check(
                   [&](Graph& g, const std::vector<NodeId>& in) {
                       return project(g, g.embedding(in[0], ids), w);
                   },
                   ins)
            .max_rel_error;
    });

    check_op("cross_entropy", 12, 19, [&](Rng& rng) {
        const std::size_t m = 2 + rng.uniform_int(3), n = 3 + rng.uniform_int(5);
        std::vector<int> targets;
        std::vector<double> weights;
        for (std::size_t i = 0; i < m; ++i) {
            targets.push_back(static_cast<int>(rng.uniform_int(n)));
            weights.push_back(i == 0 ? 1.0 : (rng.uniform() < 0.5 ? 0.0 : 1.0));
        }
        std::vector<Tensor> ins = {rand_tensor(rng, m, n)};
        return oracle::grad_check(
                   [&](Graph& g, const std::vector<NodeId>& in) {
                       return g.cross_entropy(in[0], targets, weights);
                   },
                   ins)
            .max_rel_error;
    });

    check_op("zero_channels", 12, 20, [&](Rng& rng) {
        const std::size_t m = 1 + rng.uniform_int(3), n = 3 + rng.uniform_int(5);
        std::vector<std::size_t> ch = {0, n - 1};
        std::vector<Tensor> ins = {rand_tensor(rng, m, n)};
        const Tensor w = direction(rng, n);
        return oracle::grad_check(
                   [&](Graph& g, const std::vector<NodeId>& in) {
                       return project(g, g.zero_channels(in[0], ch), w);
                   },
                   ins)
            .max_rel_error;
    });
}

TEST_CASE("zero_channels zeroes exactly the named columns") {
    Rng rng(21);
    Tensor x = rand_tensor(rng, 3, 5);
    Graph g;
    const NodeId y = g.zero_channels(g.input(x), {1, 3});
    const Tensor& v = g.value(y);
    for (std::size_t r = 0; r < 3; ++r)
        for (std::size_t c = 0; c < 5; ++c) {
            if (c == 1 || c == 3)
                CHECK(v.at(r, c) == 0.0);
            else
                CHECK(v.at(r, c) == x.at(r, c));
        }

    // Empty channel list is a bit-exact identity tap.
    Graph g2;
    const NodeId t = g2.zero_channels(g2.input(x), {});
    CHECK(g2.value(t).data == x.data);
}

TEST_CASE("identical graphs evaluate bit-identically") {
    auto build = [] {
        Rng rng(22);
        Graph g;
        const NodeId a = g.input(rand_tensor(rng, 4, 6));
        const NodeId w = g.input(rand_tensor(rng, 6, 3));
        const NodeId y = g.softmax_rows(g.silu(g.matmul(a, w)));
        return g.value(y).data;
    };
    CHECK(build() == build());
}

TEST_CASE("error taxonomy") {
    Graph g;
    Tensor a = Tensor::zeros(2, 3), b = Tensor::zeros(2, 3);
    const NodeId na = g.input(a), nb = g.input(b);
    CHECK_THROWS_AS(g.matmul(na, nb), ShapeError);
    CHECK_THROWS_AS(g.concat_rows(na, g.input(Tensor::zeros(2, 4))), ShapeError);
    CHECK_THROWS_AS(g.zero_channels(na, {3}), ShapeError);
    CHECK_THROWS_AS(g.cross_entropy(na, {0, 1}, {0.0, 0.0}), ShapeError);

    CHECK_THROWS_AS(g.grad(na), ProtocolError);          // before backward
    CHECK_THROWS_AS(g.backward(g.add(na, nb)), ProtocolError); // non-scalar loss
    CHECK_THROWS_AS(g.value(999), ProtocolError);

    Tensor big = Tensor::zeros(1, 1);
    big.data[0] = 1e200;
    Graph g2;
    const NodeId nbig = g2.input(big);
    CHECK_THROWS_AS(g2.mul(nbig, nbig), NumericError); // overflows to inf
}

TEST_CASE("cross_entropy equals explicit log-softmax NLL") {
    Rng rng(23);
    Tensor logits = rand_tensor(rng, 3, 5);
    const std::vector<int> targets = {2, 0, 4};
    const std::vector<double> weights = {1.0, 0.0, 1.0};

    Graph g;
    const double got =
        g.value(g.cross_entropy(g.input(logits), targets, weights)).data[0];

    double want = 0.0, wsum = 0.0;
    for (std::size_t r = 0; r < 3; ++r) {
        if (weights[r] == 0.0) continue;
        double mx = logits.at(r, 0);
        for (std::size_t c = 1; c < 5; ++c) mx = std::max(mx, logits.at(r, c));
        double s = 0.0;
        for (std::size_t c = 0; c < 5; ++c) s += std::exp(logits.at(r, c) - mx);
        want += -(logits.at(r, static_cast<std::size_t>(targets[r])) - mx -
                  std::log(s));
        wsum += 1.0;
    }
    CHECK(got == doctest::Approx(want / wsum).epsilon(1e-12));
}
