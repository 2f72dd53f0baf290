#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <filesystem>

#include "canlab/rng.hpp"
#include "canlab/score.hpp"
#include "oracle.hpp"

using namespace canlab;

namespace {

// Hand-built profile set over a handful of lm neurons.
ProfileSet small_profiles() {
    ProfileSet ps;
    ps.neurons = {
        {Component::lm, 0, Site::gate_out, 0},
        {Component::lm, 0, Site::gate_out, 1},
        {Component::lm, 0, Site::down_out, 0},
        {Component::lm, 1, Site::gate_out, 0},
    };
    ps.activations = {
        {1.0, -2.0, 3.0},
        {0.5, 0.5, 0.5},
        {-4.0, 0.0, 1.0},
        {2.0, 2.0, -2.0},
    };
    ps.gradients = {
        {0.1, 0.4, -0.2},
        {1.0, 1.0, 1.0},
        {0.0, 0.5, -0.5},
        {0.25, 0.0, 4.0},
    };
    ps.sample_count = 3;
    return ps;
}

ProfileSet random_profiles(std::size_t n_neurons, std::size_t n_samples,
                           std::uint64_t seed) {
    ProfileSet ps;
    Rng rng(seed);
    for (std::size_t i = 0; i < n_neurons; ++i)
        ps.neurons.push_back(
            {Component::lm, static_cast<int>(i / 8), Site::gate_out,
             static_cast<int>(i % 8)});
    ps.activations.resize(n_neurons);
    ps.gradients.resize(n_neurons);
    for (std::size_t i = 0; i < n_neurons; ++i)
        for (std::size_t s = 0; s < n_samples; ++s) {
            ps.activations[i].push_back(rng.normal(0.0, 2.0));
            ps.gradients[i].push_back(rng.normal(0.0, 1.0));
        }
    ps.sample_count = n_samples;
    return ps;
}

} // namespace

TEST_CASE("alpha = 0 averages absolute activations only") {
    const auto ps = small_profiles();
    const auto table = score(ps, 0.0);
    REQUIRE(table.entries.size() == 4);
    // entries are sorted; recover score by neuron
    auto lookup = [&](const NeuronId& id) {
        for (const auto& [n, s] : table.entries)
            if (n == id) return s;
        FAIL("neuron missing");
        return 0.0;
    };
    CHECK(lookup({Component::lm, 0, Site::gate_out, 0}) ==
          doctest::Approx(2.0).epsilon(1e-12));
    CHECK(lookup({Component::lm, 0, Site::gate_out, 1}) ==
          doctest::Approx(0.5).epsilon(1e-12));
    CHECK(lookup({Component::lm, 0, Site::down_out, 0}) ==
          doctest::Approx(5.0 / 3.0).epsilon(1e-12));
}

TEST_CASE("alpha = 1 weights activations by absolute gradients") {
    const auto ps = small_profiles();
    const auto table = score(ps, 1.0);
    auto lookup = [&](const NeuronId& id) {
        for (const auto& [n, s] : table.entries)
            if (n == id) return s;
        FAIL("neuron missing");
        return 0.0;
    };
    // (|0.1*1| + |0.4*-2| + |-0.2*3|) / 3
    CHECK(lookup({Component::lm, 0, Site::gate_out, 0}) ==
          doctest::Approx((0.1 + 0.8 + 0.6) / 3.0).epsilon(1e-12));
    // (|0.25*2| + 0 + |4*-2|) / 3
    CHECK(lookup({Component::lm, 1, Site::gate_out, 0}) ==
          doctest::Approx((0.5 + 0.0 + 8.0) / 3.0).epsilon(1e-12));
}

TEST_CASE("score matches the naive re-summation for alpha in {0, 0.5, 1}") {
    const auto ps = random_profiles(48, 7, 31);
    for (const double alpha : {0.0, 0.5, 1.0}) {
        const auto table = score(ps, alpha);
        const auto naive = oracle::naive_scores(ps, alpha);
        REQUIRE(table.entries.size() == naive.size());
        // oracle output is unsorted; index it
        std::map<NeuronId, double> want;
        for (const auto& [n, s] : naive) want[n] = s;
        for (const auto& [n, s] : table.entries) {
            const double w = want.at(n);
            const double denom = std::max(std::fabs(w), 1e-300);
            CHECK(std::fabs(s - w) / denom < 1e-12);
        }
    }
}

TEST_CASE("alpha outside [0,1] and missing gradients are rejected") {
    const auto ps = small_profiles();
    CHECK_THROWS_AS(score(ps, -0.1), ConfigError);
    CHECK_THROWS_AS(score(ps, 1.5), ConfigError);
    ProfileSet no_grad = ps;
    no_grad.gradients.clear();
    CHECK_NOTHROW(score(no_grad, 0.0));
    CHECK_THROWS_AS(score(no_grad, 0.5), InputError);
}

TEST_CASE("top_k is nested in k and bounded by the scope") {
    const auto ps = random_profiles(40, 5, 32);
    const auto table = score(ps, 0.0);
    const Scope scope{Component::lm, Site::gate_out};
    const std::size_t n = table.scope_size(scope);
    CHECK(n == 40);
    MaskSet prev;
    for (std::size_t k = 0; k <= n; ++k) {
        const auto cur = top_k(table, k, scope);
        CHECK(cur.size() == k);
        CHECK(prev.is_subset_of(cur));
        for (const auto& id : cur.ids) CHECK(scope.matches(id));
        prev = cur;
    }
    CHECK_THROWS_AS(top_k(table, n + 1, scope), RangeError);
}

TEST_CASE("scope filters by component and site") {
    auto ps = small_profiles();
    const auto table = score(ps, 0.0);
    CHECK(table.scope_size({Component::lm, Site::gate_out}) == 3);
    CHECK(table.scope_size({Component::lm, Site::down_out}) == 1);
    CHECK(table.scope_size({std::nullopt, std::nullopt}) == 4);
    const auto m = top_k(table, 1, {Component::lm, Site::down_out});
    CHECK(m.contains({Component::lm, 0, Site::down_out, 0}));
}

TEST_CASE("exact ties break in neuron-id order") {
    ProfileSet ps;
    // reverse-id insertion with identical activation profiles
    ps.neurons = {
        {Component::lm, 0, Site::gate_out, 0},
        {Component::lm, 0, Site::gate_out, 1},
        {Component::lm, 1, Site::gate_out, 0},
        {Component::vision_encoder, 0, Site::mlp_out, 2},
    };
    ps.activations = {{1.0}, {1.0}, {1.0}, {1.0}};
    ps.sample_count = 1;
    const auto table = score(ps, 0.0);
    for (std::size_t i = 1; i < table.entries.size(); ++i) {
        CHECK(table.entries[i - 1].second == table.entries[i].second);
        CHECK(table.entries[i - 1].first < table.entries[i].first);
    }
}

TEST_CASE("ranked tables round-trip with provenance checks") {
    const auto ps = random_profiles(16, 3, 33);
    const auto table = score(ps, 0.5, "dhash", "mhash");
    const auto dir = std::filesystem::temp_directory_path() / "canlab_test_rank";
    std::filesystem::create_directories(dir);
    save_table(table, dir / "t.csv", "feed");
    const auto back = load_table(dir / "t.csv", "feed");
    REQUIRE(back.entries.size() == table.entries.size());
    for (std::size_t i = 0; i < table.entries.size(); ++i) {
        CHECK(back.entries[i].first == table.entries[i].first);
        CHECK(back.entries[i].second ==
              doctest::Approx(table.entries[i].second).epsilon(1e-15));
    }
    CHECK_THROWS_AS(load_table(dir / "t.csv", "dead"), ProvenanceError);
    CHECK_THROWS_AS(load_table(dir / "no.csv", "feed"), DependencyError);
}
