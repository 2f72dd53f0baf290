#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>

#include "canlab/dataset.hpp"
#include "canlab/instrument.hpp"
#include "canlab/search.hpp"
#include "oracle.hpp"

using namespace canlab;

namespace {

ModelConfig tiny_config() {
    ModelConfig c;
    c.image_size = 8;
    c.patch_size = 4;
    c.vision_layers = 1;
    c.vision_dim = 8;
    c.projector_dim = 12;
    c.lm_layers = 1;
    c.lm_dim = 12;
    c.ffn_dim = 16;
    c.vocab_size = 32;
    c.max_seq_len = 24;
    c.seed = 5;
    return c;
}

const std::string kPrompt = "Describe the object in this image";

struct Fixture {
    ToyLVLM model{tiny_config()};
    std::vector<SyntheticSample> ds = gen_dataset(1, 2, 8);
    AlignmentScorer scorer{tiny_config(), [] {
                               ScorerConfig s;
                               s.embed_dim = 8;
                               s.epochs = 0;
                               return s;
                           }()};
    ImportanceTable table;

    Fixture() {
        const auto ps = collect_profiles(model, ds, kPrompt,
                                         Probe::first_generated_token, false);
        table = score(ps, 0.0);
    }
};

SearchConfig lax_config() {
    SearchConfig c;
    c.scope = {Component::lm, Site::gate_out};
    c.delta_k = 2;
    c.k_max = 8;
    // thresholds no real model can dodge: the first step must collapse
    c.thresholds = {-1e9, 1e9, 1e9};
    return c;
}

} // namespace

TEST_CASE("progressive search visits k in delta_k steps up to k_max") {
    Fixture f;
    SearchConfig cfg = lax_config();
    cfg.thresholds = {1e9, -1e9, -1e9}; // unsatisfiable: full sweep, no k*
    const auto rep = progressive_search(f.model, f.table, f.scorer, f.ds, kPrompt,
                                        cfg);
    REQUIRE(rep.trajectory.size() == 4);
    for (std::size_t i = 0; i < rep.trajectory.size(); ++i)
        CHECK(rep.trajectory[i].metrics.k == (i + 1) * cfg.delta_k);
    CHECK_FALSE(rep.k_star.has_value());
    CHECK(rep.baseline.k == 0);
    CHECK(rep.baseline.delta_ppl == 0.0);
    CHECK(rep.final_mask.size() == cfg.k_max);
}

TEST_CASE("search stops at the first complete collapse") {
    Fixture f;
    const SearchConfig cfg = lax_config();
    const auto rep = progressive_search(f.model, f.table, f.scorer, f.ds, kPrompt,
                                        cfg);
    REQUIRE(rep.k_star.has_value());
    CHECK(*rep.k_star == cfg.delta_k);
    CHECK(rep.trajectory.size() == 1);
    CHECK(rep.trajectory.back().label == CollapseLabel::complete_collapse);
    CHECK(rep.final_mask.size() == cfg.delta_k);

    // the mask is the table's top-k in scope
    CHECK(rep.final_mask.serialize() ==
          top_k(f.table, cfg.delta_k, cfg.scope).serialize());
}

TEST_CASE("search agrees with the independent per-k grid scan") {
    Fixture f;
    SearchConfig cfg = lax_config();
    for (double tau : {-1e9, 1e-4, 1e9}) {
        cfg.thresholds.tau_ppl = tau;
        cfg.thresholds.tau_align = 1e9;
        cfg.thresholds.align_degraded = 1e9;
        const auto rep = progressive_search(f.model, f.table, f.scorer, f.ds,
                                            kPrompt, cfg);
        const auto grid = oracle::grid_scan_k_star(f.model, f.table, f.scorer,
                                                   f.ds, kPrompt, cfg);
        CHECK(rep.k_star == grid);
    }
}

TEST_CASE("search reports are deterministic and round-trip as JSON") {
    Fixture f;
    const SearchConfig cfg = lax_config();
    const auto a = progressive_search(f.model, f.table, f.scorer, f.ds, kPrompt,
                                      cfg);
    const auto b = progressive_search(f.model, f.table, f.scorer, f.ds, kPrompt,
                                      cfg);
    CHECK(a.to_json() == b.to_json());

    const auto back = CollapseReport::from_json(a.to_json());
    CHECK(back.to_json() == a.to_json());
    CHECK(back.k_star == a.k_star);
    CHECK(back.final_mask.serialize() == a.final_mask.serialize());
}

TEST_CASE("invalid search configs are rejected") {
    Fixture f;
    SearchConfig cfg = lax_config();
    cfg.delta_k = 0;
    CHECK_THROWS_AS(progressive_search(f.model, f.table, f.scorer, f.ds, kPrompt,
                                       cfg),
                    ConfigError);
    cfg = lax_config();
    cfg.k_max = 999; // beyond the 16-channel scope
    CHECK_THROWS_AS(progressive_search(f.model, f.table, f.scorer, f.ds, kPrompt,
                                       cfg),
                    ConfigError);
    cfg = lax_config();
    CHECK_THROWS_AS(progressive_search(f.model, f.table, f.scorer, {}, kPrompt,
                                       cfg),
                    InputError);
}

TEST_CASE("random controls avoid the targeted set and respect the seed") {
    Fixture f;
    const SearchConfig cfg = lax_config();
    const std::size_t k = 3;
    std::vector<MaskSet> masks_a, masks_b;
    const auto a = random_control(f.model, f.table, f.scorer, cfg.scope, k, 5,
                                  f.ds, kPrompt, cfg, 77, &masks_a);
    const auto b = random_control(f.model, f.table, f.scorer, cfg.scope, k, 5,
                                  f.ds, kPrompt, cfg, 77, &masks_b);
    REQUIRE(a.size() == 5);
    REQUIRE(masks_a.size() == 5);
    for (std::size_t i = 0; i < 5; ++i) {
        CHECK(a[i].mean_ppl == b[i].mean_ppl);
        CHECK(masks_a[i].serialize() == masks_b[i].serialize());
        CHECK(masks_a[i].size() == k);
    }

    const auto targeted = top_k(f.table, k, cfg.scope);
    for (const auto& m : masks_a)
        for (const auto& id : m.ids) {
            CHECK(cfg.scope.matches(id));
            CHECK_FALSE(targeted.contains(id));
        }

    const auto c = random_control(f.model, f.table, f.scorer, cfg.scope, k, 5,
                                  f.ds, kPrompt, cfg, 78, nullptr);
    bool any_diff = false;
    for (std::size_t i = 0; i < 5; ++i)
        any_diff = any_diff || c[i].mean_ppl != a[i].mean_ppl;
    CHECK(any_diff);

    // scope minus top-k must leave at least k candidates
    CHECK_THROWS_AS(random_control(f.model, f.table, f.scorer, cfg.scope, 9, 5,
                                   f.ds, kPrompt, cfg, 77, nullptr),
                    InputError);
    CHECK_THROWS_AS(random_control(f.model, f.table, f.scorer, cfg.scope, k, 0,
                                   f.ds, kPrompt, cfg, 77, nullptr),
                    InputError);
}

TEST_CASE("evaluate_mask of the empty mask is the exact baseline") {
    Fixture f;
    const auto p = evaluate_mask(f.model, MaskSet{}, f.scorer, f.ds, kPrompt,
                                 PplMode::reference_trace, 6);
    CHECK(p.k == 0);
    CHECK(p.delta_ppl == 0.0);
    CHECK(p.mean_ppl >= 1.0);
    CHECK(p.n_val == f.ds.size());
}
