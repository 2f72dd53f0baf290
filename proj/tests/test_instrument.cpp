#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <filesystem>

#include "canlab/dataset.hpp"
#include "canlab/instrument.hpp"
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

} // namespace

TEST_CASE("registry enumerates every ablatable site exactly once") {
    const NeuronRegistry tiny(tiny_config());
    // vision mlp_out 1*32 + projector mlp_out 12 + lm (gate 16 + down 12)
    CHECK(tiny.total() == 72);

    const NeuronRegistry full{ModelConfig{}};
    CHECK(full.total() == 1264);

    // sorted, duplicate-free, all valid
    const auto& all = tiny.all();
    for (std::size_t i = 1; i < all.size(); ++i) CHECK(all[i - 1] < all[i]);
    for (const auto& n : all) CHECK(tiny.valid(n));

    CHECK(tiny.width(Component::lm, 0, Site::gate_out) == 16);
    CHECK(tiny.width(Component::lm, 0, Site::down_out) == 12);
    CHECK(tiny.width(Component::projector, 0, Site::mlp_out) == 12);
    CHECK(tiny.width(Component::vision_encoder, 0, Site::mlp_out) == 32);
    // qformer aliases the projector
    CHECK(tiny.valid({Component::qformer, 0, Site::mlp_out, 3}));
    CHECK_FALSE(tiny.valid({Component::lm, 9, Site::gate_out, 0}));
    CHECK_FALSE(tiny.valid({Component::lm, 0, Site::gate_out, 16}));
}

TEST_CASE("profiles cover the registry with one value per sample") {
    const ToyLVLM m(tiny_config());
    const auto ds = gen_dataset(1, 2, 8);
    const auto ps = collect_profiles(m, ds, kPrompt, Probe::first_generated_token,
                                     /*with_gradients=*/true);
    const NeuronRegistry reg(m.config());
    REQUIRE(ps.neurons.size() == reg.total());
    CHECK(ps.neurons == reg.all());
    CHECK(ps.sample_count == ds.size());
    REQUIRE(ps.activations.size() == reg.total());
    REQUIRE(ps.gradients.size() == reg.total());
    for (std::size_t i = 0; i < reg.total(); ++i) {
        CHECK(ps.activations[i].size() == ds.size());
        CHECK(ps.gradients[i].size() == ds.size());
    }

    const auto no_grad = collect_profiles(m, ds, kPrompt,
                                          Probe::first_generated_token, false);
    CHECK(no_grad.gradients.empty());

    // deterministic
    const auto again = collect_profiles(m, ds, kPrompt,
                                        Probe::first_generated_token, true);
    CHECK(again.activations == ps.activations);
    CHECK(again.gradients == ps.gradients);
}

TEST_CASE("profile files embed and verify the config hash") {
    const ToyLVLM m(tiny_config());
    const auto ds = gen_dataset(1, 2, 8);
    const auto ps = collect_profiles(m, ds, kPrompt,
                                     Probe::first_generated_token, false);
    const auto dir = std::filesystem::temp_directory_path() / "canlab_test_prof";
    std::filesystem::create_directories(dir);
    save_profiles(ps, dir / "p.csv", "cafe");
    const auto back = load_profiles(dir / "p.csv", "cafe");
    CHECK(back.neurons == ps.neurons);
    CHECK(back.activations == ps.activations);
    CHECK_THROWS_AS(load_profiles(dir / "p.csv", "beef"), ProvenanceError);
    CHECK_THROWS_AS(load_profiles(dir / "absent.csv", "cafe"), DependencyError);
}

TEST_CASE("empty mask is a bit-exact identity") {
    const ToyLVLM m(tiny_config());
    const auto ds = gen_dataset(2, 2, 8);
    const auto view = apply_mask(m, MaskSet{});
    for (const auto& s : ds) {
        const auto bare = m.generate_greedy(s.pixels, kPrompt, MaskSet{}, 6);
        const auto masked = view.generate_greedy(s.pixels, kPrompt, 6);
        CHECK(bare.token_ids == masked.token_ids);
        CHECK(bare.logprobs == masked.logprobs);
    }
}

TEST_CASE("masking is idempotent and order-independent") {
    const ToyLVLM m(tiny_config());
    const auto ds = gen_dataset(1, 2, 8);
    MaskSet a;
    a.insert({Component::lm, 0, Site::gate_out, 3});
    a.insert({Component::lm, 0, Site::down_out, 1});
    MaskSet b;
    b.insert({Component::lm, 0, Site::down_out, 1});
    b.insert({Component::lm, 0, Site::gate_out, 3});
    b.insert({Component::lm, 0, Site::gate_out, 3}); // duplicate is a no-op
    CHECK(a.serialize() == b.serialize());
    CHECK(a.content_hash() == b.content_hash());

    const auto ta = apply_mask(m, a).generate_greedy(ds[0].pixels, kPrompt, 6);
    const auto tb = apply_mask(m, b).generate_greedy(ds[0].pixels, kPrompt, 6);
    CHECK(ta.token_ids == tb.token_ids);
    CHECK(ta.logprobs == tb.logprobs);
}

TEST_CASE("mask addresses are validated against the model") {
    const ToyLVLM m(tiny_config());
    const auto ds = gen_dataset(1, 2, 8);
    MaskSet bad;
    bad.insert({Component::lm, 0, Site::gate_out, 99});
    CHECK_THROWS_AS(m.generate_greedy(ds[0].pixels, kPrompt, bad, 6), AddressError);
}

TEST_CASE("mask round-trips through serialization") {
    MaskSet a;
    a.insert({Component::vision_encoder, 1, Site::mlp_out, 7});
    a.insert({Component::projector, 0, Site::mlp_out, 0});
    a.insert({Component::lm, 3, Site::down_out, 12});
    const auto b = MaskSet::deserialize(a.serialize());
    CHECK(a.serialize() == b.serialize());
    CHECK(b.contains({Component::projector, 0, Site::mlp_out, 0}));
    CHECK(NeuronId::parse("lm,3,down_out,12") ==
          NeuronId{Component::lm, 3, Site::down_out, 12});
    CHECK_THROWS_AS(NeuronId::parse("lm,3,down_out"), AddressError);

    MaskSet sub;
    sub.insert({Component::lm, 3, Site::down_out, 12});
    CHECK(sub.is_subset_of(a));
    CHECK_FALSE(a.is_subset_of(sub));
}

TEST_CASE("tap-based masking equals direct hidden-state intervention") {
    const ToyLVLM m(tiny_config());
    const auto ds = gen_dataset(1, 2, 8);
    const auto ids = m.tokenizer().encode("a red circle");

    MaskSet mask;
    mask.insert({Component::lm, 0, Site::gate_out, 2});
    mask.insert({Component::lm, 0, Site::gate_out, 9});
    mask.insert({Component::projector, 0, Site::mlp_out, 4});
    mask.insert({Component::vision_encoder, 0, Site::mlp_out, 11});

    CHECK(oracle::direct_intervention_equiv(m, ds[0].pixels, ids, mask,
                                            oracle::edits_from_mask(mask)));
}

TEST_CASE("masking every gate channel equals skipping the FFN block") {
    const ModelConfig cfg = tiny_config();
    const ToyLVLM m(cfg);
    const auto ds = gen_dataset(1, 2, 8);
    const auto ids = m.tokenizer().encode("a red circle");

    MaskSet all_gates;
    for (int ch = 0; ch < static_cast<int>(cfg.ffn_dim); ++ch)
        all_gates.insert({Component::lm, 0, Site::gate_out, ch});

    Graph g;
    const auto fr = m.build_forward(g, ds[0].pixels, ids, all_gates);
    const auto& masked_hidden = g.value(fr.lm_hidden[0]);

    oracle::Edit skip;
    skip.component = Component::lm;
    skip.layer = 0;
    skip.skip_ffn = true;
    const auto plain = oracle::plain_forward(m, ds[0].pixels, ids, {skip});

    REQUIRE(masked_hidden.data.size() == plain.lm_hidden[0].size());
    for (std::size_t i = 0; i < plain.lm_hidden[0].size(); ++i)
        CHECK(masked_hidden.data[i] ==
              doctest::Approx(plain.lm_hidden[0][i]).epsilon(1e-12));
}
