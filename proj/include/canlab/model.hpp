#pragma once

#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "canlab/dataset.hpp"
#include "canlab/neuron.hpp"
#include "canlab/tensor.hpp"
#include "canlab/tokenizer.hpp"

namespace canlab {

struct ModelConfig {
    std::size_t image_size = 32;
    std::size_t patch_size = 8;
    std::size_t vision_layers = 2;
    std::size_t vision_dim = 32;
    std::size_t projector_dim = 64;
    std::size_t lm_layers = 4;
    std::size_t lm_dim = 64;
    std::size_t ffn_dim = 172;
    std::size_t vocab_size = 64;
    std::size_t max_seq_len = 32;
    std::uint64_t seed = 1;

    std::size_t vision_ffn_dim() const { return 4 * vision_dim; }
    std::size_t num_patches() const {
        const std::size_t n = image_size / patch_size;
        return n * n;
    }
    std::size_t patch_dim() const { return patch_size * patch_size * 3; }

    void validate() const;
    std::string to_json() const;
    static ModelConfig from_json(const std::string& s);
};

// One decoder layer: pre-LN single-head causal attention plus a SwiGLU FFN
// whose gate/up/down projections are bias-free, so zeroing all gate_out
// channels makes the FFN contribution exactly zero.
struct LmLayer {
    Tensor ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo;
    Tensor ln2_g, ln2_b, w_gate, w_up, w_down;
};

struct VisionLayer {
    Tensor ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo;
    Tensor ln2_g, ln2_b, w1, b1, w2, b2;
};

// Per-step record of one greedy generation: chosen token ids, the log
// probability of each chosen token under the generating model, and the
// decoded text (specials stripped).
struct GenerationTrace {
    std::vector<int> token_ids;
    std::vector<double> logprobs;
    std::string text;
};

using ParamFn = std::function<NodeId(const std::string&, const Tensor&)>;

struct ForwardResult {
    NodeId logits = -1;
    // Tap node per (component, layer, site); value/grad rows are sequence
    // positions.
    std::map<std::tuple<Component, int, Site>, NodeId> taps;
    // Residual-stream state after each decoder layer.
    std::vector<NodeId> lm_hidden;
    std::size_t seq_len = 0;
};

class ToyLVLM {
public:
    explicit ToyLVLM(const ModelConfig& cfg);

    const ModelConfig& config() const { return cfg_; }
    const Tokenizer& tokenizer() const { return tokenizer_; }

    // Builds the full vision->projector->LM forward for image + text tokens.
    // The mask (possibly empty) is applied at every registered site; tap
    // nodes are always recorded. Text token row i of the logits corresponds
    // to sequence position num_patches + i.
    ForwardResult build_forward(Graph& g, const std::vector<double>& pixels,
                                const std::vector<int>& text_ids,
                                const MaskSet& mask) const;

    // Same forward but also registers every parameter as a graph input and
    // reports the node ids so a training step can read parameter gradients.
    ForwardResult build_forward_trainable(
        Graph& g, const std::vector<double>& pixels,
        const std::vector<int>& text_ids, const MaskSet& mask,
        std::map<std::string, NodeId>& param_nodes);

    GenerationTrace generate_greedy(const std::vector<double>& pixels,
                                    const std::string& prompt,
                                    const MaskSet& mask,
                                    std::size_t max_len = 32) const;

    // Log p of each reference token, teacher-forced under this model
    // conditioned on (image, prompt), with the mask applied.
    std::vector<double> teacher_forced_logprobs(const std::vector<double>& pixels,
                                                const std::string& prompt,
                                                const std::vector<int>& reference,
                                                const MaskSet& mask) const;

    void for_each_param(const std::function<void(const std::string&, Tensor&)>& fn);
    void for_each_param(
        const std::function<void(const std::string&, const Tensor&)>& fn) const;

    std::string weights_hash() const;

    void save(const std::filesystem::path& file) const;
    static ToyLVLM load(const std::filesystem::path& file);

    std::vector<double> patchify(const std::vector<double>& pixels) const;

    // weights (public: the oracle reimplementation reads them directly)
    Tensor patch_w, patch_b, vis_pos;
    std::vector<VisionLayer> vis_layers;
    Tensor vis_ln_g, vis_ln_b;
    Tensor proj_w1, proj_b1, proj_w2, proj_b2;
    Tensor tok_table, pos_table;
    std::vector<LmLayer> lm_layers;
    Tensor fin_ln_g, fin_ln_b, w_out, b_out;

private:
    ForwardResult build_impl(Graph& g, const std::vector<double>& pixels,
                             const std::vector<int>& text_ids, const MaskSet& mask,
                             const ParamFn& param,
                             std::map<std::string, NodeId>* param_nodes);

    void init_weights();

    ModelConfig cfg_;
    Tokenizer tokenizer_;
};

struct TrainResult {
    std::vector<double> loss_curve; // mean loss per epoch
};

// Teacher-forced next-token training on captions with Adam. epochs == 0
// leaves the weights untouched.
TrainResult train(ToyLVLM& model, const std::vector<SyntheticSample>& dataset,
                  int epochs, double lr, std::uint64_t seed);

// Fraction of samples whose greedy caption equals the ground-truth caption.
double caption_accuracy(const ToyLVLM& model,
                        const std::vector<SyntheticSample>& samples,
                        const std::string& prompt, std::size_t max_len = 8);

} // namespace canlab
