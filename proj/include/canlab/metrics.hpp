#pragma once

#include <optional>

#include "canlab/instrument.hpp"
#include "canlab/model.hpp"

namespace canlab {

// One progressive-masking trajectory point. align_score is absent when every
// validation generation was empty; for threshold comparison an absent score
// counts as the minimum (the NaN -> 0 convention).
struct MetricPoint {
    std::size_t k = 0;
    double mean_ppl = 1.0;
    double delta_ppl = 0.0;
    std::optional<double> align_score;
    std::size_t n_val = 0;
};

struct Thresholds {
    double tau_ppl = 1.0;        // log10 PPL-ratio for complete collapse
    double tau_align = 22.0;     // alignment floor for complete collapse
    double align_degraded = 26.0; // stage-1 boundary (calibrated per run)
};

enum class CollapseLabel {
    healthy,
    expressive_degradation,
    perceptual_failure,
    complete_collapse,
};

std::string to_string(CollapseLabel l);
CollapseLabel collapse_label_from(const std::string& s);

// Teacher-forced perplexity of a reference token sequence under the masked
// model, exp(-mean log p). Log-probs are clamped at 1e-12 so the result is
// finite; a +inf marker is only possible if the reference is scored at
// exactly zero probability, which the clamp prevents.
double perplexity(const MaskedModel& view, const std::vector<double>& pixels,
                  const std::string& prompt, const std::vector<int>& reference);

// Mean over paired samples of log10(curr / prev).
double delta_ppl(const std::vector<double>& curr, const std::vector<double>& prev);

// True when an (optionally undefined) alignment score is <= the threshold.
bool align_at_most(const std::optional<double>& score, double threshold);

CollapseLabel collapse_check(const MetricPoint& point, const Thresholds& thresholds,
                             Component masked_scope);

struct ScorerConfig {
    std::size_t embed_dim = 32;
    std::size_t tower_layers = 1;
    int epochs = 100;
    double lr = 0.01;
    std::uint64_t seed = 2;

    std::string to_json() const;
    static ScorerConfig from_json(const std::string& s);
};

// Toy two-tower image/text embedding scorer. The image tower reuses the
// vision-encoder architecture; the text tower is a bag of token embeddings.
// Trained contrastively on the synthetic dataset, then frozen; it is a
// measurement instrument, not part of the model under test.
class AlignmentScorer {
public:
    AlignmentScorer(const ModelConfig& model_cfg, const ScorerConfig& cfg);

    void fit(const std::vector<SyntheticSample>& samples);

    // 100 x cosine similarity; nullopt for empty text.
    std::optional<double> score(const std::vector<double>& pixels,
                                const std::string& text) const;

    void save(const std::filesystem::path& file) const;
    static AlignmentScorer load(const std::filesystem::path& file);

    const ScorerConfig& config() const { return cfg_; }
    std::string weights_hash() const;

private:
    std::vector<double> embed_image(const std::vector<double>& pixels) const;
    std::vector<double> embed_text(const std::vector<int>& ids) const;
    void for_each_param(const std::function<void(const std::string&, Tensor&)>& fn);

    NodeId build_image_tower(Graph& g, const std::vector<double>& pixels,
                             const ParamFn& param) const;
    NodeId build_text_tower(Graph& g, const std::vector<int>& ids,
                            const ParamFn& param) const;

    ModelConfig model_cfg_;
    ScorerConfig cfg_;
    Tokenizer tokenizer_;

    Tensor patch_w, patch_b, pos;
    std::vector<VisionLayer> layers;
    Tensor ln_g, ln_b, img_head_w, img_head_b;
    Tensor txt_table, txt_head_w, txt_head_b;
};

// Mean scorer output over n_pairs random image/caption pairings; the
// chance-level baseline used to calibrate tau_align.
double chance_baseline(const AlignmentScorer& scorer,
                       const std::vector<SyntheticSample>& samples,
                       std::size_t n_pairs, std::uint64_t seed);

} // namespace canlab
