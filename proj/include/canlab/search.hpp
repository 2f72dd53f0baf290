#pragma once

#include "canlab/metrics.hpp"
#include "canlab/score.hpp"

namespace canlab {

enum class PplMode {
    reference_trace, // masked model scores the unmasked model's greedy output
    self_trace,      // masked model scores its own greedy output
};

std::string to_string(PplMode m);
PplMode ppl_mode_from(const std::string& s);

struct SearchConfig {
    Scope scope;
    std::size_t delta_k = 1;
    std::size_t k_max = 16;
    Thresholds thresholds;
    PplMode ppl_mode = PplMode::reference_trace;
    std::size_t overshoot_steps = 0; // extra steps recorded past k*
    std::size_t max_gen_len = 8;
    std::uint64_t seed = 0;
};

struct TrajectoryPoint {
    MetricPoint metrics;
    CollapseLabel label = CollapseLabel::healthy;
};

struct CollapseReport {
    std::vector<TrajectoryPoint> trajectory; // k strictly increasing by delta_k
    std::optional<std::size_t> k_star;       // smallest k labeled complete_collapse
    MaskSet final_mask;
    std::optional<std::size_t> first_degraded_k; // first expressive/perceptual label
    MetricPoint baseline;                        // k = 0
    Thresholds thresholds;                       // as actually applied
    std::string config_hash;

    std::string to_json() const;
    static CollapseReport from_json(const std::string& s);
    void save_trajectory_csv(const std::filesystem::path& file) const;
};

// Greedy progressive masking: k = delta_k, 2*delta_k, ... <= k_max, stopping
// at the first complete collapse (plus optional overshoot). Delta_PPL at the
// first step compares against the k = 0 baseline.
CollapseReport progressive_search(const ToyLVLM& model,
                                  const ImportanceTable& table,
                                  const AlignmentScorer& scorer,
                                  const std::vector<SyntheticSample>& valset,
                                  const std::string& prompt,
                                  const SearchConfig& config);

// n_trials uniform k-subsets from the scope, excluding the CAN top-k set.
// Each point's delta_ppl is measured against the unmasked baseline.
std::vector<MetricPoint> random_control(const ToyLVLM& model,
                                        const ImportanceTable& table,
                                        const AlignmentScorer& scorer,
                                        const Scope& scope, std::size_t k,
                                        std::size_t n_trials,
                                        const std::vector<SyntheticSample>& valset,
                                        const std::string& prompt,
                                        const SearchConfig& config,
                                        std::uint64_t seed,
                                        std::vector<MaskSet>* out_masks = nullptr);

// Single-mask evaluation against the unmasked baseline (shared by controls
// and the targeted-vs-random comparison).
MetricPoint evaluate_mask(const ToyLVLM& model, const MaskSet& mask,
                          const AlignmentScorer& scorer,
                          const std::vector<SyntheticSample>& valset,
                          const std::string& prompt, PplMode ppl_mode,
                          std::size_t max_gen_len);

} // namespace canlab
