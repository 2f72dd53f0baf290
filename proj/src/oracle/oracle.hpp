#pragma once

// Independent brute-force verifiers. Everything here is deliberately written
// as straight-line loops over the model weights, sharing no code with the
// graph-based main path, so agreement between the two is meaningful.

#include <functional>
#include <optional>

#include "canlab/metrics.hpp"
#include "canlab/model.hpp"
#include "canlab/score.hpp"
#include "canlab/search.hpp"

namespace canlab::oracle {

struct OracleBudget {
    std::size_t max_subset_size = 3;
    std::size_t max_scope_size = 16;
    std::size_t max_subsets = 2000;
};

// Hand-edit instruction for the plain forward: zero a channel of a site
// (or skip a whole FFN block).
struct Edit {
    Component component = Component::lm;
    int layer = 0;
    Site site = Site::gate_out;
    int channel = -1; // -1 with skip_ffn set means: drop the FFN entirely
    bool skip_ffn = false;
};

struct PlainForward {
    std::vector<std::vector<double>> lm_hidden; // [layer][seq*dim]
    std::vector<double> logits;                 // seq*vocab
    std::size_t seq_len = 0;
    // activations at every registered site, full matrices
    std::map<std::tuple<Component, int, Site>, std::vector<double>> taps;
};

// Re-implemented model forward with hand-applied edits. Matches the graph
// forward bit-for-bit on identical inputs when the edit list encodes the
// same mask.
PlainForward plain_forward(const ToyLVLM& model, const std::vector<double>& pixels,
                           const std::vector<int>& text_ids,
                           const std::vector<Edit>& edits);

// Greedy decode + teacher-forced perplexity built on plain_forward only.
std::vector<int> plain_generate(const ToyLVLM& model,
                                const std::vector<double>& pixels,
                                const std::string& prompt,
                                const std::vector<Edit>& edits,
                                std::size_t max_len);
double plain_perplexity(const ToyLVLM& model, const std::vector<double>& pixels,
                        const std::string& prompt, const std::vector<int>& reference,
                        const std::vector<Edit>& edits);

std::vector<Edit> edits_from_mask(const MaskSet& mask);

// Central finite differences (h = 1e-5) for a scalar-valued builder over a
// set of input tensors. Returns the max relative error between analytic and
// numeric gradients (with an absolute floor on the denominator).
struct GradCheckResult {
    double max_rel_error = 0.0;
    std::size_t checked = 0;
};
using LossBuilder =
    std::function<NodeId(Graph&, const std::vector<NodeId>& inputs)>;
GradCheckResult grad_check(const LossBuilder& builder,
                           const std::vector<Tensor>& inputs, double h = 1e-5,
                           double abs_floor = 1e-7);

// True iff the graph forward under `mask` and the plain forward under
// `edits` agree exactly on every decoder hidden state and the logits.
bool direct_intervention_equiv(const ToyLVLM& model,
                               const std::vector<double>& pixels,
                               const std::vector<int>& text_ids,
                               const MaskSet& mask, const std::vector<Edit>& edits);

// Literal minimal-subset optimization: enumerates subsets of the scope in
// size order (lexicographic within a size) and returns the first whose
// masking satisfies the joint collapse criterion against the unmasked
// baseline. Throws OracleAbort when the budget is exceeded.
std::optional<MaskSet> exhaustive_min_subset(
    const ToyLVLM& model, const std::vector<NeuronId>& scope_neurons,
    const std::vector<SyntheticSample>& valset, const AlignmentScorer& scorer,
    const Thresholds& thresholds, const OracleBudget& budget,
    const std::string& prompt, std::size_t max_gen_len);

// Independent per-k grid evaluation of the collapse criterion (no early
// stopping, own top-k selection loop). Returns the smallest k satisfying it.
std::optional<std::size_t> grid_scan_k_star(
    const ToyLVLM& model, const ImportanceTable& table,
    const AlignmentScorer& scorer, const std::vector<SyntheticSample>& valset,
    const std::string& prompt, const SearchConfig& config);

// Naive Eq.-style re-summation of importance scores (independent of score()).
std::vector<std::pair<NeuronId, double>> naive_scores(const ProfileSet& profiles,
                                                      double alpha);

} // namespace canlab::oracle
