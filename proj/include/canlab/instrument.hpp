#pragma once

#include <vector>

#include "canlab/model.hpp"
#include "canlab/neuron.hpp"

namespace canlab {

// Enumerates every ablatable unit of a model exactly once, in NeuronId
// order: vision_encoder mlp_out, projector mlp_out, lm gate_out/down_out per
// layer. qformer addresses are accepted as projector aliases but are not
// enumerated, so the total counts each physical site once.
class NeuronRegistry {
public:
    explicit NeuronRegistry(const ModelConfig& cfg);

    const std::vector<NeuronId>& all() const { return neurons_; }
    std::size_t total() const { return neurons_.size(); }

    bool valid(const NeuronId& id) const;
    std::size_t width(Component c, int layer, Site s) const;

private:
    ModelConfig cfg_;
    std::vector<NeuronId> neurons_;
};

enum class Probe { first_generated_token };

// Per-neuron activation (and optionally |gradient|) across all dataset
// samples, recorded at the step that produces the first generated token.
struct ProfileSet {
    std::vector<NeuronId> neurons;                 // registry order
    std::vector<std::vector<double>> activations;  // [neuron][sample]
    std::vector<std::vector<double>> gradients;    // same shape; empty if not requested
    std::size_t sample_count = 0;
};

ProfileSet collect_profiles(const ToyLVLM& model,
                            const std::vector<SyntheticSample>& dataset,
                            const std::string& prompt, Probe probe,
                            bool with_gradients);

void save_profiles(const ProfileSet& ps, const std::filesystem::path& file,
                   const std::string& config_hash);
ProfileSet load_profiles(const std::filesystem::path& file,
                         const std::string& expected_config_hash);

// Immutable masked view: the model with the given neurons forced to zero
// during every forward pass. Underlying weights are untouched.
class MaskedModel {
public:
    MaskedModel(const ToyLVLM& model, MaskSet mask);

    const ToyLVLM& model() const { return *model_; }
    const MaskSet& mask() const { return mask_; }

    GenerationTrace generate_greedy(const std::vector<double>& pixels,
                                    const std::string& prompt,
                                    std::size_t max_len = 32) const {
        return model_->generate_greedy(pixels, prompt, mask_, max_len);
    }
    std::vector<double> teacher_forced_logprobs(
        const std::vector<double>& pixels, const std::string& prompt,
        const std::vector<int>& reference) const {
        return model_->teacher_forced_logprobs(pixels, prompt, reference, mask_);
    }

private:
    const ToyLVLM* model_;
    MaskSet mask_;
};

MaskedModel apply_mask(const ToyLVLM& model, const MaskSet& mask);

} // namespace canlab
