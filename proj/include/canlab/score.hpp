#pragma once

#include <optional>

#include "canlab/instrument.hpp"
#include "canlab/neuron.hpp"

namespace canlab {

// Component/site filter for ranking and masking. Empty fields match
// everything.
struct Scope {
    std::optional<Component> component;
    std::optional<Site> site;

    bool matches(const NeuronId& n) const {
        if (component && n.component != *component) return false;
        if (site && n.site != *site) return false;
        return true;
    }
    std::string str() const {
        return (component ? to_string(*component) : std::string("*")) + "/" +
               (site ? to_string(*site) : std::string("*"));
    }
};

// Per-neuron importance I = mean_i |g_i|^alpha * |a_i|, sorted by score
// descending with NeuronId order breaking ties.
struct ImportanceTable {
    std::vector<std::pair<NeuronId, double>> entries;
    double alpha = 0.0;
    std::string dataset_hash;
    std::string model_hash;

    std::size_t scope_size(const Scope& s) const;
};

ImportanceTable score(const ProfileSet& profiles, double alpha,
                      const std::string& dataset_hash = "",
                      const std::string& model_hash = "");

// First k in-scope entries of the table as a MaskSet. Nested in k by
// construction.
MaskSet top_k(const ImportanceTable& table, std::size_t k, const Scope& scope);

// Ranked-list CSV: rank,component,layer,site,channel,score
void save_table(const ImportanceTable& table, const std::filesystem::path& file,
                const std::string& config_hash);
ImportanceTable load_table(const std::filesystem::path& file,
                           const std::string& expected_config_hash);

} // namespace canlab
