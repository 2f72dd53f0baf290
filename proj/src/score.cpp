#include "canlab/score.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace canlab {

std::size_t ImportanceTable::scope_size(const Scope& s) const {
    std::size_t n = 0;
    for (const auto& e : entries)
        if (s.matches(e.first)) ++n;
    return n;
}

ImportanceTable score(const ProfileSet& profiles, double alpha,
                      const std::string& dataset_hash,
                      const std::string& model_hash) {
    if (alpha < 0.0 || alpha > 1.0)
        throw ConfigError("alpha must lie in [0,1], got " + std::to_string(alpha));
    if (profiles.neurons.size() != profiles.activations.size())
        throw InputError("profiles: neuron/activation count mismatch");
    const bool use_grad = alpha > 0.0;
    if (use_grad && profiles.gradients.size() != profiles.neurons.size())
        throw InputError("alpha > 0 requires gradient profiles");

    ImportanceTable table;
    table.alpha = alpha;
    table.dataset_hash = dataset_hash;
    table.model_hash = model_hash;
    table.entries.reserve(profiles.neurons.size());
    for (std::size_t ni = 0; ni < profiles.neurons.size(); ++ni) {
        const auto& acts = profiles.activations[ni];
        if (acts.size() != profiles.sample_count)
            throw InputError("profile sample count mismatch at neuron " +
                             profiles.neurons[ni].str());
        if (use_grad && profiles.gradients[ni].size() != acts.size())
            throw InputError("gradient sample count mismatch at neuron " +
                             profiles.neurons[ni].str());
        double acc = 0.0;
        for (std::size_t si = 0; si < acts.size(); ++si) {
            // |g|^0 == 1 by convention, including g == 0, so alpha = 0
            // degenerates to pure activation magnitude.
            const double gw =
                (alpha == 0.0) ? 1.0
                               : std::pow(std::abs(profiles.gradients[ni][si]), alpha);
            acc += gw * std::abs(acts[si]);
        }
        table.entries.emplace_back(profiles.neurons[ni],
                                   acc / static_cast<double>(acts.size()));
    }
    std::stable_sort(table.entries.begin(), table.entries.end(),
                     [](const auto& a, const auto& b) {
                         if (a.second != b.second) return a.second > b.second;
                         return a.first < b.first;
                     });
    return table;
}

MaskSet top_k(const ImportanceTable& table, std::size_t k, const Scope& scope) {
    MaskSet mask;
    std::size_t taken = 0, in_scope = 0;
    for (const auto& [id, s] : table.entries) {
        (void)s;
        if (!scope.matches(id)) continue;
        ++in_scope;
        if (taken < k) {
            mask.insert(id);
            ++taken;
        }
    }
    if (k > in_scope)
        throw RangeError("top_k: k=" + std::to_string(k) + " exceeds scope size " +
                         std::to_string(in_scope));
    return mask;
}

void save_table(const ImportanceTable& table, const std::filesystem::path& file,
                const std::string& config_hash) {
    std::ofstream out(file, std::ios::binary);
    out << "# config_hash=" << config_hash << " alpha=" << table.alpha
        << " dataset=" << table.dataset_hash << " model=" << table.model_hash
        << "\n";
    out << "rank,component,layer,site,channel,score\n";
    char buf[32];
    for (std::size_t i = 0; i < table.entries.size(); ++i) {
        std::snprintf(buf, sizeof buf, "%.17g", table.entries[i].second);
        out << i + 1 << "," << table.entries[i].first.str() << "," << buf << "\n";
    }
}

ImportanceTable load_table(const std::filesystem::path& file,
                           const std::string& expected_config_hash) {
    std::ifstream in(file);
    if (!in) throw DependencyError("missing ranked list " + file.string());
    std::string line;
    std::getline(in, line);
    const std::string prefix = "# config_hash=";
    if (line.rfind(prefix, 0) != 0)
        throw ProvenanceError("ranked list lacks config hash: " + file.string());
    if (!expected_config_hash.empty()) {
        const auto rest = line.substr(prefix.size());
        if (rest.substr(0, rest.find(' ')) != expected_config_hash)
            throw ProvenanceError("ranked list config hash mismatch in " +
                                  file.string());
    }
    ImportanceTable table;
    {
        const auto apos = line.find("alpha=");
        if (apos != std::string::npos) table.alpha = std::stod(line.substr(apos + 6));
    }
    std::getline(in, line); // header
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::stringstream ss(line);
        std::string rank, comp, layer, site, channel, sc;
        std::getline(ss, rank, ',');
        std::getline(ss, comp, ',');
        std::getline(ss, layer, ',');
        std::getline(ss, site, ',');
        std::getline(ss, channel, ',');
        std::getline(ss, sc, ',');
        table.entries.emplace_back(
            NeuronId::parse(comp + "," + layer + "," + site + "," + channel),
            std::stod(sc));
    }
    return table;
}

} // namespace canlab
