#pragma once

#include <filesystem>
#include <set>
#include <string>
#include <tuple>
#include <vector>

#include "canlab/errors.hpp"

namespace canlab {

enum class Component { vision_encoder, projector, qformer, lm };
enum class Site { gate_out, down_out, mlp_out };

std::string to_string(Component c);
std::string to_string(Site s);
Component component_from(const std::string& s);
Site site_from(const std::string& s);

// Globally unique address of one ablatable unit. Ordering is lexicographic
// over (component, layer, site, channel) and is the tie-break order used
// everywhere a deterministic total order is needed.
struct NeuronId {
    Component component = Component::lm;
    int layer = 0;
    Site site = Site::gate_out;
    int channel = 0;

    auto tie() const { return std::tuple(component, layer, site, channel); }
    bool operator<(const NeuronId& o) const { return tie() < o.tie(); }
    bool operator==(const NeuronId& o) const { return tie() == o.tie(); }

    std::string str() const {
        return to_string(component) + "," + std::to_string(layer) + "," +
               to_string(site) + "," + std::to_string(channel);
    }
    static NeuronId parse(const std::string& line);
};

// Duplicate-free set of neurons to be zeroed during forward passes.
struct MaskSet {
    std::set<NeuronId> ids;

    bool empty() const { return ids.empty(); }
    std::size_t size() const { return ids.size(); }
    bool contains(const NeuronId& n) const { return ids.count(n) != 0; }
    void insert(const NeuronId& n) { ids.insert(n); }

    // Newline-delimited sorted records `component,layer,site,channel`.
    std::string serialize() const;
    static MaskSet deserialize(const std::string& text);
    void save(const std::filesystem::path& file) const;
    static MaskSet load(const std::filesystem::path& file);
    std::string content_hash() const;

    bool is_subset_of(const MaskSet& other) const;
};

} // namespace canlab
