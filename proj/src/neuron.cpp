#include "canlab/neuron.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

#include "canlab/hash.hpp"

namespace canlab {

std::string to_string(Component c) {
    switch (c) {
        case Component::vision_encoder: return "vision_encoder";
        case Component::projector: return "projector";
        case Component::qformer: return "qformer";
        case Component::lm: return "lm";
    }
    return "?";
}

std::string to_string(Site s) {
    switch (s) {
        case Site::gate_out: return "gate_out";
        case Site::down_out: return "down_out";
        case Site::mlp_out: return "mlp_out";
    }
    return "?";
}

Component component_from(const std::string& s) {
    if (s == "vision_encoder") return Component::vision_encoder;
    if (s == "projector") return Component::projector;
    if (s == "qformer") return Component::qformer;
    if (s == "lm") return Component::lm;
    throw AddressError("unknown component '" + s + "'");
}

Site site_from(const std::string& s) {
    if (s == "gate_out") return Site::gate_out;
    if (s == "down_out") return Site::down_out;
    if (s == "mlp_out") return Site::mlp_out;
    throw AddressError("unknown site '" + s + "'");
}

NeuronId NeuronId::parse(const std::string& line) {
    std::stringstream ss(line);
    std::string comp, layer, site, channel;
    if (!std::getline(ss, comp, ',') || !std::getline(ss, layer, ',') ||
        !std::getline(ss, site, ',') || !std::getline(ss, channel))
        throw AddressError("malformed neuron record '" + line + "'");
    NeuronId n;
    n.component = component_from(comp);
    n.layer = std::stoi(layer);
    n.site = site_from(site);
    n.channel = std::stoi(channel);
    if (n.layer < 0 || n.channel < 0)
        throw AddressError("negative layer/channel in '" + line + "'");
    return n;
}

std::string MaskSet::serialize() const {
    std::string out;
    for (const auto& n : ids) {
        out += n.str();
        out += '\n';
    }
    return out;
}

MaskSet MaskSet::deserialize(const std::string& text) {
    MaskSet m;
    std::stringstream ss(text);
    std::string line;
    while (std::getline(ss, line)) {
        if (line.empty()) continue;
        m.ids.insert(NeuronId::parse(line));
    }
    return m;
}

void MaskSet::save(const std::filesystem::path& file) const {
    std::ofstream out(file, std::ios::binary);
    out << serialize();
}

MaskSet MaskSet::load(const std::filesystem::path& file) {
    std::ifstream in(file, std::ios::binary);
    if (!in) throw DependencyError("missing mask file " + file.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return deserialize(ss.str());
}

std::string MaskSet::content_hash() const { return fnv1a_hex(serialize()); }

bool MaskSet::is_subset_of(const MaskSet& other) const {
    return std::includes(other.ids.begin(), other.ids.end(), ids.begin(), ids.end());
}

} // namespace canlab
