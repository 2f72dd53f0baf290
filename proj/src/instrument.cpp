#include "canlab/instrument.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include "canlab/hash.hpp"

namespace canlab {

NeuronRegistry::NeuronRegistry(const ModelConfig& cfg) : cfg_(cfg) {
    for (std::size_t l = 0; l < cfg.vision_layers; ++l)
        for (std::size_t c = 0; c < cfg.vision_ffn_dim(); ++c)
            neurons_.push_back({Component::vision_encoder, static_cast<int>(l),
                                Site::mlp_out, static_cast<int>(c)});
    for (std::size_t c = 0; c < cfg.projector_dim; ++c)
        neurons_.push_back({Component::projector, 0, Site::mlp_out,
                            static_cast<int>(c)});
    for (std::size_t l = 0; l < cfg.lm_layers; ++l) {
        for (std::size_t c = 0; c < cfg.ffn_dim; ++c)
            neurons_.push_back({Component::lm, static_cast<int>(l), Site::gate_out,
                                static_cast<int>(c)});
        for (std::size_t c = 0; c < cfg.lm_dim; ++c)
            neurons_.push_back({Component::lm, static_cast<int>(l), Site::down_out,
                                static_cast<int>(c)});
    }
}

std::size_t NeuronRegistry::width(Component c, int layer, Site s) const {
    switch (c) {
        case Component::vision_encoder:
            if (s == Site::mlp_out && layer >= 0 &&
                static_cast<std::size_t>(layer) < cfg_.vision_layers)
                return cfg_.vision_ffn_dim();
            return 0;
        case Component::projector:
        case Component::qformer:
            return (s == Site::mlp_out && layer == 0) ? cfg_.projector_dim : 0;
        case Component::lm:
            if (layer < 0 || static_cast<std::size_t>(layer) >= cfg_.lm_layers)
                return 0;
            if (s == Site::gate_out) return cfg_.ffn_dim;
            if (s == Site::down_out) return cfg_.lm_dim;
            return 0;
    }
    return 0;
}

bool NeuronRegistry::valid(const NeuronId& id) const {
    return id.channel >= 0 &&
           static_cast<std::size_t>(id.channel) < width(id.component, id.layer, id.site);
}

ProfileSet collect_profiles(const ToyLVLM& model,
                            const std::vector<SyntheticSample>& dataset,
                            const std::string& prompt, Probe probe,
                            bool with_gradients) {
    if (dataset.empty()) throw InputError("collect_profiles: dataset is empty");
    if (probe != Probe::first_generated_token)
        throw ConfigError("unsupported probe kind");

    const NeuronRegistry reg(model.config());
    ProfileSet ps;
    ps.neurons = reg.all();
    ps.sample_count = dataset.size();
    ps.activations.assign(ps.neurons.size(),
                          std::vector<double>(dataset.size(), 0.0));
    if (with_gradients)
        ps.gradients.assign(ps.neurons.size(),
                            std::vector<double>(dataset.size(), 0.0));

    const auto prompt_ids = model.tokenizer().encode(prompt);
    std::vector<int> text = {Tokenizer::kBos};
    text.insert(text.end(), prompt_ids.begin(), prompt_ids.end());
    const MaskSet no_mask;

    for (std::size_t si = 0; si < dataset.size(); ++si) {
        Graph g;
        ForwardResult fr = model.build_forward(g, dataset[si].pixels, text, no_mask);
        const std::size_t last = fr.seq_len - 1;

        NodeId loss = -1;
        if (with_gradients) {
            // self-supervised NLL of the greedily chosen first token
            const Tensor& logits = g.value(fr.logits);
            const std::size_t v = logits.cols();
            std::size_t best = 0;
            for (std::size_t j = 1; j < v; ++j)
                if (logits.at(last, j) > logits.at(last, best)) best = j;
            std::vector<int> targets(fr.seq_len, 0);
            std::vector<double> weights(fr.seq_len, 0.0);
            targets[last] = static_cast<int>(best);
            weights[last] = 1.0;
            loss = g.cross_entropy(fr.logits, targets, weights);
            g.backward(loss);
        }

        for (std::size_t ni = 0; ni < ps.neurons.size(); ++ni) {
            const auto& n = ps.neurons[ni];
            const NodeId tap = fr.taps.at({n.component, n.layer, n.site});
            const Tensor& val = g.value(tap);
            // LM taps have one row per sequence position (last row = probe
            // token); vision/projector taps one row per patch (last patch).
            const std::size_t row = val.rows() - 1;
            ps.activations[ni][si] =
                val.at(row, static_cast<std::size_t>(n.channel));
            if (with_gradients) {
                const Tensor& gr = g.grad(tap);
                ps.gradients[ni][si] =
                    std::abs(gr.at(row, static_cast<std::size_t>(n.channel)));
            }
        }
    }
    return ps;
}

MaskedModel::MaskedModel(const ToyLVLM& model, MaskSet mask)
    : model_(&model), mask_(std::move(mask)) {
    const NeuronRegistry reg(model.config());
    for (const auto& id : mask_.ids)
        if (!reg.valid(id)) throw AddressError("unknown neuron id: " + id.str());
}

MaskedModel apply_mask(const ToyLVLM& model, const MaskSet& mask) {
    return MaskedModel(model, mask);
}

void save_profiles(const ProfileSet& ps, const std::filesystem::path& file,
                   const std::string& config_hash) {
    std::ofstream out(file, std::ios::binary);
    out << "# config_hash=" << config_hash << "\n";
    out << "component,layer,site,channel,kind";
    for (std::size_t i = 0; i < ps.sample_count; ++i) out << ",v" << i;
    out << "\n";
    char buf[32];
    auto row = [&](const NeuronId& n, const char* kind,
                   const std::vector<double>& vals) {
        out << n.str() << "," << kind;
        for (double v : vals) {
            std::snprintf(buf, sizeof buf, "%.17g", v);
            out << "," << buf;
        }
        out << "\n";
    };
    for (std::size_t i = 0; i < ps.neurons.size(); ++i) {
        row(ps.neurons[i], "act", ps.activations[i]);
        if (!ps.gradients.empty()) row(ps.neurons[i], "grad", ps.gradients[i]);
    }
}

ProfileSet load_profiles(const std::filesystem::path& file,
                         const std::string& expected_config_hash) {
    std::ifstream in(file);
    if (!in) throw DependencyError("missing profiles " + file.string());
    std::string line;
    std::getline(in, line);
    const std::string prefix = "# config_hash=";
    if (line.rfind(prefix, 0) != 0)
        throw ProvenanceError("profiles file lacks config hash: " + file.string());
    if (!expected_config_hash.empty() &&
        line.substr(prefix.size()) != expected_config_hash)
        throw ProvenanceError("profiles config hash mismatch in " + file.string());
    std::getline(in, line); // header

    ProfileSet ps;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::stringstream ss(line);
        std::string comp, layer, site, channel, kind;
        std::getline(ss, comp, ',');
        std::getline(ss, layer, ',');
        std::getline(ss, site, ',');
        std::getline(ss, channel, ',');
        std::getline(ss, kind, ',');
        NeuronId n = NeuronId::parse(comp + "," + layer + "," + site + "," + channel);
        std::vector<double> vals;
        std::string v;
        while (std::getline(ss, v, ',')) vals.push_back(std::stod(v));
        if (kind == "act") {
            ps.neurons.push_back(n);
            ps.activations.push_back(std::move(vals));
        } else if (kind == "grad") {
            ps.gradients.push_back(std::move(vals));
        } else {
            throw InputError("bad profile row kind '" + kind + "'");
        }
    }
    ps.sample_count = ps.activations.empty() ? 0 : ps.activations[0].size();
    return ps;
}

} // namespace canlab
