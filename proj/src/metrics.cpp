#include "canlab/metrics.hpp"

#include <cmath>
#include <fstream>

#include "json.hpp"

#include "canlab/hash.hpp"
#include "canlab/rng.hpp"

namespace canlab {

using json = nlohmann::json;

std::string to_string(CollapseLabel l) {
    switch (l) {
        case CollapseLabel::healthy: return "healthy";
        case CollapseLabel::expressive_degradation: return "expressive_degradation";
        case CollapseLabel::perceptual_failure: return "perceptual_failure";
        case CollapseLabel::complete_collapse: return "complete_collapse";
    }
    return "?";
}

CollapseLabel collapse_label_from(const std::string& s) {
    if (s == "healthy") return CollapseLabel::healthy;
    if (s == "expressive_degradation") return CollapseLabel::expressive_degradation;
    if (s == "perceptual_failure") return CollapseLabel::perceptual_failure;
    if (s == "complete_collapse") return CollapseLabel::complete_collapse;
    throw InputError("unknown collapse label '" + s + "'");
}

double perplexity(const MaskedModel& view, const std::vector<double>& pixels,
                  const std::string& prompt, const std::vector<int>& reference) {
    if (reference.empty()) throw InputError("perplexity: empty reference");
    const auto logps = view.teacher_forced_logprobs(pixels, prompt, reference);
    double mean = 0.0;
    for (double lp : logps) mean += lp;
    mean /= static_cast<double>(logps.size());
    return std::exp(-mean);
}

double delta_ppl(const std::vector<double>& curr, const std::vector<double>& prev) {
    if (curr.size() != prev.size())
        throw InputError("delta_ppl: sample count mismatch, " +
                         std::to_string(curr.size()) + " vs " +
                         std::to_string(prev.size()));
    if (curr.empty()) throw InputError("delta_ppl: empty sample lists");
    double acc = 0.0;
    for (std::size_t i = 0; i < curr.size(); ++i)
        acc += std::log10(curr[i] / prev[i]);
    return acc / static_cast<double>(curr.size());
}

bool align_at_most(const std::optional<double>& score, double threshold) {
    return !score.has_value() || *score <= threshold;
}

CollapseLabel collapse_check(const MetricPoint& point, const Thresholds& thresholds,
                             Component masked_scope) {
    if (point.delta_ppl >= thresholds.tau_ppl &&
        align_at_most(point.align_score, thresholds.tau_align))
        return CollapseLabel::complete_collapse;
    if (point.delta_ppl < thresholds.tau_ppl &&
        align_at_most(point.align_score, thresholds.align_degraded))
        return masked_scope == Component::lm ? CollapseLabel::expressive_degradation
                                             : CollapseLabel::perceptual_failure;
    return CollapseLabel::healthy;
}

std::string ScorerConfig::to_json() const {
    json j;
    j["embed_dim"] = embed_dim;
    j["tower_layers"] = tower_layers;
    j["epochs"] = epochs;
    j["lr"] = lr;
    j["seed"] = seed;
    return j.dump();
}

ScorerConfig ScorerConfig::from_json(const std::string& s) {
    json j = json::parse(s);
    ScorerConfig c;
    c.embed_dim = j.at("embed_dim");
    c.tower_layers = j.at("tower_layers");
    c.epochs = j.at("epochs");
    c.lr = j.at("lr");
    c.seed = j.at("seed");
    return c;
}

namespace {

Tensor rand_matrix(std::size_t r, std::size_t c, Rng& rng, double std) {
    Tensor t = Tensor::zeros(r, c);
    for (auto& v : t.data) v = rng.normal(0.0, std);
    return t;
}

Tensor const_vector(std::size_t n, double fill) {
    Tensor t = Tensor::zeros(n);
    for (auto& v : t.data) v = fill;
    return t;
}

} // namespace

AlignmentScorer::AlignmentScorer(const ModelConfig& model_cfg,
                                 const ScorerConfig& cfg)
    : model_cfg_(model_cfg), cfg_(cfg), tokenizer_(model_cfg.vocab_size) {
    Rng rng(cfg_.seed);
    const auto vd = model_cfg_.vision_dim;
    const auto vf = model_cfg_.vision_ffn_dim();
    const auto ed = cfg_.embed_dim;
    auto std_of = [](std::size_t fan) { return 1.0 / std::sqrt(static_cast<double>(fan)); };

    patch_w = rand_matrix(model_cfg_.patch_dim(), vd, rng, std_of(model_cfg_.patch_dim()));
    patch_b = const_vector(vd, 0.0);
    pos = rand_matrix(model_cfg_.num_patches(), vd, rng, 0.1);
    for (std::size_t l = 0; l < cfg_.tower_layers; ++l) {
        VisionLayer L;
        L.ln1_g = const_vector(vd, 1.0);
        L.ln1_b = const_vector(vd, 0.0);
        L.wq = rand_matrix(vd, vd, rng, std_of(vd));
        L.bq = const_vector(vd, 0.0);
        L.wk = rand_matrix(vd, vd, rng, std_of(vd));
        L.bk = const_vector(vd, 0.0);
        L.wv = rand_matrix(vd, vd, rng, std_of(vd));
        L.bv = const_vector(vd, 0.0);
        L.wo = rand_matrix(vd, vd, rng, std_of(vd));
        L.bo = const_vector(vd, 0.0);
        L.ln2_g = const_vector(vd, 1.0);
        L.ln2_b = const_vector(vd, 0.0);
        L.w1 = rand_matrix(vd, vf, rng, std_of(vd));
        L.b1 = const_vector(vf, 0.0);
        L.w2 = rand_matrix(vf, vd, rng, std_of(vf));
        L.b2 = const_vector(vd, 0.0);
        layers.push_back(std::move(L));
    }
    ln_g = const_vector(vd, 1.0);
    ln_b = const_vector(vd, 0.0);
    img_head_w = rand_matrix(vd, ed, rng, std_of(vd));
    img_head_b = const_vector(ed, 0.0);
    txt_table = rand_matrix(model_cfg_.vocab_size, ed, rng, 0.1);
    txt_head_w = rand_matrix(ed, ed, rng, std_of(ed));
    txt_head_b = const_vector(ed, 0.0);
}

void AlignmentScorer::for_each_param(
    const std::function<void(const std::string&, Tensor&)>& fn) {
    fn("patch_w", patch_w);
    fn("patch_b", patch_b);
    fn("pos", pos);
    for (std::size_t l = 0; l < layers.size(); ++l) {
        auto& L = layers[l];
        const std::string p = "tower." + std::to_string(l) + ".";
        fn(p + "ln1_g", L.ln1_g); fn(p + "ln1_b", L.ln1_b);
        fn(p + "wq", L.wq); fn(p + "bq", L.bq);
        fn(p + "wk", L.wk); fn(p + "bk", L.bk);
        fn(p + "wv", L.wv); fn(p + "bv", L.bv);
        fn(p + "wo", L.wo); fn(p + "bo", L.bo);
        fn(p + "ln2_g", L.ln2_g); fn(p + "ln2_b", L.ln2_b);
        fn(p + "w1", L.w1); fn(p + "b1", L.b1);
        fn(p + "w2", L.w2); fn(p + "b2", L.b2);
    }
    fn("ln_g", ln_g); fn("ln_b", ln_b);
    fn("img_head_w", img_head_w); fn("img_head_b", img_head_b);
    fn("txt_table", txt_table);
    fn("txt_head_w", txt_head_w); fn("txt_head_b", txt_head_b);
}

NodeId AlignmentScorer::build_image_tower(Graph& g,
                                          const std::vector<double>& pixels,
                                          const ParamFn& param) const {
    const std::size_t P = model_cfg_.num_patches();
    const std::size_t ps = model_cfg_.patch_size;
    const std::size_t sz = model_cfg_.image_size;
    if (pixels.size() != sz * sz * 3)
        throw InputError("scorer: pixel buffer size mismatch");
    Tensor patches = Tensor::zeros(P, model_cfg_.patch_dim());
    const std::size_t grid = sz / ps;
    std::size_t o = 0;
    for (std::size_t py = 0; py < grid; ++py)
        for (std::size_t px = 0; px < grid; ++px)
            for (std::size_t y = 0; y < ps; ++y)
                for (std::size_t x = 0; x < ps; ++x) {
                    const std::size_t src = ((py * ps + y) * sz + px * ps + x) * 3;
                    patches.data[o++] = pixels[src];
                    patches.data[o++] = pixels[src + 1];
                    patches.data[o++] = pixels[src + 2];
                }
    NodeId h = g.affine(g.input(std::move(patches)), param("patch_w", patch_w),
                        param("patch_b", patch_b));
    {
        std::vector<int> ids(P);
        for (std::size_t i = 0; i < P; ++i) ids[i] = static_cast<int>(i);
        h = g.add(h, g.embedding(param("pos", pos), ids));
    }
    for (std::size_t l = 0; l < layers.size(); ++l) {
        const auto& L = layers[l];
        const std::string p = "tower." + std::to_string(l) + ".";
        NodeId x = g.layer_norm(h, param(p + "ln1_g", L.ln1_g),
                                param(p + "ln1_b", L.ln1_b));
        NodeId q = g.affine(x, param(p + "wq", L.wq), param(p + "bq", L.bq));
        NodeId k = g.affine(x, param(p + "wk", L.wk), param(p + "bk", L.bk));
        NodeId v = g.affine(x, param(p + "wv", L.wv), param(p + "bv", L.bv));
        NodeId s = g.scale(g.matmul(q, g.transpose(k)),
                           1.0 / std::sqrt(static_cast<double>(model_cfg_.vision_dim)));
        NodeId a = g.softmax_rows(s);
        h = g.add(h, g.affine(g.matmul(a, v), param(p + "wo", L.wo),
                              param(p + "bo", L.bo)));
        NodeId xn = g.layer_norm(h, param(p + "ln2_g", L.ln2_g),
                                 param(p + "ln2_b", L.ln2_b));
        NodeId hid = g.silu(g.affine(xn, param(p + "w1", L.w1), param(p + "b1", L.b1)));
        h = g.add(h, g.affine(hid, param(p + "w2", L.w2), param(p + "b2", L.b2)));
    }
    h = g.layer_norm(h, param("ln_g", ln_g), param("ln_b", ln_b));
    NodeId pooled = g.mean_rows(h);
    NodeId emb = g.affine(pooled, param("img_head_w", img_head_w),
                          param("img_head_b", img_head_b));
    return g.normalize_rows(emb);
}

NodeId AlignmentScorer::build_text_tower(Graph& g, const std::vector<int>& ids,
                                         const ParamFn& param) const {
    NodeId emb = g.embedding(param("txt_table", txt_table), ids);
    NodeId pooled = g.mean_rows(emb);
    NodeId out = g.affine(pooled, param("txt_head_w", txt_head_w),
                          param("txt_head_b", txt_head_b));
    return g.normalize_rows(out);
}

namespace {

// Corrupted-caption negatives keep the scorer from crediting degenerate word
// bags that merely contain category vocabulary.
std::string corrupt_caption(const std::string& caption, Rng& rng) {
    std::vector<std::string> colors, shapes;
    for (const auto& c : categories()) {
        colors.push_back(c.color);
        shapes.push_back(c.shape);
    }
    std::vector<std::string> words;
    {
        std::stringstream ss(caption);
        std::string w;
        while (ss >> w) words.push_back(w);
    }
    switch (rng.uniform_int(4)) {
        case 0: // wrong color
            if (words.size() == 3) words[1] = colors[rng.uniform_int(colors.size())];
            break;
        case 1: // wrong shape
            if (words.size() == 3) words[2] = shapes[rng.uniform_int(shapes.size())];
            break;
        case 2: { // true caption with junk appended
            words.push_back(rng.uniform() < 0.5
                                ? colors[rng.uniform_int(colors.size())]
                                : shapes[rng.uniform_int(shapes.size())]);
            break;
        }
        default: { // random word bag
            words.clear();
            const std::size_t n = 1 + rng.uniform_int(3);
            for (std::size_t i = 0; i < n; ++i)
                words.push_back(rng.uniform() < 0.5
                                    ? colors[rng.uniform_int(colors.size())]
                                    : shapes[rng.uniform_int(shapes.size())]);
            break;
        }
    }
    std::string out;
    for (std::size_t i = 0; i < words.size(); ++i) {
        if (i) out += " ";
        out += words[i];
    }
    return out;
}

} // namespace

void AlignmentScorer::fit(const std::vector<SyntheticSample>& samples) {
    if (samples.empty()) throw InputError("scorer: empty training set");
    std::map<std::string, std::vector<double>> m_state, v_state;
    for_each_param([&](const std::string& name, Tensor& t) {
        m_state[name].assign(t.data.size(), 0.0);
        v_state[name].assign(t.data.size(), 0.0);
    });
    const double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    const double inv_temp = 10.0;
    long step = 0;

    Rng rng(cfg_.seed + 17);
    std::vector<std::size_t> order(samples.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    const std::size_t batch = 10;

    for (int epoch = 0; epoch < cfg_.epochs; ++epoch) {
        rng.shuffle(order);
        for (std::size_t b0 = 0; b0 + batch <= order.size(); b0 += batch) {
            Graph g;
            std::map<std::string, NodeId> params;
            ParamFn param = [&](const std::string& name, const Tensor& t) {
                auto it = params.find(name);
                if (it != params.end()) return it->second;
                Tensor copy = t;
                copy.requires_grad = true;
                const NodeId id = g.input(std::move(copy));
                params[name] = id;
                return id;
            };
            const std::size_t n_neg = 5;
            NodeId zi = -1, zt = -1;
            for (std::size_t bi = 0; bi < batch; ++bi) {
                const auto& s = samples[order[b0 + bi]];
                NodeId ei = build_image_tower(g, s.pixels, param);
                NodeId et = build_text_tower(g, tokenizer_.encode(s.caption), param);
                zi = (bi == 0) ? ei : g.concat_rows(zi, ei);
                zt = (bi == 0) ? et : g.concat_rows(zt, et);
            }
            for (std::size_t ni = 0; ni < n_neg; ++ni) {
                const auto& s = samples[order[b0 + ni % batch]];
                const std::string neg = corrupt_caption(s.caption, rng);
                zt = g.concat_rows(zt, build_text_tower(g, tokenizer_.encode(neg),
                                                        param));
            }
            // batch x (batch + n_neg); the extra columns are negatives only
            NodeId logits = g.scale(g.matmul(zi, g.transpose(zt)), inv_temp);
            std::vector<int> diag(batch);
            std::vector<double> w(batch, 1.0);
            for (std::size_t i = 0; i < batch; ++i) diag[i] = static_cast<int>(i);
            NodeId loss_i2t = g.cross_entropy(logits, diag, w);
            std::vector<int> diag_t(batch + n_neg, 0);
            std::vector<double> w_t(batch + n_neg, 0.0);
            for (std::size_t i = 0; i < batch; ++i) {
                diag_t[i] = static_cast<int>(i);
                w_t[i] = 1.0;
            }
            NodeId loss_t2i = g.cross_entropy(g.transpose(logits), diag_t, w_t);
            NodeId loss = g.scale(g.add(loss_i2t, loss_t2i), 0.5);
            g.backward(loss);

            ++step;
            const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(step));
            const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(step));
            for_each_param([&](const std::string& name, Tensor& t) {
                auto it = params.find(name);
                if (it == params.end()) return;
                const Tensor& gr = g.grad(it->second);
                auto& m = m_state[name];
                auto& v = v_state[name];
                for (std::size_t i = 0; i < t.data.size(); ++i) {
                    m[i] = beta1 * m[i] + (1.0 - beta1) * gr.data[i];
                    v[i] = beta2 * v[i] + (1.0 - beta2) * gr.data[i] * gr.data[i];
                    t.data[i] -= cfg_.lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + eps);
                }
            });
        }
    }
}

std::vector<double> AlignmentScorer::embed_image(
    const std::vector<double>& pixels) const {
    Graph g;
    ParamFn param = [&g](const std::string&, const Tensor& t) { return g.input(t); };
    const NodeId e = build_image_tower(g, pixels, param);
    return g.value(e).data;
}

std::vector<double> AlignmentScorer::embed_text(const std::vector<int>& ids) const {
    Graph g;
    ParamFn param = [&g](const std::string&, const Tensor& t) { return g.input(t); };
    const NodeId e = build_text_tower(g, ids, param);
    return g.value(e).data;
}

std::optional<double> AlignmentScorer::score(const std::vector<double>& pixels,
                                             const std::string& text) const {
    const auto ids = tokenizer_.encode(text);
    if (ids.empty()) return std::nullopt;
    const auto zi = embed_image(pixels);
    const auto zt = embed_text(ids);
    double dot = 0.0;
    for (std::size_t i = 0; i < zi.size(); ++i) dot += zi[i] * zt[i];
    return 100.0 * dot;
}

std::string AlignmentScorer::weights_hash() const {
    Fnv1a h;
    const_cast<AlignmentScorer*>(this)->for_each_param(
        [&](const std::string& name, Tensor& t) {
            h.update(name);
            h.update(t.data.data(), t.data.size() * sizeof(double));
        });
    return h.hex();
}

void AlignmentScorer::save(const std::filesystem::path& file) const {
    std::ofstream out(file, std::ios::binary);
    if (!out) throw InputError("cannot write scorer " + file.string());
    const std::string header = "CANLAB_SCORER v1\n" + model_cfg_.to_json() + "\n" +
                               cfg_.to_json() + "\n";
    out.write(header.data(), static_cast<long>(header.size()));
    const_cast<AlignmentScorer*>(this)->for_each_param(
        [&](const std::string& name, Tensor& t) {
            const auto nlen = static_cast<std::uint32_t>(name.size());
            const std::uint64_t dlen = t.data.size();
            out.write(reinterpret_cast<const char*>(&nlen), sizeof nlen);
            out.write(name.data(), nlen);
            out.write(reinterpret_cast<const char*>(&dlen), sizeof dlen);
            out.write(reinterpret_cast<const char*>(t.data.data()),
                      static_cast<long>(dlen * sizeof(double)));
        });
    const std::string hash = weights_hash();
    out.write(hash.data(), static_cast<long>(hash.size()));
}

AlignmentScorer AlignmentScorer::load(const std::filesystem::path& file) {
    std::ifstream in(file, std::ios::binary);
    if (!in) throw DependencyError("missing scorer " + file.string());
    std::string magic, model_line, cfg_line;
    std::getline(in, magic);
    if (magic != "CANLAB_SCORER v1")
        throw InputError("bad scorer magic in " + file.string());
    std::getline(in, model_line);
    std::getline(in, cfg_line);
    AlignmentScorer sc(ModelConfig::from_json(model_line),
                       ScorerConfig::from_json(cfg_line));
    sc.for_each_param([&](const std::string& name, Tensor& t) {
        std::uint32_t nlen = 0;
        std::uint64_t dlen = 0;
        in.read(reinterpret_cast<char*>(&nlen), sizeof nlen);
        std::string got(nlen, '\0');
        in.read(got.data(), nlen);
        in.read(reinterpret_cast<char*>(&dlen), sizeof dlen);
        if (!in || got != name || dlen != t.data.size())
            throw InputError("scorer layout mismatch at " + name);
        in.read(reinterpret_cast<char*>(t.data.data()),
                static_cast<long>(dlen * sizeof(double)));
    });
    std::string hash(16, '\0');
    in.read(hash.data(), 16);
    if (!in || hash != sc.weights_hash())
        throw ProvenanceError("scorer content hash mismatch in " + file.string());
    return sc;
}

double chance_baseline(const AlignmentScorer& scorer,
                       const std::vector<SyntheticSample>& samples,
                       std::size_t n_pairs, std::uint64_t seed) {
    if (samples.empty()) throw InputError("chance_baseline: empty sample set");
    Rng rng(seed);
    double acc = 0.0;
    for (std::size_t i = 0; i < n_pairs; ++i) {
        const auto& img = samples[rng.uniform_int(samples.size())];
        const auto& txt = samples[rng.uniform_int(samples.size())];
        acc += scorer.score(img.pixels, txt.caption).value_or(0.0);
    }
    return acc / static_cast<double>(n_pairs);
}

} // namespace canlab
