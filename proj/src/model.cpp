#include "canlab/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "json.hpp"

#include "canlab/hash.hpp"
#include "canlab/rng.hpp"

namespace canlab {

namespace {

using json = nlohmann::json;

// Per-layer masked channels for one forward pass, resolved once from the
// MaskSet. qformer addresses alias the projector (same masking semantics).
struct MaskChannels {
    std::vector<std::vector<std::size_t>> vis_mlp;   // [vision layer]
    std::vector<std::size_t> proj_mlp;
    std::vector<std::vector<std::size_t>> lm_gate;   // [lm layer]
    std::vector<std::vector<std::size_t>> lm_down;   // [lm layer]
};

MaskChannels resolve_mask(const MaskSet& mask, const ModelConfig& cfg) {
    MaskChannels mc;
    mc.vis_mlp.resize(cfg.vision_layers);
    mc.lm_gate.resize(cfg.lm_layers);
    mc.lm_down.resize(cfg.lm_layers);
    for (const auto& n : mask.ids) {
        const auto layer = static_cast<std::size_t>(n.layer);
        const auto ch = static_cast<std::size_t>(n.channel);
        switch (n.component) {
            case Component::vision_encoder:
                if (n.site != Site::mlp_out || layer >= cfg.vision_layers ||
                    ch >= cfg.vision_ffn_dim())
                    throw AddressError("mask id out of range: " + n.str());
                mc.vis_mlp[layer].push_back(ch);
                break;
            case Component::projector:
            case Component::qformer:
                if (n.site != Site::mlp_out || layer != 0 || ch >= cfg.projector_dim)
                    throw AddressError("mask id out of range: " + n.str());
                mc.proj_mlp.push_back(ch);
                break;
            case Component::lm:
                if (layer >= cfg.lm_layers)
                    throw AddressError("mask id out of range: " + n.str());
                if (n.site == Site::gate_out && ch < cfg.ffn_dim)
                    mc.lm_gate[layer].push_back(ch);
                else if (n.site == Site::down_out && ch < cfg.lm_dim)
                    mc.lm_down[layer].push_back(ch);
                else
                    throw AddressError("mask id out of range: " + n.str());
                break;
        }
    }
    return mc;
}

Tensor make_matrix(std::size_t r, std::size_t c, Rng& rng, double std) {
    Tensor t = Tensor::zeros(r, c);
    for (auto& v : t.data) v = rng.normal(0.0, std);
    return t;
}

Tensor make_vector(std::size_t n, double fill) {
    Tensor t = Tensor::zeros(n);
    for (auto& v : t.data) v = fill;
    return t;
}

std::vector<double> log_softmax_row(const Tensor& logits, std::size_t row) {
    const std::size_t c = logits.cols();
    const double* x = &logits.data[row * c];
    double mx = x[0];
    for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, x[j]);
    double sum = 0.0;
    for (std::size_t j = 0; j < c; ++j) sum += std::exp(x[j] - mx);
    const double lse = mx + std::log(sum);
    std::vector<double> out(c);
    for (std::size_t j = 0; j < c; ++j) out[j] = x[j] - lse;
    return out;
}

constexpr double kLogProbClamp = -27.631021115928547; // log(1e-12)

} // namespace

void ModelConfig::validate() const {
    if (image_size == 0 || patch_size == 0 || image_size % patch_size != 0)
        throw ConfigError("image_size must be a positive multiple of patch_size");
    if (ffn_dim <= lm_dim)
        throw ConfigError("ffn_dim must exceed lm_dim (expansion then reduction)");
    if (vision_layers == 0 || lm_layers == 0 || vision_dim == 0 || lm_dim == 0 ||
        projector_dim == 0 || vocab_size == 0 || max_seq_len == 0)
        throw ConfigError("all model dimensions must be positive");
}

std::string ModelConfig::to_json() const {
    json j;
    j["image_size"] = image_size;
    j["patch_size"] = patch_size;
    j["vision_layers"] = vision_layers;
    j["vision_dim"] = vision_dim;
    j["projector_dim"] = projector_dim;
    j["lm_layers"] = lm_layers;
    j["lm_dim"] = lm_dim;
    j["ffn_dim"] = ffn_dim;
    j["vocab_size"] = vocab_size;
    j["max_seq_len"] = max_seq_len;
    j["seed"] = seed;
    return j.dump();
}

ModelConfig ModelConfig::from_json(const std::string& s) {
    json j = json::parse(s);
    ModelConfig c;
    c.image_size = j.at("image_size");
    c.patch_size = j.at("patch_size");
    c.vision_layers = j.at("vision_layers");
    c.vision_dim = j.at("vision_dim");
    c.projector_dim = j.at("projector_dim");
    c.lm_layers = j.at("lm_layers");
    c.lm_dim = j.at("lm_dim");
    c.ffn_dim = j.at("ffn_dim");
    c.vocab_size = j.at("vocab_size");
    c.max_seq_len = j.at("max_seq_len");
    c.seed = j.at("seed");
    c.validate();
    return c;
}

ToyLVLM::ToyLVLM(const ModelConfig& cfg) : cfg_(cfg), tokenizer_(cfg.vocab_size) {
    cfg_.validate();
    init_weights();
}

void ToyLVLM::init_weights() {
    Rng rng(cfg_.seed);
    const auto vd = cfg_.vision_dim;
    const auto vf = cfg_.vision_ffn_dim();
    const auto ld = cfg_.lm_dim;
    const auto fd = cfg_.ffn_dim;

    auto proj_std = [](std::size_t fan_in) { return 1.0 / std::sqrt(static_cast<double>(fan_in)); };

    patch_w = make_matrix(cfg_.patch_dim(), vd, rng, proj_std(cfg_.patch_dim()));
    patch_b = make_vector(vd, 0.0);
    vis_pos = make_matrix(cfg_.num_patches(), vd, rng, 0.1);
    vis_layers.clear();
    for (std::size_t l = 0; l < cfg_.vision_layers; ++l) {
        VisionLayer L;
        L.ln1_g = make_vector(vd, 1.0);
        L.ln1_b = make_vector(vd, 0.0);
        L.wq = make_matrix(vd, vd, rng, proj_std(vd));
        L.bq = make_vector(vd, 0.0);
        L.wk = make_matrix(vd, vd, rng, proj_std(vd));
        L.bk = make_vector(vd, 0.0);
        L.wv = make_matrix(vd, vd, rng, proj_std(vd));
        L.bv = make_vector(vd, 0.0);
        L.wo = make_matrix(vd, vd, rng, proj_std(vd));
        L.bo = make_vector(vd, 0.0);
        L.ln2_g = make_vector(vd, 1.0);
        L.ln2_b = make_vector(vd, 0.0);
        L.w1 = make_matrix(vd, vf, rng, proj_std(vd));
        L.b1 = make_vector(vf, 0.0);
        L.w2 = make_matrix(vf, vd, rng, proj_std(vf));
        L.b2 = make_vector(vd, 0.0);
        vis_layers.push_back(std::move(L));
    }
    vis_ln_g = make_vector(vd, 1.0);
    vis_ln_b = make_vector(vd, 0.0);

    proj_w1 = make_matrix(vd, cfg_.projector_dim, rng, proj_std(vd));
    proj_b1 = make_vector(cfg_.projector_dim, 0.0);
    proj_w2 = make_matrix(cfg_.projector_dim, ld, rng, proj_std(cfg_.projector_dim));
    proj_b2 = make_vector(ld, 0.0);

    tok_table = make_matrix(cfg_.vocab_size, ld, rng, 0.02);
    pos_table = make_matrix(cfg_.max_seq_len, ld, rng, 0.02);
    lm_layers.clear();
    for (std::size_t l = 0; l < cfg_.lm_layers; ++l) {
        LmLayer L;
        L.ln1_g = make_vector(ld, 1.0);
        L.ln1_b = make_vector(ld, 0.0);
        L.wq = make_matrix(ld, ld, rng, proj_std(ld));
        L.bq = make_vector(ld, 0.0);
        L.wk = make_matrix(ld, ld, rng, proj_std(ld));
        L.bk = make_vector(ld, 0.0);
        L.wv = make_matrix(ld, ld, rng, proj_std(ld));
        L.bv = make_vector(ld, 0.0);
        L.wo = make_matrix(ld, ld, rng, proj_std(ld));
        L.bo = make_vector(ld, 0.0);
        L.ln2_g = make_vector(ld, 1.0);
        L.ln2_b = make_vector(ld, 0.0);
        L.w_gate = make_matrix(ld, fd, rng, proj_std(ld));
        L.w_up = make_matrix(ld, fd, rng, proj_std(ld));
        L.w_down = make_matrix(fd, ld, rng, proj_std(fd));
        lm_layers.push_back(std::move(L));
    }
    fin_ln_g = make_vector(ld, 1.0);
    fin_ln_b = make_vector(ld, 0.0);
    w_out = make_matrix(ld, cfg_.vocab_size, rng, proj_std(ld));
    b_out = make_vector(cfg_.vocab_size, 0.0);
}

void ToyLVLM::for_each_param(
    const std::function<void(const std::string&, Tensor&)>& fn) {
    fn("patch_w", patch_w);
    fn("patch_b", patch_b);
    fn("vis_pos", vis_pos);
    for (std::size_t l = 0; l < vis_layers.size(); ++l) {
        auto& L = vis_layers[l];
        const std::string p = "vis." + std::to_string(l) + ".";
        fn(p + "ln1_g", L.ln1_g); fn(p + "ln1_b", L.ln1_b);
        fn(p + "wq", L.wq); fn(p + "bq", L.bq);
        fn(p + "wk", L.wk); fn(p + "bk", L.bk);
        fn(p + "wv", L.wv); fn(p + "bv", L.bv);
        fn(p + "wo", L.wo); fn(p + "bo", L.bo);
        fn(p + "ln2_g", L.ln2_g); fn(p + "ln2_b", L.ln2_b);
        fn(p + "w1", L.w1); fn(p + "b1", L.b1);
        fn(p + "w2", L.w2); fn(p + "b2", L.b2);
    }
    fn("vis_ln_g", vis_ln_g);
    fn("vis_ln_b", vis_ln_b);
    fn("proj_w1", proj_w1); fn("proj_b1", proj_b1);
    fn("proj_w2", proj_w2); fn("proj_b2", proj_b2);
    fn("tok_table", tok_table);
    fn("pos_table", pos_table);
    for (std::size_t l = 0; l < lm_layers.size(); ++l) {
        auto& L = lm_layers[l];
        const std::string p = "lm." + std::to_string(l) + ".";
        fn(p + "ln1_g", L.ln1_g); fn(p + "ln1_b", L.ln1_b);
        fn(p + "wq", L.wq); fn(p + "bq", L.bq);
        fn(p + "wk", L.wk); fn(p + "bk", L.bk);
        fn(p + "wv", L.wv); fn(p + "bv", L.bv);
        fn(p + "wo", L.wo); fn(p + "bo", L.bo);
        fn(p + "ln2_g", L.ln2_g); fn(p + "ln2_b", L.ln2_b);
        fn(p + "w_gate", L.w_gate);
        fn(p + "w_up", L.w_up);
        fn(p + "w_down", L.w_down);
    }
    fn("fin_ln_g", fin_ln_g);
    fn("fin_ln_b", fin_ln_b);
    fn("w_out", w_out);
    fn("b_out", b_out);
}

void ToyLVLM::for_each_param(
    const std::function<void(const std::string&, const Tensor&)>& fn) const {
    const_cast<ToyLVLM*>(this)->for_each_param(
        [&](const std::string& name, Tensor& t) { fn(name, t); });
}

std::vector<double> ToyLVLM::patchify(const std::vector<double>& pixels) const {
    const std::size_t sz = cfg_.image_size, ps = cfg_.patch_size;
    if (pixels.size() != sz * sz * 3)
        throw InputError("pixel buffer size " + std::to_string(pixels.size()) +
                         " does not match image_size " + std::to_string(sz));
    const std::size_t grid = sz / ps;
    std::vector<double> out(cfg_.num_patches() * cfg_.patch_dim());
    std::size_t o = 0;
    for (std::size_t py = 0; py < grid; ++py)
        for (std::size_t px = 0; px < grid; ++px)
            for (std::size_t y = 0; y < ps; ++y)
                for (std::size_t x = 0; x < ps; ++x) {
                    const std::size_t src = ((py * ps + y) * sz + px * ps + x) * 3;
                    out[o++] = pixels[src];
                    out[o++] = pixels[src + 1];
                    out[o++] = pixels[src + 2];
                }
    return out;
}

namespace {

NodeId attention_block(Graph& g, NodeId h, NodeId ln_g, NodeId ln_b, NodeId wq,
                       NodeId bq, NodeId wk, NodeId bk, NodeId wv, NodeId bv,
                       NodeId wo, NodeId bo, std::size_t dim, bool causal,
                       std::size_t seq) {
    NodeId x = g.layer_norm(h, ln_g, ln_b);
    NodeId q = g.affine(x, wq, bq);
    NodeId k = g.affine(x, wk, bk);
    NodeId v = g.affine(x, wv, bv);
    NodeId s = g.scale(g.matmul(q, g.transpose(k)),
                       1.0 / std::sqrt(static_cast<double>(dim)));
    if (causal) {
        Tensor m = Tensor::zeros(seq, seq);
        for (std::size_t i = 0; i < seq; ++i)
            for (std::size_t j = i + 1; j < seq; ++j) m.at(i, j) = -1e9;
        s = g.add(s, g.input(std::move(m)));
    }
    NodeId a = g.softmax_rows(s);
    NodeId o = g.affine(g.matmul(a, v), wo, bo);
    return g.add(h, o);
}

} // namespace

ForwardResult ToyLVLM::build_forward(Graph& g, const std::vector<double>& pixels,
                                     const std::vector<int>& text_ids,
                                     const MaskSet& mask) const {
    std::map<std::string, NodeId> unused;
    ParamFn param = [&g](const std::string&, const Tensor& t) {
        return g.input(t);
    };
    // shared builder lives below in build_impl
    return const_cast<ToyLVLM*>(this)->build_impl(g, pixels, text_ids, mask,
                                                  param, nullptr);
}

ForwardResult ToyLVLM::build_forward_trainable(
    Graph& g, const std::vector<double>& pixels, const std::vector<int>& text_ids,
    const MaskSet& mask, std::map<std::string, NodeId>& param_nodes) {
    ParamFn param = [&g, &param_nodes](const std::string& name, const Tensor& t) {
        Tensor copy = t;
        copy.requires_grad = true;
        const NodeId id = g.input(std::move(copy));
        param_nodes[name] = id;
        return id;
    };
    return build_impl(g, pixels, text_ids, mask, param, &param_nodes);
}

ForwardResult ToyLVLM::build_impl(Graph& g, const std::vector<double>& pixels,
                                  const std::vector<int>& text_ids,
                                  const MaskSet& mask, const ParamFn& param,
                                  std::map<std::string, NodeId>*) {
    const MaskChannels mc = resolve_mask(mask, cfg_);
    const std::size_t P = cfg_.num_patches();
    const std::size_t seq = P + text_ids.size();
    if (seq > cfg_.max_seq_len)
        throw InputError("sequence length " + std::to_string(seq) +
                         " exceeds max_seq_len " + std::to_string(cfg_.max_seq_len));

    ForwardResult res;
    res.seq_len = seq;

    // vision encoder
    Tensor patches = Tensor::zeros(P, cfg_.patch_dim());
    patches.data = patchify(pixels);
    NodeId h = g.affine(g.input(std::move(patches)), param("patch_w", patch_w),
                        param("patch_b", patch_b));
    {
        std::vector<int> pos_ids(P);
        for (std::size_t i = 0; i < P; ++i) pos_ids[i] = static_cast<int>(i);
        h = g.add(h, g.embedding(param("vis_pos", vis_pos), pos_ids));
    }
    for (std::size_t l = 0; l < cfg_.vision_layers; ++l) {
        const auto& L = vis_layers[l];
        const std::string p = "vis." + std::to_string(l) + ".";
        h = attention_block(g, h, param(p + "ln1_g", L.ln1_g),
                            param(p + "ln1_b", L.ln1_b), param(p + "wq", L.wq),
                            param(p + "bq", L.bq), param(p + "wk", L.wk),
                            param(p + "bk", L.bk), param(p + "wv", L.wv),
                            param(p + "bv", L.bv), param(p + "wo", L.wo),
                            param(p + "bo", L.bo), cfg_.vision_dim, false, P);
        NodeId x = g.layer_norm(h, param(p + "ln2_g", L.ln2_g),
                                param(p + "ln2_b", L.ln2_b));
        NodeId hid = g.silu(g.affine(x, param(p + "w1", L.w1), param(p + "b1", L.b1)));
        NodeId tap = g.zero_channels(hid, mc.vis_mlp[l]);
        res.taps[{Component::vision_encoder, static_cast<int>(l), Site::mlp_out}] = tap;
        h = g.add(h, g.affine(tap, param(p + "w2", L.w2), param(p + "b2", L.b2)));
    }
    h = g.layer_norm(h, param("vis_ln_g", vis_ln_g), param("vis_ln_b", vis_ln_b));

    // projector
    NodeId phid = g.silu(g.affine(h, param("proj_w1", proj_w1),
                                  param("proj_b1", proj_b1)));
    NodeId ptap = g.zero_channels(phid, mc.proj_mlp);
    res.taps[{Component::projector, 0, Site::mlp_out}] = ptap;
    NodeId img_emb = g.affine(ptap, param("proj_w2", proj_w2),
                              param("proj_b2", proj_b2));

    // language model over [image tokens][text tokens]
    NodeId tok = g.embedding(param("tok_table", tok_table), text_ids);
    NodeId x = g.concat_rows(img_emb, tok);
    {
        std::vector<int> pos_ids(seq);
        for (std::size_t i = 0; i < seq; ++i) pos_ids[i] = static_cast<int>(i);
        x = g.add(x, g.embedding(param("pos_table", pos_table), pos_ids));
    }
    for (std::size_t l = 0; l < cfg_.lm_layers; ++l) {
        const auto& L = lm_layers[l];
        const std::string p = "lm." + std::to_string(l) + ".";
        x = attention_block(g, x, param(p + "ln1_g", L.ln1_g),
                            param(p + "ln1_b", L.ln1_b), param(p + "wq", L.wq),
                            param(p + "bq", L.bq), param(p + "wk", L.wk),
                            param(p + "bk", L.bk), param(p + "wv", L.wv),
                            param(p + "bv", L.bv), param(p + "wo", L.wo),
                            param(p + "bo", L.bo), cfg_.lm_dim, true, seq);
        NodeId xn = g.layer_norm(x, param(p + "ln2_g", L.ln2_g),
                                 param(p + "ln2_b", L.ln2_b));
        NodeId gate = g.matmul(xn, param(p + "w_gate", L.w_gate));
        NodeId gtap = g.zero_channels(gate, mc.lm_gate[l]);
        res.taps[{Component::lm, static_cast<int>(l), Site::gate_out}] = gtap;
        NodeId up = g.matmul(xn, param(p + "w_up", L.w_up));
        NodeId mid = g.mul(g.silu(gtap), up);
        NodeId down = g.matmul(mid, param(p + "w_down", L.w_down));
        NodeId dtap = g.zero_channels(down, mc.lm_down[l]);
        res.taps[{Component::lm, static_cast<int>(l), Site::down_out}] = dtap;
        x = g.add(x, dtap);
        res.lm_hidden.push_back(x);
    }
    x = g.layer_norm(x, param("fin_ln_g", fin_ln_g), param("fin_ln_b", fin_ln_b));
    res.logits = g.affine(x, param("w_out", w_out), param("b_out", b_out));
    return res;
}

GenerationTrace ToyLVLM::generate_greedy(const std::vector<double>& pixels,
                                         const std::string& prompt,
                                         const MaskSet& mask,
                                         std::size_t max_len) const {
    if (max_len < 1) throw InputError("max_len must be >= 1");
    std::vector<int> text = {Tokenizer::kBos};
    const auto prompt_ids = tokenizer_.encode(prompt);
    text.insert(text.end(), prompt_ids.begin(), prompt_ids.end());

    GenerationTrace trace;
    const std::size_t P = cfg_.num_patches();
    while (trace.token_ids.size() < max_len &&
           P + text.size() < cfg_.max_seq_len) {
        Graph g;
        ForwardResult fr = build_forward(g, pixels, text, mask);
        const Tensor& logits = g.value(fr.logits);
        const auto logp = log_softmax_row(logits, fr.seq_len - 1);
        std::size_t best = 0;
        for (std::size_t j = 1; j < logp.size(); ++j)
            if (logp[j] > logp[best]) best = j;
        trace.token_ids.push_back(static_cast<int>(best));
        trace.logprobs.push_back(logp[best]);
        text.push_back(static_cast<int>(best));
        if (static_cast<int>(best) == Tokenizer::kEos) break;
    }
    trace.text = tokenizer_.decode(trace.token_ids);
    return trace;
}

std::vector<double> ToyLVLM::teacher_forced_logprobs(
    const std::vector<double>& pixels, const std::string& prompt,
    const std::vector<int>& reference, const MaskSet& mask) const {
    if (reference.empty()) throw InputError("reference trace is empty");
    std::vector<int> text = {Tokenizer::kBos};
    const auto prompt_ids = tokenizer_.encode(prompt);
    text.insert(text.end(), prompt_ids.begin(), prompt_ids.end());
    const std::size_t prefix = text.size();
    text.insert(text.end(), reference.begin(), reference.end());

    Graph g;
    ForwardResult fr = build_forward(g, pixels, text, mask);
    const Tensor& logits = g.value(fr.logits);
    const std::size_t P = cfg_.num_patches();
    std::vector<double> out;
    out.reserve(reference.size());
    for (std::size_t j = 0; j < reference.size(); ++j) {
        const std::size_t row = P + prefix + j - 1; // row predicting token j
        const auto logp = log_softmax_row(logits, row);
        out.push_back(std::max(logp[static_cast<std::size_t>(reference[j])],
                               kLogProbClamp));
    }
    return out;
}

std::string ToyLVLM::weights_hash() const {
    Fnv1a h;
    for_each_param([&](const std::string& name, const Tensor& t) {
        h.update(name);
        h.update(t.data.data(), t.data.size() * sizeof(double));
    });
    return h.hex();
}

void ToyLVLM::save(const std::filesystem::path& file) const {
    std::ofstream out(file, std::ios::binary);
    if (!out) throw InputError("cannot write checkpoint " + file.string());
    const std::string header = "CANLAB_CKPT v1\n" + cfg_.to_json() + "\n";
    out.write(header.data(), static_cast<long>(header.size()));
    for_each_param([&](const std::string& name, const Tensor& t) {
        const std::uint32_t nlen = static_cast<std::uint32_t>(name.size());
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

ToyLVLM ToyLVLM::load(const std::filesystem::path& file) {
    std::ifstream in(file, std::ios::binary);
    if (!in) throw DependencyError("missing checkpoint " + file.string());
    std::string magic, cfg_line;
    std::getline(in, magic);
    if (magic != "CANLAB_CKPT v1")
        throw InputError("bad checkpoint magic in " + file.string());
    std::getline(in, cfg_line);
    ToyLVLM model(ModelConfig::from_json(cfg_line));
    model.for_each_param([&](const std::string& name, Tensor& t) {
        std::uint32_t nlen = 0;
        std::uint64_t dlen = 0;
        in.read(reinterpret_cast<char*>(&nlen), sizeof nlen);
        std::string got(nlen, '\0');
        in.read(got.data(), nlen);
        in.read(reinterpret_cast<char*>(&dlen), sizeof dlen);
        if (!in || got != name || dlen != t.data.size())
            throw InputError("checkpoint layout mismatch at " + name);
        in.read(reinterpret_cast<char*>(t.data.data()),
                static_cast<long>(dlen * sizeof(double)));
    });
    std::string hash(16, '\0');
    in.read(hash.data(), 16);
    if (!in || hash != model.weights_hash())
        throw ProvenanceError("checkpoint content hash mismatch in " + file.string());
    return model;
}

TrainResult train(ToyLVLM& model, const std::vector<SyntheticSample>& dataset,
                  int epochs, double lr, std::uint64_t seed) {
    if (dataset.empty()) throw InputError("training dataset is empty");
    TrainResult result;
    if (epochs == 0) return result;

    const std::string prompt = "describe the object in this image";
    const auto prompt_ids = model.tokenizer().encode(prompt);
    const std::size_t P = model.config().num_patches();
    const MaskSet no_mask;

    // Adam state
    std::map<std::string, std::vector<double>> m_state, v_state;
    model.for_each_param([&](const std::string& name, Tensor& t) {
        m_state[name].assign(t.data.size(), 0.0);
        v_state[name].assign(t.data.size(), 0.0);
    });
    const double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    long step = 0;

    Rng rng(seed);
    std::vector<std::size_t> order(dataset.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    const std::size_t batch = 8;

    for (int epoch = 0; epoch < epochs; ++epoch) {
        const double lr_now =
            lr * (1.0 - 0.9 * static_cast<double>(epoch) / static_cast<double>(epochs));
        rng.shuffle(order);
        double epoch_loss = 0.0;
        for (std::size_t b0 = 0; b0 < order.size(); b0 += batch) {
            const std::size_t bn = std::min(batch, order.size() - b0);
            std::map<std::string, std::vector<double>> grad_acc;
            for (std::size_t bi = 0; bi < bn; ++bi) {
                const auto& s = dataset[order[b0 + bi]];
                std::vector<int> text = {Tokenizer::kBos};
                text.insert(text.end(), prompt_ids.begin(), prompt_ids.end());
                const auto cap_ids = model.tokenizer().encode(s.caption);
                const std::size_t cap_start = text.size();
                text.insert(text.end(), cap_ids.begin(), cap_ids.end());
                text.push_back(Tokenizer::kEos);

                Graph g;
                std::map<std::string, NodeId> params;
                ForwardResult fr;
                try {
                    fr = model.build_forward_trainable(g, s.pixels, text, no_mask,
                                                       params);
                } catch (const NumericError& e) {
                    throw TrainingError("divergence at epoch " +
                                        std::to_string(epoch) + ": " + e.what());
                }
                const std::size_t seq = fr.seq_len;
                std::vector<int> targets(seq, 0);
                std::vector<double> weights(seq, 0.0);
                for (std::size_t p = cap_start; p < text.size(); ++p) {
                    targets[P + p - 1] = text[p];
                    weights[P + p - 1] = 1.0;
                }
                const NodeId loss = g.cross_entropy(fr.logits, targets, weights);
                const double lv = g.value(loss).data[0];
                if (!std::isfinite(lv))
                    throw TrainingError("loss diverged at epoch " +
                                        std::to_string(epoch));
                epoch_loss += lv;
                g.backward(loss);
                for (const auto& [name, nid] : params) {
                    const Tensor& gr = g.grad(nid);
                    auto& acc = grad_acc[name];
                    if (acc.empty()) acc.assign(gr.data.size(), 0.0);
                    for (std::size_t i = 0; i < gr.data.size(); ++i)
                        acc[i] += gr.data[i];
                }
            }
            ++step;
            double gsq = 0.0;
            for (const auto& [name, gm] : grad_acc) {
                (void)name;
                for (double g : gm) gsq += (g / static_cast<double>(bn)) *
                                           (g / static_cast<double>(bn));
            }
            const double gnorm = std::sqrt(gsq);
            const double clip = gnorm > 5.0 ? 5.0 / gnorm : 1.0;
            const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(step));
            const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(step));
            model.for_each_param([&](const std::string& name, Tensor& t) {
                auto& gm = grad_acc[name];
                if (gm.empty()) return;
                auto& m = m_state[name];
                auto& v = v_state[name];
                for (std::size_t i = 0; i < t.data.size(); ++i) {
                    const double gval = clip * gm[i] / static_cast<double>(bn);
                    m[i] = beta1 * m[i] + (1.0 - beta1) * gval;
                    v[i] = beta2 * v[i] + (1.0 - beta2) * gval * gval;
                    t.data[i] -= lr_now * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + eps);
                }
            });
        }
        result.loss_curve.push_back(epoch_loss / static_cast<double>(order.size()));
    }
    return result;
}

double caption_accuracy(const ToyLVLM& model,
                        const std::vector<SyntheticSample>& samples,
                        const std::string& prompt, std::size_t max_len) {
    if (samples.empty()) throw InputError("accuracy set is empty");
    const MaskSet no_mask;
    std::size_t hits = 0;
    for (const auto& s : samples) {
        const auto trace = model.generate_greedy(s.pixels, prompt, no_mask, max_len);
        if (trace.text == s.caption) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(samples.size());
}

} // namespace canlab
