#include "oracle.hpp"

#include <algorithm>
#include <cmath>
#include <set>

namespace canlab::oracle {

namespace {

constexpr double kLnEps = 1e-5;
constexpr double kLogProbClamp = -27.631021115928547; // log(1e-12)

struct M {
    std::size_t r = 0, c = 0;
    std::vector<double> d;
};

M zeros(std::size_t r, std::size_t c) {
    M m;
    m.r = r;
    m.c = c;
    m.d.assign(r * c, 0.0);
    return m;
}

// The arithmetic below repeats the main path's accumulation orders on
// purpose: matching them operation for operation is what lets the
// bit-exactness checks assert strict equality.
M matmul(const M& a, const Tensor& w) {
    M out = zeros(a.r, w.cols());
    const std::size_t k = a.c, p = w.cols();
    for (std::size_t i = 0; i < a.r; ++i)
        for (std::size_t j = 0; j < p; ++j) {
            double acc = 0.0;
            for (std::size_t t = 0; t < k; ++t) acc += a.d[i * k + t] * w.data[t * p + j];
            out.d[i * p + j] = acc;
        }
    return out;
}

M matmul_mm(const M& a, const M& b) {
    M out = zeros(a.r, b.c);
    const std::size_t k = a.c, p = b.c;
    for (std::size_t i = 0; i < a.r; ++i)
        for (std::size_t j = 0; j < p; ++j) {
            double acc = 0.0;
            for (std::size_t t = 0; t < k; ++t) acc += a.d[i * k + t] * b.d[t * p + j];
            out.d[i * p + j] = acc;
        }
    return out;
}

M affine(const M& x, const Tensor& w, const Tensor& b) {
    M out = zeros(x.r, w.cols());
    const std::size_t k = x.c, p = w.cols();
    for (std::size_t i = 0; i < x.r; ++i)
        for (std::size_t j = 0; j < p; ++j) {
            double acc = b.data[j];
            for (std::size_t t = 0; t < k; ++t) acc += x.d[i * k + t] * w.data[t * p + j];
            out.d[i * p + j] = acc;
        }
    return out;
}

M layer_norm(const M& x, const Tensor& g, const Tensor& b) {
    M out = zeros(x.r, x.c);
    const std::size_t c = x.c;
    for (std::size_t i = 0; i < x.r; ++i) {
        const double* xin = &x.d[i * c];
        double mean = 0.0;
        for (std::size_t j = 0; j < c; ++j) mean += xin[j];
        mean /= static_cast<double>(c);
        double var = 0.0;
        for (std::size_t j = 0; j < c; ++j) var += (xin[j] - mean) * (xin[j] - mean);
        var /= static_cast<double>(c);
        const double inv = 1.0 / std::sqrt(var + kLnEps);
        for (std::size_t j = 0; j < c; ++j)
            out.d[i * c + j] = g.data[j] * ((xin[j] - mean) * inv) + b.data[j];
    }
    return out;
}

void silu_inplace(M& x) {
    for (double& v : x.d) v = v * (1.0 / (1.0 + std::exp(-v)));
}

void softmax_rows_inplace(M& x) {
    for (std::size_t i = 0; i < x.r; ++i) {
        double* row = &x.d[i * x.c];
        double mx = row[0];
        for (std::size_t j = 1; j < x.c; ++j) mx = std::max(mx, row[j]);
        double sum = 0.0;
        for (std::size_t j = 0; j < x.c; ++j) {
            row[j] = std::exp(row[j] - mx);
            sum += row[j];
        }
        for (std::size_t j = 0; j < x.c; ++j) row[j] /= sum;
    }
}

void zero_cols(M& x, const std::vector<std::size_t>& channels) {
    for (std::size_t ch : channels)
        for (std::size_t i = 0; i < x.r; ++i) x.d[i * x.c + ch] = 0.0;
}

// generic attention block over either layer weight set
template <typename L>
M attention(const M& h, const L& w, std::size_t dim, bool causal) {
    const M x = layer_norm(h, w.ln1_g, w.ln1_b);
    const M q = affine(x, w.wq, w.bq);
    const M k = affine(x, w.wk, w.bk);
    const M v = affine(x, w.wv, w.bv);
    M kt = zeros(k.c, k.r);
    for (std::size_t i = 0; i < k.r; ++i)
        for (std::size_t j = 0; j < k.c; ++j) kt.d[j * k.r + i] = k.d[i * k.c + j];
    M s = matmul_mm(q, kt);
    const double c = 1.0 / std::sqrt(static_cast<double>(dim));
    for (double& e : s.d) e *= c;
    if (causal)
        for (std::size_t i = 0; i < s.r; ++i)
            for (std::size_t j = i + 1; j < s.c; ++j) s.d[i * s.c + j] += -1e9;
    softmax_rows_inplace(s);
    const M o = affine(matmul_mm(s, v), w.wo, w.bo);
    M out = h;
    for (std::size_t i = 0; i < out.d.size(); ++i) out.d[i] += o.d[i];
    return out;
}

struct EditPlan {
    std::map<std::tuple<Component, int, Site>, std::vector<std::size_t>> zeroed;
    std::set<int> skip_ffn_layers; // lm layers dropped entirely
};

EditPlan plan(const std::vector<Edit>& edits) {
    EditPlan p;
    for (const auto& e : edits) {
        const Component comp =
            e.component == Component::qformer ? Component::projector : e.component;
        if (e.skip_ffn) {
            p.skip_ffn_layers.insert(e.layer);
            continue;
        }
        if (e.channel < 0) throw InputError("oracle edit: negative channel");
        p.zeroed[{comp, e.layer, e.site}].push_back(
            static_cast<std::size_t>(e.channel));
    }
    return p;
}

const std::vector<std::size_t>& channels_at(const EditPlan& p, Component c,
                                            int layer, Site s) {
    static const std::vector<std::size_t> none;
    const auto it = p.zeroed.find({c, layer, s});
    return it == p.zeroed.end() ? none : it->second;
}

std::vector<double> log_softmax_of(const double* row, std::size_t c) {
    double mx = row[0];
    for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, row[j]);
    double sum = 0.0;
    for (std::size_t j = 0; j < c; ++j) sum += std::exp(row[j] - mx);
    const double lse = mx + std::log(sum);
    std::vector<double> out(c);
    for (std::size_t j = 0; j < c; ++j) out[j] = row[j] - lse;
    return out;
}

std::vector<int> with_prefix(const Tokenizer& tok, const std::string& prompt) {
    std::vector<int> text = {Tokenizer::kBos};
    const auto ids = tok.encode(prompt);
    text.insert(text.end(), ids.begin(), ids.end());
    return text;
}

double log10_mean_ratio(const std::vector<double>& curr,
                        const std::vector<double>& prev) {
    double acc = 0.0;
    for (std::size_t i = 0; i < curr.size(); ++i)
        acc += std::log10(curr[i] / prev[i]);
    return acc / static_cast<double>(curr.size());
}

} // namespace

PlainForward plain_forward(const ToyLVLM& model, const std::vector<double>& pixels,
                           const std::vector<int>& text_ids,
                           const std::vector<Edit>& edits) {
    const ModelConfig& cfg = model.config();
    const EditPlan ep = plan(edits);
    const std::size_t P = cfg.num_patches();
    const std::size_t seq = P + text_ids.size();
    if (seq > cfg.max_seq_len)
        throw InputError("oracle forward: sequence too long");

    PlainForward pf;
    pf.seq_len = seq;

    // vision
    M h = zeros(P, cfg.patch_dim());
    h.d = model.patchify(pixels);
    h = affine(h, model.patch_w, model.patch_b);
    for (std::size_t i = 0; i < P; ++i)
        for (std::size_t j = 0; j < cfg.vision_dim; ++j)
            h.d[i * cfg.vision_dim + j] +=
                model.vis_pos.data[i * cfg.vision_dim + j];
    for (std::size_t l = 0; l < cfg.vision_layers; ++l) {
        const auto& L = model.vis_layers[l];
        h = attention(h, L, cfg.vision_dim, false);
        const M x = layer_norm(h, L.ln2_g, L.ln2_b);
        M hid = affine(x, L.w1, L.b1);
        silu_inplace(hid);
        zero_cols(hid, channels_at(ep, Component::vision_encoder,
                                   static_cast<int>(l), Site::mlp_out));
        pf.taps[{Component::vision_encoder, static_cast<int>(l), Site::mlp_out}] =
            hid.d;
        const M up = affine(hid, L.w2, L.b2);
        for (std::size_t i = 0; i < h.d.size(); ++i) h.d[i] += up.d[i];
    }
    h = layer_norm(h, model.vis_ln_g, model.vis_ln_b);

    // projector
    M phid = affine(h, model.proj_w1, model.proj_b1);
    silu_inplace(phid);
    zero_cols(phid, channels_at(ep, Component::projector, 0, Site::mlp_out));
    pf.taps[{Component::projector, 0, Site::mlp_out}] = phid.d;
    const M img = affine(phid, model.proj_w2, model.proj_b2);

    // language model
    const std::size_t ld = cfg.lm_dim;
    M x = zeros(seq, ld);
    std::copy(img.d.begin(), img.d.end(), x.d.begin());
    for (std::size_t i = 0; i < text_ids.size(); ++i) {
        const auto id = static_cast<std::size_t>(text_ids[i]);
        for (std::size_t j = 0; j < ld; ++j)
            x.d[(P + i) * ld + j] = model.tok_table.data[id * ld + j];
    }
    for (std::size_t i = 0; i < seq; ++i)
        for (std::size_t j = 0; j < ld; ++j)
            x.d[i * ld + j] += model.pos_table.data[i * ld + j];

    for (std::size_t l = 0; l < cfg.lm_layers; ++l) {
        const auto& L = model.lm_layers[l];
        x = attention(x, L, ld, true);
        if (ep.skip_ffn_layers.count(static_cast<int>(l))) {
            pf.lm_hidden.push_back(x.d);
            continue;
        }
        const M xn = layer_norm(x, L.ln2_g, L.ln2_b);
        M gate = matmul(xn, L.w_gate);
        zero_cols(gate, channels_at(ep, Component::lm, static_cast<int>(l),
                                    Site::gate_out));
        pf.taps[{Component::lm, static_cast<int>(l), Site::gate_out}] = gate.d;
        const M up = matmul(xn, L.w_up);
        silu_inplace(gate);
        M mid = gate;
        for (std::size_t i = 0; i < mid.d.size(); ++i) mid.d[i] *= up.d[i];
        M down = matmul(mid, L.w_down);
        zero_cols(down, channels_at(ep, Component::lm, static_cast<int>(l),
                                    Site::down_out));
        pf.taps[{Component::lm, static_cast<int>(l), Site::down_out}] = down.d;
        for (std::size_t i = 0; i < x.d.size(); ++i) x.d[i] += down.d[i];
        pf.lm_hidden.push_back(x.d);
    }
    x = layer_norm(x, model.fin_ln_g, model.fin_ln_b);
    const M logits = affine(x, model.w_out, model.b_out);
    pf.logits = logits.d;
    return pf;
}

std::vector<int> plain_generate(const ToyLVLM& model,
                                const std::vector<double>& pixels,
                                const std::string& prompt,
                                const std::vector<Edit>& edits,
                                std::size_t max_len) {
    const std::size_t P = model.config().num_patches();
    const std::size_t vocab = model.config().vocab_size;
    std::vector<int> text = with_prefix(model.tokenizer(), prompt);
    std::vector<int> out;
    while (out.size() < max_len && P + text.size() < model.config().max_seq_len) {
        const PlainForward pf = plain_forward(model, pixels, text, edits);
        const auto logp =
            log_softmax_of(&pf.logits[(pf.seq_len - 1) * vocab], vocab);
        std::size_t best = 0;
        for (std::size_t j = 1; j < vocab; ++j)
            if (logp[j] > logp[best]) best = j;
        out.push_back(static_cast<int>(best));
        text.push_back(static_cast<int>(best));
        if (static_cast<int>(best) == Tokenizer::kEos) break;
    }
    return out;
}

double plain_perplexity(const ToyLVLM& model, const std::vector<double>& pixels,
                        const std::string& prompt, const std::vector<int>& reference,
                        const std::vector<Edit>& edits) {
    if (reference.empty()) throw InputError("oracle perplexity: empty reference");
    const std::size_t P = model.config().num_patches();
    const std::size_t vocab = model.config().vocab_size;
    std::vector<int> text = with_prefix(model.tokenizer(), prompt);
    const std::size_t prefix = text.size();
    text.insert(text.end(), reference.begin(), reference.end());
    const PlainForward pf = plain_forward(model, pixels, text, edits);
    double mean = 0.0;
    for (std::size_t j = 0; j < reference.size(); ++j) {
        const std::size_t row = P + prefix + j - 1;
        const auto logp = log_softmax_of(&pf.logits[row * vocab], vocab);
        mean += std::max(logp[static_cast<std::size_t>(reference[j])],
                         kLogProbClamp);
    }
    mean /= static_cast<double>(reference.size());
    return std::exp(-mean);
}

std::vector<Edit> edits_from_mask(const MaskSet& mask) {
    std::vector<Edit> edits;
    for (const auto& id : mask.ids) {
        Edit e;
        e.component = id.component == Component::qformer ? Component::projector
                                                         : id.component;
        e.layer = id.layer;
        e.site = id.site;
        e.channel = id.channel;
        edits.push_back(e);
    }
    return edits;
}

GradCheckResult grad_check(const LossBuilder& builder,
                           const std::vector<Tensor>& inputs, double h,
                           double abs_floor) {
    GradCheckResult res;

    auto eval = [&](const std::vector<Tensor>& ins) {
        Graph g;
        std::vector<NodeId> ids;
        ids.reserve(ins.size());
        for (const auto& t : ins) ids.push_back(g.input(t));
        const NodeId loss = builder(g, ids);
        return g.value(loss).data[0];
    };

    Graph g;
    std::vector<NodeId> ids;
    for (const auto& t : inputs) {
        Tensor c = t;
        c.requires_grad = true;
        ids.push_back(g.input(std::move(c)));
    }
    const NodeId loss = builder(g, ids);
    g.backward(loss);

    std::vector<Tensor> work = inputs;
    for (std::size_t t = 0; t < inputs.size(); ++t) {
        const Tensor& analytic = g.grad(ids[t]);
        for (std::size_t i = 0; i < work[t].data.size(); ++i) {
            const double orig = work[t].data[i];
            work[t].data[i] = orig + h;
            const double fp = eval(work);
            work[t].data[i] = orig - h;
            const double fm = eval(work);
            work[t].data[i] = orig;
            const double numeric = (fp - fm) / (2.0 * h);
            const double a = analytic.data[i];
            const double denom =
                std::max(std::max(std::fabs(a), std::fabs(numeric)), abs_floor);
            res.max_rel_error = std::max(res.max_rel_error,
                                         std::fabs(a - numeric) / denom);
            ++res.checked;
        }
    }
    return res;
}

bool direct_intervention_equiv(const ToyLVLM& model,
                               const std::vector<double>& pixels,
                               const std::vector<int>& text_ids,
                               const MaskSet& mask, const std::vector<Edit>& edits) {
    Graph g;
    const ForwardResult fr = model.build_forward(g, pixels, text_ids, mask);
    const PlainForward pf = plain_forward(model, pixels, text_ids, edits);
    if (fr.lm_hidden.size() != pf.lm_hidden.size()) return false;
    for (std::size_t l = 0; l < pf.lm_hidden.size(); ++l)
        if (g.value(fr.lm_hidden[l]).data != pf.lm_hidden[l]) return false;
    return g.value(fr.logits).data == pf.logits;
}

namespace {

struct EvalCtx {
    const ToyLVLM* model;
    const AlignmentScorer* scorer;
    const std::vector<SyntheticSample>* valset;
    std::string prompt;
    std::size_t max_gen_len;
    std::vector<std::vector<int>> refs; // unmasked greedy traces
};

struct MaskEval {
    std::vector<double> ppls;
    std::optional<double> mean_align;
};

MaskEval eval_masked(const EvalCtx& ctx, const std::vector<Edit>& edits,
                     bool self_trace) {
    MaskEval ev;
    double acc = 0.0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < ctx.valset->size(); ++i) {
        const auto& s = (*ctx.valset)[i];
        const auto gen =
            plain_generate(*ctx.model, s.pixels, ctx.prompt, edits, ctx.max_gen_len);
        const std::vector<int>& ref = self_trace ? gen : ctx.refs[i];
        ev.ppls.push_back(
            plain_perplexity(*ctx.model, s.pixels, ctx.prompt, ref, edits));
        const std::string text = ctx.model->tokenizer().decode(gen);
        if (const auto a = ctx.scorer->score(s.pixels, text)) {
            acc += *a;
            ++n;
        }
    }
    if (n > 0) ev.mean_align = acc / static_cast<double>(n);
    return ev;
}

EvalCtx make_ctx(const ToyLVLM& model, const AlignmentScorer& scorer,
                 const std::vector<SyntheticSample>& valset,
                 const std::string& prompt, std::size_t max_gen_len) {
    EvalCtx ctx;
    ctx.model = &model;
    ctx.scorer = &scorer;
    ctx.valset = &valset;
    ctx.prompt = prompt;
    ctx.max_gen_len = max_gen_len;
    for (const auto& s : valset)
        ctx.refs.push_back(plain_generate(model, s.pixels, prompt, {}, max_gen_len));
    return ctx;
}

bool collapse_hit(const MaskEval& ev, const std::vector<double>& prev_ppls,
                  const Thresholds& th) {
    const double delta = log10_mean_ratio(ev.ppls, prev_ppls);
    const bool align_ok = !ev.mean_align || *ev.mean_align <= th.tau_align;
    return delta >= th.tau_ppl && align_ok;
}

} // namespace

std::optional<MaskSet> exhaustive_min_subset(
    const ToyLVLM& model, const std::vector<NeuronId>& scope_neurons,
    const std::vector<SyntheticSample>& valset, const AlignmentScorer& scorer,
    const Thresholds& thresholds, const OracleBudget& budget,
    const std::string& prompt, std::size_t max_gen_len) {
    if (valset.empty()) throw InputError("oracle subset scan: empty valset");
    if (scope_neurons.size() > budget.max_scope_size)
        throw OracleAbort("subset scan scope " +
                          std::to_string(scope_neurons.size()) + " exceeds budget " +
                          std::to_string(budget.max_scope_size));

    std::vector<NeuronId> scope = scope_neurons;
    std::sort(scope.begin(), scope.end());

    const EvalCtx ctx = make_ctx(model, scorer, valset, prompt, max_gen_len);
    const MaskEval base = eval_masked(ctx, {}, false);

    std::size_t visited = 0;
    const std::size_t n = scope.size();
    for (std::size_t size = 1; size <= std::min(budget.max_subset_size, n); ++size) {
        std::vector<std::size_t> idx(size);
        for (std::size_t i = 0; i < size; ++i) idx[i] = i;
        while (true) {
            if (++visited > budget.max_subsets)
                throw OracleAbort("subset scan exceeded " +
                                  std::to_string(budget.max_subsets) + " subsets");
            MaskSet mask;
            for (std::size_t i : idx) mask.insert(scope[i]);
            const MaskEval ev = eval_masked(ctx, edits_from_mask(mask), false);
            if (collapse_hit(ev, base.ppls, thresholds)) return mask;

            // next lexicographic combination
            std::size_t pos = size;
            while (pos > 0 && idx[pos - 1] == n - size + pos - 1) --pos;
            if (pos == 0) break;
            ++idx[pos - 1];
            for (std::size_t i = pos; i < size; ++i) idx[i] = idx[i - 1] + 1;
        }
    }
    return std::nullopt;
}

std::optional<std::size_t> grid_scan_k_star(
    const ToyLVLM& model, const ImportanceTable& table,
    const AlignmentScorer& scorer, const std::vector<SyntheticSample>& valset,
    const std::string& prompt, const SearchConfig& config) {
    if (valset.empty()) throw InputError("oracle grid scan: empty valset");

    // own ranking pass over the raw entries
    std::vector<std::pair<NeuronId, double>> es = table.entries;
    std::sort(es.begin(), es.end(), [](const auto& a, const auto& b) {
        if (a.second != b.second) return a.second > b.second;
        return a.first < b.first;
    });
    std::vector<NeuronId> ranked;
    for (const auto& [id, s] : es) {
        (void)s;
        if (config.scope.matches(id)) ranked.push_back(id);
    }

    const EvalCtx ctx = make_ctx(model, scorer, valset, prompt, config.max_gen_len);
    const bool self = config.ppl_mode == PplMode::self_trace;
    std::vector<double> prev = eval_masked(ctx, {}, false).ppls;

    for (std::size_t k = config.delta_k;
         k <= config.k_max && k <= ranked.size(); k += config.delta_k) {
        MaskSet mask;
        for (std::size_t i = 0; i < k; ++i) mask.insert(ranked[i]);
        const MaskEval ev = eval_masked(ctx, edits_from_mask(mask), self);
        if (collapse_hit(ev, prev, config.thresholds)) return k;
        prev = ev.ppls;
    }
    return std::nullopt;
}

std::vector<std::pair<NeuronId, double>> naive_scores(const ProfileSet& profiles,
                                                      double alpha) {
    if (!profiles.gradients.empty() &&
        profiles.gradients.size() != profiles.activations.size())
        throw InputError("oracle scores: activation/gradient count mismatch");
    std::vector<std::pair<NeuronId, double>> out;
    for (std::size_t n = 0; n < profiles.neurons.size(); ++n) {
        double acc = 0.0;
        for (std::size_t i = 0; i < profiles.sample_count; ++i) {
            double gw = 1.0;
            if (alpha != 0.0) {
                const double g =
                    profiles.gradients.empty() ? 0.0 : profiles.gradients[n][i];
                gw = std::pow(std::fabs(g), alpha);
            }
            acc += gw * std::fabs(profiles.activations[n][i]);
        }
        out.emplace_back(profiles.neurons[n],
                         acc / static_cast<double>(profiles.sample_count));
    }
    return out;
}

} // namespace canlab::oracle
