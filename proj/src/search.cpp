#include "canlab/search.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "json.hpp"

#include "canlab/rng.hpp"

namespace canlab {

using json = nlohmann::json;

std::string to_string(PplMode m) {
    return m == PplMode::reference_trace ? "reference" : "self";
}

PplMode ppl_mode_from(const std::string& s) {
    if (s == "reference") return PplMode::reference_trace;
    if (s == "self") return PplMode::self_trace;
    throw ConfigError("unknown ppl mode '" + s + "'");
}

namespace {

struct StepEval {
    std::vector<double> ppls;               // per validation sample
    std::optional<double> mean_align;
};

// One masked evaluation pass over the validation set. references holds the
// unmasked model's greedy token ids per sample (used in reference mode).
StepEval eval_step(const ToyLVLM& model, const MaskSet& mask,
                   const AlignmentScorer& scorer,
                   const std::vector<SyntheticSample>& valset,
                   const std::string& prompt,
                   const std::vector<std::vector<int>>& references,
                   PplMode ppl_mode, std::size_t max_gen_len) {
    const MaskedModel view = apply_mask(model, mask);
    StepEval ev;
    ev.ppls.reserve(valset.size());
    double align_acc = 0.0;
    std::size_t align_n = 0;
    for (std::size_t i = 0; i < valset.size(); ++i) {
        const auto& s = valset[i];
        const auto trace = view.generate_greedy(s.pixels, prompt, max_gen_len);
        const std::vector<int>& ref =
            ppl_mode == PplMode::reference_trace ? references[i] : trace.token_ids;
        ev.ppls.push_back(perplexity(view, s.pixels, prompt, ref));
        if (const auto a = scorer.score(s.pixels, trace.text)) {
            align_acc += *a;
            ++align_n;
        }
    }
    if (align_n > 0) ev.mean_align = align_acc / static_cast<double>(align_n);
    return ev;
}

double mean(const std::vector<double>& v) {
    double acc = 0.0;
    for (double x : v) acc += x;
    return acc / static_cast<double>(v.size());
}

std::vector<std::vector<int>> reference_traces(
    const ToyLVLM& model, const std::vector<SyntheticSample>& valset,
    const std::string& prompt, std::size_t max_gen_len) {
    std::vector<std::vector<int>> refs;
    const MaskSet none;
    refs.reserve(valset.size());
    for (const auto& s : valset)
        refs.push_back(model.generate_greedy(s.pixels, prompt, none, max_gen_len)
                           .token_ids);
    return refs;
}

json point_to_json(const MetricPoint& p) {
    json j;
    j["k"] = p.k;
    j["mean_ppl"] = p.mean_ppl;
    j["delta_ppl"] = p.delta_ppl;
    if (p.align_score)
        j["align_score"] = *p.align_score;
    else
        j["align_score"] = nullptr;
    j["n_val"] = p.n_val;
    return j;
}

MetricPoint point_from_json(const json& j) {
    MetricPoint p;
    p.k = j.at("k");
    p.mean_ppl = j.at("mean_ppl");
    p.delta_ppl = j.at("delta_ppl");
    if (!j.at("align_score").is_null()) p.align_score = j.at("align_score").get<double>();
    p.n_val = j.at("n_val");
    return p;
}

} // namespace

CollapseReport progressive_search(const ToyLVLM& model,
                                  const ImportanceTable& table,
                                  const AlignmentScorer& scorer,
                                  const std::vector<SyntheticSample>& valset,
                                  const std::string& prompt,
                                  const SearchConfig& config) {
    if (valset.empty()) throw InputError("progressive_search: empty valset");
    if (config.delta_k < 1) throw ConfigError("delta_k must be >= 1");
    const std::size_t scope_size = table.scope_size(config.scope);
    if (config.k_max > scope_size)
        throw ConfigError("k_max " + std::to_string(config.k_max) +
                          " exceeds scope size " + std::to_string(scope_size));
    const Component scope_comp =
        config.scope.component.value_or(Component::lm);

    const auto refs = reference_traces(model, valset, prompt, config.max_gen_len);
    const MaskSet none;
    const StepEval base = eval_step(model, none, scorer, valset, prompt, refs,
                                    config.ppl_mode, config.max_gen_len);

    CollapseReport report;
    report.thresholds = config.thresholds;
    report.baseline.k = 0;
    report.baseline.mean_ppl = mean(base.ppls);
    report.baseline.delta_ppl = 0.0;
    report.baseline.align_score = base.mean_align;
    report.baseline.n_val = valset.size();

    std::vector<double> prev_ppls = base.ppls;
    std::size_t overshoot_left = config.overshoot_steps;
    bool collapsed = false;

    for (std::size_t k = config.delta_k; k <= config.k_max; k += config.delta_k) {
        const MaskSet mask = top_k(table, k, config.scope);
        const StepEval ev = eval_step(model, mask, scorer, valset, prompt, refs,
                                      config.ppl_mode, config.max_gen_len);
        TrajectoryPoint tp;
        tp.metrics.k = k;
        tp.metrics.mean_ppl = mean(ev.ppls);
        tp.metrics.delta_ppl = delta_ppl(ev.ppls, prev_ppls);
        tp.metrics.align_score = ev.mean_align;
        tp.metrics.n_val = valset.size();
        tp.label = collapse_check(tp.metrics, config.thresholds, scope_comp);
        report.trajectory.push_back(tp);
        report.final_mask = mask;

        if (!report.first_degraded_k &&
            (tp.label == CollapseLabel::expressive_degradation ||
             tp.label == CollapseLabel::perceptual_failure))
            report.first_degraded_k = k;
        if (!collapsed && tp.label == CollapseLabel::complete_collapse) {
            collapsed = true;
            report.k_star = k;
        } else if (collapsed) {
            if (overshoot_left == 0) break;
            --overshoot_left;
        }
        if (collapsed && overshoot_left == 0) break;
        prev_ppls = ev.ppls;
    }
    return report;
}

MetricPoint evaluate_mask(const ToyLVLM& model, const MaskSet& mask,
                          const AlignmentScorer& scorer,
                          const std::vector<SyntheticSample>& valset,
                          const std::string& prompt, PplMode ppl_mode,
                          std::size_t max_gen_len) {
    if (valset.empty()) throw InputError("evaluate_mask: empty valset");
    const auto refs = reference_traces(model, valset, prompt, max_gen_len);
    const MaskSet none;
    const StepEval base =
        eval_step(model, none, scorer, valset, prompt, refs, ppl_mode, max_gen_len);
    const StepEval ev =
        eval_step(model, mask, scorer, valset, prompt, refs, ppl_mode, max_gen_len);
    MetricPoint p;
    p.k = mask.size();
    p.mean_ppl = mean(ev.ppls);
    p.delta_ppl = delta_ppl(ev.ppls, base.ppls);
    p.align_score = ev.mean_align;
    p.n_val = valset.size();
    return p;
}

std::vector<MetricPoint> random_control(const ToyLVLM& model,
                                        const ImportanceTable& table,
                                        const AlignmentScorer& scorer,
                                        const Scope& scope, std::size_t k,
                                        std::size_t n_trials,
                                        const std::vector<SyntheticSample>& valset,
                                        const std::string& prompt,
                                        const SearchConfig& config,
                                        std::uint64_t seed,
                                        std::vector<MaskSet>* out_masks) {
    if (valset.empty()) throw InputError("random_control: empty valset");
    if (n_trials < 1) throw InputError("random_control: n_trials must be >= 1");
    const MaskSet targeted = top_k(table, std::min(k, table.scope_size(scope)), scope);

    std::vector<NeuronId> pool;
    for (const auto& [id, s] : table.entries) {
        (void)s;
        if (scope.matches(id) && !targeted.contains(id)) pool.push_back(id);
    }
    std::sort(pool.begin(), pool.end());
    if (k > pool.size())
        throw InputError("random_control: scope minus top-k (" +
                         std::to_string(pool.size()) + ") smaller than k=" +
                         std::to_string(k));

    const auto refs = reference_traces(model, valset, prompt, config.max_gen_len);
    const MaskSet none;
    const StepEval base = eval_step(model, none, scorer, valset, prompt, refs,
                                    config.ppl_mode, config.max_gen_len);

    Rng rng(seed);
    std::vector<MetricPoint> out;
    for (std::size_t trial = 0; trial < n_trials; ++trial) {
        std::vector<NeuronId> draw = pool;
        rng.shuffle(draw);
        MaskSet mask;
        for (std::size_t i = 0; i < k; ++i) mask.insert(draw[i]);
        const StepEval ev = eval_step(model, mask, scorer, valset, prompt, refs,
                                      config.ppl_mode, config.max_gen_len);
        MetricPoint p;
        p.k = k;
        p.mean_ppl = mean(ev.ppls);
        p.delta_ppl = delta_ppl(ev.ppls, base.ppls);
        p.align_score = ev.mean_align;
        p.n_val = valset.size();
        out.push_back(p);
        if (out_masks) out_masks->push_back(mask);
    }
    return out;
}

std::string CollapseReport::to_json() const {
    json j;
    j["config_hash"] = config_hash;
    j["baseline"] = point_to_json(baseline);
    j["thresholds"] = {{"tau_ppl", thresholds.tau_ppl},
                       {"tau_align", thresholds.tau_align},
                       {"align_degraded", thresholds.align_degraded}};
    if (k_star)
        j["k_star"] = *k_star;
    else
        j["k_star"] = nullptr;
    if (first_degraded_k)
        j["first_degraded_k"] = *first_degraded_k;
    else
        j["first_degraded_k"] = nullptr;
    j["final_mask"] = json::array();
    for (const auto& id : final_mask.ids) j["final_mask"].push_back(id.str());
    j["trajectory"] = json::array();
    for (const auto& tp : trajectory) {
        json p = point_to_json(tp.metrics);
        p["label"] = to_string(tp.label);
        j["trajectory"].push_back(p);
    }
    return j.dump(2);
}

CollapseReport CollapseReport::from_json(const std::string& s) {
    json j = json::parse(s);
    CollapseReport r;
    r.config_hash = j.at("config_hash");
    r.baseline = point_from_json(j.at("baseline"));
    r.thresholds.tau_ppl = j.at("thresholds").at("tau_ppl");
    r.thresholds.tau_align = j.at("thresholds").at("tau_align");
    r.thresholds.align_degraded = j.at("thresholds").at("align_degraded");
    if (!j.at("k_star").is_null()) r.k_star = j.at("k_star").get<std::size_t>();
    if (!j.at("first_degraded_k").is_null())
        r.first_degraded_k = j.at("first_degraded_k").get<std::size_t>();
    for (const auto& e : j.at("final_mask"))
        r.final_mask.insert(NeuronId::parse(e.get<std::string>()));
    for (const auto& p : j.at("trajectory")) {
        TrajectoryPoint tp;
        tp.metrics = point_from_json(p);
        tp.label = collapse_label_from(p.at("label").get<std::string>());
        r.trajectory.push_back(tp);
    }
    return r;
}

void CollapseReport::save_trajectory_csv(const std::filesystem::path& file) const {
    std::ofstream out(file, std::ios::binary);
    out << "# config_hash=" << config_hash << "\n";
    out << "k,mean_ppl,delta_ppl,align_score,label\n";
    char buf[32];
    auto num = [&](double v) {
        std::snprintf(buf, sizeof buf, "%.17g", v);
        return std::string(buf);
    };
    auto row = [&](const MetricPoint& p, CollapseLabel label) {
        out << p.k << "," << num(p.mean_ppl) << "," << num(p.delta_ppl) << ",";
        if (p.align_score)
            out << num(*p.align_score);
        else
            out << "NaN";
        out << "," << to_string(label) << "\n";
    };
    row(baseline, CollapseLabel::healthy);
    for (const auto& tp : trajectory) row(tp.metrics, tp.label);
}

} // namespace canlab
