#include "canlab/experiment.hpp"

#include <cerrno>
#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <sstream>

#include "json.hpp"

#include "canlab/hash.hpp"
#include "canlab/instrument.hpp"

namespace canlab {

namespace {

using json = nlohmann::json;

json config_body(const ExperimentConfig& c) {
    json j;
    j["model"] = json::parse(c.model.to_json());
    j["n_per_category"] = c.n_per_category;
    j["dataset_seed"] = c.dataset_seed;
    j["prompt"] = c.prompt;
    j["train_epochs"] = c.train_epochs;
    j["train_lr"] = c.train_lr;
    j["train_seed"] = c.train_seed;
    j["scorer"] = json::parse(c.scorer.to_json());
    j["alpha"] = c.alpha;
    j["scope_component"] = c.scope_component;
    j["scope_site"] = c.scope_site;
    j["delta_k"] = c.delta_k;
    j["k_max"] = c.k_max;
    j["thresholds"] = {{"tau_ppl", c.thresholds.tau_ppl},
                       {"tau_align", c.thresholds.tau_align},
                       {"align_degraded", c.thresholds.align_degraded}};
    j["calibrate_align"] = c.calibrate_align;
    j["ppl_mode"] = c.ppl_mode;
    j["max_gen_len"] = c.max_gen_len;
    j["control_trials"] = c.control_trials;
    j["control_seed"] = c.control_seed;
    return j;
}

void fill_config(ExperimentConfig& c, const json& j) {
    c.model = ModelConfig::from_json(j.at("model").dump());
    c.n_per_category = j.at("n_per_category");
    c.dataset_seed = j.at("dataset_seed");
    c.prompt = j.at("prompt");
    c.train_epochs = j.at("train_epochs");
    c.train_lr = j.at("train_lr");
    c.train_seed = j.at("train_seed");
    c.scorer = ScorerConfig::from_json(j.at("scorer").dump());
    c.alpha = j.at("alpha");
    c.scope_component = j.at("scope_component");
    c.scope_site = j.at("scope_site");
    c.delta_k = j.at("delta_k");
    c.k_max = j.at("k_max");
    c.thresholds.tau_ppl = j.at("thresholds").at("tau_ppl");
    c.thresholds.tau_align = j.at("thresholds").at("tau_align");
    c.thresholds.align_degraded = j.at("thresholds").at("align_degraded");
    c.calibrate_align = j.at("calibrate_align");
    c.ppl_mode = j.at("ppl_mode");
    c.max_gen_len = j.at("max_gen_len");
    c.control_trials = j.at("control_trials");
    c.control_seed = j.at("control_seed");
    if (j.contains("out_dir")) c.out_dir = j.at("out_dir");
}

// Exclusive per-run-directory lock so two commands never interleave writes.
class RunLock {
public:
    explicit RunLock(const std::filesystem::path& file) : path_(file) {
        if (!std::filesystem::is_directory(file.parent_path()))
            throw DependencyError("run directory " + file.parent_path().string() +
                                  " does not exist; run gen first");
        fd_ = ::open(file.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
        if (fd_ < 0) {
            if (errno == EEXIST)
                throw Error("run directory is locked (" + file.string() +
                            " exists); remove it if no other command is running");
            throw InputError("cannot create lock " + file.string());
        }
    }
    ~RunLock() {
        if (fd_ >= 0) {
            ::close(fd_);
            std::error_code ec;
            std::filesystem::remove(path_, ec);
        }
    }
    RunLock(const RunLock&) = delete;
    RunLock& operator=(const RunLock&) = delete;

private:
    std::filesystem::path path_;
    int fd_ = -1;
};

// The sidecar log is the only artifact allowed to carry timestamps.
void log_line(const RunPaths& rp, const std::string& msg) {
    std::ofstream out(rp.log(), std::ios::app);
    const std::time_t now = std::time(nullptr);
    char stamp[32];
    std::strftime(stamp, sizeof stamp, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&now));
    out << stamp << " " << msg << "\n";
}

void write_file(const std::filesystem::path& file, const std::string& content) {
    std::ofstream out(file, std::ios::binary);
    if (!out) throw InputError("cannot write " + file.string());
    out.write(content.data(), static_cast<long>(content.size()));
}

std::string read_file(const std::filesystem::path& file) {
    std::ifstream in(file, std::ios::binary);
    if (!in) throw DependencyError("missing artifact " + file.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void require(const std::filesystem::path& file, const std::string& producer) {
    if (!std::filesystem::exists(file))
        throw DependencyError("missing artifact " + file.string() + "; run " +
                              producer + " first");
}

const CategorySpec& category_spec(const std::string& label) {
    for (const auto& c : categories())
        if (c.label() == label) return c;
    throw InputError("unknown category '" + label + "'");
}

std::vector<SyntheticSample> load_split(const RunPaths& rp,
                                        const std::string& label, Split split) {
    require(rp.dataset_dir() / "manifest.csv", "gen");
    const int cat = category_index(label);
    std::vector<SyntheticSample> out;
    for (auto& s : load_dataset(rp.dataset_dir()))
        if (s.category == cat && s.split == split) out.push_back(std::move(s));
    if (out.empty())
        throw DependencyError("dataset has no " + label + " samples");
    return out;
}

std::string num17(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

} // namespace

std::string ExperimentConfig::canonical_json() const {
    return config_body(*this).dump();
}

std::string ExperimentConfig::hash() const { return fnv1a_hex(canonical_json()); }

std::string ExperimentConfig::to_json() const {
    json j = config_body(*this);
    j["out_dir"] = out_dir;
    return j.dump(2);
}

ExperimentConfig ExperimentConfig::from_json(const std::string& s) {
    ExperimentConfig c;
    fill_config(c, json::parse(s));
    c.validate();
    return c;
}

ExperimentConfig ExperimentConfig::load(const std::filesystem::path& file) {
    std::ifstream in(file, std::ios::binary);
    if (!in) throw InputError("cannot read config " + file.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return from_json(ss.str());
}

void ExperimentConfig::save(const std::filesystem::path& file) const {
    write_file(file, to_json() + "\n");
}

Scope ExperimentConfig::scope() const {
    Scope s;
    if (!scope_component.empty()) s.component = component_from(scope_component);
    if (!scope_site.empty()) s.site = site_from(scope_site);
    return s;
}

void ExperimentConfig::validate() const {
    model.validate();
    if (n_per_category < 3)
        throw ConfigError("n_per_category must be >= 3 (2:1 rank:validation split)");
    if (alpha < 0.0 || alpha > 1.0) throw ConfigError("alpha must be in [0,1]");
    if (delta_k < 1) throw ConfigError("delta_k must be >= 1");
    if (max_gen_len < 1) throw ConfigError("max_gen_len must be >= 1");
    ppl_mode_from(ppl_mode);
    if (!scope_component.empty()) component_from(scope_component);
    if (!scope_site.empty()) site_from(scope_site);
}

RunPaths run_paths(const ExperimentConfig& cfg) {
    RunPaths rp;
    rp.root = std::filesystem::path(cfg.out_dir) / cfg.hash();
    return rp;
}

void cmd_gen(const ExperimentConfig& cfg) {
    const RunPaths rp = run_paths(cfg);
    std::filesystem::create_directories(rp.shared());
    RunLock lock(rp.lock());
    // out_dir is excluded so the artifact is location-independent
    write_file(rp.root / "config.json",
               json::parse(cfg.canonical_json()).dump(2) + "\n");
    const auto samples =
        gen_dataset(cfg.n_per_category, cfg.dataset_seed, cfg.model.image_size);
    std::filesystem::create_directories(rp.dataset_dir());
    save_dataset(samples, rp.dataset_dir());
    log_line(rp, "gen: " + std::to_string(samples.size()) + " samples");
}

void cmd_train(const ExperimentConfig& cfg) {
    const RunPaths rp = run_paths(cfg);
    RunLock lock(rp.lock());
    require(rp.dataset_dir() / "manifest.csv", "gen");
    const auto all = load_dataset(rp.dataset_dir());
    std::vector<SyntheticSample> rank_set, val_set;
    for (const auto& s : all)
        (s.split == Split::rank ? rank_set : val_set).push_back(s);

    ToyLVLM model(cfg.model);
    const auto tr =
        train(model, rank_set, cfg.train_epochs, cfg.train_lr, cfg.train_seed);
    model.save(rp.model_ckpt());
    const double acc = caption_accuracy(model, val_set, cfg.prompt, cfg.max_gen_len);

    AlignmentScorer scorer(cfg.model, cfg.scorer);
    scorer.fit(rank_set);
    scorer.save(rp.scorer_ckpt());

    CalibratedThresholds cal;
    cal.thresholds = cfg.thresholds;
    cal.chance_align = chance_baseline(scorer, rank_set, 200, cfg.control_seed);
    double orig_acc = 0.0;
    std::size_t orig_n = 0;
    for (const auto& s : val_set)
        if (const auto a = scorer.score(s.pixels, s.caption)) {
            orig_acc += *a;
            ++orig_n;
        }
    cal.orig_align = orig_n ? orig_acc / static_cast<double>(orig_n) : 0.0;
    if (cfg.calibrate_align) {
        // collapse floor: lower third of the healthy-to-chance band;
        // degradation boundary: upper third
        const double band = cal.orig_align - cal.chance_align;
        cal.thresholds.tau_align = cal.chance_align + band / 3.0;
        cal.thresholds.align_degraded = cal.orig_align - band / 3.0;
    }
    json j;
    j["config_hash"] = cfg.hash();
    j["tau_ppl"] = cal.thresholds.tau_ppl;
    j["tau_align"] = cal.thresholds.tau_align;
    j["align_degraded"] = cal.thresholds.align_degraded;
    j["chance_align"] = cal.chance_align;
    j["orig_align"] = cal.orig_align;
    write_file(rp.thresholds_file(), j.dump(2) + "\n");

    log_line(rp, "train: final loss " +
                     (tr.loss_curve.empty() ? std::string("n/a")
                                            : num17(tr.loss_curve.back())) +
                     ", val caption accuracy " + num17(acc) + ", chance align " +
                     num17(cal.chance_align) + ", orig align " +
                     num17(cal.orig_align));
}

CalibratedThresholds load_thresholds(const ExperimentConfig& cfg) {
    const RunPaths rp = run_paths(cfg);
    require(rp.thresholds_file(), "train");
    const json j = json::parse(read_file(rp.thresholds_file()));
    if (j.at("config_hash") != cfg.hash())
        throw ProvenanceError("thresholds.json belongs to config " +
                              j.at("config_hash").get<std::string>() + ", not " +
                              cfg.hash());
    CalibratedThresholds cal;
    cal.thresholds.tau_ppl = j.at("tau_ppl");
    cal.thresholds.tau_align = j.at("tau_align");
    cal.thresholds.align_degraded = j.at("align_degraded");
    cal.chance_align = j.at("chance_align");
    cal.orig_align = j.at("orig_align");
    return cal;
}

void cmd_profile(const ExperimentConfig& cfg, const std::string& category) {
    category_spec(category);
    const RunPaths rp = run_paths(cfg);
    RunLock lock(rp.lock());
    require(rp.model_ckpt(), "train");
    const ToyLVLM model = ToyLVLM::load(rp.model_ckpt());
    const auto samples = load_split(rp, category, Split::rank);
    const ProfileSet ps =
        collect_profiles(model, samples, cfg.prompt,
                         Probe::first_generated_token, cfg.alpha != 0.0);
    std::filesystem::create_directories(rp.category(category));
    save_profiles(ps, rp.category(category) / "profiles.csv", cfg.hash());
    log_line(rp, "profile " + category + ": " + std::to_string(ps.neurons.size()) +
                     " neurons x " + std::to_string(ps.sample_count) + " samples");
}

void cmd_rank(const ExperimentConfig& cfg, const std::string& category) {
    const RunPaths rp = run_paths(cfg);
    RunLock lock(rp.lock());
    const auto pfile = rp.category(category) / "profiles.csv";
    require(pfile, "profile");
    require(rp.model_ckpt(), "train");
    const ToyLVLM model = ToyLVLM::load(rp.model_ckpt());
    const ProfileSet ps = load_profiles(pfile, cfg.hash());
    const ImportanceTable table =
        score(ps, cfg.alpha, cfg.hash(), model.weights_hash());
    save_table(table, rp.category(category) / "ranked.csv", cfg.hash());
    log_line(rp, "rank " + category + ": " + std::to_string(table.entries.size()) +
                     " entries, alpha " + num17(cfg.alpha));
}

void cmd_search(const ExperimentConfig& cfg, const std::string& category) {
    const RunPaths rp = run_paths(cfg);
    RunLock lock(rp.lock());
    const auto rfile = rp.category(category) / "ranked.csv";
    require(rfile, "rank");
    require(rp.model_ckpt(), "train");
    require(rp.scorer_ckpt(), "train");
    const ToyLVLM model = ToyLVLM::load(rp.model_ckpt());
    const AlignmentScorer scorer = AlignmentScorer::load(rp.scorer_ckpt());
    const ImportanceTable table = load_table(rfile, cfg.hash());
    const auto valset = load_split(rp, category, Split::validation);
    const CalibratedThresholds cal = load_thresholds(cfg);

    SearchConfig sc;
    sc.scope = cfg.scope();
    sc.delta_k = cfg.delta_k;
    sc.k_max = std::min(cfg.k_max, table.scope_size(sc.scope));
    sc.thresholds = cal.thresholds;
    sc.ppl_mode = ppl_mode_from(cfg.ppl_mode);
    sc.max_gen_len = cfg.max_gen_len;

    CollapseReport report =
        progressive_search(model, table, scorer, valset, cfg.prompt, sc);
    report.config_hash = cfg.hash();
    const auto dir = rp.category(category);
    write_file(dir / "report.json", report.to_json() + "\n");
    report.save_trajectory_csv(dir / "trajectory.csv");
    std::filesystem::create_directories(dir / "masks");
    report.final_mask.save(dir / "masks" / "final_mask.txt");
    log_line(rp, "search " + category + ": k*=" +
                     (report.k_star ? std::to_string(*report.k_star)
                                    : std::string("not found")));
}

void cmd_control(const ExperimentConfig& cfg, const std::string& category) {
    const RunPaths rp = run_paths(cfg);
    RunLock lock(rp.lock());
    const auto dir = rp.category(category);
    require(dir / "report.json", "search");
    require(dir / "ranked.csv", "rank");
    const CollapseReport report = CollapseReport::from_json(read_file(dir / "report.json"));
    if (report.config_hash != cfg.hash())
        throw ProvenanceError("report.json belongs to config " + report.config_hash +
                              ", not " + cfg.hash());
    const ToyLVLM model = ToyLVLM::load(rp.model_ckpt());
    const AlignmentScorer scorer = AlignmentScorer::load(rp.scorer_ckpt());
    const ImportanceTable table = load_table(dir / "ranked.csv", cfg.hash());
    const auto valset = load_split(rp, category, Split::validation);
    const Scope scope = cfg.scope();

    const std::size_t k = report.k_star.value_or(
        std::min(cfg.k_max, table.scope_size(scope)));
    SearchConfig sc;
    sc.scope = scope;
    sc.thresholds = report.thresholds;
    sc.ppl_mode = ppl_mode_from(cfg.ppl_mode);
    sc.max_gen_len = cfg.max_gen_len;

    const MetricPoint targeted =
        evaluate_mask(model, top_k(table, k, scope), scorer, valset, cfg.prompt,
                      sc.ppl_mode, sc.max_gen_len);
    std::vector<MaskSet> masks;
    const auto controls =
        random_control(model, table, scorer, scope, k, cfg.control_trials, valset,
                       cfg.prompt, sc, cfg.control_seed, &masks);

    std::ostringstream out;
    out << "# config_hash=" << cfg.hash() << "\n";
    out << "kind,k,mean_ppl,delta_ppl,align_score\n";
    auto row = [&](const std::string& kind, const MetricPoint& p) {
        out << kind << "," << p.k << "," << num17(p.mean_ppl) << ","
            << num17(p.delta_ppl) << ",";
        out << (p.align_score ? num17(*p.align_score) : std::string("NaN")) << "\n";
    };
    row("targeted", targeted);
    std::filesystem::create_directories(dir / "masks");
    for (std::size_t i = 0; i < controls.size(); ++i) {
        row("control_" + std::to_string(i), controls[i]);
        masks[i].save(dir / "masks" / ("control_" + std::to_string(i) + ".txt"));
    }
    write_file(dir / "controls.csv", out.str());
    log_line(rp, "control " + category + ": " + std::to_string(controls.size()) +
                     " trials at k=" + std::to_string(k));
}

std::string format_ppl(double v) {
    char buf[32];
    if (v < 100.0) {
        std::snprintf(buf, sizeof buf, "%.2f", v);
        return buf;
    }
    int e = static_cast<int>(std::floor(std::log10(v)));
    double m = v / std::pow(10.0, e);
    if (m >= 9.995) {
        m /= 10.0;
        ++e;
    }
    std::snprintf(buf, sizeof buf, "%.2fe%d", m, e);
    return buf;
}

std::string summary_header() {
    return "Object,Neurons,PPL_orig,PPL_masked,PPL_factor,Align_orig,Align_masked,"
           "Align_pct_change";
}

std::string summary_row(const std::string& object, std::size_t neurons,
                        double ppl_orig, double ppl_masked,
                        std::optional<double> align_orig,
                        std::optional<double> align_masked) {
    char buf[32];
    auto align_str = [&](const std::optional<double>& a) -> std::string {
        if (!a) return "NaN";
        std::snprintf(buf, sizeof buf, "%.2f", *a);
        return buf;
    };
    std::string pct = "NaN";
    if (align_orig && *align_orig != 0.0) {
        const double masked0 = align_masked.value_or(0.0); // NaN treated as 0
        pct = std::to_string(
                  std::llround((masked0 - *align_orig) / *align_orig * 100.0)) +
              "%";
    }
    return object + "," + std::to_string(neurons) + "," + format_ppl(ppl_orig) +
           "," + format_ppl(ppl_masked) + "," +
           std::to_string(std::llround(ppl_masked / ppl_orig)) + "," +
           align_str(align_orig) + "," + align_str(align_masked) + "," + pct;
}

void cmd_report(const ExperimentConfig& cfg) {
    const RunPaths rp = run_paths(cfg);
    RunLock lock(rp.lock());
    std::ostringstream out;
    out << "# config_hash=" << cfg.hash() << "\n" << summary_header() << "\n";
    std::size_t rows = 0;
    for (const auto& c : categories()) {
        const auto file = rp.category(c.label()) / "report.json";
        if (!std::filesystem::exists(file)) continue;
        const CollapseReport r = CollapseReport::from_json(read_file(file));
        if (r.config_hash != cfg.hash())
            throw ProvenanceError("report for " + c.label() + " belongs to config " +
                                  r.config_hash + ", not " + cfg.hash());
        if (r.trajectory.empty())
            throw DependencyError("report for " + c.label() + " has no trajectory");
        const std::size_t k = r.k_star.value_or(r.trajectory.back().metrics.k);
        const MetricPoint* at = &r.trajectory.back().metrics;
        for (const auto& tp : r.trajectory)
            if (tp.metrics.k == k) at = &tp.metrics;
        out << summary_row(c.label(), k, r.baseline.mean_ppl, at->mean_ppl,
                           r.baseline.align_score, at->align_score)
            << "\n";
        ++rows;
    }
    if (rows == 0)
        throw DependencyError("no per-category report.json found under " +
                              rp.root.string() + "; run search first");
    write_file(rp.summary(), out.str());
    log_line(rp, "report: " + std::to_string(rows) + " categories");
}

} // namespace canlab
