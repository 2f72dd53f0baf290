#pragma once

#include <filesystem>
#include <optional>
#include <string>

#include "canlab/metrics.hpp"
#include "canlab/model.hpp"
#include "canlab/search.hpp"

namespace canlab {

// Everything a full run depends on. The canonical JSON form (out_dir
// excluded) is hashed to name the run directory, so identical configs land
// in, and can resume from, the same place.
struct ExperimentConfig {
    ModelConfig model;

    int n_per_category = 6;
    std::uint64_t dataset_seed = 7;

    std::string prompt = "Describe the object in this image";
    int train_epochs = 30;
    double train_lr = 0.003;
    std::uint64_t train_seed = 3;

    ScorerConfig scorer;

    double alpha = 0.0;
    std::string scope_component = "lm";
    std::string scope_site = "gate_out";
    std::size_t delta_k = 1;
    std::size_t k_max = 16;
    Thresholds thresholds;
    bool calibrate_align = true; // measure tau_align/align_degraded from the scorer
    std::string ppl_mode = "reference";
    std::size_t max_gen_len = 8;

    std::size_t control_trials = 20;
    std::uint64_t control_seed = 11;

    std::string out_dir = "runs";

    std::string canonical_json() const;
    std::string hash() const;
    std::string to_json() const;
    static ExperimentConfig from_json(const std::string& s);
    static ExperimentConfig load(const std::filesystem::path& file);
    void save(const std::filesystem::path& file) const;

    Scope scope() const;
    void validate() const;
};

// Run-directory layout: <out_dir>/<hash>/shared/ for cross-category
// artifacts, one subdirectory per category, summary.csv at the root.
struct RunPaths {
    std::filesystem::path root;

    std::filesystem::path shared() const { return root / "shared"; }
    std::filesystem::path dataset_dir() const { return shared() / "dataset"; }
    std::filesystem::path model_ckpt() const { return shared() / "model.ckpt"; }
    std::filesystem::path scorer_ckpt() const { return shared() / "scorer.ckpt"; }
    std::filesystem::path thresholds_file() const { return shared() / "thresholds.json"; }
    std::filesystem::path category(const std::string& label) const { return root / label; }
    std::filesystem::path summary() const { return root / "summary.csv"; }
    std::filesystem::path log() const { return root / "run.log"; }
    std::filesystem::path lock() const { return root / ".lock"; }
};

RunPaths run_paths(const ExperimentConfig& cfg);

// Calibrated collapse thresholds plus the measurements they came from.
struct CalibratedThresholds {
    Thresholds thresholds;
    double chance_align = 0.0;
    double orig_align = 0.0;
};

// Pipeline stages. Each validates its inputs by embedded config hash
// (ProvenanceError on mismatch, DependencyError when missing) and writes
// byte-identical artifacts on rerun; timestamps go only to the sidecar log.
void cmd_gen(const ExperimentConfig& cfg);
void cmd_train(const ExperimentConfig& cfg);
void cmd_profile(const ExperimentConfig& cfg, const std::string& category);
void cmd_rank(const ExperimentConfig& cfg, const std::string& category);
void cmd_search(const ExperimentConfig& cfg, const std::string& category);
void cmd_control(const ExperimentConfig& cfg, const std::string& category);
void cmd_report(const ExperimentConfig& cfg);

// Summary table formatting (the report schema, exposed for fixture tests).
// Absent alignment prints NaN; its percent change treats the score as 0.
std::string summary_header();
std::string summary_row(const std::string& object, std::size_t neurons,
                        double ppl_orig, double ppl_masked,
                        std::optional<double> align_orig,
                        std::optional<double> align_masked);
std::string format_ppl(double v);

CalibratedThresholds load_thresholds(const ExperimentConfig& cfg);

} // namespace canlab
