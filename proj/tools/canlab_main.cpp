#include <functional>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "canlab/dataset.hpp"
#include "canlab/experiment.hpp"

namespace {

using canlab::ExperimentConfig;

std::vector<std::string> resolve_categories(const std::string& arg) {
    if (arg != "all") return {arg};
    std::vector<std::string> out;
    for (const auto& c : canlab::categories()) out.push_back(c.label());
    return out;
}

struct Cli {
    std::string config_path;
    std::string category = "all";
    std::string out_dir;
    std::int64_t seed = -1;
    std::string ppl_mode;
};

ExperimentConfig load_config(const Cli& cli) {
    ExperimentConfig cfg = ExperimentConfig::load(cli.config_path);
    if (!cli.out_dir.empty()) cfg.out_dir = cli.out_dir;
    if (!cli.ppl_mode.empty()) cfg.ppl_mode = cli.ppl_mode;
    if (cli.seed >= 0) {
        const auto s = static_cast<std::uint64_t>(cli.seed);
        cfg.dataset_seed = s;
        cfg.train_seed = s + 1;
        cfg.control_seed = s + 2;
        cfg.scorer.seed = s + 3;
    }
    cfg.validate();
    return cfg;
}

void add_common(CLI::App* cmd, Cli& cli, bool with_category) {
    cmd->add_option("--config", cli.config_path, "experiment config JSON")
        ->required();
    cmd->add_option("--out", cli.out_dir, "output directory override");
    cmd->add_option("--seed", cli.seed, "seed override (rebases all config seeds)");
    cmd->add_option("--ppl-mode", cli.ppl_mode, "reference or self")
        ->check(CLI::IsMember({"reference", "self"}));
    if (with_category)
        cmd->add_option("--category", cli.category,
                        "category label or 'all'");
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"virtual-lesion laboratory pipeline"};
    app.require_subcommand(1);
    Cli cli;

    struct Stage {
        const char* name;
        const char* help;
        bool per_category;
        std::function<void(const ExperimentConfig&, const std::string&)> run;
    };
    const std::vector<Stage> stages = {
        {"gen", "render the synthetic dataset", false,
         [](const ExperimentConfig& c, const std::string&) { canlab::cmd_gen(c); }},
        {"train", "train the captioning model and alignment scorer", false,
         [](const ExperimentConfig& c, const std::string&) { canlab::cmd_train(c); }},
        {"profile", "collect activation/gradient profiles", true,
         [](const ExperimentConfig& c, const std::string& cat) {
             canlab::cmd_profile(c, cat);
         }},
        {"rank", "compute the importance ranking", true,
         [](const ExperimentConfig& c, const std::string& cat) {
             canlab::cmd_rank(c, cat);
         }},
        {"search", "progressive masking search for k*", true,
         [](const ExperimentConfig& c, const std::string& cat) {
             canlab::cmd_search(c, cat);
         }},
        {"control", "random same-size ablation controls", true,
         [](const ExperimentConfig& c, const std::string& cat) {
             canlab::cmd_control(c, cat);
         }},
        {"report", "aggregate per-category results into summary.csv", false,
         [](const ExperimentConfig& c, const std::string&) {
             canlab::cmd_report(c);
         }},
    };

    std::vector<CLI::App*> subs;
    for (const auto& s : stages) {
        CLI::App* cmd = app.add_subcommand(s.name, s.help);
        add_common(cmd, cli, s.per_category);
        subs.push_back(cmd);
    }

    CLI11_PARSE(app, argc, argv);

    try {
        for (std::size_t i = 0; i < stages.size(); ++i) {
            if (!subs[i]->parsed()) continue;
            const ExperimentConfig cfg = load_config(cli);
            if (stages[i].per_category) {
                for (const auto& cat : resolve_categories(cli.category))
                    stages[i].run(cfg, cat);
            } else {
                stages[i].run(cfg, "");
            }
        }
    } catch (const canlab::DependencyError& e) {
        std::cerr << "dependency error: " << e.what() << "\n";
        return 3;
    } catch (const canlab::ProvenanceError& e) {
        std::cerr << "provenance error: " << e.what() << "\n";
        return 4;
    } catch (const canlab::Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
