#pragma once

// End-to-end pipelines built from the training and evaluation pieces:
// dataset generation, aligner and base pretraining, both fine-tuning stages,
// ablations and the loss-weight sweep. Artifacts live under a work directory
// and are reused when their recipe hash matches.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "spf/aligner.hpp"
#include "spf/config.hpp"
#include "spf/eval.hpp"
#include "spf/trainer.hpp"

namespace spf {

struct ExperimentConfig {
    std::filesystem::path workdir = "runs/default";
    TargetAttr target = TargetAttr::hat;
    int train_count = 5000;    // target triples for both fine-tuning stages
    int base_count = 5000;     // base-only triples for base pretraining
    int aligner_count = 6000;  // mixed triples for aligner pretraining
    int eval_prompts = 64;
    int eval_seeds = 64;
    std::uint64_t seed = 1;
    bool reuse = true;

    AlignerTrainConfig aligner;
    TrainConfig base = TrainConfig::defaults(Stage::pretrain);
    TrainConfig stage1 = TrainConfig::defaults(Stage::stage1);
    TrainConfig stage2 = TrainConfig::defaults(Stage::stage2);

    std::vector<double> sweep_lambda1{0.0, 0.2, 0.4};
    std::vector<double> sweep_lambda2{0.0, 0.1, 0.2};
    std::vector<double> sweep_lambda3{0.0, 0.3, 0.6};
    int sweep_steps = 0;  // 0: same as stage 2
    int sweep_eval_seeds = 0;  // 0: same as eval_seeds

    std::string to_text() const;
};

/// Keys: top-level fields by name; `aligner.*`, `base.*`, `stage1.*`,
/// `stage2.*` forward to the respective configs; `sweep.lambda1..3` take
/// comma-separated lists; `sweep.steps`, `sweep.eval_seeds`.
ExperimentConfig parse_experiment_config(std::string_view text);
ExperimentConfig load_experiment_config(const std::filesystem::path& path);

struct NamedReport {
    std::string name;
    TrainConfig config;
    EvalReport report;
};

class Experiment {
public:
    explicit Experiment(ExperimentConfig config, std::function<void(const std::string&)> log = {});

    const ExperimentConfig& config() const { return config_; }

    const std::vector<PromptTriple>& train_data();
    const std::vector<PromptTriple>& base_data();
    const std::vector<PromptTriple>& aligner_data();
    const std::vector<PromptTriple>& eval_prompts();

    const AlignerBundle& aligner();
    Denoiser original();
    Denoiser naive();  // stage-1 model

    /// Stage-2 model trained with `config` into <workdir>/models/<name>.ckpt.
    Denoiser stage2(const std::string& name, const TrainConfig& config);

    /// eval_pair + reconstruction against the original, written to
    /// <workdir>/reports/<name>.*.
    EvalReport evaluate(const std::string& name, Denoiser& customized, std::size_t seeds);

    /// The full method plus its four ablations; writes reports/ablation.csv.
    std::vector<NamedReport> ablation_suite();
    /// The loss-weight grid; writes reports/sweep.csv.
    std::vector<NamedReport> lambda_sweep();

    std::filesystem::path path(const std::string& relative) const { return config_.workdir / relative; }

private:
    std::vector<PromptTriple> make_data(const std::string& name, int count,
                                        const std::set<std::optional<TargetAttr>>& pool, std::uint64_t salt);
    std::optional<Denoiser> cached(const std::filesystem::path& path, const std::string& recipe);

    ExperimentConfig config_;
    std::function<void(const std::string&)> log_;
    std::optional<std::vector<PromptTriple>> train_, base_, aligner_data_, eval_;
    std::optional<AlignerBundle> aligner_;
    std::optional<Denoiser> original_, naive_;
    std::string original_recipe_, naive_recipe_;
};

/// Writes a CSV table of named reports.
void write_report_table(const std::filesystem::path& path, const std::vector<NamedReport>& rows);

}  // namespace spf
