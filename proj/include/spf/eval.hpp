#pragma once

// Preservation and responsiveness metrics with exact sprite masks,
// reconstruction under base text, and diagnostic dumps.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "spf/aligner.hpp"
#include "spf/denoiser.hpp"
#include "spf/spriteworld.hpp"

namespace spf {

struct EvalRecord {
    std::size_t prompt = 0;
    std::uint64_t seed = 0;
    std::string base_text;
    std::string target_text;
    double mse_out_of_mask = 0.0;
    double mse_in_mask = 0.0;
    double responsiveness = 0.0;           // customized sample vs target text
    double original_responsiveness = 0.0;  // original sample vs target text

    nlohmann::json to_json() const;
};

struct EvalReport {
    double preservation_mse_out_of_mask = 0.0;
    double preservation_mse_in_mask = 0.0;
    double responsiveness = 0.0;
    double original_responsiveness = 0.0;
    double reconstruction_mse = 0.0;
    std::vector<EvalRecord> records;
    std::string config_hash;
    std::string original_id;
    std::string customized_id;

    nlohmann::json summary_json() const;
};

/// Evaluation seeds: `count` fixed values derived from `base`.
std::vector<std::uint64_t> eval_seeds(std::size_t count, std::uint64_t base = 0);

/// Samples `model` for each conditioning row with its seed, in chunks.
torch::Tensor sample_texts(Denoiser& model, const TextCodec& codec, const std::vector<std::string>& base_texts,
                           const std::vector<std::string>& target_texts, const std::vector<std::uint64_t>& seeds,
                           int chunk = 32);

/// Record k pairs prompts[k % prompts.size()] with seeds[k]. The original
/// model is sampled with base text, the customized model with base + target
/// text, both from the same seed. The out-of-mask region excludes the
/// prompt's target region at every pose offset.
/// `original_samples`, when defined, replaces sampling the original model.
EvalReport eval_pair(Denoiser& original, Denoiser& customized, const std::vector<PromptTriple>& prompts,
                     const std::vector<std::uint64_t>& seeds, const AlignerBundle& aligner,
                     const torch::Tensor& original_samples = {});

/// Mean pixel MSE between the two models sampled with base text only.
double reconstruction_test(Denoiser& original, Denoiser& customized, const std::vector<PromptTriple>& base_prompts,
                           const std::vector<std::uint64_t>& seeds, const TextCodec& codec,
                           const torch::Tensor& original_samples = {});

/// Base-text samples of `model`, record k using prompts[k % size] and seeds[k].
torch::Tensor sample_base_texts(Denoiser& model, const std::vector<PromptTriple>& prompts,
                                const std::vector<std::uint64_t>& seeds, const TextCodec& codec);

/// Writes `report` as <stem>.jsonl (one record per seed) and <stem>.summary.json.
void write_report(const std::filesystem::path& stem, const EvalReport& report);

/// Side-by-side rows of images ([B,3,32,32] each, same B) as one PNG.
void write_image_grid(const std::filesystem::path& path, const std::vector<torch::Tensor>& columns);

struct DiagnosticsOptions {
    int timestep = 100;
    std::uint64_t seed = 0;
};

/// Writes soft_map.png, phrase_<i>.png, refined.png, attention_layer<j>.png
/// (target tokens, response path), samples.png (original | customized |
/// ground truth) and sfcm.json with gammas and phrases into `out_dir`.
nlohmann::json dump_diagnostics(Denoiser& original, Denoiser& customized, const AlignerBundle& aligner,
                                const PromptTriple& triple, const DiagnosticsOptions& options,
                                const std::filesystem::path& out_dir);

}  // namespace spf
