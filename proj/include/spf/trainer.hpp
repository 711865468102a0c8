#pragma once

// Base-model pretraining, stage-1 naive fine-tuning, and stage-2 dual-path
// contrastive training.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "spf/aligner.hpp"
#include "spf/checkpoint.hpp"
#include "spf/config.hpp"
#include "spf/denoiser.hpp"
#include "spf/losses.hpp"
#include "spf/spriteworld.hpp"

namespace spf {

// ---------------------------------------------------------------------------
// Denoiser checkpoints

/// Writes parameters (with group labels), schedule constants and `metadata`.
/// `metadata` gains "kind", "digest" and "schedule" entries.
void save_denoiser(const std::filesystem::path& path, const Denoiser& model, nlohmann::json metadata,
                   torch::optim::AdamW* optimizer = nullptr);

struct LoadedDenoiser {
    Denoiser model{nullptr};
    nlohmann::json metadata;
    Checkpoint checkpoint;
};

LoadedDenoiser load_denoiser(const std::filesystem::path& path);

/// Optimizer moments stored as "optim.<index>.exp_avg" / ".exp_avg_sq" plus a
/// shared step count, in `params` order.
void append_optimizer_state(Checkpoint& ckpt, torch::optim::AdamW& optimizer);
void load_optimizer_state(const Checkpoint& ckpt, torch::optim::AdamW& optimizer);

// ---------------------------------------------------------------------------
// Shared loop plumbing

struct RunOptions {
    std::filesystem::path checkpoint;   // final (or stop-point) checkpoint; empty to skip writing
    std::filesystem::path log;          // JSONL step log; empty to skip
    std::filesystem::path resume_from;  // stage-2 checkpoint with optimizer state
    int stop_at_step = 0;               // stop (and checkpoint) after this many total steps
    std::function<void(const nlohmann::json&)> on_step;
};

/// Deterministic batch schedule: an independent permutation per epoch,
/// full batches only.
class BatchSchedule {
public:
    BatchSchedule(std::size_t dataset_size, int batch_size, std::uint64_t seed);
    std::vector<std::size_t> batch(int step) const;
    int steps_per_epoch() const { return steps_per_epoch_; }

private:
    std::size_t n_;
    int batch_size_;
    int steps_per_epoch_;
    std::uint64_t seed_;
};

/// Seed for the per-step noise generator.
std::uint64_t step_seed(std::uint64_t seed, int step);

/// Trains a fresh denoiser on base-only triples with the diffusion loss.
Denoiser pretrain_base(const std::vector<PromptTriple>& data, const TextCodec& codec, const TrainConfig& config,
                       const RunOptions& options = {});

/// Naive fine-tuning of every parameter of a copy of `base` on full captions.
Denoiser stage1(const Denoiser& base, const std::vector<PromptTriple>& data, const TextCodec& codec,
                const TrainConfig& config, const RunOptions& options = {});

// ---------------------------------------------------------------------------
// Stage 2

struct ModelPair {
    Denoiser reference{nullptr};
    Denoiser response{nullptr};
    std::string reference_digest;

    /// Deep copies: reference from `original` (frozen), response from `initial`.
    static ModelPair make(const Denoiser& original, const Denoiser& initial);
    /// Throws StateError when the reference parameters changed.
    void verify_reference() const;
};

/// Inputs both paths consumed in one step, for contract checks.
struct Stage2Trace {
    torch::Tensor reference_x_t, response_x_t;
    torch::Tensor reference_t, response_t;
    torch::Tensor refined;  // [B,32,32]
    torch::Tensor eps_reference, eps_response;
};

class Stage2Trainer {
public:
    Stage2Trainer(ModelPair& pair, const AlignerBundle& aligner, const TrainConfig& config);

    /// One optimizer step on `batch` (every triple must carry target text).
    LossBreakdown step(const std::vector<const PromptTriple*>& batch, int step_index, Stage2Trace* trace = nullptr);

    torch::optim::AdamW& optimizer() { return *optimizer_; }
    const std::vector<torch::Tensor>& trainable() const { return trainable_; }

private:
    double gamma(const std::string& phrase, const std::string& target);
    torch::Tensor target_embedding(const std::string& target);

    ModelPair& pair_;
    const AlignerBundle& aligner_;
    TrainConfig config_;
    NoiseSchedule schedule_ = NoiseSchedule::linear();
    std::vector<torch::Tensor> trainable_;
    std::unique_ptr<torch::optim::AdamW> optimizer_;
    std::map<std::string, double> gamma_cache_;
    std::map<std::string, torch::Tensor> target_cache_;
};

/// Full stage-2 run over the target-bearing triples of `data`. Returns the
/// trained response model.
Denoiser run_stage2(ModelPair& pair, const std::vector<PromptTriple>& data, const AlignerBundle& aligner,
                    const TrainConfig& config, const RunOptions& options = {});

}  // namespace spf
