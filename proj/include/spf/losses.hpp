#pragma once

// Training objectives. Batched tensors carry the batch on axis 0; per-sample
// values are averaged over the batch.

#include <optional>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "spf/aligner.hpp"
#include "spf/config.hpp"
#include "spf/denoiser.hpp"

namespace spf {

/// Mean squared error over all elements.
torch::Tensor diffusion_loss(const torch::Tensor& eps_true, const torch::Tensor& eps_hat);

/// C[b, token, spatial, channel] = A[b, token, spatial] * Q[b, spatial, channel].
/// Summing over the spatial axis gives the attention-variant feature F.
torch::Tensor variant_attention_contrib(const LayerTap& tap);

/// Area-averaged mask at a layer's resolution: [B,32,32] -> [B, h*w].
torch::Tensor resample_mask(const torch::Tensor& mask, std::int64_t height, std::int64_t width);

/// Sum over layers of ||(C_ref - C_res) * (1 - M^)||_2, averaged over the batch.
/// `mask` is [B,32,32] (or [32,32]); it is detached.
torch::Tensor masked_text_loss(const AttentionTap& ref, const AttentionTap& res, const torch::Tensor& mask);

/// Sum over layers of ||(Q_ref - Q_res) * (1 - M^)||_2, averaged over the batch.
torch::Tensor masked_fine_loss(const AttentionTap& ref, const AttentionTap& res, const torch::Tensor& mask);

/// 1 - cos(Delta(x0_hat), Delta(x0_true)), averaged over the batch. Images in
/// [0,1] space ([B,3,32,32]); target embedding [d] or [B,d]. Gradient flows
/// through `x0_hat` only.
torch::Tensor enhancement_loss(const AlignerBundle& aligner, const torch::Tensor& x0_hat, const torch::Tensor& x0_true,
                               const torch::Tensor& target_text_embedding);

/// 1 - cos(image embedding of x0_hat, target-text embedding), batch mean.
torch::Tensor clip_baseline_loss(const AlignerBundle& aligner, const torch::Tensor& x0_hat,
                                 const torch::Tensor& target_text_embedding);

struct LossParts {
    torch::Tensor diff;
    torch::Tensor m_text;    // undefined -> treated as 0
    torch::Tensor m_fine;
    torch::Tensor enhanced;  // either the difference-vector or the baseline term
    torch::Tensor clip_baseline;
};

struct LossBreakdown {
    double l_diff = 0.0;
    double l_m_text = 0.0;
    double l_m_fine = 0.0;
    double l_enhanced = 0.0;
    std::optional<double> l_clip_baseline;
    double total = 0.0;
    Lambdas lambdas;

    nlohmann::json to_json() const;
};

struct WeightedLoss {
    torch::Tensor total;  // differentiable
    LossBreakdown breakdown;
};

/// total = diff + l1 m_text + l2 m_fine + l3 enhanced. Throws ConfigError for
/// a negative weight.
WeightedLoss total_loss(const LossParts& parts, const Lambdas& lambdas);

/// Square root of the sum of squares over all axes but the first, with a zero
/// subgradient at the origin. [B, ...] -> [B].
torch::Tensor safe_l2(const torch::Tensor& x);

}  // namespace spf
