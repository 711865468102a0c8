#pragma once

// Toy conditional noise predictor: a three-level U-shaped network with one
// text cross-attention block per resolution, the DDPM noise schedule, and an
// ancestral sampler. Every cross-attention block can record an AttentionTap.
//
// Diffusion runs in "model space": image values in [0,1] mapped to [-1,1].

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "spf/textcodec.hpp"

namespace spf {

inline constexpr int kTimesteps = 200;
inline constexpr int kSamplerSteps = 50;

struct NoiseSchedule {
    int steps = kTimesteps;
    std::vector<double> betas;
    std::vector<double> alphas_bar;

    /// Linear betas from `beta_start` to `beta_end`.
    static NoiseSchedule linear(int steps = kTimesteps, double beta_start = 1e-4, double beta_end = 0.02);

    double alpha_bar(int t) const;
    /// alphas_bar gathered at `t` ([B] int64), shaped [B,1,1,1].
    torch::Tensor alpha_bar_at(const torch::Tensor& t, torch::Dtype dtype) const;
};

torch::Tensor to_model_space(const torch::Tensor& image);
torch::Tensor to_image_space(const torch::Tensor& x);

/// x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps. `t` is [B] int64.
torch::Tensor forward_diffuse(const NoiseSchedule& schedule, const torch::Tensor& x0, const torch::Tensor& t,
                              const torch::Tensor& eps);
torch::Tensor forward_diffuse(const NoiseSchedule& schedule, const torch::Tensor& x0, int t, const torch::Tensor& eps);

/// x0_hat = (x_t - sqrt(1 - abar_t) eps_hat) / sqrt(abar_t), unclamped.
torch::Tensor one_step_x0(const NoiseSchedule& schedule, const torch::Tensor& x_t, const torch::Tensor& t,
                          const torch::Tensor& eps_hat);
torch::Tensor one_step_x0(const NoiseSchedule& schedule, const torch::Tensor& x_t, int t, const torch::Tensor& eps_hat);

/// Captured state of one cross-attention layer for one forward pass.
struct LayerTap {
    torch::Tensor keys;               // [B, N, d]  key projection; rows outside the base segment are zero
    torch::Tensor queries;            // [B, S, d]  query-projected spatial features
    torch::Tensor variant_attention;  // [B, N, S]  softmax over S of K Q^T / sqrt(d); zero outside base rows
    torch::Tensor text_attention;     // [B, H, S, N] ordinary cross-attention probabilities
    torch::Tensor base_mask;          // [B, N] bool
    std::int64_t height = 0;
    std::int64_t width = 0;

    std::int64_t spatial() const { return height * width; }
};

struct AttentionTap {
    std::vector<LayerTap> layers;
};

struct DenoiserOptions {
    std::array<std::int64_t, 3> channels{32, 64, 64};
    std::int64_t heads = 4;
    std::int64_t text_dim = kTextDim;
    std::int64_t time_dim = 128;
    std::int64_t groups = 8;
    std::int64_t image_channels = 3;
    std::int64_t image_size = 32;
};

inline constexpr const char* kCrossAttentionGroup = "cross_attention";
inline constexpr const char* kBaseGroup = "base";

/// Softmax over the spatial axis of K Q^T / sqrt(d), rows outside `base`
/// zeroed. keys [B,N,d] (already zero outside base), queries [B,S,d],
/// base [B,N] bool. Returns [B,N,S].
torch::Tensor variant_attention(const torch::Tensor& keys, const torch::Tensor& queries, const torch::Tensor& base);

/// Group label for a denoiser parameter name.
std::string parameter_group(const std::string& name);

class ResBlockImpl : public torch::nn::Module {
public:
    ResBlockImpl(std::int64_t in, std::int64_t out, std::int64_t time_dim, std::int64_t groups);
    torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& temb);

private:
    torch::nn::GroupNorm norm1_{nullptr}, norm2_{nullptr};
    torch::nn::Conv2d conv1_{nullptr}, conv2_{nullptr}, skip_{nullptr};
    torch::nn::Linear time_proj_{nullptr};
};
TORCH_MODULE(ResBlock);

class CrossAttentionImpl : public torch::nn::Module {
public:
    CrossAttentionImpl(std::int64_t channels, std::int64_t text_dim, std::int64_t heads, std::int64_t groups);

    /// x: [B,C,H,W]; cond: [B,N,text_dim]; valid/base: [B,N] bool.
    torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& cond, const torch::Tensor& valid,
                          const torch::Tensor& base, LayerTap* tap);

private:
    std::int64_t channels_;
    std::int64_t heads_;
    torch::nn::GroupNorm norm_{nullptr};
    torch::nn::Linear to_q_{nullptr}, to_k_{nullptr}, to_v_{nullptr}, to_out_{nullptr};
};
TORCH_MODULE(CrossAttention);

class DenoiserImpl : public torch::nn::Module {
public:
    explicit DenoiserImpl(DenoiserOptions options = {});

    /// x_t: [B,3,32,32]; t: [B] int64. Fills `tap` (3 layers, execution order
    /// 8x8, 16x16, 32x32) when non-null.
    torch::Tensor forward(const torch::Tensor& x_t, const torch::Tensor& t, const BatchEncoding& cond,
                          AttentionTap* tap = nullptr);

    const DenoiserOptions& options() const { return options_; }
    std::vector<torch::Tensor> parameters_in_group(const std::string& group) const;
    static constexpr int kTappedLayers = 3;

private:
    DenoiserOptions options_;
    torch::nn::Sequential time_mlp_{nullptr};
    torch::nn::Conv2d conv_in_{nullptr}, down0_sample_{nullptr}, down1_sample_{nullptr};
    torch::nn::Conv2d up1_conv_{nullptr}, up0_conv_{nullptr}, conv_out_{nullptr};
    ResBlock down0_{nullptr}, down1_{nullptr}, mid0_{nullptr}, mid1_{nullptr}, up1_{nullptr}, up0_{nullptr};
    CrossAttention xattn_mid_{nullptr}, xattn_up1_{nullptr}, xattn_up0_{nullptr};
    torch::nn::GroupNorm norm_out_{nullptr};
};
TORCH_MODULE(Denoiser);

/// Validates shapes, then runs the model. Throws ArgumentError on mismatch.
torch::Tensor predict(Denoiser& model, const torch::Tensor& x_t, const torch::Tensor& t, const BatchEncoding& cond,
                      AttentionTap* tap = nullptr);

/// Deep copy with identical parameter values.
Denoiser clone_denoiser(const Denoiser& model);

/// Ancestral sampling over kSamplerSteps strided timesteps. Each row uses its
/// own seed for the initial noise and every per-step draw. Returns images in
/// [0,1], [B,3,32,32].
torch::Tensor sample(Denoiser& model, const NoiseSchedule& schedule, const BatchEncoding& cond,
                     const std::vector<std::uint64_t>& seeds, int steps = kSamplerSteps);

/// The strided timestep sequence used by `sample`, descending.
std::vector<int> sampler_timesteps(const NoiseSchedule& schedule, int steps);

/// Sinusoidal timestep features, [B, dim].
torch::Tensor timestep_features(const torch::Tensor& t, std::int64_t dim, torch::Dtype dtype);

}  // namespace spf
