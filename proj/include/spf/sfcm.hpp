#pragma once

// Semantic-aware fine control map: where the response path's prediction
// departs from the reference path, minus the regions of base phrases that are
// semantically unrelated to the target text.

#include <string>
#include <vector>

#include <torch/torch.h>

#include "spf/aligner.hpp"
#include "spf/denoiser.hpp"
#include "spf/textcodec.hpp"

namespace spf {

inline constexpr std::int64_t kMapSize = 32;

struct Sfcm {
    torch::Tensor soft;                      // M, [32,32] in [0,1]
    std::vector<torch::Tensor> phrase_maps;  // one [32,32] map per base phrase
    std::vector<double> gammas;              // similarity of each phrase to the target text
    torch::Tensor refined;                   // M^, [32,32] in [0,1]
    bool empty_target = false;
};

/// Min-max normalization to [0,1] over the last two axes. A constant map
/// becomes all zeros.
torch::Tensor normalize_map(const torch::Tensor& map);

/// Channel-mean absolute difference, min-max normalized, detached.
/// [3,H,W] -> [H,W] or [B,3,H,W] -> [B,H,W].
torch::Tensor soft_map(const torch::Tensor& eps_ref, const torch::Tensor& eps_res);

/// Per phrase: text-attention columns averaged over the phrase's tokens and
/// the heads, nearest-resampled to `size`, averaged over layers, then min-max
/// normalized. Uses batch row `row`. Returns one [size,size] map per span.
std::vector<torch::Tensor> phrase_attention(const AttentionTap& tap, const std::vector<PhraseSpan>& spans,
                                            std::int64_t row = 0, std::int64_t size = kMapSize);

/// clamp(M - sum_i map_i * (1 - gamma_i), 0, 1), detached.
torch::Tensor refine(const torch::Tensor& soft, const std::vector<torch::Tensor>& phrase_maps,
                     const std::vector<double>& gammas);

/// gamma(i) for each phrase: cosine between the standalone encodings of the
/// phrase and of the target text.
std::vector<double> phrase_gammas(const AlignerBundle& aligner, const std::vector<std::string>& phrases,
                                  const std::string& target_text);

/// Full construction for batch row `row`. `encoding` is the response-path
/// encoding (base + target). Without a target segment the refined map is all
/// zeros and `empty_target` is set.
Sfcm build_sfcm(const torch::Tensor& eps_ref, const torch::Tensor& eps_res, const AttentionTap& response_tap,
                const TextEncoding& encoding, const std::string& target_text, const AlignerBundle& aligner,
                std::int64_t row = 0);

/// Refined maps for a whole batch with precomputed gammas: [B,32,32].
/// Rows whose `gammas` entry is empty (no target) get all-zero maps.
torch::Tensor build_refined_batch(const torch::Tensor& eps_ref, const torch::Tensor& eps_res,
                                  const AttentionTap& response_tap,
                                  const std::vector<std::vector<PhraseSpan>>& spans,
                                  const std::vector<std::vector<double>>& gammas,
                                  const std::vector<bool>& has_target);

}  // namespace spf
