#include "spf/sfcm.hpp"

#include "spf/errors.hpp"

namespace spf {
namespace {

namespace F = torch::nn::functional;

torch::Tensor nearest(const torch::Tensor& map, std::int64_t size) {
    // map [H,W] -> [size,size]
    return F::interpolate(map.unsqueeze(0).unsqueeze(0),
                          F::InterpolateFuncOptions().size(std::vector<std::int64_t>{size, size}).mode(torch::kNearest))
        .squeeze(0)
        .squeeze(0);
}

}  // namespace

torch::Tensor normalize_map(const torch::Tensor& map) {
    auto flat = map.flatten(-2);
    auto lo = std::get<0>(flat.min(-1, true)).unsqueeze(-1);
    auto hi = std::get<0>(flat.max(-1, true)).unsqueeze(-1);
    auto range = hi - lo;
    auto out = (map - lo) / range.clamp_min(1e-30);
    return torch::where(range > 0, out, torch::zeros_like(map));
}

torch::Tensor soft_map(const torch::Tensor& eps_ref, const torch::Tensor& eps_res) {
    if (eps_ref.sizes() != eps_res.sizes()) throw ArgumentError("soft_map: prediction shapes differ");
    if (eps_ref.dim() != 3 && eps_ref.dim() != 4) throw ArgumentError("soft_map: expected [3,H,W] or [B,3,H,W]");
    torch::NoGradGuard guard;
    auto diff = (eps_ref - eps_res).abs().mean(eps_ref.dim() - 3);
    return normalize_map(diff).detach();
}

std::vector<torch::Tensor> phrase_attention(const AttentionTap& tap, const std::vector<PhraseSpan>& spans,
                                            std::int64_t row, std::int64_t size) {
    if (tap.layers.empty()) throw ArgumentError("phrase_attention: empty tap");
    torch::NoGradGuard guard;
    std::vector<torch::Tensor> out;
    for (const auto& span : spans) {
        if (span.size() <= 0) throw ArgumentError("phrase_attention: empty phrase span");
        torch::Tensor acc;
        for (const auto& layer : tap.layers) {
            // text_attention [B,H,S,N]
            auto cols = layer.text_attention[row].slice(-1, span.start, span.end);  // [H,S,n]
            auto m = cols.mean(-1).mean(0).view({layer.height, layer.width});
            auto up = nearest(m, size);
            acc = acc.defined() ? acc + up : up;
        }
        out.push_back(normalize_map(acc / static_cast<double>(tap.layers.size())));
    }
    return out;
}

torch::Tensor refine(const torch::Tensor& soft, const std::vector<torch::Tensor>& phrase_maps,
                     const std::vector<double>& gammas) {
    if (phrase_maps.size() != gammas.size()) throw ArgumentError("refine: one gamma per phrase map required");
    torch::NoGradGuard guard;
    auto m = soft.clone();
    for (std::size_t i = 0; i < phrase_maps.size(); ++i) m = m - phrase_maps[i] * (1.0 - gammas[i]);
    return m.clamp(0.0, 1.0).detach();
}

std::vector<double> phrase_gammas(const AlignerBundle& aligner, const std::vector<std::string>& phrases,
                                  const std::string& target_text) {
    auto target = aligner.codec.pooled_standalone(target_text);
    std::vector<double> out;
    out.reserve(phrases.size());
    for (const auto& p : phrases) out.push_back(similarity(aligner.codec.pooled_standalone(p), target));
    return out;
}

Sfcm build_sfcm(const torch::Tensor& eps_ref, const torch::Tensor& eps_res, const AttentionTap& response_tap,
                const TextEncoding& encoding, const std::string& target_text, const AlignerBundle& aligner,
                std::int64_t row) {
    auto er = eps_ref.dim() == 4 ? eps_ref[row] : eps_ref;
    auto es = eps_res.dim() == 4 ? eps_res[row] : eps_res;
    Sfcm s;
    s.soft = soft_map(er, es);
    if (!encoding.has_target() || target_text.empty()) {
        s.empty_target = true;
        s.refined = torch::zeros_like(s.soft);
        return s;
    }
    if (encoding.phrase_spans.empty()) throw ArgumentError("build_sfcm: base text has no phrases");
    s.phrase_maps = phrase_attention(response_tap, encoding.phrase_spans, row, s.soft.size(-1));
    s.gammas = phrase_gammas(aligner, encoding.phrases, target_text);
    s.refined = refine(s.soft, s.phrase_maps, s.gammas);
    return s;
}

torch::Tensor build_refined_batch(const torch::Tensor& eps_ref, const torch::Tensor& eps_res,
                                  const AttentionTap& response_tap,
                                  const std::vector<std::vector<PhraseSpan>>& spans,
                                  const std::vector<std::vector<double>>& gammas,
                                  const std::vector<bool>& has_target) {
    const auto b = eps_ref.size(0);
    auto soft = soft_map(eps_ref, eps_res);
    std::vector<torch::Tensor> rows;
    for (std::int64_t i = 0; i < b; ++i) {
        const auto k = static_cast<std::size_t>(i);
        if (!has_target[k]) {
            rows.push_back(torch::zeros_like(soft[i]));
            continue;
        }
        auto maps = phrase_attention(response_tap, spans[k], i, soft.size(-1));
        rows.push_back(refine(soft[i], maps, gammas[k]));
    }
    return torch::stack(rows);
}

}  // namespace spf
