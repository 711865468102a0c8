#include "spf/losses.hpp"

#include "spf/errors.hpp"

namespace spf {
namespace {

namespace F = torch::nn::functional;

double value_of(const torch::Tensor& t) { return t.defined() ? t.item<double>() : 0.0; }

torch::Tensor batched_mask(const torch::Tensor& mask) { return mask.dim() == 2 ? mask.unsqueeze(0) : mask; }

void check_layers(const AttentionTap& ref, const AttentionTap& res) {
    if (ref.layers.size() != res.layers.size()) throw ArgumentError("tap layer counts differ");
    if (ref.layers.empty()) throw ArgumentError("empty attention tap");
}

}  // namespace

torch::Tensor safe_l2(const torch::Tensor& x) {
    auto sq = x.pow(2).flatten(1).sum(1);
    return torch::where(sq > 0, sq.clamp_min(1e-30).sqrt(), torch::zeros_like(sq));
}

torch::Tensor diffusion_loss(const torch::Tensor& eps_true, const torch::Tensor& eps_hat) {
    if (eps_true.sizes() != eps_hat.sizes()) throw ArgumentError("diffusion_loss: shape mismatch");
    return (eps_true - eps_hat).pow(2).mean();
}

torch::Tensor variant_attention_contrib(const LayerTap& tap) {
    return tap.variant_attention.unsqueeze(-1) * tap.queries.unsqueeze(1);
}

torch::Tensor resample_mask(const torch::Tensor& mask, std::int64_t height, std::int64_t width) {
    auto m = batched_mask(mask);
    auto pooled = F::adaptive_avg_pool2d(m.unsqueeze(1), F::AdaptiveAvgPool2dFuncOptions({height, width}));
    return pooled.flatten(1);
}

torch::Tensor masked_text_loss(const AttentionTap& ref, const AttentionTap& res, const torch::Tensor& mask) {
    check_layers(ref, res);
    auto m = batched_mask(mask).detach();
    torch::Tensor total;
    for (std::size_t j = 0; j < ref.layers.size(); ++j) {
        const auto& a = ref.layers[j];
        const auto& b = res.layers[j];
        if (a.variant_attention.sizes() != b.variant_attention.sizes() || a.queries.sizes() != b.queries.sizes()) {
            throw ArgumentError("masked_text_loss: layer " + std::to_string(j) + " shapes differ");
        }
        auto w = (1.0 - resample_mask(m, a.height, a.width)).to(a.queries.scalar_type());  // [B,S]
        auto diff = (variant_attention_contrib(a) - variant_attention_contrib(b)) * w.unsqueeze(1).unsqueeze(-1);
        auto norms = safe_l2(diff);
        total = total.defined() ? total + norms : norms;
    }
    return total.mean();
}

torch::Tensor masked_fine_loss(const AttentionTap& ref, const AttentionTap& res, const torch::Tensor& mask) {
    check_layers(ref, res);
    auto m = batched_mask(mask).detach();
    torch::Tensor total;
    for (std::size_t j = 0; j < ref.layers.size(); ++j) {
        const auto& a = ref.layers[j];
        const auto& b = res.layers[j];
        if (a.queries.sizes() != b.queries.sizes()) {
            throw ArgumentError("masked_fine_loss: layer " + std::to_string(j) + " shapes differ");
        }
        auto w = (1.0 - resample_mask(m, a.height, a.width)).to(a.queries.scalar_type());
        auto norms = safe_l2((a.queries - b.queries) * w.unsqueeze(-1));
        total = total.defined() ? total + norms : norms;
    }
    return total.mean();
}

torch::Tensor enhancement_loss(const AlignerBundle& aligner, const torch::Tensor& x0_hat, const torch::Tensor& x0_true,
                               const torch::Tensor& target_text_embedding) {
    auto d_hat = difference_vector(aligner, x0_hat, target_text_embedding);
    torch::Tensor d_true;
    {
        torch::NoGradGuard guard;
        d_true = difference_vector(aligner, x0_true, target_text_embedding);
    }
    return (1.0 - cosine_rows(d_hat, d_true)).mean();
}

torch::Tensor clip_baseline_loss(const AlignerBundle& aligner, const torch::Tensor& x0_hat,
                                 const torch::Tensor& target_text_embedding) {
    auto img = aligner.embed_image(x0_hat);
    return (1.0 - cosine_rows(img, target_text_embedding.to(img.scalar_type()))).mean();
}

nlohmann::json LossBreakdown::to_json() const {
    nlohmann::json j = {{"l_diff", l_diff},         {"l_m_text", l_m_text}, {"l_m_fine", l_m_fine},
                        {"l_enhanced", l_enhanced}, {"total", total},       {"lambda1", lambdas.text},
                        {"lambda2", lambdas.fine},  {"lambda3", lambdas.enhanced}};
    if (l_clip_baseline) j["l_clip_baseline"] = *l_clip_baseline;
    return j;
}

WeightedLoss total_loss(const LossParts& parts, const Lambdas& lambdas) {
    if (lambdas.text < 0 || lambdas.fine < 0 || lambdas.enhanced < 0) throw ConfigError("lambdas must be >= 0");
    if (!parts.diff.defined()) throw ArgumentError("total_loss: diffusion term missing");
    WeightedLoss out;
    out.total = parts.diff;
    if (parts.m_text.defined()) out.total = out.total + lambdas.text * parts.m_text;
    if (parts.m_fine.defined()) out.total = out.total + lambdas.fine * parts.m_fine;
    if (parts.enhanced.defined()) out.total = out.total + lambdas.enhanced * parts.enhanced;
    auto& b = out.breakdown;
    b.l_diff = value_of(parts.diff);
    b.l_m_text = value_of(parts.m_text);
    b.l_m_fine = value_of(parts.m_fine);
    b.l_enhanced = value_of(parts.enhanced);
    if (parts.clip_baseline.defined()) b.l_clip_baseline = value_of(parts.clip_baseline);
    b.lambdas = lambdas;
    b.total = b.l_diff + lambdas.text * b.l_m_text + lambdas.fine * b.l_m_fine + lambdas.enhanced * b.l_enhanced;
    return out;
}

}  // namespace spf
