#pragma once

// Shared fixtures for the unit tests: small untrained models, temp dirs and
// finite-difference gradient checks.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <array>
#include <functional>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "spf/aligner.hpp"
#include "spf/denoiser.hpp"
#include "spf/spriteworld.hpp"
#include "spf/textcodec.hpp"

namespace spf_test {

inline spf::AlignerBundle untrained_aligner(std::uint64_t seed = 11) {
    torch::manual_seed(seed);
    spf::Aligner model(spf::Vocabulary::builtin().size());
    return spf::make_bundle(model);
}

inline spf::Denoiser untrained_denoiser(std::uint64_t seed = 5) {
    torch::manual_seed(seed);
    spf::Denoiser model;
    return model;
}

/// A fresh, empty directory under the system temp dir.
inline std::filesystem::path temp_dir(const std::string& name) {
    auto dir = std::filesystem::temp_directory_path() / ("spf_test_" + name);
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

/// Relative error |a - n| / max(|a|, |n|) between the autograd gradient a and
/// the central-difference gradient n of a scalar function of `x`, in double
/// precision. Norms are taken over the whole gradient.
inline double fd_gradient_error(const std::function<torch::Tensor(const torch::Tensor&)>& f, torch::Tensor x,
                                double h = 1e-6) {
    x = x.detach().to(torch::kFloat64).clone().set_requires_grad(true);
    auto y = f(x);
    auto analytic = torch::autograd::grad({y}, {x}, {}, false, false, true)[0];
    if (!analytic.defined()) analytic = torch::zeros_like(x);
    analytic = analytic.contiguous();
    auto base = x.detach().clone().contiguous();
    auto flat = base.view({-1});
    auto a = analytic.view({-1});
    auto numeric = torch::zeros_like(flat);
    torch::NoGradGuard guard;
    for (std::int64_t i = 0; i < flat.numel(); ++i) {
        const double orig = flat[i].item<double>();
        flat[i] = orig + h;
        const double up = f(base).item<double>();
        flat[i] = orig - h;
        const double down = f(base).item<double>();
        flat[i] = orig;
        numeric[i] = (up - down) / (2 * h);
    }
    const double scale = std::max(a.norm().item<double>(), numeric.norm().item<double>());
    if (scale == 0.0) return 0.0;
    return (a - numeric).norm().item<double>() / scale;
}

/// A one-layer tap built from raw keys [B,N,d] and queries [B,S,d]; the
/// variant attention is recomputed, so gradients reach both inputs.
inline spf::LayerTap make_layer(const torch::Tensor& keys, const torch::Tensor& queries, const torch::Tensor& base,
                                std::int64_t height, std::int64_t width) {
    spf::LayerTap l;
    l.base_mask = base;
    l.keys = keys * base.to(keys.scalar_type()).unsqueeze(-1);
    l.queries = queries;
    l.variant_attention = spf::variant_attention(l.keys, queries, base);
    l.height = height;
    l.width = width;
    return l;
}

/// Eq. 3 computed directly per token: softmax over spatial of k.q / sqrt(d),
/// then the weighted sum of query rows. keys [N,d], queries [S,d] -> [N,d].
inline torch::Tensor direct_variant_feature(const torch::Tensor& keys, const torch::Tensor& queries) {
    const auto n = keys.size(0), s = queries.size(0), d = keys.size(1);
    auto out = torch::zeros({n, d}, keys.options());
    for (std::int64_t i = 0; i < n; ++i) {
        std::vector<double> logits(static_cast<std::size_t>(s));
        double mx = -1e300;
        for (std::int64_t j = 0; j < s; ++j) {
            logits[j] = (keys[i] * queries[j]).sum().item<double>() / std::sqrt(static_cast<double>(d));
            mx = std::max(mx, logits[j]);
        }
        double z = 0;
        for (double l : logits) z += std::exp(l - mx);
        for (std::int64_t j = 0; j < s; ++j) out[i] += std::exp(logits[j] - mx) / z * queries[j];
    }
    return out;
}

inline torch::Tensor randn64(std::vector<std::int64_t> shape, std::uint64_t seed) {
    return torch::randn(shape, at::make_generator<at::CPUGeneratorImpl>(seed), torch::kFloat64);
}

// Three-layer taps with tokens=3, channels=4 and spatial 8 (2x4), 16, 64.
struct TapPair {
    spf::AttentionTap ref, res;
    std::vector<torch::Tensor> kr, qr, ks, qs;
    torch::Tensor base = torch::tensor({true, true, false}).view({1, 3});
    static constexpr std::array<std::array<std::int64_t, 2>, 3> kSides{{{2, 4}, {4, 4}, {8, 8}}};

    explicit TapPair(std::uint64_t seed, std::int64_t batch = 1) {
        base = base.expand({batch, 3}).contiguous();
        for (std::size_t j = 0; j < 3; ++j) {
            const auto s = kSides[j][0] * kSides[j][1];
            kr.push_back(randn64({batch, 3, 4}, seed + 10 * j));
            qr.push_back(randn64({batch, s, 4}, seed + 10 * j + 1));
            ks.push_back(randn64({batch, 3, 4}, seed + 10 * j + 2));
            qs.push_back(randn64({batch, s, 4}, seed + 10 * j + 3));
        }
        rebuild();
    }
    void rebuild() {
        ref.layers.clear();
        res.layers.clear();
        for (std::size_t j = 0; j < 3; ++j) {
            ref.layers.push_back(make_layer(kr[j], qr[j], base, kSides[j][0], kSides[j][1]));
            res.layers.push_back(make_layer(ks[j], qs[j], base, kSides[j][0], kSides[j][1]));
        }
    }
};

inline spf::AttributeVector attrs(spf::FaceShape f, spf::SkinTone s, spf::HairColor h, spf::Background b, int pose,
                                  std::optional<spf::TargetAttr> target) {
    spf::AttributeVector a;
    a.face_shape = f;
    a.skin_tone = s;
    a.hair_color = h;
    a.background = b;
    a.pose_offset = pose;
    a.target_attr = target;
    return a;
}

}  // namespace spf_test
