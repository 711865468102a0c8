#include "spf/denoiser.hpp"

#include <cmath>
#include <sstream>

#include "spf/errors.hpp"

namespace spf {

// ---------------------------------------------------------------------------
// Schedule and closed-form diffusion identities

NoiseSchedule NoiseSchedule::linear(int steps, double beta_start, double beta_end) {
    if (steps < 2) throw ArgumentError("NoiseSchedule: need at least 2 steps");
    NoiseSchedule s;
    s.steps = steps;
    s.betas.resize(static_cast<std::size_t>(steps));
    s.alphas_bar.resize(static_cast<std::size_t>(steps));
    double prod = 1.0;
    for (int i = 0; i < steps; ++i) {
        const double beta = beta_start + (beta_end - beta_start) * i / (steps - 1);
        s.betas[static_cast<std::size_t>(i)] = beta;
        prod *= 1.0 - beta;
        s.alphas_bar[static_cast<std::size_t>(i)] = prod;
    }
    return s;
}

double NoiseSchedule::alpha_bar(int t) const {
    if (t < 0 || t >= steps) throw ArgumentError("timestep " + std::to_string(t) + " outside [0, T)");
    return alphas_bar[static_cast<std::size_t>(t)];
}

torch::Tensor NoiseSchedule::alpha_bar_at(const torch::Tensor& t, torch::Dtype dtype) const {
    if (t.dim() != 1) throw ArgumentError("timesteps must be a 1-D tensor");
    if (t.numel() > 0 && (t.min().item<std::int64_t>() < 0 || t.max().item<std::int64_t>() >= steps)) {
        throw ArgumentError("timestep outside [0, T)");
    }
    auto table = torch::tensor(alphas_bar, torch::kFloat64);
    return table.index_select(0, t.to(torch::kInt64)).to(dtype).view({-1, 1, 1, 1});
}

torch::Tensor to_model_space(const torch::Tensor& image) { return image * 2.0 - 1.0; }
torch::Tensor to_image_space(const torch::Tensor& x) { return (x + 1.0) * 0.5; }

torch::Tensor forward_diffuse(const NoiseSchedule& schedule, const torch::Tensor& x0, const torch::Tensor& t,
                              const torch::Tensor& eps) {
    if (x0.sizes() != eps.sizes()) throw ArgumentError("forward_diffuse: eps shape differs from x0");
    auto ab = schedule.alpha_bar_at(t, x0.scalar_type());
    return ab.sqrt() * x0 + (1.0 - ab).sqrt() * eps;
}

torch::Tensor forward_diffuse(const NoiseSchedule& schedule, const torch::Tensor& x0, int t, const torch::Tensor& eps) {
    if (x0.sizes() != eps.sizes()) throw ArgumentError("forward_diffuse: eps shape differs from x0");
    const double ab = schedule.alpha_bar(t);
    return std::sqrt(ab) * x0 + std::sqrt(1.0 - ab) * eps;
}

torch::Tensor one_step_x0(const NoiseSchedule& schedule, const torch::Tensor& x_t, const torch::Tensor& t,
                          const torch::Tensor& eps_hat) {
    auto ab = schedule.alpha_bar_at(t, x_t.scalar_type());
    return (x_t - (1.0 - ab).sqrt() * eps_hat) / ab.sqrt();
}

torch::Tensor one_step_x0(const NoiseSchedule& schedule, const torch::Tensor& x_t, int t, const torch::Tensor& eps_hat) {
    const double ab = schedule.alpha_bar(t);
    return (x_t - std::sqrt(1.0 - ab) * eps_hat) / std::sqrt(ab);
}

// ---------------------------------------------------------------------------
// Building blocks

torch::Tensor variant_attention(const torch::Tensor& keys, const torch::Tensor& queries, const torch::Tensor& base) {
    const auto d = static_cast<double>(keys.size(-1));
    auto logits = torch::matmul(keys, queries.transpose(-1, -2)) / std::sqrt(d);
    return torch::softmax(logits, -1) * base.to(keys.scalar_type()).unsqueeze(-1);
}

std::string parameter_group(const std::string& name) {
    return name.rfind("xattn_", 0) == 0 ? kCrossAttentionGroup : kBaseGroup;
}

torch::Tensor timestep_features(const torch::Tensor& t, std::int64_t dim, torch::Dtype dtype) {
    const auto half = dim / 2;
    auto freqs = torch::exp(torch::arange(half, torch::kFloat64) * (-std::log(10000.0) / static_cast<double>(half)));
    auto args = t.to(torch::kFloat64).unsqueeze(1) * freqs.unsqueeze(0);
    return torch::cat({torch::sin(args), torch::cos(args)}, 1).to(dtype);
}

ResBlockImpl::ResBlockImpl(std::int64_t in, std::int64_t out, std::int64_t time_dim, std::int64_t groups) {
    norm1_ = register_module("norm1", torch::nn::GroupNorm(groups, in));
    conv1_ = register_module("conv1", torch::nn::Conv2d(torch::nn::Conv2dOptions(in, out, 3).padding(1)));
    time_proj_ = register_module("time_proj", torch::nn::Linear(time_dim, out));
    norm2_ = register_module("norm2", torch::nn::GroupNorm(groups, out));
    conv2_ = register_module("conv2", torch::nn::Conv2d(torch::nn::Conv2dOptions(out, out, 3).padding(1)));
    if (in != out) skip_ = register_module("skip", torch::nn::Conv2d(torch::nn::Conv2dOptions(in, out, 1)));
}

torch::Tensor ResBlockImpl::forward(const torch::Tensor& x, const torch::Tensor& temb) {
    auto h = conv1_->forward(torch::silu(norm1_->forward(x)));
    h = h + time_proj_->forward(torch::silu(temb)).unsqueeze(-1).unsqueeze(-1);
    h = conv2_->forward(torch::silu(norm2_->forward(h)));
    return h + (skip_ ? skip_->forward(x) : x);
}

CrossAttentionImpl::CrossAttentionImpl(std::int64_t channels, std::int64_t text_dim, std::int64_t heads,
                                       std::int64_t groups)
    : channels_(channels), heads_(heads) {
    if (channels % heads != 0) throw ArgumentError("CrossAttention: channels not divisible by heads");
    norm_ = register_module("norm", torch::nn::GroupNorm(groups, channels));
    to_q_ = register_module("to_q", torch::nn::Linear(torch::nn::LinearOptions(channels, channels).bias(false)));
    to_k_ = register_module("to_k", torch::nn::Linear(torch::nn::LinearOptions(text_dim, channels).bias(false)));
    to_v_ = register_module("to_v", torch::nn::Linear(torch::nn::LinearOptions(text_dim, channels).bias(false)));
    to_out_ = register_module("to_out", torch::nn::Linear(channels, channels));
}

torch::Tensor CrossAttentionImpl::forward(const torch::Tensor& x, const torch::Tensor& cond, const torch::Tensor& valid,
                                          const torch::Tensor& base, LayerTap* tap) {
    const auto b = x.size(0);
    const auto c = x.size(1);
    const auto hgt = x.size(2);
    const auto wid = x.size(3);
    const auto s = hgt * wid;
    const auto n = cond.size(1);
    const auto hd = c / heads_;

    auto h = norm_->forward(x).flatten(2).transpose(1, 2);  // [B,S,C]
    auto q = to_q_->forward(h);                               // [B,S,C]
    auto k = to_k_->forward(cond);                            // [B,N,C]
    auto v = to_v_->forward(cond);

    auto qh = q.view({b, s, heads_, hd}).transpose(1, 2);
    auto kh = k.view({b, n, heads_, hd}).transpose(1, 2);
    auto vh = v.view({b, n, heads_, hd}).transpose(1, 2);
    auto pad_bias = torch::zeros({b, 1, 1, n}, x.options()).masked_fill(valid.logical_not().view({b, 1, 1, n}), -1e9);
    auto scores = torch::matmul(qh, kh.transpose(-1, -2)) / std::sqrt(static_cast<double>(hd)) + pad_bias;
    auto attn = torch::softmax(scores, -1);  // [B,H,S,N]
    auto o = torch::matmul(attn, vh).transpose(1, 2).reshape({b, s, c});
    auto out = to_out_->forward(o).transpose(1, 2).reshape({b, c, hgt, wid});

    if (tap) {
        auto keys = k * base.to(x.scalar_type()).unsqueeze(-1);
        tap->keys = keys;
        tap->queries = q;
        tap->variant_attention = variant_attention(keys, q, base);
        tap->text_attention = attn;
        tap->base_mask = base;
        tap->height = hgt;
        tap->width = wid;
    }
    return x + out;
}

// ---------------------------------------------------------------------------
// U-shaped denoiser

DenoiserImpl::DenoiserImpl(DenoiserOptions options) : options_(options) {
    const auto [c0, c1, c2] = options_.channels;
    const auto td = options_.time_dim;
    const auto g = options_.groups;
    const auto dt = options_.text_dim;
    const auto hd = options_.heads;
    using torch::nn::Conv2d;
    using torch::nn::Conv2dOptions;

    time_mlp_ = register_module("time_mlp", torch::nn::Sequential(torch::nn::Linear(td / 2, td), torch::nn::SiLU(),
                                                                  torch::nn::Linear(td, td)));
    conv_in_ = register_module("conv_in", Conv2d(Conv2dOptions(options_.image_channels, c0, 3).padding(1)));
    down0_ = register_module("down0", ResBlock(c0, c0, td, g));
    down0_sample_ = register_module("down0_sample", Conv2d(Conv2dOptions(c0, c0, 3).stride(2).padding(1)));
    down1_ = register_module("down1", ResBlock(c0, c1, td, g));
    down1_sample_ = register_module("down1_sample", Conv2d(Conv2dOptions(c1, c1, 3).stride(2).padding(1)));
    mid0_ = register_module("mid0", ResBlock(c1, c2, td, g));
    xattn_mid_ = register_module("xattn_mid", CrossAttention(c2, dt, hd, g));
    mid1_ = register_module("mid1", ResBlock(c2, c2, td, g));
    up1_conv_ = register_module("up1_conv", Conv2d(Conv2dOptions(c2, c2, 3).padding(1)));
    up1_ = register_module("up1", ResBlock(c2 + c1, c1, td, g));
    xattn_up1_ = register_module("xattn_up1", CrossAttention(c1, dt, hd, g));
    up0_conv_ = register_module("up0_conv", Conv2d(Conv2dOptions(c1, c1, 3).padding(1)));
    up0_ = register_module("up0", ResBlock(c1 + c0, c0, td, g));
    xattn_up0_ = register_module("xattn_up0", CrossAttention(c0, dt, hd, g));
    norm_out_ = register_module("norm_out", torch::nn::GroupNorm(g, c0));
    conv_out_ = register_module("conv_out", Conv2d(Conv2dOptions(c0, options_.image_channels, 3).padding(1)));
}

torch::Tensor DenoiserImpl::forward(const torch::Tensor& x_t, const torch::Tensor& t, const BatchEncoding& cond,
                                    AttentionTap* tap) {
    const auto dtype = x_t.scalar_type();
    auto temb = time_mlp_->forward(timestep_features(t, options_.time_dim / 2, dtype));
    LayerTap* taps = nullptr;
    if (tap) {
        tap->layers.assign(kTappedLayers, LayerTap{});
        taps = tap->layers.data();
    }
    const auto& e = cond.embeddings;
    auto up = [](const torch::Tensor& h) {
        return torch::nn::functional::interpolate(
            h, torch::nn::functional::InterpolateFuncOptions().scale_factor(std::vector<double>{2.0, 2.0}).mode(
                   torch::kNearest));
    };

    auto h0 = down0_->forward(conv_in_->forward(x_t), temb);              // 32x32
    auto h1 = down1_->forward(down0_sample_->forward(h0), temb);          // 16x16
    auto h = mid0_->forward(down1_sample_->forward(h1), temb);            // 8x8
    h = xattn_mid_->forward(h, e, cond.valid, cond.base, taps ? &taps[0] : nullptr);
    h = mid1_->forward(h, temb);
    h = up1_conv_->forward(up(h));
    h = up1_->forward(torch::cat({h, h1}, 1), temb);                      // 16x16
    h = xattn_up1_->forward(h, e, cond.valid, cond.base, taps ? &taps[1] : nullptr);
    h = up0_conv_->forward(up(h));
    h = up0_->forward(torch::cat({h, h0}, 1), temb);                      // 32x32
    h = xattn_up0_->forward(h, e, cond.valid, cond.base, taps ? &taps[2] : nullptr);
    return conv_out_->forward(torch::silu(norm_out_->forward(h)));
}

std::vector<torch::Tensor> DenoiserImpl::parameters_in_group(const std::string& group) const {
    std::vector<torch::Tensor> out;
    for (const auto& p : named_parameters())
        if (parameter_group(p.key()) == group) out.push_back(p.value());
    return out;
}

torch::Tensor predict(Denoiser& model, const torch::Tensor& x_t, const torch::Tensor& t, const BatchEncoding& cond,
                      AttentionTap* tap) {
    const auto& o = model->options();
    if (x_t.dim() != 4 || x_t.size(1) != o.image_channels || x_t.size(2) != o.image_size ||
        x_t.size(3) != o.image_size) {
        std::ostringstream msg;
        msg << "predict: expected x_t of shape [B," << o.image_channels << "," << o.image_size << "," << o.image_size
            << "], got " << x_t.sizes();
        throw ArgumentError(msg.str());
    }
    if (t.dim() != 1 || t.size(0) != x_t.size(0)) throw ArgumentError("predict: t must be [B]");
    if (!cond.embeddings.defined() || cond.embeddings.size(0) != x_t.size(0) || cond.embeddings.size(2) != o.text_dim) {
        throw ArgumentError("predict: conditioning batch does not match x_t");
    }
    if (t.numel() > 0 && (t.min().item<std::int64_t>() < 0 || t.max().item<std::int64_t>() >= kTimesteps)) {
        throw ArgumentError("predict: timestep outside [0, T)");
    }
    return model->forward(x_t, t, cond.to(x_t.scalar_type()), tap);
}

Denoiser clone_denoiser(const Denoiser& model) {
    Denoiser copy(model->options());
    torch::NoGradGuard guard;
    auto dst = copy->named_parameters();
    for (const auto& p : model->named_parameters()) {
        auto& d = dst[p.key()];
        d.set_data(p.value().detach().clone());
        d.set_requires_grad(p.value().requires_grad());
    }
    auto dst_buffers = copy->named_buffers();
    for (const auto& b : model->named_buffers()) dst_buffers[b.key()].set_data(b.value().detach().clone());
    copy->train(model->is_training());
    return copy;
}

std::vector<int> sampler_timesteps(const NoiseSchedule& schedule, int steps) {
    std::vector<int> ts;
    for (int k = steps - 1; k >= 0; --k) {
        ts.push_back(static_cast<int>(std::lround(static_cast<double>(k) * (schedule.steps - 1) / (steps - 1))));
    }
    return ts;
}

torch::Tensor sample(Denoiser& model, const NoiseSchedule& schedule, const BatchEncoding& cond,
                     const std::vector<std::uint64_t>& seeds, int steps) {
    torch::NoGradGuard guard;
    const auto b = static_cast<std::int64_t>(seeds.size());
    if (cond.size() != b) throw ArgumentError("sample: one seed per conditioning row required");
    const auto& o = model->options();
    const auto dtype = model->parameters().front().scalar_type();
    const auto opts = torch::TensorOptions().dtype(dtype);
    const std::vector<std::int64_t> shape{o.image_channels, o.image_size, o.image_size};

    std::vector<at::Generator> gens;
    std::vector<torch::Tensor> init;
    for (auto s : seeds) {
        gens.push_back(at::make_generator<at::CPUGeneratorImpl>(s));
        init.push_back(torch::randn(shape, gens.back(), opts));
    }
    auto x = torch::stack(init);
    const auto ts = sampler_timesteps(schedule, steps);
    const bool was_training = model->is_training();
    model->eval();
    for (std::size_t i = 0; i < ts.size(); ++i) {
        const int t = ts[i];
        const double ab = schedule.alpha_bar(t);
        const double ab_prev = i + 1 < ts.size() ? schedule.alpha_bar(ts[i + 1]) : 1.0;
        auto tt = torch::full({b}, t, torch::kInt64);
        auto eps = predict(model, x, tt, cond, nullptr);
        auto x0 = one_step_x0(schedule, x, t, eps).clamp(-1.0, 1.0);
        if (i + 1 == ts.size()) {
            x = x0;
            break;
        }
        const double beta = 1.0 - ab / ab_prev;
        const double c_x0 = std::sqrt(ab_prev) * beta / (1.0 - ab);
        const double c_xt = std::sqrt(1.0 - beta) * (1.0 - ab_prev) / (1.0 - ab);
        const double var = beta * (1.0 - ab_prev) / (1.0 - ab);
        std::vector<torch::Tensor> z;
        for (auto& g : gens) z.push_back(torch::randn(shape, g, opts));
        x = c_x0 * x0 + c_xt * x + std::sqrt(var) * torch::stack(z);
    }
    if (was_training) model->train();
    return to_image_space(x).clamp(0.0, 1.0);
}

}  // namespace spf
