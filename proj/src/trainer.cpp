#include "spf/trainer.hpp"

#include <cmath>
#include <fstream>
#include <iostream>
#include <numeric>
#include <random>

#include "spf/errors.hpp"
#include "spf/sfcm.hpp"

namespace spf {
namespace {

std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

struct NoiseDraw {
    torch::Tensor t;
    torch::Tensor eps;
};

NoiseDraw draw_noise(std::uint64_t seed, int step, std::int64_t batch, int timesteps) {
    auto gen = at::make_generator<at::CPUGeneratorImpl>(step_seed(seed, step));
    NoiseDraw d;
    d.t = torch::randint(0, timesteps, {batch}, gen, torch::kInt64);
    d.eps = torch::randn({batch, 3, kImageSize, kImageSize}, gen, torch::kFloat32);
    return d;
}

torch::Tensor batch_images(const std::vector<const PromptTriple*>& batch) {
    std::vector<const RgbImage*> imgs;
    imgs.reserve(batch.size());
    for (const auto* t : batch) imgs.push_back(&t->image);
    return images_to_tensor(imgs);
}

std::vector<std::int64_t> to_vector(const torch::Tensor& t) {
    auto c = t.contiguous();
    return {c.data_ptr<std::int64_t>(), c.data_ptr<std::int64_t>() + c.numel()};
}

torch::optim::AdamWOptions adamw_options(const TrainConfig& c) {
    return torch::optim::AdamWOptions(c.learning_rate).betas({c.beta1, c.beta2}).weight_decay(c.weight_decay);
}

class StepLog {
public:
    explicit StepLog(const std::filesystem::path& path, bool append = false) {
        if (path.empty()) return;
        if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
        out_.open(path, append ? std::ios::app : std::ios::trunc);
        if (!out_) throw StateError("cannot open step log " + path.string());
    }
    void write(const nlohmann::json& record) {
        if (out_.is_open()) out_ << record.dump() << "\n" << std::flush;
    }

private:
    std::ofstream out_;
};

Denoiser train_diffusion(Denoiser model, const std::vector<PromptTriple>& data, const TextCodec& codec,
                         const TrainConfig& config, const RunOptions& options, bool with_target,
                         nlohmann::json metadata) {
    if (data.empty()) throw ArgumentError("training data is empty");
    config.validate();
    const auto schedule = NoiseSchedule::linear();
    torch::optim::AdamW opt(model->parameters(), adamw_options(config));
    BatchSchedule batches(data.size(), config.batch_size, config.seed);
    const int total = config.total_steps(data.size());
    StepLog log(options.log);
    model->train();
    for (int step = 0; step < total; ++step) {
        std::vector<const PromptTriple*> batch;
        std::vector<TokenizedText> toks;
        for (auto i : batches.batch(step)) {
            batch.push_back(&data[i]);
            toks.push_back(codec.tokenize(data[i].base_text, with_target ? data[i].target_text : ""));
        }
        auto cond = codec.encode_batch(toks);
        auto noise = draw_noise(config.seed, step, static_cast<std::int64_t>(batch.size()), schedule.steps);
        auto x_t = forward_diffuse(schedule, to_model_space(batch_images(batch)), noise.t, noise.eps);
        auto loss = diffusion_loss(noise.eps, predict(model, x_t, noise.t, cond));
        const double value = loss.item<double>();
        if (!std::isfinite(value)) {
            throw DivergenceError(std::string(to_string(config.stage)) + " diverged at step " + std::to_string(step));
        }
        opt.zero_grad();
        loss.backward();
        opt.step();
        nlohmann::json record = {{"stage", to_string(config.stage)}, {"step", step}, {"t", to_vector(noise.t)},
                                 {"l_diff", value}};
        if ((step + 1) % config.log_every == 0 || step + 1 == total) log.write(record);
        if (options.on_step) options.on_step(record);
    }
    model->eval();
    if (!options.checkpoint.empty()) {
        metadata["stage"] = to_string(config.stage);
        metadata["step"] = total;
        metadata["config_hash"] = config.hash();
        metadata["config"] = config.to_text();
        save_denoiser(options.checkpoint, model, metadata);
    }
    return model;
}

}  // namespace

// ---------------------------------------------------------------------------
// Checkpoints

void append_optimizer_state(Checkpoint& ckpt, torch::optim::AdamW& optimizer) {
    auto& state = optimizer.state();
    std::int64_t step = 0;
    std::size_t index = 0;
    for (auto& group : optimizer.param_groups()) {
        for (auto& p : group.params()) {
            auto it = state.find(p.unsafeGetTensorImpl());
            const auto base = "optim." + std::to_string(index++);
            if (it == state.end()) continue;
            auto& s = static_cast<torch::optim::AdamWParamState&>(*it->second);
            step = s.step();
            ckpt.arrays.push_back(to_named_array(base + ".exp_avg", "optimizer", s.exp_avg()));
            ckpt.arrays.push_back(to_named_array(base + ".exp_avg_sq", "optimizer", s.exp_avg_sq()));
        }
    }
    ckpt.metadata["optimizer_step"] = step;
}

void load_optimizer_state(const Checkpoint& ckpt, torch::optim::AdamW& optimizer) {
    if (!ckpt.metadata.contains("optimizer_step")) throw StateError("checkpoint carries no optimizer state");
    const auto step = ckpt.metadata.at("optimizer_step").get<std::int64_t>();
    auto& state = optimizer.state();
    std::size_t index = 0;
    for (auto& group : optimizer.param_groups()) {
        for (auto& p : group.params()) {
            const auto base = "optim." + std::to_string(index++);
            const auto* m = ckpt.find(base + ".exp_avg");
            const auto* v = ckpt.find(base + ".exp_avg_sq");
            if (!m || !v) continue;
            auto s = std::make_unique<torch::optim::AdamWParamState>();
            s->step(step);
            s->exp_avg(to_tensor(*m).to(p.scalar_type()).view(p.sizes()).clone());
            s->exp_avg_sq(to_tensor(*v).to(p.scalar_type()).view(p.sizes()).clone());
            state[p.unsafeGetTensorImpl()] = std::move(s);
        }
    }
}

void save_denoiser(const std::filesystem::path& path, const Denoiser& model, nlohmann::json metadata,
                   torch::optim::AdamW* optimizer) {
    const auto schedule = NoiseSchedule::linear();
    metadata["kind"] = "denoiser";
    metadata["digest"] = parameter_digest(*model);
    metadata["schedule"] = {{"steps", schedule.steps},
                            {"beta_start", schedule.betas.front()},
                            {"beta_end", schedule.betas.back()}};
    Checkpoint ckpt;
    ckpt.metadata = std::move(metadata);
    append_module(ckpt, *model, "model.", parameter_group);
    if (optimizer) append_optimizer_state(ckpt, *optimizer);
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    save_checkpoint(path, ckpt);
}

LoadedDenoiser load_denoiser(const std::filesystem::path& path) {
    LoadedDenoiser out;
    out.checkpoint = load_checkpoint(path);
    out.metadata = out.checkpoint.metadata;
    if (out.metadata.value("kind", "") != "denoiser") throw StateError(path.string() + " is not a denoiser checkpoint");
    out.model = Denoiser(DenoiserOptions{});
    load_module(*out.model, out.checkpoint, "model.");
    out.model->eval();
    return out;
}

// ---------------------------------------------------------------------------
// Schedules

BatchSchedule::BatchSchedule(std::size_t dataset_size, int batch_size, std::uint64_t seed)
    : n_(dataset_size), batch_size_(batch_size), seed_(seed) {
    if (dataset_size == 0 || batch_size < 1) throw ArgumentError("BatchSchedule: empty dataset or batch");
    steps_per_epoch_ = static_cast<int>(std::max<std::size_t>(1, n_ / static_cast<std::size_t>(batch_size_)));
}

std::vector<std::size_t> BatchSchedule::batch(int step) const {
    const int epoch = step / steps_per_epoch_;
    const int within = step % steps_per_epoch_;
    std::vector<std::size_t> order(n_);
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 rng(splitmix64(seed_ ^ splitmix64(static_cast<std::uint64_t>(epoch) + 0x5EED)));
    std::shuffle(order.begin(), order.end(), rng);
    std::vector<std::size_t> out;
    const auto start = static_cast<std::size_t>(within) * static_cast<std::size_t>(batch_size_);
    for (std::size_t k = 0; k < static_cast<std::size_t>(batch_size_); ++k) out.push_back(order[(start + k) % n_]);
    return out;
}

std::uint64_t step_seed(std::uint64_t seed, int step) {
    return splitmix64(splitmix64(seed) ^ static_cast<std::uint64_t>(step));
}

// ---------------------------------------------------------------------------
// Stage 0 / stage 1

Denoiser pretrain_base(const std::vector<PromptTriple>& data, const TextCodec& codec, const TrainConfig& config,
                       const RunOptions& options) {
    torch::manual_seed(config.seed);
    Denoiser model(DenoiserOptions{});
    return train_diffusion(model, data, codec, config, options, false, nlohmann::json::object());
}

Denoiser stage1(const Denoiser& base, const std::vector<PromptTriple>& data, const TextCodec& codec,
                const TrainConfig& config, const RunOptions& options) {
    auto model = clone_denoiser(base);
    for (auto& p : model->parameters()) p.set_requires_grad(true);
    return train_diffusion(model, data, codec, config, options, true, {{"parent_digest", parameter_digest(*base)}});
}

// ---------------------------------------------------------------------------
// Stage 2

ModelPair ModelPair::make(const Denoiser& original, const Denoiser& initial) {
    ModelPair pair;
    pair.reference = clone_denoiser(original);
    for (auto& p : pair.reference->parameters()) p.set_requires_grad(false);
    pair.reference->eval();
    pair.response = clone_denoiser(initial);
    pair.reference_digest = parameter_digest(*pair.reference);
    return pair;
}

void ModelPair::verify_reference() const {
    if (parameter_digest(*reference) != reference_digest) throw StateError("reference model parameters changed");
}

Stage2Trainer::Stage2Trainer(ModelPair& pair, const AlignerBundle& aligner, const TrainConfig& config)
    : pair_(pair), aligner_(aligner), config_(config) {
    config_.validate();
    for (const auto& item : pair_.response->named_parameters()) {
        const bool train =
            config_.train_scope == TrainScope::full || parameter_group(item.key()) == kCrossAttentionGroup;
        auto p = item.value();
        p.set_requires_grad(train);
        if (train) trainable_.push_back(p);
    }
    if (trainable_.empty()) throw StateError("stage 2 has no trainable parameters");
    optimizer_ = std::make_unique<torch::optim::AdamW>(trainable_, adamw_options(config_));
}

double Stage2Trainer::gamma(const std::string& phrase, const std::string& target) {
    const auto key = phrase + "\x1f" + target;
    auto it = gamma_cache_.find(key);
    if (it != gamma_cache_.end()) return it->second;
    const double g = similarity(aligner_.codec.pooled_standalone(phrase), aligner_.codec.pooled_standalone(target));
    gamma_cache_.emplace(key, g);
    return g;
}

torch::Tensor Stage2Trainer::target_embedding(const std::string& target) {
    auto it = target_cache_.find(target);
    if (it != target_cache_.end()) return it->second;
    auto e = aligner_.embed_text(target);
    target_cache_.emplace(target, e);
    return e;
}

LossBreakdown Stage2Trainer::step(const std::vector<const PromptTriple*>& batch, int step_index, Stage2Trace* trace) {
    if (batch.empty()) throw ArgumentError("stage-2 step: empty batch");
    const auto& codec = aligner_.codec;
    const auto b = static_cast<std::int64_t>(batch.size());
    std::vector<TokenizedText> ref_toks, res_toks;
    std::vector<std::vector<double>> gammas;
    std::vector<bool> has_target;
    std::vector<torch::Tensor> targets;
    for (const auto* t : batch) {
        if (t->target_text.empty()) throw ArgumentError("stage-2 step: triple without target text");
        ref_toks.push_back(codec.tokenize(t->base_text, ""));
        res_toks.push_back(codec.tokenize(t->base_text, t->target_text));
        std::vector<double> g;
        for (const auto& phrase : res_toks.back().phrases) g.push_back(gamma(phrase, t->target_text));
        gammas.push_back(std::move(g));
        has_target.push_back(true);
        targets.push_back(target_embedding(t->target_text));
    }
    auto cond_ref = codec.encode_batch(ref_toks);
    auto cond_res = codec.encode_batch(res_toks);

    // One (t, eps) draw, one x_t: both paths see identical inputs.
    auto noise = draw_noise(config_.seed, step_index, b, schedule_.steps);
    auto images = batch_images(batch);
    auto x_t = forward_diffuse(schedule_, to_model_space(images), noise.t, noise.eps);

    AttentionTap tap_ref, tap_res;
    torch::Tensor eps_ref;
    {
        torch::NoGradGuard guard;
        eps_ref = predict(pair_.reference, x_t, noise.t, cond_ref, &tap_ref);
    }
    auto eps_res = predict(pair_.response, x_t, noise.t, cond_res, &tap_res);

    torch::Tensor refined;
    if (config_.use_sfcm) {
        refined = build_refined_batch(eps_ref, eps_res.detach(), tap_res, cond_res.phrase_spans, gammas, has_target);
    } else {
        refined = torch::zeros({b, kMapSize, kMapSize});
    }

    LossParts parts;
    parts.diff = diffusion_loss(noise.eps, eps_res);
    if (config_.use_text_loss) parts.m_text = masked_text_loss(tap_ref, tap_res, refined);
    if (config_.use_fine_loss) parts.m_fine = masked_fine_loss(tap_ref, tap_res, refined);
    if (config_.use_enhanced) {
        auto x0_hat = to_image_space(one_step_x0(schedule_, x_t, noise.t, eps_res));
        auto target = torch::stack(targets);
        if (config_.enhancement == Enhancement::difference) {
            parts.enhanced = enhancement_loss(aligner_, x0_hat, images, target);
        } else {
            parts.enhanced = clip_baseline_loss(aligner_, x0_hat, target);
            parts.clip_baseline = parts.enhanced;
        }
    }
    auto weighted = total_loss(parts, config_.lambdas);
    if (!std::isfinite(weighted.breakdown.total)) {
        throw DivergenceError("stage 2 diverged at step " + std::to_string(step_index));
    }
    optimizer_->zero_grad();
    weighted.total.backward();
    optimizer_->step();

    if (trace) {
        trace->reference_x_t = x_t;
        trace->response_x_t = x_t;
        trace->reference_t = noise.t;
        trace->response_t = noise.t;
        trace->refined = refined;
        trace->eps_reference = eps_ref;
        trace->eps_response = eps_res.detach();
    }
    return weighted.breakdown;
}

Denoiser run_stage2(ModelPair& pair, const std::vector<PromptTriple>& data, const AlignerBundle& aligner,
                    const TrainConfig& config, const RunOptions& options) {
    std::vector<const PromptTriple*> usable;
    for (const auto& t : data)
        if (!t.target_text.empty()) usable.push_back(&t);
    if (usable.size() < data.size()) {
        std::cerr << "warning: stage 2 skips " << (data.size() - usable.size()) << " triples without target text\n";
    }
    if (usable.empty()) throw ArgumentError("stage 2: no triples with target text");

    Stage2Trainer trainer(pair, aligner, config);
    int start = 0;
    if (!options.resume_from.empty()) {
        auto ckpt = load_checkpoint(options.resume_from);
        if (ckpt.metadata.value("stage", "") != "stage2") throw StateError("resume checkpoint is not a stage-2 checkpoint");
        if (ckpt.metadata.value("config_hash", "") != config.hash()) {
            throw StateError("resume checkpoint was written with a different config");
        }
        load_module(*pair.response, ckpt, "model.");
        load_optimizer_state(ckpt, trainer.optimizer());
        start = ckpt.metadata.at("step").get<int>();
    }

    BatchSchedule batches(usable.size(), config.batch_size, config.seed);
    const int total = config.total_steps(usable.size());
    const int stop = options.stop_at_step > 0 ? std::min(options.stop_at_step, total) : total;
    StepLog log(options.log, start > 0);

    auto checkpoint = [&](int steps_done) {
        if (options.checkpoint.empty()) return;
        nlohmann::json meta = {{"stage", "stage2"},
                               {"step", steps_done},
                               {"total_steps", total},
                               {"complete", steps_done >= total},
                               {"config_hash", config.hash()},
                               {"config", config.to_text()},
                               {"reference_digest", pair.reference_digest}};
        save_denoiser(options.checkpoint, pair.response, meta, &trainer.optimizer());
    };

    pair.response->train();
    for (int step = start; step < stop; ++step) {
        std::vector<const PromptTriple*> batch;
        for (auto i : batches.batch(step)) batch.push_back(usable[i]);
        Stage2Trace trace;
        auto loss = trainer.step(batch, step, &trace);
        auto record = loss.to_json();
        record["stage"] = "stage2";
        record["step"] = step;
        record["t"] = to_vector(trace.response_t);
        if ((step + 1) % config.log_every == 0 || step + 1 == stop) log.write(record);
        if (options.on_step) options.on_step(record);
        if (config.checkpoint_every > 0 && (step + 1) % config.checkpoint_every == 0 && step + 1 < stop) {
            checkpoint(step + 1);
        }
    }
    pair.response->eval();
    pair.verify_reference();
    checkpoint(stop);
    return pair.response;
}

}  // namespace spf
