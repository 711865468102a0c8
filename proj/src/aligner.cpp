#include "spf/aligner.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include "spf/checkpoint.hpp"
#include "spf/config.hpp"
#include "spf/errors.hpp"

namespace spf {
namespace {

namespace F = torch::nn::functional;

torch::Tensor normalize_rows(const torch::Tensor& x) { return F::normalize(x, F::NormalizeFuncOptions().dim(-1)); }

std::set<std::string> phrase_set(const PromptTriple& t) {
    auto phrases = split_phrases(t.base_text);
    std::set<std::string> out(phrases.begin(), phrases.end());
    if (!t.target_text.empty()) out.insert(t.target_text);
    return out;
}

struct TrainCaption {
    TokenizedText tokens;
    std::set<std::string> phrases;
};

TrainCaption sample_caption(const PromptTriple& t, double subset_rate, std::mt19937_64& rng) {
    auto base = split_phrases(t.base_text);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::vector<bool> keep(base.size() + 1, true);
    const bool has_target = !t.target_text.empty();
    if (unit(rng) < subset_rate) {
        do {
            for (std::size_t i = 0; i < keep.size(); ++i) keep[i] = unit(rng) < 0.5;
            if (!has_target) keep.back() = false;
        } while (std::none_of(keep.begin(), keep.end(), [](bool b) { return b; }));
    }
    std::string base_text;
    TrainCaption c;
    for (std::size_t i = 0; i < base.size(); ++i) {
        if (!keep[i]) continue;
        if (!base_text.empty()) base_text += ", ";
        base_text += base[i];
        c.phrases.insert(base[i]);
    }
    std::string target_text;
    if (has_target && keep.back()) {
        target_text = t.target_text;
        c.phrases.insert(target_text);
    }
    c.tokens = tokenize(base_text, target_text);
    return c;
}

// Multi-positive InfoNCE: -log of the softmax mass on the positives, per row.
torch::Tensor multi_positive_nce(const torch::Tensor& logits, const torch::Tensor& positive) {
    auto all = torch::logsumexp(logits, 1);
    auto pos = torch::logsumexp(logits.masked_fill(positive.logical_not(), -1e9), 1);
    return (all - pos).mean();
}

}  // namespace

ImageEncoderImpl::ImageEncoderImpl(std::int64_t dim) {
    using torch::nn::Conv2d;
    using torch::nn::Conv2dOptions;
    conv1_ = register_module("conv1", Conv2d(Conv2dOptions(3, 32, 3).stride(2).padding(1)));
    conv2_ = register_module("conv2", Conv2d(Conv2dOptions(32, 64, 3).stride(2).padding(1)));
    conv3_ = register_module("conv3", Conv2d(Conv2dOptions(64, 64, 3).stride(2).padding(1)));
    conv4_ = register_module("conv4", Conv2d(Conv2dOptions(64, 64, 3).stride(2).padding(1)));
    proj_ = register_module("proj", torch::nn::Linear(64 * 2 * 2, dim));
}

torch::Tensor ImageEncoderImpl::forward(const torch::Tensor& images) {
    auto h = torch::silu(conv1_->forward(images - 0.5));
    h = torch::silu(conv2_->forward(h));
    h = torch::silu(conv3_->forward(h));
    h = torch::silu(conv4_->forward(h));
    return proj_->forward(h.flatten(1));
}

AlignerImpl::AlignerImpl(std::int64_t vocab_size, std::int64_t dim) {
    image_encoder_ = register_module("image_encoder", ImageEncoder(dim));
    TextEncoderOptions topts;
    topts.vocab_size = vocab_size;
    topts.dim = dim;
    text_encoder_ = register_module("text_encoder", TextEncoder(topts));
    log_temperature_ = register_parameter("log_temperature", torch::full({1}, std::log(10.0)));
}

torch::Tensor AlignerImpl::embed_image(const torch::Tensor& images) {
    return normalize_rows(image_encoder_->forward(images.clamp(0.0, 1.0)));
}

torch::Tensor AlignerImpl::embed_tokens(const torch::Tensor& ids, const torch::Tensor& valid) {
    return normalize_rows(TextEncoderImpl::pool(text_encoder_->forward(ids, valid), valid));
}

// ---------------------------------------------------------------------------
// Frozen bundle

torch::Tensor AlignerBundle::embed_text(std::string_view text) const {
    return normalize_rows(codec.pooled_standalone(text));
}

torch::Tensor AlignerBundle::embed_image(const torch::Tensor& images) const {
    Aligner m = model;
    const auto dtype = m->parameters().front().scalar_type();
    if (images.dim() == 3) return m->embed_image(images.unsqueeze(0).to(dtype))[0];
    return m->embed_image(images.to(dtype));
}

void AlignerBundle::verify_frozen() const {
    if (parameter_digest(*model) != digest) throw StateError("aligner parameters changed after freezing");
}

AlignerBundle make_bundle(Aligner model, const Vocabulary& vocab) {
    for (auto& p : model->parameters()) p.set_requires_grad(false);
    model->eval();
    AlignerBundle b;
    b.model = model;
    b.codec = TextCodec(vocab, model->text_encoder());
    b.digest = parameter_digest(*model);
    return b;
}

double similarity(const torch::Tensor& a, const torch::Tensor& b) {
    auto a64 = a.to(torch::kFloat64).flatten();
    auto b64 = b.to(torch::kFloat64).flatten();
    const double na = a64.norm().item<double>();
    const double nb = b64.norm().item<double>();
    if (na == 0.0 || nb == 0.0) throw ArgumentError("similarity: zero vector");
    return std::clamp(a64.dot(b64).item<double>() / (na * nb), -1.0, 1.0);
}

torch::Tensor cosine_rows(const torch::Tensor& a, const torch::Tensor& b) {
    auto an = normalize_rows(a);
    auto bn = normalize_rows(b);
    return 1.0 - 0.5 * (an - bn).pow(2).sum(-1);
}

torch::Tensor difference_vector(const AlignerBundle& aligner, const torch::Tensor& images,
                                const torch::Tensor& target_text_embedding) {
    auto img = aligner.embed_image(images);
    return img - normalize_rows(target_text_embedding.to(img.scalar_type()));
}

torch::Tensor difference_vector(const AlignerBundle& aligner, const torch::Tensor& images,
                                const TextEncoding& target_encoding) {
    if (!target_encoding.has_target()) throw ArgumentError("difference_vector: empty target text");
    return difference_vector(aligner, images, target_encoding.pooled);
}

// ---------------------------------------------------------------------------
// Pretraining

torch::Tensor image_to_tensor(const RgbImage& image) {
    auto t = torch::from_blob(const_cast<std::uint8_t*>(image.rgb.data()), {image.height, image.width, 3}, torch::kUInt8);
    return t.permute({2, 0, 1}).to(torch::kFloat32) / 255.0;
}

torch::Tensor images_to_tensor(const std::vector<const RgbImage*>& images) {
    std::vector<torch::Tensor> out;
    out.reserve(images.size());
    for (const auto* im : images) out.push_back(image_to_tensor(*im));
    return torch::stack(out);
}

RgbImage tensor_to_image(const torch::Tensor& image) {
    auto hwc = (image.detach().to(torch::kFloat64).clamp(0.0, 1.0) * 255.0).round().to(torch::kUInt8).permute({1, 2, 0}).contiguous();
    RgbImage out;
    out.height = static_cast<int>(hwc.size(0));
    out.width = static_cast<int>(hwc.size(1));
    out.rgb.assign(hwc.data_ptr<std::uint8_t>(), hwc.data_ptr<std::uint8_t>() + hwc.numel());
    return out;
}

double retrieval_accuracy(Aligner& model, const std::vector<PromptTriple>& triples, int batch_size) {
    torch::NoGradGuard guard;
    std::size_t correct = 0, total = 0;
    for (std::size_t start = 0; start < triples.size(); start += static_cast<std::size_t>(batch_size)) {
        const auto end = std::min(triples.size(), start + static_cast<std::size_t>(batch_size));
        std::vector<const RgbImage*> imgs;
        std::vector<TokenizedText> toks;
        std::vector<std::string> captions;
        for (auto i = start; i < end; ++i) {
            imgs.push_back(&triples[i].image);
            toks.push_back(tokenize(triples[i].base_text, triples[i].target_text));
            captions.push_back(triples[i].base_text + "|" + triples[i].target_text);
        }
        auto [ids, valid] = token_tensors(toks);
        auto sims = torch::matmul(model->embed_image(images_to_tensor(imgs)), model->embed_tokens(ids, valid).t());
        auto best = sims.argmax(1);
        for (std::size_t i = 0; i < imgs.size(); ++i) {
            if (captions[static_cast<std::size_t>(best[static_cast<std::int64_t>(i)].item<std::int64_t>())] == captions[i]) {
                ++correct;
            }
            ++total;
        }
    }
    return total ? static_cast<double>(correct) / static_cast<double>(total) : 0.0;
}

AlignerTrainResult pretrain_aligner(const std::vector<PromptTriple>& dataset, const AlignerTrainConfig& config,
                                    const std::function<void(int, double, double)>& progress) {
    if (dataset.size() < 2) throw ArgumentError("pretrain_aligner: dataset too small");
    const auto holdout_n = std::max<std::size_t>(
        1, static_cast<std::size_t>(std::ceil(config.holdout_fraction * static_cast<double>(dataset.size()))));
    if (holdout_n >= dataset.size()) throw ArgumentError("pretrain_aligner: holdout leaves no training data");
    const std::vector<PromptTriple> holdout(dataset.end() - static_cast<std::ptrdiff_t>(holdout_n), dataset.end());
    const auto train_n = dataset.size() - holdout_n;

    torch::manual_seed(config.seed);
    Aligner model(Vocabulary::builtin().size());
    model->train();
    torch::optim::AdamW opt(model->parameters(),
                            torch::optim::AdamWOptions(config.learning_rate).weight_decay(config.weight_decay));
    std::mt19937_64 rng(config.seed ^ 0xA11A11A11ULL);

    std::vector<std::size_t> order(train_n);
    std::iota(order.begin(), order.end(), 0);
    std::size_t cursor = train_n;
    const auto batch = std::min<std::size_t>(static_cast<std::size_t>(config.batch_size), train_n);

    AlignerTrainResult result;
    result.model = model;
    for (int step = 1; step <= config.max_steps; ++step) {
        std::vector<const RgbImage*> imgs;
        std::vector<TokenizedText> toks;
        std::vector<std::set<std::string>> image_phrases, text_phrases;
        for (std::size_t k = 0; k < batch; ++k) {
            if (cursor >= train_n) {
                std::shuffle(order.begin(), order.end(), rng);
                cursor = 0;
            }
            const auto& t = dataset[order[cursor++]];
            imgs.push_back(&t.image);
            auto cap = sample_caption(t, config.subset_caption_rate, rng);
            toks.push_back(cap.tokens);
            image_phrases.push_back(phrase_set(t));
            text_phrases.push_back(std::move(cap.phrases));
        }
        // positive[i][j]: caption j only names attributes image i has.
        auto positive = torch::zeros({static_cast<std::int64_t>(batch), static_cast<std::int64_t>(batch)}, torch::kBool);
        auto pa = positive.accessor<bool, 2>();
        for (std::size_t i = 0; i < batch; ++i) {
            for (std::size_t j = 0; j < batch; ++j) {
                pa[i][j] = std::includes(image_phrases[i].begin(), image_phrases[i].end(), text_phrases[j].begin(),
                                         text_phrases[j].end());
            }
        }
        auto [ids, valid] = token_tensors(toks);
        auto img = model->embed_image(images_to_tensor(imgs));
        auto txt = model->embed_tokens(ids, valid);
        auto scale = model->log_temperature().clamp_max(std::log(100.0)).exp();
        auto logits = torch::matmul(img, txt.t()) * scale;
        auto loss = 0.5 * (multi_positive_nce(logits, positive) + multi_positive_nce(logits.t(), positive.t()));
        opt.zero_grad();
        loss.backward();
        opt.step();
        result.steps = step;

        if (step % config.eval_every == 0 || step == config.max_steps) {
            model->eval();
            result.holdout_accuracy = retrieval_accuracy(model, holdout, config.batch_size);
            model->train();
            if (progress) progress(step, loss.item<double>(), result.holdout_accuracy);
            if (result.holdout_accuracy >= config.target_accuracy) break;
        }
    }
    model->eval();
    if (result.holdout_accuracy < config.abort_accuracy) {
        throw StateError("aligner pretraining reached only " + std::to_string(result.holdout_accuracy) +
                         " held-out retrieval accuracy after " + std::to_string(result.steps) +
                         " steps (minimum " + std::to_string(config.abort_accuracy) + ")");
    }
    return result;
}

// ---------------------------------------------------------------------------
// Persistence

void save_aligner(const std::filesystem::path& path, const Aligner& model, const Vocabulary& vocab,
                  double holdout_accuracy, const nlohmann::json& extra) {
    Checkpoint ckpt;
    ckpt.metadata = {{"kind", "aligner"},
                     {"vocab_size", vocab.size()},
                     {"vocab_hash", vocab.hash()},
                     {"digest", parameter_digest(*model)},
                     {"holdout_accuracy", holdout_accuracy}};
    for (const auto& [k, v] : extra.items()) ckpt.metadata[k] = v;
    append_module(ckpt, *model, "aligner.", [](const std::string&) { return std::string("aligner"); });
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    save_checkpoint(path, ckpt);
}

std::string AlignerTrainConfig::to_text() const {
    std::ostringstream out;
    out.precision(17);
    out << "max_steps = " << max_steps << "\nbatch_size = " << batch_size << "\nlearning_rate = " << learning_rate
        << "\nweight_decay = " << weight_decay << "\ntarget_accuracy = " << target_accuracy
        << "\nabort_accuracy = " << abort_accuracy << "\nholdout_fraction = " << holdout_fraction
        << "\nsubset_caption_rate = " << subset_caption_rate << "\neval_every = " << eval_every
        << "\nseed = " << seed << "\n";
    return out.str();
}

bool apply_aligner_key(AlignerTrainConfig& c, const std::string& key, const std::string& value) {
    if (key == "max_steps") c.max_steps = static_cast<int>(parse_int(key, value));
    else if (key == "batch_size") c.batch_size = static_cast<int>(parse_int(key, value));
    else if (key == "learning_rate") c.learning_rate = parse_double(key, value);
    else if (key == "weight_decay") c.weight_decay = parse_double(key, value);
    else if (key == "target_accuracy") c.target_accuracy = parse_double(key, value);
    else if (key == "abort_accuracy") c.abort_accuracy = parse_double(key, value);
    else if (key == "holdout_fraction") c.holdout_fraction = parse_double(key, value);
    else if (key == "subset_caption_rate") c.subset_caption_rate = parse_double(key, value);
    else if (key == "eval_every") c.eval_every = static_cast<int>(parse_int(key, value));
    else if (key == "seed") c.seed = static_cast<std::uint64_t>(parse_int(key, value));
    else return false;
    return true;
}

AlignerBundle load_aligner(const std::filesystem::path& path, const Vocabulary& vocab) {
    auto ckpt = load_checkpoint(path);
    if (ckpt.metadata.value("kind", "") != "aligner") throw StateError(path.string() + " is not an aligner checkpoint");
    if (ckpt.metadata.value("vocab_hash", "") != vocab.hash()) {
        throw StateError("aligner vocabulary hash does not match the active vocabulary");
    }
    Aligner model(ckpt.metadata.at("vocab_size").get<std::int64_t>());
    load_module(*model, ckpt, "aligner.");
    auto bundle = make_bundle(model, vocab);
    if (bundle.digest != ckpt.metadata.value("digest", "")) {
        throw StateError("aligner parameter digest mismatch for " + path.string());
    }
    return bundle;
}

}  // namespace spf
