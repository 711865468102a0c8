#pragma once

// Toy image/text dual encoder. Its text tower is the frozen conditioning
// encoder; its joint space supplies cosine similarities and difference
// vectors for the training objectives.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "spf/spriteworld.hpp"
#include "spf/textcodec.hpp"

namespace spf {

class ImageEncoderImpl : public torch::nn::Module {
public:
    explicit ImageEncoderImpl(std::int64_t dim = kTextDim);
    /// images [B,3,32,32] in [0,1] -> unnormalized [B,dim].
    torch::Tensor forward(const torch::Tensor& images);

private:
    torch::nn::Conv2d conv1_{nullptr}, conv2_{nullptr}, conv3_{nullptr}, conv4_{nullptr};
    torch::nn::Linear proj_{nullptr};
};
TORCH_MODULE(ImageEncoder);

class AlignerImpl : public torch::nn::Module {
public:
    explicit AlignerImpl(std::int64_t vocab_size, std::int64_t dim = kTextDim);

    /// L2-normalized image embeddings; inputs are clamped to [0,1] first.
    torch::Tensor embed_image(const torch::Tensor& images);
    /// L2-normalized pooled text embeddings.
    torch::Tensor embed_tokens(const torch::Tensor& ids, const torch::Tensor& valid);

    ImageEncoder image_encoder() const { return image_encoder_; }
    TextEncoder text_encoder() const { return text_encoder_; }
    torch::Tensor log_temperature() const { return log_temperature_; }

private:
    ImageEncoder image_encoder_{nullptr};
    TextEncoder text_encoder_{nullptr};
    torch::Tensor log_temperature_;
};
TORCH_MODULE(Aligner);

/// A loaded, frozen aligner plus the codec that shares its text tower.
struct AlignerBundle {
    Aligner model{nullptr};
    TextCodec codec;
    std::string digest;

    /// Normalized embedding of `text` encoded on its own: [dim].
    torch::Tensor embed_text(std::string_view text) const;
    /// Normalized image embeddings, differentiable with respect to `images`.
    torch::Tensor embed_image(const torch::Tensor& images) const;
    /// Throws StateError when the parameters no longer match `digest`.
    void verify_frozen() const;
};

/// Freezes `model` and wires the codec to its text encoder.
AlignerBundle make_bundle(Aligner model, const Vocabulary& vocab = Vocabulary::builtin());

/// Cosine similarity. Throws ArgumentError when either vector is zero.
double similarity(const torch::Tensor& a, const torch::Tensor& b);

/// Row-wise cosine for [B,d] (or [d]) tensors, as `1 - |a^ - b^|^2 / 2`,
/// which is exactly zero for identical directions.
torch::Tensor cosine_rows(const torch::Tensor& a, const torch::Tensor& b);

/// Normalized image embedding minus normalized target-text embedding.
/// images [B,3,32,32] (or [3,32,32]); target_text_embedding [d] or [B,d].
torch::Tensor difference_vector(const AlignerBundle& aligner, const torch::Tensor& images,
                                const torch::Tensor& target_text_embedding);
/// Same, with the target embedding taken from `target_encoding` (pooled,
/// normalized). Throws ArgumentError when the encoding has no target segment.
torch::Tensor difference_vector(const AlignerBundle& aligner, const torch::Tensor& images,
                                const TextEncoding& target_encoding);

struct AlignerTrainConfig {
    int max_steps = 3000;
    int batch_size = 64;
    double learning_rate = 2e-3;
    double weight_decay = 0.01;
    double target_accuracy = 0.90;
    double abort_accuracy = 0.70;
    double holdout_fraction = 0.1;
    /// Share of training captions replaced by a random subset of their phrases.
    double subset_caption_rate = 0.5;
    int eval_every = 100;
    std::uint64_t seed = 0;

    std::string to_text() const;
};

/// Applies one `key = value`. Returns false for an unknown key.
bool apply_aligner_key(AlignerTrainConfig& config, const std::string& key, const std::string& value);

struct AlignerTrainResult {
    Aligner model{nullptr};
    double holdout_accuracy = 0.0;
    int steps = 0;
};

/// Symmetric contrastive pretraining. Returns once held-out top-1 retrieval
/// within batches of `batch_size` reaches `target_accuracy`; throws
/// StateError if the step budget ends below `abort_accuracy`.
AlignerTrainResult pretrain_aligner(const std::vector<PromptTriple>& dataset, const AlignerTrainConfig& config,
                                    const std::function<void(int, double, double)>& progress = {});

/// Image-to-caption top-1 retrieval accuracy over consecutive batches of
/// `batch_size`. A retrieval counts when the chosen caption string equals the
/// image's own caption.
double retrieval_accuracy(Aligner& model, const std::vector<PromptTriple>& triples, int batch_size);

/// [B,3,32,32] float tensor in [0,1] from sprite images.
torch::Tensor images_to_tensor(const std::vector<const RgbImage*>& images);
torch::Tensor image_to_tensor(const RgbImage& image);
/// Quantizes a [3,32,32] tensor in [0,1] back to an 8-bit sprite image.
RgbImage tensor_to_image(const torch::Tensor& image);

/// `extra` entries are merged into the checkpoint metadata.
void save_aligner(const std::filesystem::path& path, const Aligner& model, const Vocabulary& vocab,
                  double holdout_accuracy, const nlohmann::json& extra = nlohmann::json::object());
/// Loads and freezes. Throws StateError when the stored digest or vocabulary
/// hash disagrees with the loaded weights or `vocab`.
AlignerBundle load_aligner(const std::filesystem::path& path, const Vocabulary& vocab = Vocabulary::builtin());

}  // namespace spf
