#pragma once

// Word-level tokenization with base/target segment and phrase bookkeeping,
// and the frozen contextual text encoder that turns tokens into the
// conditioning sequence.

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <torch/torch.h>

namespace spf {

inline constexpr int kMaxTokens = 24;
inline constexpr int kTextDim = 64;

enum class Segment : std::uint8_t { base, target, pad };

class Vocabulary {
public:
    static constexpr std::int64_t kPadId = 0;
    static constexpr std::int64_t kUnkId = 1;

    /// The committed vocabulary (data/vocab.txt), compiled in.
    static const Vocabulary& builtin();
    static Vocabulary parse(std::string_view text);
    static Vocabulary load(const std::filesystem::path& path);

    std::int64_t id(std::string_view word) const;
    const std::string& token(std::int64_t id) const { return tokens_.at(static_cast<std::size_t>(id)); }
    std::int64_t size() const { return static_cast<std::int64_t>(tokens_.size()); }
    /// SHA-256 of the newline-joined token list.
    std::string hash() const;

private:
    std::vector<std::string> tokens_;
    std::unordered_map<std::string, std::int64_t> ids_;
};

/// Half-open token range [start, end) within the base segment.
struct PhraseSpan {
    int start = 0;
    int end = 0;
    int size() const { return end - start; }
    bool operator==(const PhraseSpan&) const = default;
};

struct TokenizedText {
    std::array<std::int64_t, kMaxTokens> token_ids{};
    std::array<Segment, kMaxTokens> segment_map{};
    std::vector<PhraseSpan> phrase_spans;
    std::vector<std::string> phrases;  // phrase strings, parallel to phrase_spans

    int base_length() const;
    int target_length() const;
    int length() const { return base_length() + target_length(); }
};

/// Lowercased whitespace tokens; commas in `base_text` delimit phrases and are
/// not emitted as tokens. Tokens past kMaxTokens are dropped.
TokenizedText tokenize(std::string_view base_text, std::string_view target_text,
                       const Vocabulary& vocab = Vocabulary::builtin());

struct TextEncoderOptions {
    std::int64_t vocab_size = 0;
    std::int64_t dim = kTextDim;
    std::int64_t layers = 2;
    std::int64_t heads = 4;
    std::int64_t max_tokens = kMaxTokens;
    /// When false the self-attention sublayers are skipped, so every token's
    /// output depends only on its id and position. Test-only variant.
    bool contextual = true;
};

class TextEncoderImpl : public torch::nn::Module {
public:
    explicit TextEncoderImpl(TextEncoderOptions options);

    /// ids: [B, N] int64, valid: [B, N] bool. Returns [B, N, dim]; pad rows are zero.
    torch::Tensor forward(const torch::Tensor& ids, const torch::Tensor& valid);

    /// Mean of the non-pad rows: [B, dim].
    static torch::Tensor pool(const torch::Tensor& embeddings, const torch::Tensor& valid);

    const TextEncoderOptions& options() const { return options_; }

private:
    struct Layer {
        torch::nn::LayerNorm ln1{nullptr}, ln2{nullptr};
        torch::nn::Linear q{nullptr}, k{nullptr}, v{nullptr}, out{nullptr}, fc1{nullptr}, fc2{nullptr};
    };
    TextEncoderOptions options_;
    torch::nn::Embedding token_embedding_{nullptr};
    torch::Tensor position_embedding_;
    std::vector<Layer> layers_;
    torch::nn::LayerNorm final_ln_{nullptr};
};
TORCH_MODULE(TextEncoder);

struct TextEncoding {
    torch::Tensor embeddings;  // [kMaxTokens, dim]
    torch::Tensor pooled;      // [dim]
    std::array<Segment, kMaxTokens> segment_map{};
    std::vector<PhraseSpan> phrase_spans;
    std::vector<std::string> phrases;

    bool has_target() const;
    torch::Tensor valid_mask() const;   // [kMaxTokens] bool
    torch::Tensor base_mask() const;    // [kMaxTokens] bool
    torch::Tensor target_mask() const;  // [kMaxTokens] bool
    torch::Tensor base_rows() const;    // E_base slice
    torch::Tensor target_rows() const;  // E_tar slice
};

/// A batch of encodings stacked for the denoiser.
struct BatchEncoding {
    torch::Tensor embeddings;  // [B, N, dim]
    torch::Tensor valid;       // [B, N] bool
    torch::Tensor base;        // [B, N] bool
    torch::Tensor target;      // [B, N] bool
    torch::Tensor pooled;      // [B, dim]
    std::vector<std::vector<PhraseSpan>> phrase_spans;
    std::vector<std::vector<std::string>> phrases;

    std::int64_t size() const { return embeddings.size(0); }
    BatchEncoding to(torch::Dtype dtype) const;
};

BatchEncoding stack(std::span<const TextEncoding> encodings);

/// Tokenizer plus frozen encoder. Encoding runs without gradient tracking.
class TextCodec {
public:
    TextCodec() = default;  // not loaded
    TextCodec(Vocabulary vocab, TextEncoder encoder);

    bool loaded() const { return !encoder_.is_empty(); }
    const Vocabulary& vocabulary() const { return vocab_; }
    TextEncoder encoder() const { return encoder_; }

    TokenizedText tokenize(std::string_view base_text, std::string_view target_text) const;
    /// Throws StateError when no encoder weights are attached.
    TextEncoding encode(const TokenizedText& tok) const;
    TextEncoding encode(std::string_view base_text, std::string_view target_text) const;
    BatchEncoding encode_batch(std::span<const TokenizedText> toks) const;
    /// Pooled embedding of `text` encoded on its own: [dim].
    torch::Tensor pooled_standalone(std::string_view text) const;

private:
    Vocabulary vocab_ = Vocabulary::builtin();
    TextEncoder encoder_{nullptr};
};

/// ids [B, N] and valid [B, N] tensors for a list of tokenized texts.
std::pair<torch::Tensor, torch::Tensor> token_tensors(std::span<const TokenizedText> toks);

}  // namespace spf
