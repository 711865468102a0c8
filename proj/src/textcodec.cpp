#include "spf/textcodec.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <sstream>

#include "spf/digest.hpp"
#include "spf/errors.hpp"
#include "spf/spriteworld.hpp"
#include "spf/vocab_data.hpp"

namespace spf {
namespace {

std::vector<std::string> words(std::string_view text) {
    std::vector<std::string> out;
    std::string cur;
    for (char ch : text) {
        if (std::isspace(static_cast<unsigned char>(ch)) || ch == ',') {
            if (!cur.empty()) out.push_back(std::move(cur));
            cur.clear();
        } else {
            cur.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(ch))));
        }
    }
    if (!cur.empty()) out.push_back(std::move(cur));
    return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// Vocabulary

const Vocabulary& Vocabulary::builtin() {
    static const Vocabulary vocab = parse(detail::kVocabText);
    return vocab;
}

Vocabulary Vocabulary::parse(std::string_view text) {
    Vocabulary v;
    std::istringstream in{std::string(text)};
    std::string line;
    while (std::getline(in, line)) {
        while (!line.empty() && (line.back() == '\r' || line.back() == ' ')) line.pop_back();
        if (line.empty()) continue;
        if (v.ids_.count(line)) throw ConfigError("duplicate vocabulary token '" + line + "'");
        v.ids_.emplace(line, static_cast<std::int64_t>(v.tokens_.size()));
        v.tokens_.push_back(line);
    }
    if (v.tokens_.size() < 2 || v.tokens_[kPadId] != "<pad>" || v.tokens_[kUnkId] != "<unk>") {
        throw ConfigError("vocabulary must start with <pad> and <unk>");
    }
    return v;
}

Vocabulary Vocabulary::load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read vocabulary " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return parse(ss.str());
}

std::int64_t Vocabulary::id(std::string_view word) const {
    auto it = ids_.find(std::string(word));
    return it == ids_.end() ? kUnkId : it->second;
}

std::string Vocabulary::hash() const {
    Sha256 h;
    for (const auto& t : tokens_) h.update(t).update("\n");
    return h.hex();
}

// ---------------------------------------------------------------------------
// Tokenization

int TokenizedText::base_length() const {
    return static_cast<int>(std::count(segment_map.begin(), segment_map.end(), Segment::base));
}

int TokenizedText::target_length() const {
    return static_cast<int>(std::count(segment_map.begin(), segment_map.end(), Segment::target));
}

TokenizedText tokenize(std::string_view base_text, std::string_view target_text, const Vocabulary& vocab) {
    TokenizedText tok;
    tok.token_ids.fill(Vocabulary::kPadId);
    tok.segment_map.fill(Segment::pad);
    int n = 0;
    for (const auto& phrase : split_phrases(base_text)) {
        const int start = n;
        for (const auto& w : words(phrase)) {
            if (n >= kMaxTokens) break;
            tok.token_ids[n] = vocab.id(w);
            tok.segment_map[n] = Segment::base;
            ++n;
        }
        if (n > start) {
            tok.phrase_spans.push_back({start, n});
            tok.phrases.push_back(phrase);
        }
    }
    for (const auto& w : words(target_text)) {
        if (n >= kMaxTokens) break;
        tok.token_ids[n] = vocab.id(w);
        tok.segment_map[n] = Segment::target;
        ++n;
    }
    return tok;
}

std::pair<torch::Tensor, torch::Tensor> token_tensors(std::span<const TokenizedText> toks) {
    const auto b = static_cast<std::int64_t>(toks.size());
    auto ids = torch::zeros({b, kMaxTokens}, torch::kInt64);
    auto valid = torch::zeros({b, kMaxTokens}, torch::kBool);
    auto ida = ids.accessor<std::int64_t, 2>();
    auto va = valid.accessor<bool, 2>();
    for (std::int64_t i = 0; i < b; ++i) {
        for (int j = 0; j < kMaxTokens; ++j) {
            ida[i][j] = toks[static_cast<std::size_t>(i)].token_ids[j];
            va[i][j] = toks[static_cast<std::size_t>(i)].segment_map[j] != Segment::pad;
        }
    }
    return {ids, valid};
}

// ---------------------------------------------------------------------------
// Encoder

TextEncoderImpl::TextEncoderImpl(TextEncoderOptions options) : options_(options) {
    if (options_.vocab_size <= 0) throw ArgumentError("TextEncoder: vocab_size must be positive");
    const auto d = options_.dim;
    token_embedding_ = register_module("token_embedding", torch::nn::Embedding(options_.vocab_size, d));
    position_embedding_ = register_parameter("position_embedding", torch::randn({options_.max_tokens, d}) * 0.1);
    for (std::int64_t i = 0; i < options_.layers; ++i) {
        const auto p = "layer" + std::to_string(i) + "_";
        Layer l;
        l.ln1 = register_module(p + "ln1", torch::nn::LayerNorm(torch::nn::LayerNormOptions({d})));
        l.q = register_module(p + "q", torch::nn::Linear(d, d));
        l.k = register_module(p + "k", torch::nn::Linear(d, d));
        l.v = register_module(p + "v", torch::nn::Linear(d, d));
        l.out = register_module(p + "out", torch::nn::Linear(d, d));
        l.ln2 = register_module(p + "ln2", torch::nn::LayerNorm(torch::nn::LayerNormOptions({d})));
        l.fc1 = register_module(p + "fc1", torch::nn::Linear(d, 2 * d));
        l.fc2 = register_module(p + "fc2", torch::nn::Linear(2 * d, d));
        layers_.push_back(l);
    }
    final_ln_ = register_module("final_ln", torch::nn::LayerNorm(torch::nn::LayerNormOptions({d})));
}

torch::Tensor TextEncoderImpl::forward(const torch::Tensor& ids, const torch::Tensor& valid) {
    const auto b = ids.size(0);
    const auto n = ids.size(1);
    const auto d = options_.dim;
    const auto h = options_.heads;
    const auto hd = d / h;
    auto x = token_embedding_->forward(ids) + position_embedding_.slice(0, 0, n).unsqueeze(0);
    // Padding keys get a large negative bias; an all-pad row stays finite.
    auto key_bias = torch::zeros({b, 1, 1, n}, x.options()).masked_fill(valid.logical_not().view({b, 1, 1, n}), -1e9);
    for (auto& l : layers_) {
        if (options_.contextual) {
            auto y = l.ln1->forward(x);
            auto q = l.q->forward(y).view({b, n, h, hd}).transpose(1, 2);
            auto k = l.k->forward(y).view({b, n, h, hd}).transpose(1, 2);
            auto v = l.v->forward(y).view({b, n, h, hd}).transpose(1, 2);
            auto scores = torch::matmul(q, k.transpose(-1, -2)) / std::sqrt(static_cast<double>(hd)) + key_bias;
            auto att = torch::softmax(scores, -1);
            auto o = torch::matmul(att, v).transpose(1, 2).reshape({b, n, d});
            x = x + l.out->forward(o);
        }
        auto y = l.ln2->forward(x);
        x = x + l.fc2->forward(torch::gelu(l.fc1->forward(y)));
    }
    x = final_ln_->forward(x);
    return x * valid.unsqueeze(-1).to(x.dtype());
}

torch::Tensor TextEncoderImpl::pool(const torch::Tensor& embeddings, const torch::Tensor& valid) {
    auto w = valid.to(embeddings.dtype());
    auto count = w.sum(1, /*keepdim=*/true).clamp_min(1.0);
    return (embeddings * w.unsqueeze(-1)).sum(1) / count;
}

// ---------------------------------------------------------------------------
// Encodings

namespace {

torch::Tensor segment_tensor(const std::array<Segment, kMaxTokens>& seg, Segment want) {
    auto t = torch::zeros({kMaxTokens}, torch::kBool);
    auto a = t.accessor<bool, 1>();
    for (int i = 0; i < kMaxTokens; ++i) a[i] = seg[i] == want;
    return t;
}

}  // namespace

bool TextEncoding::has_target() const {
    return std::find(segment_map.begin(), segment_map.end(), Segment::target) != segment_map.end();
}

torch::Tensor TextEncoding::valid_mask() const { return segment_tensor(segment_map, Segment::pad).logical_not(); }
torch::Tensor TextEncoding::base_mask() const { return segment_tensor(segment_map, Segment::base); }
torch::Tensor TextEncoding::target_mask() const { return segment_tensor(segment_map, Segment::target); }
torch::Tensor TextEncoding::base_rows() const { return embeddings.index({base_mask()}); }
torch::Tensor TextEncoding::target_rows() const { return embeddings.index({target_mask()}); }

BatchEncoding BatchEncoding::to(torch::Dtype dtype) const {
    BatchEncoding out = *this;
    out.embeddings = embeddings.to(dtype);
    out.pooled = pooled.to(dtype);
    return out;
}

BatchEncoding stack(std::span<const TextEncoding> encodings) {
    if (encodings.empty()) throw ArgumentError("stack: no encodings");
    std::vector<torch::Tensor> emb, valid, base, target, pooled;
    BatchEncoding out;
    for (const auto& e : encodings) {
        emb.push_back(e.embeddings);
        valid.push_back(e.valid_mask());
        base.push_back(e.base_mask());
        target.push_back(e.target_mask());
        pooled.push_back(e.pooled);
        out.phrase_spans.push_back(e.phrase_spans);
        out.phrases.push_back(e.phrases);
    }
    out.embeddings = torch::stack(emb);
    out.valid = torch::stack(valid);
    out.base = torch::stack(base);
    out.target = torch::stack(target);
    out.pooled = torch::stack(pooled);
    return out;
}

TextCodec::TextCodec(Vocabulary vocab, TextEncoder encoder) : vocab_(std::move(vocab)), encoder_(std::move(encoder)) {}

TokenizedText TextCodec::tokenize(std::string_view base_text, std::string_view target_text) const {
    return spf::tokenize(base_text, target_text, vocab_);
}

TextEncoding TextCodec::encode(const TokenizedText& tok) const {
    auto batch = encode_batch(std::span(&tok, 1));
    TextEncoding e;
    e.embeddings = batch.embeddings[0];
    e.pooled = batch.pooled[0];
    e.segment_map = tok.segment_map;
    e.phrase_spans = tok.phrase_spans;
    e.phrases = tok.phrases;
    return e;
}

TextEncoding TextCodec::encode(std::string_view base_text, std::string_view target_text) const {
    return encode(tokenize(base_text, target_text));
}

BatchEncoding TextCodec::encode_batch(std::span<const TokenizedText> toks) const {
    if (!loaded()) throw StateError("text encoder weights not loaded");
    torch::NoGradGuard guard;
    auto [ids, valid] = token_tensors(toks);
    BatchEncoding out;
    out.embeddings = TextEncoder(encoder_)->forward(ids, valid);
    out.valid = valid;
    out.pooled = TextEncoderImpl::pool(out.embeddings, valid);
    std::vector<torch::Tensor> base, target;
    for (const auto& t : toks) {
        base.push_back(segment_tensor(t.segment_map, Segment::base));
        target.push_back(segment_tensor(t.segment_map, Segment::target));
        out.phrase_spans.push_back(t.phrase_spans);
        out.phrases.push_back(t.phrases);
    }
    out.base = torch::stack(base);
    out.target = torch::stack(target);
    return out;
}

torch::Tensor TextCodec::pooled_standalone(std::string_view text) const {
    // Encoded as a lone base segment; commas are not meaningful here.
    std::string flat(text);
    std::replace(flat.begin(), flat.end(), ',', ' ');
    return encode(flat, "").pooled;
}

}  // namespace spf
