#include "spf/eval.hpp"

#include <fstream>

#include "spf/checkpoint.hpp"
#include "spf/errors.hpp"
#include "spf/png_io.hpp"
#include "spf/sfcm.hpp"

namespace spf {
namespace {

namespace F = torch::nn::functional;

torch::Tensor mask_tensor(const Mask& m) {
    auto t = torch::zeros({m.height, m.width}, torch::kBool);
    auto a = t.accessor<bool, 2>();
    for (int y = 0; y < m.height; ++y)
        for (int x = 0; x < m.width; ++x) a[y][x] = m.at(y, x) != 0;
    return t;
}

std::vector<float> to_floats(const torch::Tensor& t) {
    auto c = t.detach().to(torch::kFloat32).contiguous();
    return {c.data_ptr<float>(), c.data_ptr<float>() + c.numel()};
}

void write_heatmap(const std::filesystem::path& path, const torch::Tensor& map) {
    auto v = to_floats(map);
    write_png_heatmap(path, static_cast<int>(map.size(0)), static_cast<int>(map.size(1)), v);
}

double mean_over(const torch::Tensor& map, const torch::Tensor& mask) {
    if (mask.sum().item<std::int64_t>() == 0) return 0.0;
    return map.index({mask}).to(torch::kFloat64).mean().item<double>();
}

}  // namespace

nlohmann::json EvalRecord::to_json() const {
    return {{"prompt", prompt},
            {"seed", seed},
            {"base_text", base_text},
            {"target_text", target_text},
            {"mse_out_of_mask", mse_out_of_mask},
            {"mse_in_mask", mse_in_mask},
            {"responsiveness", responsiveness},
            {"original_responsiveness", original_responsiveness}};
}

nlohmann::json EvalReport::summary_json() const {
    return {{"preservation_mse_out_of_mask", preservation_mse_out_of_mask},
            {"preservation_mse_in_mask", preservation_mse_in_mask},
            {"responsiveness", responsiveness},
            {"original_responsiveness", original_responsiveness},
            {"reconstruction_mse", reconstruction_mse},
            {"seeds", records.size()},
            {"config_hash", config_hash},
            {"original_id", original_id},
            {"customized_id", customized_id}};
}

std::vector<std::uint64_t> eval_seeds(std::size_t count, std::uint64_t base) {
    std::vector<std::uint64_t> out(count);
    for (std::size_t i = 0; i < count; ++i) out[i] = base * 1000003ULL + 7919ULL * (i + 1);
    return out;
}

torch::Tensor sample_texts(Denoiser& model, const TextCodec& codec, const std::vector<std::string>& base_texts,
                           const std::vector<std::string>& target_texts, const std::vector<std::uint64_t>& seeds,
                           int chunk) {
    if (base_texts.size() != seeds.size() || target_texts.size() != seeds.size()) {
        throw ArgumentError("sample_texts: one text pair per seed required");
    }
    const auto schedule = NoiseSchedule::linear();
    std::vector<torch::Tensor> parts;
    for (std::size_t start = 0; start < seeds.size(); start += static_cast<std::size_t>(chunk)) {
        const auto end = std::min(seeds.size(), start + static_cast<std::size_t>(chunk));
        std::vector<TokenizedText> toks;
        for (auto i = start; i < end; ++i) toks.push_back(codec.tokenize(base_texts[i], target_texts[i]));
        std::vector<std::uint64_t> s(seeds.begin() + static_cast<std::ptrdiff_t>(start),
                                     seeds.begin() + static_cast<std::ptrdiff_t>(end));
        parts.push_back(sample(model, schedule, codec.encode_batch(toks), s));
    }
    return torch::cat(parts);
}

torch::Tensor sample_base_texts(Denoiser& model, const std::vector<PromptTriple>& prompts,
                                const std::vector<std::uint64_t>& seeds, const TextCodec& codec) {
    if (prompts.empty()) throw ArgumentError("sample_base_texts: no prompts");
    torch::NoGradGuard guard;
    std::vector<std::string> base(seeds.size()), none(seeds.size());
    for (std::size_t k = 0; k < seeds.size(); ++k) base[k] = prompts[k % prompts.size()].base_text;
    return sample_texts(model, codec, base, none, seeds);
}

EvalReport eval_pair(Denoiser& original, Denoiser& customized, const std::vector<PromptTriple>& prompts,
                     const std::vector<std::uint64_t>& seeds, const AlignerBundle& aligner,
                     const torch::Tensor& original_samples) {
    if (seeds.empty()) throw ArgumentError("eval_pair: zero seeds");
    if (prompts.empty()) throw ArgumentError("eval_pair: no prompts");
    torch::NoGradGuard guard;
    const auto n = seeds.size();
    std::vector<std::string> base(n), target(n);
    for (std::size_t k = 0; k < n; ++k) {
        base[k] = prompts[k % prompts.size()].base_text;
        target[k] = prompts[k % prompts.size()].target_text;
    }
    auto orig = original_samples.defined() ? original_samples
                                           : sample_base_texts(original, prompts, seeds, aligner.codec);
    if (orig.size(0) != static_cast<std::int64_t>(n)) throw ArgumentError("eval_pair: original sample count mismatch");
    auto cust = sample_texts(customized, aligner.codec, base, target, seeds);
    auto orig_emb = aligner.embed_image(orig);
    auto cust_emb = aligner.embed_image(cust);

    EvalReport report;
    report.original_id = parameter_digest(*original);
    report.customized_id = parameter_digest(*customized);
    for (std::size_t k = 0; k < n; ++k) {
        const auto& p = prompts[k % prompts.size()];
        EvalRecord r;
        r.prompt = k % prompts.size();
        r.seed = seeds[k];
        r.base_text = p.base_text;
        r.target_text = p.target_text;
        const auto i = static_cast<std::int64_t>(k);
        auto sq = (orig[i] - cust[i]).pow(2).mean(0);  // [32,32]
        auto region = p.attributes.target_attr ? mask_tensor(target_region_any_pose(p.attributes))
                                               : torch::zeros({kImageSize, kImageSize}, torch::kBool);
        r.mse_out_of_mask = mean_over(sq, region.logical_not());
        r.mse_in_mask = mean_over(sq, region);
        if (!p.target_text.empty()) {
            auto text = aligner.embed_text(p.target_text);
            r.responsiveness = cosine_rows(cust_emb[i], text).item<double>();
            r.original_responsiveness = cosine_rows(orig_emb[i], text).item<double>();
        }
        report.records.push_back(std::move(r));
    }
    for (const auto& r : report.records) {
        report.preservation_mse_out_of_mask += r.mse_out_of_mask;
        report.preservation_mse_in_mask += r.mse_in_mask;
        report.responsiveness += r.responsiveness;
        report.original_responsiveness += r.original_responsiveness;
    }
    const auto count = static_cast<double>(n);
    report.preservation_mse_out_of_mask /= count;
    report.preservation_mse_in_mask /= count;
    report.responsiveness /= count;
    report.original_responsiveness /= count;
    return report;
}

double reconstruction_test(Denoiser& original, Denoiser& customized, const std::vector<PromptTriple>& base_prompts,
                           const std::vector<std::uint64_t>& seeds, const TextCodec& codec,
                           const torch::Tensor& original_samples) {
    if (seeds.empty() || base_prompts.empty()) throw ArgumentError("reconstruction_test: no seeds or prompts");
    torch::NoGradGuard guard;
    auto a = original_samples.defined() ? original_samples : sample_base_texts(original, base_prompts, seeds, codec);
    auto b = sample_base_texts(customized, base_prompts, seeds, codec);
    return (a - b).pow(2).to(torch::kFloat64).mean().item<double>();
}

void write_report(const std::filesystem::path& stem, const EvalReport& report) {
    if (stem.has_parent_path()) std::filesystem::create_directories(stem.parent_path());
    std::ofstream records(stem.string() + ".jsonl");
    for (const auto& r : report.records) records << r.to_json().dump() << "\n";
    std::ofstream summary(stem.string() + ".summary.json");
    summary << report.summary_json().dump(2) << "\n";
    if (!records || !summary) throw StateError("cannot write report " + stem.string());
}

void write_image_grid(const std::filesystem::path& path, const std::vector<torch::Tensor>& columns) {
    if (columns.empty()) throw ArgumentError("write_image_grid: no columns");
    const auto rows = columns.front().size(0);
    auto grid = torch::cat(
        [&] {
            std::vector<torch::Tensor> per_row;
            for (std::int64_t r = 0; r < rows; ++r) {
                std::vector<torch::Tensor> cells;
                for (const auto& c : columns) cells.push_back(c[r]);
                per_row.push_back(torch::cat(cells, 2));  // [3,32,32*C]
            }
            return per_row;
        }(),
        1);
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    write_png_rgb(path, tensor_to_image(grid));
}

nlohmann::json dump_diagnostics(Denoiser& original, Denoiser& customized, const AlignerBundle& aligner,
                                const PromptTriple& triple, const DiagnosticsOptions& options,
                                const std::filesystem::path& out_dir) {
    torch::NoGradGuard guard;
    std::filesystem::create_directories(out_dir);
    const auto schedule = NoiseSchedule::linear();
    const auto& codec = aligner.codec;
    auto ref_enc = codec.encode(triple.base_text, "");
    auto res_enc = codec.encode(triple.base_text, triple.target_text);
    auto ref_batch = stack(std::span(&ref_enc, 1));
    auto res_batch = stack(std::span(&res_enc, 1));

    auto gen = at::make_generator<at::CPUGeneratorImpl>(options.seed);
    auto eps = torch::randn({1, 3, kImageSize, kImageSize}, gen, torch::kFloat32);
    auto x0 = to_model_space(image_to_tensor(triple.image).unsqueeze(0));
    auto t = torch::full({1}, options.timestep, torch::kInt64);
    auto x_t = forward_diffuse(schedule, x0, t, eps);

    AttentionTap tap_ref, tap_res;
    auto eps_ref = predict(original, x_t, t, ref_batch, &tap_ref);
    auto eps_res = predict(customized, x_t, t, res_batch, &tap_res);
    auto s = build_sfcm(eps_ref, eps_res, tap_res, res_enc, triple.target_text, aligner, 0);

    write_heatmap(out_dir / "soft_map.png", s.soft);
    write_heatmap(out_dir / "refined.png", s.refined);
    for (std::size_t i = 0; i < s.phrase_maps.size(); ++i) {
        write_heatmap(out_dir / ("phrase_" + std::to_string(i) + ".png"), s.phrase_maps[i]);
    }
    auto target_mask = res_enc.target_mask();
    if (res_enc.has_target()) {
        for (std::size_t j = 0; j < tap_res.layers.size(); ++j) {
            const auto& layer = tap_res.layers[j];
            auto cols = layer.text_attention[0].index({torch::indexing::Slice(), torch::indexing::Slice(), target_mask});
            auto m = cols.mean(-1).mean(0).view({1, 1, layer.height, layer.width});
            auto up = F::interpolate(m, F::InterpolateFuncOptions()
                                            .size(std::vector<std::int64_t>{kImageSize, kImageSize})
                                            .mode(torch::kNearest))
                          .view({kImageSize, kImageSize});
            write_heatmap(out_dir / ("attention_layer" + std::to_string(j) + ".png"), normalize_map(up));
        }
    }

    std::vector<std::uint64_t> seeds{options.seed};
    auto orig = sample(original, schedule, ref_batch, seeds);
    auto cust = sample(customized, schedule, res_batch, seeds);
    auto truth = image_to_tensor(triple.image).unsqueeze(0);
    write_image_grid(out_dir / "samples.png", {orig, cust, truth});

    auto region = mask_tensor(triple.target_mask);
    auto masks = render(triple.attributes).masks;
    auto background = mask_tensor(masks.background);
    nlohmann::json info = {{"base_text", triple.base_text},
                           {"target_text", triple.target_text},
                           {"timestep", options.timestep},
                           {"seed", options.seed},
                           {"empty_target", s.empty_target},
                           {"phrases", res_enc.phrases},
                           {"gammas", s.gammas},
                           {"refined_mean_in_target", mean_over(s.refined, region)},
                           {"refined_mean_out_of_target", mean_over(s.refined, region.logical_not())},
                           {"soft_mean_background", mean_over(s.soft, background)},
                           {"refined_mean_background", mean_over(s.refined, background)}};
    std::ofstream(out_dir / "sfcm.json") << info.dump(2) << "\n";
    return info;
}

}  // namespace spf
