#include <doctest.h>

#include <fstream>
#include <set>

#include "spf/checkpoint.hpp"
#include "spf/errors.hpp"
#include "spf/losses.hpp"
#include "spf/sfcm.hpp"
#include "spf/trainer.hpp"
#include "test_support.hpp"

using namespace spf;

namespace {

std::map<std::string, torch::Tensor> snapshot(const Denoiser& m) {
    std::map<std::string, torch::Tensor> out;
    for (const auto& p : m->named_parameters()) out[p.key()] = p.value().detach().clone();
    return out;
}

TrainConfig tiny_stage2(int steps) {
    auto c = TrainConfig::defaults(Stage::stage2);
    c.steps = steps;
    c.batch_size = 4;
    c.learning_rate = 1e-3;
    c.seed = 17;
    return c;
}

// A response model that differs from the reference, like a stage-1 result.
Denoiser perturbed(const Denoiser& m, std::uint64_t seed) {
    auto copy = clone_denoiser(m);
    torch::NoGradGuard guard;
    auto gen = at::make_generator<at::CPUGeneratorImpl>(seed);
    for (auto& p : copy->parameters()) p.add_(torch::randn(p.sizes(), gen) * 0.01);
    return copy;
}

std::vector<std::string> read_lines(const std::filesystem::path& p) {
    std::ifstream in(p);
    std::vector<std::string> out;
    std::string line;
    while (std::getline(in, line)) out.push_back(line);
    return out;
}

std::array<double, 3> corner_colour(const torch::Tensor& img) {
    std::array<double, 3> c{};
    for (int ch = 0; ch < 3; ++ch) c[ch] = img[ch].slice(0, 0, 3).slice(1, 0, 3).mean().item<double>();
    return c;
}

}  // namespace

TEST_SUITE("trainer") {

TEST_CASE("batch schedule") {
    BatchSchedule s(20, 4, 3);
    CHECK(s.steps_per_epoch() == 5);
    for (int epoch = 0; epoch < 2; ++epoch) {
        std::set<std::size_t> seen;
        for (int k = 0; k < 5; ++k)
            for (auto i : s.batch(epoch * 5 + k)) seen.insert(i);
        CHECK(seen.size() == 20);
    }
    CHECK(s.batch(0) != s.batch(5));
    CHECK(BatchSchedule(20, 4, 3).batch(7) == s.batch(7));
    CHECK(BatchSchedule(20, 4, 4).batch(0) != s.batch(0));
    CHECK(BatchSchedule(3, 8, 1).batch(0).size() == 8);
    CHECK_THROWS_AS(BatchSchedule(0, 4, 1), ArgumentError);
    CHECK(step_seed(1, 0) != step_seed(1, 1));
    CHECK(step_seed(1, 0) != step_seed(2, 0));
}

TEST_CASE("optimizer state round-trips through a checkpoint") {
    auto model = spf_test::untrained_denoiser();
    auto params = model->parameters_in_group(kCrossAttentionGroup);
    torch::optim::AdamW opt(params, torch::optim::AdamWOptions(1e-3));
    for (auto& p : params) p.mutable_grad() = torch::ones_like(p);
    opt.step();
    opt.step();
    Checkpoint ckpt;
    append_optimizer_state(ckpt, opt);
    CHECK(ckpt.metadata["optimizer_step"] == 2);
    torch::optim::AdamW fresh(params, torch::optim::AdamWOptions(1e-3));
    load_optimizer_state(ckpt, fresh);
    for (auto& p : params) {
        auto& a = static_cast<torch::optim::AdamWParamState&>(*opt.state().at(p.unsafeGetTensorImpl()));
        auto& b = static_cast<torch::optim::AdamWParamState&>(*fresh.state().at(p.unsafeGetTensorImpl()));
        CHECK(torch::equal(a.exp_avg(), b.exp_avg()));
        CHECK(torch::equal(a.exp_avg_sq(), b.exp_avg_sq()));
        CHECK(b.step() == 2);
    }
    CHECK_THROWS_AS(load_optimizer_state(Checkpoint{}, fresh), StateError);
}

TEST_CASE("identical paths give a zero soft map and zero alignment losses") {
    auto aligner = spf_test::untrained_aligner();
    auto original = spf_test::untrained_denoiser();
    auto pair = ModelPair::make(original, original);
    pair.response->train();
    const auto data = build_dataset(4, {TargetAttr::hat}, 8);
    std::vector<TokenizedText> toks;
    std::vector<std::vector<PhraseSpan>> spans;
    std::vector<std::vector<double>> gammas;
    for (const auto& t : data) {
        toks.push_back(aligner.codec.tokenize(t.base_text, t.target_text));
        spans.push_back(toks.back().phrase_spans);
        gammas.push_back(phrase_gammas(aligner, toks.back().phrases, t.target_text));
    }
    auto cond = aligner.codec.encode_batch(toks);
    auto x = torch::randn({4, 3, 32, 32});
    auto t = torch::tensor({5, 60, 120, 199}, torch::kInt64);
    AttentionTap tap_ref, tap_res;
    torch::Tensor eps_ref;
    {
        torch::NoGradGuard guard;
        eps_ref = predict(pair.reference, x, t, cond, &tap_ref);
    }
    auto eps_res = predict(pair.response, x, t, cond, &tap_res);
    CHECK(soft_map(eps_ref, eps_res.detach()).abs().max().item<float>() == 0.0f);
    auto refined = build_refined_batch(eps_ref, eps_res.detach(), tap_res, spans, gammas, {true, true, true, true});
    CHECK(refined.abs().max().item<float>() == 0.0f);
    CHECK(masked_text_loss(tap_ref, tap_res, refined).item<double>() == 0.0);
    CHECK(masked_fine_loss(tap_ref, tap_res, refined).item<double>() == 0.0);
    // and no gradient reaches the reference
    (masked_fine_loss(tap_ref, tap_res, refined) + diffusion_loss(eps_ref, eps_res)).backward();
    for (const auto& p : pair.reference->parameters()) CHECK_FALSE(p.grad().defined());
}

TEST_CASE("one stage-2 step only moves cross-attention parameters") {
    auto aligner = spf_test::untrained_aligner();
    auto original = spf_test::untrained_denoiser();
    auto pair = ModelPair::make(original, perturbed(original, 3));
    const auto before = snapshot(pair.response);
    const auto ref_before = snapshot(pair.reference);
    const auto data = build_dataset(8, {TargetAttr::hat}, 2);
    std::vector<const PromptTriple*> batch{&data[0], &data[1], &data[2], &data[3]};
    Stage2Trainer trainer(pair, aligner, tiny_stage2(1));
    const auto trainer_lambdas = tiny_stage2(1).lambdas;
    Stage2Trace trace;
    const auto loss = trainer.step(batch, 0, &trace);

    CHECK(std::isfinite(loss.total));
    CHECK(loss.l_m_text > 0.0);
    CHECK(loss.l_m_fine > 0.0);
    const auto& l = trainer_lambdas;
    CHECK(loss.total == doctest::Approx(loss.l_diff + l.text * loss.l_m_text + l.fine * loss.l_m_fine +
                                        l.enhanced * loss.l_enhanced));
    int moved = 0;
    for (const auto& p : pair.response->named_parameters()) {
        const bool same = torch::equal(p.value(), before.at(p.key()));
        if (parameter_group(p.key()) == kCrossAttentionGroup) {
            moved += !same;
        } else {
            CHECK_MESSAGE(same, p.key());
        }
    }
    CHECK(moved > 0);
    for (const auto& p : pair.reference->named_parameters()) CHECK(torch::equal(p.value(), ref_before.at(p.key())));
    CHECK_NOTHROW(pair.verify_reference());
    CHECK(trainer.trainable().size() == pair.response->parameters_in_group(kCrossAttentionGroup).size());

    // both paths consumed one noise draw
    CHECK(torch::equal(trace.reference_x_t, trace.response_x_t));
    CHECK(torch::equal(trace.reference_t, trace.response_t));
    CHECK(trace.refined.sizes() == torch::IntArrayRef{4, 32, 32});
    CHECK(trace.refined.min().item<float>() >= 0.0f);
    CHECK(trace.refined.max().item<float>() <= 1.0f);
    CHECK_FALSE(trace.refined.requires_grad());
    // the logged soft map is reproducible from the traced predictions
    CHECK(soft_map(trace.eps_reference, trace.eps_response).max().item<float>() == 1.0f);

    const PromptTriple plain = build_dataset(1, {std::nullopt}, 1)[0];
    CHECK_THROWS_AS(trainer.step({&plain}, 1), ArgumentError);
}

TEST_CASE("noise draws depend only on seed and step") {
    auto aligner = spf_test::untrained_aligner();
    auto original = spf_test::untrained_denoiser();
    const auto data = build_dataset(4, {TargetAttr::hat}, 2);
    std::vector<const PromptTriple*> batch{&data[0], &data[1], &data[2], &data[3]};
    auto p1 = ModelPair::make(original, original);
    auto p2 = ModelPair::make(original, perturbed(original, 9));
    Stage2Trainer a(p1, aligner, tiny_stage2(1)), b(p2, aligner, tiny_stage2(1));
    Stage2Trace ta, tb;
    a.step(batch, 4, &ta);
    b.step(batch, 4, &tb);
    CHECK(torch::equal(ta.response_x_t, tb.response_x_t));
    CHECK(torch::equal(ta.response_t, tb.response_t));
    a.step(batch, 5, &tb);
    CHECK_FALSE(torch::equal(ta.response_t, tb.response_t));
}

TEST_CASE("full scope and disabled SFCM") {
    auto aligner = spf_test::untrained_aligner();
    auto original = spf_test::untrained_denoiser();
    const auto data = build_dataset(4, {TargetAttr::hat}, 2);
    std::vector<const PromptTriple*> batch{&data[0], &data[1], &data[2], &data[3]};
    auto cfg = tiny_stage2(1);
    cfg.train_scope = TrainScope::full;
    cfg.use_sfcm = false;
    auto pair = ModelPair::make(original, perturbed(original, 4));
    const auto before = snapshot(pair.response);
    Stage2Trainer trainer(pair, aligner, cfg);
    Stage2Trace trace;
    trainer.step(batch, 0, &trace);
    CHECK(trace.refined.abs().max().item<float>() == 0.0f);
    CHECK(trainer.trainable().size() == pair.response->parameters().size());
    CHECK_FALSE(torch::equal(pair.response->named_parameters()["conv_in.weight"], before.at("conv_in.weight")));
}

TEST_CASE("a run of 100 stage-2 steps keeps the scope and reference contracts") {
    auto aligner = spf_test::untrained_aligner();
    auto original = spf_test::untrained_denoiser();
    auto pair = ModelPair::make(original, perturbed(original, 5));
    const auto before = snapshot(pair.response);
    const auto digest = parameter_digest(*pair.reference);
    auto cfg = tiny_stage2(100);
    cfg.batch_size = 2;
    run_stage2(pair, build_dataset(10, {TargetAttr::hat, std::nullopt}, 6), aligner, cfg);
    for (const auto& p : pair.response->named_parameters())
        if (parameter_group(p.key()) != kCrossAttentionGroup) REQUIRE(torch::equal(p.value(), before.at(p.key())));
    CHECK(parameter_digest(*pair.reference) == digest);
    CHECK_NOTHROW(aligner.verify_frozen());
}

TEST_CASE("resuming reproduces the loss stream") {
    auto aligner = spf_test::untrained_aligner();
    auto original = spf_test::untrained_denoiser();
    auto initial = perturbed(original, 6);
    const auto data = build_dataset(12, {TargetAttr::hat}, 7);
    const auto dir = spf_test::temp_dir("resume");
    const auto cfg = tiny_stage2(6);

    auto full_pair = ModelPair::make(original, initial);
    RunOptions full;
    full.log = dir / "full.jsonl";
    full.checkpoint = dir / "full.ckpt";
    auto full_model = run_stage2(full_pair, data, aligner, cfg, full);

    auto part_pair = ModelPair::make(original, initial);
    RunOptions part;
    part.log = dir / "part.jsonl";
    part.checkpoint = dir / "part.ckpt";
    part.stop_at_step = 3;
    run_stage2(part_pair, data, aligner, cfg, part);
    CHECK(load_checkpoint(dir / "part.ckpt").metadata["complete"] == false);
    CHECK(read_lines(dir / "part.jsonl").size() == 3);

    auto resumed_pair = ModelPair::make(original, initial);
    RunOptions resume;
    resume.log = dir / "part.jsonl";
    resume.checkpoint = dir / "resumed.ckpt";
    resume.resume_from = dir / "part.ckpt";
    auto resumed = run_stage2(resumed_pair, data, aligner, cfg, resume);

    CHECK(read_lines(dir / "part.jsonl") == read_lines(dir / "full.jsonl"));
    CHECK(parameter_digest(*resumed) == parameter_digest(*full_model));
    CHECK(load_checkpoint(dir / "resumed.ckpt").metadata["complete"] == true);

    auto other = cfg;
    other.lambdas.text = 0.5;
    auto bad_pair = ModelPair::make(original, initial);
    CHECK_THROWS_AS(run_stage2(bad_pair, data, aligner, other, resume), StateError);
    std::filesystem::remove_all(dir);
}

TEST_CASE("stage 2 needs target-bearing triples") {
    auto aligner = spf_test::untrained_aligner();
    auto original = spf_test::untrained_denoiser();
    auto pair = ModelPair::make(original, original);
    CHECK_THROWS_AS(run_stage2(pair, build_dataset(4, {std::nullopt}, 1), aligner, tiny_stage2(1)), ArgumentError);
}

TEST_CASE("divergence aborts training") {
    auto aligner = spf_test::untrained_aligner();
    auto cfg = TrainConfig::defaults(Stage::pretrain);
    cfg.steps = 6;
    cfg.batch_size = 2;
    cfg.learning_rate = 1e30;
    CHECK_THROWS_AS(pretrain_base(build_dataset(4, {std::nullopt}, 1), aligner.codec, cfg), DivergenceError);
    CHECK_THROWS_AS(pretrain_base({}, aligner.codec, cfg), ArgumentError);
}

TEST_CASE("pretraining on one background learns its colour") {
    auto aligner = spf_test::untrained_aligner();
    std::vector<PromptTriple> data;
    for (const auto& t : build_dataset(400, {std::nullopt}, 12)) {
        auto a = t.attributes;
        a.background = Background::blue;
        data.push_back(make_triple(a));
    }
    auto cfg = TrainConfig::defaults(Stage::pretrain);
    cfg.steps = 800;
    cfg.batch_size = 8;
    cfg.learning_rate = 2e-3;
    cfg.seed = 3;
    std::vector<double> losses;
    const auto dir = spf_test::temp_dir("pretrain");
    RunOptions opts;
    opts.on_step = [&](const nlohmann::json& r) { losses.push_back(r["l_diff"].get<double>()); };
    opts.checkpoint = dir / "base.ckpt";
    auto model = pretrain_base(data, aligner.codec, cfg, opts);
    REQUIRE(losses.size() == 800);
    const double first = std::accumulate(losses.begin(), losses.begin() + 20, 0.0) / 20;
    const double last = std::accumulate(losses.end() - 20, losses.end(), 0.0) / 20;
    CHECK(last < first);

    auto loaded = load_denoiser(dir / "base.ckpt");
    CHECK(loaded.metadata["stage"] == "pretrain");
    CHECK(loaded.metadata["step"] == 800);
    CHECK(loaded.metadata["config_hash"] == cfg.hash());

    // reference colours from the renderer
    std::array<std::array<double, 3>, kBackgroundCount> palette{};
    for (int b = 0; b < kBackgroundCount; ++b) {
        auto a = data[0].attributes;
        a.background = Background(b);
        const auto img = render(a).image;
        for (int c = 0; c < 3; ++c) palette[b][c] = img.unit(0, 0, c);
    }
    std::vector<TokenizedText> toks;
    for (int i = 0; i < 4; ++i) toks.push_back(aligner.codec.tokenize(data[i].base_text, ""));
    auto samples = sample(model, NoiseSchedule::linear(), aligner.codec.encode_batch(toks), {1, 2, 3, 4});
    for (int i = 0; i < 4; ++i) {
        const auto c = corner_colour(samples[i]);
        auto dist = [&](int b) {
            double d = 0;
            for (int k = 0; k < 3; ++k) d += (c[k] - palette[b][k]) * (c[k] - palette[b][k]);
            return d;
        };
        int best = 0;
        for (int b = 1; b < kBackgroundCount; ++b)
            if (dist(b) < dist(best)) best = b;
        INFO("corner ", c[0], " ", c[1], " ", c[2]);
        CHECK(best == static_cast<int>(Background::blue));
    }
    std::filesystem::remove_all(dir);
}

}  // TEST_SUITE
