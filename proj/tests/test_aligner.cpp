#include <doctest.h>

#include <fstream>

#include "spf/checkpoint.hpp"
#include "spf/errors.hpp"
#include "test_support.hpp"

using namespace spf;

namespace {

AlignerBundle double_bundle(std::uint64_t seed) {
    torch::manual_seed(seed);
    Aligner model(Vocabulary::builtin().size());
    model->to(torch::kFloat64);
    return make_bundle(model);
}

// One small trained aligner shared by the tests below.
const AlignerTrainResult& trained() {
    static const AlignerTrainResult result = [] {
        AlignerTrainConfig cfg;
        cfg.max_steps = 600;
        cfg.eval_every = 50;
        cfg.seed = 2;
        return pretrain_aligner(build_dataset(1500, {TargetAttr::hat, std::nullopt}, 21), cfg);
    }();
    return result;
}

}  // namespace

TEST_SUITE("aligner") {

TEST_CASE("similarity basics") {
    auto gen = at::make_generator<at::CPUGeneratorImpl>(1);
    auto v = torch::randn({64}, gen);
    CHECK(similarity(v, v) == doctest::Approx(1.0).epsilon(1e-12));
    auto e0 = torch::zeros({64});
    auto e1 = torch::zeros({64});
    e0[0] = 1;
    e1[1] = 1;
    CHECK(similarity(e0, e1) == 0.0);
    auto w = torch::randn({64}, gen);
    CHECK(similarity(v, w) == similarity(w, v));
    auto vd = v.to(torch::kFloat64);
    auto wd = w.to(torch::kFloat64);
    double dot = 0, nv = 0, nw = 0;
    for (int i = 0; i < 64; ++i) {
        dot += vd[i].item<double>() * wd[i].item<double>();
        nv += vd[i].item<double>() * vd[i].item<double>();
        nw += wd[i].item<double>() * wd[i].item<double>();
    }
    CHECK(similarity(v, w) == doctest::Approx(dot / std::sqrt(nv * nw)).epsilon(1e-12));
    CHECK_THROWS_AS(similarity(torch::zeros({64}), v), ArgumentError);
    CHECK_THROWS_AS(similarity(v, torch::zeros({64})), ArgumentError);
}

TEST_CASE("row cosine is exactly one for identical directions") {
    auto gen = at::make_generator<at::CPUGeneratorImpl>(4);
    auto a = torch::randn({5, 64}, gen);
    CHECK(torch::equal(cosine_rows(a, a), torch::ones({5})));
    CHECK(torch::allclose(cosine_rows(a, 3.0 * a), torch::ones({5}), 1e-6, 1e-6));
    CHECK(torch::allclose(cosine_rows(a, -a), -torch::ones({5}), 1e-6, 1e-6));
}

TEST_CASE("difference vector") {
    auto aligner = spf_test::untrained_aligner();
    const auto triple = build_dataset(1, {TargetAttr::hat}, 5)[0];
    auto img = image_to_tensor(triple.image);
    const auto enc = aligner.codec.encode(triple.base_text, triple.target_text);
    torch::NoGradGuard guard;

    SUBCASE("finite with norm at most two") {
        auto d = difference_vector(aligner, img, aligner.embed_text(triple.target_text));
        CHECK(torch::isfinite(d).all().item<bool>());
        CHECK(d.norm().item<double>() <= 2.0 + 1e-6);
    }
    SUBCASE("zero when the image embedding equals the text embedding") {
        auto own = aligner.embed_image(img);
        auto d = difference_vector(aligner, img, own);
        CHECK(d.abs().max().item<float>() == 0.0f);
    }
    SUBCASE("encoding without target is rejected") {
        const auto base_only = aligner.codec.encode(triple.base_text, "");
        CHECK_THROWS_AS(difference_vector(aligner, img, base_only), ArgumentError);
        CHECK_NOTHROW(difference_vector(aligner, img, enc));
    }
    SUBCASE("inputs are clamped to the unit range") {
        auto over = img * 3.0 - 1.0;
        CHECK(torch::equal(aligner.embed_image(over), aligner.embed_image(over.clamp(0.0, 1.0))));
    }
}

TEST_CASE("gradient of the squared difference norm matches finite differences") {
    auto aligner = double_bundle(8);
    auto target = aligner.embed_text("wearing a hat").to(torch::kFloat64);
    auto gen = at::make_generator<at::CPUGeneratorImpl>(9);
    auto img = torch::rand({1, 3, 32, 32}, gen, torch::kFloat64) * 0.8 + 0.1;
    const double err = spf_test::fd_gradient_error(
        [&](const torch::Tensor& x) { return difference_vector(aligner, x, target).pow(2).sum(); }, img);
    CHECK(err <= 1e-4);
}

TEST_CASE("parameters are frozen and digest-checked") {
    auto aligner = spf_test::untrained_aligner();
    for (const auto& p : aligner.model->parameters()) CHECK_FALSE(p.requires_grad());
    CHECK_NOTHROW(aligner.verify_frozen());
    {
        torch::NoGradGuard guard;
        aligner.model->parameters().front().add_(1e-3);
    }
    CHECK_THROWS_AS(aligner.verify_frozen(), StateError);
}

TEST_CASE("checkpoint round-trip and tamper detection") {
    auto aligner = spf_test::untrained_aligner(13);
    const auto dir = spf_test::temp_dir("aligner_ckpt");
    save_aligner(dir / "a.ckpt", aligner.model, Vocabulary::builtin(), 0.5, {{"note", "x"}});
    auto loaded = load_aligner(dir / "a.ckpt");
    CHECK(loaded.digest == aligner.digest);
    CHECK(torch::equal(loaded.embed_text("brown hair"), aligner.embed_text("brown hair")));
    CHECK(load_checkpoint(dir / "a.ckpt").metadata["note"] == "x");

    // flip one payload float
    {
        std::fstream f(dir / "a.ckpt", std::ios::in | std::ios::out | std::ios::binary);
        f.seekg(-4, std::ios::end);
        float v = 0;
        f.read(reinterpret_cast<char*>(&v), 4);
        v += 1.0f;
        f.seekp(-4, std::ios::end);
        f.write(reinterpret_cast<const char*>(&v), 4);
    }
    CHECK_THROWS_AS(load_aligner(dir / "a.ckpt"), StateError);
    auto other = Vocabulary::parse("<pad>\n<unk>\nfoo\n");
    save_aligner(dir / "b.ckpt", aligner.model, Vocabulary::builtin(), 0.5);
    CHECK_THROWS_AS(load_aligner(dir / "b.ckpt", other), StateError);
    std::filesystem::remove_all(dir);
}

TEST_CASE("image tensor conversion round-trips") {
    const auto t = build_dataset(1, {TargetAttr::hat}, 3)[0];
    auto x = image_to_tensor(t.image);
    CHECK(x.sizes() == torch::IntArrayRef{3, 32, 32});
    CHECK(tensor_to_image(x) == t.image);
}

TEST_CASE("pretraining reaches the retrieval gate") {
    const auto& r = trained();
    CHECK(r.holdout_accuracy >= 0.9);
    const auto data = build_dataset(400, {TargetAttr::hat, std::nullopt}, 77);
    Aligner model = r.model;
    CHECK(retrieval_accuracy(model, data, 64) >= 0.8);
}

TEST_CASE("trained aligner prefers hat sprites for the hat phrase") {
    auto bundle = make_bundle(trained().model);
    const auto text = bundle.embed_text("wearing a hat");
    const auto data = build_dataset(200, {TargetAttr::hat}, 31);
    int wins = 0;
    torch::NoGradGuard guard;
    for (const auto& t : data) {
        auto without = t.attributes;
        without.target_attr.reset();
        const double with_hat = similarity(bundle.embed_image(image_to_tensor(t.image)), text);
        const double no_hat = similarity(bundle.embed_image(image_to_tensor(render(without).image)), text);
        wins += with_hat > no_hat;
    }
    CHECK(wins >= 190);
}

TEST_CASE("pretraining aborts below the minimum accuracy") {
    AlignerTrainConfig cfg;
    cfg.max_steps = 1;
    cfg.eval_every = 1;
    cfg.abort_accuracy = 0.999;
    cfg.target_accuracy = 1.01;
    CHECK_THROWS_AS(pretrain_aligner(build_dataset(200, {TargetAttr::hat, std::nullopt}, 3), cfg), StateError);
    CHECK_THROWS_AS(pretrain_aligner(build_dataset(1, {TargetAttr::hat}, 3), cfg), ArgumentError);
}

TEST_CASE("aligner config keys") {
    AlignerTrainConfig cfg;
    CHECK(apply_aligner_key(cfg, "max_steps", "12"));
    CHECK(cfg.max_steps == 12);
    CHECK_FALSE(apply_aligner_key(cfg, "bogus", "1"));
    CHECK_THROWS_AS(apply_aligner_key(cfg, "learning_rate", "fast"), ConfigError);
}

}  // TEST_SUITE
