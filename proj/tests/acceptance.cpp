// Acceptance runner: one PASS/FAIL line per criterion, nonzero exit on any failure.

#include <chrono>
#include <cstdio>
#include <iostream>
#include <set>
#include <sstream>

#include <CLI11.hpp>

#include "spf/errors.hpp"
#include "spf/experiment.hpp"
#include "spf/losses.hpp"
#include "spf/sfcm.hpp"
#include "test_support.hpp"

using namespace spf;
using spf_test::randn64;
using spf_test::TapPair;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

std::string fmt(double v) {
    std::ostringstream out;
    out.precision(6);
    out << v;
    return out.str();
}

auto gen(std::uint64_t s) { return at::make_generator<at::CPUGeneratorImpl>(s); }

double seconds_since(std::chrono::steady_clock::time_point start) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

// 1. Analytic gradients of every loss against central differences.
Outcome gradient_oracle() {
    const auto start = std::chrono::steady_clock::now();
    double worst = 0;
    for (std::uint64_t seed : {101, 202, 303}) {
        TapPair p(seed);
        auto mask = torch::rand({1, 32, 32}, gen(seed + 1), torch::kFloat64);
        for (std::size_t j = 0; j < 3; ++j) {
            auto with = [&](bool keys, bool fine) {
                return [&, j, keys, fine](const torch::Tensor& x) {
                    TapPair q = p;
                    (keys ? q.ks[j] : q.qs[j]) = x;
                    q.rebuild();
                    return fine ? masked_fine_loss(q.ref, q.res, mask) : masked_text_loss(q.ref, q.res, mask);
                };
            };
            worst = std::max(worst, spf_test::fd_gradient_error(with(true, false), p.ks[j]));
            worst = std::max(worst, spf_test::fd_gradient_error(with(false, false), p.qs[j]));
            worst = std::max(worst, spf_test::fd_gradient_error(with(false, true), p.qs[j]));
        }
        auto eps = randn64({1, 4, 2, 4}, seed + 2);
        worst = std::max(worst, spf_test::fd_gradient_error([&](const torch::Tensor& h) { return diffusion_loss(eps, h); },
                                                            randn64({1, 4, 2, 4}, seed + 3)));
    }
    torch::manual_seed(21);
    Aligner model(Vocabulary::builtin().size());
    model->to(torch::kFloat64);
    auto aligner = make_bundle(model);
    auto target = aligner.embed_text("wearing a hat");
    auto truth = torch::rand({1, 3, 32, 32}, gen(22), torch::kFloat64) * 0.8 + 0.1;
    auto x = torch::rand({1, 3, 32, 32}, gen(23), torch::kFloat64) * 0.8 + 0.1;
    worst = std::max(worst, spf_test::fd_gradient_error(
                                [&](const torch::Tensor& v) { return enhancement_loss(aligner, v, truth, target); }, x));
    worst = std::max(worst, spf_test::fd_gradient_error(
                                [&](const torch::Tensor& v) { return clip_baseline_loss(aligner, v, target); }, x));
    const double secs = seconds_since(start);
    return {worst <= 1e-4 && secs < 120,
            "max relative error " + fmt(worst) + " (<= 1e-4), " + fmt(secs) + " s (< 120 s)"};
}

// 2. Closed-form x0 from the true noise.
Outcome one_step_identity() {
    const auto schedule = NoiseSchedule::linear();
    auto x0 = torch::rand({4, 3, 32, 32}, gen(1)) * 2 - 1;
    auto eps = torch::randn({4, 3, 32, 32}, gen(2));
    double worst = 0;
    for (int t : {0, 50, 100, 199}) {
        auto x_t = forward_diffuse(schedule, x0, t, eps);
        worst = std::max(worst, (one_step_x0(schedule, x_t, t, eps) - x0).abs().max().item<double>());
    }
    return {worst <= 1e-5, "max inf-norm " + fmt(worst) + " (<= 1e-5)"};
}

// 3. Exact zeros for identical paths, a full mask and a perfect prediction.
Outcome zero_fixed_points() {
    auto aligner = spf_test::untrained_aligner();
    auto original = spf_test::untrained_denoiser();
    auto pair = ModelPair::make(original, original);
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
    auto x = torch::randn({4, 3, 32, 32}, gen(3));
    auto t = torch::tensor({5, 60, 120, 199}, torch::kInt64);
    AttentionTap tap_ref, tap_res;
    torch::NoGradGuard guard;
    auto eps_ref = predict(pair.reference, x, t, cond, &tap_ref);
    auto eps_res = predict(pair.response, x, t, cond, &tap_res);
    const double soft = soft_map(eps_ref, eps_res).abs().max().item<double>();
    auto refined = build_refined_batch(eps_ref, eps_res, tap_res, spans, gammas, {true, true, true, true});
    const double m = refined.abs().max().item<double>();
    const double same_text = masked_text_loss(tap_ref, tap_res, refined).item<double>();
    const double same_fine = masked_fine_loss(tap_ref, tap_res, refined).item<double>();

    TapPair p(9);
    auto ones = torch::ones({1, 32, 32}, torch::kFloat64);
    const double full_text = masked_text_loss(p.ref, p.res, ones).item<double>();
    const double full_fine = masked_fine_loss(p.ref, p.res, ones).item<double>();

    auto model = Aligner(Vocabulary::builtin().size());
    auto bundle = make_bundle(model);
    auto x0 = torch::rand({2, 3, 32, 32}, gen(4));
    const double enh = enhancement_loss(bundle, x0, x0, bundle.embed_text("wearing a hat")).item<double>();

    const bool ok = soft == 0 && m == 0 && same_text == 0 && same_fine == 0 && full_text == 0 && full_fine == 0 &&
                    enh == 0;
    return {ok, "identical paths: |M| " + fmt(m) + ", L_text " + fmt(same_text) + ", L_fine " + fmt(same_fine) +
                    "; full mask: " + fmt(full_text) + ", " + fmt(full_fine) + "; L_enhanced " + fmt(enh)};
}

// 4. Spatial sums of the contribution tensor against the direct attention.
Outcome contribution_equivalence() {
    double worst = 0;
    for (std::uint64_t i = 0; i < 100; ++i) {
        const std::int64_t n = 1 + static_cast<std::int64_t>(i % 5), s = 4 + static_cast<std::int64_t>(i % 13);
        const std::int64_t d = 2 + static_cast<std::int64_t>(i % 7);
        auto keys = randn64({1, n, d}, 1000 + i);
        auto queries = randn64({1, s, d}, 2000 + i);
        auto base = torch::ones({1, n}, torch::kBool);
        auto layer = spf_test::make_layer(keys, queries, base, 1, s);
        auto summed = variant_attention_contrib(layer).sum(2)[0];
        auto direct = spf_test::direct_variant_feature(keys[0], queries[0]);
        worst = std::max(worst, (summed - direct).abs().max().item<double>());
    }
    return {worst <= 1e-6, "max inf-norm " + fmt(worst) + " over 100 instances (<= 1e-6)"};
}

// 5. Refinement identities, monotonicity in gamma and range.
Outcome sfcm_algebra() {
    bool identity = true, monotone = true, range = true;
    for (std::uint64_t i = 0; i < 200; ++i) {
        auto g = gen(5000 + i);
        auto soft = torch::rand({32, 32}, g);
        std::vector<torch::Tensor> maps;
        std::vector<double> gammas, ones;
        const int k = 1 + static_cast<int>(i % 4);
        for (int j = 0; j < k; ++j) {
            maps.push_back(torch::rand({32, 32}, g));
            gammas.push_back(torch::rand({1}, g).item<double>());
            ones.push_back(1.0);
        }
        identity = identity && torch::equal(refine(soft, maps, ones), soft);
        auto before = refine(soft, maps, gammas);
        range = range && before.min().item<float>() >= 0 && before.max().item<float>() <= 1;
        auto raised = gammas;
        const auto j = i % static_cast<std::uint64_t>(k);
        raised[j] = raised[j] + (1 - raised[j]) * torch::rand({1}, g).item<double>();
        auto after = refine(soft, maps, raised);
        monotone = monotone && (after >= before).all().item<bool>();
        range = range && after.min().item<float>() >= 0 && after.max().item<float>() <= 1;
    }
    return {identity && monotone && range, std::string("gamma=1 identity ") + (identity ? "ok" : "broken") +
                                               ", monotone " + (monotone ? "ok" : "broken") + ", range " +
                                               (range ? "ok" : "broken") + " over 200 instances"};
}

// 6. Scope and frozen-reference contracts over 100 stage-2 steps.
Outcome scope_contracts() {
    auto aligner = spf_test::untrained_aligner();
    auto original = spf_test::untrained_denoiser();
    auto initial = clone_denoiser(original);
    {
        torch::NoGradGuard guard;
        auto g = gen(6);
        for (auto& p : initial->parameters()) p.add_(torch::randn(p.sizes(), g) * 0.01);
    }
    auto pair = ModelPair::make(original, initial);
    std::map<std::string, torch::Tensor> response_before, reference_before;
    for (const auto& p : pair.response->named_parameters()) response_before[p.key()] = p.value().detach().clone();
    for (const auto& p : pair.reference->named_parameters()) reference_before[p.key()] = p.value().detach().clone();
    auto cfg = TrainConfig::defaults(Stage::stage2);
    cfg.steps = 100;
    cfg.batch_size = 2;
    cfg.learning_rate = 1e-3;
    run_stage2(pair, build_dataset(16, {TargetAttr::hat}, 6), aligner, cfg);
    int frozen_changed = 0, trained_changed = 0, reference_changed = 0;
    for (const auto& p : pair.response->named_parameters()) {
        const bool same = torch::equal(p.value(), response_before.at(p.key()));
        if (parameter_group(p.key()) == kCrossAttentionGroup) trained_changed += !same;
        else frozen_changed += !same;
    }
    for (const auto& p : pair.reference->named_parameters())
        reference_changed += !torch::equal(p.value(), reference_before.at(p.key()));
    return {frozen_changed == 0 && reference_changed == 0 && trained_changed > 0,
            std::to_string(frozen_changed) + " non-cross-attention and " + std::to_string(reference_changed) +
                " reference tensors changed; " + std::to_string(trained_changed) + " cross-attention tensors trained"};
}

struct Pipeline {
    EvalReport naive, spf;
};

Pipeline pollution_run(Experiment& ex) {
    auto naive_model = ex.naive();
    auto spf_model = ex.stage2("stage2", ex.config().stage2);
    const auto seeds = static_cast<std::size_t>(ex.config().eval_seeds);
    return {ex.evaluate("naive", naive_model, seeds), ex.evaluate("stage2", spf_model, seeds)};
}

// 7.
Outcome pollution(const Pipeline& r) {
    const double ratio = r.spf.preservation_mse_out_of_mask / r.naive.preservation_mse_out_of_mask;
    const bool ok = ratio <= 0.5 && r.spf.responsiveness >= 0.9 * r.naive.responsiveness &&
                    r.spf.responsiveness > r.spf.original_responsiveness;
    return {ok, "out-of-mask MSE spf " + fmt(r.spf.preservation_mse_out_of_mask) + " / naive " +
                    fmt(r.naive.preservation_mse_out_of_mask) + " = " + fmt(ratio) + " (<= 0.5); responsiveness spf " +
                    fmt(r.spf.responsiveness) + ", naive " + fmt(r.naive.responsiveness) + " (>= 0.9x), original " +
                    fmt(r.spf.original_responsiveness) + " (<)"};
}

// 8.
Outcome reconstruction(const Pipeline& r) {
    const double ratio = r.spf.reconstruction_mse / r.naive.reconstruction_mse;
    return {ratio <= 0.25, "reconstruction MSE spf " + fmt(r.spf.reconstruction_mse) + " / naive " +
                               fmt(r.naive.reconstruction_mse) + " = " + fmt(ratio) + " (<= 0.25)"};
}

// 9.
Outcome ablations(Experiment& ex) {
    std::map<std::string, EvalReport> rows;
    for (auto& r : ex.ablation_suite()) rows[r.name] = r.report;
    const auto& full = rows.at("full");
    const auto& sfcm = rows.at("no_sfcm");
    const auto& enh = rows.at("no_enhanced");
    const auto& fine = rows.at("no_fine_loss");
    const bool a = sfcm.responsiveness < full.responsiveness;
    const bool b = enh.responsiveness < full.responsiveness;
    const bool c = fine.preservation_mse_out_of_mask > full.preservation_mse_out_of_mask;
    return {a && b && c, "responsiveness full " + fmt(full.responsiveness) + ", w/o SFCM " + fmt(sfcm.responsiveness) +
                             (a ? " (lower)" : " (NOT lower)") + ", w/o L_enhanced " + fmt(enh.responsiveness) +
                             (b ? " (lower)" : " (NOT lower)") + "; out-of-mask full " +
                             fmt(full.preservation_mse_out_of_mask) + ", w/o L_M-fine " +
                             fmt(fine.preservation_mse_out_of_mask) + (c ? " (higher)" : " (NOT higher)")};
}

// 10.
Outcome sweep(Experiment& ex) {
    const auto rows = ex.lambda_sweep();
    std::set<std::tuple<double, double, double>> points;
    const EvalReport *off = nullptr, *on = nullptr, *paper = nullptr;
    for (const auto& r : rows) {
        const auto& l = r.config.lambdas;
        points.insert({l.text, l.fine, l.enhanced});
        if (l.text == 0.2 && l.fine == 0.1) {
            if (l.enhanced == 0.0) off = &r.report;
            if (l.enhanced == 0.6) on = paper = &r.report;
        }
    }
    const auto expected = ex.config().sweep_lambda1.size() * ex.config().sweep_lambda2.size() *
                          ex.config().sweep_lambda3.size();
    const bool grid = rows.size() == 27 && points.size() == 27 && expected == 27;
    const bool direction = off && on && off->responsiveness < on->responsiveness;
    return {grid && paper && direction,
            std::to_string(rows.size()) + " rows, " + std::to_string(points.size()) + " distinct points, default " +
                (paper ? "present" : "missing") + "; responsiveness at lambda3=0 " +
                (off ? fmt(off->responsiveness) : "n/a") + " vs lambda3=0.6 " + (on ? fmt(on->responsiveness) : "n/a")};
}

// 11.
Outcome determinism(const Pipeline& first, Experiment& rerun) {
    const auto second = pollution_run(rerun);
    auto dump = [](const EvalReport& r) {
        auto j = r.summary_json();
        j.erase("config_hash");
        nlohmann::json records = nlohmann::json::array();
        for (const auto& rec : r.records) records.push_back(rec.to_json());
        j["records"] = records;
        return j.dump();
    };
    const bool naive = dump(first.naive) == dump(second.naive);
    const bool spf = dump(first.spf) == dump(second.spf);
    return {naive && spf, std::string("fresh rerun: naive report ") + (naive ? "identical" : "DIFFERS") +
                              ", stage-2 report " + (spf ? "identical" : "DIFFERS")};
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"acceptance criteria"};
    std::filesystem::path config_path, workdir;
    std::vector<int> only;
    app.add_option("--config", config_path, "experiment config")->required()->check(CLI::ExistingFile);
    app.add_option("--workdir", workdir, "work directory (overrides the config)");
    app.add_option("--only", only, "criteria to run (default: all)")->delimiter(',');
    CLI11_PARSE(app, argc, argv);

    torch::set_num_threads(1);
    auto config = load_experiment_config(config_path);
    if (!workdir.empty()) config.workdir = workdir;
    auto log = [](const std::string& m) { std::cerr << "[acceptance] " << m << std::endl; };

    const std::set<int> wanted(only.begin(), only.end());
    auto want = [&](int c) { return wanted.empty() || wanted.count(c); };
    int failures = 0;
    auto report = [&](int c, const std::string& name, const std::function<Outcome()>& f) {
        if (!want(c)) return;
        Outcome o;
        try {
            o = f();
        } catch (const std::exception& e) {
            o = {false, std::string("error: ") + e.what()};
        }
        failures += !o.pass;
        std::cout << "criterion " << c << " " << (o.pass ? "PASS" : "FAIL") << " " << name << ": " << o.detail
                  << std::endl;
    };

    report(1, "gradient oracle", gradient_oracle);
    report(2, "one-step identity", one_step_identity);
    report(3, "zero fixed points", zero_fixed_points);
    report(4, "contribution equivalence", contribution_equivalence);
    report(5, "SFCM algebra", sfcm_algebra);
    report(6, "parameter scope and frozen reference", scope_contracts);

    if (want(7) || want(8) || want(9) || want(10) || want(11)) {
        Experiment ex(config, log);
        std::optional<Pipeline> main_run;
        std::string pipeline_error;
        if (want(7) || want(8) || want(11)) {
            try {
                main_run = pollution_run(ex);
            } catch (const std::exception& e) {
                pipeline_error = e.what();
            }
        }
        auto need_run = [&]() -> const Pipeline& {
            if (!main_run) throw StateError("pipeline failed: " + pipeline_error);
            return *main_run;
        };
        report(7, "pollution reduction", [&] { return pollution(need_run()); });
        report(8, "reconstruction", [&] { return reconstruction(need_run()); });
        report(9, "ablation directions", [&] { return ablations(ex); });
        report(10, "lambda sweep", [&] { return sweep(ex); });
        report(11, "determinism", [&] {
            const auto& first = need_run();
            auto again = config;
            again.workdir = config.workdir.string() + "_rerun";
            again.reuse = false;
            std::filesystem::remove_all(again.workdir);
            Experiment rerun(again, log);
            return determinism(first, rerun);
        });
    }
    return failures == 0 ? 0 : 1;
}
