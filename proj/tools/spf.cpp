// spf: command-line front end for data generation, training, evaluation and
// diagnostics.

#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "spf/aligner.hpp"
#include "spf/config.hpp"
#include "spf/errors.hpp"
#include "spf/eval.hpp"
#include "spf/experiment.hpp"
#include "spf/spriteworld.hpp"
#include "spf/trainer.hpp"

namespace {

void say(const std::string& msg) { std::cerr << "[spf] " << msg << std::endl; }

spf::TrainConfig stage_config(const std::string& path, spf::Stage stage, std::optional<std::uint64_t> seed) {
    auto config = path.empty() ? spf::TrainConfig::defaults(stage) : spf::load_train_config(path, stage);
    if (config.stage != stage) throw spf::ConfigError(path + " is a " + std::string(spf::to_string(config.stage)) +
                                                      " config, expected " + std::string(spf::to_string(stage)));
    if (seed) config.seed = *seed;
    return config;
}

void print_report(const spf::EvalReport& r) {
    std::cout << r.summary_json().dump(2) << std::endl;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"SPF portrait customization toolkit"};
    app.require_subcommand(1);

    // data
    auto* data = app.add_subcommand("data", "Generate a sprite dataset directory");
    int count = 1000;
    std::uint64_t data_seed = 0;
    std::string data_out, targets = "hat";
    data->add_option("--count", count, "Number of triples")->required();
    data->add_option("--seed", data_seed, "Dataset seed")->required();
    data->add_option("--out", data_out, "Output directory")->required();
    data->add_option("--targets", targets, "Comma-separated target pool; 'none' for base-only");

    // pretrain-aligner
    auto* pa = app.add_subcommand("pretrain-aligner", "Contrastively pretrain the aligner");
    std::string pa_data, pa_out, pa_config;
    std::optional<std::uint64_t> pa_seed;
    pa->add_option("--data", pa_data, "Dataset directory")->required();
    pa->add_option("--out", pa_out, "Aligner checkpoint")->required();
    pa->add_option("--config", pa_config, "Aligner config file");
    pa->add_option("--seed", pa_seed, "Seed");

    // training stages
    std::string tr_config, tr_data, tr_out, tr_aligner, tr_base, tr_original, tr_init, tr_resume, tr_log;
    std::optional<std::uint64_t> tr_seed;
    int tr_stop = 0;
    auto add_train = [&](CLI::App* cmd) {
        cmd->add_option("--config", tr_config, "Config file");
        cmd->add_option("--data", tr_data, "Dataset directory")->required();
        cmd->add_option("--out", tr_out, "Output checkpoint")->required();
        cmd->add_option("--seed", tr_seed, "Seed (overrides the config)");
        cmd->add_option("--aligner", tr_aligner, "Aligner checkpoint")->required();
        cmd->add_option("--log", tr_log, "JSONL step log");
    };
    auto* pb = app.add_subcommand("pretrain-base", "Train the original model on base-only triples");
    add_train(pb);
    auto* s1 = app.add_subcommand("stage1", "Naive fine-tuning of all parameters");
    add_train(s1);
    s1->add_option("--base", tr_base, "Original model checkpoint")->required();
    auto* s2 = app.add_subcommand("stage2", "Dual-path contrastive training of cross-attention");
    add_train(s2);
    s2->add_option("--original", tr_original, "Original (reference) model checkpoint")->required();
    s2->add_option("--init", tr_init, "Stage-1 checkpoint initializing the response model")->required();
    s2->add_option("--resume", tr_resume, "Stage-2 checkpoint to resume from");
    s2->add_option("--stop-at", tr_stop, "Stop and checkpoint after this many steps");

    // eval
    auto* ev = app.add_subcommand("eval", "Compare a customized model against the original");
    std::string ev_original, ev_customized, ev_data, ev_out, ev_aligner;
    int ev_seeds = 64;
    std::uint64_t ev_seed_base = 1;
    ev->add_option("--original", ev_original, "Original model checkpoint")->required();
    ev->add_option("--customized", ev_customized, "Customized model checkpoint")->required();
    ev->add_option("--data", ev_data, "Prompt dataset directory")->required();
    ev->add_option("--seeds", ev_seeds, "Number of paired seeds");
    ev->add_option("--seed-base", ev_seed_base, "Seed family");
    ev->add_option("--aligner", ev_aligner, "Aligner checkpoint")->required();
    ev->add_option("--out", ev_out, "Report path stem")->required();

    // experiments
    auto* run = app.add_subcommand("run", "Full pipeline: data, aligner, original, stage 1, stage 2, reports");
    std::string run_config;
    run->add_option("--config", run_config, "Experiment config")->required();
    auto* ablate = app.add_subcommand("ablate", "Stage-2 ablation suite");
    std::string ablate_config;
    ablate->add_option("--config", ablate_config, "Experiment config")->required();
    auto* sweep = app.add_subcommand("sweep", "Loss-weight grid sweep");
    std::string sweep_grid;
    sweep->add_option("--grid", sweep_grid, "Experiment config with sweep.* keys")->required();

    // diagnostics
    auto* dump = app.add_subcommand("dump-sfcm", "Write control-map and attention diagnostics for one triple");
    std::string dm_original, dm_customized, dm_aligner, dm_data, dm_out;
    std::size_t dm_index = 0;
    std::uint64_t dm_seed = 0;
    int dm_t = 100;
    dump->add_option("--original", dm_original, "Original model checkpoint")->required();
    dump->add_option("--customized", dm_customized, "Customized model checkpoint")->required();
    dump->add_option("--aligner", dm_aligner, "Aligner checkpoint")->required();
    dump->add_option("--data", dm_data, "Dataset directory")->required();
    dump->add_option("--index", dm_index, "Triple index");
    dump->add_option("--seed", dm_seed, "Noise seed");
    dump->add_option("--timestep", dm_t, "Diffusion timestep");
    dump->add_option("--out", dm_out, "Output directory")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (data->parsed()) {
            auto triples = spf::build_dataset(count, spf::parse_target_pool(targets), data_seed);
            spf::save_dataset(triples, data_out, data_seed);
            say("wrote " + std::to_string(triples.size()) + " triples to " + data_out);
        } else if (pa->parsed()) {
            spf::AlignerTrainConfig cfg;
            if (!pa_config.empty()) {
                for (const auto& [k, v] : spf::read_key_values(pa_config))
                    if (!spf::apply_aligner_key(cfg, k, v)) throw spf::ConfigError("unknown config key '" + k + "'");
            }
            if (pa_seed) cfg.seed = *pa_seed;
            auto result = spf::pretrain_aligner(spf::load_dataset(pa_data), cfg, [](int step, double loss, double acc) {
                say("step " + std::to_string(step) + " loss " + std::to_string(loss) + " holdout " + std::to_string(acc));
            });
            spf::save_aligner(pa_out, result.model, spf::Vocabulary::builtin(), result.holdout_accuracy);
            say("held-out retrieval accuracy " + std::to_string(result.holdout_accuracy));
        } else if (pb->parsed() || s1->parsed() || s2->parsed()) {
            auto aligner = spf::load_aligner(tr_aligner);
            auto triples = spf::load_dataset(tr_data);
            spf::RunOptions opts;
            opts.log = tr_log;
            if (pb->parsed()) {
                auto cfg = stage_config(tr_config, spf::Stage::pretrain, tr_seed);
                opts.checkpoint = tr_out;
                spf::pretrain_base(triples, aligner.codec, cfg, opts);
            } else if (s1->parsed()) {
                auto cfg = stage_config(tr_config, spf::Stage::stage1, tr_seed);
                opts.checkpoint = tr_out;
                spf::stage1(spf::load_denoiser(tr_base).model, triples, aligner.codec, cfg, opts);
            } else {
                auto cfg = stage_config(tr_config, spf::Stage::stage2, tr_seed);
                opts.checkpoint = tr_out;
                opts.resume_from = tr_resume;
                opts.stop_at_step = tr_stop;
                auto pair = spf::ModelPair::make(spf::load_denoiser(tr_original).model, spf::load_denoiser(tr_init).model);
                spf::run_stage2(pair, triples, aligner, cfg, opts);
                aligner.verify_frozen();
            }
            say("wrote " + tr_out);
        } else if (ev->parsed()) {
            auto aligner = spf::load_aligner(ev_aligner);
            auto original = spf::load_denoiser(ev_original).model;
            auto customized = spf::load_denoiser(ev_customized).model;
            auto prompts = spf::load_dataset(ev_data);
            const auto seeds = spf::eval_seeds(static_cast<std::size_t>(ev_seeds), ev_seed_base);
            auto originals = spf::sample_base_texts(original, prompts, seeds, aligner.codec);
            auto report = spf::eval_pair(original, customized, prompts, seeds, aligner, originals);
            report.reconstruction_mse =
                spf::reconstruction_test(original, customized, prompts, seeds, aligner.codec, originals);
            spf::write_report(ev_out, report);
            print_report(report);
        } else if (run->parsed()) {
            spf::Experiment exp(spf::load_experiment_config(run_config), say);
            auto naive = exp.naive();
            auto naive_report = exp.evaluate("stage1", naive, static_cast<std::size_t>(exp.config().eval_seeds));
            auto model = exp.stage2("stage2", exp.config().stage2);
            auto report = exp.evaluate("stage2", model, static_cast<std::size_t>(exp.config().eval_seeds));
            std::cout << nlohmann::json{{"stage1", naive_report.summary_json()}, {"stage2", report.summary_json()}}.dump(2)
                      << std::endl;
        } else if (ablate->parsed()) {
            spf::Experiment exp(spf::load_experiment_config(ablate_config), say);
            auto rows = exp.ablation_suite();
            for (const auto& r : rows) std::cout << r.name << " " << r.report.summary_json().dump() << "\n";
        } else if (sweep->parsed()) {
            spf::Experiment exp(spf::load_experiment_config(sweep_grid), say);
            auto rows = exp.lambda_sweep();
            say("wrote " + std::to_string(rows.size()) + " rows to " + exp.path("reports/sweep.csv").string());
        } else if (dump->parsed()) {
            auto aligner = spf::load_aligner(dm_aligner);
            auto original = spf::load_denoiser(dm_original).model;
            auto customized = spf::load_denoiser(dm_customized).model;
            auto triples = spf::load_dataset(dm_data);
            if (dm_index >= triples.size()) throw spf::ArgumentError("--index beyond dataset size");
            spf::DiagnosticsOptions opts;
            opts.seed = dm_seed;
            opts.timestep = dm_t;
            auto info = spf::dump_diagnostics(original, customized, aligner, triples[dm_index], opts, dm_out);
            std::cout << info.dump(2) << std::endl;
        }
    } catch (const spf::ConfigError& e) {
        std::cerr << "config error: " << e.what() << std::endl;
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << std::endl;
        return 1;
    }
    return 0;
}
