#include "spf/experiment.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

#include "spf/checkpoint.hpp"
#include "spf/digest.hpp"
#include "spf/errors.hpp"

namespace spf {
namespace {

std::string join(const std::vector<double>& v) {
    std::ostringstream out;
    out.precision(17);
    for (std::size_t i = 0; i < v.size(); ++i) out << (i ? "," : "") << v[i];
    return out.str();
}

std::string prefixed(const std::string& prefix, const std::string& text) {
    std::istringstream in(text);
    std::string line, out;
    while (std::getline(in, line)) out += prefix + line + "\n";
    return out;
}

std::vector<double> with_default(std::vector<double> v, double d) {
    if (std::find(v.begin(), v.end(), d) == v.end()) {
        v.push_back(d);
        std::sort(v.begin(), v.end());
    }
    return v;
}

std::string format_lambda(double v) {
    std::ostringstream out;
    out << v;
    return out.str();
}

}  // namespace

std::string ExperimentConfig::to_text() const {
    std::ostringstream out;
    out << "workdir = " << workdir.string() << "\n"
        << "target = " << spf::to_string(target) << "\n"
        << "train_count = " << train_count << "\n"
        << "base_count = " << base_count << "\n"
        << "aligner_count = " << aligner_count << "\n"
        << "eval_prompts = " << eval_prompts << "\n"
        << "eval_seeds = " << eval_seeds << "\n"
        << "seed = " << seed << "\n"
        << "reuse = " << (reuse ? "true" : "false") << "\n"
        << prefixed("aligner.", aligner.to_text()) << prefixed("base.", base.to_text())
        << prefixed("stage1.", stage1.to_text()) << prefixed("stage2.", stage2.to_text())
        << "sweep.lambda1 = " << join(sweep_lambda1) << "\n"
        << "sweep.lambda2 = " << join(sweep_lambda2) << "\n"
        << "sweep.lambda3 = " << join(sweep_lambda3) << "\n"
        << "sweep.steps = " << sweep_steps << "\n"
        << "sweep.eval_seeds = " << sweep_eval_seeds << "\n";
    return out.str();
}

ExperimentConfig parse_experiment_config(std::string_view text) {
    ExperimentConfig c;
    auto kv = parse_key_values(text);
    // Stage keys are applied on top of per-stage defaults, whatever their order.
    for (const auto& [k, v] : kv) {
        auto dot = k.find('.');
        const auto section = dot == std::string::npos ? std::string() : k.substr(0, dot);
        const auto key = dot == std::string::npos ? k : k.substr(dot + 1);
        bool ok = true;
        if (section.empty()) {
            if (k == "workdir") c.workdir = v;
            else if (k == "target") c.target = parse_target_attr(v);
            else if (k == "train_count") c.train_count = static_cast<int>(parse_int(k, v));
            else if (k == "base_count") c.base_count = static_cast<int>(parse_int(k, v));
            else if (k == "aligner_count") c.aligner_count = static_cast<int>(parse_int(k, v));
            else if (k == "eval_prompts") c.eval_prompts = static_cast<int>(parse_int(k, v));
            else if (k == "eval_seeds") c.eval_seeds = static_cast<int>(parse_int(k, v));
            else if (k == "seed") c.seed = static_cast<std::uint64_t>(parse_int(k, v));
            else if (k == "reuse") c.reuse = parse_bool(k, v);
            else ok = false;
        } else if (section == "aligner") {
            ok = apply_aligner_key(c.aligner, key, v);
        } else if (section == "base" || section == "stage1" || section == "stage2") {
            if (key == "stage") throw ConfigError(k + ": the stage of a section is fixed");
            auto& cfg = section == "base" ? c.base : section == "stage1" ? c.stage1 : c.stage2;
            ok = apply_train_key(cfg, key, v);
        } else if (section == "sweep") {
            if (key == "lambda1") c.sweep_lambda1 = parse_double_list(k, v);
            else if (key == "lambda2") c.sweep_lambda2 = parse_double_list(k, v);
            else if (key == "lambda3") c.sweep_lambda3 = parse_double_list(k, v);
            else if (key == "steps") c.sweep_steps = static_cast<int>(parse_int(k, v));
            else if (key == "eval_seeds") c.sweep_eval_seeds = static_cast<int>(parse_int(k, v));
            else ok = false;
        } else {
            ok = false;
        }
        if (!ok) throw ConfigError("unknown config key '" + k + "'");
    }
    for (const auto* cfg : {&c.base, &c.stage1, &c.stage2}) cfg->validate();
    if (c.train_count < 1 || c.base_count < 1 || c.aligner_count < 2) throw ConfigError("dataset counts must be positive");
    if (c.eval_prompts < 1 || c.eval_seeds < 1) throw ConfigError("eval_prompts and eval_seeds must be positive");
    for (const auto* list : {&c.sweep_lambda1, &c.sweep_lambda2, &c.sweep_lambda3})
        for (double l : *list)
            if (l < 0) throw ConfigError("sweep lambdas must be >= 0");
    return c;
}

ExperimentConfig load_experiment_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read config " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_experiment_config(ss.str());
}

// ---------------------------------------------------------------------------

Experiment::Experiment(ExperimentConfig config, std::function<void(const std::string&)> log)
    : config_(std::move(config)), log_(std::move(log)) {
    std::filesystem::create_directories(config_.workdir);
    std::ofstream(path("experiment.cfg")) << config_.to_text();
}

std::vector<PromptTriple> Experiment::make_data(const std::string& name, int count,
                                                const std::set<std::optional<TargetAttr>>& pool, std::uint64_t salt) {
    const auto seed = config_.seed * 1000 + salt;
    auto data = build_dataset(count, pool, seed);
    const auto dir = path("data/" + name);
    const auto recipe = std::to_string(count) + ":" + std::to_string(seed) + ":" + std::to_string(pool.size());
    const auto stamp = dir / "recipe.txt";
    std::string existing;
    if (std::ifstream in(stamp); in) std::getline(in, existing);
    if (existing != recipe) {
        save_dataset(data, dir, seed);
        std::ofstream(stamp) << recipe << "\n";
    }
    return data;
}

const std::vector<PromptTriple>& Experiment::train_data() {
    if (!train_) train_ = make_data("train", config_.train_count, {config_.target}, 3);
    return *train_;
}

const std::vector<PromptTriple>& Experiment::base_data() {
    if (!base_) base_ = make_data("base", config_.base_count, {std::nullopt}, 2);
    return *base_;
}

const std::vector<PromptTriple>& Experiment::aligner_data() {
    if (!aligner_data_) {
        std::set<std::optional<TargetAttr>> pool{std::nullopt};
        for (int i = 0; i < kTargetAttrCount; ++i) pool.insert(static_cast<TargetAttr>(i));
        aligner_data_ = make_data("aligner", config_.aligner_count, pool, 1);
    }
    return *aligner_data_;
}

const std::vector<PromptTriple>& Experiment::eval_prompts() {
    if (!eval_) eval_ = make_data("eval", config_.eval_prompts, {config_.target}, 4);
    return *eval_;
}

const AlignerBundle& Experiment::aligner() {
    if (aligner_) return *aligner_;
    const auto file = path("models/aligner.ckpt");
    const auto recipe = sha256_hex(config_.aligner.to_text() + std::to_string(config_.aligner_count) + ":" +
                                   std::to_string(config_.seed));
    if (config_.reuse && std::filesystem::exists(file) &&
        load_checkpoint(file).metadata.value("recipe", "") == recipe) {
        aligner_ = load_aligner(file);
        if (log_) log_("reusing aligner " + file.string());
        return *aligner_;
    }
    if (log_) log_("pretraining aligner");
    auto result = pretrain_aligner(aligner_data(), config_.aligner, [&](int step, double loss, double acc) {
        if (log_) log_("aligner step " + std::to_string(step) + " loss " + std::to_string(loss) + " holdout " +
                       std::to_string(acc));
    });
    save_aligner(file, result.model, Vocabulary::builtin(), result.holdout_accuracy, {{"recipe", recipe}});
    aligner_ = load_aligner(file);
    return *aligner_;
}

std::optional<Denoiser> Experiment::cached(const std::filesystem::path& file, const std::string& recipe) {
    if (!config_.reuse || !std::filesystem::exists(file)) return std::nullopt;
    auto loaded = load_denoiser(file);
    if (loaded.metadata.value("recipe", "") != recipe || !loaded.metadata.value("complete", true)) return std::nullopt;
    if (log_) log_("reusing " + file.string());
    return loaded.model;
}

Denoiser Experiment::original() {
    if (original_) return *original_;
    const auto& al = aligner();
    original_recipe_ = sha256_hex("base:" + config_.base.to_text() + std::to_string(config_.base_count) + ":" +
                                  std::to_string(config_.seed) + ":" + al.digest);
    const auto file = path("models/original.ckpt");
    if (auto m = cached(file, original_recipe_)) return *(original_ = *m);
    if (log_) log_("pretraining base model");
    RunOptions opts;
    opts.log = path("logs/pretrain_base.jsonl");
    auto model = pretrain_base(base_data(), al.codec, config_.base, opts);
    save_denoiser(file, model,
                  {{"stage", "pretrain"}, {"recipe", original_recipe_}, {"config_hash", config_.base.hash()},
                   {"step", config_.base.total_steps(base_data().size())}});
    original_ = model;
    return model;
}

Denoiser Experiment::naive() {
    if (naive_) return *naive_;
    auto base = original();
    naive_recipe_ = sha256_hex("stage1:" + config_.stage1.to_text() + std::to_string(config_.train_count) + ":" +
                               std::string(spf::to_string(config_.target)) + ":" + original_recipe_);
    const auto file = path("models/stage1.ckpt");
    if (auto m = cached(file, naive_recipe_)) return *(naive_ = *m);
    if (log_) log_("stage 1 fine-tuning");
    RunOptions opts;
    opts.log = path("logs/stage1.jsonl");
    auto model = stage1(base, train_data(), aligner().codec, config_.stage1, opts);
    save_denoiser(file, model,
                  {{"stage", "stage1"}, {"recipe", naive_recipe_}, {"config_hash", config_.stage1.hash()},
                   {"step", config_.stage1.total_steps(train_data().size())}});
    naive_ = model;
    return model;
}

Denoiser Experiment::stage2(const std::string& name, const TrainConfig& config) {
    auto base = original();
    auto init = naive();
    const auto& al = aligner();
    const auto recipe = sha256_hex("stage2:" + config.to_text() + naive_recipe_ + ":" + al.digest);
    const auto file = path("models/" + name + ".ckpt");
    if (auto m = cached(file, recipe)) return *m;
    if (log_) log_("stage 2 run '" + name + "'");
    auto pair = ModelPair::make(base, init);
    RunOptions opts;
    opts.log = path("logs/" + name + ".jsonl");
    auto model = run_stage2(pair, train_data(), al, config, opts);
    save_denoiser(file, model,
                  {{"stage", "stage2"}, {"recipe", recipe}, {"config_hash", config.hash()},
                   {"config", config.to_text()}, {"complete", true},
                   {"step", config.total_steps(train_data().size())},
                   {"reference_digest", pair.reference_digest}});
    al.verify_frozen();
    return model;
}

EvalReport Experiment::evaluate(const std::string& name, Denoiser& customized, std::size_t seeds) {
    auto base = original();
    const auto& al = aligner();
    const auto s = eval_seeds(seeds, config_.seed);
    auto originals = sample_base_texts(base, eval_prompts(), s, al.codec);
    auto report = eval_pair(base, customized, eval_prompts(), s, al, originals);
    report.reconstruction_mse = reconstruction_test(base, customized, eval_prompts(), s, al.codec, originals);
    report.config_hash = sha256_hex(config_.to_text());
    write_report(path("reports/" + name), report);
    if (log_) {
        log_("eval '" + name + "': out-of-mask " + std::to_string(report.preservation_mse_out_of_mask) +
             " responsiveness " + std::to_string(report.responsiveness) + " reconstruction " +
             std::to_string(report.reconstruction_mse));
    }
    return report;
}

std::vector<NamedReport> Experiment::ablation_suite() {
    std::vector<std::pair<std::string, TrainConfig>> variants;
    const auto& full = config_.stage2;
    variants.emplace_back("full", full);
    auto v = full;
    v.use_text_loss = false;
    variants.emplace_back("no_text_loss", v);
    v = full;
    v.use_fine_loss = false;
    variants.emplace_back("no_fine_loss", v);
    v = full;
    v.use_enhanced = false;
    variants.emplace_back("no_enhanced", v);
    v = full;
    v.use_sfcm = false;
    variants.emplace_back("no_sfcm", v);
    v = full;
    v.enhancement = Enhancement::clip;
    variants.emplace_back("clip_enhancement", v);

    std::vector<NamedReport> rows;
    for (const auto& [name, cfg] : variants) {
        auto model = stage2(name == "full" ? "stage2" : "ablation_" + name, cfg);
        rows.push_back({name, cfg, evaluate(name == "full" ? "stage2" : "ablation_" + name, model,
                                            static_cast<std::size_t>(config_.eval_seeds))});
    }
    write_report_table(path("reports/ablation.csv"), rows);
    return rows;
}

std::vector<NamedReport> Experiment::lambda_sweep() {
    const Lambdas defaults;
    const auto l1 = with_default(config_.sweep_lambda1, defaults.text);
    const auto l2 = with_default(config_.sweep_lambda2, defaults.fine);
    const auto l3 = with_default(config_.sweep_lambda3, defaults.enhanced);
    const auto seeds = static_cast<std::size_t>(config_.sweep_eval_seeds > 0 ? config_.sweep_eval_seeds
                                                                              : config_.eval_seeds);
    std::vector<NamedReport> rows;
    for (double a : l1) {
        for (double b : l2) {
            for (double c : l3) {
                auto cfg = config_.stage2;
                cfg.lambdas = {a, b, c};
                if (config_.sweep_steps > 0) cfg.steps = config_.sweep_steps;
                const auto name = "sweep_" + format_lambda(a) + "_" + format_lambda(b) + "_" + format_lambda(c);
                auto model = stage2(name, cfg);
                rows.push_back({name, cfg, evaluate(name, model, seeds)});
            }
        }
    }
    write_report_table(path("reports/sweep.csv"), rows);
    return rows;
}

void write_report_table(const std::filesystem::path& path, const std::vector<NamedReport>& rows) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path);
    out.precision(10);
    out << "name,lambda1,lambda2,lambda3,steps,use_sfcm,use_text_loss,use_fine_loss,use_enhanced,enhancement,"
           "out_of_mask_mse,in_mask_mse,responsiveness,original_responsiveness,reconstruction_mse\n";
    for (const auto& r : rows) {
        const auto& c = r.config;
        const auto& e = r.report;
        out << r.name << "," << c.lambdas.text << "," << c.lambdas.fine << "," << c.lambdas.enhanced << ","
            << c.steps << "," << c.use_sfcm << "," << c.use_text_loss << "," << c.use_fine_loss << ","
            << c.use_enhanced << "," << to_string(c.enhancement) << "," << e.preservation_mse_out_of_mask << ","
            << e.preservation_mse_in_mask << "," << e.responsiveness << "," << e.original_responsiveness << ","
            << e.reconstruction_mse << "\n";
    }
    if (!out) throw StateError("cannot write " + path.string());
}

}  // namespace spf
