#include "spf/config.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <sstream>

#include "spf/digest.hpp"
#include "spf/errors.hpp"

namespace spf {
namespace {

std::string trim(std::string_view s) {
    const auto first = s.find_first_not_of(" \t\r");
    if (first == std::string_view::npos) return {};
    const auto last = s.find_last_not_of(" \t\r");
    return std::string(s.substr(first, last - first + 1));
}

std::string format_double(double v) {
    std::ostringstream out;
    out.precision(17);
    out << v;
    return out.str();
}

}  // namespace

std::string_view to_string(Stage s) {
    switch (s) {
        case Stage::pretrain: return "pretrain";
        case Stage::stage1: return "stage1";
        case Stage::stage2: return "stage2";
    }
    return "?";
}

std::string_view to_string(Enhancement e) { return e == Enhancement::difference ? "difference" : "clip"; }
std::string_view to_string(TrainScope s) { return s == TrainScope::cross_attention ? "cross_attention" : "full"; }

KeyValues parse_key_values(std::string_view text) {
    KeyValues out;
    std::istringstream in{std::string(text)};
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        auto body = trim(line);
        if (body.empty()) continue;
        auto eq = body.find('=');
        if (eq == std::string::npos) {
            throw ConfigError("line " + std::to_string(lineno) + ": expected 'key = value'");
        }
        auto key = trim(std::string_view(body).substr(0, eq));
        auto value = trim(std::string_view(body).substr(eq + 1));
        if (key.empty()) throw ConfigError("line " + std::to_string(lineno) + ": empty key");
        out.emplace_back(std::move(key), std::move(value));
    }
    return out;
}

KeyValues read_key_values(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read config " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_key_values(ss.str());
}

double parse_double(const std::string& key, const std::string& value) {
    try {
        std::size_t used = 0;
        double v = std::stod(value, &used);
        if (used != value.size()) throw std::invalid_argument(value);
        return v;
    } catch (const std::exception&) {
        throw ConfigError(key + ": not a number: '" + value + "'");
    }
}

std::int64_t parse_int(const std::string& key, const std::string& value) {
    std::int64_t v = 0;
    auto [ptr, ec] = std::from_chars(value.data(), value.data() + value.size(), v);
    if (ec != std::errc() || ptr != value.data() + value.size()) {
        throw ConfigError(key + ": not an integer: '" + value + "'");
    }
    return v;
}

bool parse_bool(const std::string& key, const std::string& value) {
    if (value == "true" || value == "1") return true;
    if (value == "false" || value == "0") return false;
    throw ConfigError(key + ": expected true/false, got '" + value + "'");
}

std::vector<double> parse_double_list(const std::string& key, const std::string& value) {
    std::vector<double> out;
    std::istringstream in(value);
    std::string item;
    while (std::getline(in, item, ',')) {
        auto t = trim(item);
        if (!t.empty()) out.push_back(parse_double(key, t));
    }
    if (out.empty()) throw ConfigError(key + ": empty list");
    return out;
}

TrainConfig TrainConfig::defaults(Stage stage) {
    TrainConfig c;
    c.stage = stage;
    if (stage == Stage::stage2) {
        c.learning_rate = 5e-5;
        c.epochs = 5;
    } else {
        c.learning_rate = 1e-5;
        c.epochs = 2;
    }
    return c;
}

int TrainConfig::total_steps(std::size_t dataset_size) const {
    if (steps > 0) return steps;
    // Full batches only; a dataset smaller than one batch still gives one step.
    const auto per_epoch = std::max<std::size_t>(1, dataset_size / static_cast<std::size_t>(batch_size));
    return static_cast<int>(per_epoch) * epochs;
}

void TrainConfig::validate() const {
    if (!(learning_rate > 0)) throw ConfigError("learning_rate must be positive");
    if (epochs < 1) throw ConfigError("epochs must be >= 1");
    if (steps < 0) throw ConfigError("steps must be >= 0");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1)) throw ConfigError("betas must lie in [0, 1)");
    if (weight_decay < 0) throw ConfigError("weight_decay must be >= 0");
    if (lambdas.text < 0 || lambdas.fine < 0 || lambdas.enhanced < 0) throw ConfigError("lambdas must be >= 0");
    if (log_every < 1) throw ConfigError("log_every must be >= 1");
    if (checkpoint_every < 0) throw ConfigError("checkpoint_every must be >= 0");
}

std::string TrainConfig::to_text() const {
    std::ostringstream out;
    out << "stage = " << to_string(stage) << "\n"
        << "learning_rate = " << format_double(learning_rate) << "\n"
        << "epochs = " << epochs << "\n"
        << "steps = " << steps << "\n"
        << "batch_size = " << batch_size << "\n"
        << "beta1 = " << format_double(beta1) << "\n"
        << "beta2 = " << format_double(beta2) << "\n"
        << "weight_decay = " << format_double(weight_decay) << "\n"
        << "lambda1 = " << format_double(lambdas.text) << "\n"
        << "lambda2 = " << format_double(lambdas.fine) << "\n"
        << "lambda3 = " << format_double(lambdas.enhanced) << "\n"
        << "seed = " << seed << "\n"
        << "use_sfcm = " << (use_sfcm ? "true" : "false") << "\n"
        << "use_text_loss = " << (use_text_loss ? "true" : "false") << "\n"
        << "use_fine_loss = " << (use_fine_loss ? "true" : "false") << "\n"
        << "use_enhanced = " << (use_enhanced ? "true" : "false") << "\n"
        << "enhancement = " << to_string(enhancement) << "\n"
        << "train_scope = " << to_string(train_scope) << "\n"
        << "log_every = " << log_every << "\n"
        << "checkpoint_every = " << checkpoint_every << "\n";
    return out.str();
}

std::string TrainConfig::hash() const { return sha256_hex(to_text()); }

bool apply_train_key(TrainConfig& c, const std::string& key, const std::string& value) {
    if (key == "stage") {
        if (value == "pretrain") c.stage = Stage::pretrain;
        else if (value == "stage1") c.stage = Stage::stage1;
        else if (value == "stage2") c.stage = Stage::stage2;
        else throw ConfigError("stage: unknown value '" + value + "'");
    } else if (key == "learning_rate") {
        c.learning_rate = parse_double(key, value);
    } else if (key == "epochs") {
        c.epochs = static_cast<int>(parse_int(key, value));
    } else if (key == "steps") {
        c.steps = static_cast<int>(parse_int(key, value));
    } else if (key == "batch_size") {
        c.batch_size = static_cast<int>(parse_int(key, value));
    } else if (key == "beta1") {
        c.beta1 = parse_double(key, value);
    } else if (key == "beta2") {
        c.beta2 = parse_double(key, value);
    } else if (key == "weight_decay") {
        c.weight_decay = parse_double(key, value);
    } else if (key == "lambda1") {
        c.lambdas.text = parse_double(key, value);
    } else if (key == "lambda2") {
        c.lambdas.fine = parse_double(key, value);
    } else if (key == "lambda3") {
        c.lambdas.enhanced = parse_double(key, value);
    } else if (key == "seed") {
        c.seed = static_cast<std::uint64_t>(parse_int(key, value));
    } else if (key == "use_sfcm") {
        c.use_sfcm = parse_bool(key, value);
    } else if (key == "use_text_loss") {
        c.use_text_loss = parse_bool(key, value);
    } else if (key == "use_fine_loss") {
        c.use_fine_loss = parse_bool(key, value);
    } else if (key == "use_enhanced") {
        c.use_enhanced = parse_bool(key, value);
    } else if (key == "enhancement") {
        if (value == "difference") c.enhancement = Enhancement::difference;
        else if (value == "clip") c.enhancement = Enhancement::clip;
        else throw ConfigError("enhancement: unknown value '" + value + "'");
    } else if (key == "train_scope") {
        if (value == "cross_attention") c.train_scope = TrainScope::cross_attention;
        else if (value == "full") c.train_scope = TrainScope::full;
        else throw ConfigError("train_scope: unknown value '" + value + "'");
    } else if (key == "log_every") {
        c.log_every = static_cast<int>(parse_int(key, value));
    } else if (key == "checkpoint_every") {
        c.checkpoint_every = static_cast<int>(parse_int(key, value));
    } else {
        return false;
    }
    return true;
}

TrainConfig parse_train_config(std::string_view text, Stage fallback) {
    auto kv = parse_key_values(text);
    Stage stage = fallback;
    for (const auto& [k, v] : kv) {
        if (k == "stage") {
            TrainConfig probe;
            apply_train_key(probe, k, v);
            stage = probe.stage;
        }
    }
    auto config = TrainConfig::defaults(stage);
    for (const auto& [k, v] : kv) {
        if (!apply_train_key(config, k, v)) throw ConfigError("unknown config key '" + k + "'");
    }
    config.validate();
    return config;
}

TrainConfig load_train_config(const std::filesystem::path& path, Stage fallback) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read config " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_train_config(ss.str(), fallback);
}

}  // namespace spf
