#pragma once

// Flat `key = value` configuration files. `#` starts a comment; blank lines
// are ignored; unknown keys and malformed values raise ConfigError.

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

namespace spf {

enum class Stage { pretrain, stage1, stage2 };
enum class Enhancement { difference, clip };
enum class TrainScope { cross_attention, full };

std::string_view to_string(Stage s);
std::string_view to_string(Enhancement e);
std::string_view to_string(TrainScope s);

/// Ordered key/value pairs as read from a config file.
using KeyValues = std::vector<std::pair<std::string, std::string>>;

KeyValues parse_key_values(std::string_view text);
KeyValues read_key_values(const std::filesystem::path& path);

double parse_double(const std::string& key, const std::string& value);
std::int64_t parse_int(const std::string& key, const std::string& value);
bool parse_bool(const std::string& key, const std::string& value);
std::vector<double> parse_double_list(const std::string& key, const std::string& value);

struct Lambdas {
    double text = 0.2;
    double fine = 0.1;
    double enhanced = 0.6;
};

struct TrainConfig {
    Stage stage = Stage::stage2;
    double learning_rate = 5e-5;
    int epochs = 5;
    int steps = 0;  // when > 0, overrides epochs
    int batch_size = 16;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double weight_decay = 0.01;
    Lambdas lambdas;
    std::uint64_t seed = 0;
    bool use_sfcm = true;
    bool use_text_loss = true;
    bool use_fine_loss = true;
    bool use_enhanced = true;
    Enhancement enhancement = Enhancement::difference;
    TrainScope train_scope = TrainScope::cross_attention;
    int log_every = 1;
    int checkpoint_every = 0;  // 0 disables intermediate checkpoints

    /// Defaults for a stage: lr 1e-5 / 2 epochs for stage 1, 5e-5 / 5 epochs
    /// for stage 2; pretraining shares the stage-1 optimizer settings.
    static TrainConfig defaults(Stage stage);

    /// Total optimizer steps for a dataset of `dataset_size` samples.
    int total_steps(std::size_t dataset_size) const;

    /// Canonical `key = value` rendering; parse(to_text()) round-trips.
    std::string to_text() const;
    std::string hash() const;

    void validate() const;
};

/// Applies one key. Returns false when the key is not a TrainConfig key.
bool apply_train_key(TrainConfig& config, const std::string& key, const std::string& value);

/// The `stage` key, when present, selects the defaults the rest override.
TrainConfig parse_train_config(std::string_view text, Stage fallback = Stage::stage2);
TrainConfig load_train_config(const std::filesystem::path& path, Stage fallback = Stage::stage2);

}  // namespace spf
