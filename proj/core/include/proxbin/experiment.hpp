#pragma once

#include "proxbin/nn.hpp"

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace proxbin {

/// Training algorithms accepted by run_experiment.
const std::vector<std::string>& algorithm_names();
bool is_binarizing(std::string_view algorithm);

struct DatasetConfig {
    std::string kind = "blobs";  ///< blobs | idx | cifar10 | cifar100
    std::filesystem::path train_images;
    std::filesystem::path train_labels;
    std::filesystem::path test_images;
    std::filesystem::path test_labels;
    std::size_t train_limit = 0;  ///< 0 keeps every sample
    std::size_t test_limit = 0;
    std::size_t blobs_train = 2000;
    std::size_t blobs_test = 500;
    std::size_t blobs_classes = 4;
    std::size_t blobs_dim = 16;
    double blobs_spread = 0.05;
};

struct ModelConfig {
    std::string preset = "mlp";  ///< mlp | cnn2 | custom
    std::vector<std::size_t> hidden{64, 64};
    std::size_t width1 = 16;
    std::size_t width2 = 32;
    std::vector<LayerSpec> layers;  ///< used by the custom preset
    bool keep_first_last_fp = true;
    bool scale = true;
    /// Per-channel standardization of the input; empty disables it.
    std::vector<double> input_mean;
    std::vector<double> input_std;
};

struct ScheduleConfig {
    std::string step_rule = "constant";
    double eta = 0.05;
    double eta_min = 0.0;
    std::size_t decay_epochs = 0;  ///< step_decay period in epochs
    double decay_factor = 0.1;
    double momentum = 0.9;
    std::optional<double> clip_norm;
    /// Overrides of the algorithm's smoothing/shift defaults.
    std::optional<std::string> mu_rule;
    std::optional<double> mu0;
    std::optional<double> mu_end;
    std::optional<double> rho0;
    std::optional<double> rho_end;
    bool mu_ramp = true;  ///< false pins mu at the pair's default value
};

struct ExperimentConfig {
    std::string algorithm = "bc";
    std::optional<std::string> pair;  ///< replaces the algorithm's quantizer pair
    std::string task_mode = "BW";
    std::optional<bool> activations;  ///< explicit override of the mode's activation flag
    std::string pipeline = "end-to-end";
    std::filesystem::path checkpoint;  ///< fine-tune source
    std::size_t epochs = 5;
    std::size_t batch_size = 64;
    std::size_t eval_batch_size = 256;
    std::uint64_t seed = 1;
    std::filesystem::path out = "runs/default";
    DatasetConfig data;
    ModelConfig model;
    ScheduleConfig schedule;
};

/// Throws ConfigError on unknown keys, bad values, or an invalid algorithm/task-mode combination.
ExperimentConfig load_config(const std::filesystem::path& path);
ExperimentConfig parse_config(std::string_view toml_text, std::string_view source = "config");
void validate_config(const ExperimentConfig& config);
/// TOML text containing every field; parse_config(echo_config(c)) reproduces c.
std::string echo_config(const ExperimentConfig& config);

struct MetricsRow {
    std::string phase;  ///< train | export
    std::size_t epoch = 0;
    std::size_t step = 0;
    double train_loss = 0.0;
    double train_acc = 0.0;
    double test_acc = 0.0;
    double mean_abs_w_star = 0.0;
    double fraction_binary = 0.0;
    double overflow_rate = 0.0;  ///< largest per-layer rate in the epoch
    double mu = 0.0;
    double rho = 0.0;
};

constexpr int metrics_schema_version = 1;
std::string metrics_header();
std::string format_metrics_row(const MetricsRow& row);

struct LayerOverflow {
    std::size_t epoch = 0;
    std::string layer;
    double rate = 0.0;
};

struct RunResult {
    std::vector<MetricsRow> rows;
    std::vector<LayerOverflow> overflow;
    double final_test_acc = 0.0;  ///< after export for binarizing algorithms
    bool diverged = false;
    std::size_t last_good_epoch = 0;
    std::string message;
    std::filesystem::path out;
};

struct RunHooks {
    std::function<void(const MetricsRow&)> on_row;
};

/// Train per `config`, writing metrics.csv, timing.csv, config.toml, status.json,
/// model.ckpt and (for binarizing algorithms) model.bqw under config.out.
/// Divergence is reported in the result and status.json rather than thrown.
RunResult run_experiment(const ExperimentConfig& config, const RunHooks& hooks = {});

} // namespace proxbin
