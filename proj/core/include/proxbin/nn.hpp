#pragma once

#include "proxbin/autodiff.hpp"
#include "proxbin/quantizers.hpp"
#include "proxbin/tensor.hpp"

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace proxbin {

enum class LayerKind { linear, conv2d, relu, pool, flatten, norm };

LayerKind parse_layer_kind(std::string_view name);
std::string to_string(LayerKind kind);

struct LayerSpec {
    LayerKind kind = LayerKind::linear;
    std::size_t in = 0;   ///< input features (linear) or channels (conv2d, norm)
    std::size_t out = 0;  ///< output features or channels
    std::size_t kernel = 3;
    std::size_t stride = 1;
    std::size_t padding = 0;
    std::size_t window = 2;  ///< pool
    bool binarize_weights = false;
    bool binarize_activations = false;
    std::optional<int> accumulator_bits;
    std::string name;

    bool has_weights() const noexcept { return kind == LayerKind::linear || kind == LayerKind::conv2d; }
};

enum class TaskMode { BW, BWA, BWAA };

TaskMode parse_task_mode(std::string_view name);
std::string to_string(TaskMode mode);

/// What to quantize. A TaskMode expands to these; explicit flags are validated.
struct TaskFlags {
    bool weights = true;
    bool activations = false;
    std::optional<int> accumulator_bits;

    static TaskFlags from_mode(TaskMode mode);
};

struct ModelOptions {
    TaskFlags task;
    bool keep_first_last_fp = true;  ///< first and last weight layers stay full precision
};

/// x * (s F(w*))^T, with s = mean|w*| when `scale` and 1 otherwise. The
/// backward multiplier on w* is s * B(w*).
Var bin_linear_forward(Var x, Var w_star, const QuantizerPair& pair, bool scale);

/// Elementwise F(x) with backward multiplier B(x).
Var bin_activation(Var x, const QuantizerPair& pair);

/// ((v + 2^(bits-1)) mod 2^bits) - 2^(bits-1) on every entry, plus the fraction
/// of entries outside [-2^(bits-1), 2^(bits-1) - 1]. Only bits = 8 is supported.
std::pair<Tensor, double> accumulator_wrap(const Tensor& acc, int bits = 8);

/// accumulator_wrap applied to acc / unit, then rescaled by unit. The gradient
/// passes straight through.
Var wrap_accumulator(Var acc, double unit, int bits, double& overflow_rate);

struct Parameter {
    enum class Role { weight, bias, gamma, beta };

    std::string name;
    Tensor value;
    Role role = Role::weight;
    std::size_t layer = 0;
    bool binarized = false;  ///< carries a weight quantizer
};

struct ForwardOptions {
    const QuantizerPair* activation_pair = nullptr;  ///< required when activations are binarized
    bool training = false;
};

struct ForwardResult {
    Var logits;
    /// One entry per layer with an 8-bit accumulator, in layer order.
    std::vector<std::pair<std::string, double>> overflow;
};

class Model {
public:
    Model(std::vector<LayerSpec> layers, ModelOptions options);

    const std::vector<LayerSpec>& layers() const noexcept { return layers_; }
    const ModelOptions& options() const noexcept { return options_; }
    std::vector<Parameter>& parameters() noexcept { return params_; }
    const std::vector<Parameter>& parameters() const noexcept { return params_; }
    /// True when the relu at `layer` is dropped ahead of a binarized activation.
    bool relu_bypassed(std::size_t layer) const { return bypass_relu_.at(layer); }

    /// He-uniform weights, zero biases, unit gamma.
    void initialize(std::uint64_t seed);

    /// `weights` holds one variable per parameter, in parameters() order.
    ForwardResult forward(const std::vector<Var>& weights, Var input, const ForwardOptions& options);

    /// Forward with the stored parameter values, no gradient.
    ForwardResult evaluate(Tape& tape, Var input, const ForwardOptions& options);

    std::vector<BatchNormStats>& norm_stats() noexcept { return norm_stats_; }

private:
    std::vector<LayerSpec> layers_;
    ModelOptions options_;
    std::vector<Parameter> params_;
    std::vector<std::size_t> first_param_;  ///< index into params_ per layer
    std::vector<bool> bypass_relu_;
    std::vector<BatchNormStats> norm_stats_;
    std::vector<std::size_t> norm_index_;
};

/// Install quantization points per `options` and allocate parameters.
/// Throws ConfigError for BWAA without activation binarization, accumulator
/// widths other than 8, or malformed layer lists.
Model build_model(std::vector<LayerSpec> layers, const ModelOptions& options);

/// in -> hidden... -> classes with relu between linear layers.
std::vector<LayerSpec> mlp_layers(std::size_t in, const std::vector<std::size_t>& hidden, std::size_t classes);

/// conv(3x3, pad 1) -> norm -> relu -> pool, twice, then a linear classifier.
std::vector<LayerSpec> cnn2_layers(std::size_t channels, std::size_t size, std::size_t classes,
                                   std::size_t width1 = 16, std::size_t width2 = 32);

} // namespace proxbin
