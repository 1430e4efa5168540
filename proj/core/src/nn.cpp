#include "proxbin/nn.hpp"

#include "proxbin/errors.hpp"

#include <cmath>
#include <random>

namespace proxbin {

LayerKind parse_layer_kind(std::string_view name) {
    if (name == "linear") return LayerKind::linear;
    if (name == "conv2d" || name == "conv") return LayerKind::conv2d;
    if (name == "relu") return LayerKind::relu;
    if (name == "pool" || name == "max_pool") return LayerKind::pool;
    if (name == "flatten") return LayerKind::flatten;
    if (name == "norm" || name == "batch_norm") return LayerKind::norm;
    throw ConfigError("unknown layer kind '" + std::string(name) + "'");
}

std::string to_string(LayerKind kind) {
    switch (kind) {
    case LayerKind::linear: return "linear";
    case LayerKind::conv2d: return "conv2d";
    case LayerKind::relu: return "relu";
    case LayerKind::pool: return "pool";
    case LayerKind::flatten: return "flatten";
    case LayerKind::norm: return "norm";
    }
    return "unknown";
}

TaskMode parse_task_mode(std::string_view name) {
    if (name == "BW" || name == "bw") return TaskMode::BW;
    if (name == "BWA" || name == "bwa") return TaskMode::BWA;
    if (name == "BWAA" || name == "bwaa") return TaskMode::BWAA;
    throw ConfigError("unknown task mode '" + std::string(name) + "' (expected BW, BWA or BWAA)");
}

std::string to_string(TaskMode mode) {
    switch (mode) {
    case TaskMode::BW: return "BW";
    case TaskMode::BWA: return "BWA";
    case TaskMode::BWAA: return "BWAA";
    }
    return "unknown";
}

TaskFlags TaskFlags::from_mode(TaskMode mode) {
    TaskFlags f;
    f.activations = mode != TaskMode::BW;
    if (mode == TaskMode::BWAA) f.accumulator_bits = 8;
    return f;
}

Var bin_linear_forward(Var x, Var w_star, const QuantizerPair& pair, bool scale) {
    const double s = scale ? mean_abs(w_star.value()) : 1.0;
    return linear(x, apply_custom(w_star, pair.custom_grad(), s));
}

Var bin_activation(Var x, const QuantizerPair& pair) { return apply_custom(x, pair.custom_grad()); }

std::pair<Tensor, double> accumulator_wrap(const Tensor& acc, int bits) {
    if (bits != 8) throw ConfigError("accumulator width " + std::to_string(bits) + " unsupported (only 8 bits)");
    constexpr double half = 128.0, period = 256.0;
    Tensor out = acc;
    std::size_t overflow = 0;
    for (double& v : out.data()) {
        const double nearest = std::round(v);
        if (std::abs(v - nearest) <= 1e-6) v = nearest;
        if (v < -half || v > half - 1.0) ++overflow;
        v = v + half - period * std::floor((v + half) / period) - half;
    }
    const double rate = acc.empty() ? 0.0 : static_cast<double>(overflow) / static_cast<double>(acc.numel());
    return {std::move(out), rate};
}

Var wrap_accumulator(Var acc, double unit, int bits, double& overflow_rate) {
    const double u = unit > 0.0 ? unit : 1.0;
    Tensor scaled = acc.value();
    for (double& v : scaled.data()) v /= u;
    auto [wrapped, rate] = accumulator_wrap(scaled, bits);
    overflow_rate = rate;
    for (double& v : wrapped.data()) v *= u;
    return acc.tape()->record(std::move(wrapped), {acc}, [acc](Tape& tape, const Tensor& g) { tape.accumulate(acc, g); });
}

namespace {

void validate(const std::vector<LayerSpec>& layers) {
    if (layers.empty()) throw ConfigError("model has no layers");
    for (std::size_t i = 0; i < layers.size(); ++i) {
        const LayerSpec& l = layers[i];
        const std::string where = "layer " + std::to_string(i) + " (" + to_string(l.kind) + ")";
        if (l.has_weights() && (l.in == 0 || l.out == 0)) throw ConfigError(where + " needs positive in/out");
        if (l.kind == LayerKind::conv2d && (l.kernel == 0 || l.stride == 0)) {
            throw ConfigError(where + " needs positive kernel and stride");
        }
        if (l.kind == LayerKind::norm && l.in == 0) throw ConfigError(where + " needs the channel count in `in`");
        if (l.kind == LayerKind::pool && l.window == 0) throw ConfigError(where + " needs a positive window");
        if (l.binarize_activations && !l.has_weights()) {
            throw ConfigError(where + " binarizes activations but has no weights");
        }
    }
}

} // namespace

Model build_model(std::vector<LayerSpec> layers, const ModelOptions& options) {
    if (options.task.accumulator_bits && !options.task.activations) {
        throw ConfigError("8-bit accumulators (BWAA) require binarized activations (BWA)");
    }
    if (options.task.accumulator_bits && *options.task.accumulator_bits != 8) {
        throw ConfigError("accumulator width " + std::to_string(*options.task.accumulator_bits) +
                          " unsupported (only 8 bits)");
    }
    std::vector<std::size_t> weight_layers;
    for (std::size_t i = 0; i < layers.size(); ++i)
        if (layers[i].has_weights()) weight_layers.push_back(i);
    for (std::size_t i : weight_layers) {
        LayerSpec& l = layers[i];
        const bool edge = options.keep_first_last_fp && (i == weight_layers.front() || i == weight_layers.back());
        l.binarize_weights = options.task.weights && !edge;
        l.binarize_activations = l.binarize_weights && options.task.activations;
        l.accumulator_bits = l.binarize_activations ? options.task.accumulator_bits : std::nullopt;
    }
    validate(layers);
    return Model(std::move(layers), options);
}

Model::Model(std::vector<LayerSpec> layers, ModelOptions options) : layers_(std::move(layers)), options_(options) {
    validate(layers_);
    bypass_relu_.assign(layers_.size(), false);
    first_param_.assign(layers_.size(), 0);
    norm_index_.assign(layers_.size(), 0);
    for (std::size_t i = 0; i < layers_.size(); ++i) {
        LayerSpec& l = layers_[i];
        if (l.name.empty()) l.name = to_string(l.kind) + std::to_string(i);
        first_param_[i] = params_.size();
        switch (l.kind) {
        case LayerKind::linear:
            params_.push_back({l.name + ".weight", Tensor(Shape{l.out, l.in}), Parameter::Role::weight, i, l.binarize_weights});
            params_.push_back({l.name + ".bias", Tensor(Shape{l.out}), Parameter::Role::bias, i, false});
            break;
        case LayerKind::conv2d:
            params_.push_back({l.name + ".weight", Tensor(Shape{l.out, l.in, l.kernel, l.kernel}), Parameter::Role::weight,
                               i, l.binarize_weights});
            params_.push_back({l.name + ".bias", Tensor(Shape{l.out}), Parameter::Role::bias, i, false});
            break;
        case LayerKind::norm:
            params_.push_back({l.name + ".gamma", Tensor(Shape{l.in}, 1.0), Parameter::Role::gamma, i, false});
            params_.push_back({l.name + ".beta", Tensor(Shape{l.in}), Parameter::Role::beta, i, false});
            norm_index_[i] = norm_stats_.size();
            norm_stats_.emplace_back();
            break;
        case LayerKind::relu:
            for (std::size_t j = i + 1; j < layers_.size(); ++j) {
                const LayerKind k = layers_[j].kind;
                if (k == LayerKind::pool || k == LayerKind::flatten) continue;
                bypass_relu_[i] = layers_[j].has_weights() && layers_[j].binarize_activations;
                break;
            }
            break;
        case LayerKind::pool:
        case LayerKind::flatten: break;
        }
    }
}

void Model::initialize(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    for (Parameter& p : params_) {
        if (p.role == Parameter::Role::weight) {
            const LayerSpec& l = layers_[p.layer];
            const std::size_t fan_in = l.kind == LayerKind::conv2d ? l.in * l.kernel * l.kernel : l.in;
            const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
            std::uniform_real_distribution<double> dist(-bound, bound);
            for (double& v : p.value.data()) v = dist(rng);
        } else if (p.role == Parameter::Role::gamma) {
            p.value.fill(1.0);
        } else {
            p.value.fill(0.0);
        }
    }
    for (BatchNormStats& s : norm_stats_) s = BatchNormStats{};
}

ForwardResult Model::forward(const std::vector<Var>& weights, Var input, const ForwardOptions& options) {
    if (weights.size() != params_.size()) {
        throw DimensionError("model expects " + std::to_string(params_.size()) + " parameter tensors, got " +
                             std::to_string(weights.size()));
    }
    ForwardResult result;
    Var x = input;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
        const LayerSpec& l = layers_[i];
        const std::size_t p = first_param_[i];
        if (l.binarize_activations) {
            if (!options.activation_pair) throw ConfigError("layer '" + l.name + "' binarizes activations but no pair was given");
            x = bin_activation(x, *options.activation_pair);
        }
        switch (l.kind) {
        case LayerKind::linear: {
            if (x.value().rank() != 2) x = flatten(x);
            Var acc = linear(x, weights[p]);
            if (l.accumulator_bits) {
                double rate = 0.0;
                acc = wrap_accumulator(acc, mean_abs(weights[p].value()), *l.accumulator_bits, rate);
                result.overflow.emplace_back(l.name, rate);
            }
            x = add_bias(acc, weights[p + 1]);
            break;
        }
        case LayerKind::conv2d: {
            Var acc = conv2d(x, weights[p], l.stride, l.padding);
            if (l.accumulator_bits) {
                double rate = 0.0;
                acc = wrap_accumulator(acc, mean_abs(weights[p].value()), *l.accumulator_bits, rate);
                result.overflow.emplace_back(l.name, rate);
            }
            x = add_bias(acc, weights[p + 1]);
            break;
        }
        case LayerKind::relu:
            if (!bypass_relu_[i]) x = relu(x);
            break;
        case LayerKind::pool: x = max_pool2d(x, l.window); break;
        case LayerKind::flatten: x = flatten(x); break;
        case LayerKind::norm:
            x = batch_norm(x, weights[p], weights[p + 1], norm_stats_[norm_index_[i]], options.training);
            break;
        }
    }
    result.logits = x;
    return result;
}

ForwardResult Model::evaluate(Tape& tape, Var input, const ForwardOptions& options) {
    std::vector<Var> weights;
    weights.reserve(params_.size());
    for (const Parameter& p : params_) weights.push_back(tape.constant(p.value));
    return forward(weights, input, options);
}

namespace {

LayerSpec plain(LayerKind kind) {
    LayerSpec l;
    l.kind = kind;
    return l;
}

} // namespace

std::vector<LayerSpec> mlp_layers(std::size_t in, const std::vector<std::size_t>& hidden, std::size_t classes) {
    std::vector<LayerSpec> layers;
    std::size_t prev = in;
    for (std::size_t h : hidden) {
        LayerSpec l;
        l.kind = LayerKind::linear;
        l.in = prev;
        l.out = h;
        layers.push_back(l);
        layers.push_back(plain(LayerKind::relu));
        prev = h;
    }
    LayerSpec last;
    last.kind = LayerKind::linear;
    last.in = prev;
    last.out = classes;
    layers.push_back(last);
    return layers;
}

std::vector<LayerSpec> cnn2_layers(std::size_t channels, std::size_t size, std::size_t classes, std::size_t width1,
                                   std::size_t width2) {
    auto conv = [](std::size_t in, std::size_t out) {
        LayerSpec l;
        l.kind = LayerKind::conv2d;
        l.in = in;
        l.out = out;
        l.kernel = 3;
        l.padding = 1;
        return l;
    };
    auto norm = [](std::size_t c) {
        LayerSpec l;
        l.kind = LayerKind::norm;
        l.in = c;
        return l;
    };
    std::vector<LayerSpec> layers;
    layers.push_back(conv(channels, width1));
    layers.push_back(norm(width1));
    layers.push_back(plain(LayerKind::relu));
    layers.push_back(plain(LayerKind::pool));
    layers.push_back(conv(width1, width2));
    layers.push_back(norm(width2));
    layers.push_back(plain(LayerKind::relu));
    layers.push_back(plain(LayerKind::pool));
    layers.push_back(plain(LayerKind::flatten));
    LayerSpec fc;
    fc.kind = LayerKind::linear;
    fc.in = width2 * (size / 4) * (size / 4);
    fc.out = classes;
    layers.push_back(fc);
    return layers;
}

} // namespace proxbin
