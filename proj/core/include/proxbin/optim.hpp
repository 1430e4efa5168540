#pragma once

#include "proxbin/quantizers.hpp"
#include "proxbin/schedule.hpp"
#include "proxbin/tensor.hpp"

#include <cstddef>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace proxbin {

/// Continuous weights w* of one layer and the weights w the loss last saw.
struct LayerState {
    std::string name;
    Tensor w_star;
    Tensor w;
    Tensor velocity;
    bool quantized = true;  ///< false keeps the layer full precision under every rule
    bool scaled = false;    ///< multiply the quantized weights by s = mean|w*|
    double scale = 1.0;     ///< s used in the last step
};

LayerState make_layer(std::string name, Tensor w_star, bool quantized = true, bool scaled = false);

/// Snapshot passed to TrainerState::observer after the gradient is known and
/// before the update is applied.
struct StepInfo {
    std::size_t t;
    double eta;
    double mu;
    double rho;
    const std::vector<LayerState>& layers;
    const std::vector<Tensor>& grads;
};

struct TrainerState {
    std::vector<LayerState> layers;
    std::size_t t = 1;
    Schedule schedule;
    double momentum = 0.0;
    std::optional<double> clip_norm;  ///< per-layer l2 clipping of the update direction
    double mu = 1.0;                  ///< mu_t used in the last step
    double rho = 0.0;                 ///< rho_t used in the last step
    double mu_accumulated = 1.0;      ///< running 1 + sum of past step sizes
    std::function<void(const StepInfo&)> observer;
};

/// Gradient of the loss at the given per-layer weights.
using GradFn = std::function<std::vector<Tensor>(const std::vector<Tensor>& weights)>;

/// w = s * F(w*) for quantized layers, w* otherwise, at the pair's current parameters.
std::vector<Tensor> forward_weights(const TrainerState& state, const QuantizerPair& pair);
std::vector<Tensor> forward_weights(const TrainerState& state, const ProximalQuantizer& prox);

/// w*_{t+1} = w*_t - eta_t * B(w*_t) * s * grad(s * F(w*_t)). Updates the pair's
/// mu/rho from the schedule first. Throws DivergenceError on a non-finite gradient.
void pcpp_step(TrainerState& state, QuantizerPair& pair, const GradFn& grad);

/// ProxQuant: w_t = s * P(w*_t), w*_{t+1} = w_t - eta_t * grad(w_t).
void pq_step(TrainerState& state, ProximalQuantizer& prox, const GradFn& grad);

/// Reverse ProxConnect: w_t = s * P(w*_t), w*_{t+1} = w_t - eta_t * grad(w*_t).
void rpc_step(TrainerState& state, ProximalQuantizer& prox, const GradFn& grad);

} // namespace proxbin
