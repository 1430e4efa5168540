#include "proxbin/optim.hpp"

#include "proxbin/errors.hpp"

#include <cmath>

namespace proxbin {

LayerState make_layer(std::string name, Tensor w_star, bool quantized, bool scaled) {
    LayerState layer;
    layer.name = std::move(name);
    layer.w = w_star;
    layer.velocity = Tensor(w_star.shape(), 0.0);
    layer.w_star = std::move(w_star);
    layer.quantized = quantized;
    layer.scaled = scaled;
    return layer;
}

namespace {

double scale_of(const LayerState& layer) {
    if (!layer.quantized || !layer.scaled) return 1.0;
    return mean_abs(layer.w_star);
}

template <class Map>
Tensor quantize(const LayerState& layer, double s, const Map& f) {
    Tensor w = layer.w_star;
    if (!layer.quantized) return w;
    for (double& v : w.data()) v = s * f(v);
    return w;
}

std::vector<Tensor> checked_gradient(const TrainerState& state, const GradFn& grad, const std::vector<Tensor>& at) {
    std::vector<Tensor> g = grad(at);
    if (g.size() != at.size()) {
        throw DimensionError("gradient function returned " + std::to_string(g.size()) + " tensors for " +
                             std::to_string(at.size()) + " layers");
    }
    for (std::size_t i = 0; i < g.size(); ++i) {
        if (g[i].numel() != at[i].numel()) {
            throw DimensionError("gradient for layer '" + state.layers[i].name + "' has shape " +
                                 shape_to_string(g[i].shape()));
        }
        if (!g[i].all_finite()) {
            throw DivergenceError("non-finite gradient in layer '" + state.layers[i].name + "'", state.t);
        }
    }
    return g;
}

/// Turn the raw direction into the applied one: clipping, then momentum.
const Tensor& direction(TrainerState& state, std::size_t i, Tensor& d) {
    if (state.clip_norm) {
        const double norm = std::sqrt(squared_norm(d));
        if (norm > *state.clip_norm) {
            const double factor = *state.clip_norm / norm;
            for (double& v : d.data()) v *= factor;
        }
    }
    if (state.momentum == 0.0) return d;
    Tensor& vel = state.layers[i].velocity;
    if (vel.numel() != d.numel()) vel = Tensor(d.shape(), 0.0);
    for (std::size_t k = 0; k < d.numel(); ++k) vel[k] = state.momentum * vel[k] + d[k];
    return vel;
}

struct StepValues {
    double eta;
    double mu;
    double rho;
};

StepValues begin_step(TrainerState& state) {
    StepValues v;
    v.eta = state.schedule.step_size(state.t);
    switch (state.schedule.mu_rule) {
    case MuRule::fixed: v.mu = state.schedule.mu_fixed; break;
    case MuRule::linear: v.mu = schedule_mu(state.schedule, state.t); break;
    case MuRule::accumulate: v.mu = state.mu_accumulated; break;
    }
    v.rho = schedule_rho(state.schedule, state.t);
    state.mu = v.mu;
    state.rho = v.rho;
    return v;
}

void end_step(TrainerState& state, double eta) {
    state.mu_accumulated += eta;
    ++state.t;
}

void notify(const TrainerState& state, const StepValues& v, const std::vector<Tensor>& grads) {
    if (state.observer) state.observer(StepInfo{state.t, v.eta, v.mu, v.rho, state.layers, grads});
}

void configure_prox(const TrainerState& state, ProximalQuantizer& prox, double rho) {
    if (state.schedule.rho_enabled && prox.kind() == ProximalQuantizer::Kind::linear) prox.set_rho(rho);
}

} // namespace

std::vector<Tensor> forward_weights(const TrainerState& state, const QuantizerPair& pair) {
    std::vector<Tensor> out;
    out.reserve(state.layers.size());
    for (const LayerState& layer : state.layers)
        out.push_back(quantize(layer, scale_of(layer), [&pair](double x) { return pair.forward(x); }));
    return out;
}

std::vector<Tensor> forward_weights(const TrainerState& state, const ProximalQuantizer& prox) {
    std::vector<Tensor> out;
    out.reserve(state.layers.size());
    for (const LayerState& layer : state.layers) out.push_back(quantize(layer, scale_of(layer), prox));
    return out;
}

void pcpp_step(TrainerState& state, QuantizerPair& pair, const GradFn& grad) {
    const StepValues v = begin_step(state);
    if (state.schedule.mu_rule != MuRule::fixed) pair.params().mu = v.mu;
    if (state.schedule.rho_enabled) pair.params().rho = v.rho;

    std::vector<Tensor> weights;
    weights.reserve(state.layers.size());
    for (LayerState& layer : state.layers) {
        layer.scale = scale_of(layer);
        layer.w = quantize(layer, layer.scale, [&pair](double x) { return pair.forward(x); });
        weights.push_back(layer.w);
    }
    const std::vector<Tensor> g = checked_gradient(state, grad, weights);
    notify(state, v, g);

    for (std::size_t i = 0; i < state.layers.size(); ++i) {
        LayerState& layer = state.layers[i];
        Tensor d = g[i];
        if (layer.quantized) {
            const double s = layer.scale;
            for (std::size_t k = 0; k < d.numel(); ++k) d[k] = pair.backward(layer.w_star[k]) * s * d[k];
        }
        const Tensor& step = direction(state, i, d);
        for (std::size_t k = 0; k < step.numel(); ++k) layer.w_star[k] -= v.eta * step[k];
    }
    end_step(state, v.eta);
}

namespace {

void prox_step(TrainerState& state, ProximalQuantizer& prox, const GradFn& grad, bool at_continuous) {
    const StepValues v = begin_step(state);
    configure_prox(state, prox, v.rho);

    std::vector<Tensor> weights;
    weights.reserve(state.layers.size());
    for (LayerState& layer : state.layers) {
        layer.scale = scale_of(layer);
        layer.w = quantize(layer, layer.scale, prox);
        weights.push_back(at_continuous ? layer.w_star : layer.w);
    }
    const std::vector<Tensor> g = checked_gradient(state, grad, weights);
    notify(state, v, g);

    for (std::size_t i = 0; i < state.layers.size(); ++i) {
        LayerState& layer = state.layers[i];
        Tensor d = g[i];
        const Tensor& step = direction(state, i, d);
        Tensor next = layer.w;
        for (std::size_t k = 0; k < step.numel(); ++k) next[k] -= v.eta * step[k];
        layer.w_star = std::move(next);
    }
    end_step(state, v.eta);
}

} // namespace

void pq_step(TrainerState& state, ProximalQuantizer& prox, const GradFn& grad) {
    prox_step(state, prox, grad, false);
}

void rpc_step(TrainerState& state, ProximalQuantizer& prox, const GradFn& grad) {
    prox_step(state, prox, grad, true);
}

} // namespace proxbin
