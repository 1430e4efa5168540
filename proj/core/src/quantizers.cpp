#include "proxbin/quantizers.hpp"

#include "proxbin/errors.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numbers>

namespace proxbin {

double sign_q(double w) { return w < 0.0 ? -1.0 : 1.0; }

double hard_tanh(double w) { return std::min(1.0, std::max(-1.0, w)); }

double linear_quantizer(double w, double rho, double varrho) {
    constexpr double q1 = -1.0, q2 = 1.0, p2 = 0.0;
    if (std::abs(w) > 1.0) return sign_q(w);

    const double q1_plus = std::min(p2, q1 + rho);
    const double q2_minus = std::max(p2, q2 - rho);
    const double p2_minus = std::max(q1, p2 - varrho);
    const double p2_plus = std::min(q2, p2 + varrho);

    if (w == p2) {
        // Set-valued point: upper end.
        return q2_minus == p2 ? q2 : p2_plus;
    }
    if (w <= q1_plus) return q1;
    if (w >= q2_minus) return q2;
    if (w < p2) return q1 + (w - q1_plus) * (p2_minus - q1) / (p2 - q1_plus);
    return p2_plus + (w - p2) * (q2 - p2_plus) / (q2_minus - p2);
}

double bnn_prox(double w, double mu) {
    if (std::abs(w) <= 1.0) return sign_q(w);
    return w / mu + sign_q(w) * (1.0 - 1.0 / mu);
}

namespace {

double sech2(double z) {
    const double s = 1.0 / std::cosh(z);
    return s * s;
}

} // namespace

double ss_forward(double w, double mu) {
    const double z = 0.5 * mu * w;
    return z * sech2(z) + std::tanh(z);
}

double ss_backward(double w, double mu) {
    const double z = 0.5 * mu * w;
    return mu * (1.0 - z * std::tanh(z)) * sech2(z);
}

double poly_forward(double w, double k) {
    const double u = k * w;
    if (std::abs(u) > 1.0) return sign_q(u);
    return 2.0 * u - u * std::abs(u);
}

double poly_backward(double w, double k) {
    const double u = k * w;
    if (std::abs(u) > 1.0) return 0.0;
    return k * (2.0 - 2.0 * std::abs(u));
}

double rbnn_backward(double w) { return std::max(0.0, std::numbers::sqrt2 - 2.0 * std::abs(w)); }

double ede_forward(double w, double k, double t) { return k * std::tanh(t * w); }

double ede_backward(double w, double k, double t) { return k * t * sech2(t * w); }

double ede_amplitude(double t) { return std::max(1.0, 1.0 / t); }

double react_forward(double w, double tau) { return sign_q(w - tau); }

double react_backward(double w, double tau) { return std::abs(w - tau) <= 1.0 ? 1.0 : 0.0; }

ProximalQuantizer::ProximalQuantizer(Kind kind, double rho, double varrho, double mu)
    : kind_(kind), rho_(rho), varrho_(varrho), mu_(mu) {}

ProximalQuantizer ProximalQuantizer::identity() { return ProximalQuantizer(Kind::identity, 0.0, 0.0, 1.0); }

ProximalQuantizer ProximalQuantizer::sign() { return ProximalQuantizer(Kind::sign, 0.0, 0.0, 1.0); }

ProximalQuantizer ProximalQuantizer::linear(double rho, double varrho) {
    if (!(rho >= 0.0) || !(varrho >= 0.0)) throw ConfigError("linear quantizer shifts must be non-negative");
    return ProximalQuantizer(Kind::linear, rho, varrho, 1.0);
}

ProximalQuantizer ProximalQuantizer::bnn(double mu) {
    if (!(mu > 1.0)) throw ConfigError("bnn proximal quantizer needs mu > 1, got " + std::to_string(mu));
    return ProximalQuantizer(Kind::bnn, 0.0, 0.0, mu);
}

double ProximalQuantizer::operator()(double w) const {
    switch (kind_) {
    case Kind::identity: return w;
    case Kind::sign: return sign_q(w);
    case Kind::linear: return linear_quantizer(w, rho_, varrho_);
    case Kind::bnn: return bnn_prox(w, mu_);
    }
    return w;
}

void ProximalQuantizer::set_rho(double rho) {
    if (!(rho >= 0.0)) throw ConfigError("linear quantizer shift must be non-negative");
    rho_ = rho;
}

std::string ProximalQuantizer::name() const {
    switch (kind_) {
    case Kind::identity: return "identity";
    case Kind::sign: return "sign";
    case Kind::linear: return "linear";
    case Kind::bnn: return "bnn";
    }
    return "unknown";
}

QuantizerPair::QuantizerPair(std::string name, Map forward, Map backward, QuantizerParams params)
    : name_(std::move(name)), forward_(std::move(forward)), backward_(std::move(backward)), params_(params) {}

CustomGradSpec QuantizerPair::custom_grad() const {
    return CustomGradSpec{[f = forward_, p = params_](double w) { return f(w, p); },
                          [b = backward_, p = params_](double w) { return b(w, p); }};
}

namespace {

using Map = QuantizerPair::Map;

double one(double, const QuantizerParams&) { return 1.0; }

QuantizerParams with_mu(double mu) {
    QuantizerParams p;
    p.mu = mu;
    return p;
}

std::map<std::string, std::function<QuantizerPair()>, std::less<>> pair_registry() {
    std::map<std::string, std::function<QuantizerPair()>, std::less<>> r;
    r["fp"] = [] { return QuantizerPair("fp", [](double w, const QuantizerParams&) { return w; }, one); };
    r["bc"] = [] { return QuantizerPair("bc", [](double w, const QuantizerParams&) { return sign_q(w); }, one); };
    r["pc"] = [] {
        QuantizerParams p;
        p.rho = 0.01;
        return QuantizerPair(
            "pc", [](double w, const QuantizerParams& q) { return linear_quantizer(w, q.rho, q.varrho); }, one, p);
    };
    r["bnn"] = [] {
        return QuantizerPair(
            "bnn", [](double w, const QuantizerParams&) { return sign_q(w); },
            [](double w, const QuantizerParams&) { return std::abs(w) <= 1.0 ? 1.0 : 0.0; });
    };
    r["bnn+"] = [] {
        return QuantizerPair(
            "bnn+", [](double w, const QuantizerParams&) { return sign_q(w); },
            [](double w, const QuantizerParams& q) { return ss_backward(w, q.mu); }, with_mu(5.0));
    };
    r["bnn++"] = [] {
        return QuantizerPair(
            "bnn++", [](double w, const QuantizerParams& q) { return ss_forward(w, q.mu); },
            [](double w, const QuantizerParams& q) { return ss_backward(w, q.mu); }, with_mu(5.0));
    };
    r["bireal"] = [] {
        return QuantizerPair(
            "bireal", [](double w, const QuantizerParams&) { return sign_q(w); },
            [](double w, const QuantizerParams& q) { return poly_backward(w, q.mu); }, with_mu(1.0));
    };
    r["rbnn"] = [] {
        return QuantizerPair(
            "rbnn", [](double w, const QuantizerParams&) { return sign_q(w); },
            [](double w, const QuantizerParams&) { return rbnn_backward(w); });
    };
    r["poly+"] = [] {
        return QuantizerPair(
            "poly+", [](double w, const QuantizerParams& q) { return poly_forward(w, q.mu); },
            [](double w, const QuantizerParams& q) { return poly_backward(w, q.mu); }, with_mu(1.0));
    };
    r["ede"] = [] {
        return QuantizerPair(
            "ede", [](double w, const QuantizerParams&) { return sign_q(w); },
            [](double w, const QuantizerParams& q) { return ede_backward(w, ede_amplitude(q.mu), q.mu); },
            with_mu(10.0));
    };
    r["ede+"] = [] {
        return QuantizerPair(
            "ede+", [](double w, const QuantizerParams& q) { return ede_forward(w, ede_amplitude(q.mu), q.mu); },
            [](double w, const QuantizerParams& q) { return ede_backward(w, ede_amplitude(q.mu), q.mu); },
            with_mu(10.0));
    };
    r["react"] = [] {
        return QuantizerPair(
            "react", [](double w, const QuantizerParams& q) { return react_forward(w, q.tau); },
            [](double w, const QuantizerParams& q) { return react_backward(w, q.tau); });
    };
    return r;
}

std::string canonical_pair_name(std::string_view name) {
    if (name == "poly_plus") return "poly+";
    if (name == "ede_plus") return "ede+";
    if (name == "bnn_plus") return "bnn+";
    if (name == "bnn_plus_plus") return "bnn++";
    return std::string(name);
}

bool is_appendix_pair(std::string_view name) {
    return name == "bireal" || name == "rbnn" || name == "poly+" || name == "ede" || name == "ede+" ||
           name == "react";
}

} // namespace

QuantizerPair make_pair(std::string_view name) {
    static const auto registry = pair_registry();
    const auto it = registry.find(canonical_pair_name(name));
    if (it == registry.end()) throw ConfigError("unknown quantizer pair '" + std::string(name) + "'");
    return it->second();
}

QuantizerPair appendix_pairs(std::string_view name) {
    const std::string canonical = canonical_pair_name(name);
    if (!is_appendix_pair(canonical)) throw ConfigError("unknown appendix quantizer pair '" + std::string(name) + "'");
    return make_pair(canonical);
}

std::vector<std::string> pair_names() {
    return {"fp", "bc", "pc", "bnn", "bnn+", "bnn++", "bireal", "rbnn", "poly+", "ede", "ede+", "react"};
}

QuantizerPair compose_with_prox(const QuantizerPair& pair, const ProximalQuantizer& prox) {
    return QuantizerPair(
        pair.name() + "@" + prox.name(),
        [f = pair.forward_map(), prox](double w, const QuantizerParams& p) { return f(prox(w), p); },
        [b = pair.backward_map(), prox](double w, const QuantizerParams& p) { return b(prox(w), p); },
        pair.params());
}

} // namespace proxbin
