#pragma once

#include "proxbin/autodiff.hpp"

#include <functional>
#include <string>
#include <string_view>
#include <vector>

namespace proxbin {

// Scalar building blocks. Everything here is a pure function of its arguments.

/// Binarizing projector onto {-1,+1}; sign(0) is +1.
double sign_q(double w);
double hard_tanh(double w);

/// Piecewise-linear proximal quantizer LP_rho for Q = {-1,+1} with horizontal
/// shift `rho` and vertical shift `varrho`. Saturates to sign(w) for |w| > 1.
/// At w = 0 with varrho > 0 the map is set-valued; +varrho is returned.
double linear_quantizer(double w, double rho, double varrho = 0.0);

/// Proximal quantizer reverse-engineered for BNN: sign(w) on [-1,1] and
/// w/mu + sign(w)(1 - 1/mu) outside. Requires mu > 1.
double bnn_prox(double w, double mu);

/// Sign-Swish: (mu w / 2) sech^2(mu w / 2) + tanh(mu w / 2).
double ss_forward(double w, double mu);
/// Derivative of sign-Swish: mu [1 - (mu w / 2) tanh(mu w / 2)] sech^2(mu w / 2).
double ss_backward(double w, double mu);

/// Bi-Real polynomial sign approximation at coefficient k: sign(u)(2|u| - u^2)
/// with u = k w, saturated to sign(u) beyond |u| = 1.
double poly_forward(double w, double k);
double poly_backward(double w, double k);
/// R-BNN backward surrogate: max(0, sqrt(2) - 2|w|).
double rbnn_backward(double w);

/// k tanh(t w) and its derivative k t (1 - tanh^2(t w)).
double ede_forward(double w, double k, double t);
double ede_backward(double w, double k, double t);
/// Amplitude used with temperature t: max(1, 1/t).
double ede_amplitude(double t);

double react_forward(double w, double tau);
/// Indicator of [tau - 1, tau + 1].
double react_backward(double w, double tau);

/// A monotone scalar proximal quantizer.
class ProximalQuantizer {
public:
    enum class Kind { identity, sign, linear, bnn };

    static ProximalQuantizer identity();
    static ProximalQuantizer sign();
    static ProximalQuantizer linear(double rho, double varrho = 0.0);
    static ProximalQuantizer bnn(double mu);

    double operator()(double w) const;

    Kind kind() const noexcept { return kind_; }
    double rho() const noexcept { return rho_; }
    double varrho() const noexcept { return varrho_; }
    double mu() const noexcept { return mu_; }
    void set_rho(double rho);
    std::string name() const;

private:
    ProximalQuantizer(Kind kind, double rho, double varrho, double mu);

    Kind kind_;
    double rho_ = 0.0;
    double varrho_ = 0.0;
    double mu_ = 2.0;
};

/// Parameters a quantizer pair reads at evaluation time. Schedules mutate them.
struct QuantizerParams {
    double mu = 1.0;      ///< smoothing / sharpness (SS mu, poly coefficient, EDE temperature)
    double rho = 0.0;     ///< LP horizontal shift
    double varrho = 0.0;  ///< LP vertical shift
    double tau = 0.5;     ///< ReActNet threshold
};

/// Forward map F and backward map B, applied elementwise.
class QuantizerPair {
public:
    using Map = std::function<double(double w, const QuantizerParams& params)>;

    QuantizerPair(std::string name, Map forward, Map backward, QuantizerParams params = {});

    double forward(double w) const { return forward_(w, params_); }
    double backward(double w) const { return backward_(w, params_); }

    const std::string& name() const noexcept { return name_; }
    const QuantizerParams& params() const noexcept { return params_; }
    QuantizerParams& params() noexcept { return params_; }

    /// Snapshot of the pair at its current parameters for use with apply_custom.
    CustomGradSpec custom_grad() const;

    const Map& forward_map() const noexcept { return forward_; }
    const Map& backward_map() const noexcept { return backward_; }

private:
    std::string name_;
    Map forward_;
    Map backward_;
    QuantizerParams params_;
};

/// Pairs by name: fp, bc, pc, bnn, bnn+, bnn++, and the appendix pairs
/// (bireal, rbnn, poly+, ede, ede+, react; `poly_plus`/`ede_plus` are accepted
/// spellings). Throws ConfigError for anything else.
QuantizerPair make_pair(std::string_view name);
/// Same lookup restricted to the appendix pairs.
QuantizerPair appendix_pairs(std::string_view name);
std::vector<std::string> pair_names();

/// (F o P, B o P). The prox is captured by value.
QuantizerPair compose_with_prox(const QuantizerPair& pair, const ProximalQuantizer& prox);

} // namespace proxbin
