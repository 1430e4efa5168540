#include "proxbin/schedule.hpp"

#include "proxbin/errors.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace proxbin {

StepRule parse_step_rule(std::string_view name) {
    if (name == "constant") return StepRule::constant;
    if (name == "cosine") return StepRule::cosine;
    if (name == "step_decay" || name == "step-decay") return StepRule::step_decay;
    if (name == "inv_sqrt" || name == "inv-sqrt") return StepRule::inv_sqrt;
    throw ConfigError("unknown step-size rule '" + std::string(name) + "'");
}

std::string to_string(StepRule rule) {
    switch (rule) {
    case StepRule::constant: return "constant";
    case StepRule::cosine: return "cosine";
    case StepRule::step_decay: return "step_decay";
    case StepRule::inv_sqrt: return "inv_sqrt";
    }
    return "unknown";
}

double StepSizeSchedule::at(std::size_t t) const {
    if (t == 0) throw ConfigError("step sizes are indexed from t = 1");
    switch (rule) {
    case StepRule::constant: return eta0;
    case StepRule::cosine: {
        const double horizon = static_cast<double>(std::max<std::size_t>(total, 1));
        const double progress = std::min(1.0, static_cast<double>(t - 1) / horizon);
        return eta_min + 0.5 * (eta0 - eta_min) * (1.0 + std::cos(std::numbers::pi * progress));
    }
    case StepRule::step_decay: {
        const std::size_t period = std::max<std::size_t>(decay_every, 1);
        return eta0 * std::pow(decay_factor, static_cast<double>((t - 1) / period));
    }
    case StepRule::inv_sqrt: return eta0 / std::sqrt(static_cast<double>(t));
    }
    return eta0;
}

double Ramp::at(std::size_t t) const {
    if (total == 0) return start;
    if (t >= total) return end;
    return std::lerp(start, end, static_cast<double>(t) / static_cast<double>(total));
}

MuRule parse_mu_rule(std::string_view name) {
    if (name == "fixed") return MuRule::fixed;
    if (name == "linear") return MuRule::linear;
    if (name == "accumulate") return MuRule::accumulate;
    throw ConfigError("unknown mu rule '" + std::string(name) + "'");
}

std::string to_string(MuRule rule) {
    switch (rule) {
    case MuRule::fixed: return "fixed";
    case MuRule::linear: return "linear";
    case MuRule::accumulate: return "accumulate";
    }
    return "unknown";
}

double schedule_mu(const Schedule& schedule, std::size_t t) {
    if (t == 0) throw ConfigError("mu_t is indexed from t = 1");
    switch (schedule.mu_rule) {
    case MuRule::fixed: return schedule.mu_fixed;
    case MuRule::linear: return schedule.mu.at(t - 1);
    case MuRule::accumulate: {
        double mu = 1.0;
        for (std::size_t tau = 1; tau < t; ++tau) mu += schedule.step_size(tau);
        return mu;
    }
    }
    return schedule.mu_fixed;
}

double schedule_rho(const Schedule& schedule, std::size_t t) {
    if (!schedule.rho_enabled) return 0.0;
    return schedule.rho.at(t == 0 ? 0 : t - 1);
}

} // namespace proxbin
