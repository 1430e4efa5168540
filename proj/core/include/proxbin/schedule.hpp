#pragma once

#include <cstddef>
#include <string>
#include <string_view>

namespace proxbin {

enum class StepRule { constant, cosine, step_decay, inv_sqrt };

StepRule parse_step_rule(std::string_view name);
std::string to_string(StepRule rule);

/// Step size eta_t for t >= 1.
struct StepSizeSchedule {
    StepRule rule = StepRule::constant;
    double eta0 = 0.1;
    double eta_min = 0.0;          ///< cosine floor
    std::size_t total = 1;         ///< cosine horizon
    std::size_t decay_every = 1;   ///< step_decay period
    double decay_factor = 0.1;     ///< step_decay multiplier

    double at(std::size_t t) const;
};

/// Linear interpolation from `start` (t = 0) to `end` (t = total), clamped outside.
struct Ramp {
    double start = 0.0;
    double end = 0.0;
    std::size_t total = 0;

    double at(std::size_t t) const;
};

enum class MuRule { fixed, linear, accumulate };

MuRule parse_mu_rule(std::string_view name);
std::string to_string(MuRule rule);

struct Schedule {
    StepSizeSchedule eta;
    MuRule mu_rule = MuRule::fixed;
    double mu_fixed = 1.0;
    Ramp mu;              ///< used by MuRule::linear
    bool rho_enabled = false;
    Ramp rho;

    double step_size(std::size_t t) const { return eta.at(t); }
};

/// mu_t for t >= 1. Accumulate: 1 + sum_{tau < t} eta_tau. Linear: mu.at(t - 1).
double schedule_mu(const Schedule& schedule, std::size_t t);
/// rho.at(t - 1); 0 when the rho ramp is disabled.
double schedule_rho(const Schedule& schedule, std::size_t t);

} // namespace proxbin
