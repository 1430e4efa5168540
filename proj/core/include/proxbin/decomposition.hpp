#pragma once

#include "proxbin/errors.hpp"
#include "proxbin/quantizers.hpp"

#include <cstddef>
#include <iosfwd>
#include <string>
#include <string_view>
#include <vector>

namespace proxbin {

/// A discontinuity of F found on the integration grid.
struct JumpRecord {
    double location = 0.0;        ///< refined to within the bisection tolerance
    double magnitude = 0.0;       ///< F(location+) - F(location-)
    double backward_value = 0.0;  ///< B(location)
    bool outside_support = false; ///< B vanishes at the jump, so P would be infinite there
};

/// P(w) = integral of dF / B sampled on a grid, alongside F and B.
struct SampledCurve {
    std::vector<double> grid;
    std::vector<double> values;  ///< P, shifted so that P(lo) + P(hi) = 0
    std::vector<double> forward;
    std::vector<double> backward;
    /// Points where F' and B both vanish. P is completed there with slope 0.
    std::vector<bool> free_region;
    std::vector<JumpRecord> jumps;
    /// Grid locations where F moves continuously while B vanishes.
    std::vector<double> poles;
    double integration_constant = 0.0;  ///< subtracted from the raw running integral

    std::size_t size() const noexcept { return grid.size(); }
    bool has_unbounded_part() const;
};

struct IntegrationOptions {
    double support_threshold = 1e-9;  ///< |B| above this counts as B's support
    double flat_threshold = 1e-6;     ///< |F'| below this counts as flat where B vanishes
    double jump_factor = 10.0;        ///< jump if |dF| > factor * local median |dF|
    std::size_t median_window = 5;    ///< neighbours on each side for the median
    double bisection_tolerance = 1e-9;
};

/// Requires points >= 1001 and lo < hi; throws ConfigError otherwise.
SampledCurve integrate_P(const QuantizerPair& pair, double lo = -3.0, double hi = 3.0, std::size_t points = 10001,
                         const IntegrationOptions& options = {});

enum class VerdictStatus { admits, fails };

enum class FailureReason {
    none,
    non_monotone_P,
    B_not_function_of_P,
    F_not_function_of_P,
    jump_outside_B_support,
};

std::string to_string(VerdictStatus status);
std::string to_string(FailureReason reason);

struct DecompositionVerdict {
    VerdictStatus status = VerdictStatus::fails;
    FailureReason reason = FailureReason::none;
    SampledCurve curve;
    std::string detail;

    bool admits() const noexcept { return status == VerdictStatus::admits; }
};

struct FactorizationOptions {
    double tolerance = 1e-6;         ///< relative slack for monotonicity and equal B/F values
    double level_bucket = 1e-6;      ///< P values are grouped into buckets of this width
    double support_threshold = 1e-9;
};

/// Decide whether `pair` factors as F = T o P, B = T' o P with P proximal, given
/// the curve integrate_P produced for the same pair.
DecompositionVerdict check_factorization(const QuantizerPair& pair, SampledCurve curve,
                                         const FactorizationOptions& options = {});

/// integrate_P followed by check_factorization.
DecompositionVerdict analyze_pair(const QuantizerPair& pair, double lo = -3.0, double hi = 3.0,
                                  std::size_t points = 10001);

/// CSV with header `w,P,F,B`.
void write_curve_csv(std::ostream& out, const SampledCurve& curve);

/// A scalar map with an optional analytic derivative.
struct ScalarFunction {
    std::string name;
    ScalarMap value;
    ScalarMap derivative;  ///< empty when no closed form is registered
};

/// Smooth forwards with registered derivatives: identity, ss, poly, tanh.
/// Also knows sign and hard_tanh (no derivative) so callers can probe them.
ScalarFunction smooth_forward(std::string_view name, double mu = 5.0);

/// Raised when a forward map fails the continuous-differentiability probe.
class SmoothnessError : public ConfigError {
public:
    SmoothnessError(const std::string& what, double location) : ConfigError(what), location_(location) {}
    double location() const noexcept { return location_; }

private:
    double location_;
};

struct SmoothnessProbe {
    double lo = -3.0;
    double hi = 3.0;
    std::size_t points = 6001;
};

/// (F, F') with F' from the registered formula, else a 5-point central stencil.
/// Throws SmoothnessError naming the first jump or kink the probe finds.
QuantizerPair derivative_rule_pair(const ScalarFunction& forward, const SmoothnessProbe& probe = {});

/// Moreau envelope of the indicator of {-1,+1}: min((w-1)^2, (w+1)^2) / (2 mu).
double moreau_env(double w, double mu);

} // namespace proxbin
