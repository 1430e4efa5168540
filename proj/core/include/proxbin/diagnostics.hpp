#pragma once

#include "proxbin/optim.hpp"
#include "proxbin/tensor.hpp"

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace proxbin {

/// Regularizers the audit can evaluate: r = 0, or the indicator of {-1,+1}^d.
enum class RegKind { zero, indicator_Q };

RegKind parse_reg_kind(std::string_view name);
std::string to_string(RegKind kind);

/// r(w): 0, or +inf when r is the indicator and some w_i is not +-1.
double reg_value(const Tensor& w, RegKind kind);

/// Delta_tau(w) = r_tau(w) - r_tau(w_next) - <w - w_next, w_star_next> with
/// r_tau = mu_next * r + 0.5 ||.||^2. +inf when w or w_next leaves Q under the indicator.
double bregman_delta(const Tensor& w, const Tensor& w_next, const Tensor& w_star_next, double mu_next, RegKind kind);

/// f(w) = 0.5 * sum_i diag_i (w_i - center_i)^2
struct QuadraticObjective {
    std::vector<double> diag;
    std::vector<double> center;

    double value(const Tensor& w) const;
    Tensor gradient(const Tensor& w) const;
    Tensor minimizer() const;
};

/// One step of a recorded run: the weights the loss saw, w* before the
/// update, and the gradient, all flattened across layers.
struct TrajectoryRecord {
    std::size_t t = 0;
    double eta = 0.0;
    double mu = 0.0;
    Tensor w;
    Tensor w_star;
    Tensor grad;
};

struct Trajectory {
    std::vector<Shape> shapes;  ///< per-layer shapes making up the flattened vectors
    std::vector<TrajectoryRecord> records;
    std::optional<QuadraticObjective> objective;

    std::size_t dim() const;
};

/// Little-endian f64 records (t, eta, mu, w, w*, grad) in `path`, shapes and
/// objective in `path` + ".json".
void write_trajectory(const std::filesystem::path& path, const Trajectory& trajectory);
Trajectory read_trajectory(const std::filesystem::path& path);

/// Observer for TrainerState that appends one record per step.
std::function<void(const StepInfo&)> trajectory_recorder(Trajectory& out);

struct BregmanRecord {
    std::size_t t = 0;
    double delta = 0.0;          ///< Delta_t(w)
    double gap_summand = 0.0;    ///< eta_t [<w_t - w, g_t> + r(w_t) - r(w)]
    double running_gap = 0.0;    ///< left side over [1, t]
    double running_bound = 0.0;  ///< right side over [1, t]
};

struct GapWindow {
    std::size_t s = 0;
    std::size_t t = 0;
    double lhs = 0.0;
    double rhs = 0.0;
    double slack = 0.0;  ///< rhs - lhs, non-negative when the bound holds
    /// min-iterate and averaged-iterate bounds, present when an objective is known
    std::optional<double> min_gap, min_bound, avg_gap, avg_bound;
};

struct GapAudit {
    std::vector<BregmanRecord> records;
    std::vector<GapWindow> windows;
    double min_slack = 0.0;
    std::optional<double> min_slack_min_iterate;
    std::optional<double> min_slack_average;

    bool holds(double tolerance) const;
};

using Objective = std::function<double(const Tensor&)>;

/// Both sides of the Bregman bound over steps [s, t]. Needs records up to t + 1,
/// i.e. 1 <= s and t < records.size(). An empty window (s > t) gives zeros.
GapWindow audit_window(const Trajectory& trajectory, const Tensor& w_ref, RegKind kind, std::size_t s, std::size_t t,
                       const Objective& objective = {});

GapAudit gap_audit(const Trajectory& trajectory, const Tensor& w_ref, RegKind kind,
                   const std::vector<std::pair<std::size_t, std::size_t>>& windows, const Objective& objective = {});

/// `count` windows 1 <= s <= t < steps drawn with a seeded generator.
std::vector<std::pair<std::size_t, std::size_t>> random_windows(std::size_t count, std::size_t steps,
                                                                 std::uint64_t seed);

/// Random diagonal quadratic in `dim` dimensions (curvatures in [0.5, 2]).
QuadraticObjective random_quadratic(std::size_t dim, std::uint64_t seed);

/// Full-gradient PC++ run with the (identity, 1) pair on `objective`, starting
/// from a seeded random point, recording every step.
Trajectory run_quadratic(const QuadraticObjective& objective, const Schedule& schedule, std::size_t steps,
                         std::uint64_t seed);

} // namespace proxbin
