#include "proxbin/decomposition.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <ostream>
#include <sstream>

namespace proxbin {

namespace {

constexpr double kAbsoluteJumpFloor = 1e-12;

std::vector<double> make_grid(double lo, double hi, std::size_t points) {
    std::vector<double> grid(points);
    const double step = (hi - lo) / static_cast<double>(points - 1);
    for (std::size_t i = 0; i < points; ++i) grid[i] = lo + static_cast<double>(i) * step;
    grid.back() = hi;
    return grid;
}

double median_of(std::vector<double> v) {
    if (v.empty()) return 0.0;
    const auto mid = v.begin() + static_cast<std::ptrdiff_t>(v.size() / 2);
    std::nth_element(v.begin(), mid, v.end());
    return *mid;
}

/// Intervals i whose |delta[i]| stands out against the neighbouring intervals.
std::vector<std::size_t> outlier_intervals(const std::vector<double>& delta, double factor, std::size_t window,
                                           double floor) {
    std::vector<std::size_t> out;
    std::vector<double> neighbours;
    for (std::size_t i = 0; i < delta.size(); ++i) {
        const double d = std::abs(delta[i]);
        if (d <= floor) continue;
        neighbours.clear();
        const std::size_t from = i >= window ? i - window : 0;
        const std::size_t to = std::min(delta.size(), i + window + 1);
        for (std::size_t j = from; j < to; ++j)
            if (j != i) neighbours.push_back(std::abs(delta[j]));
        if (d > factor * median_of(neighbours)) out.push_back(i);
    }
    return out;
}

struct Bracket {
    double lo;
    double hi;
    double jump;
};

/// Shrink [a, b] onto the largest change of f.
Bracket bisect_jump(const ScalarMap& f, double a, double b, double tolerance) {
    double fa = f(a), fb = f(b);
    for (int iter = 0; iter < 200 && b - a > tolerance; ++iter) {
        const double m = 0.5 * (a + b);
        const double fm = f(m);
        if (std::abs(fm - fa) >= std::abs(fb - fm)) {
            b = m;
            fb = fm;
        } else {
            a = m;
            fa = fm;
        }
    }
    return {a, b, fb - fa};
}

// Fourth-order one-sided first derivative; direction +1 samples x, x+s, ..., x+4s.
double one_sided_derivative(const ScalarMap& f, double x, double s, double direction) {
    const double h = direction * s;
    const double f0 = f(x), f1 = f(x + h), f2 = f(x + 2 * h), f3 = f(x + 3 * h), f4 = f(x + 4 * h);
    return (-25.0 * f0 + 48.0 * f1 - 36.0 * f2 + 16.0 * f3 - 3.0 * f4) / (12.0 * h);
}

double central_derivative(const ScalarMap& f, double x, double s) {
    return (f(x - 2 * s) - 8.0 * f(x - s) + 8.0 * f(x + s) - f(x + 2 * s)) / (12.0 * s);
}

struct ConfirmedJump {
    std::size_t interval;
    Bracket bracket;
};

std::vector<ConfirmedJump> find_jumps(const ScalarMap& f, const std::vector<double>& grid,
                                      const std::vector<double>& values, const IntegrationOptions& options) {
    std::vector<double> delta(grid.size() - 1);
    for (std::size_t i = 0; i + 1 < grid.size(); ++i) delta[i] = values[i + 1] - values[i];
    std::vector<ConfirmedJump> jumps;
    for (std::size_t i : outlier_intervals(delta, options.jump_factor, options.median_window, kAbsoluteJumpFloor)) {
        const Bracket br = bisect_jump(f, grid[i], grid[i + 1], options.bisection_tolerance);
        if (std::abs(br.jump) >= 0.5 * std::abs(delta[i]) && std::abs(br.jump) > kAbsoluteJumpFloor) {
            jumps.push_back({i, br});
        }
    }
    return jumps;
}

} // namespace

bool SampledCurve::has_unbounded_part() const {
    return !poles.empty() || std::any_of(jumps.begin(), jumps.end(), [](const JumpRecord& j) { return j.outside_support; });
}

SampledCurve integrate_P(const QuantizerPair& pair, double lo, double hi, std::size_t points,
                         const IntegrationOptions& options) {
    if (points < 1001) throw ConfigError("integrate_P needs at least 1001 grid points");
    if (!(lo < hi)) throw ConfigError("integrate_P needs lo < hi");

    const ScalarMap forward = [&pair](double w) { return pair.forward(w); };
    SampledCurve curve;
    curve.grid = make_grid(lo, hi, points);
    curve.forward.resize(points);
    curve.backward.resize(points);
    for (std::size_t i = 0; i < points; ++i) {
        curve.forward[i] = pair.forward(curve.grid[i]);
        curve.backward[i] = pair.backward(curve.grid[i]);
    }
    curve.free_region.assign(points, false);

    const std::vector<ConfirmedJump> jumps = find_jumps(forward, curve.grid, curve.forward, options);
    std::vector<const ConfirmedJump*> jump_at(points - 1, nullptr);
    for (const auto& j : jumps) jump_at[j.interval] = &j;

    const double h = (hi - lo) / static_cast<double>(points - 1);
    const double stencil = std::min(1e-4, h / 5.0);
    const double thr = options.support_threshold;

    // Ratio dF/B at x, with the derivative taken from inside the interval.
    std::vector<bool> flat_left(points, true), flat_right(points, true);
    auto ratio = [&](std::size_t i, double direction, std::vector<bool>& flat_flags) {
        const double x = curve.grid[i];
        const double slope = one_sided_derivative(forward, x, stencil, direction);
        const double b = curve.backward[i];
        if (std::abs(b) > thr) {
            flat_flags[i] = false;
            return slope / b;
        }
        if (std::abs(slope) <= options.flat_threshold) return 0.0;
        if (std::abs(one_sided_derivative(forward, x, 1e-7, direction)) <= options.flat_threshold) return 0.0;
        flat_flags[i] = false;
        if (curve.poles.empty() || curve.poles.back() != x) curve.poles.push_back(x);
        return 0.0;
    };

    std::vector<double> raw(points, 0.0);
    for (std::size_t i = 0; i + 1 < points; ++i) {
        double increment = 0.0;
        if (const ConfirmedJump* j = jump_at[i]) {
            JumpRecord rec;
            rec.location = 0.5 * (j->bracket.lo + j->bracket.hi);
            rec.magnitude = j->bracket.jump;
            rec.backward_value = pair.backward(rec.location);
            rec.outside_support = std::abs(rec.backward_value) <= thr;
            if (!rec.outside_support) increment = (curve.forward[i + 1] - curve.forward[i]) / rec.backward_value;
            curve.jumps.push_back(rec);
            flat_right[i] = flat_left[i + 1] = std::abs(curve.backward[i]) <= thr && std::abs(curve.backward[i + 1]) <= thr;
        } else {
            const double left = ratio(i, +1.0, flat_right);
            const double right = ratio(i + 1, -1.0, flat_left);
            increment = 0.5 * h * (left + right);
        }
        raw[i + 1] = raw[i] + increment;
    }

    for (std::size_t i = 0; i < points; ++i) {
        const bool vanishing = std::abs(curve.backward[i]) <= thr;
        const bool flat = (i == 0 || flat_left[i]) && (i + 1 == points || flat_right[i]);
        curve.free_region[i] = vanishing && flat;
    }

    curve.integration_constant = 0.5 * (raw.front() + raw.back());
    curve.values.resize(points);
    for (std::size_t i = 0; i < points; ++i) curve.values[i] = raw[i] - curve.integration_constant;
    return curve;
}

std::string to_string(VerdictStatus status) { return status == VerdictStatus::admits ? "admits" : "fails"; }

std::string to_string(FailureReason reason) {
    switch (reason) {
    case FailureReason::none: return "none";
    case FailureReason::non_monotone_P: return "non-monotone-P";
    case FailureReason::B_not_function_of_P: return "B-not-function-of-P";
    case FailureReason::F_not_function_of_P: return "F-not-function-of-P";
    case FailureReason::jump_outside_B_support: return "jump-outside-B-support";
    }
    return "unknown";
}

DecompositionVerdict check_factorization(const QuantizerPair& pair, SampledCurve curve,
                                         const FactorizationOptions& options) {
    DecompositionVerdict verdict;
    verdict.curve = std::move(curve);
    const SampledCurve& c = verdict.curve;
    auto fail = [&verdict](FailureReason reason, std::string detail) {
        verdict.status = VerdictStatus::fails;
        verdict.reason = reason;
        verdict.detail = std::move(detail);
        return verdict;
    };
    auto scaled = [&options](double a, double b) { return options.tolerance * std::max({1.0, std::abs(a), std::abs(b)}); };

    for (const JumpRecord& j : c.jumps) {
        if (j.outside_support) {
            std::ostringstream os;
            os << pair.name() << ": F jumps by " << j.magnitude << " at w=" << j.location << " where B vanishes";
            return fail(FailureReason::jump_outside_B_support, os.str());
        }
    }
    if (!c.poles.empty()) {
        std::ostringstream os;
        os << pair.name() << ": F varies at w=" << c.poles.front() << " where B vanishes";
        return fail(FailureReason::jump_outside_B_support, os.str());
    }

    for (std::size_t i = 0; i + 1 < c.size(); ++i) {
        if (c.values[i + 1] < c.values[i] - scaled(c.values[i], c.values[i + 1])) {
            std::ostringstream os;
            os << pair.name() << ": P decreases from " << c.values[i] << " to " << c.values[i + 1] << " at w="
               << c.grid[i];
            return fail(FailureReason::non_monotone_P, os.str());
        }
    }

    struct Range {
        double b_min, b_max, f_min, f_max, w_b_min, w_b_max;
    };
    std::map<long long, Range> levels;
    for (std::size_t i = 0; i < c.size(); ++i) {
        if (c.free_region[i] || std::abs(c.backward[i]) <= options.support_threshold) continue;
        const long long key = std::llround(c.values[i] / options.level_bucket);
        const double b = c.backward[i], f = c.forward[i], w = c.grid[i];
        auto [it, inserted] = levels.try_emplace(key, Range{b, b, f, f, w, w});
        if (inserted) continue;
        Range& r = it->second;
        if (b < r.b_min) {
            r.b_min = b;
            r.w_b_min = w;
        }
        if (b > r.b_max) {
            r.b_max = b;
            r.w_b_max = w;
        }
        r.f_min = std::min(r.f_min, f);
        r.f_max = std::max(r.f_max, f);
    }
    for (const auto& [key, r] : levels) {
        if (r.b_max - r.b_min > scaled(r.b_min, r.b_max)) {
            std::ostringstream os;
            os << pair.name() << ": P=" << static_cast<double>(key) * options.level_bucket << " at w=" << r.w_b_min
               << " and w=" << r.w_b_max << " but B takes " << r.b_min << " and " << r.b_max;
            return fail(FailureReason::B_not_function_of_P, os.str());
        }
    }
    for (const auto& [key, r] : levels) {
        if (r.f_max - r.f_min > scaled(r.f_min, r.f_max)) {
            std::ostringstream os;
            os << pair.name() << ": P=" << static_cast<double>(key) * options.level_bucket << " but F ranges over ["
               << r.f_min << ", " << r.f_max << "]";
            return fail(FailureReason::F_not_function_of_P, os.str());
        }
    }

    verdict.status = VerdictStatus::admits;
    verdict.reason = FailureReason::none;
    return verdict;
}

DecompositionVerdict analyze_pair(const QuantizerPair& pair, double lo, double hi, std::size_t points) {
    return check_factorization(pair, integrate_P(pair, lo, hi, points));
}

void write_curve_csv(std::ostream& out, const SampledCurve& curve) {
    out << "w,P,F,B\n";
    out.precision(17);
    for (std::size_t i = 0; i < curve.size(); ++i) {
        out << curve.grid[i] << ',' << curve.values[i] << ',' << curve.forward[i] << ',' << curve.backward[i] << '\n';
    }
}

ScalarFunction smooth_forward(std::string_view name, double mu) {
    if (name == "identity") return {"identity", [](double w) { return w; }, [](double) { return 1.0; }};
    if (name == "ss") {
        return {"ss", [mu](double w) { return ss_forward(w, mu); }, [mu](double w) { return ss_backward(w, mu); }};
    }
    if (name == "poly") {
        return {"poly", [mu](double w) { return poly_forward(w, mu); }, [mu](double w) { return poly_backward(w, mu); }};
    }
    if (name == "tanh") {
        const double k = ede_amplitude(mu);
        return {"tanh", [k, mu](double w) { return ede_forward(w, k, mu); },
                [k, mu](double w) { return ede_backward(w, k, mu); }};
    }
    if (name == "sign") return {"sign", [](double w) { return sign_q(w); }, {}};
    if (name == "hard_tanh") return {"hard_tanh", [](double w) { return hard_tanh(w); }, {}};
    throw ConfigError("unknown forward map '" + std::string(name) + "'");
}

namespace {

/// Locate the largest change of f' inside [a, b] and compare one-sided derivatives around it.
std::pair<double, double> kink_strength(const ScalarMap& f, double a, double b) {
    auto slope = [&f](double x, double s) { return central_derivative(f, x, s); };
    for (int iter = 0; iter < 200 && b - a > 1e-7; ++iter) {
        const double m = 0.5 * (a + b);
        const double s = (b - a) / 16.0;
        const double da = slope(a, s), dm = slope(m, s), db = slope(b, s);
        if (std::abs(dm - da) >= std::abs(db - dm)) {
            b = m;
        } else {
            a = m;
        }
        a -= 2 * s;
        b += 2 * s;
    }
    constexpr double s = 1e-5;
    const double left = one_sided_derivative(f, a, s, -1.0);
    const double right = one_sided_derivative(f, b, s, +1.0);
    const double jump = right - left;
    return {0.5 * (a + b), std::abs(jump) / std::max({1.0, std::abs(left), std::abs(right)})};
}

} // namespace

QuantizerPair derivative_rule_pair(const ScalarFunction& forward, const SmoothnessProbe& probe) {
    const std::vector<double> grid = make_grid(probe.lo, probe.hi, probe.points);
    std::vector<double> values(grid.size());
    for (std::size_t i = 0; i < grid.size(); ++i) values[i] = forward.value(grid[i]);

    const IntegrationOptions detection;
    const auto jumps = find_jumps(forward.value, grid, values, detection);
    if (!jumps.empty()) {
        const double at = 0.5 * (jumps.front().bracket.lo + jumps.front().bracket.hi);
        std::ostringstream os;
        os << forward.name << " is discontinuous near w=" << at;
        throw SmoothnessError(os.str(), at);
    }

    constexpr double stencil = 1e-4;
    std::vector<double> slopes(grid.size());
    for (std::size_t i = 0; i < grid.size(); ++i) slopes[i] = central_derivative(forward.value, grid[i], stencil);
    std::vector<double> change(grid.size() - 1);
    for (std::size_t i = 0; i + 1 < grid.size(); ++i) change[i] = slopes[i + 1] - slopes[i];
    for (std::size_t i : outlier_intervals(change, detection.jump_factor, detection.median_window, 1e-9)) {
        const auto [at, strength] = kink_strength(forward.value, grid[i], grid[i + 1]);
        if (strength > 1e-3) {
            std::ostringstream os;
            os << forward.name << " has a kink near w=" << at;
            throw SmoothnessError(os.str(), at);
        }
    }

    const ScalarMap value = forward.value;
    const ScalarMap derivative = forward.derivative
                                     ? forward.derivative
                                     : ScalarMap([value](double w) { return central_derivative(value, w, stencil); });
    return QuantizerPair(
        forward.name + "'", [value](double w, const QuantizerParams&) { return value(w); },
        [derivative](double w, const QuantizerParams&) { return derivative(w); });
}

double moreau_env(double w, double mu) {
    const double d = std::min((w - 1.0) * (w - 1.0), (w + 1.0) * (w + 1.0));
    return d / (2.0 * mu);
}

} // namespace proxbin
