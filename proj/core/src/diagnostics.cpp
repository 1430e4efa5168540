#include "proxbin/diagnostics.hpp"

#include "binary_io.hpp"
#include "proxbin/errors.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <random>

namespace proxbin {

using nlohmann::json;

RegKind parse_reg_kind(std::string_view name) {
    if (name == "zero" || name == "0") return RegKind::zero;
    if (name == "indicator" || name == "indicator_Q" || name == "indicator-Q") return RegKind::indicator_Q;
    throw ConfigError("unknown regularizer '" + std::string(name) + "' (expected zero or indicator)");
}

std::string to_string(RegKind kind) { return kind == RegKind::zero ? "zero" : "indicator"; }

double reg_value(const Tensor& w, RegKind kind) {
    if (kind == RegKind::zero) return 0.0;
    for (double v : w.data())
        if (v != 1.0 && v != -1.0) return std::numeric_limits<double>::infinity();
    return 0.0;
}

double bregman_delta(const Tensor& w, const Tensor& w_next, const Tensor& w_star_next, double mu_next, RegKind kind) {
    if (w.numel() != w_next.numel() || w.numel() != w_star_next.numel()) {
        throw DimensionError("bregman_delta: operands differ in size");
    }
    const double r_w = reg_value(w, kind);
    const double r_next = reg_value(w_next, kind);
    if (std::isinf(r_w) || std::isinf(r_next)) return std::numeric_limits<double>::infinity();
    double value = mu_next * (r_w - r_next);
    for (std::size_t i = 0; i < w.numel(); ++i) {
        value += 0.5 * w[i] * w[i] - 0.5 * w_next[i] * w_next[i] - (w[i] - w_next[i]) * w_star_next[i];
    }
    return value;
}

double QuadraticObjective::value(const Tensor& w) const {
    if (w.numel() != diag.size()) throw DimensionError("quadratic objective: wrong dimension");
    double f = 0.0;
    for (std::size_t i = 0; i < diag.size(); ++i) {
        const double d = w[i] - center[i];
        f += 0.5 * diag[i] * d * d;
    }
    return f;
}

Tensor QuadraticObjective::gradient(const Tensor& w) const {
    if (w.numel() != diag.size()) throw DimensionError("quadratic objective: wrong dimension");
    Tensor g(w.shape());
    for (std::size_t i = 0; i < diag.size(); ++i) g[i] = diag[i] * (w[i] - center[i]);
    return g;
}

Tensor QuadraticObjective::minimizer() const { return Tensor(Shape{center.size()}, center); }

std::size_t Trajectory::dim() const {
    std::size_t d = 0;
    for (const Shape& s : shapes) d += shape_numel(s);
    return d;
}

void write_trajectory(const std::filesystem::path& path, const Trajectory& trajectory) {
    const std::size_t d = trajectory.dim();
    {
        std::ofstream out = detail::open_output(path);
        for (const TrajectoryRecord& r : trajectory.records) {
            if (r.w.numel() != d || r.w_star.numel() != d || r.grad.numel() != d) {
                throw DimensionError("trajectory record " + std::to_string(r.t) + " does not match the declared shapes");
            }
            detail::put_f64(out, static_cast<double>(r.t));
            detail::put_f64(out, r.eta);
            detail::put_f64(out, r.mu);
            for (const Tensor* t : {&r.w, &r.w_star, &r.grad})
                for (double v : t->data()) detail::put_f64(out, v);
        }
    }
    json meta;
    meta["format"] = "proxbin-trajectory";
    meta["version"] = 1;
    meta["dim"] = d;
    meta["shapes"] = trajectory.shapes;
    meta["records"] = trajectory.records.size();
    meta["layout"] = {"t", "eta", "mu", "w", "w_star", "grad"};
    if (trajectory.objective) {
        meta["objective"] = {{"kind", "quadratic"},
                             {"diag", trajectory.objective->diag},
                             {"center", trajectory.objective->center}};
    }
    std::ofstream side = detail::open_output(path.string() + ".json");
    side << meta.dump(2) << '\n';
}

Trajectory read_trajectory(const std::filesystem::path& path) {
    const std::filesystem::path side_path = path.string() + ".json";
    std::ifstream side(side_path);
    if (!side) throw FormatError("missing trajectory sidecar '" + side_path.string() + "'");
    json meta;
    try {
        side >> meta;
    } catch (const json::exception& e) {
        throw FormatError("trajectory sidecar: " + std::string(e.what()));
    }
    if (meta.value("format", "") != "proxbin-trajectory") throw FormatError("not a trajectory sidecar");

    Trajectory trajectory;
    trajectory.shapes = meta.at("shapes").get<std::vector<Shape>>();
    if (meta.contains("objective")) {
        QuadraticObjective q;
        q.diag = meta["objective"].at("diag").get<std::vector<double>>();
        q.center = meta["objective"].at("center").get<std::vector<double>>();
        trajectory.objective = std::move(q);
    }
    const std::size_t d = trajectory.dim();
    const std::size_t count = meta.at("records").get<std::size_t>();

    const std::vector<unsigned char> bytes = detail::read_file(path);
    const std::size_t record_bytes = 8 * (3 + 3 * d);
    if (bytes.size() != count * record_bytes) {
        throw FormatError("trajectory '" + path.string() + "' holds " + std::to_string(bytes.size()) +
                          " bytes, expected " + std::to_string(count * record_bytes));
    }
    detail::ByteReader reader(bytes, path.string());
    trajectory.records.reserve(count);
    for (std::size_t k = 0; k < count; ++k) {
        TrajectoryRecord r;
        r.t = static_cast<std::size_t>(reader.f64());
        r.eta = reader.f64();
        r.mu = reader.f64();
        for (Tensor* t : {&r.w, &r.w_star, &r.grad}) {
            *t = Tensor(Shape{d});
            for (double& v : t->data()) v = reader.f64();
        }
        trajectory.records.push_back(std::move(r));
    }
    return trajectory;
}

namespace {

Tensor flatten_all(const std::vector<Tensor>& parts, std::size_t d) {
    Tensor flat(Shape{d});
    std::size_t k = 0;
    for (const Tensor& p : parts)
        for (double v : p.data()) flat[k++] = v;
    return flat;
}

} // namespace

std::function<void(const StepInfo&)> trajectory_recorder(Trajectory& out) {
    return [&out](const StepInfo& info) {
        if (out.shapes.empty()) {
            for (const LayerState& layer : info.layers) out.shapes.push_back(layer.w_star.shape());
        }
        const std::size_t d = out.dim();
        std::vector<Tensor> w, w_star;
        for (const LayerState& layer : info.layers) {
            w.push_back(layer.w);
            w_star.push_back(layer.w_star);
        }
        out.records.push_back(
            TrajectoryRecord{info.t, info.eta, info.mu, flatten_all(w, d), flatten_all(w_star, d), flatten_all(info.grads, d)});
    };
}

namespace {

double delta_at(const Trajectory& tr, const Tensor& w, std::size_t tau, RegKind kind) {
    // Delta_tau needs w_{tau+1} and w*_{tau+1}, stored in record index tau.
    const TrajectoryRecord& next = tr.records.at(tau);
    return bregman_delta(w, next.w, next.w_star, next.mu, kind);
}

double summand_at(const Trajectory& tr, const Tensor& w, std::size_t tau, RegKind kind, double r_ref) {
    const TrajectoryRecord& rec = tr.records.at(tau - 1);
    double inner = 0.0;
    for (std::size_t i = 0; i < w.numel(); ++i) inner += (rec.w[i] - w[i]) * rec.grad[i];
    return rec.eta * (inner + reg_value(rec.w, kind) - r_ref);
}

} // namespace

GapWindow audit_window(const Trajectory& trajectory, const Tensor& w_ref, RegKind kind, std::size_t s, std::size_t t,
                       const Objective& objective) {
    GapWindow win;
    win.s = s;
    win.t = t;
    if (s > t) return win;
    if (s == 0 || t >= trajectory.records.size()) {
        throw DimensionError("window [" + std::to_string(s) + ", " + std::to_string(t) + "] outside the " +
                             std::to_string(trajectory.records.size()) + " recorded steps");
    }
    if (w_ref.numel() != trajectory.dim()) throw DimensionError("reference point has the wrong dimension");

    const double r_ref = reg_value(w_ref, kind);
    double lhs = 0.0, sum_eta = 0.0, sum_sq = 0.0;
    double rhs = delta_at(trajectory, w_ref, s - 1, kind) - delta_at(trajectory, w_ref, t, kind);
    for (std::size_t tau = s; tau <= t; ++tau) {
        const TrajectoryRecord& rec = trajectory.records[tau - 1];
        lhs += summand_at(trajectory, w_ref, tau, kind, r_ref);
        rhs += delta_at(trajectory, rec.w, tau, kind);
        sum_eta += rec.eta;
        sum_sq += 0.5 * rec.eta * rec.eta * squared_norm(rec.grad);
    }
    win.lhs = lhs;
    win.rhs = rhs;
    win.slack = rhs - lhs;

    if (objective) {
        const double f_ref = objective(w_ref);
        const double bound = (delta_at(trajectory, w_ref, s - 1, kind) + sum_sq) / sum_eta;
        double best = std::numeric_limits<double>::infinity();
        Tensor average(Shape{w_ref.numel()}, 0.0);
        for (std::size_t tau = s; tau <= t; ++tau) {
            const TrajectoryRecord& rec = trajectory.records[tau - 1];
            best = std::min(best, objective(rec.w) + reg_value(rec.w, kind));
            for (std::size_t i = 0; i < average.numel(); ++i) average[i] += rec.eta * rec.w[i];
        }
        for (double& v : average.data()) v /= sum_eta;
        win.min_gap = best - f_ref;
        win.min_bound = bound;
        win.avg_gap = objective(average) + reg_value(average, kind) - f_ref;
        win.avg_bound = bound;
    }
    return win;
}

bool GapAudit::holds(double tolerance) const {
    if (min_slack < -tolerance) return false;
    if (min_slack_min_iterate && *min_slack_min_iterate < -tolerance) return false;
    if (min_slack_average && *min_slack_average < -tolerance) return false;
    return true;
}

GapAudit gap_audit(const Trajectory& trajectory, const Tensor& w_ref, RegKind kind,
                   const std::vector<std::pair<std::size_t, std::size_t>>& windows, const Objective& objective) {
    GapAudit audit;
    const double r_ref = reg_value(w_ref, kind);
    double gap = 0.0, bound_sum = 0.0;
    const double first = trajectory.records.empty() ? 0.0 : delta_at(trajectory, w_ref, 0, kind);
    for (std::size_t tau = 1; tau < trajectory.records.size(); ++tau) {
        BregmanRecord rec;
        rec.t = tau;
        rec.delta = delta_at(trajectory, w_ref, tau, kind);
        rec.gap_summand = summand_at(trajectory, w_ref, tau, kind, r_ref);
        gap += rec.gap_summand;
        bound_sum += delta_at(trajectory, trajectory.records[tau - 1].w, tau, kind);
        rec.running_gap = gap;
        rec.running_bound = first - rec.delta + bound_sum;
        audit.records.push_back(rec);
    }

    audit.min_slack = std::numeric_limits<double>::infinity();
    for (const auto& [s, t] : windows) {
        GapWindow win = audit_window(trajectory, w_ref, kind, s, t, objective);
        audit.min_slack = std::min(audit.min_slack, win.slack);
        if (win.min_gap) {
            const double a = *win.min_bound - *win.min_gap;
            const double b = *win.avg_bound - *win.avg_gap;
            audit.min_slack_min_iterate = std::min(audit.min_slack_min_iterate.value_or(a), a);
            audit.min_slack_average = std::min(audit.min_slack_average.value_or(b), b);
        }
        audit.windows.push_back(std::move(win));
    }
    if (windows.empty()) audit.min_slack = 0.0;
    return audit;
}

std::vector<std::pair<std::size_t, std::size_t>> random_windows(std::size_t count, std::size_t steps,
                                                                 std::uint64_t seed) {
    if (steps < 2) throw ConfigError("random_windows needs at least two recorded steps");
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<std::size_t> pick(1, steps - 1);
    std::vector<std::pair<std::size_t, std::size_t>> out;
    out.reserve(count);
    for (std::size_t i = 0; i < count; ++i) {
        std::size_t a = pick(rng), b = pick(rng);
        if (a > b) std::swap(a, b);
        out.emplace_back(a, b);
    }
    return out;
}

QuadraticObjective random_quadratic(std::size_t dim, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> curvature(0.5, 2.0);
    std::normal_distribution<double> center(0.0, 1.0);
    QuadraticObjective q;
    for (std::size_t i = 0; i < dim; ++i) {
        q.diag.push_back(curvature(rng));
        q.center.push_back(center(rng));
    }
    return q;
}

Trajectory run_quadratic(const QuadraticObjective& objective, const Schedule& schedule, std::size_t steps,
                         std::uint64_t seed) {
    std::mt19937_64 rng(seed ^ 0x9E3779B97F4A7C15ULL);
    std::normal_distribution<double> start(0.0, 2.0);
    Tensor w0(Shape{objective.diag.size()});
    for (double& v : w0.data()) v = start(rng);

    TrainerState state;
    state.schedule = schedule;
    state.layers.push_back(make_layer("w", std::move(w0), false));
    Trajectory trajectory;
    trajectory.objective = objective;
    state.observer = trajectory_recorder(trajectory);
    QuantizerPair pair = make_pair("fp");
    const GradFn grad = [&objective](const std::vector<Tensor>& w) { return std::vector<Tensor>{objective.gradient(w[0])}; };
    // steps + 1 records: windows may end at `steps`.
    for (std::size_t k = 0; k <= steps; ++k) pcpp_step(state, pair, grad);
    return trajectory;
}

} // namespace proxbin
