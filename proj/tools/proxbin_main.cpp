#include "proxbin/decomposition.hpp"
#include "proxbin/diagnostics.hpp"
#include "proxbin/errors.hpp"
#include "proxbin/experiment.hpp"
#include "proxbin/packing.hpp"

#include <CLI11.hpp>

#include <atomic>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

namespace {

using namespace proxbin;

constexpr int exit_ok = 0;
constexpr int exit_failure = 1;
constexpr int exit_config = 2;
constexpr int exit_divergence = 3;

struct TrainOptions {
    std::string config;
    std::optional<std::string> algorithm;
    std::optional<std::string> task_mode;
    std::optional<std::uint64_t> seed;
    std::optional<std::size_t> epochs;
    std::optional<std::string> out;
    bool quiet = false;
};

ExperimentConfig resolve_config(const TrainOptions& o) {
    ExperimentConfig c = o.config.empty() ? ExperimentConfig{} : load_config(o.config);
    if (o.algorithm) c.algorithm = *o.algorithm;
    if (o.task_mode) c.task_mode = *o.task_mode;
    if (o.seed) c.seed = *o.seed;
    if (o.epochs) c.epochs = *o.epochs;
    if (o.out) c.out = *o.out;
    validate_config(c);
    return c;
}

int run_train(const TrainOptions& o) {
    const ExperimentConfig c = resolve_config(o);
    RunHooks hooks;
    if (!o.quiet) {
        hooks.on_row = [first = true](const MetricsRow& row) mutable {
            if (first) std::cout << metrics_header() << '\n';
            first = false;
            std::cout << format_metrics_row(row) << std::endl;
        };
    }
    const RunResult r = run_experiment(c, hooks);
    if (r.diverged) {
        std::cerr << "diverged: " << r.message << " (last good epoch " << r.last_good_epoch << ")\n";
        return exit_divergence;
    }
    std::cout << "final test accuracy " << r.final_test_acc << ", outputs in " << r.out.string() << '\n';
    return exit_ok;
}

struct AnalyzeOptions {
    std::string pair;
    bool derivative = false;
    double mu = 5.0;
    std::string csv;
    double lo = -3.0;
    double hi = 3.0;
    std::size_t points = 10001;
};

int run_analyze(const AnalyzeOptions& o) {
    const QuantizerPair pair = o.derivative ? derivative_rule_pair(smooth_forward(o.pair, o.mu)) : make_pair(o.pair);
    const DecompositionVerdict v = analyze_pair(pair, o.lo, o.hi, o.points);
    std::cout << pair.name() << ": " << to_string(v.status);
    if (!v.admits()) std::cout << " (" << to_string(v.reason) << ")";
    std::cout << '\n';
    if (!v.detail.empty()) std::cout << "  " << v.detail << '\n';
    std::cout << "  jumps " << v.curve.jumps.size() << ", poles " << v.curve.poles.size() << ", integration constant "
              << v.curve.integration_constant << '\n';
    if (!o.csv.empty()) {
        std::ofstream out(o.csv);
        if (!out) throw FormatError("cannot write '" + o.csv + "'");
        write_curve_csv(out, v.curve);
        std::cout << "  P curve written to " << o.csv << '\n';
    }
    return exit_ok;
}

int run_report_mem(const std::string& bqw, const std::string& checkpoint) {
    const MemoryReport r =
        report_memory(bqw, checkpoint.empty() ? std::nullopt : std::optional<std::filesystem::path>(checkpoint));
    std::printf("%-32s %12s %14s %14s %8s\n", "layer", "numel", "fp_bytes", "stored_bytes", "binary");
    for (const MemoryRow& row : r.rows) {
        std::printf("%-32s %12zu %14zu %14zu %8s\n", row.name.c_str(), row.numel, row.fp_bytes, row.stored_bytes,
                    row.binary ? "yes" : "no");
    }
    std::printf("%-32s %12s %14zu %14zu\n", "total", "", r.total_fp_bytes, r.total_stored_bytes);
    std::printf("compression ratio %.4f\n", r.ratio());
    return exit_ok;
}

struct SweepOptions {
    TrainOptions base;
    std::vector<std::string> algorithms;
    std::vector<std::uint64_t> seeds;
    std::size_t jobs = 1;
};

struct SweepJob {
    ExperimentConfig config;
    std::string status;
    RunResult result;
};

int run_sweep(const SweepOptions& o) {
    const ExperimentConfig base = resolve_config(o.base);
    const std::vector<std::string> algorithms = o.algorithms.empty() ? std::vector<std::string>{base.algorithm} : o.algorithms;
    const std::vector<std::uint64_t> seeds = o.seeds.empty() ? std::vector<std::uint64_t>{base.seed} : o.seeds;

    std::vector<SweepJob> jobs;
    for (const std::string& algorithm : algorithms) {
        for (std::uint64_t seed : seeds) {
            SweepJob job;
            job.config = base;
            job.config.algorithm = algorithm;
            job.config.seed = seed;
            job.config.out = base.out / algorithm / ("seed" + std::to_string(seed));
            validate_config(job.config);
            jobs.push_back(std::move(job));
        }
    }

    std::atomic<std::size_t> next{0};
    std::mutex log_mutex;
    auto worker = [&] {
        for (std::size_t i = next++; i < jobs.size(); i = next++) {
            SweepJob& job = jobs[i];
            try {
                job.result = run_experiment(job.config);
                job.status = job.result.diverged ? "diverged" : "ok";
            } catch (const std::exception& e) {
                job.status = "error";
                job.result.message = e.what();
            }
            const std::lock_guard lock(log_mutex);
            std::cout << job.config.algorithm << " seed " << job.config.seed << ": " << job.status;
            if (job.status == "ok") std::cout << " test_acc " << job.result.final_test_acc;
            if (!job.result.message.empty()) std::cout << " (" << job.result.message << ")";
            std::cout << std::endl;
        }
    };
    const std::size_t n = std::max<std::size_t>(1, std::min(o.jobs, jobs.size()));
    std::vector<std::thread> pool;
    for (std::size_t i = 1; i < n; ++i) pool.emplace_back(worker);
    worker();
    for (std::thread& t : pool) t.join();

    std::filesystem::create_directories(base.out);
    std::ofstream summary(base.out / "summary.csv");
    if (!summary) throw FormatError("cannot write '" + (base.out / "summary.csv").string() + "'");
    summary << "schema,algorithm,seed,status,last_good_epoch,final_test_acc\n";
    summary.precision(10);
    int code = exit_ok;
    for (const SweepJob& job : jobs) {
        summary << metrics_schema_version << ',' << job.config.algorithm << ',' << job.config.seed << ',' << job.status
                << ',' << job.result.last_good_epoch << ',' << job.result.final_test_acc << '\n';
        if (job.status == "diverged") code = exit_divergence;
        if (job.status == "error" && code == exit_ok) code = exit_failure;
    }
    return code;
}

struct GapOptions {
    std::string trajectory;
    bool quadratic = false;
    std::size_t dim = 10;
    std::size_t steps = 500;
    double eta = 0.05;
    std::size_t windows = 20;
    std::uint64_t seed = 1;
    std::string reg = "zero";
    std::string save;
    double tolerance = 1e-9;
};

int run_gap_audit(const GapOptions& o) {
    Trajectory traj;
    if (o.quadratic) {
        Schedule schedule;
        schedule.eta.eta0 = o.eta;
        traj = run_quadratic(random_quadratic(o.dim, o.seed), schedule, o.steps, o.seed);
        if (!o.save.empty()) write_trajectory(o.save, traj);
    } else {
        if (o.trajectory.empty()) throw ConfigError("gap-audit needs a trajectory file or --quadratic");
        traj = read_trajectory(o.trajectory);
    }
    if (traj.records.size() < 2) throw ConfigError("trajectory needs at least two records");

    Tensor w_ref;
    Objective objective;
    if (traj.objective) {
        const QuadraticObjective obj = *traj.objective;
        w_ref = obj.minimizer();
        objective = [obj](const Tensor& w) { return obj.value(w); };
    } else {
        w_ref = traj.records.back().w;
    }
    const std::size_t steps = traj.records.size() - 1;
    const GapAudit audit =
        gap_audit(traj, w_ref, parse_reg_kind(o.reg), random_windows(o.windows, steps, o.seed), objective);

    std::printf("%8s %8s %16s %16s %14s\n", "s", "t", "lhs", "rhs", "slack");
    for (const GapWindow& w : audit.windows) std::printf("%8zu %8zu %16.8e %16.8e %14.6e\n", w.s, w.t, w.lhs, w.rhs, w.slack);
    std::printf("min slack %.6e\n", audit.min_slack);
    if (audit.min_slack_min_iterate) std::printf("min slack (min iterate) %.6e\n", *audit.min_slack_min_iterate);
    if (audit.min_slack_average) std::printf("min slack (average iterate) %.6e\n", *audit.min_slack_average);
    const bool holds = audit.holds(o.tolerance);
    std::printf("bound %s at tolerance %g\n", holds ? "holds" : "violated", o.tolerance);
    return holds ? exit_ok : exit_failure;
}

void add_train_flags(CLI::App& cmd, TrainOptions& o) {
    cmd.add_option("config", o.config, "TOML experiment config (defaults used when omitted)");
    cmd.add_option("--algorithm", o.algorithm, "Training algorithm");
    cmd.add_option("--task-mode", o.task_mode, "BW, BWA or BWAA");
    cmd.add_option("--seed", o.seed, "Random seed");
    cmd.add_option("--epochs", o.epochs, "Number of epochs");
    cmd.add_option("--out", o.out, "Output directory");
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Binarized training with proximal quantizers"};
    app.require_subcommand(1);

    TrainOptions train;
    CLI::App* train_cmd = app.add_subcommand("train", "Run one experiment");
    add_train_flags(*train_cmd, train);
    train_cmd->add_flag("--quiet", train.quiet, "Do not echo metrics rows");

    AnalyzeOptions analyze;
    CLI::App* analyze_cmd = app.add_subcommand("analyze", "Check whether a quantizer pair admits the proximal decomposition");
    analyze_cmd->add_option("pair", analyze.pair, "Pair name, or a smooth forward with --derivative")->required();
    analyze_cmd->add_flag("--derivative", analyze.derivative, "Build the pair (F, F') from a smooth forward");
    analyze_cmd->add_option("--mu", analyze.mu, "Sharpness for --derivative forwards");
    analyze_cmd->add_option("--csv", analyze.csv, "Write the P curve (w,P,F,B)");
    analyze_cmd->add_option("--lo", analyze.lo, "Integration window start");
    analyze_cmd->add_option("--hi", analyze.hi, "Integration window end");
    analyze_cmd->add_option("--points", analyze.points, "Grid points");

    std::string bqw, checkpoint;
    CLI::App* mem_cmd = app.add_subcommand("report-mem", "Per-layer memory of a packed model");
    mem_cmd->add_option("model", bqw, "Packed .bqw file")->required();
    mem_cmd->add_option("--checkpoint", checkpoint, "Checkpoint holding the full-precision tensors");

    SweepOptions sweep;
    CLI::App* sweep_cmd = app.add_subcommand("sweep", "Run a grid of algorithms and seeds on a worker pool");
    add_train_flags(*sweep_cmd, sweep.base);
    sweep_cmd->add_option("--algorithms", sweep.algorithms, "Algorithms to run")->delimiter(',');
    sweep_cmd->add_option("--seeds", sweep.seeds, "Seeds to run")->delimiter(',');
    sweep_cmd->add_option("--jobs", sweep.jobs, "Worker threads");
    sweep.base.quiet = true;

    GapOptions gap;
    CLI::App* gap_cmd = app.add_subcommand("gap-audit", "Audit the Bregman gap bound along a trajectory");
    gap_cmd->add_option("trajectory", gap.trajectory, "Trajectory file");
    gap_cmd->add_flag("--quadratic", gap.quadratic, "Generate a run on a random convex quadratic");
    gap_cmd->add_option("--dim", gap.dim, "Quadratic dimension");
    gap_cmd->add_option("--steps", gap.steps, "Quadratic steps");
    gap_cmd->add_option("--eta", gap.eta, "Constant step size");
    gap_cmd->add_option("--windows", gap.windows, "Random windows to audit");
    gap_cmd->add_option("--seed", gap.seed, "Random seed");
    gap_cmd->add_option("--reg", gap.reg, "Regularizer: zero or indicator_Q");
    gap_cmd->add_option("--save", gap.save, "Write the generated trajectory here");
    gap_cmd->add_option("--tolerance", gap.tolerance, "Allowed negative slack");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? exit_ok : exit_config;
    }

    try {
        if (*train_cmd) return run_train(train);
        if (*analyze_cmd) return run_analyze(analyze);
        if (*mem_cmd) return run_report_mem(bqw, checkpoint);
        if (*sweep_cmd) return run_sweep(sweep);
        if (*gap_cmd) return run_gap_audit(gap);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return exit_config;
    } catch (const DivergenceError& e) {
        std::cerr << "diverged at step " << e.step() << ": " << e.what() << '\n';
        return exit_divergence;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return exit_failure;
    }
    return exit_failure;
}
