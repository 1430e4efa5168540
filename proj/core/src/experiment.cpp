#include "proxbin/experiment.hpp"

#include "proxbin/checkpoint.hpp"
#include "proxbin/data.hpp"
#include "proxbin/errors.hpp"
#include "proxbin/optim.hpp"
#include "proxbin/packing.hpp"
#include "proxbin/quantizers.hpp"
#include "proxbin/schedule.hpp"

#include <json.hpp>
#include <toml.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

namespace proxbin {

const std::vector<std::string>& algorithm_names() {
    static const std::vector<std::string> names{"fp",  "bc",     "pc",   "bnn",   "bnn+", "bnn++", "pq",
                                                "rpc", "bireal", "rbnn", "poly+", "ede",  "ede+",  "react"};
    return names;
}

bool is_binarizing(std::string_view algorithm) { return algorithm != "fp"; }

namespace {

// ---------------------------------------------------------------------------
// TOML reading

class TableReader {
public:
    TableReader(const toml::table& table, std::string path) : table_(table), path_(std::move(path)) {}

    ~TableReader() noexcept(false) {
        if (std::uncaught_exceptions() > 0) return;
        for (const auto& [key, node] : table_) {
            if (!known_.count(std::string(key.str()))) {
                throw ConfigError("unknown config key '" + qualified(std::string(key.str())) + "'");
            }
        }
    }

    TableReader(const TableReader&) = delete;
    TableReader& operator=(const TableReader&) = delete;

    void read(std::string_view key, std::string& out) {
        if (const toml::node* n = find(key)) out = as<std::string>(*n, key);
    }
    void read(std::string_view key, std::filesystem::path& out) {
        if (const toml::node* n = find(key)) out = as<std::string>(*n, key);
    }
    void read(std::string_view key, bool& out) {
        if (const toml::node* n = find(key)) out = as<bool>(*n, key);
    }
    void read(std::string_view key, double& out) {
        if (const toml::node* n = find(key)) out = number(*n, key);
    }
    void read(std::string_view key, std::size_t& out) {
        if (const toml::node* n = find(key)) out = count(*n, key);
    }
    void read(std::string_view key, std::uint64_t& out, int) {
        if (const toml::node* n = find(key)) out = count(*n, key);
    }
    void read(std::string_view key, std::optional<std::string>& out) {
        if (const toml::node* n = find(key)) out = as<std::string>(*n, key);
    }
    void read(std::string_view key, std::optional<bool>& out) {
        if (const toml::node* n = find(key)) out = as<bool>(*n, key);
    }
    void read(std::string_view key, std::optional<double>& out) {
        if (const toml::node* n = find(key)) out = number(*n, key);
    }
    void read(std::string_view key, std::vector<std::size_t>& out) {
        if (const toml::node* n = find(key)) {
            out.clear();
            for (const toml::node& item : array(*n, key)) out.push_back(count(item, key));
        }
    }
    void read(std::string_view key, std::vector<double>& out) {
        if (const toml::node* n = find(key)) {
            out.clear();
            for (const toml::node& item : array(*n, key)) out.push_back(number(item, key));
        }
    }

    const toml::table* subtable(std::string_view key) {
        const toml::node* n = find(key);
        if (!n) return nullptr;
        if (!n->is_table()) throw ConfigError("config key '" + qualified(key) + "' must be a table");
        return n->as_table();
    }

    const toml::array* table_array(std::string_view key) {
        const toml::node* n = find(key);
        if (!n) return nullptr;
        if (!n->is_array_of_tables()) throw ConfigError("config key '" + qualified(key) + "' must be an array of tables");
        return n->as_array();
    }

    std::string qualified(std::string_view key) const {
        return path_.empty() ? std::string(key) : path_ + "." + std::string(key);
    }

private:
    const toml::node* find(std::string_view key) {
        known_.insert(std::string(key));
        return table_.get(key);
    }

    template <class T>
    T as(const toml::node& n, std::string_view key) const {
        std::optional<T> v = n.value_exact<T>();
        if (!v) throw ConfigError("config key '" + qualified(key) + "' has the wrong type");
        return *v;
    }

    double number(const toml::node& n, std::string_view key) const {
        if (n.is_integer()) return static_cast<double>(*n.value<std::int64_t>());
        if (n.is_floating_point()) return *n.value<double>();
        throw ConfigError("config key '" + qualified(key) + "' must be a number");
    }

    std::size_t count(const toml::node& n, std::string_view key) const {
        if (!n.is_integer()) throw ConfigError("config key '" + qualified(key) + "' must be an integer");
        const std::int64_t v = *n.value<std::int64_t>();
        if (v < 0) throw ConfigError("config key '" + qualified(key) + "' must be non-negative");
        return static_cast<std::size_t>(v);
    }

    const toml::array& array(const toml::node& n, std::string_view key) const {
        if (!n.is_array()) throw ConfigError("config key '" + qualified(key) + "' must be an array");
        return *n.as_array();
    }

    const toml::table& table_;
    std::string path_;
    std::set<std::string> known_;
};

LayerSpec read_layer(const toml::table& t, std::size_t index) {
    TableReader r(t, "model.layers[" + std::to_string(index) + "]");
    LayerSpec l;
    std::string kind;
    r.read("kind", kind);
    if (kind.empty()) throw ConfigError("model.layers[" + std::to_string(index) + "] needs a kind");
    l.kind = parse_layer_kind(kind);
    r.read("in", l.in);
    r.read("out", l.out);
    r.read("kernel", l.kernel);
    r.read("stride", l.stride);
    r.read("padding", l.padding);
    r.read("window", l.window);
    r.read("name", l.name);
    return l;
}

} // namespace

ExperimentConfig parse_config(std::string_view toml_text, std::string_view source) {
    toml::table root;
    try {
        root = toml::parse(toml_text, source);
    } catch (const toml::parse_error& e) {
        std::ostringstream os;
        os << source << ": " << e.description() << " (line " << e.source().begin.line << ")";
        throw ConfigError(os.str());
    }

    ExperimentConfig c;
    {
        TableReader r(root, "");
        r.read("algorithm", c.algorithm);
        r.read("pair", c.pair);
        r.read("task_mode", c.task_mode);
        r.read("activations", c.activations);
        r.read("pipeline", c.pipeline);
        r.read("checkpoint", c.checkpoint);
        r.read("epochs", c.epochs);
        r.read("batch_size", c.batch_size);
        r.read("eval_batch_size", c.eval_batch_size);
        r.read("seed", c.seed, 0);
        r.read("out", c.out);

        if (const toml::table* t = r.subtable("data")) {
            TableReader d(*t, "data");
            DatasetConfig& dc = c.data;
            d.read("kind", dc.kind);
            d.read("train_images", dc.train_images);
            d.read("train_labels", dc.train_labels);
            d.read("test_images", dc.test_images);
            d.read("test_labels", dc.test_labels);
            d.read("train_limit", dc.train_limit);
            d.read("test_limit", dc.test_limit);
            d.read("blobs_train", dc.blobs_train);
            d.read("blobs_test", dc.blobs_test);
            d.read("blobs_classes", dc.blobs_classes);
            d.read("blobs_dim", dc.blobs_dim);
            d.read("blobs_spread", dc.blobs_spread);
        }
        if (const toml::table* t = r.subtable("model")) {
            TableReader m(*t, "model");
            ModelConfig& mc = c.model;
            m.read("preset", mc.preset);
            m.read("hidden", mc.hidden);
            m.read("width1", mc.width1);
            m.read("width2", mc.width2);
            m.read("keep_first_last_fp", mc.keep_first_last_fp);
            m.read("scale", mc.scale);
            m.read("input_mean", mc.input_mean);
            m.read("input_std", mc.input_std);
            if (const toml::array* layers = m.table_array("layers")) {
                mc.layers.clear();
                for (std::size_t i = 0; i < layers->size(); ++i) mc.layers.push_back(read_layer(*(*layers)[i].as_table(), i));
            }
        }
        if (const toml::table* t = r.subtable("schedule")) {
            TableReader s(*t, "schedule");
            ScheduleConfig& sc = c.schedule;
            s.read("step_rule", sc.step_rule);
            s.read("eta", sc.eta);
            s.read("eta_min", sc.eta_min);
            s.read("decay_epochs", sc.decay_epochs);
            s.read("decay_factor", sc.decay_factor);
            s.read("momentum", sc.momentum);
            s.read("clip_norm", sc.clip_norm);
            s.read("mu_rule", sc.mu_rule);
            s.read("mu0", sc.mu0);
            s.read("mu_end", sc.mu_end);
            s.read("rho0", sc.rho0);
            s.read("rho_end", sc.rho_end);
            s.read("mu_ramp", sc.mu_ramp);
        }
    }
    validate_config(c);
    return c;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read config '" + path.string() + "'");
    std::stringstream buf;
    buf << in.rdbuf();
    return parse_config(buf.str(), path.string());
}

void validate_config(const ExperimentConfig& c) {
    const auto& algs = algorithm_names();
    if (std::find(algs.begin(), algs.end(), c.algorithm) == algs.end()) {
        throw ConfigError("unknown algorithm '" + c.algorithm + "'");
    }
    const TaskMode mode = parse_task_mode(c.task_mode);
    TaskFlags flags = TaskFlags::from_mode(mode);
    if (c.activations) flags.activations = *c.activations;
    if (flags.accumulator_bits && !flags.activations) {
        throw ConfigError("task mode BWAA requires binarized activations (BWA)");
    }
    if (c.algorithm == "fp" && mode != TaskMode::BW) {
        throw ConfigError("algorithm fp trains full precision and only supports task mode BW");
    }
    if (c.pair) {
        if (c.algorithm == "pq" || c.algorithm == "rpc" || c.algorithm == "fp") {
            throw ConfigError("a pair override needs a ProxConnect++ algorithm, not '" + c.algorithm + "'");
        }
        (void)make_pair(*c.pair);
    }
    if (c.pipeline != "end-to-end" && c.pipeline != "fine-tune") {
        throw ConfigError("pipeline must be end-to-end or fine-tune, got '" + c.pipeline + "'");
    }
    if (c.pipeline == "fine-tune" && c.checkpoint.empty()) throw ConfigError("fine-tune pipeline needs a checkpoint");
    if (c.epochs == 0) throw ConfigError("epochs must be positive");
    if (c.batch_size == 0 || c.eval_batch_size == 0) throw ConfigError("batch sizes must be positive");
    const std::string& k = c.data.kind;
    if (k != "blobs" && k != "idx" && k != "cifar10" && k != "cifar100") {
        throw ConfigError("unknown dataset kind '" + k + "'");
    }
    if (k == "blobs" && (c.data.blobs_classes < 2 || c.data.blobs_dim == 0 || c.data.blobs_train == 0)) {
        throw ConfigError("blobs dataset needs >= 2 classes, dim >= 1 and training samples");
    }
    if (k != "blobs" && (c.data.train_images.empty() || c.data.test_images.empty())) {
        throw ConfigError("dataset kind '" + k + "' needs train_images and test_images paths");
    }
    if (k == "idx" && (c.data.train_labels.empty() || c.data.test_labels.empty())) {
        throw ConfigError("idx datasets need train_labels and test_labels paths");
    }
    const std::string& p = c.model.preset;
    if (p != "mlp" && p != "cnn2" && p != "custom") throw ConfigError("unknown model preset '" + p + "'");
    if (p == "custom" && c.model.layers.empty()) throw ConfigError("custom model preset needs [[model.layers]]");
    if (c.model.input_mean.size() != c.model.input_std.size()) {
        throw ConfigError("model.input_mean and model.input_std differ in length");
    }
    for (double s : c.model.input_std)
        if (!(s > 0.0)) throw ConfigError("model.input_std entries must be positive");
    (void)parse_step_rule(c.schedule.step_rule);
    if (c.schedule.mu_rule) (void)parse_mu_rule(*c.schedule.mu_rule);
    if (!(c.schedule.eta > 0.0)) throw ConfigError("schedule.eta must be positive");
    if (c.schedule.momentum < 0.0 || c.schedule.momentum >= 1.0) throw ConfigError("schedule.momentum must be in [0, 1)");
    if (c.schedule.clip_norm && !(*c.schedule.clip_norm > 0.0)) throw ConfigError("schedule.clip_norm must be positive");
}

namespace {

toml::array to_array(const std::vector<std::size_t>& v) {
    toml::array a;
    for (std::size_t x : v) a.push_back(static_cast<std::int64_t>(x));
    return a;
}

toml::array to_array(const std::vector<double>& v) {
    toml::array a;
    for (double x : v) a.push_back(x);
    return a;
}

} // namespace

std::string echo_config(const ExperimentConfig& c) {
    std::vector<std::string> unset;
    auto note = [&unset](bool present, std::string_view key) {
        if (!present) unset.push_back(std::string(key));
    };

    toml::table root;
    root.insert("algorithm", c.algorithm);
    if (c.pair) root.insert("pair", *c.pair);
    note(c.pair.has_value(), "pair");
    root.insert("task_mode", c.task_mode);
    if (c.activations) root.insert("activations", *c.activations);
    note(c.activations.has_value(), "activations");
    root.insert("pipeline", c.pipeline);
    root.insert("checkpoint", c.checkpoint.string());
    root.insert("epochs", static_cast<std::int64_t>(c.epochs));
    root.insert("batch_size", static_cast<std::int64_t>(c.batch_size));
    root.insert("eval_batch_size", static_cast<std::int64_t>(c.eval_batch_size));
    root.insert("seed", static_cast<std::int64_t>(c.seed));
    root.insert("out", c.out.string());

    toml::table data;
    data.insert("kind", c.data.kind);
    data.insert("train_images", c.data.train_images.string());
    data.insert("train_labels", c.data.train_labels.string());
    data.insert("test_images", c.data.test_images.string());
    data.insert("test_labels", c.data.test_labels.string());
    data.insert("train_limit", static_cast<std::int64_t>(c.data.train_limit));
    data.insert("test_limit", static_cast<std::int64_t>(c.data.test_limit));
    data.insert("blobs_train", static_cast<std::int64_t>(c.data.blobs_train));
    data.insert("blobs_test", static_cast<std::int64_t>(c.data.blobs_test));
    data.insert("blobs_classes", static_cast<std::int64_t>(c.data.blobs_classes));
    data.insert("blobs_dim", static_cast<std::int64_t>(c.data.blobs_dim));
    data.insert("blobs_spread", c.data.blobs_spread);

    toml::table model;
    model.insert("preset", c.model.preset);
    model.insert("hidden", to_array(c.model.hidden));
    model.insert("width1", static_cast<std::int64_t>(c.model.width1));
    model.insert("width2", static_cast<std::int64_t>(c.model.width2));
    model.insert("keep_first_last_fp", c.model.keep_first_last_fp);
    model.insert("scale", c.model.scale);
    model.insert("input_mean", to_array(c.model.input_mean));
    model.insert("input_std", to_array(c.model.input_std));
    toml::array layers;
    for (const LayerSpec& l : c.model.layers) {
        toml::table t;
        t.insert("kind", to_string(l.kind));
        t.insert("in", static_cast<std::int64_t>(l.in));
        t.insert("out", static_cast<std::int64_t>(l.out));
        t.insert("kernel", static_cast<std::int64_t>(l.kernel));
        t.insert("stride", static_cast<std::int64_t>(l.stride));
        t.insert("padding", static_cast<std::int64_t>(l.padding));
        t.insert("window", static_cast<std::int64_t>(l.window));
        if (!l.name.empty()) t.insert("name", l.name);
        layers.push_back(std::move(t));
    }

    std::vector<std::string> sched_unset;
    toml::table sched;
    const ScheduleConfig& s = c.schedule;
    sched.insert("step_rule", s.step_rule);
    sched.insert("eta", s.eta);
    sched.insert("eta_min", s.eta_min);
    sched.insert("decay_epochs", static_cast<std::int64_t>(s.decay_epochs));
    sched.insert("decay_factor", s.decay_factor);
    sched.insert("momentum", s.momentum);
    sched.insert("mu_ramp", s.mu_ramp);
    auto opt = [&](std::string_view key, const auto& value) {
        if (value) {
            sched.insert(key, *value);
        } else {
            sched_unset.push_back(std::string(key));
        }
    };
    opt("clip_norm", s.clip_norm);
    opt("mu_rule", s.mu_rule);
    opt("mu0", s.mu0);
    opt("mu_end", s.mu_end);
    opt("rho0", s.rho0);
    opt("rho_end", s.rho_end);

    std::ostringstream os;
    os << root << '\n';
    for (const std::string& key : unset) os << "# " << key << " unset (algorithm default)\n";
    os << "\n[data]\n" << data << "\n\n[model]\n" << model << '\n';
    if (layers.empty()) {
        os << "# layers unset (preset)\n";
    } else {
        for (const toml::node& l : layers) os << "\n[[model.layers]]\n" << *l.as_table() << '\n';
    }
    os << "\n[schedule]\n" << sched << '\n';
    for (const std::string& key : sched_unset) os << "# " << key << " unset (algorithm default)\n";
    return os.str();
}

// ---------------------------------------------------------------------------
// Metrics

std::string metrics_header() {
    return "schema,phase,epoch,step,train_loss,train_acc,test_acc,mean_abs_w_star,fraction_binary,overflow_rate,mu,rho";
}

namespace {

std::string num(double v) {
    std::ostringstream os;
    os.precision(10);
    os << v;
    return os.str();
}

} // namespace

std::string format_metrics_row(const MetricsRow& r) {
    std::ostringstream os;
    os << metrics_schema_version << ',' << r.phase << ',' << r.epoch << ',' << r.step << ',' << num(r.train_loss) << ','
       << num(r.train_acc) << ',' << num(r.test_acc) << ',' << num(r.mean_abs_w_star) << ',' << num(r.fraction_binary)
       << ',' << num(r.overflow_rate) << ',' << num(r.mu) << ',' << num(r.rho);
    return os.str();
}

// ---------------------------------------------------------------------------
// Training

namespace {

struct Algorithm {
    bool quantizes = true;
    bool prox_rule = false;
    bool reverse = false;
    QuantizerPair pair = make_pair("fp");
    ProximalQuantizer prox = ProximalQuantizer::identity();
    QuantizerPair activation_pair = make_pair("fp");
    MuRule mu_rule = MuRule::fixed;
    Ramp mu;
    bool rho_enabled = false;
    Ramp rho{0.01, 10.0, 0};
};

Algorithm make_algorithm(const ExperimentConfig& c) {
    Algorithm a;
    const std::string& name = c.algorithm;
    const bool ramps_mu = name == "bnn++" || name == "poly+" || name == "ede" || name == "ede+";
    if (name == "fp") {
        a.quantizes = false;
    } else if (name == "pq" || name == "rpc") {
        a.prox_rule = true;
        a.reverse = name == "rpc";
        a.prox = ProximalQuantizer::linear(0.01);
        a.activation_pair = make_pair("pc");
        a.rho_enabled = true;
    } else {
        a.pair = make_pair(c.pair ? *c.pair : name);
        a.activation_pair = a.pair;
        a.rho_enabled = name == "pc";
        if (ramps_mu) {
            a.mu_rule = MuRule::linear;
            a.mu = Ramp{5.0, 30.0, 0};
        }
    }
    const ScheduleConfig& s = c.schedule;
    if (s.mu_rule) a.mu_rule = parse_mu_rule(*s.mu_rule);
    if (!s.mu_ramp) a.mu_rule = MuRule::fixed;
    if (s.mu0) a.mu.start = *s.mu0;
    if (s.mu_end) a.mu.end = *s.mu_end;
    if (s.rho0) a.rho.start = *s.rho0;
    if (s.rho_end) a.rho.end = *s.rho_end;
    if (a.rho_enabled && a.pair.name() == "pc") a.pair.params().rho = a.rho.start;
    return a;
}

struct Splits {
    Dataset train;
    Dataset test;
};

Splits load_data(const ExperimentConfig& c) {
    const DatasetConfig& d = c.data;
    Splits s;
    if (d.kind == "blobs") {
        const Dataset all = synthetic_blobs(d.blobs_train + d.blobs_test, d.blobs_classes, d.blobs_dim, c.seed, d.blobs_spread);
        s.train = slice(all, 0, d.blobs_train);
        s.test = slice(all, d.blobs_train, d.blobs_train + d.blobs_test);
    } else if (d.kind == "idx") {
        s.train = load_idx(d.train_images, d.train_labels);
        s.test = load_idx(d.test_images, d.test_labels);
        s.test.num_classes = s.train.num_classes = std::max(s.train.num_classes, s.test.num_classes);
    } else {
        const bool coarse = d.kind == "cifar100";
        s.train = load_cifar_bin(d.train_images, coarse);
        s.test = load_cifar_bin(d.test_images, coarse);
    }
    s.train.split = "train";
    s.test.split = "test";
    if (d.train_limit) s.train = slice(s.train, 0, d.train_limit);
    if (d.test_limit) s.test = slice(s.test, 0, d.test_limit);
    if (s.train.size() == 0) throw ConfigError("training split is empty");
    return s;
}

std::vector<LayerSpec> model_layers(const ExperimentConfig& c, const Dataset& train) {
    const Shape sample = train.sample_shape();
    if (c.model.preset == "mlp") return mlp_layers(shape_numel(sample), c.model.hidden, train.num_classes);
    if (c.model.preset == "cnn2") {
        if (sample.size() != 3 || sample[1] != sample[2] || sample[1] % 4 != 0) {
            throw ConfigError("cnn2 needs square inputs with a side divisible by 4, got " + shape_to_string(sample));
        }
        return cnn2_layers(sample[0], sample[1], train.num_classes, c.model.width1, c.model.width2);
    }
    return c.model.layers;
}

void standardize(Tensor& images, const ModelConfig& m) {
    if (m.input_mean.empty()) return;
    const std::size_t n = images.dim(0), ch = images.dim(1);
    const std::size_t inner = n * ch == 0 ? 0 : images.numel() / (n * ch);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t c = 0; c < ch; ++c) {
            const std::size_t k = m.input_mean.size() == 1 ? 0 : c;
            if (k >= m.input_mean.size()) throw ConfigError("model.input_mean has fewer entries than input channels");
            for (std::size_t s = 0; s < inner; ++s) {
                double& v = images[(i * ch + c) * inner + s];
                v = (v - m.input_mean[k]) / m.input_std[k];
            }
        }
}

std::size_t count_correct(const Tensor& logits, const std::vector<int>& labels) {
    const std::size_t n = logits.dim(0), k = logits.dim(1);
    std::size_t correct = 0;
    for (std::size_t i = 0; i < n; ++i) {
        const double* row = logits.data().data() + i * k;
        const auto best = static_cast<int>(std::max_element(row, row + k) - row);
        if (best == labels[i]) ++correct;
    }
    return correct;
}

class Runner {
public:
    explicit Runner(const ExperimentConfig& config)
        : c_(config), alg_(make_algorithm(config)), data_(load_data(config)),
          model_(build_model(model_layers(config, data_.train), model_options(config))) {
        model_.initialize(c_.seed);
        if (c_.pipeline == "fine-tune") load_initial(c_.checkpoint);
        setup_state();
    }

    RunResult run(const RunHooks& hooks);

private:
    static ModelOptions model_options(const ExperimentConfig& c) {
        ModelOptions o;
        o.task = TaskFlags::from_mode(parse_task_mode(c.task_mode));
        if (c.activations) o.task.activations = *c.activations;
        if (c.algorithm == "fp") o.task.weights = false;
        o.keep_first_last_fp = c.model.keep_first_last_fp;
        return o;
    }

    void load_initial(const std::filesystem::path& path) {
        std::map<std::string, Tensor> by_name;
        for (NamedTensor& t : load_checkpoint(path)) by_name[t.name] = std::move(t.value);
        for (Parameter& p : model_.parameters()) {
            const auto it = by_name.find(p.name);
            if (it == by_name.end()) throw ConfigError("checkpoint has no tensor '" + p.name + "'");
            if (it->second.shape() != p.value.shape()) {
                throw ConfigError("checkpoint tensor '" + p.name + "' has shape " + shape_to_string(it->second.shape()) +
                                  ", model expects " + shape_to_string(p.value.shape()));
            }
            p.value = it->second;
        }
        std::size_t k = 0;
        for (const LayerSpec& l : model_.layers()) {
            if (l.kind != LayerKind::norm) continue;
            BatchNormStats& s = model_.norm_stats()[k++];
            const auto m = by_name.find(l.name + ".running_mean");
            const auto v = by_name.find(l.name + ".running_var");
            if (m != by_name.end() && v != by_name.end()) {
                s.mean = m->second;
                s.var = v->second;
            }
        }
    }

    void setup_state() {
        for (const Parameter& p : model_.parameters()) {
            state_.layers.push_back(make_layer(p.name, p.value, p.binarized && alg_.quantizes, c_.model.scale));
        }
        batches_per_epoch_ = (data_.train.size() + c_.batch_size - 1) / c_.batch_size;
        total_steps_ = c_.epochs * batches_per_epoch_;
        Schedule& s = state_.schedule;
        s.eta.rule = parse_step_rule(c_.schedule.step_rule);
        s.eta.eta0 = c_.schedule.eta;
        s.eta.eta_min = c_.schedule.eta_min;
        s.eta.total = total_steps_;
        s.eta.decay_every = std::max<std::size_t>(1, c_.schedule.decay_epochs * batches_per_epoch_);
        s.eta.decay_factor = c_.schedule.decay_factor;
        s.mu_rule = alg_.mu_rule;
        s.mu_fixed = alg_.prox_rule ? 1.0 : alg_.pair.params().mu;
        if (alg_.mu_rule == MuRule::fixed && c_.schedule.mu0) s.mu_fixed = *c_.schedule.mu0;
        s.mu = alg_.mu;
        s.mu.total = total_steps_ - 1;
        s.rho_enabled = alg_.rho_enabled;
        s.rho = alg_.rho;
        s.rho.total = total_steps_ - 1;
        state_.momentum = c_.schedule.momentum;
        state_.clip_norm = c_.schedule.clip_norm;
        if (!state_.clip_norm && parse_task_mode(c_.task_mode) == TaskMode::BWAA) state_.clip_norm = 10.0;
        state_.mu = s.mu_rule == MuRule::linear ? s.mu.start : s.mu_fixed;
        state_.rho = s.rho_enabled ? s.rho.start : 0.0;
    }

    const QuantizerPair* activation_pair() {
        if (alg_.prox_rule) {
            alg_.activation_pair.params().rho = alg_.prox.rho();
        } else if (alg_.quantizes) {
            alg_.activation_pair.params() = alg_.pair.params();
        }
        return &alg_.activation_pair;
    }

    void step(const Batch& batch) {
        const GradFn grad = [&](const std::vector<Tensor>& weights) {
            Tape tape;
            std::vector<Var> vars;
            vars.reserve(weights.size());
            for (const Tensor& w : weights) vars.push_back(tape.leaf(w));
            const ForwardResult res = model_.forward(vars, tape.constant(batch.images), {activation_pair(), true});
            const Var loss = softmax_cross_entropy(res.logits, batch.labels);
            const double value = loss.value().item();
            if (!std::isfinite(value)) throw DivergenceError("non-finite training loss", state_.t);
            tape.backward(loss);
            epoch_loss_ += value * static_cast<double>(batch.labels.size());
            epoch_correct_ += count_correct(res.logits.value(), batch.labels);
            epoch_seen_ += batch.labels.size();
            for (const auto& [name, rate] : res.overflow) {
                overflow_sum_[name] += rate;
                ++overflow_count_[name];
            }
            std::vector<Tensor> grads;
            grads.reserve(vars.size());
            for (const Var& v : vars) grads.push_back(v.grad().empty() ? Tensor(v.shape(), 0.0) : v.grad());
            return grads;
        };
        if (alg_.prox_rule) {
            if (alg_.reverse) {
                rpc_step(state_, alg_.prox, grad);
            } else {
                pq_step(state_, alg_.prox, grad);
            }
        } else {
            pcpp_step(state_, alg_.pair, grad);
        }
    }

    std::vector<Tensor> current_weights() const {
        return alg_.prox_rule ? forward_weights(state_, alg_.prox) : forward_weights(state_, alg_.pair);
    }

    std::vector<Tensor> exported_weights() const {
        std::vector<Tensor> out;
        for (const LayerState& layer : state_.layers) {
            Tensor w = layer.w_star;
            if (layer.quantized) {
                const double s = layer.scaled ? mean_abs(layer.w_star) : 1.0;
                for (double& v : w.data()) v = s * sign_q(alg_.prox_rule ? alg_.prox(v) : alg_.pair.forward(v));
            }
            out.push_back(std::move(w));
        }
        return out;
    }

    double fraction_binary(const std::vector<Tensor>& weights) const {
        std::size_t total = 0, binary = 0;
        for (std::size_t i = 0; i < weights.size(); ++i) {
            const LayerState& layer = state_.layers[i];
            if (!layer.quantized) continue;
            const double s = layer.scaled ? mean_abs(layer.w_star) : 1.0;
            for (double v : weights[i].data()) {
                ++total;
                if (v == s || v == -s) ++binary;
            }
        }
        return total == 0 ? 0.0 : static_cast<double>(binary) / static_cast<double>(total);
    }

    double mean_abs_w_star() const {
        double acc = 0.0;
        std::size_t n = 0;
        for (const LayerState& layer : state_.layers) {
            if (!layer.quantized) continue;
            for (double v : layer.w_star.data()) acc += std::abs(v);
            n += layer.w_star.numel();
        }
        return n == 0 ? 0.0 : acc / static_cast<double>(n);
    }

    double evaluate(const std::vector<Tensor>& weights) {
        const Dataset& test = data_.test;
        if (test.size() == 0) return 0.0;
        std::size_t correct = 0;
        const QuantizerPair* act = activation_pair();
        for (std::size_t begin = 0; begin < test.size(); begin += c_.eval_batch_size) {
            const std::size_t end = std::min(test.size(), begin + c_.eval_batch_size);
            std::vector<std::size_t> idx(end - begin);
            for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = begin + i;
            Batch b = gather(test, idx);
            standardize(b.images, c_.model);
            Tape tape;
            std::vector<Var> vars;
            for (const Tensor& w : weights) vars.push_back(tape.constant(w));
            const ForwardResult res = model_.forward(vars, tape.constant(b.images), {act, false});
            correct += count_correct(res.logits.value(), b.labels);
        }
        return static_cast<double>(correct) / static_cast<double>(test.size());
    }

    void write_outputs(const RunResult& result, const std::vector<Tensor>& exported);

    const ExperimentConfig& c_;
    Algorithm alg_;
    Splits data_;
    Model model_;
    TrainerState state_;
    std::size_t batches_per_epoch_ = 0;
    std::size_t total_steps_ = 0;

    double epoch_loss_ = 0.0;
    std::size_t epoch_correct_ = 0;
    std::size_t epoch_seen_ = 0;
    std::map<std::string, double> overflow_sum_;
    std::map<std::string, std::size_t> overflow_count_;
};

void write_text(const std::filesystem::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("cannot write '" + path.string() + "'");
    out << text;
}

RunResult Runner::run(const RunHooks& hooks) {
    std::filesystem::create_directories(c_.out);
    write_text(c_.out / "config.toml", echo_config(c_));

    RunResult result;
    result.out = c_.out;
    std::ofstream metrics(c_.out / "metrics.csv", std::ios::binary | std::ios::trunc);
    std::ofstream timing(c_.out / "timing.csv", std::ios::binary | std::ios::trunc);
    if (!metrics || !timing) throw FormatError("cannot write metrics under '" + c_.out.string() + "'");
    metrics << metrics_header() << '\n';
    timing << "schema,epoch,wall_ms\n";

    auto emit = [&](const MetricsRow& row) {
        metrics << format_metrics_row(row) << '\n';
        metrics.flush();
        result.rows.push_back(row);
        if (hooks.on_row) hooks.on_row(row);
    };

    BatchIterator batches(data_.train, c_.batch_size, c_.seed ^ 0xB5AD4ECEDA1CE2A9ULL);
    MetricsRow last;
    try {
        for (std::size_t epoch = 1; epoch <= c_.epochs; ++epoch) {
            const auto start = std::chrono::steady_clock::now();
            epoch_loss_ = 0.0;
            epoch_correct_ = epoch_seen_ = 0;
            overflow_sum_.clear();
            overflow_count_.clear();
            if (epoch > 1) batches.start_epoch();
            Batch batch;
            while (batches.next(batch)) {
                standardize(batch.images, c_.model);
                step(batch);
            }
            const std::vector<Tensor> weights = current_weights();
            MetricsRow row;
            row.phase = "train";
            row.epoch = epoch;
            row.step = state_.t - 1;
            row.train_loss = epoch_loss_ / static_cast<double>(epoch_seen_);
            row.train_acc = static_cast<double>(epoch_correct_) / static_cast<double>(epoch_seen_);
            row.test_acc = evaluate(weights);
            row.mean_abs_w_star = mean_abs_w_star();
            row.fraction_binary = fraction_binary(weights);
            for (const auto& [name, sum] : overflow_sum_) {
                const double rate = sum / static_cast<double>(overflow_count_[name]);
                result.overflow.push_back({epoch, name, rate});
                row.overflow_rate = std::max(row.overflow_rate, rate);
            }
            row.mu = state_.mu;
            row.rho = state_.rho;
            emit(row);
            last = row;
            result.last_good_epoch = epoch;
            const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
            timing << metrics_schema_version << ',' << epoch << ',' << num(ms) << '\n';
        }
    } catch (const DivergenceError& e) {
        result.diverged = true;
        result.message = e.what();
    }

    std::vector<Tensor> exported;
    if (!result.diverged) {
        exported = exported_weights();
        MetricsRow row = last;
        row.phase = "export";
        row.test_acc = evaluate(exported);
        row.fraction_binary = fraction_binary(exported);
        emit(row);
        result.final_test_acc = row.test_acc;
    }
    write_outputs(result, exported);
    return result;
}

void Runner::write_outputs(const RunResult& result, const std::vector<Tensor>& exported) {
    if (!result.overflow.empty()) {
        std::ostringstream os;
        os << "schema,epoch,layer,overflow_rate\n";
        for (const LayerOverflow& o : result.overflow)
            os << metrics_schema_version << ',' << o.epoch << ',' << o.layer << ',' << num(o.rate) << '\n';
        write_text(c_.out / "overflow.csv", os.str());
    }

    std::vector<NamedTensor> ckpt;
    for (const LayerState& layer : state_.layers) ckpt.push_back({layer.name, layer.w_star});
    std::size_t k = 0;
    for (const LayerSpec& l : model_.layers()) {
        if (l.kind != LayerKind::norm) continue;
        const BatchNormStats& s = model_.norm_stats()[k++];
        ckpt.push_back({l.name + ".running_mean", s.mean});
        ckpt.push_back({l.name + ".running_var", s.var});
    }
    save_checkpoint(c_.out / "model.ckpt", ckpt);

    if (!result.diverged && alg_.quantizes) {
        std::vector<PackedLayer> packed;
        for (std::size_t i = 0; i < state_.layers.size(); ++i) {
            const LayerState& layer = state_.layers[i];
            if (!layer.quantized) continue;
            const double s = layer.scaled ? mean_abs(layer.w_star) : 1.0;
            packed.push_back({layer.name, pack_weights(exported[i], s)});
        }
        if (!packed.empty()) write_bqw(c_.out / "model.bqw", packed);
    }

    nlohmann::json status;
    status["status"] = result.diverged ? "diverged" : "ok";
    status["last_good_epoch"] = result.last_good_epoch;
    status["final_test_acc"] = result.final_test_acc;
    status["message"] = result.message;
    write_text(c_.out / "status.json", status.dump(2) + "\n");
}

} // namespace

RunResult run_experiment(const ExperimentConfig& config, const RunHooks& hooks) {
    validate_config(config);
    std::vector<std::filesystem::path> inputs;
    if (config.pipeline == "fine-tune") inputs.push_back(config.checkpoint);
    if (config.data.kind != "blobs") inputs.insert(inputs.end(), {config.data.train_images, config.data.test_images});
    if (config.data.kind == "idx") inputs.insert(inputs.end(), {config.data.train_labels, config.data.test_labels});
    for (const std::filesystem::path& p : inputs)
        if (!std::filesystem::exists(p)) throw ConfigError("input file '" + p.string() + "' does not exist");
    Runner runner(config);
    return runner.run(hooks);
}

} // namespace proxbin
