#pragma once

#include "proxbin/tensor.hpp"

#include <cstddef>
#include <functional>
#include <span>
#include <vector>

namespace proxbin {

using ScalarMap = std::function<double(double)>;

class Tape;

/// Handle to a node on a Tape. Cheap to copy; only valid while the tape lives.
class Var {
public:
    Var() = default;

    const Tensor& value() const;
    const Tensor& grad() const;
    const Shape& shape() const { return value().shape(); }
    std::size_t id() const noexcept { return id_; }
    Tape* tape() const noexcept { return tape_; }
    bool valid() const noexcept { return tape_ != nullptr; }

private:
    friend class Tape;
    Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

    Tape* tape_ = nullptr;
    std::size_t id_ = 0;
};

/// Forward map paired with the multiplier used in its place during backward.
///
/// The backward pass computes g * backward(x) at the original input x. The
/// analytic derivative of `forward` is never consulted, which is what lets a
/// quantizer such as sign carry a straight-through or surrogate gradient.
struct CustomGradSpec {
    ScalarMap forward;
    ScalarMap backward;
};

/// Reverse-mode tape. Nodes are appended in evaluation order, so the node list
/// is already a topological order and backward walks it once in reverse.
class Tape {
public:
    /// Receives the gradient flowing into the node and pushes contributions to
    /// its inputs through Tape::accumulate.
    using BackwardFn = std::function<void(Tape& tape, const Tensor& out_grad)>;

    Var leaf(Tensor value, bool requires_grad = true);
    Var constant(Tensor value) { return leaf(std::move(value), false); }

    /// Append an op node. The backward closure is dropped when no input needs a gradient.
    Var record(Tensor value, std::initializer_list<Var> inputs, BackwardFn backward);

    /// Seed d(output)/d(output) = 1 and propagate. `output` must hold one element.
    void backward(Var output);

    void accumulate(Var target, const Tensor& grad);
    bool requires_grad(Var v) const { return nodes_.at(v.id()).requires_grad; }

    const Tensor& value(std::size_t id) const { return nodes_.at(id).value; }
    /// Zero-shaped tensor until backward has reached the node.
    const Tensor& grad(std::size_t id) const { return nodes_.at(id).grad; }

    std::size_t size() const noexcept { return nodes_.size(); }
    void clear() { nodes_.clear(); }

private:
    struct Node {
        Tensor value;
        Tensor grad;
        BackwardFn backward;
        bool requires_grad = false;
    };

    std::vector<Node> nodes_;
};

// Differentiable ops. All inputs must live on the same tape.

Var matmul(Var a, Var b);
/// x[N,in] times weight[out,in] transposed.
Var linear(Var x, Var weight);
Var add(Var a, Var b);
/// x[N,F] + b[F], or x[N,C,H,W] + b[C] broadcast over the spatial dims.
Var add_bias(Var x, Var bias);
Var mul(Var a, Var b);
Var scale(Var x, double factor);
Var relu(Var x);
Var sum(Var x);
Var reshape(Var x, Shape shape);
/// [N, ...] -> [N, prod(...)]
Var flatten(Var x);

/// Cross-correlation of x[N,C,H,W] with k[O,C,kh,kw]. Output [N,O,OH,OW] with
/// OH = (H + 2*padding - kh) / stride + 1.
Var conv2d(Var x, Var kernel, std::size_t stride = 1, std::size_t padding = 0);
Var max_pool2d(Var x, std::size_t window = 2);

/// Mean over the batch of -log softmax(logits)[label]. Throws IndexError on a bad label.
Var softmax_cross_entropy(Var logits, std::span<const int> labels);

/// Elementwise `out_scale * spec.forward(x)`; backward multiplies by
/// `out_scale * spec.backward(x)` evaluated at the pre-quantization input.
Var apply_custom(Var x, const CustomGradSpec& spec, double out_scale = 1.0);

/// Running statistics of a batch-norm layer.
struct BatchNormStats {
    Tensor mean;
    Tensor var;
    double momentum = 0.1;
    double eps = 1e-5;
};

/// Per-feature (x[N,F]) or per-channel (x[N,C,H,W]) normalization with affine
/// gamma/beta. Uses batch statistics and updates `stats` when training.
Var batch_norm(Var x, Var gamma, Var beta, BatchNormStats& stats, bool training);

/// Largest per-coordinate |autodiff - central difference| / (|central difference| + eps)
/// for scalar-valued f at x. Central differences use step eps * (1 + |x_i|).
double grad_check(const std::function<Var(Tape&, Var)>& f, const Tensor& x, double eps = 1e-5);

} // namespace proxbin
