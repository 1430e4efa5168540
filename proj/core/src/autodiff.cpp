#include "proxbin/autodiff.hpp"

#include "gemm.hpp"
#include "proxbin/errors.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>

namespace proxbin {

const Tensor& Var::value() const { return tape_->value(id_); }
const Tensor& Var::grad() const { return tape_->grad(id_); }

Var Tape::leaf(Tensor value, bool requires_grad) {
    nodes_.push_back(Node{std::move(value), Tensor{}, nullptr, requires_grad});
    return Var(this, nodes_.size() - 1);
}

Var Tape::record(Tensor value, std::initializer_list<Var> inputs, BackwardFn backward) {
    bool needs = false;
    for (const Var& v : inputs) {
        if (v.tape() != this) throw DimensionError("op inputs live on a different tape");
        needs = needs || nodes_[v.id()].requires_grad;
    }
    nodes_.push_back(Node{std::move(value), Tensor{}, needs ? std::move(backward) : nullptr, needs});
    return Var(this, nodes_.size() - 1);
}

void Tape::accumulate(Var target, const Tensor& grad) {
    Node& node = nodes_.at(target.id());
    if (!node.requires_grad) return;
    if (grad.numel() != node.value.numel()) {
        throw DimensionError("gradient of shape " + shape_to_string(grad.shape()) + " for node of shape " +
                             shape_to_string(node.value.shape()));
    }
    if (node.grad.empty()) {
        node.grad = Tensor(node.value.shape(), std::vector<double>(grad.values()));
        return;
    }
    auto dst = node.grad.data();
    auto src = grad.data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

void Tape::backward(Var output) {
    if (output.tape() != this) throw DimensionError("backward on a foreign variable");
    if (output.value().numel() != 1) {
        throw DimensionError("backward needs a scalar output, got " + shape_to_string(output.shape()));
    }
    for (auto& node : nodes_) node.grad = Tensor{};
    accumulate(output, Tensor(output.shape(), 1.0));
    for (std::size_t i = output.id() + 1; i-- > 0;) {
        Node& node = nodes_[i];
        if (node.backward && !node.grad.empty()) node.backward(*this, node.grad);
    }
}

namespace {

void require_same_shape(const Var& a, const Var& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw DimensionError(std::string(op) + ": shapes " + shape_to_string(a.shape()) + " and " +
                             shape_to_string(b.shape()) + " differ");
    }
}

} // namespace

Var matmul(Var a, Var b) {
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    if (av.rank() != 2 || bv.rank() != 2 || av.dim(1) != bv.dim(0)) {
        throw DimensionError("matmul: cannot multiply " + shape_to_string(av.shape()) + " by " +
                             shape_to_string(bv.shape()));
    }
    const std::size_t m = av.dim(0), k = av.dim(1), n = bv.dim(1);
    Tensor out(Shape{m, n});
    detail::gemm_nn(m, k, n, av.data().data(), bv.data().data(), out.data().data());
    return a.tape()->record(std::move(out), {a, b}, [a, b, m, k, n](Tape& tape, const Tensor& g) {
        if (tape.requires_grad(a)) {
            Tensor ga(Shape{m, k});
            detail::gemm_nt(m, n, k, g.data().data(), b.value().data().data(), ga.data().data());
            tape.accumulate(a, ga);
        }
        if (tape.requires_grad(b)) {
            Tensor gb(Shape{k, n});
            detail::gemm_tn(k, m, n, a.value().data().data(), g.data().data(), gb.data().data());
            tape.accumulate(b, gb);
        }
    });
}

Var linear(Var x, Var weight) {
    const Tensor& xv = x.value();
    const Tensor& wv = weight.value();
    if (xv.rank() != 2 || wv.rank() != 2 || xv.dim(1) != wv.dim(1)) {
        throw DimensionError("linear: input " + shape_to_string(xv.shape()) + " incompatible with weight " +
                             shape_to_string(wv.shape()));
    }
    const std::size_t n = xv.dim(0), in = xv.dim(1), out_dim = wv.dim(0);
    Tensor out(Shape{n, out_dim});
    detail::gemm_nt(n, in, out_dim, xv.data().data(), wv.data().data(), out.data().data());
    return x.tape()->record(std::move(out), {x, weight}, [x, weight, n, in, out_dim](Tape& tape, const Tensor& g) {
        if (tape.requires_grad(x)) {
            Tensor gx(Shape{n, in});
            detail::gemm_nn(n, out_dim, in, g.data().data(), weight.value().data().data(), gx.data().data());
            tape.accumulate(x, gx);
        }
        if (tape.requires_grad(weight)) {
            Tensor gw(Shape{out_dim, in});
            detail::gemm_tn(out_dim, n, in, g.data().data(), x.value().data().data(), gw.data().data());
            tape.accumulate(weight, gw);
        }
    });
}

Var add(Var a, Var b) {
    require_same_shape(a, b, "add");
    Tensor out = a.value();
    auto o = out.data();
    auto bv = b.value().data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] += bv[i];
    return a.tape()->record(std::move(out), {a, b}, [a, b](Tape& tape, const Tensor& g) {
        tape.accumulate(a, g);
        tape.accumulate(b, g);
    });
}

Var add_bias(Var x, Var bias) {
    const Tensor& xv = x.value();
    const Tensor& bv = bias.value();
    if (xv.rank() < 2 || bv.numel() != xv.dim(1)) {
        throw DimensionError("add_bias: bias of " + std::to_string(bv.numel()) + " for input " +
                             shape_to_string(xv.shape()));
    }
    const std::size_t n = xv.dim(0), c = xv.dim(1), inner = xv.numel() / (n * c == 0 ? 1 : n * c);
    Tensor out = xv;
    auto o = out.data();
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < c; ++j)
            for (std::size_t s = 0; s < inner; ++s) o[(i * c + j) * inner + s] += bv[j];
    return x.tape()->record(std::move(out), {x, bias}, [x, bias, n, c, inner](Tape& tape, const Tensor& g) {
        tape.accumulate(x, g);
        if (tape.requires_grad(bias)) {
            Tensor gb(Shape{c});
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < c; ++j)
                    for (std::size_t s = 0; s < inner; ++s) gb[j] += g[(i * c + j) * inner + s];
            tape.accumulate(bias, gb);
        }
    });
}

Var mul(Var a, Var b) {
    require_same_shape(a, b, "mul");
    Tensor out = a.value();
    auto o = out.data();
    auto bv = b.value().data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] *= bv[i];
    return a.tape()->record(std::move(out), {a, b}, [a, b](Tape& tape, const Tensor& g) {
        if (tape.requires_grad(a)) {
            Tensor ga = g;
            for (std::size_t i = 0; i < ga.numel(); ++i) ga[i] *= b.value()[i];
            tape.accumulate(a, ga);
        }
        if (tape.requires_grad(b)) {
            Tensor gb = g;
            for (std::size_t i = 0; i < gb.numel(); ++i) gb[i] *= a.value()[i];
            tape.accumulate(b, gb);
        }
    });
}

Var scale(Var x, double factor) {
    Tensor out = x.value();
    for (double& v : out.data()) v *= factor;
    return x.tape()->record(std::move(out), {x}, [x, factor](Tape& tape, const Tensor& g) {
        Tensor gx = g;
        for (double& v : gx.data()) v *= factor;
        tape.accumulate(x, gx);
    });
}

Var relu(Var x) {
    Tensor out = x.value();
    for (double& v : out.data()) v = v > 0.0 ? v : 0.0;
    return x.tape()->record(std::move(out), {x}, [x](Tape& tape, const Tensor& g) {
        Tensor gx = g;
        for (std::size_t i = 0; i < gx.numel(); ++i)
            if (!(x.value()[i] > 0.0)) gx[i] = 0.0;
        tape.accumulate(x, gx);
    });
}

Var sum(Var x) {
    Tensor out = Tensor::scalar(sum(x.value()));
    return x.tape()->record(std::move(out), {x}, [x](Tape& tape, const Tensor& g) {
        tape.accumulate(x, Tensor(x.shape(), g.item()));
    });
}

Var reshape(Var x, Shape shape) {
    Tensor out = x.value().reshaped(std::move(shape));
    return x.tape()->record(std::move(out), {x}, [x](Tape& tape, const Tensor& g) {
        tape.accumulate(x, g.reshaped(x.shape()));
    });
}

Var flatten(Var x) {
    const std::size_t n = x.value().dim(0);
    return reshape(x, Shape{n, n == 0 ? 0 : x.value().numel() / n});
}

namespace {

struct ConvGeometry {
    std::size_t n, c, h, w, o, kh, kw, stride, pad, oh, ow;
    std::size_t patch() const { return c * kh * kw; }
    std::size_t positions() const { return oh * ow; }
};

void im2col(const ConvGeometry& g, const double* x, double* cols) {
    const std::size_t p = g.positions();
    for (std::size_t ch = 0; ch < g.c; ++ch)
        for (std::size_t i = 0; i < g.kh; ++i)
            for (std::size_t j = 0; j < g.kw; ++j) {
                double* row = cols + ((ch * g.kh + i) * g.kw + j) * p;
                for (std::size_t oy = 0; oy < g.oh; ++oy) {
                    const std::ptrdiff_t y = static_cast<std::ptrdiff_t>(oy * g.stride + i) -
                                             static_cast<std::ptrdiff_t>(g.pad);
                    for (std::size_t ox = 0; ox < g.ow; ++ox) {
                        const std::ptrdiff_t xx = static_cast<std::ptrdiff_t>(ox * g.stride + j) -
                                                  static_cast<std::ptrdiff_t>(g.pad);
                        const bool inside = y >= 0 && xx >= 0 && y < static_cast<std::ptrdiff_t>(g.h) &&
                                            xx < static_cast<std::ptrdiff_t>(g.w);
                        row[oy * g.ow + ox] =
                            inside ? x[(ch * g.h + static_cast<std::size_t>(y)) * g.w + static_cast<std::size_t>(xx)]
                                   : 0.0;
                    }
                }
            }
}

void col2im(const ConvGeometry& g, const double* cols, double* x) {
    const std::size_t p = g.positions();
    for (std::size_t ch = 0; ch < g.c; ++ch)
        for (std::size_t i = 0; i < g.kh; ++i)
            for (std::size_t j = 0; j < g.kw; ++j) {
                const double* row = cols + ((ch * g.kh + i) * g.kw + j) * p;
                for (std::size_t oy = 0; oy < g.oh; ++oy) {
                    const std::ptrdiff_t y = static_cast<std::ptrdiff_t>(oy * g.stride + i) -
                                             static_cast<std::ptrdiff_t>(g.pad);
                    if (y < 0 || y >= static_cast<std::ptrdiff_t>(g.h)) continue;
                    for (std::size_t ox = 0; ox < g.ow; ++ox) {
                        const std::ptrdiff_t xx = static_cast<std::ptrdiff_t>(ox * g.stride + j) -
                                                  static_cast<std::ptrdiff_t>(g.pad);
                        if (xx < 0 || xx >= static_cast<std::ptrdiff_t>(g.w)) continue;
                        x[(ch * g.h + static_cast<std::size_t>(y)) * g.w + static_cast<std::size_t>(xx)] +=
                            row[oy * g.ow + ox];
                    }
                }
            }
}

} // namespace

Var conv2d(Var x, Var kernel, std::size_t stride, std::size_t padding) {
    const Tensor& xv = x.value();
    const Tensor& kv = kernel.value();
    if (xv.rank() != 4 || kv.rank() != 4 || xv.dim(1) != kv.dim(1)) {
        throw DimensionError("conv2d: input " + shape_to_string(xv.shape()) + " incompatible with kernel " +
                             shape_to_string(kv.shape()));
    }
    if (stride == 0) throw DimensionError("conv2d: stride must be positive");
    ConvGeometry g{xv.dim(0), xv.dim(1), xv.dim(2), xv.dim(3), kv.dim(0), kv.dim(2), kv.dim(3), stride, padding, 0, 0};
    if (g.kh > g.h + 2 * padding || g.kw > g.w + 2 * padding) {
        throw DimensionError("conv2d: kernel " + shape_to_string(kv.shape()) + " larger than padded input " +
                             shape_to_string(xv.shape()));
    }
    g.oh = (g.h + 2 * padding - g.kh) / stride + 1;
    g.ow = (g.w + 2 * padding - g.kw) / stride + 1;

    const std::size_t patch = g.patch(), pos = g.positions();
    auto cols = std::make_shared<std::vector<double>>(g.n * patch * pos);
    Tensor out(Shape{g.n, g.o, g.oh, g.ow});
    for (std::size_t s = 0; s < g.n; ++s) {
        double* c = cols->data() + s * patch * pos;
        im2col(g, xv.data().data() + s * g.c * g.h * g.w, c);
        detail::gemm_nn(g.o, patch, pos, kv.data().data(), c, out.data().data() + s * g.o * pos);
    }
    return x.tape()->record(std::move(out), {x, kernel}, [x, kernel, g, cols](Tape& tape, const Tensor& grad) {
        const std::size_t patch = g.patch(), pos = g.positions();
        const bool need_x = tape.requires_grad(x);
        const bool need_k = tape.requires_grad(kernel);
        Tensor gk(kernel.shape());
        Tensor gx(x.shape());
        std::vector<double> gcols(need_x ? patch * pos : 0);
        for (std::size_t s = 0; s < g.n; ++s) {
            const double* go = grad.data().data() + s * g.o * pos;
            if (need_k) detail::gemm_nt(g.o, pos, patch, go, cols->data() + s * patch * pos, gk.data().data());
            if (need_x) {
                std::fill(gcols.begin(), gcols.end(), 0.0);
                detail::gemm_tn(patch, g.o, pos, kernel.value().data().data(), go, gcols.data());
                col2im(g, gcols.data(), gx.data().data() + s * g.c * g.h * g.w);
            }
        }
        if (need_k) tape.accumulate(kernel, gk);
        if (need_x) tape.accumulate(x, gx);
    });
}

Var max_pool2d(Var x, std::size_t window) {
    const Tensor& xv = x.value();
    if (xv.rank() != 4) throw DimensionError("max_pool2d expects [N,C,H,W], got " + shape_to_string(xv.shape()));
    if (window == 0 || xv.dim(2) < window || xv.dim(3) < window) {
        throw DimensionError("max_pool2d: window " + std::to_string(window) + " too large for " +
                             shape_to_string(xv.shape()));
    }
    const std::size_t n = xv.dim(0), c = xv.dim(1), h = xv.dim(2), w = xv.dim(3);
    const std::size_t oh = h / window, ow = w / window;
    Tensor out(Shape{n, c, oh, ow});
    auto argmax = std::make_shared<std::vector<std::size_t>>(out.numel());
    for (std::size_t plane = 0; plane < n * c; ++plane) {
        const double* src = xv.data().data() + plane * h * w;
        for (std::size_t oy = 0; oy < oh; ++oy)
            for (std::size_t ox = 0; ox < ow; ++ox) {
                std::size_t best = (oy * window) * w + ox * window;
                for (std::size_t i = 0; i < window; ++i)
                    for (std::size_t j = 0; j < window; ++j) {
                        const std::size_t idx = (oy * window + i) * w + ox * window + j;
                        if (src[idx] > src[best]) best = idx;
                    }
                const std::size_t o = (plane * oh + oy) * ow + ox;
                out[o] = src[best];
                (*argmax)[o] = plane * h * w + best;
            }
    }
    return x.tape()->record(std::move(out), {x}, [x, argmax](Tape& tape, const Tensor& g) {
        Tensor gx(x.shape());
        for (std::size_t o = 0; o < g.numel(); ++o) gx[(*argmax)[o]] += g[o];
        tape.accumulate(x, gx);
    });
}

Var softmax_cross_entropy(Var logits, std::span<const int> labels) {
    const Tensor& lv = logits.value();
    if (lv.rank() != 2 || lv.dim(0) != labels.size()) {
        throw DimensionError("softmax_cross_entropy: logits " + shape_to_string(lv.shape()) + " vs " +
                             std::to_string(labels.size()) + " labels");
    }
    const std::size_t n = lv.dim(0), c = lv.dim(1);
    for (std::size_t i = 0; i < n; ++i) {
        if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= c) {
            throw IndexError("label " + std::to_string(labels[i]) + " at row " + std::to_string(i) +
                             " outside [0, " + std::to_string(c) + ")");
        }
    }
    auto probs = std::make_shared<Tensor>(lv.shape());
    auto targets = std::make_shared<std::vector<int>>(labels.begin(), labels.end());
    double loss = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double* row = lv.data().data() + i * c;
        const double mx = *std::max_element(row, row + c);
        double z = 0.0;
        for (std::size_t j = 0; j < c; ++j) z += std::exp(row[j] - mx);
        const double log_z = mx + std::log(z);
        for (std::size_t j = 0; j < c; ++j) (*probs)[i * c + j] = std::exp(row[j] - log_z);
        loss += log_z - row[(*targets)[i]];
    }
    if (n > 0) loss /= static_cast<double>(n);
    return logits.tape()->record(Tensor::scalar(loss), {logits}, [logits, probs, targets, n, c](Tape& tape, const Tensor& g) {
        Tensor gl = *probs;
        const double factor = g.item() / static_cast<double>(n);
        for (std::size_t i = 0; i < n; ++i) gl[i * c + static_cast<std::size_t>((*targets)[i])] -= 1.0;
        for (double& v : gl.data()) v *= factor;
        tape.accumulate(logits, gl);
    });
}

Var apply_custom(Var x, const CustomGradSpec& spec, double out_scale) {
    Tensor out = x.value();
    for (double& v : out.data()) v = out_scale * spec.forward(v);
    return x.tape()->record(std::move(out), {x}, [x, backward = spec.backward, out_scale](Tape& tape, const Tensor& g) {
        Tensor gx = g;
        const Tensor& input = x.value();
        for (std::size_t i = 0; i < gx.numel(); ++i) gx[i] *= out_scale * backward(input[i]);
        tape.accumulate(x, gx);
    });
}

Var batch_norm(Var x, Var gamma, Var beta, BatchNormStats& stats, bool training) {
    const Tensor& xv = x.value();
    if (xv.rank() != 2 && xv.rank() != 4) {
        throw DimensionError("batch_norm expects [N,F] or [N,C,H,W], got " + shape_to_string(xv.shape()));
    }
    const std::size_t n = xv.dim(0), c = xv.dim(1), inner = xv.rank() == 4 ? xv.dim(2) * xv.dim(3) : 1;
    if (gamma.value().numel() != c || beta.value().numel() != c) {
        throw DimensionError("batch_norm: affine parameters do not match " + std::to_string(c) + " channels");
    }
    if (stats.mean.numel() != c) {
        stats.mean = Tensor(Shape{c}, 0.0);
        stats.var = Tensor(Shape{c}, 1.0);
    }
    const std::size_t count = n * inner;
    auto idx = [c, inner](std::size_t i, std::size_t ch, std::size_t s) { return (i * c + ch) * inner + s; };

    std::vector<double> mean(c), inv_std(c);
    if (training) {
        if (count < 2) throw DimensionError("batch_norm in training mode needs at least two values per channel");
        for (std::size_t ch = 0; ch < c; ++ch) {
            double m = 0.0;
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t s = 0; s < inner; ++s) m += xv[idx(i, ch, s)];
            m /= static_cast<double>(count);
            double v = 0.0;
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t s = 0; s < inner; ++s) {
                    const double d = xv[idx(i, ch, s)] - m;
                    v += d * d;
                }
            v /= static_cast<double>(count);
            mean[ch] = m;
            inv_std[ch] = 1.0 / std::sqrt(v + stats.eps);
            const double unbiased = v * static_cast<double>(count) / static_cast<double>(count - 1);
            stats.mean[ch] = (1.0 - stats.momentum) * stats.mean[ch] + stats.momentum * m;
            stats.var[ch] = (1.0 - stats.momentum) * stats.var[ch] + stats.momentum * unbiased;
        }
    } else {
        for (std::size_t ch = 0; ch < c; ++ch) {
            mean[ch] = stats.mean[ch];
            inv_std[ch] = 1.0 / std::sqrt(stats.var[ch] + stats.eps);
        }
    }

    auto normalized = std::make_shared<Tensor>(xv.shape());
    Tensor out(xv.shape());
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t ch = 0; ch < c; ++ch)
            for (std::size_t s = 0; s < inner; ++s) {
                const std::size_t k = idx(i, ch, s);
                (*normalized)[k] = (xv[k] - mean[ch]) * inv_std[ch];
                out[k] = gamma.value()[ch] * (*normalized)[k] + beta.value()[ch];
            }

    return x.tape()->record(
        std::move(out), {x, gamma, beta},
        [x, gamma, beta, normalized, inv_std, n, c, inner, training, idx](Tape& tape, const Tensor& g) {
            const std::size_t count = n * inner;
            std::vector<double> sum_g(c, 0.0), sum_gx(c, 0.0);
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t ch = 0; ch < c; ++ch)
                    for (std::size_t s = 0; s < inner; ++s) {
                        const std::size_t k = idx(i, ch, s);
                        sum_g[ch] += g[k];
                        sum_gx[ch] += g[k] * (*normalized)[k];
                    }
            if (tape.requires_grad(gamma)) tape.accumulate(gamma, Tensor(Shape{c}, sum_gx));
            if (tape.requires_grad(beta)) tape.accumulate(beta, Tensor(Shape{c}, sum_g));
            if (!tape.requires_grad(x)) return;
            Tensor gx(x.shape());
            const double m = static_cast<double>(count);
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t ch = 0; ch < c; ++ch) {
                    const double scale_ch = gamma.value()[ch] * inv_std[ch];
                    for (std::size_t s = 0; s < inner; ++s) {
                        const std::size_t k = idx(i, ch, s);
                        gx[k] = training ? scale_ch / m * (m * g[k] - sum_g[ch] - (*normalized)[k] * sum_gx[ch])
                                         : scale_ch * g[k];
                    }
                }
            tape.accumulate(x, gx);
        });
}

double grad_check(const std::function<Var(Tape&, Var)>& f, const Tensor& x, double eps) {
    Tape tape;
    Var input = tape.leaf(x);
    Var out = f(tape, input);
    tape.backward(out);
    Tensor analytic = input.grad().empty() ? Tensor(x.shape(), 0.0) : input.grad();

    auto evaluate = [&f](const Tensor& at) {
        Tape t;
        return f(t, t.constant(at)).value().item();
    };

    double worst = 0.0;
    Tensor probe = x;
    for (std::size_t i = 0; i < x.numel(); ++i) {
        const double h = eps * (1.0 + std::abs(x[i]));
        probe[i] = x[i] + h;
        const double up = evaluate(probe);
        probe[i] = x[i] - h;
        const double down = evaluate(probe);
        probe[i] = x[i];
        const double central = (up - down) / (2.0 * h);
        worst = std::max(worst, std::abs(analytic[i] - central) / (std::abs(central) + eps));
    }
    return worst;
}

} // namespace proxbin
