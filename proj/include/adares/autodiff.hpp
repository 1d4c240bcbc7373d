#pragma once

// Minimal reverse-mode differentiation over dense double tensors.
//
// A Tape owns every value produced while it records. Ops are free functions
// taking Var handles; each appends one node holding the forward value and a
// closure computing the vector-Jacobian product into its inputs' gradients.
// backward() walks the nodes once in reverse execution order, which is a
// valid reverse topological order because inputs always precede outputs.

#include <Eigen/Dense>

#include <cstdint>
#include <deque>
#include <functional>
#include <limits>
#include <memory>
#include <string>
#include <string_view>
#include <unordered_map>

#include "adares/tensor.hpp"

namespace adares {

/// A learnable tensor with its accumulated gradient.
struct Parameter {
    std::string name;
    Tensor value;
    Tensor grad;

    Parameter() = default;
    Parameter(std::string n, Tensor v) : name(std::move(n)), value(std::move(v)), grad(value.shape()) {}

    void zero_grad() { grad = Tensor(value.shape()); }
};

namespace testing {
/// Name of an op whose backward pass is deliberately scaled, for negative-control tests.
inline std::string& corrupted_op() {
    static std::string name;
    return name;
}
}  // namespace testing

class Tape;

/// Handle to a node on a Tape. Cheap to copy; valid while the tape lives and is not reset.
class Var {
public:
    Var() = default;
    Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

    bool valid() const noexcept { return tape_ != nullptr; }
    Tape* tape() const noexcept { return tape_; }
    std::size_t id() const noexcept { return id_; }

    const Tensor& value() const;
    const Shape& shape() const { return value().shape(); }
    std::size_t dim(std::size_t axis) const { return value().dim(axis); }
    bool requires_grad() const;
    /// Gradient accumulated by the last backward(); zeros if none reached this node.
    Tensor grad() const;

private:
    Tape* tape_ = nullptr;
    std::size_t id_ = 0;
};

using BackwardFn = std::function<void(Tape&, const Tensor&)>;

class Tape {
public:
    explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    bool grad_enabled() const noexcept { return grad_enabled_; }
    std::size_t size() const noexcept { return nodes_.size(); }

    Var constant(Tensor v) { return push("constant", std::move(v), false, nullptr, nullptr); }

    /// Leaf that requires grad but is not a registered parameter.
    Var variable(Tensor v) { return push("variable", std::move(v), grad_enabled_, nullptr, nullptr); }

    /// Leaf bound to a parameter; one node per parameter per tape so fan-out accumulates.
    Var param(Parameter& p) {
        if (auto it = param_nodes_.find(&p); it != param_nodes_.end()) return Var(this, it->second);
        Var v = push("parameter", p.value, grad_enabled_, nullptr, &p);
        param_nodes_.emplace(&p, v.id());
        return v;
    }

    /// Appends an op result. The backward closure is kept only if some input requires grad.
    Var record(std::string_view op, Tensor value, std::initializer_list<Var> inputs, BackwardFn fn) {
        bool needs = false;
        for (const Var& in : inputs) needs = needs || (in.valid() && in.requires_grad());
        return record_if(op, std::move(value), needs, std::move(fn));
    }

    Var record_if(std::string_view op, Tensor value, bool needs_grad, BackwardFn fn) {
        if (!value.all_finite()) {
            throw NumericError("non-finite output in op '" + std::string(op) + "'");
        }
        const bool rg = grad_enabled_ && needs_grad;
        return push(op, std::move(value), rg, rg ? std::move(fn) : nullptr, nullptr);
    }

    const Tensor& value(std::size_t id) const { return nodes_.at(id).value; }
    bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
    std::string_view op_name(std::size_t id) const { return nodes_.at(id).op; }

    /// Gradient buffer for an input, or nullptr when the input does not require grad.
    Tensor* grad_target(const Var& v) {
        if (!v.valid()) return nullptr;
        Node& n = nodes_.at(v.id());
        if (!n.requires_grad) return nullptr;
        if (n.grad.size() != n.value.size() || n.grad.shape() != n.value.shape()) n.grad = Tensor(n.value.shape());
        return &n.grad;
    }

    Tensor grad_of(std::size_t id) const {
        const Node& n = nodes_.at(id);
        if (n.grad.shape() == n.value.shape() && n.grad.size() == n.value.size()) return n.grad;
        return Tensor(n.value.shape());
    }

    void backward(const Var& loss) {
        if (loss.tape() != this) throw Error("backward: loss does not belong to this tape");
        if (backward_done_) throw Error("backward called twice without reset");
        if (loss.value().size() != 1) {
            throw ShapeError("backward: loss must be scalar, got shape " + to_string(loss.shape()));
        }
        backward_done_ = true;
        if (!nodes_[loss.id()].requires_grad) return;
        nodes_[loss.id()].grad = Tensor(loss.shape(), 1.0);
        const std::string& corrupt = testing::corrupted_op();
        for (std::size_t k = loss.id() + 1; k-- > 0;) {
            Node& n = nodes_[k];
            if (!n.requires_grad || n.grad.size() != n.value.size() || n.grad.shape() != n.value.shape()) continue;
            if (n.param) n.param->grad += n.grad;
            if (!n.backward) continue;
            if (!corrupt.empty() && n.op == corrupt) {
                Tensor g = n.grad;
                for (double& x : g.data()) x *= 1.5;
                n.backward(*this, g);
            } else {
                n.backward(*this, n.grad);
            }
        }
    }

    void reset() {
        nodes_.clear();
        param_nodes_.clear();
        backward_done_ = false;
    }

private:
    struct Node {
        std::string_view op;
        Tensor value;
        Tensor grad;
        bool requires_grad = false;
        BackwardFn backward;
        Parameter* param = nullptr;
    };

    Var push(std::string_view op, Tensor v, bool rg, BackwardFn fn, Parameter* p) {
        nodes_.push_back(Node{op, std::move(v), Tensor(), rg, std::move(fn), p});
        return Var(this, nodes_.size() - 1);
    }

    std::deque<Node> nodes_;
    std::unordered_map<Parameter*, std::size_t> param_nodes_;
    bool grad_enabled_ = true;
    bool backward_done_ = false;
};

inline const Tensor& Var::value() const { return tape_->value(id_); }
inline bool Var::requires_grad() const { return tape_->requires_grad(id_); }
inline Tensor Var::grad() const { return tape_->grad_of(id_); }

namespace ad {

namespace detail {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;

inline Tape& same_tape(const Var& a, const Var& b) {
    if (a.tape() != b.tape()) throw Error("operands live on different tapes");
    return *a.tape();
}

inline Shape broadcast_shape(const Shape& a, const Shape& b) {
    const std::size_t r = std::max(a.size(), b.size());
    Shape out(r);
    for (std::size_t i = 0; i < r; ++i) {
        const std::size_t da = i < r - a.size() ? 1 : a[i - (r - a.size())];
        const std::size_t db = i < r - b.size() ? 1 : b[i - (r - b.size())];
        if (da != db && da != 1 && db != 1) {
            throw ShapeError("cannot broadcast " + to_string(a) + " with " + to_string(b));
        }
        out[i] = std::max(da, db);
    }
    return out;
}

/// Per-output-dim strides of `in` under broadcasting to `out` (0 on broadcast dims).
inline std::vector<std::size_t> broadcast_strides(const Shape& in, const Shape& out) {
    const std::size_t r = out.size();
    std::vector<std::size_t> strides(r, 0);
    std::size_t stride = 1;
    for (std::size_t k = in.size(); k-- > 0;) {
        const std::size_t od = k + (r - in.size());
        strides[od] = in[k] == 1 ? 0 : stride;
        stride *= in[k];
    }
    return strides;
}

/// Calls f(o, ia, ib) for every output element o with the matching operand offsets.
template <typename F>
void for_each_broadcast(const Shape& out, const Shape& a, const Shape& b, F&& f) {
    const std::size_t n = numel(out);
    if (a == out && b == out) {
        for (std::size_t o = 0; o < n; ++o) f(o, o, o);
        return;
    }
    const auto sa = broadcast_strides(a, out);
    const auto sb = broadcast_strides(b, out);
    const std::size_t r = out.size();
    std::vector<std::size_t> idx(r, 0);
    std::size_t ia = 0, ib = 0;
    for (std::size_t o = 0; o < n; ++o) {
        f(o, ia, ib);
        for (std::size_t d = r; d-- > 0;) {
            ++idx[d];
            ia += sa[d];
            ib += sb[d];
            if (idx[d] < out[d]) break;
            ia -= sa[d] * out[d];
            ib -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

template <typename Fwd, typename Da, typename Db>
Var binary(std::string_view name, const Var& a, const Var& b, Fwd fwd, Da da, Db db) {
    Tape& tape = same_tape(a, b);
    const Shape out_shape = broadcast_shape(a.shape(), b.shape());
    Tensor out(out_shape);
    const double* pa = a.value().ptr();
    const double* pb = b.value().ptr();
    double* po = out.ptr();
    for_each_broadcast(out_shape, a.shape(), b.shape(),
                       [&](std::size_t o, std::size_t ia, std::size_t ib) { po[o] = fwd(pa[ia], pb[ib]); });
    return tape.record(name, std::move(out), {a, b}, [a, b, out_shape, da, db](Tape& t, const Tensor& g) {
        Tensor* ga = t.grad_target(a);
        Tensor* gb = t.grad_target(b);
        const double* xa = a.value().ptr();
        const double* xb = b.value().ptr();
        for_each_broadcast(out_shape, a.shape(), b.shape(), [&](std::size_t o, std::size_t ia, std::size_t ib) {
            if (ga) (*ga)[ia] += g[o] * da(xa[ia], xb[ib]);
            if (gb) (*gb)[ib] += g[o] * db(xa[ia], xb[ib]);
        });
    });
}

/// Elementwise op; `deriv(x, y)` gives dy/dx and is evaluated during the forward pass.
template <typename Fwd, typename Deriv>
Var unary(std::string_view name, const Var& x, Fwd fwd, Deriv deriv) {
    const Tensor& xv = x.value();
    Tensor out(xv.shape());
    for (std::size_t i = 0; i < xv.size(); ++i) out[i] = fwd(xv[i]);
    const bool needs = x.requires_grad() && x.tape()->grad_enabled();
    auto local = std::make_shared<std::vector<double>>();
    if (needs) {
        local->resize(xv.size());
        for (std::size_t i = 0; i < xv.size(); ++i) (*local)[i] = deriv(xv[i], out[i]);
    }
    return x.tape()->record(name, std::move(out), {x}, [x, local](Tape& t, const Tensor& g) {
        Tensor* gx = t.grad_target(x);
        if (!gx) return;
        for (std::size_t i = 0; i < g.size(); ++i) (*gx)[i] += g[i] * (*local)[i];
    });
}

/// Splits `shape` around `axis` into (outer, n, inner).
inline std::tuple<std::size_t, std::size_t, std::size_t> split_axis(const Shape& shape, std::size_t axis) {
    if (axis >= shape.size()) throw ShapeError("axis " + std::to_string(axis) + " out of range for " + to_string(shape));
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= shape[i];
    for (std::size_t i = axis + 1; i < shape.size(); ++i) inner *= shape[i];
    return {outer, shape[axis], inner};
}

}  // namespace detail

// ---- elementwise ---------------------------------------------------------

inline Var add(const Var& a, const Var& b) {
    return detail::binary(
        "add", a, b, [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
        [](double, double) { return 1.0; });
}

inline Var sub(const Var& a, const Var& b) {
    return detail::binary(
        "sub", a, b, [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
        [](double, double) { return -1.0; });
}

inline Var mul(const Var& a, const Var& b) {
    return detail::binary(
        "mul", a, b, [](double x, double y) { return x * y; }, [](double, double y) { return y; },
        [](double x, double) { return x; });
}

inline Var div(const Var& a, const Var& b) {
    return detail::binary(
        "div", a, b, [](double x, double y) { return x / y; }, [](double, double y) { return 1.0 / y; },
        [](double x, double y) { return -x / (y * y); });
}

inline Var add_scalar(const Var& x, double c) {
    return detail::unary("add_scalar", x, [c](double v) { return v + c; }, [](double, double) { return 1.0; });
}

inline Var mul_scalar(const Var& x, double c) {
    return detail::unary("mul_scalar", x, [c](double v) { return v * c; }, [c](double, double) { return c; });
}

inline Var sigmoid(const Var& x) {
    return detail::unary(
        "sigmoid", x,
        [](double v) {
            if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
            const double e = std::exp(v);
            return e / (1.0 + e);
        },
        [](double, double y) { return y * (1.0 - y); });
}

inline Var leaky_relu(const Var& x, double alpha = 0.01) {
    return detail::unary(
        "leaky_relu", x, [alpha](double v) { return v > 0 ? v : alpha * v; },
        [alpha](double v, double) { return v > 0 ? 1.0 : alpha; });
}

inline Var log(const Var& x) {
    return detail::unary("log", x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

inline Var exp(const Var& x) {
    return detail::unary("exp", x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

inline Var pow(const Var& x, double p) {
    return detail::unary(
        "pow", x, [p](double v) { return std::pow(v, p); },
        [p](double v, double) { return p * std::pow(v, p - 1.0); });
}

/// max(x, lo); gradient passes only where x > lo.
inline Var clamp_min(const Var& x, double lo) {
    return detail::unary(
        "clamp_min", x, [lo](double v) { return v > lo ? v : lo; },
        [lo](double v, double) { return v > lo ? 1.0 : 0.0; });
}

/// Elementwise max with a constant; same semantics as clamp_min.
inline Var maximum(const Var& x, double c) {
    return detail::unary(
        "maximum", x, [c](double v) { return v > c ? v : c; }, [c](double v, double) { return v > c ? 1.0 : 0.0; });
}

inline Var clamp(const Var& x, double lo, double hi) {
    return detail::unary(
        "clamp", x, [lo, hi](double v) { return std::min(std::max(v, lo), hi); },
        [lo, hi](double v, double) { return (v > lo && v < hi) ? 1.0 : 0.0; });
}

}  // namespace ad

inline Var operator+(const Var& a, const Var& b) { return ad::add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return ad::sub(a, b); }
inline Var operator*(const Var& a, const Var& b) { return ad::mul(a, b); }
inline Var operator/(const Var& a, const Var& b) { return ad::div(a, b); }
inline Var operator+(const Var& a, double c) { return ad::add_scalar(a, c); }
inline Var operator-(const Var& a, double c) { return ad::add_scalar(a, -c); }
inline Var operator*(const Var& a, double c) { return ad::mul_scalar(a, c); }
inline Var operator*(double c, const Var& a) { return ad::mul_scalar(a, c); }
inline Var operator/(const Var& a, double c) { return ad::mul_scalar(a, 1.0 / c); }
inline Var operator-(const Var& a) { return ad::mul_scalar(a, -1.0); }

namespace ad {

// ---- shape ---------------------------------------------------------------

inline Var reshape(const Var& x, Shape shape) {
    Tensor out = x.value().reshaped(std::move(shape));
    return x.tape()->record("reshape", std::move(out), {x}, [x](Tape& t, const Tensor& g) {
        if (Tensor* gx = t.grad_target(x)) {
            for (std::size_t i = 0; i < g.size(); ++i) (*gx)[i] += g[i];
        }
    });
}

/// Swaps the last two axes.
inline Var transpose(const Var& x) {
    const Shape& s = x.shape();
    if (s.size() < 2) throw ShapeError("transpose needs rank >= 2, got " + to_string(s));
    const std::size_t r = s.size();
    const std::size_t m = s[r - 2], n = s[r - 1];
    const std::size_t batch = numel(s) / (m * n);
    Shape os = s;
    std::swap(os[r - 2], os[r - 1]);
    Tensor out(os);
    const Tensor& xv = x.value();
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) out[b * m * n + j * m + i] = xv[b * m * n + i * n + j];
    return x.tape()->record("transpose", std::move(out), {x}, [x, batch, m, n](Tape& t, const Tensor& g) {
        Tensor* gx = t.grad_target(x);
        if (!gx) return;
        for (std::size_t b = 0; b < batch; ++b)
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j) (*gx)[b * m * n + i * n + j] += g[b * m * n + j * m + i];
    });
}

/// Half-open slice [begin, end) along `axis`.
inline Var slice(const Var& x, std::size_t axis, std::size_t begin, std::size_t end) {
    const auto [outer, n, inner] = detail::split_axis(x.shape(), axis);
    if (begin > end || end > n) {
        throw ShapeError("slice [" + std::to_string(begin) + "," + std::to_string(end) + ") out of range for axis of " +
                         std::to_string(n));
    }
    Shape os = x.shape();
    os[axis] = end - begin;
    Tensor out(os);
    const Tensor& xv = x.value();
    const std::size_t len = (end - begin) * inner;
    for (std::size_t o = 0; o < outer; ++o) {
        std::copy_n(xv.ptr() + (o * n + begin) * inner, len, out.ptr() + o * len);
    }
    return x.tape()->record(
        "slice", std::move(out), {x}, [x, outer = outer, n = n, inner = inner, begin, len](Tape& t, const Tensor& g) {
            Tensor* gx = t.grad_target(x);
            if (!gx) return;
            for (std::size_t o = 0; o < outer; ++o) {
                double* dst = gx->ptr() + (o * n + begin) * inner;
                const double* src = g.ptr() + o * len;
                for (std::size_t i = 0; i < len; ++i) dst[i] += src[i];
            }
        });
}

inline Var concat(const std::vector<Var>& parts, std::size_t axis) {
    if (parts.empty()) throw ShapeError("concat of zero tensors");
    Tape& tape = *parts.front().tape();
    Shape os = parts.front().shape();
    if (axis >= os.size()) throw ShapeError("concat axis out of range");
    std::size_t total = 0;
    bool needs = false;
    for (const Var& p : parts) {
        if (p.tape() != &tape) throw Error("concat operands live on different tapes");
        Shape s = p.shape();
        if (s.size() != os.size()) throw ShapeError("concat rank mismatch");
        for (std::size_t d = 0; d < s.size(); ++d) {
            if (d != axis && s[d] != os[d]) {
                throw ShapeError("concat shape mismatch " + to_string(s) + " vs " + to_string(os));
            }
        }
        total += s[axis];
        needs = needs || p.requires_grad();
    }
    os[axis] = total;
    const auto [outer, n_total, inner] = detail::split_axis(os, axis);
    Tensor out(os);
    std::size_t offset = 0;
    for (const Var& p : parts) {
        const std::size_t len = p.shape()[axis] * inner;
        for (std::size_t o = 0; o < outer; ++o) {
            std::copy_n(p.value().ptr() + o * len, len, out.ptr() + (o * n_total * inner) + offset * inner);
        }
        offset += p.shape()[axis];
    }
    return tape.record_if("concat", std::move(out), needs,
                          [parts, axis, outer = outer, n_total = n_total, inner = inner](Tape& t, const Tensor& g) {
                              std::size_t off = 0;
                              for (const Var& p : parts) {
                                  const std::size_t len = p.shape()[axis] * inner;
                                  if (Tensor* gp = t.grad_target(p)) {
                                      for (std::size_t o = 0; o < outer; ++o) {
                                          const double* src = g.ptr() + o * n_total * inner + off * inner;
                                          double* dst = gp->ptr() + o * len;
                                          for (std::size_t i = 0; i < len; ++i) dst[i] += src[i];
                                      }
                                  }
                                  off += p.shape()[axis];
                              }
                          });
}

// ---- reductions ----------------------------------------------------------

inline Var sum(const Var& x) {
    double acc = 0.0;
    for (double v : x.value().data()) acc += v;
    return x.tape()->record("sum", Tensor::scalar(acc), {x}, [x](Tape& t, const Tensor& g) {
        if (Tensor* gx = t.grad_target(x)) {
            for (double& v : gx->data()) v += g[0];
        }
    });
}

inline Var mean(const Var& x) {
    const double n = static_cast<double>(x.value().size());
    double acc = 0.0;
    for (double v : x.value().data()) acc += v;
    return x.tape()->record("mean", Tensor::scalar(acc / n), {x}, [x, n](Tape& t, const Tensor& g) {
        if (Tensor* gx = t.grad_target(x)) {
            for (double& v : gx->data()) v += g[0] / n;
        }
    });
}

/// Full max; the gradient goes to the first (lowest-index) maximiser.
inline Var max(const Var& x) {
    const Tensor& xv = x.value();
    if (xv.size() == 0) throw ShapeError("max of empty tensor");
    std::size_t best = 0;
    for (std::size_t i = 1; i < xv.size(); ++i)
        if (xv[i] > xv[best]) best = i;
    return x.tape()->record("max", Tensor::scalar(xv[best]), {x}, [x, best](Tape& t, const Tensor& g) {
        if (Tensor* gx = t.grad_target(x)) (*gx)[best] += g[0];
    });
}

namespace detail {
inline Shape reduced_shape(const Shape& s, std::size_t axis, bool keepdim) {
    Shape os = s;
    if (keepdim) {
        os[axis] = 1;
    } else {
        os.erase(os.begin() + static_cast<std::ptrdiff_t>(axis));
    }
    return os;
}
}  // namespace detail

inline Var sum_axis(const Var& x, std::size_t axis, bool keepdim = false) {
    const auto [outer, n, inner] = detail::split_axis(x.shape(), axis);
    Tensor out(detail::reduced_shape(x.shape(), axis, keepdim));
    const Tensor& xv = x.value();
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t k = 0; k < n; ++k)
            for (std::size_t i = 0; i < inner; ++i) out[o * inner + i] += xv[(o * n + k) * inner + i];
    return x.tape()->record("sum_axis", std::move(out), {x},
                            [x, outer = outer, n = n, inner = inner](Tape& t, const Tensor& g) {
                                Tensor* gx = t.grad_target(x);
                                if (!gx) return;
                                for (std::size_t o = 0; o < outer; ++o)
                                    for (std::size_t k = 0; k < n; ++k)
                                        for (std::size_t i = 0; i < inner; ++i)
                                            (*gx)[(o * n + k) * inner + i] += g[o * inner + i];
                            });
}

inline Var mean_axis(const Var& x, std::size_t axis, bool keepdim = false) {
    const double n = static_cast<double>(x.shape().at(axis));
    return mul_scalar(sum_axis(x, axis, keepdim), 1.0 / n);
}

/// Max along an axis; ties route the gradient to the lowest index.
inline Var max_axis(const Var& x, std::size_t axis, bool keepdim = false) {
    const auto [outer, n, inner] = detail::split_axis(x.shape(), axis);
    if (n == 0) throw ShapeError("max over empty axis");
    Tensor out(detail::reduced_shape(x.shape(), axis, keepdim));
    std::vector<std::size_t> arg(outer * inner);
    const Tensor& xv = x.value();
    for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t i = 0; i < inner; ++i) {
            std::size_t best = 0;
            double bv = xv[o * n * inner + i];
            for (std::size_t k = 1; k < n; ++k) {
                const double v = xv[(o * n + k) * inner + i];
                if (v > bv) {
                    bv = v;
                    best = k;
                }
            }
            out[o * inner + i] = bv;
            arg[o * inner + i] = (o * n + best) * inner + i;
        }
    }
    return x.tape()->record("max_axis", std::move(out), {x}, [x, arg = std::move(arg)](Tape& t, const Tensor& g) {
        Tensor* gx = t.grad_target(x);
        if (!gx) return;
        for (std::size_t k = 0; k < arg.size(); ++k) (*gx)[arg[k]] += g[k];
    });
}

inline Var cumsum(const Var& x, std::size_t axis) {
    const auto [outer, n, inner] = detail::split_axis(x.shape(), axis);
    Tensor out(x.shape());
    const Tensor& xv = x.value();
    for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t i = 0; i < inner; ++i) {
            double acc = 0.0;
            for (std::size_t k = 0; k < n; ++k) {
                const std::size_t idx = (o * n + k) * inner + i;
                acc += xv[idx];
                out[idx] = acc;
            }
        }
    }
    return x.tape()->record("cumsum", std::move(out), {x},
                            [x, outer = outer, n = n, inner = inner](Tape& t, const Tensor& g) {
                                Tensor* gx = t.grad_target(x);
                                if (!gx) return;
                                for (std::size_t o = 0; o < outer; ++o) {
                                    for (std::size_t i = 0; i < inner; ++i) {
                                        double acc = 0.0;
                                        for (std::size_t k = n; k-- > 0;) {
                                            const std::size_t idx = (o * n + k) * inner + i;
                                            acc += g[idx];
                                            (*gx)[idx] += acc;
                                        }
                                    }
                                }
                            });
}

// ---- linear algebra ------------------------------------------------------

/// Matrix product over the last two axes. Either operand may be rank 2 (shared) or rank 3 (batched).
inline Var matmul(const Var& a, const Var& b) {
    Tape& tape = detail::same_tape(a, b);
    const Shape& sa = a.shape();
    const Shape& sb = b.shape();
    if (sa.size() < 2 || sa.size() > 3 || sb.size() < 2 || sb.size() > 3) {
        throw ShapeError("matmul expects rank 2 or 3 operands, got " + to_string(sa) + " and " + to_string(sb));
    }
    const std::size_t ba = sa.size() == 3 ? sa[0] : 1;
    const std::size_t bb = sb.size() == 3 ? sb[0] : 1;
    const std::size_t m = sa[sa.size() - 2], k = sa.back();
    const std::size_t k2 = sb[sb.size() - 2], n = sb.back();
    if (k != k2 || (ba != bb && ba != 1 && bb != 1) || (sa.size() == 3 && sb.size() == 3 && ba != bb)) {
        throw ShapeError("matmul shape mismatch " + to_string(sa) + " x " + to_string(sb));
    }
    const std::size_t batch = std::max(ba, bb);
    const bool batched = sa.size() == 3 || sb.size() == 3;
    Tensor out(batched ? Shape{batch, m, n} : Shape{m, n});
    for (std::size_t p = 0; p < batch; ++p) {
        detail::CMapMat A(a.value().ptr() + (ba == 1 ? 0 : p * m * k), static_cast<Eigen::Index>(m),
                          static_cast<Eigen::Index>(k));
        detail::CMapMat B(b.value().ptr() + (bb == 1 ? 0 : p * k * n), static_cast<Eigen::Index>(k),
                          static_cast<Eigen::Index>(n));
        detail::MapMat C(out.ptr() + p * m * n, static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(n));
        C.noalias() = A * B;
    }
    return tape.record("matmul", std::move(out), {a, b}, [a, b, ba, bb, batch, m, k, n](Tape& t, const Tensor& g) {
        Tensor* ga = t.grad_target(a);
        Tensor* gb = t.grad_target(b);
        const auto M = static_cast<Eigen::Index>(m), K = static_cast<Eigen::Index>(k), N = static_cast<Eigen::Index>(n);
        for (std::size_t p = 0; p < batch; ++p) {
            detail::CMapMat G(g.ptr() + p * m * n, M, N);
            if (ga) {
                detail::CMapMat B(b.value().ptr() + (bb == 1 ? 0 : p * k * n), K, N);
                detail::MapMat GA(ga->ptr() + (ba == 1 ? 0 : p * m * k), M, K);
                GA.noalias() += G * B.transpose();
            }
            if (gb) {
                detail::CMapMat A(a.value().ptr() + (ba == 1 ? 0 : p * m * k), M, K);
                detail::MapMat GB(gb->ptr() + (bb == 1 ? 0 : p * k * n), K, N);
                GB.noalias() += A.transpose() * G;
            }
        }
    });
}

/// Stride-1 1-D convolution (cross-correlation) with zero padding keeping the length.
/// x: [B, I, T], weight: [O, I, K] with K odd, bias: [O] or an invalid Var.
inline Var conv1d_same(const Var& x, const Var& weight, const Var& bias = Var()) {
    Tape& tape = detail::same_tape(x, weight);
    const Shape& xs = x.shape();
    const Shape& ws = weight.shape();
    if (xs.size() != 3 || ws.size() != 3) {
        throw ShapeError("conv1d_same expects x [B,I,T] and weight [O,I,K], got " + to_string(xs) + " and " +
                         to_string(ws));
    }
    const std::size_t B = xs[0], I = xs[1], T = xs[2], O = ws[0], K = ws[2];
    if (ws[1] != I) {
        throw ShapeError("conv1d_same channel mismatch: input has " + std::to_string(I) + ", weight expects " +
                         std::to_string(ws[1]));
    }
    if (K % 2 == 0) throw ShapeError("conv1d_same needs an odd kernel size");
    if (bias.valid() && (bias.tape() != &tape || bias.shape() != Shape{O})) {
        throw ShapeError("conv1d_same bias must have shape [" + std::to_string(O) + "]");
    }
    const std::ptrdiff_t pad = static_cast<std::ptrdiff_t>(K / 2);

    // Per-tap weight slices [K][O x I], contiguous for the GEMMs.
    auto taps = std::make_shared<std::vector<double>>(K * O * I);
    const Tensor& wv = weight.value();
    for (std::size_t o = 0; o < O; ++o)
        for (std::size_t i = 0; i < I; ++i)
            for (std::size_t k = 0; k < K; ++k) (*taps)[(k * O + o) * I + i] = wv[(o * I + i) * K + k];

    // Output column range [t0, t1) that tap k touches, and its input offset.
    auto range = [T, pad](std::size_t k) {
        const std::ptrdiff_t shift = static_cast<std::ptrdiff_t>(k) - pad;
        const std::ptrdiff_t t0 = std::max<std::ptrdiff_t>(0, -shift);
        const std::ptrdiff_t t1 = std::min<std::ptrdiff_t>(static_cast<std::ptrdiff_t>(T), static_cast<std::ptrdiff_t>(T) - shift);
        return std::tuple{t0, t1, shift};
    };

    Tensor out(Shape{B, O, T});
    const auto Oi = static_cast<Eigen::Index>(O), Ii = static_cast<Eigen::Index>(I), Ti = static_cast<Eigen::Index>(T);
    for (std::size_t b = 0; b < B; ++b) {
        detail::CMapMat X(x.value().ptr() + b * I * T, Ii, Ti);
        detail::MapMat Y(out.ptr() + b * O * T, Oi, Ti);
        if (bias.valid()) {
            for (std::size_t o = 0; o < O; ++o) Y.row(static_cast<Eigen::Index>(o)).setConstant(bias.value()[o]);
        }
        for (std::size_t k = 0; k < K; ++k) {
            const auto [t0, t1, shift] = range(k);
            if (t1 <= t0) continue;
            detail::CMapMat Wk(taps->data() + k * O * I, Oi, Ii);
            Y.middleCols(t0, t1 - t0).noalias() += Wk * X.middleCols(t0 + shift, t1 - t0);
        }
    }
    const bool needs = x.requires_grad() || weight.requires_grad() || (bias.valid() && bias.requires_grad());
    return tape.record_if("conv1d_same", std::move(out), needs,
                          [x, weight, bias, taps, range, B, I, T, O, K](Tape& t, const Tensor& g) {
                              Tensor* gx = t.grad_target(x);
                              Tensor* gw = t.grad_target(weight);
                              Tensor* gbias = t.grad_target(bias);
                              const auto Oi = static_cast<Eigen::Index>(O), Ii = static_cast<Eigen::Index>(I),
                                         Ti = static_cast<Eigen::Index>(T);
                              std::vector<double> gtaps(gw ? K * O * I : 0, 0.0);
                              for (std::size_t b = 0; b < B; ++b) {
                                  detail::CMapMat G(g.ptr() + b * O * T, Oi, Ti);
                                  detail::CMapMat X(x.value().ptr() + b * I * T, Ii, Ti);
                                  if (gbias) {
                                      for (std::size_t o = 0; o < O; ++o)
                                          (*gbias)[o] += G.row(static_cast<Eigen::Index>(o)).sum();
                                  }
                                  for (std::size_t k = 0; k < K; ++k) {
                                      const auto [t0, t1, shift] = range(k);
                                      if (t1 <= t0) continue;
                                      detail::CMapMat Wk(taps->data() + k * O * I, Oi, Ii);
                                      if (gx) {
                                          detail::MapMat GX(gx->ptr() + b * I * T, Ii, Ti);
                                          GX.middleCols(t0 + shift, t1 - t0).noalias() +=
                                              Wk.transpose() * G.middleCols(t0, t1 - t0);
                                      }
                                      if (gw) {
                                          detail::MapMat GW(gtaps.data() + k * O * I, Oi, Ii);
                                          GW.noalias() += G.middleCols(t0, t1 - t0) *
                                                          X.middleCols(t0 + shift, t1 - t0).transpose();
                                      }
                                  }
                              }
                              if (gw) {
                                  for (std::size_t o = 0; o < O; ++o)
                                      for (std::size_t i = 0; i < I; ++i)
                                          for (std::size_t k = 0; k < K; ++k)
                                              (*gw)[(o * I + i) * K + k] += gtaps[(k * O + o) * I + i];
                              }
                          });
}

// ---- normalisation -------------------------------------------------------

/// Per-channel statistics of a training-mode batch-norm call.
struct BatchStats {
    std::vector<double> mean;
    std::vector<double> var;  // biased
    std::size_t count = 0;
};

namespace detail {
inline void check_bn_shapes(const Var& x, const Var& gamma, const Var& beta) {
    const Shape& s = x.shape();
    if (s.size() != 3) throw ShapeError("batchnorm1d expects [B,C,T], got " + to_string(s));
    if (gamma.shape() != Shape{s[1]} || beta.shape() != Shape{s[1]}) {
        throw ShapeError("batchnorm1d affine parameters must have shape [" + std::to_string(s[1]) + "]");
    }
}
}  // namespace detail

/// Training-mode batch norm over (B, T) per channel, followed by the affine map.
inline Var batchnorm_train(const Var& x, const Var& gamma, const Var& beta, double eps, BatchStats* stats = nullptr) {
    detail::check_bn_shapes(x, gamma, beta);
    const std::size_t B = x.dim(0), C = x.dim(1), T = x.dim(2);
    const double n = static_cast<double>(B * T);
    const Tensor& xv = x.value();
    std::vector<double> mu(C, 0.0), var(C, 0.0);
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t t = 0; t < T; ++t) mu[c] += xv[(b * C + c) * T + t];
    for (double& m : mu) m /= n;
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t t = 0; t < T; ++t) {
                const double d = xv[(b * C + c) * T + t] - mu[c];
                var[c] += d * d;
            }
    for (double& v : var) v /= n;
    auto inv_std = std::make_shared<std::vector<double>>(C);
    for (std::size_t c = 0; c < C; ++c) (*inv_std)[c] = 1.0 / std::sqrt(var[c] + eps);
    auto xhat = std::make_shared<Tensor>(x.shape());
    Tensor out(x.shape());
    const Tensor& gv = gamma.value();
    const Tensor& bv = beta.value();
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t t = 0; t < T; ++t) {
                const std::size_t idx = (b * C + c) * T + t;
                (*xhat)[idx] = (xv[idx] - mu[c]) * (*inv_std)[c];
                out[idx] = gv[c] * (*xhat)[idx] + bv[c];
            }
    if (stats) *stats = BatchStats{mu, var, B * T};
    return x.tape()->record_if(
        "batchnorm_train", std::move(out), x.requires_grad() || gamma.requires_grad() || beta.requires_grad(),
        [x, gamma, beta, xhat, inv_std, B, C, T, n](Tape& t, const Tensor& g) {
            Tensor* gx = t.grad_target(x);
            Tensor* gg = t.grad_target(gamma);
            Tensor* gb = t.grad_target(beta);
            std::vector<double> sum_g(C, 0.0), sum_gx(C, 0.0);
            for (std::size_t b = 0; b < B; ++b)
                for (std::size_t c = 0; c < C; ++c)
                    for (std::size_t tt = 0; tt < T; ++tt) {
                        const std::size_t idx = (b * C + c) * T + tt;
                        sum_g[c] += g[idx];
                        sum_gx[c] += g[idx] * (*xhat)[idx];
                    }
            if (gg)
                for (std::size_t c = 0; c < C; ++c) (*gg)[c] += sum_gx[c];
            if (gb)
                for (std::size_t c = 0; c < C; ++c) (*gb)[c] += sum_g[c];
            if (!gx) return;
            const Tensor& gv = gamma.value();
            for (std::size_t b = 0; b < B; ++b)
                for (std::size_t c = 0; c < C; ++c) {
                    const double scale = gv[c] * (*inv_std)[c];
                    const double mg = sum_g[c] / n, mgx = sum_gx[c] / n;
                    for (std::size_t tt = 0; tt < T; ++tt) {
                        const std::size_t idx = (b * C + c) * T + tt;
                        (*gx)[idx] += scale * (g[idx] - mg - (*xhat)[idx] * mgx);
                    }
                }
        });
}

/// Inference-mode batch norm with fixed running statistics.
inline Var batchnorm_eval(const Var& x, const Var& gamma, const Var& beta, const Tensor& running_mean,
                          const Tensor& running_var, double eps) {
    detail::check_bn_shapes(x, gamma, beta);
    const std::size_t B = x.dim(0), C = x.dim(1), T = x.dim(2);
    if (running_mean.size() != C || running_var.size() != C) throw ShapeError("batchnorm_eval running stats size");
    auto inv_std = std::make_shared<std::vector<double>>(C);
    for (std::size_t c = 0; c < C; ++c) (*inv_std)[c] = 1.0 / std::sqrt(running_var[c] + eps);
    auto xhat = std::make_shared<Tensor>(x.shape());
    Tensor out(x.shape());
    const Tensor& xv = x.value();
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t t = 0; t < T; ++t) {
                const std::size_t idx = (b * C + c) * T + t;
                (*xhat)[idx] = (xv[idx] - running_mean[c]) * (*inv_std)[c];
                out[idx] = gamma.value()[c] * (*xhat)[idx] + beta.value()[c];
            }
    return x.tape()->record_if(
        "batchnorm_eval", std::move(out), x.requires_grad() || gamma.requires_grad() || beta.requires_grad(),
        [x, gamma, beta, xhat, inv_std, B, C, T](Tape& t, const Tensor& g) {
            Tensor* gx = t.grad_target(x);
            Tensor* gg = t.grad_target(gamma);
            Tensor* gb = t.grad_target(beta);
            for (std::size_t b = 0; b < B; ++b)
                for (std::size_t c = 0; c < C; ++c)
                    for (std::size_t tt = 0; tt < T; ++tt) {
                        const std::size_t idx = (b * C + c) * T + tt;
                        if (gg) (*gg)[c] += g[idx] * (*xhat)[idx];
                        if (gb) (*gb)[c] += g[idx];
                        if (gx) (*gx)[idx] += g[idx] * gamma.value()[c] * (*inv_std)[c];
                    }
        });
}

// ---- warping -------------------------------------------------------------

/// out[b,f,i] = max over {tau : w[b,i,tau] > 0} of x[b,f,tau] * w[b,i,tau]; 0 for an empty row.
/// x: [B,F,T], w: [B,t,T]. Subgradient goes to the lowest-index maximiser.
inline Var warp_max(const Var& x, const Var& w) {
    Tape& tape = detail::same_tape(x, w);
    const Shape& xs = x.shape();
    const Shape& ws = w.shape();
    if (xs.size() != 3 || ws.size() != 3 || xs[0] != ws[0] || xs[2] != ws[2]) {
        throw ShapeError("warp_max expects x [B,F,T] and w [B,t,T], got " + to_string(xs) + " and " + to_string(ws));
    }
    const std::size_t B = xs[0], F = xs[1], T = xs[2], R = ws[1];
    constexpr std::size_t kNone = std::numeric_limits<std::size_t>::max();
    auto arg = std::make_shared<std::vector<std::size_t>>(B * F * R, kNone);
    Tensor out(Shape{B, F, R});
    const Tensor& xv = x.value();
    const Tensor& wv = w.value();
    std::vector<std::size_t> support;
    for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t i = 0; i < R; ++i) {
            support.clear();
            for (std::size_t tau = 0; tau < T; ++tau)
                if (wv[(b * R + i) * T + tau] > 0) support.push_back(tau);
            if (support.empty()) continue;
            for (std::size_t f = 0; f < F; ++f) {
                double best = -std::numeric_limits<double>::infinity();
                std::size_t where = kNone;
                for (std::size_t tau : support) {
                    const double v = xv[(b * F + f) * T + tau] * wv[(b * R + i) * T + tau];
                    if (v > best) {
                        best = v;
                        where = tau;
                    }
                }
                out[(b * F + f) * R + i] = best;
                (*arg)[(b * F + f) * R + i] = where;
            }
        }
    }
    return tape.record("warp_max", std::move(out), {x, w}, [x, w, arg, B, F, T, R](Tape& t, const Tensor& g) {
        Tensor* gx = t.grad_target(x);
        Tensor* gw = t.grad_target(w);
        const Tensor& xv = x.value();
        const Tensor& wv = w.value();
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t f = 0; f < F; ++f)
                for (std::size_t i = 0; i < R; ++i) {
                    const std::size_t o = (b * F + f) * R + i;
                    const std::size_t tau = (*arg)[o];
                    if (tau == kNone) continue;
                    if (gx) (*gx)[(b * F + f) * T + tau] += g[o] * wv[(b * R + i) * T + tau];
                    if (gw) (*gw)[(b * R + i) * T + tau] += g[o] * xv[(b * F + f) * T + tau];
                }
    });
}

}  // namespace ad
}  // namespace adares
