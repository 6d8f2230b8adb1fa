#pragma once

// Reverse-mode automatic differentiation over small dense tensors.
//
// A Tape records every primitive in execution order together with a closure
// that maps the output gradient onto input gradients. Calling backward() on a
// scalar walks the tape once in reverse. Values are immutable once recorded.
//
// Storage is T (float in production); reductions accumulate in double.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <limits>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace cia::ad {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << ']';
    return os.str();
}

class ShapeError : public std::invalid_argument {
  public:
    using std::invalid_argument::invalid_argument;
};

namespace detail {
[[noreturn]] inline void shape_fail(std::string_view op, const Shape& a, const Shape& b) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}
[[noreturn]] inline void shape_fail(std::string_view op, const Shape& a, std::string_view why) {
    throw ShapeError(std::string(op) + ": invalid shape " + shape_str(a) + " (" + std::string(why) + ")");
}
}  // namespace detail

template <class T = float>
class Tensor {
  public:
    using value_type = T;

    Tensor() = default;

    Tensor(Shape shape, std::vector<T> values) : shape_(std::move(shape)), values_(std::move(values)) {
        for (auto s : shape_)
            if (s == 0) throw ShapeError("tensor: zero-sized axis in " + shape_str(shape_));
        if (numel(shape_) != values_.size())
            throw ShapeError("tensor: shape " + shape_str(shape_) + " holds " +
                             std::to_string(numel(shape_)) + " values, got " +
                             std::to_string(values_.size()));
    }

    static Tensor full(Shape shape, T v) {
        auto n = numel(shape);
        return Tensor(std::move(shape), std::vector<T>(n, v));
    }
    static Tensor zeros(Shape shape) { return full(std::move(shape), T(0)); }
    static Tensor scalar(T v) { return Tensor({1}, {v}); }

    const Shape& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t size() const { return values_.size(); }
    bool empty() const { return values_.empty(); }
    bool is_scalar() const { return values_.size() == 1; }

    std::size_t rows() const { return shape_.empty() ? 0 : shape_.front(); }
    std::size_t cols() const { return shape_.empty() ? 0 : size() / shape_.front(); }

    std::span<const T> values() const { return values_; }
    std::span<T> values() { return values_; }
    const std::vector<T>& data() const { return values_; }

    T operator[](std::size_t i) const { return values_[i]; }
    T& operator[](std::size_t i) { return values_[i]; }
    T at(std::size_t r, std::size_t c) const { return values_[r * cols() + c]; }
    T& at(std::size_t r, std::size_t c) { return values_[r * cols() + c]; }

    T item() const {
        if (!is_scalar()) throw ShapeError("item: tensor is not scalar, shape " + shape_str(shape_));
        return values_.front();
    }

    template <class U>
    Tensor<U> cast() const {
        return Tensor<U>(shape_, std::vector<U>(values_.begin(), values_.end()));
    }

    friend bool operator==(const Tensor&, const Tensor&) = default;

  private:
    Shape shape_;
    std::vector<T> values_;
};

template <class T>
class Tape;

template <class T>
struct Var {
    const Tape<T>* tape = nullptr;
    std::size_t id = 0;

    const Tensor<T>& value() const { return tape->value(*this); }
    const Shape& shape() const { return value().shape(); }
};

template <class T>
class Gradients {
  public:
    Gradients(const Tape<T>* tape, std::vector<Tensor<T>> grads) : tape_(tape), grads_(std::move(grads)) {}

    /// Gradient of the root w.r.t. `v`; zeros when no path connects them.
    Tensor<T> wrt(Var<T> v) const {
        if (v.tape != tape_) throw std::invalid_argument("gradients: variable belongs to a different tape");
        const auto& g = grads_.at(v.id);
        if (g.empty()) return Tensor<T>::zeros(tape_->value(v).shape());
        return g;
    }

  private:
    const Tape<T>* tape_;
    std::vector<Tensor<T>> grads_;
};

/// Hands backward closures writable gradient buffers for their inputs.
template <class T>
class GradSink {
  public:
    GradSink(const Tape<T>& tape, std::vector<Tensor<T>>& grads) : tape_(tape), grads_(grads) {}

    bool wants(std::size_t id) const { return tape_.requires_grad(id); }

    std::span<T> operator[](std::size_t id) {
        auto& g = grads_[id];
        if (g.empty()) g = Tensor<T>::zeros(tape_.value_at(id).shape());
        return g.values();
    }

  private:
    const Tape<T>& tape_;
    std::vector<Tensor<T>>& grads_;
};

template <class T = float>
class Tape {
  public:
    using BackwardFn = std::function<void(const Tensor<T>& grad_out, const Tensor<T>& out, GradSink<T>& sink)>;

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    /// Differentiable input.
    Var<T> leaf(Tensor<T> value) { return push("leaf", std::move(value), true, {}); }
    /// Non-differentiable input (frozen weights, masks).
    Var<T> constant(Tensor<T> value) { return push("constant", std::move(value), false, {}); }

    Var<T> record(std::string_view op, Tensor<T> value, std::vector<std::size_t> inputs, BackwardFn fn) {
        for (std::size_t in : inputs)
            if (in >= nodes_.size()) throw std::logic_error(std::string(op) + ": input not on tape");
        bool rg = std::any_of(inputs.begin(), inputs.end(), [&](std::size_t i) { return nodes_[i].requires_grad; });
        auto v = push(op, std::move(value), rg, std::move(inputs));
        if (rg) nodes_.back().backward = std::move(fn);
        return v;
    }

    void check_owned(Var<T> v, std::string_view op) const {
        if (v.tape != this || v.id >= nodes_.size())
            throw std::invalid_argument(std::string(op) + ": variable is not on this tape");
    }

    const Tensor<T>& value(Var<T> v) const {
        check_owned(v, "value");
        return nodes_[v.id].value;
    }
    const Tensor<T>& value_at(std::size_t id) const { return nodes_[id].value; }
    bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
    std::string_view op_name(std::size_t id) const { return nodes_[id].op; }
    const std::vector<std::size_t>& inputs_of(std::size_t id) const { return nodes_[id].inputs; }
    std::size_t size() const { return nodes_.size(); }

    /// Reverse sweep from a scalar root. Can be called repeatedly; each call
    /// starts from fresh buffers and yields identical results.
    Gradients<T> backward(Var<T> root) const {
        if (root.tape != this || root.id >= nodes_.size())
            throw std::invalid_argument("backward: root is not on this tape");
        const auto& rv = nodes_[root.id].value;
        if (!rv.is_scalar())
            throw std::invalid_argument("backward: root must be scalar, got shape " + shape_str(rv.shape()));

        std::vector<Tensor<T>> grads(nodes_.size());
        grads[root.id] = Tensor<T>::full(rv.shape(), T(1));
        GradSink<T> sink(*this, grads);
        for (std::size_t i = root.id + 1; i-- > 0;) {
            const auto& node = nodes_[i];
            if (!node.requires_grad || !node.backward || grads[i].empty()) continue;
            node.backward(grads[i], node.value, sink);
        }
        return Gradients<T>(this, std::move(grads));
    }

  private:
    struct Node {
        std::string_view op;
        Tensor<T> value;
        std::vector<std::size_t> inputs;
        bool requires_grad = false;
        BackwardFn backward;
    };

    Var<T> push(std::string_view op, Tensor<T> value, bool requires_grad, std::vector<std::size_t> inputs) {
        nodes_.push_back(Node{op, std::move(value), std::move(inputs), requires_grad, {}});
        return Var<T>{this, nodes_.size() - 1};
    }

    std::vector<Node> nodes_;
};

namespace detail {
template <class T>
Tape<T>& tape_of(Var<T> v, std::string_view op) {
    if (v.tape == nullptr) throw std::invalid_argument(std::string(op) + ": null variable");
    return const_cast<Tape<T>&>(*v.tape);
}
template <class T>
Tape<T>& tape_of(Var<T> a, Var<T> b, std::string_view op) {
    if (a.tape != b.tape) throw std::invalid_argument(std::string(op) + ": operands live on different tapes");
    return tape_of(a, op);
}
}  // namespace detail

// ---------------------------------------------------------------------------
// Primitives
// ---------------------------------------------------------------------------

template <class T>
Var<T> add(Var<T> a, Var<T> b) {
    auto& tape = detail::tape_of(a, b, "add");
    const auto& x = a.value();
    const auto& y = b.value();
    if (x.shape() != y.shape()) detail::shape_fail("add", x.shape(), y.shape());
    std::vector<T> out(x.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + y[i];
    return tape.record("add", Tensor<T>(x.shape(), std::move(out)), {a.id, b.id},
                       [ia = a.id, ib = b.id](const Tensor<T>& g, const Tensor<T>&, GradSink<T>& sink) {
                           for (auto id : {ia, ib}) {
                               if (!sink.wants(id)) continue;
                               auto d = sink[id];
                               for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[i];
                           }
                       });
}

template <class T>
Var<T> mul(Var<T> a, Var<T> b) {
    auto& tape = detail::tape_of(a, b, "mul");
    const auto& x = a.value();
    const auto& y = b.value();
    if (x.shape() != y.shape()) detail::shape_fail("mul", x.shape(), y.shape());
    std::vector<T> out(x.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * y[i];
    return tape.record("mul", Tensor<T>(x.shape(), std::move(out)), {a.id, b.id},
                       [a, b](const Tensor<T>& g, const Tensor<T>&, GradSink<T>& sink) {
                           const auto& x = a.value();
                           const auto& y = b.value();
                           if (sink.wants(a.id)) {
                               auto d = sink[a.id];
                               for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[i] * y[i];
                           }
                           if (sink.wants(b.id)) {
                               auto d = sink[b.id];
                               for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[i] * x[i];
                           }
                       });
}

/// y = c * a.
template <class T>
Var<T> scale(Var<T> a, double c) {
    auto& tape = detail::tape_of(a, "scale");
    const auto& x = a.value();
    std::vector<T> out(x.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<T>(c * x[i]);
    return tape.record("scale", Tensor<T>(x.shape(), std::move(out)), {a.id},
                       [ia = a.id, c](const Tensor<T>& g, const Tensor<T>&, GradSink<T>& sink) {
                           auto d = sink[ia];
                           for (std::size_t i = 0; i < d.size(); ++i) d[i] += static_cast<T>(c * g[i]);
                       });
}

namespace detail {
// C(m×n) += A(m×k) · B(k×n), with optional transposes, double accumulation.
template <class T>
void gemm_acc(std::span<T> c, std::span<const T> a, std::span<const T> b, std::size_t m, std::size_t k,
              std::size_t n, bool trans_a, bool trans_b) {
    std::vector<double> acc(n);
    for (std::size_t i = 0; i < m; ++i) {
        std::fill(acc.begin(), acc.end(), 0.0);
        for (std::size_t p = 0; p < k; ++p) {
            const double av = trans_a ? a[p * m + i] : a[i * k + p];
            if (av == 0.0) continue;
            if (trans_b) {
                for (std::size_t j = 0; j < n; ++j) acc[j] += av * b[j * k + p];
            } else {
                const T* brow = b.data() + p * n;
                for (std::size_t j = 0; j < n; ++j) acc[j] += av * brow[j];
            }
        }
        for (std::size_t j = 0; j < n; ++j) c[i * n + j] += static_cast<T>(acc[j]);
    }
}
}  // namespace detail

template <class T>
Var<T> matmul(Var<T> a, Var<T> b) {
    auto& tape = detail::tape_of(a, b, "matmul");
    const auto& x = a.value();
    const auto& y = b.value();
    if (x.rank() != 2 || y.rank() != 2 || x.shape()[1] != y.shape()[0])
        detail::shape_fail("matmul", x.shape(), y.shape());
    const std::size_t m = x.shape()[0], k = x.shape()[1], n = y.shape()[1];
    auto out = Tensor<T>::zeros({m, n});
    detail::gemm_acc<T>(out.values(), x.values(), y.values(), m, k, n, false, false);
    return tape.record("matmul", std::move(out), {a.id, b.id}, [a, b, m, k, n](const Tensor<T>& g, const Tensor<T>&, GradSink<T>& sink) {
        if (sink.wants(a.id))  // dA = G · Bᵀ
            detail::gemm_acc<T>(sink[a.id], g.values(), b.value().values(), m, n, k, false, true);
        if (sink.wants(b.id))  // dB = Aᵀ · G
            detail::gemm_acc<T>(sink[b.id], a.value().values(), g.values(), k, m, n, true, false);
    });
}

template <class T>
Var<T> log(Var<T> a) {
    auto& tape = detail::tape_of(a, "log");
    const auto& x = a.value();
    std::vector<T> out(x.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        if (!(x[i] > T(0))) throw std::domain_error("log: non-positive input at index " + std::to_string(i));
        out[i] = std::log(x[i]);
    }
    return tape.record("log", Tensor<T>(x.shape(), std::move(out)), {a.id}, [a](const Tensor<T>& g, const Tensor<T>&, GradSink<T>& sink) {
        const auto& x = a.value();
        auto d = sink[a.id];
        for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[i] / x[i];
    });
}

template <class T>
Var<T> exp(Var<T> a) {
    auto& tape = detail::tape_of(a, "exp");
    const auto& x = a.value();
    std::vector<T> out(x.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp(x[i]);
    return tape.record("exp", Tensor<T>(x.shape(), std::move(out)), {a.id},
                       [ia = a.id](const Tensor<T>& g, const Tensor<T>& y, GradSink<T>& sink) {
                           auto d = sink[ia];
                           for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[i] * y[i];
                       });
}

template <class T>
Var<T> tanh(Var<T> a) {
    auto& tape = detail::tape_of(a, "tanh");
    const auto& x = a.value();
    std::vector<T> out(x.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(x[i]);
    return tape.record("tanh", Tensor<T>(x.shape(), std::move(out)), {a.id},
                       [ia = a.id](const Tensor<T>& g, const Tensor<T>& y, GradSink<T>& sink) {
                           auto d = sink[ia];
                           for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[i] * (T(1) - y[i] * y[i]);
                       });
}

/// Softmax over the last axis, max-subtracted.
template <class T>
Var<T> softmax(Var<T> a) {
    auto& tape = detail::tape_of(a, "softmax");
    const auto& x = a.value();
    const std::size_t n = x.shape().back();
    const std::size_t rows = x.size() / n;
    std::vector<T> out(x.size());
    for (std::size_t r = 0; r < rows; ++r) {
        const T* xr = x.values().data() + r * n;
        T* yr = out.data() + r * n;
        const T mx = *std::max_element(xr, xr + n);
        double total = 0.0;
        for (std::size_t j = 0; j < n; ++j) total += std::exp(static_cast<double>(xr[j] - mx));
        for (std::size_t j = 0; j < n; ++j) yr[j] = static_cast<T>(std::exp(static_cast<double>(xr[j] - mx)) / total);
    }
    return tape.record("softmax", Tensor<T>(x.shape(), std::move(out)), {a.id},
                       [ia = a.id, n, rows](const Tensor<T>& g, const Tensor<T>& y, GradSink<T>& sink) {
                           auto d = sink[ia];
                           for (std::size_t r = 0; r < rows; ++r) {
                               double dot = 0.0;
                               for (std::size_t j = 0; j < n; ++j) dot += double(g[r * n + j]) * y[r * n + j];
                               for (std::size_t j = 0; j < n; ++j)
                                   d[r * n + j] += static_cast<T>(y[r * n + j] * (g[r * n + j] - dot));
                           }
                       });
}

/// Sum of all elements, shape [1].
template <class T>
Var<T> sum(Var<T> a) {
    auto& tape = detail::tape_of(a, "sum");
    const auto& x = a.value();
    double total = 0.0;
    for (T v : x.values()) total += v;
    return tape.record("sum", Tensor<T>::scalar(static_cast<T>(total)), {a.id},
                       [ia = a.id](const Tensor<T>& g, const Tensor<T>&, GradSink<T>& sink) {
                           auto d = sink[ia];
                           for (auto& v : d) v += g[0];
                       });
}

/// Rows [begin, end) along the first axis.
template <class T>
Var<T> slice(Var<T> a, std::size_t begin, std::size_t end) {
    auto& tape = detail::tape_of(a, "slice");
    const auto& x = a.value();
    if (x.rank() == 0 || begin >= end || end > x.shape()[0])
        detail::shape_fail("slice", x.shape(),
                           "rows [" + std::to_string(begin) + "," + std::to_string(end) + ") out of range");
    const std::size_t stride = x.size() / x.shape()[0];
    Shape shape = x.shape();
    shape[0] = end - begin;
    std::vector<T> out(x.values().begin() + begin * stride, x.values().begin() + end * stride);
    return tape.record("slice", Tensor<T>(std::move(shape), std::move(out)), {a.id},
                       [ia = a.id, off = begin * stride](const Tensor<T>& g, const Tensor<T>&, GradSink<T>& sink) {
                           auto d = sink[ia];
                           for (std::size_t i = 0; i < g.size(); ++i) d[off + i] += g[i];
                       });
}

template <class T>
Var<T> reshape(Var<T> a, Shape shape) {
    auto& tape = detail::tape_of(a, "reshape");
    const auto& x = a.value();
    if (numel(shape) != x.size()) detail::shape_fail("reshape", x.shape(), shape);
    return tape.record("reshape", Tensor<T>(std::move(shape), x.data()), {a.id},
                       [ia = a.id](const Tensor<T>& g, const Tensor<T>&, GradSink<T>& sink) {
                           auto d = sink[ia];
                           for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
                       });
}

/// Expands size-1 axes to `shape`; ranks must match.
template <class T>
Var<T> broadcast(Var<T> a, Shape shape) {
    auto& tape = detail::tape_of(a, "broadcast");
    const auto& x = a.value();
    const auto& src = x.shape();
    if (src.size() != shape.size()) detail::shape_fail("broadcast", src, shape);
    for (std::size_t i = 0; i < src.size(); ++i)
        if (src[i] != shape[i] && src[i] != 1) detail::shape_fail("broadcast", src, shape);

    // Map every output element to its source element.
    const std::size_t n = numel(shape);
    std::vector<std::size_t> index(n);
    std::vector<std::size_t> src_stride(src.size(), 1);
    for (std::size_t i = src.size(); i-- > 1;) src_stride[i - 1] = src_stride[i] * src[i];
    for (std::size_t flat = 0; flat < n; ++flat) {
        std::size_t rem = flat, s = 0;
        for (std::size_t ax = shape.size(); ax-- > 0;) {
            const std::size_t coord = rem % shape[ax];
            rem /= shape[ax];
            if (src[ax] != 1) s += coord * src_stride[ax];
        }
        index[flat] = s;
    }
    std::vector<T> out(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = x[index[i]];
    return tape.record("broadcast", Tensor<T>(std::move(shape), std::move(out)), {a.id},
                       [ia = a.id, index = std::move(index)](const Tensor<T>& g, const Tensor<T>&, GradSink<T>& sink) {
                           auto d = sink[ia];
                           for (std::size_t i = 0; i < index.size(); ++i) d[index[i]] += g[i];
                       });
}

template <class T>
Var<T> transpose(Var<T> a) {
    auto& tape = detail::tape_of(a, "transpose");
    const auto& x = a.value();
    if (x.rank() != 2) detail::shape_fail("transpose", x.shape(), "expected rank 2");
    const std::size_t r = x.shape()[0], c = x.shape()[1];
    std::vector<T> out(x.size());
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out[j * r + i] = x[i * c + j];
    return tape.record("transpose", Tensor<T>({c, r}, std::move(out)), {a.id},
                       [ia = a.id, r, c](const Tensor<T>& g, const Tensor<T>&, GradSink<T>& sink) {
                           auto d = sink[ia];
                           for (std::size_t i = 0; i < r; ++i)
                               for (std::size_t j = 0; j < c; ++j) d[i * c + j] += g[j * r + i];
                       });
}

/// Stacks along the first axis; trailing axes must agree.
template <class T>
Var<T> concat(std::span<const Var<T>> parts) {
    if (parts.empty()) throw std::invalid_argument("concat: no inputs");
    auto& tape = detail::tape_of(parts.front(), "concat");
    const auto& first = parts.front().value().shape();
    Shape shape = first;
    shape[0] = 0;
    std::vector<T> out;
    std::vector<std::size_t> ids, sizes;
    for (const auto& p : parts) {
        detail::tape_of(parts.front(), p, "concat");
        const auto& v = p.value();
        if (v.rank() != first.size() || !std::equal(first.begin() + 1, first.end(), v.shape().begin() + 1))
            detail::shape_fail("concat", first, v.shape());
        shape[0] += v.shape()[0];
        out.insert(out.end(), v.values().begin(), v.values().end());
        ids.push_back(p.id);
        sizes.push_back(v.size());
    }
    return tape.record("concat", Tensor<T>(std::move(shape), std::move(out)), ids,
                       [ids, sizes](const Tensor<T>& g, const Tensor<T>&, GradSink<T>& sink) {
                           std::size_t off = 0;
                           for (std::size_t k = 0; k < ids.size(); ++k) {
                               if (sink.wants(ids[k])) {
                                   auto d = sink[ids[k]];
                                   for (std::size_t i = 0; i < sizes[k]; ++i) d[i] += g[off + i];
                               }
                               off += sizes[k];
                           }
                       });
}

template <class T>
Var<T> concat(std::initializer_list<Var<T>> parts) {
    return concat<T>(std::span<const Var<T>>(parts.begin(), parts.size()));
}

/// out.flat[i] = a.flat[index[i]]; used for embedding lookup and patch extraction.
template <class T>
Var<T> gather(Var<T> a, std::vector<std::size_t> index, Shape shape) {
    auto& tape = detail::tape_of(a, "gather");
    const auto& x = a.value();
    if (numel(shape) != index.size()) detail::shape_fail("gather", shape, "index count does not match shape");
    std::vector<T> out(index.size());
    for (std::size_t i = 0; i < index.size(); ++i) {
        if (index[i] >= x.size()) throw std::out_of_range("gather: index " + std::to_string(index[i]) + " out of range");
        out[i] = x[index[i]];
    }
    return tape.record("gather", Tensor<T>(std::move(shape), std::move(out)), {a.id},
                       [ia = a.id, index = std::move(index)](const Tensor<T>& g, const Tensor<T>&, GradSink<T>& sink) {
                           auto d = sink[ia];
                           for (std::size_t i = 0; i < index.size(); ++i) d[index[i]] += g[i];
                       });
}

/// Row-wise x / sqrt(mean(x²) + eps), no learned gain.
template <class T>
Var<T> rms_norm(Var<T> a, double eps = 1e-5) {
    auto& tape = detail::tape_of(a, "rms_norm");
    const auto& x = a.value();
    const std::size_t n = x.shape().back();
    const std::size_t rows = x.size() / n;
    std::vector<T> out(x.size());
    std::vector<double> inv(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        double ss = 0.0;
        for (std::size_t j = 0; j < n; ++j) ss += double(x[r * n + j]) * x[r * n + j];
        inv[r] = 1.0 / std::sqrt(ss / n + eps);
        for (std::size_t j = 0; j < n; ++j) out[r * n + j] = static_cast<T>(x[r * n + j] * inv[r]);
    }
    return tape.record("rms_norm", Tensor<T>(x.shape(), std::move(out)), {a.id},
                       [ia = a.id, n, rows, inv = std::move(inv)](const Tensor<T>& g, const Tensor<T>& y,
                                                                  GradSink<T>& sink) {
                           auto d = sink[ia];
                           for (std::size_t r = 0; r < rows; ++r) {
                               double dot = 0.0;
                               for (std::size_t j = 0; j < n; ++j) dot += double(g[r * n + j]) * y[r * n + j];
                               dot /= double(n);
                               for (std::size_t j = 0; j < n; ++j)
                                   d[r * n + j] += static_cast<T>(inv[r] * (g[r * n + j] - y[r * n + j] * dot));
                           }
                       });
}

namespace detail {
// Stable −log softmax(row)[target], plus the softmax for the backward pass.
template <class T>
double row_cross_entropy(std::span<const T> row, std::size_t target, std::span<double> probs) {
    const double mx = *std::max_element(row.begin(), row.end());
    double total = 0.0;
    for (std::size_t j = 0; j < row.size(); ++j) {
        probs[j] = std::exp(double(row[j]) - mx);
        total += probs[j];
    }
    for (auto& p : probs) p /= total;
    return -(double(row[target]) - mx - std::log(total));
}
}  // namespace detail

/// Mean over `rows` of −log softmax(logits[row])[target]. `logits` is L×V.
template <class T>
Var<T> cross_entropy_rows(Var<T> logits, std::span<const std::size_t> rows, std::span<const std::size_t> targets) {
    auto& tape = detail::tape_of(logits, "cross_entropy");
    const auto& x = logits.value();
    if (x.rank() != 2) detail::shape_fail("cross_entropy", x.shape(), "expected rank 2 logits");
    if (rows.size() != targets.size() || rows.empty())
        throw std::invalid_argument("cross_entropy: " + std::to_string(rows.size()) + " rows vs " +
                                    std::to_string(targets.size()) + " targets");
    const std::size_t V = x.shape()[1];
    if (V < 2) throw std::invalid_argument("cross_entropy: vocabulary must have at least 2 entries");
    std::vector<double> probs(rows.size() * V);
    double total = 0.0;
    for (std::size_t i = 0; i < rows.size(); ++i) {
        if (rows[i] >= x.shape()[0]) throw std::out_of_range("cross_entropy: row " + std::to_string(rows[i]) + " out of range");
        if (targets[i] >= V) throw std::out_of_range("cross_entropy: target " + std::to_string(targets[i]) + " out of range");
        total += detail::row_cross_entropy<T>(x.values().subspan(rows[i] * V, V), targets[i],
                                              std::span<double>(probs).subspan(i * V, V));
    }
    const double inv_n = 1.0 / double(rows.size());
    std::vector<std::size_t> r(rows.begin(), rows.end()), t(targets.begin(), targets.end());
    return tape.record("cross_entropy", Tensor<T>::scalar(static_cast<T>(total * inv_n)), {logits.id},
                       [il = logits.id, r = std::move(r), t = std::move(t), probs = std::move(probs), V,
                        inv_n](const Tensor<T>& g, const Tensor<T>&, GradSink<T>& sink) {
                           auto d = sink[il];
                           const double s = double(g[0]) * inv_n;
                           for (std::size_t i = 0; i < r.size(); ++i) {
                               T* dr = d.data() + r[i] * V;
                               const double* p = probs.data() + i * V;
                               for (std::size_t j = 0; j < V; ++j) dr[j] += static_cast<T>(s * (p[j] - (j == t[i])));
                           }
                       });
}

/// −log softmax(logits)[target] for a single logit vector of length V.
template <class T>
Var<T> cross_entropy_from_logits(Var<T> logits, std::size_t target) {
    const auto& x = logits.value();
    if (x.rank() != 1 && !(x.rank() == 2 && x.shape()[0] == 1))
        detail::shape_fail("cross_entropy", x.shape(), "expected a single logit vector");
    auto row = x.rank() == 1 ? reshape(logits, {1, x.size()}) : logits;
    const std::size_t r0 = 0;
    return cross_entropy_rows(row, std::span<const std::size_t>(&r0, 1), std::span<const std::size_t>(&target, 1));
}

/// Plain-value version for callers without a tape (double throughout).
inline double cross_entropy_value(std::span<const float> logits, std::size_t target) {
    if (logits.size() < 2) throw std::invalid_argument("cross_entropy: vocabulary must have at least 2 entries");
    if (target >= logits.size()) throw std::out_of_range("cross_entropy: target out of range");
    std::vector<double> probs(logits.size());
    return detail::row_cross_entropy<float>(logits, target, probs);
}

template <class T>
Var<T> operator+(Var<T> a, Var<T> b) { return add(a, b); }
template <class T>
Var<T> operator*(Var<T> a, Var<T> b) { return mul(a, b); }

// ---------------------------------------------------------------------------
// Finite differences
// ---------------------------------------------------------------------------

/// Central difference (f(x+h·eᵢ) − f(x−h·eᵢ)) / 2h for every coordinate.
template <class T, class F>
Tensor<T> finite_difference_gradient(F&& f, const Tensor<T>& x, double h) {
    if (!(h > 0.0)) throw std::invalid_argument("finite_difference_gradient: step must be positive");
    auto grad = Tensor<T>::zeros(x.shape());
    Tensor<T> probe = x;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const T orig = probe[i];
        probe[i] = static_cast<T>(orig + h);
        const double up = f(std::as_const(probe));
        probe[i] = static_cast<T>(orig - h);
        const double down = f(std::as_const(probe));
        probe[i] = orig;
        grad[i] = static_cast<T>((up - down) / (2.0 * h));
    }
    return grad;
}

}  // namespace cia::ad
