#pragma once

// Minimal define-by-run reverse-mode automatic differentiation over dense
// 64-bit tensors. A Tensor is a shared handle to its storage; operations take a
// Tape and record a propagation rule only when some input requires a gradient.

#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "hardcon/error.hpp"

namespace hardcon {

using Shape = std::vector<std::size_t>;

namespace detail {

struct TensorStorage {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;
    // Gradient of the current backward pass; empty outside of Tape::backward.
    std::vector<double> pass;
    bool requires_grad = false;
    bool leaf = true;

    std::span<double> pass_buffer() {
        if (pass.empty()) {
            pass.assign(data.size(), 0.0);
        }
        return pass;
    }
};

inline std::size_t shape_size(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
    std::string out = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        out += (i ? "x" : "") + std::to_string(shape[i]);
    }
    return out + "]";
}

} // namespace detail

class Tape;

class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        const std::size_t n = detail::shape_size(shape);
        return from(std::vector<double>(n, 0.0), std::move(shape), requires_grad);
    }

    static Tensor from(std::vector<double> values, Shape shape, bool requires_grad = false) {
        if (detail::shape_size(shape) != values.size()) {
            throw ContractViolation("tensor data length does not match shape " + detail::shape_string(shape));
        }
        auto s = std::make_shared<detail::TensorStorage>();
        s->shape = std::move(shape);
        s->grad.assign(values.size(), 0.0);
        s->data = std::move(values);
        s->requires_grad = requires_grad;
        return Tensor(std::move(s));
    }

    static Tensor vector(std::vector<double> values, bool requires_grad = false) {
        const std::size_t n = values.size();
        return from(std::move(values), {n}, requires_grad);
    }

    static Tensor scalar(double value, bool requires_grad = false) {
        return from({value}, {1}, requires_grad);
    }

    bool defined() const { return static_cast<bool>(s_); }
    const Shape& shape() const { return s_->shape; }
    std::size_t size() const { return s_->data.size(); }
    std::size_t rows() const { return s_->shape.size() == 2 ? s_->shape[0] : 1; }
    std::size_t cols() const { return s_->shape.back(); }

    std::span<double> data() { return s_->data; }
    std::span<const double> data() const { return s_->data; }
    std::span<double> grad() { return s_->grad; }
    std::span<const double> grad() const { return s_->grad; }
    const std::vector<double>& values() const { return s_->data; }

    double item() const {
        detail::require(size() == 1, "item() requires a single-element tensor");
        return s_->data[0];
    }

    bool requires_grad() const { return s_->requires_grad; }
    void set_requires_grad(bool flag) { s_->requires_grad = flag; }
    bool is_leaf() const { return s_->leaf; }

    void zero_grad() { std::fill(s_->grad.begin(), s_->grad.end(), 0.0); }

    /// Deep copy as a fresh leaf with zero gradient.
    Tensor clone() const {
        return from(s_->data, s_->shape, s_->requires_grad);
    }

    /// Same storage object (not value equality).
    bool same_storage(const Tensor& other) const { return s_ == other.s_; }

private:
    explicit Tensor(std::shared_ptr<detail::TensorStorage> s) : s_(std::move(s)) {}

    std::shared_ptr<detail::TensorStorage> s_;

    friend class Tape;
};

/// Ordered record of executed operations. Backward visits nodes in exact
/// reverse order of recording.
class Tape {
public:
    using Storage = detail::TensorStorage;
    // Receives the gradient flowing into the node output.
    using Propagate = std::function<void(std::span<const double>)>;

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;
    Tape(Tape&&) = default;
    Tape& operator=(Tape&&) = default;

    std::size_t size() const { return nodes_.size(); }
    void clear() { nodes_.clear(); }

    /// When off, operations compute values only and nothing is recorded.
    void set_recording(bool on) { recording_ = on; }
    bool recording() const { return recording_; }

    /// Creates an op output; records a propagation rule only when an input
    /// requires grad. `builder(out, in)` receives raw storage pointers that stay
    /// alive as long as the node does; `in[k]` is null when input k needs no grad.
    template <typename Builder>
    Tensor record(std::vector<double> values, Shape shape, std::initializer_list<Tensor> inputs,
                  Builder&& builder) {
        Tensor out = Tensor::from(std::move(values), std::move(shape), false);
        out.s_->leaf = false;
        bool any = false;
        if (!recording_) {
            return out;
        }
        for (const Tensor& t : inputs) {
            any = any || t.requires_grad();
        }
        if (!any) {
            return out;
        }
        out.s_->requires_grad = true;
        Node node;
        node.output = out.s_;
        node.inputs.reserve(inputs.size());
        std::vector<Storage*> raw;
        raw.reserve(inputs.size());
        for (const Tensor& t : inputs) {
            node.inputs.push_back(t.s_);
            raw.push_back(t.s_->requires_grad ? t.s_.get() : nullptr);
        }
        node.propagate = builder(static_cast<const Storage*>(out.s_.get()), std::span<Storage* const>(raw));
        nodes_.push_back(std::move(node));
        return out;
    }

    /// Accumulates d(loss)/d(leaf) into every reachable leaf that requires a
    /// gradient. Intermediate tensors receive this pass's gradient (overwritten).
    void backward(const Tensor& loss) {
        detail::require(loss.defined() && loss.size() == 1, "backward requires a scalar loss");
        if (!loss.requires_grad()) {
            return;
        }
        if (loss.s_->leaf) {
            loss.s_->grad[0] += 1.0;
            return;
        }
        loss.s_->pass_buffer()[0] = 1.0;
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
            if (it->output->pass.empty()) {
                continue;
            }
            it->propagate(it->output->pass);
        }
        // Leaves accumulate the complete pass gradient in one addition so that
        // repeated passes add bit-identical increments.
        auto commit = [](Storage& s) {
            if (s.pass.empty()) {
                return;
            }
            if (s.leaf) {
                for (std::size_t i = 0; i < s.pass.size(); ++i) {
                    s.grad[i] += s.pass[i];
                }
            } else {
                s.grad = s.pass;
            }
            s.pass.clear();
        };
        for (auto& node : nodes_) {
            commit(*node.output);
            for (auto& in : node.inputs) {
                commit(*in);
            }
        }
    }

private:
    struct Node {
        std::shared_ptr<Storage> output;
        std::vector<std::shared_ptr<Storage>> inputs;
        Propagate propagate;
    };

    std::vector<Node> nodes_;
    bool recording_ = true;
};

// ---------------------------------------------------------------------------
// Elementwise operations

enum class ElementwiseOp { add, sub, mul, div, tanh, sigmoid, relu, square, log };

namespace detail {

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw ContractViolation(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                                shape_string(b.shape()));
    }
}

inline double sigmoid(double v) {
    if (v >= 0.0) {
        return 1.0 / (1.0 + std::exp(-v));
    }
    const double e = std::exp(v);
    return e / (1.0 + e);
}

// log(1 + exp(v)) without overflow.
inline double softplus(double v) {
    return v > 0.0 ? v + std::log1p(std::exp(-v)) : std::log1p(std::exp(v));
}

inline double sign(double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

// Fixed-order dot product with independent partial sums.
inline double dot(const double* a, const double* b, std::size_t n) {
    double acc[8] = {0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0};
    std::size_t j = 0;
    for (; j + 8 <= n; j += 8) {
        for (std::size_t k = 0; k < 8; ++k) acc[k] += a[j + k] * b[j + k];
    }
    for (; j < n; ++j) acc[j % 8] += a[j] * b[j];
    return ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
}

} // namespace detail

inline Tensor binary(Tape& tape, ElementwiseOp op, const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "elementwise");
    const std::size_t n = a.size();
    const auto x = a.data();
    const auto y = b.data();
    std::vector<double> out(n);
    switch (op) {
    case ElementwiseOp::add:
        for (std::size_t i = 0; i < n; ++i) out[i] = x[i] + y[i];
        break;
    case ElementwiseOp::sub:
        for (std::size_t i = 0; i < n; ++i) out[i] = x[i] - y[i];
        break;
    case ElementwiseOp::mul:
        for (std::size_t i = 0; i < n; ++i) out[i] = x[i] * y[i];
        break;
    case ElementwiseOp::div:
        for (std::size_t i = 0; i < n; ++i) {
            if (y[i] == 0.0) {
                throw DomainError("elementwise div: division by zero");
            }
            out[i] = x[i] / y[i];
        }
        break;
    default:
        throw ContractViolation("binary(): not a binary elementwise op");
    }
    return tape.record(std::move(out), a.shape(), {a, b}, [op, n, x, y](auto, auto in) {
        Tape::Storage* sa = in[0];
        Tape::Storage* sb = in[1];
        return [op, n, x, y, sa, sb](std::span<const double> g) {
            if (sa) {
                auto ga = sa->pass_buffer();
                for (std::size_t i = 0; i < n; ++i) {
                    switch (op) {
                    case ElementwiseOp::add:
                    case ElementwiseOp::sub: ga[i] += g[i]; break;
                    case ElementwiseOp::mul: ga[i] += g[i] * y[i]; break;
                    default: ga[i] += g[i] / y[i]; break;
                    }
                }
            }
            if (sb) {
                auto gb = sb->pass_buffer();
                for (std::size_t i = 0; i < n; ++i) {
                    switch (op) {
                    case ElementwiseOp::add: gb[i] += g[i]; break;
                    case ElementwiseOp::sub: gb[i] -= g[i]; break;
                    case ElementwiseOp::mul: gb[i] += g[i] * x[i]; break;
                    default: gb[i] -= g[i] * x[i] / (y[i] * y[i]); break;
                    }
                }
            }
        };
    });
}


inline Tensor unary(Tape& tape, ElementwiseOp op, const Tensor& a) {
    const std::size_t n = a.size();
    const auto x = a.data();
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) {
        switch (op) {
        case ElementwiseOp::tanh: out[i] = std::tanh(x[i]); break;
        case ElementwiseOp::sigmoid: out[i] = detail::sigmoid(x[i]); break;
        case ElementwiseOp::relu: out[i] = x[i] > 0.0 ? x[i] : 0.0; break;
        case ElementwiseOp::square: out[i] = x[i] * x[i]; break;
        case ElementwiseOp::log:
            if (!(x[i] > 0.0)) {
                throw DomainError("elementwise log: non-positive input");
            }
            out[i] = std::log(x[i]);
            break;
        default: throw ContractViolation("unary(): not a unary elementwise op");
        }
    }
    return tape.record(std::move(out), a.shape(), {a}, [op, n, x](auto out_s, auto in) {
        Tape::Storage* sa = in[0];
        const double* y = out_s->data.data();
        return Tape::Propagate([op, n, x, y, sa](std::span<const double> g) {
            auto ga = sa->pass_buffer();
            for (std::size_t i = 0; i < n; ++i) {
                switch (op) {
                case ElementwiseOp::tanh: ga[i] += g[i] * (1.0 - y[i] * y[i]); break;
                case ElementwiseOp::sigmoid: ga[i] += g[i] * y[i] * (1.0 - y[i]); break;
                case ElementwiseOp::relu: ga[i] += x[i] > 0.0 ? g[i] : 0.0; break;
                case ElementwiseOp::square: ga[i] += 2.0 * x[i] * g[i]; break;
                default: ga[i] += g[i] / x[i]; break;
                }
            }
        });
    });
}

/// Dispatches on arity: add/sub/mul/div take two inputs, the rest one.
inline Tensor elementwise(Tape& tape, ElementwiseOp op, std::span<const Tensor> inputs) {
    const bool is_binary = op == ElementwiseOp::add || op == ElementwiseOp::sub ||
                           op == ElementwiseOp::mul || op == ElementwiseOp::div;
    detail::require(inputs.size() == (is_binary ? 2u : 1u), "elementwise: wrong number of inputs");
    return is_binary ? binary(tape, op, inputs[0], inputs[1]) : unary(tape, op, inputs[0]);
}

inline Tensor add(Tape& t, const Tensor& a, const Tensor& b) { return binary(t, ElementwiseOp::add, a, b); }
inline Tensor sub(Tape& t, const Tensor& a, const Tensor& b) { return binary(t, ElementwiseOp::sub, a, b); }
inline Tensor mul(Tape& t, const Tensor& a, const Tensor& b) { return binary(t, ElementwiseOp::mul, a, b); }
inline Tensor div(Tape& t, const Tensor& a, const Tensor& b) { return binary(t, ElementwiseOp::div, a, b); }
inline Tensor tanh(Tape& t, const Tensor& a) { return unary(t, ElementwiseOp::tanh, a); }
inline Tensor sigmoid(Tape& t, const Tensor& a) { return unary(t, ElementwiseOp::sigmoid, a); }
inline Tensor relu(Tape& t, const Tensor& a) { return unary(t, ElementwiseOp::relu, a); }
inline Tensor square(Tape& t, const Tensor& a) { return unary(t, ElementwiseOp::square, a); }
inline Tensor log(Tape& t, const Tensor& a) { return unary(t, ElementwiseOp::log, a); }

/// 1 - a, elementwise.
inline Tensor one_minus(Tape& tape, const Tensor& a) {
    const std::size_t n = a.size();
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = 1.0 - a.data()[i];
    return tape.record(std::move(out), a.shape(), {a}, [n](auto, auto in) {
        Tape::Storage* sa = in[0];
        return Tape::Propagate([n, sa](std::span<const double> g) {
            auto ga = sa->pass_buffer();
            for (std::size_t i = 0; i < n; ++i) ga[i] -= g[i];
        });
    });
}

/// c * a for a constant c.
inline Tensor scale(Tape& tape, const Tensor& a, double c) {
    const std::size_t n = a.size();
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = a.data()[i] * c;
    return tape.record(std::move(out), a.shape(), {a}, [n, c](auto, auto in) {
        Tape::Storage* sa = in[0];
        return Tape::Propagate([n, c, sa](std::span<const double> g) {
            auto ga = sa->pass_buffer();
            for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] * c;
        });
    });
}

/// s * a where s is a single-element tensor.
inline Tensor scale_by(Tape& tape, const Tensor& a, const Tensor& s) {
    detail::require(s.size() == 1, "scale_by: scale must be a single-element tensor");
    const std::size_t n = a.size();
    const double c = s.item();
    const auto x = a.data();
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = x[i] * c;
    return tape.record(std::move(out), a.shape(), {a, s}, [n, c, x](auto, auto in) {
        Tape::Storage* sa = in[0];
        Tape::Storage* ss = in[1];
        return Tape::Propagate([n, c, x, sa, ss](std::span<const double> g) {
            if (sa) {
                auto ga = sa->pass_buffer();
                for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] * c;
            }
            if (ss) {
                double acc = 0.0;
                for (std::size_t i = 0; i < n; ++i) acc += g[i] * x[i];
                ss->pass_buffer()[0] += acc;
            }
        });
    });
}

// ---------------------------------------------------------------------------
// Linear algebra

/// W [m x n] times x [n].
inline Tensor matvec(Tape& tape, const Tensor& w, const Tensor& x) {
    if (w.shape().size() != 2 || x.shape().size() != 1 || w.shape()[1] != x.size()) {
        throw ContractViolation("matvec: dimension mismatch " + detail::shape_string(w.shape()) + " * " +
                                detail::shape_string(x.shape()));
    }
    const std::size_t m = w.shape()[0];
    const std::size_t n = w.shape()[1];
    const double* wd = w.data().data();
    const double* xd = x.data().data();
    std::vector<double> out(m);
    for (std::size_t i = 0; i < m; ++i) out[i] = detail::dot(wd + i * n, xd, n);
    return tape.record(std::move(out), {m}, {w, x}, [m, n, wd, xd](auto, auto in) {
        Tape::Storage* sw = in[0];
        Tape::Storage* sx = in[1];
        return Tape::Propagate([m, n, wd, xd, sw, sx](std::span<const double> g) {
            if (sw) {
                double* gw = sw->pass_buffer().data();
                for (std::size_t i = 0; i < m; ++i) {
                    const double gi = g[i];
                    double* row = gw + i * n;
                    for (std::size_t j = 0; j < n; ++j) row[j] += gi * xd[j];
                }
            }
            if (sx) {
                double* gx = sx->pass_buffer().data();
                for (std::size_t i = 0; i < m; ++i) {
                    const double gi = g[i];
                    const double* row = wd + i * n;
                    for (std::size_t j = 0; j < n; ++j) gx[j] += row[j] * gi;
                }
            }
        });
    });
}

/// W x + b as a single node.
inline Tensor affine(Tape& tape, const Tensor& w, const Tensor& x, const Tensor& b) {
    detail::require(b.shape().size() == 1 && w.shape().size() == 2 && b.size() == w.shape()[0],
                    "affine: bias length must equal the number of rows");
    if (x.shape().size() != 1 || w.shape()[1] != x.size()) {
        throw ContractViolation("affine: dimension mismatch " + detail::shape_string(w.shape()) + " * " +
                                detail::shape_string(x.shape()));
    }
    const std::size_t m = w.shape()[0];
    const std::size_t n = w.shape()[1];
    const double* wd = w.data().data();
    const double* xd = x.data().data();
    std::vector<double> out(m);
    for (std::size_t i = 0; i < m; ++i) out[i] = detail::dot(wd + i * n, xd, n) + b.data()[i];
    return tape.record(std::move(out), {m}, {w, x, b}, [m, n, wd, xd](auto, auto in) {
        Tape::Storage* sw = in[0];
        Tape::Storage* sx = in[1];
        Tape::Storage* sb = in[2];
        return Tape::Propagate([m, n, wd, xd, sw, sx, sb](std::span<const double> g) {
            if (sw) {
                double* gw = sw->pass_buffer().data();
                for (std::size_t i = 0; i < m; ++i) {
                    const double gi = g[i];
                    double* row = gw + i * n;
                    for (std::size_t j = 0; j < n; ++j) row[j] += gi * xd[j];
                }
            }
            if (sx) {
                double* gx = sx->pass_buffer().data();
                for (std::size_t i = 0; i < m; ++i) {
                    const double gi = g[i];
                    const double* row = wd + i * n;
                    for (std::size_t j = 0; j < n; ++j) gx[j] += row[j] * gi;
                }
            }
            if (sb) {
                auto gb = sb->pass_buffer();
                for (std::size_t i = 0; i < m; ++i) gb[i] += g[i];
            }
        });
    });
}

/// [a; b] for two vectors.
inline Tensor concat(Tape& tape, const Tensor& a, const Tensor& b) {
    detail::require(a.shape().size() == 1 && b.shape().size() == 1, "concat: vectors required");
    const std::size_t na = a.size();
    const std::size_t nb = b.size();
    std::vector<double> out;
    out.reserve(na + nb);
    out.insert(out.end(), a.data().begin(), a.data().end());
    out.insert(out.end(), b.data().begin(), b.data().end());
    return tape.record(std::move(out), {na + nb}, {a, b}, [na, nb](auto, auto in) {
        Tape::Storage* sa = in[0];
        Tape::Storage* sb = in[1];
        return Tape::Propagate([na, nb, sa, sb](std::span<const double> g) {
            if (sa) {
                auto ga = sa->pass_buffer();
                for (std::size_t i = 0; i < na; ++i) ga[i] += g[i];
            }
            if (sb) {
                auto gb = sb->pass_buffer();
                for (std::size_t i = 0; i < nb; ++i) gb[i] += g[na + i];
            }
        });
    });
}

/// Row `index` of a matrix, as a vector; gradient scatters back into that row.
inline Tensor row(Tape& tape, const Tensor& table, std::size_t index) {
    detail::require(table.shape().size() == 2, "row: matrix required");
    if (index >= table.shape()[0]) {
        throw ContractViolation("row: index " + std::to_string(index) + " out of range");
    }
    const std::size_t n = table.shape()[1];
    const auto begin = table.data().begin() + static_cast<std::ptrdiff_t>(index * n);
    std::vector<double> out(begin, begin + static_cast<std::ptrdiff_t>(n));
    return tape.record(std::move(out), {n}, {table}, [index, n](auto, auto in) {
        Tape::Storage* st = in[0];
        return Tape::Propagate([index, n, st](std::span<const double> g) {
            auto gt = st->pass_buffer();
            for (std::size_t j = 0; j < n; ++j) gt[index * n + j] += g[j];
        });
    });
}

// ---------------------------------------------------------------------------
// Reductions

enum class Reduction { sum, mean, l1_norm, l2_norm_squared };

inline Tensor reduce(Tape& tape, Reduction op, const Tensor& a) {
    detail::require(a.defined() && a.size() > 0, "reduction of an empty tensor");
    const std::size_t n = a.size();
    const auto x = a.data();
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        switch (op) {
        case Reduction::sum:
        case Reduction::mean: acc += x[i]; break;
        case Reduction::l1_norm: acc += std::abs(x[i]); break;
        case Reduction::l2_norm_squared: acc += x[i] * x[i]; break;
        }
    }
    if (op == Reduction::mean) {
        acc /= static_cast<double>(n);
    }
    return tape.record({acc}, {1}, {a}, [op, n, x](auto, auto in) {
        Tape::Storage* sa = in[0];
        return Tape::Propagate([op, n, x, sa](std::span<const double> g) {
            auto ga = sa->pass_buffer();
            const double g0 = g[0];
            for (std::size_t i = 0; i < n; ++i) {
                switch (op) {
                case Reduction::sum: ga[i] += g0; break;
                case Reduction::mean: ga[i] += g0 / static_cast<double>(n); break;
                case Reduction::l1_norm: ga[i] += g0 * detail::sign(x[i]); break;
                case Reduction::l2_norm_squared: ga[i] += 2.0 * x[i] * g0; break;
                }
            }
        });
    });
}

inline Tensor sum(Tape& t, const Tensor& a) { return reduce(t, Reduction::sum, a); }
inline Tensor mean(Tape& t, const Tensor& a) { return reduce(t, Reduction::mean, a); }
inline Tensor l1_norm(Tape& t, const Tensor& a) { return reduce(t, Reduction::l1_norm, a); }
inline Tensor l2_norm_squared(Tape& t, const Tensor& a) { return reduce(t, Reduction::l2_norm_squared, a); }

/// Sum of scalar tensors (empty list gives a constant zero).
inline Tensor add_all(Tape& tape, std::span<const Tensor> terms) {
    if (terms.empty()) {
        return Tensor::scalar(0.0);
    }
    Tensor acc = terms[0];
    for (std::size_t i = 1; i < terms.size(); ++i) {
        acc = add(tape, acc, terms[i]);
    }
    return acc;
}

/// Sum over k of binary cross-entropy between sigmoid(logits[k]) and labels[k]
/// in {0, 1}, computed through softplus for stability.
inline Tensor bce_with_logits(Tape& tape, const Tensor& logits, std::span<const double> labels) {
    detail::require(labels.size() == logits.size(), "bce_with_logits: label count mismatch");
    const std::size_t n = logits.size();
    const auto z = logits.data();
    double acc = 0.0;
    for (std::size_t k = 0; k < n; ++k) {
        acc += labels[k] > 0.5 ? detail::softplus(-z[k]) : detail::softplus(z[k]);
    }
    std::vector<double> y(labels.begin(), labels.end());
    return tape.record({acc}, {1}, {logits}, [n, z, y = std::move(y)](auto, auto in) {
        Tape::Storage* sz = in[0];
        return Tape::Propagate([n, z, y, sz](std::span<const double> g) {
            auto gz = sz->pass_buffer();
            for (std::size_t k = 0; k < n; ++k) gz[k] += g[0] * (detail::sigmoid(z[k]) - y[k]);
        });
    });
}

/// A tensor holding `value` whose gradient is passed to `x` unchanged
/// (identity Jacobian).
inline Tensor straight_through(Tape& tape, const Tensor& x, std::vector<double> value) {
    detail::require(value.size() == x.size(), "straight_through: size mismatch");
    const std::size_t n = x.size();
    return tape.record(std::move(value), x.shape(), {x}, [n](auto, auto in) {
        Tape::Storage* sx = in[0];
        return Tape::Propagate([n, sx](std::span<const double> g) {
            auto gx = sx->pass_buffer();
            for (std::size_t i = 0; i < n; ++i) gx[i] += g[i];
        });
    });
}

} // namespace hardcon
