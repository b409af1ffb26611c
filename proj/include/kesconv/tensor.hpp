// SPDX-License-Identifier: Apache-2.0
//
// Dense double-precision tensors with reverse-mode gradient recording.
//
// Row-major flat storage, rank <= 4. Every forward op below records a
// backward closure on the output node when grad recording is enabled and at
// least one input requires grad; backward(loss) then runs the closures in
// reverse topological order. The record is single-threaded; parallel runs
// must use disjoint parameter sets.
//
// Broadcasting is restricted to bias-add over the last axis. Everything else
// must match shapes exactly or it is a ShapeError.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>
#include <memory>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include "kesconv/common.hpp"

namespace kesconv {

using Shape = std::vector<int>;

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        os << (i ? "x" : "") << s[i];
    }
    os << "]";
    return os.str();
}

inline int shape_numel(const Shape& s) {
    int n = 1;
    for (int d : s) {
        if (d < 0) {
            throw ShapeError("negative dimension in shape " + shape_str(s));
        }
        n *= d;
    }
    return n;
}

namespace detail {

struct Node {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;  // same length as data once touched, else empty
    bool requires_grad = false;
    bool backward_consumed = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward_fn;  // accumulates this node's grad into parents

    void ensure_grad() {
        if (grad.empty()) {
            grad.assign(data.size(), 0.0);
        }
    }
};

// Thread-local switch so inference (greedy decoding, evaluation) builds no tape.
inline bool& grad_mode() {
    thread_local bool enabled = true;
    return enabled;
}

}  // namespace detail

struct NoGradGuard {
    NoGradGuard() : prev_(detail::grad_mode()) { detail::grad_mode() = false; }
    ~NoGradGuard() { detail::grad_mode() = prev_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

// Value-semantic handle; copies share the underlying node, like a ref-counted
// view of one recorded value.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        return make(std::move(shape), {}, requires_grad, /*fill=*/0.0);
    }

    static Tensor full(Shape shape, double value, bool requires_grad = false) {
        return make(std::move(shape), {}, requires_grad, value);
    }

    static Tensor from(Shape shape, std::vector<double> data, bool requires_grad = false) {
        const int n = shape_numel(shape);
        if (static_cast<std::size_t>(n) != data.size()) {
            throw ShapeError("data length " + std::to_string(data.size()) +
                             " does not match shape " + shape_str(shape));
        }
        Tensor t;
        t.node_ = std::make_shared<detail::Node>();
        t.node_->shape = std::move(shape);
        t.node_->data = std::move(data);
        t.node_->requires_grad = requires_grad;
        check_rank(t.node_->shape);
        return t;
    }

    static Tensor scalar(double v, bool requires_grad = false) {
        return from({1}, {v}, requires_grad);
    }

    static Tensor randn(Shape shape, Rng& rng, double stdev, bool requires_grad = false) {
        const int n = shape_numel(shape);
        std::vector<double> d(static_cast<std::size_t>(n));
        for (auto& v : d) {
            v = rng.normal(stdev);
        }
        return from(std::move(shape), std::move(d), requires_grad);
    }

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return req().shape; }
    int dim(int i) const { return req().shape.at(static_cast<std::size_t>(i)); }
    int rank() const { return static_cast<int>(req().shape.size()); }
    int numel() const { return static_cast<int>(req().data.size()); }

    std::vector<double>& data() { return req().data; }
    const std::vector<double>& data() const { return req().data; }

    double item() const {
        if (numel() != 1) {
            throw ShapeError("item() requires a scalar tensor, got " + shape_str(shape()));
        }
        return req().data[0];
    }

    bool requires_grad() const { return req().requires_grad; }

    // Present only after a backward pass reached this tensor.
    bool has_grad() const { return !req().grad.empty(); }
    const std::vector<double>& grad() const {
        if (!has_grad()) {
            throw NumericError("tensor has no gradient; run backward() first");
        }
        return req().grad;
    }

    void zero_grad() { req().grad.clear(); }

    // Deep copy with detached history.
    Tensor clone(bool requires_grad = false) const {
        return from(shape(), data(), requires_grad);
    }

    detail::Node* node() const { return node_.get(); }
    const std::shared_ptr<detail::Node>& node_ptr() const { return node_; }

private:
    static void check_rank(const Shape& s) {
        if (s.empty() || s.size() > 4) {
            throw ShapeError("tensor rank must be 1..4, got shape " + shape_str(s));
        }
    }

    static Tensor make(Shape shape, std::vector<double>, bool requires_grad, double fill) {
        const int n = shape_numel(shape);
        Tensor t;
        t.node_ = std::make_shared<detail::Node>();
        t.node_->shape = std::move(shape);
        t.node_->data.assign(static_cast<std::size_t>(n), fill);
        t.node_->requires_grad = requires_grad;
        check_rank(t.node_->shape);
        return t;
    }

    detail::Node& req() const {
        if (!node_) {
            throw ShapeError("use of undefined tensor");
        }
        return *node_;
    }

    std::shared_ptr<detail::Node> node_;
};

namespace detail {

inline bool should_record(std::initializer_list<const Tensor*> inputs) {
    if (!grad_mode()) {
        return false;
    }
    for (const Tensor* t : inputs) {
        if (t->defined() && t->requires_grad()) {
            return true;
        }
    }
    return false;
}

inline Tensor op_output(Shape shape, std::vector<double> data, bool record,
                        std::vector<Tensor> parents, std::function<void(Node&)> backward_fn) {
    Tensor out = Tensor::from(std::move(shape), std::move(data), record);
    if (record) {
        Node* n = out.node();
        n->parents.reserve(parents.size());
        for (const Tensor& p : parents) {
            n->parents.push_back(p.node_ptr());
        }
        n->backward_fn = std::move(backward_fn);
    }
    return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Forward operations
// ---------------------------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
        throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
    }
    const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
    std::vector<double> out(static_cast<std::size_t>(m) * n, 0.0);
    {
        const double* pa = a.data().data();
        const double* pb = b.data().data();
        double* pc = out.data();
        for (int i = 0; i < m; ++i) {
            const double* arow = pa + static_cast<std::size_t>(i) * k;
            double* crow = pc + static_cast<std::size_t>(i) * n;
            for (int l = 0; l < k; ++l) {
                const double av = arow[l];
                const double* brow = pb + static_cast<std::size_t>(l) * n;
                for (int j = 0; j < n; ++j) {
                    crow[j] += av * brow[j];
                }
            }
        }
    }
    const bool rec = detail::should_record({&a, &b});
    auto an = a.node_ptr();
    auto bn = b.node_ptr();
    return detail::op_output(
        {m, n}, std::move(out), rec, {a, b}, [an, bn, m, k, n](detail::Node& o) {
            const double* g = o.grad.data();
            if (an->requires_grad) {
                an->ensure_grad();
                double* ga = an->grad.data();
                const double* pb = bn->data.data();
                for (int i = 0; i < m; ++i) {
                    const double* grow = g + static_cast<std::size_t>(i) * n;
                    double* garow = ga + static_cast<std::size_t>(i) * k;
                    for (int l = 0; l < k; ++l) {
                        const double* brow = pb + static_cast<std::size_t>(l) * n;
                        double acc = 0.0;
                        for (int j = 0; j < n; ++j) {
                            acc += grow[j] * brow[j];
                        }
                        garow[l] += acc;
                    }
                }
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                double* gb = bn->grad.data();
                const double* pa = an->data.data();
                for (int i = 0; i < m; ++i) {
                    const double* arow = pa + static_cast<std::size_t>(i) * k;
                    const double* grow = g + static_cast<std::size_t>(i) * n;
                    for (int l = 0; l < k; ++l) {
                        const double av = arow[l];
                        if (av == 0.0) {
                            continue;
                        }
                        double* gbrow = gb + static_cast<std::size_t>(l) * n;
                        for (int j = 0; j < n; ++j) {
                            gbrow[j] += av * grow[j];
                        }
                    }
                }
            }
        });
}

inline Tensor transpose(const Tensor& x) {
    if (x.rank() != 2) {
        throw ShapeError("transpose: expected rank-2 tensor, got " + shape_str(x.shape()));
    }
    const int m = x.dim(0), n = x.dim(1);
    std::vector<double> out(static_cast<std::size_t>(m) * n);
    const double* px = x.data().data();
    for (int i = 0; i < m; ++i) {
        for (int j = 0; j < n; ++j) {
            out[static_cast<std::size_t>(j) * m + i] = px[static_cast<std::size_t>(i) * n + j];
        }
    }
    const bool rec = detail::should_record({&x});
    auto xn = x.node_ptr();
    return detail::op_output({n, m}, std::move(out), rec, {x}, [xn, m, n](detail::Node& o) {
        if (!xn->requires_grad) {
            return;
        }
        xn->ensure_grad();
        const double* g = o.grad.data();
        double* gx = xn->grad.data();
        for (int j = 0; j < n; ++j) {
            for (int i = 0; i < m; ++i) {
                gx[static_cast<std::size_t>(i) * n + j] += g[static_cast<std::size_t>(j) * m + i];
            }
        }
    });
}

inline Tensor add(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) {
        throw ShapeError("add: shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    }
    std::vector<double> out(a.data());
    const double* pb = b.data().data();
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] += pb[i];
    }
    const bool rec = detail::should_record({&a, &b});
    auto an = a.node_ptr();
    auto bn = b.node_ptr();
    return detail::op_output(a.shape(), std::move(out), rec, {a, b}, [an, bn](detail::Node& o) {
        for (auto* p : {an.get(), bn.get()}) {
            if (!p->requires_grad) {
                continue;
            }
            p->ensure_grad();
            for (std::size_t i = 0; i < o.grad.size(); ++i) {
                p->grad[i] += o.grad[i];
            }
        }
    });
}

// The one sanctioned broadcast: bias over the last axis.
inline Tensor add_bias(const Tensor& x, const Tensor& bias) {
    if (bias.rank() != 1 || x.dim(x.rank() - 1) != bias.dim(0)) {
        throw ShapeError("add_bias: bias " + shape_str(bias.shape()) +
                         " does not match last axis of " + shape_str(x.shape()));
    }
    const int h = bias.dim(0);
    const int rows = x.numel() / h;
    std::vector<double> out(x.data());
    const double* pb = bias.data().data();
    for (int r = 0; r < rows; ++r) {
        double* row = out.data() + static_cast<std::size_t>(r) * h;
        for (int j = 0; j < h; ++j) {
            row[j] += pb[j];
        }
    }
    const bool rec = detail::should_record({&x, &bias});
    auto xn = x.node_ptr();
    auto bn = bias.node_ptr();
    return detail::op_output(x.shape(), std::move(out), rec, {x, bias},
                             [xn, bn, rows, h](detail::Node& o) {
                                 if (xn->requires_grad) {
                                     xn->ensure_grad();
                                     for (std::size_t i = 0; i < o.grad.size(); ++i) {
                                         xn->grad[i] += o.grad[i];
                                     }
                                 }
                                 if (bn->requires_grad) {
                                     bn->ensure_grad();
                                     for (int r = 0; r < rows; ++r) {
                                         const double* grow =
                                             o.grad.data() + static_cast<std::size_t>(r) * h;
                                         for (int j = 0; j < h; ++j) {
                                             bn->grad[j] += grow[j];
                                         }
                                     }
                                 }
                             });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) {
        throw ShapeError("mul: shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    }
    std::vector<double> out(a.data());
    const double* pb = b.data().data();
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] *= pb[i];
    }
    const bool rec = detail::should_record({&a, &b});
    auto an = a.node_ptr();
    auto bn = b.node_ptr();
    return detail::op_output(a.shape(), std::move(out), rec, {a, b}, [an, bn](detail::Node& o) {
        if (an->requires_grad) {
            an->ensure_grad();
            for (std::size_t i = 0; i < o.grad.size(); ++i) {
                an->grad[i] += o.grad[i] * bn->data[i];
            }
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            for (std::size_t i = 0; i < o.grad.size(); ++i) {
                bn->grad[i] += o.grad[i] * an->data[i];
            }
        }
    });
}

inline Tensor scale(const Tensor& x, double c) {
    std::vector<double> out(x.data());
    for (auto& v : out) {
        v *= c;
    }
    const bool rec = detail::should_record({&x});
    auto xn = x.node_ptr();
    return detail::op_output(x.shape(), std::move(out), rec, {x}, [xn, c](detail::Node& o) {
        if (!xn->requires_grad) {
            return;
        }
        xn->ensure_grad();
        for (std::size_t i = 0; i < o.grad.size(); ++i) {
            xn->grad[i] += c * o.grad[i];
        }
    });
}

inline Tensor sum(const Tensor& x) {
    double acc = 0.0;
    for (double v : x.data()) {
        acc += v;
    }
    const bool rec = detail::should_record({&x});
    auto xn = x.node_ptr();
    return detail::op_output({1}, {acc}, rec, {x}, [xn](detail::Node& o) {
        if (!xn->requires_grad) {
            return;
        }
        xn->ensure_grad();
        const double g = o.grad[0];
        for (auto& v : xn->grad) {
            v += g;
        }
    });
}

inline Tensor tanh_op(const Tensor& x) {
    std::vector<double> out(x.data());
    for (auto& v : out) {
        v = std::tanh(v);
    }
    const bool rec = detail::should_record({&x});
    auto xn = x.node_ptr();
    return detail::op_output(x.shape(), std::move(out), rec, {x}, [xn](detail::Node& o) {
        if (!xn->requires_grad) {
            return;
        }
        xn->ensure_grad();
        for (std::size_t i = 0; i < o.grad.size(); ++i) {
            xn->grad[i] += o.grad[i] * (1.0 - o.data[i] * o.data[i]);
        }
    });
}

// GELU, tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3))).
// The approximation is part of the contract; gradient oracles assume it.
inline Tensor gelu(const Tensor& x) {
    constexpr double kC = 0.7978845608028653558798921198687;  // sqrt(2/pi)
    constexpr double kA = 0.044715;
    std::vector<double> out(x.data().size());
    const double* px = x.data().data();
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double v = px[i];
        const double t = std::tanh(kC * (v + kA * v * v * v));
        out[i] = 0.5 * v * (1.0 + t);
    }
    const bool rec = detail::should_record({&x});
    auto xn = x.node_ptr();
    return detail::op_output(x.shape(), std::move(out), rec, {x}, [xn](detail::Node& o) {
        if (!xn->requires_grad) {
            return;
        }
        xn->ensure_grad();
        for (std::size_t i = 0; i < o.grad.size(); ++i) {
            const double v = xn->data[i];
            const double inner = kC * (v + kA * v * v * v);
            const double t = std::tanh(inner);
            const double d = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * kC * (1.0 + 3.0 * kA * v * v);
            xn->grad[i] += o.grad[i] * d;
        }
    });
}

// Softmax along `axis`, stabilized by max subtraction.
inline Tensor softmax(const Tensor& x, int axis) {
    const int r = x.rank();
    if (axis < 0 || axis >= r) {
        throw ShapeError("softmax: axis " + std::to_string(axis) + " out of bounds for " +
                         shape_str(x.shape()));
    }
    const Shape& s = x.shape();
    const int d = s[static_cast<std::size_t>(axis)];
    int inner = 1;
    for (int i = axis + 1; i < r; ++i) {
        inner *= s[static_cast<std::size_t>(i)];
    }
    const int outer = x.numel() / (d * inner);
    std::vector<double> out(x.data().size());
    const double* px = x.data().data();
    for (int o = 0; o < outer; ++o) {
        for (int in = 0; in < inner; ++in) {
            const std::size_t base = static_cast<std::size_t>(o) * d * inner + in;
            double mx = px[base];
            for (int j = 1; j < d; ++j) {
                mx = std::max(mx, px[base + static_cast<std::size_t>(j) * inner]);
            }
            double denom = 0.0;
            for (int j = 0; j < d; ++j) {
                const double e = std::exp(px[base + static_cast<std::size_t>(j) * inner] - mx);
                out[base + static_cast<std::size_t>(j) * inner] = e;
                denom += e;
            }
            for (int j = 0; j < d; ++j) {
                out[base + static_cast<std::size_t>(j) * inner] /= denom;
            }
        }
    }
    const bool rec = detail::should_record({&x});
    auto xn = x.node_ptr();
    return detail::op_output(x.shape(), std::move(out), rec, {x},
                             [xn, d, inner, outer](detail::Node& o) {
                                 if (!xn->requires_grad) {
                                     return;
                                 }
                                 xn->ensure_grad();
                                 const double* y = o.data.data();
                                 const double* g = o.grad.data();
                                 for (int ou = 0; ou < outer; ++ou) {
                                     for (int in = 0; in < inner; ++in) {
                                         const std::size_t base =
                                             static_cast<std::size_t>(ou) * d * inner + in;
                                         double dot = 0.0;
                                         for (int j = 0; j < d; ++j) {
                                             const std::size_t k =
                                                 base + static_cast<std::size_t>(j) * inner;
                                             dot += g[k] * y[k];
                                         }
                                         for (int j = 0; j < d; ++j) {
                                             const std::size_t k =
                                                 base + static_cast<std::size_t>(j) * inner;
                                             xn->grad[k] += (g[k] - dot) * y[k];
                                         }
                                     }
                                 }
                             });
}

// Row-wise softmax over a causal window: row r may see the `past_len` cached
// positions plus new positions 0..r. Entries outside the window are exactly
// zero in the output and receive no gradient, which makes the causal-masking
// invariant bitwise rather than approximate.
inline Tensor causal_softmax(const Tensor& scores, int past_len) {
    if (scores.rank() != 2) {
        throw ShapeError("causal_softmax: expected rank-2 scores, got " +
                         shape_str(scores.shape()));
    }
    if (past_len < 0) {
        throw ShapeError("causal_softmax: negative past length");
    }
    const int m = scores.dim(0), n = scores.dim(1);
    if (past_len + m != n) {
        throw ShapeError("causal_softmax: scores " + shape_str(scores.shape()) +
                         " inconsistent with past length " + std::to_string(past_len));
    }
    std::vector<double> out(static_cast<std::size_t>(m) * n, 0.0);
    const double* px = scores.data().data();
    for (int r = 0; r < m; ++r) {
        const int allowed = past_len + r + 1;
        const double* row = px + static_cast<std::size_t>(r) * n;
        double* orow = out.data() + static_cast<std::size_t>(r) * n;
        double mx = row[0];
        for (int j = 1; j < allowed; ++j) {
            mx = std::max(mx, row[j]);
        }
        double denom = 0.0;
        for (int j = 0; j < allowed; ++j) {
            const double e = std::exp(row[j] - mx);
            orow[j] = e;
            denom += e;
        }
        for (int j = 0; j < allowed; ++j) {
            orow[j] /= denom;
        }
    }
    const bool rec = detail::should_record({&scores});
    auto xn = scores.node_ptr();
    return detail::op_output({m, n}, std::move(out), rec, {scores},
                             [xn, m, n, past_len](detail::Node& o) {
                                 if (!xn->requires_grad) {
                                     return;
                                 }
                                 xn->ensure_grad();
                                 for (int r = 0; r < m; ++r) {
                                     const int allowed = past_len + r + 1;
                                     const std::size_t base = static_cast<std::size_t>(r) * n;
                                     double dot = 0.0;
                                     for (int j = 0; j < allowed; ++j) {
                                         dot += o.grad[base + j] * o.data[base + j];
                                     }
                                     for (int j = 0; j < allowed; ++j) {
                                         xn->grad[base + j] +=
                                             (o.grad[base + j] - dot) * o.data[base + j];
                                     }
                                 }
                             });
}

// Per-row normalization over the last axis. eps is tiny because the module
// runs in double precision and the output must have unit variance to 1e-6.
inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias) {
    const int h = x.dim(x.rank() - 1);
    if (gain.rank() != 1 || bias.rank() != 1 || gain.dim(0) != h || bias.dim(0) != h) {
        throw ShapeError("layer_norm: gain/bias must be rank-1 of size " + std::to_string(h));
    }
    constexpr double kEps = 1e-12;
    const int rows = x.numel() / h;
    std::vector<double> out(x.data().size());
    std::vector<double> norm(x.data().size());      // (x - mean) / std, pre gain/bias
    std::vector<double> inv_std(static_cast<std::size_t>(rows));
    const double* px = x.data().data();
    const double* pg = gain.data().data();
    const double* pb = bias.data().data();
    for (int r = 0; r < rows; ++r) {
        const double* row = px + static_cast<std::size_t>(r) * h;
        double mean = 0.0;
        for (int j = 0; j < h; ++j) {
            mean += row[j];
        }
        mean /= h;
        double var = 0.0;
        for (int j = 0; j < h; ++j) {
            const double c = row[j] - mean;
            var += c * c;
        }
        var /= h;
        const double is = 1.0 / std::sqrt(var + kEps);
        inv_std[static_cast<std::size_t>(r)] = is;
        for (int j = 0; j < h; ++j) {
            const std::size_t k = static_cast<std::size_t>(r) * h + j;
            norm[k] = (row[j] - mean) * is;
            out[k] = norm[k] * pg[j] + pb[j];
        }
    }
    const bool rec = detail::should_record({&x, &gain, &bias});
    auto xn = x.node_ptr();
    auto gn = gain.node_ptr();
    auto bn = bias.node_ptr();
    return detail::op_output(
        x.shape(), std::move(out), rec, {x, gain, bias},
        [xn, gn, bn, rows, h, norm = std::move(norm),
         inv_std = std::move(inv_std)](detail::Node& o) {
            const double* g = o.grad.data();
            if (gn->requires_grad) {
                gn->ensure_grad();
                for (int r = 0; r < rows; ++r) {
                    for (int j = 0; j < h; ++j) {
                        const std::size_t k = static_cast<std::size_t>(r) * h + j;
                        gn->grad[j] += g[k] * norm[k];
                    }
                }
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (int r = 0; r < rows; ++r) {
                    for (int j = 0; j < h; ++j) {
                        bn->grad[j] += g[static_cast<std::size_t>(r) * h + j];
                    }
                }
            }
            if (xn->requires_grad) {
                xn->ensure_grad();
                for (int r = 0; r < rows; ++r) {
                    const std::size_t base = static_cast<std::size_t>(r) * h;
                    double mean_dy = 0.0, mean_dyn = 0.0;
                    for (int j = 0; j < h; ++j) {
                        const double dy = g[base + j] * gn->data[j];
                        mean_dy += dy;
                        mean_dyn += dy * norm[base + j];
                    }
                    mean_dy /= h;
                    mean_dyn /= h;
                    const double is = inv_std[static_cast<std::size_t>(r)];
                    for (int j = 0; j < h; ++j) {
                        const double dy = g[base + j] * gn->data[j];
                        xn->grad[base + j] += is * (dy - mean_dy - norm[base + j] * mean_dyn);
                    }
                }
            }
        });
}

inline Tensor embedding_lookup(const Tensor& table, const std::vector<int>& ids) {
    if (table.rank() != 2) {
        throw ShapeError("embedding_lookup: table must be rank-2, got " +
                         shape_str(table.shape()));
    }
    const int v = table.dim(0), h = table.dim(1);
    const int n = static_cast<int>(ids.size());
    if (n == 0) {
        throw ShapeError("embedding_lookup: empty id list");
    }
    for (int id : ids) {
        if (id < 0 || id >= v) {
            throw ShapeError("embedding_lookup: id " + std::to_string(id) +
                             " out of range for table " + shape_str(table.shape()));
        }
    }
    std::vector<double> out(static_cast<std::size_t>(n) * h);
    const double* pt = table.data().data();
    for (int i = 0; i < n; ++i) {
        std::memcpy(out.data() + static_cast<std::size_t>(i) * h,
                    pt + static_cast<std::size_t>(ids[static_cast<std::size_t>(i)]) * h,
                    sizeof(double) * static_cast<std::size_t>(h));
    }
    const bool rec = detail::should_record({&table});
    auto tn = table.node_ptr();
    return detail::op_output({n, h}, std::move(out), rec, {table}, [tn, ids, h](detail::Node& o) {
        if (!tn->requires_grad) {
            return;
        }
        tn->ensure_grad();
        for (std::size_t i = 0; i < ids.size(); ++i) {
            const double* grow = o.grad.data() + i * static_cast<std::size_t>(h);
            double* trow =
                tn->grad.data() + static_cast<std::size_t>(ids[i]) * static_cast<std::size_t>(h);
            for (int j = 0; j < h; ++j) {
                trow[j] += grow[j];
            }
        }
    });
}

// Mean negative log-likelihood over mask-selected positions. targets[i] is the
// class index at row i; mask[i] in {0,1} selects supervised rows.
inline Tensor cross_entropy(const Tensor& logits, const std::vector<int>& targets,
                            const std::vector<int>& mask) {
    if (logits.rank() != 2) {
        throw ShapeError("cross_entropy: logits must be rank-2, got " +
                         shape_str(logits.shape()));
    }
    const int n = logits.dim(0), v = logits.dim(1);
    if (targets.size() != static_cast<std::size_t>(n) || mask.size() != static_cast<std::size_t>(n)) {
        throw ShapeError("cross_entropy: targets/mask length must equal logits rows");
    }
    int count = 0;
    for (int i = 0; i < n; ++i) {
        if (mask[static_cast<std::size_t>(i)] != 0) {
            ++count;
            const int t = targets[static_cast<std::size_t>(i)];
            if (t < 0 || t >= v) {
                throw ShapeError("cross_entropy: target " + std::to_string(t) + " out of range");
            }
        }
    }
    if (count == 0) {
        throw NumericError("cross_entropy: no supervised positions (mask is all zeros)");
    }
    // Keep softmax probabilities of supervised rows for the backward pass.
    std::vector<double> probs(static_cast<std::size_t>(n) * v, 0.0);
    const double* pl = logits.data().data();
    double loss = 0.0;
    for (int i = 0; i < n; ++i) {
        if (mask[static_cast<std::size_t>(i)] == 0) {
            continue;
        }
        const double* row = pl + static_cast<std::size_t>(i) * v;
        double mx = row[0];
        for (int j = 1; j < v; ++j) {
            mx = std::max(mx, row[j]);
        }
        double denom = 0.0;
        for (int j = 0; j < v; ++j) {
            const double e = std::exp(row[j] - mx);
            probs[static_cast<std::size_t>(i) * v + j] = e;
            denom += e;
        }
        for (int j = 0; j < v; ++j) {
            probs[static_cast<std::size_t>(i) * v + j] /= denom;
        }
        const double lse = std::log(denom) + mx;
        loss += lse - row[targets[static_cast<std::size_t>(i)]];
    }
    loss /= count;
    const bool rec = detail::should_record({&logits});
    auto ln = logits.node_ptr();
    return detail::op_output(
        {1}, {loss}, rec, {logits},
        [ln, targets, mask, n, v, count, probs = std::move(probs)](detail::Node& o) {
            if (!ln->requires_grad) {
                return;
            }
            ln->ensure_grad();
            const double g = o.grad[0] / count;
            for (int i = 0; i < n; ++i) {
                if (mask[static_cast<std::size_t>(i)] == 0) {
                    continue;
                }
                const std::size_t base = static_cast<std::size_t>(i) * v;
                for (int j = 0; j < v; ++j) {
                    ln->grad[base + j] += g * probs[base + j];
                }
                ln->grad[base + targets[static_cast<std::size_t>(i)]] -= g;
            }
        });
}

// ---------------------------------------------------------------------------
// Structural ops (concat / slice / stack / reshape)
// ---------------------------------------------------------------------------

inline Tensor concat_rows(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(1)) {
        throw ShapeError("concat_rows: incompatible shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
    }
    const int ma = a.dim(0), mb = b.dim(0), n = a.dim(1);
    std::vector<double> out;
    out.reserve(static_cast<std::size_t>(ma + mb) * n);
    out.insert(out.end(), a.data().begin(), a.data().end());
    out.insert(out.end(), b.data().begin(), b.data().end());
    const bool rec = detail::should_record({&a, &b});
    auto an = a.node_ptr();
    auto bn = b.node_ptr();
    return detail::op_output({ma + mb, n}, std::move(out), rec, {a, b},
                             [an, bn, ma, mb, n](detail::Node& o) {
                                 const std::size_t na = static_cast<std::size_t>(ma) * n;
                                 if (an->requires_grad) {
                                     an->ensure_grad();
                                     for (std::size_t i = 0; i < na; ++i) {
                                         an->grad[i] += o.grad[i];
                                     }
                                 }
                                 if (bn->requires_grad) {
                                     bn->ensure_grad();
                                     const std::size_t nb = static_cast<std::size_t>(mb) * n;
                                     for (std::size_t i = 0; i < nb; ++i) {
                                         bn->grad[i] += o.grad[na + i];
                                     }
                                 }
                             });
}

inline Tensor concat_cols(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(0) != b.dim(0)) {
        throw ShapeError("concat_cols: incompatible shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
    }
    const int m = a.dim(0), na = a.dim(1), nb = b.dim(1);
    std::vector<double> out(static_cast<std::size_t>(m) * (na + nb));
    for (int i = 0; i < m; ++i) {
        std::memcpy(out.data() + static_cast<std::size_t>(i) * (na + nb),
                    a.data().data() + static_cast<std::size_t>(i) * na,
                    sizeof(double) * static_cast<std::size_t>(na));
        std::memcpy(out.data() + static_cast<std::size_t>(i) * (na + nb) + na,
                    b.data().data() + static_cast<std::size_t>(i) * nb,
                    sizeof(double) * static_cast<std::size_t>(nb));
    }
    const bool rec = detail::should_record({&a, &b});
    auto an = a.node_ptr();
    auto bn = b.node_ptr();
    return detail::op_output({m, na + nb}, std::move(out), rec, {a, b},
                             [an, bn, m, na, nb](detail::Node& o) {
                                 for (int i = 0; i < m; ++i) {
                                     const double* grow =
                                         o.grad.data() + static_cast<std::size_t>(i) * (na + nb);
                                     if (an->requires_grad) {
                                         an->ensure_grad();
                                         double* ga =
                                             an->grad.data() + static_cast<std::size_t>(i) * na;
                                         for (int j = 0; j < na; ++j) {
                                             ga[j] += grow[j];
                                         }
                                     }
                                     if (bn->requires_grad) {
                                         bn->ensure_grad();
                                         double* gb =
                                             bn->grad.data() + static_cast<std::size_t>(i) * nb;
                                         for (int j = 0; j < nb; ++j) {
                                             gb[j] += grow[na + j];
                                         }
                                     }
                                 }
                             });
}

inline Tensor slice_rows(const Tensor& x, int r0, int r1) {
    if (x.rank() != 2 || r0 < 0 || r1 > x.dim(0) || r0 > r1) {
        throw ShapeError("slice_rows: range [" + std::to_string(r0) + "," + std::to_string(r1) +
                         ") invalid for " + shape_str(x.shape()));
    }
    const int n = x.dim(1);
    std::vector<double> out(x.data().begin() + static_cast<std::ptrdiff_t>(r0) * n,
                            x.data().begin() + static_cast<std::ptrdiff_t>(r1) * n);
    const bool rec = detail::should_record({&x});
    auto xn = x.node_ptr();
    return detail::op_output({r1 - r0, n}, std::move(out), rec, {x}, [xn, r0, n](detail::Node& o) {
        if (!xn->requires_grad) {
            return;
        }
        xn->ensure_grad();
        double* gx = xn->grad.data() + static_cast<std::size_t>(r0) * n;
        for (std::size_t i = 0; i < o.grad.size(); ++i) {
            gx[i] += o.grad[i];
        }
    });
}

inline Tensor slice_cols(const Tensor& x, int c0, int c1) {
    if (x.rank() != 2 || c0 < 0 || c1 > x.dim(1) || c0 > c1) {
        throw ShapeError("slice_cols: range [" + std::to_string(c0) + "," + std::to_string(c1) +
                         ") invalid for " + shape_str(x.shape()));
    }
    const int m = x.dim(0), n = x.dim(1), w = c1 - c0;
    std::vector<double> out(static_cast<std::size_t>(m) * w);
    for (int i = 0; i < m; ++i) {
        std::memcpy(out.data() + static_cast<std::size_t>(i) * w,
                    x.data().data() + static_cast<std::size_t>(i) * n + c0,
                    sizeof(double) * static_cast<std::size_t>(w));
    }
    const bool rec = detail::should_record({&x});
    auto xn = x.node_ptr();
    return detail::op_output({m, w}, std::move(out), rec, {x}, [xn, m, n, c0, w](detail::Node& o) {
        if (!xn->requires_grad) {
            return;
        }
        xn->ensure_grad();
        for (int i = 0; i < m; ++i) {
            const double* grow = o.grad.data() + static_cast<std::size_t>(i) * w;
            double* gx = xn->grad.data() + static_cast<std::size_t>(i) * n + c0;
            for (int j = 0; j < w; ++j) {
                gx[j] += grow[j];
            }
        }
    });
}

// k tensors of shape [m x n] -> [k x m x n].
inline Tensor stack_first(const std::vector<Tensor>& parts) {
    if (parts.empty()) {
        throw ShapeError("stack_first: empty input");
    }
    const Shape inner = parts.front().shape();
    if (inner.size() != 2) {
        throw ShapeError("stack_first: parts must be rank-2");
    }
    for (const Tensor& p : parts) {
        if (p.shape() != inner) {
            throw ShapeError("stack_first: mismatched part shapes");
        }
    }
    const int k = static_cast<int>(parts.size());
    const std::size_t sz = parts.front().data().size();
    std::vector<double> out;
    out.reserve(sz * static_cast<std::size_t>(k));
    bool rec = false;
    for (const Tensor& p : parts) {
        out.insert(out.end(), p.data().begin(), p.data().end());
        rec = rec || (detail::grad_mode() && p.requires_grad());
    }
    std::vector<std::shared_ptr<detail::Node>> nodes;
    for (const Tensor& p : parts) {
        nodes.push_back(p.node_ptr());
    }
    return detail::op_output({k, inner[0], inner[1]}, std::move(out), rec, parts,
                             [nodes, sz](detail::Node& o) {
                                 for (std::size_t pi = 0; pi < nodes.size(); ++pi) {
                                     auto& p = nodes[pi];
                                     if (!p->requires_grad) {
                                         continue;
                                     }
                                     p->ensure_grad();
                                     const double* g = o.grad.data() + pi * sz;
                                     for (std::size_t i = 0; i < sz; ++i) {
                                         p->grad[i] += g[i];
                                     }
                                 }
                             });
}

// [k x m x n], i -> [m x n].
inline Tensor slice_first(const Tensor& x, int i) {
    if (x.rank() != 3 || i < 0 || i >= x.dim(0)) {
        throw ShapeError("slice_first: index " + std::to_string(i) + " invalid for " +
                         shape_str(x.shape()));
    }
    const int m = x.dim(1), n = x.dim(2);
    const std::size_t sz = static_cast<std::size_t>(m) * n;
    std::vector<double> out(x.data().begin() + static_cast<std::ptrdiff_t>(i) * static_cast<std::ptrdiff_t>(sz),
                            x.data().begin() + static_cast<std::ptrdiff_t>(i + 1) * static_cast<std::ptrdiff_t>(sz));
    const bool rec = detail::should_record({&x});
    auto xn = x.node_ptr();
    return detail::op_output({m, n}, std::move(out), rec, {x}, [xn, i, sz](detail::Node& o) {
        if (!xn->requires_grad) {
            return;
        }
        xn->ensure_grad();
        double* gx = xn->grad.data() + static_cast<std::size_t>(i) * sz;
        for (std::size_t j = 0; j < sz; ++j) {
            gx[j] += o.grad[j];
        }
    });
}

inline Tensor reshape(const Tensor& x, Shape shape) {
    if (shape_numel(shape) != x.numel()) {
        throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " +
                         shape_str(shape));
    }
    std::vector<double> out(x.data());
    const bool rec = detail::should_record({&x});
    auto xn = x.node_ptr();
    return detail::op_output(std::move(shape), std::move(out), rec, {x}, [xn](detail::Node& o) {
        if (!xn->requires_grad) {
            return;
        }
        xn->ensure_grad();
        for (std::size_t i = 0; i < o.grad.size(); ++i) {
            xn->grad[i] += o.grad[i];
        }
    });
}

// ---------------------------------------------------------------------------
// Reverse pass
// ---------------------------------------------------------------------------

// Populates grad on every requires-grad tensor reachable from `loss`.
// A record can be consumed once; build a fresh forward pass to differentiate
// again.
inline void backward(const Tensor& loss) {
    if (loss.numel() != 1) {
        throw NumericError("backward: loss must be scalar, got " + shape_str(loss.shape()));
    }
    detail::Node* root = loss.node();
    if (root->backward_consumed) {
        throw NumericError("backward: this record was already differentiated; "
                           "rebuild the forward pass before calling backward again");
    }
    if (!root->requires_grad) {
        throw NumericError("backward: loss does not require grad (recording disabled?)");
    }

    // Iterative post-order DFS; recursion depth would track graph depth.
    std::vector<detail::Node*> order;
    std::unordered_set<detail::Node*> visited;
    std::vector<std::pair<detail::Node*, std::size_t>> stack;
    stack.emplace_back(root, 0);
    visited.insert(root);
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        if (idx < node->parents.size()) {
            detail::Node* p = node->parents[idx].get();
            ++idx;
            if (p->requires_grad && !visited.count(p)) {
                visited.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    root->ensure_grad();
    root->grad[0] = 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        detail::Node* n = *it;
        if (n->backward_fn && !n->grad.empty()) {
            n->backward_fn(*n);
        }
    }
    root->backward_consumed = true;
}

inline bool all_finite(const Tensor& t) {
    for (double v : t.data()) {
        if (!std::isfinite(v)) {
            return false;
        }
    }
    return true;
}

}  // namespace kesconv
