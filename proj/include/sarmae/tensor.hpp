#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

#include "sarmae/rng.hpp"

namespace sarmae {

using Shape = std::vector<std::int64_t>;

inline std::int64_t shape_numel(const Shape& s) {
    return std::accumulate(s.begin(), s.end(), std::int64_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << "]";
    return os.str();
}

[[noreturn]] inline void shape_error(const std::string& msg) {
    throw std::invalid_argument("shape error: " + msg);
}

template <typename S>
struct Node {
    Shape shape;
    std::vector<S> data;
    bool requires_grad = false;
    std::vector<S> grad;
    std::vector<std::shared_ptr<Node<S>>> parents;
    std::function<void(Node<S>&)> backward_fn;

    std::int64_t numel() const { return static_cast<std::int64_t>(data.size()); }
    void ensure_grad() {
        if (grad.empty()) grad.assign(data.size(), S(0));
    }
};

namespace detail {
inline thread_local bool grad_enabled = true;
}

// RAII scope that disables graph construction (evaluation / data generation).
struct NoGradGuard {
    NoGradGuard() : prev_(detail::grad_enabled) { detail::grad_enabled = false; }
    ~NoGradGuard() { detail::grad_enabled = prev_; }

private:
    bool prev_;
};

inline bool grad_enabled() { return detail::grad_enabled; }

// Dense row-major tensor with reverse-mode autodiff. Values are
// immutable-after-construction; ops return fresh tensors and record a
// backward closure on the result node.
template <typename S>
class TensorT {
public:
    using Scalar = S;

    TensorT() : n_(std::make_shared<Node<S>>()) {}

    TensorT(Shape shape, std::vector<S> data, bool requires_grad = false)
        : n_(std::make_shared<Node<S>>()) {
        if (shape_numel(shape) != static_cast<std::int64_t>(data.size()))
            shape_error("data size " + std::to_string(data.size()) + " does not match shape " +
                        shape_str(shape));
        n_->shape = std::move(shape);
        n_->data = std::move(data);
        n_->requires_grad = requires_grad;
    }

    static TensorT zeros(Shape shape, bool requires_grad = false) {
        auto n = shape_numel(shape);
        return TensorT(std::move(shape), std::vector<S>(static_cast<std::size_t>(n), S(0)),
                       requires_grad);
    }

    static TensorT full(Shape shape, S value, bool requires_grad = false) {
        auto n = shape_numel(shape);
        return TensorT(std::move(shape), std::vector<S>(static_cast<std::size_t>(n), value),
                       requires_grad);
    }

    static TensorT ones(Shape shape, bool requires_grad = false) {
        return full(std::move(shape), S(1), requires_grad);
    }

    static TensorT scalar(S value) { return TensorT({1}, {value}); }

    static TensorT randn(Shape shape, Rng& rng, double stddev = 1.0, bool requires_grad = false) {
        auto n = shape_numel(shape);
        std::vector<S> d(static_cast<std::size_t>(n));
        for (auto& v : d) v = static_cast<S>(rng.normal() * stddev);
        return TensorT(std::move(shape), std::move(d), requires_grad);
    }

    static TensorT trunc_normal(Shape shape, Rng& rng, double stddev,
                                bool requires_grad = false) {
        auto n = shape_numel(shape);
        std::vector<S> d(static_cast<std::size_t>(n));
        for (auto& v : d) v = static_cast<S>(rng.truncated_normal(stddev));
        return TensorT(std::move(shape), std::move(d), requires_grad);
    }

    const Shape& shape() const { return n_->shape; }
    std::int64_t dim(int i) const { return n_->shape[static_cast<std::size_t>(i)]; }
    int rank() const { return static_cast<int>(n_->shape.size()); }
    std::int64_t numel() const { return n_->numel(); }

    std::vector<S>& raw() { return n_->data; }
    const std::vector<S>& raw() const { return n_->data; }

    S item() const {
        if (numel() != 1) shape_error("item() on tensor with " + std::to_string(numel()) + " elements");
        return n_->data[0];
    }

    S at(std::initializer_list<std::int64_t> idx) const {
        std::int64_t off = 0;
        auto it = idx.begin();
        for (std::size_t d = 0; d < n_->shape.size(); ++d, ++it) off = off * n_->shape[d] + *it;
        return n_->data[static_cast<std::size_t>(off)];
    }

    bool requires_grad() const { return n_->requires_grad; }
    TensorT& set_requires_grad(bool v) {
        n_->requires_grad = v;
        return *this;
    }

    const std::vector<S>& grad_data() const {
        n_->ensure_grad();
        return n_->grad;
    }

    void zero_grad() { n_->grad.assign(n_->data.size(), S(0)); }

    TensorT detach() const { return TensorT(n_->shape, n_->data, false); }

    // Reverse-mode sweep from a scalar loss.
    void backward() {
        if (numel() != 1) shape_error("backward() requires a scalar tensor");
        std::vector<Node<S>*> order;
        std::unordered_set<Node<S>*> seen;
        topo(n_.get(), seen, order);
        n_->ensure_grad();
        n_->grad[0] = S(1);
        for (auto it = order.rbegin(); it != order.rend(); ++it) {
            Node<S>* node = *it;
            if (node->backward_fn && !node->grad.empty()) node->backward_fn(*node);
        }
    }

    std::shared_ptr<Node<S>>& node() { return n_; }
    const std::shared_ptr<Node<S>>& node() const { return n_; }

private:
    static void topo(Node<S>* root, std::unordered_set<Node<S>*>& seen,
                     std::vector<Node<S>*>& order) {
        // iterative post-order; graphs can be deep at paper depth
        struct Frame {
            Node<S>* node;
            std::size_t next_parent;
        };
        std::vector<Frame> stack{{root, 0}};
        seen.insert(root);
        while (!stack.empty()) {
            Frame& f = stack.back();
            if (f.next_parent < f.node->parents.size()) {
                Node<S>* p = f.node->parents[f.next_parent++].get();
                if (p && !seen.count(p)) {
                    seen.insert(p);
                    stack.push_back({p, 0});
                }
            } else {
                order.push_back(f.node);
                stack.pop_back();
            }
        }
    }

    std::shared_ptr<Node<S>> n_;
};

using Tensor = TensorT<float>;

namespace detail {

template <typename S>
TensorT<S> make_result(Shape shape, std::vector<S> data,
                       std::vector<TensorT<S>> parents,
                       std::function<void(Node<S>&)> backward) {
    TensorT<S> out(std::move(shape), std::move(data), false);
    bool needs = false;
    if (grad_enabled) {
        for (const auto& p : parents) needs = needs || p.requires_grad();
    }
    if (needs) {
        out.node()->requires_grad = true;
        for (auto& p : parents) out.node()->parents.push_back(p.node());
        out.node()->backward_fn = std::move(backward);
    }
    return out;
}

template <typename S>
void accumulate(const std::shared_ptr<Node<S>>& target, const std::vector<S>& contrib) {
    if (!target->requires_grad) return;
    target->ensure_grad();
    for (std::size_t i = 0; i < contrib.size(); ++i) target->grad[i] += contrib[i];
}

template <typename S>
using MatMap = Eigen::Map<Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
template <typename S>
using ConstMatMap =
    Eigen::Map<const Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise

template <typename S, typename F, typename DF>
TensorT<S> unary_op(const TensorT<S>& a, F f, DF df) {
    std::vector<S> out(a.raw().size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(a.raw()[i]);
    auto an = a.node();
    return detail::make_result<S>(a.shape(), std::move(out), {a}, [an, df](Node<S>& o) {
        if (!an->requires_grad) return;
        an->ensure_grad();
        for (std::size_t i = 0; i < o.data.size(); ++i)
            an->grad[i] += o.grad[i] * df(an->data[i], o.data[i]);
    });
}

template <typename S>
TensorT<S> relu(const TensorT<S>& a) {
    return unary_op(
        a, [](S x) { return x > S(0) ? x : S(0); },
        [](S x, S) { return x > S(0) ? S(1) : S(0); });
}

template <typename S>
TensorT<S> gelu(const TensorT<S>& a) {
    // exact form: x * Phi(x)
    return unary_op(
        a,
        [](S x) {
            return static_cast<S>(0.5 * static_cast<double>(x) *
                                  (1.0 + std::erf(static_cast<double>(x) / std::sqrt(2.0))));
        },
        [](S x, S) {
            const double xd = static_cast<double>(x);
            const double phi = std::exp(-0.5 * xd * xd) / std::sqrt(2.0 * std::numbers::pi);
            const double Phi = 0.5 * (1.0 + std::erf(xd / std::sqrt(2.0)));
            return static_cast<S>(Phi + xd * phi);
        });
}

template <typename S>
TensorT<S> elu(const TensorT<S>& a) {
    // alpha = 1
    return unary_op(
        a, [](S x) { return x > S(0) ? x : static_cast<S>(std::expm1(static_cast<double>(x))); },
        [](S x, S y) { return x > S(0) ? S(1) : y + S(1); });
}

template <typename S>
TensorT<S> mul(const TensorT<S>& a, double c) {
    return unary_op(
        a, [c](S x) { return static_cast<S>(x * c); }, [c](S, S) { return static_cast<S>(c); });
}

template <typename S>
TensorT<S> add(const TensorT<S>& a, double c) {
    return unary_op(
        a, [c](S x) { return static_cast<S>(x + c); }, [](S, S) { return S(1); });
}

enum class BroadcastKind { Same, Scalar, LastAxis };

template <typename S>
BroadcastKind broadcast_kind(const TensorT<S>& a, const TensorT<S>& b) {
    if (a.shape() == b.shape()) return BroadcastKind::Same;
    if (b.numel() == 1) return BroadcastKind::Scalar;
    if (b.rank() == 1 && a.rank() >= 1 && a.shape().back() == b.dim(0))
        return BroadcastKind::LastAxis;
    shape_error("cannot broadcast " + shape_str(b.shape()) + " against " + shape_str(a.shape()));
}

template <typename S>
TensorT<S> add(const TensorT<S>& a, const TensorT<S>& b) {
    const auto kind = broadcast_kind(a, b);
    const auto& ad = a.raw();
    const auto& bd = b.raw();
    std::vector<S> out(ad.size());
    const std::size_t d = bd.size();
    switch (kind) {
        case BroadcastKind::Same:
            for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] + bd[i];
            break;
        case BroadcastKind::Scalar:
            for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] + bd[0];
            break;
        case BroadcastKind::LastAxis:
            for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] + bd[i % d];
            break;
    }
    auto an = a.node();
    auto bn = b.node();
    return detail::make_result<S>(a.shape(), std::move(out), {a, b}, [an, bn, kind](Node<S>& o) {
        if (an->requires_grad) {
            an->ensure_grad();
            for (std::size_t i = 0; i < o.grad.size(); ++i) an->grad[i] += o.grad[i];
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            const std::size_t d = bn->data.size();
            switch (kind) {
                case BroadcastKind::Same:
                    for (std::size_t i = 0; i < o.grad.size(); ++i) bn->grad[i] += o.grad[i];
                    break;
                case BroadcastKind::Scalar:
                    for (std::size_t i = 0; i < o.grad.size(); ++i) bn->grad[0] += o.grad[i];
                    break;
                case BroadcastKind::LastAxis:
                    for (std::size_t i = 0; i < o.grad.size(); ++i) bn->grad[i % d] += o.grad[i];
                    break;
            }
        }
    });
}

template <typename S>
TensorT<S> sub(const TensorT<S>& a, const TensorT<S>& b) {
    return add(a, mul(b, -1.0));
}

template <typename S>
TensorT<S> mul(const TensorT<S>& a, const TensorT<S>& b) {
    if (a.shape() != b.shape()) shape_error("elementwise mul requires equal shapes");
    const auto& ad = a.raw();
    const auto& bd = b.raw();
    std::vector<S> out(ad.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] * bd[i];
    auto an = a.node();
    auto bn = b.node();
    return detail::make_result<S>(a.shape(), std::move(out), {a, b}, [an, bn](Node<S>& o) {
        if (an->requires_grad) {
            an->ensure_grad();
            for (std::size_t i = 0; i < o.grad.size(); ++i) an->grad[i] += o.grad[i] * bn->data[i];
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            for (std::size_t i = 0; i < o.grad.size(); ++i) bn->grad[i] += o.grad[i] * an->data[i];
        }
    });
}

// ---------------------------------------------------------------------------
// shape manipulation

template <typename S>
TensorT<S> reshape(const TensorT<S>& a, Shape shape) {
    // one extent may be -1 and is inferred
    std::int64_t known = 1;
    int infer = -1;
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (shape[i] == -1) {
            if (infer >= 0) shape_error("reshape with two inferred extents");
            infer = static_cast<int>(i);
        } else {
            known *= shape[i];
        }
    }
    if (infer >= 0) shape[static_cast<std::size_t>(infer)] = a.numel() / known;
    if (shape_numel(shape) != a.numel())
        shape_error("reshape " + shape_str(a.shape()) + " -> " + shape_str(shape));
    auto an = a.node();
    return detail::make_result<S>(std::move(shape), std::vector<S>(a.raw()), {a},
                                  [an](Node<S>& o) {
                                      if (!an->requires_grad) return;
                                      an->ensure_grad();
                                      for (std::size_t i = 0; i < o.grad.size(); ++i)
                                          an->grad[i] += o.grad[i];
                                  });
}

namespace detail {

template <typename S>
std::vector<S> permute_buffer(const std::vector<S>& data, const Shape& shape,
                              const std::vector<int>& axes, Shape& out_shape) {
    const int r = static_cast<int>(shape.size());
    Shape strides(static_cast<std::size_t>(r), 1);
    for (int i = r - 2; i >= 0; --i) strides[i] = strides[i + 1] * shape[i + 1];
    out_shape.resize(static_cast<std::size_t>(r));
    Shape src_stride(static_cast<std::size_t>(r));
    for (int i = 0; i < r; ++i) {
        out_shape[i] = shape[axes[i]];
        src_stride[i] = strides[axes[i]];
    }
    std::vector<S> out(data.size());
    Shape idx(static_cast<std::size_t>(r), 0);
    for (std::size_t o = 0; o < out.size(); ++o) {
        std::int64_t src = 0;
        for (int i = 0; i < r; ++i) src += idx[i] * src_stride[i];
        out[o] = data[static_cast<std::size_t>(src)];
        for (int i = r - 1; i >= 0; --i) {
            if (++idx[i] < out_shape[i]) break;
            idx[i] = 0;
        }
    }
    return out;
}

}  // namespace detail

template <typename S>
TensorT<S> permute(const TensorT<S>& a, std::vector<int> axes) {
    if (static_cast<int>(axes.size()) != a.rank()) shape_error("permute axes rank mismatch");
    Shape out_shape;
    auto out = detail::permute_buffer(a.raw(), a.shape(), axes, out_shape);
    std::vector<int> inv(axes.size());
    for (std::size_t i = 0; i < axes.size(); ++i) inv[axes[i]] = static_cast<int>(i);
    auto an = a.node();
    return detail::make_result<S>(std::move(out_shape), std::move(out), {a},
                                  [an, inv](Node<S>& o) {
                                      if (!an->requires_grad) return;
                                      Shape s;
                                      auto g = detail::permute_buffer(o.grad, o.shape, inv, s);
                                      detail::accumulate(an, g);
                                  });
}

// swap the last two axes
template <typename S>
TensorT<S> transpose(const TensorT<S>& a) {
    std::vector<int> axes(static_cast<std::size_t>(a.rank()));
    std::iota(axes.begin(), axes.end(), 0);
    std::swap(axes[axes.size() - 1], axes[axes.size() - 2]);
    return permute(a, axes);
}

template <typename S>
TensorT<S> slice(const TensorT<S>& a, int axis, std::int64_t start, std::int64_t len) {
    const auto& shape = a.shape();
    if (axis < 0 || axis >= a.rank()) shape_error("slice axis out of range");
    if (start < 0 || start + len > shape[axis]) shape_error("slice bounds");
    std::int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= shape[i];
    for (int i = axis + 1; i < a.rank(); ++i) inner *= shape[i];
    Shape out_shape = shape;
    out_shape[axis] = len;
    std::vector<S> out(static_cast<std::size_t>(outer * len * inner));
    const auto& src = a.raw();
    for (std::int64_t o = 0; o < outer; ++o)
        std::copy_n(src.begin() + (o * shape[axis] + start) * inner, len * inner,
                    out.begin() + o * len * inner);
    auto an = a.node();
    const std::int64_t ax_len = shape[axis];
    return detail::make_result<S>(std::move(out_shape), std::move(out), {a},
                                  [an, axis, start, len, outer, inner, ax_len](Node<S>& o) {
                                      if (!an->requires_grad) return;
                                      an->ensure_grad();
                                      for (std::int64_t ot = 0; ot < outer; ++ot)
                                          for (std::int64_t i = 0; i < len * inner; ++i)
                                              an->grad[(ot * ax_len + start) * inner + i] +=
                                                  o.grad[ot * len * inner + i];
                                  });
}

template <typename S>
TensorT<S> concat(const std::vector<TensorT<S>>& parts, int axis) {
    if (parts.empty()) shape_error("concat of nothing");
    const auto& s0 = parts[0].shape();
    std::int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= s0[i];
    for (int i = axis + 1; i < parts[0].rank(); ++i) inner *= s0[i];
    std::int64_t total_ax = 0;
    for (const auto& p : parts) {
        for (int i = 0; i < p.rank(); ++i)
            if (i != axis && p.shape()[i] != s0[i]) shape_error("concat shape mismatch");
        total_ax += p.shape()[axis];
    }
    Shape out_shape = s0;
    out_shape[axis] = total_ax;
    std::vector<S> out(static_cast<std::size_t>(outer * total_ax * inner));
    std::int64_t off = 0;
    for (const auto& p : parts) {
        const std::int64_t len = p.shape()[axis];
        for (std::int64_t o = 0; o < outer; ++o)
            std::copy_n(p.raw().begin() + o * len * inner, len * inner,
                        out.begin() + (o * total_ax + off) * inner);
        off += len;
    }
    std::vector<std::shared_ptr<Node<S>>> nodes;
    std::vector<std::int64_t> lens;
    for (const auto& p : parts) {
        nodes.push_back(p.node());
        lens.push_back(p.shape()[axis]);
    }
    return detail::make_result<S>(std::move(out_shape), std::move(out), parts,
                                  [nodes, lens, outer, inner, total_ax](Node<S>& o) {
                                      std::int64_t off = 0;
                                      for (std::size_t k = 0; k < nodes.size(); ++k) {
                                          const std::int64_t len = lens[k];
                                          if (nodes[k]->requires_grad) {
                                              nodes[k]->ensure_grad();
                                              for (std::int64_t ot = 0; ot < outer; ++ot)
                                                  for (std::int64_t i = 0; i < len * inner; ++i)
                                                      nodes[k]->grad[ot * len * inner + i] +=
                                                          o.grad[(ot * total_ax + off) * inner + i];
                                          }
                                          off += len;
                                      }
                                  });
}

// Gather token rows: x [n,L,d], indices per sample -> [n, K, d]. A source
// batch of 1 broadcasts across the index batch (used for shared tables such
// as positional embeddings); its gradient then sums over samples.
template <typename S>
TensorT<S> gather_tokens(const TensorT<S>& x, const std::vector<std::vector<int>>& idx) {
    if (x.rank() != 3) shape_error("gather_tokens expects [n,L,d]");
    const std::int64_t n = static_cast<std::int64_t>(idx.size());
    const std::int64_t L = x.dim(1), d = x.dim(2);
    const bool bcast = (x.dim(0) == 1 && n > 1);
    if (x.dim(0) != n && !bcast) shape_error("gather_tokens index batch");
    const std::int64_t K = static_cast<std::int64_t>(idx[0].size());
    std::vector<S> out(static_cast<std::size_t>(n * K * d));
    const auto& src = x.raw();
    for (std::int64_t s = 0; s < n; ++s) {
        const std::int64_t sb = bcast ? 0 : s;
        for (std::int64_t k = 0; k < K; ++k)
            std::copy_n(src.begin() + (sb * L + idx[s][k]) * d, d,
                        out.begin() + (s * K + k) * d);
    }
    auto xn = x.node();
    return detail::make_result<S>({n, K, d}, std::move(out), {x},
                                  [xn, idx, bcast, n, L, K, d](Node<S>& o) {
                                      if (!xn->requires_grad) return;
                                      xn->ensure_grad();
                                      for (std::int64_t s = 0; s < n; ++s) {
                                          const std::int64_t sb = bcast ? 0 : s;
                                          for (std::int64_t k = 0; k < K; ++k)
                                              for (std::int64_t j = 0; j < d; ++j)
                                                  xn->grad[(sb * L + idx[s][k]) * d + j] +=
                                                      o.grad[(s * K + k) * d + j];
                                      }
                                  });
}

// ---------------------------------------------------------------------------
// matmul

template <typename S>
TensorT<S> matmul(const TensorT<S>& a, const TensorT<S>& b) {
    if (a.rank() < 2 || b.rank() < 2) shape_error("matmul needs rank >= 2");
    const std::int64_t m = a.shape()[a.rank() - 2];
    const std::int64_t k = a.shape()[a.rank() - 1];
    const std::int64_t k2 = b.shape()[b.rank() - 2];
    const std::int64_t n = b.shape()[b.rank() - 1];
    if (k != k2)
        shape_error("matmul inner dims " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    const std::int64_t ba = a.numel() / (m * k);
    const std::int64_t bb = b.numel() / (k * n);
    if (ba != bb && bb != 1 && ba != 1) shape_error("matmul batch mismatch");
    const std::int64_t batch = std::max(ba, bb);
    Shape out_shape = (ba >= bb) ? a.shape() : b.shape();
    out_shape[out_shape.size() - 2] = m;
    out_shape[out_shape.size() - 1] = n;
    std::vector<S> out(static_cast<std::size_t>(batch * m * n));
    for (std::int64_t t = 0; t < batch; ++t) {
        detail::ConstMatMap<S> A(a.raw().data() + (ba == 1 ? 0 : t) * m * k, m, k);
        detail::ConstMatMap<S> B(b.raw().data() + (bb == 1 ? 0 : t) * k * n, k, n);
        detail::MatMap<S> C(out.data() + t * m * n, m, n);
        C.noalias() = A * B;
    }
    auto an = a.node();
    auto bn = b.node();
    return detail::make_result<S>(
        std::move(out_shape), std::move(out), {a, b}, [an, bn, m, k, n, ba, bb, batch](Node<S>& o) {
            for (std::int64_t t = 0; t < batch; ++t) {
                detail::ConstMatMap<S> G(o.grad.data() + t * m * n, m, n);
                if (an->requires_grad) {
                    an->ensure_grad();
                    detail::ConstMatMap<S> B(bn->data.data() + (bb == 1 ? 0 : t) * k * n, k, n);
                    detail::MatMap<S> dA(an->grad.data() + (ba == 1 ? 0 : t) * m * k, m, k);
                    dA.noalias() += G * B.transpose();
                }
                if (bn->requires_grad) {
                    bn->ensure_grad();
                    detail::ConstMatMap<S> A(an->data.data() + (ba == 1 ? 0 : t) * m * k, m, k);
                    detail::MatMap<S> dB(bn->grad.data() + (bb == 1 ? 0 : t) * k * n, k, n);
                    dB.noalias() += A.transpose() * G;
                }
            }
        });
}

// x [..., in] * w [in, out] + b [out]
template <typename S>
TensorT<S> linear(const TensorT<S>& x, const TensorT<S>& w, const TensorT<S>& b) {
    const std::int64_t in = w.dim(0), out = w.dim(1);
    if (x.shape().back() != in) shape_error("linear input width");
    auto flat = reshape(x, {-1, in});
    auto y = add(matmul(flat, w), b);
    Shape out_shape = x.shape();
    out_shape.back() = out;
    return reshape(y, std::move(out_shape));
}

// ---------------------------------------------------------------------------
// normalization and attention pieces

template <typename S>
TensorT<S> layernorm(const TensorT<S>& x, const TensorT<S>& gamma, const TensorT<S>& beta,
                     double eps = 1e-6) {
    const std::int64_t d = x.shape().back();
    if (gamma.numel() != d || beta.numel() != d) shape_error("layernorm affine width");
    const std::int64_t rows = x.numel() / d;
    std::vector<S> out(x.raw().size());
    auto xhat = std::make_shared<std::vector<S>>(x.raw().size());
    auto invstd = std::make_shared<std::vector<S>>(static_cast<std::size_t>(rows));
    const auto& xd = x.raw();
    const auto& g = gamma.raw();
    const auto& bt = beta.raw();
    for (std::int64_t r = 0; r < rows; ++r) {
        const S* row = xd.data() + r * d;
        double mean = 0;
        for (std::int64_t i = 0; i < d; ++i) mean += row[i];
        mean /= static_cast<double>(d);
        double var = 0;
        for (std::int64_t i = 0; i < d; ++i) {
            const double c = row[i] - mean;
            var += c * c;
        }
        var /= static_cast<double>(d);
        const double is = 1.0 / std::sqrt(var + eps);
        (*invstd)[r] = static_cast<S>(is);
        for (std::int64_t i = 0; i < d; ++i) {
            const S xh = static_cast<S>((row[i] - mean) * is);
            (*xhat)[r * d + i] = xh;
            out[r * d + i] = xh * g[i] + bt[i];
        }
    }
    auto xn = x.node();
    auto gn = gamma.node();
    auto bn = beta.node();
    return detail::make_result<S>(
        x.shape(), std::move(out), {x, gamma, beta}, [xn, gn, bn, xhat, invstd, rows, d](Node<S>& o) {
            for (std::int64_t r = 0; r < rows; ++r) {
                const S* go = o.grad.data() + r * d;
                const S* xh = xhat->data() + r * d;
                if (gn->requires_grad) {
                    gn->ensure_grad();
                    for (std::int64_t i = 0; i < d; ++i) gn->grad[i] += go[i] * xh[i];
                }
                if (bn->requires_grad) {
                    bn->ensure_grad();
                    for (std::int64_t i = 0; i < d; ++i) bn->grad[i] += go[i];
                }
                if (xn->requires_grad) {
                    xn->ensure_grad();
                    double sum_dxhat = 0, sum_dxhat_xhat = 0;
                    for (std::int64_t i = 0; i < d; ++i) {
                        const double dxh = static_cast<double>(go[i]) * gn->data[i];
                        sum_dxhat += dxh;
                        sum_dxhat_xhat += dxh * xh[i];
                    }
                    const double inv_d = 1.0 / static_cast<double>(d);
                    for (std::int64_t i = 0; i < d; ++i) {
                        const double dxh = static_cast<double>(go[i]) * gn->data[i];
                        xn->grad[r * d + i] += static_cast<S>(
                            (dxh - sum_dxhat * inv_d - xh[i] * sum_dxhat_xhat * inv_d) *
                            (*invstd)[r]);
                    }
                }
            }
        });
}

template <typename S>
TensorT<S> softmax(const TensorT<S>& x) {
    const std::int64_t d = x.shape().back();
    const std::int64_t rows = x.numel() / d;
    std::vector<S> out(x.raw().size());
    const auto& xd = x.raw();
    for (std::int64_t r = 0; r < rows; ++r) {
        const S* row = xd.data() + r * d;
        S mx = row[0];
        for (std::int64_t i = 1; i < d; ++i) mx = std::max(mx, row[i]);
        double sum = 0;
        for (std::int64_t i = 0; i < d; ++i) {
            const double e = std::exp(static_cast<double>(row[i] - mx));
            out[r * d + i] = static_cast<S>(e);
            sum += e;
        }
        const double inv = 1.0 / sum;
        for (std::int64_t i = 0; i < d; ++i) out[r * d + i] = static_cast<S>(out[r * d + i] * inv);
    }
    auto xn = x.node();
    return detail::make_result<S>(x.shape(), std::move(out), {x}, [xn, rows, d](Node<S>& o) {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        for (std::int64_t r = 0; r < rows; ++r) {
            const S* y = o.data.data() + r * d;
            const S* go = o.grad.data() + r * d;
            double dot = 0;
            for (std::int64_t i = 0; i < d; ++i) dot += static_cast<double>(go[i]) * y[i];
            for (std::int64_t i = 0; i < d; ++i)
                xn->grad[r * d + i] += static_cast<S>(y[i] * (go[i] - dot));
        }
    });
}

// ---------------------------------------------------------------------------
// reductions and losses

template <typename S>
TensorT<S> mean_all(const TensorT<S>& x) {
    double acc = 0;
    for (S v : x.raw()) acc += v;
    const double inv = 1.0 / static_cast<double>(x.numel());
    auto xn = x.node();
    return detail::make_result<S>({1}, {static_cast<S>(acc * inv)}, {x}, [xn, inv](Node<S>& o) {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        for (auto& g : xn->grad) g += static_cast<S>(o.grad[0] * inv);
    });
}

template <typename S>
TensorT<S> sum_all(const TensorT<S>& x) {
    double acc = 0;
    for (S v : x.raw()) acc += v;
    auto xn = x.node();
    return detail::make_result<S>({1}, {static_cast<S>(acc)}, {x}, [xn](Node<S>& o) {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        for (auto& g : xn->grad) g += o.grad[0];
    });
}

template <typename S>
TensorT<S> mse(const TensorT<S>& pred, const TensorT<S>& target) {
    if (pred.shape() != target.shape()) shape_error("mse shapes differ");
    const std::int64_t n = pred.numel();
    double acc = 0;
    for (std::int64_t i = 0; i < n; ++i) {
        const double d = static_cast<double>(pred.raw()[i]) - target.raw()[i];
        acc += d * d;
    }
    auto pn = pred.node();
    auto tn = target.node();
    const double inv = 1.0 / static_cast<double>(n);
    return detail::make_result<S>(
        {1}, {static_cast<S>(acc * inv)}, {pred, target}, [pn, tn, n, inv](Node<S>& o) {
            for (std::int64_t i = 0; i < n; ++i) {
                const S d = static_cast<S>(2.0 * inv * (pn->data[i] - tn->data[i]) * o.grad[0]);
                if (pn->requires_grad) {
                    pn->ensure_grad();
                    pn->grad[i] += d;
                }
                if (tn->requires_grad) {
                    tn->ensure_grad();
                    tn->grad[i] -= d;
                }
            }
        });
}

template <typename S>
TensorT<S> sqrt_scalar(const TensorT<S>& x) {
    if (x.numel() != 1) shape_error("sqrt_scalar expects scalar");
    const double v = static_cast<double>(x.raw()[0]);
    auto xn = x.node();
    return detail::make_result<S>({1}, {static_cast<S>(std::sqrt(v))}, {x}, [xn, v](Node<S>& o) {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        xn->grad[0] += static_cast<S>(o.grad[0] * 0.5 / std::sqrt(std::max(v, 1e-12)));
    });
}

template <typename S>
TensorT<S> rmse(const TensorT<S>& pred, const TensorT<S>& target) {
    return sqrt_scalar(mse(pred, target));
}

// logits [n,K] or [n,K,spatial...]; labels ordered (sample, spatial), mean NLL
template <typename S>
TensorT<S> cross_entropy(const TensorT<S>& logits, const std::vector<std::int64_t>& labels) {
    if (logits.rank() < 2) shape_error("cross_entropy expects [n,K,...]");
    const std::int64_t n = logits.dim(0);
    const std::int64_t K = logits.dim(1);
    std::int64_t P = 1;
    for (int i = 2; i < logits.rank(); ++i) P *= logits.shape()[i];
    const std::int64_t M = n * P;
    if (static_cast<std::int64_t>(labels.size()) != M) shape_error("cross_entropy label count");
    for (auto l : labels)
        if (l < 0 || l >= K)
            throw std::out_of_range("cross_entropy: label " + std::to_string(l) +
                                    " outside [0," + std::to_string(K) + ")");
    const auto& x = logits.raw();
    auto probs = std::make_shared<std::vector<S>>(x.size());
    double loss = 0;
    for (std::int64_t s = 0; s < n; ++s) {
        for (std::int64_t p = 0; p < P; ++p) {
            double mx = -1e300;
            for (std::int64_t k = 0; k < K; ++k)
                mx = std::max(mx, static_cast<double>(x[(s * K + k) * P + p]));
            double sum = 0;
            for (std::int64_t k = 0; k < K; ++k)
                sum += std::exp(static_cast<double>(x[(s * K + k) * P + p]) - mx);
            const double lse = mx + std::log(sum);
            for (std::int64_t k = 0; k < K; ++k)
                (*probs)[(s * K + k) * P + p] = static_cast<S>(
                    std::exp(static_cast<double>(x[(s * K + k) * P + p]) - lse));
            const std::int64_t lbl = labels[s * P + p];
            loss += lse - static_cast<double>(x[(s * K + lbl) * P + p]);
        }
    }
    const double inv = 1.0 / static_cast<double>(M);
    auto ln = logits.node();
    return detail::make_result<S>(
        {1}, {static_cast<S>(loss * inv)}, {logits}, [ln, probs, labels, n, K, P, inv](Node<S>& o) {
            if (!ln->requires_grad) return;
            ln->ensure_grad();
            const S scale = static_cast<S>(o.grad[0] * inv);
            for (std::int64_t s = 0; s < n; ++s)
                for (std::int64_t p = 0; p < P; ++p) {
                    const std::int64_t lbl = labels[s * P + p];
                    for (std::int64_t k = 0; k < K; ++k) {
                        S g = (*probs)[(s * K + k) * P + p];
                        if (k == lbl) g -= S(1);
                        ln->grad[(s * K + k) * P + p] += g * scale;
                    }
                }
        });
}

}  // namespace sarmae
