#pragma once

// Reverse-mode automatic differentiation on dense tensors.
//
// Every operation creates a Node holding its value, a forward closure that
// can recompute the value from the parents (used by finite_diff_check), and
// a backward closure that scatters the node's gradient into its parents.
// Graph wraps a designated scalar output and runs the passes in topological
// order, visiting each node exactly once.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "lnfree/common.hpp"
#include "lnfree/kernels.hpp"
#include "lnfree/tensor.hpp"

namespace lnfree {

template <typename T>
struct Node;

template <typename T>
using NodePtr = std::shared_ptr<Node<T>>;

template <typename T>
struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    std::vector<NodePtr<T>> parents;
    std::function<void()> forward_fn;   // empty for leaves
    std::function<void()> backward_fn;  // empty for leaves
    bool requires_grad = false;
    int backward_visits = 0;

    int64_t numel() const { return value.numel(); }
    const Shape& shape() const { return value.shape; }
    void zero_grad() { grad.fill(T(0)); }
};

template <typename T>
NodePtr<T> constant(Tensor<T> t) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(t);
    n->grad = Tensor<T>(n->value.shape);
    return n;
}

template <typename T>
NodePtr<T> parameter(Tensor<T> t) {
    auto n = constant(std::move(t));
    n->requires_grad = true;
    return n;
}

namespace detail {

template <typename T>
NodePtr<T> make_op(Shape out_shape, std::vector<NodePtr<T>> parents) {
    auto n = std::make_shared<Node<T>>();
    n->value = Tensor<T>(std::move(out_shape));
    n->grad = Tensor<T>(n->value.shape);
    for (const auto& p : parents) {
        if (p->requires_grad) n->requires_grad = true;
    }
    n->parents = std::move(parents);
    return n;
}

// b broadcasts against a when b.shape is a trailing suffix of a.shape
// (bias over [B,S,H], positional table over [B,S,H], ...).
inline bool is_suffix_shape(const Shape& a, const Shape& b) {
    if (b.size() > a.size()) return false;
    for (size_t i = 0; i < b.size(); ++i) {
        if (b[b.size() - 1 - i] != a[a.size() - 1 - i]) return false;
    }
    return true;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise / broadcast ops
// ---------------------------------------------------------------------------

template <typename T, typename Fwd, typename Bwd>
NodePtr<T> binary_suffix_op(NodePtr<T> a, NodePtr<T> b, Fwd fwd, Bwd bwd, const char* name) {
    if (!detail::is_suffix_shape(a->shape(), b->shape())) {
        throw InputError(std::string(name) + ": shape mismatch " + shape_str(a->shape()) + " vs " +
                         shape_str(b->shape()));
    }
    auto out = detail::make_op<T>(a->shape(), {a, b});
    Node<T>* o = out.get();
    Node<T>* pa = a.get();
    Node<T>* pb = b.get();
    const int64_t bn = b->numel();
    out->forward_fn = [o, pa, pb, bn, fwd]() {
        const int64_t n = o->numel();
        for (int64_t i = 0; i < n; ++i) o->value[i] = fwd(pa->value[i], pb->value[i % bn]);
    };
    out->backward_fn = [o, pa, pb, bn, bwd]() {
        const int64_t n = o->numel();
        for (int64_t i = 0; i < n; ++i) {
            bwd(o->grad[i], pa, pb, i, i % bn);
        }
    };
    out->forward_fn();
    return out;
}

template <typename T>
NodePtr<T> add(NodePtr<T> a, NodePtr<T> b) {
    return binary_suffix_op<T>(
        a, b, [](T x, T y) { return x + y; },
        [](T g, Node<T>* pa, Node<T>* pb, int64_t i, int64_t j) {
            if (pa->requires_grad) pa->grad[i] += g;
            if (pb->requires_grad) pb->grad[j] += g;
        },
        "add");
}

template <typename T>
NodePtr<T> sub(NodePtr<T> a, NodePtr<T> b) {
    return binary_suffix_op<T>(
        a, b, [](T x, T y) { return x - y; },
        [](T g, Node<T>* pa, Node<T>* pb, int64_t i, int64_t j) {
            if (pa->requires_grad) pa->grad[i] += g;
            if (pb->requires_grad) pb->grad[j] -= g;
        },
        "sub");
}

template <typename T>
NodePtr<T> mul(NodePtr<T> a, NodePtr<T> b) {
    return binary_suffix_op<T>(
        a, b, [](T x, T y) { return x * y; },
        [](T g, Node<T>* pa, Node<T>* pb, int64_t i, int64_t j) {
            if (pa->requires_grad) pa->grad[i] += g * pb->value[j];
            if (pb->requires_grad) pb->grad[j] += g * pa->value[i];
        },
        "mul");
}

template <typename T>
NodePtr<T> scale(NodePtr<T> a, double s) {
    auto out = detail::make_op<T>(a->shape(), {a});
    Node<T>* o = out.get();
    Node<T>* pa = a.get();
    const T sv = static_cast<T>(s);
    out->forward_fn = [o, pa, sv]() {
        for (int64_t i = 0; i < o->numel(); ++i) o->value[i] = pa->value[i] * sv;
    };
    out->backward_fn = [o, pa, sv]() {
        if (!pa->requires_grad) return;
        for (int64_t i = 0; i < o->numel(); ++i) pa->grad[i] += o->grad[i] * sv;
    };
    out->forward_fn();
    return out;
}

template <typename T>
NodePtr<T> add_scalar(NodePtr<T> a, double s) {
    auto out = detail::make_op<T>(a->shape(), {a});
    Node<T>* o = out.get();
    Node<T>* pa = a.get();
    const T sv = static_cast<T>(s);
    out->forward_fn = [o, pa, sv]() {
        for (int64_t i = 0; i < o->numel(); ++i) o->value[i] = pa->value[i] + sv;
    };
    out->backward_fn = [o, pa]() {
        if (!pa->requires_grad) return;
        for (int64_t i = 0; i < o->numel(); ++i) pa->grad[i] += o->grad[i];
    };
    out->forward_fn();
    return out;
}

template <typename T>
NodePtr<T> gelu(NodePtr<T> a) {
    auto out = detail::make_op<T>(a->shape(), {a});
    Node<T>* o = out.get();
    Node<T>* pa = a.get();
    out->forward_fn = [o, pa]() {
        for (int64_t i = 0; i < o->numel(); ++i) o->value[i] = kernels::gelu_scalar(pa->value[i]);
    };
    out->backward_fn = [o, pa]() {
        if (!pa->requires_grad) return;
        for (int64_t i = 0; i < o->numel(); ++i) {
            pa->grad[i] += o->grad[i] * kernels::gelu_grad_scalar(pa->value[i]);
        }
    };
    out->forward_fn();
    return out;
}

// ---------------------------------------------------------------------------
// matmul family: a is [*, M, K]; b is [K, N] shared across the batch or
// [*, K, N] with identical leading dims. _nt variants take b as [N, K] / [*, N, K].
// ---------------------------------------------------------------------------

namespace detail {

struct MatmulDims {
    int64_t batch;  // product of leading dims of a
    int64_t m, n, k;
    bool b_batched;
};

template <typename T>
MatmulDims matmul_dims(const NodePtr<T>& a, const NodePtr<T>& b, bool transpose_b, const char* name) {
    const Shape& sa = a->shape();
    const Shape& sb = b->shape();
    if (sa.size() < 2 || sb.size() < 2) throw InputError(std::string(name) + ": rank must be >= 2");
    MatmulDims d{};
    d.m = sa[sa.size() - 2];
    d.k = sa[sa.size() - 1];
    const int64_t bk = transpose_b ? sb[sb.size() - 1] : sb[sb.size() - 2];
    d.n = transpose_b ? sb[sb.size() - 2] : sb[sb.size() - 1];
    if (bk != d.k) {
        throw InputError(std::string(name) + ": inner dims disagree " + shape_str(sa) + " vs " + shape_str(sb));
    }
    d.batch = 1;
    for (size_t i = 0; i + 2 < sa.size(); ++i) d.batch *= sa[i];
    d.b_batched = sb.size() > 2;
    if (d.b_batched) {
        if (sb.size() != sa.size()) throw InputError(std::string(name) + ": batched operands must share rank");
        for (size_t i = 0; i + 2 < sa.size(); ++i) {
            if (sa[i] != sb[i]) throw InputError(std::string(name) + ": batch dims disagree");
        }
    }
    return d;
}

}  // namespace detail

template <typename T>
NodePtr<T> matmul(NodePtr<T> a, NodePtr<T> b) {
    const auto d = detail::matmul_dims(a, b, false, "matmul");
    Shape out_shape(a->shape().begin(), a->shape().end() - 1);
    out_shape.push_back(d.n);
    auto out = detail::make_op<T>(std::move(out_shape), {a, b});
    Node<T>* o = out.get();
    Node<T>* pa = a.get();
    Node<T>* pb = b.get();
    out->forward_fn = [o, pa, pb, d]() {
        o->value.fill(T(0));
        for (int64_t g = 0; g < d.batch; ++g) {
            const T* ap = pa->value.data.data() + g * d.m * d.k;
            const T* bp = pb->value.data.data() + (d.b_batched ? g * d.k * d.n : 0);
            kernels::gemm_nn(ap, bp, o->value.data.data() + g * d.m * d.n, d.m, d.n, d.k);
        }
    };
    out->backward_fn = [o, pa, pb, d]() {
        for (int64_t g = 0; g < d.batch; ++g) {
            const T* gp = o->grad.data.data() + g * d.m * d.n;
            if (pa->requires_grad) {
                const T* bp = pb->value.data.data() + (d.b_batched ? g * d.k * d.n : 0);
                kernels::gemm_nt(gp, bp, pa->grad.data.data() + g * d.m * d.k, d.m, d.k, d.n);
            }
            if (pb->requires_grad) {
                const T* ap = pa->value.data.data() + g * d.m * d.k;
                kernels::gemm_tn(ap, gp, pb->grad.data.data() + (d.b_batched ? g * d.k * d.n : 0), d.m, d.n, d.k);
            }
        }
    };
    out->forward_fn();
    return out;
}

// out = a @ b^T, used for attention scores (q k^T) and the tied unembedding.
template <typename T>
NodePtr<T> matmul_nt(NodePtr<T> a, NodePtr<T> b) {
    const auto d = detail::matmul_dims(a, b, true, "matmul_nt");
    Shape out_shape(a->shape().begin(), a->shape().end() - 1);
    out_shape.push_back(d.n);
    auto out = detail::make_op<T>(std::move(out_shape), {a, b});
    Node<T>* o = out.get();
    Node<T>* pa = a.get();
    Node<T>* pb = b.get();
    out->forward_fn = [o, pa, pb, d]() {
        o->value.fill(T(0));
        for (int64_t g = 0; g < d.batch; ++g) {
            const T* ap = pa->value.data.data() + g * d.m * d.k;
            const T* bp = pb->value.data.data() + (d.b_batched ? g * d.n * d.k : 0);
            kernels::gemm_nt(ap, bp, o->value.data.data() + g * d.m * d.n, d.m, d.n, d.k);
        }
    };
    out->backward_fn = [o, pa, pb, d]() {
        for (int64_t g = 0; g < d.batch; ++g) {
            const T* gp = o->grad.data.data() + g * d.m * d.n;
            if (pa->requires_grad) {
                const T* bp = pb->value.data.data() + (d.b_batched ? g * d.n * d.k : 0);
                kernels::gemm_nn(gp, bp, pa->grad.data.data() + g * d.m * d.k, d.m, d.k, d.n);
            }
            if (pb->requires_grad) {
                const T* ap = pa->value.data.data() + g * d.m * d.k;
                kernels::gemm_tn(gp, ap, pb->grad.data.data() + (d.b_batched ? g * d.n * d.k : 0), d.m, d.k, d.n);
            }
        }
    };
    out->forward_fn();
    return out;
}

// ---------------------------------------------------------------------------
// softmax
// ---------------------------------------------------------------------------

template <typename T>
NodePtr<T> softmax_last(NodePtr<T> a) {
    auto out = detail::make_op<T>(a->shape(), {a});
    Node<T>* o = out.get();
    Node<T>* pa = a.get();
    const int64_t n = a->value.dim(-1);
    const int64_t rows = a->numel() / n;
    out->forward_fn = [o, pa, rows, n]() {
        for (int64_t r = 0; r < rows; ++r) {
            const T* src = pa->value.data.data() + r * n;
            T* dst = o->value.data.data() + r * n;
            std::copy(src, src + n, dst);
            kernels::softmax_row(dst, n);
        }
    };
    out->backward_fn = [o, pa, rows, n]() {
        if (!pa->requires_grad) return;
        for (int64_t r = 0; r < rows; ++r) {
            const T* p = o->value.data.data() + r * n;
            const T* g = o->grad.data.data() + r * n;
            T dot = T(0);
            for (int64_t i = 0; i < n; ++i) dot += g[i] * p[i];
            T* dst = pa->grad.data.data() + r * n;
            for (int64_t i = 0; i < n; ++i) dst[i] += p[i] * (g[i] - dot);
        }
    };
    out->forward_fn();
    return out;
}

// Softmax over the last dim with a causal mask: row q only attends to keys
// <= q (q indexes the second-to-last dim). Masked entries are exactly zero.
template <typename T>
NodePtr<T> causal_softmax(NodePtr<T> a) {
    const Shape& s = a->shape();
    if (s.size() < 2 || s[s.size() - 1] != s[s.size() - 2]) {
        throw InputError("causal_softmax: expected [..., S, S], got " + shape_str(s));
    }
    const int64_t seq = s[s.size() - 1];
    const int64_t mats = a->numel() / (seq * seq);
    auto out = detail::make_op<T>(s, {a});
    Node<T>* o = out.get();
    Node<T>* pa = a.get();
    out->forward_fn = [o, pa, mats, seq]() {
        for (int64_t m = 0; m < mats; ++m) {
            for (int64_t q = 0; q < seq; ++q) {
                const int64_t off = (m * seq + q) * seq;
                const T* src = pa->value.data.data() + off;
                T* dst = o->value.data.data() + off;
                std::copy(src, src + q + 1, dst);
                kernels::softmax_row(dst, q + 1);
                std::fill(dst + q + 1, dst + seq, T(0));
            }
        }
    };
    out->backward_fn = [o, pa, mats, seq]() {
        if (!pa->requires_grad) return;
        for (int64_t m = 0; m < mats; ++m) {
            for (int64_t q = 0; q < seq; ++q) {
                const int64_t off = (m * seq + q) * seq;
                const T* p = o->value.data.data() + off;
                const T* g = o->grad.data.data() + off;
                T dot = T(0);
                for (int64_t i = 0; i <= q; ++i) dot += g[i] * p[i];
                T* dst = pa->grad.data.data() + off;
                for (int64_t i = 0; i <= q; ++i) dst[i] += p[i] * (g[i] - dot);
            }
        }
    };
    out->forward_fn();
    return out;
}

// ---------------------------------------------------------------------------
// lookups and reshapes
// ---------------------------------------------------------------------------

template <typename T>
NodePtr<T> embedding(NodePtr<T> table, const TensorI& ids) {
    const Shape& ts = table->shape();
    if (ts.size() != 2) throw InputError("embedding: table must be [V, H]");
    const int64_t vocab = ts[0];
    const int64_t width = ts[1];
    for (int32_t id : ids.data) {
        if (id < 0 || id >= vocab) {
            throw InputError("embedding: token id " + std::to_string(id) + " out of range [0," +
                             std::to_string(vocab) + ")");
        }
    }
    Shape out_shape = ids.shape;
    out_shape.push_back(width);
    auto out = detail::make_op<T>(std::move(out_shape), {table});
    Node<T>* o = out.get();
    Node<T>* pt = table.get();
    const std::vector<int32_t> idv = ids.data;
    out->forward_fn = [o, pt, idv, width]() {
        for (size_t r = 0; r < idv.size(); ++r) {
            const T* src = pt->value.data.data() + static_cast<int64_t>(idv[r]) * width;
            std::copy(src, src + width, o->value.data.data() + static_cast<int64_t>(r) * width);
        }
    };
    out->backward_fn = [o, pt, idv, width]() {
        if (!pt->requires_grad) return;
        for (size_t r = 0; r < idv.size(); ++r) {
            const T* g = o->grad.data.data() + static_cast<int64_t>(r) * width;
            T* dst = pt->grad.data.data() + static_cast<int64_t>(idv[r]) * width;
            for (int64_t i = 0; i < width; ++i) dst[i] += g[i];
        }
    };
    out->forward_fn();
    return out;
}

// First n rows of a [R, H] table (positional embeddings for a length-n input).
template <typename T>
NodePtr<T> first_rows(NodePtr<T> table, int64_t n) {
    const Shape& ts = table->shape();
    if (ts.size() != 2 || n > ts[0]) throw InputError("first_rows: need [R, H] with n <= R");
    const int64_t width = ts[1];
    auto out = detail::make_op<T>({n, width}, {table});
    Node<T>* o = out.get();
    Node<T>* pt = table.get();
    out->forward_fn = [o, pt, n, width]() {
        std::copy(pt->value.data.data(), pt->value.data.data() + n * width, o->value.data.data());
    };
    out->backward_fn = [o, pt, n, width]() {
        if (!pt->requires_grad) return;
        for (int64_t i = 0; i < n * width; ++i) pt->grad[i] += o->grad[i];
    };
    out->forward_fn();
    return out;
}

template <typename T>
NodePtr<T> split_heads(NodePtr<T> x, int64_t n_heads) {
    const Shape& s = x->shape();
    if (s.size() != 3 || s[2] % n_heads != 0) throw InputError("split_heads: expected [B, S, H]");
    const int64_t b = s[0], seq = s[1], width = s[2], dh = width / n_heads;
    auto out = detail::make_op<T>({b, n_heads, seq, dh}, {x});
    Node<T>* o = out.get();
    Node<T>* px = x.get();
    out->forward_fn = [o, px, b, seq, n_heads, dh, width]() {
        for (int64_t bi = 0; bi < b; ++bi)
            for (int64_t h = 0; h < n_heads; ++h)
                for (int64_t si = 0; si < seq; ++si) {
                    const T* src = px->value.data.data() + (bi * seq + si) * width + h * dh;
                    T* dst = o->value.data.data() + ((bi * n_heads + h) * seq + si) * dh;
                    std::copy(src, src + dh, dst);
                }
    };
    out->backward_fn = [o, px, b, seq, n_heads, dh, width]() {
        if (!px->requires_grad) return;
        for (int64_t bi = 0; bi < b; ++bi)
            for (int64_t h = 0; h < n_heads; ++h)
                for (int64_t si = 0; si < seq; ++si) {
                    const T* g = o->grad.data.data() + ((bi * n_heads + h) * seq + si) * dh;
                    T* dst = px->grad.data.data() + (bi * seq + si) * width + h * dh;
                    for (int64_t i = 0; i < dh; ++i) dst[i] += g[i];
                }
    };
    out->forward_fn();
    return out;
}

template <typename T>
NodePtr<T> merge_heads(NodePtr<T> x) {
    const Shape& s = x->shape();
    if (s.size() != 4) throw InputError("merge_heads: expected [B, nh, S, dh]");
    const int64_t b = s[0], n_heads = s[1], seq = s[2], dh = s[3], width = n_heads * dh;
    auto out = detail::make_op<T>({b, seq, width}, {x});
    Node<T>* o = out.get();
    Node<T>* px = x.get();
    out->forward_fn = [o, px, b, seq, n_heads, dh, width]() {
        for (int64_t bi = 0; bi < b; ++bi)
            for (int64_t h = 0; h < n_heads; ++h)
                for (int64_t si = 0; si < seq; ++si) {
                    const T* src = px->value.data.data() + ((bi * n_heads + h) * seq + si) * dh;
                    T* dst = o->value.data.data() + (bi * seq + si) * width + h * dh;
                    std::copy(src, src + dh, dst);
                }
    };
    out->backward_fn = [o, px, b, seq, n_heads, dh, width]() {
        if (!px->requires_grad) return;
        for (int64_t bi = 0; bi < b; ++bi)
            for (int64_t h = 0; h < n_heads; ++h)
                for (int64_t si = 0; si < seq; ++si) {
                    const T* g = o->grad.data.data() + (bi * seq + si) * width + h * dh;
                    T* dst = px->grad.data.data() + ((bi * n_heads + h) * seq + si) * dh;
                    for (int64_t i = 0; i < dh; ++i) dst[i] += g[i];
                }
    };
    out->forward_fn();
    return out;
}

// ---------------------------------------------------------------------------
// normalization ops
// ---------------------------------------------------------------------------

// y = (x - mu) / sqrt(var + eps) * gamma + beta, per position over the last dim.
template <typename T>
NodePtr<T> layer_norm(NodePtr<T> x, NodePtr<T> gamma, NodePtr<T> beta, double eps) {
    const int64_t h = x->value.dim(-1);
    if (gamma->numel() != h || beta->numel() != h) throw InputError("layer_norm: gamma/beta length mismatch");
    const int64_t rows = x->numel() / h;
    auto out = detail::make_op<T>(x->shape(), {x, gamma, beta});
    Node<T>* o = out.get();
    Node<T>* px = x.get();
    Node<T>* pg = gamma.get();
    Node<T>* pb = beta.get();
    const T epsv = static_cast<T>(eps);
    out->forward_fn = [o, px, pg, pb, rows, h, epsv]() {
        for (int64_t r = 0; r < rows; ++r) {
            const T* xr = px->value.data.data() + r * h;
            T* yr = o->value.data.data() + r * h;
            T mean, sigma;
            kernels::row_mean_sigma(xr, h, epsv, &mean, &sigma);
            const T inv = T(1) / sigma;
            for (int64_t i = 0; i < h; ++i) yr[i] = (xr[i] - mean) * inv * pg->value[i] + pb->value[i];
        }
    };
    out->backward_fn = [o, px, pg, pb, rows, h, epsv]() {
        for (int64_t r = 0; r < rows; ++r) {
            const T* xr = px->value.data.data() + r * h;
            const T* gr = o->grad.data.data() + r * h;
            T mean, sigma;
            kernels::row_mean_sigma(xr, h, epsv, &mean, &sigma);
            const T inv = T(1) / sigma;
            T sum_gg = T(0), sum_ggx = T(0);
            for (int64_t i = 0; i < h; ++i) {
                const T xhat = (xr[i] - mean) * inv;
                const T gg = gr[i] * pg->value[i];
                sum_gg += gg;
                sum_ggx += gg * xhat;
                if (pg->requires_grad) pg->grad[i] += gr[i] * xhat;
                if (pb->requires_grad) pb->grad[i] += gr[i];
            }
            if (px->requires_grad) {
                const T mean_gg = sum_gg / T(h);
                const T mean_ggx = sum_ggx / T(h);
                T* dst = px->grad.data.data() + r * h;
                for (int64_t i = 0; i < h; ++i) {
                    const T xhat = (xr[i] - mean) * inv;
                    dst[i] += (gr[i] * pg->value[i] - mean_gg - xhat * mean_ggx) * inv;
                }
            }
        }
    };
    out->forward_fn();
    return out;
}

// y = (x - mu) / sigma_bar * gamma + beta with a frozen scalar sigma_bar;
// linear in x for fixed sigma_bar.
template <typename T>
NodePtr<T> fake_ln(NodePtr<T> x, NodePtr<T> gamma, NodePtr<T> beta, double sigma_bar) {
    if (!(sigma_bar > 0.0)) throw ConfigError("fake_ln: sigma_bar must be positive");
    const int64_t h = x->value.dim(-1);
    if (gamma->numel() != h || beta->numel() != h) throw InputError("fake_ln: gamma/beta length mismatch");
    const int64_t rows = x->numel() / h;
    auto out = detail::make_op<T>(x->shape(), {x, gamma, beta});
    Node<T>* o = out.get();
    Node<T>* px = x.get();
    Node<T>* pg = gamma.get();
    Node<T>* pb = beta.get();
    const T inv = T(1) / static_cast<T>(sigma_bar);
    out->forward_fn = [o, px, pg, pb, rows, h, inv]() {
        for (int64_t r = 0; r < rows; ++r) {
            const T* xr = px->value.data.data() + r * h;
            T* yr = o->value.data.data() + r * h;
            T mean = T(0);
            for (int64_t i = 0; i < h; ++i) mean += xr[i];
            mean /= T(h);
            for (int64_t i = 0; i < h; ++i) yr[i] = (xr[i] - mean) * inv * pg->value[i] + pb->value[i];
        }
    };
    out->backward_fn = [o, px, pg, pb, rows, h, inv]() {
        for (int64_t r = 0; r < rows; ++r) {
            const T* xr = px->value.data.data() + r * h;
            const T* gr = o->grad.data.data() + r * h;
            T mean = T(0), sum_gg = T(0);
            for (int64_t i = 0; i < h; ++i) mean += xr[i];
            mean /= T(h);
            for (int64_t i = 0; i < h; ++i) {
                const T gg = gr[i] * pg->value[i];
                sum_gg += gg;
                if (pg->requires_grad) pg->grad[i] += gr[i] * (xr[i] - mean) * inv;
                if (pb->requires_grad) pb->grad[i] += gr[i];
            }
            if (px->requires_grad) {
                const T mean_gg = sum_gg / T(h);
                T* dst = px->grad.data.data() + r * h;
                for (int64_t i = 0; i < h; ++i) dst[i] += (gr[i] * pg->value[i] - mean_gg) * inv;
            }
        }
    };
    out->forward_fn();
    return out;
}

// Per-position standard deviation sqrt(mean (x - mu)^2 + eps): [*, H] -> [*].
template <typename T>
NodePtr<T> sigma(NodePtr<T> x, double eps) {
    const Shape& s = x->shape();
    if (s.size() < 1) throw InputError("sigma: rank must be >= 1");
    const int64_t h = s[s.size() - 1];
    const int64_t rows = x->numel() / h;
    Shape out_shape(s.begin(), s.end() - 1);
    if (out_shape.empty()) out_shape.push_back(1);
    auto out = detail::make_op<T>(std::move(out_shape), {x});
    Node<T>* o = out.get();
    Node<T>* px = x.get();
    const T epsv = static_cast<T>(eps);
    out->forward_fn = [o, px, rows, h, epsv]() {
        for (int64_t r = 0; r < rows; ++r) {
            T mean, sig;
            kernels::row_mean_sigma(px->value.data.data() + r * h, h, epsv, &mean, &sig);
            o->value[r] = sig;
        }
    };
    out->backward_fn = [o, px, rows, h, epsv]() {
        if (!px->requires_grad) return;
        for (int64_t r = 0; r < rows; ++r) {
            const T* xr = px->value.data.data() + r * h;
            T mean, sig;
            kernels::row_mean_sigma(xr, h, epsv, &mean, &sig);
            const T coeff = o->grad[r] / (T(h) * sig);
            T* dst = px->grad.data.data() + r * h;
            for (int64_t i = 0; i < h; ++i) dst[i] += coeff * (xr[i] - mean);
        }
    };
    out->forward_fn();
    return out;
}

// ---------------------------------------------------------------------------
// losses and reductions
// ---------------------------------------------------------------------------

// Mean negative log-likelihood in nats over every position of targets.
template <typename T>
NodePtr<T> cross_entropy(NodePtr<T> logits, const TensorI& targets) {
    const Shape& s = logits->shape();
    const int64_t vocab = s[s.size() - 1];
    const int64_t rows = logits->numel() / vocab;
    if (static_cast<int64_t>(targets.data.size()) != rows) {
        throw InputError("cross_entropy: targets do not match logits rows");
    }
    for (int32_t t : targets.data) {
        if (t < 0 || t >= vocab) throw InputError("cross_entropy: target id out of range");
    }
    auto out = detail::make_op<T>({1}, {logits});
    Node<T>* o = out.get();
    Node<T>* pl = logits.get();
    const std::vector<int32_t> tv = targets.data;
    out->forward_fn = [o, pl, tv, rows, vocab]() {
        T total = T(0);
        for (int64_t r = 0; r < rows; ++r) {
            const T* row = pl->value.data.data() + r * vocab;
            total += kernels::logsumexp_row(row, vocab) - row[tv[static_cast<size_t>(r)]];
        }
        o->value[0] = total / T(rows);
    };
    out->backward_fn = [o, pl, tv, rows, vocab]() {
        if (!pl->requires_grad) return;
        const T g = o->grad[0] / T(rows);
        std::vector<T> probs(static_cast<size_t>(vocab));
        for (int64_t r = 0; r < rows; ++r) {
            const T* row = pl->value.data.data() + r * vocab;
            std::copy(row, row + vocab, probs.data());
            kernels::softmax_row(probs.data(), vocab);
            T* dst = pl->grad.data.data() + r * vocab;
            for (int64_t v = 0; v < vocab; ++v) dst[v] += g * probs[static_cast<size_t>(v)];
            dst[tv[static_cast<size_t>(r)]] -= g;
        }
    };
    out->forward_fn();
    return out;
}

template <typename T>
NodePtr<T> sum_all(NodePtr<T> a) {
    auto out = detail::make_op<T>({1}, {a});
    Node<T>* o = out.get();
    Node<T>* pa = a.get();
    out->forward_fn = [o, pa]() {
        T total = T(0);
        for (int64_t i = 0; i < pa->numel(); ++i) total += pa->value[i];
        o->value[0] = total;
    };
    out->backward_fn = [o, pa]() {
        if (!pa->requires_grad) return;
        for (int64_t i = 0; i < pa->numel(); ++i) pa->grad[i] += o->grad[0];
    };
    out->forward_fn();
    return out;
}

template <typename T>
NodePtr<T> mean_all(NodePtr<T> a) {
    return scale(sum_all(a), 1.0 / static_cast<double>(a->numel()));
}

// Scalar linear readout sum(a * weights); any logit-difference metric is a
// special case with a +-1 mask.
template <typename T>
NodePtr<T> inner(NodePtr<T> a, Tensor<T> weights) {
    if (weights.shape != a->shape()) throw InputError("inner: weight shape mismatch");
    auto out = detail::make_op<T>({1}, {a});
    Node<T>* o = out.get();
    Node<T>* pa = a.get();
    auto w = std::make_shared<Tensor<T>>(std::move(weights));
    out->forward_fn = [o, pa, w]() {
        T total = T(0);
        for (int64_t i = 0; i < pa->numel(); ++i) total += pa->value[i] * (*w)[i];
        o->value[0] = total;
    };
    out->backward_fn = [o, pa, w]() {
        if (!pa->requires_grad) return;
        for (int64_t i = 0; i < pa->numel(); ++i) pa->grad[i] += o->grad[0] * (*w)[i];
    };
    out->forward_fn();
    return out;
}

// ---------------------------------------------------------------------------
// intervention ops: both forward a copy of x with selected entries replaced
// by constants; gradients are blocked at the replaced entries.
// ---------------------------------------------------------------------------

// Replace position `pos` along dim 1 of x [B, S, H] with values [B, H].
// pos < 0 replaces every position; values must then be [B, S, H].
template <typename T>
NodePtr<T> overwrite_position(NodePtr<T> x, int64_t pos, Tensor<T> values) {
    const Shape& s = x->shape();
    if (s.size() != 3) throw InputError("overwrite_position: expected [B, S, H]");
    const int64_t b = s[0], seq = s[1], h = s[2];
    if (pos >= seq) throw InputError("overwrite_position: position out of range");
    const Shape want = pos < 0 ? Shape{b, seq, h} : Shape{b, h};
    if (values.shape != want) {
        throw InputError("overwrite_position: values must be " + shape_str(want));
    }
    auto out = detail::make_op<T>(s, {x});
    Node<T>* o = out.get();
    Node<T>* px = x.get();
    auto vals = std::make_shared<Tensor<T>>(std::move(values));
    out->forward_fn = [o, px, vals, b, seq, h, pos]() {
        o->value.data = px->value.data;
        if (pos < 0) {
            o->value.data = vals->data;
        } else {
            for (int64_t bi = 0; bi < b; ++bi) {
                std::copy(vals->data.data() + bi * h, vals->data.data() + (bi + 1) * h,
                          o->value.data.data() + (bi * seq + pos) * h);
            }
        }
    };
    out->backward_fn = [o, px, b, seq, h, pos]() {
        if (!px->requires_grad || pos < 0) return;
        for (int64_t bi = 0; bi < b; ++bi) {
            for (int64_t si = 0; si < seq; ++si) {
                if (si == pos) continue;
                const int64_t off = (bi * seq + si) * h;
                for (int64_t i = 0; i < h; ++i) px->grad[off + i] += o->grad[off + i];
            }
        }
    };
    out->forward_fn();
    return out;
}

// Clamp selected features of the last dim to fixed values.
template <typename T>
NodePtr<T> clamp_features(NodePtr<T> x, std::vector<std::pair<int64_t, T>> clamps) {
    const int64_t h = x->value.dim(-1);
    for (const auto& [f, v] : clamps) {
        if (f < 0 || f >= h) throw InputError("clamp_features: feature index out of range");
    }
    const int64_t rows = x->numel() / h;
    auto out = detail::make_op<T>(x->shape(), {x});
    Node<T>* o = out.get();
    Node<T>* px = x.get();
    auto cl = std::make_shared<std::vector<std::pair<int64_t, T>>>(std::move(clamps));
    out->forward_fn = [o, px, cl, rows, h]() {
        o->value.data = px->value.data;
        for (int64_t r = 0; r < rows; ++r) {
            for (const auto& [f, v] : *cl) o->value[r * h + f] = v;
        }
    };
    out->backward_fn = [o, px, cl, rows, h]() {
        if (!px->requires_grad) return;
        std::vector<bool> blocked(static_cast<size_t>(h), false);
        for (const auto& [f, v] : *cl) blocked[static_cast<size_t>(f)] = true;
        for (int64_t r = 0; r < rows; ++r) {
            for (int64_t i = 0; i < h; ++i) {
                if (!blocked[static_cast<size_t>(i)]) px->grad[r * h + i] += o->grad[r * h + i];
            }
        }
    };
    out->forward_fn();
    return out;
}

// ---------------------------------------------------------------------------
// Graph: a designated scalar output plus the passes over its closure.
// ---------------------------------------------------------------------------

template <typename T>
class Graph {
public:
    explicit Graph(NodePtr<T> output) : output_(std::move(output)) {
        if (!output_) throw ProtocolError("Graph: null output");
        build_topo();
    }

    const NodePtr<T>& output() const { return output_; }
    int64_t node_count() const { return static_cast<int64_t>(topo_.size()); }
    bool backward_done() const { return backward_done_; }

    // Reverse-mode pass. Each node's backward closure runs exactly once, in
    // reverse topological order. Leaf (parameter) gradients accumulate, so a
    // graph must only be walked once; build a fresh graph per evaluation.
    void backward() {
        if (output_->numel() != 1) {
            throw ProtocolError("Graph::backward: output must be scalar, got " + shape_str(output_->shape()));
        }
        if (backward_done_) throw ProtocolError("Graph::backward: already run for this graph");
        output_->grad.fill(T(1));
        for (auto it = topo_.rbegin(); it != topo_.rend(); ++it) {
            Node<T>* n = *it;
            ++n->backward_visits;
            if (n->backward_fn && n->requires_grad) n->backward_fn();
        }
        backward_done_ = true;
    }

    // Recompute every non-leaf value from current leaf values, in topological
    // order. Used by finite differencing.
    void recompute() {
        for (Node<T>* n : topo_) {
            if (n->forward_fn) n->forward_fn();
        }
    }

    std::unordered_map<Node<T>*, Tensor<T>> gradient(const std::vector<NodePtr<T>>& params) {
        if (!backward_done_) backward();
        std::unordered_map<Node<T>*, Tensor<T>> out;
        for (const auto& p : params) out.emplace(p.get(), p->grad);
        return out;
    }

    const std::vector<Node<T>*>& topo() const { return topo_; }

private:
    void build_topo() {
        std::unordered_set<const Node<T>*> seen;
        std::vector<std::pair<Node<T>*, size_t>> stack;
        stack.push_back({output_.get(), 0});
        seen.insert(output_.get());
        while (!stack.empty()) {
            auto& [node, idx] = stack.back();
            if (idx < node->parents.size()) {
                Node<T>* parent = node->parents[idx].get();
                ++idx;
                if (seen.insert(parent).second) stack.push_back({parent, 0});
            } else {
                topo_.push_back(node);
                stack.pop_back();
            }
        }
    }

    NodePtr<T> output_;
    std::vector<Node<T>*> topo_;
    bool backward_done_ = false;
};

// Max relative discrepancy between the analytic gradient of the graph output
// w.r.t. param and a central finite difference with step h. 64-bit only.
template <typename T>
double finite_diff_check(Graph<T>& g, const NodePtr<T>& param, double h) {
    static_assert(sizeof(T) >= 8, "finite_diff_check requires a 64-bit dtype");
    if (!param->requires_grad) throw ProtocolError("finite_diff_check: param does not require grad");
    if (!g.backward_done()) g.backward();
    double worst = 0.0;
    for (int64_t i = 0; i < param->numel(); ++i) {
        const T saved = param->value[i];
        param->value[i] = saved + static_cast<T>(h);
        g.recompute();
        const double f_plus = static_cast<double>(g.output()->value[0]);
        param->value[i] = saved - static_cast<T>(h);
        g.recompute();
        const double f_minus = static_cast<double>(g.output()->value[0]);
        param->value[i] = saved;
        const double central = (f_plus - f_minus) / (2.0 * h);
        const double analytic = static_cast<double>(param->grad[i]);
        const double rel = std::abs(analytic - central) / (std::abs(analytic) + std::abs(central) + 1e-12);
        worst = std::max(worst, rel);
    }
    g.recompute();
    return worst;
}

}  // namespace lnfree
