#pragma once

// Reverse-mode autodiff over dense f64 tensors. The graph is built
// implicitly: each op returns a shared node holding its value, its parents
// and a backward closure. backward(loss) runs the closures in reverse
// topological order. Nodes whose ancestors contain no grad-requiring leaf
// carry no closure, so eval-mode forwards pay only for the arithmetic.

#include "weightflow/tensor.hpp"

#include <functional>
#include <memory>
#include <unordered_set>
#include <vector>

namespace wf {

struct Node;
using Value = std::shared_ptr<Node>;

struct Node {
    Tensor t;
    std::vector<Value> parents;
    std::function<void()> backprop; // accumulates into parents' grads
    bool needs_grad = false;
    bool backward_done = false;

    const Tensor& val() const { return t; }
    const std::vector<int>& shape() const { return t.shape; }
    int rows() const { return t.rows(); }
    int cols() const { return t.cols(); }
};

inline Value leaf(Tensor t, bool requires_grad = true) {
    auto n = std::make_shared<Node>();
    n->t = std::move(t);
    n->t.requires_grad = requires_grad;
    n->needs_grad = requires_grad;
    if (requires_grad) n->t.alloc_grad();
    return n;
}

inline Value constant(Tensor t) { return leaf(std::move(t), false); }

namespace ad_detail {

inline Value make_node(Tensor value, std::vector<Value> parents, std::function<void()> bp) {
    auto n = std::make_shared<Node>();
    n->t = std::move(value);
    for (const auto& p : parents) n->needs_grad = n->needs_grad || p->needs_grad;
    if (n->needs_grad) {
        n->t.alloc_grad();
        n->parents = std::move(parents);
        n->backprop = std::move(bp);
    }
    return n;
}

} // namespace ad_detail

// ---------------------------------------------------------------------------
// core ops

inline Value add(const Value& a, const Value& b) {
    if (!a->t.same_shape(b->t)) fail("shape_mismatch", "add " + shape_str(a->shape()) + " vs " + shape_str(b->shape()));
    Tensor out = a->t;
    for (size_t i = 0; i < out.data.size(); ++i) out.data[i] += b->t.data[i];
    Value av = a, bv = b;
    auto n = ad_detail::make_node(std::move(out), {a, b}, nullptr);
    if (n->needs_grad) {
        Node* np = n.get();
        n->backprop = [np, av, bv] {
            if (av->needs_grad)
                for (size_t i = 0; i < np->t.grad.size(); ++i) av->t.grad[i] += np->t.grad[i];
            if (bv->needs_grad)
                for (size_t i = 0; i < np->t.grad.size(); ++i) bv->t.grad[i] += np->t.grad[i];
        };
    }
    return n;
}

inline Value sub(const Value& a, const Value& b) {
    if (!a->t.same_shape(b->t)) fail("shape_mismatch", "sub " + shape_str(a->shape()) + " vs " + shape_str(b->shape()));
    Tensor out = a->t;
    for (size_t i = 0; i < out.data.size(); ++i) out.data[i] -= b->t.data[i];
    Value av = a, bv = b;
    auto n = ad_detail::make_node(std::move(out), {a, b}, nullptr);
    if (n->needs_grad) {
        Node* np = n.get();
        n->backprop = [np, av, bv] {
            if (av->needs_grad)
                for (size_t i = 0; i < np->t.grad.size(); ++i) av->t.grad[i] += np->t.grad[i];
            if (bv->needs_grad)
                for (size_t i = 0; i < np->t.grad.size(); ++i) bv->t.grad[i] -= np->t.grad[i];
        };
    }
    return n;
}

inline Value mul(const Value& a, const Value& b) {
    if (!a->t.same_shape(b->t)) fail("shape_mismatch", "mul " + shape_str(a->shape()) + " vs " + shape_str(b->shape()));
    Tensor out = a->t;
    for (size_t i = 0; i < out.data.size(); ++i) out.data[i] *= b->t.data[i];
    Value av = a, bv = b;
    auto n = ad_detail::make_node(std::move(out), {a, b}, nullptr);
    if (n->needs_grad) {
        Node* np = n.get();
        n->backprop = [np, av, bv] {
            if (av->needs_grad)
                for (size_t i = 0; i < np->t.grad.size(); ++i) av->t.grad[i] += np->t.grad[i] * bv->t.data[i];
            if (bv->needs_grad)
                for (size_t i = 0; i < np->t.grad.size(); ++i) bv->t.grad[i] += np->t.grad[i] * av->t.data[i];
        };
    }
    return n;
}

inline Value scale(const Value& a, double s) {
    Tensor out = a->t;
    for (double& v : out.data) v *= s;
    Value av = a;
    auto n = ad_detail::make_node(std::move(out), {a}, nullptr);
    if (n->needs_grad) {
        Node* np = n.get();
        n->backprop = [np, av, s] {
            for (size_t i = 0; i < np->t.grad.size(); ++i) av->t.grad[i] += np->t.grad[i] * s;
        };
    }
    return n;
}

inline Value add_const(const Value& a, double c) {
    Tensor out = a->t;
    for (double& v : out.data) v += c;
    Value av = a;
    auto n = ad_detail::make_node(std::move(out), {a}, nullptr);
    if (n->needs_grad) {
        Node* np = n.get();
        n->backprop = [np, av] {
            for (size_t i = 0; i < np->t.grad.size(); ++i) av->t.grad[i] += np->t.grad[i];
        };
    }
    return n;
}

// a: [m x k], b: [k x n] -> [m x n]
inline Value matmul(const Value& a, const Value& b) {
    if (a->t.ndim() != 2 || b->t.ndim() != 2 || a->t.shape[1] != b->t.shape[0])
        fail("shape_mismatch", "matmul " + shape_str(a->shape()) + " x " + shape_str(b->shape()));
    const int m = a->t.shape[0], k = a->t.shape[1], n = b->t.shape[1];
    Tensor out({m, n});
    const double* A = a->t.data.data();
    const double* B = b->t.data.data();
    double* C = out.data.data();
    for (int i = 0; i < m; ++i) {
        const double* Ai = A + static_cast<size_t>(i) * k;
        double* Ci = C + static_cast<size_t>(i) * n;
        for (int p = 0; p < k; ++p) {
            const double aip = Ai[p];
            if (aip == 0.0) continue;
            const double* Bp = B + static_cast<size_t>(p) * n;
            for (int j = 0; j < n; ++j) Ci[j] += aip * Bp[j];
        }
    }
    Value av = a, bv = b;
    auto node = ad_detail::make_node(std::move(out), {a, b}, nullptr);
    if (node->needs_grad) {
        Node* np = node.get();
        node->backprop = [np, av, bv, m, k, n] {
            const double* G = np->t.grad.data();
            if (av->needs_grad) {
                // dA = G * B^T
                double* dA = av->t.grad.data();
                const double* B = bv->t.data.data();
                for (int i = 0; i < m; ++i) {
                    const double* Gi = G + static_cast<size_t>(i) * n;
                    double* dAi = dA + static_cast<size_t>(i) * k;
                    for (int p = 0; p < k; ++p) {
                        const double* Bp = B + static_cast<size_t>(p) * n;
                        double s = 0.0;
                        for (int j = 0; j < n; ++j) s += Gi[j] * Bp[j];
                        dAi[p] += s;
                    }
                }
            }
            if (bv->needs_grad) {
                // dB = A^T * G
                double* dB = bv->t.grad.data();
                const double* A = av->t.data.data();
                for (int i = 0; i < m; ++i) {
                    const double* Ai = A + static_cast<size_t>(i) * k;
                    const double* Gi = G + static_cast<size_t>(i) * n;
                    for (int p = 0; p < k; ++p) {
                        const double aip = Ai[p];
                        if (aip == 0.0) continue;
                        double* dBp = dB + static_cast<size_t>(p) * n;
                        for (int j = 0; j < n; ++j) dBp[j] += aip * Gi[j];
                    }
                }
            }
        };
    }
    return node;
}

// a: [m x n], row: [n] or [1 x n], broadcast-added to every row
inline Value add_rowvec(const Value& a, const Value& row) {
    const int m = a->t.shape[0], n = a->t.shape[1];
    if (row->t.numel() != n)
        fail("shape_mismatch", "add_rowvec " + shape_str(a->shape()) + " vs " + shape_str(row->shape()));
    Tensor out = a->t;
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) out.data[static_cast<size_t>(i) * n + j] += row->t.data[static_cast<size_t>(j)];
    Value av = a, rv = row;
    auto node = ad_detail::make_node(std::move(out), {a, row}, nullptr);
    if (node->needs_grad) {
        Node* np = node.get();
        node->backprop = [np, av, rv, m, n] {
            const double* G = np->t.grad.data();
            if (av->needs_grad)
                for (size_t i = 0; i < np->t.grad.size(); ++i) av->t.grad[i] += G[i];
            if (rv->needs_grad)
                for (int i = 0; i < m; ++i)
                    for (int j = 0; j < n; ++j) rv->t.grad[static_cast<size_t>(j)] += G[static_cast<size_t>(i) * n + j];
        };
    }
    return node;
}

// a: [m x n], row: [n], elementwise per-column scaling
inline Value mul_rowvec(const Value& a, const Value& row) {
    const int m = a->t.shape[0], n = a->t.shape[1];
    if (row->t.numel() != n)
        fail("shape_mismatch", "mul_rowvec " + shape_str(a->shape()) + " vs " + shape_str(row->shape()));
    Tensor out = a->t;
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) out.data[static_cast<size_t>(i) * n + j] *= row->t.data[static_cast<size_t>(j)];
    Value av = a, rv = row;
    auto node = ad_detail::make_node(std::move(out), {a, row}, nullptr);
    if (node->needs_grad) {
        Node* np = node.get();
        node->backprop = [np, av, rv, m, n] {
            const double* G = np->t.grad.data();
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < n; ++j) {
                    const size_t ij = static_cast<size_t>(i) * n + j;
                    if (av->needs_grad) av->t.grad[ij] += G[ij] * rv->t.data[static_cast<size_t>(j)];
                    if (rv->needs_grad) rv->t.grad[static_cast<size_t>(j)] += G[ij] * av->t.data[ij];
                }
        };
    }
    return node;
}

inline Value relu(const Value& a) {
    Tensor out = a->t;
    for (double& v : out.data) v = v > 0.0 ? v : 0.0;
    Value av = a;
    auto n = ad_detail::make_node(std::move(out), {a}, nullptr);
    if (n->needs_grad) {
        Node* np = n.get();
        n->backprop = [np, av] {
            for (size_t i = 0; i < np->t.grad.size(); ++i)
                if (av->t.data[i] > 0.0) av->t.grad[i] += np->t.grad[i];
        };
    }
    return n;
}

inline Value exp(const Value& a) {
    Tensor out = a->t;
    for (double& v : out.data) v = std::exp(v);
    Value av = a;
    auto n = ad_detail::make_node(std::move(out), {a}, nullptr);
    if (n->needs_grad) {
        Node* np = n.get();
        n->backprop = [np, av] {
            for (size_t i = 0; i < np->t.grad.size(); ++i) av->t.grad[i] += np->t.grad[i] * np->t.data[i];
        };
    }
    return n;
}

inline Value square(const Value& a) {
    Tensor out = a->t;
    for (double& v : out.data) v = v * v;
    Value av = a;
    auto n = ad_detail::make_node(std::move(out), {a}, nullptr);
    if (n->needs_grad) {
        Node* np = n.get();
        n->backprop = [np, av] {
            for (size_t i = 0; i < np->t.grad.size(); ++i) av->t.grad[i] += np->t.grad[i] * 2.0 * av->t.data[i];
        };
    }
    return n;
}

inline Value sum(const Value& a) {
    double s = 0.0;
    for (double v : a->t.data) s += v;
    Value av = a;
    auto n = ad_detail::make_node(Tensor::scalar(s), {a}, nullptr);
    if (n->needs_grad) {
        Node* np = n.get();
        n->backprop = [np, av] {
            const double g = np->t.grad[0];
            for (size_t i = 0; i < av->t.grad.size(); ++i) av->t.grad[i] += g;
        };
    }
    return n;
}

inline Value mean(const Value& a) {
    const double inv = 1.0 / static_cast<double>(a->t.numel());
    return scale(sum(a), inv);
}

inline Value mse(const Value& a, const Value& b) { return mean(square(sub(a, b))); }

// Detached copy: value flows, gradient does not.
inline Value detach(const Value& a) { return constant(a->t); }

inline Value reshape(const Value& a, std::vector<int> shape) {
    if (Tensor::numel_of(shape) != a->t.numel())
        fail("shape_mismatch", "reshape " + shape_str(a->shape()) + " -> " + shape_str(shape));
    Tensor out(std::move(shape), a->t.data);
    Value av = a;
    auto n = ad_detail::make_node(std::move(out), {a}, nullptr);
    if (n->needs_grad) {
        Node* np = n.get();
        n->backprop = [np, av] {
            for (size_t i = 0; i < np->t.grad.size(); ++i) av->t.grad[i] += np->t.grad[i];
        };
    }
    return n;
}

inline Value concat_cols(const std::vector<Value>& parts) {
    if (parts.empty()) fail("empty_input", "concat_cols of zero parts");
    const int m = parts[0]->t.shape[0];
    int total = 0;
    for (const auto& p : parts) {
        if (p->t.ndim() != 2 || p->t.shape[0] != m) fail("shape_mismatch", "concat_cols row mismatch");
        total += p->t.shape[1];
    }
    Tensor out({m, total});
    int off = 0;
    for (const auto& p : parts) {
        const int w = p->t.shape[1];
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < w; ++j)
                out.data[static_cast<size_t>(i) * total + off + j] = p->t.data[static_cast<size_t>(i) * w + j];
        off += w;
    }
    auto ps = parts;
    auto n = ad_detail::make_node(std::move(out), parts, nullptr);
    if (n->needs_grad) {
        Node* np = n.get();
        n->backprop = [np, ps, m, total] {
            int off2 = 0;
            for (const auto& p : ps) {
                const int w = p->t.shape[1];
                if (p->needs_grad)
                    for (int i = 0; i < m; ++i)
                        for (int j = 0; j < w; ++j)
                            p->t.grad[static_cast<size_t>(i) * w + j] +=
                                np->t.grad[static_cast<size_t>(i) * total + off2 + j];
                off2 += w;
            }
        };
    }
    return n;
}

inline Value concat_rows(const std::vector<Value>& parts) {
    if (parts.empty()) fail("empty_input", "concat_rows of zero parts");
    const int n_cols = parts[0]->t.shape[1];
    int total = 0;
    for (const auto& p : parts) {
        if (p->t.ndim() != 2 || p->t.shape[1] != n_cols) fail("shape_mismatch", "concat_rows col mismatch");
        total += p->t.shape[0];
    }
    Tensor out({total, n_cols});
    size_t off = 0;
    for (const auto& p : parts) {
        std::copy(p->t.data.begin(), p->t.data.end(), out.data.begin() + static_cast<long>(off));
        off += p->t.data.size();
    }
    auto ps = parts;
    auto n = ad_detail::make_node(std::move(out), parts, nullptr);
    if (n->needs_grad) {
        Node* np = n.get();
        n->backprop = [np, ps] {
            size_t off2 = 0;
            for (const auto& p : ps) {
                if (p->needs_grad)
                    for (size_t i = 0; i < p->t.grad.size(); ++i) p->t.grad[i] += np->t.grad[off2 + i];
                off2 += p->t.data.size();
            }
        };
    }
    return n;
}

inline Value slice_cols(const Value& a, int start, int len) {
    const int m = a->t.shape[0], n_cols = a->t.shape[1];
    if (start < 0 || len <= 0 || start + len > n_cols) fail("bad_slice", "slice_cols out of range");
    Tensor out({m, len});
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < len; ++j)
            out.data[static_cast<size_t>(i) * len + j] = a->t.data[static_cast<size_t>(i) * n_cols + start + j];
    Value av = a;
    auto n = ad_detail::make_node(std::move(out), {a}, nullptr);
    if (n->needs_grad) {
        Node* np = n.get();
        n->backprop = [np, av, m, n_cols, start, len] {
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < len; ++j)
                    av->t.grad[static_cast<size_t>(i) * n_cols + start + j] +=
                        np->t.grad[static_cast<size_t>(i) * len + j];
        };
    }
    return n;
}

inline Value slice_rows(const Value& a, int start, int len) {
    const int m = a->t.shape[0], n_cols = a->t.shape[1];
    if (start < 0 || len <= 0 || start + len > m) fail("bad_slice", "slice_rows out of range");
    Tensor out({len, n_cols});
    std::copy(a->t.data.begin() + static_cast<long>(start) * n_cols,
              a->t.data.begin() + static_cast<long>(start + len) * n_cols, out.data.begin());
    Value av = a;
    auto n = ad_detail::make_node(std::move(out), {a}, nullptr);
    if (n->needs_grad) {
        Node* np = n.get();
        n->backprop = [np, av, n_cols, start, len] {
            for (size_t i = 0; i < static_cast<size_t>(len) * n_cols; ++i)
                av->t.grad[static_cast<size_t>(start) * n_cols + i] += np->t.grad[i];
        };
    }
    return n;
}

// Vertical tiling: [r x c] -> [times*r x c], whole block repeated.
inline Value repeat_rows(const Value& a, int times) {
    const int r = a->t.shape[0], c = a->t.shape[1];
    Tensor out({times * r, c});
    for (int k = 0; k < times; ++k)
        std::copy(a->t.data.begin(), a->t.data.end(), out.data.begin() + static_cast<long>(k) * r * c);
    Value av = a;
    auto n = ad_detail::make_node(std::move(out), {a}, nullptr);
    if (n->needs_grad) {
        Node* np = n.get();
        n->backprop = [np, av, times, r, c] {
            for (int k = 0; k < times; ++k)
                for (size_t i = 0; i < static_cast<size_t>(r) * c; ++i)
                    av->t.grad[i] += np->t.grad[static_cast<size_t>(k) * r * c + i];
        };
    }
    return n;
}

// Each row repeated `times` consecutive times: [r x c] -> [r*times x c].
inline Value repeat_each_row(const Value& a, int times) {
    const int r = a->t.shape[0], c = a->t.shape[1];
    Tensor out({r * times, c});
    for (int i = 0; i < r; ++i)
        for (int k = 0; k < times; ++k)
            std::copy(a->t.data.begin() + static_cast<long>(i) * c, a->t.data.begin() + static_cast<long>(i + 1) * c,
                      out.data.begin() + (static_cast<long>(i) * times + k) * c);
    Value av = a;
    auto n = ad_detail::make_node(std::move(out), {a}, nullptr);
    if (n->needs_grad) {
        Node* np = n.get();
        n->backprop = [np, av, times, r, c] {
            for (int i = 0; i < r; ++i)
                for (int k = 0; k < times; ++k)
                    for (int j = 0; j < c; ++j)
                        av->t.grad[static_cast<size_t>(i) * c + j] +=
                            np->t.grad[(static_cast<size_t>(i) * times + k) * c + j];
        };
    }
    return n;
}

// Mean over consecutive groups of `group` rows: [g*group x c] -> [g x c].
inline Value mean_pool_rows(const Value& a, int group) {
    const int m = a->t.shape[0], c = a->t.shape[1];
    if (group <= 0 || m % group != 0) fail("bad_shape", "mean_pool_rows group does not divide rows");
    const int g = m / group;
    Tensor out({g, c});
    const double inv = 1.0 / group;
    for (int i = 0; i < g; ++i)
        for (int k = 0; k < group; ++k)
            for (int j = 0; j < c; ++j)
                out.data[static_cast<size_t>(i) * c + j] +=
                    a->t.data[(static_cast<size_t>(i) * group + k) * c + j] * inv;
    Value av = a;
    auto n = ad_detail::make_node(std::move(out), {a}, nullptr);
    if (n->needs_grad) {
        Node* np = n.get();
        n->backprop = [np, av, g, group, c, inv] {
            for (int i = 0; i < g; ++i)
                for (int k = 0; k < group; ++k)
                    for (int j = 0; j < c; ++j)
                        av->t.grad[(static_cast<size_t>(i) * group + k) * c + j] +=
                            np->t.grad[static_cast<size_t>(i) * c + j] * inv;
        };
    }
    return n;
}

inline Value mean_over_rows(const Value& a) { return mean_pool_rows(a, a->t.shape[0]); }

// Per-row mean over columns: [r x c] -> [r x 1].
inline Value row_mean(const Value& a) {
    const int r = a->t.shape[0], c = a->t.shape[1];
    Tensor out({r, 1});
    const double inv = 1.0 / c;
    for (int i = 0; i < r; ++i) {
        double s = 0.0;
        for (int j = 0; j < c; ++j) s += a->t.data[static_cast<size_t>(i) * c + j];
        out.data[static_cast<size_t>(i)] = s * inv;
    }
    Value av = a;
    auto n = ad_detail::make_node(std::move(out), {a}, nullptr);
    if (n->needs_grad) {
        Node* np = n.get();
        n->backprop = [np, av, r, c, inv] {
            for (int i = 0; i < r; ++i)
                for (int j = 0; j < c; ++j)
                    av->t.grad[static_cast<size_t>(i) * c + j] += np->t.grad[static_cast<size_t>(i)] * inv;
        };
    }
    return n;
}

// Fused softmax cross-entropy with log-sum-exp stabilization.
// logits: [n x c], labels in [0, c). Returns scalar mean loss.
inline Value softmax_cross_entropy(const Value& logits, const std::vector<int>& labels) {
    const int n = logits->t.shape[0], c = logits->t.shape[1];
    if (static_cast<int>(labels.size()) != n) fail("shape_mismatch", "labels length != batch");
    if (n == 0) fail("empty_input", "cross_entropy on empty batch");
    double total = 0.0;
    for (int i = 0; i < n; ++i) {
        if (labels[static_cast<size_t>(i)] < 0 || labels[static_cast<size_t>(i)] >= c)
            fail("bad_label", "label out of range");
        const double* row = logits->t.data.data() + static_cast<size_t>(i) * c;
        double mx = row[0];
        for (int j = 1; j < c; ++j) mx = std::max(mx, row[j]);
        double se = 0.0;
        for (int j = 0; j < c; ++j) se += std::exp(row[j] - mx);
        const double lse = mx + std::log(se);
        total += lse - row[labels[static_cast<size_t>(i)]];
    }
    Value lv = logits;
    auto node = ad_detail::make_node(Tensor::scalar(total / n), {logits}, nullptr);
    if (node->needs_grad) {
        Node* np = node.get();
        auto labs = labels;
        node->backprop = [np, lv, labs, n, c] {
            const double g = np->t.grad[0] / n;
            for (int i = 0; i < n; ++i) {
                const double* row = lv->t.data.data() + static_cast<size_t>(i) * c;
                double mx = row[0];
                for (int j = 1; j < c; ++j) mx = std::max(mx, row[j]);
                double se = 0.0;
                for (int j = 0; j < c; ++j) se += std::exp(row[j] - mx);
                for (int j = 0; j < c; ++j) {
                    const double p = std::exp(row[j] - mx) / se;
                    lv->t.grad[static_cast<size_t>(i) * c + j] +=
                        g * (p - (j == labs[static_cast<size_t>(i)] ? 1.0 : 0.0));
                }
            }
        };
    }
    return node;
}

// Direct 2-D convolution, NCHW, stride 1, zero-padded "same"; odd kernels only.
// x: [N x Cin x H x W], w: [Cout x Cin x kh x kw], b: [Cout].
inline Value conv2d(const Value& x, const Value& w, const Value& b) {
    if (x->t.ndim() != 4 || w->t.ndim() != 4) fail("shape_mismatch", "conv2d expects 4-D input and kernel");
    const int N = x->t.shape[0], Cin = x->t.shape[1], H = x->t.shape[2], W = x->t.shape[3];
    const int Cout = w->t.shape[0], kh = w->t.shape[2], kw = w->t.shape[3];
    if (w->t.shape[1] != Cin) fail("shape_mismatch", "conv2d channel mismatch");
    if (kh % 2 == 0 || kw % 2 == 0) fail("bad_shape", "conv2d supports odd kernels only");
    if (b->t.numel() != Cout) fail("shape_mismatch", "conv2d bias length");
    const int ph = kh / 2, pw = kw / 2;
    Tensor out({N, Cout, H, W});
    auto xat = [&](int n, int ci, int i, int j) -> double {
        if (i < 0 || i >= H || j < 0 || j >= W) return 0.0;
        return x->t.data[((static_cast<size_t>(n) * Cin + ci) * H + i) * W + j];
    };
    for (int n = 0; n < N; ++n)
        for (int co = 0; co < Cout; ++co)
            for (int i = 0; i < H; ++i)
                for (int j = 0; j < W; ++j) {
                    double s = b->t.data[static_cast<size_t>(co)];
                    for (int ci = 0; ci < Cin; ++ci)
                        for (int u = 0; u < kh; ++u)
                            for (int v = 0; v < kw; ++v)
                                s += w->t.data[((static_cast<size_t>(co) * Cin + ci) * kh + u) * kw + v] *
                                     xat(n, ci, i + u - ph, j + v - pw);
                    out.data[((static_cast<size_t>(n) * Cout + co) * H + i) * W + j] = s;
                }
    Value xv = x, wv = w, bv = b;
    auto node = ad_detail::make_node(std::move(out), {x, w, b}, nullptr);
    if (node->needs_grad) {
        Node* np = node.get();
        node->backprop = [np, xv, wv, bv, N, Cin, Cout, H, W, kh, kw, ph, pw] {
            const auto& G = np->t.grad;
            auto gidx = [&](int n, int co, int i, int j) {
                return ((static_cast<size_t>(n) * Cout + co) * H + i) * W + j;
            };
            auto xidx = [&](int n, int ci, int i, int j) {
                return ((static_cast<size_t>(n) * Cin + ci) * H + i) * W + j;
            };
            auto widx = [&](int co, int ci, int u, int v) {
                return ((static_cast<size_t>(co) * Cin + ci) * kh + u) * kw + v;
            };
            for (int n = 0; n < N; ++n)
                for (int co = 0; co < Cout; ++co)
                    for (int i = 0; i < H; ++i)
                        for (int j = 0; j < W; ++j) {
                            const double g = G[gidx(n, co, i, j)];
                            if (g == 0.0) continue;
                            if (bv->needs_grad) bv->t.grad[static_cast<size_t>(co)] += g;
                            for (int ci = 0; ci < Cin; ++ci)
                                for (int u = 0; u < kh; ++u) {
                                    const int ii = i + u - ph;
                                    if (ii < 0 || ii >= H) continue;
                                    for (int v = 0; v < kw; ++v) {
                                        const int jj = j + v - pw;
                                        if (jj < 0 || jj >= W) continue;
                                        if (wv->needs_grad)
                                            wv->t.grad[widx(co, ci, u, v)] += g * xv->t.data[xidx(n, ci, ii, jj)];
                                        if (xv->needs_grad)
                                            xv->t.grad[xidx(n, ci, ii, jj)] += g * wv->t.data[widx(co, ci, u, v)];
                                    }
                                }
                        }
        };
    }
    return node;
}

// ---------------------------------------------------------------------------
// backward

inline void backward(const Value& loss) {
    if (loss->t.numel() != 1) fail("not_scalar", "backward on non-scalar loss");
    if (loss->backward_done) fail("double_backward", "backward called twice on the same graph");
    loss->backward_done = true;
    if (!loss->needs_grad) return;

    // Iterative post-order DFS; reverse gives a valid topological order.
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Node*, size_t>> stack;
    stack.emplace_back(loss.get(), 0);
    seen.insert(loss.get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            Node* p = node->parents[next].get();
            ++next;
            if (p->needs_grad && !seen.count(p)) {
                seen.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    loss->t.grad[0] = 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it)
        if ((*it)->backprop) (*it)->backprop();
}

inline std::vector<Value> make_leaves(const std::vector<Tensor>& params, bool requires_grad = true) {
    std::vector<Value> out;
    out.reserve(params.size());
    for (const auto& p : params) out.push_back(leaf(p, requires_grad));
    return out;
}

} // namespace wf
