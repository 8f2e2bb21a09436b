#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include "carrygpt/common.hpp"
#include "carrygpt/rng.hpp"

namespace carrygpt {

// Reverse-mode autodiff over dense row-major tensors. Ops record a backward
// closure on the output node when any input requires gradients; a frozen
// forward pass (no input requires grad) records nothing. Backward replays
// nodes in descending creation order, which is a reverse topological order
// of the graph and makes gradient accumulation order reproducible.

struct TensorNode;
using NodePtr = std::shared_ptr<TensorNode>;

inline std::atomic<std::uint64_t> g_node_counter{0};

struct TensorNode {
    std::vector<int> shape;
    std::vector<Real> data;
    std::vector<Real> grad; // allocated iff requires_grad
    bool requires_grad = false;
    std::uint64_t id = 0;
    std::vector<NodePtr> parents;
    std::function<void(TensorNode&)> backward_fn;

    std::size_t numel() const { return data.size(); }
};

class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(std::vector<int> shape, bool requires_grad = false) {
        std::size_t n = 1;
        for (int e : shape) {
            if (e < 0) throw ShapeError("negative extent in shape " + shape_str(shape));
            n *= static_cast<std::size_t>(e);
        }
        auto node = std::make_shared<TensorNode>();
        node->shape = std::move(shape);
        node->data.assign(n, Real(0));
        node->requires_grad = requires_grad;
        if (requires_grad) node->grad.assign(n, Real(0));
        node->id = g_node_counter.fetch_add(1, std::memory_order_relaxed);
        Tensor t;
        t.node_ = std::move(node);
        return t;
    }

    static Tensor from_data(std::vector<int> shape, std::vector<Real> values, bool requires_grad = false) {
        Tensor t = zeros(std::move(shape), requires_grad);
        if (values.size() != t.numel())
            throw ShapeError("data length " + std::to_string(values.size()) + " does not fill shape " +
                             t.shape_str());
        t.node_->data = std::move(values);
        return t;
    }

    static Tensor scalar(Real v, bool requires_grad = false) {
        Tensor t = zeros({1, 1}, requires_grad);
        t.node_->data[0] = v;
        return t;
    }

    static Tensor full(std::vector<int> shape, Real v, bool requires_grad = false) {
        Tensor t = zeros(std::move(shape), requires_grad);
        std::fill(t.node_->data.begin(), t.node_->data.end(), v);
        return t;
    }

    static Tensor randn(std::vector<int> shape, Real stddev, Rng& rng, bool requires_grad = false) {
        Tensor t = zeros(std::move(shape), requires_grad);
        for (auto& v : t.node_->data) v = static_cast<Real>(rng.normal()) * stddev;
        return t;
    }

    static Tensor identity(int n, bool requires_grad = false) {
        Tensor t = zeros({n, n}, requires_grad);
        for (int i = 0; i < n; ++i) t.node_->data[static_cast<std::size_t>(i) * n + i] = Real(1);
        return t;
    }

    bool defined() const { return node_ != nullptr; }
    const std::vector<int>& shape() const { return node_->shape; }
    int dim(int i) const { return node_->shape.at(static_cast<std::size_t>(i)); }
    int rows() const { return dim(0); }
    int cols() const { return dim(1); }
    std::size_t numel() const { return node_->numel(); }
    bool requires_grad() const { return node_->requires_grad; }
    std::uint64_t id() const { return node_->id; }

    std::vector<Real>& data() { return node_->data; }
    const std::vector<Real>& data() const { return node_->data; }
    std::vector<Real>& grad() { return node_->grad; }
    const std::vector<Real>& grad() const { return node_->grad; }

    Real& at(int i, int j) { return node_->data[static_cast<std::size_t>(i) * cols() + j]; }
    Real at(int i, int j) const { return node_->data[static_cast<std::size_t>(i) * cols() + j]; }
    Real grad_at(int i, int j) const { return node_->grad[static_cast<std::size_t>(i) * cols() + j]; }

    void set_requires_grad(bool rg) {
        node_->requires_grad = rg;
        if (rg && node_->grad.size() != node_->data.size()) node_->grad.assign(node_->data.size(), Real(0));
        if (!rg) std::fill(node_->grad.begin(), node_->grad.end(), Real(0));
    }

    void zero_grad() { std::fill(node_->grad.begin(), node_->grad.end(), Real(0)); }

    // Deep value copy; the copy is a fresh leaf.
    Tensor clone() const {
        Tensor t = zeros(node_->shape, node_->requires_grad);
        t.node_->data = node_->data;
        return t;
    }

    bool all_finite() const {
        for (Real v : node_->data)
            if (!std::isfinite(v)) return false;
        return true;
    }

    std::string shape_str() const { return shape_str(node_->shape); }

    static std::string shape_str(const std::vector<int>& s) {
        std::ostringstream os;
        os << "[";
        for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
        os << "]";
        return os.str();
    }

    NodePtr node() const { return node_; }

    // Backpropagate from a scalar output. Gradients accumulate into every
    // reachable node with requires_grad; frozen leaves stay untouched.
    void backward() const {
        if (numel() != 1) throw ShapeError("backward() root must be scalar, got " + shape_str());
        std::vector<TensorNode*> order;
        std::unordered_set<TensorNode*> seen;
        std::vector<TensorNode*> stack{node_.get()};
        while (!stack.empty()) {
            TensorNode* n = stack.back();
            stack.pop_back();
            if (!seen.insert(n).second) continue;
            order.push_back(n);
            for (const auto& p : n->parents) stack.push_back(p.get());
        }
        std::sort(order.begin(), order.end(),
                  [](const TensorNode* a, const TensorNode* b) { return a->id > b->id; });
        if (node_->requires_grad) node_->grad[0] += Real(1);
        for (TensorNode* n : order)
            if (n->backward_fn) n->backward_fn(*n);
    }

private:
    NodePtr node_;
};

// ---------------------------------------------------------------------------
// gemm kernels (row-major). Fixed loop orders keep accumulation reproducible.

inline void gemm_nn(const Real* a, const Real* b, Real* c, int n, int k, int m, bool accumulate) {
    for (int i = 0; i < n; ++i) {
        Real* ci = c + static_cast<std::size_t>(i) * m;
        if (!accumulate)
            for (int j = 0; j < m; ++j) ci[j] = Real(0);
        const Real* ai = a + static_cast<std::size_t>(i) * k;
        for (int p = 0; p < k; ++p) {
            const Real aip = ai[p];
            const Real* bp = b + static_cast<std::size_t>(p) * m;
            for (int j = 0; j < m; ++j) ci[j] += aip * bp[j];
        }
    }
}

// c(n x m) += a(n x k) * b^T where b is (m x k)
inline void gemm_nt(const Real* a, const Real* b, Real* c, int n, int k, int m, bool accumulate) {
    for (int i = 0; i < n; ++i) {
        const Real* ai = a + static_cast<std::size_t>(i) * k;
        Real* ci = c + static_cast<std::size_t>(i) * m;
        for (int j = 0; j < m; ++j) {
            const Real* bj = b + static_cast<std::size_t>(j) * k;
            Real acc = Real(0);
            for (int p = 0; p < k; ++p) acc += ai[p] * bj[p];
            ci[j] = accumulate ? ci[j] + acc : acc;
        }
    }
}

// c(k x m) += a^T * b where a is (n x k), b is (n x m)
inline void gemm_tn(const Real* a, const Real* b, Real* c, int n, int k, int m, bool accumulate) {
    if (!accumulate)
        for (std::size_t i = 0; i < static_cast<std::size_t>(k) * m; ++i) c[i] = Real(0);
    for (int p = 0; p < n; ++p) {
        const Real* ap = a + static_cast<std::size_t>(p) * k;
        const Real* bp = b + static_cast<std::size_t>(p) * m;
        for (int i = 0; i < k; ++i) {
            const Real api = ap[i];
            if (api == Real(0)) continue;
            Real* ci = c + static_cast<std::size_t>(i) * m;
            for (int j = 0; j < m; ++j) ci[j] += api * bp[j];
        }
    }
}

// ---------------------------------------------------------------------------
// op helpers

namespace detail {

inline void require_2d(const Tensor& t, const char* op) {
    if (t.shape().size() != 2)
        throw ShapeError(std::string(op) + ": expected 2-d tensor, got " + t.shape_str());
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape())
        throw ShapeError(std::string(op) + ": shape mismatch " + a.shape_str() + " vs " + b.shape_str());
}

inline Tensor make_result(std::vector<int> shape, std::vector<Tensor> parents) {
    bool rg = false;
    for (const auto& p : parents) rg = rg || p.requires_grad();
    Tensor out = Tensor::zeros(std::move(shape), rg);
    if (rg) {
        auto& node = *out.node();
        node.parents.reserve(parents.size());
        for (auto& p : parents) node.parents.push_back(p.node());
    }
    return out;
}

} // namespace detail

// ---------------------------------------------------------------------------
// elementwise

inline Tensor add(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "add");
    Tensor out = detail::make_result(a.shape(), {a, b});
    const std::size_t n = out.numel();
    for (std::size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] + b.data()[i];
    if (out.requires_grad()) {
        out.node()->backward_fn = [](TensorNode& o) {
            for (int side = 0; side < 2; ++side) {
                TensorNode& p = *o.parents[static_cast<std::size_t>(side)];
                if (!p.requires_grad) continue;
                for (std::size_t i = 0; i < o.grad.size(); ++i) p.grad[i] += o.grad[i];
            }
        };
    }
    return out;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "sub");
    Tensor out = detail::make_result(a.shape(), {a, b});
    const std::size_t n = out.numel();
    for (std::size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] - b.data()[i];
    if (out.requires_grad()) {
        out.node()->backward_fn = [](TensorNode& o) {
            TensorNode& pa = *o.parents[0];
            TensorNode& pb = *o.parents[1];
            if (pa.requires_grad)
                for (std::size_t i = 0; i < o.grad.size(); ++i) pa.grad[i] += o.grad[i];
            if (pb.requires_grad)
                for (std::size_t i = 0; i < o.grad.size(); ++i) pb.grad[i] -= o.grad[i];
        };
    }
    return out;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "mul");
    Tensor out = detail::make_result(a.shape(), {a, b});
    const std::size_t n = out.numel();
    for (std::size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] * b.data()[i];
    if (out.requires_grad()) {
        out.node()->backward_fn = [](TensorNode& o) {
            TensorNode& pa = *o.parents[0];
            TensorNode& pb = *o.parents[1];
            if (pa.requires_grad)
                for (std::size_t i = 0; i < o.grad.size(); ++i) pa.grad[i] += o.grad[i] * pb.data[i];
            if (pb.requires_grad)
                for (std::size_t i = 0; i < o.grad.size(); ++i) pb.grad[i] += o.grad[i] * pa.data[i];
        };
    }
    return out;
}

inline Tensor mul_scalar(const Tensor& a, Real s) {
    Tensor out = detail::make_result(a.shape(), {a});
    const std::size_t n = out.numel();
    for (std::size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] * s;
    if (out.requires_grad()) {
        out.node()->backward_fn = [s](TensorNode& o) {
            TensorNode& p = *o.parents[0];
            if (!p.requires_grad) return;
            for (std::size_t i = 0; i < o.grad.size(); ++i) p.grad[i] += o.grad[i] * s;
        };
    }
    return out;
}

// x (n x m) + row bias b (1 x m), broadcast over rows
inline Tensor add_bias(const Tensor& x, const Tensor& b) {
    detail::require_2d(x, "add_bias");
    if (b.shape().size() != 2 || b.rows() != 1 || b.cols() != x.cols())
        throw ShapeError("add_bias: bias " + b.shape_str() + " does not broadcast over " + x.shape_str());
    Tensor out = detail::make_result(x.shape(), {x, b});
    const int n = x.rows(), m = x.cols();
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < m; ++j) out.at(i, j) = x.at(i, j) + b.data()[static_cast<std::size_t>(j)];
    if (out.requires_grad()) {
        out.node()->backward_fn = [n, m](TensorNode& o) {
            TensorNode& px = *o.parents[0];
            TensorNode& pb = *o.parents[1];
            if (px.requires_grad)
                for (std::size_t i = 0; i < o.grad.size(); ++i) px.grad[i] += o.grad[i];
            if (pb.requires_grad)
                for (int i = 0; i < n; ++i)
                    for (int j = 0; j < m; ++j) pb.grad[static_cast<std::size_t>(j)] += o.grad[static_cast<std::size_t>(i) * m + j];
        };
    }
    return out;
}

// x (n x d) scaled per row by w (n x 1)
inline Tensor mul_rowvec(const Tensor& x, const Tensor& w) {
    detail::require_2d(x, "mul_rowvec");
    if (w.shape().size() != 2 || w.cols() != 1 || w.rows() != x.rows())
        throw ShapeError("mul_rowvec: weights " + w.shape_str() + " do not match rows of " + x.shape_str());
    Tensor out = detail::make_result(x.shape(), {x, w});
    const int n = x.rows(), d = x.cols();
    for (int i = 0; i < n; ++i) {
        const Real wi = w.data()[static_cast<std::size_t>(i)];
        for (int j = 0; j < d; ++j) out.at(i, j) = x.at(i, j) * wi;
    }
    if (out.requires_grad()) {
        out.node()->backward_fn = [n, d](TensorNode& o) {
            TensorNode& px = *o.parents[0];
            TensorNode& pw = *o.parents[1];
            for (int i = 0; i < n; ++i) {
                const Real wi = pw.data[static_cast<std::size_t>(i)];
                for (int j = 0; j < d; ++j) {
                    const std::size_t idx = static_cast<std::size_t>(i) * d + j;
                    if (px.requires_grad) px.grad[idx] += o.grad[idx] * wi;
                    if (pw.requires_grad) pw.grad[static_cast<std::size_t>(i)] += o.grad[idx] * px.data[idx];
                }
            }
        };
    }
    return out;
}

// out = x * s where s is a 1x1 tensor (differentiable in both)
inline Tensor scale_by(const Tensor& x, const Tensor& s) {
    if (s.numel() != 1) throw ShapeError("scale_by: scale must be 1x1, got " + s.shape_str());
    Tensor out = detail::make_result(x.shape(), {x, s});
    const Real sv = s.data()[0];
    for (std::size_t i = 0; i < out.numel(); ++i) out.data()[i] = x.data()[i] * sv;
    if (out.requires_grad()) {
        out.node()->backward_fn = [sv](TensorNode& o) {
            TensorNode& px = *o.parents[0];
            TensorNode& ps = *o.parents[1];
            if (px.requires_grad)
                for (std::size_t i = 0; i < o.grad.size(); ++i) px.grad[i] += o.grad[i] * sv;
            if (ps.requires_grad) {
                Real acc = Real(0);
                for (std::size_t i = 0; i < o.grad.size(); ++i) acc += o.grad[i] * px.data[i];
                ps.grad[0] += acc;
            }
        };
    }
    return out;
}

inline Tensor silu(const Tensor& x) {
    Tensor out = detail::make_result(x.shape(), {x});
    for (std::size_t i = 0; i < out.numel(); ++i) {
        const Real v = x.data()[i];
        out.data()[i] = v / (Real(1) + std::exp(-v));
    }
    if (out.requires_grad()) {
        out.node()->backward_fn = [](TensorNode& o) {
            TensorNode& p = *o.parents[0];
            if (!p.requires_grad) return;
            for (std::size_t i = 0; i < o.grad.size(); ++i) {
                const Real v = p.data[i];
                const Real sig = Real(1) / (Real(1) + std::exp(-v));
                p.grad[i] += o.grad[i] * (sig + v * sig * (Real(1) - sig));
            }
        };
    }
    return out;
}

inline Tensor sigmoid(const Tensor& x) {
    Tensor out = detail::make_result(x.shape(), {x});
    for (std::size_t i = 0; i < out.numel(); ++i) out.data()[i] = Real(1) / (Real(1) + std::exp(-x.data()[i]));
    if (out.requires_grad()) {
        out.node()->backward_fn = [](TensorNode& o) {
            TensorNode& p = *o.parents[0];
            if (!p.requires_grad) return;
            for (std::size_t i = 0; i < o.grad.size(); ++i) {
                const Real y = o.data[i];
                p.grad[i] += o.grad[i] * y * (Real(1) - y);
            }
        };
    }
    return out;
}

inline Tensor sum(const Tensor& x) {
    Tensor out = detail::make_result({1, 1}, {x});
    Real acc = Real(0);
    for (Real v : x.data()) acc += v;
    out.data()[0] = acc;
    if (out.requires_grad()) {
        out.node()->backward_fn = [](TensorNode& o) {
            TensorNode& p = *o.parents[0];
            if (!p.requires_grad) return;
            for (std::size_t i = 0; i < p.grad.size(); ++i) p.grad[i] += o.grad[0];
        };
    }
    return out;
}

// ---------------------------------------------------------------------------
// linear algebra

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    detail::require_2d(a, "matmul");
    detail::require_2d(b, "matmul");
    if (a.cols() != b.rows())
        throw ShapeError("matmul: inner extents differ, " + a.shape_str() + " x " + b.shape_str());
    const int n = a.rows(), k = a.cols(), m = b.cols();
    Tensor out = detail::make_result({n, m}, {a, b});
    gemm_nn(a.data().data(), b.data().data(), out.data().data(), n, k, m, false);
    if (out.requires_grad()) {
        out.node()->backward_fn = [n, k, m](TensorNode& o) {
            TensorNode& pa = *o.parents[0];
            TensorNode& pb = *o.parents[1];
            if (pa.requires_grad) gemm_nt(o.grad.data(), pb.data.data(), pa.grad.data(), n, m, k, true);
            if (pb.requires_grad) gemm_tn(pa.data.data(), o.grad.data(), pb.grad.data(), n, k, m, true);
        };
    }
    return out;
}

inline Tensor transpose(const Tensor& a) {
    detail::require_2d(a, "transpose");
    const int n = a.rows(), m = a.cols();
    Tensor out = detail::make_result({m, n}, {a});
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < m; ++j) out.at(j, i) = a.at(i, j);
    if (out.requires_grad()) {
        out.node()->backward_fn = [n, m](TensorNode& o) {
            TensorNode& p = *o.parents[0];
            if (!p.requires_grad) return;
            for (int i = 0; i < n; ++i)
                for (int j = 0; j < m; ++j)
                    p.grad[static_cast<std::size_t>(i) * m + j] += o.grad[static_cast<std::size_t>(j) * n + i];
        };
    }
    return out;
}

inline Tensor slice_cols(const Tensor& x, int start, int width) {
    detail::require_2d(x, "slice_cols");
    if (start < 0 || width <= 0 || start + width > x.cols())
        throw ShapeError("slice_cols: [" + std::to_string(start) + ", " + std::to_string(start + width) +
                         ") out of " + x.shape_str());
    const int n = x.rows(), m = x.cols();
    Tensor out = detail::make_result({n, width}, {x});
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < width; ++j) out.at(i, j) = x.at(i, start + j);
    if (out.requires_grad()) {
        out.node()->backward_fn = [n, m, start, width](TensorNode& o) {
            TensorNode& p = *o.parents[0];
            if (!p.requires_grad) return;
            for (int i = 0; i < n; ++i)
                for (int j = 0; j < width; ++j)
                    p.grad[static_cast<std::size_t>(i) * m + start + j] += o.grad[static_cast<std::size_t>(i) * width + j];
        };
    }
    return out;
}

inline Tensor concat_cols(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ShapeError("concat_cols: empty input");
    const int n = parts[0].rows();
    int total = 0;
    for (const auto& p : parts) {
        detail::require_2d(p, "concat_cols");
        if (p.rows() != n) throw ShapeError("concat_cols: row count mismatch");
        total += p.cols();
    }
    Tensor out = detail::make_result({n, total}, parts);
    int off = 0;
    for (const auto& p : parts) {
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < p.cols(); ++j) out.at(i, off + j) = p.at(i, j);
        off += p.cols();
    }
    if (out.requires_grad()) {
        std::vector<int> widths;
        for (const auto& p : parts) widths.push_back(p.cols());
        out.node()->backward_fn = [n, total, widths](TensorNode& o) {
            int off2 = 0;
            for (std::size_t pi = 0; pi < widths.size(); ++pi) {
                TensorNode& p = *o.parents[pi];
                const int w = widths[pi];
                if (p.requires_grad)
                    for (int i = 0; i < n; ++i)
                        for (int j = 0; j < w; ++j)
                            p.grad[static_cast<std::size_t>(i) * w + j] +=
                                o.grad[static_cast<std::size_t>(i) * total + off2 + j];
                off2 += w;
            }
        };
    }
    return out;
}

// Gather rows of an embedding table; backward scatter-adds in position order.
inline Tensor embedding_rows(const Tensor& table, const std::vector<int>& ids) {
    detail::require_2d(table, "embedding_rows");
    const int v = table.rows(), d = table.cols();
    for (int id : ids)
        if (id < 0 || id >= v) throw DataError("embedding_rows: id " + std::to_string(id) + " outside vocab " + std::to_string(v));
    Tensor out = detail::make_result({static_cast<int>(ids.size()), d}, {table});
    for (std::size_t i = 0; i < ids.size(); ++i)
        for (int j = 0; j < d; ++j) out.at(static_cast<int>(i), j) = table.at(ids[i], j);
    if (out.requires_grad()) {
        out.node()->backward_fn = [ids, d](TensorNode& o) {
            TensorNode& p = *o.parents[0];
            if (!p.requires_grad) return;
            for (std::size_t i = 0; i < ids.size(); ++i)
                for (int j = 0; j < d; ++j)
                    p.grad[static_cast<std::size_t>(ids[i]) * d + j] += o.grad[i * d + j];
        };
    }
    return out;
}

// ---------------------------------------------------------------------------
// softmax / normalization

// Row softmax with max subtraction. Rows sum to 1 within 1e-12 for |x| <= 50.
inline Tensor softmax_rows(const Tensor& x) {
    detail::require_2d(x, "softmax_rows");
    const int n = x.rows(), m = x.cols();
    Tensor out = detail::make_result(x.shape(), {x});
    for (int i = 0; i < n; ++i) {
        Real mx = x.at(i, 0);
        for (int j = 1; j < m; ++j) mx = std::max(mx, x.at(i, j));
        Real total = Real(0);
        for (int j = 0; j < m; ++j) {
            const Real e = std::exp(x.at(i, j) - mx);
            out.at(i, j) = e;
            total += e;
        }
        const Real inv = Real(1) / total;
        for (int j = 0; j < m; ++j) out.at(i, j) *= inv;
    }
    if (out.requires_grad()) {
        out.node()->backward_fn = [n, m](TensorNode& o) {
            TensorNode& p = *o.parents[0];
            if (!p.requires_grad) return;
            for (int i = 0; i < n; ++i) {
                const std::size_t base = static_cast<std::size_t>(i) * m;
                Real dot = Real(0);
                for (int j = 0; j < m; ++j) dot += o.grad[base + j] * o.data[base + j];
                for (int j = 0; j < m; ++j)
                    p.grad[base + j] += o.data[base + j] * (o.grad[base + j] - dot);
            }
        };
    }
    return out;
}

// RMS normalization: y = x / sqrt(mean(x^2) + eps) * gain, gain is 1 x d.
inline Tensor rms_norm(const Tensor& x, const Tensor& gain, Real eps) {
    detail::require_2d(x, "rms_norm");
    if (eps <= Real(0)) throw ConfigError("rms_norm: eps must be positive");
    if (gain.shape().size() != 2 || gain.rows() != 1 || gain.cols() != x.cols())
        throw ShapeError("rms_norm: gain " + gain.shape_str() + " does not match " + x.shape_str());
    const int n = x.rows(), d = x.cols();
    Tensor out = detail::make_result(x.shape(), {x, gain});
    std::vector<Real> inv_rms(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        Real ms = Real(0);
        for (int j = 0; j < d; ++j) ms += x.at(i, j) * x.at(i, j);
        ms /= static_cast<Real>(d);
        inv_rms[static_cast<std::size_t>(i)] = Real(1) / std::sqrt(ms + eps);
        for (int j = 0; j < d; ++j)
            out.at(i, j) = x.at(i, j) * inv_rms[static_cast<std::size_t>(i)] * gain.data()[static_cast<std::size_t>(j)];
    }
    if (out.requires_grad()) {
        out.node()->backward_fn = [n, d, inv_rms](TensorNode& o) {
            TensorNode& px = *o.parents[0];
            TensorNode& pg = *o.parents[1];
            for (int i = 0; i < n; ++i) {
                const std::size_t base = static_cast<std::size_t>(i) * d;
                const Real inv = inv_rms[static_cast<std::size_t>(i)];
                if (pg.requires_grad)
                    for (int j = 0; j < d; ++j)
                        pg.grad[static_cast<std::size_t>(j)] += o.grad[base + j] * px.data[base + j] * inv;
                if (px.requires_grad) {
                    // d y_j / d x_k = g_j * inv * (delta_jk - x_j x_k inv^2 / d)
                    Real dot = Real(0);
                    for (int j = 0; j < d; ++j)
                        dot += o.grad[base + j] * pg.data[static_cast<std::size_t>(j)] * px.data[base + j];
                    const Real coef = dot * inv * inv * inv / static_cast<Real>(d);
                    for (int j = 0; j < d; ++j)
                        px.grad[base + j] += o.grad[base + j] * pg.data[static_cast<std::size_t>(j)] * inv -
                                             coef * px.data[base + j];
                }
            }
        };
    }
    return out;
}

// ---------------------------------------------------------------------------
// loss

// Mean negative log-softmax of the true next token over positions
// >= mask_before; earlier positions contribute exactly zero.
inline Tensor cross_entropy_next_token(const Tensor& logits, const std::vector<int>& targets, int mask_before) {
    detail::require_2d(logits, "cross_entropy_next_token");
    const int n = logits.rows(), v = logits.cols();
    if (static_cast<int>(targets.size()) != n)
        throw ShapeError("cross_entropy_next_token: " + std::to_string(targets.size()) + " targets for " +
                         std::to_string(n) + " positions");
    if (mask_before < 0) mask_before = 0;
    if (mask_before >= n) throw EvalError("cross_entropy_next_token: empty unmasked set (mask_before=" +
                                          std::to_string(mask_before) + ", n=" + std::to_string(n) + ")");
    for (int t : targets)
        if (t < 0 || t >= v) throw DataError("cross_entropy_next_token: target id out of vocab");
    const int count = n - mask_before;
    Tensor out = detail::make_result({1, 1}, {logits});
    Real total = Real(0);
    for (int i = mask_before; i < n; ++i) {
        Real mx = logits.at(i, 0);
        for (int j = 1; j < v; ++j) mx = std::max(mx, logits.at(i, j));
        Real z = Real(0);
        for (int j = 0; j < v; ++j) z += std::exp(logits.at(i, j) - mx);
        total += std::log(z) + mx - logits.at(i, targets[static_cast<std::size_t>(i)]);
    }
    out.data()[0] = total / static_cast<Real>(count);
    if (out.requires_grad()) {
        out.node()->backward_fn = [n, v, mask_before, count, targets](TensorNode& o) {
            TensorNode& p = *o.parents[0];
            if (!p.requires_grad) return;
            const Real scale = o.grad[0] / static_cast<Real>(count);
            for (int i = mask_before; i < n; ++i) {
                const std::size_t base = static_cast<std::size_t>(i) * v;
                Real mx = p.data[base];
                for (int j = 1; j < v; ++j) mx = std::max(mx, p.data[base + j]);
                Real z = Real(0);
                for (int j = 0; j < v; ++j) z += std::exp(p.data[base + j] - mx);
                const Real inv = Real(1) / z;
                for (int j = 0; j < v; ++j)
                    p.grad[base + j] += scale * (std::exp(p.data[base + j] - mx) * inv -
                                                 (j == targets[static_cast<std::size_t>(i)] ? Real(1) : Real(0)));
            }
        };
    }
    return out;
}

// ---------------------------------------------------------------------------
// attention

// Additive mask constant: 0 where j <= i, large negative where j > i,
// so masked scores underflow to exactly 0 after softmax.
inline Tensor causal_mask(int n) {
    Tensor m = Tensor::zeros({n, n});
    for (int i = 0; i < n; ++i)
        for (int j = i + 1; j < n; ++j) m.at(i, j) = Real(-1e30);
    return m;
}

// Multi-head scaled dot-product attention, composed from primitive ops so
// its backward pass is correct by construction.
inline Tensor attention(const Tensor& x, const Tensor& wq, const Tensor& wk, const Tensor& wv,
                        const Tensor& wo, int heads, bool causal) {
    detail::require_2d(x, "attention");
    const int n = x.rows(), d = x.cols();
    if (heads <= 0 || d % heads != 0)
        throw ConfigError("attention: dim " + std::to_string(d) + " not divisible by heads " + std::to_string(heads));
    const int dk = d / heads;
    const Tensor q = matmul(x, wq);
    const Tensor k = matmul(x, wk);
    const Tensor v = matmul(x, wv);
    const Tensor mask = causal ? causal_mask(n) : Tensor();
    std::vector<Tensor> head_outs;
    head_outs.reserve(static_cast<std::size_t>(heads));
    for (int h = 0; h < heads; ++h) {
        const Tensor qh = slice_cols(q, h * dk, dk);
        const Tensor kh = slice_cols(k, h * dk, dk);
        const Tensor vh = slice_cols(v, h * dk, dk);
        Tensor scores = mul_scalar(matmul(qh, transpose(kh)), Real(1) / std::sqrt(static_cast<Real>(dk)));
        if (causal) scores = add(scores, mask);
        const Tensor weights = softmax_rows(scores);
        head_outs.push_back(matmul(weights, vh));
    }
    const Tensor ctx = heads == 1 ? head_outs[0] : concat_cols(head_outs);
    return matmul(ctx, wo);
}

// Attention weight matrix of a single head, for tests and diagnostics.
inline Tensor attention_weights(const Tensor& x, const Tensor& wq, const Tensor& wk, int heads, int head,
                                bool causal) {
    const int n = x.rows(), d = x.cols();
    if (heads <= 0 || d % heads != 0) throw ConfigError("attention_weights: bad head split");
    const int dk = d / heads;
    const Tensor qh = slice_cols(matmul(x, wq), head * dk, dk);
    const Tensor kh = slice_cols(matmul(x, wk), head * dk, dk);
    Tensor scores = mul_scalar(matmul(qh, transpose(kh)), Real(1) / std::sqrt(static_cast<Real>(dk)));
    if (causal) scores = add(scores, causal_mask(n));
    return softmax_rows(scores);
}

} // namespace carrygpt
