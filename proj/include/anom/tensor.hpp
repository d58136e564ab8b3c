#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

#include "anom/rng.hpp"

namespace anom {

using Shape = std::vector<int>;

struct ShapeError : std::runtime_error {
    explicit ShapeError(const std::string& m) : std::runtime_error("shape error: " + m) {}
};
struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& m) : std::runtime_error("numeric error: " + m) {}
};
struct ContractError : std::runtime_error {
    explicit ContractError(const std::string& m) : std::runtime_error("contract error: " + m) {}
};

inline size_t shape_numel(const Shape& s) {
    size_t n = 1;
    for (int e : s) {
        if (e < 0) throw ShapeError("negative extent");
        n *= static_cast<size_t>(e);
    }
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string out = "(";
    for (size_t i = 0; i < s.size(); ++i) out += (i ? "," : "") + std::to_string(s[i]);
    return out + ")";
}

namespace detail {

// C = A(m,k) * B(k,n), row-major. ikj order keeps the inner loop contiguous.
template <class T>
void mm(const T* A, const T* B, T* C, int m, int k, int n) {
    std::fill(C, C + static_cast<size_t>(m) * n, T(0));
#pragma omp parallel for schedule(static)
    for (int i = 0; i < m; ++i) {
        T* Ci = C + static_cast<size_t>(i) * n;
        const T* Ai = A + static_cast<size_t>(i) * k;
        for (int p = 0; p < k; ++p) {
            T a = Ai[p];
            if (a == T(0)) continue;
            const T* Bp = B + static_cast<size_t>(p) * n;
            for (int j = 0; j < n; ++j) Ci[j] += a * Bp[j];
        }
    }
}

// C += A(m,k) * B(k,n)^T is not needed; transposed variants done by caller copies.
template <class T>
std::vector<T> transpose(const T* A, int rows, int cols) {
    std::vector<T> out(static_cast<size_t>(rows) * cols);
    for (int i = 0; i < rows; ++i)
        for (int j = 0; j < cols; ++j) out[static_cast<size_t>(j) * rows + i] = A[static_cast<size_t>(i) * cols + j];
    return out;
}

}  // namespace detail

// Dense N-d tensor with optional reverse-mode gradient tracking. Values are
// immutable once used as an op input; the graph is a DAG of shared nodes.
template <class T>
class Tensor {
    struct Impl {
        Shape shape;
        std::vector<T> v;
        bool leaf_requires_grad = false;
        bool track = false;  // gradient flows through this node
        std::vector<T> grad;
        std::vector<Tensor> parents;
        std::function<void(Impl&)> backprop;
    };

public:
    Tensor() = default;

    static Tensor zeros(const Shape& s) { return filled(s, T(0)); }

    static Tensor filled(const Shape& s, T value) {
        Tensor t;
        t.p_ = std::make_shared<Impl>();
        t.p_->shape = s;
        t.p_->v.assign(shape_numel(s), value);
        return t;
    }

    static Tensor from_data(const Shape& s, std::vector<T> data) {
        if (data.size() != shape_numel(s))
            throw ShapeError("data length " + std::to_string(data.size()) + " vs shape " + shape_str(s));
        Tensor t;
        t.p_ = std::make_shared<Impl>();
        t.p_->shape = s;
        t.p_->v = std::move(data);
        return t;
    }

    static Tensor scalar(T value) { return from_data({1}, {value}); }

    bool defined() const { return static_cast<bool>(p_); }
    const Shape& shape() const { return p_->shape; }
    size_t numel() const { return p_->v.size(); }
    const std::vector<T>& data() const { return p_->v; }
    std::vector<T>& mutable_data() { return p_->v; }
    T item() const {
        if (p_->v.size() != 1) throw ContractError("item() on non-scalar tensor " + shape_str(p_->shape));
        return p_->v[0];
    }
    T operator[](size_t i) const { return p_->v[i]; }

    Tensor& set_requires_grad(bool b = true) {
        p_->leaf_requires_grad = b;
        p_->track = b;
        return *this;
    }
    bool requires_grad() const { return p_->leaf_requires_grad; }
    bool tracked() const { return p_ && p_->track; }

    const std::vector<T>& grad() const {
        if (p_->grad.empty()) p_->grad.assign(p_->v.size(), T(0));
        return p_->grad;
    }
    void zero_grad() { p_->grad.assign(p_->v.size(), T(0)); }
    bool has_grad() const { return !p_->grad.empty(); }

    bool all_finite() const {
        for (T x : p_->v)
            if (!std::isfinite(static_cast<double>(x))) return false;
        return true;
    }
    void check_finite(const std::string& what) const {
        if (!all_finite()) throw NumericError("non-finite values in " + what);
    }

    Tensor clone_detached() const {
        return from_data(p_->shape, p_->v);
    }

    // Reverse-mode sweep from a scalar loss.
    void backward() {
        if (p_->v.size() != 1) throw ContractError("backward() requires a scalar loss");
        // topological order over tracked nodes
        std::vector<Impl*> order;
        std::unordered_set<Impl*> seen;
        std::vector<std::pair<Impl*, size_t>> stack;
        stack.push_back({p_.get(), 0});
        seen.insert(p_.get());
        while (!stack.empty()) {
            auto& [node, idx] = stack.back();
            if (idx < node->parents.size()) {
                Impl* par = node->parents[idx].p_.get();
                ++idx;
                if (par->track && !seen.count(par)) {
                    seen.insert(par);
                    stack.push_back({par, 0});
                }
            } else {
                order.push_back(node);
                stack.pop_back();
            }
        }
        p_->grad.assign(1, T(1));
        for (auto it = order.rbegin(); it != order.rend(); ++it) {
            Impl* n = *it;
            if (n->backprop) n->backprop(*n);
        }
    }

    // --- op construction helpers (used by free-function ops) ---

    static Tensor make_node(const Shape& s, std::vector<T> v, std::vector<Tensor> parents,
                            std::function<void(Impl&)> backprop) {
        Tensor t = from_data(s, std::move(v));
        bool track = false;
        for (const auto& par : parents) track = track || par.tracked();
        if (track) {
            t.p_->track = true;
            t.p_->parents = std::move(parents);
            t.p_->backprop = std::move(backprop);
        }
        return t;
    }

    static std::vector<T>& grad_buf(const Tensor& t) {
        if (t.p_->grad.empty()) t.p_->grad.assign(t.p_->v.size(), T(0));
        return t.p_->grad;
    }

    using NodeImpl = Impl;

private:
    std::shared_ptr<Impl> p_;
};

// ---------- elementwise ----------

template <class T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
    if (a.shape() != b.shape())
        throw ShapeError(std::string(op) + ": " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    require_same_shape(a, b, "add");
    std::vector<T> v(a.numel());
    for (size_t i = 0; i < v.size(); ++i) v[i] = a[i] + b[i];
    return Tensor<T>::make_node(a.shape(), std::move(v), {a, b}, [a, b](auto& n) {
        if (a.tracked()) {
            auto& g = Tensor<T>::grad_buf(a);
            for (size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
        }
        if (b.tracked()) {
            auto& g = Tensor<T>::grad_buf(b);
            for (size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
        }
    });
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    require_same_shape(a, b, "sub");
    std::vector<T> v(a.numel());
    for (size_t i = 0; i < v.size(); ++i) v[i] = a[i] - b[i];
    return Tensor<T>::make_node(a.shape(), std::move(v), {a, b}, [a, b](auto& n) {
        if (a.tracked()) {
            auto& g = Tensor<T>::grad_buf(a);
            for (size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
        }
        if (b.tracked()) {
            auto& g = Tensor<T>::grad_buf(b);
            for (size_t i = 0; i < g.size(); ++i) g[i] -= n.grad[i];
        }
    });
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    require_same_shape(a, b, "mul");
    std::vector<T> v(a.numel());
    for (size_t i = 0; i < v.size(); ++i) v[i] = a[i] * b[i];
    return Tensor<T>::make_node(a.shape(), std::move(v), {a, b}, [a, b](auto& n) {
        if (a.tracked()) {
            auto& g = Tensor<T>::grad_buf(a);
            for (size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * b[i];
        }
        if (b.tracked()) {
            auto& g = Tensor<T>::grad_buf(b);
            for (size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * a[i];
        }
    });
}

template <class T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
    require_same_shape(a, b, "div");
    std::vector<T> v(a.numel());
    for (size_t i = 0; i < v.size(); ++i) v[i] = a[i] / b[i];
    return Tensor<T>::make_node(a.shape(), std::move(v), {a, b}, [a, b](auto& n) {
        if (a.tracked()) {
            auto& g = Tensor<T>::grad_buf(a);
            for (size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] / b[i];
        }
        if (b.tracked()) {
            auto& g = Tensor<T>::grad_buf(b);
            for (size_t i = 0; i < g.size(); ++i) g[i] -= n.grad[i] * a[i] / (b[i] * b[i]);
        }
    });
}

template <class T>
Tensor<T> add_scalar(const Tensor<T>& a, T c) {
    std::vector<T> v(a.numel());
    for (size_t i = 0; i < v.size(); ++i) v[i] = a[i] + c;
    return Tensor<T>::make_node(a.shape(), std::move(v), {a}, [a](auto& n) {
        auto& g = Tensor<T>::grad_buf(a);
        for (size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
    });
}

template <class T>
Tensor<T> mul_scalar(const Tensor<T>& a, T c) {
    std::vector<T> v(a.numel());
    for (size_t i = 0; i < v.size(); ++i) v[i] = a[i] * c;
    return Tensor<T>::make_node(a.shape(), std::move(v), {a}, [a, c](auto& n) {
        auto& g = Tensor<T>::grad_buf(a);
        for (size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * c;
    });
}

template <class T>
Tensor<T> neg(const Tensor<T>& a) { return mul_scalar(a, T(-1)); }

template <class T>
Tensor<T> relu(const Tensor<T>& a) {
    std::vector<T> v(a.numel());
    for (size_t i = 0; i < v.size(); ++i) v[i] = a[i] > T(0) ? a[i] : T(0);
    return Tensor<T>::make_node(a.shape(), std::move(v), {a}, [a](auto& n) {
        auto& g = Tensor<T>::grad_buf(a);
        for (size_t i = 0; i < g.size(); ++i)
            if (a[i] > T(0)) g[i] += n.grad[i];
    });
}

template <class T>
Tensor<T> sigmoid(const Tensor<T>& a) {
    std::vector<T> v(a.numel());
    for (size_t i = 0; i < v.size(); ++i) v[i] = T(1) / (T(1) + std::exp(-a[i]));
    std::vector<T> saved = v;
    return Tensor<T>::make_node(a.shape(), std::move(v), {a}, [a, saved = std::move(saved)](auto& n) {
        auto& g = Tensor<T>::grad_buf(a);
        for (size_t i = 0; i < g.size(); ++i) {
            T s = saved[i];
            g[i] += n.grad[i] * s * (T(1) - s);
        }
    });
}

template <class T>
Tensor<T> tanh(const Tensor<T>& a) {
    std::vector<T> v(a.numel());
    for (size_t i = 0; i < v.size(); ++i) v[i] = std::tanh(a[i]);
    std::vector<T> saved = v;
    return Tensor<T>::make_node(a.shape(), std::move(v), {a}, [a, saved = std::move(saved)](auto& n) {
        auto& g = Tensor<T>::grad_buf(a);
        for (size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * (T(1) - saved[i] * saved[i]);
    });
}

template <class T>
Tensor<T> exp(const Tensor<T>& a) {
    std::vector<T> v(a.numel());
    for (size_t i = 0; i < v.size(); ++i) v[i] = std::exp(a[i]);
    std::vector<T> saved = v;
    return Tensor<T>::make_node(a.shape(), std::move(v), {a}, [a, saved = std::move(saved)](auto& n) {
        auto& g = Tensor<T>::grad_buf(a);
        for (size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * saved[i];
    });
}

template <class T>
Tensor<T> log(const Tensor<T>& a) {
    std::vector<T> v(a.numel());
    for (size_t i = 0; i < v.size(); ++i) v[i] = std::log(a[i]);
    return Tensor<T>::make_node(a.shape(), std::move(v), {a}, [a](auto& n) {
        auto& g = Tensor<T>::grad_buf(a);
        for (size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] / a[i];
    });
}

template <class T>
Tensor<T> square(const Tensor<T>& a) {
    std::vector<T> v(a.numel());
    for (size_t i = 0; i < v.size(); ++i) v[i] = a[i] * a[i];
    return Tensor<T>::make_node(a.shape(), std::move(v), {a}, [a](auto& n) {
        auto& g = Tensor<T>::grad_buf(a);
        for (size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * T(2) * a[i];
    });
}

// Gradient passes only where lo < x < hi.
template <class T>
Tensor<T> clamp(const Tensor<T>& a, T lo, T hi) {
    std::vector<T> v(a.numel());
    for (size_t i = 0; i < v.size(); ++i) v[i] = std::min(hi, std::max(lo, a[i]));
    return Tensor<T>::make_node(a.shape(), std::move(v), {a}, [a, lo, hi](auto& n) {
        auto& g = Tensor<T>::grad_buf(a);
        for (size_t i = 0; i < g.size(); ++i)
            if (a[i] > lo && a[i] < hi) g[i] += n.grad[i];
    });
}

// Value passthrough; blocks gradient flow entirely.
template <class T>
Tensor<T> stop_gradient(const Tensor<T>& a) {
    return Tensor<T>::from_data(a.shape(), a.data());
}

template <class T>
Tensor<T> reshape(const Tensor<T>& a, const Shape& s) {
    if (shape_numel(s) != a.numel())
        throw ShapeError("reshape " + shape_str(a.shape()) + " -> " + shape_str(s));
    std::vector<T> v = a.data();
    return Tensor<T>::make_node(s, std::move(v), {a}, [a](auto& n) {
        auto& g = Tensor<T>::grad_buf(a);
        for (size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
    });
}

// ---------- reductions ----------

template <class T>
Tensor<T> sum_all(const Tensor<T>& a) {
    T s = 0;
    for (size_t i = 0; i < a.numel(); ++i) s += a[i];
    return Tensor<T>::make_node({1}, {s}, {a}, [a](auto& n) {
        auto& g = Tensor<T>::grad_buf(a);
        for (size_t i = 0; i < g.size(); ++i) g[i] += n.grad[0];
    });
}

template <class T>
Tensor<T> mean_all(const Tensor<T>& a) {
    if (a.numel() == 0) throw ContractError("mean of empty tensor");
    return mul_scalar(sum_all(a), T(1) / static_cast<T>(a.numel()));
}

// ---------- linear algebra ----------

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape().size() != 2 || b.shape().size() != 2 || a.shape()[1] != b.shape()[0])
        throw ShapeError("matmul: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    int m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
    std::vector<T> v(static_cast<size_t>(m) * n);
    detail::mm(a.data().data(), b.data().data(), v.data(), m, k, n);
    return Tensor<T>::make_node({m, n}, std::move(v), {a, b}, [a, b, m, k, n](auto& node) {
        if (a.tracked()) {
            auto bt = detail::transpose(b.data().data(), k, n);
            std::vector<T> da(static_cast<size_t>(m) * k);
            detail::mm(node.grad.data(), bt.data(), da.data(), m, n, k);
            auto& g = Tensor<T>::grad_buf(a);
            for (size_t i = 0; i < g.size(); ++i) g[i] += da[i];
        }
        if (b.tracked()) {
            auto at = detail::transpose(a.data().data(), m, k);
            std::vector<T> db(static_cast<size_t>(k) * n);
            detail::mm(at.data(), node.grad.data(), db.data(), k, m, n);
            auto& g = Tensor<T>::grad_buf(b);
            for (size_t i = 0; i < g.size(); ++i) g[i] += db[i];
        }
    });
}

// y[o,h,w] = sum_c W[o,c] x[c,h,w] + b[o]; the 1x1 convolution.
template <class T>
Tensor<T> affine_channels(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
    if (x.shape().size() != 3 || w.shape().size() != 2 || b.shape().size() != 1 ||
        w.shape()[1] != x.shape()[0] || b.shape()[0] != w.shape()[0])
        throw ShapeError("affine_channels: x" + shape_str(x.shape()) + " w" + shape_str(w.shape()));
    int c = x.shape()[0], h = x.shape()[1], wd = x.shape()[2], o = w.shape()[0];
    int hw = h * wd;
    std::vector<T> v(static_cast<size_t>(o) * hw);
    detail::mm(w.data().data(), x.data().data(), v.data(), o, c, hw);
    for (int oc = 0; oc < o; ++oc)
        for (int i = 0; i < hw; ++i) v[static_cast<size_t>(oc) * hw + i] += b[oc];
    return Tensor<T>::make_node({o, h, wd}, std::move(v), {x, w, b}, [x, w, b, c, hw, o](auto& node) {
        if (x.tracked()) {
            auto wt = detail::transpose(w.data().data(), o, c);
            std::vector<T> dx(static_cast<size_t>(c) * hw);
            detail::mm(wt.data(), node.grad.data(), dx.data(), c, o, hw);
            auto& g = Tensor<T>::grad_buf(x);
            for (size_t i = 0; i < g.size(); ++i) g[i] += dx[i];
        }
        if (w.tracked()) {
            auto xt = detail::transpose(x.data().data(), c, hw);
            std::vector<T> dw(static_cast<size_t>(o) * c);
            detail::mm(node.grad.data(), xt.data(), dw.data(), o, hw, c);
            auto& g = Tensor<T>::grad_buf(w);
            for (size_t i = 0; i < g.size(); ++i) g[i] += dw[i];
        }
        if (b.tracked()) {
            auto& g = Tensor<T>::grad_buf(b);
            for (int oc = 0; oc < o; ++oc) {
                T s = 0;
                for (int i = 0; i < hw; ++i) s += node.grad[static_cast<size_t>(oc) * hw + i];
                g[oc] += s;
            }
        }
    });
}

// ---------- convolution (3x3, zero pad 1, stride 1 or 2) ----------

namespace detail {

template <class T>
void im2col3(const T* x, int c, int h, int w, int stride, int ho, int wo, T* col) {
    // col is (c*9, ho*wo)
    int hw_out = ho * wo;
    for (int ci = 0; ci < c; ++ci) {
        const T* xc = x + static_cast<size_t>(ci) * h * w;
        for (int ky = 0; ky < 3; ++ky) {
            for (int kx = 0; kx < 3; ++kx) {
                T* row = col + (static_cast<size_t>(ci) * 9 + ky * 3 + kx) * hw_out;
                for (int oy = 0; oy < ho; ++oy) {
                    int iy = oy * stride + ky - 1;
                    for (int ox = 0; ox < wo; ++ox) {
                        int ix = ox * stride + kx - 1;
                        row[oy * wo + ox] = (iy >= 0 && iy < h && ix >= 0 && ix < w)
                                                ? xc[iy * w + ix]
                                                : T(0);
                    }
                }
            }
        }
    }
}

template <class T>
void col2im3(const T* col, int c, int h, int w, int stride, int ho, int wo, T* dx_accum) {
    int hw_out = ho * wo;
    for (int ci = 0; ci < c; ++ci) {
        T* xc = dx_accum + static_cast<size_t>(ci) * h * w;
        for (int ky = 0; ky < 3; ++ky) {
            for (int kx = 0; kx < 3; ++kx) {
                const T* row = col + (static_cast<size_t>(ci) * 9 + ky * 3 + kx) * hw_out;
                for (int oy = 0; oy < ho; ++oy) {
                    int iy = oy * stride + ky - 1;
                    if (iy < 0 || iy >= h) continue;
                    for (int ox = 0; ox < wo; ++ox) {
                        int ix = ox * stride + kx - 1;
                        if (ix < 0 || ix >= w) continue;
                        xc[iy * w + ix] += row[oy * wo + ox];
                    }
                }
            }
        }
    }
}

}  // namespace detail

// x: (Cin,H,W), w: (Cout,Cin,3,3), b: (Cout). Zero padding 1.
template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, int stride) {
    if (x.shape().size() != 3 || w.shape().size() != 4 || w.shape()[2] != 3 || w.shape()[3] != 3)
        throw ShapeError("conv2d expects x(C,H,W), w(O,C,3,3)");
    if (w.shape()[1] != x.shape()[0]) throw ShapeError("conv2d channel mismatch");
    if (stride != 1 && stride != 2) throw ContractError("conv2d stride must be 1 or 2");
    int c = x.shape()[0], h = x.shape()[1], wd = x.shape()[2], o = w.shape()[0];
    int ho = (h + 2 - 3) / stride + 1;
    int wo = (wd + 2 - 3) / stride + 1;
    int hw_out = ho * wo, ck = c * 9;
    std::vector<T> col(static_cast<size_t>(ck) * hw_out);
    detail::im2col3(x.data().data(), c, h, wd, stride, ho, wo, col.data());
    std::vector<T> v(static_cast<size_t>(o) * hw_out);
    detail::mm(w.data().data(), col.data(), v.data(), o, ck, hw_out);
    for (int oc = 0; oc < o; ++oc)
        for (int i = 0; i < hw_out; ++i) v[static_cast<size_t>(oc) * hw_out + i] += b[oc];
    return Tensor<T>::make_node(
        {o, ho, wo}, std::move(v), {x, w, b},
        [x, w, b, c, h, wd, o, stride, ho, wo, hw_out, ck](auto& node) {
            std::vector<T> col(static_cast<size_t>(ck) * hw_out);
            detail::im2col3(x.data().data(), c, h, wd, stride, ho, wo, col.data());
            if (w.tracked()) {
                auto colt = detail::transpose(col.data(), ck, hw_out);
                std::vector<T> dw(static_cast<size_t>(o) * ck);
                detail::mm(node.grad.data(), colt.data(), dw.data(), o, hw_out, ck);
                auto& g = Tensor<T>::grad_buf(w);
                for (size_t i = 0; i < g.size(); ++i) g[i] += dw[i];
            }
            if (b.tracked()) {
                auto& g = Tensor<T>::grad_buf(b);
                for (int oc = 0; oc < o; ++oc) {
                    T s = 0;
                    for (int i = 0; i < hw_out; ++i) s += node.grad[static_cast<size_t>(oc) * hw_out + i];
                    g[oc] += s;
                }
            }
            if (x.tracked()) {
                auto wt = detail::transpose(w.data().data(), o, ck);
                std::vector<T> dcol(static_cast<size_t>(ck) * hw_out);
                detail::mm(wt.data(), node.grad.data(), dcol.data(), ck, o, hw_out);
                auto& g = Tensor<T>::grad_buf(x);
                detail::col2im3(dcol.data(), c, h, wd, stride, ho, wo, g.data());
            }
        });
}

// ---------- resizing ----------

// periodic (wrap-around) spatial padding of a (C,H,W) tensor
template <class T>
Tensor<T> pad_wrap(const Tensor<T>& x, int pad) {
    if (x.shape().size() != 3) throw ShapeError("pad_wrap expects (C,H,W), got " + shape_str(x.shape()));
    int c = x.shape()[0], h = x.shape()[1], w = x.shape()[2];
    if (pad < 0) throw ContractError("pad_wrap margin must be non-negative");
    if (pad == 0) return x;
    int oh = h + 2 * pad, ow = w + 2 * pad;
    auto src = [pad](int i, int n) { return ((i - pad) % n + n) % n; };
    std::vector<T> v(static_cast<size_t>(c) * oh * ow);
    for (int ch = 0; ch < c; ++ch)
        for (int y = 0; y < oh; ++y) {
            int sy = src(y, h);
            for (int xx = 0; xx < ow; ++xx)
                v[(static_cast<size_t>(ch) * oh + y) * ow + xx] =
                    x[(static_cast<size_t>(ch) * h + sy) * w + src(xx, w)];
        }
    return Tensor<T>::make_node({c, oh, ow}, std::move(v), {x}, [x, pad, c, h, w, oh, ow, src](auto& n) {
        auto& g = Tensor<T>::grad_buf(x);
        for (int ch = 0; ch < c; ++ch)
            for (int y = 0; y < oh; ++y) {
                int sy = src(y, h);
                for (int xx = 0; xx < ow; ++xx)
                    g[(static_cast<size_t>(ch) * h + sy) * w + src(xx, w)] +=
                        n.grad[(static_cast<size_t>(ch) * oh + y) * ow + xx];
            }
    });
}

// central spatial crop removing a fixed margin from a (C,H,W) tensor
template <class T>
Tensor<T> crop_center(const Tensor<T>& x, int margin) {
    if (x.shape().size() != 3)
        throw ShapeError("crop_center expects (C,H,W), got " + shape_str(x.shape()));
    int c = x.shape()[0], h = x.shape()[1], w = x.shape()[2];
    if (margin < 0 || h - 2 * margin < 1 || w - 2 * margin < 1)
        throw ContractError("crop_center margin leaves no pixels");
    if (margin == 0) return x;
    int oh = h - 2 * margin, ow = w - 2 * margin;
    std::vector<T> v(static_cast<size_t>(c) * oh * ow);
    for (int ch = 0; ch < c; ++ch)
        for (int y = 0; y < oh; ++y)
            for (int xx = 0; xx < ow; ++xx)
                v[(static_cast<size_t>(ch) * oh + y) * ow + xx] =
                    x[(static_cast<size_t>(ch) * h + y + margin) * w + xx + margin];
    return Tensor<T>::make_node({c, oh, ow}, std::move(v), {x}, [x, margin, c, h, w, oh, ow](auto& n) {
        auto& g = Tensor<T>::grad_buf(x);
        for (int ch = 0; ch < c; ++ch)
            for (int y = 0; y < oh; ++y)
                for (int xx = 0; xx < ow; ++xx)
                    g[(static_cast<size_t>(ch) * h + y + margin) * w + xx + margin] +=
                        n.grad[(static_cast<size_t>(ch) * oh + y) * ow + xx];
    });
}

template <class T>
Tensor<T> resize_nearest(const Tensor<T>& x, int factor) {
    if (x.shape().size() != 3) throw ShapeError("resize_nearest expects (C,H,W)");
    if (factor < 1) throw ContractError("resize factor must be >= 1");
    int c = x.shape()[0], h = x.shape()[1], w = x.shape()[2];
    int ho = h * factor, wo = w * factor;
    std::vector<T> v(static_cast<size_t>(c) * ho * wo);
    for (int ci = 0; ci < c; ++ci)
        for (int y = 0; y < ho; ++y)
            for (int xx = 0; xx < wo; ++xx)
                v[(static_cast<size_t>(ci) * ho + y) * wo + xx] =
                    x[(static_cast<size_t>(ci) * h + y / factor) * w + xx / factor];
    return Tensor<T>::make_node({c, ho, wo}, std::move(v), {x}, [x, c, h, w, ho, wo, factor](auto& n) {
        auto& g = Tensor<T>::grad_buf(x);
        for (int ci = 0; ci < c; ++ci)
            for (int y = 0; y < ho; ++y)
                for (int xx = 0; xx < wo; ++xx)
                    g[(static_cast<size_t>(ci) * h + y / factor) * w + xx / factor] +=
                        n.grad[(static_cast<size_t>(ci) * ho + y) * wo + xx];
    });
}

namespace detail {
struct LerpTap {
    int i0, i1;
    double w0, w1;
};
inline LerpTap bilinear_tap(int dst, int src_size, double scale) {
    // half-pixel centers; same-size resize is exactly the identity
    double s = (dst + 0.5) * scale - 0.5;
    double f = std::floor(s);
    int i0 = static_cast<int>(f);
    double w1 = s - f;
    int i1 = i0 + 1;
    if (i0 < 0) { i0 = 0; }
    if (i1 < 0) { i1 = 0; }
    if (i0 > src_size - 1) i0 = src_size - 1;
    if (i1 > src_size - 1) i1 = src_size - 1;
    return {i0, i1, 1.0 - w1, w1};
}
}  // namespace detail

template <class T>
Tensor<T> resize_bilinear(const Tensor<T>& x, int ho, int wo) {
    if (x.shape().size() != 3) throw ShapeError("resize_bilinear expects (C,H,W)");
    if (ho < 1 || wo < 1) throw ContractError("resize target must be positive");
    int c = x.shape()[0], h = x.shape()[1], w = x.shape()[2];
    double sy = static_cast<double>(h) / ho, sx = static_cast<double>(w) / wo;
    std::vector<detail::LerpTap> ty(ho), tx(wo);
    for (int y = 0; y < ho; ++y) ty[y] = detail::bilinear_tap(y, h, sy);
    for (int xx = 0; xx < wo; ++xx) tx[xx] = detail::bilinear_tap(xx, w, sx);
    std::vector<T> v(static_cast<size_t>(c) * ho * wo);
    for (int ci = 0; ci < c; ++ci) {
        const T* xc = x.data().data() + static_cast<size_t>(ci) * h * w;
        T* vc = v.data() + static_cast<size_t>(ci) * ho * wo;
        for (int y = 0; y < ho; ++y)
            for (int xx = 0; xx < wo; ++xx) {
                const auto& a = ty[y];
                const auto& b = tx[xx];
                vc[y * wo + xx] = static_cast<T>(
                    a.w0 * (b.w0 * xc[a.i0 * w + b.i0] + b.w1 * xc[a.i0 * w + b.i1]) +
                    a.w1 * (b.w0 * xc[a.i1 * w + b.i0] + b.w1 * xc[a.i1 * w + b.i1]));
            }
    }
    return Tensor<T>::make_node({c, ho, wo}, std::move(v), {x},
                                [x, c, h, w, ho, wo, ty = std::move(ty), tx = std::move(tx)](auto& n) {
        auto& g = Tensor<T>::grad_buf(x);
        for (int ci = 0; ci < c; ++ci) {
            T* gc = g.data() + static_cast<size_t>(ci) * h * w;
            const T* nc = n.grad.data() + static_cast<size_t>(ci) * ho * wo;
            for (int y = 0; y < ho; ++y)
                for (int xx = 0; xx < wo; ++xx) {
                    const auto& a = ty[y];
                    const auto& b = tx[xx];
                    T gv = nc[y * wo + xx];
                    gc[a.i0 * w + b.i0] += static_cast<T>(a.w0 * b.w0) * gv;
                    gc[a.i0 * w + b.i1] += static_cast<T>(a.w0 * b.w1) * gv;
                    gc[a.i1 * w + b.i0] += static_cast<T>(a.w1 * b.w0) * gv;
                    gc[a.i1 * w + b.i1] += static_cast<T>(a.w1 * b.w1) * gv;
                }
        }
    });
}

// ---------- channel ops (CHW) ----------

template <class T>
Tensor<T> concat_channels(const std::vector<Tensor<T>>& parts) {
    if (parts.empty()) throw ContractError("concat of zero tensors");
    int h = parts[0].shape()[1], w = parts[0].shape()[2];
    int ctot = 0;
    for (const auto& p : parts) {
        if (p.shape().size() != 3 || p.shape()[1] != h || p.shape()[2] != w)
            throw ShapeError("concat_channels spatial mismatch");
        ctot += p.shape()[0];
    }
    std::vector<T> v;
    v.reserve(static_cast<size_t>(ctot) * h * w);
    for (const auto& p : parts) v.insert(v.end(), p.data().begin(), p.data().end());
    std::vector<Tensor<T>> parents = parts;
    return Tensor<T>::make_node({ctot, h, w}, std::move(v), parents, [parents, h, w](auto& n) {
        size_t off = 0;
        for (const auto& p : parents) {
            size_t sz = p.numel();
            if (p.tracked()) {
                auto& g = Tensor<T>::grad_buf(p);
                for (size_t i = 0; i < sz; ++i) g[i] += n.grad[off + i];
            }
            off += sz;
        }
    });
}

template <class T>
Tensor<T> slice_channels(const Tensor<T>& x, int from, int to) {
    if (x.shape().size() != 3 || from < 0 || to > x.shape()[0] || from >= to)
        throw ShapeError("slice_channels range");
    int h = x.shape()[1], w = x.shape()[2];
    size_t hw = static_cast<size_t>(h) * w;
    std::vector<T> v(x.data().begin() + from * hw, x.data().begin() + to * hw);
    return Tensor<T>::make_node({to - from, h, w}, std::move(v), {x}, [x, from, hw](auto& n) {
        auto& g = Tensor<T>::grad_buf(x);
        for (size_t i = 0; i < n.grad.size(); ++i) g[from * hw + i] += n.grad[i];
    });
}

// Pure gather by channel index; indices may repeat.
template <class T>
Tensor<T> gather_channels(const Tensor<T>& x, const std::vector<int>& idx) {
    if (x.shape().size() != 3) throw ShapeError("gather_channels expects (C,H,W)");
    int c = x.shape()[0], h = x.shape()[1], w = x.shape()[2];
    size_t hw = static_cast<size_t>(h) * w;
    for (int i : idx)
        if (i < 0 || i >= c) throw ShapeError("gather_channels index out of range");
    std::vector<T> v(idx.size() * hw);
    for (size_t j = 0; j < idx.size(); ++j)
        std::copy_n(x.data().begin() + idx[j] * hw, hw, v.begin() + j * hw);
    return Tensor<T>::make_node({static_cast<int>(idx.size()), h, w}, std::move(v), {x}, [x, idx, hw](auto& n) {
        auto& g = Tensor<T>::grad_buf(x);
        for (size_t j = 0; j < idx.size(); ++j)
            for (size_t i = 0; i < hw; ++i) g[idx[j] * hw + i] += n.grad[j * hw + i];
    });
}

// ---------- global pooling (CHW -> C) ----------

template <class T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
    if (x.shape().size() != 3) throw ShapeError("global_avg_pool expects (C,H,W)");
    int c = x.shape()[0];
    size_t hw = static_cast<size_t>(x.shape()[1]) * x.shape()[2];
    std::vector<T> v(c);
    for (int ci = 0; ci < c; ++ci) {
        T s = 0;
        for (size_t i = 0; i < hw; ++i) s += x[ci * hw + i];
        v[ci] = s / static_cast<T>(hw);
    }
    return Tensor<T>::make_node({c}, std::move(v), {x}, [x, c, hw](auto& n) {
        auto& g = Tensor<T>::grad_buf(x);
        for (int ci = 0; ci < c; ++ci) {
            T gv = n.grad[ci] / static_cast<T>(hw);
            for (size_t i = 0; i < hw; ++i) g[ci * hw + i] += gv;
        }
    });
}

template <class T>
Tensor<T> global_max_pool(const Tensor<T>& x) {
    if (x.shape().size() != 3) throw ShapeError("global_max_pool expects (C,H,W)");
    int c = x.shape()[0];
    size_t hw = static_cast<size_t>(x.shape()[1]) * x.shape()[2];
    std::vector<T> v(c);
    std::vector<size_t> arg(c);
    for (int ci = 0; ci < c; ++ci) {
        size_t best = 0;
        for (size_t i = 1; i < hw; ++i)
            if (x[ci * hw + i] > x[ci * hw + best]) best = i;
        v[ci] = x[ci * hw + best];
        arg[ci] = best;
    }
    return Tensor<T>::make_node({c}, std::move(v), {x}, [x, c, hw, arg = std::move(arg)](auto& n) {
        auto& g = Tensor<T>::grad_buf(x);
        for (int ci = 0; ci < c; ++ci) g[ci * hw + arg[ci]] += n.grad[ci];
    });
}

// ---------- sampling ----------

template <class T>
Tensor<T> sample_standard_normal(Rng& rng, const Shape& shape) {
    size_t n = shape_numel(shape);
    std::vector<T> v(n);
    for (size_t i = 0; i < n; ++i) v[i] = static_cast<T>(rng.normal());
    return Tensor<T>::from_data(shape, std::move(v));
}

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

}  // namespace anom
