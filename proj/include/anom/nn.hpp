#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "anom/serialize.hpp"
#include "anom/tensor.hpp"

namespace anom {

template <class T>
Tensor<T> he_normal(Rng& rng, const Shape& shape, size_t fan_in) {
    T sd = static_cast<T>(std::sqrt(2.0 / static_cast<double>(fan_in)));
    Tensor<T> t = sample_standard_normal<T>(rng, shape);
    for (auto& x : t.mutable_data()) x *= sd;
    return t;
}

// 3x3 convolution layer, zero pad 1. Parameters live in the owning ParamSet.
template <class T>
struct Conv3x3 {
    Tensor<T> w, b;
    int stride = 1;

    Conv3x3() = default;
    Conv3x3(ParamSet<T>& ps, const std::string& name, int in_ch, int out_ch, int stride_, Rng& rng)
        : stride(stride_) {
        w = ps.add(name + ".w", he_normal<T>(rng, {out_ch, in_ch, 3, 3}, static_cast<size_t>(in_ch) * 9));
        b = ps.add(name + ".b", Tensor<T>::zeros({out_ch}));
    }

    Tensor<T> operator()(const Tensor<T>& x) const { return conv2d(x, w, b, stride); }
};

// 1x1 channel-mixing layer (per-pixel dense).
template <class T>
struct ChannelDense {
    Tensor<T> w, b;

    ChannelDense() = default;
    ChannelDense(ParamSet<T>& ps, const std::string& name, int in_ch, int out_ch, Rng& rng, bool zero_init = false) {
        w = ps.add(name + ".w", zero_init ? Tensor<T>::zeros({out_ch, in_ch})
                                          : he_normal<T>(rng, {out_ch, in_ch}, in_ch));
        b = ps.add(name + ".b", Tensor<T>::zeros({out_ch}));
    }

    Tensor<T> operator()(const Tensor<T>& x) const { return affine_channels(x, w, b); }
};

// Dense layer over 1-D vectors, x: (in) -> (out).
template <class T>
struct Dense {
    Tensor<T> w, b;

    Dense() = default;
    Dense(ParamSet<T>& ps, const std::string& name, int in_dim, int out_dim, Rng& rng) {
        w = ps.add(name + ".w", he_normal<T>(rng, {out_dim, in_dim}, in_dim));
        b = ps.add(name + ".b", Tensor<T>::zeros({out_dim}));
    }

    Tensor<T> operator()(const Tensor<T>& x) const {
        int in = x.shape()[0];
        Tensor<T> y = matmul(w, reshape(x, {in, 1}));
        return add(reshape(y, {w.shape()[0]}), b);
    }
};

// conv-relu-conv with identity skip; a 1x1 projection matches channels when needed.
template <class T>
struct ResBlock {
    Conv3x3<T> c1, c2;
    ChannelDense<T> proj;
    bool has_proj = false;

    ResBlock() = default;
    ResBlock(ParamSet<T>& ps, const std::string& name, int in_ch, int out_ch, Rng& rng) {
        c1 = Conv3x3<T>(ps, name + ".c1", in_ch, out_ch, 1, rng);
        c2 = Conv3x3<T>(ps, name + ".c2", out_ch, out_ch, 1, rng);
        if (in_ch != out_ch) {
            proj = ChannelDense<T>(ps, name + ".proj", in_ch, out_ch, rng);
            has_proj = true;
        }
    }

    Tensor<T> operator()(const Tensor<T>& x) const {
        Tensor<T> h = c2(relu(c1(x)));
        return add(h, has_proj ? proj(x) : x);
    }
};

// Adaptive-moment optimizer with bias correction. State is keyed by
// parameter name and carried between calls.
template <class T>
class AdamOptimizer {
public:
    explicit AdamOptimizer(T lr = T(1e-3), T beta1 = T(0.9), T beta2 = T(0.999), T eps = T(1e-8))
        : lr_(lr), b1_(beta1), b2_(beta2), eps_(eps) {}

    void step(ParamSet<T>& ps) {
        ++t_;
        T bc1 = T(1) - static_cast<T>(std::pow(static_cast<double>(b1_), t_));
        T bc2 = T(1) - static_cast<T>(std::pow(static_cast<double>(b2_), t_));
        for (auto& [name, p] : ps.params) {
            if (!p.has_grad()) throw ContractError("gradient missing for " + name);
            const auto& g = p.grad();
            auto& m = m_[name];
            auto& v = v_[name];
            if (m.empty()) {
                m.assign(p.numel(), T(0));
                v.assign(p.numel(), T(0));
            }
            auto& data = p.mutable_data();
            for (size_t i = 0; i < data.size(); ++i) {
                m[i] = b1_ * m[i] + (T(1) - b1_) * g[i];
                v[i] = b2_ * v[i] + (T(1) - b2_) * g[i] * g[i];
                T mhat = m[i] / bc1;
                T vhat = v[i] / bc2;
                data[i] -= lr_ * mhat / (static_cast<T>(std::sqrt(static_cast<double>(vhat))) + eps_);
            }
        }
    }

    void set_lr(T lr) { lr_ = lr; }
    int64_t steps_taken() const { return t_; }

private:
    T lr_, b1_, b2_, eps_;
    int64_t t_ = 0;
    std::map<std::string, std::vector<T>> m_, v_;
};

}  // namespace anom
