#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "anom/nn.hpp"
#include "anom/tensor.hpp"

namespace anom {

// beta/alpha tables for a T-step forward process. beta_tilde is the
// posterior variance of q(x_{t-1}|x_t,x_0); beta_tilde[0] (t=1) is defined
// as beta_1 by taking alpha_bar_0 = 1.
struct DiffusionSchedule {
    int T = 0;
    std::vector<double> beta, alpha, alpha_bar, beta_tilde;
    // original timestep each entry conditions the denoiser on (1-based);
    // differs from 1..T only for respaced schedules
    std::vector<int> orig_t;
    int orig_T = 0;

    double b(int t) const { return beta[t - 1]; }
    double a(int t) const { return alpha[t - 1]; }
    double ab(int t) const { return alpha_bar[t - 1]; }
    double bt(int t) const { return beta_tilde[t - 1]; }
};

enum class ScheduleKind { linear, cosine };
enum class SamplerKind { ddpm, ddim };
enum class DdimSigma { beta, beta_tilde, learned };

inline DiffusionSchedule build_schedule(int T, ScheduleKind kind) {
    if (T < 2) throw ContractError("schedule needs T >= 2");
    DiffusionSchedule s;
    s.T = T;
    s.orig_T = T;
    s.beta.resize(T);
    if (kind == ScheduleKind::linear) {
        double lo = 1e-4, hi = 0.02;
        for (int t = 0; t < T; ++t) s.beta[t] = lo + (hi - lo) * t / (T - 1);
    } else {
        auto f = [T](double t) {
            double v = std::cos((t / T + 0.008) / 1.008 * 1.5707963267948966);
            return v * v;
        };
        double f0 = f(0.0);
        double prev_ab = 1.0;
        for (int t = 1; t <= T; ++t) {
            double ab = f(static_cast<double>(t)) / f0;
            double beta = 1.0 - ab / prev_ab;
            s.beta[t - 1] = std::min(beta, 0.999);
            prev_ab = ab;
        }
    }
    s.alpha.resize(T);
    s.alpha_bar.resize(T);
    s.beta_tilde.resize(T);
    s.orig_t.resize(T);
    double ab = 1.0;
    for (int t = 0; t < T; ++t) {
        s.alpha[t] = 1.0 - s.beta[t];
        double ab_prev = ab;
        ab *= s.alpha[t];
        s.alpha_bar[t] = ab;
        s.beta_tilde[t] = t == 0 ? s.beta[0] : (1.0 - ab_prev) / (1.0 - ab) * s.beta[t];
        s.orig_t[t] = t + 1;
    }
    return s;
}

// Sub-schedule over a descending step list (last element 1). Betas are
// recomputed from the retained alpha_bar values.
inline DiffusionSchedule respace(const DiffusionSchedule& full, const std::vector<int>& steps_desc) {
    if (steps_desc.empty() || steps_desc.back() != 1)
        throw ContractError("respaced step list must be non-empty and end at 1");
    for (size_t i = 0; i + 1 < steps_desc.size(); ++i)
        if (steps_desc[i] <= steps_desc[i + 1]) throw ContractError("step list must be strictly descending");
    for (int t : steps_desc)
        if (t < 1 || t > full.T) throw ContractError("step outside schedule");

    std::vector<int> asc(steps_desc.rbegin(), steps_desc.rend());
    DiffusionSchedule s;
    s.T = static_cast<int>(asc.size());
    s.orig_T = full.orig_T;
    double prev_ab = 1.0;
    for (int i = 0; i < s.T; ++i) {
        double ab = full.ab(asc[i]);
        double beta = 1.0 - ab / prev_ab;
        s.beta.push_back(beta);
        s.alpha.push_back(1.0 - beta);
        s.alpha_bar.push_back(ab);
        s.beta_tilde.push_back(i == 0 ? beta : (1.0 - prev_ab) / (1.0 - ab) * beta);
        s.orig_t.push_back(full.orig_t[asc[i] - 1]);
        prev_ab = ab;
    }
    return s;
}

inline std::vector<int> evenly_spaced_steps(int full_T, int count) {
    if (count < 1 || count > full_T) throw ContractError("bad respace count");
    std::vector<int> steps;
    for (int i = count - 1; i >= 0; --i) {
        int t = 1 + static_cast<int>(std::llround(static_cast<double>(i) * (full_T - 1) / std::max(1, count - 1)));
        if (steps.empty() || t < steps.back()) steps.push_back(t);
    }
    if (steps.back() != 1) steps.push_back(1);
    return steps;
}

// ---------- denoiser interface ----------

template <class T>
struct DenoiserOutput {
    Tensor<T> eps_hat;  // predicted noise, same shape as x_t
    Tensor<T> v;        // per-element log-variance interpolation vector
};

template <class T>
class Denoiser {
public:
    virtual ~Denoiser() = default;
    // t is the original (pre-respacing) 1-based timestep; orig_T its range.
    virtual DenoiserOutput<T> predict(const Tensor<T>& x_t, int t, int orig_T, double sqrt_alpha_bar) = 0;
    virtual ParamSet<T>& params() = 0;
};

// Small U-Net over (C,H,W) with two downsampling stages; time enters as two
// constant conditioning planes. Output head is zero-initialized 1x1.
template <class T>
class UNetDenoiser : public Denoiser<T> {
public:
    UNetDenoiser(int in_ch, int base, uint64_t seed) : in_ch_(in_ch) {
        Rng rng(seed);
        stem_ = Conv3x3<T>(ps_, "stem", in_ch + 2, base, 1, rng);
        d1_ = ResBlock<T>(ps_, "d1", base, base, rng);
        down1_ = Conv3x3<T>(ps_, "down1", base, 2 * base, 2, rng);
        d2_ = ResBlock<T>(ps_, "d2", 2 * base, 2 * base, rng);
        down2_ = Conv3x3<T>(ps_, "down2", 2 * base, 4 * base, 2, rng);
        mid_ = ResBlock<T>(ps_, "mid", 4 * base, 4 * base, rng);
        upc2_ = Conv3x3<T>(ps_, "upc2", 4 * base, 2 * base, 1, rng);
        u2_ = ResBlock<T>(ps_, "u2", 4 * base, 2 * base, rng);
        upc1_ = Conv3x3<T>(ps_, "upc1", 2 * base, base, 1, rng);
        u1_ = ResBlock<T>(ps_, "u1", 2 * base, base, rng);
        head_ = ChannelDense<T>(ps_, "head", base, 2 * in_ch, rng, /*zero_init=*/true);
    }

    DenoiserOutput<T> predict(const Tensor<T>& x, int t, int orig_T, double sab) override {
        int h = x.shape()[1], w = x.shape()[2];
        if (h % 4 != 0 || w % 4 != 0) throw ShapeError("denoiser input must be divisible by 4");
        Tensor<T> pt = Tensor<T>::filled({1, h, w}, static_cast<T>(static_cast<double>(t) / orig_T));
        Tensor<T> pa = Tensor<T>::filled({1, h, w}, static_cast<T>(sab));
        Tensor<T> s = stem_(concat_channels<T>({x, pt, pa}));
        Tensor<T> f1 = d1_(s);
        Tensor<T> f2 = d2_(down1_(f1));
        Tensor<T> m = mid_(down2_(f2));
        Tensor<T> y2 = u2_(concat_channels<T>({upc2_(resize_nearest(m, 2)), f2}));
        Tensor<T> y1 = u1_(concat_channels<T>({upc1_(resize_nearest(y2, 2)), f1}));
        Tensor<T> out = head_(y1);
        return {slice_channels(out, 0, in_ch_), slice_channels(out, in_ch_, 2 * in_ch_)};
    }

    ParamSet<T>& params() override { return ps_; }

private:
    int in_ch_;
    ParamSet<T> ps_;
    Conv3x3<T> stem_, down1_, down2_, upc2_, upc1_;
    ResBlock<T> d1_, d2_, mid_, u2_, u1_;
    ChannelDense<T> head_;
};

// MLP denoiser for flat (d,) samples; used for non-image toy distributions.
template <class T>
class MlpDenoiser : public Denoiser<T> {
public:
    MlpDenoiser(int dim, int hidden, uint64_t seed) : dim_(dim) {
        Rng rng(seed);
        l1_ = Dense<T>(ps_, "l1", dim + 2, hidden, rng);
        l2_ = Dense<T>(ps_, "l2", hidden, hidden, rng);
        l3_ = Dense<T>(ps_, "l3", hidden, 2 * dim, rng);
    }

    DenoiserOutput<T> predict(const Tensor<T>& x, int t, int orig_T, double sab) override {
        std::vector<T> in(x.data());
        in.push_back(static_cast<T>(static_cast<double>(t) / orig_T));
        in.push_back(static_cast<T>(sab));
        Tensor<T> inp = Tensor<T>::from_data({dim_ + 2}, std::move(in));
        Tensor<T> h = relu(l2_(relu(l1_(inp))));
        Tensor<T> out = l3_(h);
        Tensor<T> flat_eps = Tensor<T>::make_node(
            x.shape(), std::vector<T>(out.data().begin(), out.data().begin() + dim_), {out},
            [out, d = dim_](auto& n) {
                auto& g = Tensor<T>::grad_buf(out);
                for (int i = 0; i < d; ++i) g[i] += n.grad[i];
            });
        Tensor<T> flat_v = Tensor<T>::make_node(
            x.shape(), std::vector<T>(out.data().begin() + dim_, out.data().end()), {out},
            [out, d = dim_](auto& n) {
                auto& g = Tensor<T>::grad_buf(out);
                for (int i = 0; i < d; ++i) g[d + i] += n.grad[i];
            });
        return {flat_eps, flat_v};
    }

    ParamSet<T>& params() override { return ps_; }

private:
    int dim_;
    ParamSet<T> ps_;
    Dense<T> l1_, l2_, l3_;
};

// ---------- forward / posterior ----------

template <class T>
Tensor<T> q_sample(const Tensor<T>& x0, int t, const Tensor<T>& eps, const DiffusionSchedule& sched) {
    if (t < 1 || t > sched.T) throw ContractError("q_sample: t out of range");
    require_same_shape(x0, eps, "q_sample");
    T sa = static_cast<T>(std::sqrt(sched.ab(t)));
    T so = static_cast<T>(std::sqrt(1.0 - sched.ab(t)));
    return add(mul_scalar(x0, sa), mul_scalar(eps, so));
}

// mu of p(x_{t-1}|x_t) from the eps parameterization, and the learnable
// variance: Sigma = exp(v log beta_t + (1-v) log beta_tilde_t), elementwise.
template <class T>
struct PosteriorMV {
    Tensor<T> mu;
    Tensor<T> var;
    Tensor<T> logvar;
};

template <class T>
PosteriorMV<T> posterior_mean_variance(const DiffusionSchedule& sched, const Tensor<T>& x_t, int t,
                                       const DenoiserOutput<T>& out) {
    if (t < 1 || t > sched.T) throw ContractError("posterior: t out of range");
    require_same_shape(x_t, out.eps_hat, "posterior eps_hat");
    require_same_shape(x_t, out.v, "posterior v");
    double at = sched.a(t), ab = sched.ab(t), bt = sched.b(t);
    T coef = static_cast<T>(bt / std::sqrt(1.0 - ab));
    T inv_sqrt_a = static_cast<T>(1.0 / std::sqrt(at));
    Tensor<T> mu = mul_scalar(sub(x_t, mul_scalar(out.eps_hat, coef)), inv_sqrt_a);
    T logb = static_cast<T>(std::log(bt));
    T logbt = static_cast<T>(std::log(sched.bt(t)));
    Tensor<T> logvar = add_scalar(mul_scalar(out.v, logb - logbt), logbt);
    // sampling variance computed as beta^v * beta_tilde^(1-v): same value,
    // but exact at the v=0 and v=1 endpoints. Gradients use logvar only.
    std::vector<T> var(out.v.numel());
    for (size_t i = 0; i < var.size(); ++i) {
        double v = static_cast<double>(out.v[i]);
        var[i] = static_cast<T>(std::pow(bt, v) * std::pow(sched.bt(t), 1.0 - v));
    }
    return {mu, Tensor<T>::from_data(out.v.shape(), std::move(var)), logvar};
}

// KL(N(mu1, exp(lv1)) || N(mu2, exp(lv2))), elementwise.
template <class T>
Tensor<T> gaussian_kl(const Tensor<T>& mu1, const Tensor<T>& lv1, const Tensor<T>& mu2,
                      const Tensor<T>& lv2) {
    Tensor<T> dlv = sub(lv2, lv1);
    Tensor<T> ratio = exp(neg(dlv));  // exp(lv1 - lv2)
    Tensor<T> msq = mul(square(sub(mu1, mu2)), exp(neg(lv2)));
    return mul_scalar(add(add(dlv, ratio), add_scalar(msq, T(-1))), T(0.5));
}

// -log of the Gaussian density at the data value times the pixel bin width.
template <class T>
Tensor<T> discretized_nll(const Tensor<T>& x0, const Tensor<T>& mu, const Tensor<T>& logvar,
                          double bin_width) {
    Tensor<T> quad = mul(square(sub(x0, mu)), exp(neg(logvar)));
    T c = static_cast<T>(std::log(2.0 * 3.14159265358979323846) - 2.0 * std::log(bin_width));
    return mul_scalar(add(add(logvar, quad), Tensor<T>::filled(logvar.shape(), c)), T(0.5));
}

// ---------- hybrid training loss ----------

struct HybridLossParts {
    double simple = 0;
    double vlb = 0;
};

// L_simple + gamma * L_vlb over a batch; the mean inside L_vlb is
// gradient-blocked so only the variance head learns from it. L_vlb is a
// single-t unbiased estimate of the term sum, plus the constant prior term.
template <class T>
Tensor<T> loss_hybrid(const std::vector<Tensor<T>>& batch, const DiffusionSchedule& sched,
                      Denoiser<T>& den, double gamma, Rng& rng, HybridLossParts* parts = nullptr) {
    if (gamma < 0) throw ContractError("gamma must be >= 0");
    if (batch.empty()) throw ContractError("empty batch");
    Tensor<T> simple_acc = Tensor<T>::scalar(T(0));
    Tensor<T> vlb_acc = Tensor<T>::scalar(T(0));
    for (const auto& x0 : batch) {
        int t = 1 + static_cast<int>(rng.next_below(static_cast<uint64_t>(sched.T)));
        Tensor<T> eps = sample_standard_normal<T>(rng, x0.shape());
        Tensor<T> x_t = q_sample(x0, t, eps, sched);
        auto out = den.predict(x_t, sched.orig_t[t - 1], sched.orig_T, std::sqrt(sched.ab(t)));
        simple_acc = add(simple_acc, mean_all(square(sub(eps, out.eps_hat))));

        if (gamma > 0) {
            auto pmv = posterior_mean_variance(sched, x_t, t, out);
            Tensor<T> mu_p = stop_gradient(pmv.mu);
            Tensor<T> term;
            if (t == 1) {
                term = mean_all(discretized_nll(x0, mu_p, pmv.logvar, 2.0 / 255.0));
            } else {
                // true posterior q(x_{t-1}|x_t, x0)
                double ab_prev = t >= 2 ? sched.ab(t - 1) : 1.0;
                double ab = sched.ab(t);
                double bt = sched.b(t);
                T c0 = static_cast<T>(std::sqrt(ab_prev) * bt / (1.0 - ab));
                T ct = static_cast<T>(std::sqrt(sched.a(t)) * (1.0 - ab_prev) / (1.0 - ab));
                Tensor<T> mu_q = add(mul_scalar(x0, c0), mul_scalar(x_t, ct));
                Tensor<T> lv_q = Tensor<T>::filled(x0.shape(), static_cast<T>(std::log(sched.bt(t))));
                term = mean_all(gaussian_kl(mu_q, lv_q, mu_p, pmv.logvar));
            }
            vlb_acc = add(vlb_acc, mul_scalar(term, static_cast<T>(sched.T)));
            // prior term KL(q(x_T|x0) || N(0,I)); constant in the parameters
            double abT = sched.ab(sched.T);
            double prior = 0;
            for (size_t i = 0; i < x0.numel(); ++i) {
                double m = std::sqrt(abT) * static_cast<double>(x0[i]);
                prior += 0.5 * (-std::log(1.0 - abT) + (1.0 - abT) + m * m - 1.0);
            }
            vlb_acc = add_scalar(vlb_acc, static_cast<T>(prior / static_cast<double>(x0.numel())));
        }
    }
    T inv_n = T(1) / static_cast<T>(batch.size());
    Tensor<T> simple = mul_scalar(simple_acc, inv_n);
    Tensor<T> vlb = mul_scalar(vlb_acc, inv_n);
    if (parts) {
        parts->simple = static_cast<double>(simple.item());
        parts->vlb = static_cast<double>(vlb.item());
    }
    return add(simple, mul_scalar(vlb, static_cast<T>(gamma)));
}

// ---------- sampling ----------

struct SamplerConfig {
    SamplerKind kind = SamplerKind::ddpm;
    double s = 0.0;  // anomaly strength
    DdimSigma ddim_sigma_choice = DdimSigma::learned;
    std::vector<int> steps;  // descending, last = 1; empty = all steps

    void validate(int full_T) const {
        if (s < 0) throw ContractError("anomaly strength must be >= 0");
        if (!steps.empty()) {
            if (steps.back() != 1) throw ContractError("step list must end at 1");
            for (size_t i = 0; i + 1 < steps.size(); ++i)
                if (steps[i] <= steps[i + 1]) throw ContractError("step list must be strictly descending");
            if (steps.front() > full_T) throw ContractError("step list exceeds schedule");
        }
    }
};

// One stochastic reverse step: x ~ N(mu, (1+s) * var), elementwise.
template <class T>
Tensor<T> ddpm_step(const Tensor<T>& mu, const Tensor<T>& var, double s, Rng& rng) {
    Tensor<T> z = sample_standard_normal<T>(rng, mu.shape());
    std::vector<T> out(mu.numel());
    for (size_t i = 0; i < out.size(); ++i)
        out[i] = mu[i] + static_cast<T>(std::sqrt((1.0 + s) * static_cast<double>(var[i]))) * z[i];
    return Tensor<T>::from_data(mu.shape(), std::move(out));
}

// Reverse chain with transition variance inflated by (1+s) (ddpm) or a
// deterministic chain plus additive noise of variance s*Sigma (ddim).
template <class T>
Tensor<T> sdas_sample(Denoiser<T>& den, const DiffusionSchedule& full, const SamplerConfig& cfg,
                      Rng& rng, const Shape& shape) {
    cfg.validate(full.T);
    DiffusionSchedule sched = cfg.steps.empty() ? full : respace(full, cfg.steps);
    Tensor<T> x = sample_standard_normal<T>(rng, shape);
    for (int i = sched.T; i >= 1; --i) {
        auto out = den.predict(x, sched.orig_t[i - 1], sched.orig_T, std::sqrt(sched.ab(i)));
        if (cfg.kind == SamplerKind::ddpm) {
            auto pmv = posterior_mean_variance(sched, x, i, out);
            x = ddpm_step(stop_gradient(pmv.mu), stop_gradient(pmv.var), cfg.s, rng);
        } else {
            double ab = sched.ab(i);
            double ab_prev = i >= 2 ? sched.ab(i - 1) : 1.0;
            T c_x = static_cast<T>(std::sqrt(ab_prev / ab));
            T c_eps = static_cast<T>(std::sqrt(1.0 - ab_prev) - std::sqrt(ab_prev / ab) * std::sqrt(1.0 - ab));
            Tensor<T> eh = stop_gradient(out.eps_hat);
            std::vector<T> nxt(x.numel());
            if (cfg.s > 0) {
                std::vector<T> sig(x.numel());
                if (cfg.ddim_sigma_choice == DdimSigma::learned) {
                    auto pmv = posterior_mean_variance(sched, x, i, out);
                    for (size_t j = 0; j < sig.size(); ++j) sig[j] = pmv.var[j];
                } else {
                    T v = static_cast<T>(cfg.ddim_sigma_choice == DdimSigma::beta ? sched.b(i) : sched.bt(i));
                    std::fill(sig.begin(), sig.end(), v);
                }
                Tensor<T> z = sample_standard_normal<T>(rng, x.shape());
                for (size_t j = 0; j < nxt.size(); ++j)
                    nxt[j] = c_x * x[j] + c_eps * eh[j] +
                             static_cast<T>(std::sqrt(cfg.s * static_cast<double>(sig[j]))) * z[j];
            } else {
                for (size_t j = 0; j < nxt.size(); ++j) nxt[j] = c_x * x[j] + c_eps * eh[j];
            }
            x = Tensor<T>::from_data(x.shape(), std::move(nxt));
        }
    }
    return x;
}

// ---------- training ----------

struct DiffusionTrainConfig {
    int steps = 500;
    int batch = 4;
    double lr = 1e-3;
    double gamma = 0.001;
    uint64_t seed = 0;
};

struct DiffusionTrainLog {
    std::vector<double> simple;
    std::vector<double> vlb;
};

template <class T>
DiffusionTrainLog train_diffusion(std::vector<Tensor<T>>& dataset, const DiffusionSchedule& sched,
                                  Denoiser<T>& den, const DiffusionTrainConfig& cfg) {
    if (dataset.empty()) throw ContractError("empty diffusion training dataset");
    AdamOptimizer<T> opt(static_cast<T>(cfg.lr));
    Rng rng = Rng(cfg.seed).split(0xd1ff);
    DiffusionTrainLog log;
    for (int step = 0; step < cfg.steps; ++step) {
        std::vector<Tensor<T>> batch;
        for (int b = 0; b < cfg.batch; ++b)
            batch.push_back(dataset[rng.next_below(dataset.size())]);
        den.params().zero_grad();
        HybridLossParts parts;
        Tensor<T> loss = loss_hybrid(batch, sched, den, cfg.gamma, rng, &parts);
        loss.check_finite("diffusion loss");
        loss.backward();
        opt.step(den.params());
        log.simple.push_back(parts.simple);
        log.vlb.push_back(parts.vlb);
    }
    return log;
}

}  // namespace anom
