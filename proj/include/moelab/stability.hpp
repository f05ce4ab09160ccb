#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <string>
#include <vector>

#include "moelab/common.hpp"
#include "moelab/graph.hpp"
#include "moelab/param.hpp"
#include "moelab/tensor.hpp"

namespace moelab {

// ---- hidden z-loss ------------------------------------------------------------

// L_Z = (lambda/T) * sum_t (log sum_i exp(|z_t_i|))^2, computed with
// max-subtraction so huge activations cannot overflow the exp.
template <typename S>
double hidden_zloss_value(const Tensor<S>& z, double lambda) {
    check(z.ndim() == 2, "hidden_zloss: expects [T, d]");
    if (lambda == 0.0) return 0.0;
    const std::size_t d = z.cols();
    double acc = 0.0;
    for (std::size_t t = 0; t < z.rows(); ++t) {
        const S* row = z.row_ptr(t);
        double mx = 0.0;
        for (std::size_t i = 0; i < d; ++i) mx = std::max(mx, std::abs(static_cast<double>(row[i])));
        double sum = 0.0;
        for (std::size_t i = 0; i < d; ++i) sum += std::exp(std::abs(static_cast<double>(row[i])) - mx);
        const double lse = mx + std::log(sum);
        acc += lse * lse;
    }
    return lambda * acc / static_cast<double>(z.rows());
}

template <typename S>
typename Graph<S>::VarId hidden_zloss_node(Graph<S>& g, typename Graph<S>::VarId z,
                                           double lambda) {
    const Tensor<S>& zv = g.val(z);
    check(zv.ndim() == 2, "hidden_zloss: expects [T, d]");
    if (lambda == 0.0) return g.make_node(Tensor<S>::scalar(S(0)), false, nullptr);
    const double value = hidden_zloss_value(zv, lambda);
    const bool ng = g.needs_grad(z);
    auto id = g.make_node(Tensor<S>::scalar(static_cast<S>(value)), ng, nullptr);
    if (ng)
        g.set_backward(id, [id, z, lambda](Graph<S>& g2) {
            const S seed = g2.grad(id).data[0];
            const Tensor<S>& zv2 = g2.val(z);
            Tensor<S>& gz = g2.grad(z);
            const std::size_t d = zv2.cols();
            const double inv_t = 1.0 / static_cast<double>(zv2.rows());
            std::vector<double> p(d);
            for (std::size_t t = 0; t < zv2.rows(); ++t) {
                const S* row = zv2.row_ptr(t);
                double mx = 0.0;
                for (std::size_t i = 0; i < d; ++i)
                    mx = std::max(mx, std::abs(static_cast<double>(row[i])));
                double sum = 0.0;
                for (std::size_t i = 0; i < d; ++i) {
                    p[i] = std::exp(std::abs(static_cast<double>(row[i])) - mx);
                    sum += p[i];
                }
                const double lse = mx + std::log(sum);
                const double w = 2.0 * lambda * inv_t * lse / sum;
                S* grow = gz.row_ptr(t);
                for (std::size_t i = 0; i < d; ++i) {
                    const double sign = row[i] > S(0) ? 1.0 : (row[i] < S(0) ? -1.0 : 0.0);
                    grow[i] += seed * static_cast<S>(w * p[i] * sign);
                }
            }
        });
    return id;
}

// ---- Adam ----------------------------------------------------------------------

struct AdamConfig {
    double lr_embedding = 3e-3;
    double lr_hidden = 3e-3;
    double lr_unembedding = 3e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-16;

    bool operator==(const AdamConfig&) const = default;

    double lr_for(ParamClass c) const {
        switch (c) {
            case ParamClass::Embedding: return lr_embedding;
            case ParamClass::Hidden: return lr_hidden;
            case ParamClass::Unembedding: return lr_unembedding;
        }
        return lr_hidden;
    }
};

template <typename S>
struct AdamState {
    std::vector<Tensor<S>> m;  // aligned with the registry
    std::vector<Tensor<S>> v;
    std::uint64_t step = 0;

    explicit AdamState(const ParamRegistry<S>& params) { reset(params); }

    void reset(const ParamRegistry<S>& params) {
        m.clear();
        v.clear();
        for (std::size_t i = 0; i < params.size(); ++i) {
            m.emplace_back(params[i].value.shape);
            v.emplace_back(params[i].value.shape);
        }
        step = 0;
    }
};

struct AdamStepResult {
    bool applied = false;  // false when a non-finite gradient aborted the step
    std::string bad_param;
};

// Bias-corrected Adam with a learning-rate multiplier (warmup/schedule hook).
// Non-finite gradients abort the step and leave parameters and moments alone.
template <typename S>
AdamStepResult adam_step(ParamRegistry<S>& params, AdamState<S>& st, const AdamConfig& cfg,
                         double lr_scale = 1.0) {
    AdamStepResult res;
    for (std::size_t i = 0; i < params.size(); ++i) {
        for (S gv : params[i].grad.data) {
            if (!std::isfinite(static_cast<double>(gv))) {
                res.bad_param = params[i].name;
                return res;
            }
        }
    }
    st.step += 1;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(st.step));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(st.step));
    for (std::size_t i = 0; i < params.size(); ++i) {
        Parameter<S>& p = params[i];
        const double lr = cfg.lr_for(p.cls) * lr_scale;
        S* mp = st.m[i].data.data();
        S* vp = st.v[i].data.data();
        S* w = p.value.data.data();
        const S* gp = p.grad.data.data();
        for (std::size_t j = 0; j < p.value.numel(); ++j) {
            const double gj = static_cast<double>(gp[j]);
            const double mj = cfg.beta1 * static_cast<double>(mp[j]) + (1.0 - cfg.beta1) * gj;
            const double vj = cfg.beta2 * static_cast<double>(vp[j]) + (1.0 - cfg.beta2) * gj * gj;
            mp[j] = static_cast<S>(mj);
            vp[j] = static_cast<S>(vj);
            const double mhat = mj / bc1;
            const double vhat = vj / bc2;
            w[j] = static_cast<S>(static_cast<double>(w[j]) - lr * mhat / (std::sqrt(vhat) + cfg.eps));
        }
    }
    res.applied = true;
    return res;
}

// ---- per-step monitors -----------------------------------------------------------

struct StabilityMetrics {
    std::uint64_t step = 0;
    double lm_loss = 0.0;
    double lb_loss = 0.0;
    double z_loss = 0.0;
    double mtp_loss = 0.0;
    double total_loss = 0.0;
    double hidden_norm = 0.0;   // max over tokens of ||z_t||_2, pre final norm
    double max_abs_act = 0.0;
    double grad_rms_min = 0.0;  // over parameter tensors
    double grad_rms_max = 0.0;
    double mean_ffn_activated = 0.0;
    double std_ffn_activated = 0.0;
    double r_g = 0.0;
    double router_sim = 0.0;
    bool nan_flag = false;
    bool eps_flag = false;  // eps >= min grad RMS: adaptivity at risk
};

template <typename S>
double max_row_l2(const Tensor<S>& t) {
    double mx = 0.0;
    for (std::size_t r = 0; r < t.rows(); ++r) mx = std::max(mx, l2_norm(t.row_ptr(r), t.cols()));
    return mx;
}

template <typename S>
double max_abs(const Tensor<S>& t) {
    double mx = 0.0;
    for (S v : t.data) mx = std::max(mx, std::abs(static_cast<double>(v)));
    return mx;
}

template <typename S>
double grad_rms(const Parameter<S>& p) {
    double s = 0.0;
    for (S v : p.grad.data) s += static_cast<double>(v) * static_cast<double>(v);
    return std::sqrt(s / static_cast<double>(p.grad.numel()));
}

// Min/max gradient RMS across parameter tensors plus the eps comparison flag.
template <typename S>
void fill_grad_rms_range(const ParamRegistry<S>& params, double eps, StabilityMetrics& out) {
    double lo = std::numeric_limits<double>::infinity();
    double hi = 0.0;
    for (std::size_t i = 0; i < params.size(); ++i) {
        const double r = grad_rms(params[i]);
        lo = std::min(lo, r);
        hi = std::max(hi, r);
    }
    out.grad_rms_min = std::isfinite(lo) ? lo : 0.0;
    out.grad_rms_max = hi;
    out.eps_flag = eps >= out.grad_rms_min && out.grad_rms_min > 0.0;
}

}  // namespace moelab
