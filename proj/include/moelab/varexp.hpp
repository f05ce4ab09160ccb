#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "moelab/blocks.hpp"
#include "moelab/param.hpp"
#include "moelab/rng.hpp"
#include "moelab/router.hpp"
#include "moelab/tensor.hpp"

namespace moelab {

namespace detail {
template <typename S>
double pooled_variance(const Tensor<S>& t) {
    double mean = 0.0;
    for (S v : t.data) mean += static_cast<double>(v);
    mean /= static_cast<double>(t.numel());
    double var = 0.0;
    for (S v : t.data) var += (static_cast<double>(v) - mean) * (static_cast<double>(v) - mean);
    return var / static_cast<double>(t.numel());
}
}  // namespace detail

struct MlaVarianceReport {
    double var_qc = 0.0, var_qr = 0.0, var_kc = 0.0, var_kr = 0.0;
    double max_pairwise_ratio = 0.0;  // over the four component variances
    double qc_vs_kr = 0.0;
};

// Init-time component variances of the query/key pieces under unit-variance
// inputs and a shared hidden init variance of 1/d_model. With alignment on,
// all four share the input scale; with it off, the low-rank paths shrink by
// d_q/d_model (resp. d_kv/d_model) relative to the rotary key.
inline MlaVarianceReport mla_component_variances(std::size_t d_model, std::size_t d_q,
                                                 std::size_t d_kv, std::size_t n_heads,
                                                 std::size_t d_head_c, std::size_t d_head_r,
                                                 bool align, std::size_t tokens,
                                                 std::size_t weight_draws, std::uint64_t seed) {
    const double hv = 1.0 / static_cast<double>(d_model);
    const auto [aq_full, akv_full] = mla_scale_factors(d_model, d_q, d_kv);
    const double aq = align ? aq_full : 1.0;
    const double akv = align ? akv_full : 1.0;
    MlaVarianceReport rep;
    for (std::size_t draw = 0; draw < weight_draws; ++draw) {
        CounterRng r = CounterRng(seed).stream(draw);
        auto w = [&](std::vector<std::size_t> shape, std::uint64_t id) {
            return seeded_init<double>(std::move(shape), InitDistribution::TruncatedNormal, hv,
                                       r.stream(id));
        };
        Tensor<double> w_dq = w({d_model, d_q}, 0);
        Tensor<double> w_uq = w({d_q, n_heads * d_head_c}, 1);
        Tensor<double> w_qr = w({d_q, n_heads * d_head_r}, 2);
        Tensor<double> w_dkv = w({d_model, d_kv}, 3);
        Tensor<double> w_uk = w({d_kv, n_heads * d_head_c}, 4);
        Tensor<double> w_kr = w({d_model, d_head_r}, 5);

        Tensor<double> h({tokens, d_model});
        CounterRng hr = r.stream(99);
        for (std::size_t i = 0; i < h.numel(); ++i) h.data[i] = hr.normal_at(i);
        std::vector<std::size_t> pos(tokens);
        for (std::size_t i = 0; i < tokens; ++i) pos[i] = i;

        Tensor<double> cq = mm(h, w_dq);
        for (double& v : cq.data) v *= aq;
        Tensor<double> ckv = mm(h, w_dkv);
        for (double& v : ckv.data) v *= akv;
        rep.var_qc += detail::pooled_variance(mm(cq, w_uq));
        rep.var_qr += detail::pooled_variance(rope_apply(mm(cq, w_qr), pos, 1.0e6, n_heads));
        rep.var_kc += detail::pooled_variance(mm(ckv, w_uk));
        rep.var_kr += detail::pooled_variance(rope_apply(mm(h, w_kr), pos, 1.0e6, 1));
    }
    const double n = static_cast<double>(weight_draws);
    rep.var_qc /= n;
    rep.var_qr /= n;
    rep.var_kc /= n;
    rep.var_kr /= n;
    const double lo = std::min({rep.var_qc, rep.var_qr, rep.var_kc, rep.var_kr});
    const double hi = std::max({rep.var_qc, rep.var_qr, rep.var_kc, rep.var_kr});
    rep.max_pairwise_ratio = hi / lo;
    rep.qc_vs_kr = rep.var_qc / rep.var_kr;
    return rep;
}

// Init-time MoE output variance for a segmented bank at matched parameter and
// compute budget: m*N experts of width inter/m, top m*K selected, near-uniform
// router. gamma_on applies the m compensation; off leaves the dilution alone.
inline double moe_init_output_variance(std::size_t d_model, std::size_t base_experts,
                                       std::size_t base_inter, std::size_t base_topk,
                                       std::size_t m, bool gamma_on, std::size_t tokens,
                                       std::size_t weight_draws, std::uint64_t seed) {
    const std::size_t n_experts = base_experts * m;
    const std::size_t inter = base_inter / m;
    const std::size_t top_k = base_topk * m;
    if (inter == 0 || top_k > n_experts)
        throw ParameterError("moe_init_output_variance: bad segmentation");
    const double hv = 1.0 / static_cast<double>(d_model);
    double acc = 0.0;
    for (std::size_t draw = 0; draw < weight_draws; ++draw) {
        CounterRng r = CounterRng(seed).stream(draw);
        std::vector<Parameter<double>> store_in, store_out;
        store_in.reserve(n_experts);
        store_out.reserve(n_experts);
        ExpertBank<double> bank;
        bank.m = m;
        bank.gamma_mode = gamma_on ? GammaMode::FfnOnly : GammaMode::Off;
        for (std::size_t e = 0; e < n_experts; ++e) {
            store_in.emplace_back("in", ParamClass::Hidden,
                                  seeded_init<double>({d_model, inter},
                                                      InitDistribution::TruncatedNormal, hv,
                                                      r.stream(2 * e)));
            store_out.emplace_back("out", ParamClass::Hidden,
                                   seeded_init<double>({inter, d_model},
                                                       InitDistribution::TruncatedNormal, hv,
                                                       r.stream(2 * e + 1)));
        }
        for (std::size_t e = 0; e < n_experts; ++e) {
            bank.w_in.push_back(&store_in[e]);
            bank.w_out.push_back(&store_out[e]);
        }

        Tensor<double> x({tokens, d_model});
        CounterRng xr = r.stream(777);
        for (std::size_t i = 0; i < x.numel(); ++i) x.data[i] = xr.normal_at(i);

        // Near-uniform router: gates sit at ~1/(mN) with negligible spread, so
        // the gating dilution is the 1/m law rather than selection noise.
        RouterState<double> st(
            seeded_init<double>({d_model, n_experts}, InitDistribution::TruncatedNormal,
                                1.0e-6 / static_cast<double>(d_model), r.stream(555)),
            n_experts, 0, top_k, top_k, 0.0, 1.0);
        Tensor<double> probs;
        RoutingDecision d = route_topk(x, st, &probs);
        acc += detail::pooled_variance(moe_forward(x, d, bank, 0));
    }
    return acc / static_cast<double>(weight_draws);
}

}  // namespace moelab
