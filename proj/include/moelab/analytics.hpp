#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "moelab/common.hpp"
#include "moelab/model.hpp"
#include "moelab/rng.hpp"
#include "moelab/tensor.hpp"

namespace moelab {

// ---- speculative decoding --------------------------------------------------------

// Expected tokens emitted per verification step under independent per-token
// acceptance: Omega = sum_{j=0..gamma} alpha^j. The target token emitted on
// rejection (or the bonus token on full acceptance) contributes the j=0 term.
inline double expected_accept_length(std::size_t gamma, double alpha) {
    if (gamma < 1) throw ParameterError("expected_accept_length: gamma must be >= 1");
    if (alpha < 0.0 || alpha > 1.0)
        throw ParameterError("expected_accept_length: alpha must lie in [0, 1]");
    double omega = 1.0;
    double pow_a = 1.0;
    for (std::size_t j = 1; j <= gamma; ++j) {
        pow_a *= alpha;
        omega += pow_a;
    }
    return omega;
}

struct SpecDecParams {
    std::size_t gamma = 1;
    double alpha = 0.0;
    double draft_cost_ratio = 0.0;   // T_D / T_T
    double verify_cost_ratio = 1.0;  // T_V(gamma) / T_T
};

// Average speculative latency per token relative to plain decoding:
// (1/Omega) * (gamma * T_D/T_T + T_V/T_T). Below 1 means drafting pays off.
inline double specdec_cost_ratio(const SpecDecParams& p) {
    if (p.draft_cost_ratio < 0.0 || p.verify_cost_ratio < 0.0)
        throw ParameterError("specdec_cost_ratio: latency ratios must be >= 0");
    const double omega = expected_accept_length(p.gamma, p.alpha);
    return (static_cast<double>(p.gamma) * p.draft_cost_ratio + p.verify_cost_ratio) / omega;
}

struct MonteCarloOmega {
    double mean = 0.0;
    double std_error = 0.0;
    std::size_t trials = 0;
};

// Simulates the accept process: draft tokens accept independently with
// probability alpha until the first rejection; one target token is always
// emitted. Per-trial counters keep the estimate order-independent.
inline MonteCarloOmega monte_carlo_accept_length(std::size_t gamma, double alpha,
                                                 std::size_t trials, const CounterRng& rng) {
    if (gamma < 1) throw ParameterError("monte_carlo_accept_length: gamma must be >= 1");
    if (alpha < 0.0 || alpha > 1.0)
        throw ParameterError("monte_carlo_accept_length: alpha must lie in [0, 1]");
    double sum = 0.0, sum2 = 0.0;
    for (std::size_t t = 0; t < trials; ++t) {
        std::size_t accepted = 0;
        for (std::size_t j = 0; j < gamma; ++j) {
            if (rng.uniform01_at(t * gamma + j) <= alpha)
                ++accepted;
            else
                break;
        }
        const double emitted = static_cast<double>(accepted + 1);
        sum += emitted;
        sum2 += emitted * emitted;
    }
    MonteCarloOmega r;
    r.trials = trials;
    r.mean = sum / static_cast<double>(trials);
    const double var = sum2 / static_cast<double>(trials) - r.mean * r.mean;
    r.std_error = std::sqrt(std::max(var, 0.0) / static_cast<double>(trials));
    return r;
}

// ---- draft acceptance measurement --------------------------------------------------

struct AcceptanceReport {
    double alpha = 0.0;
    std::size_t matches = 0;
    std::size_t total = 0;
};

inline std::size_t argmax_row(const double* row, std::size_t n) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < n; ++j)
        if (row[j] > row[best]) best = j;
    return best;
}

// Greedy agreement between two aligned logit tables (draft row i vs target
// row i). The trivial identity case scores exactly 1.
template <typename S>
AcceptanceReport measure_acceptance_logits(const Tensor<S>& draft_logits,
                                           const Tensor<S>& target_logits) {
    check(draft_logits.rows() == target_logits.rows() &&
              draft_logits.cols() == target_logits.cols(),
          "measure_acceptance: logit shapes differ");
    if (draft_logits.rows() == 0) throw EvalError("measure_acceptance: empty evaluation set");
    AcceptanceReport rep;
    std::vector<double> da(draft_logits.cols()), ta(target_logits.cols());
    for (std::size_t r = 0; r < draft_logits.rows(); ++r) {
        for (std::size_t j = 0; j < draft_logits.cols(); ++j) {
            da[j] = static_cast<double>(draft_logits.at(r, j));
            ta[j] = static_cast<double>(target_logits.at(r, j));
        }
        rep.matches += argmax_row(da.data(), da.size()) == argmax_row(ta.data(), ta.size());
        ++rep.total;
    }
    rep.alpha = static_cast<double>(rep.matches) / static_cast<double>(rep.total);
    return rep;
}

// Greedy draft acceptance of a model's auxiliary head on a token stream. The
// head at position t drafts token t+2; the main head at t+1 is the target's
// greedy choice for the same token.
template <typename S>
AcceptanceReport measure_acceptance(Model<S>& model, const std::vector<int>& tokens,
                                    std::size_t seq_len) {
    if (tokens.size() < 3 || seq_len < 3) throw EvalError("measure_acceptance: corpus too short");
    Batch b;
    b.tokens = tokens;
    b.targets_next.assign(tokens.size(), -1);
    b.targets_skip2.assign(tokens.size(), 0);  // force the auxiliary head to run
    b.seq_len = seq_len;
    ForwardResult<S> fr = model.forward(b);

    // Rebuild the auxiliary logits: hidden -> head -> tied unembedding. Node
    // references are taken only after the last node is created.
    Graph<S>& g = fr.graph;
    MtpVars<S> mv{fr.param_vars[model.mtp_head().norm_in->reg_index],
                  fr.param_vars[model.mtp_head().w_in->reg_index],
                  fr.param_vars[model.mtp_head().w_out->reg_index],
                  fr.param_vars[model.mtp_head().norm_out->reg_index]};
    auto mh = mtp_hidden(g, fr.hidden_pre_norm, mv);
    auto mtp_logits_var = g.matmul(mh, fr.param_vars[model.unembedding()->reg_index]);
    const Tensor<S>& draft_logits = g.val(mtp_logits_var);
    const Tensor<S>& main_logits = fr.graph.val(fr.logits);

    const std::size_t n_seq = tokens.size() / seq_len;
    AcceptanceReport rep;
    std::vector<double> da(draft_logits.cols()), ta(main_logits.cols());
    for (std::size_t s = 0; s < n_seq; ++s) {
        for (std::size_t t = 0; t + 2 < seq_len; ++t) {
            const std::size_t draft_row = s * seq_len + t;
            const std::size_t target_row = s * seq_len + t + 1;
            for (std::size_t j = 0; j < da.size(); ++j) {
                da[j] = static_cast<double>(draft_logits.at(draft_row, j));
                ta[j] = static_cast<double>(main_logits.at(target_row, j));
            }
            rep.matches += argmax_row(da.data(), da.size()) == argmax_row(ta.data(), ta.size());
            ++rep.total;
        }
    }
    if (rep.total == 0) throw EvalError("measure_acceptance: no usable positions");
    rep.alpha = static_cast<double>(rep.matches) / static_cast<double>(rep.total);
    return rep;
}

// ---- KV pre-allocation under the multi-step overlapped scheduler --------------------

struct KvSimTrace {
    std::vector<long long> available;  // R_i for i >= 1
    std::size_t violations = 0;
    long long bound_lo = 0;
    long long bound_hi = 0;
};

// R_0 = (MTP+1)*n, A_i = sum_s U_{i-1,s}, R_i = R_{i-1} - A_i + A_{i-1} with
// U_{-1,s} = MTP+1. The bound [(MTP+1)n, (2*MTP+1)n] must hold for every
// sampler that stays within [1, MTP+1].
inline KvSimTrace kv_alloc_simulate(
    std::size_t n, std::size_t mtp, std::size_t iterations,
    const std::function<std::size_t(std::size_t iter, std::size_t step)>& accept_sampler,
    bool keep_trace = false) {
    if (n == 0 || mtp == 0) throw ParameterError("kv_alloc_simulate: n and MTP must be >= 1");
    KvSimTrace trace;
    trace.bound_lo = static_cast<long long>((mtp + 1) * n);
    trace.bound_hi = static_cast<long long>((2 * mtp + 1) * n);
    long long r = static_cast<long long>((mtp + 1) * n);
    long long prev_a = static_cast<long long>(n * (mtp + 1));  // U_{-1,s} = MTP+1
    if (keep_trace) trace.available.reserve(iterations);
    for (std::size_t i = 1; i <= iterations; ++i) {
        long long a = 0;
        for (std::size_t s = 0; s < n; ++s) {
            const std::size_t u = accept_sampler(i - 1, s);
            if (u < 1 || u > mtp + 1)
                throw ParameterError("kv_alloc_simulate: accept length out of [1, MTP+1]");
            a += static_cast<long long>(u);
        }
        r = r - a + prev_a;
        prev_a = a;
        if (r < trace.bound_lo || r > trace.bound_hi) ++trace.violations;
        if (keep_trace) trace.available.push_back(r);
    }
    return trace;
}

// ---- theoretical time-per-output-token ----------------------------------------------

struct CostModel {
    double attention_us = 0.0;
    double dispatch_us = 0.0;
    double moe_us = 0.0;
    double combine_us = 0.0;
    std::size_t n_layer = 0;
    double accept_factor = 1.0;  // tokens emitted per decode step
    std::string strategy = "sbo";
    double batch_per_device = 96.0;
    double price_per_device_hour = 2.0;
};

struct TpotResult {
    double tpl_us = 0.0;
    double tpot_ms = 0.0;
    double price_per_mtok = 0.0;
    bool tbo_model_approximate = false;
};

// SBO exposes every module serially; TBO hides the smaller of compute and
// communication behind the other, modeled as max(attn+moe, dispatch+combine).
inline TpotResult tpot_theoretical(const CostModel& cm) {
    if (cm.attention_us < 0 || cm.dispatch_us < 0 || cm.moe_us < 0 || cm.combine_us < 0)
        throw ConfigError("tpot: latencies must be >= 0");
    if (cm.n_layer == 0) throw ConfigError("tpot: n_layer must be >= 1");
    if (cm.accept_factor < 1.0) throw ConfigError("tpot: accept factor must be >= 1");
    if (cm.batch_per_device <= 0.0 || cm.price_per_device_hour < 0.0)
        throw ConfigError("tpot: bad device assumptions");
    TpotResult r;
    if (cm.strategy == "sbo") {
        r.tpl_us = cm.attention_us + cm.dispatch_us + cm.moe_us + cm.combine_us;
    } else if (cm.strategy == "tbo") {
        r.tpl_us = std::max(cm.attention_us + cm.moe_us, cm.dispatch_us + cm.combine_us);
        r.tbo_model_approximate = true;
    } else {
        throw ConfigError("tpot: unknown overlap strategy " + cm.strategy);
    }
    r.tpot_ms = static_cast<double>(cm.n_layer) * r.tpl_us / (1000.0 * cm.accept_factor);
    const double tokens_per_device_second = cm.batch_per_device * 1000.0 / r.tpot_ms;
    const double device_hours_per_mtok = 1.0e6 / (tokens_per_device_second * 3600.0);
    r.price_per_mtok = device_hours_per_mtok * cm.price_per_device_hour;
    return r;
}

}  // namespace moelab
