#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <vector>

#include "moelab/common.hpp"
#include "moelab/graph.hpp"
#include "moelab/rng.hpp"
#include "moelab/tensor.hpp"

namespace moelab {

// Router over N FFN experts followed by Z identity (zero-computation) experts.
// Expert indices [0, N) are FFN; [N, N+Z) are identity. The bias vector b only
// shifts selection scores; gate values always come from the unbiased softmax.
template <typename S>
struct RouterState {
    Tensor<S> w;            // [d_model, N+Z] projection
    std::vector<double> b;  // selection bias, zero for identity experts
    std::size_t n_ffn = 0;
    std::size_t n_zero = 0;
    std::size_t top_k = 0;
    std::size_t k_expected = 0;  // target mean of activated FFN experts, < top_k
    double mu = 0.0;             // bias adaptation rate
    double mu_decay = 1.0;
    std::vector<std::uint64_t> tokens_routed;  // per-expert slot counters, current global batch
    std::uint64_t tokens_seen = 0;

    RouterState() = default;
    RouterState(Tensor<S> weights, std::size_t n, std::size_t z, std::size_t k, std::size_t ke,
                double mu_, double mu_decay_)
        : w(std::move(weights)),
          b(n + z, 0.0),
          n_ffn(n),
          n_zero(z),
          top_k(k),
          k_expected(ke),
          mu(mu_),
          mu_decay(mu_decay_),
          tokens_routed(n + z, 0) {
        validate();
    }

    std::size_t n_experts() const { return n_ffn + n_zero; }

    void validate() const {
        if (top_k > n_experts()) throw ConfigError("router: top_k exceeds expert count");
        if (k_expected < 1 || k_expected > top_k)
            throw ConfigError("router: need 1 <= k_expected <= top_k");
        if (n_zero > 0 && k_expected >= top_k)
            throw ConfigError("router: k_expected must be < top_k when zero experts exist");
        if (n_zero < top_k - k_expected)
            throw ConfigError("router: too few zero experts to absorb top_k - k_expected slack");
        if (mu < 0.0) throw ConfigError("router: mu must be >= 0");
        for (std::size_t i = n_ffn; i < b.size(); ++i)
            if (b[i] != 0.0) throw ConfigError("router: zero-expert bias must stay 0");
    }
};

struct RoutingDecision {
    std::size_t top_k = 0;
    std::size_t n_ffn = 0;
    std::vector<std::uint32_t> indices;  // [T * top_k], per token ascending by rank
    std::vector<double> gates;           // unbiased softmax probabilities at indices
    std::vector<std::uint32_t> ffn_count;  // selected FFN experts per token

    std::size_t tokens() const { return ffn_count.size(); }

    double mean_ffn() const {
        if (ffn_count.empty()) return 0.0;
        double s = 0.0;
        for (auto c : ffn_count) s += c;
        return s / static_cast<double>(ffn_count.size());
    }

    double std_ffn() const {
        if (ffn_count.empty()) return 0.0;
        const double m = mean_ffn();
        double s = 0.0;
        for (auto c : ffn_count) s += (c - m) * (c - m);
        return std::sqrt(s / static_cast<double>(ffn_count.size()));
    }
};

// Top-K of (prob + bias) with ties broken by lowest index.
template <typename S>
void select_topk_row(const S* probs, const std::vector<double>& bias, std::size_t n_experts,
                     std::size_t k, std::uint32_t* out_idx) {
    thread_local std::vector<std::uint32_t> order;
    order.resize(n_experts);
    for (std::size_t i = 0; i < n_experts; ++i) order[i] = static_cast<std::uint32_t>(i);
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(),
                      [&](std::uint32_t a, std::uint32_t c) {
                          const double sa = static_cast<double>(probs[a]) + bias[a];
                          const double sc = static_cast<double>(probs[c]) + bias[c];
                          if (sa != sc) return sa > sc;
                          return a < c;
                      });
    for (std::size_t i = 0; i < k; ++i) out_idx[i] = order[i];
}

// Routing from precomputed unbiased probabilities [T, N+Z].
template <typename S>
RoutingDecision route_from_probs(const Tensor<S>& probs, const RouterState<S>& state) {
    state.validate();
    const std::size_t t_count = probs.rows();
    const std::size_t e = state.n_experts();
    check(probs.cols() == e, "route: probs width mismatch");
    RoutingDecision d;
    d.top_k = state.top_k;
    d.n_ffn = state.n_ffn;
    d.indices.resize(t_count * state.top_k);
    d.gates.resize(t_count * state.top_k);
    d.ffn_count.resize(t_count);
    for (std::size_t t = 0; t < t_count; ++t) {
        std::uint32_t* idx = d.indices.data() + t * state.top_k;
        select_topk_row(probs.row_ptr(t), state.b, e, state.top_k, idx);
        std::uint32_t ffn = 0;
        for (std::size_t s = 0; s < state.top_k; ++s) {
            d.gates[t * state.top_k + s] = static_cast<double>(probs.at(t, idx[s]));
            if (idx[s] < state.n_ffn) ++ffn;
        }
        d.ffn_count[t] = ffn;
    }
    return d;
}

// Full routing step: project tokens, softmax, biased top-K selection.
template <typename S>
RoutingDecision route_topk(const Tensor<S>& x, const RouterState<S>& state,
                           Tensor<S>* probs_out = nullptr) {
    Tensor<S> logits = mm(x, state.w);
    Tensor<S> probs = softmax_rows(logits);
    RoutingDecision d = route_from_probs(probs, state);
    if (probs_out) *probs_out = std::move(probs);
    return d;
}

// Accumulates a routed batch into the state's load counters.
template <typename S>
void accumulate_counters(RouterState<S>& state, const RoutingDecision& d) {
    for (std::size_t t = 0; t < d.tokens(); ++t)
        for (std::size_t s = 0; s < d.top_k; ++s)
            ++state.tokens_routed[d.indices[t * d.top_k + s]];
    state.tokens_seen += d.tokens();
}

// One controller update per global batch: nudges each FFN expert's bias toward
// its target share K_e/(K*N) of routed slots, leaves identity experts alone,
// decays mu, resets counters. Returns the applied deltas.
template <typename S>
std::vector<double> bias_update(RouterState<S>& state) {
    if (state.tokens_seen == 0) throw StateError("bias_update: empty batch");
    const double t_all = static_cast<double>(state.tokens_seen);
    std::uint64_t total_slots = 0;
    for (std::uint64_t c : state.tokens_routed) total_slots += c;
    if (total_slots != static_cast<std::uint64_t>(state.top_k) * state.tokens_seen)
        throw StateError("bias_update: counters do not cover top_k slots per token");
    const double target = static_cast<double>(state.k_expected) /
                          (static_cast<double>(state.top_k) * static_cast<double>(state.n_ffn));
    std::vector<double> delta(state.n_experts(), 0.0);
    for (std::size_t i = 0; i < state.n_ffn; ++i) {
        const double load =
            static_cast<double>(state.tokens_routed[i]) / (static_cast<double>(state.top_k) * t_all);
        delta[i] = state.mu * (target - load);
        state.b[i] += delta[i];
    }
    state.mu *= state.mu_decay;
    std::fill(state.tokens_routed.begin(), state.tokens_routed.end(), 0);
    state.tokens_seen = 0;
    return delta;
}

// ---- load-balance loss (group frequency x mean routed probability) ---------

struct LbLossConfig {
    double alpha = 0.0;
    std::size_t n_groups = 1;  // FFN experts are split into this many groups

    void validate(std::size_t n_ffn) const {
        if (alpha < 0.0) throw ConfigError("lb_loss: alpha must be >= 0");
        if (n_groups == 0 || n_ffn % n_groups != 0)
            throw ConfigError("lb_loss: group count must divide FFN expert count");
    }
};

// Selection frequencies f_j, fixed w.r.t. the probabilities. Slot-counted:
// every selected slot contributes, including repeated zero-expert picks.
inline std::vector<double> lb_group_frequencies(const RoutingDecision& d, const LbLossConfig& cfg,
                                                std::size_t n_ffn, std::size_t n_zero,
                                                std::size_t k_expected) {
    cfg.validate(n_ffn);
    const std::size_t d_groups = cfg.n_groups;
    const bool has_zero_group = n_zero > 0;
    const std::size_t group_size = n_ffn / d_groups;
    const double t_count = static_cast<double>(d.tokens());
    std::vector<double> f(d_groups + (has_zero_group ? 1 : 0), 0.0);
    for (std::size_t t = 0; t < d.tokens(); ++t) {
        for (std::size_t s = 0; s < d.top_k; ++s) {
            const std::uint32_t e = d.indices[t * d.top_k + s];
            if (e < n_ffn)
                f[e / group_size] += 1.0;
            else
                f[d_groups] += 1.0;
        }
    }
    const std::size_t slack = d.top_k - k_expected;
    for (std::size_t j = 0; j < d_groups; ++j)
        f[j] *= static_cast<double>(d_groups) / (static_cast<double>(k_expected) * t_count);
    if (has_zero_group) f[d_groups] /= static_cast<double>(slack) * t_count;
    return f;
}

// Plain-value loss: alpha * sum_j f_j * P_j.
template <typename S>
double lb_loss_value(const Tensor<S>& probs, const RoutingDecision& d, const LbLossConfig& cfg,
                     std::size_t n_ffn, std::size_t n_zero, std::size_t k_expected) {
    const std::vector<double> f = lb_group_frequencies(d, cfg, n_ffn, n_zero, k_expected);
    const std::size_t group_size = n_ffn / cfg.n_groups;
    const double t_count = static_cast<double>(probs.rows());
    double loss = 0.0;
    for (std::size_t j = 0; j < f.size(); ++j) {
        const std::size_t lo = j < cfg.n_groups ? j * group_size : n_ffn;
        const std::size_t hi = j < cfg.n_groups ? (j + 1) * group_size : n_ffn + n_zero;
        double pj = 0.0;
        for (std::size_t i = lo; i < hi; ++i)
            for (std::size_t t = 0; t < probs.rows(); ++t) pj += static_cast<double>(probs.at(t, i));
        loss += f[j] * pj / t_count;
    }
    return cfg.alpha * loss;
}

// Differentiable node: gradients flow into the probability tensor only; the
// frequencies f_j are selection counts and are held fixed.
template <typename S>
typename Graph<S>::VarId lb_loss_node(Graph<S>& g, typename Graph<S>::VarId probs_var,
                                      const RoutingDecision& d, const LbLossConfig& cfg,
                                      std::size_t n_ffn, std::size_t n_zero,
                                      std::size_t k_expected) {
    const Tensor<S>& probs = g.val(probs_var);
    if (cfg.alpha == 0.0) return g.make_node(Tensor<S>::scalar(S(0)), false, nullptr);
    const double value = lb_loss_value(probs, d, cfg, n_ffn, n_zero, k_expected);
    const std::vector<double> f = lb_group_frequencies(d, cfg, n_ffn, n_zero, k_expected);
    const std::size_t group_size = n_ffn / cfg.n_groups;
    std::vector<S> coeff(n_ffn + n_zero);
    const double inv_t = 1.0 / static_cast<double>(probs.rows());
    for (std::size_t i = 0; i < coeff.size(); ++i) {
        const std::size_t j = i < n_ffn ? i / group_size : cfg.n_groups;
        coeff[i] = static_cast<S>(cfg.alpha * (j < f.size() ? f[j] : 0.0) * inv_t);
    }
    const bool ng = g.needs_grad(probs_var);
    const auto id = g.make_node(Tensor<S>::scalar(static_cast<S>(value)), ng, nullptr);
    if (ng) {
        auto coeff_ptr = std::make_shared<std::vector<S>>(std::move(coeff));
        // dL/dprobs[t,i] = alpha * f_group(i) / T, identical for every token.
        g.set_backward(id, [id, probs_var, coeff_ptr](Graph<S>& g2) {
            const S seed = g2.grad(id).data[0];
            Tensor<S>& gp = g2.grad(probs_var);
            const std::size_t e = coeff_ptr->size();
            for (std::size_t t = 0; t < gp.rows(); ++t) {
                S* row = gp.row_ptr(t);
                for (std::size_t i = 0; i < e; ++i) row[i] += seed * (*coeff_ptr)[i];
            }
        });
    }
    return id;
}

// ---- router health monitors -------------------------------------------------

struct SimilarityReport {
    double mean_cosine = 0.0;
    std::size_t excluded_rows = 0;  // zero-norm rows skipped
};

// Mean pairwise cosine similarity between expert weight vectors (columns of
// the [d_model, E] projection).
template <typename S>
SimilarityReport router_similarity(const Tensor<S>& w) {
    check(w.ndim() == 2, "router_similarity: expects 2-d weights");
    const std::size_t d = w.rows(), e = w.cols();
    if (e < 2) throw ConfigError("router_similarity: need at least 2 experts");
    std::vector<double> norms(e, 0.0);
    for (std::size_t j = 0; j < e; ++j) {
        double s = 0.0;
        for (std::size_t i = 0; i < d; ++i) s += static_cast<double>(w.at(i, j)) * w.at(i, j);
        norms[j] = std::sqrt(s);
    }
    SimilarityReport rep;
    std::vector<std::size_t> keep;
    for (std::size_t j = 0; j < e; ++j) {
        if (norms[j] == 0.0)
            ++rep.excluded_rows;
        else
            keep.push_back(j);
    }
    double acc = 0.0;
    std::size_t pairs = 0;
    for (std::size_t a = 0; a < keep.size(); ++a) {
        for (std::size_t c = a + 1; c < keep.size(); ++c) {
            double dot = 0.0;
            for (std::size_t i = 0; i < d; ++i)
                dot += static_cast<double>(w.at(i, keep[a])) * w.at(i, keep[c]);
            acc += dot / (norms[keep[a]] * norms[keep[c]]);
            ++pairs;
        }
    }
    rep.mean_cosine = pairs ? acc / static_cast<double>(pairs) : 0.0;
    return rep;
}

// R_g = ||alpha * dL_LB/dP|| / ||dL_LM/dP|| on the batch-aggregated expert
// probability gradient. Raises the guideline flag at 0.1.
struct GradNormRatio {
    double value = 0.0;
    bool exceeds_guideline = false;
};

inline GradNormRatio grad_norm_ratio(const std::vector<double>& lm_grad,
                                     const std::vector<double>& lb_grad_unscaled, double alpha) {
    if (lm_grad.size() != lb_grad_unscaled.size())
        throw DimensionError("grad_norm_ratio: size mismatch");
    double lm = 0.0, lb = 0.0;
    for (double v : lm_grad) lm += v * v;
    for (double v : lb_grad_unscaled) lb += v * v;
    lm = std::sqrt(lm);
    lb = std::sqrt(lb) * std::abs(alpha);
    if (lm == 0.0) throw EvalError("grad_norm_ratio: LM gradient norm is zero");
    GradNormRatio r;
    r.value = lb / lm;
    r.exceeds_guideline = r.value >= 0.1;
    return r;
}

// ---- closed-loop controller simulation --------------------------------------

struct BiasControlTrace {
    std::vector<double> mean_ffn;  // per update step
    std::vector<double> std_ffn;
    std::vector<std::vector<double>> bias_history;  // optional snapshots
};

// Drives the bias controller against a stationary token distribution and
// records the activated-FFN statistics after each update.
template <typename S>
BiasControlTrace simulate_bias_control(RouterState<S>& state, std::size_t d_model,
                                       std::size_t batch_tokens, std::size_t steps,
                                       const CounterRng& rng, bool keep_bias_history = false) {
    BiasControlTrace trace;
    trace.mean_ffn.reserve(steps);
    trace.std_ffn.reserve(steps);
    for (std::size_t step = 0; step < steps; ++step) {
        CounterRng batch_rng = rng.stream(step);
        Tensor<S> x({batch_tokens, d_model});
        for (std::size_t i = 0; i < x.numel(); ++i)
            x.data[i] = static_cast<S>(batch_rng.normal_at(i));
        RoutingDecision d = route_topk(x, state);
        accumulate_counters(state, d);
        trace.mean_ffn.push_back(d.mean_ffn());
        trace.std_ffn.push_back(d.std_ffn());
        bias_update(state);
        if (keep_bias_history) trace.bias_history.push_back(state.b);
    }
    return trace;
}

}  // namespace moelab
