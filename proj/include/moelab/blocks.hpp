#pragma once

#include <cmath>
#include <cstdint>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "moelab/common.hpp"
#include "moelab/graph.hpp"
#include "moelab/param.hpp"
#include "moelab/router.hpp"
#include "moelab/tensor.hpp"

namespace moelab {

// Scale-correction factors aligning low-rank query/KV path variances with the
// full model width.
inline std::pair<double, double> mla_scale_factors(std::size_t d_model, std::size_t d_q,
                                                   std::size_t d_kv) {
    if (d_model == 0 || d_q == 0 || d_kv == 0)
        throw ParameterError("mla_scale_factors: dims must be positive");
    return {std::sqrt(static_cast<double>(d_model) / static_cast<double>(d_q)),
            std::sqrt(static_cast<double>(d_model) / static_cast<double>(d_kv))};
}

// Output compensation for segmenting each expert into m finer ones: gate
// dilution and the narrower intermediate dim each shave a factor m off the
// init output variance, so the combined factor is sqrt(m*m) = m.
inline double variance_gamma(std::size_t m) {
    if (m < 1) throw ParameterError("variance_gamma: m must be >= 1");
    return static_cast<double>(m);
}

// ---- multi-head latent attention --------------------------------------------

template <typename S>
struct MlaParams {
    std::size_t d_model = 0, d_q = 0, d_kv = 0;
    std::size_t n_heads = 0, d_head_c = 0, d_head_r = 0;
    double rope_base = 1.0e6;
    bool variance_alignment = true;
    Parameter<S>* w_dq = nullptr;   // [d_model, d_q]
    Parameter<S>* w_uq = nullptr;   // [d_q, n_heads*d_head_c]
    Parameter<S>* w_qr = nullptr;   // [d_q, n_heads*d_head_r]
    Parameter<S>* w_dkv = nullptr;  // [d_model, d_kv]
    Parameter<S>* w_uk = nullptr;   // [d_kv, n_heads*d_head_c]
    Parameter<S>* w_uv = nullptr;   // [d_kv, n_heads*d_head_c]
    Parameter<S>* w_kr = nullptr;   // [d_model, d_head_r], shared across heads
    Parameter<S>* w_o = nullptr;    // [n_heads*d_head_c, d_model]

    double alpha_q() const {
        return variance_alignment ? mla_scale_factors(d_model, d_q, d_kv).first : 1.0;
    }
    double alpha_kv() const {
        return variance_alignment ? mla_scale_factors(d_model, d_q, d_kv).second : 1.0;
    }
};

template <typename S>
struct MlaVars {
    typename Graph<S>::VarId w_dq, w_uq, w_qr, w_dkv, w_uk, w_uv, w_kr, w_o;
};

inline std::vector<std::size_t> packed_positions(std::size_t rows, std::size_t seq_len) {
    std::vector<std::size_t> pos(rows);
    for (std::size_t i = 0; i < rows; ++i) pos[i] = i % seq_len;
    return pos;
}

// Causal MLA over packed sequences: compress, up-project, rotary-concat,
// attend, merge heads.
template <typename S>
typename Graph<S>::VarId mla_block(Graph<S>& g, typename Graph<S>::VarId h,
                                   const MlaParams<S>& p, const MlaVars<S>& v,
                                   std::size_t seq_len) {
    using VarId = typename Graph<S>::VarId;
    const std::size_t rows = g.val(h).rows();
    const std::vector<std::size_t> pos = packed_positions(rows, seq_len);

    VarId cq = g.scale(g.matmul(h, v.w_dq), static_cast<S>(p.alpha_q()));
    VarId ckv = g.scale(g.matmul(h, v.w_dkv), static_cast<S>(p.alpha_kv()));
    VarId qc = g.matmul(cq, v.w_uq);
    VarId qr = g.rope(g.matmul(cq, v.w_qr), pos, p.rope_base, p.n_heads);
    VarId kc = g.matmul(ckv, v.w_uk);
    VarId vv = g.matmul(ckv, v.w_uv);
    VarId kr = g.rope(g.matmul(h, v.w_kr), pos, p.rope_base, 1);

    std::vector<VarId> qparts, kparts;
    for (std::size_t hd = 0; hd < p.n_heads; ++hd) {
        qparts.push_back(g.slice_cols(qc, hd * p.d_head_c, p.d_head_c));
        qparts.push_back(g.slice_cols(qr, hd * p.d_head_r, p.d_head_r));
        kparts.push_back(g.slice_cols(kc, hd * p.d_head_c, p.d_head_c));
        kparts.push_back(kr);  // rotary key shared by every head
    }
    VarId q = g.concat_cols(qparts);
    VarId k = g.concat_cols(kparts);
    const S att_scale =
        static_cast<S>(1.0 / std::sqrt(static_cast<double>(p.d_head_c + p.d_head_r)));
    VarId ctx = g.attention(q, k, vv, p.n_heads, seq_len, att_scale);
    return g.matmul(ctx, v.w_o);
}

// Incremental decode cache holding only the compressed KV stream; content
// keys/values are re-expanded from it on demand.
template <typename S>
struct MlaCache {
    Tensor<S> c_kv;  // [n, d_kv]
    Tensor<S> k_r;   // [n, d_head_r], already rotated

    std::size_t length() const { return c_kv.ndim() == 2 ? c_kv.rows() : 0; }
};

namespace detail {
template <typename S>
void append_row(Tensor<S>& t, const Tensor<S>& row) {
    if (t.numel() == 0) {
        t = row;
        return;
    }
    check(t.cols() == row.cols(), "append_row: width mismatch");
    t.data.insert(t.data.end(), row.data.begin(), row.data.end());
    t.shape[0] += 1;
}
}  // namespace detail

// One decode step at `position`; the cache must hold exactly `position` rows.
template <typename S>
Tensor<S> mla_infer_step(const MlaParams<S>& p, MlaCache<S>& cache, const Tensor<S>& h_t,
                         std::size_t position) {
    check(h_t.ndim() == 2 && h_t.rows() == 1 && h_t.cols() == p.d_model,
          "mla_infer_step: bad input shape");
    if (cache.length() != position)
        throw StateError("mla_infer_step: cache holds " + std::to_string(cache.length()) +
                         " rows but position is " + std::to_string(position));
    const std::vector<std::size_t> pos{position};
    Tensor<S> cq = mm(h_t, p.w_dq->value);
    for (S& x : cq.data) x *= static_cast<S>(p.alpha_q());
    Tensor<S> ckv = mm(h_t, p.w_dkv->value);
    for (S& x : ckv.data) x *= static_cast<S>(p.alpha_kv());
    Tensor<S> qc = mm(cq, p.w_uq->value);
    Tensor<S> qr = rope_apply(mm(cq, p.w_qr->value), pos, p.rope_base, p.n_heads);
    Tensor<S> krt = rope_apply(mm(h_t, p.w_kr->value), pos, p.rope_base, 1);
    detail::append_row(cache.c_kv, ckv);
    detail::append_row(cache.k_r, krt);

    const std::size_t n = cache.length();
    Tensor<S> kc = mm(cache.c_kv, p.w_uk->value);
    Tensor<S> vv = mm(cache.c_kv, p.w_uv->value);
    const S scale =
        static_cast<S>(1.0 / std::sqrt(static_cast<double>(p.d_head_c + p.d_head_r)));
    Tensor<S> merged({1, p.n_heads * p.d_head_c});
    std::vector<S> att(n);
    for (std::size_t hd = 0; hd < p.n_heads; ++hd) {
        S mx = S(0);
        for (std::size_t j = 0; j < n; ++j) {
            S acc = S(0);
            const S* qcp = qc.row_ptr(0) + hd * p.d_head_c;
            const S* kcp = kc.row_ptr(j) + hd * p.d_head_c;
            for (std::size_t t = 0; t < p.d_head_c; ++t) acc += qcp[t] * kcp[t];
            const S* qrp = qr.row_ptr(0) + hd * p.d_head_r;
            const S* krp = cache.k_r.row_ptr(j);
            for (std::size_t t = 0; t < p.d_head_r; ++t) acc += qrp[t] * krp[t];
            att[j] = acc * scale;
            mx = (j == 0 || att[j] > mx) ? att[j] : mx;
        }
        S denom = S(0);
        for (std::size_t j = 0; j < n; ++j) {
            att[j] = std::exp(att[j] - mx);
            denom += att[j];
        }
        S* out = merged.row_ptr(0) + hd * p.d_head_c;
        for (std::size_t j = 0; j < n; ++j) {
            const S w = att[j] / denom;
            const S* vp = vv.row_ptr(j) + hd * p.d_head_c;
            for (std::size_t t = 0; t < p.d_head_c; ++t) out[t] += w * vp[t];
        }
    }
    return mm(merged, p.w_o->value);
}

// ---- fine-grained expert bank -------------------------------------------------

enum class GammaMode { FfnOnly, All, Off };

inline GammaMode parse_gamma_mode(const std::string& s) {
    if (s == "ffn_only") return GammaMode::FfnOnly;
    if (s == "all") return GammaMode::All;
    if (s == "off") return GammaMode::Off;
    throw ParameterError("unknown gamma mode: " + s);
}

inline const char* to_string(GammaMode m) {
    switch (m) {
        case GammaMode::FfnOnly: return "ffn_only";
        case GammaMode::All: return "all";
        case GammaMode::Off: return "off";
    }
    return "?";
}

template <typename S>
struct ExpertBank {
    std::size_t m = 1;  // segmentation factor
    GammaMode gamma_mode = GammaMode::FfnOnly;
    std::vector<Parameter<S>*> w_in;   // [d_model, inter] each
    std::vector<Parameter<S>*> w_out;  // [inter, d_model] each

    std::size_t n_experts() const { return w_in.size(); }
    double gamma_ffn() const { return gamma_mode == GammaMode::Off ? 1.0 : variance_gamma(m); }
    double gamma_zero() const { return gamma_mode == GammaMode::All ? variance_gamma(m) : 1.0; }
};

template <typename S>
struct ExpertBankVars {
    std::vector<typename Graph<S>::VarId> w_in, w_out;
};

// ---- gate-weighted combine ------------------------------------------------------

// out[t] = gamma_ffn * sum_{FFN slots} w * y_e(t) + gamma_zero * (sum_{zero slots} w) * x_t,
// with w the unbiased gate (optionally renormalized over the selected set).
// Zero-expert gates are summed before touching x, so a token routed only to
// identity experts with unit total gate reproduces its input bitwise.
template <typename S>
typename Graph<S>::VarId moe_combine(Graph<S>& g, typename Graph<S>::VarId x,
                                     typename Graph<S>::VarId probs, const RoutingDecision& d,
                                     std::vector<typename Graph<S>::VarId> expert_out,
                                     std::vector<std::int32_t> slot_row, S gamma_ffn,
                                     S gamma_zero, bool renormalize) {
    const Tensor<S>& xv = g.val(x);
    const Tensor<S>& pv = g.val(probs);
    const std::size_t t_count = xv.rows();
    const std::size_t dim = xv.cols();
    const std::size_t k = d.top_k;
    check(pv.rows() == t_count && d.tokens() == t_count, "moe_combine: row mismatch");
    check(slot_row.size() == t_count * k, "moe_combine: slot map size mismatch");

    auto denom = std::make_shared<std::vector<S>>(t_count, S(1));
    if (renormalize) {
        for (std::size_t t = 0; t < t_count; ++t) {
            S s = S(0);
            for (std::size_t sl = 0; sl < k; ++sl) s += pv.at(t, d.indices[t * k + sl]);
            (*denom)[t] = s;
        }
    }

    Tensor<S> out({t_count, dim});
    bool ng = g.needs_grad(x) || g.needs_grad(probs);
    for (std::size_t t = 0; t < t_count; ++t) {
        S* orow = out.row_ptr(t);
        S zero_w = S(0);
        for (std::size_t sl = 0; sl < k; ++sl) {
            const std::uint32_t e = d.indices[t * k + sl];
            if (e >= pv.cols()) throw StateError("moe_combine: expert index out of range");
            const S w = pv.at(t, e) / (*denom)[t];
            if (e < d.n_ffn) {
                const std::int32_t row = slot_row[t * k + sl];
                check(row >= 0 && expert_out[e] >= 0, "moe_combine: missing expert output");
                const Tensor<S>& y = g.val(expert_out[e]);
                const S coeff = gamma_ffn * w;
                const S* yrow = y.row_ptr(static_cast<std::size_t>(row));
                for (std::size_t j = 0; j < dim; ++j) orow[j] += coeff * yrow[j];
            } else {
                zero_w += w;
            }
        }
        if (zero_w != S(0)) {
            const S coeff = gamma_zero * zero_w;
            const S* xrow = xv.row_ptr(t);
            for (std::size_t j = 0; j < dim; ++j) orow[j] += coeff * xrow[j];
        }
    }
    for (auto v : expert_out)
        if (v >= 0) ng = ng || g.needs_grad(v);

    auto id = g.make_node(std::move(out), ng, nullptr);
    if (!ng) return id;

    auto dshared = std::make_shared<RoutingDecision>(d);
    auto rows = std::make_shared<std::vector<std::int32_t>>(std::move(slot_row));
    auto eouts = std::make_shared<std::vector<typename Graph<S>::VarId>>(std::move(expert_out));
    g.set_backward(id, [id, x, probs, dshared, rows, eouts, denom, gamma_ffn, gamma_zero,
                        renormalize](Graph<S>& g2) {
        const Tensor<S>& go = g2.grad(id);
        const Tensor<S>& outv = g2.val(id);
        const Tensor<S>& xv2 = g2.val(x);
        const Tensor<S>& pv2 = g2.val(probs);
        Tensor<S>& gx = g2.grad(x);
        Tensor<S>& gp = g2.grad(probs);
        const std::size_t k2 = dshared->top_k;
        const std::size_t dim2 = xv2.cols();
        for (std::size_t t = 0; t < xv2.rows(); ++t) {
            const S* grow = go.row_ptr(t);
            const S* xrow = xv2.row_ptr(t);
            const S dt = (*denom)[t];
            S gdotx = S(0);
            for (std::size_t j = 0; j < dim2; ++j) gdotx += grow[j] * xrow[j];
            S gdotout = S(0);
            if (renormalize) {
                const S* orow = outv.row_ptr(t);
                for (std::size_t j = 0; j < dim2; ++j) gdotout += grow[j] * orow[j];
            }
            S zero_w = S(0);
            for (std::size_t sl = 0; sl < k2; ++sl) {
                const std::uint32_t e = dshared->indices[t * k2 + sl];
                const S w = pv2.at(t, e) / dt;
                S gdotv;  // dot(g, contribution direction of this slot)
                if (e < dshared->n_ffn) {
                    const std::size_t row = static_cast<std::size_t>((*rows)[t * k2 + sl]);
                    const Tensor<S>& y = g2.val((*eouts)[e]);
                    const S* yrow = y.row_ptr(row);
                    S acc = S(0);
                    for (std::size_t j = 0; j < dim2; ++j) acc += grow[j] * yrow[j];
                    gdotv = gamma_ffn * acc;
                    if (g2.needs_grad((*eouts)[e])) {
                        Tensor<S>& gy = g2.grad((*eouts)[e]);
                        S* gyrow = gy.row_ptr(row);
                        const S coeff = gamma_ffn * w;
                        for (std::size_t j = 0; j < dim2; ++j) gyrow[j] += coeff * grow[j];
                    }
                } else {
                    gdotv = gamma_zero * gdotx;
                    zero_w += w;
                }
                if (g2.needs_grad(probs))
                    gp.at(t, e) += renormalize ? (gdotv - gdotout) / dt : gdotv;
            }
            if (g2.needs_grad(x) && zero_w != S(0)) {
                S* gxrow = gx.row_ptr(t);
                const S coeff = gamma_zero * zero_w;
                for (std::size_t j = 0; j < dim2; ++j) gxrow[j] += coeff * grow[j];
            }
        }
    });
    return id;
}

// Runs the selected FFN experts on their token sub-batches and combines.
template <typename S>
typename Graph<S>::VarId moe_block(Graph<S>& g, typename Graph<S>::VarId x,
                                   typename Graph<S>::VarId probs, const RoutingDecision& d,
                                   const ExpertBank<S>& bank, const ExpertBankVars<S>& vars,
                                   bool renormalize) {
    using VarId = typename Graph<S>::VarId;
    const std::size_t n_ffn = bank.n_experts();
    check(d.n_ffn == n_ffn, "moe_block: decision/bank FFN count mismatch");
    std::vector<std::vector<std::size_t>> expert_tokens(n_ffn);
    std::vector<std::int32_t> slot_row(d.tokens() * d.top_k, -1);
    for (std::size_t t = 0; t < d.tokens(); ++t) {
        for (std::size_t sl = 0; sl < d.top_k; ++sl) {
            const std::uint32_t e = d.indices[t * d.top_k + sl];
            if (e < n_ffn) {
                slot_row[t * d.top_k + sl] = static_cast<std::int32_t>(expert_tokens[e].size());
                expert_tokens[e].push_back(t);
            }
        }
    }
    std::vector<VarId> expert_out(n_ffn, VarId(-1));
    for (std::size_t e = 0; e < n_ffn; ++e) {
        if (expert_tokens[e].empty()) continue;
        VarId gx = g.gather_rows(x, expert_tokens[e]);
        expert_out[e] = g.matmul(g.silu(g.matmul(gx, vars.w_in[e])), vars.w_out[e]);
    }
    return moe_combine(g, x, probs, d, std::move(expert_out), std::move(slot_row),
                       static_cast<S>(bank.gamma_ffn()), static_cast<S>(bank.gamma_zero()),
                       renormalize);
}

// Value-only MoE forward for a single routed batch (tests and analysis).
template <typename S>
Tensor<S> moe_forward(const Tensor<S>& x, const RoutingDecision& d, const ExpertBank<S>& bank,
                      std::size_t n_zero) {
    const std::size_t e_total = bank.n_experts() + n_zero;
    for (auto i : d.indices)
        if (i >= e_total) throw StateError("moe_forward: expert index out of range");
    Graph<S> g;
    auto xv = g.input(x);
    // Rebuild a probability tensor carrying the decision's gates; entries not
    // selected are zero and never read.
    Tensor<S> probs({d.tokens(), e_total});
    for (std::size_t t = 0; t < d.tokens(); ++t)
        for (std::size_t sl = 0; sl < d.top_k; ++sl)
            probs.at(t, d.indices[t * d.top_k + sl]) = static_cast<S>(d.gates[t * d.top_k + sl]);
    auto pv = g.input(std::move(probs));
    ExpertBankVars<S> vars;
    for (std::size_t e = 0; e < bank.n_experts(); ++e) {
        vars.w_in.push_back(g.input(bank.w_in[e]->value));
        vars.w_out.push_back(g.input(bank.w_out[e]->value));
    }
    auto out = moe_block(g, xv, pv, d, bank, vars, false);
    return g.val(out);
}

// ---- dense FFN and MTP head -----------------------------------------------------

template <typename S>
typename Graph<S>::VarId ffn_block(Graph<S>& g, typename Graph<S>::VarId x,
                                   typename Graph<S>::VarId w_in,
                                   typename Graph<S>::VarId w_out) {
    return g.matmul(g.silu(g.matmul(x, w_in)), w_out);
}

// Auxiliary prediction head: one dense FFN over the trunk's final hidden state
// plus its own norms; the unembedding is tied to the main head.
template <typename S>
struct MtpHead {
    Parameter<S>* norm_in = nullptr;
    Parameter<S>* w_in = nullptr;
    Parameter<S>* w_out = nullptr;
    Parameter<S>* norm_out = nullptr;

    std::size_t param_elements() const {
        return norm_in->value.numel() + w_in->value.numel() + w_out->value.numel() +
               norm_out->value.numel();
    }
};

template <typename S>
struct MtpVars {
    typename Graph<S>::VarId norm_in, w_in, w_out, norm_out;
};

template <typename S>
typename Graph<S>::VarId mtp_hidden(Graph<S>& g, typename Graph<S>::VarId z,
                                    const MtpVars<S>& v) {
    auto h = g.add(z, ffn_block(g, g.rmsnorm(z, v.norm_in), v.w_in, v.w_out));
    return g.rmsnorm(h, v.norm_out);
}

}  // namespace moelab
