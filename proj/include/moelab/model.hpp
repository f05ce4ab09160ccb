#pragma once

#include <cmath>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "moelab/blocks.hpp"
#include "moelab/common.hpp"
#include "moelab/graph.hpp"
#include "moelab/param.hpp"
#include "moelab/rng.hpp"
#include "moelab/router.hpp"
#include "moelab/stability.hpp"
#include "moelab/tensor.hpp"

namespace moelab {

inline constexpr std::size_t kByteVocab = 256;
inline constexpr std::size_t kNumSpecials = 3;  // BOS, EOS, PAD
inline constexpr int kBosToken = 256;
inline constexpr int kEosToken = 257;
inline constexpr int kPadToken = 258;

struct ModelSpec {
    std::size_t vocab = kByteVocab + kNumSpecials;
    std::size_t d_model = 128;
    std::size_t n_layers = 4;
    std::size_t n_heads = 4;
    std::size_t d_head_c = 32;
    std::size_t d_head_r = 16;
    std::size_t d_q = 32;
    std::size_t d_kv = 16;
    double rope_base = 1.0e6;
    std::size_t dense_inter = 256;
    std::size_t expert_inter = 48;
    std::size_t n_ffn_experts = 16;
    std::size_t n_zero_experts = 8;
    std::size_t top_k = 6;
    std::size_t k_expected = 4;
    std::size_t segmentation_m = 2;
    std::string gamma_mode = "ffn_only";
    bool variance_alignment = true;
    bool renormalize_gates = false;
    bool scmoe = true;  // false: interleaved wiring, MoE fed from the post-attention stream
    double mu = 0.01;
    double mu_decay = 0.999;
    double lb_alpha = 0.01;
    std::size_t lb_groups = 4;
    double z_lambda = 1.0e-5;
    double mtp_weight = 0.1;
    std::string init_distribution = "truncated_normal";
    double init_var_embedding = 0.02;
    double init_var_hidden = 0.0;       // 0 resolves to 1/d_model
    double init_var_unembedding = 0.0;  // 0 resolves to 0.01/d_model

    bool operator==(const ModelSpec&) const = default;

    double resolved_var_hidden() const {
        return init_var_hidden > 0.0 ? init_var_hidden : 1.0 / static_cast<double>(d_model);
    }
    double resolved_var_unembedding() const {
        return init_var_unembedding > 0.0 ? init_var_unembedding
                                          : 0.01 / static_cast<double>(d_model);
    }

    void validate() const {
        if (d_model == 0 || n_layers == 0 || n_heads == 0 || d_q == 0 || d_kv == 0 ||
            d_head_c == 0 || d_head_r == 0 || dense_inter == 0 || expert_inter == 0)
            throw ConfigError("model: dims must be positive");
        if (d_head_r % 2 != 0) throw ConfigError("model: rotary head dim must be even");
        if (n_ffn_experts == 0) throw ConfigError("model: need at least one FFN expert");
        if (top_k > n_ffn_experts + n_zero_experts)
            throw ConfigError("model: top_k exceeds expert count");
        if (k_expected < 1 || k_expected > top_k)
            throw ConfigError("model: need 1 <= k_expected <= top_k");
        if (n_zero_experts > 0 && k_expected >= top_k)
            throw ConfigError("model: k_expected must be < top_k when zero experts exist");
        if (n_zero_experts == 0 && k_expected != top_k)
            throw ConfigError("model: without zero experts k_expected must equal top_k");
        if (n_zero_experts < top_k - k_expected)
            throw ConfigError("model: zero experts cannot absorb top_k - k_expected slack");
        if (lb_groups == 0 || n_ffn_experts % lb_groups != 0)
            throw ConfigError("model: lb_groups must divide FFN expert count");
        if (segmentation_m < 1) throw ConfigError("model: segmentation factor must be >= 1");
        if (mu < 0.0 || mu_decay <= 0.0) throw ConfigError("model: bad controller constants");
        if (lb_alpha < 0.0 || z_lambda < 0.0 || mtp_weight < 0.0)
            throw ConfigError("model: loss weights must be >= 0");
        parse_gamma_mode(gamma_mode);
        parse_distribution(init_distribution);
    }
};

// Packed training batch: whole sequences laid out back to back.
struct Batch {
    std::vector<int> tokens;
    std::vector<int> targets_next;   // -1 = ignored
    std::vector<int> targets_skip2;  // token at t+2, -1 = ignored
    std::size_t seq_len = 0;
};

template <typename S>
struct LayerParams {
    MlaParams<S> mla1, mla2;
    Parameter<S>* norm1 = nullptr;
    Parameter<S>* norm_ffn = nullptr;
    Parameter<S>* norm2 = nullptr;
    Parameter<S>* norm_moe = nullptr;
    Parameter<S>* dense_in = nullptr;
    Parameter<S>* dense_out = nullptr;
    Parameter<S>* router_w = nullptr;
    RouterState<S> router;  // controller state; projection lives in router_w
    ExpertBank<S> bank;
};

template <typename S>
struct ForwardResult {
    Graph<S> graph;
    using VarId = typename Graph<S>::VarId;
    std::vector<VarId> param_vars;  // registry order
    std::vector<VarId> layer_probs;
    std::vector<RoutingDecision> decisions;
    VarId hidden_pre_norm = -1;
    VarId logits = -1;
    VarId lm_loss = -1;
    VarId lb_loss = -1;
    VarId z_loss = -1;
    VarId mtp_loss = -1;  // already weighted
    VarId aux_loss = -1;  // lb + z + weighted mtp
    VarId total_loss = -1;
    bool mtp_skipped = false;
    double mtp_loss_raw = 0.0;

    double value_of(VarId v) const { return static_cast<double>(graph.val(v).data[0]); }
};

template <typename S>
class Model {
  public:
    Model(const ModelSpec& spec, std::uint64_t seed) : spec_(spec), seed_(seed) {
        spec_.validate();
        build_params();
    }

    const ModelSpec& spec() const { return spec_; }
    std::uint64_t seed() const { return seed_; }
    ParamRegistry<S>& params() { return params_; }
    const ParamRegistry<S>& params() const { return params_; }
    std::vector<LayerParams<S>>& layers() { return layers_; }
    const std::vector<LayerParams<S>>& layers() const { return layers_; }
    Parameter<S>* embedding() { return embedding_; }
    Parameter<S>* unembedding() { return unembed_; }
    const MtpHead<S>& mtp_head() const { return mtp_; }

    // Builds the full training graph for one batch. `eval_chunks` splits the
    // post-attention branch work into sequence chunks; any chunking yields
    // bitwise-identical values.
    ForwardResult<S> forward(const Batch& batch, std::size_t eval_chunks = 1) {
        check(batch.seq_len > 0 && batch.tokens.size() % batch.seq_len == 0,
              "forward: tokens must pack whole sequences");
        ForwardResult<S> fr;
        Graph<S>& g = fr.graph;
        bind_params(fr);

        std::vector<std::size_t> ids(batch.tokens.size());
        for (std::size_t i = 0; i < ids.size(); ++i) {
            if (batch.tokens[i] < 0 || static_cast<std::size_t>(batch.tokens[i]) >= spec_.vocab)
                throw ParameterError("forward: token id out of range");
            ids[i] = static_cast<std::size_t>(batch.tokens[i]);
        }
        auto x = g.gather_rows(var_of(fr, embedding_), ids);

        for (std::size_t l = 0; l < layers_.size(); ++l)
            x = build_layer(fr, l, x, batch.seq_len, eval_chunks);

        fr.hidden_pre_norm = x;
        fr.z_loss = hidden_zloss_node(g, x, spec_.z_lambda);
        auto hf = g.rmsnorm(x, var_of(fr, final_norm_));
        fr.logits = g.matmul(hf, var_of(fr, unembed_));
        fr.lm_loss = g.cross_entropy_mean(fr.logits, batch.targets_next, -1);

        bool any_mtp = false;
        for (int t : batch.targets_skip2) any_mtp = any_mtp || t != -1;
        if (any_mtp && spec_.mtp_weight > 0.0) {
            MtpVars<S> mv{var_of(fr, mtp_.norm_in), var_of(fr, mtp_.w_in), var_of(fr, mtp_.w_out),
                          var_of(fr, mtp_.norm_out)};
            auto mh = mtp_hidden(g, fr.hidden_pre_norm, mv);
            auto mlogits = g.matmul(mh, var_of(fr, unembed_));
            auto raw = g.cross_entropy_mean(mlogits, batch.targets_skip2, -1);
            fr.mtp_loss_raw = fr.value_of(raw);
            fr.mtp_loss = g.scale(raw, static_cast<S>(spec_.mtp_weight));
        } else {
            fr.mtp_skipped = true;
            fr.mtp_loss = g.make_node(Tensor<S>::scalar(S(0)), false, nullptr);
        }

        std::vector<typename Graph<S>::VarId> lbs;
        for (std::size_t l = 0; l < layers_.size(); ++l) {
            lbs.push_back(lb_loss_node(g, fr.layer_probs[l], fr.decisions[l],
                                       LbLossConfig{spec_.lb_alpha, spec_.lb_groups},
                                       spec_.n_ffn_experts, spec_.n_zero_experts,
                                       spec_.k_expected));
        }
        fr.lb_loss = g.add_n(lbs);
        fr.aux_loss = g.add_n({fr.lb_loss, fr.z_loss, fr.mtp_loss});
        fr.total_loss = g.add(fr.lm_loss, fr.aux_loss);
        return fr;
    }

    // Embedding lookup followed by the layer stack; value-path helper used by
    // growth-identity and wiring checks.
    Tensor<S> hidden_states(const std::vector<int>& tokens, std::size_t seq_len) {
        Batch b;
        b.tokens = tokens;
        b.targets_next.assign(tokens.size(), -1);
        b.targets_skip2.assign(tokens.size(), -1);
        b.seq_len = seq_len;
        // Targets are all ignored: lm/mtp losses are constants, but layer
        // values are exactly the training-path values.
        ForwardResult<S> fr = forward(b);
        return fr.graph.val(fr.hidden_pre_norm);
    }

    // Adds graph gradients into the registry (single-writer accumulation).
    void export_grads(ForwardResult<S>& fr) {
        for (std::size_t i = 0; i < params_.size(); ++i) {
            if (!fr.graph.has_grad(fr.param_vars[i])) continue;
            const Tensor<S>& gsrc = fr.graph.grad(fr.param_vars[i]);
            Tensor<S>& gdst = params_[i].grad;
            for (std::size_t j = 0; j < gdst.numel(); ++j) gdst.data[j] += gsrc.data[j];
        }
    }

    void accumulate_routing(const ForwardResult<S>& fr) {
        for (std::size_t l = 0; l < layers_.size(); ++l)
            accumulate_counters(layers_[l].router, fr.decisions[l]);
    }

    // Controller tick; call once per global batch.
    void update_biases() {
        for (auto& layer : layers_)
            if (layer.router.tokens_seen > 0) bias_update(layer.router);
    }

    Parameter<S>* final_norm() { return final_norm_; }

    std::size_t layer_param_elements() const {
        std::size_t n = 0;
        for (std::size_t i = 0; i < params_.size(); ++i)
            if (params_[i].name.rfind("layers.0.", 0) == 0) n += params_[i].value.numel();
        return n;
    }

  private:
    typename Graph<S>::VarId var_of(ForwardResult<S>& fr, const Parameter<S>* p) const {
        return fr.param_vars[p->reg_index];
    }

    void bind_params(ForwardResult<S>& fr) {
        fr.param_vars.reserve(params_.size());
        for (std::size_t i = 0; i < params_.size(); ++i)
            fr.param_vars.push_back(fr.graph.param(params_[i].value));
    }

    Parameter<S>* add_init(const std::string& name, ParamClass cls,
                           std::vector<std::size_t> shape, double variance) {
        CounterRng rng = CounterRng(seed_).stream(params_.size() + 1000);
        Tensor<S> v = seeded_init<S>(std::move(shape), parse_distribution(spec_.init_distribution),
                                     variance, rng);
        return params_.add(name, cls, std::move(v));
    }

    Parameter<S>* add_gain(const std::string& name, std::size_t width) {
        return params_.add(name, ParamClass::Hidden, Tensor<S>::full({width}, S(1)));
    }

    MlaParams<S> make_mla(const std::string& prefix) {
        MlaParams<S> m;
        m.d_model = spec_.d_model;
        m.d_q = spec_.d_q;
        m.d_kv = spec_.d_kv;
        m.n_heads = spec_.n_heads;
        m.d_head_c = spec_.d_head_c;
        m.d_head_r = spec_.d_head_r;
        m.rope_base = spec_.rope_base;
        m.variance_alignment = spec_.variance_alignment;
        const double hv = spec_.resolved_var_hidden();
        m.w_dq = add_init(prefix + ".w_dq", ParamClass::Hidden, {spec_.d_model, spec_.d_q}, hv);
        m.w_uq = add_init(prefix + ".w_uq", ParamClass::Hidden,
                          {spec_.d_q, spec_.n_heads * spec_.d_head_c}, hv);
        m.w_qr = add_init(prefix + ".w_qr", ParamClass::Hidden,
                          {spec_.d_q, spec_.n_heads * spec_.d_head_r}, hv);
        m.w_dkv = add_init(prefix + ".w_dkv", ParamClass::Hidden, {spec_.d_model, spec_.d_kv}, hv);
        m.w_uk = add_init(prefix + ".w_uk", ParamClass::Hidden,
                          {spec_.d_kv, spec_.n_heads * spec_.d_head_c}, hv);
        m.w_uv = add_init(prefix + ".w_uv", ParamClass::Hidden,
                          {spec_.d_kv, spec_.n_heads * spec_.d_head_c}, hv);
        m.w_kr = add_init(prefix + ".w_kr", ParamClass::Hidden, {spec_.d_model, spec_.d_head_r}, hv);
        m.w_o = add_init(prefix + ".w_o", ParamClass::Hidden,
                         {spec_.n_heads * spec_.d_head_c, spec_.d_model}, hv);
        return m;
    }

    void build_params() {
        embedding_ = add_init("embed.table", ParamClass::Embedding, {spec_.vocab, spec_.d_model},
                              spec_.init_var_embedding);
        const double hv = spec_.resolved_var_hidden();
        layers_.resize(spec_.n_layers);
        for (std::size_t l = 0; l < spec_.n_layers; ++l) {
            const std::string lp = "layers." + std::to_string(l);
            LayerParams<S>& layer = layers_[l];
            layer.norm1 = add_gain(lp + ".norm1.gain", spec_.d_model);
            layer.mla1 = make_mla(lp + ".mla1");
            layer.norm_ffn = add_gain(lp + ".norm_ffn.gain", spec_.d_model);
            layer.dense_in =
                add_init(lp + ".dense.w_in", ParamClass::Hidden, {spec_.d_model, spec_.dense_inter}, hv);
            layer.dense_out = add_init(lp + ".dense.w_out", ParamClass::Hidden,
                                       {spec_.dense_inter, spec_.d_model}, hv);
            layer.norm2 = add_gain(lp + ".norm2.gain", spec_.d_model);
            layer.mla2 = make_mla(lp + ".mla2");
            layer.norm_moe = add_gain(lp + ".norm_moe.gain", spec_.d_model);
            layer.router_w = add_init(lp + ".router.w", ParamClass::Hidden,
                                      {spec_.d_model, spec_.n_ffn_experts + spec_.n_zero_experts}, hv);
            layer.bank.m = spec_.segmentation_m;
            layer.bank.gamma_mode = parse_gamma_mode(spec_.gamma_mode);
            for (std::size_t e = 0; e < spec_.n_ffn_experts; ++e) {
                const std::string ep = lp + ".experts." + std::to_string(e);
                layer.bank.w_in.push_back(add_init(ep + ".w_in", ParamClass::Hidden,
                                                   {spec_.d_model, spec_.expert_inter}, hv));
                layer.bank.w_out.push_back(add_init(ep + ".w_out", ParamClass::Hidden,
                                                    {spec_.expert_inter, spec_.d_model}, hv));
            }
            layer.router = RouterState<S>(Tensor<S>{}, spec_.n_ffn_experts, spec_.n_zero_experts,
                                          spec_.top_k, spec_.k_expected, spec_.mu, spec_.mu_decay);
        }
        final_norm_ = add_gain("final_norm.gain", spec_.d_model);
        unembed_ = add_init("unembed.w", ParamClass::Unembedding, {spec_.d_model, spec_.vocab},
                            spec_.resolved_var_unembedding());
        mtp_.norm_in = add_gain("mtp.norm_in.gain", spec_.d_model);
        mtp_.w_in = add_init("mtp.w_in", ParamClass::Hidden, {spec_.d_model, spec_.dense_inter}, hv);
        mtp_.w_out = add_init("mtp.w_out", ParamClass::Hidden, {spec_.dense_inter, spec_.d_model}, hv);
        mtp_.norm_out = add_gain("mtp.norm_out.gain", spec_.d_model);
    }

    MlaVars<S> bind_mla(ForwardResult<S>& fr, const MlaParams<S>& m) {
        return MlaVars<S>{var_of(fr, m.w_dq), var_of(fr, m.w_uq), var_of(fr, m.w_qr),
                          var_of(fr, m.w_dkv), var_of(fr, m.w_uk), var_of(fr, m.w_uv),
                          var_of(fr, m.w_kr), var_of(fr, m.w_o)};
    }

    // One ScMoE (or interleaved) layer. The post-attention branch work is
    // evaluated per chunk of whole sequences; chunk boundaries never split a
    // sequence, so chunked and monolithic evaluation match bitwise.
    typename Graph<S>::VarId build_layer(ForwardResult<S>& fr, std::size_t l,
                                         typename Graph<S>::VarId x, std::size_t seq_len,
                                         std::size_t eval_chunks) {
        using VarId = typename Graph<S>::VarId;
        Graph<S>& g = fr.graph;
        LayerParams<S>& layer = layers_[l];
        const std::size_t rows = g.val(x).rows();
        const std::size_t n_seq = rows / seq_len;
        if (eval_chunks == 0) eval_chunks = 1;
        eval_chunks = std::min(eval_chunks, n_seq);

        auto a1 = g.add(x, mla_block(g, g.rmsnorm(x, var_of(fr, layer.norm1)), layer.mla1,
                                     bind_mla(fr, layer.mla1), seq_len));

        ExpertBankVars<S> bank_vars;
        for (std::size_t e = 0; e < layer.bank.n_experts(); ++e) {
            bank_vars.w_in.push_back(var_of(fr, layer.bank.w_in[e]));
            bank_vars.w_out.push_back(var_of(fr, layer.bank.w_out[e]));
        }

        std::vector<VarId> chunk_out, chunk_probs;
        RoutingDecision merged;
        merged.top_k = spec_.top_k;
        merged.n_ffn = spec_.n_ffn_experts;
        const std::size_t seq_per_chunk = (n_seq + eval_chunks - 1) / eval_chunks;
        for (std::size_t c = 0; c < eval_chunks; ++c) {
            const std::size_t s0 = c * seq_per_chunk;
            if (s0 >= n_seq) break;
            const std::size_t s1 = std::min(n_seq, s0 + seq_per_chunk);
            VarId xa = a1;
            if (eval_chunks > 1) {
                std::vector<std::size_t> rows_idx;
                for (std::size_t r = s0 * seq_len; r < s1 * seq_len; ++r) rows_idx.push_back(r);
                xa = g.gather_rows(a1, std::move(rows_idx));
            }
            auto dd = g.add(xa, ffn_block(g, g.rmsnorm(xa, var_of(fr, layer.norm_ffn)),
                                          var_of(fr, layer.dense_in), var_of(fr, layer.dense_out)));
            auto a3 = g.add(dd, mla_block(g, g.rmsnorm(dd, var_of(fr, layer.norm2)), layer.mla2,
                                          bind_mla(fr, layer.mla2), seq_len));
            VarId moe_src = spec_.scmoe ? xa : a3;
            auto hmoe = g.rmsnorm(moe_src, var_of(fr, layer.norm_moe));
            auto probs = g.softmax(g.matmul(hmoe, var_of(fr, layer.router_w)));
            RoutingDecision d = route_from_probs(g.val(probs), layer.router);
            auto moe_out =
                moe_block(g, hmoe, probs, d, layer.bank, bank_vars, spec_.renormalize_gates);
            chunk_out.push_back(g.add(a3, moe_out));
            chunk_probs.push_back(probs);
            merged.indices.insert(merged.indices.end(), d.indices.begin(), d.indices.end());
            merged.gates.insert(merged.gates.end(), d.gates.begin(), d.gates.end());
            merged.ffn_count.insert(merged.ffn_count.end(), d.ffn_count.begin(), d.ffn_count.end());
        }
        fr.layer_probs.push_back(g.concat_rows(chunk_probs));
        fr.decisions.push_back(std::move(merged));
        return g.concat_rows(chunk_out);
    }

    ModelSpec spec_;
    std::uint64_t seed_;
    ParamRegistry<S> params_;
    std::vector<LayerParams<S>> layers_;
    Parameter<S>* embedding_ = nullptr;
    Parameter<S>* final_norm_ = nullptr;
    Parameter<S>* unembed_ = nullptr;
    MtpHead<S> mtp_;
};

}  // namespace moelab
