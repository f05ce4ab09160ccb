#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "moelab/config.hpp"
#include "moelab/corpus.hpp"
#include "moelab/model.hpp"
#include "moelab/router.hpp"
#include "moelab/train.hpp"

namespace moelab {

// Per-layer gradient-norm ratios for one built forward pass. Runs a backward
// from the LM loss; the graph's grads are dirty afterwards.
template <typename S>
std::vector<double> per_layer_grad_norm_ratio(Model<S>& model, ForwardResult<S>& fr) {
    const ModelSpec& spec = model.spec();
    fr.graph.backward(fr.lm_loss);
    std::vector<double> out;
    for (std::size_t l = 0; l < model.layers().size(); ++l) {
        const Tensor<S>& gp = fr.graph.grad(fr.layer_probs[l]);
        std::vector<double> v_lm(gp.cols(), 0.0);
        for (std::size_t t = 0; t < gp.rows(); ++t)
            for (std::size_t e = 0; e < gp.cols(); ++e) v_lm[e] += static_cast<double>(gp.at(t, e));
        const std::vector<double> f =
            lb_group_frequencies(fr.decisions[l], LbLossConfig{1.0, spec.lb_groups},
                                 spec.n_ffn_experts, spec.n_zero_experts, spec.k_expected);
        const std::size_t gsz = spec.n_ffn_experts / spec.lb_groups;
        std::vector<double> v_lb(gp.cols(), 0.0);
        for (std::size_t e = 0; e < gp.cols(); ++e) {
            const std::size_t j = e < spec.n_ffn_experts ? e / gsz : spec.lb_groups;
            v_lb[e] = j < f.size() ? f[j] : 0.0;
        }
        out.push_back(grad_norm_ratio(v_lm, v_lb, spec.lb_alpha).value);
    }
    return out;
}

// Activation statistics for one named token sample: per-layer mean/std of
// activated FFN experts, per-expert slot load, router similarity, R_g, and a
// per-token activation dump for the leading tokens.
template <typename S>
nlohmann::json routing_stats_for_tokens(Model<S>& model, const std::vector<int>& tokens,
                                        std::size_t seq_len, std::size_t dump_tokens = 48) {
    const std::size_t usable = (tokens.size() / seq_len) * seq_len;
    if (usable == 0) throw ParameterError("routing stats: sample shorter than one sequence");
    Batch b;
    b.tokens.assign(tokens.begin(), tokens.begin() + static_cast<std::ptrdiff_t>(usable));
    b.targets_next.assign(usable, -1);
    b.targets_skip2.assign(usable, -1);
    b.seq_len = seq_len;
    // LM targets: next token within each sequence (teacher forcing), needed
    // for the R_g backward.
    for (std::size_t i = 0; i + 1 < usable; ++i)
        if ((i + 1) % seq_len != 0) b.targets_next[i] = b.tokens[i + 1];
    ForwardResult<S> fr = model.forward(b);
    const std::vector<double> rg = per_layer_grad_norm_ratio(model, fr);

    nlohmann::json layers = nlohmann::json::array();
    for (std::size_t l = 0; l < model.layers().size(); ++l) {
        const RoutingDecision& d = fr.decisions[l];
        const std::size_t n_experts = model.spec().n_ffn_experts + model.spec().n_zero_experts;
        std::vector<double> load(n_experts, 0.0);
        for (auto idx : d.indices) load[idx] += 1.0;
        for (double& v : load) v /= static_cast<double>(d.indices.size());
        layers.push_back(
            {{"layer", l},
             {"mean_activated_ffn", d.mean_ffn()},
             {"std_activated_ffn", d.std_ffn()},
             {"per_expert_load", load},
             {"router_similarity",
              router_similarity(model.layers()[l].router_w->value).mean_cosine},
             {"R_g", rg[l]}});
    }

    nlohmann::json dump = nlohmann::json::array();
    const std::size_t n_dump = std::min<std::size_t>(dump_tokens, usable);
    for (std::size_t t = 0; t < n_dump; ++t) {
        nlohmann::json counts = nlohmann::json::array();
        for (std::size_t l = 0; l < model.layers().size(); ++l)
            counts.push_back(fr.decisions[l].ffn_count[t]);
        const int tok = b.tokens[t];
        std::string shown = tok == kBosToken ? "<bos>" : std::string(1, static_cast<char>(tok));
        if (tok < 32 || tok > 126) shown = tok == kBosToken ? "<bos>" : "\\x";
        dump.push_back({{"token", tok}, {"text", shown}, {"ffn_per_layer", counts}});
    }
    return nlohmann::json{{"layers", layers}, {"token_dump", dump}};
}

// Appendix-style report across named corpora.
template <typename S>
nlohmann::json routing_stats_report(Model<S>& model,
                                    const std::vector<std::pair<std::string, std::vector<int>>>& corpora,
                                    std::size_t seq_len) {
    nlohmann::json out = nlohmann::json::object();
    for (const auto& [name, tokens] : corpora)
        out[name] = routing_stats_for_tokens(model, tokens, seq_len);
    return out;
}

inline std::vector<int> bytes_to_tokens(const std::vector<std::uint8_t>& bytes) {
    std::vector<int> toks(bytes.size());
    for (std::size_t i = 0; i < bytes.size(); ++i) toks[i] = bytes[i];
    return toks;
}

}  // namespace moelab
