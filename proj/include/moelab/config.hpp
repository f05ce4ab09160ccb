#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>

#include <json.hpp>

#include "moelab/common.hpp"
#include "moelab/model.hpp"
#include "moelab/scaling.hpp"
#include "moelab/stability.hpp"

namespace moelab {

// Full experiment description. Serializable, round-trippable, and validated
// against every module invariant before a run starts.
struct RunConfig {
    ModelSpec model;
    AdamConfig adam;
    std::size_t steps = 200;
    std::size_t warmup = 20;
    std::size_t batch_size = 8;
    std::size_t seq_len = 32;
    std::size_t bias_update_every = 1;
    std::size_t checkpoint_every = 0;  // 0 = final checkpoint only
    std::size_t rg_every = 1;          // gradient-norm-ratio cadence
    std::uint64_t seed = 0;
    std::string dtype = "f64";
    std::string corpus_path;
    std::string out_dir;

    bool operator==(const RunConfig&) const = default;

    void validate() const {
        model.validate();
        if (steps == 0 || batch_size == 0 || seq_len < 2)
            throw ConfigError("config: need steps >= 1, batch >= 1, seq_len >= 2");
        if (bias_update_every == 0) throw ConfigError("config: bias_update_every must be >= 1");
        if (dtype != "f64" && dtype != "f32") throw ConfigError("config: dtype must be f64 or f32");
        if (adam.beta1 < 0.0 || adam.beta1 >= 1.0 || adam.beta2 < 0.0 || adam.beta2 >= 1.0)
            throw ConfigError("config: betas must lie in [0, 1)");
        if (adam.eps <= 0.0) throw ConfigError("config: adam eps must be > 0");
        if (adam.lr_embedding < 0.0 || adam.lr_hidden < 0.0 || adam.lr_unembedding < 0.0)
            throw ConfigError("config: learning rates must be >= 0");
    }
};

inline nlohmann::json to_json(const ModelSpec& m) {
    return nlohmann::json{
        {"vocab", m.vocab},
        {"d_model", m.d_model},
        {"n_layers", m.n_layers},
        {"n_heads", m.n_heads},
        {"d_head_c", m.d_head_c},
        {"d_head_r", m.d_head_r},
        {"d_q", m.d_q},
        {"d_kv", m.d_kv},
        {"rope_base", m.rope_base},
        {"dense_inter", m.dense_inter},
        {"expert_inter", m.expert_inter},
        {"n_ffn_experts", m.n_ffn_experts},
        {"n_zero_experts", m.n_zero_experts},
        {"top_k", m.top_k},
        {"k_expected", m.k_expected},
        {"segmentation_m", m.segmentation_m},
        {"gamma_mode", m.gamma_mode},
        {"variance_alignment", m.variance_alignment},
        {"renormalize_gates", m.renormalize_gates},
        {"scmoe", m.scmoe},
    };
}

inline void model_from_json(const nlohmann::json& j, ModelSpec& m) {
    m.vocab = j.value("vocab", m.vocab);
    m.d_model = j.at("d_model").get<std::size_t>();
    m.n_layers = j.at("n_layers").get<std::size_t>();
    m.n_heads = j.at("n_heads").get<std::size_t>();
    m.d_head_c = j.at("d_head_c").get<std::size_t>();
    m.d_head_r = j.at("d_head_r").get<std::size_t>();
    m.d_q = j.at("d_q").get<std::size_t>();
    m.d_kv = j.at("d_kv").get<std::size_t>();
    m.rope_base = j.value("rope_base", m.rope_base);
    m.dense_inter = j.at("dense_inter").get<std::size_t>();
    m.expert_inter = j.at("expert_inter").get<std::size_t>();
    m.n_ffn_experts = j.at("n_ffn_experts").get<std::size_t>();
    m.n_zero_experts = j.at("n_zero_experts").get<std::size_t>();
    m.top_k = j.at("top_k").get<std::size_t>();
    m.k_expected = j.at("k_expected").get<std::size_t>();
    m.segmentation_m = j.value("segmentation_m", m.segmentation_m);
    m.gamma_mode = j.value("gamma_mode", m.gamma_mode);
    m.variance_alignment = j.value("variance_alignment", m.variance_alignment);
    m.renormalize_gates = j.value("renormalize_gates", m.renormalize_gates);
    m.scmoe = j.value("scmoe", m.scmoe);
}

inline nlohmann::json to_json(const RunConfig& c) {
    nlohmann::json j;
    j["model"] = to_json(c.model);
    j["losses"] = {{"lb_alpha", c.model.lb_alpha},
                   {"lb_groups", c.model.lb_groups},
                   {"z_lambda", c.model.z_lambda},
                   {"mtp_weight", c.model.mtp_weight}};
    j["controller"] = {{"mu", c.model.mu},
                       {"mu_decay", c.model.mu_decay},
                       {"update_every", c.bias_update_every}};
    j["init"] = {{"distribution", c.model.init_distribution},
                 {"var_embedding", c.model.init_var_embedding},
                 {"var_hidden", c.model.init_var_hidden},
                 {"var_unembedding", c.model.init_var_unembedding}};
    j["optimizer"] = {{"lr_embedding", c.adam.lr_embedding}, {"lr_hidden", c.adam.lr_hidden},
                      {"lr_unembedding", c.adam.lr_unembedding}, {"beta1", c.adam.beta1},
                      {"beta2", c.adam.beta2}, {"eps", c.adam.eps}};
    j["schedule"] = {{"steps", c.steps},
                     {"warmup", c.warmup},
                     {"batch_size", c.batch_size},
                     {"seq_len", c.seq_len}};
    j["runtime"] = {{"dtype", c.dtype},       {"seed", c.seed},
                    {"corpus", c.corpus_path}, {"out_dir", c.out_dir},
                    {"checkpoint_every", c.checkpoint_every}, {"rg_every", c.rg_every}};
    return j;
}

inline RunConfig config_from_json(const nlohmann::json& j) {
    RunConfig c;
    model_from_json(j.at("model"), c.model);
    const auto& losses = j.at("losses");
    c.model.lb_alpha = losses.at("lb_alpha").get<double>();
    c.model.lb_groups = losses.at("lb_groups").get<std::size_t>();
    c.model.z_lambda = losses.at("z_lambda").get<double>();
    c.model.mtp_weight = losses.at("mtp_weight").get<double>();
    const auto& ctrl = j.at("controller");
    c.model.mu = ctrl.at("mu").get<double>();
    c.model.mu_decay = ctrl.at("mu_decay").get<double>();
    c.bias_update_every = ctrl.value("update_every", std::size_t(1));
    const auto& init = j.at("init");
    c.model.init_distribution = init.at("distribution").get<std::string>();
    c.model.init_var_embedding = init.at("var_embedding").get<double>();
    c.model.init_var_hidden = init.at("var_hidden").get<double>();
    c.model.init_var_unembedding = init.at("var_unembedding").get<double>();
    const auto& opt = j.at("optimizer");
    c.adam.lr_embedding = opt.at("lr_embedding").get<double>();
    c.adam.lr_hidden = opt.at("lr_hidden").get<double>();
    c.adam.lr_unembedding = opt.at("lr_unembedding").get<double>();
    c.adam.beta1 = opt.at("beta1").get<double>();
    c.adam.beta2 = opt.at("beta2").get<double>();
    c.adam.eps = opt.at("eps").get<double>();
    const auto& sched = j.at("schedule");
    c.steps = sched.at("steps").get<std::size_t>();
    c.warmup = sched.at("warmup").get<std::size_t>();
    c.batch_size = sched.at("batch_size").get<std::size_t>();
    c.seq_len = sched.at("seq_len").get<std::size_t>();
    const auto& rt = j.at("runtime");
    c.dtype = rt.at("dtype").get<std::string>();
    c.seed = rt.at("seed").get<std::uint64_t>();
    c.corpus_path = rt.value("corpus", std::string{});
    c.out_dir = rt.value("out_dir", std::string{});
    c.checkpoint_every = rt.value("checkpoint_every", std::size_t(0));
    c.rg_every = rt.value("rg_every", std::size_t(1));
    return c;
}

inline RunConfig load_config(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open config: " + path);
    nlohmann::json j = nlohmann::json::parse(is);
    RunConfig c = config_from_json(j);
    c.validate();
    return c;
}

inline void save_config(const RunConfig& c, const std::string& path) {
    std::ofstream os(path);
    if (!os) throw IoError("cannot write config: " + path);
    os << to_json(c).dump(2) << "\n";
}

// Width transfer on a whole run config: width-like dims scale with s, the
// per-class (init var, lr) pairs follow the transfer rules, and depth,
// sparsity and batch size carry over unchanged.
inline RunConfig transfer_run_config(const RunConfig& proxy, double s) {
    if (s <= 0.0) throw ParameterError("transfer: width factor must be positive");
    auto scale_dim = [s](std::size_t d, const char* what) {
        const double scaled = static_cast<double>(d) * s;
        const double rounded = std::round(scaled);
        if (std::abs(scaled - rounded) > 1e-9 || rounded < 1.0)
            throw ParameterError(std::string("transfer: ") + what +
                                 " does not scale to an integer width");
        return static_cast<std::size_t>(rounded);
    };
    RunConfig t = proxy;
    t.model.d_model = scale_dim(proxy.model.d_model, "d_model");
    t.model.d_q = scale_dim(proxy.model.d_q, "d_q");
    t.model.d_kv = scale_dim(proxy.model.d_kv, "d_kv");
    t.model.d_head_c = scale_dim(proxy.model.d_head_c, "d_head_c");
    t.model.d_head_r = scale_dim(proxy.model.d_head_r, "d_head_r");
    t.model.dense_inter = scale_dim(proxy.model.dense_inter, "dense_inter");
    t.model.expert_inter = scale_dim(proxy.model.expert_inter, "expert_inter");

    TransferableHparams h;
    h.embedding = {proxy.model.init_var_embedding, proxy.adam.lr_embedding};
    h.hidden = {proxy.model.resolved_var_hidden(), proxy.adam.lr_hidden};
    h.unembedding = {proxy.model.resolved_var_unembedding(), proxy.adam.lr_unembedding};
    const TransferableHparams th = transfer_hparams(h, s);
    t.model.init_var_embedding = th.embedding.init_var;
    t.model.init_var_hidden = th.hidden.init_var;
    t.model.init_var_unembedding = th.unembedding.init_var;
    t.adam.lr_embedding = th.embedding.lr;
    t.adam.lr_hidden = th.hidden.lr;
    t.adam.lr_unembedding = th.unembedding.lr;
    return t;
}

}  // namespace moelab
