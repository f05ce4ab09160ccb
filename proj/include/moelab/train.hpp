#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <string>
#include <vector>

#include <json.hpp>

#include "moelab/checkpoint.hpp"
#include "moelab/config.hpp"
#include "moelab/corpus.hpp"
#include "moelab/model.hpp"
#include "moelab/router.hpp"
#include "moelab/stability.hpp"

namespace moelab {

inline nlohmann::json metrics_to_json(const StabilityMetrics& m) {
    return nlohmann::json{{"step", m.step},
                          {"lm_loss", m.lm_loss},
                          {"lb_loss", m.lb_loss},
                          {"z_loss", m.z_loss},
                          {"mtp_loss", m.mtp_loss},
                          {"total_loss", m.total_loss},
                          {"hidden_norm", m.hidden_norm},
                          {"max_abs_act", m.max_abs_act},
                          {"grad_rms_min", m.grad_rms_min},
                          {"grad_rms_max", m.grad_rms_max},
                          {"mean_ffn_activated", m.mean_ffn_activated},
                          {"std_ffn_activated", m.std_ffn_activated},
                          {"R_g", m.r_g},
                          {"router_sim", m.router_sim},
                          {"nan_flag", m.nan_flag},
                          {"eps_flag", m.eps_flag}};
}

// Training state carried across growth: schedule position is preserved.
struct TrainState {
    std::uint64_t step = 0;
    std::uint64_t samples_seen = 0;

    nlohmann::json to_json() const {
        return nlohmann::json{{"step", step}, {"samples_seen", samples_seen}};
    }
    static TrainState from_json(const nlohmann::json& j) {
        TrainState s;
        s.step = j.value("step", std::uint64_t(0));
        s.samples_seen = j.value("samples_seen", std::uint64_t(0));
        return s;
    }
};

template <typename S>
nlohmann::json router_meta(const Model<S>& model) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& layer : model.layers())
        arr.push_back({{"b", layer.router.b}, {"mu", layer.router.mu}});
    return arr;
}

template <typename S>
void restore_router_meta(Model<S>& model, const nlohmann::json& arr) {
    if (!arr.is_array() || arr.size() != model.layers().size())
        throw IoError("checkpoint: router state does not match layer count");
    for (std::size_t l = 0; l < model.layers().size(); ++l) {
        auto& r = model.layers()[l].router;
        r.b = arr[l].at("b").get<std::vector<double>>();
        r.mu = arr[l].at("mu").get<double>();
        if (r.b.size() != r.n_experts()) throw IoError("checkpoint: router bias size mismatch");
    }
}

template <typename S>
void save_model_checkpoint(const std::string& path, const Model<S>& model, const RunConfig& cfg,
                           const TrainState& ts) {
    nlohmann::json meta;
    meta["config"] = to_json(cfg);
    meta["train_state"] = ts.to_json();
    meta["router"] = router_meta(model);
    save_checkpoint(path, model.params(), meta);
}

template <typename S>
struct LoadedModel {
    Model<S> model;
    RunConfig config;
    TrainState train_state;
};

template <typename S>
LoadedModel<S> load_model_checkpoint(const std::string& path) {
    nlohmann::json header = read_checkpoint_header(path);
    const nlohmann::json& meta = header.at("meta");
    RunConfig cfg = config_from_json(meta.at("config"));
    Model<S> model(cfg.model, cfg.seed);
    load_checkpoint(path, model.params());
    restore_router_meta(model, meta.at("router"));
    TrainState ts = TrainState::from_json(meta.value("train_state", nlohmann::json::object()));
    return LoadedModel<S>{std::move(model), std::move(cfg), ts};
}

struct TrainResult {
    std::vector<StabilityMetrics> metrics;
    bool aborted = false;
    std::string abort_reason;
    std::string metrics_path;
    std::string checkpoint_path;
    TrainState state;
    double eval_loss = std::nan("");  // held-out LM loss on shared fixed batches

    // Mean training LM loss over the final tenth of the run.
    double final_train_loss() const {
        if (metrics.empty()) return std::nan("");
        const std::size_t tail = std::max<std::size_t>(1, metrics.size() / 10);
        double acc = 0.0;
        for (std::size_t i = metrics.size() - tail; i < metrics.size(); ++i)
            acc += metrics[i].lm_loss;
        return acc / static_cast<double>(tail);
    }

    // Arm-comparison statistic: held-out loss when available (every arm sees
    // the same validation batches), training tail otherwise.
    double final_loss() const { return std::isnan(eval_loss) ? final_train_loss() : eval_loss; }

    double max_hidden_norm() const {
        double mx = 0.0;
        for (const auto& m : metrics) mx = std::max(mx, m.hidden_norm);
        return mx;
    }
};

// Mean LM loss over fixed validation batches. The batch seeds are independent
// of the run seed, so different arms and seeds score on identical data.
template <typename S>
double evaluate_lm(Model<S>& model, const Corpus& corpus, std::size_t batches,
                   std::size_t batch_size, std::size_t seq_len) {
    CounterRng eval_rng(0x9e3779b97f4a7c15ULL);
    double acc = 0.0;
    for (std::size_t i = 0; i < batches; ++i) {
        Batch b = sample_batch(corpus, batch_size, seq_len, eval_rng.stream(i), false);
        ForwardResult<S> fr = model.forward(b);
        acc += fr.value_of(fr.lm_loss);
    }
    return acc / static_cast<double>(batches);
}

// One optimization step on an already-built model. Returns the metrics record;
// the caller owns cadence decisions (bias updates, checkpoints).
template <typename S>
StabilityMetrics train_step(Model<S>& model, AdamState<S>& opt, const RunConfig& cfg,
                            const Batch& batch, std::uint64_t step, bool compute_rg) {
    StabilityMetrics m;
    m.step = step;
    ForwardResult<S> fr = model.forward(batch);
    m.lm_loss = fr.value_of(fr.lm_loss);
    m.lb_loss = fr.value_of(fr.lb_loss);
    m.z_loss = fr.value_of(fr.z_loss);
    m.mtp_loss = fr.value_of(fr.mtp_loss);
    m.total_loss = fr.value_of(fr.total_loss);
    if (!std::isfinite(m.total_loss)) {
        m.nan_flag = true;
        return m;
    }

    const Tensor<S>& hidden = fr.graph.val(fr.hidden_pre_norm);
    m.hidden_norm = max_row_l2(hidden);
    m.max_abs_act = max_abs(hidden);

    double mean_acc = 0.0, std_acc = 0.0;
    for (const auto& d : fr.decisions) {
        mean_acc += d.mean_ffn();
        std_acc += d.std_ffn();
    }
    m.mean_ffn_activated = mean_acc / static_cast<double>(fr.decisions.size());
    m.std_ffn_activated = std_acc / static_cast<double>(fr.decisions.size());

    double sim_acc = 0.0;
    for (const auto& layer : model.layers())
        sim_acc += router_similarity(layer.router_w->value).mean_cosine;
    m.router_sim = sim_acc / static_cast<double>(model.layers().size());

    if (compute_rg) {
        // Pass 1: LM loss alone, to isolate its pull on the routing probabilities.
        fr.graph.backward(fr.lm_loss);
        model.export_grads(fr);
        double rg_acc = 0.0;
        for (std::size_t l = 0; l < model.layers().size(); ++l) {
            const Tensor<S>& gp = fr.graph.grad(fr.layer_probs[l]);
            std::vector<double> v_lm(gp.cols(), 0.0);
            for (std::size_t t = 0; t < gp.rows(); ++t)
                for (std::size_t e = 0; e < gp.cols(); ++e)
                    v_lm[e] += static_cast<double>(gp.at(t, e));
            const std::vector<double> f = lb_group_frequencies(
                fr.decisions[l], LbLossConfig{1.0, cfg.model.lb_groups}, cfg.model.n_ffn_experts,
                cfg.model.n_zero_experts, cfg.model.k_expected);
            const std::size_t gsz = cfg.model.n_ffn_experts / cfg.model.lb_groups;
            std::vector<double> v_lb(gp.cols(), 0.0);
            for (std::size_t e = 0; e < gp.cols(); ++e) {
                const std::size_t j = e < cfg.model.n_ffn_experts ? e / gsz : cfg.model.lb_groups;
                v_lb[e] = j < f.size() ? f[j] : 0.0;
            }
            rg_acc += grad_norm_ratio(v_lm, v_lb, cfg.model.lb_alpha).value;
        }
        m.r_g = rg_acc / static_cast<double>(model.layers().size());
        fr.graph.zero_grads();
        fr.graph.backward(fr.aux_loss);
        model.export_grads(fr);
    } else {
        fr.graph.backward(fr.total_loss);
        model.export_grads(fr);
    }

    fill_grad_rms_range(model.params(), cfg.adam.eps, m);

    const double lr_scale =
        cfg.warmup > 0 ? std::min(1.0, static_cast<double>(step + 1) / static_cast<double>(cfg.warmup))
                       : 1.0;
    const AdamStepResult ar = adam_step(model.params(), opt, cfg.adam, lr_scale);
    if (!ar.applied) m.nan_flag = true;  // step skipped, run continues
    model.params().zero_grads();

    model.accumulate_routing(fr);
    return m;
}

// Full training run. When out_dir is set, writes metrics.jsonl (deterministic
// content), a final checkpoint, and a summary.json carrying wall-clock info.
template <typename S>
TrainResult train_run(const RunConfig& cfg, Model<S>& model, const Corpus& corpus,
                      TrainState ts = {}) {
    cfg.validate();
    AdamState<S> opt(model.params());
    TrainResult res;
    res.state = ts;
    const bool to_files = !cfg.out_dir.empty();
    std::ofstream metrics_file;
    if (to_files) {
        std::filesystem::create_directories(cfg.out_dir);
        res.metrics_path = cfg.out_dir + "/metrics.jsonl";
        metrics_file.open(res.metrics_path);
        if (!metrics_file) throw IoError("cannot write metrics: " + res.metrics_path);
    }
    CounterRng run_rng(cfg.seed);
    const auto t0 = std::chrono::steady_clock::now();
    for (std::uint64_t step = 0; step < cfg.steps; ++step) {
        const CounterRng batch_rng = run_rng.stream(res.state.step + step);
        Batch batch = sample_batch(corpus, cfg.batch_size, cfg.seq_len, batch_rng, true);
        const bool rg = cfg.rg_every > 0 && step % cfg.rg_every == 0;
        StabilityMetrics m = train_step(model, opt, cfg, batch, res.state.step + step, rg);
        if (!rg && !res.metrics.empty()) m.r_g = res.metrics.back().r_g;  // carry last value
        if (!std::isfinite(m.total_loss)) {
            res.aborted = true;
            res.abort_reason = "non-finite loss at step " + std::to_string(m.step);
            if (to_files) {
                res.checkpoint_path = cfg.out_dir + "/last_good.ckpt";
                save_model_checkpoint(res.checkpoint_path, model, cfg, res.state);
            }
            break;
        }
        res.metrics.push_back(m);
        if (to_files) metrics_file << metrics_to_json(m).dump() << "\n";
        res.state.samples_seen += cfg.batch_size;
        if ((step + 1) % cfg.bias_update_every == 0) model.update_biases();
        if (to_files && cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0) {
            TrainState snap = res.state;
            snap.step = res.state.step + step + 1;
            save_model_checkpoint(cfg.out_dir + "/step_" + std::to_string(snap.step) + ".ckpt",
                                  model, cfg, snap);
        }
    }
    if (!res.aborted) {
        res.state.step += cfg.steps;
        res.eval_loss = evaluate_lm(model, corpus, 8, cfg.batch_size, cfg.seq_len);
    }
    const auto t1 = std::chrono::steady_clock::now();
    if (to_files) {
        metrics_file.close();
        if (!res.aborted) {
            res.checkpoint_path = cfg.out_dir + "/final.ckpt";
            save_model_checkpoint(res.checkpoint_path, model, cfg, res.state);
        }
        // Wall-clock lives outside metrics.jsonl so identical seeds hash equal.
        nlohmann::json summary{
            {"steps_run", res.metrics.size()},
            {"aborted", res.aborted},
            {"abort_reason", res.abort_reason},
            {"final_train_loss", res.final_train_loss()},
            {"eval_loss", res.eval_loss},
            {"wall_clock_s", std::chrono::duration<double>(t1 - t0).count()}};
        std::ofstream(cfg.out_dir + "/summary.json") << summary.dump(2) << "\n";
    }
    return res;
}

// Convenience: fresh model + named corpus file (or synthetic fallback).
template <typename S>
TrainResult train_run(const RunConfig& cfg) {
    Model<S> model(cfg.model, cfg.seed);
    Corpus corpus = cfg.corpus_path.empty() ? synthetic_corpus(1 << 20, 9001)
                                            : Corpus::load_file(cfg.corpus_path);
    return train_run(cfg, model, corpus);
}

}  // namespace moelab
