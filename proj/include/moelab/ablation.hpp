#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "moelab/config.hpp"
#include "moelab/corpus.hpp"
#include "moelab/scaling.hpp"
#include "moelab/train.hpp"

namespace moelab {

// Runs independent jobs on up to `threads` workers. Each job owns its model
// and RNG streams; results land in caller-indexed slots, so scheduling order
// cannot change any output.
inline void run_jobs(std::vector<std::function<void()>> jobs, std::size_t threads) {
    if (threads <= 1 || jobs.size() <= 1) {
        for (auto& j : jobs) j();
        return;
    }
    // Static partition: worker w owns slots w, w+T, w+2T, ... so scheduling
    // cannot reorder anything observable.
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < std::min(threads, jobs.size()); ++w) {
        pool.emplace_back([&jobs, w, threads] {
            for (std::size_t i = w; i < jobs.size(); i += threads) jobs[i]();
        });
    }
    for (auto& t : pool) t.join();
}

template <typename S>
TrainResult run_arm(RunConfig cfg, std::uint64_t seed, const Corpus& corpus) {
    cfg.seed = seed;
    cfg.out_dir.clear();  // in-memory arms
    Model<S> model(cfg.model, cfg.seed);
    return train_run(cfg, model, corpus);
}

struct AblationOutcome {
    nlohmann::json report;
    bool pass = false;
};

inline nlohmann::json seed_stats(const std::vector<double>& xs) {
    double mean = 0.0;
    for (double x : xs) mean += x;
    mean /= static_cast<double>(xs.size());
    double var = 0.0;
    for (double x : xs) var += (x - mean) * (x - mean);
    const double sigma = xs.size() > 1 ? std::sqrt(var / static_cast<double>(xs.size() - 1)) : 0.0;
    return nlohmann::json{{"per_seed", xs}, {"mean", mean}, {"sigma", sigma}};
}

// Dynamic-allocation arm (zero experts + controller, top K, expectation K_e)
// against a fixed top-K_e dense-routing baseline at matched expected FFN
// compute. Direction: the dynamic arm's final loss is <= the baseline's.
template <typename S>
AblationOutcome ablation_zero_expert(const RunConfig& base, const std::vector<std::uint64_t>& seeds,
                                     const Corpus& corpus, std::size_t threads) {
    if (base.model.n_zero_experts == 0)
        throw ConfigError("zero-expert ablation: base config needs zero experts");
    RunConfig fixed = base;
    fixed.model.n_zero_experts = 0;
    fixed.model.top_k = base.model.k_expected;
    fixed.model.k_expected = base.model.k_expected;

    // Compute matching: the controller must hold mean activated FFN experts at
    // K_e; verified on a stationary closed-loop simulation before training.
    RouterState<S> sim_state(
        seeded_init<S>({base.model.d_model, base.model.n_ffn_experts + base.model.n_zero_experts},
                       InitDistribution::TruncatedNormal, 1.0 / base.model.d_model,
                       CounterRng(seeds.empty() ? 1 : seeds[0])),
        base.model.n_ffn_experts, base.model.n_zero_experts, base.model.top_k,
        base.model.k_expected, base.model.mu, base.model.mu_decay);
    BiasControlTrace trace =
        simulate_bias_control(sim_state, base.model.d_model, 2048, 300, CounterRng(42));
    double tail_mean = 0.0;
    const std::size_t tail = 100;
    for (std::size_t i = trace.mean_ffn.size() - tail; i < trace.mean_ffn.size(); ++i)
        tail_mean += trace.mean_ffn[i];
    tail_mean /= tail;
    const double compute_gap =
        std::abs(tail_mean - static_cast<double>(base.model.k_expected)) /
        static_cast<double>(base.model.k_expected);

    std::vector<double> dyn(seeds.size()), fix(seeds.size());
    std::vector<std::function<void()>> jobs;
    for (std::size_t i = 0; i < seeds.size(); ++i) {
        jobs.push_back([&, i] { dyn[i] = run_arm<S>(base, seeds[i], corpus).final_loss(); });
        jobs.push_back([&, i] { fix[i] = run_arm<S>(fixed, seeds[i], corpus).final_loss(); });
    }
    run_jobs(std::move(jobs), threads);

    std::size_t holds = 0;
    for (std::size_t i = 0; i < seeds.size(); ++i) holds += dyn[i] <= fix[i];
    AblationOutcome out;
    out.pass = compute_gap <= 0.01 && holds * 3 >= seeds.size() * 2;
    out.report = {{"experiment", "zero-expert-vs-fixed-topk"},
                  {"direction", "dynamic-allocation final loss <= fixed top-k final loss"},
                  {"tolerance", "holds in >= 2/3 seeds; controller mean within 1% of K_e"},
                  {"controller_mean_ffn", tail_mean},
                  {"controller_gap", compute_gap},
                  {"seeds", seeds},
                  {"dynamic", seed_stats(dyn)},
                  {"fixed_topk", seed_stats(fix)},
                  {"holds_in_seeds", holds},
                  {"pass", out.pass}};
    return out;
}

// Shortcut wiring against the interleaved baseline at identical parameter
// count. Direction: final losses agree within 2%.
template <typename S>
AblationOutcome ablation_scmoe(const RunConfig& base, const std::vector<std::uint64_t>& seeds,
                               const Corpus& corpus, std::size_t threads) {
    RunConfig shortcut = base;
    shortcut.model.scmoe = true;
    RunConfig interleaved = base;
    interleaved.model.scmoe = false;

    std::vector<double> sc(seeds.size()), il(seeds.size());
    std::vector<std::function<void()>> jobs;
    for (std::size_t i = 0; i < seeds.size(); ++i) {
        jobs.push_back([&, i] { sc[i] = run_arm<S>(shortcut, seeds[i], corpus).final_loss(); });
        jobs.push_back([&, i] { il[i] = run_arm<S>(interleaved, seeds[i], corpus).final_loss(); });
    }
    run_jobs(std::move(jobs), threads);

    std::size_t holds = 0;
    std::vector<double> gaps(seeds.size());
    for (std::size_t i = 0; i < seeds.size(); ++i) {
        gaps[i] = std::abs(sc[i] - il[i]) / il[i];
        holds += gaps[i] < 0.02;
    }
    AblationOutcome out;
    out.pass = holds * 3 >= seeds.size() * 2;
    out.report = {{"experiment", "scmoe-vs-interleaved"},
                  {"direction", "wiring is loss-neutral"},
                  {"tolerance", "|final loss gap| < 2% of baseline in >= 2/3 seeds"},
                  {"seeds", seeds},
                  {"scmoe", seed_stats(sc)},
                  {"interleaved", seed_stats(il)},
                  {"relative_gaps", gaps},
                  {"holds_in_seeds", holds},
                  {"pass", out.pass}};
    return out;
}

// Hidden z-loss on a deliberately spiky config. Direction: the z-loss arm has
// a strictly lower max hidden norm at <2% LM-loss cost.
template <typename S>
AblationOutcome ablation_zloss(const RunConfig& base, const std::vector<std::uint64_t>& seeds,
                               const Corpus& corpus, std::size_t threads) {
    if (base.model.z_lambda <= 0.0)
        throw ConfigError("z-loss ablation: base config needs z_lambda > 0");
    RunConfig off = base;
    off.model.z_lambda = 0.0;

    std::vector<double> on_loss(seeds.size()), off_loss(seeds.size());
    std::vector<double> on_norm(seeds.size()), off_norm(seeds.size());
    std::vector<std::function<void()>> jobs;
    for (std::size_t i = 0; i < seeds.size(); ++i) {
        jobs.push_back([&, i] {
            TrainResult r = run_arm<S>(base, seeds[i], corpus);
            on_loss[i] = r.final_loss();
            on_norm[i] = r.max_hidden_norm();
        });
        jobs.push_back([&, i] {
            TrainResult r = run_arm<S>(off, seeds[i], corpus);
            off_loss[i] = r.final_loss();
            off_norm[i] = r.max_hidden_norm();
        });
    }
    run_jobs(std::move(jobs), threads);

    std::size_t holds = 0;
    for (std::size_t i = 0; i < seeds.size(); ++i) {
        const bool norm_down = on_norm[i] < off_norm[i];
        // One-sided: the regularizer must not cost more than 2% LM loss;
        // rescuing a destabilized run outright also counts.
        const bool loss_ok = on_loss[i] <= off_loss[i] * 1.02;
        holds += norm_down && loss_ok;
    }
    AblationOutcome out;
    out.pass = holds * 3 >= seeds.size() * 2;
    out.report = {{"experiment", "zloss-on-off"},
                  {"direction", "z-loss strictly lowers max hidden norm at <=2% LM-loss cost"},
                  {"tolerance", "holds in >= 2/3 seeds"},
                  {"seeds", seeds},
                  {"zloss_on_final", seed_stats(on_loss)},
                  {"zloss_off_final", seed_stats(off_loss)},
                  {"zloss_on_max_norm", seed_stats(on_norm)},
                  {"zloss_off_max_norm", seed_stats(off_norm)},
                  {"holds_in_seeds", holds},
                  {"pass", out.pass}};
    return out;
}

inline std::vector<double> smoothed_lm(const std::vector<StabilityMetrics>& ms, std::size_t w) {
    std::vector<double> out(ms.size());
    double acc = 0.0;
    for (std::size_t i = 0; i < ms.size(); ++i) {
        acc += ms[i].lm_loss;
        if (i >= w) acc -= ms[i - w].lm_loss;
        out[i] = acc / static_cast<double>(std::min(i + 1, w));
    }
    return out;
}

struct GrowthCurves {
    std::vector<StabilityMetrics> grown;
    std::vector<StabilityMetrics> random_init;
    double half_final_loss = 0.0;
    double grown_step0_loss = 0.0;
    double grown_eval = 0.0;
    double random_eval = 0.0;
    bool initial_rise = false;
    long crossover_step = -1;  // first step where smoothed grown < smoothed random
};

// Trains the half-depth model, grows it by stacking, then races the grown
// model against a random init at matched budget and schedule.
template <typename S>
GrowthCurves growth_experiment(const RunConfig& target_cfg, std::size_t warm_steps,
                               std::uint64_t seed, const Corpus& corpus) {
    if (target_cfg.model.n_layers % 2 != 0)
        throw ConfigError("growth_experiment: target depth must be even");
    RunConfig half_cfg = target_cfg;
    half_cfg.model.n_layers = target_cfg.model.n_layers / 2;
    half_cfg.steps = warm_steps;
    half_cfg.seed = seed;
    half_cfg.out_dir.clear();

    GrowthCurves gc;
    Model<S> half(half_cfg.model, seed);
    TrainResult half_res = train_run(half_cfg, half, corpus);
    gc.half_final_loss = half_res.final_loss();

    Model<S> grown = stack_grow(half, GrowthPlan{2, true, true});
    RunConfig grown_cfg = target_cfg;
    grown_cfg.seed = seed;
    grown_cfg.out_dir.clear();
    TrainResult grown_res = train_run(grown_cfg, grown, corpus, half_res.state);
    gc.grown = std::move(grown_res.metrics);
    gc.grown_eval = grown_res.eval_loss;

    RunConfig rand_cfg = target_cfg;
    rand_cfg.seed = seed;
    rand_cfg.out_dir.clear();
    Model<S> fresh(rand_cfg.model, seed + 101);
    TrainResult rand_res = train_run(rand_cfg, fresh, corpus);
    gc.random_init = std::move(rand_res.metrics);
    gc.random_eval = rand_res.eval_loss;

    if (!gc.grown.empty()) {
        gc.grown_step0_loss = gc.grown.front().lm_loss;
        double early_max = gc.grown_step0_loss;
        const std::size_t probe = std::min<std::size_t>(gc.grown.size(), 25);
        for (std::size_t i = 1; i < probe; ++i) early_max = std::max(early_max, gc.grown[i].lm_loss);
        gc.initial_rise = early_max > gc.grown_step0_loss;
    }
    const std::size_t w = 10;
    const std::vector<double> sg = smoothed_lm(gc.grown, w);
    const std::vector<double> sr = smoothed_lm(gc.random_init, w);
    for (std::size_t i = 0; i < std::min(sg.size(), sr.size()); ++i) {
        if (sg[i] < sr[i]) {
            gc.crossover_step = static_cast<long>(i);
            break;
        }
    }
    return gc;
}

template <typename S>
AblationOutcome ablation_growth(const RunConfig& base, std::size_t warm_steps,
                                const std::vector<std::uint64_t>& seeds, const Corpus& corpus,
                                std::size_t threads) {
    std::vector<GrowthCurves> curves(seeds.size());
    std::vector<std::function<void()>> jobs;
    for (std::size_t i = 0; i < seeds.size(); ++i)
        jobs.push_back([&, i] { curves[i] = growth_experiment<S>(base, warm_steps, seeds[i], corpus); });
    run_jobs(std::move(jobs), threads);

    std::size_t holds = 0;
    std::vector<double> grown_final(seeds.size()), rand_final(seeds.size());
    nlohmann::json detail = nlohmann::json::array();
    for (std::size_t i = 0; i < seeds.size(); ++i) {
        const GrowthCurves& gc = curves[i];
        grown_final[i] = gc.grown_eval;
        rand_final[i] = gc.random_eval;
        const bool crossed = gc.crossover_step >= 0 && grown_final[i] < rand_final[i];
        holds += crossed;
        detail.push_back({{"seed", seeds[i]},
                          {"half_final_loss", gc.half_final_loss},
                          {"grown_step0_loss", gc.grown_step0_loss},
                          {"initial_rise", gc.initial_rise},
                          {"crossover_step", gc.crossover_step},
                          {"grown_final", grown_final[i]},
                          {"random_final", rand_final[i]}});
    }
    AblationOutcome out;
    out.pass = holds * 3 >= seeds.size() * 2;
    out.report = {{"experiment", "growth-vs-random"},
                  {"direction", "grown init crosses below random init within the budget"},
                  {"tolerance", "crossover and lower final loss in >= 2/3 seeds"},
                  {"seeds", seeds},
                  {"grown", seed_stats(grown_final)},
                  {"random", seed_stats(rand_final)},
                  {"per_seed", detail},
                  {"holds_in_seeds", holds},
                  {"pass", out.pass}};
    return out;
}

// Optimizer-epsilon sweep: two epsilons far below the gradient RMS floor must
// land within 1% of each other; a huge epsilon shows the degraded regime.
template <typename S>
AblationOutcome ablation_eps_sweep(const RunConfig& base, const std::vector<std::uint64_t>& seeds,
                                   const Corpus& corpus, std::size_t threads) {
    RunConfig tiny = base;
    tiny.adam.eps = 1e-16;
    RunConfig small = base;
    small.adam.eps = 1e-12;
    RunConfig huge = base;
    huge.adam.eps = 1e6;

    std::vector<double> l16(seeds.size()), l12(seeds.size()), lbig(seeds.size());
    std::vector<std::function<void()>> jobs;
    for (std::size_t i = 0; i < seeds.size(); ++i) {
        jobs.push_back([&, i] { l16[i] = run_arm<S>(tiny, seeds[i], corpus).final_loss(); });
        jobs.push_back([&, i] { l12[i] = run_arm<S>(small, seeds[i], corpus).final_loss(); });
        jobs.push_back([&, i] { lbig[i] = run_arm<S>(huge, seeds[i], corpus).final_loss(); });
    }
    run_jobs(std::move(jobs), threads);

    std::size_t holds = 0;
    for (std::size_t i = 0; i < seeds.size(); ++i)
        holds += std::abs(l16[i] - l12[i]) / l12[i] < 0.01 && lbig[i] > l16[i];
    AblationOutcome out;
    out.pass = holds * 3 >= seeds.size() * 2;
    out.report = {{"experiment", "eps-sweep"},
                  {"direction", "eps far below grad RMS is loss-neutral; huge eps degrades"},
                  {"tolerance", "1e-16 vs 1e-12 within 1%, 1e6 strictly worse, >= 2/3 seeds"},
                  {"seeds", seeds},
                  {"eps_1e16", seed_stats(l16)},
                  {"eps_1e12", seed_stats(l12)},
                  {"eps_1e6", seed_stats(lbig)},
                  {"holds_in_seeds", holds},
                  {"pass", out.pass}};
    return out;
}

template <typename S>
AblationOutcome run_ablation(const std::string& name, const RunConfig& base,
                             const std::vector<std::uint64_t>& seeds, const Corpus& corpus,
                             std::size_t threads, std::size_t growth_warm_steps = 150) {
    if (name == "zero-expert-vs-fixed-topk") return ablation_zero_expert<S>(base, seeds, corpus, threads);
    if (name == "scmoe-vs-interleaved") return ablation_scmoe<S>(base, seeds, corpus, threads);
    if (name == "zloss-on-off") return ablation_zloss<S>(base, seeds, corpus, threads);
    if (name == "growth-vs-random")
        return ablation_growth<S>(base, growth_warm_steps, seeds, corpus, threads);
    if (name == "eps-sweep") return ablation_eps_sweep<S>(base, seeds, corpus, threads);
    throw ConfigError("unknown ablation experiment: " + name);
}

}  // namespace moelab
