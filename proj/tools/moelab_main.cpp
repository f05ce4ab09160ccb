// Command-line front end: training, ablations, growth, hyperparameter
// transfer, routing statistics, and the inference analytics calculators.

#include <cstdint>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "moelab/ablation.hpp"
#include "moelab/analytics.hpp"
#include "moelab/checkpoint.hpp"
#include "moelab/config.hpp"
#include "moelab/corpus.hpp"
#include "moelab/gradsuite.hpp"
#include "moelab/model.hpp"
#include "moelab/scaling.hpp"
#include "moelab/stats.hpp"
#include "moelab/train.hpp"

namespace {

using nlohmann::json;

void print_error(const std::string& type, const std::string& msg) {
    std::cerr << json{{"error", {{"type", type}, {"message", msg}}}}.dump() << "\n";
}

moelab::Corpus load_or_synth_corpus(const std::string& path) {
    if (path.empty()) return moelab::synthetic_corpus(1 << 20, 9001);
    return moelab::Corpus::load_file(path);
}

std::string checkpoint_dtype(const std::string& path) {
    return moelab::read_checkpoint_header(path).at("dtype").get<std::string>();
}

template <typename S>
int do_grow(const std::string& in, const std::string& out, std::size_t rate, bool reset_bias) {
    moelab::LoadedModel<S> src = moelab::load_model_checkpoint<S>(in);
    moelab::GrowthPlan plan;
    plan.expansion_rate = rate;
    plan.duplicate_router_bias = !reset_bias;
    moelab::Model<S> grown = moelab::stack_grow(src.model, plan);
    moelab::RunConfig grown_cfg = src.config;
    grown_cfg.model.n_layers = grown.spec().n_layers;
    moelab::save_model_checkpoint(out, grown, grown_cfg, src.train_state);
    std::cout << json{{"layers", grown.spec().n_layers},
                      {"params", grown.params().total_elements()},
                      {"out", out}}
                     .dump(2)
              << "\n";
    return 0;
}

template <typename S>
int do_route_stats(const std::string& ckpt, const std::vector<std::string>& corpora_spec,
                   std::uint64_t seed, std::size_t seq_len, std::size_t max_tokens,
                   const std::string& out_path) {
    moelab::LoadedModel<S> lm = moelab::load_model_checkpoint<S>(ckpt);
    std::vector<std::pair<std::string, std::vector<int>>> corpora;
    for (const std::string& spec : corpora_spec) {
        const auto eq = spec.find('=');
        if (eq == std::string::npos)
            throw moelab::ParameterError("route-stats: --corpus expects name=path");
        const std::string name = spec.substr(0, eq);
        moelab::Corpus c = moelab::Corpus::load_file(spec.substr(eq + 1));
        const std::size_t want = std::min<std::size_t>(max_tokens, c.size() - 1);
        const std::size_t span = c.size() - want;
        const std::size_t off = moelab::CounterRng(seed).at(0) % span;
        std::vector<int> toks(want);
        for (std::size_t i = 0; i < want; ++i) toks[i] = c.bytes[off + i];
        corpora.emplace_back(name, std::move(toks));
    }
    json rep = moelab::routing_stats_report(lm.model, corpora, seq_len);
    if (!out_path.empty()) std::ofstream(out_path) << rep.dump(2) << "\n";
    std::cout << rep.dump(2) << "\n";
    return 0;
}

template <typename S>
int do_train(moelab::RunConfig cfg) {
    moelab::Model<S> model(cfg.model, cfg.seed);
    moelab::Corpus corpus = load_or_synth_corpus(cfg.corpus_path);
    moelab::TrainResult res = moelab::train_run(cfg, model, corpus);
    json out{{"steps_run", res.metrics.size()},
             {"aborted", res.aborted},
             {"final_loss", res.final_loss()},
             {"metrics", res.metrics_path},
             {"checkpoint", res.checkpoint_path}};
    if (res.aborted) out["abort_reason"] = res.abort_reason;
    std::cout << out.dump(2) << "\n";
    return res.aborted ? 1 : 0;
}

template <typename S>
int do_ablate(const std::string& experiment, moelab::RunConfig cfg, std::uint64_t seed,
              std::size_t n_seeds, std::size_t threads, std::size_t warm_steps,
              const std::string& out_dir) {
    std::vector<std::uint64_t> seeds;
    for (std::size_t i = 0; i < n_seeds; ++i) seeds.push_back(seed + i);
    moelab::Corpus corpus = load_or_synth_corpus(cfg.corpus_path);
    moelab::AblationOutcome out =
        moelab::run_ablation<S>(experiment, cfg, seeds, corpus, threads, warm_steps);
    if (!out_dir.empty()) {
        std::filesystem::create_directories(out_dir);
        std::ofstream(out_dir + "/report.json") << out.report.dump(2) << "\n";
    }
    std::cout << out.report.dump(2) << "\n";
    return out.pass ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"desk-scale MoE training and inference-analytics laboratory"};
    app.require_subcommand(1);

    // --- train ---
    auto* train = app.add_subcommand("train", "train a model from a config file");
    std::string train_config, train_out, train_corpus;
    std::uint64_t train_seed = 0;
    train->add_option("--config", train_config, "run config JSON")->required();
    train->add_option("--seed", train_seed, "run seed")->required();
    train->add_option("--out", train_out, "output directory (overrides config)");
    train->add_option("--corpus", train_corpus, "corpus file (overrides config)");

    // --- ablate ---
    auto* ablate = app.add_subcommand("ablate", "run a two-arm comparison experiment");
    std::string ab_experiment, ab_config, ab_out, ab_corpus;
    std::uint64_t ab_seed = 0;
    std::size_t ab_nseeds = 3, ab_threads = 2, ab_warm = 150;
    ablate->add_option("--experiment", ab_experiment,
                       "one of zero-expert-vs-fixed-topk, scmoe-vs-interleaved, zloss-on-off, "
                       "growth-vs-random, eps-sweep")
        ->required();
    ablate->add_option("--config", ab_config, "base run config JSON")->required();
    ablate->add_option("--seed", ab_seed, "first seed; seeds are seed..seed+n-1")->required();
    ablate->add_option("--seeds", ab_nseeds, "number of seeds (default 3)");
    ablate->add_option("--threads", ab_threads, "worker threads for arms");
    ablate->add_option("--warm-steps", ab_warm, "half-model steps for growth-vs-random");
    ablate->add_option("--out", ab_out, "directory for report.json");
    ablate->add_option("--corpus", ab_corpus, "corpus file (overrides config)");

    // --- grow ---
    auto* grow = app.add_subcommand("grow", "stack a trained checkpoint r times");
    std::string grow_in, grow_out;
    std::size_t grow_rate = 2;
    bool grow_reset_bias = false;
    grow->add_option("--checkpoint", grow_in, "source checkpoint")->required();
    grow->add_option("--out", grow_out, "grown checkpoint path")->required();
    grow->add_option("--rate", grow_rate, "expansion rate r (default 2)");
    grow->add_flag("--reset-bias", grow_reset_bias, "reset router bias instead of duplicating");

    // --- transfer ---
    auto* transfer = app.add_subcommand("transfer", "apply width-transfer rules to a config");
    std::string tr_config, tr_out;
    double tr_s = 0.0;
    transfer->add_option("--config", tr_config, "proxy run config JSON")->required();
    transfer->add_option("-s,--scale", tr_s, "width scaling factor")->required();
    transfer->add_option("--out", tr_out, "target config path")->required();

    // --- route-stats ---
    auto* rstats = app.add_subcommand("route-stats", "activation statistics per corpus");
    std::string rs_ckpt, rs_out;
    std::vector<std::string> rs_corpora;
    std::uint64_t rs_seed = 0;
    std::size_t rs_seq = 32, rs_tokens = 2048;
    rstats->add_option("--checkpoint", rs_ckpt, "trained checkpoint")->required();
    rstats->add_option("--corpus", rs_corpora, "name=path sample (repeatable)")->required();
    rstats->add_option("--seed", rs_seed, "window sampling seed")->required();
    rstats->add_option("--seq-len", rs_seq, "sequence length");
    rstats->add_option("--max-tokens", rs_tokens, "tokens per corpus sample");
    rstats->add_option("--out", rs_out, "write report JSON here");

    // --- specdec ---
    auto* specdec = app.add_subcommand("specdec", "speculative decoding calculator");
    std::size_t sd_gamma = 1;
    double sd_alpha = 0.8, sd_draft = 0.0141, sd_verify = 1.0;
    std::size_t sd_trials = 1000000;
    std::uint64_t sd_seed = 0;
    specdec->add_option("--gamma", sd_gamma, "draft tokens per step")->required();
    specdec->add_option("--alpha", sd_alpha, "per-token acceptance rate")->required();
    specdec->add_option("--seed", sd_seed, "Monte Carlo seed")->required();
    specdec->add_option("--draft-ratio", sd_draft, "T_D / T_T");
    specdec->add_option("--verify-ratio", sd_verify, "T_V / T_T");
    specdec->add_option("--trials", sd_trials, "Monte Carlo trials");

    // --- kv-sim ---
    auto* kvsim = app.add_subcommand("kv-sim", "KV pre-allocation bound checker");
    std::size_t kv_n = 4, kv_mtp = 1, kv_iters = 100000;
    std::uint64_t kv_seed = 0;
    kvsim->add_option("--n", kv_n, "scheduler steps per iteration")->required();
    kvsim->add_option("--iters", kv_iters, "iterations per sampler");
    kvsim->add_option("--mtp", kv_mtp, "draft depth");
    kvsim->add_option("--seed", kv_seed, "random sampler seed")->required();

    // --- tpot ---
    auto* tpot = app.add_subcommand("tpot", "theoretical time-per-output-token");
    std::string tp_model;
    tpot->add_option("--model", tp_model, "cost model JSON")->required();

    // --- grad-check ---
    auto* gcheck = app.add_subcommand("grad-check", "finite-difference gradient suite");
    std::uint64_t gc_seed = 0;
    double gc_step = 1e-4, gc_tol = 1e-4;
    std::size_t gc_nseeds = 3;
    gcheck->add_option("--seed", gc_seed, "first seed")->required();
    gcheck->add_option("--seeds", gc_nseeds, "number of seeded instances");
    gcheck->add_option("--step", gc_step, "central-difference half step");
    gcheck->add_option("--tol", gc_tol, "max relative error accepted");

    // --- make-corpus ---
    auto* mkcorp = app.add_subcommand("make-corpus", "write a synthetic sample corpus");
    std::string mc_out;
    std::size_t mc_size = 1200000;
    std::uint64_t mc_seed = 0;
    mkcorp->add_option("--out", mc_out, "output path")->required();
    mkcorp->add_option("--size", mc_size, "minimum size in bytes");
    mkcorp->add_option("--seed", mc_seed, "generator seed")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e);  // --help
        print_error("usage", e.what());
        return 2;
    }

    try {
        if (*train) {
            moelab::RunConfig cfg = moelab::load_config(train_config);
            cfg.seed = train_seed;
            if (!train_out.empty()) cfg.out_dir = train_out;
            if (!train_corpus.empty()) cfg.corpus_path = train_corpus;
            return cfg.dtype == "f32" ? do_train<float>(cfg) : do_train<double>(cfg);
        }
        if (*ablate) {
            moelab::RunConfig cfg = moelab::load_config(ab_config);
            if (!ab_corpus.empty()) cfg.corpus_path = ab_corpus;
            return cfg.dtype == "f32"
                       ? do_ablate<float>(ab_experiment, cfg, ab_seed, ab_nseeds, ab_threads,
                                          ab_warm, ab_out)
                       : do_ablate<double>(ab_experiment, cfg, ab_seed, ab_nseeds, ab_threads,
                                           ab_warm, ab_out);
        }
        if (*grow) {
            return checkpoint_dtype(grow_in) == "f32"
                       ? do_grow<float>(grow_in, grow_out, grow_rate, grow_reset_bias)
                       : do_grow<double>(grow_in, grow_out, grow_rate, grow_reset_bias);
        }
        if (*transfer) {
            moelab::RunConfig proxy = moelab::load_config(tr_config);
            moelab::RunConfig target = moelab::transfer_run_config(proxy, tr_s);
            target.validate();
            moelab::save_config(target, tr_out);
            std::cout << json{{"s", tr_s},
                              {"d_model", target.model.d_model},
                              {"lr_hidden", target.adam.lr_hidden},
                              {"init_var_hidden", target.model.init_var_hidden},
                              {"out", tr_out}}
                             .dump(2)
                      << "\n";
            return 0;
        }
        if (*rstats) {
            return checkpoint_dtype(rs_ckpt) == "f32"
                       ? do_route_stats<float>(rs_ckpt, rs_corpora, rs_seed, rs_seq, rs_tokens,
                                               rs_out)
                       : do_route_stats<double>(rs_ckpt, rs_corpora, rs_seed, rs_seq, rs_tokens,
                                                rs_out);
        }
        if (*specdec) {
            const double omega = moelab::expected_accept_length(sd_gamma, sd_alpha);
            const moelab::MonteCarloOmega mc = moelab::monte_carlo_accept_length(
                sd_gamma, sd_alpha, sd_trials, moelab::CounterRng(sd_seed));
            const double ratio = moelab::specdec_cost_ratio(
                {sd_gamma, sd_alpha, sd_draft, sd_verify});
            const double sigmas =
                mc.std_error > 0 ? std::abs(mc.mean - omega) / mc.std_error : 0.0;
            std::cout << json{{"omega", omega},
                              {"omega_monte_carlo", mc.mean},
                              {"mc_std_error", mc.std_error},
                              {"mc_sigmas_from_closed_form", sigmas},
                              {"cost_ratio", ratio},
                              {"speedup", 1.0 / ratio}}
                             .dump(2)
                      << "\n";
            return 0;
        }
        if (*kvsim) {
            moelab::CounterRng rng(kv_seed);
            std::size_t violations = 0;
            auto run = [&](auto sampler) {
                const moelab::KvSimTrace t =
                    moelab::kv_alloc_simulate(kv_n, kv_mtp, kv_iters, sampler);
                violations += t.violations;
            };
            run([&](std::size_t i, std::size_t s) {
                return 1 + rng.at(i * kv_n + s) % (kv_mtp + 1);
            });
            run([&](std::size_t, std::size_t) { return std::size_t(1); });
            run([&](std::size_t, std::size_t) { return kv_mtp + 1; });
            run([&](std::size_t i, std::size_t) { return i % 2 ? std::size_t(1) : kv_mtp + 1; });
            std::cout << json{{"n", kv_n},
                              {"mtp", kv_mtp},
                              {"iterations_per_sampler", kv_iters},
                              {"samplers", {"random", "all-min", "all-max", "alternating"}},
                              {"bound", {(kv_mtp + 1) * kv_n, (2 * kv_mtp + 1) * kv_n}},
                              {"violations", violations}}
                             .dump(2)
                      << "\n";
            return violations == 0 ? 0 : 1;
        }
        if (*tpot) {
            std::ifstream is(tp_model);
            if (!is) throw moelab::IoError("cannot open cost model: " + tp_model);
            json j = json::parse(is);
            moelab::CostModel cm;
            cm.attention_us = j.at("attention_us").get<double>();
            cm.dispatch_us = j.at("dispatch_us").get<double>();
            cm.moe_us = j.at("moe_us").get<double>();
            cm.combine_us = j.at("combine_us").get<double>();
            cm.n_layer = j.at("n_layer").get<std::size_t>();
            cm.accept_factor = j.at("accept_factor").get<double>();
            cm.strategy = j.at("strategy").get<std::string>();
            cm.batch_per_device = j.value("batch_per_device", 96.0);
            cm.price_per_device_hour = j.value("price_per_device_hour", 2.0);
            const moelab::TpotResult r = moelab::tpot_theoretical(cm);
            std::cout << json{{"strategy", cm.strategy},
                              {"tpl_us", r.tpl_us},
                              {"tpot_ms", r.tpot_ms},
                              {"price_per_1m_tokens", r.price_per_mtok},
                              {"tbo_model_approximate", r.tbo_model_approximate}}
                             .dump(2)
                      << "\n";
            return 0;
        }
        if (*gcheck) {
            std::vector<std::uint64_t> seeds;
            for (std::size_t i = 0; i < gc_nseeds; ++i) seeds.push_back(gc_seed + i);
            const auto cases = moelab::run_grad_suite(seeds, gc_step);
            json arr = json::array();
            bool ok = true;
            for (const auto& c : cases) {
                arr.push_back({{"loss", c.loss},
                               {"seed", c.seed},
                               {"rel_err", c.rel_err},
                               {"coords", c.coords},
                               {"worst_param", c.worst_param}});
                ok = ok && c.rel_err < gc_tol;
            }
            std::cout << json{{"tolerance", gc_tol}, {"pass", ok}, {"cases", arr}}.dump(2) << "\n";
            return ok ? 0 : 1;
        }
        if (*mkcorp) {
            const auto bytes = moelab::synthesize_corpus_bytes(mc_size, mc_seed);
            std::ofstream os(mc_out, std::ios::binary);
            if (!os) throw moelab::IoError("cannot write corpus: " + mc_out);
            os.write(reinterpret_cast<const char*>(bytes.data()),
                     static_cast<std::streamsize>(bytes.size()));
            std::cout << json{{"out", mc_out}, {"bytes", bytes.size()}}.dump(2) << "\n";
            return 0;
        }
    } catch (const moelab::ConfigError& e) {
        print_error("config", e.what());
        return 1;
    } catch (const moelab::ParameterError& e) {
        print_error("parameter", e.what());
        return 1;
    } catch (const moelab::DimensionError& e) {
        print_error("dimension", e.what());
        return 1;
    } catch (const moelab::StateError& e) {
        print_error("state", e.what());
        return 1;
    } catch (const moelab::IoError& e) {
        print_error("io", e.what());
        return 1;
    } catch (const std::exception& e) {
        print_error("internal", e.what());
        return 1;
    }
    return 0;
}
