#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "moelab/config.hpp"
#include "moelab/corpus.hpp"
#include "moelab/gradcheck.hpp"
#include "moelab/model.hpp"

namespace moelab {

// Small but fully-featured instance (zero experts, balance loss, z-loss,
// auxiliary head all active) for finite-difference validation.
inline ModelSpec grad_suite_spec() {
    ModelSpec s;
    s.d_model = 16;
    s.n_layers = 1;
    s.n_heads = 2;
    s.d_head_c = 8;
    s.d_head_r = 4;
    s.d_q = 8;
    s.d_kv = 4;
    s.dense_inter = 24;
    s.expert_inter = 8;
    s.n_ffn_experts = 4;
    s.n_zero_experts = 2;
    s.top_k = 3;
    s.k_expected = 2;
    s.segmentation_m = 1;
    s.lb_alpha = 0.05;
    s.lb_groups = 2;
    s.z_lambda = 1e-3;
    s.mtp_weight = 0.1;
    s.validate();
    return s;
}

struct GradSuiteCase {
    std::string loss;
    std::uint64_t seed;
    double rel_err = 0.0;
    std::size_t coords = 0;
    std::string worst_param;
};

// Checks every differentiable loss against central finite differences on a
// seeded instance; rel err < 1e-4 at h = 1e-4 in 64-bit is the contract.
inline std::vector<GradSuiteCase> run_grad_suite(const std::vector<std::uint64_t>& seeds,
                                                 double step = 1e-4) {
    std::vector<GradSuiteCase> cases;
    for (std::uint64_t seed : seeds) {
        Model<double> model(grad_suite_spec(), seed);
        Corpus corpus = synthetic_corpus(4096, seed + 7);
        Batch batch = sample_batch(corpus, 2, 8, CounterRng(seed + 13));

        std::vector<Parameter<double>*> params;
        for (std::size_t i = 0; i < model.params().size(); ++i) params.push_back(&model.params()[i]);

        struct LossPick {
            const char* name;
            ForwardResult<double>::VarId ForwardResult<double>::*node;
        };
        const LossPick picks[] = {{"lm_loss", &ForwardResult<double>::lm_loss},
                                  {"lb_loss", &ForwardResult<double>::lb_loss},
                                  {"z_loss", &ForwardResult<double>::z_loss},
                                  {"mtp_loss", &ForwardResult<double>::mtp_loss}};
        for (const auto& pick : picks) {
            auto eval = [&]() {
                ForwardResult<double> fr = model.forward(batch);
                return fr.value_of(fr.*(pick.node));
            };
            auto compute = [&]() {
                model.params().zero_grads();
                ForwardResult<double> fr = model.forward(batch);
                fr.graph.backward(fr.*(pick.node));
                model.export_grads(fr);
            };
            GradCheckOptions opt;
            opt.step = step;
            opt.max_coords = 6;
            opt.sample_seed = seed * 31 + 5;
            GradCheckResult r = grad_check<double>(params, eval, compute, opt);
            cases.push_back({pick.name, seed, r.max_rel_err, r.coords_checked, r.worst_param});
        }
    }
    return cases;
}

}  // namespace moelab
