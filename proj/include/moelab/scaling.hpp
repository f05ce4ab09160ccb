#pragma once

#include <cstdint>
#include <string>

#include "moelab/common.hpp"
#include "moelab/model.hpp"
#include "moelab/param.hpp"

namespace moelab {

// Per-class (init variance, learning rate) pairs subject to width transfer.
struct ClassHparams {
    double init_var = 0.0;
    double lr = 0.0;

    bool operator==(const ClassHparams&) const = default;
};

struct TransferableHparams {
    ClassHparams embedding;
    ClassHparams hidden;
    ClassHparams unembedding;

    bool operator==(const TransferableHparams&) const = default;
};

// Width-transfer rules: embedding rows carry over unchanged; hidden and
// unembedding tensors divide both the init variance and the learning rate by
// the width factor s. Depth, sparsity and batch size are untouched by design.
inline TransferableHparams transfer_hparams(const TransferableHparams& proxy, double s) {
    if (s <= 0.0) throw ParameterError("transfer_hparams: width factor must be positive");
    TransferableHparams t = proxy;
    t.hidden.init_var = proxy.hidden.init_var / s;
    t.hidden.lr = proxy.hidden.lr / s;
    t.unembedding.init_var = proxy.unembedding.init_var / s;
    t.unembedding.lr = proxy.unembedding.lr / s;
    return t;
}

// ---- model growth by layer stacking --------------------------------------------

struct GrowthPlan {
    std::size_t expansion_rate = 2;
    bool duplicate_router_bias = true;   // false: reset controller bias to zero
    bool reset_optimizer_moments = true; // schedule position is always preserved
};

// Builds an (r * n)-layer model whose layer sequence is the source sequence
// repeated r times; embedding, unembedding, final norm and the auxiliary head
// are copied once. Controller state follows the plan.
template <typename S>
Model<S> stack_grow(const Model<S>& src, const GrowthPlan& plan) {
    if (plan.expansion_rate < 1) throw ParameterError("stack_grow: expansion rate must be >= 1");
    const std::size_t n_src = src.spec().n_layers;
    ModelSpec target_spec = src.spec();
    target_spec.n_layers = n_src * plan.expansion_rate;
    Model<S> target(target_spec, src.seed());

    const ParamRegistry<S>& sp = src.params();
    ParamRegistry<S>& tp = target.params();
    for (std::size_t i = 0; i < tp.size(); ++i) {
        Parameter<S>& dst = tp[i];
        std::string src_name = dst.name;
        if (dst.name.rfind("layers.", 0) == 0) {
            const std::size_t dot = dst.name.find('.', 7);
            const std::size_t layer = std::stoul(dst.name.substr(7, dot - 7));
            src_name = "layers." + std::to_string(layer % n_src) + dst.name.substr(dot);
        }
        const Parameter<S>* from = sp.find(src_name);
        if (!from) throw StateError("stack_grow: missing source tensor " + src_name);
        if (from->value.shape != dst.value.shape)
            throw StateError("stack_grow: shape mismatch on " + src_name);
        dst.value = from->value;
    }
    for (std::size_t l = 0; l < target.layers().size(); ++l) {
        const auto& src_router = src.layers()[l % n_src].router;
        auto& dst_router = target.layers()[l].router;
        dst_router.mu = src_router.mu;
        if (plan.duplicate_router_bias) dst_router.b = src_router.b;
    }
    return target;
}

}  // namespace moelab
