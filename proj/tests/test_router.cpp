// Routing with zero-computation experts: biased selection vs unbiased gates,
// the bias controller, the balance loss, and the health monitors.

#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "moelab/gradcheck.hpp"
#include "moelab/graph.hpp"
#include "moelab/rng.hpp"
#include "moelab/router.hpp"

using namespace moelab;

namespace {

RouterState<double> make_state(std::size_t n, std::size_t z, std::size_t k, std::size_t ke,
                               double mu = 0.1, double decay = 1.0) {
    return RouterState<double>(Tensor<double>{}, n, z, k, ke, mu, decay);
}

Tensor<double> probs_row(std::vector<double> p) { return Tensor<double>::row(std::move(p)); }

}  // namespace

TEST_CASE("selection is biased, gates are not") {
    auto st = make_state(2, 1, 2, 1);
    SECTION("unbiased top-2") {
        auto d = route_from_probs(probs_row({0.5, 0.3, 0.2}), st);
        CHECK(d.indices == std::vector<std::uint32_t>{0, 1});
        CHECK(d.gates == std::vector<double>{0.5, 0.3});
        CHECK(d.ffn_count == std::vector<std::uint32_t>{2});
    }
    SECTION("negative bias pushes expert 0 out but gates stay raw softmax") {
        st.b = {-0.4, 0.0, 0.0};
        auto d = route_from_probs(probs_row({0.5, 0.3, 0.2}), st);
        CHECK(d.indices == std::vector<std::uint32_t>{1, 2});
        CHECK(d.gates == std::vector<double>{0.3, 0.2});
        CHECK(d.ffn_count == std::vector<std::uint32_t>{1});
    }
    SECTION("huge bias surrogate forces selection without touching the gate") {
        st.b = {0.0, 1e9, 0.0};
        auto d = route_from_probs(probs_row({0.5, 0.3, 0.2}), st);
        CHECK(d.indices[0] == 1);
        CHECK(d.gates[0] == 0.3);
    }
    SECTION("ties break toward the lowest index") {
        auto d = route_from_probs(probs_row({0.4, 0.4, 0.2}), st);
        CHECK(d.indices == std::vector<std::uint32_t>{0, 1});
    }
}

TEST_CASE("route_topk full path equals softmax + route_from_probs") {
    CounterRng rng(3);
    const std::size_t d_model = 8, n = 3, z = 2;
    RouterState<double> st(seeded_init<double>({d_model, n + z}, InitDistribution::TruncatedNormal,
                                               0.25, rng.stream(0)),
                           n, z, 3, 2, 0.1, 1.0);
    Tensor<double> x({5, d_model});
    for (std::size_t i = 0; i < x.numel(); ++i) x.data[i] = rng.normal_at(100 + i);
    Tensor<double> probs;
    auto d = route_topk(x, st, &probs);
    auto d2 = route_from_probs(probs, st);
    CHECK(d.indices == d2.indices);
    CHECK(d.gates == d2.gates);
    for (std::size_t t = 0; t < 5; ++t) {
        double s = 0.0;
        for (std::size_t e = 0; e < n + z; ++e) s += probs.at(t, e);
        CHECK(s == Catch::Approx(1.0).margin(1e-12));
    }
}

TEST_CASE("adding a constant to every logit leaves routing unchanged") {
    CounterRng rng(11);
    const std::size_t e = 6;
    auto st = make_state(4, 2, 3, 2);
    st.b = {0.05, -0.02, 0.0, 0.01, 0.0, 0.0};
    Tensor<double> logits({7, e});
    for (std::size_t i = 0; i < logits.numel(); ++i) logits.data[i] = rng.normal_at(i);
    auto d1 = route_from_probs(softmax_rows(logits), st);
    for (double& v : logits.data) v += 3.17;
    auto d2 = route_from_probs(softmax_rows(logits), st);
    CHECK(d1.indices == d2.indices);
    for (std::size_t i = 0; i < d1.gates.size(); ++i)
        CHECK(d1.gates[i] == Catch::Approx(d2.gates[i]).margin(1e-12));
}

TEST_CASE("k larger than the expert pool is a configuration error") {
    CHECK_THROWS_AS(make_state(2, 1, 4, 1), ConfigError);
    CHECK_THROWS_AS(make_state(2, 0, 2, 1), ConfigError);  // no zero experts to absorb slack
    CHECK_THROWS_AS(make_state(2, 1, 2, 2), ConfigError);  // k_expected must stay below top_k
}

TEST_CASE("bias update follows the controller rule") {
    SECTION("perfectly balanced load is the fixed point") {
        auto st = make_state(2, 1, 2, 1, 0.1);
        st.tokens_routed = {50, 50, 100};
        st.tokens_seen = 100;
        auto delta = bias_update(st);
        CHECK(delta[0] == 0.0);
        CHECK(delta[1] == 0.0);
        CHECK(delta[2] == 0.0);
    }
    SECTION("hand-computed increment") {
        auto st = make_state(2, 1, 2, 1, 0.1);
        st.tokens_routed = {80, 70, 50};
        st.tokens_seen = 100;
        auto delta = bias_update(st);
        CHECK(delta[0] == Catch::Approx(-0.015).margin(1e-15));
        CHECK(delta[1] == Catch::Approx(-0.010).margin(1e-15));
        CHECK(delta[2] == 0.0);  // zero experts are never biased
        CHECK(st.b[0] == Catch::Approx(-0.015).margin(1e-15));
        CHECK(st.b[2] == 0.0);
        CHECK(st.tokens_seen == 0);  // counters reset
        CHECK(st.tokens_routed[0] == 0);
    }
    SECTION("mu decays multiplicatively") {
        auto st = make_state(2, 1, 2, 1, 0.1, 0.5);
        st.tokens_routed = {50, 50, 100};
        st.tokens_seen = 100;
        bias_update(st);
        CHECK(st.mu == Catch::Approx(0.05));
    }
    SECTION("empty batch is an error") {
        auto st = make_state(2, 1, 2, 1);
        CHECK_THROWS_AS(bias_update(st), StateError);
    }
    SECTION("counters that do not cover K slots per token are rejected") {
        auto st = make_state(2, 1, 2, 1);
        st.tokens_routed = {10, 10, 10};
        st.tokens_seen = 100;
        CHECK_THROWS_AS(bias_update(st), StateError);
    }
}

TEST_CASE("balance loss reproduces the hand-worked example") {
    // T=2, D=1, N=2, Z=1, K=2, K_e=1, uniform probs; each token picks one FFN
    // expert and one zero expert: f1 = f2 = 1, P1 = 2/3, P2 = 1/3, L = alpha.
    Tensor<double> probs({2, 3});
    for (auto& v : probs.data) v = 1.0 / 3.0;
    RoutingDecision d;
    d.top_k = 2;
    d.n_ffn = 2;
    d.indices = {0, 2, 1, 2};
    d.gates = {1 / 3.0, 1 / 3.0, 1 / 3.0, 1 / 3.0};
    d.ffn_count = {1, 1};
    LbLossConfig cfg{0.7, 1};
    CHECK(lb_loss_value(probs, d, cfg, 2, 1, 1) == Catch::Approx(0.7).epsilon(1e-12));

    auto f = lb_group_frequencies(d, cfg, 2, 1, 1);
    CHECK(f[0] == Catch::Approx(1.0));
    CHECK(f[1] == Catch::Approx(1.0));
}

TEST_CASE("balance loss with alpha zero is zero with zero gradient") {
    Graph<double> g;
    auto probs = g.param(softmax_rows(Tensor<double>({4, 6}, std::vector<double>(24, 0.1))));
    RoutingDecision d;
    d.top_k = 2;
    d.n_ffn = 4;
    d.indices = {0, 4, 1, 5, 2, 4, 3, 5};
    d.gates.assign(8, 0.1);
    d.ffn_count = {1, 1, 1, 1};
    auto node = lb_loss_node(g, probs, d, LbLossConfig{0.0, 2}, 4, 2, 1);
    CHECK(g.val(node).data[0] == 0.0);
    CHECK_FALSE(g.needs_grad(node));
}

TEST_CASE("balance loss group count must divide the FFN experts") {
    LbLossConfig cfg{0.1, 3};
    CHECK_THROWS_AS(cfg.validate(8), ConfigError);
}

TEST_CASE("balance loss gradient matches finite differences through the softmax") {
    CounterRng rng(0);
    const std::size_t t_count = 8, n = 4, z = 2;
    Parameter<double> logits("logits", ParamClass::Hidden, Tensor<double>({t_count, n + z}));
    for (std::size_t i = 0; i < logits.value.numel(); ++i) logits.value.data[i] = rng.normal_at(i);

    auto st = make_state(n, z, 3, 2);
    const RoutingDecision frozen = route_from_probs(softmax_rows(logits.value), st);
    const LbLossConfig cfg{0.3, 2};

    auto eval = [&] { return lb_loss_value(softmax_rows(logits.value), frozen, cfg, n, z, 2); };
    auto compute = [&] {
        logits.zero_grad();
        Graph<double> g;
        auto lv = g.param(logits.value);
        auto probs = g.softmax(lv);
        auto loss = lb_loss_node(g, probs, frozen, cfg, n, z, 2);
        g.backward(loss);
        logits.grad = g.grad(lv);
    };
    auto r = grad_check<double>({&logits}, eval, compute);
    CHECK(r.max_rel_err < 1e-4);
}

TEST_CASE("balance loss is permutation-equivariant within a group") {
    CounterRng rng(5);
    const std::size_t t_count = 6, n = 4, z = 2;
    Tensor<double> logits({t_count, n + z});
    for (std::size_t i = 0; i < logits.numel(); ++i) logits.data[i] = rng.normal_at(i);
    Tensor<double> probs = softmax_rows(logits);
    auto st = make_state(n, z, 3, 2);
    auto d = route_from_probs(probs, st);
    const LbLossConfig cfg{0.4, 2};  // groups {0,1} and {2,3}
    const double base = lb_loss_value(probs, d, cfg, n, z, 2);

    // Swap experts 0 and 1 (same group) in both probabilities and decision.
    Tensor<double> swapped = probs;
    for (std::size_t t = 0; t < t_count; ++t) std::swap(swapped.at(t, 0), swapped.at(t, 1));
    RoutingDecision ds = d;
    for (auto& idx : ds.indices)
        if (idx == 0)
            idx = 1;
        else if (idx == 1)
            idx = 0;
    CHECK(lb_loss_value(swapped, ds, cfg, n, z, 2) == Catch::Approx(base).epsilon(1e-12));
}

TEST_CASE("router similarity oracle rows") {
    SECTION("identical rows give 1") {
        Tensor<double> w({3, 4});
        for (std::size_t i = 0; i < 3; ++i)
            for (std::size_t j = 0; j < 4; ++j) w.at(i, j) = 0.5 + static_cast<double>(i);
        auto rep = router_similarity(w);
        CHECK(rep.mean_cosine == Catch::Approx(1.0).margin(1e-12));
        CHECK(rep.excluded_rows == 0);
    }
    SECTION("orthogonal columns give 0") {
        Tensor<double> w({2, 2}, {1, 0, 0, 1});
        CHECK(router_similarity(w).mean_cosine == Catch::Approx(0.0).margin(1e-12));
    }
    SECTION("standard basis e1..e4 gives 0") {
        Tensor<double> w({4, 4});
        for (std::size_t i = 0; i < 4; ++i) w.at(i, i) = 1.0;
        CHECK(router_similarity(w).mean_cosine == Catch::Approx(0.0).margin(1e-12));
    }
    SECTION("zero-norm experts are excluded and counted") {
        Tensor<double> w({2, 3}, {1, 0, 0, 1, 0, 0});  // experts 1 and 2 are all-zero
        auto rep = router_similarity(w);
        CHECK(rep.excluded_rows == 2);
        CHECK(rep.mean_cosine == 0.0);  // single surviving expert, no pairs
    }
}

TEST_CASE("gradient norm ratio") {
    std::vector<double> lm{1.0, 2.0, 2.0};
    SECTION("alpha zero gives zero") {
        CHECK(grad_norm_ratio(lm, {5.0, 5.0, 5.0}, 0.0).value == 0.0);
    }
    SECTION("identical gradients at alpha 1 give 1") {
        auto r = grad_norm_ratio(lm, lm, 1.0);
        CHECK(r.value == Catch::Approx(1.0).margin(1e-15));
        CHECK(r.exceeds_guideline);
    }
    SECTION("ratio is linear in alpha") {
        std::vector<double> lb{0.3, -0.1, 0.7};
        const double r1 = grad_norm_ratio(lm, lb, 0.02).value;
        const double r2 = grad_norm_ratio(lm, lb, 0.04).value;
        CHECK(r2 == Catch::Approx(2.0 * r1).epsilon(1e-12));
        CHECK_FALSE(grad_norm_ratio(lm, lb, 0.02).exceeds_guideline);
    }
    SECTION("zero LM gradient is an error") {
        CHECK_THROWS_AS(grad_norm_ratio({0.0, 0.0}, {1.0, 1.0}, 0.5), EvalError);
    }
}

TEST_CASE("closed-loop bias control pulls mean activated FFN experts to K_e") {
    RouterState<double> st(
        seeded_init<double>({64, 24}, InitDistribution::TruncatedNormal, 1.0 / 64, CounterRng(7)),
        16, 8, 6, 4, 0.05, 0.999);
    auto trace = simulate_bias_control(st, 64, 512, 220, CounterRng(99));
    double tail = 0.0;
    for (std::size_t i = trace.mean_ffn.size() - 60; i < trace.mean_ffn.size(); ++i)
        tail += trace.mean_ffn[i];
    tail /= 60.0;
    CHECK(std::abs(tail - 4.0) / 4.0 < 0.05);
    // Dynamic allocation keeps a spread across tokens.
    CHECK(trace.std_ffn.back() > 0.25);
    // Zero-expert biases never move.
    for (std::size_t i = 16; i < 24; ++i) CHECK(st.b[i] == 0.0);
}
