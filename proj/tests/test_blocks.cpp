// MLA with scale correction (graph + cached decode paths vs a straight-line
// reference), the variance-compensated expert bank, MoE combine semantics,
// ScMoE layer wiring, and the auxiliary prediction head.

#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "moelab/blocks.hpp"
#include "moelab/corpus.hpp"
#include "moelab/gradcheck.hpp"
#include "moelab/model.hpp"
#include "moelab/rng.hpp"
#include "moelab/varexp.hpp"

using namespace moelab;

namespace {

Tensor<double> random_tensor(std::vector<std::size_t> shape, std::uint64_t seed) {
    CounterRng rng(seed);
    Tensor<double> t(std::move(shape));
    for (std::size_t i = 0; i < t.numel(); ++i) t.data[i] = rng.normal_at(i);
    return t;
}

struct MlaFixture {
    std::vector<Parameter<double>> store;
    MlaParams<double> p;

    MlaFixture(std::size_t d_model, std::size_t d_q, std::size_t d_kv, std::size_t n_heads,
               std::size_t dhc, std::size_t dhr, std::uint64_t seed, bool zero_weights = false) {
        p.d_model = d_model;
        p.d_q = d_q;
        p.d_kv = d_kv;
        p.n_heads = n_heads;
        p.d_head_c = dhc;
        p.d_head_r = dhr;
        p.rope_base = 1.0e4;
        p.variance_alignment = true;
        auto add = [&](const char* name, std::vector<std::size_t> shape, std::uint64_t id) {
            Tensor<double> v = zero_weights ? Tensor<double>(shape)
                                            : seeded_init<double>(shape,
                                                                  InitDistribution::TruncatedNormal,
                                                                  1.0 / d_model,
                                                                  CounterRng(seed).stream(id));
            store.emplace_back(name, ParamClass::Hidden, std::move(v));
        };
        store.reserve(8);
        add("w_dq", {d_model, d_q}, 0);
        add("w_uq", {d_q, n_heads * dhc}, 1);
        add("w_qr", {d_q, n_heads * dhr}, 2);
        add("w_dkv", {d_model, d_kv}, 3);
        add("w_uk", {d_kv, n_heads * dhc}, 4);
        add("w_uv", {d_kv, n_heads * dhc}, 5);
        add("w_kr", {d_model, dhr}, 6);
        add("w_o", {n_heads * dhc, d_model}, 7);
        p.w_dq = &store[0];
        p.w_uq = &store[1];
        p.w_qr = &store[2];
        p.w_dkv = &store[3];
        p.w_uk = &store[4];
        p.w_uv = &store[5];
        p.w_kr = &store[6];
        p.w_o = &store[7];
    }
};

// Straight-line reference: per-position full recompute, scalar loops, no
// caching, no shared intermediates with the production paths.
Tensor<double> mla_reference(const MlaParams<double>& p, const Tensor<double>& h) {
    const std::size_t t_count = h.rows();
    const double aq = p.alpha_q(), akv = p.alpha_kv();
    auto matvec = [](const Tensor<double>& w, const double* x, std::size_t in, std::size_t out,
                     std::vector<double>& y) {
        y.assign(out, 0.0);
        for (std::size_t i = 0; i < in; ++i)
            for (std::size_t j = 0; j < out; ++j) y[j] += x[i] * w.at(i, j);
    };
    auto rope1 = [&](std::vector<double>& v, std::size_t pos, std::size_t heads) {
        const std::size_t hd = v.size() / heads;
        for (std::size_t head = 0; head < heads; ++head)
            for (std::size_t pr = 0; pr < hd / 2; ++pr) {
                const double theta =
                    static_cast<double>(pos) *
                    std::pow(p.rope_base, -2.0 * static_cast<double>(pr) / static_cast<double>(hd));
                const double a = v[head * hd + 2 * pr], b = v[head * hd + 2 * pr + 1];
                v[head * hd + 2 * pr] = a * std::cos(theta) - b * std::sin(theta);
                v[head * hd + 2 * pr + 1] = a * std::sin(theta) + b * std::cos(theta);
            }
    };

    std::vector<std::vector<double>> qc(t_count), qr(t_count), kc(t_count), kr(t_count), vv(t_count);
    for (std::size_t t = 0; t < t_count; ++t) {
        std::vector<double> cq, ckv;
        matvec(p.w_dq->value, h.row_ptr(t), p.d_model, p.d_q, cq);
        for (double& v : cq) v *= aq;
        matvec(p.w_dkv->value, h.row_ptr(t), p.d_model, p.d_kv, ckv);
        for (double& v : ckv) v *= akv;
        matvec(p.w_uq->value, cq.data(), p.d_q, p.n_heads * p.d_head_c, qc[t]);
        matvec(p.w_qr->value, cq.data(), p.d_q, p.n_heads * p.d_head_r, qr[t]);
        rope1(qr[t], t, p.n_heads);
        matvec(p.w_uk->value, ckv.data(), p.d_kv, p.n_heads * p.d_head_c, kc[t]);
        matvec(p.w_uv->value, ckv.data(), p.d_kv, p.n_heads * p.d_head_c, vv[t]);
        matvec(p.w_kr->value, h.row_ptr(t), p.d_model, p.d_head_r, kr[t]);
        rope1(kr[t], t, 1);
    }
    const double scale = 1.0 / std::sqrt(static_cast<double>(p.d_head_c + p.d_head_r));
    Tensor<double> merged({t_count, p.n_heads * p.d_head_c});
    for (std::size_t t = 0; t < t_count; ++t) {
        for (std::size_t head = 0; head < p.n_heads; ++head) {
            std::vector<double> scores(t + 1);
            for (std::size_t j = 0; j <= t; ++j) {
                double s = 0.0;
                for (std::size_t u = 0; u < p.d_head_c; ++u)
                    s += qc[t][head * p.d_head_c + u] * kc[j][head * p.d_head_c + u];
                for (std::size_t u = 0; u < p.d_head_r; ++u)
                    s += qr[t][head * p.d_head_r + u] * kr[j][u];
                scores[j] = s * scale;
            }
            double mx = scores[0];
            for (double s : scores) mx = std::max(mx, s);
            double denom = 0.0;
            for (double& s : scores) {
                s = std::exp(s - mx);
                denom += s;
            }
            for (std::size_t j = 0; j <= t; ++j)
                for (std::size_t u = 0; u < p.d_head_c; ++u)
                    merged.at(t, head * p.d_head_c + u) +=
                        scores[j] / denom * vv[j][head * p.d_head_c + u];
        }
    }
    return mm(merged, p.w_o->value);
}

}  // namespace

TEST_CASE("mla scale factors") {
    SECTION("equal dims give unit factors") {
        auto [aq, akv] = mla_scale_factors(64, 64, 64);
        CHECK(aq == 1.0);
        CHECK(akv == 1.0);
    }
    SECTION("published full-scale dims") {
        auto [aq, akv] = mla_scale_factors(6144, 1536, 512);
        CHECK(aq == Catch::Approx(2.0).margin(1e-15));
        CHECK(akv == Catch::Approx(std::sqrt(12.0)).margin(1e-12));
    }
    SECTION("ratio-invariance under uniform width scaling") {
        auto [aq, akv] = mla_scale_factors(768, 192, 64);
        CHECK(aq == Catch::Approx(2.0).margin(1e-15));
        CHECK(akv == Catch::Approx(std::sqrt(12.0)).margin(1e-12));
    }
    SECTION("zero dims rejected") { CHECK_THROWS_AS(mla_scale_factors(0, 1, 1), ParameterError); }
}

TEST_CASE("mla forward: zero weights give zero output and shape is preserved") {
    MlaFixture fx(32, 8, 4, 4, 8, 4, 0, /*zero_weights=*/true);
    Graph<double> g;
    auto h = g.input(random_tensor({4, 32}, 9));
    MlaVars<double> vars{g.input(fx.p.w_dq->value),  g.input(fx.p.w_uq->value),
                         g.input(fx.p.w_qr->value),  g.input(fx.p.w_dkv->value),
                         g.input(fx.p.w_uk->value),  g.input(fx.p.w_uv->value),
                         g.input(fx.p.w_kr->value),  g.input(fx.p.w_o->value)};
    auto u = mla_block(g, h, fx.p, vars, 4);
    CHECK(g.val(u).shape == std::vector<std::size_t>{4, 32});
    for (double v : g.val(u).data) CHECK(v == 0.0);
}

TEST_CASE("mla graph path matches the straight-line reference") {
    MlaFixture fx(16, 8, 4, 1, 8, 4, 0);
    const Tensor<double> h = random_tensor({6, 16}, 0);
    Graph<double> g;
    auto hv = g.input(h);
    MlaVars<double> vars{g.input(fx.p.w_dq->value),  g.input(fx.p.w_uq->value),
                         g.input(fx.p.w_qr->value),  g.input(fx.p.w_dkv->value),
                         g.input(fx.p.w_uk->value),  g.input(fx.p.w_uv->value),
                         g.input(fx.p.w_kr->value),  g.input(fx.p.w_o->value)};
    auto u = mla_block(g, hv, fx.p, vars, 6);
    const Tensor<double> want = mla_reference(fx.p, h);
    REQUIRE(g.val(u).shape == want.shape);
    for (std::size_t i = 0; i < want.numel(); ++i)
        CHECK(g.val(u).data[i] == Catch::Approx(want.data[i]).margin(1e-10));
}

TEST_CASE("cached incremental decode matches the straight-line reference") {
    MlaFixture fx(16, 8, 4, 2, 6, 4, 3);
    const Tensor<double> h = random_tensor({5, 16}, 1);
    const Tensor<double> want = mla_reference(fx.p, h);
    MlaCache<double> cache;
    for (std::size_t t = 0; t < 5; ++t) {
        Tensor<double> row({1, 16});
        for (std::size_t j = 0; j < 16; ++j) row.data[j] = h.at(t, j);
        Tensor<double> u = mla_infer_step(fx.p, cache, row, t);
        for (std::size_t j = 0; j < 16; ++j)
            CHECK(u.data[j] == Catch::Approx(want.at(t, j)).margin(1e-10));
    }
    CHECK(cache.length() == 5);
}

TEST_CASE("cache/position mismatch is a state error") {
    MlaFixture fx(8, 4, 4, 1, 4, 2, 5);
    MlaCache<double> cache;
    Tensor<double> row({1, 8});
    mla_infer_step(fx.p, cache, row, 0);
    CHECK_THROWS_AS(mla_infer_step(fx.p, cache, row, 0), StateError);
    CHECK_THROWS_AS(mla_infer_step(fx.p, cache, row, 5), StateError);
}

TEST_CASE("variance gamma closed form") {
    CHECK(variance_gamma(1) == 1.0);
    CHECK(variance_gamma(2) == 2.0);
    CHECK(variance_gamma(4) == 4.0);
    CHECK_THROWS_AS(variance_gamma(0), ParameterError);
}

namespace {

struct BankFixture {
    std::vector<Parameter<double>> store;
    ExpertBank<double> bank;

    BankFixture(std::size_t n, std::size_t d_model, std::size_t inter, std::size_t m,
                GammaMode mode, std::uint64_t seed, bool zeros = false) {
        store.reserve(2 * n);
        bank.m = m;
        bank.gamma_mode = mode;
        for (std::size_t e = 0; e < n; ++e) {
            auto win = zeros ? Tensor<double>({d_model, inter})
                             : seeded_init<double>({d_model, inter},
                                                   InitDistribution::TruncatedNormal, 1.0 / d_model,
                                                   CounterRng(seed).stream(2 * e));
            auto wout = zeros ? Tensor<double>({inter, d_model})
                              : seeded_init<double>({inter, d_model},
                                                    InitDistribution::TruncatedNormal,
                                                    1.0 / d_model, CounterRng(seed).stream(2 * e + 1));
            store.emplace_back("in", ParamClass::Hidden, std::move(win));
            store.emplace_back("out", ParamClass::Hidden, std::move(wout));
        }
        for (std::size_t e = 0; e < n; ++e) {
            bank.w_in.push_back(&store[2 * e]);
            bank.w_out.push_back(&store[2 * e + 1]);
        }
    }
};

}  // namespace

TEST_CASE("moe zero-expert identity is bitwise") {
    BankFixture fx(2, 8, 4, 1, GammaMode::FfnOnly, 7);
    const Tensor<double> x = random_tensor({3, 8}, 11);
    RoutingDecision d;
    d.top_k = 1;
    d.n_ffn = 2;
    d.indices = {2, 3, 2};  // zero experts only
    d.gates = {1.0, 1.0, 1.0};
    d.ffn_count = {0, 0, 0};
    Tensor<double> out = moe_forward(x, d, fx.bank, 2);
    for (std::size_t i = 0; i < x.numel(); ++i) CHECK(out.data[i] == x.data[i]);
}

TEST_CASE("moe zero-experts with split gates scale the input by the gate sum") {
    BankFixture fx(2, 8, 4, 1, GammaMode::FfnOnly, 7);
    const Tensor<double> x = random_tensor({1, 8}, 12);
    RoutingDecision d;
    d.top_k = 2;
    d.n_ffn = 2;
    d.indices = {2, 3};
    d.gates = {0.25, 0.5};
    d.ffn_count = {0};
    Tensor<double> out = moe_forward(x, d, fx.bank, 2);
    for (std::size_t i = 0; i < x.numel(); ++i)
        CHECK(out.data[i] == Catch::Approx(0.75 * x.data[i]).margin(1e-15));
}

TEST_CASE("single FFN expert with unit gate reproduces the expert exactly") {
    BankFixture fx(2, 8, 4, 1, GammaMode::FfnOnly, 9);
    const Tensor<double> x = random_tensor({1, 8}, 13);
    RoutingDecision d;
    d.top_k = 1;
    d.n_ffn = 2;
    d.indices = {1};
    d.gates = {1.0};
    d.ffn_count = {1};
    Tensor<double> out = moe_forward(x, d, fx.bank, 0);

    Tensor<double> h = mm(x, fx.bank.w_in[1]->value);
    for (double& v : h.data) v = v * Graph<double>::sigmoid(v);
    Tensor<double> want = mm(h, fx.bank.w_out[1]->value);
    for (std::size_t i = 0; i < want.numel(); ++i) CHECK(out.data[i] == want.data[i]);
}

TEST_CASE("moe rejects out-of-range expert indices") {
    BankFixture fx(2, 8, 4, 1, GammaMode::FfnOnly, 9);
    const Tensor<double> x = random_tensor({1, 8}, 14);
    RoutingDecision d;
    d.top_k = 1;
    d.n_ffn = 2;
    d.indices = {4};
    d.gates = {1.0};
    d.ffn_count = {0};
    CHECK_THROWS_AS(moe_forward(x, d, fx.bank, 1), StateError);
}

TEST_CASE("moe combine gradients: probs, experts and passthrough all check out") {
    const std::size_t t_count = 5, n = 3, z = 2, d_model = 6, inter = 4;
    BankFixture fx(n, d_model, inter, 1, GammaMode::FfnOnly, 21);
    Parameter<double> xp("x", ParamClass::Hidden, random_tensor({t_count, d_model}, 22));
    Parameter<double> lp("logits", ParamClass::Hidden, random_tensor({t_count, n + z}, 23));

    RouterState<double> st(Tensor<double>{}, n, z, 3, 2, 0.0, 1.0);
    const RoutingDecision frozen = route_from_probs(softmax_rows(lp.value), st);

    for (bool renorm : {false, true}) {
        auto run = [&](bool with_grad, Tensor<double>* gx, Tensor<double>* gl) {
            Graph<double> g;
            auto xv = with_grad ? g.param(xp.value) : g.input(xp.value);
            auto lv = with_grad ? g.param(lp.value) : g.input(lp.value);
            auto probs = g.softmax(lv);
            ExpertBankVars<double> vars;
            for (std::size_t e = 0; e < n; ++e) {
                vars.w_in.push_back(g.input(fx.bank.w_in[e]->value));
                vars.w_out.push_back(g.input(fx.bank.w_out[e]->value));
            }
            auto out = moe_block(g, xv, probs, frozen, fx.bank, vars, renorm);
            // Scalar objective with asymmetric weights over the output.
            Tensor<double> wts({d_model, 1});
            for (std::size_t i = 0; i < d_model; ++i) wts.data[i] = 0.3 + 0.11 * i;
            auto proj = g.matmul(out, g.input(wts));
            auto loss = g.cross_entropy_mean(g.softmax(g.matmul(g.silu(proj), g.input(transpose(wts)))),
                                             std::vector<int>(t_count, 2));
            if (with_grad) {
                g.backward(loss);
                *gx = g.grad(xv);
                *gl = g.grad(lv);
            }
            return static_cast<double>(g.val(loss).data[0]);
        };
        auto eval = [&] { return run(false, nullptr, nullptr); };
        auto compute = [&] {
            xp.zero_grad();
            lp.zero_grad();
            run(true, &xp.grad, &lp.grad);
        };
        GradCheckOptions opt;
        opt.max_coords = 20;
        auto r = grad_check<double>({&xp, &lp}, eval, compute, opt);
        INFO("renorm=" << renorm << " worst " << r.worst_param);
        CHECK(r.max_rel_err < 1e-5);
    }
}

TEST_CASE("gamma compensation holds init output variance across segmentation") {
    const std::size_t d_model = 32, base_experts = 4, base_inter = 32, base_topk = 2;
    const double v1 = moe_init_output_variance(d_model, base_experts, base_inter, base_topk, 1,
                                               true, 1500, 4, 77);
    const double v2 = moe_init_output_variance(d_model, base_experts, base_inter, base_topk, 2,
                                               true, 1500, 4, 77);
    const double v4 = moe_init_output_variance(d_model, base_experts, base_inter, base_topk, 4,
                                               true, 1500, 4, 77);
    INFO("v1=" << v1 << " v2=" << v2 << " v4=" << v4);
    CHECK(v2 / v1 == Catch::Approx(1.0).margin(0.1));
    CHECK(v4 / v1 == Catch::Approx(1.0).margin(0.1));

    const double u2 = moe_init_output_variance(d_model, base_experts, base_inter, base_topk, 2,
                                               false, 1500, 4, 77);
    const double u4 = moe_init_output_variance(d_model, base_experts, base_inter, base_topk, 4,
                                               false, 1500, 4, 77);
    INFO("u2/v1=" << u2 / v1 << " u4/v1=" << u4 / v1);
    CHECK(v1 / u2 == Catch::Approx(4.0).epsilon(0.5));
    CHECK(v1 / u4 == Catch::Approx(16.0).epsilon(0.5));
}

TEST_CASE("variance alignment at init") {
    SECTION("correction on: all four components agree within 1.25x") {
        auto rep = mla_component_variances(768, 192, 64, 4, 32, 16, true, 1024, 4, 31);
        INFO("qc=" << rep.var_qc << " qr=" << rep.var_qr << " kc=" << rep.var_kc
                   << " kr=" << rep.var_kr);
        CHECK(rep.max_pairwise_ratio < 1.25);
    }
    SECTION("correction off at d_model/d_q = 16: >= 4x mismatch, low-rank side small") {
        auto rep = mla_component_variances(512, 32, 32, 4, 16, 8, false, 1024, 4, 32);
        INFO("qc/kr=" << rep.qc_vs_kr);
        CHECK(rep.qc_vs_kr < 0.25);  // deviates from 1 by at least 4x
        CHECK(rep.max_pairwise_ratio >= 4.0);
    }
}

TEST_CASE("scmoe layer wiring: zero dense path and all-zero routing leave the trace") {
    ModelSpec spec;
    spec.d_model = 24;
    spec.n_layers = 1;
    spec.n_heads = 2;
    spec.d_head_c = 8;
    spec.d_head_r = 4;
    spec.d_q = 8;
    spec.d_kv = 4;
    spec.dense_inter = 16;
    spec.expert_inter = 8;
    spec.n_ffn_experts = 4;
    spec.n_zero_experts = 4;
    spec.top_k = 3;
    spec.k_expected = 2;
    spec.segmentation_m = 1;
    spec.lb_alpha = 0.0;
    spec.z_lambda = 0.0;
    spec.mtp_weight = 0.0;
    spec.validate();
    Model<double> model(spec, 5);

    // Kill the dense path and force every slot onto zero experts.
    auto& layer = model.layers()[0];
    std::fill(layer.dense_in->value.data.begin(), layer.dense_in->value.data.end(), 0.0);
    std::fill(layer.dense_out->value.data.begin(), layer.dense_out->value.data.end(), 0.0);
    for (std::size_t e = 0; e < spec.n_ffn_experts; ++e) layer.router.b[e] = -1e9;

    Batch b;
    b.tokens = {kBosToken, 65, 66, 67};
    b.targets_next = {65, 66, 67, 68};
    b.targets_skip2 = {66, 67, -1, -1};
    b.seq_len = 4;
    ForwardResult<double> fr = model.forward(b);
    for (auto c : fr.decisions[0].ffn_count) CHECK(c == 0);

    // Hand-built trace of the same wiring: x -> +MLA1 -> +MLA2 -> +gate-weighted
    // passthrough of the normed shortcut.
    Graph<double> g;
    std::vector<std::size_t> ids{static_cast<std::size_t>(kBosToken), 65, 66, 67};
    auto x = g.gather_rows(g.input(model.embedding()->value), ids);
    auto bind = [&](const MlaParams<double>& m) {
        return MlaVars<double>{g.input(m.w_dq->value), g.input(m.w_uq->value),
                               g.input(m.w_qr->value), g.input(m.w_dkv->value),
                               g.input(m.w_uk->value), g.input(m.w_uv->value),
                               g.input(m.w_kr->value), g.input(m.w_o->value)};
    };
    auto a1 = g.add(x, mla_block(g, g.rmsnorm(x, g.input(layer.norm1->value)), layer.mla1,
                                 bind(layer.mla1), 4));
    auto a3 = g.add(a1, mla_block(g, g.rmsnorm(a1, g.input(layer.norm2->value)), layer.mla2,
                                  bind(layer.mla2), 4));
    auto hmoe = g.rmsnorm(a1, g.input(layer.norm_moe->value));
    const Tensor<double>& probs = fr.graph.val(fr.layer_probs[0]);
    Tensor<double> expected = g.val(a3);
    for (std::size_t t = 0; t < 4; ++t) {
        double zw = 0.0;
        for (std::size_t s = 0; s < spec.top_k; ++s)
            zw += probs.at(t, fr.decisions[0].indices[t * spec.top_k + s]);
        for (std::size_t j = 0; j < spec.d_model; ++j)
            expected.at(t, j) += zw * g.val(hmoe).at(t, j);
    }
    const Tensor<double>& got = fr.graph.val(fr.hidden_pre_norm);
    for (std::size_t i = 0; i < expected.numel(); ++i)
        CHECK(got.data[i] == Catch::Approx(expected.data[i]).margin(1e-12));
}

TEST_CASE("layer output is shape preserving and chunked evaluation is bitwise equal") {
    ModelSpec spec;
    spec.d_model = 16;
    spec.n_layers = 2;
    spec.n_heads = 2;
    spec.d_head_c = 6;
    spec.d_head_r = 4;
    spec.d_q = 8;
    spec.d_kv = 4;
    spec.dense_inter = 12;
    spec.expert_inter = 6;
    spec.n_ffn_experts = 4;
    spec.n_zero_experts = 2;
    spec.top_k = 3;
    spec.k_expected = 2;
    spec.lb_alpha = 0.01;
    spec.lb_groups = 2;
    spec.validate();
    Model<double> model(spec, 8);
    Corpus corpus = synthetic_corpus(4096, 3);
    Batch b = sample_batch(corpus, 4, 6, CounterRng(5));

    ForwardResult<double> f1 = model.forward(b, 1);
    ForwardResult<double> f2 = model.forward(b, 2);
    CHECK(f1.graph.val(f1.hidden_pre_norm).shape ==
          std::vector<std::size_t>{b.tokens.size(), spec.d_model});
    CHECK(f1.graph.val(f1.hidden_pre_norm).data == f2.graph.val(f2.hidden_pre_norm).data);
    CHECK(f1.graph.val(f1.layer_probs[0]).data == f2.graph.val(f2.layer_probs[0]).data);
    CHECK(f1.value_of(f1.total_loss) == f2.value_of(f2.total_loss));
    CHECK(f1.decisions[0].indices == f2.decisions[0].indices);
}

TEST_CASE("mtp head: zero weights give uniform logits and ln(vocab) loss") {
    const std::size_t d_model = 12, vocab = 50, t_count = 4;
    Graph<double> g;
    auto z = g.input(random_tensor({t_count, d_model}, 41));
    MtpVars<double> mv{g.input(Tensor<double>::full({d_model}, 1.0)),
                       g.input(Tensor<double>({d_model, 16})), g.input(Tensor<double>({16, d_model})),
                       g.input(Tensor<double>::full({d_model}, 1.0))};
    auto mh = mtp_hidden(g, z, mv);
    auto logits = g.matmul(mh, g.input(Tensor<double>({d_model, vocab})));  // zero unembedding
    auto loss = g.cross_entropy_mean(logits, {3, 7, 1, -1});
    CHECK(g.val(loss).data[0] == Catch::Approx(std::log(static_cast<double>(vocab))).epsilon(1e-12));
}

TEST_CASE("mtp is skipped with a flag when sequences are too short") {
    ModelSpec spec;
    spec.d_model = 12;
    spec.n_layers = 1;
    spec.n_heads = 2;
    spec.d_head_c = 4;
    spec.d_head_r = 4;
    spec.d_q = 6;
    spec.d_kv = 4;
    spec.dense_inter = 8;
    spec.expert_inter = 4;
    spec.n_ffn_experts = 2;
    spec.n_zero_experts = 1;
    spec.top_k = 2;
    spec.k_expected = 1;
    spec.lb_groups = 1;
    spec.validate();
    Model<double> model(spec, 3);
    Batch b;
    b.tokens = {kBosToken, 65};
    b.targets_next = {65, 66};
    b.targets_skip2 = {-1, -1};  // no position has a t+2 target
    b.seq_len = 2;
    ForwardResult<double> fr = model.forward(b);
    CHECK(fr.mtp_skipped);
    CHECK(fr.value_of(fr.mtp_loss) == 0.0);
    CHECK(fr.value_of(fr.total_loss) ==
          fr.value_of(fr.lm_loss) + fr.value_of(fr.lb_loss) + fr.value_of(fr.z_loss));
}
