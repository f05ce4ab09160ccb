#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <utility>
#include <vector>

#include "moelab/common.hpp"
#include "moelab/tensor.hpp"

namespace moelab {

// Reverse-mode tape. Nodes are created in topological order by construction;
// backward() walks them in reverse creation order. All per-element reductions
// run in fixed index order, so gradients are bitwise reproducible.
template <typename S>
class Graph {
  public:
    using VarId = std::int32_t;

    VarId input(Tensor<S> v) { return make_node(std::move(v), false, nullptr); }

    VarId param(Tensor<S> v) { return make_node(std::move(v), true, nullptr); }

    const Tensor<S>& val(VarId id) const { return nodes_[static_cast<std::size_t>(id)].value; }

    // Gradient storage, created on first touch. Only meaningful after backward().
    Tensor<S>& grad(VarId id) {
        Node& n = nodes_[static_cast<std::size_t>(id)];
        if (n.grad.numel() == 0) n.grad = Tensor<S>(n.value.shape);
        return n.grad;
    }

    bool has_grad(VarId id) const { return nodes_[static_cast<std::size_t>(id)].grad.numel() != 0; }

    bool needs_grad(VarId id) const { return nodes_[static_cast<std::size_t>(id)].needs_grad; }

    std::size_t size() const { return nodes_.size(); }

    // Extension point for domain-specific ops (MoE combine, balance loss, ...).
    VarId make_node(Tensor<S> value, bool needs_grad, std::function<void(Graph&)> back) {
        nodes_.push_back(Node{std::move(value), Tensor<S>{}, needs_grad, std::move(back)});
        return static_cast<VarId>(nodes_.size() - 1);
    }

    // For extension ops whose backward closure must capture the new node's id.
    void set_backward(VarId id, std::function<void(Graph&)> back) {
        nodes_[static_cast<std::size_t>(id)].back = std::move(back);
    }

    void zero_grads() {
        for (Node& n : nodes_) n.grad = Tensor<S>{};
    }

    // Accumulates d(root)/d(node) into each node's grad. Multiple roots must be
    // run with zero_grads() in between and summed by the caller; re-running on
    // live grads would double-count.
    void backward(VarId root) {
        Node& r = nodes_[static_cast<std::size_t>(root)];
        check(r.value.numel() == 1, "backward: root must be scalar");
        grad(root).data[0] += S(1);
        for (std::int32_t i = root; i >= 0; --i) {
            Node& n = nodes_[static_cast<std::size_t>(i)];
            if (n.back && n.grad.numel() != 0) n.back(*this);
        }
    }

    // ---- elementwise ----

    VarId add(VarId a, VarId b) {
        const Tensor<S>&va = val(a), &vb = val(b);
        check(va.same_shape(vb), "add: shape mismatch");
        Tensor<S> out = va;
        for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] += vb.data[i];
        const bool ng = needs_grad(a) || needs_grad(b);
        VarId id = make_node(std::move(out), ng, nullptr);
        if (ng)
            set_back(id, [id, a, b](Graph& g) {
                const Tensor<S>& go = g.grad(id);
                if (g.needs_grad(a)) acc(g.grad(a), go);
                if (g.needs_grad(b)) acc(g.grad(b), go);
            });
        return id;
    }

    VarId add_n(const std::vector<VarId>& vs) {
        check(!vs.empty(), "add_n: empty list");
        VarId acc_id = vs[0];
        for (std::size_t i = 1; i < vs.size(); ++i) acc_id = add(acc_id, vs[i]);
        return acc_id;
    }

    VarId scale(VarId a, S c) {
        Tensor<S> out = val(a);
        for (S& v : out.data) v *= c;
        const bool ng = needs_grad(a);
        VarId id = make_node(std::move(out), ng, nullptr);
        if (ng)
            set_back(id, [id, a, c](Graph& g) {
                const Tensor<S>& go = g.grad(id);
                Tensor<S>& ga = g.grad(a);
                for (std::size_t i = 0; i < go.numel(); ++i) ga.data[i] += go.data[i] * c;
            });
        return id;
    }

    VarId mul(VarId a, VarId b) {
        const Tensor<S>&va = val(a), &vb = val(b);
        check(va.same_shape(vb), "mul: shape mismatch");
        Tensor<S> out = va;
        for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] *= vb.data[i];
        const bool ng = needs_grad(a) || needs_grad(b);
        VarId id = make_node(std::move(out), ng, nullptr);
        if (ng)
            set_back(id, [id, a, b](Graph& g) {
                const Tensor<S>& go = g.grad(id);
                if (g.needs_grad(a)) {
                    Tensor<S>& ga = g.grad(a);
                    const Tensor<S>& vb2 = g.val(b);
                    for (std::size_t i = 0; i < go.numel(); ++i) ga.data[i] += go.data[i] * vb2.data[i];
                }
                if (g.needs_grad(b)) {
                    Tensor<S>& gb = g.grad(b);
                    const Tensor<S>& va2 = g.val(a);
                    for (std::size_t i = 0; i < go.numel(); ++i) gb.data[i] += go.data[i] * va2.data[i];
                }
            });
        return id;
    }

    VarId silu(VarId a) {
        Tensor<S> out = val(a);
        for (S& v : out.data) v = v * sigmoid(v);
        const bool ng = needs_grad(a);
        VarId id = make_node(std::move(out), ng, nullptr);
        if (ng)
            set_back(id, [id, a](Graph& g) {
                const Tensor<S>& go = g.grad(id);
                const Tensor<S>& va = g.val(a);
                Tensor<S>& ga = g.grad(a);
                for (std::size_t i = 0; i < go.numel(); ++i) {
                    const S x = va.data[i];
                    const S sg = sigmoid(x);
                    ga.data[i] += go.data[i] * sg * (S(1) + x * (S(1) - sg));
                }
            });
        return id;
    }

    // ---- linear algebra ----

    VarId matmul(VarId a, VarId b) {
        Tensor<S> out = mm(val(a), val(b));
        const bool ng = needs_grad(a) || needs_grad(b);
        VarId id = make_node(std::move(out), ng, nullptr);
        if (ng)
            set_back(id, [id, a, b](Graph& g) {
                const Tensor<S>& go = g.grad(id);
                if (g.needs_grad(a)) mm_nt_acc(go, g.val(b), g.grad(a));
                if (g.needs_grad(b)) mm_tn_acc(g.val(a), go, g.grad(b));
            });
        return id;
    }

    // a * b^T
    VarId matmul_nt(VarId a, VarId b) {
        Tensor<S> out = mm_nt(val(a), val(b));
        const bool ng = needs_grad(a) || needs_grad(b);
        VarId id = make_node(std::move(out), ng, nullptr);
        if (ng)
            set_back(id, [id, a, b](Graph& g) {
                const Tensor<S>& go = g.grad(id);
                if (g.needs_grad(a)) {
                    Tensor<S> tmp = mm(go, g.val(b));
                    acc(g.grad(a), tmp);
                }
                if (g.needs_grad(b)) mm_tn_acc(go, g.val(a), g.grad(b));
            });
        return id;
    }

    // ---- shape plumbing ----

    VarId slice_cols(VarId a, std::size_t off, std::size_t w) {
        const Tensor<S>& va = val(a);
        check(va.ndim() == 2 && off + w <= va.cols(), "slice_cols: out of range");
        Tensor<S> out({va.rows(), w});
        for (std::size_t r = 0; r < va.rows(); ++r)
            for (std::size_t j = 0; j < w; ++j) out.at(r, j) = va.at(r, off + j);
        const bool ng = needs_grad(a);
        VarId id = make_node(std::move(out), ng, nullptr);
        if (ng)
            set_back(id, [id, a, off, w](Graph& g) {
                const Tensor<S>& go = g.grad(id);
                Tensor<S>& ga = g.grad(a);
                for (std::size_t r = 0; r < go.rows(); ++r)
                    for (std::size_t j = 0; j < w; ++j) ga.at(r, off + j) += go.at(r, j);
            });
        return id;
    }

    VarId concat_cols(const std::vector<VarId>& vs) {
        check(!vs.empty(), "concat_cols: empty list");
        const std::size_t rows = val(vs[0]).rows();
        std::size_t total = 0;
        for (VarId v : vs) {
            check(val(v).rows() == rows, "concat_cols: row mismatch");
            total += val(v).cols();
        }
        Tensor<S> out({rows, total});
        std::size_t off = 0;
        bool ng = false;
        for (VarId v : vs) {
            const Tensor<S>& t = val(v);
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t j = 0; j < t.cols(); ++j) out.at(r, off + j) = t.at(r, j);
            off += t.cols();
            ng = ng || needs_grad(v);
        }
        VarId id = make_node(std::move(out), ng, nullptr);
        if (ng) {
            std::vector<VarId> parts = vs;
            set_back(id, [id, parts](Graph& g) {
                const Tensor<S>& go = g.grad(id);
                std::size_t off2 = 0;
                for (VarId v : parts) {
                    const std::size_t w = g.val(v).cols();
                    if (g.needs_grad(v)) {
                        Tensor<S>& gv = g.grad(v);
                        for (std::size_t r = 0; r < go.rows(); ++r)
                            for (std::size_t j = 0; j < w; ++j) gv.at(r, j) += go.at(r, off2 + j);
                    }
                    off2 += w;
                }
            });
        }
        return id;
    }

    VarId concat_rows(const std::vector<VarId>& vs) {
        check(!vs.empty(), "concat_rows: empty list");
        if (vs.size() == 1) return vs[0];
        const std::size_t cols = val(vs[0]).cols();
        std::size_t total = 0;
        bool ng = false;
        for (VarId v : vs) {
            check(val(v).cols() == cols, "concat_rows: col mismatch");
            total += val(v).rows();
            ng = ng || needs_grad(v);
        }
        Tensor<S> out({total, cols});
        std::size_t off = 0;
        for (VarId v : vs) {
            const Tensor<S>& t = val(v);
            std::copy(t.data.begin(), t.data.end(), out.data.begin() + static_cast<std::ptrdiff_t>(off * cols));
            off += t.rows();
        }
        VarId id = make_node(std::move(out), ng, nullptr);
        if (ng) {
            std::vector<VarId> parts = vs;
            set_back(id, [id, parts](Graph& g) {
                const Tensor<S>& go = g.grad(id);
                std::size_t off2 = 0;
                for (VarId v : parts) {
                    const std::size_t r = g.val(v).rows();
                    if (g.needs_grad(v)) {
                        Tensor<S>& gv = g.grad(v);
                        for (std::size_t i = 0; i < r * go.cols(); ++i)
                            gv.data[i] += go.data[off2 * go.cols() + i];
                    }
                    off2 += r;
                }
            });
        }
        return id;
    }

    VarId gather_rows(VarId a, std::vector<std::size_t> idx) {
        const Tensor<S>& va = val(a);
        check(va.ndim() == 2, "gather_rows: expects 2-d source");
        Tensor<S> out({idx.size(), va.cols()});
        for (std::size_t r = 0; r < idx.size(); ++r) {
            check(idx[r] < va.rows(), "gather_rows: index out of range");
            for (std::size_t j = 0; j < va.cols(); ++j) out.at(r, j) = va.at(idx[r], j);
        }
        const bool ng = needs_grad(a);
        VarId id = make_node(std::move(out), ng, nullptr);
        if (ng)
            set_back(id, [id, a, idx = std::move(idx)](Graph& g) {
                const Tensor<S>& go = g.grad(id);
                Tensor<S>& ga = g.grad(a);
                for (std::size_t r = 0; r < idx.size(); ++r)
                    for (std::size_t j = 0; j < go.cols(); ++j) ga.at(idx[r], j) += go.at(r, j);
            });
        return id;
    }

    // ---- nonlinear blocks ----

    VarId softmax(VarId a) {
        Tensor<S> out = softmax_rows(val(a));
        const bool ng = needs_grad(a);
        VarId id = make_node(std::move(out), ng, nullptr);
        if (ng)
            set_back(id, [id, a](Graph& g) {
                const Tensor<S>& y = g.val(id);
                const Tensor<S>& go = g.grad(id);
                Tensor<S>& ga = g.grad(a);
                const std::size_t n = y.cols();
                for (std::size_t r = 0; r < y.rows(); ++r) {
                    S dot = S(0);
                    for (std::size_t j = 0; j < n; ++j) dot += go.at(r, j) * y.at(r, j);
                    for (std::size_t j = 0; j < n; ++j) ga.at(r, j) += y.at(r, j) * (go.at(r, j) - dot);
                }
            });
        return id;
    }

    // RMS norm with learned gain, row-wise over the last dim.
    VarId rmsnorm(VarId a, VarId gain, S eps = S(1e-6)) {
        const Tensor<S>& va = val(a);
        const Tensor<S>& vg = val(gain);
        check(va.ndim() == 2 && vg.numel() == va.cols(), "rmsnorm: gain width mismatch");
        const std::size_t d = va.cols();
        Tensor<S> out(va.shape);
        auto inv_rms = std::make_shared<std::vector<S>>(va.rows());
        for (std::size_t r = 0; r < va.rows(); ++r) {
            S s2 = S(0);
            for (std::size_t j = 0; j < d; ++j) s2 += va.at(r, j) * va.at(r, j);
            const S inv = S(1) / std::sqrt(s2 / static_cast<S>(d) + eps);
            (*inv_rms)[r] = inv;
            for (std::size_t j = 0; j < d; ++j) out.at(r, j) = va.at(r, j) * inv * vg.data[j];
        }
        const bool ng = needs_grad(a) || needs_grad(gain);
        VarId id = make_node(std::move(out), ng, nullptr);
        if (ng)
            set_back(id, [id, a, gain, inv_rms](Graph& g) {
                const Tensor<S>& go = g.grad(id);
                const Tensor<S>& va2 = g.val(a);
                const Tensor<S>& vg2 = g.val(gain);
                const std::size_t d2 = va2.cols();
                for (std::size_t r = 0; r < va2.rows(); ++r) {
                    const S inv = (*inv_rms)[r];
                    if (g.needs_grad(gain)) {
                        Tensor<S>& gg = g.grad(gain);
                        for (std::size_t j = 0; j < d2; ++j)
                            gg.data[j] += go.at(r, j) * va2.at(r, j) * inv;
                    }
                    if (g.needs_grad(a)) {
                        Tensor<S>& ga = g.grad(a);
                        S proj = S(0);
                        for (std::size_t j = 0; j < d2; ++j)
                            proj += go.at(r, j) * vg2.data[j] * va2.at(r, j);
                        proj *= inv * inv / static_cast<S>(d2);
                        for (std::size_t j = 0; j < d2; ++j)
                            ga.at(r, j) += inv * (go.at(r, j) * vg2.data[j] - va2.at(r, j) * proj);
                    }
                }
            });
        return id;
    }

    VarId rope(VarId a, std::vector<std::size_t> positions, double base, std::size_t heads) {
        Tensor<S> out = rope_apply(val(a), positions, base, heads);
        const bool ng = needs_grad(a);
        VarId id = make_node(std::move(out), ng, nullptr);
        if (ng)
            set_back(id, [id, a, positions = std::move(positions), base, heads](Graph& g) {
                // Rotation is orthogonal: J^T g is the same rotation with negated angle.
                const Tensor<S>& go = g.grad(id);
                Tensor<S>& ga = g.grad(a);
                const std::size_t d = go.cols();
                const std::size_t hd = d / heads;
                for (std::size_t r = 0; r < go.rows(); ++r) {
                    const double pos = static_cast<double>(positions[r]);
                    for (std::size_t h = 0; h < heads; ++h) {
                        const std::size_t off = h * hd;
                        for (std::size_t p = 0; p < hd / 2; ++p) {
                            const double theta =
                                pos * std::pow(base, -2.0 * static_cast<double>(p) / static_cast<double>(hd));
                            const S c = static_cast<S>(std::cos(theta));
                            const S s = static_cast<S>(std::sin(theta));
                            const S u = go.at(r, off + 2 * p);
                            const S v = go.at(r, off + 2 * p + 1);
                            ga.at(r, off + 2 * p) += u * c + v * s;
                            ga.at(r, off + 2 * p + 1) += -u * s + v * c;
                        }
                    }
                }
            });
        return id;
    }

    // Fused multi-head causal attention over packed sequences. Rows hold
    // [seq0 token0..S-1, seq1 token0..S-1, ...]; causality applies within each
    // block of seq_len rows. Attention probabilities are kept for backward.
    VarId attention(VarId q, VarId k, VarId v, std::size_t heads, std::size_t seq_len, S scale_factor) {
        const Tensor<S>&vq = val(q), &vk = val(k), &vv = val(v);
        check(vq.rows() == vk.rows() && vq.rows() == vv.rows(), "attention: row mismatch");
        check(vq.cols() == vk.cols(), "attention: q/k width mismatch");
        check(vq.cols() % heads == 0 && vv.cols() % heads == 0, "attention: heads must divide widths");
        check(seq_len > 0 && vq.rows() % seq_len == 0, "attention: rows must pack whole sequences");
        const std::size_t batch = vq.rows() / seq_len;
        const std::size_t dk = vq.cols() / heads;
        const std::size_t dv = vv.cols() / heads;
        auto probs = std::make_shared<std::vector<S>>(batch * heads * seq_len * seq_len, S(0));
        Tensor<S> out({vq.rows(), vv.cols()});
        for (std::size_t b = 0; b < batch; ++b) {
            for (std::size_t h = 0; h < heads; ++h) {
                S* att = probs->data() + (b * heads + h) * seq_len * seq_len;
                for (std::size_t i = 0; i < seq_len; ++i) {
                    const S* qi = vq.row_ptr(b * seq_len + i) + h * dk;
                    S* arow = att + i * seq_len;
                    S mx = S(0);
                    for (std::size_t j = 0; j <= i; ++j) {
                        const S* kj = vk.row_ptr(b * seq_len + j) + h * dk;
                        S acc_s = S(0);
                        for (std::size_t p = 0; p < dk; ++p) acc_s += qi[p] * kj[p];
                        arow[j] = acc_s * scale_factor;
                        mx = (j == 0 || arow[j] > mx) ? arow[j] : mx;
                    }
                    S denom = S(0);
                    for (std::size_t j = 0; j <= i; ++j) {
                        arow[j] = std::exp(arow[j] - mx);
                        denom += arow[j];
                    }
                    S* orow = out.row_ptr(b * seq_len + i) + h * dv;
                    for (std::size_t j = 0; j <= i; ++j) {
                        arow[j] /= denom;
                        const S* vj = vv.row_ptr(b * seq_len + j) + h * dv;
                        for (std::size_t p = 0; p < dv; ++p) orow[p] += arow[j] * vj[p];
                    }
                }
            }
        }
        const bool ng = needs_grad(q) || needs_grad(k) || needs_grad(v);
        VarId id = make_node(std::move(out), ng, nullptr);
        if (ng)
            set_back(id, [id, q, k, v, heads, seq_len, scale_factor, probs, batch, dk, dv](Graph& g) {
                const Tensor<S>& go = g.grad(id);
                const Tensor<S>& vq2 = g.val(q);
                const Tensor<S>& vk2 = g.val(k);
                const Tensor<S>& vv2 = g.val(v);
                Tensor<S>& gq = g.grad(q);
                Tensor<S>& gk = g.grad(k);
                Tensor<S>& gv = g.grad(v);
                std::vector<S> datt(seq_len), dsc(seq_len);
                for (std::size_t b = 0; b < batch; ++b) {
                    for (std::size_t h = 0; h < heads; ++h) {
                        const S* att = probs->data() + (b * heads + h) * seq_len * seq_len;
                        for (std::size_t i = 0; i < seq_len; ++i) {
                            const S* gout = go.row_ptr(b * seq_len + i) + h * dv;
                            const S* arow = att + i * seq_len;
                            S inner = S(0);
                            for (std::size_t j = 0; j <= i; ++j) {
                                const S* vj = vv2.row_ptr(b * seq_len + j) + h * dv;
                                S acc_s = S(0);
                                for (std::size_t p = 0; p < dv; ++p) acc_s += gout[p] * vj[p];
                                datt[j] = acc_s;
                                inner += acc_s * arow[j];
                            }
                            for (std::size_t j = 0; j <= i; ++j) dsc[j] = arow[j] * (datt[j] - inner);
                            const S* qi = vq2.row_ptr(b * seq_len + i) + h * dk;
                            S* gqi = gq.row_ptr(b * seq_len + i) + h * dk;
                            for (std::size_t j = 0; j <= i; ++j) {
                                const S w = dsc[j] * scale_factor;
                                const S* kj = vk2.row_ptr(b * seq_len + j) + h * dk;
                                S* gkj = gk.row_ptr(b * seq_len + j) + h * dk;
                                S* gvj = gv.row_ptr(b * seq_len + j) + h * dv;
                                for (std::size_t p = 0; p < dk; ++p) {
                                    gqi[p] += w * kj[p];
                                    gkj[p] += w * qi[p];
                                }
                                for (std::size_t p = 0; p < dv; ++p) gvj[p] += arow[j] * gout[p];
                            }
                        }
                    }
                }
            });
        return id;
    }

    // Mean cross-entropy over targets, skipping ignore_index positions.
    VarId cross_entropy_mean(VarId logits, std::vector<int> targets, int ignore_index = -1) {
        const Tensor<S>& x = val(logits);
        check(x.ndim() == 2 && x.rows() == targets.size(), "cross_entropy: one target per row");
        std::size_t count = 0;
        double loss = 0.0;
        const std::size_t vsz = x.cols();
        auto logprobs = std::make_shared<Tensor<S>>(x.shape);
        for (std::size_t r = 0; r < x.rows(); ++r) {
            const S* in = x.row_ptr(r);
            S* lp = logprobs->row_ptr(r);
            S mx = in[0];
            for (std::size_t j = 1; j < vsz; ++j) mx = in[j] > mx ? in[j] : mx;
            S sum = S(0);
            for (std::size_t j = 0; j < vsz; ++j) sum += std::exp(in[j] - mx);
            const S lse = mx + std::log(sum);
            for (std::size_t j = 0; j < vsz; ++j) lp[j] = in[j] - lse;
            if (targets[r] != ignore_index) {
                check(targets[r] >= 0 && static_cast<std::size_t>(targets[r]) < vsz,
                      "cross_entropy: target out of range");
                loss -= static_cast<double>(lp[targets[r]]);
                ++count;
            }
        }
        if (count == 0) return make_node(Tensor<S>::scalar(S(0)), false, nullptr);
        const S value = static_cast<S>(loss / static_cast<double>(count));
        const bool ng = needs_grad(logits);
        VarId id = make_node(Tensor<S>::scalar(value), ng, nullptr);
        if (ng)
            set_back(id, [id, logits, targets = std::move(targets), ignore_index, logprobs, count](Graph& g) {
                const S gseed = g.grad(id).data[0] / static_cast<S>(count);
                Tensor<S>& gl = g.grad(logits);
                const std::size_t vsz2 = logprobs->cols();
                for (std::size_t r = 0; r < logprobs->rows(); ++r) {
                    if (targets[r] == ignore_index) continue;
                    const S* lp = logprobs->row_ptr(r);
                    S* grow = gl.row_ptr(r);
                    for (std::size_t j = 0; j < vsz2; ++j) grow[j] += gseed * std::exp(lp[j]);
                    grow[static_cast<std::size_t>(targets[r])] -= gseed;
                }
            });
        return id;
    }

    static S sigmoid(S x) {
        if (x >= S(0)) return S(1) / (S(1) + std::exp(-x));
        const S e = std::exp(x);
        return e / (S(1) + e);
    }

  private:
    struct Node {
        Tensor<S> value;
        Tensor<S> grad;
        bool needs_grad;
        std::function<void(Graph&)> back;
    };

    void set_back(VarId id, std::function<void(Graph&)> f) {
        nodes_[static_cast<std::size_t>(id)].back = std::move(f);
    }

    static void acc(Tensor<S>& dst, const Tensor<S>& src) {
        for (std::size_t i = 0; i < dst.numel(); ++i) dst.data[i] += src.data[i];
    }

    std::vector<Node> nodes_;
};

}  // namespace moelab
