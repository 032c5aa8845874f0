#include "flowrl/tape.hpp"

#include <Eigen/Dense>
#include <cmath>

namespace flowrl {

namespace {

using MatRM = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapM = Eigen::Map<MatRM>;
using CMapM = Eigen::Map<const MatRM>;

constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;
constexpr double kLog2 = 0.69314718055994530942;

inline void check_broadcast(const Tensor& a, const Tensor& b, int& ob, int& ot, int& oc) {
    auto merge = [](int x, int y, const char* dim) {
        if (x == y) return x;
        if (x == 1) return y;
        if (y == 1) return x;
        throw ShapeError(std::string("broadcast mismatch on ") + dim);
    };
    ob = merge(a.b, b.b, "batch");
    ot = merge(a.t, b.t, "tokens");
    oc = merge(a.c, b.c, "channels");
}

inline std::size_t map_index(const Tensor& x, int i, int j, int k) {
    int ii = x.b == 1 ? 0 : i;
    int jj = x.t == 1 ? 0 : j;
    int kk = x.c == 1 ? 0 : k;
    return (std::size_t(ii) * x.t + jj) * x.c + kk;
}

}  // namespace

int Tape::push(Tensor val, bool requires_grad, std::function<void(Tape&)> back) {
    Node n;
    n.val = std::move(val);
    n.requires_grad = record_ && requires_grad;
    if (n.requires_grad) n.back = std::move(back);
    nodes_.push_back(std::move(n));
    return static_cast<int>(nodes_.size()) - 1;
}

Tensor& Tape::grad_of(int id) {
    Node& n = nodes_[id];
    if (!n.grad_alloc) {
        n.grad = Tensor(n.val.b, n.val.t, n.val.c);
        n.grad_alloc = true;
    }
    return n.grad;
}

Var Tape::constant(Tensor v) { return Var{push(std::move(v), false, nullptr)}; }

Var Tape::param(Param& p) {
    int id = push(p.value, true, nullptr);
    if (record_) param_nodes_.emplace_back(id, &p);
    return Var{id};
}

Var Tape::detach(Var x) { return Var{push(nodes_[x.id].val, false, nullptr)}; }

// ---------------------------------------------------------------------------
// elementwise binary (kind: 0 add, 1 sub, 2 mul, 3 div, 4 min)

Var Tape::binary(Var a, Var b, int kind) {
    const Tensor& av = nodes_[a.id].val;
    const Tensor& bv = nodes_[b.id].val;
    int ob, ot, oc;
    check_broadcast(av, bv, ob, ot, oc);
    Tensor out(ob, ot, oc);
    for (int i = 0; i < ob; ++i)
        for (int j = 0; j < ot; ++j)
            for (int k = 0; k < oc; ++k) {
                double x = av.data[map_index(av, i, j, k)];
                double y = bv.data[map_index(bv, i, j, k)];
                double r = 0.0;
                switch (kind) {
                    case 0: r = x + y; break;
                    case 1: r = x - y; break;
                    case 2: r = x * y; break;
                    case 3: r = x / y; break;
                    case 4: r = x <= y ? x : y; break;
                }
                out.data[(std::size_t(i) * ot + j) * oc + k] = r;
            }
    bool need = rg(a) || rg(b);
    int aid = a.id, bid = b.id;
    int id = push(std::move(out), need, nullptr);
    if (record_ && need) {
        nodes_[id].back = [id, aid, bid, kind](Tape& T) {
            const Tensor& g = T.nodes_[id].grad;
            const Tensor& av2 = T.nodes_[aid].val;
            const Tensor& bv2 = T.nodes_[bid].val;
            bool na = T.nodes_[aid].requires_grad;
            bool nb = T.nodes_[bid].requires_grad;
            Tensor* ga = na ? &T.grad_of(aid) : nullptr;
            Tensor* gb = nb ? &T.grad_of(bid) : nullptr;
            const Tensor& ov = T.nodes_[id].val;
            for (int i = 0; i < ov.b; ++i)
                for (int j = 0; j < ov.t; ++j)
                    for (int k = 0; k < ov.c; ++k) {
                        double gg = g.data[(std::size_t(i) * ov.t + j) * ov.c + k];
                        double x = av2.data[map_index(av2, i, j, k)];
                        double y = bv2.data[map_index(bv2, i, j, k)];
                        double dx = 0.0, dy = 0.0;
                        switch (kind) {
                            case 0: dx = 1.0; dy = 1.0; break;
                            case 1: dx = 1.0; dy = -1.0; break;
                            case 2: dx = y; dy = x; break;
                            case 3: dx = 1.0 / y; dy = -x / (y * y); break;
                            case 4:
                                if (x <= y) dx = 1.0;
                                else dy = 1.0;
                                break;
                        }
                        if (ga) ga->data[map_index(av2, i, j, k)] += gg * dx;
                        if (gb) gb->data[map_index(bv2, i, j, k)] += gg * dy;
                    }
        };
    }
    return Var{id};
}

Var Tape::add(Var a, Var b) { return binary(a, b, 0); }
Var Tape::sub(Var a, Var b) { return binary(a, b, 1); }
Var Tape::mul(Var a, Var b) { return binary(a, b, 2); }
Var Tape::div(Var a, Var b) { return binary(a, b, 3); }
Var Tape::minimum(Var a, Var b) { return binary(a, b, 4); }

// ---------------------------------------------------------------------------
// elementwise unary
// kind: 0 neg, 1 scale, 2 addconst, 3 tanh, 4 atanh, 5 exp, 6 log, 7 square,
//       8 sqrt, 9 silu, 10 gelu, 11 elu, 12 log(1 - tanh^2)

Var Tape::unary(Var x, int kind, double k) {
    const Tensor& xv = nodes_[x.id].val;
    Tensor out(xv.b, xv.t, xv.c);
    for (std::size_t i = 0; i < xv.size(); ++i) {
        double v = xv.data[i];
        double r = 0.0;
        switch (kind) {
            case 0: r = -v; break;
            case 1: r = k * v; break;
            case 2: r = v + k; break;
            case 3: r = std::tanh(v); break;
            case 4:
                if (std::abs(v) >= 1.0) throw DomainError("atanh domain: |x| >= 1");
                r = std::atanh(v);
                break;
            case 5: r = std::exp(v); break;
            case 6:
                if (v <= 0.0) throw DomainError("log domain: x <= 0");
                r = std::log(v);
                break;
            case 7: r = v * v; break;
            case 8:
                if (v < 0.0) throw DomainError("sqrt domain: x < 0");
                r = std::sqrt(v);
                break;
            case 9: r = v / (1.0 + std::exp(-v)); break;
            case 10: r = 0.5 * v * (1.0 + std::erf(v * kInvSqrt2)); break;
            case 11: r = v >= 0.0 ? v : std::expm1(v); break;
            // log(1 - tanh^2 v) = 2 (log 2 - |v| - log1p(e^{-2|v|})), stable
            // even where tanh saturates to +-1 in double precision
            case 12: r = 2.0 * (kLog2 - std::abs(v) - std::log1p(std::exp(-2.0 * std::abs(v)))); break;
        }
        out.data[i] = r;
    }
    int xid = x.id;
    bool need = rg(x);
    int id = push(std::move(out), need, nullptr);
    if (record_ && need) {
        nodes_[id].back = [id, xid, kind, k](Tape& T) {
            const Tensor& g = T.nodes_[id].grad;
            const Tensor& xv2 = T.nodes_[xid].val;
            const Tensor& yv = T.nodes_[id].val;
            Tensor& gx = T.grad_of(xid);
            for (std::size_t i = 0; i < xv2.size(); ++i) {
                double v = xv2.data[i];
                double y = yv.data[i];
                double d = 0.0;
                switch (kind) {
                    case 0: d = -1.0; break;
                    case 1: d = k; break;
                    case 2: d = 1.0; break;
                    case 3: d = 1.0 - y * y; break;
                    case 4: d = 1.0 / (1.0 - v * v); break;
                    case 5: d = y; break;
                    case 6: d = 1.0 / v; break;
                    case 7: d = 2.0 * v; break;
                    case 8: d = 0.5 / (y > 0.0 ? y : 1e-300); break;
                    case 9: {
                        double s = 1.0 / (1.0 + std::exp(-v));
                        d = s * (1.0 + v * (1.0 - s));
                        break;
                    }
                    case 10:
                        d = 0.5 * (1.0 + std::erf(v * kInvSqrt2)) +
                            v * kInvSqrt2Pi * std::exp(-0.5 * v * v);
                        break;
                    case 11: d = v >= 0.0 ? 1.0 : y + 1.0; break;
                    case 12: d = -2.0 * std::tanh(v); break;
                }
                gx.data[i] += g.data[i] * d;
            }
        };
    }
    return Var{id};
}

Var Tape::neg(Var x) { return unary(x, 0, 0.0); }
Var Tape::scale(Var x, double k) { return unary(x, 1, k); }
Var Tape::add_const(Var x, double k) { return unary(x, 2, k); }
Var Tape::tanh(Var x) { return unary(x, 3, 0.0); }
Var Tape::atanh(Var x) { return unary(x, 4, 0.0); }
Var Tape::exp(Var x) { return unary(x, 5, 0.0); }
Var Tape::log(Var x) { return unary(x, 6, 0.0); }
Var Tape::square(Var x) { return unary(x, 7, 0.0); }
Var Tape::sqrt(Var x) { return unary(x, 8, 0.0); }
Var Tape::silu(Var x) { return unary(x, 9, 0.0); }
Var Tape::gelu(Var x) { return unary(x, 10, 0.0); }
Var Tape::elu(Var x) { return unary(x, 11, 0.0); }
Var Tape::log1m_tanh_sq(Var x) { return unary(x, 12, 0.0); }

// ---------------------------------------------------------------------------
// matmul family

Var Tape::linear(Var x, Var w, Var bias) {
    const Tensor& xv = nodes_[x.id].val;
    const Tensor& wv = nodes_[w.id].val;
    if (wv.b != 1 || xv.c != wv.t) throw ShapeError("linear: weight shape mismatch");
    int rows = xv.b * xv.t;
    Tensor out(xv.b, xv.t, wv.c);
    {
        CMapM X(xv.data.data(), rows, xv.c);
        CMapM W(wv.data.data(), wv.t, wv.c);
        MapM Y(out.data.data(), rows, wv.c);
        Y.noalias() = X * W;
    }
    bool has_bias = bias.valid();
    if (has_bias) {
        const Tensor& bv = nodes_[bias.id].val;
        if (bv.c != wv.c) throw ShapeError("linear: bias shape mismatch");
        for (int r = 0; r < rows; ++r)
            for (int k = 0; k < wv.c; ++k) out.data[std::size_t(r) * wv.c + k] += bv.data[k];
    }
    bool need = rg(x) || rg(w) || (has_bias && rg(bias));
    int xid = x.id, wid = w.id, bid = has_bias ? bias.id : -1;
    int id = push(std::move(out), need, nullptr);
    if (record_ && need) {
        nodes_[id].back = [id, xid, wid, bid](Tape& T) {
            const Tensor& g = T.nodes_[id].grad;
            const Tensor& xv2 = T.nodes_[xid].val;
            const Tensor& wv2 = T.nodes_[wid].val;
            int rows2 = xv2.b * xv2.t;
            CMapM G(g.data.data(), rows2, wv2.c);
            CMapM X(xv2.data.data(), rows2, xv2.c);
            CMapM W(wv2.data.data(), wv2.t, wv2.c);
            if (T.nodes_[xid].requires_grad) {
                Tensor& gx = T.grad_of(xid);
                MapM GX(gx.data.data(), rows2, xv2.c);
                GX.noalias() += G * W.transpose();
            }
            if (T.nodes_[wid].requires_grad) {
                Tensor& gw = T.grad_of(wid);
                MapM GW(gw.data.data(), wv2.t, wv2.c);
                GW.noalias() += X.transpose() * G;
            }
            if (bid >= 0 && T.nodes_[bid].requires_grad) {
                Tensor& gb = T.grad_of(bid);
                MapM GB(gb.data.data(), 1, wv2.c);
                GB.noalias() += G.colwise().sum();
            }
        };
    }
    return Var{id};
}

Var Tape::qk_scores(Var q, Var k, double scale) {
    const Tensor& qv = nodes_[q.id].val;
    const Tensor& kv = nodes_[k.id].val;
    if (qv.b != kv.b || qv.c != kv.c) throw ShapeError("qk_scores: shape mismatch");
    Tensor out(qv.b, qv.t, kv.t);
    for (int i = 0; i < qv.b; ++i) {
        CMapM Q(qv.data.data() + std::size_t(i) * qv.t * qv.c, qv.t, qv.c);
        CMapM K(kv.data.data() + std::size_t(i) * kv.t * kv.c, kv.t, kv.c);
        MapM S(out.data.data() + std::size_t(i) * qv.t * kv.t, qv.t, kv.t);
        S.noalias() = scale * (Q * K.transpose());
    }
    bool need = rg(q) || rg(k);
    int qid = q.id, kid = k.id;
    int id = push(std::move(out), need, nullptr);
    if (record_ && need) {
        nodes_[id].back = [id, qid, kid, scale](Tape& T) {
            const Tensor& g = T.nodes_[id].grad;
            const Tensor& qv2 = T.nodes_[qid].val;
            const Tensor& kv2 = T.nodes_[kid].val;
            for (int i = 0; i < qv2.b; ++i) {
                CMapM G(g.data.data() + std::size_t(i) * qv2.t * kv2.t, qv2.t, kv2.t);
                CMapM Q(qv2.data.data() + std::size_t(i) * qv2.t * qv2.c, qv2.t, qv2.c);
                CMapM K(kv2.data.data() + std::size_t(i) * kv2.t * kv2.c, kv2.t, kv2.c);
                if (T.nodes_[qid].requires_grad) {
                    Tensor& gq = T.grad_of(qid);
                    MapM GQ(gq.data.data() + std::size_t(i) * qv2.t * qv2.c, qv2.t, qv2.c);
                    GQ.noalias() += scale * (G * K);
                }
                if (T.nodes_[kid].requires_grad) {
                    Tensor& gk = T.grad_of(kid);
                    MapM GK(gk.data.data() + std::size_t(i) * kv2.t * kv2.c, kv2.t, kv2.c);
                    GK.noalias() += scale * (G.transpose() * Q);
                }
            }
        };
    }
    return Var{id};
}

Var Tape::attn_mix(Var s, Var v) {
    const Tensor& sv = nodes_[s.id].val;
    const Tensor& vv = nodes_[v.id].val;
    if (sv.b != vv.b || sv.c != vv.t) throw ShapeError("attn_mix: shape mismatch");
    Tensor out(sv.b, sv.t, vv.c);
    for (int i = 0; i < sv.b; ++i) {
        CMapM S(sv.data.data() + std::size_t(i) * sv.t * sv.c, sv.t, sv.c);
        CMapM V(vv.data.data() + std::size_t(i) * vv.t * vv.c, vv.t, vv.c);
        MapM Y(out.data.data() + std::size_t(i) * sv.t * vv.c, sv.t, vv.c);
        Y.noalias() = S * V;
    }
    bool need = rg(s) || rg(v);
    int sid = s.id, vid = v.id;
    int id = push(std::move(out), need, nullptr);
    if (record_ && need) {
        nodes_[id].back = [id, sid, vid](Tape& T) {
            const Tensor& g = T.nodes_[id].grad;
            const Tensor& sv2 = T.nodes_[sid].val;
            const Tensor& vv2 = T.nodes_[vid].val;
            for (int i = 0; i < sv2.b; ++i) {
                CMapM G(g.data.data() + std::size_t(i) * sv2.t * vv2.c, sv2.t, vv2.c);
                CMapM S(sv2.data.data() + std::size_t(i) * sv2.t * sv2.c, sv2.t, sv2.c);
                CMapM V(vv2.data.data() + std::size_t(i) * vv2.t * vv2.c, vv2.t, vv2.c);
                if (T.nodes_[sid].requires_grad) {
                    Tensor& gs = T.grad_of(sid);
                    MapM GS(gs.data.data() + std::size_t(i) * sv2.t * sv2.c, sv2.t, sv2.c);
                    GS.noalias() += G * V.transpose();
                }
                if (T.nodes_[vid].requires_grad) {
                    Tensor& gv = T.grad_of(vid);
                    MapM GV(gv.data.data() + std::size_t(i) * vv2.t * vv2.c, vv2.t, vv2.c);
                    GV.noalias() += S.transpose() * G;
                }
            }
        };
    }
    return Var{id};
}

// ---------------------------------------------------------------------------
// reductions

Var Tape::sum_all(Var x) {
    const Tensor& xv = nodes_[x.id].val;
    double s = 0.0;
    for (double v : xv.data) s += v;
    bool need = rg(x);
    int xid = x.id;
    int id = push(Tensor::scalar(s), need, nullptr);
    if (record_ && need) {
        nodes_[id].back = [id, xid](Tape& T) {
            double g = T.nodes_[id].grad.item();
            Tensor& gx = T.grad_of(xid);
            for (auto& v : gx.data) v += g;
        };
    }
    return Var{id};
}

Var Tape::mean_all(Var x) {
    const Tensor& xv = nodes_[x.id].val;
    return scale(sum_all(x), 1.0 / double(xv.size()));
}

Var Tape::sum_batch(Var x) {
    const Tensor& xv = nodes_[x.id].val;
    Tensor out(xv.b, 1, 1);
    std::size_t per = std::size_t(xv.t) * xv.c;
    for (int i = 0; i < xv.b; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < per; ++j) s += xv.data[i * per + j];
        out.data[i] = s;
    }
    bool need = rg(x);
    int xid = x.id;
    int id = push(std::move(out), need, nullptr);
    if (record_ && need) {
        nodes_[id].back = [id, xid](Tape& T) {
            const Tensor& g = T.nodes_[id].grad;
            Tensor& gx = T.grad_of(xid);
            std::size_t per2 = std::size_t(gx.t) * gx.c;
            for (int i = 0; i < gx.b; ++i)
                for (std::size_t j = 0; j < per2; ++j) gx.data[i * per2 + j] += g.data[i];
        };
    }
    return Var{id};
}

Var Tape::sum_channels(Var x) {
    const Tensor& xv = nodes_[x.id].val;
    Tensor out(xv.b, xv.t, 1);
    for (int i = 0; i < xv.b; ++i)
        for (int j = 0; j < xv.t; ++j) {
            double s = 0.0;
            for (int k = 0; k < xv.c; ++k) s += xv.at(i, j, k);
            out.at(i, j, 0) = s;
        }
    bool need = rg(x);
    int xid = x.id;
    int id = push(std::move(out), need, nullptr);
    if (record_ && need) {
        nodes_[id].back = [id, xid](Tape& T) {
            const Tensor& g = T.nodes_[id].grad;
            Tensor& gx = T.grad_of(xid);
            for (int i = 0; i < gx.b; ++i)
                for (int j = 0; j < gx.t; ++j)
                    for (int k = 0; k < gx.c; ++k) gx.at(i, j, k) += g.at(i, j, 0);
        };
    }
    return Var{id};
}

Var Tape::mean_channels(Var x) {
    const Tensor& xv = nodes_[x.id].val;
    return scale(sum_channels(x), 1.0 / double(xv.c));
}

// ---------------------------------------------------------------------------
// softmax over channels

Var Tape::softmax(Var x) {
    const Tensor& xv = nodes_[x.id].val;
    Tensor out(xv.b, xv.t, xv.c);
    for (int i = 0; i < xv.b; ++i)
        for (int j = 0; j < xv.t; ++j) {
            double mx = xv.at(i, j, 0);
            for (int k = 1; k < xv.c; ++k) mx = std::max(mx, xv.at(i, j, k));
            double z = 0.0;
            for (int k = 0; k < xv.c; ++k) {
                double e = std::exp(xv.at(i, j, k) - mx);
                out.at(i, j, k) = e;
                z += e;
            }
            for (int k = 0; k < xv.c; ++k) out.at(i, j, k) /= z;
        }
    bool need = rg(x);
    int xid = x.id;
    int id = push(std::move(out), need, nullptr);
    if (record_ && need) {
        nodes_[id].back = [id, xid](Tape& T) {
            const Tensor& g = T.nodes_[id].grad;
            const Tensor& y = T.nodes_[id].val;
            Tensor& gx = T.grad_of(xid);
            for (int i = 0; i < y.b; ++i)
                for (int j = 0; j < y.t; ++j) {
                    double dot = 0.0;
                    for (int k = 0; k < y.c; ++k) dot += g.at(i, j, k) * y.at(i, j, k);
                    for (int k = 0; k < y.c; ++k)
                        gx.at(i, j, k) += y.at(i, j, k) * (g.at(i, j, k) - dot);
                }
        };
    }
    return Var{id};
}

Var Tape::log_softmax(Var x) {
    const Tensor& xv = nodes_[x.id].val;
    Tensor out(xv.b, xv.t, xv.c);
    for (int i = 0; i < xv.b; ++i)
        for (int j = 0; j < xv.t; ++j) {
            double mx = xv.at(i, j, 0);
            for (int k = 1; k < xv.c; ++k) mx = std::max(mx, xv.at(i, j, k));
            double z = 0.0;
            for (int k = 0; k < xv.c; ++k) z += std::exp(xv.at(i, j, k) - mx);
            double lse = mx + std::log(z);
            for (int k = 0; k < xv.c; ++k) out.at(i, j, k) = xv.at(i, j, k) - lse;
        }
    bool need = rg(x);
    int xid = x.id;
    int id = push(std::move(out), need, nullptr);
    if (record_ && need) {
        nodes_[id].back = [id, xid](Tape& T) {
            const Tensor& g = T.nodes_[id].grad;
            const Tensor& y = T.nodes_[id].val;
            Tensor& gx = T.grad_of(xid);
            for (int i = 0; i < y.b; ++i)
                for (int j = 0; j < y.t; ++j) {
                    double gs = 0.0;
                    for (int k = 0; k < y.c; ++k) gs += g.at(i, j, k);
                    for (int k = 0; k < y.c; ++k)
                        gx.at(i, j, k) += g.at(i, j, k) - std::exp(y.at(i, j, k)) * gs;
                }
        };
    }
    return Var{id};
}

// ---------------------------------------------------------------------------
// token / channel structure

Var Tape::concat_tokens(const std::vector<Var>& xs) {
    if (xs.empty()) throw ArgumentError("concat_tokens: empty list");
    const Tensor& first = nodes_[xs[0].id].val;
    int total_t = 0;
    bool need = false;
    for (Var x : xs) {
        const Tensor& v = nodes_[x.id].val;
        if (v.b != first.b || v.c != first.c) throw ShapeError("concat_tokens: shape mismatch");
        total_t += v.t;
        need = need || rg(x);
    }
    Tensor out(first.b, total_t, first.c);
    int off = 0;
    for (Var x : xs) {
        const Tensor& v = nodes_[x.id].val;
        for (int i = 0; i < v.b; ++i)
            for (int j = 0; j < v.t; ++j)
                for (int k = 0; k < v.c; ++k) out.at(i, off + j, k) = v.at(i, j, k);
        off += v.t;
    }
    std::vector<int> ids;
    for (Var x : xs) ids.push_back(x.id);
    int id = push(std::move(out), need, nullptr);
    if (record_ && need) {
        nodes_[id].back = [id, ids](Tape& T) {
            const Tensor& g = T.nodes_[id].grad;
            int off2 = 0;
            for (int xid : ids) {
                const Tensor& v = T.nodes_[xid].val;
                if (T.nodes_[xid].requires_grad) {
                    Tensor& gx = T.grad_of(xid);
                    for (int i = 0; i < v.b; ++i)
                        for (int j = 0; j < v.t; ++j)
                            for (int k = 0; k < v.c; ++k)
                                gx.at(i, j, k) += g.at(i, off2 + j, k);
                }
                off2 += v.t;
            }
        };
    }
    return Var{id};
}

Var Tape::slice_tokens(Var x, int start, int len) {
    const Tensor& xv = nodes_[x.id].val;
    if (start < 0 || start + len > xv.t) throw ShapeError("slice_tokens: out of range");
    Tensor out(xv.b, len, xv.c);
    for (int i = 0; i < xv.b; ++i)
        for (int j = 0; j < len; ++j)
            for (int k = 0; k < xv.c; ++k) out.at(i, j, k) = xv.at(i, start + j, k);
    bool need = rg(x);
    int xid = x.id;
    int id = push(std::move(out), need, nullptr);
    if (record_ && need) {
        nodes_[id].back = [id, xid, start, len](Tape& T) {
            const Tensor& g = T.nodes_[id].grad;
            Tensor& gx = T.grad_of(xid);
            for (int i = 0; i < g.b; ++i)
                for (int j = 0; j < len; ++j)
                    for (int k = 0; k < g.c; ++k) gx.at(i, start + j, k) += g.at(i, j, k);
        };
    }
    return Var{id};
}

Var Tape::gather_tokens(Var x, std::vector<int> idx) {
    const Tensor& xv = nodes_[x.id].val;
    for (int j : idx)
        if (j < 0 || j >= xv.t) throw ShapeError("gather_tokens: index out of range");
    Tensor out(xv.b, static_cast<int>(idx.size()), xv.c);
    for (int i = 0; i < xv.b; ++i)
        for (std::size_t j = 0; j < idx.size(); ++j)
            for (int k = 0; k < xv.c; ++k) out.at(i, int(j), k) = xv.at(i, idx[j], k);
    bool need = rg(x);
    int xid = x.id;
    int id = push(std::move(out), need, nullptr);
    if (record_ && need) {
        nodes_[id].back = [id, xid, idx](Tape& T) {
            const Tensor& g = T.nodes_[id].grad;
            Tensor& gx = T.grad_of(xid);
            for (int i = 0; i < g.b; ++i)
                for (std::size_t j = 0; j < idx.size(); ++j)
                    for (int k = 0; k < g.c; ++k) gx.at(i, idx[j], k) += g.at(i, int(j), k);
        };
    }
    return Var{id};
}

Var Tape::concat_channels(const std::vector<Var>& xs) {
    if (xs.empty()) throw ArgumentError("concat_channels: empty list");
    const Tensor& first = nodes_[xs[0].id].val;
    int total_c = 0;
    bool need = false;
    for (Var x : xs) {
        const Tensor& v = nodes_[x.id].val;
        if (v.b != first.b || v.t != first.t) throw ShapeError("concat_channels: shape mismatch");
        total_c += v.c;
        need = need || rg(x);
    }
    Tensor out(first.b, first.t, total_c);
    int off = 0;
    for (Var x : xs) {
        const Tensor& v = nodes_[x.id].val;
        for (int i = 0; i < v.b; ++i)
            for (int j = 0; j < v.t; ++j)
                for (int k = 0; k < v.c; ++k) out.at(i, j, off + k) = v.at(i, j, k);
        off += v.c;
    }
    std::vector<int> ids;
    for (Var x : xs) ids.push_back(x.id);
    int id = push(std::move(out), need, nullptr);
    if (record_ && need) {
        nodes_[id].back = [id, ids](Tape& T) {
            const Tensor& g = T.nodes_[id].grad;
            int off2 = 0;
            for (int xid : ids) {
                const Tensor& v = T.nodes_[xid].val;
                if (T.nodes_[xid].requires_grad) {
                    Tensor& gx = T.grad_of(xid);
                    for (int i = 0; i < v.b; ++i)
                        for (int j = 0; j < v.t; ++j)
                            for (int k = 0; k < v.c; ++k)
                                gx.at(i, j, k) += g.at(i, j, off2 + k);
                }
                off2 += v.c;
            }
        };
    }
    return Var{id};
}

Var Tape::slice_channels(Var x, int start, int len) {
    const Tensor& xv = nodes_[x.id].val;
    if (start < 0 || start + len > xv.c) throw ShapeError("slice_channels: out of range");
    Tensor out(xv.b, xv.t, len);
    for (int i = 0; i < xv.b; ++i)
        for (int j = 0; j < xv.t; ++j)
            for (int k = 0; k < len; ++k) out.at(i, j, k) = xv.at(i, j, start + k);
    bool need = rg(x);
    int xid = x.id;
    int id = push(std::move(out), need, nullptr);
    if (record_ && need) {
        nodes_[id].back = [id, xid, start, len](Tape& T) {
            const Tensor& g = T.nodes_[id].grad;
            Tensor& gx = T.grad_of(xid);
            for (int i = 0; i < g.b; ++i)
                for (int j = 0; j < g.t; ++j)
                    for (int k = 0; k < len; ++k) gx.at(i, j, start + k) += g.at(i, j, k);
        };
    }
    return Var{id};
}

Var Tape::dropout(Var x, double rate, Rng& rng) {
    if (rate <= 0.0) return x;
    if (rate >= 1.0) throw ConfigError("dropout rate must be < 1");
    const Tensor& xv = nodes_[x.id].val;
    std::vector<char> mask(xv.size());
    double keep = 1.0 - rate;
    Tensor out(xv.b, xv.t, xv.c);
    for (std::size_t i = 0; i < xv.size(); ++i) {
        mask[i] = rng.uniform() < keep ? 1 : 0;
        out.data[i] = mask[i] ? xv.data[i] / keep : 0.0;
    }
    bool need = rg(x);
    int xid = x.id;
    int id = push(std::move(out), need, nullptr);
    if (record_ && need) {
        nodes_[id].back = [id, xid, mask, keep](Tape& T) {
            const Tensor& g = T.nodes_[id].grad;
            Tensor& gx = T.grad_of(xid);
            for (std::size_t i = 0; i < gx.size(); ++i)
                if (mask[i]) gx.data[i] += g.data[i] / keep;
        };
    }
    return Var{id};
}

Var Tape::reshape(Var x, int b, int t, int c) {
    const Tensor& xv = nodes_[x.id].val;
    if (std::size_t(b) * t * c != xv.size()) throw ShapeError("reshape: element count mismatch");
    Tensor out(b, t, c);
    out.data = xv.data;
    bool need = rg(x);
    int xid = x.id;
    int id = push(std::move(out), need, nullptr);
    if (record_ && need) {
        nodes_[id].back = [id, xid](Tape& T) {
            const Tensor& g = T.nodes_[id].grad;
            Tensor& gx = T.grad_of(xid);
            for (std::size_t i = 0; i < gx.size(); ++i) gx.data[i] += g.data[i];
        };
    }
    return Var{id};
}

void Tape::backward(Var loss) {
    if (!record_) throw ArgumentError("backward on a non-recording tape");
    if (nodes_[loss.id].val.size() != 1) throw ShapeError("backward: loss must be scalar");
    grad_of(loss.id).data[0] = 1.0;
    for (int i = loss.id; i >= 0; --i) {
        Node& n = nodes_[i];
        if (n.requires_grad && n.grad_alloc && n.back) n.back(*this);
    }
    for (auto& [id, p] : param_nodes_) {
        Node& n = nodes_[id];
        if (!n.grad_alloc) continue;
        for (std::size_t i = 0; i < p->grad.size(); ++i) p->grad.data[i] += n.grad.data[i];
    }
}

}  // namespace flowrl
