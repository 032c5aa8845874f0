#include "flowrl/flow.hpp"

#include <algorithm>
#include <cmath>

namespace flowrl {

namespace {
constexpr double kLog2Pi = 1.8378770664093454836;
constexpr double kClipMargin = 1e-4;
}  // namespace

std::pair<Tensor, std::vector<double>> bound_forward(const Tensor& a) {
    Tensor z(a.b, a.t, a.c);
    std::vector<double> log_det(a.b, 0.0);
    std::size_t per = std::size_t(a.t) * a.c;
    for (int i = 0; i < a.b; ++i) {
        double ld = 0.0;
        for (std::size_t j = 0; j < per; ++j) {
            double v = a.data[i * per + j];
            if (std::abs(v) >= 1.0) throw DomainError("bound_forward: |a| >= 1");
            z.data[i * per + j] = std::atanh(v);
            ld += -std::log(1.0 - v * v);
        }
        log_det[i] = ld;
    }
    return {std::move(z), std::move(log_det)};
}

FlowModel::FlowModel(const TrainConfig& cfg, int obs_dim, int action_dim)
    : cfg_(cfg), obs_dim_(obs_dim), action_dim_(action_dim) {
    cfg_.validate();
    if (obs_dim < 1 || action_dim < 1) throw ConfigError("flow: dims must be positive");
    Rng rng(cfg_.seed);

    // For H == 1 the per-timestep partition degenerates, so the flow tokens
    // become the action channels instead.
    int ft = flow_tokens();
    for (int k = 0; k < cfg_.flow_depth; ++k) {
        std::vector<int> order(ft);
        for (int i = 0; i < ft; ++i) order[i] = i;
        for (int i = ft - 1; i > 0; --i) std::swap(order[i], order[rng.index(i + 1)]);
        int n1 = (ft + 1) / 2;
        std::vector<int> k1(order.begin(), order.begin() + n1);
        std::vector<int> k2(order.begin() + n1, order.end());
        std::sort(k1.begin(), k1.end());
        std::sort(k2.begin(), k2.end());
        k1_.push_back(std::move(k1));
        k2_.push_back(std::move(k2));
    }

    int hid = cfg_.hidden;
    obs_proj_ = LinearLayer(store_, "enc.obs", obs_dim_, hid, rng);
    if (cfg_.prefix_len > 0) {
        prefix_proj_ = LinearLayer(store_, "enc.prefix", action_dim_, hid, rng);
        prefix_pos_ = &store_.create("enc.prefix_pos",
                                     Tensor::randn(1, cfg_.prefix_len, hid, rng, 0.02));
    }

    int fc = flow_channels();
    int ffhid = 2 * hid;
    blocks_.resize(cfg_.flow_depth);
    for (int k = 0; k < cfg_.flow_depth; ++k) {
        Block& b = blocks_[k];
        b.k1 = k1_[k];
        b.k2 = k2_[k];
        b.scatter.assign(ft, 0);
        {
            std::vector<int> perm;
            perm.insert(perm.end(), b.k1.begin(), b.k1.end());
            perm.insert(perm.end(), b.k2.begin(), b.k2.end());
            for (int j = 0; j < ft; ++j) b.scatter[perm[j]] = j;
        }
        std::string pre = "flow." + std::to_string(k);
        b.emb = LinearLayer(store_, pre + ".emb", fc, hid, rng);
        b.pos = &store_.create(pre + ".pos", Tensor::randn(1, ft, hid, rng, 0.02));
        b.n_self = RMSNorm(store_, pre + ".n_self", hid);
        b.self_attn = MultiheadAttention(store_, pre + ".self", hid, cfg_.heads, rng);
        b.n_cross = RMSNorm(store_, pre + ".n_cross", hid);
        b.cross_attn = MultiheadAttention(store_, pre + ".cross", hid, cfg_.heads, rng);
        b.n_ff = RMSNorm(store_, pre + ".n_ff", hid);
        b.ff = SwiGLU(store_, pre + ".ff", hid, ffhid, rng);
        int n2 = static_cast<int>(b.k2.size());
        if (n2 > 0) {
            b.queries = &store_.create(pre + ".queries", Tensor::randn(1, n2, hid, rng, 0.02));
            b.n_qcross = RMSNorm(store_, pre + ".n_qcross", hid);
            b.q_cross = MultiheadAttention(store_, pre + ".qcross", hid, cfg_.heads, rng);
            b.n_qff = RMSNorm(store_, pre + ".n_qff", hid);
            b.q_ff = SwiGLU(store_, pre + ".qff", hid, ffhid, rng);
            b.head_s1 = LinearLayer(store_, pre + ".s1", hid, hid, rng);
            b.head_s2 = LinearLayer(store_, pre + ".s2", hid, fc, rng, /*zero_init=*/true);
            b.head_b1 = LinearLayer(store_, pre + ".b1", hid, hid, rng);
            b.head_b2 = LinearLayer(store_, pre + ".b2", hid, fc, rng, /*zero_init=*/true);
        }
    }
}

int FlowModel::flow_tokens() const { return cfg_.chunk_len > 1 ? cfg_.chunk_len : action_dim_; }
int FlowModel::flow_channels() const { return cfg_.chunk_len > 1 ? action_dim_ : 1; }

void FlowModel::set_partitions(const std::vector<std::vector<int>>& k1,
                               const std::vector<std::vector<int>>& k2) {
    if (static_cast<int>(k1.size()) != cfg_.flow_depth || k2.size() != k1.size())
        throw ShapeError("set_partitions: wrong block count");
    k1_ = k1;
    k2_ = k2;
    int ft = flow_tokens();
    for (int k = 0; k < cfg_.flow_depth; ++k) {
        Block& b = blocks_[k];
        b.k1 = k1_[k];
        b.k2 = k2_[k];
        std::vector<int> perm;
        perm.insert(perm.end(), b.k1.begin(), b.k1.end());
        perm.insert(perm.end(), b.k2.begin(), b.k2.end());
        if (static_cast<int>(perm.size()) != ft)
            throw ShapeError("set_partitions: partition does not cover tokens");
        b.scatter.assign(ft, 0);
        for (int j = 0; j < ft; ++j) b.scatter[perm[j]] = j;
    }
}

Var FlowModel::encode_context_t(Tape& tape, Var obs, Var prefix) const {
    Var obs_tok = obs_proj_.apply(tape, obs);
    if (cfg_.prefix_len == 0) return obs_tok;
    Var pre_tok = prefix_proj_.apply(tape, prefix);
    pre_tok = tape.add(pre_tok, tape.param(*prefix_pos_));
    return tape.concat_tokens({obs_tok, pre_tok});
}

std::pair<Var, Var> FlowModel::conditioner(Tape& tape, const Block& blk, Var x1, Var ctx,
                                           double dropout, Rng& rng) const {
    Var x = blk.emb.apply(tape, x1);
    x = tape.add(x, tape.gather_tokens(tape.param(*blk.pos), blk.k1));
    x = tape.add(x, blk.self_attn.apply(tape, blk.n_self.apply(tape, x), blk.n_self.apply(tape, x)));
    x = tape.add(x, blk.cross_attn.apply(tape, blk.n_cross.apply(tape, x), ctx));
    x = tape.add(x, blk.ff.apply(tape, blk.n_ff.apply(tape, x), dropout, rng));

    Var q = tape.add(tape.param(*blk.queries), tape.gather_tokens(tape.param(*blk.pos), blk.k2));
    const Tensor& xv = tape.val(x);
    if (xv.b > 1) {  // broadcast shared queries across the batch
        q = tape.add(q, tape.constant(Tensor::zeros(xv.b, int(blk.k2.size()), 1)));
    }
    q = tape.add(q, blk.q_cross.apply(tape, blk.n_qcross.apply(tape, q), x));
    q = tape.add(q, blk.q_ff.apply(tape, blk.n_qff.apply(tape, q), dropout, rng));

    Var s = blk.head_s2.apply(tape, tape.gelu(blk.head_s1.apply(tape, q)));
    Var b = blk.head_b2.apply(tape, tape.gelu(blk.head_b1.apply(tape, q)));
    return {s, b};
}

Var FlowModel::scatter_chunk(Tape& tape, const Block& blk, Var y1, Var y2) const {
    return tape.gather_tokens(tape.concat_tokens({y1, y2}), blk.scatter);
}

std::pair<Var, Var> FlowModel::forward_t(Tape& tape, Var a, Var ctx, double dropout,
                                         Rng& rng) const {
    const Tensor& av = tape.val(a);
    int B = av.b;
    Var one_minus_sq = tape.add_const(tape.neg(tape.square(a)), 1.0);
    Var log_det = tape.sum_batch(tape.neg(tape.log(one_minus_sq)));
    Var x = tape.atanh(a);
    x = tape.reshape(x, B, flow_tokens(), flow_channels());
    for (int k = cfg_.flow_depth - 1; k >= 0; --k) {
        const Block& blk = blocks_[k];
        if (blk.k2.empty()) continue;
        Var x1 = tape.gather_tokens(x, blk.k1);
        Var x2 = tape.gather_tokens(x, blk.k2);
        auto [s, b] = conditioner(tape, blk, x1, ctx, dropout, rng);
        Var ts = tape.tanh(s);
        Var y2 = tape.mul(tape.sub(x2, b), tape.exp(tape.neg(ts)));
        x = scatter_chunk(tape, blk, x1, y2);
        log_det = tape.add(log_det, tape.sum_batch(tape.neg(ts)));
    }
    x = tape.reshape(x, B, cfg_.chunk_len, action_dim_);
    return {x, log_det};
}

std::pair<Var, Var> FlowModel::inverse_t(Tape& tape, Var z0, Var ctx, double dropout,
                                         Rng& rng) const {
    const Tensor& zv = tape.val(z0);
    int B = zv.b;
    Var x = tape.reshape(z0, B, flow_tokens(), flow_channels());
    Var log_det = tape.constant(Tensor::zeros(B, 1, 1));
    for (int k = 0; k < cfg_.flow_depth; ++k) {
        const Block& blk = blocks_[k];
        if (blk.k2.empty()) continue;
        Var x1 = tape.gather_tokens(x, blk.k1);
        Var x2 = tape.gather_tokens(x, blk.k2);
        auto [s, b] = conditioner(tape, blk, x1, ctx, dropout, rng);
        Var ts = tape.tanh(s);
        Var y2 = tape.add(tape.mul(tape.exp(ts), x2), b);
        x = scatter_chunk(tape, blk, x1, y2);
        log_det = tape.add(log_det, tape.sum_batch(ts));
    }
    x = tape.reshape(x, B, cfg_.chunk_len, action_dim_);
    Var a = tape.tanh(x);
    log_det = tape.add(log_det, tape.sum_batch(tape.log1m_tanh_sq(x)));
    return {a, log_det};
}

Var FlowModel::base_log_prob_t(Tape& tape, Var z0) const {
    const Tensor& zv = tape.val(z0);
    double d = double(zv.t) * zv.c;
    Var sq = tape.scale(tape.sum_batch(tape.square(z0)), -0.5);
    return tape.add_const(sq, -0.5 * d * kLog2Pi);
}

Var FlowModel::log_prob_t(Tape& tape, Var a, Var ctx, double dropout, Rng& rng) const {
    auto [z0, log_det] = forward_t(tape, a, ctx, dropout, rng);
    return tape.add(base_log_prob_t(tape, z0), log_det);
}

Var FlowModel::il_loss_t(Tape& tape, const Tensor& obs, const Tensor& prefix,
                         const Tensor& targets, double dropout, Rng& rng) const {
    int B = targets.b;
    if (B < 1) throw ArgumentError("il_loss: empty batch");
    Tensor perturbed = targets;
    double lim = 1.0 - kClipMargin;
    for (auto& v : perturbed.data) {
        v += rng.normal(0.0, cfg_.sigma_noise);
        v = std::clamp(v, -lim, lim);
    }
    Tensor pfx = prefix;
    if (cfg_.prefix_dropout > 0.0 && cfg_.prefix_len > 0) {
        for (int i = 0; i < pfx.b; ++i)
            if (rng.uniform() < cfg_.prefix_dropout)
                for (int t = 0; t < pfx.t; ++t)
                    for (int k = 0; k < pfx.c; ++k) pfx.at(i, t, k) = 0.0;
    }
    Var a = tape.constant(std::move(perturbed));
    Var ctx = encode_context_t(tape, tape.constant(obs), tape.constant(pfx));
    Var lp = log_prob_t(tape, a, ctx, dropout, rng);
    return tape.scale(tape.sum_all(lp), -1.0 / double(B));
}

ConditioningContext FlowModel::encode_context(const Tensor& obs, const Tensor& prefix) const {
    if (obs.c != obs_dim_ || obs.t != 1) throw ShapeError("encode_context: bad observation shape");
    if (cfg_.prefix_len > 0 &&
        (prefix.t != cfg_.prefix_len || prefix.c != action_dim_ || prefix.b != obs.b))
        throw ShapeError("encode_context: bad prefix shape");
    Tape tape(false);
    Rng dummy;
    Var ctx = encode_context_t(tape, tape.constant(obs), tape.constant(prefix));
    return ConditioningContext{tape.val(ctx)};
}

std::pair<Tensor, std::vector<double>> FlowModel::flow_forward(
    const Tensor& a, const ConditioningContext& ctx) const {
    Tape tape(false);
    Rng dummy;
    auto [z, ld] = forward_t(tape, tape.constant(a), tape.constant(ctx.tokens), 0.0, dummy);
    const Tensor& ldv = tape.val(ld);
    return {tape.val(z), std::vector<double>(ldv.data.begin(), ldv.data.end())};
}

std::pair<Tensor, std::vector<double>> FlowModel::flow_inverse(
    const Tensor& z0, const ConditioningContext& ctx) const {
    Tape tape(false);
    Rng dummy;
    auto [a, ld] = inverse_t(tape, tape.constant(z0), tape.constant(ctx.tokens), 0.0, dummy);
    const Tensor& ldv = tape.val(ld);
    return {tape.val(a), std::vector<double>(ldv.data.begin(), ldv.data.end())};
}

std::vector<double> FlowModel::log_prob(const Tensor& a, const ConditioningContext& ctx) const {
    Tape tape(false);
    Rng dummy;
    Var lp = log_prob_t(tape, tape.constant(a), tape.constant(ctx.tokens), 0.0, dummy);
    const Tensor& v = tape.val(lp);
    return std::vector<double>(v.data.begin(), v.data.end());
}

Tensor FlowModel::tile_batch(const Tensor& x, int n) {
    Tensor out(n, x.t, x.c);
    std::size_t per = std::size_t(x.t) * x.c;
    for (int i = 0; i < n; ++i)
        std::copy(x.data.begin(), x.data.begin() + per, out.data.begin() + i * per);
    return out;
}

SampleResult FlowModel::sample(const ConditioningContext& ctx, double std, int n,
                               Rng& rng) const {
    if (std <= 0.0 || std > 1.0) throw ConfigError("sample: std must be in (0, 1]");
    if (n < 1) throw ArgumentError("sample: n must be >= 1");
    Tensor tokens = ctx.tokens.b == 1 ? tile_batch(ctx.tokens, n) : ctx.tokens;
    if (tokens.b != n) throw ShapeError("sample: context batch mismatch");
    Tensor z0 = Tensor::randn(n, cfg_.chunk_len, action_dim_, rng, std);
    Tape tape(false);
    Rng dummy;
    Var zv = tape.constant(z0);
    auto [a, ld] = inverse_t(tape, zv, tape.constant(tokens), 0.0, dummy);
    Var lp = tape.sub(base_log_prob_t(tape, zv), ld);
    const Tensor& lpv = tape.val(lp);
    return SampleResult{tape.val(a), std::vector<double>(lpv.data.begin(), lpv.data.end())};
}

}  // namespace flowrl
