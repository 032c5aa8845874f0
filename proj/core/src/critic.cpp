#include "flowrl/critic.hpp"

#include <algorithm>
#include <cmath>

namespace flowrl {

namespace {

double norm_cdf(double x) { return 0.5 * std::erfc(-x / 1.4142135623730951); }

}  // namespace

ValueSupport ValueSupport::make(double v_min, double v_max, int num_bins, double sigma_ratio) {
    ValueSupport s;
    s.v_min = v_min;
    s.v_max = v_max;
    s.num_bins = num_bins;
    s.hl_sigma = sigma_ratio * s.bin_width();
    s.validate();
    return s;
}

void ValueSupport::validate() const {
    if (!(v_min < v_max)) throw ConfigError("value support: v_min must be < v_max");
    if (num_bins < 2) throw ConfigError("value support: num_bins must be >= 2");
    if (!(hl_sigma > 0.0)) throw ConfigError("value support: hl_sigma must be > 0");
}

std::vector<double> hl_gauss_project(double y, const ValueSupport& support) {
    support.validate();
    int n = support.num_bins;
    std::vector<double> probs(n, 0.0);
    double s = support.hl_sigma;
    double total = norm_cdf((support.edge(n) - y) / s) - norm_cdf((support.edge(0) - y) / s);
    if (total < 1e-300) {  // target far outside: all mass at the nearest edge
        probs[y < support.v_min ? 0 : n - 1] = 1.0;
        return probs;
    }
    for (int i = 0; i < n; ++i) {
        double m = norm_cdf((support.edge(i + 1) - y) / s) - norm_cdf((support.edge(i) - y) / s);
        probs[i] = m / total;
    }
    return probs;
}

double scalar_q(const std::vector<double>& probs, const ValueSupport& support) {
    if (int(probs.size()) != support.num_bins) throw ShapeError("scalar_q: wrong bin count");
    double v = 0.0;
    for (int i = 0; i < support.num_bins; ++i) v += probs[i] * support.center(i);
    return v;
}

CriticNet::CriticNet(const TrainConfig& cfg, int obs_dim, int action_dim, std::uint64_t seed)
    : cfg_(cfg), obs_dim_(obs_dim), action_dim_(action_dim) {
    cfg_.validate();
    if (obs_dim < 1 || action_dim < 1) throw ConfigError("critic: dims must be positive");
    Rng rng(seed);
    int hid = cfg_.critic_hidden;
    int tokens = cfg_.prefix_len > 0 ? 3 : 2;
    obs_proj_ = LinearLayer(store_, "q.obs", obs_dim_, hid, rng);
    if (cfg_.prefix_len > 0)
        prefix_proj_ = LinearLayer(store_, "q.prefix", cfg_.prefix_len * action_dim_, hid, rng);
    chunk_proj_ = LinearLayer(store_, "q.chunk", cfg_.chunk_len * action_dim_, hid, rng);
    pos_ = &store_.create("q.pos", Tensor::randn(1, tokens, hid, rng, 0.02));
    layers_.resize(cfg_.critic_layers);
    for (int l = 0; l < cfg_.critic_layers; ++l) {
        std::string pre = "q." + std::to_string(l);
        layers_[l].n_attn = RMSNorm(store_, pre + ".n_attn", hid);
        layers_[l].attn = MultiheadAttention(store_, pre + ".attn", hid, cfg_.critic_heads, rng);
        layers_[l].n_ff = RMSNorm(store_, pre + ".n_ff", hid);
        layers_[l].ff = SwiGLU(store_, pre + ".ff", hid, 2 * hid, rng);
    }
    final_norm_ = RMSNorm(store_, "q.final_norm", hid);
    head_ = LinearLayer(store_, "q.head", hid, cfg_.num_bins, rng);
}

void CriticNet::copy_from(const CriticNet& other) {
    auto dst = store_.all();
    auto src = other.store_.all();
    if (dst.size() != src.size()) throw ShapeError("copy_from: architecture mismatch");
    for (std::size_t i = 0; i < dst.size(); ++i) {
        if (dst[i]->name != src[i]->name || !dst[i]->value.same_shape(src[i]->value))
            throw ShapeError("copy_from: parameter mismatch at " + dst[i]->name);
        dst[i]->value.data = src[i]->value.data;
    }
}

Var CriticNet::logits_t(Tape& tape, Var obs, Var prefix, Var chunk, double dropout,
                        Rng& rng) const {
    const Tensor& ov = tape.val(obs);
    int B = ov.b;
    if (ov.c != obs_dim_ || ov.t != 1) throw ShapeError("critic: bad observation shape");
    const Tensor& cv = tape.val(chunk);
    if (cv.t != cfg_.chunk_len || cv.c != action_dim_) throw ShapeError("critic: bad chunk shape");

    std::vector<Var> toks;
    toks.push_back(tape.elu(obs_proj_.apply(tape, obs)));
    if (cfg_.prefix_len > 0) {
        const Tensor& pv = tape.val(prefix);
        if (pv.t != cfg_.prefix_len || pv.c != action_dim_)
            throw ShapeError("critic: bad prefix shape");
        Var pflat = tape.reshape(prefix, B, 1, cfg_.prefix_len * action_dim_);
        toks.push_back(tape.elu(prefix_proj_.apply(tape, pflat)));
    }
    Var cflat = tape.reshape(chunk, B, 1, cfg_.chunk_len * action_dim_);
    toks.push_back(tape.elu(chunk_proj_.apply(tape, cflat)));

    Var x = tape.add(tape.concat_tokens(toks), tape.param(*pos_));
    for (const Layer& l : layers_) {
        Var n = l.n_attn.apply(tape, x);
        x = tape.add(x, l.attn.apply(tape, n, n));
        x = tape.add(x, l.ff.apply(tape, l.n_ff.apply(tape, x), dropout, rng));
    }
    Var out = final_norm_.apply(tape, tape.slice_tokens(x, 0, 1));
    return head_.apply(tape, out);  // [B, 1, num_bins]
}

Tensor CriticNet::q_distribution(const Tensor& obs, const Tensor& prefix,
                                 const Tensor& chunk) const {
    Tape tape(false);
    Rng dummy;
    Var logits = logits_t(tape, tape.constant(obs), tape.constant(prefix), tape.constant(chunk),
                          0.0, dummy);
    return tape.val(tape.softmax(logits));
}

CriticEnsemble::CriticEnsemble(const TrainConfig& cfg, int obs_dim, int action_dim,
                               const ValueSupport& support)
    : cfg_(cfg), support_(support) {
    support_.validate();
    if (cfg_.num_bins != support_.num_bins)
        throw ConfigError("ensemble: num_bins mismatch between config and support");
    Rng seeder(cfg_.seed ^ 0x9e3779b97f4a7c15ull);
    for (int i = 0; i < cfg_.num_critics; ++i) {
        auto m = std::make_unique<CriticNet>(cfg_, obs_dim, action_dim, seeder.next_u64());
        auto t = std::make_unique<CriticNet>(cfg_, obs_dim, action_dim, 0);
        t->copy_from(*m);
        members_.push_back(std::move(m));
        targets_.push_back(std::move(t));
    }
}

void CriticEnsemble::set_support(const ValueSupport& s) {
    s.validate();
    if (s.num_bins != cfg_.num_bins) throw ConfigError("set_support: num_bins mismatch");
    support_ = s;
}

std::vector<double> CriticEnsemble::min_q(const Tensor& obs, const Tensor& prefix,
                                          const Tensor& chunk, bool use_targets) const {
    int B = obs.b;
    std::vector<double> out(B, 0.0);
    for (int j = 0; j < num_members(); ++j) {
        const CriticNet& net = use_targets ? *targets_[j] : *members_[j];
        Tensor probs = net.q_distribution(obs, prefix, chunk);
        for (int i = 0; i < B; ++i) {
            double v = 0.0;
            for (int k = 0; k < support_.num_bins; ++k) v += probs.at(i, 0, k) * support_.center(k);
            out[i] = j == 0 ? v : std::min(out[i], v);
        }
    }
    return out;
}

Var CriticEnsemble::min_q_t(Tape& tape, Var obs, Var prefix, Var chunk, double dropout,
                            Rng& rng) const {
    Tensor centers(1, 1, support_.num_bins);
    for (int k = 0; k < support_.num_bins; ++k) centers.data[k] = support_.center(k);
    Var cvar = tape.constant(centers);
    Var result{-1};
    for (int j = 0; j < num_members(); ++j) {
        Var probs = tape.softmax(members_[j]->logits_t(tape, obs, prefix, chunk, dropout, rng));
        Var v = tape.sum_channels(tape.mul(probs, cvar));  // [B,1,1]
        result = j == 0 ? v : tape.minimum(result, v);
    }
    return result;
}

std::vector<double> CriticEnsemble::td_targets(const TransitionBatch& batch,
                                               const ChunkSampler& sampler, Rng& rng) const {
    int B = batch.size();
    int H = cfg_.chunk_len;
    if (batch.rewards.t != H) throw ShapeError("td_targets: reward length mismatch");
    Tensor next_chunk = sampler(batch.next_obs, batch.next_prefix, rng);
    if (next_chunk.b != B || next_chunk.t != H)
        throw ShapeError("td_targets: sampler returned wrong shape");
    std::vector<double> boot = min_q(batch.next_obs, batch.next_prefix, next_chunk,
                                     /*use_targets=*/true);
    std::vector<double> y(B, 0.0);
    double gH = std::pow(cfg_.gamma, H);
    compute_targets(batch, boot, gH, y);
    return y;
}

std::vector<double> CriticEnsemble::td_targets(const TransitionBatch& batch,
                                               const FlowModel& policy, Rng& rng) const {
    return td_targets(
        batch,
        [&](const Tensor& next_obs, const Tensor& next_prefix, Rng& r) {
            ConditioningContext ctx = policy.encode_context(next_obs, next_prefix);
            return policy.sample(ctx, cfg_.sigma_sample, next_obs.b, r).actions;
        },
        rng);
}

void CriticEnsemble::compute_targets(const TransitionBatch& batch, const std::vector<double>& boot,
                                     double gH, std::vector<double>& y) const {
    int B = batch.size();
    int H = cfg_.chunk_len;
    for (int i = 0; i < B; ++i) {
        double acc = 0.0, g = 1.0;
        for (int t = 0; t < H; ++t) {
            acc += g * batch.rewards.at(i, t, 0);
            g *= cfg_.gamma;
        }
        y[i] = acc + gH * (1.0 - batch.done[i]) * boot[i];
    }
}

Var CriticEnsemble::critic_loss_t(Tape& tape, const TransitionBatch& batch,
                                  const std::vector<double>& y, double dropout, Rng& rng) const {
    int B = batch.size();
    if (B < 1) throw ArgumentError("critic_loss: empty batch");
    if (int(y.size()) != B) throw ShapeError("critic_loss: target count mismatch");
    Tensor target(B, 1, support_.num_bins);
    for (int i = 0; i < B; ++i) {
        std::vector<double> p = hl_gauss_project(y[i], support_);
        std::copy(p.begin(), p.end(), &target.at(i, 0, 0));
    }
    Var tvar = tape.constant(std::move(target));
    Var obs = tape.constant(batch.obs);
    Var prefix = tape.constant(batch.prefix);
    Var chunk = tape.constant(batch.chunk);
    Var loss{-1};
    for (int j = 0; j < num_members(); ++j) {
        Var logp = tape.log_softmax(members_[j]->logits_t(tape, obs, prefix, chunk, dropout, rng));
        Var ce = tape.neg(tape.sum_all(tape.mul(tvar, logp)));
        loss = j == 0 ? ce : tape.add(loss, ce);
    }
    return tape.scale(loss, 1.0 / (double(B) * num_members()));
}

void CriticEnsemble::polyak_update(double tau) {
    if (!(tau > 0.0 && tau <= 1.0)) throw ConfigError("polyak: tau must be in (0, 1]");
    for (int j = 0; j < num_members(); ++j) {
        auto online = members_[j]->params().all();
        auto target = targets_[j]->params().all();
        for (std::size_t i = 0; i < online.size(); ++i) {
            auto& tv = target[i]->value.data;
            const auto& ov = online[i]->value.data;
            for (std::size_t k = 0; k < tv.size(); ++k)
                tv[k] = tau * ov[k] + (1.0 - tau) * tv[k];
        }
    }
}

}  // namespace flowrl
