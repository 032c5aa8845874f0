#include "flowrl/gaussian_head.hpp"

#include <algorithm>
#include <cmath>

#include "flowrl/flow.hpp"

namespace flowrl {

namespace {
constexpr double kLog2Pi = 1.8378770664093454836;
constexpr double kClipMargin = 1e-4;
}  // namespace

GaussianHead::GaussianHead(const TrainConfig& cfg, int obs_dim, int action_dim)
    : cfg_(cfg), obs_dim_(obs_dim), action_dim_(action_dim) {
    cfg_.validate();
    if (obs_dim < 1 || action_dim < 1) throw ConfigError("gaussian head: dims must be positive");
    Rng rng(cfg_.seed + 1);
    int in_dim = obs_dim_ + cfg_.prefix_len * action_dim_;
    int out = cfg_.chunk_len * action_dim_;
    int hid = cfg_.hidden;
    in_ = LinearLayer(store_, "g.in", in_dim, hid, rng);
    hid_ = LinearLayer(store_, "g.hid", hid, hid, rng);
    mean_ = LinearLayer(store_, "g.mean", hid, out, rng);
    logstd_ = LinearLayer(store_, "g.logstd", hid, out, rng);
}

std::pair<Var, Var> GaussianHead::mean_logstd(Tape& tape, Var obs, Var prefix) const {
    const Tensor& ov = tape.val(obs);
    int B = ov.b;
    if (ov.c != obs_dim_ || ov.t != 1) throw ShapeError("gaussian head: bad observation shape");
    Var x = obs;
    if (cfg_.prefix_len > 0) {
        Var pflat = tape.reshape(prefix, B, 1, cfg_.prefix_len * action_dim_);
        x = tape.concat_channels({obs, pflat});
    }
    x = tape.gelu(in_.apply(tape, x));
    x = tape.gelu(hid_.apply(tape, x));
    Var mean = mean_.apply(tape, x);
    // bounded log-std in [-3, 1] keeps the density well conditioned
    Var logstd = tape.add_const(tape.scale(tape.tanh(logstd_.apply(tape, x)), 2.0), -1.0);
    return {mean, logstd};
}

Var GaussianHead::log_prob_t(Tape& tape, Var obs, Var prefix, Var a) const {
    const Tensor& av = tape.val(a);
    int B = av.b;
    if (av.t != cfg_.chunk_len || av.c != action_dim_)
        throw ShapeError("gaussian head: bad chunk shape");
    auto [mean, logstd] = mean_logstd(tape, obs, prefix);
    Var z = tape.reshape(tape.atanh(a), B, 1, cfg_.chunk_len * action_dim_);
    Var u = tape.div(tape.sub(z, mean), tape.exp(logstd));
    Var gauss = tape.sum_channels(tape.add_const(
        tape.neg(tape.add(tape.scale(tape.square(u), 0.5), logstd)), -0.5 * kLog2Pi));
    // change of variables through tanh
    Var one_minus_sq = tape.add_const(tape.neg(tape.square(a)), 1.0);
    Var bound = tape.sum_batch(tape.neg(tape.log(one_minus_sq)));
    return tape.add(gauss, bound);
}

Var GaussianHead::il_loss_t(Tape& tape, const Tensor& obs, const Tensor& prefix,
                            const Tensor& targets, Rng& rng) const {
    int B = targets.b;
    if (B < 1) throw ArgumentError("il_loss: empty batch");
    Tensor perturbed = targets;
    double lim = 1.0 - kClipMargin;
    for (auto& v : perturbed.data) {
        v += rng.normal(0.0, cfg_.sigma_noise);
        v = std::clamp(v, -lim, lim);
    }
    Var lp = log_prob_t(tape, tape.constant(obs), tape.constant(prefix),
                        tape.constant(std::move(perturbed)));
    return tape.scale(tape.sum_all(lp), -1.0 / double(B));
}

Tensor GaussianHead::sample(const Tensor& obs, const Tensor& prefix, double std, int n,
                            Rng& rng) const {
    if (std <= 0.0 || std > 1.0) throw ConfigError("sample: std must be in (0, 1]");
    Tensor obs_n = obs.b == 1 ? FlowModel::tile_batch(obs, n) : obs;
    Tensor pre_n = prefix.b == 1 ? FlowModel::tile_batch(prefix, n) : prefix;
    Tape tape(false);
    auto [mean, logstd] = mean_logstd(tape, tape.constant(obs_n), tape.constant(pre_n));
    const Tensor& mv = tape.val(mean);
    const Tensor& lv = tape.val(logstd);
    Tensor a(n, cfg_.chunk_len, action_dim_);
    for (std::size_t i = 0; i < a.size(); ++i) {
        double z = mv.data[i] + std::exp(lv.data[i]) * std * rng.normal();
        a.data[i] = std::tanh(z);
    }
    return a;
}

}  // namespace flowrl
