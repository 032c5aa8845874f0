#include "flowrl/nn.hpp"

#include <cmath>

namespace flowrl {

LinearLayer::LinearLayer(ParamStore& store, const std::string& name, int in, int out, Rng& rng,
                         bool zero_init) {
    double std = zero_init ? 0.0 : 1.0 / std::sqrt(double(in));
    weight = &store.create(name + ".w", Tensor::randn(1, in, out, rng, std));
    bias = &store.create(name + ".b", Tensor::zeros(1, 1, out));
}

Var LinearLayer::apply(Tape& tape, Var x) const {
    Var w = tape.param(*weight);
    Var b = tape.param(*bias);
    return tape.linear(x, w, b);
}

RMSNorm::RMSNorm(ParamStore& store, const std::string& name, int dim) {
    gain = &store.create(name + ".gain", Tensor::full(1, 1, dim, 1.0));
}

Var RMSNorm::apply(Tape& tape, Var x) const {
    Var ms = tape.mean_channels(tape.square(x));
    Var r = tape.sqrt(tape.add_const(ms, kEps));
    return tape.mul(tape.div(x, r), tape.param(*gain));
}

MultiheadAttention::MultiheadAttention(ParamStore& store, const std::string& name, int dim_,
                                       int heads_, Rng& rng)
    : dim(dim_), heads(heads_) {
    if (dim % heads != 0) throw ConfigError("attention dim must divide heads");
    wq = LinearLayer(store, name + ".q", dim, dim, rng);
    wk = LinearLayer(store, name + ".k", dim, dim, rng);
    wv = LinearLayer(store, name + ".v", dim, dim, rng);
    wo = LinearLayer(store, name + ".o", dim, dim, rng);
}

Var MultiheadAttention::apply(Tape& tape, Var queries, Var keys_values) const {
    Var q = wq.apply(tape, queries);
    Var k = wk.apply(tape, keys_values);
    Var v = wv.apply(tape, keys_values);
    int dh = dim / heads;
    double scale = 1.0 / std::sqrt(double(dh));
    std::vector<Var> head_outs;
    head_outs.reserve(heads);
    for (int h = 0; h < heads; ++h) {
        Var qh = tape.slice_channels(q, h * dh, dh);
        Var kh = tape.slice_channels(k, h * dh, dh);
        Var vh = tape.slice_channels(v, h * dh, dh);
        Var attn = tape.softmax(tape.qk_scores(qh, kh, scale));
        head_outs.push_back(tape.attn_mix(attn, vh));
    }
    return wo.apply(tape, tape.concat_channels(head_outs));
}

SwiGLU::SwiGLU(ParamStore& store, const std::string& name, int dim, int hidden, Rng& rng) {
    w_gate = LinearLayer(store, name + ".gate", dim, hidden, rng);
    w_up = LinearLayer(store, name + ".up", dim, hidden, rng);
    w_down = LinearLayer(store, name + ".down", hidden, dim, rng);
}

Var SwiGLU::apply(Tape& tape, Var x, double dropout_rate, Rng& rng) const {
    Var h = tape.mul(tape.silu(w_gate.apply(tape, x)), w_up.apply(tape, x));
    h = tape.dropout(h, dropout_rate, rng);
    return w_down.apply(tape, h);
}

}  // namespace flowrl
