#pragma once

#include <functional>
#include <string>
#include <vector>

#include "flowrl/errors.hpp"
#include "flowrl/rng.hpp"
#include "flowrl/tensor.hpp"

namespace flowrl {

/// A named trainable array plus its accumulated gradient and AdamW moments.
struct Param {
    std::string name;
    Tensor value;
    Tensor grad;
    Tensor m;  // first moment
    Tensor v;  // second moment

    Param() = default;
    Param(std::string n, Tensor init)
        : name(std::move(n)),
          value(std::move(init)),
          grad(value.b, value.t, value.c),
          m(value.b, value.t, value.c),
          v(value.b, value.t, value.c) {}

    void zero_grad() { grad.fill(0.0); }
};

struct Var {
    int id = -1;
    bool valid() const { return id >= 0; }
};

/// Tape-based reverse-mode autodiff over rank-3 tensors. A fresh tape is
/// built per loss evaluation; backward() runs the recorded closures in
/// reverse order and accumulates parameter gradients into each Param.
class Tape {
public:
    explicit Tape(bool record_grads = true) : record_(record_grads) {}

    const Tensor& val(Var x) const { return nodes_[x.id].val; }
    Tensor& grad(Var x) { return grad_of(x.id); }

    Var constant(Tensor v);
    Var param(Param& p);
    Var detach(Var x);

    // elementwise binary ops with broadcasting over size-1 dims
    Var add(Var a, Var b);
    Var sub(Var a, Var b);
    Var mul(Var a, Var b);
    Var div(Var a, Var b);
    Var minimum(Var a, Var b);

    // elementwise unary
    Var neg(Var x);
    Var scale(Var x, double k);
    Var add_const(Var x, double k);
    Var tanh(Var x);
    Var atanh(Var x);
    Var exp(Var x);
    Var log(Var x);
    Var square(Var x);
    Var sqrt(Var x);
    Var silu(Var x);
    Var gelu(Var x);
    Var elu(Var x);
    Var log1m_tanh_sq(Var x);  // log(1 - tanh(x)^2), saturation-safe

    // x:[B,T,Ci] @ w:[1,Ci,Co] (+ bias:[1,1,Co]) -> [B,T,Co]
    Var linear(Var x, Var w, Var bias = Var{});
    // q:[B,Tq,C], k:[B,Tk,C] -> scale * q k^T : [B,Tq,Tk]
    Var qk_scores(Var q, Var k, double scale);
    // s:[B,Tq,Tk], v:[B,Tk,C] -> s v : [B,Tq,C]
    Var attn_mix(Var s, Var v);

    // reductions
    Var sum_all(Var x);                 // -> [1,1,1]
    Var mean_all(Var x);                // -> [1,1,1]
    Var sum_batch(Var x);               // -> [B,1,1]
    Var sum_channels(Var x);            // -> [B,T,1]
    Var mean_channels(Var x);           // -> [B,T,1]

    Var softmax(Var x);       // over channels
    Var log_softmax(Var x);   // over channels

    // token-axis structure
    Var concat_tokens(const std::vector<Var>& xs);
    Var slice_tokens(Var x, int start, int len);
    Var gather_tokens(Var x, std::vector<int> idx);
    Var concat_channels(const std::vector<Var>& xs);
    Var slice_channels(Var x, int start, int len);

    Var dropout(Var x, double rate, Rng& rng);

    // same element count, new [b,t,c] layout
    Var reshape(Var x, int b, int t, int c);

    void backward(Var loss);

    std::size_t num_nodes() const { return nodes_.size(); }
    bool recording() const { return record_; }

private:
    struct Node {
        Tensor val;
        Tensor grad;
        bool requires_grad = false;
        bool grad_alloc = false;
        std::function<void(Tape&)> back;
    };

    int push(Tensor val, bool requires_grad, std::function<void(Tape&)> back);
    Tensor& grad_of(int id);
    bool rg(Var x) const { return nodes_[x.id].requires_grad; }

    Var binary(Var a, Var b, int kind);
    Var unary(Var x, int kind, double k);

    std::vector<Node> nodes_;
    std::vector<std::pair<int, Param*>> param_nodes_;
    bool record_ = true;
};

}  // namespace flowrl
