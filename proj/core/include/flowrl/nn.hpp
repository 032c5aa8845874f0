#pragma once

#include <deque>
#include <memory>
#include <string>
#include <vector>

#include "flowrl/tape.hpp"

namespace flowrl {

/// Owns every Param of a model. Addresses are stable (deque) so layers can
/// keep raw pointers; checkpointing iterates the store in creation order.
class ParamStore {
public:
    Param& create(const std::string& name, Tensor init) {
        params_.emplace_back(name, std::move(init));
        return params_.back();
    }

    std::vector<Param*> all() {
        std::vector<Param*> out;
        for (auto& p : params_) out.push_back(&p);
        return out;
    }

    std::vector<const Param*> all() const {
        std::vector<const Param*> out;
        for (auto& p : params_) out.push_back(&p);
        return out;
    }

    Param* find(const std::string& name) {
        for (auto& p : params_)
            if (p.name == name) return &p;
        return nullptr;
    }

    std::size_t count_values() const {
        std::size_t n = 0;
        for (auto& p : params_) n += p.value.size();
        return n;
    }

    void zero_grads() {
        for (auto& p : params_) p.zero_grad();
    }

private:
    std::deque<Param> params_;
};

class LinearLayer {
public:
    LinearLayer() = default;
    LinearLayer(ParamStore& store, const std::string& name, int in, int out, Rng& rng,
                bool zero_init = false);
    Var apply(Tape& tape, Var x) const;

    Param* weight = nullptr;
    Param* bias = nullptr;
};

class RMSNorm {
public:
    RMSNorm() = default;
    RMSNorm(ParamStore& store, const std::string& name, int dim);
    Var apply(Tape& tape, Var x) const;

    Param* gain = nullptr;
    static constexpr double kEps = 1e-6;
};

/// Multi-head scaled dot-product attention. Self-attention is apply(x, x);
/// cross-attention reads keys/values from a separate token stream.
class MultiheadAttention {
public:
    MultiheadAttention() = default;
    MultiheadAttention(ParamStore& store, const std::string& name, int dim, int heads, Rng& rng);
    Var apply(Tape& tape, Var queries, Var keys_values) const;

    int dim = 0;
    int heads = 0;
    LinearLayer wq, wk, wv, wo;
};

/// SwiGLU feed-forward block; dropout (when active) is applied to the
/// hidden activation, the only place dropout is used in the policy.
class SwiGLU {
public:
    SwiGLU() = default;
    SwiGLU(ParamStore& store, const std::string& name, int dim, int hidden, Rng& rng);
    Var apply(Tape& tape, Var x, double dropout_rate, Rng& rng) const;

    LinearLayer w_gate, w_up, w_down;
};

}  // namespace flowrl
