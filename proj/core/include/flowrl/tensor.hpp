#pragma once

#include <array>
#include <cstddef>
#include <vector>

#include "flowrl/rng.hpp"

namespace flowrl {

/// Dense row-major tensor with a fixed rank-3 layout [batch, tokens, channels].
/// Vectors and matrices set the unused leading dims to 1.
struct Tensor {
    int b = 1, t = 1, c = 1;
    std::vector<double> data;

    Tensor() = default;
    Tensor(int b_, int t_, int c_) : b(b_), t(t_), c(c_), data(std::size_t(b_) * t_ * c_, 0.0) {}

    static Tensor zeros(int b, int t, int c) { return Tensor(b, t, c); }

    static Tensor full(int b, int t, int c, double v) {
        Tensor x(b, t, c);
        std::fill(x.data.begin(), x.data.end(), v);
        return x;
    }

    static Tensor scalar(double v) { return full(1, 1, 1, v); }

    static Tensor randn(int b, int t, int c, Rng& rng, double std = 1.0) {
        Tensor x(b, t, c);
        for (auto& v : x.data) v = rng.normal(0.0, std);
        return x;
    }

    static Tensor from_vector(const std::vector<double>& v) {
        Tensor x(1, 1, static_cast<int>(v.size()));
        x.data = v;
        return x;
    }

    std::size_t size() const { return data.size(); }

    double& at(int i, int j, int k) { return data[(std::size_t(i) * t + j) * c + k]; }
    double at(int i, int j, int k) const { return data[(std::size_t(i) * t + j) * c + k]; }

    double item() const { return data.at(0); }

    bool same_shape(const Tensor& o) const { return b == o.b && t == o.t && c == o.c; }

    void fill(double v) { std::fill(data.begin(), data.end(), v); }
};

}  // namespace flowrl
