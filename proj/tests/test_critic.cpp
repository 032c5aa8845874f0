#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "flowrl/critic.hpp"
#include "flowrl/optim.hpp"
#include "test_util.hpp"

using namespace flowrl;

namespace {

TrainConfig tiny_cfg() {
    TrainConfig cfg;
    cfg.chunk_len = 2;
    cfg.prefix_len = 1;
    cfg.critic_hidden = 4;
    cfg.critic_heads = 1;
    cfg.critic_layers = 1;
    cfg.num_bins = 5;
    cfg.num_critics = 1;
    cfg.seed = 7;
    return cfg;
}

double gauss_pdf(double x, double mu, double s) {
    double z = (x - mu) / s;
    return std::exp(-0.5 * z * z) / (s * 2.5066282746310002);
}

// Simpson integration of N(mu, s) over [a, b]
double gauss_mass(double a, double b, double mu, double s) {
    const int n = 4000;  // even
    double h = (b - a) / n;
    double acc = gauss_pdf(a, mu, s) + gauss_pdf(b, mu, s);
    for (int i = 1; i < n; ++i) acc += (i % 2 ? 4.0 : 2.0) * gauss_pdf(a + i * h, mu, s);
    return acc * h / 3.0;
}

TransitionBatch make_batch(int B, const TrainConfig& cfg, int obs_dim, int action_dim,
                           std::uint64_t seed) {
    Rng rng(seed);
    TransitionBatch b;
    b.obs = Tensor::randn(B, 1, obs_dim, rng, 0.5);
    b.prefix = Tensor::randn(B, cfg.prefix_len, action_dim, rng, 0.5);
    b.chunk = Tensor::randn(B, cfg.chunk_len, action_dim, rng, 0.5);
    b.rewards = Tensor::zeros(B, cfg.chunk_len, 1);
    b.next_obs = Tensor::randn(B, 1, obs_dim, rng, 0.5);
    b.next_prefix = Tensor::randn(B, cfg.prefix_len, action_dim, rng, 0.5);
    b.done.assign(B, 0.0);
    b.offline.assign(B, 1);
    return b;
}

}  // namespace

TEST_CASE("value support geometry") {
    ValueSupport s = ValueSupport::make(0.0, 10.0, 101, 0.75);
    CHECK(s.bin_width() == doctest::Approx(0.1));
    CHECK(s.center(0) == doctest::Approx(0.0));
    CHECK(s.center(100) == doctest::Approx(10.0));
    CHECK(s.edge(0) == doctest::Approx(-0.05));
    CHECK(s.edge(101) == doctest::Approx(10.05));
    CHECK(s.hl_sigma == doctest::Approx(0.075));
    CHECK_THROWS_AS(ValueSupport::make(1.0, 1.0, 101, 0.75), ConfigError);
    CHECK_THROWS_AS(ValueSupport::make(0.0, 1.0, 1, 0.75), ConfigError);
    CHECK_THROWS_AS(ValueSupport::make(0.0, 1.0, 101, 0.0), ConfigError);
}

TEST_CASE("hl-gauss projection matches cdf quadrature") {
    ValueSupport s = ValueSupport::make(-1.0, 2.0, 31, 0.75);
    for (double y : {-0.9, -0.3, 0.0, 0.5, 1.234, 1.95}) {
        std::vector<double> probs = hl_gauss_project(y, s);
        double total = 0.0;
        std::vector<double> num(s.num_bins);
        for (int i = 0; i < s.num_bins; ++i) {
            num[i] = gauss_mass(s.edge(i), s.edge(i + 1), y, s.hl_sigma);
            total += num[i];
        }
        double psum = 0.0;
        for (int i = 0; i < s.num_bins; ++i) {
            CHECK(std::abs(probs[i] - num[i] / total) < 1e-6);
            psum += probs[i];
        }
        CHECK(psum == doctest::Approx(1.0).epsilon(1e-12));
    }
}

TEST_CASE("hl-gauss projected mean recovers interior targets") {
    ValueSupport s = ValueSupport::make(0.0, 10.0, 101, 0.75);
    for (double y : {1.0, 3.7, 5.0, 8.23}) {
        double m = scalar_q(hl_gauss_project(y, s), s);
        CHECK(std::abs(m - y) < 1e-3);
    }
}

TEST_CASE("hl-gauss far-outside targets collapse to edge bins") {
    ValueSupport s = ValueSupport::make(0.0, 1.0, 11, 0.75);
    std::vector<double> lo = hl_gauss_project(-100.0, s);
    std::vector<double> hi = hl_gauss_project(100.0, s);
    CHECK(lo[0] == doctest::Approx(1.0));
    CHECK(hi[10] == doctest::Approx(1.0));
    for (int i = 1; i < 11; ++i) CHECK(lo[i] == 0.0);
    for (int i = 0; i < 10; ++i) CHECK(hi[i] == 0.0);
    // mildly-outside targets still get smoothed mass at the near edge
    std::vector<double> near = hl_gauss_project(1.0 + s.bin_width(), s);
    CHECK(near[10] > 0.9);
    CHECK(near[9] > 0.0);
}

TEST_CASE("scalar_q on one-hot and uniform distributions") {
    ValueSupport s = ValueSupport::make(-2.0, 2.0, 5, 0.75);
    std::vector<double> onehot(5, 0.0);
    onehot[3] = 1.0;
    CHECK(scalar_q(onehot, s) == doctest::Approx(s.center(3)));
    std::vector<double> uni(5, 0.2);
    CHECK(scalar_q(uni, s) == doctest::Approx(0.0));
    CHECK_THROWS_AS(scalar_q(std::vector<double>(4, 0.25), s), ShapeError);
}

TEST_CASE("critic loss gradients match finite differences") {
    TrainConfig cfg = tiny_cfg();
    ValueSupport s = ValueSupport::make(-1.0, 1.0, cfg.num_bins, 0.75);
    CriticEnsemble ens(cfg, 2, 1, s);
    CHECK(ens.member(0).params().count_values() <= 500);

    TransitionBatch batch = make_batch(3, cfg, 2, 1, 21);
    std::vector<double> y = {0.3, -0.5, 0.9};
    Rng dummy;
    auto loss_fn = [&]() {
        Tape tape(false);
        return tape.val(ens.critic_loss_t(tape, batch, y, 0.0, dummy)).item();
    };
    auto backward_fn = [&]() {
        Tape tape;
        tape.backward(ens.critic_loss_t(tape, batch, y, 0.0, dummy));
    };
    auto res = testutil::grad_check(ens.member(0).params().all(), loss_fn, backward_fn);
    INFO("worst: ", res.worst);
    CHECK(res.max_rel_err < 1e-3);
}

TEST_CASE("min over ensemble members matches per-member means") {
    TrainConfig cfg = tiny_cfg();
    cfg.num_critics = 2;
    ValueSupport s = ValueSupport::make(-1.0, 1.0, cfg.num_bins, 0.75);
    CriticEnsemble ens(cfg, 2, 1, s);
    TransitionBatch batch = make_batch(4, cfg, 2, 1, 3);

    std::vector<double> got = ens.min_q(batch.obs, batch.prefix, batch.chunk);
    for (int i = 0; i < 4; ++i) {
        double expect = 1e30;
        for (int j = 0; j < ens.num_members(); ++j) {
            Tensor probs = ens.member(j).q_distribution(batch.obs, batch.prefix, batch.chunk);
            std::vector<double> row(probs.data.begin() + i * cfg.num_bins,
                                    probs.data.begin() + (i + 1) * cfg.num_bins);
            expect = std::min(expect, scalar_q(row, s));
        }
        CHECK(got[i] == doctest::Approx(expect).epsilon(1e-12));
    }

    Tape tape(false);
    Rng dummy;
    Var v = ens.min_q_t(tape, tape.constant(batch.obs), tape.constant(batch.prefix),
                        tape.constant(batch.chunk), 0.0, dummy);
    for (int i = 0; i < 4; ++i)
        CHECK(tape.val(v).at(i, 0, 0) == doctest::Approx(got[i]).epsilon(1e-12));
}

TEST_CASE("td targets follow the chunked bellman arithmetic") {
    TrainConfig cfg = tiny_cfg();
    cfg.chunk_len = 10;
    cfg.gamma = 0.997;
    ValueSupport s = ValueSupport::make(-1.0, 5.0, cfg.num_bins, 0.75);
    CriticEnsemble ens(cfg, 2, 1, s);

    TransitionBatch batch = make_batch(2, cfg, 2, 1, 5);
    for (int t = 0; t < 10; ++t) {
        batch.rewards.at(0, t, 0) = 1.0;  // all-ones reward chunk
        batch.rewards.at(1, t, 0) = t == 4 ? 2.0 : 0.0;
    }
    batch.done[1] = 1.0;

    Rng frng(9);
    Tensor fixed = Tensor::randn(2, 10, 1, frng, 0.3);
    auto sampler = [&](const Tensor&, const Tensor&, Rng&) { return fixed; };
    Rng rng(1);
    std::vector<double> y = ens.td_targets(batch, sampler, rng);

    std::vector<double> boot = ens.min_q(batch.next_obs, batch.next_prefix, fixed, true);
    double g = 0.997;
    double sum_ones = 0.0, gt = 1.0;
    for (int t = 0; t < 10; ++t) {
        sum_ones += gt;
        gt *= g;
    }
    CHECK(std::pow(g, 9) == doctest::Approx(0.9733).epsilon(1e-4));
    CHECK(std::pow(g, 10) == doctest::Approx(0.97044).epsilon(1e-4));
    CHECK(y[0] == doctest::Approx(sum_ones + std::pow(g, 10) * boot[0]).epsilon(1e-12));
    CHECK(y[1] == doctest::Approx(2.0 * std::pow(g, 4)).epsilon(1e-12));  // done: no bootstrap
}

TEST_CASE("td targets use the slow target networks") {
    TrainConfig cfg = tiny_cfg();
    ValueSupport s = ValueSupport::make(-1.0, 1.0, cfg.num_bins, 0.75);
    CriticEnsemble ens(cfg, 2, 1, s);
    TransitionBatch batch = make_batch(2, cfg, 2, 1, 17);

    // desynchronize online members from targets
    Rng prng(33);
    for (Param* p : ens.member(0).params().all())
        for (auto& v : p->value.data) v += prng.normal(0.0, 0.1);

    Rng frng(2);
    Tensor fixed = Tensor::randn(2, cfg.chunk_len, 1, frng, 0.3);
    auto sampler = [&](const Tensor&, const Tensor&, Rng&) { return fixed; };
    Rng rng(1);
    std::vector<double> y = ens.td_targets(batch, sampler, rng);
    std::vector<double> boot_t = ens.min_q(batch.next_obs, batch.next_prefix, fixed, true);
    std::vector<double> boot_o = ens.min_q(batch.next_obs, batch.next_prefix, fixed, false);
    double gH = std::pow(cfg.gamma, cfg.chunk_len);
    CHECK(y[0] == doctest::Approx(gH * boot_t[0]).epsilon(1e-12));
    CHECK(std::abs(boot_t[0] - boot_o[0]) > 1e-9);
}

TEST_CASE("polyak update interpolates toward the online network") {
    TrainConfig cfg = tiny_cfg();
    ValueSupport s = ValueSupport::make(-1.0, 1.0, cfg.num_bins, 0.75);
    CriticEnsemble ens(cfg, 2, 1, s);

    Rng prng(4);
    for (Param* p : ens.member(0).params().all())
        for (auto& v : p->value.data) v += prng.normal(0.0, 0.2);

    auto online = ens.member(0).params().all();
    auto target = ens.target(0).params().all();
    std::vector<double> before = target[0]->value.data;
    ens.polyak_update(0.3);
    for (std::size_t k = 0; k < before.size(); ++k)
        CHECK(target[0]->value.data[k] ==
              doctest::Approx(0.3 * online[0]->value.data[k] + 0.7 * before[k]).epsilon(1e-12));

    ens.polyak_update(1.0);
    for (std::size_t i = 0; i < online.size(); ++i)
        for (std::size_t k = 0; k < online[i]->value.data.size(); ++k)
            CHECK(target[i]->value.data[k] == doctest::Approx(online[i]->value.data[k]));

    CHECK_THROWS_AS(ens.polyak_update(0.0), ConfigError);
}

TEST_CASE("critic overfits a fixed batch") {
    TrainConfig cfg = tiny_cfg();
    cfg.critic_hidden = 8;
    ValueSupport s = ValueSupport::make(-1.0, 1.0, cfg.num_bins, 0.75);
    CriticEnsemble ens(cfg, 2, 1, s);
    TransitionBatch batch = make_batch(8, cfg, 2, 1, 11);
    std::vector<double> y = {0.2, -0.4, 0.7, 0.0, 0.5, -0.8, 0.9, 0.1};

    auto params = ens.member(0).params().all();
    AdamW opt;
    AdamWConfig oc{3e-3, 0.9, 0.999, 1e-8, 0.0, 1.0};
    Rng dummy;
    double first = 0.0, last = 0.0;
    for (int i = 0; i < 200; ++i) {
        for (Param* p : params) p->zero_grad();
        Tape tape;
        Var loss = ens.critic_loss_t(tape, batch, y, 0.0, dummy);
        tape.backward(loss);
        opt.step(params, oc);
        if (i == 0) first = tape.val(loss).item();
        last = tape.val(loss).item();
    }
    CHECK(last < 0.7 * first);
}
