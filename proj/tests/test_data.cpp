#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "flowrl/data.hpp"
#include "flowrl/env.hpp"

using namespace flowrl;
namespace fs = std::filesystem;

namespace {

// linear ramp episode: obs[t] = (t, -t), action[t] = t / T scaled into range
Episode ramp_episode(int T, int obs_dim, int action_dim, bool success = true) {
    Episode ep;
    ep.observations = Tensor(1, T, obs_dim);
    ep.actions = Tensor(1, T, action_dim);
    for (int t = 0; t < T; ++t) {
        for (int k = 0; k < obs_dim; ++k)
            ep.observations.at(0, t, k) = (k % 2 ? -1.0 : 1.0) * t;
        for (int k = 0; k < action_dim; ++k)
            ep.actions.at(0, t, k) = -0.5 + double(t) / T + 0.1 * k;
    }
    ep.rewards.assign(T, 0.0);
    if (T > 0) ep.rewards[T - 1] = 1.0;
    ep.success = success;
    return ep;
}

}  // namespace

TEST_CASE("norm stats: actions to (-1,1), observations standardized") {
    std::vector<Episode> eps = {ramp_episode(10, 2, 2)};
    NormStats st = fit_norm_stats(eps);

    // extremes map to +-0.999
    CHECK(st.apply_action(st.action_min[0], 0) == doctest::Approx(-0.999));
    CHECK(st.apply_action(st.action_max[0], 0) == doctest::Approx(0.999));
    CHECK(st.apply_action(st.action_max[1], 1) == doctest::Approx(0.999));

    // round trip
    for (double v : {-0.45, -0.1, 0.0, 0.3, 0.39}) {
        double n = st.apply_action(v, 0);
        CHECK(st.unapply_action(n, 0) == doctest::Approx(v).epsilon(1e-9));
        CHECK(n > -1.0);
        CHECK(n < 1.0);
    }

    // standardized observations have zero mean / unit variance over the data
    double mean = 0.0, var = 0.0;
    for (int t = 0; t < 10; ++t) mean += st.apply_obs(eps[0].observations.at(0, t, 0), 0);
    mean /= 10;
    for (int t = 0; t < 10; ++t) {
        double z = st.apply_obs(eps[0].observations.at(0, t, 0), 0) - mean;
        var += z * z;
    }
    CHECK(std::abs(mean) < 1e-9);
    CHECK(var / 10 == doctest::Approx(1.0).epsilon(1e-9));
}

TEST_CASE("norm stats: constant dimensions stay finite") {
    Episode ep = ramp_episode(6, 2, 1);
    for (int t = 0; t < 6; ++t) {
        ep.observations.at(0, t, 1) = 3.0;  // constant obs dim
        ep.actions.at(0, t, 0) = 0.25;      // constant action dim
    }
    NormStats st = fit_norm_stats({ep});
    CHECK(std::isfinite(st.apply_obs(3.0, 1)));
    double n = st.apply_action(0.25, 0);
    CHECK(std::isfinite(n));
    CHECK(st.unapply_action(n, 0) == doctest::Approx(0.25).epsilon(1e-6));
}

TEST_CASE("extract_chunks: window layout, padding, done flags") {
    // T=23, H=10, P=3, stride=10 -> decisions at t=0 and t=10; the second
    // chunk needs actions up to index 22 and exactly fits; t=20 has t+P>=T.
    Episode ep = ramp_episode(23, 2, 2);
    NormStats st = fit_norm_stats({ep});
    auto chunks = extract_chunks(ep, st, 10, 3, 10);
    REQUIRE(chunks.size() == 2);

    const auto& c0 = chunks[0];
    CHECK(c0.obs.size() == 2);
    CHECK(c0.obs[0] == doctest::Approx(st.apply_obs(0.0, 0)));
    // prefix = actions 0..2, chunk = actions 3..12
    CHECK(c0.prefix[0] == doctest::Approx(st.apply_action(ep.actions.at(0, 0, 0), 0)));
    CHECK(c0.chunk[0] == doctest::Approx(st.apply_action(ep.actions.at(0, 3, 0), 0)));
    CHECK(c0.rewards.size() == 10);
    CHECK(c0.rewards[0] == 0.0);
    CHECK(!c0.done);
    // next decision state: obs at t=10, prefix = actions 10..12
    CHECK(c0.next_obs[0] == doctest::Approx(st.apply_obs(10.0, 0)));
    CHECK(c0.next_prefix[0] == doctest::Approx(st.apply_action(ep.actions.at(0, 10, 0), 0)));

    const auto& c1 = chunks[1];
    // chunk = actions 13..22; reward 1 lands at local offset 22-13=9
    CHECK(c1.chunk[0] == doctest::Approx(st.apply_action(ep.actions.at(0, 13, 0), 0)));
    CHECK(c1.rewards[9] == doctest::Approx(1.0));
    CHECK(c1.done);
}

TEST_CASE("extract_chunks: repeat-last-action padding with zero reward") {
    Episode ep = ramp_episode(6, 2, 1);  // decision t=0 needs actions 1..5 for H=8
    NormStats st = fit_norm_stats({ep});
    auto chunks = extract_chunks(ep, st, 8, 1, 8);
    REQUIRE(chunks.size() == 1);
    const auto& c = chunks[0];
    double last = st.apply_action(ep.actions.at(0, 5, 0), 0);
    for (int j = 5; j < 8; ++j) CHECK(c.chunk[j] == doctest::Approx(last));
    CHECK(c.rewards[4] == doctest::Approx(1.0));  // env reward at t=5, offset 5-1=4
    for (int j = 5; j < 8; ++j) CHECK(c.rewards[j] == 0.0);
    CHECK(c.done);
}

TEST_CASE("extract_chunks: degenerate P=0, H=1, stride=1") {
    Episode ep = ramp_episode(4, 2, 1);
    NormStats st = fit_norm_stats({ep});
    auto chunks = extract_chunks(ep, st, 1, 0, 1);
    REQUIRE(chunks.size() == 4);
    for (int t = 0; t < 4; ++t) {
        CHECK(chunks[t].prefix.empty());
        CHECK(chunks[t].chunk[0] == doctest::Approx(st.apply_action(ep.actions.at(0, t, 0), 0)));
        CHECK(chunks[t].rewards[0] == doctest::Approx(ep.rewards[t]));
    }
    CHECK(!chunks[0].done);
    CHECK(chunks[3].done);

    // too-short episode yields nothing
    Episode tiny = ramp_episode(2, 2, 1);
    CHECK(extract_chunks(tiny, st, 4, 3, 4).empty());
}

TEST_CASE("replay buffer: rejects malformed rows, batches correctly") {
    ReplayBuffer buf(2, 1, 1, 3);
    TransitionChunk tc;
    tc.obs = {0.1, 0.2};
    tc.prefix = {0.0};
    tc.chunk = {0.1, 0.2, 0.3};
    tc.rewards = {0.0, 0.0, 1.0};
    tc.next_obs = {0.3, 0.4};
    tc.next_prefix = {0.5};
    tc.done = true;
    buf.append(tc);

    TransitionChunk bad = tc;
    bad.chunk.pop_back();
    CHECK_THROWS_AS(buf.append(bad), ShapeError);

    Rng rng(0);
    TransitionBatch b = buf.sample(4, rng);
    CHECK(b.size() == 4);
    CHECK(b.obs.at(2, 0, 1) == doctest::Approx(0.2));
    CHECK(b.chunk.at(0, 2, 0) == doctest::Approx(0.3));
    CHECK(b.rewards.at(1, 2, 0) == doctest::Approx(1.0));
    CHECK(b.done[0] == 1.0);
    CHECK(b.offline[0] == 1);

    CHECK_THROWS_AS(ReplayBuffer(2, 1, 1, 3).sample(1, rng), DataError);
}

TEST_CASE("replay buffer: binary round trip") {
    ReplayBuffer buf(2, 2, 1, 2);
    Rng rng(42);
    for (int i = 0; i < 7; ++i) {
        TransitionChunk tc;
        for (int k = 0; k < 2; ++k) tc.obs.push_back(rng.normal(0, 1));
        for (int k = 0; k < 2; ++k) tc.prefix.push_back(rng.uniform(-1, 1));
        for (int k = 0; k < 2; ++k) tc.chunk.push_back(rng.uniform(-1, 1));
        for (int k = 0; k < 2; ++k) tc.rewards.push_back(k);
        for (int k = 0; k < 2; ++k) tc.next_obs.push_back(rng.normal(0, 1));
        for (int k = 0; k < 2; ++k) tc.next_prefix.push_back(rng.uniform(-1, 1));
        tc.done = i % 2;
        tc.source = i % 3 == 0 ? Source::online : Source::demo;
        buf.append(tc);
    }
    fs::path p = fs::temp_directory_path() / "flowrl_test_buf.bin";
    buf.save(p.string());
    ReplayBuffer loaded = ReplayBuffer::load(p.string());
    REQUIRE(loaded.size() == buf.size());
    for (std::size_t i = 0; i < buf.size(); ++i) {
        CHECK(loaded.row(i).obs == buf.row(i).obs);
        CHECK(loaded.row(i).chunk == buf.row(i).chunk);
        CHECK(loaded.row(i).done == buf.row(i).done);
        CHECK(loaded.row(i).source == buf.row(i).source);
    }
    fs::remove(p);
}

TEST_CASE("mixed sampler: degenerate rho and empty buffers") {
    ReplayBuffer off(1, 0, 1, 1), on(1, 0, 1, 1);
    auto mk = [](double v, Source s) {
        TransitionChunk tc;
        tc.obs = {v};
        tc.chunk = {v};
        tc.rewards = {0.0};
        tc.next_obs = {v};
        tc.done = true;
        tc.source = s;
        return tc;
    };
    off.append(mk(-1.0, Source::demo));
    on.append(mk(1.0, Source::online));

    Rng rng(3);
    TransitionBatch all_off = MixedSampler(&off, &on, 1.0).sample(16, rng);
    TransitionBatch all_on = MixedSampler(&off, &on, 0.0).sample(16, rng);
    for (int i = 0; i < 16; ++i) {
        CHECK(all_off.obs.at(i, 0, 0) == -1.0);
        CHECK(all_off.offline[i] == 1);
        CHECK(all_on.obs.at(i, 0, 0) == 1.0);
        CHECK(all_on.offline[i] == 0);
    }

    // one side empty: every row comes from the other side
    ReplayBuffer empty(1, 0, 1, 1);
    TransitionBatch b = MixedSampler(&empty, &on, 0.5).sample(8, rng);
    for (int i = 0; i < 8; ++i) CHECK(b.obs.at(i, 0, 0) == 1.0);
    CHECK_THROWS_AS(MixedSampler(&empty, &empty, 0.5).sample(1, rng), DataError);
}

TEST_CASE("mixed sampler: empirical fraction near rho") {
    ReplayBuffer off(1, 0, 1, 1), on(1, 0, 1, 1);
    auto mk = [](double v, Source s) {
        TransitionChunk tc;
        tc.obs = {v};
        tc.chunk = {v};
        tc.rewards = {0.0};
        tc.next_obs = {v};
        tc.done = true;
        tc.source = s;
        return tc;
    };
    for (int i = 0; i < 4; ++i) off.append(mk(-1.0, Source::demo));
    for (int i = 0; i < 4; ++i) on.append(mk(1.0, Source::online));

    MixedSampler mix(&off, &on, 0.5);
    Rng rng(17);
    const int n = 20000;
    int n_off = 0;
    TransitionBatch b = mix.sample(n, rng);
    for (int i = 0; i < n; ++i) n_off += b.offline[i];
    double sigma = std::sqrt(0.25 * n);
    CHECK(std::abs(n_off - 0.5 * n) < 3.0 * sigma);
}

TEST_CASE("corpus: round trip and manifest hash determinism") {
    fs::path dir = fs::temp_directory_path() / "flowrl_test_corpus";
    fs::remove_all(dir);

    std::vector<Episode> eps;
    eps.push_back(ramp_episode(8, 2, 1, true));
    eps.push_back(ramp_episode(5, 2, 1, false));
    eps[1].source = Source::offline_extra;
    save_corpus(dir.string(), eps, false);
    CHECK_THROWS_AS(save_corpus(dir.string(), eps, false), DataError);

    std::vector<Episode> back = load_corpus(dir.string());
    REQUIRE(back.size() == 2);
    CHECK(back[0].length() == 8);
    CHECK(back[0].success);
    CHECK(!back[1].success);
    CHECK(back[1].source == Source::offline_extra);
    CHECK(back[0].observations.data == eps[0].observations.data);
    CHECK(back[0].actions.data == eps[0].actions.data);
    CHECK(back[0].rewards == eps[0].rewards);

    std::string h1 = corpus_manifest_hash(dir.string());
    std::string h2 = corpus_manifest_hash(dir.string());
    CHECK(h1 == h2);
    CHECK(!h1.empty());

    save_corpus(dir.string(), eps, true);  // overwrite allowed
    CHECK(corpus_manifest_hash(dir.string()) == h1);
    fs::remove_all(dir);
}

TEST_CASE("label_rewards reconstructs sparse pointmass reward") {
    ChunkedPointMass env;
    env.reset(5);
    Episode ep;
    int T = 30;
    ep.observations = Tensor(1, T, 4);
    ep.actions = Tensor(1, T, 2);
    std::vector<double> true_r;
    for (int t = 0; t < T; ++t) {
        auto o = env.observe();
        for (int k = 0; k < 4; ++k) ep.observations.at(0, t, k) = o[k];
        std::vector<double> a = {std::clamp(3.0 * (o[2] - o[0]), -1.0, 1.0),
                                 std::clamp(3.0 * (o[3] - o[1]), -1.0, 1.0)};
        ep.actions.at(0, t, 0) = a[0];
        ep.actions.at(0, t, 1) = a[1];
        true_r.push_back(env.step(a).first);
    }
    ep.rewards.assign(T, -7.0);  // garbage to be overwritten
    label_rewards(ep, "pointmass");
    CHECK(ep.rewards == true_r);
    label_rewards(ep, "pointmass");  // idempotent
    CHECK(ep.rewards == true_r);
    CHECK_THROWS_AS(label_rewards(ep, "no_such_rule"), ConfigError);
}
