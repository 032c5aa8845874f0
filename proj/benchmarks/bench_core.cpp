#include <benchmark/benchmark.h>

#include "flowrl/critic.hpp"
#include "flowrl/flow.hpp"

using namespace flowrl;

namespace {

TrainConfig bench_cfg() {
    TrainConfig cfg;
    cfg.chunk_len = 10;
    cfg.prefix_len = 3;
    cfg.flow_depth = 16;
    cfg.hidden = 64;
    cfg.heads = 4;
    cfg.critic_hidden = 64;
    cfg.critic_heads = 4;
    cfg.critic_layers = 2;
    cfg.seed = 1;
    return cfg;
}

struct FlowFixture {
    TrainConfig cfg = bench_cfg();
    FlowModel model{cfg, 4, 4};
    Tensor obs, prefix, a;
    ConditioningContext ctx;

    explicit FlowFixture(int batch) {
        Rng rng(2);
        obs = Tensor::randn(batch, 1, 4, rng, 0.5);
        prefix = Tensor::randn(batch, 3, 4, rng, 0.3);
        a = Tensor(batch, 10, 4);
        for (auto& v : a.data) v = rng.uniform(-0.9, 0.9);
        ctx = model.encode_context(obs, prefix);
    }
};

void bm_flow_forward(benchmark::State& state) {
    FlowFixture f(int(state.range(0)));
    for (auto _ : state) benchmark::DoNotOptimize(f.model.flow_forward(f.a, f.ctx));
    state.SetItemsProcessed(state.iterations() * state.range(0));
}

void bm_flow_sample(benchmark::State& state) {
    FlowFixture f(1);
    Rng rng(3);
    int n = int(state.range(0));
    for (auto _ : state) benchmark::DoNotOptimize(f.model.sample(f.ctx, 0.7, n, rng));
    state.SetItemsProcessed(state.iterations() * n);
}

void bm_flow_il_step(benchmark::State& state) {
    FlowFixture f(int(state.range(0)));
    Rng rng(4);
    for (auto _ : state) {
        f.model.params().zero_grads();
        Tape tape;
        Var loss = f.model.il_loss_t(tape, f.obs, f.prefix, f.a, 0.1, rng);
        tape.backward(loss);
        benchmark::DoNotOptimize(tape.val(loss).item());
    }
}

void bm_critic_eval(benchmark::State& state) {
    TrainConfig cfg = bench_cfg();
    ValueSupport s = ValueSupport::make(0.0, 10.0, cfg.num_bins, 0.75);
    CriticEnsemble ens(cfg, 4, 4, s);
    int B = int(state.range(0));
    Rng rng(5);
    Tensor obs = Tensor::randn(B, 1, 4, rng, 0.5);
    Tensor prefix = Tensor::randn(B, 3, 4, rng, 0.3);
    Tensor chunk = Tensor::randn(B, 10, 4, rng, 0.3);
    for (auto _ : state) benchmark::DoNotOptimize(ens.min_q(obs, prefix, chunk));
    state.SetItemsProcessed(state.iterations() * B);
}

void bm_hl_gauss_project(benchmark::State& state) {
    ValueSupport s = ValueSupport::make(0.0, 10.0, 101, 0.75);
    double y = 0.0;
    for (auto _ : state) {
        y = y > 10.0 ? 0.0 : y + 0.01;
        benchmark::DoNotOptimize(hl_gauss_project(y, s));
    }
}

BENCHMARK(bm_flow_forward)->Arg(1)->Arg(24)->Arg(128);
BENCHMARK(bm_flow_sample)->Arg(1)->Arg(24)->Arg(128);
BENCHMARK(bm_flow_il_step)->Arg(48);
BENCHMARK(bm_critic_eval)->Arg(1)->Arg(24)->Arg(128);
BENCHMARK(bm_hl_gauss_project);

}  // namespace

BENCHMARK_MAIN();
