#include <benchmark/benchmark.h>

#include "dql/bandit.hpp"
#include "dql/diffusion.hpp"
#include "dql/trainer.hpp"

namespace {

using namespace dql;

DiffusionPolicy policy_for(int steps, int hidden) {
  DiffusionPolicyConfig cfg;
  cfg.steps = steps;
  cfg.hidden_dim = hidden;
  Rng rng(1);
  return make_diffusion_policy(cfg, rng);
}

void BM_MlpForward(benchmark::State& state) {
  const int hidden = static_cast<int>(state.range(0));
  const int batch = static_cast<int>(state.range(1));
  MlpSpec spec;
  spec.input_dim = 19;
  spec.hidden_dim = hidden;
  spec.output_dim = 2;
  spec.depth = 3;
  Rng rng(2);
  const ParamSet p = mlp_init(spec, rng);
  const Matrix x = rng.normal_matrix(19, batch);
  for (auto _ : state) benchmark::DoNotOptimize(mlp_forward(p, spec, x));
  state.SetItemsProcessed(state.iterations() * batch);
}
BENCHMARK(BM_MlpForward)->Args({64, 256})->Args({256, 256});

void BM_BcLossBackward(benchmark::State& state) {
  const DiffusionPolicy p = policy_for(5, static_cast<int>(state.range(0)));
  Rng rng(3);
  const Matrix states = Matrix::Zero(1, 256);
  const Matrix actions = rng.normal_matrix(2, 256).cwiseMax(-1.0).cwiseMin(1.0);
  const NoiseBatch nb = draw_noise_batch(p.schedule, 256, 2, rng);
  for (auto _ : state) {
    Tape tape;
    const auto v = tape.bind(p.params);
    tape.backward(bc_loss(v, p, tape.constant(states), actions, nb));
    benchmark::DoNotOptimize(tape.gradients(v, p.params));
  }
}
BENCHMARK(BM_BcLossBackward)->Arg(64)->Arg(256)->Unit(benchmark::kMillisecond);

void BM_ChainBackward(benchmark::State& state) {
  const DiffusionPolicy p = policy_for(static_cast<int>(state.range(0)), 64);
  Rng rng(4);
  const ChainNoise noise = draw_chain_noise(p, 256, rng);
  const Matrix states = Matrix::Zero(1, 256);
  for (auto _ : state) {
    Tape tape;
    const auto v = tape.bind(p.params);
    tape.backward(mean(sample_actions(v, p, tape.constant(states), noise)));
    benchmark::DoNotOptimize(tape.gradients(v, p.params));
  }
}
BENCHMARK(BM_ChainBackward)->Arg(5)->Arg(50)->Unit(benchmark::kMillisecond);

void BM_TrainStep(benchmark::State& state) {
  TrainConfig cfg;
  cfg.diffusion_steps = static_cast<int>(state.range(0));
  cfg.hidden_dim = static_cast<int>(state.range(1));
  cfg.gamma = 0.0;
  const OfflineDataset data = gen_dataset(BanditSpec::corners(), 0);
  TrainState ts = init_train_state(cfg, 1, 2, ActionBounds::box(2));
  for (auto _ : state) {
    const TransitionBatch batch = sample_batch(data, 256, ts.rng);
    benchmark::DoNotOptimize(train_step(ts, batch, cfg));
  }
}
BENCHMARK(BM_TrainStep)->Args({5, 64})->Args({5, 256})->Args({50, 64})->Unit(benchmark::kMillisecond);

void BM_SampleActions(benchmark::State& state) {
  const DiffusionPolicy p = policy_for(static_cast<int>(state.range(0)), 64);
  Rng rng(5);
  const Matrix states = Matrix::Zero(1, 2000);
  for (auto _ : state) benchmark::DoNotOptimize(sample_actions(p, states, rng));
  state.SetItemsProcessed(state.iterations() * 2000);
}
BENCHMARK(BM_SampleActions)->Arg(5)->Arg(50)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
