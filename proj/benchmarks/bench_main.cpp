#include <benchmark/benchmark.h>

#include <memory>
#include <string>
#include <vector>

#include "gippo/algos.hpp"
#include "gippo/envs.hpp"
#include "gippo/nn.hpp"
#include "gippo/random.hpp"
#include "gippo/tape.hpp"

namespace {

using namespace gippo;

// Records a chain of `n` fused unary/binary nodes and sweeps it back.
void BM_TapeRecordAndBackward(benchmark::State& state) {
  const int n = static_cast<int>(state.range(0));
  ad::Tape tape;
  for (auto _ : state) {
    tape.clear();
    ad::Var x = tape.variable(0.3);
    ad::Var acc = x;
    for (int i = 0; i < n; ++i) acc = ad::tanh(acc * x + 0.1);
    tape.backward(acc);
    benchmark::DoNotOptimize(tape.adjoint(x));
  }
  state.SetItemsProcessed(state.iterations() * n);
}
BENCHMARK(BM_TapeRecordAndBackward)->Arg(1 << 10)->Arg(1 << 14);

// Batched forward and backward through a [64, 64] network.
void BM_MlpForwardBackward(benchmark::State& state) {
  const int batch = static_cast<int>(state.range(0));
  const nn::Mlp net = nn::Mlp::init({16, 64, 64, 4}, 1);
  CounterRng rng(1);
  nn::Matrix input(16, batch);
  for (Eigen::Index i = 0; i < input.size(); ++i) input.data()[i] = rng.normal();
  const nn::Matrix d_out = nn::Matrix::Ones(4, batch);
  nn::Mlp::Cache cache;
  for (auto _ : state) {
    benchmark::DoNotOptimize(net.forward(input, cache));
    benchmark::DoNotOptimize(net.backward(cache, d_out));
  }
  state.SetItemsProcessed(state.iterations() * batch);
}
BENCHMARK(BM_MlpForwardBackward)->Arg(64)->Arg(1024);

void env_step(benchmark::State& state, const std::string& id) {
  const auto env = envs::make_env(id);
  const std::vector<double> s0 = env->reset(7);
  const std::vector<double> action(env->act_dim(), 0.1);
  for (auto _ : state) benchmark::DoNotOptimize(env->step(s0, action));
  state.SetItemsProcessed(state.iterations());
}

void env_step_tape(benchmark::State& state, const std::string& id) {
  const auto env = envs::make_env(id);
  const std::vector<double> s0 = env->reset(7);
  ad::Tape tape;
  for (auto _ : state) {
    tape.clear();
    std::vector<ad::Var> s, a;
    for (double x : s0) s.push_back(tape.variable(x));
    for (int i = 0; i < env->act_dim(); ++i) a.push_back(tape.variable(0.1));
    const envs::Transition<ad::Var> t = env->step(s, a);
    tape.backward(t.reward);
    benchmark::DoNotOptimize(tape.adjoint(a[0]));
  }
  state.SetItemsProcessed(state.iterations());
}

BENCHMARK_CAPTURE(env_step, cartpole, std::string("cartpole"));
BENCHMARK_CAPTURE(env_step, traffic_10, std::string("traffic-10"));
BENCHMARK_CAPTURE(env_step_tape, cartpole, std::string("cartpole"));
BENCHMARK_CAPTURE(env_step_tape, traffic_10, std::string("traffic-10"));

// One full outer iteration with the default configuration.
void epoch(benchmark::State& state, const std::string& id, algos::Algo algo) {
  std::shared_ptr<const envs::Env> env = envs::make_env(id);
  algos::Trainer trainer(algo, env, algos::default_config(id, algo), 0);
  for (auto _ : state) benchmark::DoNotOptimize(trainer.run_epoch());
}

BENCHMARK_CAPTURE(epoch, dejong64_ppo, std::string("dejong64"), algos::Algo::kPpo)->Unit(benchmark::kMillisecond);
BENCHMARK_CAPTURE(epoch, dejong64_gippo, std::string("dejong64"), algos::Algo::kGiPpo)
    ->Unit(benchmark::kMillisecond);
BENCHMARK_CAPTURE(epoch, cartpole_gippo, std::string("cartpole"), algos::Algo::kGiPpo)
    ->Unit(benchmark::kMillisecond);
BENCHMARK_CAPTURE(epoch, traffic_2_gippo, std::string("traffic-2"), algos::Algo::kGiPpo)
    ->Unit(benchmark::kMillisecond)
    ->Iterations(3);

}  // namespace

BENCHMARK_MAIN();
