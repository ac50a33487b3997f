#include <benchmark/benchmark.h>

#include "mltd/metaloop.hpp"
#include "mltd/ops.hpp"
#include "mltd/tape.hpp"
#include "mltd/tarp.hpp"

using namespace mltd;

namespace {

ModelConfig bench_model(std::size_t d) {
  ModelConfig m;
  m.vocab_size = 16;
  m.d_model = d;
  m.n_layers = 2;
  m.n_heads = 2;
  m.d_ffn = 2 * d;
  m.max_seq_len = 32;
  return m;
}

std::vector<Sequence> sequences(std::size_t n, std::size_t len, std::size_t vocab, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<Sequence> out(n, Sequence(len));
  for (auto& s : out)
    for (auto& t : s) t = static_cast<int>(rng() % vocab);
  return out;
}

void BM_Matmul(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  Rng rng(1);
  const Tensor a = randn({n, n}, 1.0, rng);
  const Tensor b = randn({n, n}, 1.0, rng);
  for (auto _ : state) benchmark::DoNotOptimize(ops::matmul(a, b));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(2 * n * n * n));
}
BENCHMARK(BM_Matmul)->Arg(16)->Arg(64)->Arg(256);

void BM_DynamicTarpForward(benchmark::State& state) {
  const auto d = static_cast<std::size_t>(state.range(0));
  Rng rng(2);
  DecompSpec spec;
  spec.kind = DecompKind::kDynamic;
  spec.rank = 4;
  ReparamLayer layer = wrap_layer(randn({d, d}, 0.1, rng), randn({d}, 0.1, rng), spec, 3);
  const Tensor x = randn({64, d}, 1.0, rng);
  for (auto _ : state) benchmark::DoNotOptimize(dynamic_forward(layer, x));
}
BENCHMARK(BM_DynamicTarpForward)->Arg(16)->Arg(64);

void BM_LmForwardBackward(benchmark::State& state) {
  const ModelConfig m = bench_model(static_cast<std::size_t>(state.range(0)));
  const NamedTensors params = build_model(m, 4).params;
  const auto batch = sequences(8, 32, m.vocab_size, 5);
  for (auto _ : state) {
    Tape tape;
    TapeScope scope(tape);
    NamedTensors w = tape.watch(params);
    benchmark::DoNotOptimize(grad(sequence_loss(m, w, batch), w));
  }
}
BENCHMARK(BM_LmForwardBackward)->Arg(16)->Arg(64)->Unit(benchmark::kMillisecond);

void BM_MetaStep(benchmark::State& state) {
  SuiteConfig sc;
  sc.n_domains = 8;
  sc.vocab = 16;
  sc.n_train = 8;
  sc.n_val = 2;
  sc.n_test = 8;
  sc.seq_len = 32;
  sc.n_meta_test = 2;
  const TaskSuite suite = generate_suite(sc);
  OverlayConfig ov;
  ov.tarp.rank = 2;
  MetaConfig cfg;
  cfg.meta_batch = 4;
  cfg.inner_steps = static_cast<std::size_t>(state.range(0));
  cfg.inner_lr = 0.5;
  MetaState st = init_meta_state(bench_model(16), ov, 6);
  std::vector<const Task*> tasks;
  for (std::size_t i = 0; i < cfg.meta_batch; ++i) tasks.push_back(&suite.meta_train[i]);
  for (auto _ : state) benchmark::DoNotOptimize(meta_step(tasks, st, cfg));
}
BENCHMARK(BM_MetaStep)->Arg(1)->Arg(5)->Unit(benchmark::kMillisecond);

}  // namespace
BENCHMARK_MAIN();
