#include <benchmark/benchmark.h>

#include "hyperpeft/data.hpp"
#include "hyperpeft/hyper.hpp"
#include "hyperpeft/ops.hpp"

namespace hyperpeft {
namespace {

Tensor random(const Shape& shape, Rng& rng, bool grad) {
  std::vector<double> v(static_cast<std::size_t>(shape_numel(shape)));
  for (double& x : v) x = rng.normal();
  return Tensor::from_data(shape, std::move(v), grad);
}

void BM_Matmul(benchmark::State& state) {
  const auto n = state.range(0);
  Rng rng(0);
  Tensor a = random({n, n}, rng, false), b = random({n, n}, rng, false);
  for (auto _ : state) benchmark::DoNotOptimize(matmul(a, b).data().data());
  state.SetItemsProcessed(state.iterations() * 2 * n * n * n);
}
BENCHMARK(BM_Matmul)->Arg(32)->Arg(64)->Arg(128);

void BM_Attention(benchmark::State& state) {
  ModelConfig c;
  Rng rng(1);
  Transformer m(c, rng);
  const auto t = state.range(0);
  Tensor x = random({t, c.d_model}, rng, false);
  AttentionWeights w{random({c.d_model, c.d_model}, rng, false),
                     random({c.d_model, c.d_model}, rng, false),
                     random({c.d_model, c.d_model}, rng, false),
                     random({c.d_model, c.d_model}, rng, false)};
  NoGradGuard g;
  for (auto _ : state) benchmark::DoNotOptimize(m.attention(x, x, nullptr, false, w).data().data());
}
BENCHMARK(BM_Attention)->Arg(16)->Arg(64)->Arg(256);

void BM_HyperForwardBackward(benchmark::State& state) {
  const bool lora = state.range(0) == 1;
  ModelConfig c;
  HyperModelConfig hc;
  hc.downstream = c;
  hc.target.kind = lora ? PeftKind::kLora : PeftKind::kPrefixMlp;
  Rng rng(2);
  Transformer down(c, rng);
  down.params().set_frozen(true);
  HyperModel hyper(hc, rng);
  const auto tasks = synth_tasks(0, 24, 20);
  FewShotSet set;
  for (int i = 0; i < 16; ++i) set.examples.push_back(tasks[0].train[static_cast<std::size_t>(i)]);
  const auto fewshot = format_fewshot(set, 256);
  const auto src = tokenize(tasks[0].test[0].input);
  const auto tgt = tokenize(tasks[0].test[0].target);
  for (auto _ : state) {
    const Injections inj = to_injections(hyper.generate(fewshot));
    Tensor loss = seq_loss(down, src, tgt, &inj);
    backward(loss);
    hyper.params().zero_grad();
  }
}
BENCHMARK(BM_HyperForwardBackward)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);

}  // namespace
}  // namespace hyperpeft

BENCHMARK_MAIN();
