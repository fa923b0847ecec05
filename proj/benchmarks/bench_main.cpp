#include <benchmark/benchmark.h>

#include "binaformer/attention.hpp"
#include "binaformer/costmodel.hpp"
#include "binaformer/encoders.hpp"
#include "binaformer/ops.hpp"

using namespace binaformer;

namespace {

Tensor random_tensor(Shape shape, Rng& rng) {
  const auto n = shape_numel(shape);
  return Tensor(std::move(shape), rng.normal_vector(n, 1.0));
}

void BM_Matmul(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  Rng rng(1);
  const auto a = random_tensor({n, n}, rng), b = random_tensor({n, n}, rng);
  for (auto _ : state) benchmark::DoNotOptimize(matmul(a, b));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(n * n * n));
}
BENCHMARK(BM_Matmul)->Arg(32)->Arg(64)->Arg(128);

void BM_DenseAttention(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  Rng rng(2);
  const auto q = random_tensor({n, 32}, rng), k = random_tensor({n, 32}, rng), v = random_tensor({n, 32}, rng);
  NoGradGuard guard;
  for (auto _ : state) benchmark::DoNotOptimize(dense_attention(q, k, v, 0.17));
}
BENCHMARK(BM_DenseAttention)->Arg(64)->Arg(256)->Arg(512);

void BM_SparseAttention(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  Rng rng(2);
  const auto q = random_tensor({n, 32}, rng), k = random_tensor({n, 32}, rng), v = random_tensor({n, 32}, rng);
  const auto csr = SparsePattern{PatternKind::strided, 8}.csr(n);
  NoGradGuard guard;
  for (auto _ : state) {
    benchmark::DoNotOptimize(sparse_weighted_sum(segment_softmax(sparse_scores(q, k, csr, 0.17), csr), v, csr));
  }
}
BENCHMARK(BM_SparseAttention)->Arg(64)->Arg(256)->Arg(512);

void BM_BlockForwardBackward(benchmark::State& state) {
  EncoderConfig cfg;
  cfg.kind = static_cast<EncoderKind>(state.range(0));
  cfg.layers = 1;
  cfg.dim = 64;
  cfg.heads = 4;
  cfg.conv_kernel = 15;
  if (cfg.kind == EncoderKind::sparseformer) cfg.pattern = SparsePattern{PatternKind::strided, 8};
  Rng rng(3);
  const auto block = make_block(cfg, PrecisionSpec::fp32(), rng);
  const auto x = Tensor({64, 64}, rng.normal_vector(64 * 64, 1.0), true);
  for (auto _ : state) {
    const auto y = mean(block->forward(x, {}));
    y.backward();
  }
  state.SetLabel(encoder_kind_name(cfg.kind));
}
BENCHMARK(BM_BlockForwardBackward)->DenseRange(0, 3);

void BM_ProfileReferenceSuite(benchmark::State& state) {
  const auto suite = reference_suite();
  for (auto _ : state) {
    for (const auto& rc : suite) benchmark::DoNotOptimize(profile(rc.encoder, PrecisionSpec::w1a1()));
  }
}
BENCHMARK(BM_ProfileReferenceSuite);

}  // namespace

BENCHMARK_MAIN();
