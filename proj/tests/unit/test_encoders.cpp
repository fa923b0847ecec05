#include <doctest.h>

#include <cmath>

#include "binaformer/attention.hpp"
#include "binaformer/encoders.hpp"
#include "binaformer/errors.hpp"
#include "binaformer/gradcheck.hpp"
#include "binaformer/ops.hpp"
#include "helpers.hpp"

using namespace binaformer;
using binaformer::test::random_tensor;

namespace {

EncoderConfig small_config(EncoderKind kind) {
  EncoderConfig cfg;
  cfg.kind = kind;
  cfg.layers = 2;
  cfg.dim = 8;
  cfg.heads = 2;
  cfg.ffn_expansion = 2;
  cfg.conv_kernel = 3;
  cfg.input_dim = 5;
  cfg.max_positions = 64;
  if (kind == EncoderKind::sparseformer) cfg.pattern = SparsePattern{PatternKind::strided, 4};
  return cfg;
}

// Reference multi-head attention: dense per-head attention under an explicit mask.
Tensor masked_reference(const MultiHeadAttention& mha, const Tensor& x, const std::vector<bool>& mask) {
  const auto spec = PrecisionSpec::fp32();
  const auto q = mha.query().forward(x, spec);
  const auto k = mha.key().forward(x, spec);
  const auto v = mha.value().forward(x, spec);
  const std::size_t d = x.dim(1), dh = d / mha.heads();
  std::vector<Tensor> heads;
  for (std::size_t h = 0; h < mha.heads(); ++h) {
    const auto cut = [&](const Tensor& t) { return slice_cols(t, h * dh, (h + 1) * dh); };
    heads.push_back(dense_attention(cut(q), cut(k), cut(v), 1.0 / std::sqrt(static_cast<double>(dh)), mask));
  }
  return mha.output().forward(concat_cols(heads), spec);
}

}  // namespace

TEST_CASE("pattern masks follow their closed forms") {
  for (auto kind : {PatternKind::strided, PatternKind::fixed}) {
    for (std::size_t l : {2, 3, 4, 8}) {
      const SparsePattern p{kind, l};
      for (std::size_t n : {1, 5, 16, 33}) {
        const auto mask = p.mask(n);
        const auto csr = p.csr(n);
        std::size_t count = 0;
        for (std::size_t i = 0; i < n; ++i) {
          CHECK(mask[i * n + i]);
          for (std::size_t j = 0; j < n; ++j) {
            const long d = static_cast<long>(i) - static_cast<long>(j);
            const bool expect = kind == PatternKind::strided ? (std::labs(d) < static_cast<long>(l) || j % l == l - 1)
                                                             : (i / l == j / l || j % l == l - 1);
            CHECK(mask[i * n + j] == (expect || i == j));
            count += mask[i * n + j];
          }
          for (std::size_t e = csr.row_ptr[i]; e < csr.row_ptr[i + 1]; ++e) CHECK(mask[i * n + csr.cols[e]]);
        }
        CHECK(csr.nonzeros() == count);
        CHECK(p.nonzeros(n) == count);
        CHECK(count <= n * (2 * l + (n + l - 1) / l));
      }
    }
  }
  const SparsePattern full{PatternKind::full, 4};
  CHECK(full.nonzeros(7) == 49);
}

TEST_CASE("single-token attention is the value path") {
  Rng rng(1);
  const MultiHeadAttention mha(8, 2, rng);
  const auto x = random_tensor({1, 8}, rng);
  const auto spec = PrecisionSpec::fp32();
  const auto y = mha.forward(x, std::nullopt, spec);
  const auto ref = mha.output().forward(mha.value().forward(x, spec), spec);
  CHECK(test::max_abs_diff(y.data(), ref.data()) < 1e-14);
}

TEST_CASE("sparse attention equals masked dense attention") {
  Rng rng(2);
  const MultiHeadAttention mha(8, 2, rng);
  for (auto kind : {PatternKind::strided, PatternKind::fixed}) {
    for (std::size_t n : {8, 16, 32}) {
      const SparsePattern p{kind, 4};
      const auto x = random_tensor({n, 8}, rng);
      const auto sparse = mha.forward(x, p, PrecisionSpec::fp32());
      const auto dense = masked_reference(mha, x, p.mask(n));
      CHECK(test::max_abs_diff(sparse.data(), dense.data()) < 1e-10);
    }
  }
}

TEST_CASE("full pattern takes the dense path") {
  Rng rng(3);
  const MultiHeadAttention mha(8, 2, rng);
  const auto x = random_tensor({12, 8}, rng);
  const auto a = mha.forward(x, SparsePattern{PatternKind::full, 4}, PrecisionSpec::fp32());
  const auto b = mha.forward(x, std::nullopt, PrecisionSpec::fp32());
  CHECK(test::bitwise_equal(a.data(), b.data()));
}

TEST_CASE("zeroed output projections make blocks the identity") {
  Rng rng(4);
  for (auto kind : {EncoderKind::vanilla, EncoderKind::sparseformer, EncoderKind::squeezeformer}) {
    auto block = make_block(small_config(kind), PrecisionSpec::fp32(), rng);
    block->zero_output_projections();
    const auto x = random_tensor({9, 8}, rng);
    const auto y = block->forward(x, {});
    CHECK(test::max_abs_diff(y.data(), x.data()) < 1e-14);
  }
  // The conformer block ends in a layer norm, so the identity holds before it.
  const auto cfg = small_config(EncoderKind::conformer);
  ConformerBlock conformer(cfg, PrecisionSpec::fp32(), rng);
  conformer.zero_output_projections();
  const auto x = random_tensor({5, 8}, rng);
  const auto y = conformer.forward(x, {});
  CHECK(test::max_abs_diff(y.data(), conformer.final_norm().forward(x).data()) < 1e-14);
}

TEST_CASE("blocks preserve shape at both precisions") {
  Rng rng(5);
  for (auto kind : {EncoderKind::vanilla, EncoderKind::sparseformer, EncoderKind::conformer,
                    EncoderKind::squeezeformer}) {
    for (const auto& spec : {PrecisionSpec::fp32(), PrecisionSpec::w1a1()}) {
      auto block = make_block(small_config(kind), spec, rng);
      for (std::size_t n : {3, 5, 8, 9, 17}) {
        const auto y = block->forward(random_tensor({n, 8}, rng), {});
        CHECK(y.shape() == Shape{n, 8});
      }
    }
  }
}

TEST_CASE("squeezeformer stack pools and restores the length") {
  auto cfg = small_config(EncoderKind::squeezeformer);
  Rng rng(6);
  const auto features = random_tensor({8, 5}, rng);

  Encoder plain(cfg, PrecisionSpec::fp32(), 7);
  CHECK(plain.encode(features).shape() == Shape{8, 8});

  cfg.subsample_factor = 2;
  Encoder squeezed(cfg, PrecisionSpec::fp32(), 7);
  CHECK(squeezed.encode(features).shape() == Shape{8, 8});
  CHECK(squeezed.hidden_states(features).size() == 3);

  // With identity blocks the stack reduces to x + upsample(pool(x)).
  for (auto& b : squeezed.blocks()) b->zero_output_projections();
  const auto params = squeezed.parameters();
  const auto x = add(add_bias(matmul(features, params[0].tensor), params[1].tensor), sinusoidal_positions(8, 8));
  const auto expect = add(upsample_rows(avg_pool_rows(x, 2), 2, 8), x);
  CHECK(test::max_abs_diff(squeezed.encode(features).data(), expect.data()) < 1e-12);
  CHECK(avg_pool_rows(x, 2).dim(0) == 4);
}

TEST_CASE("empty stack is projection plus positions") {
  auto cfg = small_config(EncoderKind::vanilla);
  cfg.layers = 0;
  Encoder enc(cfg, PrecisionSpec::fp32(), 3);
  Rng rng(7);
  const auto features = random_tensor({6, 5}, rng);
  const auto params = enc.parameters();
  REQUIRE(params.size() == 2);
  CHECK(params[0].name == "encoder.input.weight");
  const auto expect =
      add(add_bias(matmul(features, params[0].tensor), params[1].tensor), sinusoidal_positions(6, 8));
  CHECK(test::bitwise_equal(enc.encode(features).data(), expect.data()));
}

TEST_CASE("same seed builds identical encoders") {
  for (auto kind : {EncoderKind::vanilla, EncoderKind::conformer}) {
    const auto cfg = small_config(kind);
    Rng rng(8);
    const auto features = random_tensor({7, 5}, rng);
    const auto a = build_encoder(cfg, PrecisionSpec::w1a1(), 11).encode(features);
    const auto b = build_encoder(cfg, PrecisionSpec::w1a1(), 11).encode(features);
    CHECK(test::bitwise_equal(a.data(), b.data()));
  }
}

TEST_CASE("vanilla 12/768/12 block stack has about 12 D^2 parameters per layer") {
  EncoderConfig cfg;
  cfg.kind = EncoderKind::vanilla;
  cfg.layers = 12;
  cfg.dim = 768;
  cfg.heads = 12;
  cfg.input_dim = 16;
  const Encoder enc(cfg, PrecisionSpec::fp32(), 1);
  const double closed = 12.0 * 12.0 * 768.0 * 768.0;
  const double got = static_cast<double>(enc.block_parameter_count());
  CHECK(std::abs(got - closed) / closed < 0.02);
}

TEST_CASE("config validation") {
  auto cfg = small_config(EncoderKind::vanilla);
  CHECK_NOTHROW(cfg.validate());
  cfg.heads = 3;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = small_config(EncoderKind::sparseformer);
  cfg.pattern.reset();
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = small_config(EncoderKind::conformer);
  cfg.subsample_factor = 2;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("encode rejects the wrong feature width") {
  const Encoder enc(small_config(EncoderKind::vanilla), PrecisionSpec::fp32(), 1);
  CHECK_THROWS_AS(enc.encode(Tensor::zeros({4, 6})), DimensionError);
}

TEST_CASE("every block type passes the finite-difference check") {
  for (const auto& r : run_gradcheck(block_grad_cases(), {})) {
    INFO(r.name, " rel err ", r.max_rel_error);
    CHECK(r.passed);
  }
}
