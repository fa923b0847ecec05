#include <doctest.h>

#include <cmath>
#include <map>

#include "binaformer/costmodel.hpp"
#include "binaformer/errors.hpp"
#include "helpers.hpp"

using namespace binaformer;

namespace {

std::map<std::string, CostReport> suite_reports(const PrecisionSpec& spec) {
  std::map<std::string, CostReport> out;
  for (const auto& rc : reference_suite()) out[rc.name] = profile(rc.encoder, spec, 1000);
  return out;
}

std::uint64_t attention_macs(const CostReport& r) {
  std::uint64_t m = 0;
  for (const auto& l : r.per_layer)
    if (l.kind == "attention_score" || l.kind == "attention_prob") m += l.macs;
  return m;
}

EncoderConfig random_config(Rng& rng) {
  EncoderConfig cfg;
  const EncoderKind kinds[] = {EncoderKind::vanilla, EncoderKind::conformer, EncoderKind::squeezeformer,
                               EncoderKind::sparseformer};
  cfg.kind = kinds[rng.index(4)];
  cfg.heads = 1 + rng.index(4);
  cfg.dim = cfg.heads * (4 + 4 * rng.index(8));
  cfg.layers = 1 + rng.index(6);
  cfg.conv_kernel = 3 + 2 * rng.index(5);
  cfg.input_dim = 8 + rng.index(64);
  if (cfg.kind == EncoderKind::sparseformer) cfg.pattern = SparsePattern{PatternKind::strided, 2 + rng.index(8)};
  if (cfg.kind == EncoderKind::squeezeformer && rng.bernoulli(0.5)) cfg.subsample_factor = 2;
  return cfg;
}

}  // namespace

TEST_CASE("single linear layer closed forms") {
  const std::vector<LayerCost> fp{{"fc", "linear", 6, 32, 6, 32, 32}, {"fc.bias", "bias", 3, 32, 0, 32, 32}};
  const auto r = summarize(fp, kFittedDevicePeak);
  CHECK(r.storage_bits == 9 * 32);
  CHECK(r.storage_mb == doctest::Approx(36e-6));
  CHECK(r.total_macs == 6);
  CHECK(r.flop == 12);
  CHECK(r.bop_nonq == 6144);

  const std::vector<LayerCost> bq{{"fc", "linear", 6, 1, 6, 1, 1}, {"fc.bias", "bias", 3, 32, 0, 32, 32}};
  const auto q = summarize(bq, kFittedDevicePeak);
  CHECK(q.bop_bq == 6);
  CHECK(q.bop_nonq == 6144);
  CHECK(q.flop == 0);
  CHECK(q.storage_bits == 6 + 3 * 32);
}

TEST_CASE("unknown layer kinds and bit widths are rejected by name") {
  try {
    summarize({{"mystery", "lstm", 1, 32, 1, 32, 32}}, kFittedDevicePeak);
    FAIL("expected ProfilingError");
  } catch (const ProfilingError& e) {
    CHECK(std::string(e.what()).find("mystery") != std::string::npos);
  }
  CHECK_THROWS_AS(summarize({{"fc", "linear", 1, 32, 1, 8, 32}}, kFittedDevicePeak), ProfilingError);
}

TEST_CASE("device peak and time estimate") {
  CHECK(kFittedDevicePeak == doctest::Approx(3.195e14).epsilon(1e-3));
  CHECK(fit_device_peak(1228.64e9, 38.46e-4) == kFittedDevicePeak);
  CHECK(std::abs(estimate_seconds(1228.64e9, kFittedDevicePeak) / 38.46e-4 - 1.0) < 1e-6);
  CHECK_THROWS_AS(estimate_seconds(1.0, 0.0), ConfigError);
  CHECK_THROWS_AS(profile(reference_suite()[0].encoder, PrecisionSpec::fp32(), 0), ConfigError);
}

TEST_CASE("reduction arithmetic") {
  CHECK(std::abs(reduction_percent(184.42, 12.10) - 93.4) < 0.05);
  CHECK(std::abs(reduction_percent(15.94, 10.70) - 32.9) < 0.05);
  CHECK_THROWS_AS(reduction_percent(0.0, 1.0), DivisionError);

  const auto r = profile(reference_suite()[1].encoder, PrecisionSpec::fp32());
  const auto same = reduction_report(r, r);
  CHECK(same.storage == 0.0);
  CHECK(same.flop == 0.0);
  CHECK(same.bop_nonq == 0.0);
  CHECK(same.est_time == 0.0);
}

TEST_CASE("totals are exact per-layer sums") {
  Rng rng(31);
  for (int trial = 0; trial < 20; ++trial) {
    const auto cfg = random_config(rng);
    const std::size_t n = 8 + rng.index(200);
    for (const auto& spec : {PrecisionSpec::fp32(), PrecisionSpec::w1a1()}) {
      const auto r = profile(cfg, spec, n);
      std::uint64_t bits = 0, macs = 0, flop = 0, nonq = 0, bq = 0;
      for (const auto& l : r.per_layer) {
        bits += l.params * static_cast<std::uint64_t>(l.param_bits);
        macs += l.macs;
        if (l.weight_bits == 32 && l.act_bits == 32) flop += 2 * l.macs;
        nonq += l.macs * 1024;
        bq += l.macs * static_cast<std::uint64_t>(l.weight_bits * l.act_bits);
      }
      CHECK(r.storage_bits == bits);
      CHECK(r.total_macs == macs);
      CHECK(r.flop == flop);
      CHECK(r.bop_nonq == nonq);
      CHECK(r.bop_bq == bq);
      CHECK(r.storage_mb == static_cast<double>(bits) / 8e6);
    }
  }
}

TEST_CASE("binarization always reduces storage and bit operations") {
  Rng rng(32);
  for (int trial = 0; trial < 20; ++trial) {
    const auto cfg = random_config(rng);
    const auto fp = profile(cfg, PrecisionSpec::fp32(), 64);
    const auto bq = profile(cfg, PrecisionSpec::w1a1(), 64);
    CHECK(bq.storage_bits < fp.storage_bits);
    CHECK(bq.bop_bq < fp.bop_bq);
    CHECK(bq.bop_bq < bq.bop_nonq);
    CHECK(bq.bop_nonq == fp.bop_nonq);
  }
}

TEST_CASE("costs grow with depth, width and length") {
  Rng rng(33);
  for (int trial = 0; trial < 20; ++trial) {
    const auto cfg = random_config(rng);
    const auto spec = trial % 2 ? PrecisionSpec::w1a1() : PrecisionSpec::fp32();
    const auto base = profile(cfg, spec, 64);
    auto deeper = cfg;
    deeper.layers += 1;
    auto wider = cfg;
    wider.dim += cfg.heads;
    for (const auto& r : {profile(deeper, spec, 64), profile(wider, spec, 64), profile(cfg, spec, 65)}) {
      CHECK(r.storage_bits >= base.storage_bits);
      CHECK(r.flop >= base.flop);
      CHECK(r.bop_nonq >= base.bop_nonq);
      CHECK(r.bop_bq >= base.bop_bq);
      CHECK(r.est_time_s >= base.est_time_s);
    }
  }
}

TEST_CASE("strided pattern cuts attention cost once n >= 4l") {
  for (std::size_t l : {2, 4, 8, 32}) {
    for (std::size_t n : {4 * l, 4 * l + 3, 10 * l}) {
      EncoderConfig dense;
      dense.layers = 2;
      dense.dim = 32;
      dense.heads = 4;
      auto sparse = dense;
      sparse.kind = EncoderKind::sparseformer;
      sparse.pattern = SparsePattern{PatternKind::strided, l};
      CHECK(attention_macs(profile(sparse, PrecisionSpec::fp32(), n)) <
            attention_macs(profile(dense, PrecisionSpec::fp32(), n)));
    }
  }
}

TEST_CASE("reference configurations keep the published orderings that the cost rules reproduce") {
  const auto r = suite_reports(PrecisionSpec::fp32());
  const auto storage = [&](const char* n) { return r.at(n).storage_bits; };
  const auto flop = [&](const char* n) { return r.at(n).flop; };
  for (const char* other : {"conformer_s", "squeeze_xs", "sparse_dn_s", "sparse_sw_s"})
    CHECK(storage("vanilla") > storage(other));
  CHECK(storage("sparse_sw_s") > storage("sparse_dn_s"));
  CHECK(std::abs(r.at("conformer_s").storage_mb / r.at("squeeze_xs").storage_mb - 1.0) < 0.1);

  CHECK(flop("vanilla") > flop("sparse_sw_s"));
  CHECK(flop("sparse_sw_s") > flop("sparse_dn_s"));
  CHECK(flop("sparse_dn_s") > flop("conformer_s"));
  CHECK(flop("conformer_s") > flop("squeeze_xs"));
  const double ratio = static_cast<double>(flop("conformer_s")) / static_cast<double>(flop("vanilla"));
  CHECK(ratio >= 0.10);
  CHECK(ratio <= 0.40);
}

TEST_CASE("reference rows and suite") {
  const auto suite = reference_suite();
  REQUIRE(suite.size() == 5);
  CHECK(suite[0].name == "vanilla");
  CHECK(suite[0].encoder.dim == 768);
  const auto row = reference_row("conformer_s", PrecisionSpec::fp32());
  REQUIRE(row.has_value());
  CHECK(row->storage_mb == 131.87);
  CHECK(row->flop_g == 22.10);
  CHECK_FALSE(row->bop_bq_g.has_value());
  CHECK(reference_row("sparse_dn_s", PrecisionSpec::w1a1())->storage_mb == 12.10);
  CHECK_FALSE(reference_row("tiny", PrecisionSpec::fp32()).has_value());
  CHECK(display_name("conformer_s", PrecisionSpec::w1a1()) == "BQ-Conformer-S");
  CHECK(display_name("tiny", PrecisionSpec::fp32()) == "tiny");
}

TEST_CASE("profile table layout") {
  const auto empty = profile_table({}, TableFormat::tsv, false);
  CHECK(std::count(empty.begin(), empty.end(), '\n') == 1);
  CHECK(empty.rfind("encoder\t", 0) == 0);

  const auto suite = reference_suite();
  const auto& cs = suite[1];
  ProfileRow row{cs.name, cs.encoder, PrecisionSpec::fp32(), profile(cs.encoder, PrecisionSpec::fp32()),
                 reference_row(cs.name, PrecisionSpec::fp32())};
  const auto table = profile_table({row}, TableFormat::tsv, true);
  CHECK(std::count(table.begin(), table.end(), '\n') == 2);
  CHECK(table.find("131.87") != std::string::npos);
  CHECK(table.find("22.10") != std::string::npos);
  CHECK(table.find("FLOP=2*MAC") != std::string::npos);
  CHECK(profile_table({row}, TableFormat::tsv, true) == table);
}
