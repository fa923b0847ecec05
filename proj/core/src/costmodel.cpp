#include "binaformer/costmodel.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <map>
#include <sstream>

#include "binaformer/errors.hpp"

namespace binaformer {

namespace {

constexpr std::array<const char*, 10> kKnownKinds = {
    "linear", "conv", "attention_score", "attention_prob", "norm", "activation", "pool", "positional", "bias", "scale",
};

bool known_kind(const std::string& kind) {
  return std::find(kKnownKinds.begin(), kKnownKinds.end(), kind) != kKnownKinds.end();
}

using u64 = std::uint64_t;

class LayerSink {
 public:
  LayerSink(const PrecisionSpec& spec, std::vector<LayerCost>& out) : spec_(spec), out_(out) {}

  void push(std::string name, std::string kind, u64 params, u64 macs, int wbits = 32, int abits = 32) {
    out_.push_back({std::move(name), std::move(kind), params, 32, macs, wbits, abits});
  }

  // Weight, bias and (when quantized) binarizer scales of one dense layer.
  void linear(const std::string& name, u64 n, u64 in, u64 out, bool full_precision = false,
              bool quantize_input = true) {
    const bool quantized = !full_precision && spec_.any_quantized();
    const int wbits = full_precision ? 32 : spec_.weight_bits_for(ModuleClass::linear);
    const int abits = full_precision || !quantize_input ? 32 : spec_.activation_bits_for(ModuleClass::linear);
    out_.push_back({name + ".weight", "linear", in * out, wbits, n * in * out, wbits, abits});
    push(name + ".bias", "bias", out, 0);
    if (quantized) push(name + ".scale", "scale", out + 2, 0);
  }

  void conv(const std::string& name, u64 n, u64 k, u64 c_in, u64 c_out, bool depthwise) {
    const int wbits = spec_.weight_bits_for(ModuleClass::conv);
    const int abits = spec_.activation_bits_for(ModuleClass::conv);
    const u64 params = depthwise ? k * c_out : k * c_in * c_out;
    const u64 macs = depthwise ? n * k * c_out : n * k * c_in * c_out;
    out_.push_back({name + ".weight", "conv", params, wbits, macs, wbits, abits});
    if (spec_.any_quantized()) push(name + ".scale", "scale", c_out + 2, 0);
  }

  void layer_norm(const std::string& name, u64 n, u64 d) { push(name, "norm", 2 * d, n * d); }
  void activation(const std::string& name, u64 n, u64 d) { push(name, "activation", 0, n * d); }

  void attention(const std::string& name, u64 n, u64 d, u64 nnz) {
    linear(name + ".q", n, d, d);
    linear(name + ".k", n, d, d);
    linear(name + ".v", n, d, d);
    const int sbits = spec_.activation_bits_for(ModuleClass::attention_score);
    const int pbits = spec_.activation_bits_for(ModuleClass::attention_prob);
    push(name + ".scores", "attention_score", 0, nnz * d, sbits, sbits);
    activation(name + ".softmax", n, d);
    push(name + ".weighted_sum", "attention_prob", 0, nnz * d, pbits, pbits);
    if (spec_.any_quantized()) push(name + ".act_scale", "scale", 8, 0);
    linear(name + ".o", n, d, d);
  }

  void feed_forward(const std::string& name, u64 n, u64 d, u64 expansion) {
    linear(name + ".in", n, d, d * expansion);
    activation(name + ".act", n, d);
    linear(name + ".out", n, d * expansion, d, false, spec_.quantizes_activations(ModuleClass::ffn_activation));
  }

  void conv_module(const std::string& name, u64 n, u64 d, u64 kernel, bool gated) {
    conv(name + ".pw1", n, 1, d, gated ? 2 * d : d, false);
    activation(name + (gated ? ".glu" : ".swish1"), n, d);
    conv(name + ".dw", n, kernel, d, d, true);
    // Gain, bias and the two running statistics.
    push(name + ".bn", "norm", 4 * d, n * d);
    activation(name + ".swish", n, d);
    conv(name + ".pw2", n, 1, d, d, false);
  }

 private:
  const PrecisionSpec& spec_;
  std::vector<LayerCost>& out_;
};

u64 attention_nonzeros(const EncoderConfig& cfg, u64 n) {
  if (cfg.kind == EncoderKind::sparseformer && cfg.pattern) return cfg.pattern->nonzeros(n);
  return n * n;
}

std::string fmt(double v, int precision) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", precision, v);
  return buf;
}

}  // namespace

double fit_device_peak(double bop, double seconds) {
  if (!(seconds > 0.0)) throw DivisionError("fit_device_peak: time must be positive");
  if (!(bop > 0.0)) throw ConfigError("device_peak: bop must be positive");
  return bop / seconds;
}

double estimate_seconds(double bop, double device_peak) {
  if (!(device_peak > 0.0)) throw ConfigError("device_peak: must be positive");
  return bop / device_peak;
}

std::vector<LayerCost> enumerate_layers(const EncoderConfig& cfg, const PrecisionSpec& spec, std::size_t n) {
  cfg.validate();
  if (n == 0) throw ConfigError("frames: must be at least 1");
  std::vector<LayerCost> layers;
  LayerSink sink(spec, layers);
  const u64 d = cfg.dim;
  const u64 e = cfg.ffn_expansion;

  sink.linear("input", n, cfg.input_dim, d, true);
  sink.push("positional", "positional", static_cast<u64>(cfg.max_positions) * d, static_cast<u64>(n) * d);

  const bool subsample = cfg.kind == EncoderKind::squeezeformer && cfg.subsample_factor > 1 && cfg.layers > 0;
  const std::size_t pool_at = subsample ? cfg.layers / 2 : cfg.layers;
  const u64 pooled_n = subsample ? (n + cfg.subsample_factor - 1) / cfg.subsample_factor : n;

  for (std::size_t i = 0; i < cfg.layers; ++i) {
    const std::string p = "block" + std::to_string(i);
    if (subsample && i == pool_at) sink.push("pool", "pool", 0, static_cast<u64>(n) * d);
    const u64 t = i >= pool_at ? pooled_n : n;
    switch (cfg.kind) {
      case EncoderKind::vanilla:
      case EncoderKind::sparseformer:
        sink.layer_norm(p + ".ln_attn", t, d);
        sink.attention(p + ".attn", t, d, attention_nonzeros(cfg, t));
        sink.layer_norm(p + ".ln_ffn", t, d);
        sink.feed_forward(p + ".ffn", t, d, e);
        break;
      case EncoderKind::conformer:
        sink.layer_norm(p + ".ln_ffn1", t, d);
        sink.feed_forward(p + ".ffn1", t, d, e);
        sink.layer_norm(p + ".ln_attn", t, d);
        sink.attention(p + ".attn", t, d, t * t);
        sink.layer_norm(p + ".ln_conv", t, d);
        sink.conv_module(p + ".conv", t, d, cfg.conv_kernel, true);
        sink.layer_norm(p + ".ln_ffn2", t, d);
        sink.feed_forward(p + ".ffn2", t, d, e);
        sink.layer_norm(p + ".ln_final", t, d);
        break;
      case EncoderKind::squeezeformer:
        sink.attention(p + ".attn", t, d, t * t);
        sink.layer_norm(p + ".ln_attn", t, d);
        sink.feed_forward(p + ".ffn1", t, d, e);
        sink.layer_norm(p + ".ln_ffn1", t, d);
        sink.conv_module(p + ".conv", t, d, cfg.conv_kernel, false);
        sink.layer_norm(p + ".ln_conv", t, d);
        sink.feed_forward(p + ".ffn2", t, d, e);
        sink.layer_norm(p + ".ln_ffn2", t, d);
        break;
    }
  }
  if (subsample) sink.push("upsample", "pool", 0, static_cast<u64>(n) * d);
  return layers;
}

CostReport summarize(std::vector<LayerCost> layers, double device_peak, std::vector<std::string> assumptions) {
  if (!(device_peak > 0.0)) throw ConfigError("device_peak: must be positive");
  CostReport r;
  for (const auto& l : layers) {
    if (!known_kind(l.kind)) throw ProfilingError("layer '" + l.name + "' has unknown class '" + l.kind + "'");
    for (int b : {l.param_bits, l.weight_bits, l.act_bits}) {
      if (b != 1 && b != 32) throw ProfilingError("layer '" + l.name + "' has bit width " + std::to_string(b));
    }
    r.storage_bits += l.params * static_cast<u64>(l.param_bits);
    r.total_macs += l.macs;
    if (l.weight_bits == 32 && l.act_bits == 32) r.flop += 2 * l.macs;
    r.bop_nonq += l.macs * 32 * 32;
    r.bop_bq += l.macs * static_cast<u64>(l.weight_bits) * static_cast<u64>(l.act_bits);
  }
  r.storage_mb = static_cast<double>(r.storage_bits) / 8.0 / 1e6;
  r.flop_g = static_cast<double>(r.flop) / 1e9;
  r.bop_nonq_g = static_cast<double>(r.bop_nonq) / 1e9;
  r.bop_bq_g = static_cast<double>(r.bop_bq) / 1e9;
  r.est_time_s = estimate_seconds(static_cast<double>(r.bop_bq), device_peak);
  r.per_layer = std::move(layers);
  r.assumptions = std::move(assumptions);
  return r;
}

CostReport profile(const EncoderConfig& cfg, const PrecisionSpec& spec, std::size_t n, double device_peak) {
  std::vector<std::string> notes = {
      "frames=" + std::to_string(n),
      "FLOP=2*MAC over 32/32 layers",
      "BOP=MAC*weight_bits*act_bits",
      "norms and activations cost n*D MACs",
      "positional table " + std::to_string(cfg.max_positions) + "*D params",
      "input projection " + std::to_string(cfg.input_dim) + "->D at FP32",
      "feature extractor and head excluded",
      "device_peak=" + fmt(device_peak / 1e12, 2) + "e12 ops/s",
  };
  if (cfg.kind == EncoderKind::sparseformer && cfg.pattern) {
    notes.push_back("attention MACs over " + std::string(pattern_kind_name(cfg.pattern->kind)) + "/" +
                    std::to_string(cfg.pattern->block) + " pattern nonzeros");
  }
  if (cfg.kind == EncoderKind::squeezeformer && cfg.subsample_factor > 1) {
    notes.push_back("layers from L/2 run at n/" + std::to_string(cfg.subsample_factor));
  }
  if (spec.any_quantized()) notes.push_back("binarizer scales and biases stored at 32 bits");
  if (!(device_peak > 0.0)) throw ConfigError("device_peak: must be positive");
  return summarize(enumerate_layers(cfg, spec, n), device_peak, std::move(notes));
}

namespace {

struct ReferenceEntry {
  const char* config;
  bool quantized;
  ReferenceRow row;
};

const std::vector<ReferenceEntry>& reference_entries() {
  static const std::vector<ReferenceEntry> entries = {
      {"vanilla", false, {184.42, 110.54, 1228.64, std::nullopt, 38.46}},
      {"conformer_s", false, {131.87, 22.10, 329.39, std::nullopt, 10.31}},
      {"squeeze_xs", false, {132.04, 18.31, 272.88, std::nullopt, 8.54}},
      {"sparse_dn_s", false, {60.81, 26.05, 388.18, std::nullopt, 12.15}},
      {"sparse_sw_s", false, {117.18, 40.09, 597.43, std::nullopt, 18.70}},
      {"vanilla", true, {25.23, 11.82, 172.83, 63.62, 5.53}},
      {"conformer_s", true, {12.88, 7.23, 103.44, 15.94, 3.27}},
      {"squeeze_xs", true, {13.05, 7.20, 104.05, 11.86, 3.28}},
      {"sparse_dn_s", true, {12.10, 7.35, 107.91, 10.70, 3.40}},
      {"sparse_sw_s", true, {19.71, 8.85, 130.38, 19.49, 4.12}},
  };
  return entries;
}

}  // namespace

std::optional<ReferenceRow> reference_row(const std::string& config_name, const PrecisionSpec& spec) {
  const bool quantized = spec.any_quantized();
  if (spec != PrecisionSpec::fp32() && spec != PrecisionSpec::w1a1()) return std::nullopt;
  for (const auto& e : reference_entries()) {
    if (config_name == e.config && quantized == e.quantized) return e.row;
  }
  return std::nullopt;
}

std::vector<RunConfig> reference_suite() {
  auto make = [](std::string name, EncoderKind kind, std::size_t l, std::size_t d, std::size_t h) {
    RunConfig rc;
    rc.name = std::move(name);
    rc.encoder.kind = kind;
    rc.encoder.layers = l;
    rc.encoder.dim = d;
    rc.encoder.heads = h;
    rc.frames = kDefaultProfileFrames;
    return rc;
  };
  std::vector<RunConfig> suite;
  suite.push_back(make("vanilla", EncoderKind::vanilla, 12, 768, 12));
  auto conformer = make("conformer_s", EncoderKind::conformer, 16, 144, 4);
  conformer.encoder.conv_kernel = 31;
  suite.push_back(conformer);
  auto squeeze = make("squeeze_xs", EncoderKind::squeezeformer, 16, 144, 4);
  squeeze.encoder.conv_kernel = 31;
  squeeze.encoder.subsample_factor = 2;
  suite.push_back(squeeze);
  auto dn = make("sparse_dn_s", EncoderKind::sparseformer, 16, 256, 4);
  dn.encoder.pattern = SparsePattern{PatternKind::strided, 32};
  suite.push_back(dn);
  auto sw = make("sparse_sw_s", EncoderKind::sparseformer, 8, 512, 4);
  sw.encoder.pattern = SparsePattern{PatternKind::strided, 32};
  suite.push_back(sw);
  return suite;
}

std::string display_name(const std::string& config_name, const PrecisionSpec& spec) {
  static const std::map<std::string, std::string> names = {
      {"vanilla", "Vanilla Trans"},         {"conformer_s", "Conformer-S"},
      {"squeeze_xs", "Squeeze-XS"},         {"sparse_dn_s", "Sparseformer-DN-S"},
      {"sparse_sw_s", "Sparseformer-SW-S"},
  };
  const auto it = names.find(config_name);
  const std::string base = it == names.end() ? config_name : it->second;
  return spec.any_quantized() ? "BQ-" + base : base;
}

std::string profile_table(const std::vector<ProfileRow>& rows, TableFormat format, bool with_reference) {
  std::vector<std::string> header = {"encoder", "L/D/H", "prec", "storage_mb", "flop_g", "bop_nonq_g", "bop_bq_g",
                                     "est_time_e4"};
  if (with_reference) {
    for (const char* c : {"ref_storage_mb", "ref_flop_g", "ref_bop_nonq_g", "ref_bop_bq_g", "ref_est_time_e4"}) {
      header.emplace_back(c);
    }
  }
  header.emplace_back("assumptions");

  std::vector<std::vector<std::string>> cells;
  cells.push_back(header);
  for (const auto& row : rows) {
    const auto& r = row.report;
    std::vector<std::string> line = {row.name,
                                     row.config.shape_label(),
                                     row.precision.label(),
                                     fmt(r.storage_mb, 2),
                                     fmt(r.flop_g, 2),
                                     fmt(r.bop_nonq_g, 2),
                                     row.precision.any_quantized() ? fmt(r.bop_bq_g, 2) : "-",
                                     fmt(r.est_time_s * 1e4, 2)};
    if (with_reference) {
      if (row.reference) {
        const auto& ref = *row.reference;
        line.push_back(fmt(ref.storage_mb, 2));
        line.push_back(fmt(ref.flop_g, 2));
        line.push_back(fmt(ref.bop_nonq_g, 2));
        line.push_back(ref.bop_bq_g ? fmt(*ref.bop_bq_g, 2) : "-");
        line.push_back(fmt(ref.est_time_e4, 2));
      } else {
        line.insert(line.end(), 5, "-");
      }
    }
    std::string notes;
    for (const auto& a : r.assumptions) notes += (notes.empty() ? "" : "; ") + a;
    line.push_back(notes);
    cells.push_back(std::move(line));
  }

  std::ostringstream os;
  if (format == TableFormat::tsv) {
    for (const auto& line : cells) {
      for (std::size_t i = 0; i < line.size(); ++i) os << (i ? "\t" : "") << line[i];
      os << '\n';
    }
    return os.str();
  }
  std::vector<std::size_t> width(header.size(), 0);
  for (const auto& line : cells)
    for (std::size_t i = 0; i + 1 < line.size(); ++i) width[i] = std::max(width[i], line[i].size());
  for (const auto& line : cells) {
    for (std::size_t i = 0; i < line.size(); ++i) {
      if (i + 1 == line.size()) {
        os << line[i];
      } else {
        os << line[i] << std::string(width[i] - line[i].size() + 2, ' ');
      }
    }
    os << '\n';
  }
  return os.str();
}

double reduction_percent(double baseline, double candidate) {
  if (baseline == 0.0) throw DivisionError("reduction_percent: zero baseline");
  return 100.0 * (1.0 - candidate / baseline);
}

Reductions reduction_report(const CostReport& baseline, const CostReport& candidate) {
  Reductions out;
  out.storage = reduction_percent(baseline.storage_mb, candidate.storage_mb);
  out.flop = reduction_percent(baseline.flop_g, candidate.flop_g);
  out.bop_nonq = reduction_percent(baseline.bop_nonq_g, candidate.bop_nonq_g);
  out.bop_bq = reduction_percent(baseline.bop_bq_g, candidate.bop_bq_g);
  out.est_time = reduction_percent(baseline.est_time_s, candidate.est_time_s);
  return out;
}

}  // namespace binaformer
