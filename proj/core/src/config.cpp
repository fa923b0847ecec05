#include "binaformer/config.hpp"

#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "binaformer/errors.hpp"

namespace binaformer {

using nlohmann::json;

const char* encoder_kind_name(EncoderKind kind) {
  switch (kind) {
    case EncoderKind::vanilla:
      return "vanilla";
    case EncoderKind::conformer:
      return "conformer";
    case EncoderKind::squeezeformer:
      return "squeezeformer";
    case EncoderKind::sparseformer:
      return "sparseformer";
  }
  return "unknown";
}

EncoderKind parse_encoder_kind(const std::string& name) {
  if (name == "vanilla") return EncoderKind::vanilla;
  if (name == "conformer") return EncoderKind::conformer;
  if (name == "squeezeformer") return EncoderKind::squeezeformer;
  if (name == "sparseformer") return EncoderKind::sparseformer;
  throw ConfigError("kind: unknown encoder kind \"" + name + "\"");
}

const char* pattern_kind_name(PatternKind kind) {
  switch (kind) {
    case PatternKind::strided:
      return "strided";
    case PatternKind::fixed:
      return "fixed";
    case PatternKind::full:
      return "full";
  }
  return "unknown";
}

bool SparsePattern::allows(std::size_t i, std::size_t j) const {
  if (i == j) return true;
  const std::size_t l = block;
  switch (kind) {
    case PatternKind::strided:
      return (i > j ? i - j : j - i) < l || j % l == l - 1;
    case PatternKind::fixed:
      return i / l == j / l || j % l == l - 1;
    case PatternKind::full:
      return true;
  }
  return false;
}

std::vector<bool> SparsePattern::mask(std::size_t n) const {
  std::vector<bool> m(n * n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) m[i * n + j] = allows(i, j);
  return m;
}

CsrPattern SparsePattern::csr(std::size_t n) const {
  CsrPattern p;
  p.n = n;
  p.row_ptr.reserve(n + 1);
  p.row_ptr.push_back(0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j)
      if (allows(i, j)) p.cols.push_back(j);
    p.row_ptr.push_back(p.cols.size());
  }
  return p;
}

std::size_t SparsePattern::nonzeros(std::size_t n) const {
  if (kind == PatternKind::full) return n * n;
  std::size_t count = 0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) count += allows(i, j) ? 1 : 0;
  return count;
}

void EncoderConfig::validate() const {
  if (dim == 0 || heads == 0) throw ConfigError("dim/heads: must be positive");
  if (dim % heads != 0) {
    throw ConfigError("heads: dim " + std::to_string(dim) + " is not divisible by " + std::to_string(heads) +
                      " heads");
  }
  if (ffn_expansion == 0) throw ConfigError("ffn_expansion: must be positive");
  if (conv_kernel == 0 || conv_kernel % 2 == 0) throw ConfigError("conv_kernel: must be odd and positive");
  if (input_dim == 0) throw ConfigError("input_dim: must be positive");
  if (max_positions == 0) throw ConfigError("max_positions: must be positive");
  const bool sparse = kind == EncoderKind::sparseformer;
  if (sparse != pattern.has_value()) {
    throw ConfigError("pattern: required for sparseformer and only for sparseformer");
  }
  if (pattern && pattern->block == 0) throw ConfigError("pattern.block: must be positive");
  if (subsample_factor != 1 && subsample_factor != 2) throw ConfigError("subsample: must be 1 or 2");
  if (subsample_factor == 2 && kind != EncoderKind::squeezeformer) {
    throw ConfigError("subsample: only squeezeformer supports subsampling");
  }
}

std::string EncoderConfig::shape_label() const {
  return std::to_string(layers) + " / " + std::to_string(dim) + " / " + std::to_string(heads);
}

namespace {

const std::set<std::string> kTopLevelKeys = {
    "name", "kind", "layers", "dim", "heads", "ffn_expansion", "conv_kernel", "pattern", "subsample",
    "input_dim", "max_positions", "prec", "frames", "device_peak", "train"};

const std::set<std::string> kTrainKeys = {
    "steps", "optimizer", "lr", "warmup_fraction", "frame_budget", "clip_samples", "clusters", "mask_span",
    "mask_prob", "phonemes", "corpus_clips", "extractor_channels"};

std::size_t positive_int(const json& j, const std::string& field) {
  if (!j.is_number_integer() || j.get<long long>() <= 0) {
    throw ConfigError(field + ": expected a positive integer, got " + j.dump());
  }
  return static_cast<std::size_t>(j.get<long long>());
}

double positive_real(const json& j, const std::string& field) {
  if (!j.is_number() || !(j.get<double>() > 0.0)) {
    throw ConfigError(field + ": expected a positive number, got " + j.dump());
  }
  return j.get<double>();
}

std::string string_field(const json& j, const std::string& field) {
  if (!j.is_string()) throw ConfigError(field + ": expected a string, got " + j.dump());
  return j.get<std::string>();
}

void reject_unknown(const json& obj, const std::set<std::string>& allowed, const std::string& where) {
  for (const auto& [key, _] : obj.items()) {
    if (!allowed.contains(key)) throw ConfigError(where + key + ": unknown field");
  }
}

TrainSettings parse_train(const json& t) {
  if (!t.is_object()) throw ConfigError("train: expected an object");
  reject_unknown(t, kTrainKeys, "train.");
  TrainSettings s;
  if (t.contains("steps")) s.steps = positive_int(t["steps"], "train.steps");
  if (t.contains("optimizer")) {
    s.optimizer = string_field(t["optimizer"], "train.optimizer");
    if (s.optimizer != "adam" && s.optimizer != "sgd") {
      throw ConfigError("train.optimizer: expected \"adam\" or \"sgd\", got \"" + s.optimizer + "\"");
    }
  }
  if (t.contains("lr")) s.lr = positive_real(t["lr"], "train.lr");
  if (t.contains("warmup_fraction")) {
    s.warmup_fraction = t["warmup_fraction"].is_number() ? t["warmup_fraction"].get<double>() : -1.0;
    if (s.warmup_fraction < 0.0 || s.warmup_fraction >= 1.0) {
      throw ConfigError("train.warmup_fraction: expected a number in [0, 1)");
    }
  }
  if (t.contains("frame_budget")) s.frame_budget = positive_int(t["frame_budget"], "train.frame_budget");
  if (t.contains("clip_samples")) s.clip_samples = positive_int(t["clip_samples"], "train.clip_samples");
  if (t.contains("clusters")) s.clusters = positive_int(t["clusters"], "train.clusters");
  if (t.contains("mask_span")) s.mask_span = positive_int(t["mask_span"], "train.mask_span");
  if (t.contains("mask_prob")) {
    s.mask_prob = positive_real(t["mask_prob"], "train.mask_prob");
    if (s.mask_prob >= 1.0) throw ConfigError("train.mask_prob: expected a number in (0, 1)");
  }
  if (t.contains("phonemes")) s.phonemes = positive_int(t["phonemes"], "train.phonemes");
  if (t.contains("corpus_clips")) s.corpus_clips = positive_int(t["corpus_clips"], "train.corpus_clips");
  if (t.contains("extractor_channels")) {
    s.extractor_channels = positive_int(t["extractor_channels"], "train.extractor_channels");
  }
  return s;
}

}  // namespace

RunConfig parse_run_config(const std::string& json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  if (!j.is_object()) throw ConfigError("config: expected a JSON object");
  reject_unknown(j, kTopLevelKeys, "");

  RunConfig rc;
  auto& cfg = rc.encoder;
  if (!j.contains("kind")) throw ConfigError("kind: missing required field");
  cfg.kind = parse_encoder_kind(string_field(j["kind"], "kind"));
  if (!j.contains("layers") || !j["layers"].is_number_integer() || j["layers"].get<long long>() < 0) {
    throw ConfigError("layers: expected a non-negative integer");
  }
  cfg.layers = static_cast<std::size_t>(j["layers"].get<long long>());
  if (!j.contains("dim")) throw ConfigError("dim: missing required field");
  cfg.dim = positive_int(j["dim"], "dim");
  if (!j.contains("heads")) throw ConfigError("heads: missing required field");
  cfg.heads = positive_int(j["heads"], "heads");
  if (j.contains("ffn_expansion")) cfg.ffn_expansion = positive_int(j["ffn_expansion"], "ffn_expansion");
  if (j.contains("conv_kernel")) cfg.conv_kernel = positive_int(j["conv_kernel"], "conv_kernel");
  if (j.contains("subsample")) cfg.subsample_factor = positive_int(j["subsample"], "subsample");
  if (j.contains("input_dim")) cfg.input_dim = positive_int(j["input_dim"], "input_dim");
  if (j.contains("max_positions")) cfg.max_positions = positive_int(j["max_positions"], "max_positions");
  if (j.contains("pattern") && !j["pattern"].is_null()) {
    const auto& p = j["pattern"];
    if (!p.is_object()) throw ConfigError("pattern: expected an object");
    reject_unknown(p, {"kind", "block"}, "pattern.");
    SparsePattern sp;
    const auto kind = string_field(p.value("kind", json("strided")), "pattern.kind");
    if (kind == "strided") {
      sp.kind = PatternKind::strided;
    } else if (kind == "fixed") {
      sp.kind = PatternKind::fixed;
    } else if (kind == "full") {
      sp.kind = PatternKind::full;
    } else {
      throw ConfigError("pattern.kind: unknown pattern \"" + kind + "\"");
    }
    if (p.contains("block")) sp.block = positive_int(p["block"], "pattern.block");
    cfg.pattern = sp;
  }
  if (j.contains("prec")) rc.precision = PrecisionSpec::parse(string_field(j["prec"], "prec"));
  if (j.contains("frames")) rc.frames = positive_int(j["frames"], "frames");
  if (j.contains("device_peak")) rc.device_peak = positive_real(j["device_peak"], "device_peak");
  if (j.contains("name")) rc.name = string_field(j["name"], "name");
  if (j.contains("train")) rc.train = parse_train(j["train"]);
  cfg.validate();
  if (rc.name.empty()) rc.name = encoder_kind_name(cfg.kind);
  return rc;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config file " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_run_config(ss.str());
}

std::string to_json(const RunConfig& rc) {
  const auto& cfg = rc.encoder;
  json j;
  j["name"] = rc.name;
  j["kind"] = encoder_kind_name(cfg.kind);
  j["layers"] = cfg.layers;
  j["dim"] = cfg.dim;
  j["heads"] = cfg.heads;
  j["ffn_expansion"] = cfg.ffn_expansion;
  j["conv_kernel"] = cfg.conv_kernel;
  j["subsample"] = cfg.subsample_factor;
  j["input_dim"] = cfg.input_dim;
  j["max_positions"] = cfg.max_positions;
  if (cfg.pattern) j["pattern"] = {{"kind", pattern_kind_name(cfg.pattern->kind)}, {"block", cfg.pattern->block}};
  j["prec"] = rc.precision.label();
  if (rc.frames) j["frames"] = *rc.frames;
  if (rc.device_peak) j["device_peak"] = *rc.device_peak;
  const auto& t = rc.train;
  j["train"] = {{"steps", t.steps},
                {"optimizer", t.optimizer},
                {"lr", t.lr},
                {"warmup_fraction", t.warmup_fraction},
                {"frame_budget", t.frame_budget},
                {"clip_samples", t.clip_samples},
                {"clusters", t.clusters},
                {"mask_span", t.mask_span},
                {"mask_prob", t.mask_prob},
                {"phonemes", t.phonemes},
                {"corpus_clips", t.corpus_clips},
                {"extractor_channels", t.extractor_channels}};
  return j.dump();
}

}  // namespace binaformer
