#include "cli.hpp"

#include <CLI11.hpp>

#include <cstdint>
#include <cstdlib>
#include <iomanip>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "binaformer/checkpoint.hpp"
#include "binaformer/config.hpp"
#include "binaformer/costmodel.hpp"
#include "binaformer/errors.hpp"
#include "binaformer/gradcheck.hpp"
#include "binaformer/pretrain.hpp"

namespace binaformer {
namespace {

constexpr int kExitOk = 0;
constexpr int kExitVerification = 1;
constexpr int kExitConfig = 2;
constexpr int kExitMissing = 3;

constexpr std::uint64_t kDefaultSeed = 42;

std::uint64_t default_seed() {
  const char* env = std::getenv("BINAFORMER_SEED");
  if (env == nullptr || *env == '\0') return kDefaultSeed;
  char* end = nullptr;
  const unsigned long long v = std::strtoull(env, &end, 10);
  if (*end != '\0') throw ConfigError(std::string("BINAFORMER_SEED: not an unsigned integer: ") + env);
  return v;
}

// A config file that cannot be read is a config problem, not a missing artifact.
RunConfig read_config(const std::string& path) {
  try {
    return load_run_config(path);
  } catch (const IoError& e) {
    throw ConfigError(e.what());
  } catch (const ConfigError& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

struct ProfileArgs {
  std::vector<std::string> configs;
  std::string suite;
  std::optional<std::size_t> frames;
  std::string prec;
  bool compare = false;
  std::string format = "tsv";
};

int cmd_profile(const ProfileArgs& a, std::ostream& out) {
  std::vector<RunConfig> runs;
  if (!a.suite.empty()) {
    if (a.suite != "paper") throw ConfigError("--suite: unknown suite \"" + a.suite + "\"");
    for (const auto& rc : reference_suite()) {
      RunConfig fp = rc;
      fp.precision = PrecisionSpec::fp32();
      RunConfig bq = rc;
      bq.precision = PrecisionSpec::w1a1();
      runs.push_back(fp);
      runs.push_back(bq);
    }
  }
  for (const auto& path : a.configs) runs.push_back(read_config(path));
  if (!a.prec.empty()) {
    const auto spec = PrecisionSpec::parse(a.prec);
    for (auto& rc : runs) rc.precision = spec;
  }

  std::vector<ProfileRow> rows;
  for (const auto& rc : runs) {
    rc.encoder.validate();
    const std::size_t n = a.frames ? *a.frames : rc.frames.value_or(kDefaultProfileFrames);
    const double peak = rc.device_peak.value_or(kFittedDevicePeak);
    ProfileRow row;
    row.name = rc.name;
    row.config = rc.encoder;
    row.precision = rc.precision;
    row.report = profile(rc.encoder, rc.precision, n, peak);
    if (a.compare) row.reference = reference_row(rc.name, rc.precision);
    rows.push_back(std::move(row));
  }
  const auto fmt = a.format == "text" ? TableFormat::text : TableFormat::tsv;
  out << profile_table(rows, fmt, a.compare);
  return kExitOk;
}

struct TrainArgs {
  std::string config;
  std::optional<std::size_t> steps;
  std::string out = "checkpoint.bfck";
  std::string csv = "loss.csv";
};

int cmd_train(const TrainArgs& a, std::uint64_t seed, std::ostream& out, std::ostream& err) {
  const RunConfig rc = read_config(a.config);
  rc.encoder.validate();
  const std::size_t steps = a.steps.value_or(rc.train.steps);
  HubertModel model(rc, rc.train.clusters, seed);
  const auto result = pretrain(model, rc.train, steps, seed, [&](std::size_t step, const StepResult& r) {
    if ((step + 1) % 20 == 0 || step + 1 == steps) {
      err << "step " << step + 1 << "/" << steps << " loss " << r.loss << "\n";
    }
  });
  save_checkpoint(a.out, rc, seed, rc.train.clusters, model.parameters(), result.labeling.kmeans);
  write_loss_csv(a.csv, result.losses);

  out << std::setprecision(6) << std::fixed;
  out << "steps " << steps << "\n";
  if (!result.losses.empty()) {
    out << "initial_loss " << result.losses.front() << "\n";
    out << "final_loss " << result.losses.back() << "\n";
  }
  out << "skipped_steps " << result.skipped_steps << "\n";
  out << "checkpoint " << a.out << "\n";
  out << "loss_csv " << a.csv << "\n";
  return kExitOk;
}

HubertModel restore_model(const Checkpoint& ck) {
  HubertModel model(ck.config, ck.clusters, ck.seed);
  restore_parameters(ck, model.parameters());
  return model;
}

struct RelabelArgs {
  std::string checkpoint;
  std::optional<std::size_t> layer;
  std::optional<std::size_t> k;
  std::string out;
};

int cmd_relabel(const RelabelArgs& a, std::uint64_t seed, std::ostream& out) {
  const Checkpoint ck = load_checkpoint(a.checkpoint);
  const HubertModel model = restore_model(ck);
  const std::size_t layer = a.layer.value_or(ck.config.encoder.layers);
  const std::size_t k = a.k.value_or(ck.clusters);
  const Corpus corpus = synthesize_corpus(corpus_settings(ck.config.train), seed);
  const Labeling lab = second_phase_relabel(model, corpus, layer, k, seed);

  const std::string target = a.out.empty() ? a.checkpoint : a.out;
  save_checkpoint(target, ck.config, ck.seed, ck.clusters, model.parameters(), lab.kmeans);

  out << std::setprecision(6) << std::fixed;
  out << "layer " << layer << "\n";
  out << "k " << lab.kmeans.k << "\n";
  out << "dim " << lab.kmeans.dim << "\n";
  out << "iterations " << lab.objective_log.size() - 1 << "\n";
  out << "objective " << lab.objective_log.back() << "\n";
  out << "checkpoint " << target << "\n";
  return kExitOk;
}

struct ProbeArgs {
  std::string checkpoint;
  std::string task = "frame_cls";
  std::string labels = "truth";
  bool init_only = false;
};

ProbeLabels parse_probe_labels(const std::string& name) {
  if (name == "truth") return ProbeLabels::truth;
  if (name == "random") return ProbeLabels::random;
  if (name == "single") return ProbeLabels::single;
  throw ConfigError("--labels: expected truth, random or single, got \"" + name + "\"");
}

int cmd_probe(const ProbeArgs& a, std::uint64_t seed, std::ostream& out) {
  const Checkpoint ck = load_checkpoint(a.checkpoint);
  const ProbeTask task = parse_probe_task(a.task);
  ProbeSettings settings;
  settings.labels = parse_probe_labels(a.labels);
  const HubertModel model = a.init_only ? HubertModel(ck.config, ck.clusters, ck.seed) : restore_model(ck);
  const double acc = probe_eval(model, task, seed, settings);
  out << std::setprecision(4) << std::fixed << "accuracy " << acc << "\n";
  return kExitOk;
}

struct GradcheckArgs {
  std::vector<std::string> blocks;
  std::vector<std::string> ops;
  bool all = false;
  std::string corrupt;
  std::size_t points = 10;
};

int cmd_gradcheck(const GradcheckArgs& a, std::uint64_t seed, std::ostream& out, std::ostream& err) {
  std::vector<NamedGradCase> cases;
  for (const auto& b : a.blocks) cases.push_back(find_grad_case("block_" + b));
  for (const auto& o : a.ops) cases.push_back(find_grad_case(o));
  if (a.all || cases.empty()) {
    cases = op_grad_cases();
    const auto& blocks = block_grad_cases();
    cases.insert(cases.end(), blocks.begin(), blocks.end());
  }
  GradcheckOptions opts;
  opts.seed = seed;
  opts.points = a.points;
  opts.corrupt = a.corrupt;

  std::vector<std::string> failing;
  out << "case\tmax_rel_error\tcoords\tstatus\n";
  for (const auto& c : cases) {
    const auto r = check_gradients(c.name, c.factory, opts);
    std::ostringstream line;
    line << r.name << "\t" << std::scientific << std::setprecision(3) << r.max_rel_error << "\t" << r.coords_checked
         << "\t" << (r.passed ? "pass" : "FAIL");
    out << line.str() << "\n";
    if (!r.passed) failing.push_back(r.name);
  }
  if (failing.empty()) {
    out << "all " << cases.size() << " cases below " << std::scientific << std::setprecision(0) << opts.tolerance
        << "\n";
    return kExitOk;
  }
  err << "gradient check failed for:";
  for (const auto& f : failing) err << " " << f;
  err << "\n";
  return kExitVerification;
}

}  // namespace

int run_cli(int argc, char** argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"binaformer: binarized speech encoder toolkit"};
  app.require_subcommand(1);
  std::optional<std::uint64_t> seed_flag;

  ProfileArgs pa;
  auto* profile_cmd = app.add_subcommand("profile", "Print a cost table for one or more encoder configs");
  profile_cmd->add_option("--config", pa.configs, "Config JSON file (repeatable)");
  profile_cmd->add_option("--suite", pa.suite, "Built-in config suite (\"paper\": five reference encoders x two "
                                               "precisions)");
  profile_cmd->add_option("--frames", pa.frames, "Sequence length in frames");
  profile_cmd->add_option("--prec", pa.prec, "Override precision: FP32 or FP32-W1A1");
  profile_cmd->add_flag("--compare-paper,--paper-row", pa.compare, "Add published reference columns");
  profile_cmd->add_option("--format", pa.format, "tsv or text")->check(CLI::IsMember({"tsv", "text"}));

  TrainArgs ta;
  auto* train_cmd = app.add_subcommand("train", "Masked pseudo-label pretraining on the synthetic corpus");
  train_cmd->add_option("--config", ta.config, "Config JSON file")->required();
  train_cmd->add_option("--steps", ta.steps, "Optimizer steps (default: train.steps from the config)");
  train_cmd->add_option("--out", ta.out, "Checkpoint path");
  train_cmd->add_option("--csv", ta.csv, "Loss CSV path");

  GradcheckArgs ga;
  auto* grad_cmd = app.add_subcommand("gradcheck", "Finite-difference gradient checks");
  grad_cmd->add_option("--block", ga.blocks, "vanilla, sparseformer, conformer or squeezeformer (repeatable)");
  grad_cmd->add_option("--op", ga.ops, "Single op case (repeatable)");
  grad_cmd->add_flag("--all", ga.all, "Every op and block (the default when nothing is selected)");
  grad_cmd->add_option("--points", ga.points, "Random points per case");
  grad_cmd->add_option("--corrupt", ga.corrupt, "Skew the analytic gradient of this case (negative control)");

  ProbeArgs pr;
  auto* probe_cmd = app.add_subcommand("probe", "Linear-probe accuracy of a frozen encoder");
  probe_cmd->add_option("--checkpoint", pr.checkpoint, "Checkpoint path")->required();
  probe_cmd->add_option("--task", pr.task, "frame_cls or seq_cls");
  probe_cmd->add_option("--labels", pr.labels, "truth, random or single");
  probe_cmd->add_flag("--init-only", pr.init_only, "Probe the checkpoint's architecture at its initial weights");

  RelabelArgs ra;
  auto* relabel_cmd = app.add_subcommand("relabel", "Refit pseudo-labels on a hidden layer of a checkpoint");
  relabel_cmd->add_option("--checkpoint", ra.checkpoint, "Checkpoint path")->required();
  relabel_cmd->add_option("--layer", ra.layer, "Hidden state index, 0..L (default L)");
  relabel_cmd->add_option("--k", ra.k, "Cluster count (default: the checkpoint's)");
  relabel_cmd->add_option("--out", ra.out, "Output checkpoint (default: overwrite the input)");

  for (auto* sub : {profile_cmd, train_cmd, grad_cmd, probe_cmd, relabel_cmd}) {
    sub->add_option("--seed", seed_flag, "Random seed (default: $BINAFORMER_SEED or 42)");
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    const std::uint64_t seed = seed_flag ? *seed_flag : default_seed();
    if (profile_cmd->parsed()) return cmd_profile(pa, out);
    if (train_cmd->parsed()) return cmd_train(ta, seed, out, err);
    if (grad_cmd->parsed()) return cmd_gradcheck(ga, seed, out, err);
    if (probe_cmd->parsed()) return cmd_probe(pr, seed, out);
    if (relabel_cmd->parsed()) return cmd_relabel(ra, seed, out);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const IoError& e) {
    err << "missing artifact: " << e.what() << "\n";
    return kExitMissing;
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return kExitVerification;
  }
  return kExitConfig;
}

}  // namespace binaformer
