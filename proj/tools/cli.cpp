#include "cli.hpp"

#include "vqtok/binary_io.hpp"
#include "vqtok/errors.hpp"
#include "vqtok/metrics.hpp"
#include "vqtok/plot.hpp"
#include "vqtok/runs.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <cstdio>
#include <optional>
#include <ostream>

namespace vqtok::cli {

namespace {

using harness::ConfigDoc;
using harness::ExperimentConfig;

struct CommonOptions {
  std::string config_path;
  std::optional<uint64_t> seed;
  std::optional<std::string> output_dir;
  std::vector<std::string> overrides;
};

void add_common(CLI::App* cmd, CommonOptions& o, bool config_required = true) {
  auto* opt = cmd->add_option("--config", o.config_path, "Experiment config file");
  if (config_required) opt->required();
  cmd->add_option("--seed", o.seed, "Override run.seed");
  cmd->add_option("--output-dir", o.output_dir, "Output root (overrides GTK_OUTPUT_DIR and run.output_dir)");
  cmd->add_option("--set", o.overrides, "Override a config value, e.g. --set train.steps=100");
}

ConfigDoc load_doc(const CommonOptions& o) {
  auto doc = ConfigDoc::load(o.config_path);
  for (const auto& kv : o.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ValidationError("config_override", "--set expects section.key=value");
    doc.set(kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (o.seed) doc.set("run.seed", std::to_string(*o.seed));
  return doc;
}

/// Wraps a command body with manifest bookkeeping for `dir`.
class ManifestScope {
 public:
  ManifestScope(std::string command, const ExperimentConfig& config, std::filesystem::path dir)
      : dir_(std::move(dir)) {
    m_.command = std::move(command);
    m_.config_text = config.canonical_text();
    m_.config_digest = config.digest();
    m_.seed = config.seed;
    m_.build_id = harness::build_id();
    m_.start_time = harness::utc_timestamp();
    m_.status = "running";
    harness::write_manifest(dir_, m_);
    std::filesystem::create_directories(dir_);
    io::atomic_write(dir_ / "config.toml", m_.config_text);
  }
  void finish(const std::string& status) {
    m_.status = status;
    m_.end_time = harness::utc_timestamp();
    harness::write_manifest(dir_, m_);
  }

 private:
  std::filesystem::path dir_;
  harness::Manifest m_;
};

std::string fmt_num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

int cmd_tokenizer_train(const CommonOptions& o, std::ostream& out) {
  const auto config = ExperimentConfig::from_doc(load_doc(o));
  const auto dir = harness::run_directory(harness::output_root(config, o.output_dir), config);
  ManifestScope manifest("tokenizer-train", config, dir);
  try {
    const auto corpus = harness::load_corpus(config.data);
    auto outcome = harness::train_tokenizer(config, corpus, dir);
    out << "trained " << outcome.steps_done << " steps, usage " << fmt_num(outcome.final_usage) << ", checkpoint "
        << outcome.checkpoint.string() << "\n";
    manifest.finish("ok");
  } catch (const ValidationError&) {
    manifest.finish("validation_error");
    throw;
  } catch (...) {
    manifest.finish("runtime_error");
    throw;
  }
  return kExitOk;
}

int cmd_ar_train(const CommonOptions& o, std::ostream& out) {
  const auto config = ExperimentConfig::from_doc(load_doc(o));
  const auto dir = harness::run_directory(harness::output_root(config, o.output_dir), config);
  ManifestScope manifest("ar-train", config, dir);
  try {
    const auto corpus = harness::load_corpus(config.data);
    auto result = harness::train_ar_probe(config, corpus, dir);
    out << "AR probe trained for " << result.steps << " steps, final loss "
        << fmt_num(result.loss_curve.empty() ? 0.0 : result.loss_curve.back()) << "\n";
    manifest.finish("ok");
  } catch (const ValidationError&) {
    manifest.finish("validation_error");
    throw;
  } catch (...) {
    manifest.finish("runtime_error");
    throw;
  }
  return kExitOk;
}

int cmd_probe(const CommonOptions& o, std::ostream& out) {
  const auto config = ExperimentConfig::from_doc(load_doc(o));
  const auto dir = harness::run_directory(harness::output_root(config, o.output_dir), config);
  ManifestScope manifest("probe", config, dir);
  try {
    const auto corpus = harness::load_corpus(config.data);
    auto outcome = harness::probe_run(config, corpus, dir);
    out << outcome.probe.to_json();
    manifest.finish("ok");
  } catch (const ValidationError&) {
    manifest.finish("validation_error");
    throw;
  } catch (...) {
    manifest.finish("runtime_error");
    throw;
  }
  return kExitOk;
}

int cmd_sweep(const CommonOptions& o, std::ostream& out) {
  const auto doc = load_doc(o);
  const auto base = ExperimentConfig::from_doc(doc);
  const auto root = harness::output_root(base, o.output_dir);
  const auto cells = harness::expand_sweep(doc);
  out << "sweep '" << base.name << "': " << cells.size() << " cells\n";
  ManifestScope manifest("sweep", base, root / base.name);
  auto summary = harness::run_sweep(doc, root, [&out](const std::string& line) { out << "  " << line << "\n"; });
  out << "completed " << summary.completed << ", reused " << summary.reused << ", failed " << summary.failed
      << "; report at " << (summary.directory / "report.csv").string() << "\n";
  const bool any = summary.completed + summary.reused > 0;
  manifest.finish(any ? "ok" : "runtime_error");
  return any ? kExitOk : kExitRuntime;
}

int cmd_viz_pca(const CommonOptions& o, int64_t layer, int64_t count, std::ostream& out) {
  const auto config = ExperimentConfig::from_doc(load_doc(o));
  const auto dir = harness::run_directory(harness::output_root(config, o.output_dir), config);
  auto loaded = harness::load_tokenizer(dir / "checkpoint.gtkc");
  if (loaded.config.digest() != config.digest()) {
    throw ValidationError("config_digest", "checkpoint in " + dir.string() + " was trained with a different config");
  }
  auto& tok = loaded.tokenizer;
  const auto depth = tok->decoder->depth();
  if (layer < 1 || layer > depth) {
    throw ValidationError("align_layer", "--layer must lie in [1, " + std::to_string(depth) + "]");
  }
  const auto corpus = harness::load_corpus(config.data);
  count = std::min<int64_t>(count, corpus.val.size());
  if (count < 4) throw ValidationError("pca_group", "PCA visualization needs at least 4 images");
  ManifestScope manifest("viz-pca", config, dir / "pca");
  torch::NoGradGuard no_grad;
  auto images = corpus.val.images.narrow(0, 0, count);
  vq::QuantizeOptions q;
  q.with_posterior = false;
  q.track_usage = false;
  auto result = tok->forward(images, q);
  auto feats = result.decoder_features.at(static_cast<size_t>(layer - 1));
  const auto g = config.tokenizer.grid();
  auto maps = metrics::pca_visualize(feats.reshape({count, g, g, feats.size(2)}));

  auto upsampled = torch::nn::functional::interpolate(
                       maps.rgb.permute({0, 3, 1, 2}),
                       torch::nn::functional::InterpolateFuncOptions()
                           .size(std::vector<int64_t>{config.tokenizer.image_size, config.tokenizer.image_size})
                           .mode(torch::kNearest))
                       .permute({0, 2, 3, 1});
  plot::image_grid(dir / "pca" / "pca.png", {metrics::denormalize(images).permute({0, 2, 3, 1}), upsampled});

  nlohmann::ordered_json meta;
  meta["layer"] = layer;
  meta["images"] = count;
  meta["components_found"] = maps.components_found;
  meta["explained_variance"] = maps.explained_variance;
  io::atomic_write(dir / "pca" / "pca.json", meta.dump(2) + "\n");
  manifest.finish("ok");
  out << "wrote " << (dir / "pca" / "pca.png").string() << " (" << maps.components_found << " components)\n";
  return kExitOk;
}

int cmd_report(const CommonOptions& o, const std::string& sweep_dir, bool tier_table, std::ostream& out) {
  if (tier_table) {
    net::TokenizerConfig base;
    if (!o.config_path.empty()) base = ExperimentConfig::from_doc(load_doc(o)).tokenizer;
    out << "tier,blocks,heads,width,transformer_params,total_params_symmetric\n";
    for (auto t : {net::TierName::S, net::TierName::B, net::TierName::L}) {
      auto tier = net::size_tier(t);
      auto c = base;
      c.encoder_tier = c.decoder_tier = t;
      out << net::to_string(t) << "," << tier.blocks << "," << tier.heads << "," << tier.width << ","
          << net::transformer_parameter_count(c, t) << "," << net::parameter_count(c).total() << "\n";
    }
    return kExitOk;
  }
  std::filesystem::path dir = sweep_dir;
  if (dir.empty()) {
    if (o.config_path.empty()) throw ValidationError("report_target", "report needs --sweep-dir or --config");
    const auto config = ExperimentConfig::from_doc(load_doc(o));
    dir = harness::output_root(config, o.output_dir) / config.name;
  }
  harness::write_report(dir);
  out << io::read_file(dir / "report.csv");
  return kExitOk;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Vector-quantized image tokenizer toolkit"};
  app.require_subcommand(1, 1);
  CommonOptions common;
  int64_t layer = 1, images = 8;
  std::string sweep_dir;
  bool tier_table = false;

  auto* tok = app.add_subcommand("tokenizer-train", "Train (or resume) a tokenizer");
  add_common(tok, common);
  auto* ar = app.add_subcommand("ar-train", "Train the AR probe on a trained tokenizer's tokens");
  add_common(ar, common);
  auto* probe = app.add_subcommand("probe", "Run the full AR probing protocol and print the ProbeReport");
  add_common(probe, common);
  auto* sweep = app.add_subcommand("sweep", "Train and probe every cell of the config's [sweep] axes");
  add_common(sweep, common);
  auto* viz = app.add_subcommand("viz-pca", "Write PCA maps of decoder features for validation images");
  add_common(viz, common);
  viz->add_option("--layer", layer, "Decoder layer (1-based)");
  viz->add_option("--images", images, "Number of validation images (>= 4)");
  auto* report = app.add_subcommand("report", "Rebuild the CSV and plots of a finished sweep");
  add_common(report, common, /*config_required=*/false);
  report->add_option("--sweep-dir", sweep_dir, "Sweep directory to summarize");
  report->add_flag("--tier-table", tier_table, "Print the tier parameter table");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n" << app.help();
    return kExitValidation;
  }

  try {
    if (tok->parsed()) return cmd_tokenizer_train(common, out);
    if (ar->parsed()) return cmd_ar_train(common, out);
    if (probe->parsed()) return cmd_probe(common, out);
    if (sweep->parsed()) return cmd_sweep(common, out);
    if (viz->parsed()) return cmd_viz_pca(common, layer, images, out);
    if (report->parsed()) return cmd_report(common, sweep_dir, tier_table, out);
  } catch (const ValidationError& e) {
    err << "validation error [" << e.rule() << "]: " << e.what() << "\n";
    return kExitValidation;
  } catch (const NonFiniteLoss& e) {
    err << "aborted: " << e.what() << "\n";
    return kExitRuntime;
  } catch (const std::exception& e) {
    err << "runtime error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitValidation;
}

}  // namespace vqtok::cli
