#include "vqtok/runs.hpp"

#include "vqtok/binary_io.hpp"
#include "vqtok/errors.hpp"
#include "vqtok/metrics.hpp"
#include "vqtok/plot.hpp"

#include <json.hpp>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <iostream>
#include <map>
#include <set>

namespace vqtok::harness {

namespace detail {
extern const char* const kBuildId;
}

namespace {

std::string cell_name(const std::string& tiers, double lambda, uint64_t seed) {
  char buf[96];
  std::snprintf(buf, sizeof buf, "%s_lam%g_seed%llu", tiers.c_str(), lambda, static_cast<unsigned long long>(seed));
  return buf;
}

std::string format_cell(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

bool file_matches(const std::filesystem::path& path, const std::string& expected) {
  return std::filesystem::exists(path) && io::read_file(path) == expected;
}

}  // namespace

std::filesystem::path output_root(const ExperimentConfig& config, const std::optional<std::string>& flag) {
  if (flag && !flag->empty()) return *flag;
  if (const char* env = std::getenv("GTK_OUTPUT_DIR"); env && *env) return env;
  return config.output_dir;
}

std::filesystem::path run_directory(const std::filesystem::path& root, const ExperimentConfig& config) {
  return root / config.name / ("seed-" + std::to_string(config.seed));
}

std::string build_id() { return detail::kBuildId; }

std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

void write_manifest(const std::filesystem::path& dir, const Manifest& m) {
  nlohmann::ordered_json j;
  j["command"] = m.command;
  j["seed"] = m.seed;
  j["config_digest"] = io::hex64(m.config_digest);
  j["build_id"] = m.build_id;
  j["start_time"] = m.start_time;
  j["end_time"] = m.end_time;
  j["status"] = m.status;
  j["config"] = m.config_text;
  std::filesystem::create_directories(dir);
  io::atomic_write(dir / "manifest.json", j.dump(2) + "\n");
}

std::string ReconReport::to_json() const {
  nlohmann::ordered_json j;
  j["rfid_proxy"] = rfid_proxy;
  j["psnr"] = psnr;
  j["ssim"] = ssim;
  return j.dump(2) + "\n";
}

ReconReport ReconReport::from_json(const std::string& text) {
  auto j = nlohmann::json::parse(text);
  return {j.at("rfid_proxy").get<double>(), j.at("psnr").get<double>(), j.at("ssim").get<double>()};
}

ReconReport evaluate_reconstruction(net::Tokenizer& tokenizer, const torch::Tensor& images,
                                    features::FeatureExtractor& extractor) {
  torch::NoGradGuard no_grad;
  tokenizer->eval();
  std::vector<torch::Tensor> parts;
  for (int64_t start = 0; start < images.size(0); start += 64) {
    const auto n = std::min<int64_t>(64, images.size(0) - start);
    auto ids = tokenizer->tokenize(images.narrow(0, start, n));
    parts.push_back(tokenizer->decode_indices(ids).images);
  }
  auto recon = torch::cat(parts, 0);
  ReconReport r;
  r.rfid_proxy = metrics::fid_proxy(images, recon, extractor);
  const auto a = metrics::denormalize(images), b = metrics::denormalize(recon);
  r.psnr = metrics::psnr(a, b);
  r.ssim = images.size(2) >= 11 ? metrics::ssim(a, b) : std::nan("");
  return r;
}

net::Tokenizer ensure_tokenizer(const ExperimentConfig& config, const Corpus& corpus,
                                const std::filesystem::path& run_dir) {
  train_tokenizer(config, corpus, run_dir);
  return load_tokenizer(run_dir / "checkpoint.gtkc").tokenizer;
}

probe::ARTrainResult train_ar_probe(const ExperimentConfig& config, const Corpus& corpus,
                                    const std::filesystem::path& run_dir) {
  auto tokenizer = ensure_tokenizer(config, corpus, run_dir);
  const auto id = io::hex64(config.digest());
  auto train = probe::extract_tokens(tokenizer, corpus.train, id);
  auto val = probe::extract_tokens(tokenizer, corpus.val, id);
  const auto dir = run_dir / "ar";
  std::filesystem::create_directories(dir);
  train.write(dir / "train.shard");
  val.write(dir / "val.shard");
  auto result = probe::ar_train(train, config.ar, config.probe, config.seed);

  Checkpoint c;
  c.config_digest = config.digest();
  c.step = result.steps;
  c.config_text = config.canonical_text();
  c.sections.push_back(module_section("ar_probe", *result.model));
  c.write(dir / "ar.gtkc");

  std::string curve = "step,loss\n";
  for (size_t i = 0; i < result.loss_curve.size(); ++i) curve += std::to_string(i) + "," + format_cell(result.loss_curve[i]) + "\n";
  curve += "# val_loss," + format_cell(probe::ar_validation_loss(result.model, val)) + "\n";
  io::atomic_write(dir / "ar_loss.csv", curve);
  return result;
}

ProbeOutcome probe_run(const ExperimentConfig& config, const Corpus& corpus, const std::filesystem::path& run_dir) {
  auto tokenizer = ensure_tokenizer(config, corpus, run_dir);
  auto extractor = features::default_extractor();
  ProbeOutcome out;
  out.recon = evaluate_reconstruction(tokenizer, corpus.val.images, *extractor);
  out.probe = probe::run_probe(tokenizer, io::hex64(config.digest()), corpus.probe_data(), config.ar, config.probe,
                               *extractor, config.seed, probe::ProbeArtifacts{run_dir / "probe"});
  io::atomic_write(run_dir / "probe_report.json", out.probe.to_json());
  io::atomic_write(run_dir / "recon_report.json", out.recon.to_json());
  return out;
}

std::vector<SweepCell> expand_sweep(const ConfigDoc& base) {
  const auto base_config = ExperimentConfig::from_doc(base);
  const auto& axes = base_config.sweep;
  std::vector<std::string> tiers = axes.tiers;
  if (tiers.empty()) {
    tiers.push_back(net::to_string(base_config.tokenizer.encoder_tier) + "-" +
                    net::to_string(base_config.tokenizer.decoder_tier));
  }
  std::vector<double> lambdas = axes.lambdas.empty() ? std::vector<double>{base_config.sem_reg.lambda} : axes.lambdas;
  std::vector<uint64_t> seeds = axes.seeds.empty() ? std::vector<uint64_t>{base_config.seed} : axes.seeds;

  std::vector<SweepCell> cells;
  std::set<std::string> names;
  for (const auto& pair : tiers) {
    const auto dash = pair.find('-');
    for (double lambda : lambdas) {
      for (uint64_t seed : seeds) {
        ConfigDoc doc = base;
        doc.sections.erase("sweep");
        doc.set("tokenizer.encoder", "\"" + pair.substr(0, dash) + "\"");
        doc.set("tokenizer.decoder", "\"" + pair.substr(dash + 1) + "\"");
        doc.set("sem_reg.lambda", format_cell(lambda));
        doc.set("run.seed", std::to_string(seed));
        const auto name = cell_name(pair, lambda, seed);
        doc.set("run.name", "\"" + name + "\"");
        if (!names.insert(name).second) throw ValidationError("sweep_axes", "sweep axes repeat cell " + name);
        cells.push_back({name, ExperimentConfig::from_doc(doc)});
      }
    }
  }
  return cells;
}

SweepSummary run_sweep(const ConfigDoc& base, const std::filesystem::path& root,
                       const std::function<void(const std::string&)>& progress) {
  const auto base_config = ExperimentConfig::from_doc(base);
  const auto cells = expand_sweep(base);
  SweepSummary summary;
  summary.directory = root / base_config.name;
  std::filesystem::create_directories(summary.directory);
  std::map<std::string, Corpus> corpora;
  for (const auto& cell : cells) {
    const auto dir = summary.directory / cell.name;
    std::filesystem::create_directories(dir);
    const auto canonical = cell.config.canonical_text();
    if (file_matches(dir / "config.toml", canonical) && std::filesystem::exists(dir / "probe_report.json") &&
        std::filesystem::exists(dir / "recon_report.json")) {
      ++summary.reused;
      if (progress) progress(cell.name + ": reused");
      continue;
    }
    io::atomic_write(dir / "config.toml", canonical);
    std::filesystem::remove(dir / "error.txt");
    Manifest m{"sweep", canonical, cell.config.digest(), cell.config.seed, build_id(), utc_timestamp(), "", "ok"};
    try {
      const auto key = to_string(cell.config.data.kind) + cell.config.data.folder + std::to_string(cell.config.data.seed) +
                       std::to_string(cell.config.data.count) + std::to_string(cell.config.data.image_size);
      if (!corpora.count(key)) corpora.emplace(key, load_corpus(cell.config.data));
      auto outcome = probe_run(cell.config, corpora.at(key), dir);
      ++summary.completed;
      if (progress) {
        progress(cell.name + ": val_loss " + format_cell(outcome.probe.val_loss) + " fid_proxy " +
                 format_cell(outcome.probe.fid_proxy) + " linear_probe_acc " +
                 format_cell(outcome.probe.linear_probe_acc));
      }
    } catch (const std::exception& e) {
      ++summary.failed;
      m.status = dynamic_cast<const ValidationError*>(&e) ? "validation_error" : "runtime_error";
      io::atomic_write(dir / "error.txt", std::string(e.what()) + "\n");
      std::clog << "error: sweep cell " << cell.name << " failed: " << e.what() << "\n";
    }
    m.end_time = utc_timestamp();
    write_manifest(dir, m);
  }
  write_report(summary.directory);
  return summary;
}

std::vector<ReportRow> collect_report(const std::filesystem::path& sweep_dir) {
  if (!std::filesystem::is_directory(sweep_dir)) {
    throw ValidationError("sweep_dir", "not a sweep directory: " + sweep_dir.string());
  }
  std::vector<std::filesystem::path> dirs;
  for (const auto& entry : std::filesystem::directory_iterator(sweep_dir)) {
    if (entry.is_directory() && std::filesystem::exists(entry.path() / "config.toml")) dirs.push_back(entry.path());
  }
  std::sort(dirs.begin(), dirs.end());
  std::vector<ReportRow> rows;
  for (const auto& dir : dirs) {
    const auto config = ExperimentConfig::from_doc(ConfigDoc::parse(io::read_file(dir / "config.toml")));
    ReportRow row;
    row.cell = dir.filename().string();
    row.encoder = net::to_string(config.tokenizer.encoder_tier);
    row.decoder = net::to_string(config.tokenizer.decoder_tier);
    row.lambda = config.sem_reg.lambda;
    row.seed = config.seed;
    row.total_params = net::parameter_count(config.tokenizer).total();
    if (std::filesystem::exists(dir / "probe_report.json") && std::filesystem::exists(dir / "recon_report.json")) {
      row.probe = probe::ProbeReport::from_json(io::read_file(dir / "probe_report.json"));
      row.recon = ReconReport::from_json(io::read_file(dir / "recon_report.json"));
      row.status = "ok";
    } else {
      row.status = std::filesystem::exists(dir / "error.txt") ? "failed" : "missing";
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

void write_report(const std::filesystem::path& sweep_dir) {
  const auto rows = collect_report(sweep_dir);
  std::string csv = std::string(kReportHeader) + "\n";
  for (const auto& r : rows) {
    csv += r.cell + "," + r.encoder + "," + r.decoder + "," + format_cell(r.lambda) + "," + std::to_string(r.seed) + "," +
           std::to_string(r.total_params) + "," + r.status;
    if (r.recon && r.probe) {
      for (double v : {r.recon->rfid_proxy, r.recon->psnr, r.recon->ssim, r.probe->val_loss, r.probe->fid_proxy,
                       r.probe->linear_probe_acc, r.probe->codebook_usage}) {
        csv += "," + format_cell(v);
      }
    } else {
      csv += ",,,,,,,";
    }
    csv += "\n";
  }
  io::atomic_write(sweep_dir / "report.csv", csv);

  // Seed-averaged curves over tier pairs (ordered by parameter count), one series per lambda.
  std::vector<std::pair<int64_t, std::string>> tier_order;
  std::set<double> lambdas;
  for (const auto& r : rows) {
    const auto pair = r.encoder + "-" + r.decoder;
    if (std::find_if(tier_order.begin(), tier_order.end(), [&](const auto& t) { return t.second == pair; }) ==
        tier_order.end()) {
      tier_order.emplace_back(r.total_params, pair);
    }
    lambdas.insert(r.lambda);
  }
  std::sort(tier_order.begin(), tier_order.end());
  std::vector<std::string> labels;
  for (const auto& t : tier_order) labels.push_back(t.second);

  using Getter = double (*)(const ReportRow&);
  const std::vector<std::pair<std::string, Getter>> metrics = {
      {"rfid_proxy", [](const ReportRow& r) { return r.recon->rfid_proxy; }},
      {"val_loss", [](const ReportRow& r) { return r.probe->val_loss; }},
      {"fid_proxy", [](const ReportRow& r) { return r.probe->fid_proxy; }},
      {"linear_probe_acc", [](const ReportRow& r) { return r.probe->linear_probe_acc; }},
  };
  for (const auto& [metric, get] : metrics) {
    std::vector<plot::Series> series;
    for (double lambda : lambdas) {
      plot::Series s{"lambda " + format_cell(lambda), {}};
      for (const auto& label : labels) {
        double sum = 0.0;
        int count = 0;
        for (const auto& r : rows) {
          if (r.status == "ok" && r.lambda == lambda && r.encoder + "-" + r.decoder == label) {
            sum += get(r);
            ++count;
          }
        }
        s.values.push_back(count ? sum / count : std::nan(""));
      }
      series.push_back(std::move(s));
    }
    plot::line_chart(sweep_dir / "plots" / (metric + ".png"), metric + " by tier (seed mean)", labels, series);
  }
}

}  // namespace vqtok::harness
