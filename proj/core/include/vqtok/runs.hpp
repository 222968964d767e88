#pragma once

#include "vqtok/ar_probe.hpp"
#include "vqtok/config.hpp"
#include "vqtok/corpus.hpp"
#include "vqtok/train.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace vqtok::harness {

/// Output root: the --output-dir flag when given, else $GTK_OUTPUT_DIR when
/// set, else the config's run.output_dir.
std::filesystem::path output_root(const ExperimentConfig& config, const std::optional<std::string>& flag);

/// <root>/<name>/seed-<seed>
std::filesystem::path run_directory(const std::filesystem::path& root, const ExperimentConfig& config);

std::string build_id();
std::string utc_timestamp();

struct Manifest {
  std::string command;
  std::string config_text;
  uint64_t config_digest = 0;
  uint64_t seed = 0;
  std::string build_id;
  std::string start_time;
  std::string end_time;
  std::string status;  // "ok", "validation_error", "runtime_error"
};

void write_manifest(const std::filesystem::path& dir, const Manifest& manifest);

struct ReconReport {
  double rfid_proxy = 0.0;
  double psnr = 0.0;
  double ssim = 0.0;

  std::string to_json() const;
  static ReconReport from_json(const std::string& text);
};

/// Reconstruction metrics of a frozen tokenizer on an image set.
ReconReport evaluate_reconstruction(net::Tokenizer& tokenizer, const torch::Tensor& images,
                                    features::FeatureExtractor& extractor);

/// Trains the tokenizer to completion in `run_dir` (resuming if possible)
/// and returns it reloaded from the final checkpoint.
net::Tokenizer ensure_tokenizer(const ExperimentConfig& config, const Corpus& corpus,
                                const std::filesystem::path& run_dir);

/// Trains the AR probe on the tokenizer in `run_dir` and writes its
/// checkpoint (section "ar_probe"), token shards and loss curve.
probe::ARTrainResult train_ar_probe(const ExperimentConfig& config, const Corpus& corpus,
                                    const std::filesystem::path& run_dir);

struct ProbeOutcome {
  probe::ProbeReport probe;
  ReconReport recon;
};

/// ensure_tokenizer + run_probe + reconstruction metrics; writes
/// probe_report.json and recon_report.json into `run_dir`.
ProbeOutcome probe_run(const ExperimentConfig& config, const Corpus& corpus, const std::filesystem::path& run_dir);

struct SweepCell {
  std::string name;
  ExperimentConfig config;
};

/// Cartesian product of the [sweep] axes applied to a base document.
std::vector<SweepCell> expand_sweep(const ConfigDoc& base);

struct SweepSummary {
  std::filesystem::path directory;
  int64_t completed = 0;
  int64_t failed = 0;
  int64_t reused = 0;
};

/// Runs every cell under <root>/<name>, skipping cells whose reports were
/// produced by an identical config, then writes the report.
SweepSummary run_sweep(const ConfigDoc& base, const std::filesystem::path& root,
                       const std::function<void(const std::string&)>& progress = {});

struct ReportRow {
  std::string cell;
  std::string encoder, decoder;
  double lambda = 0.0;
  uint64_t seed = 0;
  int64_t total_params = 0;
  std::string status;  // ok, missing, failed
  std::optional<ReconReport> recon;
  std::optional<probe::ProbeReport> probe;
};

/// Reads every cell directory of a sweep; never trains.
std::vector<ReportRow> collect_report(const std::filesystem::path& sweep_dir);

inline constexpr const char* kReportHeader =
    "cell,encoder,decoder,lambda,seed,total_params,status,rfid_proxy,psnr,ssim,val_loss,fid_proxy,linear_probe_acc,"
    "codebook_usage";

/// report.csv plus one PNG per metric under plots/.
void write_report(const std::filesystem::path& sweep_dir);

}  // namespace vqtok::harness
