#pragma once

#include "vqtok/checkpoint.hpp"
#include "vqtok/config.hpp"
#include "vqtok/corpus.hpp"
#include "vqtok/features.hpp"
#include "vqtok/objectives.hpp"
#include "vqtok/teacher.hpp"
#include "vqtok/tokenizer.hpp"

#include <torch/torch.h>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace vqtok::harness {

struct MetricsRow {
  int64_t step = 0;
  double lr = 0, recon = 0, perceptual = 0, gan_g = 0, gan_d = 0, vq = 0, entropy = 0, sem_reg = 0, total = 0,
         usage = 0;
};

inline constexpr const char* kMetricsHeader = "step,lr,recon,perceptual,gan_g,gan_d,vq,entropy,sem_reg,total,usage";
std::string format_metrics_row(const MetricsRow& row);
std::vector<MetricsRow> read_metrics(const std::filesystem::path& csv);

/// Mixes a seed with a salt into an independent 64-bit seed.
uint64_t mix_seed(uint64_t seed, uint64_t salt);

/// One tokenizer training run's mutable state: models, optimizers and the
/// step counter. Every random choice inside a step is derived from
/// (seed, step), so restoring a snapshot continues the exact same stream.
class TokenizerTrainer {
 public:
  TokenizerTrainer(const ExperimentConfig& config, const Corpus& corpus);

  /// Runs the step at `step()` and advances it. Throws NonFiniteLoss
  /// without touching the model when a loss term is not finite.
  MetricsRow run_step();

  int64_t step() const { return step_; }
  Checkpoint snapshot() const;
  void restore(const Checkpoint& checkpoint);

  /// Rows of the training split used at `step`.
  std::vector<int64_t> batch_rows(int64_t step) const;

  net::Tokenizer& tokenizer() { return tokenizer_; }
  semantic::Projector& projector() { return projector_; }
  const ExperimentConfig& config() const { return config_; }
  bool sem_reg_active() const { return config_.sem_reg.lambda > 0.0; }

 private:
  ExperimentConfig config_;
  const Corpus& corpus_;
  net::Tokenizer tokenizer_{nullptr};
  objectives::Discriminator disc_{nullptr};
  semantic::Projector projector_{nullptr};
  std::unique_ptr<torch::optim::AdamW> gen_opt_, disc_opt_;
  std::shared_ptr<features::FeatureExtractor> extractor_;
  std::optional<semantic::TeacherFeatureStore> teacher_;
  int64_t steps_per_epoch_ = 1;
  int64_t step_ = 0;
};

struct TrainOptions {
  std::optional<int64_t> stop_at;  // pause after this many total steps
  bool resume = true;              // continue from run_dir/checkpoint.gtkc when present
  std::function<void(const MetricsRow&)> on_step;
};

struct TrainOutcome {
  net::Tokenizer tokenizer{nullptr};
  int64_t steps_done = 0;
  double final_usage = 0.0;
  std::filesystem::path checkpoint;
};

/// Trains (or resumes) a tokenizer in `run_dir`, writing metrics.csv and
/// checkpoint.gtkc. On a non-finite loss a diagnostic.gtkc snapshot is
/// written and the NonFiniteLoss is rethrown.
TrainOutcome train_tokenizer(const ExperimentConfig& config, const Corpus& corpus, const std::filesystem::path& run_dir,
                             const TrainOptions& options = {});

struct LoadedTokenizer {
  ExperimentConfig config;
  net::Tokenizer tokenizer{nullptr};
  int64_t step = 0;
};

/// Rebuilds a tokenizer from a checkpoint's embedded config and weights.
LoadedTokenizer load_tokenizer(const std::filesystem::path& checkpoint_path);

}  // namespace vqtok::harness
