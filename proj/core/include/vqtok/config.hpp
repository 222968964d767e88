#pragma once

#include "vqtok/ar_probe.hpp"
#include "vqtok/objectives.hpp"
#include "vqtok/teacher.hpp"
#include "vqtok/tokenizer.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace vqtok::harness {

/// Raw `[section]` / `key = value` document. Values keep their source
/// spelling (quotes, brackets) until the typed loader interprets them.
struct ConfigDoc {
  std::map<std::string, std::map<std::string, std::string>> sections;

  static ConfigDoc parse(const std::string& text);
  static ConfigDoc load(const std::filesystem::path& path);
  /// Sets `section.key` from a dotted path, e.g. "tokenizer.encoder".
  void set(const std::string& dotted_key, const std::string& value);
  std::optional<std::string> get(const std::string& section, const std::string& key) const;
};

enum class CorpusKind { synthetic_shapes, image_folder };
CorpusKind parse_corpus_kind(const std::string& text);
std::string to_string(CorpusKind kind);

struct CorpusSpec {
  CorpusKind kind = CorpusKind::synthetic_shapes;
  std::string folder;  // image_folder root (one subdirectory per class)
  int64_t image_size = 32;
  int64_t num_classes = 16;
  int64_t count = 1000;  // synthetic images generated
  std::vector<double> split{0.8, 0.1, 0.1};  // train / val / probe-eval
  uint64_t seed = 0;

  void validate() const;
};

struct TrainSettings {
  int64_t steps = 2000;
  int64_t batch_size = 32;
  int64_t checkpoint_every = 500;
  double disc_start_fraction = 0.2;
  double posterior_temperature = 1.0;
  int64_t steps_per_epoch = 0;  // 0: derived from the train split size

  void validate() const;
};

struct SweepAxes {
  std::vector<std::string> tiers;  // "ENC-DEC" pairs, e.g. "S-B"
  std::vector<double> lambdas;
  std::vector<uint64_t> seeds;
  bool empty() const { return tiers.empty() && lambdas.empty() && seeds.empty(); }
};

struct ExperimentConfig {
  std::string name = "run";
  uint64_t seed = 0;
  std::string output_dir = "runs";

  net::TokenizerConfig tokenizer;
  semantic::SemRegConfig sem_reg;
  objectives::LossWeights losses;
  bool entropy_auto = true;  // entropy weight chosen from the tier when not given
  objectives::ScheduleConfig schedule;
  TrainSettings train;
  probe::ARConfig ar;
  probe::ProbeBudget probe;
  CorpusSpec data;
  SweepAxes sweep;

  /// Builds and validates a config; unknown sections or keys are rejected.
  static ExperimentConfig from_doc(const ConfigDoc& doc);
  static ExperimentConfig load(const std::filesystem::path& path);

  /// Throws ValidationError naming the violated rule.
  void validate() const;

  /// Fully resolved settings in document form. Excludes the output directory.
  std::string canonical_text() const;
  uint64_t digest() const;
};

/// Entropy-loss weight used when the config leaves it unset.
double default_entropy_weight(const net::TokenizerConfig& tokenizer);

/// Decoder layer aligned to the teacher when the config leaves it unset.
int64_t default_align_layer(const net::TokenizerConfig& tokenizer);

inline constexpr double kLargestTierEntropyWeight = 5e-3;

}  // namespace vqtok::harness
