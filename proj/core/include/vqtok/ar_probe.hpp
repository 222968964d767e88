#pragma once

#include "vqtok/data.hpp"
#include "vqtok/features.hpp"
#include "vqtok/objectives.hpp"
#include "vqtok/tokenizer.hpp"

#include <torch/torch.h>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

namespace vqtok::probe {

struct ARConfig {
  int64_t blocks = 4;
  int64_t heads = 4;
  int64_t width = 128;
  int64_t vocab = 1024;        // must equal the tokenizer codebook size
  int64_t token_count = 64;    // T; the model's sequence length is T + 1
  int64_t num_classes = 16;
  double label_dropout = 0.1;  // rate at which the class becomes the null class

  int64_t null_class() const { return num_classes; }
  int64_t middle_layer() const { return blocks / 2; }
  void validate() const;
};

/// Decoder-only next-token model with a prepended class token and learned
/// absolute positions; class id `num_classes` is the learned null class.
class ARModelImpl : public torch::nn::Module {
 public:
  explicit ARModelImpl(const ARConfig& config);

  /// tokens: B x L (L <= T), classes: B. Returns B x (L+1) x V logits; row j
  /// predicts token j.
  torch::Tensor forward(const torch::Tensor& tokens, const torch::Tensor& classes);

  /// Hidden states after `layers` blocks, B x (L+1) x width.
  torch::Tensor hidden(const torch::Tensor& tokens, const torch::Tensor& classes, int64_t layers);

  const ARConfig& config() const { return config_; }

 private:
  torch::Tensor embed(const torch::Tensor& tokens, const torch::Tensor& classes);

  ARConfig config_;
  torch::nn::Embedding token_emb_{nullptr}, class_emb_{nullptr};
  torch::Tensor pos_emb_;
  torch::nn::ModuleList blocks_{nullptr};
  torch::nn::LayerNorm norm_{nullptr};
  torch::nn::Linear head_{nullptr};
};
TORCH_MODULE(ARModel);

/// Token shard: magic "GTKS" | u32 version | u32 len + tokenizer id | u32 N |
/// u32 T | u64 count, then per sample an i32 class label and T i32 token ids,
/// all little-endian.
struct TokenShard {
  std::string tokenizer_id;
  int64_t vocab = 0;
  int64_t token_count = 0;
  std::vector<int32_t> labels;
  std::vector<int32_t> tokens;  // count * T, row-major

  int64_t count() const { return static_cast<int64_t>(labels.size()); }
  torch::Tensor token_tensor() const;  // count x T int64
  torch::Tensor label_tensor() const;  // count int64

  void write(const std::filesystem::path& path) const;
  static TokenShard read(const std::filesystem::path& path);
  bool operator==(const TokenShard&) const = default;
};

/// Tokenizes a labeled set with a frozen tokenizer.
TokenShard extract_tokens(net::Tokenizer& tokenizer, const LabeledImages& data, const std::string& tokenizer_id,
                          int64_t batch_size = 64);

struct ProbeBudget {
  int64_t epochs = 20;
  int64_t batch_size = 32;
  objectives::ScheduleConfig schedule = [] {
    objectives::ScheduleConfig s;
    s.kind = objectives::ScheduleKind::wsd;
    s.base_lr = 1e-3;
    s.min_lr = 1e-4;
    s.warmup_epochs = 1.0;
    s.decay_ratio = 0.2;
    return s;
  }();
  double weight_decay = 0.0;
  int64_t generated_samples = 128;
  double guidance_scale = 1.5;
  double unguided_fraction = 0.18;
};

struct ARTrainResult {
  ARModel model{nullptr};
  std::vector<double> loss_curve;  // one entry per optimizer step
  int64_t steps = 0;
};

/// Teacher-forced next-token cross-entropy training with label dropout.
/// Deterministic for a fixed seed.
ARTrainResult ar_train(const TokenShard& train, const ARConfig& config, const ProbeBudget& budget, uint64_t seed);

/// Mean per-token cross entropy in nats of logits (B x T x V) against targets (B x T).
double token_cross_entropy(const torch::Tensor& logits, const torch::Tensor& targets);

/// Mean per-token cross entropy on a held-out shard, conditioned on true classes.
double ar_validation_loss(ARModel& model, const TokenShard& heldout, int64_t batch_size = 128);

struct CFGSchedule {
  double guidance_scale = 1.5;
  double unguided_fraction = 0.18;

  /// ceil(unguided_fraction * T): leading steps sampled from conditional logits.
  int64_t unguided_steps(int64_t token_count) const;
  void validate() const;
};

/// l_u + s * (l_c - l_u); exactly l_c when s == 1.
torch::Tensor guided_logits(const torch::Tensor& cond, const torch::Tensor& uncond, double scale);

/// Next-token logits (B x V) for a prefix (B x t) under class ids (B).
using LogitFn = std::function<torch::Tensor(const torch::Tensor& prefix, const torch::Tensor& classes)>;

struct SampleTrace {
  torch::Tensor tokens;                  // B x T
  std::vector<torch::Tensor> step_logits;  // logits actually sampled from, per step
};

/// Autoregressive categorical sampling (temperature 1, no truncation) with a
/// seed-pinned generator. The first ceil(fraction*T) steps use conditional
/// logits; later steps use the guided combination.
SampleTrace sample_tokens(const LogitFn& logits, const torch::Tensor& classes, int64_t null_class,
                          int64_t token_count, const CFGSchedule& cfg, uint64_t seed);

torch::Tensor ar_sample(ARModel& model, const torch::Tensor& classes, const CFGSchedule& cfg, uint64_t seed);

/// Token-averaged hidden states from the middle block, computed with the
/// null class so the class token carries no label information.
torch::Tensor probe_features(ARModel& model, const TokenShard& shard, int64_t batch_size = 128);

/// Multinomial logistic regression (L-BFGS, standardized features, small L2)
/// fit on the train split; returns accuracy on the eval split.
double linear_probe(const torch::Tensor& train_features, const torch::Tensor& train_labels,
                    const torch::Tensor& eval_features, const torch::Tensor& eval_labels);

struct ProbeReport {
  double val_loss = 0.0;
  double fid_proxy = 0.0;
  double linear_probe_acc = 0.0;
  double codebook_usage = 0.0;
  std::string tokenizer_id;
  int64_t ar_steps = 0;
  uint64_t seed = 0;

  std::string to_json() const;
  static ProbeReport from_json(const std::string& text);
};

struct ProbeData {
  LabeledImages train;       // AR training + linear-probe fit
  LabeledImages val;         // validation loss + FID reference set
  LabeledImages probe_eval;  // linear-probe evaluation
  int64_t num_classes = 0;
};

struct ProbeArtifacts {
  std::filesystem::path directory;  // when set, shards and the AR loss curve are written here
};

/// Full probing protocol for one frozen tokenizer.
ProbeReport run_probe(net::Tokenizer& tokenizer, const std::string& tokenizer_id, const ProbeData& data,
                      ARConfig ar_config, const ProbeBudget& budget, features::FeatureExtractor& extractor,
                      uint64_t seed, const ProbeArtifacts& artifacts = {});

}  // namespace vqtok::probe
