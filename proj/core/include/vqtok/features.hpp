#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

namespace vqtok::features {

/// Frozen image -> features map. Implementations must be deterministic.
class FeatureExtractor {
 public:
  virtual ~FeatureExtractor() = default;
  /// K feature maps per image batch (used by the perceptual loss).
  virtual std::vector<torch::Tensor> feature_maps(const torch::Tensor& images) = 0;
  /// One F-dimensional vector per image (used by the Frechet proxy).
  virtual torch::Tensor embed(const torch::Tensor& images) = 0;
  virtual int64_t embedding_dim() const = 0;
  virtual std::string id() const = 0;
};

/// Raw pixels as the single feature map.
class IdentityExtractor final : public FeatureExtractor {
 public:
  std::vector<torch::Tensor> feature_maps(const torch::Tensor& images) override { return {images}; }
  torch::Tensor embed(const torch::Tensor& images) override { return images.flatten(1); }
  int64_t embedding_dim() const override { return -1; }
  std::string id() const override { return "identity"; }
};

/// Small conv net with seed-pinned random weights, never trained.
class FrozenConvExtractor final : public FeatureExtractor {
 public:
  struct Options {
    std::vector<int64_t> channels{16, 32, 32};  // one conv per entry; later ones stride 2
    uint64_t seed = 0x5eed;
  };

  FrozenConvExtractor();
  explicit FrozenConvExtractor(Options options);

  std::vector<torch::Tensor> feature_maps(const torch::Tensor& images) override;
  /// Per-channel spatial mean and standard deviation of the last map.
  torch::Tensor embed(const torch::Tensor& images) override;
  int64_t embedding_dim() const override { return 2 * options_.channels.back(); }
  std::string id() const override;

  const std::vector<torch::Tensor>& weights() const { return weights_; }
  const std::vector<torch::Tensor>& biases() const { return biases_; }

 private:
  Options options_;
  std::vector<torch::Tensor> weights_, biases_;
};

std::shared_ptr<FeatureExtractor> default_extractor();

}  // namespace vqtok::features
