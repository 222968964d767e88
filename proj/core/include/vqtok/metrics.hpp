#pragma once

#include "vqtok/features.hpp"

#include <torch/torch.h>

#include <cstdint>
#include <vector>

namespace vqtok::metrics {

inline constexpr double kPsnrCap = 100.0;

/// Mean per-image PSNR in dB for images in [0, 1]; identical images report kPsnrCap.
double psnr(const torch::Tensor& x, const torch::Tensor& x_hat);

/// Mean SSIM over images and channels: 11x11 Gaussian window (sigma 1.5),
/// valid region only, c1 = 0.01^2, c2 = 0.03^2, data range 1.
double ssim(const torch::Tensor& x, const torch::Tensor& x_hat);

/// Maps [-1, 1] pixels to [0, 1].
torch::Tensor denormalize(const torch::Tensor& images);

struct GaussianStats {
  torch::Tensor mean;        // F, float64
  torch::Tensor covariance;  // F x F, float64, symmetric

  /// Sample mean and unbiased covariance of N x F features, symmetrized.
  static GaussianStats from_features(const torch::Tensor& features, double shrinkage = 0.0);
  int64_t dim() const { return mean.size(0); }
};

/// ||mu_a - mu_b||^2 + tr(S_a + S_b - 2 (S_a S_b)^{1/2}); square roots via
/// symmetric eigendecomposition with negative eigenvalues clamped to zero.
double frechet_distance(const GaussianStats& a, const GaussianStats& b);

inline constexpr double kShrinkage = 1e-6;

struct FidOptions {
  bool allow_shrinkage = true;
};

/// Frechet distance between extractor-feature Gaussians of two image sets.
/// With fewer than F+1 samples on a side the covariance gets kShrinkage * I,
/// or the call is rejected when shrinkage is disabled.
double fid_proxy(const torch::Tensor& real_images, const torch::Tensor& generated_images,
                 features::FeatureExtractor& extractor, const FidOptions& options = {});

double fid_from_features(const torch::Tensor& real_features, const torch::Tensor& generated_features,
                         const FidOptions& options = {});

struct PcaMaps {
  torch::Tensor rgb;       // B x H' x W' x 3 in [0, 1]; missing components stay 0
  torch::Tensor components;  // k x C principal directions (rows)
  std::vector<double> explained_variance;
  int64_t components_found = 0;
};

/// Joint PCA over every token of every image in the group (B x H' x W' x C).
/// Signs fixed so each component's largest-magnitude loading is positive;
/// each component is min-max normalized over the whole group.
PcaMaps pca_visualize(const torch::Tensor& feature_grids);

/// Mean cosine similarity over all pairs of distinct images that share a
/// label; each image contributes its flattened feature tensor. Throws when
/// no class has two members.
double within_class_cosine(const torch::Tensor& features, const std::vector<int64_t>& labels);

}  // namespace vqtok::metrics
