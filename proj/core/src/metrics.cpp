#include "vqtok/metrics.hpp"

#include "vqtok/errors.hpp"

#include <algorithm>
#include <cmath>

namespace vqtok::metrics {

namespace {

void check_pair(const torch::Tensor& x, const torch::Tensor& y) {
  if (!x.sizes().equals(y.sizes())) throw ValidationError("shape_match", "metric inputs differ in shape");
  if (x.dim() != 4) throw ValidationError("image_shape", "expected B x C x H x W images");
}

torch::Tensor gaussian_window(int64_t size, double sigma) {
  auto coords = torch::arange(size, torch::kFloat64) - static_cast<double>(size - 1) / 2.0;
  auto g = torch::exp(-(coords * coords) / (2.0 * sigma * sigma));
  g = g / g.sum();
  return torch::outer(g, g);
}

/// Symmetric PSD square root via eigendecomposition.
torch::Tensor sqrtm_psd(const torch::Tensor& m) {
  auto [evals, evecs] = torch::linalg_eigh(0.5 * (m + m.transpose(0, 1)));
  auto root = evals.clamp_min(0.0).sqrt();
  return torch::matmul(evecs * root.unsqueeze(0), evecs.transpose(0, 1));
}

}  // namespace

torch::Tensor denormalize(const torch::Tensor& images) { return ((images + 1.0) * 0.5).clamp(0.0, 1.0); }

double psnr(const torch::Tensor& x, const torch::Tensor& x_hat) {
  check_pair(x, x_hat);
  auto mse = (x.to(torch::kFloat64) - x_hat.to(torch::kFloat64)).pow(2).flatten(1).mean(1);
  auto acc = mse.accessor<double, 1>();
  double total = 0.0;
  for (int64_t i = 0; i < acc.size(0); ++i) {
    total += acc[i] <= 0.0 ? kPsnrCap : std::min(kPsnrCap, -10.0 * std::log10(acc[i]));
  }
  return total / static_cast<double>(acc.size(0));
}

double ssim(const torch::Tensor& x, const torch::Tensor& x_hat) {
  check_pair(x, x_hat);
  constexpr int64_t kWin = 11;
  if (x.size(2) < kWin || x.size(3) < kWin) throw ValidationError("ssim_size", "SSIM needs images >= 11x11");
  constexpr double c1 = 0.01 * 0.01;
  constexpr double c2 = 0.03 * 0.03;
  const int64_t channels = x.size(1);
  auto window = gaussian_window(kWin, 1.5).view({1, 1, kWin, kWin}).expand({channels, 1, kWin, kWin}).contiguous();
  auto a = x.to(torch::kFloat64);
  auto b = x_hat.to(torch::kFloat64);
  auto filt = [&](const torch::Tensor& t) { return torch::conv2d(t, window, torch::Tensor(), torch::IntArrayRef{1, 1}, torch::IntArrayRef{0, 0}, torch::IntArrayRef{1, 1}, channels); };
  auto mu_a = filt(a);
  auto mu_b = filt(b);
  auto var_a = filt(a * a) - mu_a * mu_a;
  auto var_b = filt(b * b) - mu_b * mu_b;
  auto cov = filt(a * b) - mu_a * mu_b;
  auto ssim_map = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2));
  return ssim_map.mean().item<double>();
}

GaussianStats GaussianStats::from_features(const torch::Tensor& features, double shrinkage) {
  if (features.dim() != 2 || features.size(0) < 2) {
    throw ValidationError("stats_samples", "need an N x F feature matrix with N >= 2");
  }
  auto f = features.to(torch::kFloat64);
  GaussianStats s;
  s.mean = f.mean(0);
  auto centered = f - s.mean;
  auto cov = torch::matmul(centered.transpose(0, 1), centered) / static_cast<double>(f.size(0) - 1);
  cov = 0.5 * (cov + cov.transpose(0, 1));
  if (shrinkage > 0.0) cov = cov + shrinkage * torch::eye(f.size(1), torch::kFloat64);
  s.covariance = cov;
  return s;
}

double frechet_distance(const GaussianStats& a, const GaussianStats& b) {
  if (a.dim() != b.dim()) throw ValidationError("stats_dim", "Frechet distance needs matching feature dims");
  const double mean_term = (a.mean - b.mean).pow(2).sum().item<double>();
  auto root_a = sqrtm_psd(a.covariance);
  auto inner = torch::matmul(torch::matmul(root_a, b.covariance), root_a);
  auto [evals, evecs] = torch::linalg_eigh(0.5 * (inner + inner.transpose(0, 1)));
  const double cross = evals.clamp_min(0.0).sqrt().sum().item<double>();
  const double value =
      mean_term + a.covariance.trace().item<double>() + b.covariance.trace().item<double>() - 2.0 * cross;
  return std::max(0.0, value);
}

double fid_from_features(const torch::Tensor& real_features, const torch::Tensor& generated_features,
                         const FidOptions& options) {
  const int64_t f = real_features.size(1);
  auto stats = [&](const torch::Tensor& feats) {
    if (feats.size(0) < f + 1) {
      if (!options.allow_shrinkage) {
        throw ValidationError("fid_samples", std::to_string(feats.size(0)) + " samples for " + std::to_string(f) +
                                                 "-dim features; need F+1 or enable shrinkage");
      }
      return GaussianStats::from_features(feats, kShrinkage);
    }
    return GaussianStats::from_features(feats);
  };
  return frechet_distance(stats(real_features), stats(generated_features));
}

double fid_proxy(const torch::Tensor& real_images, const torch::Tensor& generated_images,
                 features::FeatureExtractor& extractor, const FidOptions& options) {
  torch::NoGradGuard no_grad;
  return fid_from_features(extractor.embed(real_images), extractor.embed(generated_images), options);
}

PcaMaps pca_visualize(const torch::Tensor& feature_grids) {
  if (feature_grids.dim() != 4) throw ValidationError("pca_shape", "expected B x H' x W' x C feature grids");
  const int64_t b = feature_grids.size(0), h = feature_grids.size(1), w = feature_grids.size(2);
  const int64_t c = feature_grids.size(3);
  if (b < 4) throw ValidationError("pca_group", "PCA visualization needs at least 4 images");
  auto x = feature_grids.detach().to(torch::kFloat64).reshape({b * h * w, c});
  auto centered = x - x.mean(0);
  auto cov = torch::matmul(centered.transpose(0, 1), centered) / static_cast<double>(std::max<int64_t>(1, x.size(0) - 1));
  auto [evals, evecs] = torch::linalg_eigh(0.5 * (cov + cov.transpose(0, 1)));  // ascending

  const double top = evals[c - 1].item<double>();
  const double tol = std::max(1e-12, 1e-9 * std::abs(top));
  PcaMaps out;
  std::vector<torch::Tensor> comps;
  for (int64_t k = 0; k < std::min<int64_t>(3, c); ++k) {
    const double ev = evals[c - 1 - k].item<double>();
    if (ev <= tol) break;
    auto v = evecs.select(1, c - 1 - k).clone();
    if (v[v.abs().argmax()].item<double>() < 0) v = -v;
    comps.push_back(v);
    out.explained_variance.push_back(ev);
  }
  out.components_found = static_cast<int64_t>(comps.size());
  auto rgb = torch::zeros({b * h * w, 3}, torch::kFloat64);
  if (!comps.empty()) {
    out.components = torch::stack(comps, 0);
    auto proj = torch::matmul(centered, out.components.transpose(0, 1));  // tokens x k
    for (int64_t k = 0; k < out.components_found; ++k) {
      auto col = proj.select(1, k);
      const double lo = col.min().item<double>(), hi = col.max().item<double>();
      rgb.select(1, k).copy_(hi > lo ? (col - lo) / (hi - lo) : torch::zeros_like(col));
    }
  } else {
    out.components = torch::zeros({0, c}, torch::kFloat64);
  }
  out.rgb = rgb.reshape({b, h, w, 3}).to(torch::kFloat32);
  return out;
}

double within_class_cosine(const torch::Tensor& features, const std::vector<int64_t>& labels) {
  if (features.size(0) != static_cast<int64_t>(labels.size())) {
    throw ValidationError("shape_match", "one label per feature row required");
  }
  auto f = features.detach().to(torch::kFloat64).flatten(1);
  f = f / f.norm(2, 1, true).clamp_min(1e-12);
  auto sim = torch::matmul(f, f.transpose(0, 1));
  auto acc = sim.accessor<double, 2>();
  double total = 0.0;
  int64_t pairs = 0;
  for (size_t i = 0; i < labels.size(); ++i) {
    for (size_t j = i + 1; j < labels.size(); ++j) {
      if (labels[i] != labels[j]) continue;
      total += acc[static_cast<int64_t>(i)][static_cast<int64_t>(j)];
      ++pairs;
    }
  }
  if (pairs == 0) throw ValidationError("class_pairs", "no class has two members");
  return total / static_cast<double>(pairs);
}

}  // namespace vqtok::metrics
