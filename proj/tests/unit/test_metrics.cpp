#include "oracles.hpp"
#include "tensor_bridge.hpp"

#include "vqtok/corpus.hpp"
#include "vqtok/errors.hpp"
#include "vqtok/features.hpp"
#include "vqtok/metrics.hpp"

#include <doctest.h>

#include <cmath>
#include <random>

using namespace vqtok;

TEST_SUITE("eval_metrics") {

TEST_CASE("psnr closed forms") {
  auto x = torch::rand({3, 3, 16, 16}, torch::kFloat64);
  CHECK(metrics::psnr(x, x) == metrics::kPsnrCap);
  auto zero = torch::zeros({2, 3, 8, 8}, torch::kFloat64);
  CHECK(metrics::psnr(zero, zero + 0.1) == doctest::Approx(20.0).epsilon(1e-12));
  CHECK(metrics::psnr(zero, zero + 0.01) == doctest::Approx(40.0).epsilon(1e-12));
  CHECK_THROWS_AS(metrics::psnr(zero, torch::zeros({2, 3, 8, 9})), ValidationError);
}

TEST_CASE("psnr and ssim match the scalar oracles") {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 10; ++trial) {
    const int64_t b = 2, c = 3, h = 16, w = 20;
    const size_t n = static_cast<size_t>(b * c * h * w);
    auto xv = oracle::uniform(rng, n, 0.0, 1.0);
    auto yv = xv;
    auto noise = oracle::normal(rng, n, 0.05 * (trial + 1));
    for (size_t i = 0; i < n; ++i) yv[i] = std::clamp(yv[i] + noise[i], 0.0, 1.0);
    auto x = oracle::from_vec(xv, {b, c, h, w});
    auto y = oracle::from_vec(yv, {b, c, h, w});
    CHECK(metrics::psnr(x, y) == doctest::Approx(oracle::psnr(xv, yv, b, metrics::kPsnrCap)).epsilon(1e-10));
    CHECK(metrics::ssim(x, y) == doctest::Approx(oracle::ssim(xv, yv, b, c, h, w)).epsilon(1e-9));
  }
}

TEST_CASE("ssim of identical images is one and bounded otherwise") {
  auto x = torch::rand({2, 3, 16, 16}, torch::kFloat64);
  CHECK(metrics::ssim(x, x) == doctest::Approx(1.0).epsilon(1e-12));
  const double s = metrics::ssim(x, torch::rand({2, 3, 16, 16}, torch::kFloat64));
  CHECK(s < 0.5);
  CHECK(s >= -1.0);
  CHECK_THROWS_AS(metrics::ssim(torch::zeros({1, 1, 8, 8}), torch::zeros({1, 1, 8, 8})), ValidationError);
}

TEST_CASE("denormalize maps [-1, 1] to [0, 1] and clamps") {
  auto x = torch::tensor({-1.0, 0.0, 1.0, 3.0, -2.0});
  CHECK(torch::equal(metrics::denormalize(x), torch::tensor({0.0, 0.5, 1.0, 1.0, 0.0})));
}

TEST_CASE("gaussian stats match the oracle") {
  std::mt19937_64 rng(2);
  const int64_t n = 30, f = 5;
  auto rows = oracle::normal(rng, static_cast<size_t>(n * f));
  oracle::Vec mean, cov;
  oracle::gaussian_stats(rows, n, f, mean, cov);
  auto s = metrics::GaussianStats::from_features(oracle::from_vec(rows, {n, f}));
  CHECK(oracle::max_rel_error(oracle::to_vec(s.mean), mean, 1e-12) < 1e-12);
  CHECK(oracle::max_rel_error(oracle::to_vec(s.covariance), cov, 1e-12) < 1e-10);
  CHECK_THROWS_AS(metrics::GaussianStats::from_features(torch::zeros({1, 3})), ValidationError);
}

TEST_CASE("frechet closed forms") {
  metrics::GaussianStats a{torch::tensor({1.0, 2.0}, torch::kFloat64), torch::diag(torch::tensor({4.0, 9.0}, torch::kFloat64))};
  CHECK(metrics::frechet_distance(a, a) == doctest::Approx(0.0).epsilon(1e-12));
  // Diagonal covariances: |dmu|^2 + sum (sqrt(a_i) - sqrt(b_i))^2.
  metrics::GaussianStats b{torch::tensor({0.0, 0.0}, torch::kFloat64), torch::diag(torch::tensor({1.0, 16.0}, torch::kFloat64))};
  CHECK(metrics::frechet_distance(a, b) == doctest::Approx(5.0 + 1.0 + 1.0).epsilon(1e-12));
}

TEST_CASE("frechet matches the long-double oracle and is symmetric") {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    const int64_t f = 2 + trial % 6, n = 3 * f + 4;
    auto ra = oracle::normal(rng, static_cast<size_t>(n * f));
    auto rb = oracle::normal(rng, static_cast<size_t>(n * f), 1.5);
    oracle::Vec ma, ca, mb, cb;
    oracle::gaussian_stats(ra, n, f, ma, ca);
    oracle::gaussian_stats(rb, n, f, mb, cb);
    auto sa = metrics::GaussianStats::from_features(oracle::from_vec(ra, {n, f}));
    auto sb = metrics::GaussianStats::from_features(oracle::from_vec(rb, {n, f}));
    const double expected = oracle::frechet(ma, ca, mb, cb, f);
    CHECK(metrics::frechet_distance(sa, sb) == doctest::Approx(expected).epsilon(1e-8));
    CHECK(metrics::frechet_distance(sb, sa) == doctest::Approx(expected).epsilon(1e-8));
    CHECK(metrics::fid_from_features(oracle::from_vec(ra, {n, f}), oracle::from_vec(rb, {n, f})) ==
          doctest::Approx(expected).epsilon(1e-8));
  }
}

TEST_CASE("too few samples need shrinkage") {
  auto few = torch::randn({4, 8}, torch::kFloat64);
  metrics::FidOptions strict;
  strict.allow_shrinkage = false;
  CHECK_THROWS_AS(metrics::fid_from_features(few, few, strict), ValidationError);
  CHECK(metrics::fid_from_features(few, few) == doctest::Approx(0.0).epsilon(1e-9));
}

TEST_CASE("fid proxy separates noise from the data distribution") {
  harness::CorpusSpec spec;
  spec.count = 600;
  spec.seed = 4;
  auto images = harness::render_synthetic_shapes(spec).images;
  features::FrozenConvExtractor extractor;
  auto a = images.narrow(0, 0, 300), b = images.narrow(0, 300, 300);
  const double floor = metrics::fid_proxy(a, b, extractor);
  torch::manual_seed(4);
  auto noise = torch::rand({300, 3, 32, 32}) * 2.0 - 1.0;
  const double noisy = metrics::fid_proxy(a, noise, extractor);
  MESSAGE("fid floor " << floor << ", noise " << noisy);
  CHECK(floor >= 0.0);
  CHECK(noisy >= 10.0 * floor);
  CHECK(metrics::fid_proxy(a, a, extractor) == doctest::Approx(0.0).epsilon(1e-9));
}

TEST_CASE("pca recovers a planted subspace") {
  std::mt19937_64 rng(5);
  const int64_t b = 4, h = 6, w = 6, c = 12, tokens = b * h * w;
  // Orthonormal 3 x C basis from QR of a random matrix.
  auto basis = std::get<0>(torch::linalg_qr(oracle::from_vec(oracle::normal(rng, c * 3), {c, 3}))).transpose(0, 1);
  auto coeffs = oracle::from_vec(oracle::normal(rng, tokens * 3), {tokens, 3}) *
                torch::tensor({5.0, 3.0, 1.5}, torch::kFloat64);
  auto grids = torch::matmul(coeffs, basis).reshape({b, h, w, c}) + 0.7;
  auto maps = metrics::pca_visualize(grids);
  REQUIRE(maps.components_found == 3);
  auto cosines = torch::linalg_svdvals(torch::matmul(maps.components, basis.transpose(0, 1)));
  const double worst = std::acos(std::min(1.0, cosines.min().item<double>()));
  CHECK(worst < 1e-3);
  CHECK(maps.explained_variance[0] >= maps.explained_variance[1]);
  CHECK(maps.explained_variance[1] >= maps.explained_variance[2]);
  CHECK(maps.rgb.sizes() == std::vector<int64_t>{b, h, w, 3});
  CHECK(maps.rgb.min().item<double>() >= 0.0);
  CHECK(maps.rgb.max().item<double>() <= 1.0);
  for (int64_t k = 0; k < 3; ++k) {
    auto v = maps.components[k];
    CHECK(v[v.abs().argmax()].item<double>() > 0.0);
  }
}

TEST_CASE("pca reports fewer components for low-rank features") {
  std::mt19937_64 rng(6);
  auto dir = oracle::from_vec(oracle::normal(rng, 8), {1, 8});
  auto coeff = oracle::from_vec(oracle::normal(rng, 4 * 9), {36, 1});
  auto maps = metrics::pca_visualize(torch::matmul(coeff, dir).reshape({4, 3, 3, 8}));
  CHECK(maps.components_found == 1);
  CHECK(maps.rgb.select(3, 1).abs().max().item<double>() == 0.0);
  CHECK_THROWS_AS(metrics::pca_visualize(torch::zeros({3, 2, 2, 4})), ValidationError);
}

TEST_CASE("within-class cosine") {
  auto f = torch::tensor({{1.0, 0.0}, {2.0, 0.0}, {0.0, 1.0}, {1.0, 1.0}}, torch::kFloat64);
  CHECK(metrics::within_class_cosine(f, {0, 0, 1, 1}) == doctest::Approx((1.0 + std::sqrt(0.5)) / 2.0));
  CHECK_THROWS_AS(metrics::within_class_cosine(f, {0, 1, 2, 3}), ValidationError);

  std::mt19937_64 rng(7);
  const int64_t n = 12, d = 6;
  auto v = oracle::normal(rng, n * d);
  std::vector<int64_t> labels;
  for (int64_t i = 0; i < n; ++i) labels.push_back(i % 3);
  double total = 0.0;
  int64_t pairs = 0;
  for (int64_t i = 0; i < n; ++i) {
    for (int64_t j = i + 1; j < n; ++j) {
      if (labels[i] != labels[j]) continue;
      total -= oracle::negative_cosine(oracle::Vec(v.begin() + i * d, v.begin() + (i + 1) * d),
                                       oracle::Vec(v.begin() + j * d, v.begin() + (j + 1) * d), d, 1e-12);
      ++pairs;
    }
  }
  CHECK(metrics::within_class_cosine(oracle::from_vec(v, {n, d}), labels) ==
        doctest::Approx(total / static_cast<double>(pairs)).epsilon(1e-12));
}

}  // TEST_SUITE
