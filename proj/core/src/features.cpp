#include "vqtok/features.hpp"

#include <cmath>

namespace vqtok::features {

FrozenConvExtractor::FrozenConvExtractor() : FrozenConvExtractor(Options{}) {}

FrozenConvExtractor::FrozenConvExtractor(Options options) : options_(std::move(options)) {
  auto gen = at::make_generator<at::CPUGeneratorImpl>(options_.seed);
  int64_t in = 3;
  for (int64_t out : options_.channels) {
    const double std = std::sqrt(2.0 / static_cast<double>(in * 9));
    weights_.push_back(at::normal(0.0, std, {out, in, 3, 3}, gen));
    biases_.push_back(torch::zeros({out}));
    in = out;
  }
}

std::vector<torch::Tensor> FrozenConvExtractor::feature_maps(const torch::Tensor& images) {
  std::vector<torch::Tensor> maps;
  auto x = images;
  for (size_t i = 0; i < weights_.size(); ++i) {
    const int64_t stride = i == 0 ? 1 : 2;
    x = torch::relu(torch::conv2d(x, weights_[i], biases_[i], stride, 1));
    maps.push_back(x);
  }
  return maps;
}

torch::Tensor FrozenConvExtractor::embed(const torch::Tensor& images) {
  auto last = feature_maps(images).back().flatten(2);
  return torch::cat({last.mean(2), last.std(2, /*unbiased=*/false)}, 1);
}

std::string FrozenConvExtractor::id() const { return "frozen_conv_" + std::to_string(options_.seed); }

std::shared_ptr<FeatureExtractor> default_extractor() { return std::make_shared<FrozenConvExtractor>(); }

}  // namespace vqtok::features
