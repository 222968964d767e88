#include "vqtok/layers.hpp"

#include <cmath>

namespace vqtok::layers {

namespace {
constexpr int64_t kGroups = 8;
}

MultiHeadAttentionImpl::MultiHeadAttentionImpl(int64_t width, int64_t heads) : heads_(heads) {
  TORCH_CHECK(width % heads == 0, "attention width must be divisible by heads");
  query_ = register_module("query", torch::nn::Linear(width, width));
  key_ = register_module("key", torch::nn::Linear(width, width));
  value_ = register_module("value", torch::nn::Linear(width, width));
  out_ = register_module("out", torch::nn::Linear(width, width));
}

torch::Tensor MultiHeadAttentionImpl::forward(const torch::Tensor& x, const torch::Tensor& context, bool causal) {
  const int64_t b = x.size(0), lq = x.size(1), w = x.size(2), lk = context.size(1);
  const int64_t hd = w / heads_;
  auto q = query_(x).view({b, lq, heads_, hd}).transpose(1, 2);
  auto k = key_(context).view({b, lk, heads_, hd}).transpose(1, 2);
  auto v = value_(context).view({b, lk, heads_, hd}).transpose(1, 2);
  auto scores = torch::matmul(q, k.transpose(-2, -1)) / std::sqrt(static_cast<double>(hd));
  if (causal) {
    auto mask = torch::ones({lq, lk}, torch::kBool).triu(1);
    scores = scores.masked_fill(mask, -std::numeric_limits<float>::infinity());
  }
  auto attn = torch::softmax(scores, -1);
  auto y = torch::matmul(attn, v).transpose(1, 2).reshape({b, lq, w});
  return out_(y);
}

MlpImpl::MlpImpl(int64_t width, int64_t hidden) {
  fc1_ = register_module("fc1", torch::nn::Linear(width, hidden));
  fc2_ = register_module("fc2", torch::nn::Linear(hidden, width));
}

torch::Tensor MlpImpl::forward(const torch::Tensor& x) { return fc2_(torch::gelu(fc1_(x))); }

SelfAttentionBlockImpl::SelfAttentionBlockImpl(int64_t width, int64_t heads) {
  norm1_ = register_module("norm1", torch::nn::LayerNorm(torch::nn::LayerNormOptions({width})));
  attn_ = register_module("attn", MultiHeadAttention(width, heads));
  norm2_ = register_module("norm2", torch::nn::LayerNorm(torch::nn::LayerNormOptions({width})));
  mlp_ = register_module("mlp", Mlp(width, 4 * width));
}

torch::Tensor SelfAttentionBlockImpl::forward(const torch::Tensor& x, bool causal) {
  auto h = norm1_(x);
  auto y = x + attn_(h, h, causal);
  return y + mlp_(norm2_(y));
}

QueryBlockImpl::QueryBlockImpl(int64_t width, int64_t heads) {
  auto ln = [width] { return torch::nn::LayerNorm(torch::nn::LayerNormOptions({width})); };
  norm_self_ = register_module("norm_self", ln());
  self_attn_ = register_module("self_attn", MultiHeadAttention(width, heads));
  norm_cross_ = register_module("norm_cross", ln());
  norm_context_ = register_module("norm_context", ln());
  cross_attn_ = register_module("cross_attn", MultiHeadAttention(width, heads));
  norm_mlp_ = register_module("norm_mlp", ln());
  mlp_ = register_module("mlp", Mlp(width, 4 * width));
}

torch::Tensor QueryBlockImpl::forward(const torch::Tensor& queries, const torch::Tensor& context) {
  auto h = norm_self_(queries);
  auto y = queries + self_attn_(h, h);
  y = y + cross_attn_(norm_cross_(y), norm_context_(context));
  return y + mlp_(norm_mlp_(y));
}

ResBlockImpl::ResBlockImpl(int64_t in_channels, int64_t out_channels) {
  using torch::nn::Conv2dOptions;
  norm1_ = register_module("norm1", torch::nn::GroupNorm(kGroups, in_channels));
  conv1_ = register_module("conv1", torch::nn::Conv2d(Conv2dOptions(in_channels, out_channels, 3).padding(1)));
  norm2_ = register_module("norm2", torch::nn::GroupNorm(kGroups, out_channels));
  conv2_ = register_module("conv2", torch::nn::Conv2d(Conv2dOptions(out_channels, out_channels, 3).padding(1)));
  if (in_channels != out_channels) {
    skip_ = register_module("skip", torch::nn::Conv2d(Conv2dOptions(in_channels, out_channels, 1)));
  }
}

torch::Tensor ResBlockImpl::forward(const torch::Tensor& x) {
  auto h = conv1_(torch::silu(norm1_(x)));
  h = conv2_(torch::silu(norm2_(h)));
  return (skip_ ? skip_(x) : x) + h;
}

int64_t res_block_params(int64_t in_channels, int64_t out_channels) {
  int64_t n = 2 * in_channels + 2 * out_channels;                   // group norms
  n += in_channels * out_channels * 9 + out_channels;               // conv1
  n += out_channels * out_channels * 9 + out_channels;              // conv2
  if (in_channels != out_channels) n += in_channels * out_channels + out_channels;
  return n;
}

int64_t count_parameters(const torch::nn::Module& module) {
  int64_t n = 0;
  for (const auto& p : module.parameters()) n += p.numel();
  return n;
}

}  // namespace vqtok::layers
