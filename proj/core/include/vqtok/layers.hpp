#pragma once

#include <torch/torch.h>

#include <cstdint>

namespace vqtok::layers {

class MultiHeadAttentionImpl : public torch::nn::Module {
 public:
  MultiHeadAttentionImpl(int64_t width, int64_t heads);

  /// x: B x Lq x W queries; context: B x Lk x W keys/values.
  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& context, bool causal = false);

 private:
  int64_t heads_;
  torch::nn::Linear query_{nullptr}, key_{nullptr}, value_{nullptr}, out_{nullptr};
};
TORCH_MODULE(MultiHeadAttention);

class MlpImpl : public torch::nn::Module {
 public:
  MlpImpl(int64_t width, int64_t hidden);
  torch::Tensor forward(const torch::Tensor& x);

 private:
  torch::nn::Linear fc1_{nullptr}, fc2_{nullptr};
};
TORCH_MODULE(Mlp);

/// Pre-norm self-attention block (ViT / GPT style).
class SelfAttentionBlockImpl : public torch::nn::Module {
 public:
  SelfAttentionBlockImpl(int64_t width, int64_t heads);
  torch::Tensor forward(const torch::Tensor& x, bool causal = false);

 private:
  torch::nn::LayerNorm norm1_{nullptr}, norm2_{nullptr};
  MultiHeadAttention attn_{nullptr};
  Mlp mlp_{nullptr};
};
TORCH_MODULE(SelfAttentionBlock);

/// Pre-norm Q-Former block: query self-attention, cross-attention into a
/// fixed context, then the feed-forward map.
class QueryBlockImpl : public torch::nn::Module {
 public:
  QueryBlockImpl(int64_t width, int64_t heads);
  torch::Tensor forward(const torch::Tensor& queries, const torch::Tensor& context);

 private:
  torch::nn::LayerNorm norm_self_{nullptr}, norm_cross_{nullptr}, norm_context_{nullptr}, norm_mlp_{nullptr};
  MultiHeadAttention self_attn_{nullptr}, cross_attn_{nullptr};
  Mlp mlp_{nullptr};
};
TORCH_MODULE(QueryBlock);

/// GroupNorm-SiLU-conv residual block.
class ResBlockImpl : public torch::nn::Module {
 public:
  ResBlockImpl(int64_t in_channels, int64_t out_channels);
  torch::Tensor forward(const torch::Tensor& x);

 private:
  torch::nn::GroupNorm norm1_{nullptr}, norm2_{nullptr};
  torch::nn::Conv2d conv1_{nullptr}, conv2_{nullptr}, skip_{nullptr};
};
TORCH_MODULE(ResBlock);

// Parameter counts of the blocks above, kept next to their definitions.
constexpr int64_t attention_params(int64_t w) { return 4 * (w * w + w); }
constexpr int64_t mlp_params(int64_t w, int64_t hidden) { return w * hidden + hidden + hidden * w + w; }
constexpr int64_t layer_norm_params(int64_t w) { return 2 * w; }
constexpr int64_t self_block_params(int64_t w) {
  return 2 * layer_norm_params(w) + attention_params(w) + mlp_params(w, 4 * w);
}
constexpr int64_t query_block_params(int64_t w) {
  return 4 * layer_norm_params(w) + 2 * attention_params(w) + mlp_params(w, 4 * w);
}
int64_t res_block_params(int64_t in_channels, int64_t out_channels);

int64_t count_parameters(const torch::nn::Module& module);

}  // namespace vqtok::layers
