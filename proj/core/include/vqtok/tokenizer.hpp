#pragma once

#include "vqtok/layers.hpp"
#include "vqtok/vq.hpp"

#include <torch/torch.h>

#include <cstdint>
#include <string>
#include <vector>

namespace vqtok::net {

enum class LatentKind { one_d, two_d };
enum class TierName { S, B, L, XL, XXL };

struct SizeTier {
  TierName name;
  int64_t blocks;
  int64_t heads;
  int64_t width;
};

/// Desk tier table. S/B/L keep the width/depth ratios of the full-size
/// tiers at widths 64/128/256; XL and XXL extend the table past the desk
/// budget.
SizeTier size_tier(TierName name);
const std::vector<TierName>& all_tiers();
TierName parse_tier(const std::string& text);
std::string to_string(TierName name);
LatentKind parse_latent_kind(const std::string& text);
std::string to_string(LatentKind kind);

struct TokenizerConfig {
  LatentKind latent_kind = LatentKind::one_d;
  int64_t image_size = 64;
  int64_t downsample = 8;
  int64_t token_count = 64;  // used by 1d; 2d derives it from the grid
  TierName encoder_tier = TierName::S;
  TierName decoder_tier = TierName::S;
  int64_t codebook_size = 1024;
  int64_t code_dim = 8;
  vq::GradMode grad_mode = vq::GradMode::rotation_trick;
  int64_t usage_window = vq::kDefaultUsageWindow;
  // Inverted (encoder > decoder) tiers are only for asymmetry ablations.
  bool allow_encoder_larger = false;

  int64_t grid() const { return image_size / downsample; }
  int64_t tokens() const { return latent_kind == LatentKind::two_d ? grid() * grid() : token_count; }

  /// Throws ValidationError naming the violated rule.
  void validate() const;
};

/// Fixed CNN stem widths shared by every tier.
inline constexpr int64_t kStemChannels = 32;
inline constexpr int64_t kCnnChannels = 64;

struct ParameterCount {
  int64_t encoder_cnn = 0;
  int64_t encoder_bridge = 0;  // patch embedding + projection to code dim
  int64_t encoder_transformer = 0;
  int64_t codebook = 0;
  int64_t decoder_bridge = 0;  // projection from code dim + unpatchify
  int64_t decoder_transformer = 0;
  int64_t decoder_cnn = 0;
  int64_t total() const {
    return encoder_cnn + encoder_bridge + encoder_transformer + codebook + decoder_bridge + decoder_transformer +
           decoder_cnn;
  }
};

/// Exact learnable-parameter count, computed from the architecture formulas.
ParameterCount parameter_count(const TokenizerConfig& config);

/// Transformer-only parameter count of one tier (pos embeddings, blocks, final norm).
int64_t transformer_parameter_count(const TokenizerConfig& config, TierName tier);

/// Multi-level average pooling of a B x H x W x C grid into T query vectors.
/// Level k splits the grid into 2^k regions, halving the width on odd levels
/// and the height on even ones; levels 0..L-1 (T = 2^L) are concatenated and
/// the level-0 global mean is repeated as the last query.
torch::Tensor init_1d_queries(const torch::Tensor& grid, int64_t token_count);

/// True when `grid_h x grid_w` supports the level scheme for `token_count`.
bool query_levels_fit(int64_t grid_h, int64_t grid_w, int64_t token_count);

class EncoderImpl : public torch::nn::Module {
 public:
  explicit EncoderImpl(const TokenizerConfig& config);

  /// Pre-quantization latents, B x T x D.
  torch::Tensor forward(const torch::Tensor& images);

  /// CNN output after patch embedding, B x H' x W' x width.
  torch::Tensor feature_grid(const torch::Tensor& images);

  torch::nn::Linear& to_code() { return to_code_; }

 private:
  TokenizerConfig config_;
  torch::nn::Sequential cnn_{nullptr};
  torch::nn::Conv2d patch_embed_{nullptr};
  torch::Tensor grid_pos_, query_pos_;
  torch::nn::ModuleList blocks_{nullptr};
  torch::nn::LayerNorm norm_{nullptr};
  torch::nn::Linear to_code_{nullptr};
};
TORCH_MODULE(Encoder);

struct DecodeOutput {
  torch::Tensor images;                 // B x 3 x H x W in [-1, 1]
  std::vector<torch::Tensor> features;  // one B x H'W' x width tensor per decoder layer
};

class DecoderImpl : public torch::nn::Module {
 public:
  explicit DecoderImpl(const TokenizerConfig& config);
  DecodeOutput forward(const torch::Tensor& quantized);
  int64_t depth() const { return static_cast<int64_t>(blocks_->size()); }
  int64_t width() const { return width_; }

 private:
  TokenizerConfig config_;
  int64_t width_;
  torch::nn::Linear from_code_{nullptr};
  torch::Tensor grid_pos_, latent_pos_;
  torch::nn::ModuleList blocks_{nullptr};
  torch::nn::LayerNorm norm_{nullptr};
  torch::nn::Linear unpatchify_{nullptr};
  torch::nn::Sequential cnn_{nullptr};
};
TORCH_MODULE(Decoder);

struct TokenizerOutput {
  vq::LatentBatch latents;
  torch::Tensor reconstruction;
  std::vector<torch::Tensor> decoder_features;
};

class TokenizerImpl : public torch::nn::Module {
 public:
  explicit TokenizerImpl(const TokenizerConfig& config);

  const TokenizerConfig& config() const { return config_; }

  torch::Tensor encode(const torch::Tensor& images);
  TokenizerOutput forward(const torch::Tensor& images, const vq::QuantizeOptions& options);
  DecodeOutput decode(const torch::Tensor& quantized) { return decoder->forward(quantized); }

  /// Token ids (B x T) without touching usage statistics.
  torch::Tensor tokenize(const torch::Tensor& images);
  DecodeOutput decode_indices(const torch::Tensor& indices);

  Encoder encoder{nullptr};
  vq::Codebook codebook{nullptr};
  Decoder decoder{nullptr};

 private:
  void check_images(const torch::Tensor& images) const;
  TokenizerConfig config_;
};
TORCH_MODULE(Tokenizer);

}  // namespace vqtok::net
