#include "vqtok/tokenizer.hpp"

#include "vqtok/errors.hpp"

#include <algorithm>
#include <bit>
#include <cmath>

namespace vqtok::net {

namespace {

constexpr double kCodeNormEps = 1e-12;

bool is_pow2(int64_t v) { return v > 0 && std::has_single_bit(static_cast<uint64_t>(v)); }

int64_t log2i(int64_t v) { return static_cast<int64_t>(std::bit_width(static_cast<uint64_t>(v))) - 1; }

int64_t cnn_stages(const TokenizerConfig& c) { return log2i(c.downsample) - 1; }

/// Sin-cos table of `positions` (L) over `width` channels: L x width.
torch::Tensor sincos(const torch::Tensor& positions, int64_t width) {
  const int64_t half = width / 2;
  auto freq = torch::exp(torch::arange(half, torch::kFloat64) * (-std::log(10000.0) / static_cast<double>(half)));
  auto angles = positions.to(torch::kFloat64).unsqueeze(1) * freq.unsqueeze(0);
  return torch::cat({angles.sin(), angles.cos()}, 1).to(torch::kFloat32);
}

/// Learned 1D position table, initialized with sin-cos values.
torch::Tensor pos_embedding(int64_t length, int64_t width) {
  return sincos(torch::arange(length), width).unsqueeze(0).contiguous();
}

/// Learned g x g grid position table (row-major), initialized with 2D sin-cos
/// values: half of the channels encode the row, half the column.
torch::Tensor grid_pos_embedding(int64_t g, int64_t width) {
  auto cells = torch::arange(g * g);
  auto rows = sincos(torch::div(cells, g, "floor"), width / 2);
  auto cols = sincos(torch::remainder(cells, g), width / 2);
  return torch::cat({rows, cols}, 1).unsqueeze(0).contiguous();
}

torch::nn::Conv2d conv3x3(int64_t in, int64_t out, int64_t stride = 1) {
  return torch::nn::Conv2d(torch::nn::Conv2dOptions(in, out, 3).stride(stride).padding(1));
}

int64_t conv_params(int64_t in, int64_t out, int64_t k) { return in * out * k * k + out; }

int64_t encoder_cnn_params(const TokenizerConfig& c) {
  int64_t n = conv_params(3, kStemChannels, 3);
  int64_t ch = kStemChannels;
  for (int64_t s = 0; s < cnn_stages(c); ++s) {
    n += layers::res_block_params(ch, ch) + conv_params(ch, kCnnChannels, 3);
    ch = kCnnChannels;
  }
  return n + layers::res_block_params(ch, kCnnChannels);
}

int64_t decoder_cnn_params(const TokenizerConfig& c) {
  const int64_t stages = cnn_stages(c);
  int64_t n = layers::res_block_params(kCnnChannels, kCnnChannels);
  int64_t ch = kCnnChannels;
  for (int64_t s = 0; s < stages; ++s) {
    const int64_t next = (s + 1 == stages) ? kStemChannels : kCnnChannels;
    n += conv_params(ch, next, 3) + layers::res_block_params(next, next);
    ch = next;
  }
  return n + 2 * ch + conv_params(ch, 3, 3);
}

}  // namespace

SizeTier size_tier(TierName name) {
  switch (name) {
    case TierName::S: return {name, 2, 2, 64};
    case TierName::B: return {name, 4, 4, 128};
    case TierName::L: return {name, 6, 8, 256};
    case TierName::XL: return {name, 8, 12, 384};
    case TierName::XXL: return {name, 10, 16, 512};
  }
  throw ValidationError("tier", "unknown tier");
}

const std::vector<TierName>& all_tiers() {
  static const std::vector<TierName> tiers{TierName::S, TierName::B, TierName::L, TierName::XL, TierName::XXL};
  return tiers;
}

TierName parse_tier(const std::string& text) {
  for (auto t : all_tiers()) {
    if (to_string(t) == text) return t;
  }
  throw ValidationError("tier", "unknown tier '" + text + "' (expected S, B, L, XL or XXL)");
}

std::string to_string(TierName name) {
  switch (name) {
    case TierName::S: return "S";
    case TierName::B: return "B";
    case TierName::L: return "L";
    case TierName::XL: return "XL";
    case TierName::XXL: return "XXL";
  }
  return "?";
}

LatentKind parse_latent_kind(const std::string& text) {
  if (text == "1d") return LatentKind::one_d;
  if (text == "2d") return LatentKind::two_d;
  throw ValidationError("latent_kind", "latent kind must be '1d' or '2d', got '" + text + "'");
}

std::string to_string(LatentKind kind) { return kind == LatentKind::one_d ? "1d" : "2d"; }

bool query_levels_fit(int64_t grid_h, int64_t grid_w, int64_t token_count) {
  if (!is_pow2(token_count)) return false;
  const int64_t levels = log2i(token_count);
  if (levels == 0) return true;
  const int64_t last = levels - 1;
  const int64_t wdiv = int64_t{1} << ((last + 1) / 2);
  const int64_t hdiv = int64_t{1} << (last / 2);
  return grid_w % wdiv == 0 && grid_h % hdiv == 0;
}

void TokenizerConfig::validate() const {
  if (image_size <= 0) throw ValidationError("image_size", "image_size must be positive");
  if (!is_pow2(downsample) || downsample < 2) {
    throw ValidationError("downsample_ratio", "downsample ratio p must be a power of two >= 2");
  }
  if (image_size % downsample != 0) {
    throw ValidationError("image_divisible", "image_size " + std::to_string(image_size) +
                                                 " is not divisible by downsample ratio " +
                                                 std::to_string(downsample));
  }
  if (codebook_size < 1 || code_dim < 1) {
    throw ValidationError("codebook_shape", "codebook needs N >= 1 and D >= 1");
  }
  if (latent_kind == LatentKind::one_d) {
    if (!is_pow2(token_count)) {
      throw ValidationError("token_count_pow2", "1d token count must be a power of two");
    }
    if (!query_levels_fit(grid(), grid(), token_count)) {
      throw ValidationError("query_levels", "feature grid " + std::to_string(grid()) +
                                                " cannot be split into the pooling levels for T=" +
                                                std::to_string(token_count));
    }
  }
  for (auto t : {encoder_tier, decoder_tier}) {
    auto tier = size_tier(t);
    if (tier.width % tier.heads != 0) throw ValidationError("tier_heads", "tier width must divide by heads");
  }
  if (!allow_encoder_larger &&
      transformer_parameter_count(*this, decoder_tier) < transformer_parameter_count(*this, encoder_tier)) {
    throw ValidationError("asymmetry_rule", "decoder tier " + to_string(decoder_tier) +
                                                " has fewer parameters than encoder tier " +
                                                to_string(encoder_tier) + "; decoders must be at least as large");
  }
}

int64_t transformer_parameter_count(const TokenizerConfig& c, TierName name) {
  const auto tier = size_tier(name);
  const int64_t w = tier.width;
  const int64_t cells = c.grid() * c.grid();
  int64_t n = layers::layer_norm_params(w);
  if (c.latent_kind == LatentKind::two_d) {
    n += cells * w + tier.blocks * layers::self_block_params(w);
  } else {
    n += (cells + c.token_count) * w + tier.blocks * layers::query_block_params(w);
  }
  return n;
}

ParameterCount parameter_count(const TokenizerConfig& c) {
  const int64_t we = size_tier(c.encoder_tier).width;
  const int64_t wd = size_tier(c.decoder_tier).width;
  ParameterCount out;
  out.encoder_cnn = encoder_cnn_params(c);
  out.encoder_bridge = conv_params(kCnnChannels, we, 2) + we * c.code_dim + c.code_dim;
  out.encoder_transformer = transformer_parameter_count(c, c.encoder_tier);
  out.codebook = c.codebook_size * c.code_dim;
  out.decoder_bridge = c.code_dim * wd + wd + wd * 4 * kCnnChannels + 4 * kCnnChannels;
  out.decoder_transformer = transformer_parameter_count(c, c.decoder_tier);
  out.decoder_cnn = decoder_cnn_params(c);
  return out;
}

torch::Tensor init_1d_queries(const torch::Tensor& grid, int64_t token_count) {
  if (!is_pow2(token_count)) {
    throw ValidationError("token_count_pow2", "query count must be a power of two");
  }
  if (grid.dim() != 4) throw ValidationError("grid_shape", "expected a B x H x W x C grid");
  const int64_t b = grid.size(0), h = grid.size(1), w = grid.size(2), c = grid.size(3);
  if (!query_levels_fit(h, w, token_count)) {
    throw ValidationError("query_levels", "grid is not divisible by the pooling levels");
  }
  const int64_t levels = log2i(token_count);
  std::vector<torch::Tensor> pooled;
  auto global = grid.mean({1, 2}).unsqueeze(1);
  for (int64_t k = 0; k < levels; ++k) {
    const int64_t wdiv = int64_t{1} << ((k + 1) / 2);
    const int64_t hdiv = int64_t{1} << (k / 2);
    auto regions = grid.reshape({b, hdiv, h / hdiv, wdiv, w / wdiv, c}).mean({2, 4});
    pooled.push_back(regions.reshape({b, hdiv * wdiv, c}));
  }
  pooled.push_back(global);
  return torch::cat(pooled, 1);
}

EncoderImpl::EncoderImpl(const TokenizerConfig& config) : config_(config) {
  const auto tier = size_tier(config.encoder_tier);
  cnn_ = torch::nn::Sequential();
  cnn_->push_back(conv3x3(3, kStemChannels));
  int64_t ch = kStemChannels;
  for (int64_t s = 0; s < cnn_stages(config); ++s) {
    cnn_->push_back(layers::ResBlock(ch, ch));
    cnn_->push_back(conv3x3(ch, kCnnChannels, 2));
    ch = kCnnChannels;
  }
  cnn_->push_back(layers::ResBlock(ch, kCnnChannels));
  register_module("cnn", cnn_);

  patch_embed_ = register_module(
      "patch_embed", torch::nn::Conv2d(torch::nn::Conv2dOptions(kCnnChannels, tier.width, 2).stride(2)));
  grid_pos_ = register_parameter("grid_pos", grid_pos_embedding(config.grid(), tier.width));
  blocks_ = torch::nn::ModuleList();
  for (int64_t i = 0; i < tier.blocks; ++i) {
    if (config.latent_kind == LatentKind::two_d) {
      blocks_->push_back(layers::SelfAttentionBlock(tier.width, tier.heads));
    } else {
      blocks_->push_back(layers::QueryBlock(tier.width, tier.heads));
    }
  }
  register_module("blocks", blocks_);
  if (config.latent_kind == LatentKind::one_d) {
    query_pos_ = register_parameter("query_pos", pos_embedding(config.token_count, tier.width));
  }
  norm_ = register_module("norm", torch::nn::LayerNorm(torch::nn::LayerNormOptions({tier.width})));
  to_code_ = register_module("to_code", torch::nn::Linear(tier.width, config.code_dim));
}

torch::Tensor EncoderImpl::feature_grid(const torch::Tensor& images) {
  auto f = patch_embed_(cnn_->forward(images));  // B x W x H' x W'
  return f.permute({0, 2, 3, 1}).contiguous();
}

torch::Tensor EncoderImpl::forward(const torch::Tensor& images) {
  auto grid = feature_grid(images);
  const int64_t b = grid.size(0), width = grid.size(3);
  auto tokens = grid.reshape({b, -1, width}) + grid_pos_;
  torch::Tensor x;
  if (config_.latent_kind == LatentKind::two_d) {
    x = tokens;
    for (auto& block : *blocks_) x = block->as<layers::SelfAttentionBlock>()->forward(x);
  } else {
    x = init_1d_queries(grid, config_.token_count) + query_pos_;
    for (auto& block : *blocks_) x = block->as<layers::QueryBlock>()->forward(x, tokens);
  }
  // Latents are emitted at the codebook's initialization scale.
  return to_code_(norm_(x)) / static_cast<double>(config_.codebook_size);
}

DecoderImpl::DecoderImpl(const TokenizerConfig& config) : config_(config) {
  const auto tier = size_tier(config.decoder_tier);
  width_ = tier.width;
  from_code_ = register_module("from_code", torch::nn::Linear(config.code_dim, tier.width));
  grid_pos_ = register_parameter("grid_pos", grid_pos_embedding(config.grid(), tier.width));
  blocks_ = torch::nn::ModuleList();
  for (int64_t i = 0; i < tier.blocks; ++i) {
    if (config.latent_kind == LatentKind::two_d) {
      blocks_->push_back(layers::SelfAttentionBlock(tier.width, tier.heads));
    } else {
      blocks_->push_back(layers::QueryBlock(tier.width, tier.heads));
    }
  }
  register_module("blocks", blocks_);
  if (config.latent_kind == LatentKind::one_d) {
    latent_pos_ = register_parameter("latent_pos", pos_embedding(config.token_count, tier.width));
  }
  norm_ = register_module("norm", torch::nn::LayerNorm(torch::nn::LayerNormOptions({tier.width})));
  unpatchify_ = register_module("unpatchify", torch::nn::Linear(tier.width, 4 * kCnnChannels));

  cnn_ = torch::nn::Sequential();
  cnn_->push_back(layers::ResBlock(kCnnChannels, kCnnChannels));
  const int64_t stages = cnn_stages(config);
  int64_t ch = kCnnChannels;
  for (int64_t s = 0; s < stages; ++s) {
    const int64_t next = (s + 1 == stages) ? kStemChannels : kCnnChannels;
    cnn_->push_back(torch::nn::Upsample(
        torch::nn::UpsampleOptions().scale_factor(std::vector<double>{2.0, 2.0}).mode(torch::kNearest)));
    cnn_->push_back(conv3x3(ch, next));
    cnn_->push_back(layers::ResBlock(next, next));
    ch = next;
  }
  cnn_->push_back(torch::nn::GroupNorm(8, ch));
  cnn_->push_back(torch::nn::SiLU());
  cnn_->push_back(conv3x3(ch, 3));
  cnn_->push_back(torch::nn::Tanh());
  register_module("cnn", cnn_);
}

DecodeOutput DecoderImpl::forward(const torch::Tensor& quantized) {
  if (quantized.dim() != 3 || quantized.size(1) != config_.tokens() || quantized.size(2) != config_.code_dim) {
    throw ValidationError("token_count_match", "decoder expects B x " + std::to_string(config_.tokens()) + " x " +
                                                   std::to_string(config_.code_dim) + " latents");
  }
  const int64_t b = quantized.size(0);
  const int64_t g = config_.grid();
  // Codes enter the decoder RMS-normalized.
  auto latents = from_code_(quantized * torch::rsqrt(quantized.square().mean(-1, true) + kCodeNormEps));
  DecodeOutput out;
  torch::Tensor x;
  if (config_.latent_kind == LatentKind::two_d) {
    x = latents + grid_pos_;
    for (auto& block : *blocks_) {
      x = block->as<layers::SelfAttentionBlock>()->forward(x);
      out.features.push_back(x);
    }
  } else {
    auto context = latents + latent_pos_;
    // Every grid query starts from the first latent token.
    x = context.narrow(1, 0, 1).expand({b, g * g, width_}) + grid_pos_;
    for (auto& block : *blocks_) {
      x = block->as<layers::QueryBlock>()->forward(x, context);
      out.features.push_back(x);
    }
  }
  auto patches = unpatchify_(norm_(x));  // B x g*g x 4C
  auto fmap = patches.reshape({b, g, g, kCnnChannels, 2, 2})
                  .permute({0, 3, 1, 4, 2, 5})
                  .reshape({b, kCnnChannels, 2 * g, 2 * g});
  out.images = cnn_->forward(fmap);
  return out;
}

TokenizerImpl::TokenizerImpl(const TokenizerConfig& config) : config_(config) {
  config.validate();
  encoder = register_module("encoder", Encoder(config));
  codebook = register_module("codebook", vq::Codebook(config.codebook_size, config.code_dim, config.usage_window));
  decoder = register_module("decoder", Decoder(config));
}

void TokenizerImpl::check_images(const torch::Tensor& images) const {
  if (images.dim() != 4 || images.size(1) != 3 || images.size(2) != config_.image_size ||
      images.size(3) != config_.image_size) {
    throw ValidationError("image_resolution", "expected B x 3 x " + std::to_string(config_.image_size) + " x " +
                                                  std::to_string(config_.image_size) + " images");
  }
}

torch::Tensor TokenizerImpl::encode(const torch::Tensor& images) {
  check_images(images);
  return encoder->forward(images);
}

TokenizerOutput TokenizerImpl::forward(const torch::Tensor& images, const vq::QuantizeOptions& options) {
  TokenizerOutput out;
  out.latents = vq::quantize(encode(images), codebook, options);
  auto decoded = decoder->forward(out.latents.quantized);
  out.reconstruction = std::move(decoded.images);
  out.decoder_features = std::move(decoded.features);
  return out;
}

torch::Tensor TokenizerImpl::tokenize(const torch::Tensor& images) {
  vq::QuantizeOptions opts;
  opts.with_posterior = false;
  opts.track_usage = false;
  return vq::quantize(encode(images), codebook, opts).indices;
}

DecodeOutput TokenizerImpl::decode_indices(const torch::Tensor& indices) {
  auto codes = codebook->codes().index_select(0, indices.reshape({-1}));
  return decoder->forward(codes.reshape({indices.size(0), indices.size(1), config_.code_dim}));
}

}  // namespace vqtok::net
