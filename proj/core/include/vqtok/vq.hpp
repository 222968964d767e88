#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <vector>

namespace vqtok::vq {

inline constexpr int64_t kDefaultUsageWindow = 65536;

enum class GradMode { straight_through, rotation_trick };

/// Learnable N x D code matrix plus a sliding window of the most recent
/// assignments. The window lives in registered buffers so it travels with
/// the module's state through checkpoints.
class CodebookImpl : public torch::nn::Module {
 public:
  CodebookImpl(int64_t size, int64_t dim, int64_t usage_window = kDefaultUsageWindow);
  /// Wraps explicit codes (N x D). Used by tests and by checkpoint restore.
  explicit CodebookImpl(torch::Tensor codes, int64_t usage_window = kDefaultUsageWindow);

  int64_t size() const { return codes_.size(0); }
  int64_t dim() const { return codes_.size(1); }
  int64_t usage_window() const { return ring_.size(0); }

  const torch::Tensor& codes() const { return codes_; }
  torch::Tensor& codes() { return codes_; }

  /// Appends flattened code indices to the usage window.
  void record(const torch::Tensor& indices);

  /// Number of assignments currently held by the window.
  int64_t observed() const;

  /// Per-code hit counts over the current window.
  std::vector<int64_t> usage_counter() const;

  /// Fraction of codes hit at least once among the latest `window` assignments.
  double usage(int64_t window) const;

  void reset_usage();

 private:
  void init_buffers(int64_t usage_window);

  torch::Tensor codes_;
  torch::Tensor counter_;  // int64 [N]
  torch::Tensor ring_;     // int32 [W]
  torch::Tensor cursor_;   // int64 [2]: next write slot, filled slots
};
TORCH_MODULE(Codebook);

struct LatentBatch {
  torch::Tensor pre_quant;       // B x T x D, z
  torch::Tensor quantized;       // B x T x D, forward value == selected codes, grad routed to z
  torch::Tensor selected_codes;  // B x T x D, codes[indices] with grad routed to the codebook
  torch::Tensor indices;         // B x T int64
  torch::Tensor posterior;       // B x T x N, undefined unless requested
};

struct QuantizeOptions {
  GradMode grad_mode = GradMode::straight_through;
  bool with_posterior = true;
  double temperature = 1.0;
  bool track_usage = true;
};

/// Nearest-code assignment under the Euclidean metric. Ties resolve to the
/// lowest code index.
LatentBatch quantize(const torch::Tensor& z, Codebook& codebook, const QuantizeOptions& options = {});

/// Squared distances (M x N) between flattened latents and every code.
torch::Tensor squared_distances(const torch::Tensor& z_flat, const torch::Tensor& codes);

/// softmax_i(-||z - c_i|| / temperature), shape B x T x N.
torch::Tensor code_posterior(const torch::Tensor& z, const torch::Tensor& codes, double temperature = 1.0);

/// E_z[H(zhat|z)] - H(zhat) in nats, marginal estimated over the given batch.
torch::Tensor entropy_loss(const torch::Tensor& posterior);

/// ||sg(z) - zhat||^2 + commitment * ||z - sg(zhat)||^2, squared norms summed
/// over the code dimension and averaged over tokens.
torch::Tensor vq_codebook_loss(const torch::Tensor& z, const torch::Tensor& selected_codes,
                               double commitment_weight = 0.25);

/// Usage fraction over the latest `window` assignments.
double codebook_usage(const Codebook& codebook, int64_t window = kDefaultUsageWindow);

/// Rotation-trick surrogate lambda * R * e with lambda and R held constant.
/// Its forward value equals q up to rounding; quantize() only uses its gradient.
torch::Tensor rotation_surrogate(const torch::Tensor& e, const torch::Tensor& q);

}  // namespace vqtok::vq
