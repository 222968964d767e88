#pragma once

#include "vqtok/features.hpp"

#include <torch/torch.h>

#include <cstdint>
#include <map>
#include <string>

namespace vqtok::objectives {

torch::Tensor recon_loss(const torch::Tensor& x, const torch::Tensor& x_hat);

/// Sum over the extractor's maps of the mean squared feature distance.
torch::Tensor perceptual_loss(const torch::Tensor& x, const torch::Tensor& x_hat,
                              features::FeatureExtractor& extractor);

/// PatchGAN discriminator: one logit per receptive-field patch.
class DiscriminatorImpl : public torch::nn::Module {
 public:
  explicit DiscriminatorImpl(int64_t start_step = 0, int64_t channels = 32);
  torch::Tensor forward(const torch::Tensor& images);
  int64_t start_step() const { return start_step_; }
  void set_start_step(int64_t step) { start_step_ = step; }
  bool active(int64_t step) const { return step >= start_step_; }

 private:
  int64_t start_step_;
  torch::nn::Sequential net_{nullptr};
};
TORCH_MODULE(Discriminator);

/// 0.5 * (mean relu(1 - real) + mean relu(1 + fake)).
torch::Tensor hinge_d_loss(const torch::Tensor& real_logits, const torch::Tensor& fake_logits);
/// -mean(fake).
torch::Tensor hinge_g_loss(const torch::Tensor& fake_logits);

struct GanLosses {
  torch::Tensor gan_g;
  torch::Tensor gan_d;
};

/// Hinge losses for generator and discriminator, both exactly zero before
/// the discriminator's start step. The discriminator side sees x_hat detached.
GanLosses gan_losses(const torch::Tensor& x, const torch::Tensor& x_hat, Discriminator& disc, int64_t step);

struct LossWeights {
  double perceptual = 1.0;
  double gan = 0.1;
  double vq = 1.0;
  double entropy = 0.0;
  double sem_reg = 0.5;  // lambda
  double commitment = 0.25;

  std::map<std::string, double> as_map() const;
};

/// Component losses; an undefined tensor is an inactive term.
struct LossTerms {
  torch::Tensor recon, perceptual, gan_g, gan_d, vq, entropy, sem_reg;
};

struct LossBundle {
  double recon = 0, perceptual = 0, gan_g = 0, gan_d = 0, vq = 0, entropy = 0, sem_reg = 0, total = 0;
  std::map<std::string, double> weights;
  torch::Tensor total_tensor;  // differentiable generator objective
};

/// total = recon + w_p*perceptual + w_g*gan_g + w_vq*vq + w_e*entropy + lambda*sem_reg.
/// Terms whose weight is zero are left out of the sum entirely. Throws
/// NonFiniteLoss naming the first non-finite term.
LossBundle total_loss(const LossTerms& terms, const LossWeights& weights);

enum class ScheduleKind { cosine, wsd };

struct ScheduleConfig {
  ScheduleKind kind = ScheduleKind::cosine;
  double base_lr = 1e-4;
  double min_lr = 1e-5;
  double warmup_epochs = 0.0;
  int64_t steps_per_epoch = 1;
  double decay_ratio = 0.2;
  int64_t total_steps = 1;

  int64_t warmup_steps() const;
  /// First step of the linear decay phase (wsd only).
  int64_t decay_start() const;
  void validate() const;
};

ScheduleKind parse_schedule_kind(const std::string& text);
std::string to_string(ScheduleKind kind);

double lr_at(int64_t step, const ScheduleConfig& schedule);

}  // namespace vqtok::objectives
