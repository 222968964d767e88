#include "vqtok/objectives.hpp"

#include "vqtok/errors.hpp"

#include <cmath>
#include <numbers>

namespace vqtok::objectives {

namespace {

void check_same_shape(const torch::Tensor& a, const torch::Tensor& b, const char* what) {
  if (!a.sizes().equals(b.sizes())) {
    throw ValidationError("shape_match", std::string(what) + " needs tensors of equal shape");
  }
}

}  // namespace

torch::Tensor recon_loss(const torch::Tensor& x, const torch::Tensor& x_hat) {
  check_same_shape(x, x_hat, "recon_loss");
  return (x - x_hat).pow(2).mean();
}

torch::Tensor perceptual_loss(const torch::Tensor& x, const torch::Tensor& x_hat,
                              features::FeatureExtractor& extractor) {
  check_same_shape(x, x_hat, "perceptual_loss");
  auto real = extractor.feature_maps(x);
  auto fake = extractor.feature_maps(x_hat);
  TORCH_CHECK(real.size() == fake.size() && !real.empty(), "extractor returned inconsistent maps");
  auto loss = (real[0].detach() - fake[0]).pow(2).mean();
  for (size_t k = 1; k < real.size(); ++k) loss = loss + (real[k].detach() - fake[k]).pow(2).mean();
  return loss;
}

DiscriminatorImpl::DiscriminatorImpl(int64_t start_step, int64_t channels) : start_step_(start_step) {
  using torch::nn::Conv2dOptions;
  net_ = torch::nn::Sequential(
      torch::nn::Conv2d(Conv2dOptions(3, channels, 4).stride(2).padding(1)),
      torch::nn::LeakyReLU(torch::nn::LeakyReLUOptions().negative_slope(0.2)),
      torch::nn::Conv2d(Conv2dOptions(channels, 2 * channels, 4).stride(2).padding(1)),
      torch::nn::GroupNorm(8, 2 * channels),
      torch::nn::LeakyReLU(torch::nn::LeakyReLUOptions().negative_slope(0.2)),
      torch::nn::Conv2d(Conv2dOptions(2 * channels, 1, 3).padding(1)));
  register_module("net", net_);
}

torch::Tensor DiscriminatorImpl::forward(const torch::Tensor& images) { return net_->forward(images); }

torch::Tensor hinge_d_loss(const torch::Tensor& real_logits, const torch::Tensor& fake_logits) {
  return 0.5 * (torch::relu(1.0 - real_logits).mean() + torch::relu(1.0 + fake_logits).mean());
}

torch::Tensor hinge_g_loss(const torch::Tensor& fake_logits) { return -fake_logits.mean(); }

GanLosses gan_losses(const torch::Tensor& x, const torch::Tensor& x_hat, Discriminator& disc, int64_t step) {
  if (!disc->active(step)) {
    return {torch::zeros({}), torch::zeros({})};
  }
  GanLosses out;
  out.gan_g = hinge_g_loss(disc->forward(x_hat));
  out.gan_d = hinge_d_loss(disc->forward(x.detach()), disc->forward(x_hat.detach()));
  return out;
}

std::map<std::string, double> LossWeights::as_map() const {
  return {{"perceptual", perceptual}, {"gan", gan},         {"vq", vq},
          {"entropy", entropy},       {"sem_reg", sem_reg}, {"commitment", commitment}};
}

LossBundle total_loss(const LossTerms& terms, const LossWeights& weights) {
  LossBundle bundle;
  bundle.weights = weights.as_map();
  if (!terms.recon.defined()) throw ValidationError("recon_required", "the reconstruction term is required");

  auto value_of = [](const torch::Tensor& t, const char* name) -> double {
    if (!t.defined()) return 0.0;
    const double v = t.detach().item<double>();
    if (!std::isfinite(v)) throw NonFiniteLoss(name, v);
    return v;
  };
  bundle.recon = value_of(terms.recon, "recon");
  bundle.perceptual = value_of(terms.perceptual, "perceptual");
  bundle.gan_g = value_of(terms.gan_g, "gan_g");
  bundle.gan_d = value_of(terms.gan_d, "gan_d");
  bundle.vq = value_of(terms.vq, "vq");
  bundle.entropy = value_of(terms.entropy, "entropy");
  bundle.sem_reg = value_of(terms.sem_reg, "sem_reg");

  auto total = terms.recon;
  auto add = [&total](const torch::Tensor& t, double w) {
    if (t.defined() && w != 0.0) total = total + w * t;
  };
  add(terms.perceptual, weights.perceptual);
  add(terms.gan_g, weights.gan);
  add(terms.vq, weights.vq);
  add(terms.entropy, weights.entropy);
  add(terms.sem_reg, weights.sem_reg);
  bundle.total = value_of(total, "total");
  bundle.total_tensor = total;
  return bundle;
}

ScheduleKind parse_schedule_kind(const std::string& text) {
  if (text == "cosine") return ScheduleKind::cosine;
  if (text == "wsd") return ScheduleKind::wsd;
  throw ValidationError("schedule_kind", "schedule must be 'cosine' or 'wsd', got '" + text + "'");
}

std::string to_string(ScheduleKind kind) { return kind == ScheduleKind::cosine ? "cosine" : "wsd"; }

int64_t ScheduleConfig::warmup_steps() const {
  return static_cast<int64_t>(std::llround(warmup_epochs * static_cast<double>(steps_per_epoch)));
}

int64_t ScheduleConfig::decay_start() const {
  return static_cast<int64_t>(std::llround((1.0 - decay_ratio) * static_cast<double>(total_steps)));
}

void ScheduleConfig::validate() const {
  if (!(min_lr > 0.0 && min_lr <= base_lr)) {
    throw ValidationError("lr_order", "need 0 < min_lr <= base_lr");
  }
  if (!(decay_ratio > 0.0 && decay_ratio < 1.0)) {
    throw ValidationError("decay_ratio", "decay_ratio must lie in (0, 1)");
  }
  if (total_steps < 1) throw ValidationError("total_steps", "total_steps must be >= 1");
  if (warmup_epochs < 0.0 || steps_per_epoch < 1) {
    throw ValidationError("warmup", "warmup_epochs must be >= 0 and steps_per_epoch >= 1");
  }
  if (warmup_steps() >= total_steps) throw ValidationError("warmup", "warmup must end before total_steps");
  if (kind == ScheduleKind::wsd && warmup_steps() > decay_start()) {
    throw ValidationError("warmup", "wsd warmup must end before the decay phase");
  }
}

double lr_at(int64_t step, const ScheduleConfig& s) {
  if (step < 0 || step > s.total_steps) {
    throw ValidationError("step_range", "step " + std::to_string(step) + " outside [0, " +
                                            std::to_string(s.total_steps) + "]");
  }
  const int64_t warmup = s.warmup_steps();
  if (step < warmup) {
    return s.base_lr * static_cast<double>(step) / static_cast<double>(warmup);
  }
  if (s.kind == ScheduleKind::cosine) {
    const double span = static_cast<double>(s.total_steps - warmup);
    const double progress = static_cast<double>(step - warmup) / span;
    return s.min_lr + (s.base_lr - s.min_lr) * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
  }
  const int64_t decay_start = s.decay_start();
  if (step <= decay_start) return s.base_lr;
  const double progress =
      static_cast<double>(step - decay_start) / static_cast<double>(s.total_steps - decay_start);
  return s.base_lr + (s.min_lr - s.base_lr) * progress;
}

}  // namespace vqtok::objectives
