#include "vqtok/vq.hpp"

#include "vqtok/errors.hpp"

#include <algorithm>
#include <string>

namespace vqtok::vq {

namespace {

constexpr double kNormEps = 1e-12;
// Upper bound on elements materialized per distance chunk (M_chunk * N * D).
constexpr int64_t kDistanceChunkElems = int64_t{1} << 24;

void check_latents(const torch::Tensor& z, int64_t dim) {
  if (!z.defined() || z.dim() != 3) {
    throw ValidationError("latent_shape", "expected B x T x D latents");
  }
  if (z.numel() == 0) {
    throw ValidationError("empty_batch", "quantize received an empty batch");
  }
  if (z.size(2) != dim) {
    throw ValidationError("latent_dim", "latent dim " + std::to_string(z.size(2)) + " != code dim " +
                                            std::to_string(dim));
  }
  if (!torch::isfinite(z.detach()).all().item<bool>()) {
    throw ValidationError("finite_latents", "quantize received non-finite latents");
  }
}

}  // namespace

CodebookImpl::CodebookImpl(int64_t size, int64_t dim, int64_t usage_window) {
  if (size < 1 || dim < 1) {
    throw ValidationError("codebook_shape", "codebook needs N >= 1 and D >= 1");
  }
  const double bound = 1.0 / static_cast<double>(size);
  codes_ = register_parameter("codes", torch::empty({size, dim}).uniform_(-bound, bound));
  init_buffers(usage_window);
}

CodebookImpl::CodebookImpl(torch::Tensor codes, int64_t usage_window) {
  if (codes.dim() != 2 || codes.size(0) < 1 || codes.size(1) < 1) {
    throw ValidationError("codebook_shape", "codes must be an N x D matrix with N, D >= 1");
  }
  codes_ = register_parameter("codes", codes.to(torch::kFloat32).clone());
  init_buffers(usage_window);
}

void CodebookImpl::init_buffers(int64_t usage_window) {
  if (usage_window < 1) {
    throw ValidationError("usage_window", "usage window must be positive");
  }
  counter_ = register_buffer("usage_counter", torch::zeros({size()}, torch::kInt64));
  ring_ = register_buffer("usage_ring", torch::zeros({usage_window}, torch::kInt32));
  cursor_ = register_buffer("usage_cursor", torch::zeros({2}, torch::kInt64));
}

void CodebookImpl::record(const torch::Tensor& indices) {
  auto flat = indices.detach().reshape({-1}).to(torch::kInt64).contiguous();
  auto idx = flat.accessor<int64_t, 1>();
  auto counter = counter_.accessor<int64_t, 1>();
  auto ring = ring_.accessor<int32_t, 1>();
  auto cursor = cursor_.accessor<int64_t, 1>();
  const int64_t capacity = ring_.size(0);
  const int64_t n = size();
  for (int64_t i = 0; i < idx.size(0); ++i) {
    const int64_t code = idx[i];
    TORCH_CHECK(code >= 0 && code < n, "code index out of range");
    const int64_t slot = cursor[0];
    if (cursor[1] == capacity) {
      counter[ring[slot]] -= 1;
    } else {
      cursor[1] += 1;
    }
    ring[slot] = static_cast<int32_t>(code);
    counter[code] += 1;
    cursor[0] = (slot + 1) % capacity;
  }
}

int64_t CodebookImpl::observed() const { return cursor_[1].item<int64_t>(); }

std::vector<int64_t> CodebookImpl::usage_counter() const {
  auto c = counter_.contiguous();
  return {c.data_ptr<int64_t>(), c.data_ptr<int64_t>() + c.numel()};
}

double CodebookImpl::usage(int64_t window) const {
  if (window <= 0) {
    throw ValidationError("usage_window", "usage window must be positive");
  }
  const int64_t filled = observed();
  if (filled == 0) {
    throw ValidationError("usage_observations", "no code assignments observed yet");
  }
  const int64_t capacity = ring_.size(0);
  const int64_t span = std::min(window, filled);
  auto ring = ring_.accessor<int32_t, 1>();
  const int64_t next = cursor_[0].item<int64_t>();
  std::vector<char> hit(static_cast<size_t>(size()), 0);
  int64_t distinct = 0;
  for (int64_t k = 1; k <= span; ++k) {
    const int64_t slot = ((next - k) % capacity + capacity) % capacity;
    char& h = hit[static_cast<size_t>(ring[slot])];
    if (!h) {
      h = 1;
      ++distinct;
    }
  }
  return static_cast<double>(distinct) / static_cast<double>(size());
}

void CodebookImpl::reset_usage() {
  counter_.zero_();
  ring_.zero_();
  cursor_.zero_();
}

torch::Tensor squared_distances(const torch::Tensor& z_flat, const torch::Tensor& codes) {
  const int64_t m = z_flat.size(0);
  const int64_t per_row = codes.size(0) * codes.size(1);
  const int64_t chunk = std::max<int64_t>(1, kDistanceChunkElems / std::max<int64_t>(1, per_row));
  if (m <= chunk) {
    return (z_flat.unsqueeze(1) - codes.unsqueeze(0)).pow(2).sum(-1);
  }
  std::vector<torch::Tensor> parts;
  for (int64_t start = 0; start < m; start += chunk) {
    auto zc = z_flat.narrow(0, start, std::min(chunk, m - start));
    parts.push_back((zc.unsqueeze(1) - codes.unsqueeze(0)).pow(2).sum(-1));
  }
  return torch::cat(parts, 0);
}

torch::Tensor rotation_surrogate(const torch::Tensor& e, const torch::Tensor& q) {
  auto ed = e.detach();
  auto qd = q.detach();
  auto e_norm = ed.norm(2, -1, true).clamp_min(kNormEps);
  auto q_norm = qd.norm(2, -1, true).clamp_min(kNormEps);
  auto e_hat = ed / e_norm;
  auto q_hat = qd / q_norm;
  auto r = e_hat + q_hat;
  r = r / r.norm(2, -1, true).clamp_min(kNormEps);
  auto scale = q_norm / e_norm;
  // R e = e - 2 r (r.e) + 2 q_hat (e_hat.e), with r, q_hat, e_hat constant.
  auto rotated = e - 2.0 * r * (r * e).sum(-1, true) + 2.0 * q_hat * (e_hat * e).sum(-1, true);
  return scale * rotated;
}

LatentBatch quantize(const torch::Tensor& z, Codebook& codebook, const QuantizeOptions& options) {
  check_latents(z, codebook->dim());
  const auto& codes = codebook->codes();
  const int64_t b = z.size(0), t = z.size(1), d = z.size(2);
  auto z_flat = z.reshape({b * t, d});
  auto d2 = squared_distances(z_flat, codes);
  auto indices = d2.detach().argmin(1);

  auto selected = codes.index_select(0, indices);
  auto q = selected.detach();
  torch::Tensor surrogate =
      options.grad_mode == GradMode::straight_through ? z_flat : rotation_surrogate(z_flat, q);
  // Forward value is exactly q in both modes; only the gradient path differs.
  auto quantized = q + (surrogate - surrogate.detach());

  LatentBatch out;
  out.pre_quant = z;
  out.quantized = quantized.reshape({b, t, d});
  out.selected_codes = selected.reshape({b, t, d});
  out.indices = indices.reshape({b, t});
  if (options.with_posterior) {
    if (options.temperature <= 0.0) {
      throw ValidationError("temperature", "posterior temperature must be > 0");
    }
    auto logits = -d2.clamp_min(kNormEps).sqrt() / options.temperature;
    out.posterior = torch::softmax(logits, -1).reshape({b, t, codes.size(0)});
  }
  if (options.track_usage) {
    codebook->record(out.indices);
  }
  return out;
}

torch::Tensor code_posterior(const torch::Tensor& z, const torch::Tensor& codes, double temperature) {
  if (temperature <= 0.0) {
    throw ValidationError("temperature", "posterior temperature must be > 0");
  }
  if (z.dim() != 3 || z.size(2) != codes.size(1)) {
    throw ValidationError("latent_shape", "expected B x T x D latents matching the code dim");
  }
  auto d2 = squared_distances(z.reshape({-1, z.size(2)}), codes);
  auto logits = -d2.clamp_min(kNormEps).sqrt() / temperature;
  return torch::softmax(logits, -1).reshape({z.size(0), z.size(1), codes.size(0)});
}

torch::Tensor entropy_loss(const torch::Tensor& posterior) {
  if (!posterior.defined() || posterior.dim() < 1 || posterior.numel() == 0) {
    throw ValidationError("posterior_shape", "entropy loss needs a non-empty posterior");
  }
  auto p = posterior.reshape({-1, posterior.size(-1)});
  {
    auto pd = p.detach();
    if ((pd < 0).any().item<bool>()) {
      throw ValidationError("posterior_rows", "posterior has negative entries");
    }
    if ((pd.sum(1) <= 0).any().item<bool>()) {
      throw ValidationError("posterior_rows", "posterior has an all-zero (degenerate) row");
    }
  }
  constexpr double tiny = 1e-30;
  auto conditional = -(p * p.clamp_min(tiny).log()).sum(1).mean();
  auto marginal = p.mean(0);
  auto marginal_entropy = -(marginal * marginal.clamp_min(tiny).log()).sum();
  return conditional - marginal_entropy;
}

torch::Tensor vq_codebook_loss(const torch::Tensor& z, const torch::Tensor& selected_codes,
                               double commitment_weight) {
  if (!z.sizes().equals(selected_codes.sizes())) {
    throw ValidationError("shape_match", "vq loss needs z and quantized of equal shape");
  }
  auto codebook_term = (z.detach() - selected_codes).pow(2).sum(-1).mean();
  auto commitment_term = (z - selected_codes.detach()).pow(2).sum(-1).mean();
  return codebook_term + commitment_weight * commitment_term;
}

double codebook_usage(const Codebook& codebook, int64_t window) { return codebook->usage(window); }

}  // namespace vqtok::vq
