#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace vqtok::semantic {

enum class TeacherSource { precomputed_file, frozen_random, external_encoder };

TeacherSource parse_teacher_source(const std::string& text);
std::string to_string(TeacherSource source);

struct TeacherFeatures {
  torch::Tensor values;  // B x T_t x C_t, row-major over the grid
  int64_t grid_h = 0;    // 0 means "infer a square grid"
  int64_t grid_w = 0;
  TeacherSource source = TeacherSource::frozen_random;
};

struct SemRegConfig {
  double lambda = 0.5;
  int64_t align_layer = 3;  // 1-based decoder layer
  TeacherSource teacher = TeacherSource::frozen_random;
  int64_t teacher_channels = 32;
  uint64_t teacher_seed = 0x7eac4e5;
  std::string archive_path;  // precomputed_file source

  void validate(int64_t decoder_depth) const;
};

/// Seed-pinned random conv net standing in for a pretrained encoder.
/// Three 3x3 convs (stride 2, 2, 1) with ReLU, then a 3x3 box blur so each
/// patch feature summarizes its neighbourhood.
class FrozenRandomTeacher {
 public:
  FrozenRandomTeacher(int64_t channels = 32, uint64_t seed = 0x7eac4e5, bool zero_bias = true);

  /// B x T_t x C_t patch features with the grid shape filled in.
  TeacherFeatures forward(const torch::Tensor& images) const;
  /// Output of the first conv before its nonlinearity.
  torch::Tensor first_layer_preactivation(const torch::Tensor& images) const;

  std::string id() const;
  int64_t channels() const { return channels_; }
  std::vector<torch::Tensor> parameters() const;

 private:
  int64_t channels_;
  uint64_t seed_;
  std::vector<torch::Tensor> weights_, biases_;
};

/// Binary per-image feature archive:
///   magic "GTKF" | u32 version | u32 C_t | u32 grid_h | u32 grid_w |
///   u32 len + teacher id | u64 record count | u64 FNV-1a checksum of records,
/// followed by records (u32 len + id bytes, grid_h*grid_w*C_t float32).
/// All integers and floats are little-endian.
class FeatureArchive {
 public:
  FeatureArchive() = default;
  FeatureArchive(int64_t channels, int64_t grid_h, int64_t grid_w, std::string teacher_id);

  void put(const std::string& id, const torch::Tensor& features);  // T_t x C_t
  bool contains(const std::string& id) const { return records_.count(id) != 0; }
  torch::Tensor get(const std::string& id) const;
  size_t size() const { return records_.size(); }

  int64_t channels() const { return channels_; }
  int64_t grid_h() const { return grid_h_; }
  int64_t grid_w() const { return grid_w_; }
  const std::string& teacher_id() const { return teacher_id_; }

  /// Writes to a temp file in the same directory then renames over `path`.
  void write(const std::filesystem::path& path) const;
  static FeatureArchive read(const std::filesystem::path& path);

 private:
  int64_t channels_ = 0, grid_h_ = 0, grid_w_ = 0;
  std::string teacher_id_;
  std::map<std::string, std::vector<float>> records_;
};

using ExternalEncoder = std::function<TeacherFeatures(const torch::Tensor& images)>;

/// Resolves teacher features per image id. Computed features are cached in
/// memory and, when a cache path is set, persisted with `flush()`.
class TeacherFeatureStore {
 public:
  /// frozen_random source.
  TeacherFeatureStore(FrozenRandomTeacher teacher, std::filesystem::path cache_path = {});
  /// precomputed_file source.
  static TeacherFeatureStore from_archive(const std::filesystem::path& archive_path);
  /// external_encoder source.
  TeacherFeatureStore(ExternalEncoder encoder, std::string encoder_id, std::filesystem::path cache_path = {});

  /// Features for each id; `images` (B x 3 x H x W) feed computing sources.
  TeacherFeatures fetch(const std::vector<std::string>& ids, const torch::Tensor& images);
  void flush() const;
  TeacherSource source() const { return source_; }
  const FrozenRandomTeacher* frozen_teacher() const { return teacher_ ? &*teacher_ : nullptr; }

 private:
  TeacherFeatureStore() = default;

  TeacherSource source_ = TeacherSource::frozen_random;
  std::optional<FrozenRandomTeacher> teacher_;
  ExternalEncoder external_;
  std::string external_id_;
  std::filesystem::path cache_path_;
  std::optional<FeatureArchive> archive_;
  bool dirty_ = false;
};

struct AlignedPairs {
  torch::Tensor decoder;  // B x T x width
  torch::Tensor teacher;  // B x T x C_t
};

/// Bilinearly resamples the teacher grid to the decoder's square grid
/// (cell-centre sampling), keeping row-major token order.
AlignedPairs align_grids(const torch::Tensor& decoder_features, const TeacherFeatures& teacher);

/// Two-layer feed-forward map from decoder width to teacher channels.
class ProjectorImpl : public torch::nn::Module {
 public:
  ProjectorImpl(int64_t width, int64_t teacher_channels, int64_t hidden = 0);
  torch::Tensor forward(const torch::Tensor& x);

 private:
  torch::nn::Linear fc1_{nullptr}, fc2_{nullptr};
};
TORCH_MODULE(Projector);

inline constexpr double kCosineEps = 1e-8;

/// -mean over all leading dims of cos(a, b) along the last dim.
torch::Tensor negative_cosine(const torch::Tensor& a, const torch::Tensor& b);

/// -mean_{b,t} cos(projector(decoder), teacher).
torch::Tensor semantic_reg_loss(const torch::Tensor& decoder_tokens, const torch::Tensor& teacher_tokens,
                                Projector& projector);

}  // namespace vqtok::semantic
