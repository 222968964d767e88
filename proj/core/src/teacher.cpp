#include "vqtok/teacher.hpp"

#include "vqtok/binary_io.hpp"
#include "vqtok/errors.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

namespace vqtok::semantic {

namespace {

constexpr char kArchiveMagic[4] = {'G', 'T', 'K', 'F'};
constexpr uint32_t kArchiveVersion = 1;

int64_t square_side(int64_t tokens) {
  const auto side = static_cast<int64_t>(std::llround(std::sqrt(static_cast<double>(tokens))));
  return side * side == tokens ? side : -1;
}

}  // namespace

TeacherSource parse_teacher_source(const std::string& text) {
  if (text == "precomputed_file") return TeacherSource::precomputed_file;
  if (text == "frozen_random") return TeacherSource::frozen_random;
  if (text == "external_encoder") return TeacherSource::external_encoder;
  throw ValidationError("teacher_source", "unknown teacher source '" + text + "'");
}

std::string to_string(TeacherSource source) {
  switch (source) {
    case TeacherSource::precomputed_file: return "precomputed_file";
    case TeacherSource::frozen_random: return "frozen_random";
    case TeacherSource::external_encoder: return "external_encoder";
  }
  return "?";
}

void SemRegConfig::validate(int64_t decoder_depth) const {
  if (lambda < 0.0 || !std::isfinite(lambda)) throw ValidationError("sem_lambda", "lambda must be finite and >= 0");
  if (align_layer < 1 || align_layer > decoder_depth) {
    throw ValidationError("align_layer", "align layer " + std::to_string(align_layer) + " outside [1, " +
                                             std::to_string(decoder_depth) + "] (decoder depth)");
  }
  if (teacher_channels < 1) throw ValidationError("teacher_channels", "teacher channels must be >= 1");
  if (teacher == TeacherSource::precomputed_file && archive_path.empty()) {
    throw ValidationError("teacher_archive", "precomputed_file teacher needs an archive path");
  }
}

FrozenRandomTeacher::FrozenRandomTeacher(int64_t channels, uint64_t seed, bool zero_bias)
    : channels_(channels), seed_(seed) {
  auto gen = at::make_generator<at::CPUGeneratorImpl>(seed);
  const int64_t widths[3] = {16, 32, channels};
  int64_t in = 3;
  for (int64_t out : widths) {
    const double std = std::sqrt(2.0 / static_cast<double>(in * 9));
    weights_.push_back(at::normal(0.0, std, {out, in, 3, 3}, gen));
    biases_.push_back(zero_bias ? torch::zeros({out}) : at::normal(0.0, 0.1, {out}, gen));
    in = out;
  }
}

torch::Tensor FrozenRandomTeacher::first_layer_preactivation(const torch::Tensor& images) const {
  return torch::conv2d(images, weights_[0], biases_[0], 2, 1);
}

TeacherFeatures FrozenRandomTeacher::forward(const torch::Tensor& images) const {
  torch::NoGradGuard no_grad;
  auto x = torch::relu(first_layer_preactivation(images));
  x = torch::relu(torch::conv2d(x, weights_[1], biases_[1], 2, 1));
  x = torch::relu(torch::conv2d(x, weights_[2], biases_[2], 1, 1));
  x = torch::avg_pool2d(x, 3, 1, 1, /*ceil_mode=*/false, /*count_include_pad=*/false);
  TeacherFeatures out;
  out.grid_h = x.size(2);
  out.grid_w = x.size(3);
  out.values = x.flatten(2).transpose(1, 2).contiguous();
  out.source = TeacherSource::frozen_random;
  return out;
}

std::string FrozenRandomTeacher::id() const {
  return "frozen_random_c" + std::to_string(channels_) + "_s" + std::to_string(seed_);
}

std::vector<torch::Tensor> FrozenRandomTeacher::parameters() const {
  std::vector<torch::Tensor> all = weights_;
  all.insert(all.end(), biases_.begin(), biases_.end());
  return all;
}

FeatureArchive::FeatureArchive(int64_t channels, int64_t grid_h, int64_t grid_w, std::string teacher_id)
    : channels_(channels), grid_h_(grid_h), grid_w_(grid_w), teacher_id_(std::move(teacher_id)) {}

void FeatureArchive::put(const std::string& id, const torch::Tensor& features) {
  auto f = features.detach().to(torch::kFloat32).contiguous();
  if (f.dim() != 2 || f.size(0) != grid_h_ * grid_w_ || f.size(1) != channels_) {
    throw ValidationError("archive_shape", "record '" + id + "' does not match the archive grid/channels");
  }
  records_[id] = std::vector<float>(f.data_ptr<float>(), f.data_ptr<float>() + f.numel());
}

torch::Tensor FeatureArchive::get(const std::string& id) const {
  auto it = records_.find(id);
  if (it == records_.end()) throw ValidationError("archive_missing_id", "id '" + id + "' not found in archive");
  return torch::from_blob(const_cast<float*>(it->second.data()), {grid_h_ * grid_w_, channels_}, torch::kFloat32)
      .clone();
}

void FeatureArchive::write(const std::filesystem::path& path) const {
  std::vector<unsigned char> blob;
  for (const auto& [id, values] : records_) {
    const auto n = static_cast<uint32_t>(id.size());
    for (int k = 0; k < 4; ++k) blob.push_back(static_cast<unsigned char>((n >> (8 * k)) & 0xff));
    blob.insert(blob.end(), id.begin(), id.end());
    io::append_f32s(blob, values);
  }
  io::Fnv1a hash;
  hash.update(blob.data(), blob.size());

  std::ostringstream out(std::ios::binary);
  out.write(kArchiveMagic, 4);
  io::write_u32(out, kArchiveVersion);
  io::write_u32(out, static_cast<uint32_t>(channels_));
  io::write_u32(out, static_cast<uint32_t>(grid_h_));
  io::write_u32(out, static_cast<uint32_t>(grid_w_));
  io::write_string(out, teacher_id_);
  io::write_u64(out, records_.size());
  io::write_u64(out, hash.digest());
  io::write_bytes(out, blob);
  io::atomic_write(path, out.str());
}

FeatureArchive FeatureArchive::read(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open feature archive " + path.string());
  char magic[4];
  if (!in.read(magic, 4) || std::string_view(magic, 4) != std::string_view(kArchiveMagic, 4)) {
    throw FormatError("bad feature archive magic in " + path.string());
  }
  if (io::read_u32(in) != kArchiveVersion) throw FormatError("unsupported feature archive version");
  FeatureArchive archive;
  archive.channels_ = io::read_u32(in);
  archive.grid_h_ = io::read_u32(in);
  archive.grid_w_ = io::read_u32(in);
  archive.teacher_id_ = io::read_string(in);
  const uint64_t count = io::read_u64(in);
  const uint64_t checksum = io::read_u64(in);
  std::string blob((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  io::Fnv1a hash;
  hash.update(blob.data(), blob.size());
  if (hash.digest() != checksum) throw FormatError("feature archive checksum mismatch in " + path.string());

  std::istringstream records(blob, std::ios::binary);
  const size_t per_record = static_cast<size_t>(archive.grid_h_ * archive.grid_w_ * archive.channels_);
  for (uint64_t i = 0; i < count; ++i) {
    auto id = io::read_string(records);
    archive.records_[id] = io::read_f32s(records, per_record);
  }
  return archive;
}

TeacherFeatureStore::TeacherFeatureStore(FrozenRandomTeacher teacher, std::filesystem::path cache_path)
    : source_(TeacherSource::frozen_random), teacher_(std::move(teacher)), cache_path_(std::move(cache_path)) {
  if (!cache_path_.empty() && std::filesystem::exists(cache_path_)) {
    auto cached = FeatureArchive::read(cache_path_);
    if (cached.teacher_id() == teacher_->id()) archive_ = std::move(cached);
  }
}

TeacherFeatureStore TeacherFeatureStore::from_archive(const std::filesystem::path& archive_path) {
  TeacherFeatureStore store;
  store.source_ = TeacherSource::precomputed_file;
  store.archive_ = FeatureArchive::read(archive_path);
  return store;
}

TeacherFeatureStore::TeacherFeatureStore(ExternalEncoder encoder, std::string encoder_id,
                                         std::filesystem::path cache_path)
    : source_(TeacherSource::external_encoder),
      external_(std::move(encoder)),
      external_id_(std::move(encoder_id)),
      cache_path_(std::move(cache_path)) {}

TeacherFeatures TeacherFeatureStore::fetch(const std::vector<std::string>& ids, const torch::Tensor& images) {
  if (source_ != TeacherSource::precomputed_file &&
      (!images.defined() || images.size(0) != static_cast<int64_t>(ids.size()))) {
    throw ValidationError("teacher_inputs", "one image per id is required to compute teacher features");
  }
  std::vector<torch::Tensor> rows;
  rows.reserve(ids.size());
  for (size_t i = 0; i < ids.size(); ++i) {
    if (archive_ && archive_->contains(ids[i])) {
      rows.push_back(archive_->get(ids[i]));
      continue;
    }
    if (source_ == TeacherSource::precomputed_file) {
      throw ValidationError("archive_missing_id", "id '" + ids[i] + "' not found in archive");
    }
    // One image at a time so features never depend on batch composition.
    auto one = images.narrow(0, static_cast<int64_t>(i), 1);
    TeacherFeatures f = teacher_ ? teacher_->forward(one) : external_(one);
    if (!archive_) {
      archive_.emplace(f.values.size(2), f.grid_h, f.grid_w, teacher_ ? teacher_->id() : external_id_);
    }
    archive_->put(ids[i], f.values[0]);
    dirty_ = true;
    rows.push_back(archive_->get(ids[i]));
  }
  TeacherFeatures out;
  out.values = torch::stack(rows, 0);
  out.grid_h = archive_->grid_h();
  out.grid_w = archive_->grid_w();
  out.source = source_;
  return out;
}

void TeacherFeatureStore::flush() const {
  if (dirty_ && archive_ && !cache_path_.empty()) archive_->write(cache_path_);
}

AlignedPairs align_grids(const torch::Tensor& decoder_features, const TeacherFeatures& teacher) {
  if (decoder_features.dim() != 3 || teacher.values.dim() != 3) {
    throw ValidationError("align_shape", "expected B x T x C decoder and teacher features");
  }
  const int64_t g = square_side(decoder_features.size(1));
  if (g < 0) throw ValidationError("align_square", "decoder tokens do not form a square grid");
  int64_t th = teacher.grid_h, tw = teacher.grid_w;
  if (th == 0 || tw == 0) {
    th = tw = square_side(teacher.values.size(1));
    if (th < 0) {
      throw ValidationError("align_square", "non-square teacher grid without explicit shape metadata");
    }
  }
  if (th * tw != teacher.values.size(1)) throw ValidationError("align_shape", "teacher grid metadata mismatch");
  AlignedPairs out;
  out.decoder = decoder_features;
  if (th == g && tw == g) {
    out.teacher = teacher.values;
    return out;
  }
  const int64_t b = teacher.values.size(0), c = teacher.values.size(2);
  auto grid = teacher.values.transpose(1, 2).reshape({b, c, th, tw});
  namespace F = torch::nn::functional;
  auto resampled = F::interpolate(
      grid, F::InterpolateFuncOptions().size(std::vector<int64_t>{g, g}).mode(torch::kBilinear).align_corners(false));
  out.teacher = resampled.flatten(2).transpose(1, 2).contiguous();
  return out;
}

ProjectorImpl::ProjectorImpl(int64_t width, int64_t teacher_channels, int64_t hidden) {
  if (hidden <= 0) hidden = 2 * width;
  fc1_ = register_module("fc1", torch::nn::Linear(width, hidden));
  fc2_ = register_module("fc2", torch::nn::Linear(hidden, teacher_channels));
}

torch::Tensor ProjectorImpl::forward(const torch::Tensor& x) { return fc2_(torch::gelu(fc1_(x))); }

torch::Tensor negative_cosine(const torch::Tensor& a, const torch::Tensor& b) {
  if (!a.sizes().equals(b.sizes())) throw ValidationError("shape_match", "cosine needs equal shapes");
  auto dot = (a * b).sum(-1);
  auto norms = (a.norm(2, -1) * b.norm(2, -1)).clamp_min(kCosineEps);
  return -(dot / norms).mean();
}

torch::Tensor semantic_reg_loss(const torch::Tensor& decoder_tokens, const torch::Tensor& teacher_tokens,
                                Projector& projector) {
  if (decoder_tokens.size(0) != teacher_tokens.size(0) || decoder_tokens.size(1) != teacher_tokens.size(1)) {
    throw ValidationError("align_tokens", "decoder and teacher token counts differ");
  }
  return negative_cosine(projector->forward(decoder_tokens), teacher_tokens.detach());
}

}  // namespace vqtok::semantic
