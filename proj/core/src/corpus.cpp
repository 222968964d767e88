#include "vqtok/corpus.hpp"

#include "vqtok/binary_io.hpp"
#include "vqtok/errors.hpp"

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include <algorithm>
#include <cmath>
#include <iostream>
#include <numbers>
#include <random>

namespace vqtok::harness {

namespace {

struct Rgb {
  double r, g, b;
};

constexpr Rgb kPalette[4] = {{0.90, 0.20, 0.20}, {0.20, 0.80, 0.30}, {0.20, 0.40, 0.95}, {0.95, 0.85, 0.20}};

double uniform(std::mt19937_64& rng, double lo, double hi) {
  return lo + (hi - lo) * static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

double gaussian(std::mt19937_64& rng) {
  // Box-Muller on the portable uniform above.
  const double u1 = std::max(uniform(rng, 0.0, 1.0), 1e-300);
  const double u2 = uniform(rng, 0.0, 1.0);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

/// Point-in-shape test in the shape's own frame (unit radius).
bool inside(int64_t shape, double x, double y) {
  switch (shape) {
    case 0: return x * x + y * y <= 1.0;
    case 1: return std::abs(x) <= 0.8 && std::abs(y) <= 0.8;
    case 2: {
      // Equilateral triangle with circumradius 1, apex up.
      const double s3 = std::sqrt(3.0);
      return y >= -0.5 && s3 * x - y <= 1.0 && -s3 * x - y <= 1.0;
    }
    default: return (std::abs(x) <= 0.3 && std::abs(y) <= 1.0) || (std::abs(y) <= 0.3 && std::abs(x) <= 1.0);
  }
}

}  // namespace

LabeledImages render_synthetic_shapes(const CorpusSpec& spec) {
  const int64_t s = spec.image_size;
  LabeledImages out;
  out.images = torch::empty({spec.count, 3, s, s}, torch::kFloat32);
  auto px = out.images.accessor<float, 4>();
  for (int64_t i = 0; i < spec.count; ++i) {
    std::mt19937_64 rng(spec.seed * 0x9e3779b97f4a7c15ull + static_cast<uint64_t>(i) * 0xbf58476d1ce4e5b9ull + 1);
    const int64_t cls = i % spec.num_classes;
    const int64_t shape = cls % kShapeKinds;
    const Rgb base = kPalette[cls / kShapeKinds];
    const Rgb color{std::clamp(base.r + uniform(rng, -0.05, 0.05), 0.0, 1.0),
                    std::clamp(base.g + uniform(rng, -0.05, 0.05), 0.0, 1.0),
                    std::clamp(base.b + uniform(rng, -0.05, 0.05), 0.0, 1.0)};
    const double bg = uniform(rng, 0.1, 0.4);
    const double grad_angle = uniform(rng, 0.0, 2.0 * std::numbers::pi);
    const double grad_amp = uniform(rng, 0.0, 0.15);
    const double cx = uniform(rng, 0.35, 0.65) * static_cast<double>(s);
    const double cy = uniform(rng, 0.35, 0.65) * static_cast<double>(s);
    const double radius = uniform(rng, 0.2, 0.32) * static_cast<double>(s);
    const double theta = uniform(rng, 0.0, 2.0 * std::numbers::pi);
    const double ct = std::cos(theta), st = std::sin(theta);
    const double gx = std::cos(grad_angle), gy = std::sin(grad_angle);

    for (int64_t y = 0; y < s; ++y) {
      for (int64_t x = 0; x < s; ++x) {
        double cover = 0.0;
        for (int sy = 0; sy < 2; ++sy) {
          for (int sx = 0; sx < 2; ++sx) {
            const double dx = (static_cast<double>(x) + 0.25 + 0.5 * sx - cx) / radius;
            const double dy = (static_cast<double>(y) + 0.25 + 0.5 * sy - cy) / radius;
            cover += inside(shape, ct * dx + st * dy, -st * dx + ct * dy) ? 0.25 : 0.0;
          }
        }
        const double u = (static_cast<double>(x) / static_cast<double>(s) - 0.5) * gx +
                         (static_cast<double>(y) / static_cast<double>(s) - 0.5) * gy;
        const double back = bg + grad_amp * u;
        const double noise = 0.02 * gaussian(rng);
        const double rgb[3] = {color.r, color.g, color.b};
        for (int64_t c = 0; c < 3; ++c) {
          const double v = std::clamp(cover * rgb[c] + (1.0 - cover) * back + noise, 0.0, 1.0);
          px[i][c][y][x] = static_cast<float>(2.0 * v - 1.0);
        }
      }
    }
    out.labels.push_back(cls);
    char id[32];
    std::snprintf(id, sizeof id, "shape-%06lld", static_cast<long long>(i));
    out.ids.emplace_back(id);
  }
  return out;
}

LabeledImages read_image_folder(const CorpusSpec& spec, int64_t& skipped) {
  namespace fs = std::filesystem;
  const fs::path root(spec.folder);
  if (!fs::is_directory(root)) throw ValidationError("corpus_folder", "image folder not found: " + spec.folder);
  std::vector<fs::path> class_dirs;
  for (const auto& entry : fs::directory_iterator(root)) {
    if (entry.is_directory()) class_dirs.push_back(entry.path());
  }
  std::sort(class_dirs.begin(), class_dirs.end());
  if (static_cast<int64_t>(class_dirs.size()) != spec.num_classes) {
    throw ValidationError("folder_classes", "found " + std::to_string(class_dirs.size()) +
                                                " class directories, config declares " +
                                                std::to_string(spec.num_classes));
  }
  skipped = 0;
  LabeledImages out;
  std::vector<torch::Tensor> images;
  const int s = static_cast<int>(spec.image_size);
  for (size_t cls = 0; cls < class_dirs.size(); ++cls) {
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(class_dirs[cls])) {
      if (!entry.is_regular_file()) continue;
      auto ext = entry.path().extension().string();
      std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char ch) { return std::tolower(ch); });
      if (ext == ".png" || ext == ".jpg" || ext == ".jpeg") files.push_back(entry.path());
    }
    std::sort(files.begin(), files.end());
    int64_t loaded = 0;
    for (const auto& file : files) {
      cv::Mat bgr = cv::imread(file.string(), cv::IMREAD_COLOR);
      if (bgr.empty()) {
        ++skipped;
        continue;
      }
      cv::Mat rgb, resized, as_float;
      cv::cvtColor(bgr, rgb, cv::COLOR_BGR2RGB);
      cv::resize(rgb, resized, cv::Size(s, s), 0, 0, cv::INTER_AREA);
      resized.convertTo(as_float, CV_32FC3, 2.0 / 255.0, -1.0);
      auto t = torch::from_blob(as_float.data, {s, s, 3}, torch::kFloat32).permute({2, 0, 1}).clone();
      images.push_back(t);
      out.labels.push_back(static_cast<int64_t>(cls));
      out.ids.push_back(class_dirs[cls].filename().string() + "/" + file.filename().string());
      ++loaded;
    }
    if (loaded == 0) {
      throw ValidationError("empty_class", "class directory '" + class_dirs[cls].filename().string() +
                                               "' has no readable images");
    }
  }
  if (skipped > 0) std::clog << "warning: skipped " << skipped << " unreadable image files under " << spec.folder << "\n";
  out.images = torch::stack(images, 0);
  return out;
}

std::array<std::vector<int64_t>, 3> split_by_id_hash(const std::vector<std::string>& ids,
                                                      const std::vector<double>& ratios, uint64_t seed) {
  const auto n = static_cast<int64_t>(ids.size());
  std::vector<std::pair<uint64_t, int64_t>> keyed;
  keyed.reserve(ids.size());
  for (int64_t i = 0; i < n; ++i) {
    io::Fnv1a h;
    h.update(&seed, sizeof seed);
    h.update(ids[static_cast<size_t>(i)]);
    keyed.emplace_back(h.digest(), i);
  }
  std::sort(keyed.begin(), keyed.end(), [&](const auto& a, const auto& b) {
    return a.first != b.first ? a.first < b.first : ids[static_cast<size_t>(a.second)] < ids[static_cast<size_t>(b.second)];
  });
  const auto n_train = std::min(n, static_cast<int64_t>(std::llround(ratios[0] * static_cast<double>(n))));
  const auto n_val = std::min(n - n_train, static_cast<int64_t>(std::llround(ratios[1] * static_cast<double>(n))));
  std::array<std::vector<int64_t>, 3> out;
  for (int64_t k = 0; k < n; ++k) {
    const int which = k < n_train ? 0 : (k < n_train + n_val ? 1 : 2);
    out[static_cast<size_t>(which)].push_back(keyed[static_cast<size_t>(k)].second);
  }
  for (auto& rows : out) std::sort(rows.begin(), rows.end());
  return out;
}

Corpus load_corpus(const CorpusSpec& spec) {
  spec.validate();
  Corpus corpus;
  LabeledImages all;
  if (spec.kind == CorpusKind::synthetic_shapes) {
    all = render_synthetic_shapes(spec);
  } else {
    all = read_image_folder(spec, corpus.skipped_files);
  }
  auto splits = split_by_id_hash(all.ids, spec.split, spec.seed);
  for (const auto& rows : splits) {
    if (rows.empty()) throw ValidationError("split_ratios", "a split came out empty");
  }
  corpus.train = all.subset(splits[0]);
  corpus.val = all.subset(splits[1]);
  corpus.probe_eval = all.subset(splits[2]);
  corpus.num_classes = spec.num_classes;
  return corpus;
}

}  // namespace vqtok::harness
