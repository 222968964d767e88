#pragma once

#include "vqtok/config.hpp"
#include "vqtok/data.hpp"

#include <array>
#include <cstdint>
#include <string>
#include <vector>

namespace vqtok::harness {

struct Corpus {
  LabeledImages train;
  LabeledImages val;
  LabeledImages probe_eval;
  int64_t num_classes = 0;
  int64_t skipped_files = 0;

  probe::ProbeData probe_data() const { return {train, val, probe_eval, num_classes}; }
};

/// Number of distinct shapes; class c draws shape c % kShapeKinds and
/// color c / kShapeKinds.
inline constexpr int64_t kShapeKinds = 4;

/// Renders `spec.count` anti-aliased shapes over textured backgrounds.
/// Pixel data depends only on (spec.seed, index).
LabeledImages render_synthetic_shapes(const CorpusSpec& spec);

/// Reads class-per-subdirectory PNG/JPEG files, resized to spec.image_size.
/// Unreadable files are skipped and counted in `skipped`.
LabeledImages read_image_folder(const CorpusSpec& spec, int64_t& skipped);

/// Row indices of the train / val / probe-eval splits. Rows are ordered by a
/// seeded hash of their ids; split sizes are round(ratio * n) with the
/// remainder going to the last split.
std::array<std::vector<int64_t>, 3> split_by_id_hash(const std::vector<std::string>& ids,
                                                      const std::vector<double>& ratios, uint64_t seed);

Corpus load_corpus(const CorpusSpec& spec);

}  // namespace vqtok::harness
