#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <string>
#include <vector>

namespace vqtok {

/// A set of images in [-1, 1] with class labels and stable string ids.
struct LabeledImages {
  torch::Tensor images;  // N x 3 x H x W, float32
  std::vector<int64_t> labels;
  std::vector<std::string> ids;

  int64_t size() const { return static_cast<int64_t>(labels.size()); }
  torch::Tensor label_tensor() const { return torch::tensor(labels, torch::kInt64); }
  LabeledImages subset(const std::vector<int64_t>& rows) const;
};

inline LabeledImages LabeledImages::subset(const std::vector<int64_t>& rows) const {
  LabeledImages out;
  out.images = images.index_select(0, torch::tensor(rows, torch::kInt64));
  for (auto r : rows) {
    out.labels.push_back(labels[static_cast<size_t>(r)]);
    out.ids.push_back(ids[static_cast<size_t>(r)]);
  }
  return out;
}

}  // namespace vqtok
