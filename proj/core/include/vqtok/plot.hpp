#pragma once

#include <torch/torch.h>

#include <filesystem>
#include <string>
#include <vector>

namespace vqtok::plot {

struct Series {
  std::string name;
  std::vector<double> values;  // NaN marks a missing point
};

/// Line chart with categorical x positions, written as PNG.
void line_chart(const std::filesystem::path& path, const std::string& title, const std::vector<std::string>& x_labels,
                const std::vector<Series>& series);

/// Tiles rows of images (each tensor K x H x W x 3 in [0, 1]) into one PNG,
/// upscaled by `scale` with nearest-neighbour sampling.
void image_grid(const std::filesystem::path& path, const std::vector<torch::Tensor>& rows, int scale = 4);

}  // namespace vqtok::plot
