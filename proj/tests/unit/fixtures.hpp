#pragma once

#include <filesystem>
#include <string>

namespace fixtures {

/// Tiny end-to-end config: a few steps on a small synthetic corpus.
inline const std::string kTinyConfig = R"(# tiny run
[run]
name = "tiny"
seed = 3

[tokenizer]
latent = "1d"
image_size = 32
downsample = 8
tokens = 16
encoder = "S"
decoder = "S"
codebook_size = 64
code_dim = 8

[train]
steps = 6
batch_size = 4
checkpoint_every = 2

[sem_reg]
lambda = 0.5

[data]
classes = 4
count = 80

[ar]
blocks = 2
heads = 2
width = 32

[probe]
epochs = 1
batch_size = 16
samples = 16
)";

inline std::filesystem::path scratch(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("vqtok-unit-" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace fixtures
