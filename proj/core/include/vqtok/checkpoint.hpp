#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

namespace vqtok::harness {

struct NamedTensor {
  std::string name;
  torch::Tensor value;
};

struct Section {
  std::string name;
  std::vector<NamedTensor> tensors;

  const torch::Tensor* find(const std::string& tensor_name) const;
};

/// Checkpoint file layout, all little-endian:
///   magic "GTKC" | u32 version | u64 config digest | i64 step |
///   u32 len + config text | u32 section count, then per section
///   u32 len + name | u32 tensor count, then per tensor
///   u32 len + name | u8 dtype | u32 ndim | i64 dims[ndim] | u64 byte count | raw bytes.
/// dtype codes: 0 float32, 1 float64, 2 int64, 3 int32, 4 uint8.
struct Checkpoint {
  static constexpr uint32_t kVersion = 1;

  uint64_t config_digest = 0;
  int64_t step = 0;
  std::string config_text;
  std::vector<Section> sections;

  const Section* section(const std::string& name) const;
  Section& add_section(const std::string& name);

  std::string serialize() const;
  static Checkpoint deserialize(const std::string& bytes);
  void write(const std::filesystem::path& path) const;  // atomic
  static Checkpoint read(const std::filesystem::path& path);
};

/// Bitwise equality: same header, section order, tensor names, dtypes, shapes and bytes.
bool bitwise_equal(const Checkpoint& a, const Checkpoint& b);

/// Parameters then buffers of a module, by their registered names.
Section module_section(const std::string& name, const torch::nn::Module& module);

/// Copies tensors into a module's parameters and buffers. Every name must
/// be present with a matching shape.
void load_module_section(const Section& section, torch::nn::Module& module);

/// AdamW moments and step counts, keyed by the parameter's position in the
/// optimizer's groups.
Section adamw_section(const std::string& name, torch::optim::AdamW& optimizer);
void load_adamw_section(const Section& section, torch::optim::AdamW& optimizer);

}  // namespace vqtok::harness
