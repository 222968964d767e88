#include "vqtok/checkpoint.hpp"

#include "vqtok/binary_io.hpp"
#include "vqtok/errors.hpp"

#include <cstring>
#include <sstream>

namespace vqtok::harness {

namespace {

constexpr char kMagic[4] = {'G', 'T', 'K', 'C'};

uint8_t dtype_code(torch::ScalarType t) {
  switch (t) {
    case torch::kFloat32: return 0;
    case torch::kFloat64: return 1;
    case torch::kInt64: return 2;
    case torch::kInt32: return 3;
    case torch::kUInt8: return 4;
    default: throw FormatError(std::string("unsupported checkpoint dtype ") + c10::toString(t));
  }
}

torch::ScalarType dtype_from_code(uint8_t code) {
  switch (code) {
    case 0: return torch::kFloat32;
    case 1: return torch::kFloat64;
    case 2: return torch::kInt64;
    case 3: return torch::kInt32;
    case 4: return torch::kUInt8;
    default: throw FormatError("unknown checkpoint dtype code " + std::to_string(code));
  }
}

/// Raw bytes of a tensor in little-endian order (the host order on every
/// supported platform).
std::string tensor_bytes(const torch::Tensor& t) {
  auto c = t.detach().cpu().contiguous();
  return std::string(static_cast<const char*>(c.data_ptr()), c.numel() * c.element_size());
}

void load_into(torch::Tensor& target, const torch::Tensor& source, const std::string& name) {
  if (!target.sizes().equals(source.sizes())) {
    throw ValidationError("checkpoint_shape", "tensor '" + name + "' has a different shape in the checkpoint");
  }
  torch::NoGradGuard no_grad;
  target.copy_(source);
}

}  // namespace

const torch::Tensor* Section::find(const std::string& tensor_name) const {
  for (const auto& t : tensors) {
    if (t.name == tensor_name) return &t.value;
  }
  return nullptr;
}

const Section* Checkpoint::section(const std::string& name) const {
  for (const auto& s : sections) {
    if (s.name == name) return &s;
  }
  return nullptr;
}

Section& Checkpoint::add_section(const std::string& name) {
  if (section(name)) throw FormatError("duplicate checkpoint section '" + name + "'");
  sections.push_back(Section{name, {}});
  return sections.back();
}

std::string Checkpoint::serialize() const {
  std::ostringstream out(std::ios::binary);
  out.write(kMagic, 4);
  io::write_u32(out, kVersion);
  io::write_u64(out, config_digest);
  io::write_i64(out, step);
  io::write_string(out, config_text);
  io::write_u32(out, static_cast<uint32_t>(sections.size()));
  for (const auto& s : sections) {
    io::write_string(out, s.name);
    io::write_u32(out, static_cast<uint32_t>(s.tensors.size()));
    for (const auto& t : s.tensors) {
      io::write_string(out, t.name);
      const uint8_t code = dtype_code(t.value.scalar_type());
      out.put(static_cast<char>(code));
      io::write_u32(out, static_cast<uint32_t>(t.value.dim()));
      for (auto d : t.value.sizes()) io::write_i64(out, d);
      const auto bytes = tensor_bytes(t.value);
      io::write_u64(out, bytes.size());
      out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    }
  }
  return out.str();
}

Checkpoint Checkpoint::deserialize(const std::string& bytes) {
  std::istringstream in(bytes, std::ios::binary);
  char magic[4];
  if (!in.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0) throw FormatError("not a checkpoint (bad magic)");
  const auto version = io::read_u32(in);
  if (version != kVersion) throw FormatError("unsupported checkpoint version " + std::to_string(version));
  Checkpoint c;
  c.config_digest = io::read_u64(in);
  c.step = io::read_i64(in);
  c.config_text = io::read_string(in, 1u << 24);
  const auto n_sections = io::read_u32(in);
  for (uint32_t i = 0; i < n_sections; ++i) {
    Section s;
    s.name = io::read_string(in);
    const auto n_tensors = io::read_u32(in);
    for (uint32_t k = 0; k < n_tensors; ++k) {
      NamedTensor t;
      t.name = io::read_string(in);
      const int code = in.get();
      if (code == EOF) throw FormatError("truncated checkpoint");
      const auto dtype = dtype_from_code(static_cast<uint8_t>(code));
      const auto ndim = io::read_u32(in);
      if (ndim > 16) throw FormatError("implausible tensor rank in checkpoint");
      std::vector<int64_t> dims(ndim);
      for (auto& d : dims) {
        d = io::read_i64(in);
        if (d < 0) throw FormatError("negative tensor dimension in checkpoint");
      }
      const auto nbytes = io::read_u64(in);
      t.value = torch::empty(dims, torch::TensorOptions().dtype(dtype));
      if (nbytes != static_cast<uint64_t>(t.value.numel() * t.value.element_size())) {
        throw FormatError("tensor '" + t.name + "' byte count does not match its shape");
      }
      if (!in.read(static_cast<char*>(t.value.data_ptr()), static_cast<std::streamsize>(nbytes))) {
        throw FormatError("truncated checkpoint");
      }
      s.tensors.push_back(std::move(t));
    }
    c.sections.push_back(std::move(s));
  }
  if (in.peek() != EOF) throw FormatError("trailing bytes after checkpoint sections");
  return c;
}

void Checkpoint::write(const std::filesystem::path& path) const { io::atomic_write(path, serialize()); }

Checkpoint Checkpoint::read(const std::filesystem::path& path) { return deserialize(io::read_file(path)); }

bool bitwise_equal(const Checkpoint& a, const Checkpoint& b) { return a.serialize() == b.serialize(); }

Section module_section(const std::string& name, const torch::nn::Module& module) {
  Section s{name, {}};
  for (const auto& p : module.named_parameters(/*recurse=*/true)) {
    s.tensors.push_back({"param:" + p.key(), p.value().detach().clone()});
  }
  for (const auto& b : module.named_buffers(/*recurse=*/true)) {
    s.tensors.push_back({"buffer:" + b.key(), b.value().detach().clone()});
  }
  return s;
}

void load_module_section(const Section& section, torch::nn::Module& module) {
  size_t expected = 0;
  for (auto& p : module.named_parameters(true)) {
    const auto* t = section.find("param:" + p.key());
    if (!t) throw ValidationError("checkpoint_missing", "section '" + section.name + "' lacks parameter " + p.key());
    load_into(p.value(), *t, p.key());
    ++expected;
  }
  for (auto& b : module.named_buffers(true)) {
    const auto* t = section.find("buffer:" + b.key());
    if (!t) throw ValidationError("checkpoint_missing", "section '" + section.name + "' lacks buffer " + b.key());
    load_into(b.value(), *t, b.key());
    ++expected;
  }
  if (expected != section.tensors.size()) {
    throw ValidationError("checkpoint_extra", "section '" + section.name + "' holds tensors the module does not have");
  }
}

Section adamw_section(const std::string& name, torch::optim::AdamW& optimizer) {
  Section s{name, {}};
  int64_t index = 0;
  for (auto& group : optimizer.param_groups()) {
    for (auto& p : group.params()) {
      auto it = optimizer.state().find(p.unsafeGetTensorImpl());
      if (it != optimizer.state().end()) {
        auto& st = static_cast<torch::optim::AdamWParamState&>(*it->second);
        const auto key = std::to_string(index);
        s.tensors.push_back({key + ".step", torch::tensor({st.step()}, torch::kInt64)});
        s.tensors.push_back({key + ".exp_avg", st.exp_avg().detach().clone()});
        s.tensors.push_back({key + ".exp_avg_sq", st.exp_avg_sq().detach().clone()});
        if (st.max_exp_avg_sq().defined()) {
          s.tensors.push_back({key + ".max_exp_avg_sq", st.max_exp_avg_sq().detach().clone()});
        }
      }
      ++index;
    }
  }
  return s;
}

void load_adamw_section(const Section& section, torch::optim::AdamW& optimizer) {
  optimizer.state().clear();
  int64_t index = 0;
  size_t consumed = 0;
  for (auto& group : optimizer.param_groups()) {
    for (auto& p : group.params()) {
      const auto key = std::to_string(index++);
      const auto* step = section.find(key + ".step");
      if (!step) continue;
      const auto* avg = section.find(key + ".exp_avg");
      const auto* avg_sq = section.find(key + ".exp_avg_sq");
      if (!avg || !avg_sq || !avg->sizes().equals(p.sizes())) {
        throw ValidationError("checkpoint_optimizer", "optimizer state for parameter " + key + " is incomplete");
      }
      auto st = std::make_unique<torch::optim::AdamWParamState>();
      st->step(step->item<int64_t>());
      st->exp_avg(avg->clone());
      st->exp_avg_sq(avg_sq->clone());
      consumed += 3;
      if (const auto* mx = section.find(key + ".max_exp_avg_sq")) {
        st->max_exp_avg_sq(mx->clone());
        ++consumed;
      }
      optimizer.state()[p.unsafeGetTensorImpl()] = std::move(st);
    }
  }
  if (consumed != section.tensors.size()) {
    throw ValidationError("checkpoint_optimizer", "optimizer section does not match the parameter layout");
  }
}

}  // namespace vqtok::harness
