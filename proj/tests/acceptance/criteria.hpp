#pragma once

#include <filesystem>
#include <functional>
#include <string>
#include <vector>

namespace acceptance {

struct Verdict {
  bool pass = false;
  std::string detail;
};

struct Context {
  std::filesystem::path source_dir;  // repository root (configs/ lives here)
  std::filesystem::path runs_dir;    // cached training runs
  std::function<void(const std::string&)> log;
};

Verdict oracle_equivalence(const Context& ctx);
Verdict gradient_suite(const Context& ctx);
Verdict entropy_effect(const Context& ctx);
Verdict pilot_dilemma(const Context& ctx);
Verdict semantic_regularization(const Context& ctx);
Verdict asymmetry_ordering(const Context& ctx);
Verdict latent_consistency(const Context& ctx);
Verdict determinism(const Context& ctx);
Verdict cfg_schedule(const Context& ctx);

}  // namespace acceptance
