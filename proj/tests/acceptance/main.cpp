#include "criteria.hpp"

#include <CLI11.hpp>
#include <torch/torch.h>

#include <chrono>
#include <cstdio>
#include <iostream>
#include <optional>
#include <set>

namespace {

struct Criterion {
  int id;
  const char* title;
  std::optional<double> limit_seconds;
  acceptance::Verdict (*run)(const acceptance::Context&);
};

const std::vector<Criterion> kCriteria = {
    {1, "oracle equivalence", 120.0, acceptance::oracle_equivalence},
    {2, "gradient suite", 120.0, acceptance::gradient_suite},
    {3, "entropy-loss effect", 1800.0, acceptance::entropy_effect},
    {4, "tier scaling without sem-reg", 7200.0, acceptance::pilot_dilemma},
    {5, "semantic regularization effect", std::nullopt, acceptance::semantic_regularization},
    {6, "asymmetry ordering", std::nullopt, acceptance::asymmetry_ordering},
    {7, "latent consistency", std::nullopt, acceptance::latent_consistency},
    {8, "determinism and persistence", std::nullopt, acceptance::determinism},
    {9, "cfg schedule", std::nullopt, acceptance::cfg_schedule},
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria runner"};
  std::vector<int> only;
  std::string runs_dir = VQTOK_ACCEPTANCE_RUNS;
  std::string source_dir = VQTOK_SOURCE_DIR;
  bool verbose = false;
  app.add_option("--only", only, "Criterion ids to run (default: all)")->delimiter(',');
  app.add_option("--runs-dir", runs_dir, "Cache directory for training runs");
  app.add_option("--source-dir", source_dir, "Repository root");
  app.add_flag("--verbose", verbose, "Print progress of long experiments");
  CLI11_PARSE(app, argc, argv);

  at::set_num_threads(1);
  acceptance::Context ctx{source_dir, runs_dir, [verbose](const std::string& line) {
                            if (verbose) std::cerr << "  .. " << line << std::endl;
                          }};
  const std::set<int> selected(only.begin(), only.end());

  int failed = 0, ran = 0;
  std::vector<std::string> summary;
  for (const auto& c : kCriteria) {
    if (!selected.empty() && !selected.count(c.id)) continue;
    ++ran;
    const auto start = std::chrono::steady_clock::now();
    acceptance::Verdict v;
    try {
      v = c.run(ctx);
    } catch (const std::exception& e) {
      v = {false, std::string("exception: ") + e.what()};
    }
    const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    if (c.limit_seconds && seconds > *c.limit_seconds) {
      v.pass = false;
      v.detail += "; runtime over the " + std::to_string(static_cast<int>(*c.limit_seconds)) + " s limit";
    }
    char line[160];
    std::snprintf(line, sizeof line, "[%s] criterion %d (%s, %.1f s): ", v.pass ? "PASS" : "FAIL", c.id, c.title,
                  seconds);
    summary.push_back(line + v.detail);
    std::cout << summary.back() << std::endl;
    if (!v.pass) ++failed;
  }
  std::cout << "\nsummary: " << (ran - failed) << "/" << ran << " criteria passed\n";
  for (const auto& s : summary) std::cout << s << "\n";
  return failed == 0 ? 0 : 1;
}
