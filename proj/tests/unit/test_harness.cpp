#include "fixtures.hpp"

#include "vqtok/binary_io.hpp"
#include "vqtok/checkpoint.hpp"
#include "vqtok/config.hpp"
#include "vqtok/corpus.hpp"
#include "vqtok/errors.hpp"
#include "vqtok/runs.hpp"
#include "vqtok/train.hpp"

#include <doctest.h>
#include <opencv2/imgcodecs.hpp>

#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>

using namespace vqtok;
using harness::ConfigDoc;
using harness::ExperimentConfig;

namespace {

ConfigDoc tiny_doc() { return ConfigDoc::parse(fixtures::kTinyConfig); }

ExperimentConfig tiny() { return ExperimentConfig::from_doc(tiny_doc()); }

std::string rule_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const ValidationError& e) {
    return e.rule();
  }
  return "";
}

size_t line_count(const std::string& text) {
  return static_cast<size_t>(std::count(text.begin(), text.end(), '\n'));
}

}  // namespace

TEST_SUITE("harness") {

TEST_CASE("config parses and fills derived values") {
  const auto c = tiny();
  CHECK(c.name == "tiny");
  CHECK(c.seed == 3);
  CHECK(c.tokenizer.codebook_size == 64);
  CHECK(c.data.image_size == 32);
  CHECK(c.ar.vocab == 64);
  CHECK(c.ar.token_count == 16);
  CHECK(c.ar.num_classes == 4);
  CHECK(c.sem_reg.align_layer == 2);  // S has 2 blocks
  CHECK(c.losses.entropy == 0.0);
  CHECK(c.schedule.total_steps == 6);
  CHECK(c.schedule.steps_per_epoch == 16);  // 64 train images / batch 4
}

TEST_CASE("entropy weight and align layer defaults follow the tier") {
  auto doc = tiny_doc();
  doc.set("tokenizer.encoder", "\"L\"");
  doc.set("tokenizer.decoder", "\"L\"");
  auto c = ExperimentConfig::from_doc(doc);
  CHECK(c.losses.entropy == 5e-3);
  CHECK(c.sem_reg.align_layer == 3);
  doc.set("losses.entropy", "0");
  CHECK(ExperimentConfig::from_doc(doc).losses.entropy == 0.0);
}

TEST_CASE("config errors name the violated rule") {
  auto with = [](const std::string& key, const std::string& value) {
    return rule_of([&] {
      auto doc = tiny_doc();
      doc.set(key, value);
      ExperimentConfig::from_doc(doc);
    });
  };
  CHECK(with("tokenizer.bogus", "1") == "unknown_key");
  CHECK(with("train.steps", "0") == "train_steps");
  CHECK(with("train.steps", "ten") == "value_type");
  CHECK(with("tokenizer.tokens", "12") == "token_count_pow2");
  CHECK(with("tokenizer.encoder", "\"B\"") == "asymmetry_rule");
  CHECK(with("data.split", "[0.5, 0.5, 0.5]") == "split_ratios");
  CHECK(with("tokenizer.downsample", "6") == "downsample_ratio");
  CHECK(rule_of([] { ExperimentConfig::from_doc(ConfigDoc::parse("[nope]\nx = 1\n")); }) == "unknown_section");
  CHECK(rule_of([] { ExperimentConfig::load("/nonexistent/config.toml"); }) == "config_path");

  auto doc = tiny_doc();
  doc.set("tokenizer.encoder", "\"B\"");
  doc.set("tokenizer.allow_encoder_larger", "true");
  CHECK_NOTHROW(ExperimentConfig::from_doc(doc));
}

TEST_CASE("canonical text is a fixed point and drives the digest") {
  const auto c = tiny();
  const auto again = ExperimentConfig::from_doc(ConfigDoc::parse(c.canonical_text()));
  CHECK(again.canonical_text() == c.canonical_text());
  CHECK(again.digest() == c.digest());

  auto doc = tiny_doc();
  doc.set("run.output_dir", "\"elsewhere\"");
  CHECK(ExperimentConfig::from_doc(doc).digest() == c.digest());
  doc.set("train.steps", "7");
  CHECK(ExperimentConfig::from_doc(doc).digest() != c.digest());
}

TEST_CASE("output root precedence is flag, then environment, then config") {
  const auto c = tiny();
  ::unsetenv("GTK_OUTPUT_DIR");
  CHECK(harness::output_root(c, std::nullopt) == "runs");
  ::setenv("GTK_OUTPUT_DIR", "/tmp/from-env", 1);
  CHECK(harness::output_root(c, std::nullopt) == "/tmp/from-env");
  CHECK(harness::output_root(c, std::string("/tmp/from-flag")) == "/tmp/from-flag");
  ::unsetenv("GTK_OUTPUT_DIR");
  CHECK(harness::run_directory("root", c) == std::filesystem::path("root/tiny/seed-3"));
}

TEST_CASE("checkpoint serialization is bitwise stable") {
  harness::Checkpoint ck;
  ck.config_digest = 0x1234;
  ck.step = 42;
  ck.config_text = "[run]\nname = \"x\"\n";
  auto& s = ck.add_section("weights");
  s.tensors.push_back({"a", torch::randn({3, 4})});
  s.tensors.push_back({"b", torch::arange(5, torch::kInt64)});
  s.tensors.push_back({"c", torch::randn({2}, torch::kFloat64)});
  s.tensors.push_back({"empty", torch::zeros({0, 3})});
  const auto bytes = ck.serialize();
  CHECK(bytes.substr(0, 4) == "GTKC");
  auto back = harness::Checkpoint::deserialize(bytes);
  CHECK(harness::bitwise_equal(ck, back));
  CHECK(back.serialize() == bytes);
  CHECK(back.section("weights")->find("b") != nullptr);
  CHECK(back.section("missing") == nullptr);
  CHECK_THROWS_AS(ck.add_section("weights"), FormatError);

  CHECK_THROWS_AS(harness::Checkpoint::deserialize("GTKX" + bytes.substr(4)), FormatError);
  CHECK_THROWS_AS(harness::Checkpoint::deserialize(bytes.substr(0, bytes.size() - 3)), FormatError);

  auto changed = back;
  changed.sections[0].tensors[0].value = changed.sections[0].tensors[0].value.clone();
  changed.sections[0].tensors[0].value.view(-1)[0] += 1.0f;
  CHECK_FALSE(harness::bitwise_equal(ck, changed));
}

TEST_CASE("module sections round trip and reject shape mismatches") {
  torch::manual_seed(1);
  torch::nn::Linear a(4, 3), b(4, 3), c(5, 3);
  auto section = harness::module_section("lin", *a);
  harness::load_module_section(section, *b);
  CHECK(torch::equal(a->weight, b->weight));
  CHECK(torch::equal(a->bias, b->bias));
  CHECK_THROWS_AS(harness::load_module_section(section, *c), ValidationError);
}

TEST_CASE("synthetic corpus is deterministic per index") {
  harness::CorpusSpec spec;
  spec.count = 40;
  spec.num_classes = 8;
  spec.seed = 5;
  auto a = harness::render_synthetic_shapes(spec);
  spec.count = 20;
  auto b = harness::render_synthetic_shapes(spec);
  CHECK(torch::equal(a.images.narrow(0, 0, 20), b.images));
  CHECK(a.labels[9] == 1);
  CHECK(a.images.min().item<double>() >= -1.0);
  CHECK(a.images.max().item<double>() <= 1.0);
  spec.seed = 6;
  CHECK_FALSE(torch::equal(harness::render_synthetic_shapes(spec).images, b.images));
}

TEST_CASE("splits are disjoint, sized by ratio and order independent") {
  std::vector<std::string> ids;
  for (int i = 0; i < 101; ++i) ids.push_back("img-" + std::to_string(i));
  auto s = harness::split_by_id_hash(ids, {0.8, 0.1, 0.1}, 9);
  CHECK(s[0].size() == 81);
  CHECK(s[1].size() == 10);
  CHECK(s[2].size() == 10);
  std::set<int64_t> all;
  for (const auto& rows : s) all.insert(rows.begin(), rows.end());
  CHECK(all.size() == 101);

  auto reversed = ids;
  std::reverse(reversed.begin(), reversed.end());
  auto r = harness::split_by_id_hash(reversed, {0.8, 0.1, 0.1}, 9);
  std::set<std::string> val_a, val_b;
  for (auto i : s[1]) val_a.insert(ids[static_cast<size_t>(i)]);
  for (auto i : r[1]) val_b.insert(reversed[static_cast<size_t>(i)]);
  CHECK(val_a == val_b);
}

TEST_CASE("image folder loader skips unreadable files") {
  const auto root = fixtures::scratch("folder");
  for (int cls = 0; cls < 2; ++cls) {
    const auto dir = root / ("class" + std::to_string(cls));
    std::filesystem::create_directories(dir);
    for (int i = 0; i < 25; ++i) {
      cv::Mat img(20, 24, CV_8UC3, cv::Scalar(10 * i, 100 * cls, 50));
      cv::imwrite((dir / ("im" + std::to_string(i) + ".png")).string(), img);
    }
  }
  std::ofstream(root / "class1" / "im7.png", std::ios::trunc) << "this is not a png";
  std::ofstream(root / "class0" / "notes.txt") << "ignored";

  harness::CorpusSpec spec;
  spec.kind = harness::CorpusKind::image_folder;
  spec.folder = root.string();
  spec.num_classes = 2;
  int64_t skipped = 0;
  auto images = harness::read_image_folder(spec, skipped);
  CHECK(images.size() == 49);
  CHECK(skipped == 1);
  CHECK(images.images.sizes() == std::vector<int64_t>{49, 3, 32, 32});
  // Scalar(10 i, 100 c, 50) is BGR, so the red channel holds 50.
  CHECK(images.images[0][0][0][0].item<float>() == doctest::Approx(50.0 / 255.0 * 2.0 - 1.0).epsilon(1e-6));

  spec.num_classes = 3;
  CHECK(rule_of([&] { harness::read_image_folder(spec, skipped); }) == "folder_classes");
}

TEST_CASE("metrics rows round trip through csv") {
  harness::MetricsRow row;
  row.step = 7;
  row.recon = 0.125;
  row.total = 1.0 / 3.0;
  row.usage = 0.5;
  const auto dir = fixtures::scratch("metrics");
  io::atomic_write(dir / "m.csv", std::string(harness::kMetricsHeader) + "\n" + harness::format_metrics_row(row) + "\n");
  auto rows = harness::read_metrics(dir / "m.csv");
  REQUIRE(rows.size() == 1);
  CHECK(rows[0].step == 7);
  CHECK(rows[0].recon == 0.125);
  CHECK(rows[0].total == 1.0 / 3.0);
}

TEST_CASE("training is deterministic") {
  const auto config = tiny();
  const auto corpus = harness::load_corpus(config.data);
  harness::TokenizerTrainer a(config, corpus), b(config, corpus);
  CHECK(a.batch_rows(2) == b.batch_rows(2));
  for (int i = 0; i < 3; ++i) {
    auto ra = a.run_step();
    auto rb = b.run_step();
    CHECK(ra.total == rb.total);
  }
  CHECK(harness::bitwise_equal(a.snapshot(), b.snapshot()));
}

TEST_CASE("resume reproduces the uninterrupted run bitwise") {
  auto config = tiny();
  const auto corpus = harness::load_corpus(config.data);
  const auto root = fixtures::scratch("resume");

  auto full = harness::train_tokenizer(config, corpus, root / "full");
  CHECK(full.steps_done == 6);

  harness::TrainOptions pause;
  pause.stop_at = 3;
  auto first = harness::train_tokenizer(config, corpus, root / "split", pause);
  CHECK(first.steps_done == 3);
  auto second = harness::train_tokenizer(config, corpus, root / "split");
  CHECK(second.steps_done == 6);

  CHECK(io::read_file(root / "full" / "checkpoint.gtkc") == io::read_file(root / "split" / "checkpoint.gtkc"));
  CHECK(io::read_file(root / "full" / "metrics.csv") == io::read_file(root / "split" / "metrics.csv"));

  auto loaded = harness::load_tokenizer(root / "full" / "checkpoint.gtkc");
  CHECK(loaded.step == 6);
  CHECK(loaded.config.digest() == config.digest());
  auto images = corpus.val.images.narrow(0, 0, 2);
  torch::NoGradGuard guard;
  full.tokenizer->eval();
  loaded.tokenizer->eval();
  CHECK(torch::equal(full.tokenizer->tokenize(images), loaded.tokenizer->tokenize(images)));
}

TEST_CASE("resume refuses a checkpoint from another config") {
  auto config = tiny();
  const auto corpus = harness::load_corpus(config.data);
  const auto root = fixtures::scratch("mismatch");
  harness::TrainOptions pause;
  pause.stop_at = 1;
  harness::train_tokenizer(config, corpus, root, pause);
  auto doc = tiny_doc();
  doc.set("train.steps", "8");
  CHECK_THROWS_AS(harness::train_tokenizer(ExperimentConfig::from_doc(doc), corpus, root), ValidationError);
}

TEST_CASE("sweep expansion is the cartesian product of its axes") {
  auto doc = tiny_doc();
  doc.set("sweep.tiers", "[\"S-S\", \"S-B\"]");
  doc.set("sweep.lambdas", "[0, 0.5]");
  doc.set("sweep.seeds", "[0, 1, 2]");
  auto cells = harness::expand_sweep(doc);
  CHECK(cells.size() == 12);
  std::set<std::string> names;
  for (const auto& c : cells) names.insert(c.name);
  CHECK(names.size() == 12);
  CHECK(cells.back().config.tokenizer.decoder_tier == net::TierName::B);
  CHECK(cells.back().config.seed == 2);
  CHECK(cells.back().config.sem_reg.lambda == 0.5);
  CHECK(cells.back().config.sweep.empty());

  doc.set("sweep.tiers", "[\"S-S\", \"S-S\"]");
  CHECK(rule_of([&] { harness::expand_sweep(doc); }) == "sweep_axes");
}

TEST_CASE("single-cell sweep equals a standalone run and reports one row per config") {
  const auto root = fixtures::scratch("sweep");
  auto doc = tiny_doc();
  doc.set("sweep.seeds", "[3]");
  const auto cells = harness::expand_sweep(doc);
  REQUIRE(cells.size() == 1);

  auto summary = harness::run_sweep(doc, root);
  CHECK(summary.completed == 1);
  CHECK(summary.failed == 0);
  const auto cell_dir = summary.directory / cells[0].name;

  const auto corpus = harness::load_corpus(cells[0].config.data);
  auto standalone = harness::probe_run(cells[0].config, corpus, root / "standalone");
  CHECK(io::read_file(cell_dir / "probe_report.json") == standalone.probe.to_json());
  CHECK(io::read_file(cell_dir / "recon_report.json") == standalone.recon.to_json());
  CHECK(io::read_file(cell_dir / "checkpoint.gtkc") == io::read_file(root / "standalone" / "checkpoint.gtkc"));

  auto again = harness::run_sweep(doc, root);
  CHECK(again.reused == 1);
  CHECK(again.completed == 0);

  const auto csv = io::read_file(summary.directory / "report.csv");
  CHECK(line_count(csv) == 2);
  CHECK(csv.rfind(harness::kReportHeader, 0) == 0);
  CHECK(csv.find(cells[0].name + ",S,S,0.5,3,") != std::string::npos);
  CHECK(std::filesystem::exists(summary.directory / "plots" / "val_loss.png"));

  auto rows = harness::collect_report(summary.directory);
  REQUIRE(rows.size() == 1);
  CHECK(rows[0].status == "ok");
  CHECK(rows[0].total_params == net::parameter_count(cells[0].config.tokenizer).total());

  // A cell directory without reports shows up as missing.
  std::filesystem::create_directories(summary.directory / "ghost");
  io::atomic_write(summary.directory / "ghost" / "config.toml", cells[0].config.canonical_text());
  harness::write_report(summary.directory);
  const auto csv2 = io::read_file(summary.directory / "report.csv");
  CHECK(line_count(csv2) == 3);
  CHECK(csv2.find("ghost,S,S,0.5,3,") != std::string::npos);
  CHECK(csv2.find(",missing,") != std::string::npos);
}

}  // TEST_SUITE
