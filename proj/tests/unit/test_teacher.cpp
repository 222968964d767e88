#include "oracles.hpp"
#include "tensor_bridge.hpp"

#include "vqtok/binary_io.hpp"
#include "vqtok/errors.hpp"
#include "vqtok/teacher.hpp"

#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <random>

using namespace vqtok;
using namespace vqtok::semantic;
using oracle::from_vec;
using oracle::to_vec;

namespace {

std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("vqtok_unit_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace

TEST_SUITE("semantic_teacher") {

TEST_CASE("frozen teacher is deterministic and shaped as a square grid") {
  FrozenRandomTeacher a(16, 5), b(16, 5);
  auto x = torch::rand({2, 3, 32, 32});
  auto fa = a.forward(x), fb = b.forward(x);
  CHECK(torch::equal(fa.values, fb.values));
  CHECK(torch::equal(fa.values, a.forward(x).values));
  CHECK(fa.grid_h * fa.grid_w == fa.values.size(1));
  CHECK(fa.values.size(2) == 16);
  CHECK(fa.source == TeacherSource::frozen_random);
}

TEST_CASE("zero image through a zero-bias stem gives zero first-layer pre-activations") {
  FrozenRandomTeacher t(8, 1, /*zero_bias=*/true);
  CHECK(t.first_layer_preactivation(torch::zeros({1, 3, 16, 16})).abs().max().item<double>() == 0.0);
}

TEST_CASE("teacher parameters never require gradients") {
  FrozenRandomTeacher t;
  for (const auto& p : t.parameters()) CHECK_FALSE(p.requires_grad());
}

TEST_CASE("feature archive round trip is bit identical") {
  auto dir = scratch_dir("archive");
  FeatureArchive ar(4, 2, 2, "teacher-x");
  auto f1 = torch::randn({4, 4}), f2 = torch::randn({4, 4});
  ar.put("img-1", f1);
  ar.put("img-2", f2);
  ar.write(dir / "f.gtkf");
  auto back = FeatureArchive::read(dir / "f.gtkf");
  CHECK(back.size() == 2);
  CHECK(back.teacher_id() == "teacher-x");
  CHECK(torch::equal(back.get("img-1"), f1));
  CHECK(torch::equal(back.get("img-2"), f2));
  back.write(dir / "g.gtkf");
  CHECK(io::read_file(dir / "f.gtkf") == io::read_file(dir / "g.gtkf"));
  CHECK_THROWS_AS(back.get("img-3"), ValidationError);
}

TEST_CASE("archive checksum mismatch is rejected") {
  auto dir = scratch_dir("archive_bad");
  FeatureArchive ar(2, 1, 1, "t");
  ar.put("a", torch::ones({1, 2}));
  ar.write(dir / "f.gtkf");
  auto bytes = io::read_file(dir / "f.gtkf");
  bytes[bytes.size() - 1] ^= 0x40;
  std::ofstream(dir / "f.gtkf", std::ios::binary) << bytes;
  CHECK_THROWS_AS(FeatureArchive::read(dir / "f.gtkf"), FormatError);
}

TEST_CASE("feature store caches on disk and serves archived ids") {
  auto dir = scratch_dir("store");
  auto x = torch::rand({3, 3, 32, 32});
  std::vector<std::string> ids{"a", "b", "c"};
  TeacherFeatureStore store(FrozenRandomTeacher(8, 3), dir / "cache.gtkf");
  auto first = store.fetch(ids, x);
  store.flush();
  REQUIRE(std::filesystem::exists(dir / "cache.gtkf"));
  auto archived = TeacherFeatureStore::from_archive(dir / "cache.gtkf");
  auto again = archived.fetch(ids, torch::Tensor());
  CHECK(torch::equal(first.values, again.values));
  CHECK(again.source == TeacherSource::precomputed_file);
  CHECK_THROWS_AS(archived.fetch({"zzz"}, torch::Tensor()), ValidationError);
}

TEST_CASE("features do not depend on batch composition") {
  TeacherFeatureStore s1(FrozenRandomTeacher(8, 3)), s2(FrozenRandomTeacher(8, 3));
  auto x = torch::rand({2, 3, 32, 32});
  auto both = s1.fetch({"p", "q"}, x);
  auto single = s2.fetch({"q"}, x.narrow(0, 1, 1));
  CHECK(torch::equal(both.values[1], single.values[0]));
}

TEST_CASE("align_grids on equal grids is the identity") {
  auto dec = torch::randn({2, 16, 5});
  TeacherFeatures t{torch::randn({2, 16, 3})};
  auto pairs = align_grids(dec, t);
  CHECK(torch::equal(pairs.teacher, t.values));
  CHECK(torch::equal(pairs.decoder, dec));
}

TEST_CASE("align_grids 4x4 to 2x2 matches the scalar bilinear oracle") {
  std::mt19937_64 rng(7);
  auto v = oracle::normal(rng, 16 * 3);
  TeacherFeatures t{from_vec(v, {1, 16, 3})};
  auto pairs = align_grids(torch::zeros({1, 4, 8}, torch::kFloat64), t);
  CHECK(oracle::max_rel_error(to_vec(pairs.teacher), oracle::bilinear_resample(v, 4, 4, 3, 2), 1e-9) < 1e-9);

  // Upsampling path too: 2x2 teacher onto a 4x4 decoder grid.
  auto small = oracle::normal(rng, 4 * 2);
  TeacherFeatures t2{from_vec(small, {1, 4, 2})};
  auto up = align_grids(torch::zeros({1, 16, 8}, torch::kFloat64), t2);
  CHECK(oracle::max_rel_error(to_vec(up.teacher), oracle::bilinear_resample(small, 2, 2, 2, 4), 1e-9) < 1e-9);
}

TEST_CASE("align_grids keeps constant fields constant and rejects unshaped grids") {
  TeacherFeatures t{torch::full({1, 64, 2}, 3.25, torch::kFloat64)};
  auto pairs = align_grids(torch::zeros({1, 16, 4}), t);
  CHECK((pairs.teacher - 3.25).abs().max().item<double>() < 1e-12);
  TeacherFeatures odd{torch::zeros({1, 6, 2})};
  CHECK_THROWS_AS(align_grids(torch::zeros({1, 4, 4}), odd), ValidationError);
  odd.grid_h = 2;
  odd.grid_w = 3;
  CHECK_NOTHROW(align_grids(torch::zeros({1, 4, 4}), odd));
}

TEST_CASE("negative cosine closed forms") {
  auto u = torch::randn({3, 4, 6}, torch::kFloat64);
  CHECK(negative_cosine(u * 2.5, u).item<double>() == doctest::Approx(-1.0).epsilon(1e-12));
  auto a = torch::tensor({1.0, 0.0, 0.0, 1.0}, torch::kFloat64).reshape({2, 2});
  auto b = torch::tensor({0.0, 3.0, -2.0, 0.0}, torch::kFloat64).reshape({2, 2});
  CHECK(negative_cosine(a, b).item<double>() == doctest::Approx(0.0));
  auto zero = negative_cosine(torch::zeros({2, 3}), torch::ones({2, 3}));
  CHECK(std::isfinite(zero.item<double>()));
}

TEST_CASE("semantic reg loss matches the per-token cosine oracle and is scale invariant") {
  torch::manual_seed(8);
  Projector proj(6, 4);
  proj->to(torch::kFloat64);
  auto dec = torch::randn({2, 9, 6}, torch::kFloat64);
  auto teach = torch::randn({2, 9, 4}, torch::kFloat64);
  const double got = semantic_reg_loss(dec, teach, proj).item<double>();
  auto projected = proj->forward(dec);
  CHECK(projected.size(-1) == 4);
  CHECK(got == doctest::Approx(oracle::negative_cosine(to_vec(projected), to_vec(teach), 4, kCosineEps)).epsilon(1e-12));
  CHECK(got >= -1.0);
  CHECK(got <= 1.0);
  CHECK(std::abs(negative_cosine(projected * 3.0, teach * 0.2).item<double>() - got) < 1e-6);
}

TEST_CASE("sem-reg config validation") {
  SemRegConfig c;
  c.align_layer = 0;
  CHECK_THROWS_AS(c.validate(4), ValidationError);
  c.align_layer = 5;
  CHECK_THROWS_AS(c.validate(4), ValidationError);
  c.align_layer = 4;
  CHECK_NOTHROW(c.validate(4));
  c.teacher = TeacherSource::precomputed_file;
  CHECK_THROWS_AS(c.validate(4), ValidationError);
}

}  // TEST_SUITE
