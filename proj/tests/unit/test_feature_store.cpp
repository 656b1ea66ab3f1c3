#include <cmath>
#include <cstring>
#include <fstream>
#include <functional>
#include <map>
#include <limits>
#include <set>

#include <gtest/gtest.h>

#include "rcs/errors.hpp"
#include "rcs/feature_store.hpp"
#include "rcs/random.hpp"
#include "support/temp_dir.hpp"

using namespace rcs;
using rcs::testing::TempDir;

namespace {

FeatureSet small_set() {
  FeatureSet s;
  s.dim = 4;
  s.catalog = {{3, "harmless"}, {9, "jailbreak"}};
  s.records.push_back({{1.0f, -2.5f, 0.125f, 3e-8f}, 3, Label::Benign, Modality::Text});
  s.records.push_back({{-0.0f, 7.0f, 1e30f, -1.5f}, 9, Label::Malicious, Modality::Multimodal});
  return s;
}

FeatureSet random_set(std::size_t n, std::size_t dim, std::uint64_t seed) {
  Rng rng(seed);
  FeatureSet s;
  s.dim = dim;
  s.catalog = {{1, "a"}, {2, "b"}, {5, "c"}};
  const std::uint32_t ids[] = {1, 2, 5};
  for (std::size_t i = 0; i < n; ++i) {
    FeatureRecord r;
    for (std::size_t j = 0; j < dim; ++j) r.vector.push_back(static_cast<float>(rng.normal() * 10.0));
    r.dataset_id = ids[rng.below(3)];
    r.label = rng.below(2) ? Label::Malicious : Label::Benign;
    r.modality = rng.below(2) ? Modality::Multimodal : Modality::Text;
    s.records.push_back(r);
  }
  return s;
}

void expect_code(ErrorCode code, const std::function<void()>& fn) {
  try {
    fn();
    FAIL() << "expected " << error_code_name(code);
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), code) << e.what();
  }
}

}  // namespace

TEST(FeatureFile, RoundTripIsBitExact) {
  TempDir dir;
  const auto s = small_set();
  write_feature_file(s, dir / "f.rcsf");
  const auto back = read_feature_file(dir / "f.rcsf");
  ASSERT_EQ(back.size(), 2u);
  for (std::size_t i = 0; i < 2; ++i) {
    EXPECT_EQ(std::memcmp(back.records[i].vector.data(), s.records[i].vector.data(), 16), 0);
  }
  EXPECT_EQ(back, s);
}

TEST(FeatureFile, SizeFollowsLayout) {
  TempDir dir;
  write_feature_file(small_set(), dir / "f.rcsf");
  EXPECT_EQ(std::filesystem::file_size(dir / "f.rcsf"), 64u);
  std::ifstream in(dir / "f.rcsf", std::ios::binary);
  char magic[8];
  in.read(magic, 8);
  EXPECT_EQ(std::string(magic, 8), "RCSFEAT1");
}

TEST(FeatureFile, EmptySetIsHeaderOnly) {
  TempDir dir;
  FeatureSet s;
  s.dim = 7;
  s.catalog = {{1, "x"}};
  write_feature_file(s, dir / "e.rcsf");
  EXPECT_EQ(std::filesystem::file_size(dir / "e.rcsf"), 16u);
  const auto back = read_feature_file(dir / "e.rcsf");
  EXPECT_TRUE(back.empty());
  EXPECT_EQ(back.dim, 7u);
}

TEST(FeatureFile, LargeDimensionSplitsIntoTwoHalves) {
  TempDir dir;
  FeatureSet s;
  s.dim = 70000;
  s.catalog = {{0, "big"}};
  s.records.push_back({std::vector<float>(70000, 0.5f), 0, Label::Benign, Modality::Text});
  write_feature_file(s, dir / "big.rcsf");
  std::ifstream in(dir / "big.rcsf", std::ios::binary);
  unsigned char header[16];
  in.read(reinterpret_cast<char*>(header), 16);
  EXPECT_EQ(header[12] | (header[13] << 8), 70000 % 65536);
  EXPECT_EQ(header[14] | (header[15] << 8), 1);
  EXPECT_EQ(read_feature_file(dir / "big.rcsf"), s);
}

TEST(FeatureFile, RandomRoundTrips) {
  TempDir dir;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto s = random_set(1 + seed * 3, 1 + seed % 9, seed);
    write_feature_file(s, dir / "r.rcsf");
    EXPECT_EQ(read_feature_file(dir / "r.rcsf"), s) << "seed " << seed;
  }
}

TEST(FeatureFile, LayerTagSurvives) {
  TempDir dir;
  auto s = small_set();
  s.layer = 16;
  write_feature_file(s, dir / "l.rcsf");
  EXPECT_EQ(read_feature_file(dir / "l.rcsf").layer, std::optional<int>(16));
}

TEST(FeatureFile, ZeroLengthFileIsBadMagic) {
  TempDir dir;
  std::ofstream(dir / "z.rcsf").close();
  expect_code(ErrorCode::BadMagic, [&] { read_feature_file(dir / "z.rcsf"); });
}

TEST(FeatureFile, ShortPayloadIsTruncated) {
  TempDir dir;
  auto s = small_set();
  s.records.push_back(s.records[0]);
  write_feature_file(s, dir / "t.rcsf");
  std::filesystem::resize_file(dir / "t.rcsf", 16 + 2 * 24);
  expect_code(ErrorCode::TruncatedPayload, [&] { read_feature_file(dir / "t.rcsf"); });
}

TEST(FeatureFile, NaNInPayloadIsRejected) {
  TempDir dir;
  write_feature_file(small_set(), dir / "n.rcsf");
  std::fstream f(dir / "n.rcsf", std::ios::binary | std::ios::in | std::ios::out);
  const float nan = std::numeric_limits<float>::quiet_NaN();
  f.seekp(16 + 8 + 4);
  f.write(reinterpret_cast<const char*>(&nan), 4);
  f.close();
  expect_code(ErrorCode::NonFiniteValue, [&] { read_feature_file(dir / "n.rcsf"); });
}

TEST(FeatureFile, UnknownDatasetIdIsRejected) {
  TempDir dir;
  write_feature_file(small_set(), dir / "u.rcsf");
  std::ofstream(catalog_path_for(dir / "u.rcsf")) << R"({"3": "harmless"})";
  expect_code(ErrorCode::UnknownDatasetId, [&] { read_feature_file(dir / "u.rcsf"); });
}

TEST(FeatureFile, NaNRecordRefusedBeforeWriting) {
  TempDir dir;
  auto s = small_set();
  s.records[1].vector[2] = std::numeric_limits<float>::quiet_NaN();
  expect_code(ErrorCode::InvariantViolation, [&] { write_feature_file(s, dir / "bad.rcsf"); });
  EXPECT_FALSE(std::filesystem::exists(dir / "bad.rcsf"));
}

TEST(FeatureFile, DuplicateCatalogNamesViolateInvariants) {
  auto s = small_set();
  s.catalog[9] = "harmless";
  expect_code(ErrorCode::InvariantViolation, [&] { check_invariants(s); });
}

TEST(Normalize, ThreeFourFive) {
  FeatureSet s;
  s.dim = 2;
  s.catalog = {{0, "x"}};
  s.records.push_back({{3.0f, 4.0f}, 0, Label::Benign, Modality::Text});
  s.records.push_back({{1.0f, 0.0f}, 0, Label::Benign, Modality::Text});
  const auto n = l2_normalize(s);
  EXPECT_NEAR(n.records[0].vector[0], 0.6f, 1e-7);
  EXPECT_NEAR(n.records[0].vector[1], 0.8f, 1e-7);
  EXPECT_EQ(n.records[1].vector, (std::vector<float>{1.0f, 0.0f}));
}

TEST(Normalize, ZeroVectorFails) {
  FeatureSet s;
  s.dim = 2;
  s.catalog = {{0, "x"}};
  s.records.push_back({{0.0f, 0.0f}, 0, Label::Benign, Modality::Text});
  expect_code(ErrorCode::ZeroVector, [&] { l2_normalize(s); });
}

TEST(Normalize, UnitNormAndIdempotent) {
  const auto s = random_set(200, 16, 3);
  const auto once = l2_normalize(s);
  const auto twice = l2_normalize(once);
  for (std::size_t i = 0; i < s.size(); ++i) {
    double sq = 0.0;
    for (std::size_t j = 0; j < 16; ++j) {
      sq += double(once.records[i].vector[j]) * once.records[i].vector[j];
      EXPECT_NEAR(once.records[i].vector[j], twice.records[i].vector[j], 1e-6);
      // direction preserved: same sign pattern
      EXPECT_EQ(std::signbit(once.records[i].vector[j]), std::signbit(s.records[i].vector[j]));
    }
    EXPECT_NEAR(std::sqrt(sq), 1.0, 1e-6);
  }
}

TEST(Split, SingleStratumEightTwo) {
  FeatureSet s;
  s.dim = 1;
  s.catalog = {{0, "x"}};
  for (int i = 0; i < 10; ++i) s.records.push_back({{float(i + 1)}, 0, Label::Benign, Modality::Text});
  const auto p = stratified_split(s, 0.8, 1);
  EXPECT_EQ(p.train.size(), 8u);
  EXPECT_EQ(p.validation.size(), 2u);
}

TEST(Split, TwoStrataFourOne) {
  FeatureSet s;
  s.dim = 1;
  s.catalog = {{0, "x"}, {1, "y"}};
  for (int i = 0; i < 10; ++i) s.records.push_back({{float(i)}, std::uint32_t(i / 5), Label::Benign, Modality::Text});
  const auto p = stratified_split(s, 0.8, 1);
  for (std::uint32_t id : {0u, 1u}) {
    std::size_t tr = 0, va = 0;
    for (const auto& r : p.train.records) tr += r.dataset_id == id;
    for (const auto& r : p.validation.records) va += r.dataset_id == id;
    EXPECT_EQ(tr, 4u);
    EXPECT_EQ(va, 1u);
  }
}

TEST(Split, PartitionAndDeterminism) {
  const auto s = random_set(333, 3, 11);
  const auto a = stratified_split(s, 0.7, 7);
  const auto b = stratified_split(s, 0.7, 7);
  const auto c = stratified_split(s, 0.7, 8);
  EXPECT_EQ(a.train_indices, b.train_indices);
  EXPECT_EQ(a.validation_indices, b.validation_indices);
  EXPECT_EQ(a.train, b.train);
  EXPECT_EQ(a.train.size(), c.train.size());

  std::set<std::size_t> seen(a.train_indices.begin(), a.train_indices.end());
  for (auto i : a.validation_indices) EXPECT_TRUE(seen.insert(i).second) << "index " << i << " in both halves";
  EXPECT_EQ(seen.size(), s.size());

  // per-stratum counts within one of fraction * size
  std::map<std::pair<std::uint32_t, int>, std::pair<int, int>> strata;
  for (std::size_t i = 0; i < s.size(); ++i) strata[{s.records[i].dataset_id, int(s.records[i].label)}].first++;
  for (auto i : a.train_indices) strata[{s.records[i].dataset_id, int(s.records[i].label)}].second++;
  for (const auto& [key, counts] : strata) EXPECT_LE(std::abs(counts.second - 0.7 * counts.first), 1.0);
}

TEST(Split, BadFractionAndEmptySet) {
  const auto s = random_set(10, 2, 1);
  expect_code(ErrorCode::InvalidArgument, [&] { stratified_split(s, 1.0, 0); });
  expect_code(ErrorCode::InvalidArgument, [&] { stratified_split(s, 0.0, 0); });
  FeatureSet empty;
  empty.dim = 2;
  expect_code(ErrorCode::EmptySet, [&] { stratified_split(empty, 0.5, 0); });
}
