#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "healnet/healnet.hpp"

using namespace healnet;
namespace fs = std::filesystem;

namespace {

class TempDir : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           ("healnet_data_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  fs::path write(const std::string& name, const std::string& text) {
    std::ofstream(dir_ / name, std::ios::binary) << text;
    return dir_ / name;
  }

  fs::path dir_;
};

ModalityBlock patch_block(std::size_t n, std::size_t t, std::size_t dx, std::vector<std::size_t> lengths) {
  ModalityBlock b;
  b.name = "wsi";
  b.kind = ModalityKind::patches;
  std::vector<float> v(n * t * dx, 0.0f);
  for (std::size_t q = 0; q < v.size(); ++q) v[q] = 0.1f * static_cast<float>(q) - 1.7f;
  b.data = Tensor({n, t, dx}, std::move(v));
  b.lengths = std::move(lengths);
  for (auto l : b.lengths) b.present.push_back(l > 0);
  for (std::size_t i = 0; i < n; ++i) b.ids.push_back("p" + std::to_string(i));
  return b;
}

SurvivalTable records_for(std::vector<std::string> ids) {
  SurvivalTable t;
  t.ids = std::move(ids);
  for (std::size_t i = 0; i < t.ids.size(); ++i) t.records.push_back({1.0 + i, false, std::nullopt});
  return t;
}

ModalityBlock id_block(const std::string& name, std::vector<std::string> ids) {
  ModalityBlock b;
  b.name = name;
  b.data = Tensor::ones({ids.size(), 2, 1});
  b.present.assign(ids.size(), 1);
  b.lengths.assign(ids.size(), 2);
  b.ids = std::move(ids);
  return b;
}

}  // namespace

using Csv = TempDir;
using Hpf = TempDir;
using Join = TempDir;

TEST_F(Csv, ThreeByTwoKeepsIdOrder) {
  const auto b = load_tabular(write("omic.csv", "id,x,y\nc,1,2\na,3,4\nb,5,6\n"));
  EXPECT_EQ(b.data.shape(), (Shape{3, 2, 1}));
  EXPECT_EQ(b.ids, (std::vector<std::string>{"c", "a", "b"}));
  EXPECT_EQ(b.data[2], 3.0f);
  EXPECT_EQ(b.name, "omic");
  EXPECT_EQ(b.feature_names, (std::vector<std::string>{"x", "y"}));
}

TEST_F(Csv, EmptyOrNaCellMarksAbsent) {
  const auto b = load_tabular(write("t.csv", "id,x,y\na,1,\nb,NA,2\nc,1,2\n"));
  EXPECT_EQ(b.present, (std::vector<std::uint8_t>{0, 0, 1}));
  EXPECT_TRUE(std::isnan(b.data[0]));
}

TEST_F(Csv, ParseErrorsCarryLine) {
  try {
    load_tabular(write("bad.csv", "id,x\na,1\nb,zz\n"));
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_EQ(e.line(), 3u);
  }
  EXPECT_THROW(load_tabular(write("ragged.csv", "id,x,y\na,1\n")), ParseError);
  EXPECT_THROW(load_tabular(dir_ / "missing.csv"), IoError);
}

TEST_F(Csv, RoundTrip) {
  auto b = load_tabular(write("t.csv", "id,x,y\na,0.1,-2.5e-3\nb,,1\nc,3.14159274,7\n"));
  write_tabular(dir_ / "out.csv", b);
  const auto c = load_tabular(dir_ / "out.csv");
  EXPECT_EQ(c.ids, b.ids);
  EXPECT_EQ(c.present, b.present);
  for (std::size_t q = 0; q < 6; ++q)
    if (b.present[q / 2]) {
      EXPECT_EQ(c.data[q], b.data[q]);
    }
}

TEST(Scaler, ConstantColumnBecomesZeroWithWarning) {
  ModalityBlock b;
  b.name = "omic";
  b.data = Tensor({3, 2, 1}, {5, 1, 5, 2, 5, 3});
  b.present = {1, 1, 1};
  b.lengths = {2, 2, 2};
  const std::vector<std::size_t> rows = {0, 1, 2};
  const auto s = FeatureScaler::fit(b, rows);
  ASSERT_EQ(s.warnings.size(), 1u);
  const auto out = s.apply(b);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(out.data[i * 2], 0.0f);
    EXPECT_FALSE(std::isnan(out.data[i * 2 + 1]));
  }
  EXPECT_NEAR(out.data[1], -std::sqrt(1.5), 1e-6);
}

TEST(Scaler, IgnoresAbsentRowsAndNonTrainingRows) {
  ModalityBlock b;
  b.name = "omic";
  const float nan = std::numeric_limits<float>::quiet_NaN();
  b.data = Tensor({4, 1, 1}, {1, 3, nan, 100});
  b.present = {1, 1, 0, 1};
  b.lengths = {1, 1, 0, 1};
  const std::vector<std::size_t> rows = {0, 1, 2};
  const auto s = FeatureScaler::fit(b, rows);
  EXPECT_FLOAT_EQ(s.mean[0], 2.0f);
  EXPECT_FLOAT_EQ(s.stddev[0], 1.0f);
  const auto out = s.apply(b);
  EXPECT_TRUE(std::isnan(out.data[2]));
  EXPECT_FLOAT_EQ(out.data[3], 98.0f);
}

TEST_F(Hpf, SingleSampleRoundTrip) {
  const auto b = patch_block(1, 1, 4, {1});
  write_patch_features(dir_ / "wsi.hpf", b);
  EXPECT_EQ(fs::file_size(dir_ / "wsi.hpf"), 4u + 12 + 4 + 16);
  const auto c = load_patch_features(dir_ / "wsi.hpf");
  EXPECT_TRUE(c.data.same_values(b.data));
  EXPECT_EQ(c.ids, b.ids);
}

TEST_F(Hpf, ZeroPatchesMeansAbsentAndPaddingIsKept) {
  const auto b = patch_block(3, 4, 2, {4, 0, 2});
  write_patch_features(dir_ / "wsi.hpf", b);
  const auto c = load_patch_features(dir_ / "wsi.hpf");
  EXPECT_EQ(c.present, (std::vector<std::uint8_t>{1, 0, 1}));
  EXPECT_EQ(c.lengths, (std::vector<std::size_t>{4, 0, 2}));
  EXPECT_TRUE(std::isnan(c.data[8]));
  EXPECT_EQ(c.data[16], b.data[16]);
  EXPECT_EQ(c.data[20], 0.0f);
}

TEST_F(Hpf, TruncatedFileReportsOffset) {
  write_patch_features(dir_ / "wsi.hpf", patch_block(2, 2, 2, {2, 2}));
  auto bytes = detail::read_all(dir_ / "wsi.hpf");
  bytes.resize(bytes.size() - 3);
  write("cut.hpf", bytes);
  try {
    load_patch_features(dir_ / "cut.hpf");
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_GT(e.offset(), 16u);
  }
  write("magic.hpf", "HPF2" + bytes.substr(4));
  EXPECT_THROW(load_patch_features(dir_ / "magic.hpf"), FormatError);
}

TEST(JoinTest, IdenticalIdSetsKeepN) {
  const auto ds = join_modalities({id_block("a", {"x", "y", "z"}), id_block("b", {"z", "x", "y"})},
                                  records_for({"x", "y", "z"}));
  EXPECT_EQ(ds.size(), 3u);
  for (const auto& m : ds.modalities) EXPECT_EQ(m.present, (std::vector<std::uint8_t>{1, 1, 1}));
}

TEST(JoinTest, PartialOverlapMasks) {
  JoinReport rep;
  const auto ds =
      join_modalities({id_block("m1", {"a", "b"}), id_block("m2", {"b", "c"})}, records_for({"a", "b", "c"}), &rep);
  EXPECT_EQ(ds.size(), 3u);
  EXPECT_EQ(ds.modalities[0].present, (std::vector<std::uint8_t>{1, 1, 0}));
  EXPECT_EQ(ds.modalities[1].present, (std::vector<std::uint8_t>{0, 1, 1}));
  EXPECT_EQ(rep.complete, 1u);
}

TEST(JoinTest, BladderStyleOverlap) {
  std::vector<std::string> omic, slide;
  for (int i = 0; i < 437; ++i) omic.push_back("TCGA-" + std::to_string(i));
  slide.assign(omic.begin(), omic.begin() + 436);
  JoinReport rep;
  const auto ds = join_modalities({id_block("omic", omic), id_block("wsi", slide)}, records_for(omic), &rep);
  EXPECT_EQ(rep.complete, 436u);
  EXPECT_EQ(ds.size(), 437u);
}

TEST(JoinTest, Errors) {
  EXPECT_THROW(join_modalities({id_block("m", {"q"})}, records_for({"a", "b"})), JoinError);
  EXPECT_THROW(join_modalities({id_block("m", {"a", "a"})}, records_for({"a", "b"})), JoinError);
  JoinReport rep;
  join_modalities({id_block("m", {"a", "zz"})}, records_for({"a", "b"}), &rep);
  EXPECT_EQ(rep.dropped[0], 1u);
}

TEST_F(Join, DatasetDirectoryRoundTrip) {
  SynthScenario sc;
  sc.n = 20;
  sc.p = 4;
  sc.t = 3;
  sc.d_x = 2;
  sc.scenario = Scenario::noise_modality;
  const auto ds = generate_synthetic(sc, 1);
  save_dataset(dir_, ds);
  for (const char* f : {"omic.csv", "wsi.hpf", "wsi.ids", "noise.csv", "survival.csv"})
    EXPECT_TRUE(fs::exists(dir_ / f)) << f;
  const auto back = load_dataset(dir_, {"omic", "wsi", "noise"});
  EXPECT_EQ(back.ids, ds.ids);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    EXPECT_EQ(back.records[i].months, ds.records[i].months);
    EXPECT_EQ(back.records[i].censored, ds.records[i].censored);
  }
  for (std::size_t m = 0; m < 3; ++m) EXPECT_TRUE(back.modalities[m].data.same_values(ds.modalities[m].data));
  EXPECT_THROW(load_dataset(dir_, {"rna"}), IoError);
}

TEST_F(Join, SurvivalParseErrors) {
  EXPECT_THROW(load_survival(write("s.csv", "id,months,censored\na,-1,0\n")), ParseError);
  EXPECT_THROW(load_survival(write("s2.csv", "id,months,censored\na,3,2\n")), ParseError);
}

TEST(Batch, SelectsRowsAndMasks) {
  auto b = patch_block(3, 2, 1, {2, 0, 1});
  const std::vector<std::size_t> rows = {2, 0};
  const auto batch = make_batch(b, 1, rows);
  EXPECT_EQ(batch.modality, 1u);
  EXPECT_EQ(batch.data.shape(), (Shape{2, 2, 1}));
  EXPECT_EQ(batch.data[0], b.data[4]);
  EXPECT_EQ(batch.lengths, (std::vector<std::size_t>{1, 2}));
  EXPECT_EQ(batch.present, (std::vector<std::uint8_t>{1, 1}));
}
