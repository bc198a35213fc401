#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "healnet/healnet.hpp"

using namespace healnet;

namespace {

RunConfig parse(const std::string& text, std::vector<std::string>& errors) {
  RunConfig c;
  c.merge_text(text, "test.kv", errors);
  for (const auto& p : c.problems()) errors.push_back(p);
  return c;
}

Checkpoint sample_checkpoint() {
  FusionConfig cfg;
  cfg.modalities = {{"omic", ModalityKind::tabular, 5, 1}, {"wsi", ModalityKind::patches, 3, 2}};
  cfg.latent_channels = 2;
  cfg.latent_dims = 3;
  cfg.heads = 2;
  cfg.dims_per_head = 2;
  cfg.snn_hidden_mult = 2;
  cfg.attn_dropout = 0.25f;
  cfg.head = HeadMode::mean_pool;
  cfg.latent_trainable = false;
  const auto model = HealNetModel::create(cfg, 3);
  Checkpoint ck{cfg, model.parameters(), {}};
  ck.aux["bins"] = Tensor({3}, {1.5f, 4.0f, 9.25f});
  ck.aux["scaler.omic.mean"] = Tensor({5}, {0, 1, 2, 3, 4});
  return ck;
}

}  // namespace

TEST(RunConfigTest, DefaultsAreValid) {
  RunConfig c;
  EXPECT_TRUE(c.problems().empty());
  EXPECT_EQ(c.train().folds, 5u);
  EXPECT_EQ(c.modality_names(), (std::vector<std::string>{"omic", "wsi"}));
}

TEST(RunConfigTest, ListsEveryError) {
  std::vector<std::string> errors;
  parse("# comment\nepochs=ten\nlatent_dim=4\nreg_mode=l1_snn\nfoo\nheads=2\nattn_dropout=x\n", errors);
  ASSERT_EQ(errors.size(), 4u);
  auto has = [&](const std::string& s) {
    for (const auto& e : errors)
      if (e.find(s) != std::string::npos) return true;
    return false;
  };
  EXPECT_TRUE(has("latent_dim"));
  EXPECT_TRUE(has("test.kv:5"));
  EXPECT_TRUE(has("epochs"));
  EXPECT_TRUE(has("attn_dropout"));
}

TEST(RunConfigTest, SemanticChecks) {
  std::vector<std::string> errors;
  parse("train_frac=0.5\nreg_mode=ridge\ntoken_grid=wsi:4by4\n", errors);
  EXPECT_EQ(errors.size(), 3u);
}

TEST(RunConfigTest, ReportEchoReproducesConfig) {
  std::vector<std::string> errors;
  auto c = parse("latent_dims=12\nseed=77\nmodalities=wsi\n", errors);
  ASSERT_TRUE(errors.empty());
  const std::string report = format_report(c, CvResult{}, 1.5);
  auto back = parse(report, errors);
  EXPECT_TRUE(errors.empty());
  EXPECT_EQ(back.to_text(), c.to_text());
}

TEST(RunConfigTest, TokenGrids) {
  std::vector<std::string> errors;
  const auto c = parse("token_grid=wsi:4x4, omic:2x16\n", errors);
  ASSERT_TRUE(errors.empty());
  const auto g = c.token_grids();
  EXPECT_EQ(g.at("wsi"), (std::pair<std::size_t, std::size_t>{4, 4}));
  EXPECT_EQ(g.at("omic"), (std::pair<std::size_t, std::size_t>{2, 16}));
}

TEST(RunConfigTest, PresetsParse) {
  for (const char* name : {"blca", "brca", "kirp", "ucec", "synth"}) {
    const auto path = std::filesystem::path(HEALNET_PRESET_DIR) / (std::string(name) + ".kv");
    std::vector<std::string> errors;
    const auto c = load_run_config(path, errors);
    for (const auto& p : c.problems()) errors.push_back(p);
    EXPECT_TRUE(errors.empty()) << name << ": " << (errors.empty() ? "" : errors.front());
  }
}

TEST(CheckpointTest, RoundTripIsExact) {
  const auto ck = sample_checkpoint();
  const auto back = deserialize_checkpoint(serialize_checkpoint(ck));
  EXPECT_EQ(serialize_checkpoint(back), serialize_checkpoint(ck));
  EXPECT_EQ(back.config.head, HeadMode::mean_pool);
  EXPECT_FALSE(back.config.latent_trainable);
  EXPECT_EQ(back.config.attn_dropout, 0.25f);
  EXPECT_TRUE(back.aux.at("bins").same_values(ck.aux.at("bins")));
  const auto model = model_from_checkpoint(back);
  EXPECT_FALSE(model.parameters()[model.parameters().find("latent")].trainable);
}

TEST(CheckpointTest, CorruptionIsDetected) {
  const std::string bytes = serialize_checkpoint(sample_checkpoint());
  EXPECT_THROW(deserialize_checkpoint(bytes.substr(0, bytes.size() - 2)), FormatError);
  EXPECT_THROW(deserialize_checkpoint(bytes + "x"), FormatError);
  EXPECT_THROW(deserialize_checkpoint("HEAX" + bytes.substr(4)), FormatError);
  std::string version = bytes;
  version[4] = 9;
  EXPECT_THROW(deserialize_checkpoint(version), FormatError);
}

TEST(CheckpointTest, ParametersMustMatchConfig) {
  auto ck = sample_checkpoint();
  ck.config.latent_dims = 4;
  EXPECT_THROW(model_from_checkpoint(ck), FormatError);
}

TEST(DropPlanTest, Parse) {
  EXPECT_EQ(DropPlan::parse("none").kind, DropPlan::Kind::none);
  EXPECT_EQ(DropPlan::parse("half-half").name(), "half-half");
  EXPECT_EQ(DropPlan::parse("drop:wsi").modality, "wsi");
  EXPECT_THROW(DropPlan::parse("drop:"), ConfigError);
  EXPECT_THROW(DropPlan::parse("some"), ConfigError);
}

TEST(DropPlanTest, HalfHalfKeepsExactlyOne) {
  FusionConfig cfg;
  cfg.modalities = {{"a", ModalityKind::tabular, 1, 1}, {"b", ModalityKind::tabular, 1, 1}};
  const auto masks = DropPlan::parse("half-half").masks(cfg, 11, 5);
  std::size_t only_a = 0;
  for (std::size_t r = 0; r < 11; ++r) {
    EXPECT_EQ(masks[0][r] + masks[1][r], 1);
    only_a += masks[1][r];
  }
  EXPECT_TRUE(only_a == 5 || only_a == 6);
  EXPECT_EQ(masks, DropPlan::parse("half-half").masks(cfg, 11, 5));
}

TEST(EvaluateMissing, NonePlanMatchesTraining) {
  SynthScenario sc;
  sc.n = 60;
  sc.p = 6;
  sc.t = 4;
  sc.d_x = 2;
  const auto ds = generate_synthetic(sc, 2);
  FusionConfig model;
  model.modalities = modality_specs(ds, std::vector<std::string>{"omic", "wsi"});
  model.latent_channels = 2;
  model.latent_dims = 4;
  model.heads = 1;
  model.dims_per_head = 4;
  TrainConfig t;
  t.epochs = 2;
  t.folds = 3;
  t.train_frac = 0.5;
  t.val_frac = 0.2;
  t.test_frac = 0.3;
  const auto cv = cross_validate(ds, model, t);
  for (std::size_t f = 0; f < 3; ++f) {
    const auto none = evaluate_missing(*cv.folds[f].checkpoint, ds, cv.splits[f].test, DropPlan{}, 0);
    EXPECT_EQ(none.full_cindex, cv.folds[f].test_cindex);
    EXPECT_EQ(none.plan_cindex, none.full_cindex);
    const auto both = evaluate_missing(*cv.folds[f].checkpoint, ds, cv.splits[f].test, DropPlan::parse("half-half"), 0);
    EXPECT_EQ(both.all_absent, 0u);
  }
  EXPECT_THROW(evaluate_missing(*cv.folds[0].checkpoint, ds, cv.splits[0].test, DropPlan::parse("drop:rna"), 0),
               ConfigError);
}
