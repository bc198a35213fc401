#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <set>

#include "healnet/healnet.hpp"

using namespace healnet;

namespace {

ParameterStore single(float w) {
  ParameterStore s;
  s.add("w", Tensor({1}, {w}));
  return s;
}

Gradients grad_of(float g) { return Gradients({Tensor({1}, {g})}); }

MultiModalDataset tiny_dataset(std::uint64_t seed = 3) {
  SynthScenario sc;
  sc.n = 80;
  sc.p = 8;
  sc.t = 4;
  sc.d_x = 3;
  return generate_synthetic(sc, seed);
}

FusionConfig tiny_model(const MultiModalDataset& ds, std::vector<std::string> names = {"omic", "wsi"}) {
  FusionConfig cfg;
  cfg.modalities = modality_specs(ds, names);
  cfg.latent_channels = 3;
  cfg.latent_dims = 4;
  cfg.depth = 1;
  cfg.heads = 2;
  cfg.dims_per_head = 2;
  cfg.ff_dropout = 0.1f;
  return cfg;
}

TrainConfig tiny_train() {
  TrainConfig t;
  t.epochs = 3;
  t.folds = 3;
  t.train_frac = 0.5;
  t.val_frac = 0.2;
  t.test_frac = 0.3;
  t.seed = 4;
  return t;
}

}  // namespace

TEST(Adam, ZeroGradientLeavesParameters) {
  auto s = single(1.5f);
  AdamState st;
  for (int i = 0; i < 10; ++i) adam_step(s, grad_of(0.0f), st, 0.01);
  EXPECT_EQ(s[ParamId{0}].value[0], 1.5f);
}

TEST(Adam, MovesAgainstConstantGradient) {
  auto s = single(0.0f);
  AdamState st;
  for (int i = 0; i < 20; ++i) adam_step(s, grad_of(0.3f), st, 0.01);
  EXPECT_LT(s[ParamId{0}].value[0], 0.0f);
}

TEST(Adam, FollowsReferenceAndConverges) {
  auto run = [](double lr, int steps) {
    auto s = single(3.0f);
    AdamState st;
    double w = 3.0, m = 0, v = 0;
    for (int i = 1; i <= steps; ++i) {
      Tape tape;
      tape.backward(square(sum(tape.watch(s, ParamId{0}))));
      adam_step(s, tape.parameter_gradients(s), st, lr);
      const double g = 2 * w;
      m = 0.92 * m + 0.08 * g;
      v = 0.999 * v + 0.001 * g * g;
      w -= lr * (m / (1 - std::pow(0.92, i))) / (std::sqrt(v / (1 - std::pow(0.999, i))) + 1e-8);
    }
    return std::pair<double, double>{s[ParamId{0}].value[0], w};
  };
  const auto [got, want] = run(0.01, 500);
  EXPECT_NEAR(got, want, 1e-4);
  EXPECT_LT(std::fabs(run(0.05, 2000).first), 1e-3);
}

TEST(Adam, NonFiniteGradientNamesParameter) {
  auto s = single(1.0f);
  AdamState st;
  try {
    adam_step(s, grad_of(std::numeric_limits<float>::infinity()), st, 0.01);
    FAIL();
  } catch (const NumericalError& e) {
    EXPECT_NE(std::string(e.what()).find("'w'"), std::string::npos);
  }
}

TEST(OneCycle, Endpoints) {
  const std::size_t total = 200;
  EXPECT_DOUBLE_EQ(onecycle_lr(0, total, 0.008), 0.008 / 25);
  EXPECT_DOUBLE_EQ(onecycle_lr(60, total, 0.008), 0.008);
  EXPECT_NEAR(onecycle_lr(total - 1, total, 0.008), 0.008 / 1e4, 1e-15);
  EXPECT_THROW(onecycle_lr(total, total, 0.008), ContractError);
}

TEST(OneCycle, Continuous) {
  for (std::size_t total : {10u, 37u, 500u}) {
    const double bound = 2 * 0.008 / static_cast<double>(total) * std::numbers::pi;
    for (std::size_t s = 1; s < total; ++s)
      EXPECT_LE(std::fabs(onecycle_lr(s, total, 0.008) - onecycle_lr(s - 1, total, 0.008)), bound);
  }
}

TEST(Penalties, Examples) {
  const auto s = single(2.0f);
  EXPECT_EQ(l1_penalty(s, 0.0).item(), 0.0f);
  EXPECT_EQ(l2_penalty(s, 0.0).item(), 0.0f);
  EXPECT_FLOAT_EQ(l1_penalty(s, 0.5).item(), 1.0f);
  EXPECT_FLOAT_EQ(l2_penalty(s, 0.5).item(), 2.0f);
}

TEST(Penalties, L1GradientIsSign) {
  ParameterStore s;
  s.add("a", Tensor({3}, {0.7f, -1.2f, 0.4f}));
  s.add("frozen", Tensor({1}, {5.0f}), false);
  Tape tape;
  tape.backward(l1_penalty(s, 0.3, &tape));
  const auto g = tape.parameter_gradients(s);
  EXPECT_FLOAT_EQ(g[ParamId{0}][0], 0.3f);
  EXPECT_FLOAT_EQ(g[ParamId{0}][1], -0.3f);
  EXPECT_FLOAT_EQ(g[ParamId{0}][2], 0.3f);
  EXPECT_EQ(g[ParamId{1}][0], 0.0f);
  EXPECT_LT(grad_check([](const Tensor& x) { return scale(sum(abs(x)), 0.3f); }, s[ParamId{0}].value), 1e-3);
}

TEST(EarlyStopping, StrictImprovementRunsAllEpochs) {
  EarlyStopper es(5);
  for (int e = 0; e < 50; ++e) {
    EXPECT_TRUE(es.update(10.0 - e * 0.1));
    EXPECT_FALSE(es.should_stop());
  }
  EXPECT_EQ(es.best_epoch(), 49u);
}

TEST(EarlyStopping, FlatFromEpochThree) {
  EarlyStopper es(5);
  const std::vector<double> losses = {3, 2, 1, 1, 1, 1, 1, 1, 1, 1};
  std::size_t stopped = 0;
  for (std::size_t e = 0; e < losses.size(); ++e) {
    es.update(losses[e]);
    if (es.should_stop()) {
      stopped = e + 1;
      break;
    }
  }
  EXPECT_EQ(stopped, 8u);
  EXPECT_EQ(es.best_epoch() + 1, 3u);
}

TEST(EarlyStopping, ZeroPatienceNeverStops) {
  EarlyStopper es(0);
  for (int e = 0; e < 20; ++e) es.update(1.0);
  EXPECT_FALSE(es.should_stop());
  EXPECT_EQ(es.best_epoch(), 0u);
}

TEST(Folds, PartitionAndStratification) {
  Rng rng(9);
  std::vector<int> strata(437);
  for (auto& s : strata) s = static_cast<int>(rng() % 4);
  TrainConfig cfg;
  const auto folds = stratified_folds(strata, cfg);
  ASSERT_EQ(folds.size(), 5u);
  std::set<std::size_t> seen_test;
  std::vector<std::size_t> global(4, 0);
  for (int s : strata) ++global[static_cast<std::size_t>(s)];
  for (const auto& f : folds) {
    std::set<std::size_t> all;
    for (auto* part : {&f.train, &f.val, &f.test})
      for (auto i : *part) EXPECT_TRUE(all.insert(i).second) << "row in two roles";
    EXPECT_EQ(all.size(), strata.size());
    for (auto i : f.test) EXPECT_TRUE(seen_test.insert(i).second) << "test sets overlap";
    std::vector<std::size_t> per(4, 0);
    for (auto i : f.test) ++per[static_cast<std::size_t>(strata[i])];
    for (std::size_t b = 0; b < 4; ++b)
      EXPECT_LE(std::fabs(static_cast<double>(per[b]) - global[b] * cfg.test_frac), 1.0);
  }
  EXPECT_LE(seen_test.size(), strata.size());
}

TEST(Folds, Deterministic) {
  std::vector<int> strata(100);
  for (std::size_t i = 0; i < strata.size(); ++i) strata[i] = static_cast<int>(i % 3);
  TrainConfig cfg;
  const auto a = stratified_folds(strata, cfg), b = stratified_folds(strata, cfg);
  for (std::size_t f = 0; f < a.size(); ++f) {
    EXPECT_EQ(a[f].train, b[f].train);
    EXPECT_EQ(a[f].test, b[f].test);
  }
  cfg.seed = 1;
  EXPECT_NE(stratified_folds(strata, cfg)[0].test, a[0].test);
}

TEST(Config, RejectsInvalidTraining) {
  TrainConfig t;
  t.folds = 1;
  EXPECT_THROW(t.validate(), ConfigError);
  t = {};
  t.train_frac = 0.5;
  EXPECT_THROW(t.validate(), ConfigError);
  t = {};
  t.folds = 10;
  EXPECT_THROW(t.validate(), ConfigError);
}

TEST(ModalityDropout, KeepsAtLeastOneModality) {
  Rng rng(1);
  std::vector<ModalityBatch> batch(2);
  for (std::size_t m = 0; m < 2; ++m)
    batch[m] = {m, Tensor::zeros({100, 1, 1}), std::vector<std::uint8_t>(100, 1), {}};
  batch[1].present[0] = 0;
  mask_modalities(batch, 0.5, 77);
  std::size_t masked = 0;
  for (std::size_t i = 0; i < 100; ++i) {
    EXPECT_TRUE(batch[0].present[i] || batch[1].present[i]);
    masked += !(batch[0].present[i] && batch[1].present[i]);
  }
  EXPECT_GT(masked, 30u);
  EXPECT_LT(masked, 70u);
}

TEST(TrainFold, RunsAndRestoresBest) {
  const auto ds = tiny_dataset();
  const auto cfg = tiny_train();
  const auto folds = stratified_folds(survival_strata(ds.records, cfg.bins), cfg);
  const auto res = train_fold(ds, folds[0], tiny_model(ds), cfg, 0);
  ASSERT_FALSE(res.failed) << res.error;
  EXPECT_EQ(res.train_loss.size(), 3u);
  EXPECT_EQ(res.val_loss.size(), 3u);
  ASSERT_TRUE(res.checkpoint);
  const std::size_t best =
      static_cast<std::size_t>(std::min_element(res.val_loss.begin(), res.val_loss.end()) - res.val_loss.begin());
  EXPECT_EQ(res.best_epoch, best);

  // The restored checkpoint reproduces the reported test c-index.
  const auto scaled = apply_stored_scalers(ds, *res.checkpoint);
  const auto model = model_from_checkpoint(*res.checkpoint);
  const auto pred = predict(model, scaled, folds[0].test);
  EXPECT_EQ(cindex_or_nan(pred.risk, select_records(ds.records, folds[0].test)), res.test_cindex);
}

TEST(CrossValidate, DeterministicAcrossThreadCounts) {
  const auto ds = tiny_dataset();
  const auto cfg = tiny_train();
  const auto a = cross_validate(ds, tiny_model(ds), cfg, 1);
  const auto b = cross_validate(ds, tiny_model(ds), cfg, 3);
  ASSERT_EQ(a.folds.size(), 3u);
  for (std::size_t f = 0; f < 3; ++f) {
    EXPECT_EQ(a.folds[f].test_cindex, b.folds[f].test_cindex);
    EXPECT_EQ(a.folds[f].val_loss, b.folds[f].val_loss);
  }
  EXPECT_EQ(a.mean_cindex, b.mean_cindex);
}

TEST(CrossValidate, UniAndMultiModal) {
  const auto ds = tiny_dataset();
  auto cfg = tiny_train();
  cfg.epochs = 1;
  for (const auto& names : std::vector<std::vector<std::string>>{{"omic"}, {"wsi"}, {"omic", "wsi"}}) {
    const auto cv = cross_validate(ds, tiny_model(ds, names), cfg);
    EXPECT_EQ(cv.failed, 0u);
    EXPECT_FALSE(std::isnan(cv.mean_cindex));
  }
}

TEST(CrossValidate, RegModesProduceComparableTraces) {
  const auto ds = tiny_dataset();
  auto cfg = tiny_train();
  cfg.epochs = 2;
  cfg.early_stop_patience = 0;
  for (auto mode : {RegMode::none, RegMode::l1_only, RegMode::l1_snn}) {
    cfg.reg_mode = mode;
    const auto cv = cross_validate(ds, tiny_model(ds), cfg);
    for (const auto& f : cv.folds) EXPECT_EQ(f.val_loss.size(), 2u);
    EXPECT_EQ(cv.folds[0].checkpoint->config.snn, mode == RegMode::l1_snn);
  }
}

TEST(TrainFold, DivergenceMarksFoldFailed) {
  const auto ds = tiny_dataset();
  auto cfg = tiny_train();
  cfg.max_lr = 1e30;
  const auto folds = stratified_folds(survival_strata(ds.records, cfg.bins), cfg);
  const auto res = train_fold(ds, folds[0], tiny_model(ds), cfg, 0);
  EXPECT_TRUE(res.failed);
  EXPECT_FALSE(res.error.empty());
}

TEST(Regularisation, L1LeavesMoreNearZeroWeights) {
  SynthScenario sc;
  sc.n = 120;
  sc.p = 16;
  sc.t = 4;
  sc.d_x = 3;
  const auto ds = generate_synthetic(sc, 3);
  FusionConfig model;
  model.modalities = modality_specs(ds, std::vector<std::string>{"omic", "wsi"});
  model.latent_channels = 4;
  model.latent_dims = 8;
  model.heads = 2;
  model.dims_per_head = 4;
  TrainConfig cfg;
  cfg.epochs = 40;
  cfg.early_stop_patience = 0;
  cfg.seed = 2;
  const auto folds = stratified_folds(survival_strata(ds.records, cfg.bins), cfg);
  auto near_zero = [&](double l1) {
    cfg.l1 = l1;
    const auto res = train_fold(ds, folds[0], model, cfg, 0);
    EXPECT_FALSE(res.failed) << res.error;
    std::size_t count = 0;
    for (const auto& p : res.checkpoint->params.all())
      if (p.trainable)
        for (float v : p.value.data()) count += std::fabs(v) < 1e-4f;
    return count;
  };
  const std::size_t without = near_zero(0.0);
  EXPECT_GT(near_zero(0.1), without);
}

TEST(Attention, TrainedModelFavoursSignalFeatures) {
  // omic features 0-4 carry the risk factor; uniform mass would be 5/p
  SynthScenario sc;
  const auto ds = generate_synthetic(sc, 7);
  FusionConfig model;
  model.modalities = modality_specs(ds, std::vector<std::string>{"omic", "wsi"});
  model.latent_channels = 16;
  model.latent_dims = 16;
  model.heads = 4;
  model.dims_per_head = 8;
  model.snn_hidden_mult = 2;
  model.attn_dropout = 0.1f;
  model.ff_dropout = 0.1f;
  TrainConfig cfg;
  cfg.epochs = 30;
  cfg.early_stop_patience = 0;
  cfg.select = SelectMetric::val_cindex;
  cfg.seed = 1;
  const auto folds = stratified_folds(survival_strata(ds.records, cfg.bins), cfg);
  const auto res = train_fold(ds, folds[0], model, cfg, 0);
  ASSERT_FALSE(res.failed) << res.error;
  const auto trained = model_from_checkpoint(*res.checkpoint);
  const auto pred = predict(trained, apply_stored_scalers(ds, *res.checkpoint), folds[0].test, nullptr, true);
  double mass = 0;
  std::size_t samples = 0;
  for (const auto& s : mean_attention(pred.attention, 0)) {
    ASSERT_TRUE(s);
    for (std::size_t k = 0; k < 5; ++k) mass += (*s)[k];
    ++samples;
  }
  EXPECT_GT(mass / static_cast<double>(samples), 5.0 / static_cast<double>(sc.p));
}
