#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <exception>
#include <limits>
#include <map>
#include <numbers>
#include <numeric>
#include <optional>
#include <string>
#include <thread>
#include <tuple>
#include <utility>
#include <vector>

#include "healnet/checkpoint.hpp"
#include "healnet/data.hpp"
#include "healnet/fusion.hpp"
#include "healnet/survival.hpp"

namespace healnet {

enum class RegMode { none, l1_only, l1_snn };

inline std::string to_string(RegMode m) {
  switch (m) {
    case RegMode::none: return "none";
    case RegMode::l1_only: return "l1_only";
    case RegMode::l1_snn: return "l1_snn";
  }
  return "?";
}

inline RegMode parse_reg_mode(const std::string& s) {
  if (s == "none") return RegMode::none;
  if (s == "l1_only") return RegMode::l1_only;
  if (s == "l1_snn") return RegMode::l1_snn;
  throw ConfigError("unknown reg_mode '" + s + "' (none, l1_only, l1_snn)");
}

enum class SelectMetric { val_nll, val_cindex };

struct TrainConfig {
  std::size_t epochs = 50;
  std::size_t batch_size = 8;
  std::size_t early_stop_patience = 5;  ///< 0 disables early stopping
  double max_lr = 0.008;
  double momentum = 0.92;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double l1 = 1e-5;
  double l2 = 0.0;
  RegMode reg_mode = RegMode::l1_snn;
  SelectMetric select = SelectMetric::val_nll;
  std::size_t folds = 5;
  double train_frac = 0.70, val_frac = 0.15, test_frac = 0.15;
  std::size_t bins = 4;
  /// Probability of masking one randomly chosen modality of a training
  /// sample that has two or more present.
  double modality_dropout = 0.0;
  std::uint64_t seed = 0;

  /// L1 coefficient after the ablation mode is applied.
  double effective_l1() const { return reg_mode == RegMode::none ? 0.0 : l1; }
  bool uses_snn() const { return reg_mode == RegMode::l1_snn; }

  void validate() const {
    if (epochs == 0) throw ConfigError("epochs must be >= 1");
    if (batch_size == 0) throw ConfigError("batch_size must be >= 1");
    if (!(max_lr > 0)) throw ConfigError("max_lr must be > 0");
    if (!(momentum >= 0 && momentum < 1) || !(beta2 >= 0 && beta2 < 1)) throw ConfigError("Adam betas must be in [0, 1)");
    if (!(l1 >= 0) || !(l2 >= 0)) throw ConfigError("l1 and l2 must be >= 0");
    if (folds < 2) throw ConfigError("folds must be >= 2");
    if (!(train_frac > 0 && val_frac > 0 && test_frac > 0)) throw ConfigError("split fractions must be > 0");
    if (std::fabs(train_frac + val_frac + test_frac - 1.0) > 1e-9) throw ConfigError("split fractions must sum to 1");
    if (static_cast<double>(folds) * test_frac > 1.0 + 1e-9)
      throw ConfigError("folds * test fraction exceeds 1; test sets would overlap");
    if (bins < 2) throw ConfigError("bins must be >= 2");
    if (!(modality_dropout >= 0 && modality_dropout < 1)) throw ConfigError("modality_dropout must be in [0, 1)");
  }
};

// ---------------------------------------------------------------------------
// Optimisation

struct AdamState {
  std::vector<std::vector<double>> m, v;
  std::uint64_t t = 0;
};

/// One Adam update of every trainable parameter, bias-corrected.
inline void adam_step(ParameterStore& store, const Gradients& grads, AdamState& state, double lr, double beta1 = 0.92,
                      double beta2 = 0.999, double eps = 1e-8) {
  if (grads.size() != store.size()) throw ContractError("adam_step: gradient count does not match parameters");
  for (std::size_t p = 0; p < store.size(); ++p) {
    const Tensor& g = grads[ParamId{p}];
    for (float x : g.data())
      if (!std::isfinite(x))
        throw NumericalError("non-finite gradient for parameter '" + store[ParamId{p}].name + "' at step " +
                             std::to_string(state.t + 1));
  }
  if (state.m.size() != store.size()) {
    state.m.assign(store.size(), {});
    state.v.assign(store.size(), {});
    for (std::size_t p = 0; p < store.size(); ++p) {
      state.m[p].assign(store[ParamId{p}].value.numel(), 0.0);
      state.v[p].assign(store[ParamId{p}].value.numel(), 0.0);
    }
  }
  ++state.t;
  const double c1 = 1.0 - std::pow(beta1, static_cast<double>(state.t));
  const double c2 = 1.0 - std::pow(beta2, static_cast<double>(state.t));
  for (std::size_t p = 0; p < store.size(); ++p) {
    Parameter& param = store[ParamId{p}];
    if (!param.trainable) continue;
    const auto g = grads[ParamId{p}].data();
    auto w = param.value.mutable_data();
    auto& m = state.m[p];
    auto& v = state.v[p];
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
      v[i] = beta2 * v[i] + (1.0 - beta2) * static_cast<double>(g[i]) * g[i];
      w[i] = static_cast<float>(w[i] - lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps));
    }
  }
}

/// Linear warm-up from max_lr/25 to max_lr over the first 30% of steps, then
/// cosine annealing to max_lr/1e4 at the last step.
inline double onecycle_lr(std::size_t step, std::size_t total_steps, double max_lr) {
  if (step >= total_steps) throw ContractError("onecycle_lr: step " + std::to_string(step) + " outside [0, " +
                                               std::to_string(total_steps) + ")");
  const double start = max_lr / 25.0, end = max_lr / 1e4;
  const auto peak = static_cast<std::size_t>(std::llround(0.3 * static_cast<double>(total_steps)));
  if (step <= peak) {
    if (peak == 0) return max_lr;
    return start + (max_lr - start) * static_cast<double>(step) / static_cast<double>(peak);
  }
  const double span = static_cast<double>(total_steps - 1 - peak);
  const double frac = static_cast<double>(step - peak) / span;
  return end + (max_lr - end) * 0.5 * (1.0 + std::cos(std::numbers::pi * frac));
}

/// coeff * sum |w| over trainable parameters, recorded on `tape` if given.
inline Tensor l1_penalty(const ParameterStore& store, double coeff, Tape* tape = nullptr) {
  if (coeff < 0) throw ContractError("l1_penalty: coeff must be >= 0");
  if (coeff == 0) return Tensor::scalar(0.0f);
  std::vector<Tensor> terms;
  for (std::size_t p = 0; p < store.size(); ++p) {
    if (!store[ParamId{p}].trainable) continue;
    const Tensor w = tape ? tape->watch(store, ParamId{p}) : store[ParamId{p}].value;
    terms.push_back(sum(abs(w)));
  }
  Tensor total = Tensor::scalar(0.0f);
  for (const auto& t : terms) total = add(total, t);
  return scale(total, static_cast<float>(coeff));
}

/// coeff * sum w^2 over trainable parameters.
inline Tensor l2_penalty(const ParameterStore& store, double coeff, Tape* tape = nullptr) {
  if (coeff < 0) throw ContractError("l2_penalty: coeff must be >= 0");
  if (coeff == 0) return Tensor::scalar(0.0f);
  Tensor total = Tensor::scalar(0.0f);
  for (std::size_t p = 0; p < store.size(); ++p) {
    if (!store[ParamId{p}].trainable) continue;
    const Tensor w = tape ? tape->watch(store, ParamId{p}) : store[ParamId{p}].value;
    total = add(total, sum(square(w)));
  }
  return scale(total, static_cast<float>(coeff));
}

/// Patience counter over a metric where lower is better.
class EarlyStopper {
 public:
  explicit EarlyStopper(std::size_t patience) : patience_(patience) {}

  /// Returns true when `value` is a new strict best.
  bool update(double value) {
    ++epoch_;
    if (!has_best_ || value < best_) {
      best_ = value;
      has_best_ = true;
      best_epoch_ = epoch_ - 1;
      stale_ = 0;
      return true;
    }
    ++stale_;
    return false;
  }
  bool should_stop() const noexcept { return patience_ > 0 && stale_ >= patience_; }
  std::size_t best_epoch() const noexcept { return best_epoch_; }  ///< zero-based
  std::optional<double> best() const noexcept { return has_best_ ? std::optional<double>(best_) : std::nullopt; }

 private:
  std::size_t patience_;
  std::size_t epoch_ = 0;
  std::size_t best_epoch_ = 0;
  std::size_t stale_ = 0;
  double best_ = 0.0;
  bool has_best_ = false;
};

// ---------------------------------------------------------------------------
// Folds

struct FoldSplit {
  std::vector<std::size_t> train, val, test;
};

/// Stratified splits. Within each stratum the (seeded) shuffled members are
/// cut into consecutive segments of test_frac each; fold f tests on segment
/// f and validates on the following val_frac segment, wrapping around.
/// Everything else trains.
inline std::vector<FoldSplit> stratified_folds(std::span<const int> strata, const TrainConfig& cfg) {
  cfg.validate();
  int k = 0;
  for (int s : strata) {
    if (s < 0) throw ContractError("stratified_folds: negative stratum");
    k = std::max(k, s + 1);
  }
  std::vector<std::vector<std::size_t>> members(static_cast<std::size_t>(k));
  for (std::size_t i = 0; i < strata.size(); ++i) members[static_cast<std::size_t>(strata[i])].push_back(i);
  Rng rng(derive_key(cfg.seed, 0xF01D));
  for (auto& m : members) shuffle(m, rng);

  std::vector<FoldSplit> folds(cfg.folds);
  for (const auto& m : members) {
    const double nb = static_cast<double>(m.size());
    auto cut = [&](double frac) { return static_cast<std::size_t>(std::floor(frac * nb + 1e-9)); };
    for (std::size_t f = 0; f < cfg.folds; ++f) {
      const double t0 = static_cast<double>(f) * cfg.test_frac;
      const std::size_t test_lo = cut(t0), test_hi = cut(t0 + cfg.test_frac);
      const std::size_t val_lo = test_hi, val_hi = cut(t0 + cfg.test_frac + cfg.val_frac);
      std::vector<std::uint8_t> role(m.size(), 0);
      for (std::size_t q = test_lo; q < test_hi; ++q) role[q % m.size()] = 2;
      for (std::size_t q = val_lo; q < val_hi; ++q)
        if (role[q % m.size()] == 0) role[q % m.size()] = 1;
      for (std::size_t q = 0; q < m.size(); ++q) {
        auto& dst = role[q] == 2 ? folds[f].test : role[q] == 1 ? folds[f].val : folds[f].train;
        dst.push_back(m[q]);
      }
    }
  }
  for (auto& f : folds) {
    std::sort(f.train.begin(), f.train.end());
    std::sort(f.val.begin(), f.val.end());
    std::sort(f.test.begin(), f.test.end());
  }
  return folds;
}

/// Survival-bin strata over the whole cohort; falls back to a single stratum
/// when the cohort has too few distinct event times.
inline std::vector<int> survival_strata(std::span<const SurvivalRecord> records, std::size_t bins) {
  std::vector<int> strata(records.size(), 0);
  try {
    const auto d = discretize(records, bins);
    for (std::size_t i = 0; i < records.size(); ++i) strata[i] = *d.records[i].bin;
  } catch (const DiscretizationError&) {
  }
  return strata;
}

// ---------------------------------------------------------------------------
// Model inputs

/// Specs of the named dataset modalities, in the given order.
inline std::vector<ModalitySpec> modality_specs(const MultiModalDataset& ds, std::span<const std::string> names) {
  std::vector<ModalitySpec> out;
  for (const auto& n : names) out.push_back(ds.modality(n).spec());
  return out;
}

/// Batches for the model's modalities over `rows`. `drop`, when given, is
/// indexed [modality][row position] and forces absence where nonzero.
inline std::vector<ModalityBatch> model_batches(const FusionConfig& cfg, const MultiModalDataset& ds,
                                                std::span<const std::size_t> rows,
                                                const std::vector<std::vector<std::uint8_t>>* drop = nullptr) {
  std::vector<ModalityBatch> out;
  for (std::size_t m = 0; m < cfg.modalities.size(); ++m) {
    const auto& block = ds.modality(cfg.modalities[m].name);
    auto b = make_batch(block, m, rows);
    if (drop)
      for (std::size_t r = 0; r < rows.size(); ++r)
        if ((*drop)[m][r]) b.present[r] = 0;
    out.push_back(std::move(b));
  }
  return out;
}

/// Evaluation-mode risk scores and hazards.
struct Prediction {
  Tensor hazards;
  std::vector<double> risk;
  AttentionRecord attention;
};

inline Prediction predict(const HealNetModel& model, const MultiModalDataset& ds, std::span<const std::size_t> rows,
                          const std::vector<std::vector<std::uint8_t>>* drop = nullptr, bool record_attention = false) {
  const auto batch = model_batches(model.config(), ds, rows, drop);
  ForwardOptions opts;
  opts.record_attention = record_attention;
  auto fwd = model.forward(batch, opts);
  Prediction p;
  p.hazards = hazards(fwd.logits);
  p.risk = risk_score(p.hazards);
  p.attention = std::move(fwd.attention);
  return p;
}

inline std::vector<SurvivalRecord> select_records(const std::vector<SurvivalRecord>& records,
                                                  std::span<const std::size_t> rows) {
  std::vector<SurvivalRecord> out;
  out.reserve(rows.size());
  for (std::size_t i : rows) out.push_back(records[i]);
  return out;
}

/// c-index, or NaN when no pair is comparable.
inline double cindex_or_nan(std::span<const double> risk, std::span<const SurvivalRecord> records) {
  try {
    return concordance_index(risk, records);
  } catch (const UndefinedMetricError&) {
    return std::numeric_limits<double>::quiet_NaN();
  }
}

/// Applies train-split scalers for the model's modalities and stores them in
/// `aux` under "scaler.<name>.mean|std".
inline MultiModalDataset standardise(const MultiModalDataset& ds, const FusionConfig& cfg,
                                     std::span<const std::size_t> train_rows, std::map<std::string, Tensor>& aux,
                                     std::vector<std::string>* warnings = nullptr) {
  MultiModalDataset out = ds;
  for (const auto& spec : cfg.modalities) {
    auto& block = out.modality(spec.name);
    const auto s = FeatureScaler::fit(block, train_rows);
    if (warnings) warnings->insert(warnings->end(), s.warnings.begin(), s.warnings.end());
    block = s.apply(std::move(block));
    const std::size_t w = s.mean.size();
    aux["scaler." + spec.name + ".mean"] = Tensor({w}, s.mean);
    aux["scaler." + spec.name + ".std"] = Tensor({w}, s.stddev);
  }
  return out;
}

/// Re-applies scalers stored in a checkpoint.
inline MultiModalDataset apply_stored_scalers(const MultiModalDataset& ds, const Checkpoint& ck) {
  MultiModalDataset out = ds;
  for (const auto& spec : ck.config.modalities) {
    auto mean = ck.aux.find("scaler." + spec.name + ".mean");
    auto sd = ck.aux.find("scaler." + spec.name + ".std");
    if (mean == ck.aux.end() || sd == ck.aux.end())
      throw FormatError("checkpoint", 0, "missing scaler for modality '" + spec.name + "'");
    FeatureScaler s;
    s.mean = mean->second.values();
    s.stddev = sd->second.values();
    auto& block = out.modality(spec.name);
    block = s.apply(std::move(block));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Training

struct FoldResult {
  std::size_t fold = 0;
  std::vector<double> train_loss, val_loss, val_cindex;
  std::size_t best_epoch = 0;   ///< zero-based
  double test_cindex = std::numeric_limits<double>::quiet_NaN();
  bool failed = false;
  std::string error;
  std::vector<std::string> warnings;
  std::optional<Checkpoint> checkpoint;  ///< restored best model and preprocessing
};

/// Training-time modality dropout: per sample, with probability `rate`, one
/// of its present modalities (chosen uniformly) is marked absent. Samples
/// with a single present modality are left alone.
inline void mask_modalities(std::vector<ModalityBatch>& batch, double rate, std::uint64_t key) {
  if (batch.size() < 2) return;
  const std::size_t n = batch.front().present.size();
  for (std::size_t i = 0; i < n; ++i) {
    if (counter_uniform(key, 2 * i) >= rate) continue;
    std::vector<std::size_t> present;
    for (std::size_t m = 0; m < batch.size(); ++m)
      if (batch[m].present[i]) present.push_back(m);
    if (present.size() < 2) continue;
    const auto pick = static_cast<std::size_t>(counter_uniform(key, 2 * i + 1) * static_cast<double>(present.size()));
    batch[present[std::min(pick, present.size() - 1)]].present[i] = 0;
  }
}

/// Model config with the ablation mode applied.
inline FusionConfig apply_reg_mode(FusionConfig model, const TrainConfig& cfg) {
  model.snn = cfg.uses_snn();
  return model;
}

/// Trains one fold: weighted NLL + penalties under Adam/OneCycle with early
/// stopping on validation. Bins, class weights and feature scalers come from
/// the training rows only.
inline FoldResult train_fold(const MultiModalDataset& raw, const FoldSplit& split, FusionConfig model_cfg,
                             const TrainConfig& cfg, std::size_t fold = 0) {
  cfg.validate();
  if (split.train.empty() || split.val.empty() || split.test.empty())
    throw ContractError("train_fold: empty train, validation or test split");
  FoldResult res;
  res.fold = fold;
  const std::uint64_t fold_seed = derive_key(cfg.seed, fold);
  model_cfg = apply_reg_mode(std::move(model_cfg), cfg);
  model_cfg.bins = cfg.bins;

  std::map<std::string, Tensor> aux;
  const MultiModalDataset ds = standardise(raw, model_cfg, split.train, aux, &res.warnings);
  const auto train_records = select_records(ds.records, split.train);
  const BinEdges edges = fit_bins(train_records, cfg.bins);
  const auto labelled = apply_bins(edges, ds.records).records;
  const auto train_lab = select_records(labelled, split.train);
  const auto val_lab = select_records(labelled, split.val);
  const auto weights = class_weights(apply_bins(edges, train_records).edges.counts);
  aux["bins"] = Tensor({edges.edges.size()}, std::vector<float>(edges.edges.begin(), edges.edges.end()));

  HealNetModel model = HealNetModel::create(model_cfg, derive_key(fold_seed, 1));
  const std::size_t per_epoch = (split.train.size() + cfg.batch_size - 1) / cfg.batch_size;
  const std::size_t total_steps = per_epoch * cfg.epochs;
  const double l1 = cfg.effective_l1();

  AdamState adam;
  EarlyStopper stopper(cfg.early_stop_patience);
  ParameterStore best = model.parameters();
  Rng rng(derive_key(fold_seed, 2));
  std::vector<std::size_t> order = split.train;
  std::size_t step = 0;

  try {
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
      shuffle(order, rng);
      double loss_sum = 0.0;
      for (std::size_t b = 0; b < per_epoch; ++b, ++step) {
        const std::size_t lo = b * cfg.batch_size, hi = std::min(order.size(), lo + cfg.batch_size);
        const std::span<const std::size_t> rows(order.data() + lo, hi - lo);
        auto batch = model_batches(model_cfg, ds, rows);
        if (cfg.modality_dropout > 0) mask_modalities(batch, cfg.modality_dropout, derive_key(fold_seed, 3, step));
        Tape tape;
        ForwardOptions opts{true, fold_seed, step, false, &tape};
        const auto fwd = model.forward(batch, opts);
        const auto recs = select_records(labelled, rows);
        const Tensor nll = nll_loss(hazards(fwd.logits), recs, weights);
        Tensor loss = nll;
        if (l1 > 0) loss = add(loss, l1_penalty(model.parameters(), l1, &tape));
        if (cfg.l2 > 0) loss = add(loss, l2_penalty(model.parameters(), cfg.l2, &tape));
        if (!std::isfinite(loss.item()))
          throw NumericalError("non-finite training loss at epoch " + std::to_string(epoch + 1) + ", step " +
                               std::to_string(step));
        tape.backward(loss);
        adam_step(model.parameters(), tape.parameter_gradients(model.parameters()), adam,
                  onecycle_lr(step, total_steps, cfg.max_lr), cfg.momentum, cfg.beta2, cfg.adam_eps);
        loss_sum += nll.item() * static_cast<double>(rows.size());
      }
      res.train_loss.push_back(loss_sum / static_cast<double>(order.size()));

      const auto val = predict(model, ds, split.val);
      const double vloss = nll_loss(val.hazards, val_lab, weights).item();
      if (!std::isfinite(vloss)) throw NumericalError("non-finite validation loss at epoch " + std::to_string(epoch + 1));
      res.val_loss.push_back(vloss);
      res.val_cindex.push_back(cindex_or_nan(val.risk, val_lab));

      double metric = vloss;
      if (cfg.select == SelectMetric::val_cindex)
        metric = std::isnan(res.val_cindex.back()) ? 0.0 : -res.val_cindex.back();
      if (stopper.update(metric)) best = model.parameters();
      if (stopper.should_stop()) break;
    }
  } catch (const NumericalError& e) {
    res.failed = true;
    res.error = e.what();
    return res;
  }

  res.best_epoch = stopper.best_epoch();
  HealNetModel restored(model_cfg, std::move(best));
  const auto test_lab = select_records(labelled, split.test);
  const auto test = predict(restored, ds, split.test);
  res.test_cindex = cindex_or_nan(test.risk, test_lab);
  res.checkpoint = Checkpoint{model_cfg, restored.parameters(), std::move(aux)};
  return res;
}

/// Mean and population standard deviation; NaN for an empty input.
inline std::pair<double, double> mean_std(std::span<const double> v) {
  if (v.empty()) return {std::numeric_limits<double>::quiet_NaN(), std::numeric_limits<double>::quiet_NaN()};
  double mean = 0.0;
  for (double c : v) mean += c;
  mean /= static_cast<double>(v.size());
  double var = 0.0;
  for (double c : v) var += (c - mean) * (c - mean);
  return {mean, std::sqrt(var / static_cast<double>(v.size()))};
}

struct CvResult {
  std::vector<FoldSplit> splits;
  std::vector<FoldResult> folds;
  double mean_cindex = std::numeric_limits<double>::quiet_NaN();
  double std_cindex = std::numeric_limits<double>::quiet_NaN();
  std::size_t failed = 0;
};

/// k-fold cross-validation. Folds run on up to `jobs` threads; results do
/// not depend on the thread count.
inline CvResult cross_validate(const MultiModalDataset& ds, const FusionConfig& model_cfg, const TrainConfig& cfg,
                               std::size_t jobs = 1) {
  cfg.validate();
  ds.validate();
  CvResult cv;
  const auto strata = survival_strata(ds.records, cfg.bins);
  cv.splits = stratified_folds(strata, cfg);
  cv.folds.resize(cfg.folds);
  std::vector<std::exception_ptr> errors(cfg.folds);
  auto run = [&](std::size_t f) {
    try {
      cv.folds[f] = train_fold(ds, cv.splits[f], model_cfg, cfg, f);
    } catch (...) {
      errors[f] = std::current_exception();
    }
  };
  jobs = std::clamp<std::size_t>(jobs, 1, cfg.folds);
  if (jobs == 1) {
    for (std::size_t f = 0; f < cfg.folds; ++f) run(f);
  } else {
    std::vector<std::thread> pool;
    std::atomic<std::size_t> next{0};
    for (std::size_t w = 0; w < jobs; ++w)
      pool.emplace_back([&] {
        for (std::size_t f; (f = next.fetch_add(1)) < cfg.folds;) run(f);
      });
    for (auto& t : pool) t.join();
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);

  std::vector<double> ok;
  for (const auto& f : cv.folds) {
    if (f.failed || std::isnan(f.test_cindex))
      ++cv.failed;
    else
      ok.push_back(f.test_cindex);
  }
  std::tie(cv.mean_cindex, cv.std_cindex) = mean_std(ok);
  return cv;
}

}  // namespace healnet
