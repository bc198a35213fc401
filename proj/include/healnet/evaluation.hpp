#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "healnet/checkpoint.hpp"
#include "healnet/training.hpp"

namespace healnet {

/// Inference-time missing-modality scenario.
struct DropPlan {
  enum class Kind { none, half_half, drop } kind = Kind::none;
  std::string modality;  ///< for Kind::drop

  static DropPlan parse(const std::string& s) {
    if (s == "none") return {};
    if (s == "half-half") return {Kind::half_half, {}};
    if (s.rfind("drop:", 0) == 0 && s.size() > 5) return {Kind::drop, s.substr(5)};
    throw ConfigError("unknown drop plan '" + s + "' (none, half-half, drop:<modality>)");
  }

  std::string name() const {
    switch (kind) {
      case Kind::none: return "none";
      case Kind::half_half: return "half-half";
      case Kind::drop: return "drop:" + modality;
    }
    return "?";
  }

  /// Absence masks [modality][row]. half-half keeps exactly one modality per
  /// sample, assigned round-robin over a seeded shuffle, so with two
  /// modalities half the samples keep only the first and half only the second.
  std::vector<std::vector<std::uint8_t>> masks(const FusionConfig& cfg, std::size_t rows, std::uint64_t seed) const {
    const std::size_t j = cfg.modalities.size();
    std::vector<std::vector<std::uint8_t>> drop(j, std::vector<std::uint8_t>(rows, 0));
    switch (kind) {
      case Kind::none:
        break;
      case Kind::drop:
        drop[cfg.modality_index(modality)].assign(rows, 1);
        break;
      case Kind::half_half: {
        if (j < 2) throw ConfigError("half-half needs a model with at least two modalities");
        std::vector<std::size_t> order(rows);
        for (std::size_t i = 0; i < rows; ++i) order[i] = i;
        Rng rng(derive_key(seed, 0xD50B));
        shuffle(order, rng);
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t m = 0; m < j; ++m)
            if (m != r % j) drop[m][order[r]] = 1;
        break;
      }
    }
    return drop;
  }
};

struct MissingEval {
  double full_cindex = 0.0;
  double plan_cindex = 0.0;
  std::size_t samples = 0;
  std::size_t all_absent = 0;  ///< rows left without any modality
};

/// Scores a checkpoint on `rows` with and without the drop plan. Scalers
/// stored in the checkpoint are applied to the raw dataset first.
inline MissingEval evaluate_missing(const Checkpoint& ck, const MultiModalDataset& raw,
                                    std::span<const std::size_t> rows, const DropPlan& plan, std::uint64_t seed) {
  if (plan.kind == DropPlan::Kind::drop) (void)ck.config.modality_index(plan.modality);
  const HealNetModel model = model_from_checkpoint(ck);
  const MultiModalDataset ds = apply_stored_scalers(raw, ck);
  const auto records = select_records(ds.records, rows);
  const auto drop = plan.masks(ck.config, rows.size(), seed);
  MissingEval out;
  out.samples = rows.size();
  out.full_cindex = cindex_or_nan(predict(model, ds, rows).risk, records);
  const auto p = predict(model, ds, rows, &drop);
  out.plan_cindex = cindex_or_nan(p.risk, records);
  for (auto a : p.attention.all_absent) out.all_absent += a;
  return out;
}

}  // namespace healnet
