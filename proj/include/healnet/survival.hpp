#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "healnet/ops.hpp"
#include "healnet/tensor.hpp"

namespace healnet {

inline constexpr float kLogFloor = 1e-7f;

struct SurvivalRecord {
  double months = 0.0;
  bool censored = false;        ///< 1 = event not observed
  std::optional<int> bin;       ///< discretised label y in [0, k)
};

/// k buckets split by k-1 strictly increasing edges. Bucket b covers
/// [edges[b-1], edges[b]); the first is open below, the last closed above.
struct BinEdges {
  std::vector<double> edges;
  std::vector<std::size_t> counts;

  std::size_t bins() const noexcept { return edges.size() + 1; }
  int bin_of(double months) const {
    return static_cast<int>(std::upper_bound(edges.begin(), edges.end(), months) - edges.begin());
  }
};

/// Linear interpolation between order statistics ("type 7") of sorted data.
inline double quantile_type7(std::span<const double> sorted, double prob) {
  if (sorted.empty()) throw ContractError("quantile of empty sample");
  const double h = (static_cast<double>(sorted.size()) - 1.0) * prob;
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  return sorted[lo] + (h - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

struct Discretization {
  BinEdges edges;
  std::vector<SurvivalRecord> records;  ///< input records with `bin` set
};

/// Bin edges from the k-quantiles of the uncensored times, applied to every
/// record.
inline BinEdges fit_bins(std::span<const SurvivalRecord> records, std::size_t k = 4) {
  if (k < 2) throw DiscretizationError("need at least 2 survival bins");
  std::vector<double> times;
  for (const auto& r : records) {
    if (!(r.months >= 0.0) || !std::isfinite(r.months))
      throw DiscretizationError("survival months must be finite and >= 0");
    if (!r.censored) times.push_back(r.months);
  }
  std::sort(times.begin(), times.end());
  std::vector<double> uniq = times;
  uniq.erase(std::unique(uniq.begin(), uniq.end()), uniq.end());
  if (uniq.size() < k)
    throw DiscretizationError("need at least " + std::to_string(k) + " distinct uncensored survival times, got " +
                              std::to_string(uniq.size()));
  BinEdges out;
  for (std::size_t b = 1; b < k; ++b) {
    const double e = quantile_type7(times, static_cast<double>(b) / static_cast<double>(k));
    if (!out.edges.empty() && !(e > out.edges.back()))
      throw DiscretizationError("tied survival times give non-increasing quantile edges; reduce the bin count");
    out.edges.push_back(e);
  }
  out.counts.assign(k, 0);
  return out;
}

inline Discretization apply_bins(const BinEdges& edges, std::span<const SurvivalRecord> records) {
  Discretization d{edges, {records.begin(), records.end()}};
  std::fill(d.edges.counts.begin(), d.edges.counts.end(), 0);
  for (auto& r : d.records) {
    r.bin = edges.bin_of(r.months);
    ++d.edges.counts[static_cast<std::size_t>(*r.bin)];
  }
  return d;
}

inline Discretization discretize(std::span<const SurvivalRecord> records, std::size_t k = 4) {
  return apply_bins(fit_bins(records, k), records);
}

/// Per-bin event probabilities.
inline Tensor hazards(const Tensor& logits) { return sigmoid(logits); }

/// S(b) = prod_{i<=b} (1 - h(i)) along the last axis of [n x k].
inline Tensor survival_curve(const Tensor& h) {
  if (h.rank() != 2) throw DimensionError("survival_curve: expected [n x k], got " + to_string(h.shape()));
  const std::size_t n = h.dim(0), k = h.dim(1);
  std::vector<float> out(h.numel());
  for (std::size_t i = 0; i < n; ++i) {
    double s = 1.0;
    for (std::size_t b = 0; b < k; ++b) out[i * k + b] = static_cast<float>(s *= 1.0 - h[i * k + b]);
  }
  Tape* tape = common_tape({&h});
  return detail::finish(tape, Tensor(h.shape(), std::move(out)), [h, n, k](std::span<const float> g, Tape& t) {
    float* gh = t.grad_ptr(h.node());
    if (!gh) return;
    // dS(b)/dh(j) = -prod_{i<=b, i!=j} (1 - h(i)) for j <= b.
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < k; ++j) {
        double acc = 0.0;
        double partial = 1.0;
        for (std::size_t b = 0; b < k; ++b) {
          if (b != j) partial *= 1.0 - h[i * k + b];
          if (b >= j) acc -= g[i * k + b] * partial;
        }
        gh[i * k + j] += static_cast<float>(acc);
      }
  });
}

/// Inverse-frequency weights, normalised to mean one.
inline std::vector<double> class_weights(std::span<const std::size_t> counts) {
  if (counts.empty()) throw ContractError("class_weights: no bins");
  double total = 0.0;
  for (std::size_t b = 0; b < counts.size(); ++b) {
    if (counts[b] == 0)
      throw DiscretizationError("survival bin " + std::to_string(b) +
                                " is empty; reduce the number of bins or enlarge the training split");
    total += static_cast<double>(counts[b]);
  }
  std::vector<double> w(counts.size());
  double mean_w = 0.0;
  for (std::size_t b = 0; b < counts.size(); ++b) mean_w += (w[b] = total / static_cast<double>(counts[b]));
  mean_w /= static_cast<double>(counts.size());
  for (auto& x : w) x /= mean_w;
  return w;
}

/// Weighted discrete-time negative log-likelihood, averaged over the batch.
///   uncensored: -w_y [log S(y-1) + log h(y)],  S(-1) = 1
///   censored:   -w_y log S(y)
/// Logs are clamped below at 1e-7.
inline Tensor nll_loss(const Tensor& h, std::span<const SurvivalRecord> records, std::span<const double> weights) {
  if (h.rank() != 2 || h.dim(0) != records.size())
    throw DimensionError("nll_loss: hazards " + to_string(h.shape()) + " vs " + std::to_string(records.size()) +
                         " records");
  const std::size_t n = h.dim(0), k = h.dim(1);
  if (weights.size() != k) throw DimensionError("nll_loss: expected " + std::to_string(k) + " bin weights");
  // Fused and evaluated in double; the gradient of a clamped log term is zero.
  const double floor = kLogFloor;
  std::vector<double> grad(n * k, 0.0);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const auto& r = records[i];
    if (!r.bin) throw ContractError("nll_loss: record " + std::to_string(i) + " has no bin label");
    const auto y = static_cast<std::size_t>(*r.bin);
    if (y >= k) throw ContractError("nll_loss: bin label out of range");
    const double c = -weights[y] / static_cast<double>(n);
    const float* hi = h.data().data() + i * k;
    // log S(upto) over bins [0, upto), and its derivative
    auto log_surv = [&](std::size_t upto) {
      double surv = 1.0;
      for (std::size_t b = 0; b < upto; ++b) surv *= 1.0 - hi[b];
      if (surv < floor) return std::log(floor);
      for (std::size_t b = 0; b < upto; ++b) grad[i * k + b] -= c / (1.0 - hi[b]);
      return std::log(surv);
    };
    if (r.censored) {
      total += c * log_surv(y + 1);
    } else {
      total += c * log_surv(y);
      const double hy = hi[y];
      if (hy < floor) {
        total += c * std::log(floor);
      } else {
        total += c * std::log(hy);
        grad[i * k + y] += c / hy;
      }
    }
  }
  Tensor out = Tensor::scalar(static_cast<float>(total));
  Tape* tape = h.tape();
  if (!tape) return out;
  return tape->record(std::move(out), [h, grad = std::move(grad)](std::span<const float> g, Tape& t) {
    float* gh = t.grad_ptr(h.node());
    for (std::size_t q = 0; q < grad.size(); ++q) gh[q] += static_cast<float>(grad[q] * g[0]);
  });
}

/// risk = -sum_b S(b); larger means shorter expected survival.
inline std::vector<double> risk_score(const Tensor& h) {
  const Tensor s = survival_curve(h.detach());
  const std::size_t n = h.dim(0), k = h.dim(1);
  std::vector<double> risk(n);
  for (std::size_t i = 0; i < n; ++i) {
    double acc = 0.0;
    for (std::size_t b = 0; b < k; ++b) acc += s[i * k + b];
    risk[i] = -acc;
  }
  return risk;
}

/// Harrell's concordance. A pair is comparable when the earlier time is an
/// observed event and the times differ; tied risks earn half credit.
inline double concordance_index(std::span<const double> risk, std::span<const SurvivalRecord> records) {
  if (risk.size() != records.size()) throw DimensionError("concordance_index: risk/record length mismatch");
  if (risk.size() < 2) throw ContractError("concordance_index: need at least two samples");
  std::vector<std::size_t> order(risk.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return records[a].months < records[b].months; });
  double concordant = 0.0;
  std::size_t comparable = 0;
  for (std::size_t a = 0; a < order.size(); ++a) {
    const std::size_t i = order[a];
    if (records[i].censored) continue;
    for (std::size_t b = a + 1; b < order.size(); ++b) {
      const std::size_t j = order[b];
      if (!(records[j].months > records[i].months)) continue;
      ++comparable;
      if (risk[i] > risk[j])
        concordant += 1.0;
      else if (risk[i] == risk[j])
        concordant += 0.5;
    }
  }
  if (comparable == 0) throw UndefinedMetricError("concordance index undefined: no comparable pairs");
  return concordant / static_cast<double>(comparable);
}

}  // namespace healnet
