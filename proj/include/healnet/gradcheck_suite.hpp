#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "healnet/fusion.hpp"
#include "healnet/gradcheck.hpp"
#include "healnet/ops.hpp"
#include "healnet/rng.hpp"
#include "healnet/survival.hpp"

namespace healnet {

struct GradcheckRow {
  std::string name;
  std::uint64_t seed = 0;
  double error = 0.0;
};

namespace detail {

inline Tensor random_tensor(Rng& rng, Shape shape, double lo = -2.0, double hi = 2.0) {
  std::vector<float> v(numel(shape));
  for (auto& x : v) x = static_cast<float>(lo + (hi - lo) * uniform01(rng));
  return Tensor(std::move(shape), std::move(v));
}

/// Moves entries out of (-margin, margin) so kinks sit outside the stencil.
inline Tensor away_from_zero(Tensor t, float margin = 0.05f) {
  auto d = t.mutable_data();
  for (auto& x : d)
    if (std::fabs(x) < margin) x = x < 0 ? -margin : margin;
  return t;
}

/// Scalar probe: sum(y * w) with fixed random w, so every output entry
/// contributes a distinct weight.
inline Tensor probe(const Tensor& y, std::uint64_t key) {
  Rng rng(key);
  return sum(mul(y, random_tensor(rng, y.shape(), -1.0, 1.0)));
}

}  // namespace detail

/// Central-difference checks of every differentiable op and of a small full
/// model, for one seed.
inline std::vector<GradcheckRow> run_gradcheck_suite(std::uint64_t seed, float eps = 1e-3f) {
  using detail::away_from_zero;
  using detail::probe;
  using detail::random_tensor;
  Rng rng(derive_key(seed, 0x6C));
  std::vector<GradcheckRow> rows;
  auto check = [&](const std::string& name, const Tensor& x, const std::function<Tensor(const Tensor&)>& f) {
    const std::uint64_t key = derive_key(seed, rows.size());
    rows.push_back({name, seed, grad_check([&](const Tensor& t) { return probe(f(t), key); }, x, eps)});
  };

  const Tensor a = random_tensor(rng, {3, 4});
  const Tensor b = random_tensor(rng, {4, 5});
  const Tensor c = random_tensor(rng, {3, 4});
  const Tensor row = random_tensor(rng, {4});
  check("matmul.a", a, [&](const Tensor& x) { return matmul(x, b); });
  check("matmul.b", b, [&](const Tensor& x) { return matmul(a, x); });
  check("add", a, [&](const Tensor& x) { return add(x, c); });
  check("sub", a, [&](const Tensor& x) { return sub(c, x); });
  check("mul", a, [&](const Tensor& x) { return mul(x, c); });
  check("mul.self", a, [&](const Tensor& x) { return mul(x, x); });
  check("affine", a, [](const Tensor& x) { return affine(x, -1.5f, 0.25f); });
  check("scale", a, [](const Tensor& x) { return scale(x, 0.7f); });
  check("add_bias.x", a, [&](const Tensor& x) { return add_bias(x, row); });
  check("add_bias.bias", row, [&](const Tensor& x) { return add_bias(a, x); });
  check("mul_bias.x", a, [&](const Tensor& x) { return mul_bias(x, row); });
  check("mul_bias.gain", row, [&](const Tensor& x) { return mul_bias(a, x); });
  check("sum", a, [](const Tensor& x) { return reshape(sum(x), {1}); });
  check("mean", a, [](const Tensor& x) { return reshape(mean(x), {1}); });
  check("sum_axis.0", a, [](const Tensor& x) { return sum_axis(x, 0); });
  check("sum_axis.1", a, [](const Tensor& x) { return sum_axis(x, 1); });
  check("log", random_tensor(rng, {3, 4}, 0.2, 2.0), [](const Tensor& x) { return log(x); });
  check("exp", a, [](const Tensor& x) { return exp(x); });
  check("abs", away_from_zero(a), [](const Tensor& x) { return abs(x); });
  check("square", a, [](const Tensor& x) { return square(x); });
  check("relu", away_from_zero(a), [](const Tensor& x) { return relu(x); });
  check("selu", away_from_zero(a), [](const Tensor& x) { return selu(x); });
  check("sigmoid", a, [](const Tensor& x) { return sigmoid(x); });
  check("softmax.0", a, [](const Tensor& x) { return softmax(x, 0); });
  check("softmax.1", a, [](const Tensor& x) { return softmax(x, 1); });
  check("reshape", a, [](const Tensor& x) { return reshape(x, {2, 6}); });
  check("transpose", a, [](const Tensor& x) { return transpose(x); });
  check("concat.0", a, [&](const Tensor& x) { return concat({x, c, x}, 0); });
  check("concat_last_axis", a, [&](const Tensor& x) { return concat_last_axis({c, x}); });
  check("slice", a, [](const Tensor& x) { return slice(x, 1, 1, 3); });
  check("cumsum_last_axis", a, [](const Tensor& x) { return cumsum_last_axis(x); });
  check("layer_norm", a, [](const Tensor& x) { return layer_norm(x); });
  check("layer_norm.affine.x", a, [&](const Tensor& x) { return layer_norm(x, row, row); });
  check("layer_norm.affine.gain", row, [&](const Tensor& x) { return layer_norm(a, x, row); });
  check("dropout", a, [&](const Tensor& x) { return dropout(x, 0.3f, true, derive_key(seed, 7)); });
  check("survival_curve", random_tensor(rng, {3, 4}, 0.05, 0.95), [](const Tensor& x) { return survival_curve(x); });

  {
    const std::vector<SurvivalRecord> recs = {{5, false, 0}, {9, true, 2}, {12, false, 3}};
    const std::vector<double> w = {1.2, 0.8, 1.1, 0.9};
    const Tensor logits = random_tensor(rng, {3, 4});
    rows.push_back({"nll_loss", seed, grad_check([&](const Tensor& x) { return nll_loss(hazards(x), recs, w); }, logits, eps)});
  }

  // Cross-attention with respect to latent and tokens.
  {
    const std::size_t cl = 3, dl = 4, heads = 2, dh = 3, dx = 2, t = 5;
    ModalityWeights w{std::nullopt, std::nullopt, std::nullopt, random_tensor(rng, {dl, heads * dh}, -1, 1),
                      random_tensor(rng, {dx, heads * dh}, -1, 1), random_tensor(rng, {dx, heads * dh}, -1, 1),
                      random_tensor(rng, {heads * dh, dl}, -1, 1), random_tensor(rng, {dl}, -1, 1)};
    w.input_gain = random_tensor(rng, {dx}, 0.5, 1.5);
    w.input_bias = random_tensor(rng, {dx}, -0.5, 0.5);
    const Tensor gain = random_tensor(rng, {dl}, 0.5, 1.5), bias = random_tensor(rng, {dl}, -0.5, 0.5);
    const Tensor latent = random_tensor(rng, {cl, dl});
    const Tensor tokens = random_tensor(rng, {t, dx});
    const AttentionSettings st{heads, dh, 0.2f};
    const DropoutContext drop{true, derive_key(seed, 9)};
    check("cross_attention.latent", latent, [&](const Tensor& x) {
      return cross_attention(x, tokens, w, gain, bias, st, drop, 3).context;
    });
    check("cross_attention.tokens", tokens, [&](const Tensor& x) {
      return cross_attention(latent, x, w, gain, bias, st, drop, 3).context;
    });
  }

  // Full model, all trainable parameters, one padded and one absent sample.
  {
    FusionConfig cfg;
    cfg.modalities = {{"tab", ModalityKind::tabular, 4, 1}, {"img", ModalityKind::patches, 3, 2}};
    cfg.latent_channels = 2;
    cfg.latent_dims = 3;
    cfg.depth = 2;
    cfg.heads = 2;
    cfg.dims_per_head = 2;
    cfg.attn_dropout = 0.1f;
    cfg.ff_dropout = 0.1f;
    cfg.snn_hidden_mult = 2;
    HealNetModel model = HealNetModel::create(cfg, derive_key(seed, 11));
    std::vector<ModalityBatch> batch(2);
    batch[0] = {0, random_tensor(rng, {2, 4, 1}), {1, 1}, {}};
    batch[1] = {1, random_tensor(rng, {2, 3, 2}), {1, 0}, {2, 3}};
    const std::vector<SurvivalRecord> recs = {{3, false, 1}, {7, true, 2}};
    const std::vector<double> w = {1.0, 1.0, 1.0, 1.0};
    auto loss = [&](const ParameterStore& store, Tape* tape) {
      ForwardOptions opts{true, seed, 1, false, tape};
      return nll_loss(hazards(model.forward_with(store, batch, opts).logits), recs, w);
    };
    rows.push_back({"model.parameters", seed, grad_check_parameters(model.parameters(), loss, eps)});
  }
  return rows;
}

}  // namespace healnet
