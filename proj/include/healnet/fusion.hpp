#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "healnet/ops.hpp"
#include "healnet/rng.hpp"
#include "healnet/tensor.hpp"

namespace healnet {

enum class ModalityKind : std::uint32_t { tabular = 0, patches = 1 };

/// Static description of one input modality. Tabular inputs are p tokens of
/// one channel; patch inputs are up to `tokens` patches of `channels` features.
struct ModalitySpec {
  std::string name;
  ModalityKind kind = ModalityKind::tabular;
  std::size_t tokens = 1;
  std::size_t channels = 1;
};

enum class HeadMode : std::uint32_t { flatten = 0, mean_pool = 1 };

struct FusionConfig {
  std::vector<ModalitySpec> modalities;
  std::size_t latent_channels = 16;
  std::size_t latent_dims = 32;
  std::size_t depth = 2;
  std::size_t heads = 8;
  std::size_t dims_per_head = 16;
  std::size_t bins = 4;
  float attn_dropout = 0.0f;
  float ff_dropout = 0.0f;
  std::size_t snn_hidden_mult = 1;
  bool latent_trainable = true;
  /// SELU feed-forward block with dropout. When off the block is a ReLU
  /// dense layer without dropout (the unregularised ablation arm).
  bool snn = true;
  HeadMode head = HeadMode::flatten;

  std::size_t attention_dims() const { return heads * dims_per_head; }

  std::size_t modality_index(const std::string& name) const {
    for (std::size_t i = 0; i < modalities.size(); ++i)
      if (modalities[i].name == name) return i;
    throw ConfigError("unknown modality '" + name + "'");
  }

  void validate() const {
    if (modalities.empty()) throw ConfigError("model needs at least one modality");
    if (latent_channels == 0 || latent_dims == 0) throw ConfigError("latent array dims must be >= 1");
    if (heads == 0 || dims_per_head == 0) throw ConfigError("heads and dims_per_head must be >= 1");
    if (bins < 2) throw ConfigError("bins must be >= 2");
    if (snn_hidden_mult == 0) throw ConfigError("snn_hidden_mult must be >= 1");
    if (attn_dropout < 0 || attn_dropout >= 1 || ff_dropout < 0 || ff_dropout >= 1)
      throw ConfigError("dropout rates must be in [0, 1)");
    for (std::size_t i = 0; i < modalities.size(); ++i) {
      const auto& m = modalities[i];
      if (m.tokens == 0 || m.channels == 0) throw ConfigError("modality '" + m.name + "' needs t_m >= 1 and d_x >= 1");
      if (m.kind == ModalityKind::tabular && m.channels != 1)
        throw ConfigError("tabular modality '" + m.name + "' must have one channel");
      for (std::size_t j = 0; j < i; ++j)
        if (modalities[j].name == m.name) throw ConfigError("duplicate modality '" + m.name + "'");
    }
  }
};

/// One modality's inputs for a batch of n samples.
struct ModalityBatch {
  std::size_t modality = 0;            ///< index into FusionConfig::modalities
  Tensor data;                         ///< [n x t_m x d_x]
  std::vector<std::uint8_t> present;   ///< 0 = modality absent for the sample
  std::vector<std::size_t> lengths;    ///< valid leading tokens per sample; empty = all
};

/// Attention of every latent channel over one modality's tokens at one layer.
struct AttentionMap {
  std::size_t layer = 0;
  std::size_t modality = 0;
  std::size_t heads = 0;
  std::size_t rows = 0;    ///< latent channels
  std::size_t tokens = 0;  ///< t_m, padded positions hold exact zeros
  /// Per sample: heads x rows x tokens, row-major. Empty when the modality was
  /// absent for that sample.
  std::vector<std::vector<float>> samples;
};

struct AttentionRecord {
  std::size_t samples = 0;
  std::vector<AttentionMap> maps;
  std::vector<std::uint8_t> all_absent;  ///< prediction came from the initial latent

  const AttentionMap* find(std::size_t layer, std::size_t modality) const {
    for (const auto& m : maps)
      if (m.layer == layer && m.modality == modality) return &m;
    return nullptr;
  }
};

/// Tensors of one modality's cross-attention, bound for a single forward pass.
struct ModalityWeights {
  std::optional<Tensor> input_gain, input_bias;  ///< channel layer norm (d_x > 1)
  std::optional<Tensor> position;                ///< tabular per-feature embedding [t]
  Tensor w_q, w_k, w_v, w_out, b_out;
};

/// Shared update parameters and head.
struct SharedWeights {
  Tensor latent;
  Tensor latent_gain, latent_bias;
  Tensor ff_w1, ff_b1;
  std::optional<Tensor> ff_w2, ff_b2;
  Tensor head_w, head_b;
};

struct AttentionSettings {
  std::size_t heads = 1;
  std::size_t dims_per_head = 1;
  float dropout = 0.0f;
};

/// Dropout stream for one sample at one optimisation step.
struct DropoutContext {
  bool training = false;
  std::uint64_t key = 0;

  std::uint64_t site(std::uint64_t layer, std::uint64_t modality, std::uint64_t kind, std::uint64_t extra = 0) const {
    return derive_key(key, layer, modality, kind, extra);
  }
};

struct CrossAttentionOutput {
  Tensor context;                ///< [c_l x d_l]
  std::vector<float> attention;  ///< heads x c_l x t, pre-dropout
};

inline Tensor prepare_tokens(const Tensor& tokens, const ModalityWeights& w) {
  if (w.position) {
    const std::size_t t = tokens.dim(0);
    if (w.position->dim(0) < t) throw ConfigError("more tabular tokens than positional embeddings");
    Tensor pos = t == w.position->dim(0) ? *w.position : slice(*w.position, 0, 0, t);
    return add(tokens, reshape(pos, {t, 1}));
  }
  if (w.input_gain) return layer_norm(tokens, *w.input_gain, *w.input_bias);
  return tokens;
}

/// Latent-as-query cross-attention over one sample's tokens [t x d_x].
inline CrossAttentionOutput cross_attention(const Tensor& latent, const Tensor& tokens, const ModalityWeights& w,
                                            const Tensor& latent_gain, const Tensor& latent_bias,
                                            const AttentionSettings& settings, const DropoutContext& drop,
                                            std::uint64_t site_key = 0) {
  if (tokens.rank() != 2 || tokens.dim(1) != w.w_k.dim(0))
    throw ConfigError("cross_attention: tokens " + to_string(tokens.shape()) + " do not match key projection " +
                      to_string(w.w_k.shape()));
  const std::size_t dh = settings.dims_per_head;
  const std::size_t rows = latent.dim(0);
  const std::size_t t = tokens.dim(0);

  const Tensor x = prepare_tokens(tokens, w);
  const Tensor q = matmul(layer_norm(latent, latent_gain, latent_bias), w.w_q);
  const Tensor k = matmul(x, w.w_k);
  const Tensor v = matmul(x, w.w_v);
  const float inv_sqrt = 1.0f / std::sqrt(static_cast<float>(dh));

  CrossAttentionOutput out;
  out.attention.reserve(settings.heads * rows * t);
  std::vector<Tensor> head_out;
  head_out.reserve(settings.heads);
  for (std::size_t h = 0; h < settings.heads; ++h) {
    const Tensor qh = settings.heads == 1 ? q : slice(q, 1, h * dh, (h + 1) * dh);
    const Tensor kh = settings.heads == 1 ? k : slice(k, 1, h * dh, (h + 1) * dh);
    const Tensor vh = settings.heads == 1 ? v : slice(v, 1, h * dh, (h + 1) * dh);
    const Tensor a = softmax(scale(matmul(qh, transpose(kh)), inv_sqrt), 1);
    out.attention.insert(out.attention.end(), a.data().begin(), a.data().end());
    const Tensor ad = dropout(a, settings.dropout, drop.training, derive_key(site_key, h));
    head_out.push_back(matmul(ad, vh));
  }
  const Tensor merged = settings.heads == 1 ? head_out.front() : concat_last_axis(head_out);
  out.context = add_bias(matmul(merged, w.w_out), w.b_out);
  return out;
}

/// Shared feed-forward block applied after each residual update.
inline Tensor snn_block(const Tensor& x, const SharedWeights& s, bool snn, float ff_dropout, const DropoutContext& drop,
                        std::uint64_t site_key) {
  Tensor h = add_bias(matmul(x, s.ff_w1), s.ff_b1);
  h = snn ? selu(h) : relu(h);
  if (snn) h = dropout(h, ff_dropout, drop.training, site_key);
  if (s.ff_w2) h = add_bias(matmul(h, *s.ff_w2), *s.ff_b2);
  return h;
}

class HealNetModel;

struct ForwardOptions {
  bool training = false;
  std::uint64_t seed = 0;  ///< dropout stream seed
  std::uint64_t step = 0;  ///< optimisation step, part of the dropout counter
  bool record_attention = true;
  Tape* tape = nullptr;    ///< parameters are watched on this tape when set
};

struct ForwardResult {
  Tensor logits;  ///< [n x k]
  AttentionRecord attention;
};

class HealNetModel {
 public:
  /// Fresh model; S0 ~ U(0,1), projections LeCun-normal, biases zero.
  static HealNetModel create(FusionConfig config, std::uint64_t seed) {
    config.validate();
    Rng rng(seed);
    ParameterStore store;
    const std::size_t cl = config.latent_channels, dl = config.latent_dims, da = config.attention_dims();
    auto normal = [&rng](Shape shape, double stddev) {
      std::vector<float> v(numel(shape));
      for (auto& x : v) x = static_cast<float>(standard_normal(rng) * stddev);
      return Tensor(std::move(shape), std::move(v));
    };
    auto lecun = [&](std::size_t fan_in, std::size_t fan_out) {
      return normal({fan_in, fan_out}, 1.0 / std::sqrt(static_cast<double>(fan_in)));
    };

    std::vector<float> s0(cl * dl);
    for (auto& x : s0) x = static_cast<float>(uniform01(rng));
    store.add("latent", Tensor({cl, dl}, std::move(s0)), config.latent_trainable);
    store.add("shared.latent_norm.gain", Tensor::ones({dl}));
    store.add("shared.latent_norm.bias", Tensor::zeros({dl}));
    const std::size_t hidden = dl * config.snn_hidden_mult;
    store.add("shared.ff.w1", lecun(dl, hidden));
    store.add("shared.ff.b1", Tensor::zeros({hidden}));
    if (config.snn_hidden_mult > 1) {
      store.add("shared.ff.w2", lecun(hidden, dl));
      store.add("shared.ff.b2", Tensor::zeros({dl}));
    }
    for (const auto& m : config.modalities) {
      const std::string p = "mod." + m.name + ".";
      if (m.kind == ModalityKind::tabular) {
        store.add(p + "position", normal({m.tokens}, 1.0));
      } else if (m.channels > 1) {
        store.add(p + "input_norm.gain", Tensor::ones({m.channels}));
        store.add(p + "input_norm.bias", Tensor::zeros({m.channels}));
      }
      store.add(p + "w_q", lecun(dl, da));
      store.add(p + "w_k", lecun(m.channels, da));
      store.add(p + "w_v", lecun(m.channels, da));
      store.add(p + "w_out", lecun(da, dl));
      store.add(p + "b_out", Tensor::zeros({dl}));
    }
    const std::size_t head_in = config.head == HeadMode::flatten ? cl * dl : dl;
    store.add("head.w", lecun(head_in, config.bins));
    store.add("head.b", Tensor::zeros({config.bins}));
    return HealNetModel(Unchecked{}, std::move(config), std::move(store));
  }

  /// Adopts an existing parameter set; names and shapes are checked against
  /// a freshly initialised model of the same config.
  HealNetModel(FusionConfig config, ParameterStore params) : config_(std::move(config)), params_(std::move(params)) {
    const HealNetModel reference = create(config_, 0);
    if (reference.params_.size() != params_.size())
      throw ConfigError("parameter set does not match model config (count " + std::to_string(params_.size()) +
                        " vs " + std::to_string(reference.params_.size()) + ")");
    for (const auto& p : reference.params_.all()) {
      if (!params_.contains(p.name)) throw ConfigError("missing parameter '" + p.name + "'");
      auto& mine = params_[params_.find(p.name)];
      if (mine.value.shape() != p.value.shape())
        throw ConfigError("parameter '" + p.name + "' has shape " + to_string(mine.value.shape()) + ", expected " +
                          to_string(p.value.shape()));
      mine.trainable = p.trainable;
    }
  }

  const FusionConfig& config() const noexcept { return config_; }
  const ParameterStore& parameters() const noexcept { return params_; }
  ParameterStore& parameters() noexcept { return params_; }
  std::size_t trainable_parameter_count() const { return params_.trainable_count(); }

  /// Weight-bound views; parameters are watched on `tape` when given.
  SharedWeights bind_shared(const ParameterStore& store, Tape* tape) const {
    auto get = [&](const std::string& name) {
      const ParamId id = store.find(name);
      return tape ? tape->watch(store, id) : store[id].value;
    };
    SharedWeights s{get("latent"), get("shared.latent_norm.gain"), get("shared.latent_norm.bias"),
                    get("shared.ff.w1"), get("shared.ff.b1"), std::nullopt, std::nullopt,
                    get("head.w"), get("head.b")};
    if (config_.snn_hidden_mult > 1) {
      s.ff_w2 = get("shared.ff.w2");
      s.ff_b2 = get("shared.ff.b2");
    }
    return s;
  }

  ModalityWeights bind_modality(const ParameterStore& store, std::size_t modality, Tape* tape) const {
    const auto& m = config_.modalities.at(modality);
    const std::string p = "mod." + m.name + ".";
    auto get = [&](const std::string& name) {
      const ParamId id = store.find(p + name);
      return tape ? tape->watch(store, id) : store[id].value;
    };
    ModalityWeights w{std::nullopt, std::nullopt, std::nullopt, get("w_q"), get("w_k"), get("w_v"), get("w_out"),
                      get("b_out")};
    if (m.kind == ModalityKind::tabular) {
      w.position = get("position");
    } else if (m.channels > 1) {
      w.input_gain = get("input_norm.gain");
      w.input_bias = get("input_norm.bias");
    }
    return w;
  }

  AttentionSettings attention_settings() const {
    return {config_.heads, config_.dims_per_head, config_.attn_dropout};
  }

  /// One modality step: S_{t+1} = FF(S_t + context). Absent modality returns
  /// the input latent unchanged.
  Tensor modality_update(const Tensor& latent, const Tensor* tokens, std::size_t modality, std::size_t layer,
                         const ModalityWeights& w, const SharedWeights& s, const DropoutContext& drop,
                         std::vector<float>* attention_out = nullptr) const {
    if (!tokens) return latent;
    const std::uint64_t attn_site = drop.site(layer, modality, 0);
    auto ca = cross_attention(latent, *tokens, w, s.latent_gain, s.latent_bias, attention_settings(), drop, attn_site);
    if (attention_out) *attention_out = std::move(ca.attention);
    return snn_block(add(latent, ca.context), s, config_.snn, config_.ff_dropout, drop, drop.site(layer, modality, 1));
  }

  /// logits [1 x k] from a final latent array.
  Tensor head(const Tensor& latent, const SharedWeights& s) const {
    const std::size_t cl = config_.latent_channels, dl = config_.latent_dims;
    Tensor features = config_.head == HeadMode::flatten
                          ? reshape(latent, {1, cl * dl})
                          : reshape(scale(sum_axis(latent, 0), 1.0f / static_cast<float>(cl)), {1, dl});
    return add_bias(matmul(features, s.head_w), s.head_b);
  }

  ForwardResult forward(std::span<const ModalityBatch> batch, const ForwardOptions& opts = {}) const {
    return forward_with(params_, batch, opts);
  }

  /// Forward pass with an explicit parameter set of this model's layout.
  ForwardResult forward_with(const ParameterStore& store, std::span<const ModalityBatch> batch,
                             const ForwardOptions& opts) const {
    if (batch.empty()) throw ConfigError("forward: empty modality list");
    std::vector<const ModalityBatch*> order;
    for (const auto& b : batch) order.push_back(&b);
    std::sort(order.begin(), order.end(), [](auto* a, auto* b) { return a->modality < b->modality; });
    const std::size_t n = order.front()->data.rank() ? order.front()->data.dim(0) : 0;
    for (std::size_t i = 0; i < order.size(); ++i) {
      const auto& b = *order[i];
      if (b.modality >= config_.modalities.size())
        throw ConfigError("forward: modality id " + std::to_string(b.modality) + " not in model");
      if (i && order[i - 1]->modality == b.modality)
        throw ConfigError("forward: duplicate modality id " + std::to_string(b.modality));
      const auto& spec = config_.modalities[b.modality];
      if (b.data.rank() != 3 || b.data.dim(0) != n || b.data.dim(2) != spec.channels)
        throw ConfigError("forward: modality '" + spec.name + "' data " + to_string(b.data.shape()) +
                          " does not match n=" + std::to_string(n) + ", d_x=" + std::to_string(spec.channels));
      if (spec.kind == ModalityKind::tabular && b.data.dim(1) != spec.tokens)
        throw ConfigError("forward: tabular modality '" + spec.name + "' expects " + std::to_string(spec.tokens) +
                          " features, got " + std::to_string(b.data.dim(1)));
      if (b.present.size() != n || (!b.lengths.empty() && b.lengths.size() != n))
        throw ConfigError("forward: mask length mismatch for modality '" + spec.name + "'");
    }

    const SharedWeights shared = bind_shared(store, opts.tape);
    std::vector<ModalityWeights> weights;
    for (const auto* b : order) weights.push_back(bind_modality(store, b->modality, opts.tape));

    ForwardResult result;
    auto& rec = result.attention;
    rec.samples = n;
    rec.all_absent.assign(n, 0);
    if (opts.record_attention)
      for (std::size_t l = 0; l < config_.depth; ++l)
        for (const auto* b : order) {
          AttentionMap m;
          m.layer = l;
          m.modality = b->modality;
          m.heads = config_.heads;
          m.rows = config_.latent_channels;
          m.tokens = b->data.dim(1);
          m.samples.resize(n);
          rec.maps.push_back(std::move(m));
        }

    std::vector<Tensor> rows;
    rows.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
      std::vector<std::optional<Tensor>> tokens;
      bool any = false;
      for (const auto* b : order) {
        if (!b->present[i]) {
          tokens.emplace_back();
          continue;
        }
        tokens.push_back(sample_tokens(*b, i));
        any = true;
      }
      rec.all_absent[i] = any ? 0 : 1;
      const DropoutContext drop{opts.training, derive_key(opts.seed, opts.step, i)};
      Tensor latent = shared.latent;
      std::size_t map_index = 0;
      for (std::size_t l = 0; l < config_.depth; ++l)
        for (std::size_t j = 0; j < order.size(); ++j, ++map_index) {
          const Tensor* tok = tokens[j] ? &*tokens[j] : nullptr;
          std::vector<float> attn;
          latent = modality_update(latent, tok, order[j]->modality, l, weights[j], shared, drop,
                                   opts.record_attention ? &attn : nullptr);
          if (opts.record_attention && tok) rec.maps[map_index].samples[i] = pad_attention(attn, tok->dim(0),
                                                                                             rec.maps[map_index].tokens);
        }
      rows.push_back(head(latent, shared));
    }
    result.logits = concat(rows, 0);
    return result;
  }

 private:
  static Tensor sample_tokens(const ModalityBatch& b, std::size_t i) {
    const std::size_t t = b.data.dim(1), dx = b.data.dim(2);
    const std::size_t len = b.lengths.empty() ? t : b.lengths[i];
    if (len == 0 || len > t) throw ConfigError("forward: invalid token count " + std::to_string(len));
    const auto src = b.data.data().subspan(i * t * dx, len * dx);
    return Tensor({len, dx}, std::vector<float>(src.begin(), src.end()));
  }

  /// Expand heads x rows x len to heads x rows x t_m with zero padding.
  std::vector<float> pad_attention(const std::vector<float>& a, std::size_t len, std::size_t t) const {
    if (len == t) return a;
    const std::size_t blocks = a.size() / len;
    std::vector<float> out(blocks * t, 0.0f);
    for (std::size_t r = 0; r < blocks; ++r) std::copy_n(&a[r * len], len, &out[r * t]);
    return out;
  }

  struct Unchecked {};
  HealNetModel(Unchecked, FusionConfig config, ParameterStore params)
      : config_(std::move(config)), params_(std::move(params)) {}

  FusionConfig config_;
  ParameterStore params_;
};

/// Mean attention over layers, heads and latent channels for every sample,
/// renormalised to sum to one. Samples where the modality was absent yield
/// std::nullopt.
inline std::vector<std::optional<std::vector<float>>> mean_attention(const AttentionRecord& record,
                                                                     std::size_t modality) {
  std::vector<const AttentionMap*> maps;
  for (const auto& m : record.maps)
    if (m.modality == modality) maps.push_back(&m);
  if (maps.empty()) throw ContractError("mean_attention: modality " + std::to_string(modality) + " not in record");

  std::vector<std::optional<std::vector<float>>> out(record.samples);
  for (std::size_t i = 0; i < record.samples; ++i) {
    std::vector<double> acc;
    std::size_t count = 0;
    for (const auto* m : maps) {
      const auto& a = m->samples[i];
      if (a.empty()) continue;
      if (acc.empty()) acc.assign(m->tokens, 0.0);
      for (std::size_t r = 0; r < m->heads * m->rows; ++r)
        for (std::size_t j = 0; j < m->tokens; ++j) acc[j] += a[r * m->tokens + j];
      count += m->heads * m->rows;
    }
    if (count == 0) continue;
    double total = 0.0;
    for (double v : acc) total += v;
    std::vector<float> v(acc.size());
    for (std::size_t j = 0; j < acc.size(); ++j) v[j] = static_cast<float>(acc[j] / total);
    out[i] = std::move(v);
  }
  return out;
}

}  // namespace healnet
