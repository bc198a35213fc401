#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "healnet/data.hpp"
#include "healnet/fusion.hpp"
#include "healnet/training.hpp"

namespace healnet {

enum class KeyKind { integer, number, boolean, text };

struct KeySpec {
  std::string key;
  std::string fallback;
  KeyKind kind;
  std::string help;
};

/// Flat key=value run configuration. Every key is checked against schema();
/// `#` starts a comment.
class RunConfig {
 public:
  static const std::vector<KeySpec>& schema() {
    static const std::vector<KeySpec> keys = {
        {"modalities", "omic,wsi", KeyKind::text, "comma-separated modality names, in id order"},
        {"scenario", "cross_modal_interaction", KeyKind::text,
         "synthetic scenario: cross_modal_interaction | modality_dominance | noise_modality"},
        {"n", "600", KeyKind::integer, "synthetic sample count"},
        {"p", "32", KeyKind::integer, "synthetic omic feature count"},
        {"t", "16", KeyKind::integer, "synthetic patches per slide"},
        {"d_x", "8", KeyKind::integer, "synthetic patch feature width"},
        {"censor_rate", "0.3", KeyKind::number, "synthetic censoring probability, [0, 1)"},
        {"noise_sigma", "0.3", KeyKind::number, "synthetic feature and time noise"},
        {"latent_channels", "16", KeyKind::integer, "latent array rows c_l"},
        {"latent_dims", "32", KeyKind::integer, "latent array width d_l"},
        {"depth", "2", KeyKind::integer, "fusion layers (weights shared)"},
        {"heads", "8", KeyKind::integer, "attention heads"},
        {"dims_per_head", "16", KeyKind::integer, "attention width per head"},
        {"attn_dropout", "0", KeyKind::number, "attention dropout"},
        {"ff_dropout", "0", KeyKind::number, "feed-forward dropout (SNN block only)"},
        {"snn_hidden_mult", "1", KeyKind::integer, "feed-forward hidden width as a multiple of d_l"},
        {"latent_trainable", "true", KeyKind::boolean, "train the initial latent array"},
        {"head", "flatten", KeyKind::text, "head input: flatten | mean_pool"},
        {"epochs", "50", KeyKind::integer, "maximum epochs"},
        {"batch_size", "8", KeyKind::integer, "minibatch size"},
        {"early_stop_patience", "5", KeyKind::integer, "epochs without improvement before stopping; 0 = off"},
        {"max_lr", "0.008", KeyKind::number, "OneCycle peak learning rate"},
        {"momentum", "0.92", KeyKind::number, "Adam beta1"},
        {"l1", "0.00001", KeyKind::number, "L1 coefficient (ignored when reg_mode=none)"},
        {"l2", "0", KeyKind::number, "L2 coefficient"},
        {"reg_mode", "l1_snn", KeyKind::text, "none | l1_only | l1_snn"},
        {"select", "val_nll", KeyKind::text, "best-epoch metric: val_nll | val_cindex"},
        {"folds", "5", KeyKind::integer, "cross-validation folds"},
        {"train_frac", "0.70", KeyKind::number, "training fraction"},
        {"val_frac", "0.15", KeyKind::number, "validation fraction"},
        {"test_frac", "0.15", KeyKind::number, "test fraction"},
        {"bins", "4", KeyKind::integer, "survival bins k"},
        {"modality_dropout", "0", KeyKind::number, "per-sample chance of hiding one modality while training, [0, 1)"},
        {"seed", "0", KeyKind::integer, "master seed"},
        {"token_grid", "", KeyKind::text, "2D token layouts for heatmaps, e.g. wsi:4x4"},
        {"drop_seed", "0", KeyKind::integer, "seed for missing-modality drop plans"},
    };
    return keys;
  }

  static const KeySpec* spec(const std::string& key) {
    for (const auto& k : schema())
      if (k.key == key) return &k;
    return nullptr;
  }

  RunConfig() {
    for (const auto& k : schema()) values_[k.key] = k.fallback;
  }

  /// Parses key=value text; lines starting with "result." are skipped so a
  /// report can be read back as a config. Errors are collected, not thrown.
  void merge_text(const std::string& text, const std::string& origin, std::vector<std::string>& errors) {
    std::istringstream in(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
      line = trim(line);
      if (line.empty() || line.rfind("result.", 0) == 0) continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos) {
        errors.push_back(origin + ":" + std::to_string(lineno) + ": expected key=value");
        continue;
      }
      set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)), errors, origin + ":" + std::to_string(lineno));
    }
  }

  void set(const std::string& key, const std::string& value, std::vector<std::string>& errors,
           const std::string& where = "--set") {
    if (!spec(key)) {
      errors.push_back(where + ": unknown key '" + key + "'");
      return;
    }
    values_[key] = value;
  }

  const std::string& get(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError("unknown key '" + key + "'");
    return it->second;
  }

  const std::map<std::string, std::string>& values() const noexcept { return values_; }

  /// Every problem with the current values; empty when valid.
  std::vector<std::string> problems() const {
    std::vector<std::string> errs;
    for (const auto& k : schema()) {
      const auto& v = get(k.key);
      switch (k.kind) {
        case KeyKind::integer:
          if (!parse_uint(v)) errs.push_back(k.key + ": expected a non-negative integer, got '" + v + "'");
          break;
        case KeyKind::number:
          if (!detail::parse_number(v)) errs.push_back(k.key + ": expected a number, got '" + v + "'");
          break;
        case KeyKind::boolean:
          if (!parse_bool(v)) errs.push_back(k.key + ": expected true or false, got '" + v + "'");
          break;
        case KeyKind::text:
          break;
      }
    }
    if (!errs.empty()) return errs;
    auto check = [&errs](auto&& fn) {
      try {
        fn();
      } catch (const ConfigError& e) {
        errs.push_back(e.what());
      }
    };
    check([&] { synth().validate(); });
    check([&] { (void)parse_reg_mode(get("reg_mode")); });
    check([&] { (void)parse_select(get("select")); });
    check([&] { train_numbers().validate(); });
    check([&] { model_template().validate_without_modalities(); });
    check([&] { (void)modality_names(); });
    check([&] { (void)token_grids(); });
    return errs;
  }

  void require_valid() const {
    const auto errs = problems();
    if (errs.empty()) return;
    std::string msg = std::to_string(errs.size()) + " configuration error(s):";
    for (const auto& e : errs) msg += "\n  " + e;
    throw ConfigError(msg);
  }

  static SelectMetric parse_select(const std::string& sel) {
    if (sel == "val_nll") return SelectMetric::val_nll;
    if (sel == "val_cindex") return SelectMetric::val_cindex;
    throw ConfigError("select: expected val_nll or val_cindex, got '" + sel + "'");
  }

  SynthScenario synth() const {
    SynthScenario s;
    s.scenario = parse_scenario(get("scenario"));
    s.n = uint_of("n");
    s.p = uint_of("p");
    s.t = uint_of("t");
    s.d_x = uint_of("d_x");
    s.censor_rate = num_of("censor_rate");
    s.noise_sigma = num_of("noise_sigma");
    return s;
  }

  TrainConfig train() const {
    TrainConfig t = train_numbers();
    t.reg_mode = parse_reg_mode(get("reg_mode"));
    t.select = parse_select(get("select"));
    return t;
  }

  /// train() without the enum keys, so numeric checks run even when those are bad.
  TrainConfig train_numbers() const {
    TrainConfig t;
    t.epochs = uint_of("epochs");
    t.batch_size = uint_of("batch_size");
    t.early_stop_patience = uint_of("early_stop_patience");
    t.max_lr = num_of("max_lr");
    t.momentum = num_of("momentum");
    t.l1 = num_of("l1");
    t.l2 = num_of("l2");
    t.folds = uint_of("folds");
    t.train_frac = num_of("train_frac");
    t.val_frac = num_of("val_frac");
    t.test_frac = num_of("test_frac");
    t.bins = uint_of("bins");
    t.modality_dropout = num_of("modality_dropout");
    t.seed = uint_of("seed");
    return t;
  }

  struct ModelTemplate {
    FusionConfig config;
    void validate_without_modalities() const {
      FusionConfig c = config;
      c.modalities = {{"probe", ModalityKind::tabular, 1, 1}};
      c.validate();
    }
  };

  ModelTemplate model_template() const {
    FusionConfig c;
    c.latent_channels = uint_of("latent_channels");
    c.latent_dims = uint_of("latent_dims");
    c.depth = uint_of("depth");
    c.heads = uint_of("heads");
    c.dims_per_head = uint_of("dims_per_head");
    c.attn_dropout = static_cast<float>(num_of("attn_dropout"));
    c.ff_dropout = static_cast<float>(num_of("ff_dropout"));
    c.snn_hidden_mult = uint_of("snn_hidden_mult");
    c.latent_trainable = *parse_bool(get("latent_trainable"));
    c.bins = uint_of("bins");
    const auto& head = get("head");
    if (head == "flatten")
      c.head = HeadMode::flatten;
    else if (head == "mean_pool")
      c.head = HeadMode::mean_pool;
    else
      throw ConfigError("head: expected flatten or mean_pool, got '" + head + "'");
    return {c};
  }

  /// Model config bound to the modalities of a dataset.
  FusionConfig model(const MultiModalDataset& ds) const {
    FusionConfig c = model_template().config;
    const auto names = modality_names();
    c.modalities = modality_specs(ds, names);
    c.validate();
    return c;
  }

  std::vector<std::string> modality_names() const {
    std::vector<std::string> out;
    std::stringstream ss(get("modalities"));
    std::string item;
    while (std::getline(ss, item, ',')) {
      item = trim(item);
      if (item.empty()) continue;
      for (const auto& o : out)
        if (o == item) throw ConfigError("modalities: duplicate '" + item + "'");
      out.push_back(item);
    }
    if (out.empty()) throw ConfigError("modalities: at least one modality required");
    return out;
  }

  /// token_grid entries: modality -> (rows, cols).
  std::map<std::string, std::pair<std::size_t, std::size_t>> token_grids() const {
    std::map<std::string, std::pair<std::size_t, std::size_t>> out;
    std::stringstream ss(get("token_grid"));
    std::string item;
    while (std::getline(ss, item, ',')) {
      item = trim(item);
      if (item.empty()) continue;
      const auto colon = item.find(':');
      const auto x = item.find('x', colon == std::string::npos ? 0 : colon);
      if (colon == std::string::npos || x == std::string::npos)
        throw ConfigError("token_grid: expected <modality>:<rows>x<cols>, got '" + item + "'");
      const auto r = parse_uint(item.substr(colon + 1, x - colon - 1));
      const auto c = parse_uint(item.substr(x + 1));
      if (!r || !c || *r == 0 || *c == 0) throw ConfigError("token_grid: bad dimensions in '" + item + "'");
      out[item.substr(0, colon)] = {*r, *c};
    }
    return out;
  }

  std::uint64_t uint_of(const std::string& key) const {
    const auto v = parse_uint(get(key));
    if (!v) throw ConfigError(key + ": expected a non-negative integer");
    return *v;
  }
  double num_of(const std::string& key) const {
    const auto v = detail::parse_number(get(key));
    if (!v) throw ConfigError(key + ": expected a number");
    return *v;
  }

  /// key=value lines in schema order.
  std::string to_text() const {
    std::string out;
    for (const auto& k : schema()) out += k.key + "=" + get(k.key) + "\n";
    return out;
  }

  static std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
  }

  static std::optional<std::uint64_t> parse_uint(const std::string& s) {
    if (s.empty() || s.size() > 20) return std::nullopt;
    std::uint64_t v = 0;
    for (char c : s) {
      if (c < '0' || c > '9') return std::nullopt;
      const std::uint64_t next = v * 10 + static_cast<std::uint64_t>(c - '0');
      if (next / 10 != v) return std::nullopt;
      v = next;
    }
    return v;
  }

  static std::optional<bool> parse_bool(const std::string& s) {
    if (s == "true" || s == "1" || s == "on") return true;
    if (s == "false" || s == "0" || s == "off") return false;
    return std::nullopt;
  }

 private:
  std::map<std::string, std::string> values_;
};

inline RunConfig load_run_config(const std::filesystem::path& path, std::vector<std::string>& errors) {
  RunConfig c;
  c.merge_text(detail::read_all(path), path.string(), errors);
  return c;
}

// ---------------------------------------------------------------------------
// Reports

namespace detail {

inline std::string join_doubles(const std::vector<double>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) out += ',';
    out += format_double(v[i]);
  }
  return out;
}

}  // namespace detail

/// report.kv body: config echo, then result.* lines. The wall time is the
/// only entry that varies between identical runs.
inline std::string format_report(const RunConfig& cfg, const CvResult& cv, double wall_seconds) {
  using detail::format_double;
  std::string out = cfg.to_text();
  out += "result.mean_cindex=" + format_double(cv.mean_cindex) + "\n";
  out += "result.std_cindex=" + format_double(cv.std_cindex) + "\n";
  out += "result.failed_folds=" + std::to_string(cv.failed) + "\n";
  for (const auto& f : cv.folds) {
    const std::string p = "result.fold" + std::to_string(f.fold) + ".";
    out += p + "test_cindex=" + format_double(f.test_cindex) + "\n";
    out += p + "best_epoch=" + std::to_string(f.best_epoch + 1) + "\n";
    out += p + "epochs_run=" + std::to_string(f.val_loss.size()) + "\n";
    out += p + "train_loss=" + detail::join_doubles(f.train_loss) + "\n";
    out += p + "val_loss=" + detail::join_doubles(f.val_loss) + "\n";
    out += p + "val_cindex=" + detail::join_doubles(f.val_cindex) + "\n";
    if (f.failed) out += p + "error=" + f.error + "\n";
  }
  out += "result.wall_seconds=" + format_double(wall_seconds) + "\n";
  return out;
}

inline std::string format_folds_csv(const CvResult& cv) {
  using detail::format_double;
  std::string out = "fold,test_cindex,best_epoch,epochs_run,final_train_loss,final_val_loss,failed\n";
  for (const auto& f : cv.folds) {
    out += std::to_string(f.fold) + "," + format_double(f.test_cindex) + "," + std::to_string(f.best_epoch + 1) + "," +
           std::to_string(f.val_loss.size()) + "," +
           (f.train_loss.empty() ? std::string("nan") : format_double(f.train_loss.back())) + "," +
           (f.val_loss.empty() ? std::string("nan") : format_double(f.val_loss.back())) + "," +
           (f.failed ? "1" : "0") + "\n";
  }
  return out;
}

/// Reads result.* entries of a report into a map.
inline std::map<std::string, std::string> read_report_results(const std::filesystem::path& path) {
  std::map<std::string, std::string> out;
  std::istringstream in(detail::read_all(path));
  std::string line;
  while (std::getline(in, line)) {
    if (line.rfind("result.", 0) != 0) continue;
    const auto eq = line.find('=');
    if (eq != std::string::npos) out[line.substr(0, eq)] = line.substr(eq + 1);
  }
  return out;
}

}  // namespace healnet
