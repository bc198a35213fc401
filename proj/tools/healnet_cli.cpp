// healnet: synthesise data, cross-validate, evaluate missing modalities,
// export attention and run gradient checks.

#include <CLI11.hpp>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <regex>
#include <string>
#include <vector>

#include "healnet/evaluation.hpp"
#include "healnet/gradcheck_suite.hpp"
#include "healnet/healnet.hpp"
#include "healnet/run_config.hpp"

namespace fs = std::filesystem;
using namespace healnet;

namespace {

enum Exit { kOk = 0, kUsage = 1, kData = 2, kNumerical = 3 };

#ifndef HEALNET_PRESET_DIR
#define HEALNET_PRESET_DIR "presets"
#endif

struct ConfigArgs {
  std::string config;
  std::string preset;
  std::vector<std::string> sets;
};

void add_config_args(CLI::App* cmd, ConfigArgs& a) {
  cmd->add_option("--config", a.config, "key=value config file");
  cmd->add_option("--preset", a.preset, "named preset: blca, brca, kirp, ucec, synth");
  cmd->add_option("--set", a.sets, "override, key=value (repeatable)");
}

/// Preset, then config file, then --set overrides; every error is reported.
RunConfig build_config(const ConfigArgs& a, std::vector<std::string> extra = {}) {
  RunConfig cfg;
  std::vector<std::string> errors;
  if (!a.preset.empty()) {
    const fs::path p = fs::path(HEALNET_PRESET_DIR) / (a.preset + ".kv");
    if (!fs::exists(p)) throw ConfigError("unknown preset '" + a.preset + "' (looked for " + p.string() + ")");
    cfg.merge_text(detail::read_all(p), p.string(), errors);
  }
  if (!a.config.empty()) {
    if (!fs::exists(a.config)) throw ConfigError("config file '" + a.config + "' not found");
    cfg.merge_text(detail::read_all(a.config), a.config, errors);
  }
  auto apply = [&](const std::string& kv) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) {
      errors.push_back("--set " + kv + ": expected key=value");
      return;
    }
    cfg.set(RunConfig::trim(kv.substr(0, eq)), RunConfig::trim(kv.substr(eq + 1)), errors);
  };
  for (const auto& kv : a.sets) apply(kv);
  for (const auto& kv : extra) apply(kv);
  for (const auto& p : cfg.problems()) errors.push_back(p);
  if (!errors.empty()) {
    std::string msg = std::to_string(errors.size()) + " configuration error(s):";
    for (const auto& e : errors) msg += "\n  " + e;
    throw ConfigError(msg);
  }
  return cfg;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out << text;
  if (!out) throw IoError("write failed for '" + path.string() + "'");
}

std::string fmt(double v, int prec = 4) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.*f", prec, v);
  return buf;
}

// ---------------------------------------------------------------------------

int cmd_synth(const ConfigArgs& a, const std::string& scenario, long long n, long long seed, const std::string& out) {
  if (n == 0) throw ConfigError("--n must be >= 1");
  if (n < 0 || seed < 0) throw ConfigError("--n and --seed must be non-negative");
  std::vector<std::string> extra;
  if (!scenario.empty()) extra.push_back("scenario=" + scenario);
  if (n > 0) extra.push_back("n=" + std::to_string(n));
  if (seed >= 0) extra.push_back("seed=" + std::to_string(seed));
  const RunConfig cfg = build_config(a, extra);
  const auto ds = generate_synthetic(cfg.synth(), cfg.uint_of("seed"));
  save_dataset(out, ds);
  std::cout << "wrote " << ds.size() << " samples (" << to_string(cfg.synth().scenario) << ") to " << out << "\n";
  return kOk;
}

std::string split_csv(const MultiModalDataset& ds, const FoldSplit& s) {
  std::vector<std::pair<std::size_t, const char*>> rows;
  for (auto i : s.train) rows.emplace_back(i, "train");
  for (auto i : s.val) rows.emplace_back(i, "val");
  for (auto i : s.test) rows.emplace_back(i, "test");
  std::sort(rows.begin(), rows.end());
  std::string out = "id,role\n";
  for (const auto& [i, role] : rows) out += ds.ids[i] + "," + role + "\n";
  return out;
}

int cmd_train(const ConfigArgs& a, const std::string& data_dir, const std::string& out, std::size_t jobs) {
  const RunConfig cfg = build_config(a);
  const auto t0 = std::chrono::steady_clock::now();
  JoinReport join;
  const auto ds = load_dataset(data_dir, cfg.modality_names(), &join);
  for (std::size_t m = 0; m < join.dropped.size(); ++m)
    if (join.dropped[m])
      std::cerr << "note: " << join.dropped[m] << " sample(s) of '" << ds.modalities[m].name
                << "' have no survival record and were dropped\n";
  const FusionConfig model = cfg.model(ds);
  const TrainConfig train = cfg.train();
  std::cerr << "training " << train.folds << " folds on " << ds.size() << " samples, " << model.modalities.size()
            << " modalities, " << HealNetModel::create(apply_reg_mode(model, train), 0).trainable_parameter_count()
            << " trainable parameters\n";
  const CvResult cv = cross_validate(ds, model, train, jobs);
  const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  fs::create_directories(out);
  write_text(fs::path(out) / "report.kv", format_report(cfg, cv, wall));
  write_text(fs::path(out) / "folds.csv", format_folds_csv(cv));
  for (const auto& f : cv.folds) {
    const std::string stem = "fold" + std::to_string(f.fold);
    write_text(fs::path(out) / (stem + "_split.csv"), split_csv(ds, cv.splits[f.fold]));
    if (f.checkpoint) save_checkpoint(fs::path(out) / (stem + ".ckpt"), *f.checkpoint);
    for (const auto& w : f.warnings) std::cerr << "fold " << f.fold << ": warning: " << w << "\n";
    if (f.failed) std::cerr << "fold " << f.fold << " FAILED: " << f.error << "\n";
  }
  std::cout << "c-index " << fmt(cv.mean_cindex) << " +- " << fmt(cv.std_cindex) << " over "
            << cv.folds.size() - cv.failed << "/" << cv.folds.size() << " folds (" << fmt(wall, 1) << " s)\n";
  return cv.failed ? kNumerical : kOk;
}

/// Test rows of a fold from its split file, mapped onto the dataset.
std::vector<std::size_t> test_rows(const fs::path& split_file, const MultiModalDataset& ds) {
  std::map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < ds.ids.size(); ++i) index[ds.ids[i]] = i;
  std::ifstream in(split_file);
  if (!in) throw IoError("cannot open split file '" + split_file.string() + "'");
  std::string line;
  std::getline(in, line);
  std::vector<std::size_t> rows;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    const auto comma = line.find(',');
    if (comma == std::string::npos) throw ParseError(split_file.string(), lineno, "expected id,role");
    if (line.substr(comma + 1) != "test") continue;
    auto it = index.find(line.substr(0, comma));
    if (it == index.end()) throw JoinError("test id '" + line.substr(0, comma) + "' not in dataset");
    rows.push_back(it->second);
  }
  std::sort(rows.begin(), rows.end());
  return rows;
}

std::vector<fs::path> checkpoints_at(const fs::path& p) {
  if (!fs::is_directory(p)) {
    if (!fs::exists(p)) throw IoError("checkpoint '" + p.string() + "' not found");
    return {p};
  }
  std::vector<fs::path> out;
  const std::regex name("fold[0-9]+\\.ckpt");
  for (const auto& e : fs::directory_iterator(p))
    if (std::regex_match(e.path().filename().string(), name)) out.push_back(e.path());
  std::sort(out.begin(), out.end(), [](const fs::path& x, const fs::path& y) {
    return std::stoul(x.stem().string().substr(4)) < std::stoul(y.stem().string().substr(4));
  });
  if (out.empty()) throw IoError("no fold<k>.ckpt files in '" + p.string() + "'");
  return out;
}

fs::path split_for(const fs::path& ckpt) { return ckpt.parent_path() / (ckpt.stem().string() + "_split.csv"); }

int cmd_eval_missing(const std::string& checkpoint, const std::string& data_dir, const std::string& plan_text,
                     std::uint64_t drop_seed, const std::string& out) {
  const DropPlan plan = DropPlan::parse(plan_text);
  std::vector<double> full, dropped;
  std::string report = "drop_plan=" + plan.name() + "\ndrop_seed=" + std::to_string(drop_seed) + "\n";
  for (const auto& path : checkpoints_at(checkpoint)) {
    const Checkpoint ck = load_checkpoint(path);
    if (plan.kind == DropPlan::Kind::drop) (void)ck.config.modality_index(plan.modality);
    if (plan.kind == DropPlan::Kind::half_half && ck.config.modalities.size() < 2)
      throw ConfigError("half-half needs a model with at least two modalities");
    std::vector<std::string> names;
    for (const auto& m : ck.config.modalities) names.push_back(m.name);
    const auto ds = load_dataset(data_dir, names);
    const auto rows = test_rows(split_for(path), ds);
    const auto r = evaluate_missing(ck, ds, rows, plan, derive_key(drop_seed, full.size()));
    std::cout << path.filename().string() << ": full " << fmt(r.full_cindex) << ", " << plan.name() << " "
              << fmt(r.plan_cindex) << " (" << r.samples << " test samples)\n";
    const std::string p = "result." + path.stem().string() + ".";
    report += p + "full_cindex=" + detail::format_double(r.full_cindex) + "\n";
    report += p + "plan_cindex=" + detail::format_double(r.plan_cindex) + "\n";
    if (!std::isnan(r.full_cindex)) full.push_back(r.full_cindex);
    if (!std::isnan(r.plan_cindex)) dropped.push_back(r.plan_cindex);
  }
  const auto [fm, fs_] = mean_std(full);
  const auto [dm, ds_] = mean_std(dropped);
  report += "result.mean_full_cindex=" + detail::format_double(fm) + "\n";
  report += "result.mean_plan_cindex=" + detail::format_double(dm) + "\n";
  std::cout << "mean: full " << fmt(fm) << " +- " << fmt(fs_) << ", " << plan.name() << " " << fmt(dm) << " +- "
            << fmt(ds_) << "\n";
  if (!out.empty()) {
    fs::create_directories(out);
    write_text(fs::path(out) / "eval_missing.kv", report);
  }
  return kOk;
}

int cmd_inspect(const ConfigArgs& a, const std::string& checkpoint, const std::string& data_dir,
                const std::string& sample_id, const std::string& out) {
  ConfigArgs merged = a;
  const fs::path ck_path(checkpoint);
  if (merged.config.empty() && fs::exists(ck_path.parent_path() / "report.kv"))
    merged.config = (ck_path.parent_path() / "report.kv").string();
  const RunConfig cfg = build_config(merged);
  const auto grids = cfg.token_grids();

  const Checkpoint ck = load_checkpoint(ck_path);
  std::vector<std::string> names;
  for (const auto& m : ck.config.modalities) names.push_back(m.name);
  const auto ds = apply_stored_scalers(load_dataset(data_dir, names), ck);
  const auto it = std::find(ds.ids.begin(), ds.ids.end(), sample_id);
  if (it == ds.ids.end()) throw JoinError("sample '" + sample_id + "' not in dataset");
  const std::size_t row = static_cast<std::size_t>(it - ds.ids.begin());

  const HealNetModel model = model_from_checkpoint(ck);
  const std::vector<std::size_t> rows = {row};
  const auto pred = predict(model, ds, rows, nullptr, true);
  fs::create_directories(out);
  for (std::size_t m = 0; m < names.size(); ++m) {
    const auto att = mean_attention(pred.attention, m)[0];
    if (!att) {
      std::cout << names[m] << ": absent for sample " << sample_id << ", no attention exported\n";
      continue;
    }
    std::string csv = "token,weight\n";
    for (std::size_t j = 0; j < att->size(); ++j) csv += std::to_string(j) + "," + detail::format_float((*att)[j]) + "\n";
    const fs::path csv_path = fs::path(out) / ("attention_" + names[m] + ".csv");
    write_text(csv_path, csv);
    std::cout << names[m] << ": " << att->size() << " tokens -> " << csv_path.string() << "\n";
    if (auto g = grids.find(names[m]); g != grids.end()) {
      const auto [r, c] = g->second;
      if (r * c != att->size())
        throw ConfigError("token_grid " + names[m] + ":" + std::to_string(r) + "x" + std::to_string(c) + " does not cover " +
                          std::to_string(att->size()) + " tokens");
      const float peak = *std::max_element(att->begin(), att->end());
      std::string pgm = "P5\n" + std::to_string(c) + " " + std::to_string(r) + "\n255\n";
      for (float w : *att)
        pgm.push_back(static_cast<char>(peak > 0 ? static_cast<unsigned char>(std::lround(255.0 * w / peak)) : 0));
      write_text(fs::path(out) / ("attention_" + names[m] + ".pgm"), pgm);
    }
  }
  return kOk;
}

int cmd_gradcheck(std::size_t seeds, double tol) {
  const auto t0 = std::chrono::steady_clock::now();
  std::vector<std::pair<std::string, double>> worst;
  for (std::size_t s = 0; s < seeds; ++s)
    for (const auto& r : run_gradcheck_suite(s)) {
      auto it = std::find_if(worst.begin(), worst.end(), [&](const auto& w) { return w.first == r.name; });
      if (it == worst.end())
        worst.emplace_back(r.name, r.error);
      else
        it->second = std::max(it->second, r.error);
    }
  std::size_t failed = 0;
  std::printf("%-28s %12s  %s\n", "check", "max rel err", "status");
  for (const auto& [name, err] : worst) {
    const bool ok = err < tol;
    failed += ok ? 0 : 1;
    std::printf("%-28s %12.3e  %s\n", name.c_str(), err, ok ? "pass" : "FAIL");
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::printf("%zu checks x %zu seeds, %zu failed, %.2f s\n", worst.size(), seeds, failed, secs);
  return failed ? kNumerical : kOk;
}

std::string schema_help() {
  std::string out = "\nConfig keys (key=value, one per line):\n";
  for (const auto& k : RunConfig::schema()) {
    char buf[160];
    std::snprintf(buf, sizeof buf, "  %-20s %-24s %s\n", k.key.c_str(), ("[" + k.fallback + "]").c_str(),
                  k.help.c_str());
    out += buf;
  }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Hybrid early-fusion attention model for multi-modal survival analysis"};
  app.footer(schema_help());
  app.require_subcommand(1);

  ConfigArgs synth_cfg, train_cfg, inspect_cfg;
  std::string scenario, out, data_dir, checkpoint, plan = "none", sample_id;
  long long n = -1, seed = -1;
  std::size_t jobs = 1, seeds = 5;
  std::uint64_t drop_seed = 0;
  double tol = 1e-3;

  auto* synth = app.add_subcommand("synth", "write a synthetic dataset");
  add_config_args(synth, synth_cfg);
  synth->add_option("--scenario", scenario, "cross_modal_interaction | modality_dominance | noise_modality");
  synth->add_option("--n", n, "samples");
  synth->add_option("--seed", seed, "generator seed");
  synth->add_option("--out", out, "output directory")->required();

  auto* train = app.add_subcommand("train", "cross-validate a model");
  add_config_args(train, train_cfg);
  train->add_option("--data-dir", data_dir, "dataset directory")->required();
  train->add_option("--out", out, "run directory")->required();
  train->add_option("--jobs", jobs, "folds trained concurrently")->check(CLI::PositiveNumber);

  auto* eval = app.add_subcommand("eval-missing", "evaluate checkpoints with modalities removed");
  eval->add_option("--checkpoint", checkpoint, "fold checkpoint or run directory")->required();
  eval->add_option("--data-dir", data_dir, "dataset directory")->required();
  eval->add_option("--drop-plan", plan, "none | half-half | drop:<modality>");
  eval->add_option("--drop-seed", drop_seed, "seed for the drop plan");
  eval->add_option("--out", out, "directory for eval_missing.kv");

  auto* inspect = app.add_subcommand("inspect", "export mean attention for one sample");
  add_config_args(inspect, inspect_cfg);
  inspect->add_option("--checkpoint", checkpoint, "fold checkpoint")->required();
  inspect->add_option("--data-dir", data_dir, "dataset directory")->required();
  inspect->add_option("--sample-id", sample_id, "sample id")->required();
  inspect->add_option("--out", out, "output directory")->required();

  auto* gc = app.add_subcommand("gradcheck", "finite-difference check of every op and the full model");
  gc->add_option("--seeds", seeds, "random instances per check")->check(CLI::PositiveNumber);
  gc->add_option("--tolerance", tol, "maximum relative error");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (*synth) return cmd_synth(synth_cfg, scenario, n, seed, out);
    if (*train) return cmd_train(train_cfg, data_dir, out, jobs);
    if (*eval) return cmd_eval_missing(checkpoint, data_dir, plan, drop_seed, out);
    if (*inspect) return cmd_inspect(inspect_cfg, checkpoint, data_dir, sample_id, out);
    if (*gc) return cmd_gradcheck(seeds, tol);
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kData;
  } catch (const NumericalError& e) {
    std::cerr << "numerical error: " << e.what() << "\n";
    return kNumerical;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  }
  return kUsage;
}
