#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "healnet/fusion.hpp"
#include "healnet/rng.hpp"
#include "healnet/survival.hpp"
#include "healnet/tensor.hpp"

namespace healnet {

/// One modality's data for n samples. Absent samples hold NaN in `data`;
/// `present` is the only source of truth for availability.
struct ModalityBlock {
  std::string name;
  ModalityKind kind = ModalityKind::tabular;
  std::vector<std::string> ids;            ///< sample ids; empty = positional
  std::vector<std::string> feature_names;  ///< tabular only
  Tensor data;                             ///< [n x t x d_x]
  std::vector<std::uint8_t> present;
  std::vector<std::size_t> lengths;        ///< valid tokens per sample

  std::size_t samples() const { return data.dim(0); }
  std::size_t tokens() const { return data.dim(1); }
  std::size_t channels() const { return data.dim(2); }
  ModalitySpec spec() const { return {name, kind, tokens(), channels()}; }
};

enum class Scenario { cross_modal_interaction, modality_dominance, noise_modality };

inline std::string to_string(Scenario s) {
  switch (s) {
    case Scenario::cross_modal_interaction: return "cross_modal_interaction";
    case Scenario::modality_dominance: return "modality_dominance";
    case Scenario::noise_modality: return "noise_modality";
  }
  return "?";
}

inline Scenario parse_scenario(const std::string& s) {
  if (s == "cross_modal_interaction" || s == "cross_modal") return Scenario::cross_modal_interaction;
  if (s == "modality_dominance" || s == "dominance") return Scenario::modality_dominance;
  if (s == "noise_modality" || s == "noise") return Scenario::noise_modality;
  throw ConfigError("unknown scenario '" + s + "'");
}

struct SynthScenario {
  Scenario scenario = Scenario::cross_modal_interaction;
  std::size_t n = 600;
  std::size_t p = 32;    ///< omic features
  std::size_t t = 16;    ///< patches per slide
  std::size_t d_x = 8;   ///< patch feature width
  double censor_rate = 0.3;
  double noise_sigma = 0.3;

  void validate() const {
    if (n == 0 || p == 0 || t == 0 || d_x == 0) throw ConfigError("synthetic dims must be >= 1");
    if (!(censor_rate >= 0.0 && censor_rate < 1.0)) throw ConfigError("censor_rate must be in [0, 1)");
    if (!(noise_sigma >= 0.0)) throw ConfigError("noise_sigma must be >= 0");
  }
};

struct Provenance {
  bool synthetic = false;
  Scenario scenario = Scenario::cross_modal_interaction;
  std::uint64_t seed = 0;
};

struct MultiModalDataset {
  std::vector<std::string> ids;
  std::vector<ModalityBlock> modalities;
  std::vector<SurvivalRecord> records;
  Provenance provenance;
  /// Generator truth (synthetic only): latent factors and log-risk.
  std::vector<double> z1, z2, log_risk;

  std::size_t size() const noexcept { return records.size(); }

  const ModalityBlock& modality(const std::string& name) const {
    for (const auto& m : modalities)
      if (m.name == name) return m;
    throw ConfigError("dataset has no modality '" + name + "'");
  }
  ModalityBlock& modality(const std::string& name) {
    return const_cast<ModalityBlock&>(std::as_const(*this).modality(name));
  }

  void validate() const {
    if (ids.size() != records.size()) throw DataError("dataset ids and records disagree on n");
    for (const auto& m : modalities)
      if (m.samples() != records.size() || m.present.size() != records.size() || m.lengths.size() != records.size())
        throw DataError("modality '" + m.name + "' does not agree with records on n");
  }
};

namespace detail {

inline ModalityBlock make_block(std::string name, ModalityKind kind, std::size_t n, std::size_t t, std::size_t dx) {
  ModalityBlock b;
  b.name = std::move(name);
  b.kind = kind;
  b.data = Tensor::zeros({n, t, dx});
  b.present.assign(n, 1);
  b.lengths.assign(n, t);
  return b;
}

}  // namespace detail

/// Number of leading omic features that carry signal.
inline std::size_t signal_features(std::size_t p) { return std::min<std::size_t>(5, p); }

/// Planted-signal generator.
///
/// Latent factors z1, z2 ~ N(0,1). The omic modality carries z1 in its first
/// five features (the rest are N(0,1) noise). In the slide modality half the
/// patches (rounded up, randomly placed) are "tumour" patches: channel 1 marks
/// tumour (+2) versus background (-2) and channel 0 carries +z2 on tumour and
/// -z2 on background patches, so the slide mean of channel 0 is uninformative.
/// All other channels are N(0,1).
///
/// Log-risk: cross_modal_interaction and noise_modality use
/// z1*z2 + 0.25*(z1 + z2), so the signal is mostly recoverable only jointly;
/// modality_dominance uses z1 alone, leaving the slide modality pure noise.
///
/// Time = 24 * exp(-log_risk) * E^noise_sigma with E ~ Exp(1): exponential
/// with rate exp(log_risk)/24 at noise_sigma = 1 and noise-free at 0. A record
/// is censored with probability censor_rate, its time replaced by U(0, time).
inline MultiModalDataset generate_synthetic(const SynthScenario& sc, std::uint64_t seed) {
  sc.validate();
  Rng rng(derive_key(seed, 0x5EED));
  const std::size_t n = sc.n;
  const double sigma = sc.noise_sigma;
  MultiModalDataset ds;
  ds.provenance = {true, sc.scenario, seed};
  ds.z1.resize(n);
  ds.z2.resize(n);
  ds.log_risk.resize(n);

  auto omic = detail::make_block("omic", ModalityKind::tabular, n, sc.p, 1);
  auto wsi = detail::make_block("wsi", ModalityKind::patches, n, sc.t, sc.d_x);
  for (std::size_t j = 0; j < sc.p; ++j) omic.feature_names.push_back("f" + std::to_string(j));
  std::optional<ModalityBlock> noise;
  if (sc.scenario == Scenario::noise_modality) {
    noise = detail::make_block("noise", ModalityKind::tabular, n, sc.p, 1);
    for (std::size_t j = 0; j < sc.p; ++j) noise->feature_names.push_back("g" + std::to_string(j));
  }

  const std::size_t tumour = (sc.t + 1) / 2;
  const std::size_t nsig = signal_features(sc.p);
  std::vector<std::size_t> patch_order(sc.t);
  for (std::size_t i = 0; i < n; ++i) {
    ds.ids.push_back("s" + std::to_string(i));
    const double z1 = standard_normal(rng);
    const double z2 = standard_normal(rng);
    ds.z1[i] = z1;
    ds.z2[i] = z2;
    const double eta = sc.scenario == Scenario::modality_dominance ? z1 : z1 * z2 + 0.25 * (z1 + z2);
    ds.log_risk[i] = eta;

    auto od = omic.data.mutable_data();
    for (std::size_t j = 0; j < sc.p; ++j)
      od[i * sc.p + j] = static_cast<float>(j < nsig ? z1 + sigma * standard_normal(rng) : standard_normal(rng));

    const bool wsi_signal = sc.scenario != Scenario::modality_dominance;
    for (std::size_t k = 0; k < sc.t; ++k) patch_order[k] = k;
    shuffle(patch_order, rng);
    auto wd = wsi.data.mutable_data();
    for (std::size_t r = 0; r < sc.t; ++r) {
      const std::size_t k = patch_order[r];
      const bool is_tumour = r < tumour;
      float* px = &wd[(i * sc.t + k) * sc.d_x];
      for (std::size_t c = 0; c < sc.d_x; ++c) px[c] = static_cast<float>(standard_normal(rng));
      if (sc.d_x >= 2) px[1] = static_cast<float>((is_tumour ? 2.0 : -2.0) + sigma * standard_normal(rng));
      if (wsi_signal) px[0] = static_cast<float>((is_tumour ? z2 : -z2) + sigma * standard_normal(rng));
    }
    if (noise) {
      auto nd = noise->data.mutable_data();
      for (std::size_t j = 0; j < sc.p; ++j) nd[i * sc.p + j] = static_cast<float>(standard_normal(rng));
    }

    const double e = -std::log(1.0 - uniform01(rng));
    double months = 24.0 * std::exp(-eta) * std::pow(e, sigma);
    bool censored = false;
    if (uniform01(rng) < sc.censor_rate) {
      months *= uniform01(rng);
      censored = true;
    }
    ds.records.push_back({months, censored, std::nullopt});
  }
  omic.ids = wsi.ids = ds.ids;
  ds.modalities.push_back(std::move(omic));
  ds.modalities.push_back(std::move(wsi));
  if (noise) {
    noise->ids = ds.ids;
    ds.modalities.push_back(std::move(*noise));
  }
  return ds;
}

// ---------------------------------------------------------------------------
// CSV

namespace detail {

inline std::vector<std::string> split_csv_line(std::string_view line) {
  std::vector<std::string> cells;
  std::size_t start = 0;
  for (;;) {
    const std::size_t comma = line.find(',', start);
    cells.emplace_back(line.substr(start, comma == std::string_view::npos ? std::string_view::npos : comma - start));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  for (auto& c : cells) {
    while (!c.empty() && (c.back() == ' ' || c.back() == '\r')) c.pop_back();
    std::size_t lead = 0;
    while (lead < c.size() && c[lead] == ' ') ++lead;
    c.erase(0, lead);
  }
  return cells;
}

inline bool is_missing_cell(const std::string& c) { return c.empty() || c == "NA" || c == "NaN" || c == "nan"; }

inline std::optional<double> parse_number(const std::string& s) {
  if (s.empty()) return std::nullopt;
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size()) return std::nullopt;
    return v;
  } catch (const std::exception&) {
    return std::nullopt;
  }
}

inline std::ifstream open_in(const std::filesystem::path& path, bool binary = false) {
  std::ifstream in(path, binary ? std::ios::binary : std::ios::in);
  if (!in) throw IoError("cannot open '" + path.string() + "' for reading");
  return in;
}

inline std::ofstream open_out(const std::filesystem::path& path, bool binary = false) {
  std::ofstream out(path, binary ? std::ios::binary | std::ios::trunc : std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  return out;
}

/// Shortest text that round-trips the float exactly.
inline std::string format_float(float v) {
  char buf[32];
  for (int prec = 6; prec <= 9; ++prec) {
    std::snprintf(buf, sizeof buf, "%.*g", prec, static_cast<double>(v));
    if (std::strtof(buf, nullptr) == v) break;
  }
  return buf;
}

inline std::string format_double(double v) {
  char buf[40];
  for (int prec = 15; prec <= 17; ++prec) {
    std::snprintf(buf, sizeof buf, "%.*g", prec, v);
    if (std::strtod(buf, nullptr) == v) break;
  }
  return buf;
}

}  // namespace detail

/// Tabular modality from CSV: header row, first column the sample id. A row
/// with any missing cell marks the modality absent for that sample.
inline ModalityBlock load_tabular(const std::filesystem::path& path, std::string name = {}) {
  auto in = detail::open_in(path);
  if (name.empty()) name = path.stem().string();
  std::string line;
  if (!std::getline(in, line)) throw ParseError(path.string(), 1, "empty file, expected header row");
  const auto header = detail::split_csv_line(line);
  if (header.size() < 2) throw ParseError(path.string(), 1, "header needs an id column and at least one feature");
  const std::size_t p = header.size() - 1;

  ModalityBlock b;
  b.name = std::move(name);
  b.kind = ModalityKind::tabular;
  b.feature_names.assign(header.begin() + 1, header.end());
  std::vector<float> values;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line == "\r") continue;
    const auto cells = detail::split_csv_line(line);
    if (cells.size() != header.size())
      throw ParseError(path.string(), lineno,
                       "expected " + std::to_string(header.size()) + " cells, got " + std::to_string(cells.size()));
    if (cells[0].empty()) throw ParseError(path.string(), lineno, "empty sample id");
    bool complete = true;
    std::vector<float> row(p);
    for (std::size_t j = 0; j < p; ++j) {
      const auto& c = cells[j + 1];
      if (detail::is_missing_cell(c)) {
        complete = false;
        row[j] = std::numeric_limits<float>::quiet_NaN();
        continue;
      }
      const auto v = detail::parse_number(c);
      if (!v) throw ParseError(path.string(), lineno, "non-numeric cell '" + c + "' in column '" + header[j + 1] + "'");
      row[j] = static_cast<float>(*v);
    }
    if (!complete) std::fill(row.begin(), row.end(), std::numeric_limits<float>::quiet_NaN());
    b.ids.push_back(cells[0]);
    b.present.push_back(complete ? 1 : 0);
    values.insert(values.end(), row.begin(), row.end());
  }
  const std::size_t n = b.ids.size();
  b.data = Tensor({n, p, 1}, std::move(values));
  b.lengths.assign(n, p);
  return b;
}

inline void write_tabular(const std::filesystem::path& path, const ModalityBlock& b) {
  if (b.kind != ModalityKind::tabular) throw ContractError("write_tabular: modality '" + b.name + "' is not tabular");
  auto out = detail::open_out(path);
  out << "id";
  for (std::size_t j = 0; j < b.tokens(); ++j)
    out << ',' << (j < b.feature_names.size() ? b.feature_names[j] : "f" + std::to_string(j));
  out << '\n';
  for (std::size_t i = 0; i < b.samples(); ++i) {
    out << (i < b.ids.size() ? b.ids[i] : std::to_string(i));
    for (std::size_t j = 0; j < b.tokens(); ++j) {
      out << ',';
      if (b.present[i]) out << detail::format_float(b.data[i * b.tokens() + j]);
    }
    out << '\n';
  }
  if (!out) throw IoError("write failed for '" + path.string() + "'");
}

// ---------------------------------------------------------------------------
// HPF1 patch-feature container (little-endian):
//   "HPF1" | u32 n | u32 t_max | u32 d_x | per sample: u32 t_i, t_i*d_x f32
// Sample ids live in a sibling text file with extension ".ids", one per line.

namespace detail {

inline void put_u32(std::string& buf, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

inline void put_f32(std::string& buf, float f) { put_u32(buf, std::bit_cast<std::uint32_t>(f)); }

class ByteReader {
 public:
  ByteReader(std::string bytes, std::string path) : bytes_(std::move(bytes)), path_(std::move(path)) {}

  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return v;
  }
  float f32(const char* what) { return std::bit_cast<float>(u32(what)); }
  std::string raw(std::size_t len, const char* what) {
    need(len, what);
    std::string s = bytes_.substr(pos_, len);
    pos_ += len;
    return s;
  }
  std::size_t offset() const noexcept { return pos_; }
  bool at_end() const noexcept { return pos_ == bytes_.size(); }
  [[noreturn]] void fail(const std::string& what) const { throw FormatError(path_, pos_, what); }

 private:
  void need(std::size_t len, const char* what) const {
    if (bytes_.size() - pos_ < len) throw FormatError(path_, pos_, std::string("truncated payload reading ") + what);
  }
  std::string bytes_;
  std::string path_;
  std::size_t pos_ = 0;
};

inline std::string read_all(const std::filesystem::path& path) {
  auto in = open_in(path, true);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline std::filesystem::path ids_path(const std::filesystem::path& hpf) {
  auto p = hpf;
  return p.replace_extension(".ids");
}

}  // namespace detail

inline void write_patch_features(const std::filesystem::path& path, const ModalityBlock& b) {
  std::string buf = "HPF1";
  const std::size_t n = b.samples(), t = b.tokens(), dx = b.channels();
  detail::put_u32(buf, static_cast<std::uint32_t>(n));
  detail::put_u32(buf, static_cast<std::uint32_t>(t));
  detail::put_u32(buf, static_cast<std::uint32_t>(dx));
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t len = b.present[i] ? b.lengths[i] : 0;
    detail::put_u32(buf, static_cast<std::uint32_t>(len));
    for (std::size_t q = 0; q < len * dx; ++q) detail::put_f32(buf, b.data[i * t * dx + q]);
  }
  auto out = detail::open_out(path, true);
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!out) throw IoError("write failed for '" + path.string() + "'");
  if (!b.ids.empty()) {
    auto ids = detail::open_out(detail::ids_path(path));
    for (const auto& id : b.ids) ids << id << '\n';
  }
}

/// Reads an HPF1 file. Samples with zero patches are marked absent; padded
/// positions hold zeros and are excluded from attention via `lengths`.
inline ModalityBlock load_patch_features(const std::filesystem::path& path, std::string name = {}) {
  detail::ByteReader r(detail::read_all(path), path.string());
  if (r.raw(4, "magic") != "HPF1") throw FormatError(path.string(), 0, "bad magic, expected \"HPF1\"");
  const std::size_t n = r.u32("n"), t = r.u32("t_max"), dx = r.u32("d_x");
  if (t == 0 || dx == 0) throw FormatError(path.string(), 8, "t_max and d_x must be >= 1");
  ModalityBlock b;
  b.name = name.empty() ? path.stem().string() : std::move(name);
  b.kind = ModalityKind::patches;
  std::vector<float> values(n * t * dx, 0.0f);
  b.present.resize(n);
  b.lengths.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t at = r.offset();
    const std::size_t len = r.u32("patch count");
    if (len > t) throw FormatError(path.string(), at, "patch count " + std::to_string(len) + " exceeds t_max");
    for (std::size_t q = 0; q < len * dx; ++q) values[i * t * dx + q] = r.f32("patch features");
    if (len == 0)
      std::fill_n(values.begin() + static_cast<std::ptrdiff_t>(i * t * dx), t * dx,
                  std::numeric_limits<float>::quiet_NaN());
    b.present[i] = len > 0 ? 1 : 0;
    b.lengths[i] = len;
  }
  if (!r.at_end()) r.fail("trailing bytes after last sample");
  b.data = Tensor({n, t, dx}, std::move(values));
  if (const auto ids = detail::ids_path(path); std::filesystem::exists(ids)) {
    auto in = detail::open_in(ids);
    std::string line;
    while (std::getline(in, line)) {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (!line.empty()) b.ids.push_back(line);
    }
    if (b.ids.size() != n)
      throw ParseError(ids.string(), b.ids.size(), "expected " + std::to_string(n) + " ids, got " +
                                                     std::to_string(b.ids.size()));
  }
  return b;
}

// ---------------------------------------------------------------------------
// Survival table: id,months,censored

struct SurvivalTable {
  std::vector<std::string> ids;
  std::vector<SurvivalRecord> records;
};

inline SurvivalTable load_survival(const std::filesystem::path& path) {
  auto in = detail::open_in(path);
  std::string line;
  if (!std::getline(in, line)) throw ParseError(path.string(), 1, "empty file, expected header row");
  const auto header = detail::split_csv_line(line);
  if (header.size() != 3) throw ParseError(path.string(), 1, "expected header id,months,censored");
  SurvivalTable t;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line == "\r") continue;
    const auto cells = detail::split_csv_line(line);
    if (cells.size() != 3) throw ParseError(path.string(), lineno, "expected 3 cells");
    const auto months = detail::parse_number(cells[1]);
    if (!months || *months < 0) throw ParseError(path.string(), lineno, "months must be a number >= 0");
    if (cells[2] != "0" && cells[2] != "1") throw ParseError(path.string(), lineno, "censored must be 0 or 1");
    t.ids.push_back(cells[0]);
    t.records.push_back({*months, cells[2] == "1", std::nullopt});
  }
  return t;
}

inline void write_survival(const std::filesystem::path& path, const std::vector<std::string>& ids,
                           const std::vector<SurvivalRecord>& records) {
  auto out = detail::open_out(path);
  out << "id,months,censored\n";
  for (std::size_t i = 0; i < records.size(); ++i)
    out << ids[i] << ',' << detail::format_double(records[i].months) << ',' << (records[i].censored ? 1 : 0) << '\n';
  if (!out) throw IoError("write failed for '" + path.string() + "'");
}

// ---------------------------------------------------------------------------

struct JoinReport {
  std::vector<std::size_t> dropped;  ///< per block: samples without a survival record
  std::size_t complete = 0;          ///< samples with every modality present
};

/// Aligns modality blocks to the survival records by sample id. Record
/// samples missing from a block keep present = false; block samples without
/// a record are dropped and counted.
inline MultiModalDataset join_modalities(std::vector<ModalityBlock> blocks, const SurvivalTable& survival,
                                         JoinReport* report = nullptr) {
  const std::size_t n = survival.ids.size();
  std::map<std::string, std::size_t> record_index;
  for (std::size_t i = 0; i < n; ++i)
    if (!record_index.emplace(survival.ids[i], i).second)
      throw JoinError("duplicate id '" + survival.ids[i] + "' in survival records");

  MultiModalDataset ds;
  ds.ids = survival.ids;
  ds.records = survival.records;
  JoinReport rep;
  std::vector<std::uint8_t> any(n, 0);
  std::vector<std::uint8_t> all(n, 1);
  for (auto& b : blocks) {
    if (b.ids.empty()) {
      if (b.samples() != n)
        throw JoinError("modality '" + b.name + "' has no ids and " + std::to_string(b.samples()) +
                        " samples, survival table has " + std::to_string(n));
      b.ids = survival.ids;
    }
    const std::size_t t = b.tokens(), dx = b.channels();
    auto out = detail::make_block(b.name, b.kind, n, t, dx);
    out.feature_names = b.feature_names;
    out.ids = ds.ids;
    auto od = out.data.mutable_data();
    std::fill(od.begin(), od.end(), std::numeric_limits<float>::quiet_NaN());
    std::fill(out.present.begin(), out.present.end(), 0);
    std::fill(out.lengths.begin(), out.lengths.end(), 0);
    std::map<std::string, std::size_t> seen;
    std::size_t dropped = 0;
    for (std::size_t s = 0; s < b.samples(); ++s) {
      if (!seen.emplace(b.ids[s], s).second) throw JoinError("duplicate id '" + b.ids[s] + "' in modality '" + b.name + "'");
      auto it = record_index.find(b.ids[s]);
      if (it == record_index.end()) {
        ++dropped;
        continue;
      }
      const std::size_t i = it->second;
      std::copy_n(b.data.data().begin() + static_cast<std::ptrdiff_t>(s * t * dx), t * dx,
                  od.begin() + static_cast<std::ptrdiff_t>(i * t * dx));
      out.present[i] = b.present[s];
      out.lengths[i] = b.lengths[s];
    }
    for (std::size_t i = 0; i < n; ++i) {
      any[i] |= out.present[i];
      all[i] &= out.present[i];
    }
    rep.dropped.push_back(dropped);
    ds.modalities.push_back(std::move(out));
  }
  if (n == 0 || std::none_of(any.begin(), any.end(), [](auto v) { return v != 0; }))
    throw JoinError("no sample ids overlap between modalities and survival records");
  rep.complete = static_cast<std::size_t>(std::count(all.begin(), all.end(), 1));
  if (report) *report = rep;
  return ds;
}

/// Loads every modality named in `names` from `dir`: <name>.csv (tabular) or
/// <name>.hpf (patch features), joined to <dir>/survival.csv.
inline MultiModalDataset load_dataset(const std::filesystem::path& dir, const std::vector<std::string>& names,
                                      JoinReport* report = nullptr) {
  std::vector<ModalityBlock> blocks;
  for (const auto& name : names) {
    const auto csv = dir / (name + ".csv");
    const auto hpf = dir / (name + ".hpf");
    if (std::filesystem::exists(csv))
      blocks.push_back(load_tabular(csv, name));
    else if (std::filesystem::exists(hpf))
      blocks.push_back(load_patch_features(hpf, name));
    else
      throw IoError("no " + csv.string() + " or " + hpf.string() + " for modality '" + name + "'");
  }
  return join_modalities(std::move(blocks), load_survival(dir / "survival.csv"), report);
}

/// Writes a dataset in the on-disk layout read by load_dataset.
inline void save_dataset(const std::filesystem::path& dir, const MultiModalDataset& ds) {
  std::filesystem::create_directories(dir);
  for (const auto& m : ds.modalities) {
    if (m.kind == ModalityKind::tabular)
      write_tabular(dir / (m.name + ".csv"), m);
    else
      write_patch_features(dir / (m.name + ".hpf"), m);
  }
  write_survival(dir / "survival.csv", ds.ids, ds.records);
}

// ---------------------------------------------------------------------------

/// Per-feature standardisation fitted on a subset of samples.
struct FeatureScaler {
  std::vector<float> mean, stddev;  ///< stddev 0 marks a constant feature
  std::vector<std::string> warnings;

  static FeatureScaler fit(const ModalityBlock& b, std::span<const std::size_t> rows) {
    const std::size_t t = b.tokens(), dx = b.channels(), width = t * dx;
    FeatureScaler s;
    std::vector<double> sum(width, 0.0), sq(width, 0.0);
    std::size_t count = 0;
    for (std::size_t i : rows) {
      if (!b.present[i]) continue;
      ++count;
      for (std::size_t q = 0; q < width; ++q) sum[q] += b.data[i * width + q];
    }
    s.mean.assign(width, 0.0f);
    s.stddev.assign(width, 0.0f);
    if (count == 0) {
      s.warnings.push_back("modality '" + b.name + "' has no present samples in the fitting split");
      return s;
    }
    for (std::size_t q = 0; q < width; ++q) s.mean[q] = static_cast<float>(sum[q] / static_cast<double>(count));
    for (std::size_t i : rows) {
      if (!b.present[i]) continue;
      for (std::size_t q = 0; q < width; ++q) {
        const double d = b.data[i * width + q] - static_cast<double>(s.mean[q]);
        sq[q] += d * d;
      }
    }
    for (std::size_t q = 0; q < width; ++q) {
      const double sd = std::sqrt(sq[q] / static_cast<double>(count));
      s.stddev[q] = static_cast<float>(sd);
      if (!(sd > 0.0))
        s.warnings.push_back("modality '" + b.name + "' feature " +
                             (q < b.feature_names.size() ? b.feature_names[q] : std::to_string(q)) +
                             " is constant; standardised to zero");
    }
    return s;
  }

  ModalityBlock apply(ModalityBlock b) const {
    const std::size_t width = b.tokens() * b.channels();
    if (mean.size() != width) throw DimensionError("FeatureScaler: width mismatch for '" + b.name + "'");
    auto d = b.data.mutable_data();
    for (std::size_t i = 0; i < b.samples(); ++i) {
      if (!b.present[i]) continue;
      for (std::size_t q = 0; q < width; ++q) {
        float& v = d[i * width + q];
        v = stddev[q] > 0.0f ? (v - mean[q]) / stddev[q] : 0.0f;
      }
    }
    return b;
  }
};

/// Model-ready batch of the given rows of one modality block.
inline ModalityBatch make_batch(const ModalityBlock& b, std::size_t modality_id, std::span<const std::size_t> rows) {
  const std::size_t t = b.tokens(), dx = b.channels(), width = t * dx;
  ModalityBatch out;
  out.modality = modality_id;
  std::vector<float> v(rows.size() * width);
  out.present.resize(rows.size());
  out.lengths.resize(rows.size());
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const std::size_t i = rows[r];
    std::copy_n(b.data.data().begin() + static_cast<std::ptrdiff_t>(i * width), width,
                v.begin() + static_cast<std::ptrdiff_t>(r * width));
    out.present[r] = b.present[i];
    out.lengths[r] = b.lengths[i];
  }
  out.data = Tensor({rows.size(), t, dx}, std::move(v));
  return out;
}

}  // namespace healnet
