#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>

#include "healnet/data.hpp"
#include "healnet/fusion.hpp"

namespace healnet {

/// Trained model plus the preprocessing state needed to apply it: feature
/// scalers ("scaler.<modality>.mean|std") and survival bin edges ("bins").
struct Checkpoint {
  FusionConfig config;
  ParameterStore params;
  std::map<std::string, Tensor> aux;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

inline void put_string(std::string& buf, const std::string& s) {
  put_u32(buf, static_cast<std::uint32_t>(s.size()));
  buf += s;
}

inline void put_blob(std::string& buf, const std::string& name, const Tensor& t) {
  put_string(buf, name);
  put_u32(buf, static_cast<std::uint32_t>(t.rank()));
  for (std::size_t d : t.shape()) put_u32(buf, static_cast<std::uint32_t>(d));
  for (float v : t.data()) put_f32(buf, v);
}

inline std::string get_string(ByteReader& r, const char* what) {
  const std::uint32_t len = r.u32(what);
  return r.raw(len, what);
}

inline Tensor get_blob(ByteReader& r, std::string& name) {
  name = get_string(r, "blob name");
  const std::uint32_t rank = r.u32("blob rank");
  if (rank > 8) r.fail("blob '" + name + "' has implausible rank " + std::to_string(rank));
  Shape shape(rank);
  for (auto& d : shape) d = r.u32("blob dims");
  std::vector<float> v(numel(shape));
  for (auto& x : v) x = r.f32("blob data");
  return Tensor(std::move(shape), std::move(v));
}

}  // namespace detail

/// Binary layout, little-endian:
///   "HEAL" | u32 version | config block | u32 param count | params | u32 aux count | aux
/// config block: u32 j, c_l, d_l, depth, heads, dims_per_head, then per
/// modality (str name, u32 kind, u32 d_x, u32 t_m), u32 k, then u32 snn,
/// u32 snn_hidden_mult, u32 latent_trainable, u32 head mode, f32 attn_dropout,
/// f32 ff_dropout. A param is str name, u32 trainable, u32 rank, u32 dims,
/// f32 data; aux entries omit the trainable flag. Strings are u32 length + bytes.
inline std::string serialize_checkpoint(const Checkpoint& ck) {
  using namespace detail;
  const auto& c = ck.config;
  std::string buf = "HEAL";
  put_u32(buf, kCheckpointVersion);
  put_u32(buf, static_cast<std::uint32_t>(c.modalities.size()));
  for (std::size_t v : {c.latent_channels, c.latent_dims, c.depth, c.heads, c.dims_per_head})
    put_u32(buf, static_cast<std::uint32_t>(v));
  for (const auto& m : c.modalities) {
    put_string(buf, m.name);
    put_u32(buf, static_cast<std::uint32_t>(m.kind));
    put_u32(buf, static_cast<std::uint32_t>(m.channels));
    put_u32(buf, static_cast<std::uint32_t>(m.tokens));
  }
  put_u32(buf, static_cast<std::uint32_t>(c.bins));
  put_u32(buf, c.snn ? 1 : 0);
  put_u32(buf, static_cast<std::uint32_t>(c.snn_hidden_mult));
  put_u32(buf, c.latent_trainable ? 1 : 0);
  put_u32(buf, static_cast<std::uint32_t>(c.head));
  put_f32(buf, c.attn_dropout);
  put_f32(buf, c.ff_dropout);

  put_u32(buf, static_cast<std::uint32_t>(ck.params.size()));
  for (const auto& p : ck.params.all()) {
    put_string(buf, p.name);
    put_u32(buf, p.trainable ? 1 : 0);
    put_u32(buf, static_cast<std::uint32_t>(p.value.rank()));
    for (std::size_t d : p.value.shape()) put_u32(buf, static_cast<std::uint32_t>(d));
    for (float v : p.value.data()) put_f32(buf, v);
  }
  put_u32(buf, static_cast<std::uint32_t>(ck.aux.size()));
  for (const auto& [name, t] : ck.aux) put_blob(buf, name, t);
  return buf;
}

inline Checkpoint deserialize_checkpoint(std::string bytes, const std::string& origin = "<memory>") {
  using namespace detail;
  ByteReader r(std::move(bytes), origin);
  if (r.raw(4, "magic") != "HEAL") throw FormatError(origin, 0, "bad magic, expected \"HEAL\"");
  if (const auto v = r.u32("version"); v != kCheckpointVersion)
    throw FormatError(origin, 4, "unsupported checkpoint version " + std::to_string(v));
  Checkpoint ck;
  auto& c = ck.config;
  const std::uint32_t j = r.u32("modality count");
  if (j == 0 || j > 64) r.fail("implausible modality count " + std::to_string(j));
  c.latent_channels = r.u32("c_l");
  c.latent_dims = r.u32("d_l");
  c.depth = r.u32("depth");
  c.heads = r.u32("heads");
  c.dims_per_head = r.u32("dims_per_head");
  for (std::uint32_t m = 0; m < j; ++m) {
    ModalitySpec s;
    s.name = get_string(r, "modality name");
    const std::uint32_t kind = r.u32("modality kind");
    if (kind > 1) r.fail("unknown modality kind " + std::to_string(kind));
    s.kind = static_cast<ModalityKind>(kind);
    s.channels = r.u32("d_x");
    s.tokens = r.u32("t_m");
    c.modalities.push_back(std::move(s));
  }
  c.bins = r.u32("k");
  c.snn = r.u32("snn") != 0;
  c.snn_hidden_mult = r.u32("snn_hidden_mult");
  c.latent_trainable = r.u32("latent_trainable") != 0;
  const std::uint32_t head = r.u32("head mode");
  if (head > 1) r.fail("unknown head mode " + std::to_string(head));
  c.head = static_cast<HeadMode>(head);
  c.attn_dropout = r.f32("attn_dropout");
  c.ff_dropout = r.f32("ff_dropout");
  try {
    c.validate();
  } catch (const ConfigError& e) {
    r.fail(std::string("invalid config block: ") + e.what());
  }

  const std::uint32_t np = r.u32("parameter count");
  for (std::uint32_t i = 0; i < np; ++i) {
    std::string name = get_string(r, "parameter name");
    const bool trainable = r.u32("trainable flag") != 0;
    const std::uint32_t rank = r.u32("parameter rank");
    if (rank > 8) r.fail("parameter '" + name + "' has implausible rank");
    Shape shape(rank);
    for (auto& d : shape) d = r.u32("parameter dims");
    std::vector<float> v(numel(shape));
    for (auto& x : v) x = r.f32("parameter data");
    if (ck.params.contains(name)) r.fail("duplicate parameter '" + name + "'");
    ck.params.add(std::move(name), Tensor(std::move(shape), std::move(v)), trainable);
  }
  const std::uint32_t na = r.u32("aux count");
  for (std::uint32_t i = 0; i < na; ++i) {
    std::string name;
    Tensor t = get_blob(r, name);
    ck.aux.emplace(std::move(name), std::move(t));
  }
  if (!r.at_end()) r.fail("trailing bytes after checkpoint");
  return ck;
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  const std::string buf = serialize_checkpoint(ck);
  auto out = detail::open_out(path, true);
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!out) throw IoError("write failed for '" + path.string() + "'");
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  return deserialize_checkpoint(detail::read_all(path), path.string());
}

/// Validates parameter names and shapes against the config.
inline HealNetModel model_from_checkpoint(const Checkpoint& ck) {
  try {
    return HealNetModel(ck.config, ck.params);
  } catch (const ConfigError& e) {
    throw FormatError("checkpoint", 0, std::string("parameters do not match config: ") + e.what());
  }
}

}  // namespace healnet
