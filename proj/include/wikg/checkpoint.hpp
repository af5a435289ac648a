#pragma once

#include <bit>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "wikg/baselines.hpp"
#include "wikg/data.hpp"
#include "wikg/graph.hpp"
#include "wikg/model.hpp"

namespace wikg {

enum class ModelKind : std::uint32_t { wikg = 0, mean_pool = 1, max_pool = 2, gated_attention = 3 };

inline const char* model_kind_name(ModelKind k) {
  switch (k) {
    case ModelKind::wikg: return "wikg";
    case ModelKind::mean_pool: return "mean";
    case ModelKind::max_pool: return "max";
    case ModelKind::gated_attention: return "abmil";
  }
  return "?";
}

inline ModelKind parse_model_kind(const std::string& s) {
  if (s == "wikg") return ModelKind::wikg;
  if (s == "mean") return ModelKind::mean_pool;
  if (s == "max") return ModelKind::max_pool;
  if (s == "abmil") return ModelKind::gated_attention;
  throw param_error("unknown model '" + s + "'");
}

/// Config block stored in every checkpoint; the kind tag selects which
/// fields are meaningful (attn_hidden only for gated attention, policy/k
/// only for the graph model).
struct CheckpointConfig {
  ModelKind kind = ModelKind::wikg;
  std::uint32_t dtype_bytes = 4;  // 4 = f32, 8 = f64
  std::uint32_t d_in = 384, d = 512, c = 2, k = 6;
  EdgeVariant policy = EdgeVariant::wikg;
  Readout readout = Readout::mean;
  double leaky_slope = 0.2;
  bool exclude_self = false;
  bool clamp_k = false;
  std::uint32_t attn_hidden = 0;
};

// ---------------------------------------------------------------------------
// Checkpoint file layout (all integers little-endian):
//   magic "WKGC", u32 version (1)
//   u32 kind, u32 dtype_bytes, u32 d_in, u32 d, u32 c, u32 k,
//   u32 policy, u32 readout, u64 leaky_slope (f64 bits), u32 flags
//   (bit0 = exclude_self, bit1 = clamp_k), u32 attn_hidden, u32 tensor count
//   per tensor: u16 name length, name bytes, u8 ndim, u32 dims[ndim],
//               raw values (dtype_bytes each, LE)
// Round-trips are bit-exact.
// ---------------------------------------------------------------------------

namespace detail {

inline void put_u16(std::string& out, std::uint16_t v) {
  out.push_back(static_cast<char>(v & 0xff));
  out.push_back(static_cast<char>((v >> 8) & 0xff));
}

inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

struct Reader {
  const std::string& s;
  std::size_t pos = 0;
  std::string where;

  void need(std::size_t n) {
    if (pos + n > s.size())
      throw io_error(where + ": truncated at byte offset " + std::to_string(pos));
  }
  std::uint8_t u8() {
    need(1);
    return static_cast<std::uint8_t>(s[pos++]);
  }
  std::uint16_t u16() {
    need(2);
    std::uint16_t v = static_cast<std::uint16_t>(static_cast<unsigned char>(s[pos])) |
                      (static_cast<std::uint16_t>(static_cast<unsigned char>(s[pos + 1])) << 8);
    pos += 2;
    return v;
  }
  std::uint32_t u32() {
    need(4);
    const std::uint32_t v = get_u32(s, pos);
    pos += 4;
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i)
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(s[pos + i])) << (8 * i);
    pos += 8;
    return v;
  }
  std::string bytes(std::size_t n) {
    need(n);
    std::string v = s.substr(pos, n);
    pos += n;
    return v;
  }
};

template <typename T>
void put_scalar(std::string& out, T v) {
  if constexpr (sizeof(T) == 4) {
    put_u32(out, std::bit_cast<std::uint32_t>(v));
  } else {
    put_u64(out, std::bit_cast<std::uint64_t>(v));
  }
}

template <typename T>
T get_scalar(Reader& r) {
  if constexpr (sizeof(T) == 4) {
    return std::bit_cast<T>(r.u32());
  } else {
    return std::bit_cast<T>(r.u64());
  }
}

}  // namespace detail

template <typename T>
void save_checkpoint(const std::string& path, const CheckpointConfig& cfg,
                     const std::vector<std::pair<std::string, Tensor<T>>>& tensors) {
  std::string out;
  out += "WKGC";
  detail::put_u32(out, 1);
  detail::put_u32(out, static_cast<std::uint32_t>(cfg.kind));
  detail::put_u32(out, static_cast<std::uint32_t>(sizeof(T)));
  detail::put_u32(out, cfg.d_in);
  detail::put_u32(out, cfg.d);
  detail::put_u32(out, cfg.c);
  detail::put_u32(out, cfg.k);
  detail::put_u32(out, static_cast<std::uint32_t>(cfg.policy));
  detail::put_u32(out, static_cast<std::uint32_t>(cfg.readout));
  detail::put_u64(out, std::bit_cast<std::uint64_t>(cfg.leaky_slope));
  detail::put_u32(out, (cfg.exclude_self ? 1u : 0u) | (cfg.clamp_k ? 2u : 0u));
  detail::put_u32(out, cfg.attn_hidden);
  detail::put_u32(out, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    if (name.size() > 0xffff) throw param_error("save_checkpoint: tensor name too long");
    detail::put_u16(out, static_cast<std::uint16_t>(name.size()));
    out += name;
    out.push_back(static_cast<char>(t.ndim()));
    for (auto dim : t.shape()) detail::put_u32(out, static_cast<std::uint32_t>(dim));
    for (T v : t.values()) detail::put_scalar(out, v);
  }
  detail::write_file(path, out);
}

inline CheckpointConfig read_checkpoint_config(detail::Reader& r) {
  if (r.bytes(4) != "WKGC") throw io_error(r.where + ": bad magic");
  const auto version = r.u32();
  if (version != 1) throw io_error(r.where + ": unsupported version " + std::to_string(version));
  CheckpointConfig cfg;
  cfg.kind = static_cast<ModelKind>(r.u32());
  cfg.dtype_bytes = r.u32();
  cfg.d_in = r.u32();
  cfg.d = r.u32();
  cfg.c = r.u32();
  cfg.k = r.u32();
  cfg.policy = static_cast<EdgeVariant>(r.u32());
  cfg.readout = static_cast<Readout>(r.u32());
  cfg.leaky_slope = std::bit_cast<double>(r.u64());
  const auto flags = r.u32();
  cfg.exclude_self = (flags & 1u) != 0;
  cfg.clamp_k = (flags & 2u) != 0;
  cfg.attn_hidden = r.u32();
  if (cfg.dtype_bytes != 4 && cfg.dtype_bytes != 8)
    throw io_error(r.where + ": unsupported dtype width " + std::to_string(cfg.dtype_bytes));
  return cfg;
}

/// Reads only the config block (for dtype dispatch before loading weights).
inline CheckpointConfig peek_checkpoint(const std::string& path) {
  const std::string raw = detail::read_file(path);
  detail::Reader r{raw, 0, path};
  return read_checkpoint_config(r);
}

template <typename T>
struct LoadedCheckpoint {
  CheckpointConfig config;
  std::vector<std::pair<std::string, Tensor<T>>> tensors;

  const Tensor<T>& get(const std::string& name) const {
    for (const auto& [n, t] : tensors) {
      if (n == name) return t;
    }
    throw io_error("checkpoint: missing tensor '" + name + "'");
  }
};

template <typename T>
LoadedCheckpoint<T> load_checkpoint(const std::string& path) {
  const std::string raw = detail::read_file(path);
  detail::Reader r{raw, 0, path};
  LoadedCheckpoint<T> ck;
  ck.config = read_checkpoint_config(r);
  if (ck.config.dtype_bytes != sizeof(T))
    throw io_error(path + ": dtype width " + std::to_string(ck.config.dtype_bytes) +
                   " does not match requested " + std::to_string(sizeof(T)));
  const auto count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto name_len = r.u16();
    std::string name = r.bytes(name_len);
    const auto ndim = r.u8();
    if (ndim < 1 || ndim > 3) throw io_error(path + ": bad tensor rank");
    std::vector<std::size_t> shape(ndim);
    std::size_t numel = 1;
    for (auto& dim : shape) {
      dim = r.u32();
      numel *= dim;
    }
    std::vector<T> vals(numel);
    for (auto& v : vals) v = detail::get_scalar<T>(r);
    ck.tensors.emplace_back(std::move(name),
                            Tensor<T>::from(std::move(shape), std::move(vals), true));
  }
  if (r.pos != raw.size()) throw io_error(path + ": trailing bytes after tensor data");
  return ck;
}

// Rebuilders: checkpoint tensors -> typed parameter structs.

template <typename T>
WikgParams<T> wikg_params_from_checkpoint(const LoadedCheckpoint<T>& ck) {
  if (ck.config.kind != ModelKind::wikg) throw io_error("checkpoint is not a wikg model");
  WikgParams<T> p;
  p.d_in = ck.config.d_in;
  p.d = ck.config.d;
  p.c = ck.config.c;
  p.leaky_slope = static_cast<T>(ck.config.leaky_slope);
  p.input_w = ck.get("input_proj.weight");
  p.input_b = ck.get("input_proj.bias");
  p.projector.w_h = ck.get("projector.w_h");
  p.projector.w_t = ck.get("projector.w_t");
  p.w1 = ck.get("interact.w1.weight");
  p.b1 = ck.get("interact.w1.bias");
  p.w2 = ck.get("interact.w2.weight");
  p.b2 = ck.get("interact.w2.bias");
  p.head_w = ck.get("classifier.weight");
  p.head_b = ck.get("classifier.bias");
  return p;
}

template <typename T>
BaselineParams<T> baseline_params_from_checkpoint(const LoadedCheckpoint<T>& ck) {
  BaselineParams<T> p;
  switch (ck.config.kind) {
    case ModelKind::mean_pool: p.kind = BaselineKind::mean_pool; break;
    case ModelKind::max_pool: p.kind = BaselineKind::max_pool; break;
    case ModelKind::gated_attention: p.kind = BaselineKind::gated_attention; break;
    default: throw io_error("checkpoint is not a baseline model");
  }
  p.d_in = ck.config.d_in;
  p.d = ck.config.d;
  p.c = ck.config.c;
  p.hidden = ck.config.attn_hidden;
  p.input_w = ck.get("input_proj.weight");
  p.input_b = ck.get("input_proj.bias");
  if (p.kind == BaselineKind::gated_attention) {
    p.attn_v = ck.get("attention.v");
    p.attn_u = ck.get("attention.u");
    p.attn_w = ck.get("attention.w");
  }
  p.head_w = ck.get("classifier.weight");
  p.head_b = ck.get("classifier.bias");
  return p;
}

}  // namespace wikg
