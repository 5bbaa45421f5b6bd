#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "steerkit/errors.hpp"
#include "steerkit/tensor.hpp"
#include "steerkit/tokenizer.hpp"

namespace steerkit {

struct ModelConfig {
  int vocab_size = tok::BASE_VOCAB;
  int d_model = 64;
  int n_layers = 4;
  int n_heads = 4;
  int d_ff = 256;
  int max_seq_len = 512;
  float rms_eps = 1e-5f;

  int head_dim() const { return d_model / n_heads; }
  int mid_layer() const { return n_layers / 2; }

  void validate() const {
    if (vocab_size < 1 || d_model < 1 || n_layers < 1 || n_heads < 1 || d_ff < 1)
      throw ShapeError("model config dimensions must be >= 1");
    if (max_seq_len < 2) throw ShapeError("max_seq_len must be >= 2");
    if (d_model % n_heads != 0) throw ShapeError("d_model must be divisible by n_heads");
    if (!(rms_eps > 0.0f)) throw ShapeError("rms_eps must be positive");
  }

  bool operator==(const ModelConfig&) const = default;
};

// Expected weight names and shapes for a config, in serialization order.
inline std::vector<std::pair<std::string, std::vector<size_t>>> expected_weights(
    const ModelConfig& cfg) {
  std::vector<std::pair<std::string, std::vector<size_t>>> out;
  size_t d = cfg.d_model, v = cfg.vocab_size, f = cfg.d_ff, s = cfg.max_seq_len;
  out.push_back({"tok_emb", {v, d}});
  out.push_back({"pos_emb", {s, d}});
  for (int i = 0; i < cfg.n_layers; ++i) {
    std::string p = "layers." + std::to_string(i) + ".";
    out.push_back({p + "attn_norm.gain", {d}});
    out.push_back({p + "attn.wq", {d, d}});
    out.push_back({p + "attn.wk", {d, d}});
    out.push_back({p + "attn.wv", {d, d}});
    out.push_back({p + "attn.wo", {d, d}});
    out.push_back({p + "mlp_norm.gain", {d}});
    out.push_back({p + "mlp.w1", {d, f}});
    out.push_back({p + "mlp.w2", {f, d}});
  }
  out.push_back({"final_norm.gain", {d}});
  out.push_back({"head.w", {d, v}});
  return out;
}

struct ModelCheckpoint {
  ModelConfig config;
  std::map<std::string, Tensor> weights;

  const Tensor& weight(const std::string& name) const {
    auto it = weights.find(name);
    if (it == weights.end()) throw ShapeError("missing weight: " + name);
    return it->second;
  }

  void validate() const {
    config.validate();
    auto expected = expected_weights(config);
    if (weights.size() != expected.size())
      throw ShapeError("checkpoint has " + std::to_string(weights.size()) + " weights, expected " +
                       std::to_string(expected.size()));
    for (const auto& [name, shape] : expected) {
      auto it = weights.find(name);
      if (it == weights.end()) throw ShapeError("missing weight: " + name);
      if (it->second.shape != shape) throw ShapeError("wrong shape for weight: " + name);
    }
  }

  uint64_t content_hash() const {
    uint64_t h = 0xcbf29ce484222325ull;
    auto mix = [&h](std::string_view s) { h = fnv1a64(s, h); };
    mix(std::string_view(reinterpret_cast<const char*>(&config.vocab_size), sizeof(int)));
    int fields[5] = {config.d_model, config.n_layers, config.n_heads, config.d_ff,
                     config.max_seq_len};
    mix(std::string_view(reinterpret_cast<const char*>(fields), sizeof(fields)));
    mix(std::string_view(reinterpret_cast<const char*>(&config.rms_eps), sizeof(float)));
    for (const auto& [name, t] : weights) {
      mix(name);
      mix(t.bytes_view());
    }
    return h;
  }
};

namespace detail {

inline void put_u32(std::string& out, uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline void put_u64(std::string& out, uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline void put_f32(std::string& out, float f) {
  uint32_t v;
  static_assert(sizeof(v) == sizeof(f));
  std::memcpy(&v, &f, 4);
  put_u32(out, v);
}

struct Reader {
  const std::string& buf;
  size_t pos = 0;
  explicit Reader(const std::string& b) : buf(b) {}
  void need(size_t n) const {
    if (pos + n > buf.size()) throw FormatError("truncated checkpoint file");
  }
  uint32_t u32() {
    need(4);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(static_cast<unsigned char>(buf[pos + i])) << (8 * i);
    pos += 4;
    return v;
  }
  uint64_t u64() {
    need(8);
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(static_cast<unsigned char>(buf[pos + i])) << (8 * i);
    pos += 8;
    return v;
  }
  float f32() {
    uint32_t v = u32();
    float f;
    std::memcpy(&f, &v, 4);
    return f;
  }
  std::string bytes(size_t n) {
    need(n);
    std::string s = buf.substr(pos, n);
    pos += n;
    return s;
  }
};

}  // namespace detail

constexpr char kCheckpointMagic[4] = {'S', 'T', 'R', 'K'};
constexpr uint32_t kCheckpointVersion = 1;

// Layout: magic, version, config block, weight table (name, dims, offset
// into the payload), then the concatenated little-endian f32 payload.
inline std::string serialize_checkpoint(const ModelCheckpoint& ckpt) {
  ckpt.validate();
  std::string out(kCheckpointMagic, 4);
  detail::put_u32(out, kCheckpointVersion);
  detail::put_u32(out, static_cast<uint32_t>(ckpt.config.vocab_size));
  detail::put_u32(out, static_cast<uint32_t>(ckpt.config.d_model));
  detail::put_u32(out, static_cast<uint32_t>(ckpt.config.n_layers));
  detail::put_u32(out, static_cast<uint32_t>(ckpt.config.n_heads));
  detail::put_u32(out, static_cast<uint32_t>(ckpt.config.d_ff));
  detail::put_u32(out, static_cast<uint32_t>(ckpt.config.max_seq_len));
  detail::put_f32(out, ckpt.config.rms_eps);

  auto order = expected_weights(ckpt.config);
  detail::put_u32(out, static_cast<uint32_t>(order.size()));
  uint64_t offset = 0;
  for (const auto& [name, shape] : order) {
    detail::put_u32(out, static_cast<uint32_t>(name.size()));
    out += name;
    detail::put_u32(out, static_cast<uint32_t>(shape.size()));
    for (size_t dim : shape) detail::put_u64(out, dim);
    detail::put_u64(out, offset);
    offset += Tensor::element_count(shape) * sizeof(float);
  }
  for (const auto& [name, shape] : order) {
    const Tensor& t = ckpt.weights.at(name);
    for (float f : t.data) detail::put_f32(out, f);
  }
  return out;
}

inline ModelCheckpoint deserialize_checkpoint(const std::string& bytes) {
  detail::Reader r(bytes);
  if (r.bytes(4) != std::string(kCheckpointMagic, 4))
    throw FormatError("bad checkpoint magic");
  uint32_t version = r.u32();
  if (version != kCheckpointVersion)
    throw FormatError("unsupported checkpoint version " + std::to_string(version));

  ModelCheckpoint ckpt;
  ckpt.config.vocab_size = static_cast<int>(r.u32());
  ckpt.config.d_model = static_cast<int>(r.u32());
  ckpt.config.n_layers = static_cast<int>(r.u32());
  ckpt.config.n_heads = static_cast<int>(r.u32());
  ckpt.config.d_ff = static_cast<int>(r.u32());
  ckpt.config.max_seq_len = static_cast<int>(r.u32());
  ckpt.config.rms_eps = r.f32();
  try {
    ckpt.config.validate();
  } catch (const ShapeError& e) {
    throw FormatError(std::string("invalid config in checkpoint: ") + e.what());
  }

  uint32_t count = r.u32();
  auto expected = expected_weights(ckpt.config);
  if (count != expected.size()) throw FormatError("unexpected weight count in checkpoint");

  struct Entry {
    std::string name;
    std::vector<size_t> shape;
    uint64_t offset;
  };
  std::vector<Entry> entries;
  entries.reserve(count);
  for (uint32_t i = 0; i < count; ++i) {
    uint32_t name_len = r.u32();
    if (name_len > 4096) throw FormatError("weight name too long");
    Entry e;
    e.name = r.bytes(name_len);
    uint32_t ndim = r.u32();
    if (ndim > 8) throw FormatError("weight rank too large");
    for (uint32_t k = 0; k < ndim; ++k) e.shape.push_back(static_cast<size_t>(r.u64()));
    e.offset = r.u64();
    if (e.name != expected[i].first || e.shape != expected[i].second)
      throw FormatError("weight table mismatch at entry " + std::to_string(i));
    entries.push_back(std::move(e));
  }

  size_t payload_start = r.pos;
  for (const Entry& e : entries) {
    size_t n = Tensor::element_count(e.shape);
    if (payload_start + e.offset + n * 4 > bytes.size())
      throw FormatError("truncated checkpoint payload");
    detail::Reader pr(bytes);
    pr.pos = payload_start + e.offset;
    Tensor t = Tensor::zeros(e.shape);
    for (size_t k = 0; k < n; ++k) t.data[k] = pr.f32();
    ckpt.weights.emplace(e.name, std::move(t));
  }
  ckpt.validate();
  return ckpt;
}

inline void save_checkpoint(const ModelCheckpoint& ckpt, const std::string& path) {
  std::string bytes = serialize_checkpoint(ckpt);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot open for write: " + path);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError("write failed: " + path);
}

inline ModelCheckpoint load_checkpoint(const std::string& path) {
  return deserialize_checkpoint(read_file(path));
}

// Small random model for tests and demos; deterministic in (config, seed).
inline ModelCheckpoint random_checkpoint(const ModelConfig& cfg, uint64_t seed) {
  cfg.validate();
  Rng rng(seed);
  ModelCheckpoint ckpt;
  ckpt.config = cfg;
  for (const auto& [name, shape] : expected_weights(cfg)) {
    if (name.ends_with("norm.gain")) {
      ckpt.weights.emplace(name, Tensor::full(shape, 1.0f));
    } else if (name == "tok_emb" || name == "pos_emb") {
      ckpt.weights.emplace(name, rng.normal_tensor(shape, 0.1));
    } else {
      double scale = 0.6 / std::sqrt(static_cast<double>(cfg.d_model));
      ckpt.weights.emplace(name, rng.normal_tensor(shape, scale));
    }
  }
  return ckpt;
}

}  // namespace steerkit
