#pragma once

#include <algorithm>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "nlohmann/json.hpp"
#include "steerkit/steering_types.hpp"
#include "steerkit/transformer.hpp"

namespace steerkit {

constexpr int kCaaDefaultPositions = 10;

// Mean residual-stream activation over the last-k window of one example's
// prompt+completion, at `layer` (post-block). `steer` lets fixtures inject
// a known direction during capture.
inline Tensor example_window_mean(const ModelCheckpoint& ckpt, const ContrastiveExample& ex,
                                  int layer, int k_positions,
                                  const SteeringApplication* steer = nullptr) {
  if (ex.completion.empty()) throw UsageError("contrastive example has empty completion");
  Tokens full = ex.prompt;
  full.insert(full.end(), ex.completion.begin(), ex.completion.end());
  HookPoint hook = HookPoint::last_k(layer, k_positions);
  ForwardResult fr = forward(ckpt, full, std::span<const HookPoint>(&hook, 1), steer);
  const Tensor& rows = fr.traces.at(0).vectors;
  Tensor mean = Tensor::zeros({rows.cols()});
  for (size_t r = 0; r < rows.rows(); ++r) {
    auto src = rows.row_span(r);
    for (size_t j = 0; j < src.size(); ++j) mean.data[j] += src[j];
  }
  float inv = 1.0f / static_cast<float>(rows.rows());
  for (float& v : mean.data) v *= inv;
  return mean;
}

// Combine per-example window means into the contrastive direction:
// mean over positives minus mean over negatives. Order-insensitive; the
// caller provides (id, polarity, mean) and the fold runs over ids ascending.
inline Tensor combine_class_means(
    std::vector<std::tuple<int, Polarity, Tensor>> example_means) {
  if (example_means.empty()) throw InsufficientDataError("no contrastive examples");
  std::sort(example_means.begin(), example_means.end(),
            [](const auto& a, const auto& b) { return std::get<0>(a) < std::get<0>(b); });
  size_t d = std::get<2>(example_means.front()).size();
  Tensor pos = Tensor::zeros({d}), neg = Tensor::zeros({d});
  size_t n_pos = 0, n_neg = 0;
  for (const auto& [id, pol, mean] : example_means) {
    if (mean.size() != d) throw ShapeError("inconsistent activation dimensions");
    Tensor& acc = (pol == Polarity::POSITIVE) ? pos : neg;
    for (size_t j = 0; j < d; ++j) acc.data[j] += mean.data[j];
    (pol == Polarity::POSITIVE ? n_pos : n_neg) += 1;
  }
  if (n_pos == 0) throw InsufficientDataError("no POSITIVE contrastive examples");
  if (n_neg == 0) throw InsufficientDataError("no NEGATIVE contrastive examples");
  Tensor out = Tensor::zeros({d});
  for (size_t j = 0; j < d; ++j)
    out.data[j] = pos.data[j] / static_cast<float>(n_pos) - neg.data[j] / static_cast<float>(n_neg);
  ensure_finite(out, "contrastive vector");
  return out;
}

// Optional capture-time injection used by planted-direction fixtures:
// positives are captured with +multiplier*direction, negatives with the
// negated application.
struct InjectionProbe {
  Tensor direction;
  float multiplier = 1.0f;
};

inline SteeringVector extract_caa(const ModelCheckpoint& ckpt,
                                  const std::vector<ContrastiveExample>& examples, int layer,
                                  int k_positions = kCaaDefaultPositions,
                                  const std::optional<InjectionProbe>& probe = std::nullopt) {
  if (layer < 0 || layer >= ckpt.config.n_layers) throw ShapeError("extraction layer out of range");
  if (k_positions < 1) throw UsageError("k_positions must be >= 1");
  size_t n_pos = 0, n_neg = 0;
  std::vector<std::tuple<int, Polarity, Tensor>> means;
  means.reserve(examples.size());
  for (const ContrastiveExample& ex : examples) {
    std::optional<SteeringApplication> steer;
    if (probe) {
      SteeringVector sv;
      sv.layer = layer;
      sv.vector = probe->direction;
      sv.method = VectorMethod::PLANTED;
      float mult = probe->multiplier * (ex.polarity == Polarity::POSITIVE ? 1.0f : -1.0f);
      steer = SteeringApplication{std::move(sv), mult};
    }
    means.emplace_back(ex.id, ex.polarity,
                       example_window_mean(ckpt, ex, layer, k_positions,
                                           steer ? &*steer : nullptr));
    (ex.polarity == Polarity::POSITIVE ? n_pos : n_neg) += 1;
  }

  SteeringVector sv;
  sv.layer = layer;
  sv.vector = combine_class_means(std::move(means));
  sv.method = VectorMethod::CAA;
  sv.meta = {{"n_positive", n_pos},
             {"n_negative", n_neg},
             {"k_positions", k_positions},
             {"d_model", ckpt.config.d_model}};
  if (probe) sv.meta["capture_injection_multiplier"] = probe->multiplier;
  return sv;
}

namespace detail {

inline std::string base64_encode(std::string_view bytes) {
  static const char* tbl = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
  std::string out;
  out.reserve((bytes.size() + 2) / 3 * 4);
  size_t i = 0;
  while (i + 3 <= bytes.size()) {
    uint32_t v = (static_cast<unsigned char>(bytes[i]) << 16) |
                 (static_cast<unsigned char>(bytes[i + 1]) << 8) |
                 static_cast<unsigned char>(bytes[i + 2]);
    out.push_back(tbl[(v >> 18) & 63]);
    out.push_back(tbl[(v >> 12) & 63]);
    out.push_back(tbl[(v >> 6) & 63]);
    out.push_back(tbl[v & 63]);
    i += 3;
  }
  size_t rem = bytes.size() - i;
  if (rem == 1) {
    uint32_t v = static_cast<unsigned char>(bytes[i]) << 16;
    out.push_back(tbl[(v >> 18) & 63]);
    out.push_back(tbl[(v >> 12) & 63]);
    out += "==";
  } else if (rem == 2) {
    uint32_t v = (static_cast<unsigned char>(bytes[i]) << 16) |
                 (static_cast<unsigned char>(bytes[i + 1]) << 8);
    out.push_back(tbl[(v >> 18) & 63]);
    out.push_back(tbl[(v >> 12) & 63]);
    out.push_back(tbl[(v >> 6) & 63]);
    out.push_back('=');
  }
  return out;
}

inline std::string base64_decode(std::string_view text) {
  auto val = [](char c) -> int {
    if (c >= 'A' && c <= 'Z') return c - 'A';
    if (c >= 'a' && c <= 'z') return c - 'a' + 26;
    if (c >= '0' && c <= '9') return c - '0' + 52;
    if (c == '+') return 62;
    if (c == '/') return 63;
    if (c == '=') return -1;
    return -2;
  };
  if (text.size() % 4 != 0) throw FormatError("base64 payload length not a multiple of 4");
  std::string out;
  out.reserve(text.size() / 4 * 3);
  for (size_t i = 0; i < text.size(); i += 4) {
    int a = val(text[i]), b = val(text[i + 1]), c = val(text[i + 2]), d = val(text[i + 3]);
    if (a < 0 || b < 0 || c == -2 || d == -2) throw FormatError("invalid base64 payload");
    uint32_t v = (static_cast<uint32_t>(a) << 18) | (static_cast<uint32_t>(b) << 12);
    out.push_back(static_cast<char>((v >> 16) & 0xff));
    if (c >= 0) {
      v |= static_cast<uint32_t>(c) << 6;
      out.push_back(static_cast<char>((v >> 8) & 0xff));
      if (d >= 0) {
        v |= static_cast<uint32_t>(d);
        out.push_back(static_cast<char>(v & 0xff));
      }
    } else if (d >= 0) {
      throw FormatError("invalid base64 padding");
    }
  }
  return out;
}

}  // namespace detail

constexpr uint32_t kVectorFileVersion = 1;

// Vector file: one JSON header line, one base64 line of little-endian f32
// values, both newline-terminated.
inline std::string serialize_vector(const SteeringVector& sv) {
  sv.validate();
  nlohmann::json header = {{"version", kVectorFileVersion},
                           {"layer", sv.layer},
                           {"d_model", sv.vector.size()},
                           {"method", to_string(sv.method)},
                           {"meta", sv.meta}};
  std::string payload;
  payload.reserve(sv.vector.size() * 4);
  for (float f : sv.vector.data) detail::put_f32(payload, f);
  return header.dump() + "\n" + detail::base64_encode(payload) + "\n";
}

inline SteeringVector deserialize_vector(const std::string& bytes) {
  size_t nl1 = bytes.find('\n');
  if (nl1 == std::string::npos) throw FormatError("vector file missing header line");
  size_t nl2 = bytes.find('\n', nl1 + 1);
  if (nl2 == std::string::npos) throw FormatError("vector file missing payload line");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.substr(0, nl1));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("bad vector header: ") + e.what());
  }
  if (!header.contains("version") || header["version"].get<uint32_t>() != kVectorFileVersion)
    throw FormatError("unsupported vector file version");
  SteeringVector sv;
  sv.layer = header.at("layer").get<int>();
  sv.method = vector_method_from_string(header.at("method").get<std::string>());
  sv.meta = header.value("meta", nlohmann::json::object());
  size_t d = header.at("d_model").get<size_t>();
  std::string payload = detail::base64_decode(bytes.substr(nl1 + 1, nl2 - nl1 - 1));
  if (payload.size() != d * 4) throw FormatError("vector payload size mismatch");
  sv.vector = Tensor::zeros({d});
  detail::Reader r(payload);
  for (size_t i = 0; i < d; ++i) sv.vector.data[i] = r.f32();
  sv.validate();
  return sv;
}

inline void save_vector(const SteeringVector& sv, const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot open for write: " + path);
  std::string bytes = serialize_vector(sv);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError("write failed: " + path);
}

inline SteeringVector load_vector(const std::string& path) {
  return deserialize_vector(read_file(path));
}

inline SteeringVector load_vector(const std::string& path, const ModelConfig& target) {
  SteeringVector sv = load_vector(path);
  if (sv.vector.size() != static_cast<size_t>(target.d_model))
    throw FormatError("vector dimension " + std::to_string(sv.vector.size()) +
                      " does not match model d_model " + std::to_string(target.d_model));
  if (sv.layer >= target.n_layers)
    throw FormatError("vector layer " + std::to_string(sv.layer) +
                      " out of range for model with " + std::to_string(target.n_layers) +
                      " layers");
  return sv;
}

}  // namespace steerkit
