#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

#include "steerkit/errors.hpp"
#include "steerkit/hash.hpp"

namespace steerkit {

// Dense row-major float32 array. Immutable by convention: library
// operations return fresh tensors and never alias inputs.
struct Tensor {
  std::vector<size_t> shape;
  std::vector<float> data;

  Tensor() = default;
  Tensor(std::vector<size_t> s, std::vector<float> d) : shape(std::move(s)), data(std::move(d)) {
    if (element_count(shape) != data.size())
      throw ShapeError("tensor data length does not match shape");
  }

  static size_t element_count(const std::vector<size_t>& s) {
    size_t n = 1;
    for (size_t d : s) {
      if (d == 0) throw ShapeError("zero-sized dimension");
      n *= d;
    }
    return n;
  }

  static Tensor zeros(std::vector<size_t> s) {
    size_t n = element_count(s);
    return Tensor(std::move(s), std::vector<float>(n, 0.0f));
  }

  static Tensor full(std::vector<size_t> s, float v) {
    size_t n = element_count(s);
    return Tensor(std::move(s), std::vector<float>(n, v));
  }

  static Tensor row(std::initializer_list<float> vals) {
    return Tensor({vals.size()}, std::vector<float>(vals));
  }

  size_t size() const { return data.size(); }
  size_t ndim() const { return shape.size(); }
  size_t rows() const { return shape.at(0); }
  size_t cols() const { return shape.size() >= 2 ? shape.at(1) : 1; }

  float& at(size_t i) { return data[i]; }
  float at(size_t i) const { return data[i]; }
  float& at(size_t i, size_t j) { return data[i * shape[1] + j]; }
  float at(size_t i, size_t j) const { return data[i * shape[1] + j]; }

  std::span<float> row_span(size_t i) { return {data.data() + i * shape[1], shape[1]}; }
  std::span<const float> row_span(size_t i) const { return {data.data() + i * shape[1], shape[1]}; }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  bool all_finite() const {
    for (float v : data)
      if (!std::isfinite(v)) return false;
    return true;
  }

  std::string bytes_view() const {
    return std::string(reinterpret_cast<const char*>(data.data()), data.size() * sizeof(float));
  }
  uint64_t content_hash() const { return fnv1a64(bytes_view()); }
};

inline void ensure_finite(const Tensor& t, const char* what) {
  if (!t.all_finite()) throw NumericError(std::string("non-finite values in ") + what);
}

// C[m,n] = A[m,k] * B[k,n]; accumulation over k ascending so results are
// bit-reproducible across runs.
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.ndim() != 2 || b.ndim() != 2) throw ShapeError("matmul expects rank-2 tensors");
  if (a.shape[1] != b.shape[0])
    throw ShapeError("matmul inner dimensions differ: " + std::to_string(a.shape[1]) + " vs " +
                     std::to_string(b.shape[0]));
  size_t m = a.shape[0], k = a.shape[1], n = b.shape[1];
  Tensor c = Tensor::zeros({m, n});
  for (size_t i = 0; i < m; ++i) {
    const float* arow = a.data.data() + i * k;
    float* crow = c.data.data() + i * n;
    for (size_t p = 0; p < k; ++p) {
      float av = arow[p];
      const float* brow = b.data.data() + p * n;
      for (size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
  ensure_finite(c, "matmul output");
  return c;
}

// In-place softmax over a span, with max subtraction. Shared by the public
// op and the transformer's attention rows.
inline void softmax_inplace(std::span<float> v) {
  if (v.empty()) throw ShapeError("softmax of empty input");
  float mx = v[0];
  for (float x : v) mx = std::max(mx, x);
  float sum = 0.0f;
  for (float& x : v) {
    x = std::exp(x - mx);
    sum += x;
  }
  for (float& x : v) x /= sum;
}

inline Tensor softmax(const Tensor& v) {
  if (v.ndim() != 1) throw ShapeError("softmax expects a rank-1 tensor");
  Tensor out = v;
  softmax_inplace(out.data);
  ensure_finite(out, "softmax output");
  return out;
}

inline void rms_norm_span(std::span<const float> v, std::span<const float> gain, float eps,
                          std::span<float> out) {
  if (v.size() != gain.size() || v.size() != out.size())
    throw ShapeError("rms_norm length mismatch");
  float ms = 0.0f;
  for (float x : v) ms += x * x;
  ms /= static_cast<float>(v.size());
  float inv = 1.0f / std::sqrt(ms + eps);
  for (size_t i = 0; i < v.size(); ++i) out[i] = v[i] * inv * gain[i];
}

inline Tensor rms_norm(const Tensor& v, const Tensor& gain, float eps) {
  if (v.ndim() != 1 || gain.ndim() != 1 || v.size() != gain.size())
    throw ShapeError("rms_norm expects matching rank-1 tensors");
  if (!(eps > 0.0f)) throw UsageError("rms_norm eps must be positive");
  Tensor out = Tensor::zeros({v.size()});
  rms_norm_span(v.data, gain.data, eps, out.data);
  ensure_finite(out, "rms_norm output");
  return out;
}

inline double dot(std::span<const float> a, std::span<const float> b) {
  if (a.size() != b.size()) throw ShapeError("dot length mismatch");
  double s = 0.0;
  for (size_t i = 0; i < a.size(); ++i) s += static_cast<double>(a[i]) * b[i];
  return s;
}

inline double norm2(std::span<const float> a) { return std::sqrt(dot(a, a)); }

inline double cosine(const Tensor& a, const Tensor& b) {
  double na = norm2(a.data), nb = norm2(b.data);
  if (na == 0.0 || nb == 0.0) throw NumericError("cosine of zero vector");
  return dot(a.data, b.data) / (na * nb);
}

// splitmix64: fixed published mixing generator, identical stream on every
// platform for a given seed.
struct Rng {
  uint64_t state;
  explicit Rng(uint64_t seed) : state(seed) {}

  uint64_t next_u64() {
    uint64_t z = (state += 0x9e3779b97f4a7c15ull);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  // uniform in [0, 1)
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  uint64_t below(uint64_t n) { return next_u64() % n; }

  // Box-Muller; caches the second deviate so streams stay reproducible.
  double gaussian() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = 0.0;
    do {
      u1 = uniform();
    } while (u1 <= 0.0);
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double theta = 2.0 * 3.14159265358979323846 * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
  }

  Tensor normal_tensor(std::vector<size_t> shape, double stddev, double mean = 0.0) {
    Tensor t = Tensor::zeros(std::move(shape));
    for (float& v : t.data) v = static_cast<float>(mean + stddev * gaussian());
    return t;
  }

 private:
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace steerkit
