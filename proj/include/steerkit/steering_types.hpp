#pragma once

#include <cmath>
#include <string>

#include "nlohmann/json.hpp"
#include "steerkit/errors.hpp"
#include "steerkit/tensor.hpp"
#include "steerkit/tokenizer.hpp"

namespace steerkit {

enum class Polarity { POSITIVE, NEGATIVE };  // POSITIVE = unbiased behavior

struct ContrastiveExample {
  int id = 0;
  Tokens prompt;
  Tokens completion;
  Polarity polarity = Polarity::POSITIVE;
  std::string provenance;  // where the completion came from (e.g. "greedy")
};

enum class VectorMethod { CAA, OPTIMIZED, PLANTED };

inline std::string to_string(VectorMethod m) {
  switch (m) {
    case VectorMethod::CAA: return "CAA";
    case VectorMethod::OPTIMIZED: return "OPTIMIZED";
    case VectorMethod::PLANTED: return "PLANTED";
  }
  throw UsageError("bad vector method");
}

inline VectorMethod vector_method_from_string(const std::string& s) {
  if (s == "CAA") return VectorMethod::CAA;
  if (s == "OPTIMIZED") return VectorMethod::OPTIMIZED;
  if (s == "PLANTED") return VectorMethod::PLANTED;
  throw FormatError("unknown vector method: " + s);
}

// One d_model-dimensional direction bound to a layer, plus a record of how
// it was built (example counts, window size, hyperparameters, seed).
struct SteeringVector {
  int layer = 0;
  Tensor vector;
  VectorMethod method = VectorMethod::CAA;
  nlohmann::json meta = nlohmann::json::object();

  void validate() const {
    if (vector.ndim() != 1) throw ShapeError("steering vector must be rank-1");
    if (!vector.all_finite()) throw NumericError("steering vector has non-finite entries");
    if (layer < 0) throw ShapeError("steering vector layer must be >= 0");
  }
};

struct SteeringApplication {
  SteeringVector vector;
  float multiplier = 1.0f;

  void validate() const {
    vector.validate();
    if (!std::isfinite(multiplier)) throw NumericError("steering multiplier must be finite");
  }
};

}  // namespace steerkit
