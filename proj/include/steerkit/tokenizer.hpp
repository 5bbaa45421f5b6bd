#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace steerkit {

using Token = int32_t;
using Tokens = std::vector<Token>;

// Byte-level vocabulary: ids 0..255 are raw bytes, then BOS/EOS/PAD.
// Models built for the aware judging setting reserve two more ids as
// single-token stand-ins for the "Mine"/"Other" responses.
namespace tok {
constexpr Token BOS = 256;
constexpr Token EOS = 257;
constexpr Token PAD = 258;
constexpr Token MINE = 259;
constexpr Token OTHER = 260;
constexpr int BASE_VOCAB = 259;   // bytes + BOS/EOS/PAD
constexpr int AWARE_VOCAB = 261;  // plus MINE/OTHER
}  // namespace tok

inline Tokens encode(std::string_view text) {
  Tokens out;
  out.reserve(text.size());
  for (unsigned char c : text) out.push_back(static_cast<Token>(c));
  return out;
}

inline Tokens encode_with_bos(std::string_view text) {
  Tokens out;
  out.reserve(text.size() + 1);
  out.push_back(tok::BOS);
  for (unsigned char c : text) out.push_back(static_cast<Token>(c));
  return out;
}

// Drops non-byte tokens; decode(encode(s)) == s for any byte string.
inline std::string decode(const Tokens& tokens) {
  std::string out;
  out.reserve(tokens.size());
  for (Token t : tokens)
    if (t >= 0 && t < 256) out.push_back(static_cast<char>(t));
  return out;
}

}  // namespace steerkit
