#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "clada/error.hpp"

namespace clada {

using TokenId = std::uint32_t;
using TokenSequence = std::vector<TokenId>;

/// Byte-level vocabulary: ids 0..255 are raw bytes, 256 and 257 are the
/// reserved specials. tokenize never emits a special.
class ByteTokenizer {
 public:
  static constexpr TokenId kBos = 256;
  static constexpr TokenId kEos = 257;
  static constexpr std::uint32_t kDefaultVocab = 258;

  explicit ByteTokenizer(std::uint32_t vocab_size = kDefaultVocab) : vocab_size_(vocab_size) {}

  std::uint32_t vocab_size() const { return vocab_size_; }

  TokenSequence tokenize(std::string_view text) const {
    TokenSequence ids;
    ids.reserve(text.size());
    for (unsigned char c : text) {
      if (c >= vocab_size_)
        throw RangeError("byte " + std::to_string(c) + " outside vocabulary of size " + std::to_string(vocab_size_));
      ids.push_back(c);
    }
    return ids;
  }

  /// Specials decode to nothing.
  std::string detokenize(const TokenSequence& ids) const {
    std::string out;
    out.reserve(ids.size());
    for (TokenId id : ids) {
      if (id >= vocab_size_)
        throw RangeError("token id " + std::to_string(id) + " >= vocab_size " + std::to_string(vocab_size_));
      if (id < 256) out.push_back(static_cast<char>(id));
    }
    return out;
  }

 private:
  std::uint32_t vocab_size_;
};

inline TokenSequence tokenize(std::string_view text) { return ByteTokenizer{}.tokenize(text); }
inline std::string detokenize(const TokenSequence& ids) { return ByteTokenizer{}.detokenize(ids); }

}  // namespace clada
