#pragma once

#include "exitlm/common.hpp"

#include <string>
#include <string_view>

namespace exitlm {

// Byte-level tokenizer: ids 0..255 are raw byte values, followed by the
// three specials. Exact round-trip on arbitrary byte strings.
class ByteTokenizer {
 public:
  static constexpr TokenId kBos = 256;
  static constexpr TokenId kEos = 257;
  static constexpr TokenId kPad = 258;
  static constexpr int kVocabSize = 259;

  int vocab_size() const { return kVocabSize; }

  TokenSeq encode(std::string_view text) const;

  // Inverse of encode. Special ids are skipped so that decoding a packed
  // block yields the concatenated payload bytes.
  std::string decode(const TokenSeq& ids) const;

  static bool is_special(TokenId id) { return id >= 256; }
};

}  // namespace exitlm
