#include "exitlm/tokenizer.hpp"

namespace exitlm {

TokenSeq ByteTokenizer::encode(std::string_view text) const {
  TokenSeq ids;
  ids.reserve(text.size());
  for (unsigned char c : text) ids.push_back(static_cast<TokenId>(c));
  return ids;
}

std::string ByteTokenizer::decode(const TokenSeq& ids) const {
  std::string out;
  out.reserve(ids.size());
  for (TokenId id : ids) {
    EXITLM_CHECK(id >= 0 && id < kVocabSize, "token id out of range");
    if (id < 256) out.push_back(static_cast<char>(static_cast<unsigned char>(id)));
  }
  return out;
}

}  // namespace exitlm
