#pragma once

#include <string>
#include <vector>

#include "qfs/common.hpp"

namespace qfs {

// Byte-level tokenizer: ids 0..255 are raw bytes, plus BOS/EOS/PAD specials.
// No external vocabulary; any text round-trips exactly.
class ByteTokenizer {
 public:
  static constexpr int kBos = 256;
  static constexpr int kEos = 257;
  static constexpr int kPad = 258;
  static constexpr int kVocab = 259;

  static std::vector<int> encode(const std::string& text) {
    std::vector<int> ids;
    ids.reserve(text.size());
    for (unsigned char c : text) ids.push_back(static_cast<int>(c));
    return ids;
  }

  static std::string decode(const std::vector<int>& ids) {
    std::string out;
    out.reserve(ids.size());
    for (int id : ids) {
      if (id < 0 || id >= kVocab) throw DataError("token id " + std::to_string(id) + " out of range");
      if (id < 256) out.push_back(static_cast<char>(id));
    }
    return out;
  }
};

}  // namespace qfs
