#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace versebyte {

// Byte vocabulary: three specials followed by the 256 byte values.
struct ByteVocab {
  static constexpr int kPad = 0;
  static constexpr int kEos = 1;
  static constexpr int kUnk = 2;
  static constexpr int kByteOffset = 3;
  static constexpr int kSize = 259;

  static constexpr int token_id(std::uint8_t byte) { return byte + kByteOffset; }
};

using TokenSequence = std::vector<int>;

TokenSequence encode(std::string_view text, bool append_eos);

// Specials are dropped; malformed UTF-8 in the remaining bytes becomes U+FFFD.
std::string decode(std::span<const int> ids);

// Prefixes the source with the `>>xxx<< ` target-language marker.
std::string tag_source(std::string_view source_text, std::string_view target_lang);

}  // namespace versebyte
