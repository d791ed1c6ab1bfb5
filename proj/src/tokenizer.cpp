#include "versebyte/tokenizer.hpp"

#include "versebyte/corpus.hpp"
#include "versebyte/error.hpp"

namespace versebyte {
namespace {

constexpr std::string_view kReplacement = "\xEF\xBF\xBD";

// Length of the well-formed UTF-8 sequence starting at `i`, or 0 if the bytes
// there are not one. Follows the maximal-subpart replacement convention:
// the caller emits one U+FFFD and skips max(1, valid prefix length).
std::size_t sequence_length(const std::string& bytes, std::size_t i, std::size_t& prefix) {
  const auto at = [&](std::size_t k) { return static_cast<unsigned char>(bytes[k]); };
  const unsigned char lead = at(i);
  prefix = 1;
  if (lead < 0x80) return 1;

  std::size_t length = 0;
  unsigned char lo = 0x80;
  unsigned char hi = 0xBF;
  if (lead >= 0xC2 && lead <= 0xDF) {
    length = 2;
  } else if (lead >= 0xE0 && lead <= 0xEF) {
    length = 3;
    if (lead == 0xE0) lo = 0xA0;
    if (lead == 0xED) hi = 0x9F;
  } else if (lead >= 0xF0 && lead <= 0xF4) {
    length = 4;
    if (lead == 0xF0) lo = 0x90;
    if (lead == 0xF4) hi = 0x8F;
  } else {
    return 0;
  }
  for (std::size_t k = 1; k < length; ++k) {
    if (i + k >= bytes.size()) return 0;
    const unsigned char c = at(i + k);
    if (c < lo || c > hi) return 0;
    lo = 0x80;
    hi = 0xBF;
    prefix = k + 1;
  }
  return length;
}

}  // namespace

TokenSequence encode(std::string_view text, bool append_eos) {
  TokenSequence ids;
  ids.reserve(text.size() + (append_eos ? 1 : 0));
  for (char c : text) ids.push_back(ByteVocab::token_id(static_cast<std::uint8_t>(c)));
  if (append_eos) ids.push_back(ByteVocab::kEos);
  return ids;
}

std::string decode(std::span<const int> ids) {
  std::string bytes;
  bytes.reserve(ids.size());
  for (int id : ids) {
    if (id < 0 || id >= ByteVocab::kSize) {
      throw RangeError("token id " + std::to_string(id) + " outside vocabulary of " +
                       std::to_string(ByteVocab::kSize));
    }
    if (id >= ByteVocab::kByteOffset) bytes.push_back(static_cast<char>(id - ByteVocab::kByteOffset));
  }

  std::string text;
  text.reserve(bytes.size());
  std::size_t i = 0;
  while (i < bytes.size()) {
    std::size_t prefix = 1;
    const std::size_t length = sequence_length(bytes, i, prefix);
    if (length == 0) {
      text += kReplacement;
      i += prefix;
    } else {
      text.append(bytes, i, length);
      i += length;
    }
  }
  return text;
}

std::string tag_source(std::string_view source_text, std::string_view target_lang) {
  if (!is_language_code(target_lang)) {
    throw FormatError("target language '" + std::string(target_lang) +
                      "' is not a 3-letter lowercase code");
  }
  std::string tagged = ">>";
  tagged += target_lang;
  tagged += "<< ";
  tagged += source_text;
  return tagged;
}

}  // namespace versebyte
