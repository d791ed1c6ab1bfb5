#include <doctest.h>

#include "versebyte/error.hpp"
#include "versebyte/rng.hpp"
#include "versebyte/tokenizer.hpp"

using namespace versebyte;

TEST_CASE("encode follows the byte layout") {
  CHECK(encode("Ab", true) == TokenSequence{68, 101, 1});
  CHECK(encode("\xc3\xa9", true) == TokenSequence{198, 172, 1});
  CHECK(encode("", false).empty());
  for (int b = 0; b < 256; ++b) CHECK(ByteVocab::token_id(static_cast<std::uint8_t>(b)) == b + 3);
}

TEST_CASE("decode drops specials and repairs bad UTF-8") {
  CHECK(decode(TokenSequence{68, 101, 1}) == "Ab");
  CHECK(decode(TokenSequence{198, 1}) == "\xef\xbf\xbd");
  CHECK(decode(TokenSequence{0, 0, 1}).empty());
  CHECK(decode(TokenSequence{2, 68}) == "A");
  CHECK_THROWS_AS(decode(TokenSequence{259}), RangeError);
  CHECK_THROWS_AS(decode(TokenSequence{-1}), RangeError);
}

TEST_CASE("round trip on random code points") {
  Rng rng(11);
  for (int i = 0; i < 300; ++i) {
    std::string s;
    const auto n = rng.below(20);
    for (std::uint64_t k = 0; k < n; ++k) {
      std::uint32_t cp = static_cast<std::uint32_t>(rng.below(0x10FFFF));
      if (cp >= 0xD800 && cp <= 0xDFFF) cp = 0x0915;
      if (cp < 0x80) {
        s += static_cast<char>(cp);
      } else if (cp < 0x800) {
        s += static_cast<char>(0xC0 | (cp >> 6));
        s += static_cast<char>(0x80 | (cp & 0x3F));
      } else if (cp < 0x10000) {
        s += static_cast<char>(0xE0 | (cp >> 12));
        s += static_cast<char>(0x80 | ((cp >> 6) & 0x3F));
        s += static_cast<char>(0x80 | (cp & 0x3F));
      } else {
        s += static_cast<char>(0xF0 | (cp >> 18));
        s += static_cast<char>(0x80 | ((cp >> 12) & 0x3F));
        s += static_cast<char>(0x80 | ((cp >> 6) & 0x3F));
        s += static_cast<char>(0x80 | (cp & 0x3F));
      }
    }
    const auto ids = encode(s, true);
    CHECK(ids.size() == s.size() + 1);
    CHECK(decode(ids) == s);
  }
}

TEST_CASE("language tag") {
  CHECK(tag_source("In the beginning", "mar") == ">>mar<< In the beginning");
  CHECK(tag_source("", "deu") == ">>deu<< ");
  CHECK_THROWS_AS(tag_source("x", "German"), FormatError);
}
