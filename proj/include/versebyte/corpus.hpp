#pragma once

#include <array>
#include <compare>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

namespace versebyte {

// Book/chapter/verse coordinate. Canonical text form is the 8-digit string
// BBCCCVVV, which sorts identically to the numeric triple.
struct VerseId {
  int book = 1;
  int chapter = 1;
  int verse = 1;

  auto operator<=>(const VerseId&) const = default;
};

VerseId parse_verse_id(std::string_view text);
std::string to_string(const VerseId& id);

bool is_language_code(std::string_view code);
bool is_valid_utf8(std::string_view text);

// Strips both ends and collapses interior whitespace runs to one space.
std::string normalize_whitespace(std::string_view text);

struct BibleVersion {
  std::string language;
  std::string version_name;
  std::map<VerseId, std::string> verses;

  bool operator==(const BibleVersion&) const = default;
};

BibleVersion load_version(const std::filesystem::path& path, const std::string& language,
                          const std::string& version_name);
// Parses corpus text already in memory; `origin` is used in error messages.
BibleVersion parse_version(std::string_view contents, const std::string& language,
                           const std::string& version_name, const std::string& origin = "<memory>");
std::string serialize_version(const BibleVersion& version);

struct ParallelExample {
  VerseId verse_id;
  std::string source_lang;
  std::string target_lang;
  std::string source_text;
  std::string target_text;

  bool operator==(const ParallelExample&) const = default;
};

// Verse ids present in both versions, in VerseId order.
std::vector<ParallelExample> align(const BibleVersion& source, const BibleVersion& target);

struct SplitRatios {
  double train = 0.98;
  double validation = 0.01;
  double test = 0.01;
};

struct DatasetSplit {
  std::vector<ParallelExample> train;
  std::vector<ParallelExample> validation;
  std::vector<ParallelExample> test;
  std::uint64_t seed = 0;
  SplitRatios ratios;
};

DatasetSplit make_split(std::vector<ParallelExample> examples, const SplitRatios& ratios,
                        std::uint64_t seed);

struct CorpusStats {
  // Bucket upper bounds in bytes; the final bucket is open-ended.
  static constexpr std::array<std::size_t, 8> kHistogramEdges = {16, 32, 64, 128, 256, 512, 1024,
                                                                  2048};

  std::size_t version_count = 0;
  std::size_t language_count = 0;
  std::map<std::string, std::size_t> verses_per_version;  // keyed "<lang>-<version_name>"
  std::array<std::size_t, kHistogramEdges.size() + 1> length_histogram{};

  std::size_t histogram_total() const;
};

CorpusStats corpus_stats(const std::vector<BibleVersion>& versions);

// JSON Lines, one object per example with the fields
// {verse_id, source_lang, target_lang, source_text, target_text}.
std::string to_jsonl(const std::vector<ParallelExample>& examples);
std::vector<ParallelExample> from_jsonl(std::string_view contents, const std::string& origin = "<memory>");
void write_jsonl(const std::filesystem::path& path, const std::vector<ParallelExample>& examples);
std::vector<ParallelExample> read_jsonl(const std::filesystem::path& path);

}  // namespace versebyte
