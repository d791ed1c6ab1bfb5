#include "versebyte/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>
#include <tuple>

#include <json.hpp>

#include "versebyte/error.hpp"
#include "versebyte/rng.hpp"

namespace versebyte {
namespace {

bool is_space(char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v'; }

int parse_field(std::string_view digits, const char* name, std::string_view whole) {
  int value = 0;
  for (char c : digits) value = value * 10 + (c - '0');
  if (value == 0) {
    throw FormatError("verse id '" + std::string(whole) + "': " + name + " must be at least 1");
  }
  return value;
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  std::ostringstream buffer;
  buffer << in.rdbuf();
  return buffer.str();
}

auto example_key(const ParallelExample& e) {
  return std::tie(e.verse_id, e.source_lang, e.target_lang);
}

}  // namespace

VerseId parse_verse_id(std::string_view text) {
  if (text.size() != 8) {
    throw FormatError("verse id '" + std::string(text) + "': expected 8 digits, got " +
                      std::to_string(text.size()));
  }
  for (std::size_t i = 0; i < text.size(); ++i) {
    if (text[i] < '0' || text[i] > '9') {
      const char* field = i < 2 ? "book" : (i < 5 ? "chapter" : "verse");
      throw FormatError("verse id '" + std::string(text) + "': non-digit character in " + field);
    }
  }
  return VerseId{parse_field(text.substr(0, 2), "book", text),
                 parse_field(text.substr(2, 3), "chapter", text),
                 parse_field(text.substr(5, 3), "verse", text)};
}

std::string to_string(const VerseId& id) {
  char buffer[16];
  std::snprintf(buffer, sizeof buffer, "%02d%03d%03d", id.book, id.chapter, id.verse);
  return buffer;
}

bool is_language_code(std::string_view code) {
  return code.size() == 3 &&
         std::all_of(code.begin(), code.end(), [](char c) { return c >= 'a' && c <= 'z'; });
}

bool is_valid_utf8(std::string_view text) {
  const auto* bytes = reinterpret_cast<const unsigned char*>(text.data());
  const std::size_t n = text.size();
  std::size_t i = 0;
  while (i < n) {
    const unsigned char lead = bytes[i];
    std::size_t length = 0;
    std::uint32_t min_code = 0;
    if (lead < 0x80) {
      ++i;
      continue;
    } else if ((lead & 0xE0) == 0xC0) {
      length = 2;
      min_code = 0x80;
    } else if ((lead & 0xF0) == 0xE0) {
      length = 3;
      min_code = 0x800;
    } else if ((lead & 0xF8) == 0xF0) {
      length = 4;
      min_code = 0x10000;
    } else {
      return false;
    }
    if (i + length > n) return false;
    std::uint32_t code = lead & (0x7F >> length);
    for (std::size_t k = 1; k < length; ++k) {
      if ((bytes[i + k] & 0xC0) != 0x80) return false;
      code = (code << 6) | (bytes[i + k] & 0x3F);
    }
    if (code < min_code || code > 0x10FFFF || (code >= 0xD800 && code <= 0xDFFF)) return false;
    i += length;
  }
  return true;
}

std::string normalize_whitespace(std::string_view text) {
  std::string out;
  out.reserve(text.size());
  bool pending_space = false;
  for (char c : text) {
    if (is_space(c)) {
      pending_space = !out.empty();
      continue;
    }
    if (pending_space) out.push_back(' ');
    pending_space = false;
    out.push_back(c);
  }
  return out;
}

BibleVersion parse_version(std::string_view contents, const std::string& language,
                           const std::string& version_name, const std::string& origin) {
  if (!is_language_code(language)) {
    throw FormatError("language code '" + language + "' is not 3 lowercase letters");
  }
  if (!is_valid_utf8(contents)) throw FormatError(origin + ": invalid UTF-8");

  BibleVersion version{language, version_name, {}};
  std::size_t line_number = 0;
  std::size_t pos = 0;
  while (pos <= contents.size()) {
    const std::size_t end = std::min(contents.find('\n', pos), contents.size());
    std::string_view line = contents.substr(pos, end - pos);
    pos = end + 1;
    ++line_number;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (normalize_whitespace(line).empty() || line.front() == '#') continue;

    const std::size_t tab = line.find('\t');
    if (tab == std::string_view::npos) {
      throw FormatError(origin + ":" + std::to_string(line_number) + ": expected verse_id<TAB>text");
    }
    VerseId id;
    try {
      id = parse_verse_id(line.substr(0, tab));
    } catch (const FormatError& e) {
      throw FormatError(origin + ":" + std::to_string(line_number) + ": " + e.what());
    }
    std::string text = normalize_whitespace(line.substr(tab + 1));
    if (text.empty()) {
      throw FormatError(origin + ":" + std::to_string(line_number) + ": empty verse text");
    }
    if (!version.verses.emplace(id, std::move(text)).second) {
      throw FormatError(origin + ":" + std::to_string(line_number) + ": duplicate verse id " +
                        to_string(id));
    }
  }
  return version;
}

BibleVersion load_version(const std::filesystem::path& path, const std::string& language,
                          const std::string& version_name) {
  return parse_version(read_file(path), language, version_name, path.string());
}

std::string serialize_version(const BibleVersion& version) {
  std::string out;
  for (const auto& [id, text] : version.verses) {
    out += to_string(id);
    out += '\t';
    out += text;
    out += '\n';
  }
  return out;
}

std::vector<ParallelExample> align(const BibleVersion& source, const BibleVersion& target) {
  if (source.language == target.language) {
    throw Error("cannot align two versions of the same language '" + source.language + "'");
  }
  std::vector<ParallelExample> pairs;
  auto s = source.verses.begin();
  auto t = target.verses.begin();
  while (s != source.verses.end() && t != target.verses.end()) {
    if (s->first < t->first) {
      ++s;
    } else if (t->first < s->first) {
      ++t;
    } else {
      pairs.push_back({s->first, source.language, target.language, s->second, t->second});
      ++s;
      ++t;
    }
  }
  return pairs;
}

DatasetSplit make_split(std::vector<ParallelExample> examples, const SplitRatios& ratios,
                        std::uint64_t seed) {
  if (examples.empty()) throw Error("make_split: no examples");
  if (ratios.train < 0 || ratios.validation < 0 || ratios.test < 0 ||
      std::abs(ratios.train + ratios.validation + ratios.test - 1.0) > 1e-9) {
    throw FormatError("split ratios must be non-negative and sum to 1");
  }

  std::sort(examples.begin(), examples.end(),
            [](const auto& a, const auto& b) { return example_key(a) < example_key(b); });
  for (std::size_t i = 1; i < examples.size(); ++i) {
    if (example_key(examples[i - 1]) == example_key(examples[i])) {
      throw Error("make_split: duplicate example for verse " + to_string(examples[i].verse_id) +
                  " (" + examples[i].source_lang + "->" + examples[i].target_lang + ")");
    }
  }
  Rng rng(seed);
  rng.shuffle(std::span(examples));

  const std::size_t n = examples.size();
  const auto n_validation = static_cast<std::size_t>(std::floor(n * ratios.validation + 1e-9));
  const auto n_test = static_cast<std::size_t>(std::floor(n * ratios.test + 1e-9));
  const std::size_t n_train = n - n_validation - n_test;

  DatasetSplit split;
  split.seed = seed;
  split.ratios = ratios;
  auto first = std::make_move_iterator(examples.begin());
  split.train.assign(first, first + n_train);
  split.validation.assign(first + n_train, first + n_train + n_validation);
  split.test.assign(first + n_train + n_validation, std::make_move_iterator(examples.end()));
  return split;
}

std::size_t CorpusStats::histogram_total() const {
  std::size_t total = 0;
  for (auto count : length_histogram) total += count;
  return total;
}

CorpusStats corpus_stats(const std::vector<BibleVersion>& versions) {
  CorpusStats stats;
  std::set<std::string> languages;
  for (const auto& version : versions) {
    ++stats.version_count;
    languages.insert(version.language);
    stats.verses_per_version[version.language + "-" + version.version_name] += version.verses.size();
    for (const auto& [id, text] : version.verses) {
      const auto& edges = CorpusStats::kHistogramEdges;
      const auto bucket = std::lower_bound(edges.begin(), edges.end(), text.size()) - edges.begin();
      ++stats.length_histogram[static_cast<std::size_t>(bucket)];
    }
  }
  stats.language_count = languages.size();
  return stats;
}

std::string to_jsonl(const std::vector<ParallelExample>& examples) {
  std::string out;
  for (const auto& e : examples) {
    nlohmann::ordered_json row;
    row["verse_id"] = to_string(e.verse_id);
    row["source_lang"] = e.source_lang;
    row["target_lang"] = e.target_lang;
    row["source_text"] = e.source_text;
    row["target_text"] = e.target_text;
    out += row.dump();
    out += '\n';
  }
  return out;
}

std::vector<ParallelExample> from_jsonl(std::string_view contents, const std::string& origin) {
  std::vector<ParallelExample> examples;
  std::size_t line_number = 0;
  std::size_t pos = 0;
  while (pos < contents.size()) {
    const std::size_t end = std::min(contents.find('\n', pos), contents.size());
    const std::string_view line = contents.substr(pos, end - pos);
    pos = end + 1;
    ++line_number;
    if (normalize_whitespace(line).empty()) continue;
    const std::string where = origin + ":" + std::to_string(line_number);
    try {
      const auto row = nlohmann::json::parse(line);
      ParallelExample e{parse_verse_id(row.at("verse_id").get<std::string>()),
                        row.at("source_lang").get<std::string>(),
                        row.at("target_lang").get<std::string>(),
                        row.at("source_text").get<std::string>(),
                        row.at("target_text").get<std::string>()};
      if (!is_language_code(e.source_lang) || !is_language_code(e.target_lang)) {
        throw FormatError("language codes must be 3 lowercase letters");
      }
      if (e.source_lang == e.target_lang) throw FormatError("source and target language are equal");
      if (e.source_text.empty() || e.target_text.empty()) throw FormatError("empty text field");
      examples.push_back(std::move(e));
    } catch (const nlohmann::json::exception& ex) {
      throw FormatError(where + ": " + ex.what());
    } catch (const FormatError& ex) {
      throw FormatError(where + ": " + ex.what());
    }
  }
  return examples;
}

void write_jsonl(const std::filesystem::path& path, const std::vector<ParallelExample>& examples) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out << to_jsonl(examples);
}

std::vector<ParallelExample> read_jsonl(const std::filesystem::path& path) {
  return from_jsonl(read_file(path), path.string());
}

}  // namespace versebyte
