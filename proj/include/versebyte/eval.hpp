#pragma once

#include <cstddef>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <json.hpp>

#include "versebyte/corpus.hpp"
#include "versebyte/decode.hpp"
#include "versebyte/model.hpp"

namespace versebyte {

// Trims, then splits on runs of ASCII whitespace.
std::vector<std::string> whitespace_tokens(std::string_view text);

// (matched, total): matched sums min(hyp count, ref count) over distinct
// hypothesis n-grams; total = max(0, len(hyp) - n + 1).
std::pair<std::size_t, std::size_t> ngram_clip_counts(const std::vector<std::string>& hypothesis,
                                                      const std::vector<std::string>& reference, int n);

enum class Smoothing { kNone, kAddOne };
std::string to_string(Smoothing smoothing);
Smoothing parse_smoothing(std::string_view name);

struct BleuReport {
  int max_n = 4;
  std::vector<std::size_t> matched;
  std::vector<std::size_t> totals;
  std::vector<double> precisions;
  double brevity_penalty = 0.0;
  double score = 0.0;
  std::size_t hypothesis_length = 0;
  std::size_t reference_length = 0;
  std::size_t segments = 0;
  Smoothing smoothing = Smoothing::kNone;

  nlohmann::json to_json() const;
};

// Pooled corpus BLEU on the [0, 1] scale, one reference per segment. An order
// with no hypothesis n-grams at all has precision 1.
BleuReport corpus_bleu(const std::vector<std::string>& hypotheses, const std::vector<std::string>& references,
                       int max_n = 4, Smoothing smoothing = Smoothing::kNone);

struct ComparisonRow {
  std::string source_lang;
  std::string target_lang;
  VerseId verse_id;
  std::string source_text;
  std::string reference_text;
  std::string model_text;

  std::string language_pair() const { return source_lang + "-" + target_lang; }
  bool operator==(const ComparisonRow&) const = default;
};

struct Evaluation {
  BleuReport bleu;
  std::vector<ComparisonRow> rows;  // sorted by (target_lang, verse_id)
};

// Scores given hypotheses (parallel to `examples`) against their targets.
Evaluation evaluate_translations(const std::vector<ParallelExample>& examples,
                                 const std::vector<std::string>& hypotheses, Smoothing smoothing = Smoothing::kNone);

// Decodes every source; a failed decode yields an empty translation.
Evaluation evaluate_model(const ModelParams<float>& params, const std::vector<ParallelExample>& examples,
                          const DecodeOptions& options = {}, Smoothing smoothing = Smoothing::kNone);

std::string translate(const ModelParams<float>& params, std::string_view source_text, std::string_view target_lang,
                      const DecodeOptions& options = {});

nlohmann::json rows_to_json(const std::vector<ComparisonRow>& rows);
std::vector<ComparisonRow> rows_from_json(const nlohmann::json& json);

// format: "text", "html" or "json".
std::string render_comparison(const std::vector<ComparisonRow>& rows, std::string_view format);

}  // namespace versebyte
