#include "versebyte/eval.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "versebyte/error.hpp"
#include "versebyte/tokenizer.hpp"

namespace versebyte {
namespace {

bool is_space(char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v'; }

std::map<std::vector<std::string_view>, std::size_t> ngram_counts(const std::vector<std::string>& tokens,
                                                                  std::size_t n) {
  std::map<std::vector<std::string_view>, std::size_t> counts;
  for (std::size_t i = 0; i + n <= tokens.size(); ++i) {
    ++counts[std::vector<std::string_view>(tokens.begin() + static_cast<long>(i),
                                           tokens.begin() + static_cast<long>(i + n))];
  }
  return counts;
}

std::string html_escape(std::string_view text) {
  std::string out;
  out.reserve(text.size());
  for (char c : text) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      case '\'': out += "&#39;"; break;
      default: out += c;
    }
  }
  return out;
}

}  // namespace

std::vector<std::string> whitespace_tokens(std::string_view text) {
  std::vector<std::string> tokens;
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && is_space(text[i])) ++i;
    const std::size_t start = i;
    while (i < text.size() && !is_space(text[i])) ++i;
    if (i > start) tokens.emplace_back(text.substr(start, i - start));
  }
  return tokens;
}

std::pair<std::size_t, std::size_t> ngram_clip_counts(const std::vector<std::string>& hypothesis,
                                                      const std::vector<std::string>& reference, int n) {
  if (n < 1) throw RangeError("n-gram order must be at least 1");
  const auto order = static_cast<std::size_t>(n);
  const std::size_t total = hypothesis.size() >= order ? hypothesis.size() - order + 1 : 0;
  if (total == 0) return {0, 0};
  const auto ref_counts = ngram_counts(reference, order);
  std::size_t matched = 0;
  for (const auto& [gram, count] : ngram_counts(hypothesis, order)) {
    if (auto it = ref_counts.find(gram); it != ref_counts.end()) matched += std::min(count, it->second);
  }
  return {matched, total};
}

std::string to_string(Smoothing smoothing) { return smoothing == Smoothing::kAddOne ? "add_one" : "none"; }

Smoothing parse_smoothing(std::string_view name) {
  if (name == "none") return Smoothing::kNone;
  if (name == "add_one") return Smoothing::kAddOne;
  throw FormatError("unknown smoothing mode '" + std::string(name) + "' (expected none or add_one)");
}

nlohmann::json BleuReport::to_json() const {
  return {{"max_n", max_n},
          {"matched", matched},
          {"totals", totals},
          {"precisions", precisions},
          {"brevity_penalty", brevity_penalty},
          {"score", score},
          {"hypothesis_length", hypothesis_length},
          {"reference_length", reference_length},
          {"segments", segments},
          {"smoothing", to_string(smoothing)}};
}

BleuReport corpus_bleu(const std::vector<std::string>& hypotheses, const std::vector<std::string>& references,
                       int max_n, Smoothing smoothing) {
  if (hypotheses.size() != references.size()) {
    throw Error("corpus_bleu: " + std::to_string(hypotheses.size()) + " hypotheses but " +
                std::to_string(references.size()) + " references");
  }
  if (hypotheses.empty()) throw Error("corpus_bleu: empty corpus");
  if (max_n < 1) throw RangeError("corpus_bleu: max_n must be at least 1");

  BleuReport report;
  report.max_n = max_n;
  report.smoothing = smoothing;
  report.segments = hypotheses.size();
  report.matched.assign(static_cast<std::size_t>(max_n), 0);
  report.totals.assign(static_cast<std::size_t>(max_n), 0);
  for (std::size_t s = 0; s < hypotheses.size(); ++s) {
    const auto hyp = whitespace_tokens(hypotheses[s]);
    const auto ref = whitespace_tokens(references[s]);
    report.hypothesis_length += hyp.size();
    report.reference_length += ref.size();
    for (int n = 1; n <= max_n; ++n) {
      const auto [m, t] = ngram_clip_counts(hyp, ref, n);
      report.matched[static_cast<std::size_t>(n - 1)] += m;
      report.totals[static_cast<std::size_t>(n - 1)] += t;
    }
  }

  double log_sum = 0.0;
  bool any_zero = false;
  for (int n = 1; n <= max_n; ++n) {
    double m = static_cast<double>(report.matched[static_cast<std::size_t>(n - 1)]);
    double t = static_cast<double>(report.totals[static_cast<std::size_t>(n - 1)]);
    if (smoothing == Smoothing::kAddOne && n >= 2 && m == 0.0) {
      m += 1.0;
      t += 1.0;
    }
    // No hypothesis n-grams of this order anywhere: nothing to get wrong, so
    // the order is neutral instead of zeroing the score.
    const double p = t > 0.0 ? m / t : 1.0;
    report.precisions.push_back(p);
    if (p == 0.0) {
      any_zero = true;
    } else {
      log_sum += std::log(p) / max_n;
    }
  }

  const auto hyp_len = static_cast<double>(report.hypothesis_length);
  const auto ref_len = static_cast<double>(report.reference_length);
  if (hyp_len > ref_len) {
    report.brevity_penalty = 1.0;
  } else if (hyp_len == 0.0) {
    report.brevity_penalty = ref_len == 0.0 ? 1.0 : 0.0;
  } else {
    report.brevity_penalty = std::exp(1.0 - ref_len / hyp_len);
  }
  report.score = any_zero ? 0.0 : report.brevity_penalty * std::exp(log_sum);
  return report;
}

Evaluation evaluate_translations(const std::vector<ParallelExample>& examples,
                                 const std::vector<std::string>& hypotheses, Smoothing smoothing) {
  if (examples.empty()) throw Error("evaluation set is empty");
  if (examples.size() != hypotheses.size()) throw Error("evaluation: one hypothesis per example is required");
  Evaluation result;
  std::vector<std::string> references;
  for (std::size_t i = 0; i < examples.size(); ++i) {
    const auto& e = examples[i];
    references.push_back(e.target_text);
    result.rows.push_back({e.source_lang, e.target_lang, e.verse_id, e.source_text, e.target_text, hypotheses[i]});
  }
  result.bleu = corpus_bleu(hypotheses, references, 4, smoothing);
  std::stable_sort(result.rows.begin(), result.rows.end(), [](const ComparisonRow& a, const ComparisonRow& b) {
    if (a.target_lang != b.target_lang) return a.target_lang < b.target_lang;
    return a.verse_id < b.verse_id;
  });
  return result;
}

std::string translate(const ModelParams<float>& params, std::string_view source_text, std::string_view target_lang,
                      const DecodeOptions& options) {
  const TokenSequence src = encode(tag_source(source_text, target_lang), true);
  return decode(decode_tokens(params, src, options));
}

Evaluation evaluate_model(const ModelParams<float>& params, const std::vector<ParallelExample>& examples,
                          const DecodeOptions& options, Smoothing smoothing) {
  std::vector<std::string> hypotheses;
  hypotheses.reserve(examples.size());
  for (const auto& e : examples) {
    try {
      hypotheses.push_back(translate(params, e.source_text, e.target_lang, options));
    } catch (const Error&) {
      hypotheses.emplace_back();
    }
  }
  return evaluate_translations(examples, hypotheses, smoothing);
}

nlohmann::json rows_to_json(const std::vector<ComparisonRow>& rows) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& r : rows) {
    out.push_back({{"language_pair", r.language_pair()},
                   {"source_lang", r.source_lang},
                   {"target_lang", r.target_lang},
                   {"verse_id", to_string(r.verse_id)},
                   {"source_text", r.source_text},
                   {"reference_text", r.reference_text},
                   {"model_text", r.model_text}});
  }
  return out;
}

std::vector<ComparisonRow> rows_from_json(const nlohmann::json& json) {
  if (!json.is_array()) throw FormatError("comparison rows must be a JSON array");
  std::vector<ComparisonRow> rows;
  for (std::size_t i = 0; i < json.size(); ++i) {
    const auto& item = json[i];
    const auto field = [&](const char* key) {
      if (!item.is_object() || !item.contains(key) || !item[key].is_string()) {
        throw FormatError("row " + std::to_string(i) + ": missing string field '" + key + "'");
      }
      return item[key].get<std::string>();
    };
    rows.push_back({field("source_lang"), field("target_lang"), parse_verse_id(field("verse_id")),
                    field("source_text"), field("reference_text"), field("model_text")});
  }
  return rows;
}

std::string render_comparison(const std::vector<ComparisonRow>& rows, std::string_view format) {
  if (format == "json") return rows_to_json(rows).dump(2) + "\n";
  if (format == "text") {
    std::string out = "Comparison of model translations with target texts\n\n";
    out += "language | verse | target text | model text\n";
    out += "--- | --- | --- | ---\n";
    for (const auto& r : rows) {
      out += r.language_pair() + " | " + to_string(r.verse_id) + " | " + r.reference_text + " | " + r.model_text + "\n";
    }
    return out;
  }
  if (format == "html") {
    std::string out =
        "<!DOCTYPE html>\n<html>\n<head>\n<meta charset=\"utf-8\">\n"
        "<title>Comparison of model translations with target texts</title>\n</head>\n<body>\n"
        "<table>\n<thead>\n<tr><th>Language</th><th>Verse</th><th>Source text</th><th>Target text</th>"
        "<th>Model translation</th></tr>\n</thead>\n<tbody>\n";
    for (const auto& r : rows) {
      out += "<tr><td>" + html_escape(r.language_pair()) + "</td><td>" + to_string(r.verse_id) + "</td><td>" +
             html_escape(r.source_text) + "</td><td>" + html_escape(r.reference_text) + "</td><td>" +
             html_escape(r.model_text) + "</td></tr>\n";
    }
    out += "</tbody>\n</table>\n</body>\n</html>\n";
    return out;
  }
  throw FormatError("unknown report format '" + std::string(format) + "' (expected text, html or json)");
}

}  // namespace versebyte
