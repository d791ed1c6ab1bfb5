#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "../support/oracles.hpp"
#include "versebyte/error.hpp"
#include "versebyte/eval.hpp"
#include "versebyte/rng.hpp"

using namespace versebyte;

namespace {

std::vector<std::string> random_tokens(Rng& rng, std::size_t max_len, std::size_t alphabet) {
  std::vector<std::string> out(rng.below(max_len + 1));
  for (auto& t : out) t = std::string(1, static_cast<char>('a' + rng.below(alphabet)));
  return out;
}

std::string join(const std::vector<std::string>& tokens) {
  std::string out;
  for (const auto& t : tokens) out += (out.empty() ? "" : " ") + t;
  return out;
}

}  // namespace

TEST_CASE("clip counts") {
  const auto a = whitespace_tokens("a a a");
  CHECK(ngram_clip_counts(a, whitespace_tokens("a"), 1) == std::pair<std::size_t, std::size_t>{1, 3});
  const auto s = whitespace_tokens("the cat sat");
  for (int n = 1; n <= 3; ++n) {
    const auto [m, t] = ngram_clip_counts(s, s, n);
    CHECK(m == t);
  }
  CHECK(ngram_clip_counts(s, whitespace_tokens("x y z"), 1).first == 0);
  CHECK(ngram_clip_counts(s, s, 4) == std::pair<std::size_t, std::size_t>{0, 0});
  CHECK_THROWS_AS(ngram_clip_counts(s, s, 0), RangeError);
}

TEST_CASE("clip counts agree with brute force") {
  Rng rng(13);
  for (int i = 0; i < 300; ++i) {
    const auto hyp = random_tokens(rng, 12, 1 + rng.below(5));
    const auto ref = random_tokens(rng, 12, 1 + rng.below(5));
    for (int n = 1; n <= 4; ++n) CHECK(ngram_clip_counts(hyp, ref, n) == oracle::brute_clip_counts(hyp, ref, n));
  }
}

TEST_CASE("hand-computed sentence") {
  const auto r = corpus_bleu({"the cat sat on mat"}, {"the cat sat on the mat"});
  CHECK(r.precisions[0] == doctest::Approx(1.0));
  CHECK(r.precisions[1] == doctest::Approx(0.75));
  CHECK(r.precisions[2] == doctest::Approx(2.0 / 3));
  CHECK(r.precisions[3] == doctest::Approx(0.5));
  CHECK(r.brevity_penalty == doctest::Approx(std::exp(-0.2)));
  CHECK(std::abs(r.score - 0.57893) < 1e-5);
}

TEST_CASE("identity, zero overlap, empty output") {
  const std::vector<std::string> refs = {"in the beginning was the word", "and the word was with god"};
  const auto same = corpus_bleu(refs, refs);
  CHECK(same.score == 1.0);
  CHECK(same.brevity_penalty == 1.0);
  CHECK(corpus_bleu({"a b", "c"}, {"a b", "c"}).score == 1.0);

  const auto shuffled = corpus_bleu({"the word was in the beginning", "god was with the word and"}, refs);
  CHECK(shuffled.precisions[3] == 0.0);
  CHECK(shuffled.score == 0.0);
  CHECK(corpus_bleu({"the word was in the beginning", "god was with the word and"}, refs, 4, Smoothing::kAddOne)
            .score > 0.0);

  const auto empty = corpus_bleu({"", ""}, refs);
  CHECK(empty.score == 0.0);

  CHECK_THROWS_AS(corpus_bleu({"a"}, {}), Error);
  CHECK_THROWS_AS(corpus_bleu({}, {}), Error);
}

TEST_CASE("bleu properties on random corpora") {
  Rng rng(17);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<std::string> hyps;
    std::vector<std::string> refs;
    const auto segments = 1 + rng.below(6);
    for (std::uint64_t s = 0; s < segments; ++s) {
      hyps.push_back(join(random_tokens(rng, 12, 5)));
      refs.push_back(join(random_tokens(rng, 12, 5)));
    }
    const auto r = corpus_bleu(hyps, refs);
    CHECK(r.score >= 0.0);
    CHECK(r.score <= 1.0);
    CHECK(r.brevity_penalty <= 1.0);
    if (r.hypothesis_length > 0) CHECK(r.brevity_penalty > 0.0);

    std::vector<std::size_t> order(hyps.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    rng.shuffle(std::span<std::size_t>(order));
    std::vector<std::string> h2;
    std::vector<std::string> r2;
    for (auto i : order) {
      h2.push_back(hyps[i]);
      r2.push_back(refs[i]);
    }
    CHECK(corpus_bleu(h2, r2).score == r.score);
  }
}

TEST_CASE("rows are sorted and rendered") {
  const std::vector<ParallelExample> examples = {
      {VerseId{1, 1, 2}, "eng", "mar", "b", "B <b>"},
      {VerseId{1, 1, 1}, "eng", "mar", "a", "A & \"q\""},
      {VerseId{1, 1, 1}, "eng", "hin", "a", "H"},
  };
  const auto ev = evaluate_translations(examples, {"x", "y", "z"});
  REQUIRE(ev.rows.size() == 3);
  CHECK(ev.rows[0].target_lang == "hin");
  CHECK(ev.rows[1].verse_id == VerseId{1, 1, 1});
  CHECK(ev.rows[1].model_text == "y");

  const auto html = render_comparison(ev.rows, "html");
  CHECK(html.find("B &lt;b&gt;") != std::string::npos);
  CHECK(html.find("A &amp; &quot;q&quot;") != std::string::npos);
  CHECK(html.find("<b>") == std::string::npos);

  const auto text = render_comparison({}, "text");
  CHECK(text.find("target text") != std::string::npos);
  CHECK(render_comparison({}, "html").find("<th>Language</th>") != std::string::npos);
  CHECK(nlohmann::json::parse(render_comparison({}, "json")).empty());
  CHECK_THROWS_AS(render_comparison({}, "pdf"), FormatError);

  const std::vector<ComparisonRow> one = {{"eng", "hin", VerseId{40, 1, 1}, "src", "\xe0\xa4\x95 ref", ""}};
  CHECK(rows_from_json(nlohmann::json::parse(render_comparison(one, "json"))) == one);
}

TEST_CASE("smoothing names") {
  CHECK(parse_smoothing("add_one") == Smoothing::kAddOne);
  CHECK(to_string(Smoothing::kNone) == "none");
  CHECK_THROWS_AS(parse_smoothing("exp"), FormatError);
}
