#include "versebyte/decode.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace versebyte {
namespace {

// Runs the encoder once and the decoder once per step, rewinding the graph
// after each step so memory stays bounded by a single pass.
class StepDecoder {
 public:
  StepDecoder(const ModelParams<float>& params, std::span<const int> src_ids)
      : graph_(false), model_(graph_, params), memory_(model_.encode(src_ids)), mark_(graph_.size()) {}

  // Logits of the token following [start] + prefix.
  std::vector<float> next_logits(std::span<const int> prefix) {
    std::vector<int> tgt_in{ByteVocab::kPad};
    tgt_in.insert(tgt_in.end(), prefix.begin(), prefix.end());
    const Var<float> logits = model_.decode(memory_, {}, tgt_in);
    const auto last = logits.value().row(logits.value().rows() - 1);
    std::vector<float> out(last.begin(), last.end());
    graph_.truncate(mark_);
    return out;
  }

  int max_steps(int max_len) const { return std::min(max_len, model_.config().max_seq_len); }

 private:
  Graph<float> graph_;
  Seq2Seq<float> model_;
  Var<float> memory_;
  std::size_t mark_;
};

std::vector<double> log_softmax(std::span<const float> logits) {
  const double peak = *std::max_element(logits.begin(), logits.end());
  double z = 0;
  for (float x : logits) z += std::exp(static_cast<double>(x) - peak);
  const double lse = peak + std::log(z);
  std::vector<double> out(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) out[i] = static_cast<double>(logits[i]) - lse;
  return out;
}

double normalized(double logprob, std::size_t length, double alpha) {
  if (alpha == 0.0) return logprob;
  return logprob / std::pow(static_cast<double>(length), alpha);
}

}  // namespace

TokenSequence greedy_decode(const ModelParams<float>& params, std::span<const int> src_ids, int max_len) {
  StepDecoder decoder(params, src_ids);
  TokenSequence out;
  const int steps = decoder.max_steps(max_len);
  while (static_cast<int>(out.size()) < steps) {
    const auto logits = decoder.next_logits(out);
    // max_element returns the first maximum, i.e. the lowest id on ties.
    const int token = static_cast<int>(std::max_element(logits.begin(), logits.end()) - logits.begin());
    if (token == ByteVocab::kEos) break;
    out.push_back(token);
  }
  return out;
}

TokenSequence beam_search(const StepScorer& scorer, int eos_id, int beam_width, int max_len, double length_penalty) {
  if (beam_width < 1) throw Error("beam width must be at least 1");
  struct Hypothesis {
    TokenSequence tokens;
    double logprob = 0.0;
  };
  struct Candidate {
    double logprob;
    std::size_t beam;
    int token;
  };
  struct Finished {
    double score;
    TokenSequence tokens;
  };

  const auto width = static_cast<std::size_t>(beam_width);
  std::vector<Hypothesis> alive{Hypothesis{}};
  std::vector<Finished> finished;
  for (int step = 0; step < max_len && !alive.empty(); ++step) {
    std::vector<Candidate> candidates;
    for (std::size_t b = 0; b < alive.size(); ++b) {
      const auto logprobs = scorer(alive[b].tokens);
      for (std::size_t t = 0; t < logprobs.size(); ++t) {
        candidates.push_back({alive[b].logprob + logprobs[t], b, static_cast<int>(t)});
      }
    }
    std::sort(candidates.begin(), candidates.end(), [](const Candidate& x, const Candidate& y) {
      if (x.logprob != y.logprob) return x.logprob > y.logprob;
      if (x.beam != y.beam) return x.beam < y.beam;
      return x.token < y.token;
    });

    std::vector<Hypothesis> next;
    for (std::size_t rank = 0; rank < candidates.size() && next.size() < width; ++rank) {
      const Candidate& c = candidates[rank];
      if (c.token == eos_id) {
        // An eos outside the top `width` candidates would not have survived.
        if (rank < width) {
          const auto& tokens = alive[c.beam].tokens;
          finished.push_back({normalized(c.logprob, tokens.size() + 1, length_penalty), tokens});
        }
        continue;
      }
      Hypothesis h{alive[c.beam].tokens, c.logprob};
      h.tokens.push_back(c.token);
      next.push_back(std::move(h));
    }
    if (finished.size() >= width) break;
    alive = std::move(next);
    if (step + 1 == max_len) {
      for (auto& h : alive) finished.push_back({normalized(h.logprob, h.tokens.size(), length_penalty), h.tokens});
    }
  }
  if (finished.empty()) return {};
  // First-inserted wins ties.
  const auto best = std::max_element(finished.begin(), finished.end(),
                                     [](const Finished& x, const Finished& y) { return x.score < y.score; });
  return best->tokens;
}

TokenSequence beam_decode(const ModelParams<float>& params, std::span<const int> src_ids, int beam_width, int max_len,
                          double length_penalty) {
  StepDecoder decoder(params, src_ids);
  const StepScorer scorer = [&decoder](std::span<const int> prefix) {
    return log_softmax(decoder.next_logits(prefix));
  };
  return beam_search(scorer, ByteVocab::kEos, beam_width, decoder.max_steps(max_len), length_penalty);
}

TokenSequence decode_tokens(const ModelParams<float>& params, std::span<const int> src_ids,
                            const DecodeOptions& options) {
  if (options.beam_width == 1) return greedy_decode(params, src_ids, options.max_len);
  return beam_decode(params, src_ids, options.beam_width, options.max_len, options.length_penalty);
}

}  // namespace versebyte
