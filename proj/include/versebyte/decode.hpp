#pragma once

#include <functional>
#include <span>
#include <vector>

#include "versebyte/model.hpp"
#include "versebyte/tokenizer.hpp"

namespace versebyte {

struct DecodeOptions {
  int beam_width = 1;
  int max_len = 512;
  double length_penalty = 0.0;
};

// Generated ids, without the start symbol and without the final eos.
TokenSequence greedy_decode(const ModelParams<float>& params, std::span<const int> src_ids, int max_len);

TokenSequence beam_decode(const ModelParams<float>& params, std::span<const int> src_ids, int beam_width, int max_len,
                          double length_penalty);

// Dispatches to greedy_decode when beam_width == 1.
TokenSequence decode_tokens(const ModelParams<float>& params, std::span<const int> src_ids,
                            const DecodeOptions& options);

// Log-probabilities over the vocabulary for the token following `prefix`
// (the prefix excludes the start symbol).
using StepScorer = std::function<std::vector<double>(std::span<const int> prefix)>;

// Beam search over an arbitrary scorer. A hypothesis of n generated tokens
// (eos included) scores logprob / n^alpha. Expansion candidates are ranked by
// cumulative log-probability, ties by beam slot then token id.
TokenSequence beam_search(const StepScorer& scorer, int eos_id, int beam_width, int max_len, double length_penalty);

}  // namespace versebyte
