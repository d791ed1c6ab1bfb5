#pragma once

// Independent reference implementations used by the unit and acceptance
// tests. They share no code with the library.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <boost/multiprecision/cpp_int.hpp>

namespace oracle {

// Bucket formula evaluated with exact integer arithmetic: the log term
// floor(e * ln(n/e) / ln(m/e)) is the largest k with (n/e)^e >= (m/e)^k,
// i.e. n^e * e^k >= m^k * e^e.
inline int relative_bucket(int rel, bool bidirectional, int num_buckets, int max_distance) {
  using boost::multiprecision::cpp_int;
  using boost::multiprecision::pow;
  int offset = 0;
  int b = num_buckets;
  long long n = 0;
  if (bidirectional) {
    b = num_buckets / 2;
    if (rel > 0) offset = b;
    n = rel < 0 ? -static_cast<long long>(rel) : rel;
  } else {
    n = rel < 0 ? -static_cast<long long>(rel) : 0;
  }
  const int e = b / 2;
  if (n < e) return offset + static_cast<int>(n);
  const auto e_u = static_cast<unsigned>(e);
  const cpp_int lhs_base = pow(cpp_int(n), e_u);
  const cpp_int rhs_const = pow(cpp_int(e), e_u);
  int k = 0;
  // k never needs to exceed b - 1 - e because of the clamp.
  while (k + 1 <= b - 1 - e &&
         lhs_base * pow(cpp_int(e), static_cast<unsigned>(k + 1)) >=
             pow(cpp_int(max_distance), static_cast<unsigned>(k + 1)) * rhs_const) {
    ++k;
  }
  return offset + e + k;
}

// Clipped n-gram counts by exhaustive comparison of every position pair.
inline std::pair<std::size_t, std::size_t> brute_clip_counts(const std::vector<std::string>& hyp,
                                                             const std::vector<std::string>& ref, std::size_t n) {
  if (hyp.size() < n) return {0, 0};
  const std::size_t total = hyp.size() - n + 1;
  const auto same = [&](const std::vector<std::string>& a, std::size_t i, const std::vector<std::string>& b,
                        std::size_t j) {
    for (std::size_t k = 0; k < n; ++k) {
      if (a[i + k] != b[j + k]) return false;
    }
    return true;
  };
  std::size_t matched = 0;
  for (std::size_t i = 0; i < total; ++i) {
    bool first = true;
    for (std::size_t p = 0; p < i; ++p) {
      if (same(hyp, p, hyp, i)) first = false;
    }
    if (!first) continue;
    std::size_t in_hyp = 0;
    std::size_t in_ref = 0;
    for (std::size_t p = 0; p < total; ++p) in_hyp += same(hyp, p, hyp, i);
    for (std::size_t p = 0; ref.size() >= n && p + n <= ref.size(); ++p) in_ref += same(ref, p, hyp, i);
    matched += std::min(in_hyp, in_ref);
  }
  return {matched, total};
}

// Highest-probability complete sequence (ending in eos, or cut at max_len)
// found by enumerating every sequence over the vocabulary.
inline std::pair<std::vector<int>, double> best_sequence(
    const std::function<std::vector<double>(std::span<const int>)>& scorer, int eos, int max_len) {
  std::vector<int> best;
  double best_score = -INFINITY;
  std::vector<int> prefix;
  std::function<void(double)> walk = [&](double logp) {
    const auto lp = scorer(prefix);
    for (int t = 0; t < static_cast<int>(lp.size()); ++t) {
      const double s = logp + lp[static_cast<std::size_t>(t)];
      if (t == eos) {
        if (s > best_score) {
          best_score = s;
          best = prefix;
        }
        continue;
      }
      prefix.push_back(t);
      if (static_cast<int>(prefix.size()) == max_len) {
        if (s > best_score) {
          best_score = s;
          best = prefix;
        }
      } else {
        walk(s);
      }
      prefix.pop_back();
    }
  };
  walk(0.0);
  return {best, best_score};
}

}  // namespace oracle
