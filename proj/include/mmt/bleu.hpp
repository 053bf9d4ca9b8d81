#pragma once

// Corpus-level BLEU-4 with clipped n-gram counts and the brevity penalty.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <string>
#include <vector>

#include "mmt/error.hpp"

namespace mmt {

struct BleuReport {
  double bleu = 0;  // 0..100
  double precisions[4] = {0, 0, 0, 0};
  double brevity_penalty = 0;
  long hyp_len = 0;
  long ref_len = 0;
  bool smoothed = false;

  std::string tsv() const {
    char buf[256];
    std::snprintf(buf, sizeof(buf), "%.4f\t%.6f\t%.6f\t%.6f\t%.6f\t%.6f\t%ld\t%ld", bleu,
                  precisions[0], precisions[1], precisions[2], precisions[3], brevity_penalty,
                  hyp_len, ref_len);
    return buf;
  }

  std::string pretty() const {
    char buf[256];
    std::snprintf(buf, sizeof(buf),
                  "BLEU = %.2f, %.1f/%.1f/%.1f/%.1f (BP=%.3f, ratio=%.3f, hyp_len=%ld, ref_len=%ld)",
                  bleu, 100 * precisions[0], 100 * precisions[1], 100 * precisions[2],
                  100 * precisions[3], brevity_penalty,
                  ref_len > 0 ? static_cast<double>(hyp_len) / ref_len : 0.0, hyp_len, ref_len);
    return buf;
  }
};

namespace detail {

using NgramCounts = std::map<std::vector<std::string>, long>;

inline NgramCounts count_ngrams(const std::vector<std::string>& tokens, int n) {
  NgramCounts counts;
  if (static_cast<int>(tokens.size()) >= n) {
    for (std::size_t i = 0; i + n <= tokens.size(); ++i) {
      ++counts[std::vector<std::string>(tokens.begin() + i, tokens.begin() + i + n)];
    }
  }
  return counts;
}

}  // namespace detail

// Single-reference corpus BLEU. Without smoothing, a zero match count at any
// order zeroes the score; with smoothing, orders 2..4 get +1 on both the
// clipped matches and the totals.
inline BleuReport corpus_bleu(const std::vector<std::vector<std::string>>& hypotheses,
                              const std::vector<std::vector<std::string>>& references,
                              bool smooth = false) {
  if (hypotheses.size() != references.size()) {
    throw ContractError("corpus_bleu: " + std::to_string(hypotheses.size()) + " hypotheses vs " +
                        std::to_string(references.size()) + " references");
  }
  if (hypotheses.empty()) throw ContractError("corpus_bleu: empty corpus");

  BleuReport report;
  report.smoothed = smooth;
  long matches[4] = {0, 0, 0, 0};
  long totals[4] = {0, 0, 0, 0};
  for (std::size_t i = 0; i < hypotheses.size(); ++i) {
    const auto& hyp = hypotheses[i];
    const auto& ref = references[i];
    report.hyp_len += static_cast<long>(hyp.size());
    report.ref_len += static_cast<long>(ref.size());
    for (int n = 1; n <= 4; ++n) {
      const auto hyp_counts = detail::count_ngrams(hyp, n);
      const auto ref_counts = detail::count_ngrams(ref, n);
      for (const auto& [gram, count] : hyp_counts) {
        totals[n - 1] += count;
        const auto it = ref_counts.find(gram);
        if (it != ref_counts.end()) matches[n - 1] += std::min(count, it->second);
      }
    }
  }

  if (report.hyp_len == 0) return report;

  double log_sum = 0;
  bool zero = false;
  for (int n = 0; n < 4; ++n) {
    long m = matches[n], t = totals[n];
    if (smooth && n >= 1) {
      m += 1;
      t += 1;
    }
    if (t == 0) {
      // No n-grams of this order exist in the hypotheses at all; nothing to
      // get wrong, so the order is vacuously perfect rather than zero
      // (otherwise a corpus of short identical pairs could not reach 100).
      report.precisions[n] = 1.0;
      continue;
    }
    report.precisions[n] = static_cast<double>(m) / t;
    if (m == 0) {
      zero = true;
    } else {
      log_sum += std::log(report.precisions[n]);
    }
  }
  report.brevity_penalty =
      report.hyp_len >= report.ref_len
          ? 1.0
          : std::exp(1.0 - static_cast<double>(report.ref_len) / report.hyp_len);
  if (!zero) {
    report.bleu = 100.0 * report.brevity_penalty * std::exp(log_sum / 4.0);
  }
  return report;
}

}  // namespace mmt
