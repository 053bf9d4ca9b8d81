#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "mmt/bleu.hpp"
#include "mmt/data.hpp"
#include "mmt/rng.hpp"

using namespace mmt;

namespace {

using Corpus = std::vector<std::vector<std::string>>;

Corpus sentences(std::initializer_list<const char*> lines) {
  Corpus out;
  for (const char* line : lines) out.push_back(normalize_tokenize(line));
  return out;
}

}  // namespace

TEST(Bleu, IdenticalCorpusScoresHundred) {
  const Corpus c = sentences({"a girl eats .", "two children on mats", "hello"});
  const auto report = corpus_bleu(c, c);
  EXPECT_DOUBLE_EQ(report.bleu, 100.0);
  EXPECT_DOUBLE_EQ(report.brevity_penalty, 1.0);
  for (double p : report.precisions) EXPECT_DOUBLE_EQ(p, 1.0);
}

TEST(Bleu, IdenticalShortSentencesStillScoreHundred) {
  // Orders with no n-grams at all are vacuous, not failures.
  const Corpus c = sentences({"hello", "a b", "x y z"});
  const auto report = corpus_bleu(c, c);
  EXPECT_DOUBLE_EQ(report.bleu, 100.0);
}

TEST(Bleu, ClippedUnigramPrecision) {
  const Corpus hyp = sentences({"the the the the"});
  const Corpus ref = sentences({"the cat sat down"});
  const auto report = corpus_bleu(hyp, ref);
  // "the" appears once in the reference: clipped count 1 of 4.
  EXPECT_DOUBLE_EQ(report.precisions[0], 0.25);
  EXPECT_DOUBLE_EQ(report.bleu, 0.0);  // no bigram match, unsmoothed
}

TEST(Bleu, BrevityPenaltyHalfLengthPerfectPrecisions) {
  const Corpus hyp = sentences({"a b c d"});
  const Corpus ref = sentences({"a b c d e f g h"});
  const auto report = corpus_bleu(hyp, ref);
  for (double p : report.precisions) EXPECT_DOUBLE_EQ(p, 1.0);
  EXPECT_NEAR(report.brevity_penalty, std::exp(-1.0), 1e-12);
  EXPECT_NEAR(report.bleu, 100.0 * std::exp(-1.0), 1e-9);
}

TEST(Bleu, PermutationInvariantOverSentencePairs) {
  const Corpus hyp = sentences({"a b c d e", "x y z w", "p q r s t u"});
  const Corpus ref = sentences({"a b c q e", "x y w z", "p q r s t v"});
  const auto base = corpus_bleu(hyp, ref);
  const Corpus hyp2 = {hyp[2], hyp[0], hyp[1]};
  const Corpus ref2 = {ref[2], ref[0], ref[1]};
  const auto perm = corpus_bleu(hyp2, ref2);
  EXPECT_DOUBLE_EQ(base.bleu, perm.bleu);
  for (int n = 0; n < 4; ++n) EXPECT_DOUBLE_EQ(base.precisions[n], perm.precisions[n]);
}

TEST(Bleu, AddingExactMatchNeverHurtsAPerfectCorpus) {
  Corpus hyp = sentences({"a b c d e"});
  Corpus ref = sentences({"a b c d e"});
  double prev = corpus_bleu(hyp, ref).bleu;
  for (int i = 0; i < 5; ++i) {
    hyp.push_back(normalize_tokenize("one more exact pair here"));
    ref.push_back(normalize_tokenize("one more exact pair here"));
    const double now = corpus_bleu(hyp, ref).bleu;
    EXPECT_GE(now, prev - 1e-12);
    prev = now;
  }
  EXPECT_DOUBLE_EQ(prev, 100.0);
}

TEST(Bleu, SmoothingRescuesZeroHigherOrderMatches) {
  const Corpus hyp = sentences({"a b x d"});
  const Corpus ref = sentences({"a b c d"});
  const auto plain = corpus_bleu(hyp, ref, false);
  const auto smoothed = corpus_bleu(hyp, ref, true);
  EXPECT_DOUBLE_EQ(plain.bleu, 0.0);  // p3 = p4 = 0 unsmoothed
  EXPECT_GT(smoothed.bleu, 0.0);
  // Unigram precision stays raw under +1 smoothing of orders >= 2.
  EXPECT_DOUBLE_EQ(smoothed.precisions[0], 0.75);
}

TEST(Bleu, CountMismatchAndEmptyCorpusRejected) {
  const Corpus one = sentences({"a"});
  EXPECT_THROW(corpus_bleu(one, {}), ContractError);
  EXPECT_THROW(corpus_bleu({}, {}), ContractError);
}

TEST(Bleu, ReportFormatsAreStable) {
  const Corpus c = sentences({"a b c d"});
  const auto report = corpus_bleu(c, c);
  EXPECT_EQ(report.tsv(), "100.0000\t1.000000\t1.000000\t1.000000\t1.000000\t1.000000\t4\t4");
  EXPECT_NE(report.pretty().find("BLEU = 100.00"), std::string::npos);
}
