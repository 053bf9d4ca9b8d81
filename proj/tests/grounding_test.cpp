#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "mmt/gradcheck.hpp"
#include "mmt/grounding.hpp"
#include "test_util.hpp"

using namespace mmt;
using testutil::batch_from_rows;
using testutil::tiny_dims;

namespace {

TensorPtr<double> random_rows(Rng& rng, int rows, int cols, bool requires_grad = false) {
  auto t = tensor<double>({rows, cols}, 0.0, requires_grad);
  for (auto& v : t->values) v = rng.uniform(-1.0, 1.0);
  return t;
}

double cosine(const std::vector<double>& a, const std::vector<double>& b) {
  double dot = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

// Scalar double-loop restatement of the margin objective.
double margin_oracle(const TensorPtr<double>& v_hat, const TensorPtr<double>& v_true, double alpha) {
  const int b = v_hat->rows(), d = v_hat->cols();
  double total = 0;
  for (int r = 0; r < b; ++r) {
    std::vector<double> hr(v_hat->values.begin() + r * d, v_hat->values.begin() + (r + 1) * d);
    std::vector<double> tr(v_true->values.begin() + r * d, v_true->values.begin() + (r + 1) * d);
    for (int c = 0; c < b; ++c) {
      if (c == r) continue;
      std::vector<double> tc(v_true->values.begin() + c * d, v_true->values.begin() + (c + 1) * d);
      total += std::max(0.0, alpha - cosine(hr, tr) + cosine(hr, tc));
    }
  }
  return total / b;
}

}  // namespace

TEST(PredictImageVector, ZeroWeightsGiveZeroVector) {
  Rng rng(1);
  Model<double> model(tiny_dims(), rng);
  testutil::zero_tensor(model.grounding.Wvis);
  Tape<double> tape;
  auto enc = encode(tape, model.encoder, batch_from_rows({{4, 5, 6}}));
  auto v = predict_image_vector(tape, model.grounding, enc);
  for (double x : v->values) EXPECT_DOUBLE_EQ(x, 0.0);
}

TEST(PredictImageVector, SingleTokenUsesThatState) {
  Rng rng(2);
  Model<double> model(tiny_dims(), rng);
  Tape<double> tape;
  auto enc = encode(tape, model.encoder, batch_from_rows({{7}}));
  auto v = predict_image_vector(tape, model.grounding, enc);
  for (int i = 0; i < 5; ++i) {
    double acc = 0;
    for (int c = 0; c < 8; ++c) acc += model.grounding.Wvis->at(i, c) * enc.states[0]->at(0, c);
    EXPECT_NEAR(v->at(0, i), std::tanh(acc), 1e-12);
    EXPECT_GT(v->at(0, i), -1.0);
    EXPECT_LT(v->at(0, i), 1.0);
  }
}

TEST(PredictImageVector, MatchesDirectRecomputation) {
  Rng rng(3);
  Model<double> model(tiny_dims(), rng);
  Tape<double> tape;
  auto enc = encode(tape, model.encoder, batch_from_rows({{4, 9, 6}, {5, 8}}));
  auto v = predict_image_vector(tape, model.grounding, enc);
  for (int r = 0; r < 2; ++r) {
    for (int i = 0; i < 5; ++i) {
      double acc = 0;
      for (int c = 0; c < 8; ++c) acc += model.grounding.Wvis->at(i, c) * enc.pooled->at(r, c);
      EXPECT_NEAR(v->at(r, i), std::tanh(acc), 1e-12);
    }
  }
}

TEST(MarginLoss, SingleRowBatchIsZero) {
  Rng rng(4);
  Tape<double> tape;
  auto v_hat = random_rows(rng, 1, 6);
  auto v_true = random_rows(rng, 1, 6);
  auto loss = margin_loss(tape, v_hat, v_true, 0.1);
  EXPECT_DOUBLE_EQ(loss->values[0], 0.0);
}

TEST(MarginLoss, OrthogonalPerfectPredictionsCostZero) {
  Tape<double> tape;
  auto v_true = tensor<double>({2, 4}, std::vector<double>{1, 0, 0, 0, 0, 1, 0, 0});
  auto v_hat = tensor<double>({2, 4}, std::vector<double>{1, 0, 0, 0, 0, 1, 0, 0});
  auto loss = margin_loss(tape, v_hat, v_true, 0.1);
  // Per-row term is max(0, 0.1 - 1 + 0) = 0.
  EXPECT_DOUBLE_EQ(loss->values[0], 0.0);
}

TEST(MarginLoss, MatchesDoubleLoopOracle) {
  Rng rng(5);
  for (int trial = 0; trial < 10; ++trial) {
    Tape<double> tape;
    auto v_hat = random_rows(rng, 3, 7);
    auto v_true = random_rows(rng, 3, 7);
    auto loss = margin_loss(tape, v_hat, v_true, 0.1);
    EXPECT_NEAR(loss->values[0], margin_oracle(v_hat, v_true, 0.1), 1e-8);
  }
}

TEST(MarginLoss, ZeroNormVectorIsDegenerate) {
  Tape<double> tape;
  auto v_hat = tensor<double>({2, 3}, std::vector<double>{0, 0, 0, 1, 0, 0});
  auto v_true = tensor<double>({2, 3}, std::vector<double>{1, 0, 0, 0, 1, 0});
  EXPECT_THROW(margin_loss(tape, v_hat, v_true, 0.1), DegenerateError);
}

TEST(MarginLoss, NonNegativeAndZeroExactlyWhenMarginCleared) {
  Rng rng(6);
  for (int trial = 0; trial < 30; ++trial) {
    Tape<double> tape;
    auto v_hat = random_rows(rng, 4, 5);
    auto v_true = random_rows(rng, 4, 5);
    const double alpha = 0.1 + 0.4 * rng.u01();
    auto loss = margin_loss(tape, v_hat, v_true, alpha);
    EXPECT_GE(loss->values[0], 0.0);
    bool cleared = true;
    for (int r = 0; r < 4 && cleared; ++r) {
      std::vector<double> hr(v_hat->values.begin() + r * 5, v_hat->values.begin() + (r + 1) * 5);
      std::vector<double> tr(v_true->values.begin() + r * 5, v_true->values.begin() + (r + 1) * 5);
      for (int c = 0; c < 4; ++c) {
        if (c == r) continue;
        std::vector<double> tc(v_true->values.begin() + c * 5, v_true->values.begin() + (c + 1) * 5);
        if (cosine(hr, tr) - cosine(hr, tc) < alpha) cleared = false;
      }
    }
    EXPECT_EQ(loss->values[0] == 0.0, cleared);
  }
}

TEST(MarginLoss, InvariantToPositiveRescalingOfRows) {
  Rng rng(7);
  auto v_hat = random_rows(rng, 3, 6);
  auto v_true = random_rows(rng, 3, 6);
  Tape<double> tape;
  const double base = margin_loss(tape, v_hat, v_true, 0.1)->values[0];
  auto scaled = tensor<double>({3, 6}, v_hat->values);
  const double cs[] = {13.0, 0.004, 7.5};
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 6; ++c) scaled->at(r, c) *= cs[r];
  }
  const double after = margin_loss(tape, scaled, v_true, 0.1)->values[0];
  EXPECT_NEAR(base, after, 1e-9);
}

TEST(MarginLoss, GradientsMatchFiniteDifferences) {
  Rng rng(8);
  auto v_hat = random_rows(rng, 4, 6, true);
  auto v_true = random_rows(rng, 4, 6, true);
  auto eval = [&](bool grads) {
    v_hat->zero_grad();
    v_true->zero_grad();
    Tape<double> tape;
    auto loss = margin_loss(tape, v_hat, v_true, 0.1);
    if (grads) backward(tape, loss);
    return loss->values[0];
  };
  GradCheckParams<double> params{{"v_hat", v_hat}, {"v_true", v_true}};
  auto report = grad_check(eval, params, 1e-6);
  EXPECT_LT(report.max_rel_error, 1e-4) << report.worst_param << "[" << report.worst_index << "]";
}

TEST(MarginLoss, FullModelGradientsMatchFiniteDifferences) {
  Rng rng(9);
  Model<double> model(tiny_dims(8, 7, 3, 3, 4), rng);
  auto batch = batch_from_rows({{4, 5, 6}, {7, 4}, {5, 6}});
  batch.image_dim = 4;
  batch.image.resize(12);
  Rng imgr(99);
  for (auto& v : batch.image) v = static_cast<float>(imgr.uniform(-1.0, 1.0));
  auto eval = [&](bool grads) {
    model.params.zero_grads({ParamGroup::shared, ParamGroup::grounding});
    Tape<double> tape;
    auto enc = encode(tape, model.encoder, batch);
    auto v_hat = predict_image_vector(tape, model.grounding, enc);
    auto v_true = tensor<double>({3, 4});
    for (std::size_t i = 0; i < batch.image.size(); ++i) v_true->values[i] = batch.image[i];
    auto loss = margin_loss(tape, v_hat, v_true, 0.1);
    if (grads) backward(tape, loss);
    return loss->values[0];
  };
  GradCheckParams<double> params;
  for (const auto& e : model.params.entries()) {
    if (e.group != ParamGroup::translation) params.emplace_back(e.name, e.tensor);
  }
  auto report = grad_check(eval, params, 1e-5);
  EXPECT_LT(report.max_rel_error, 1e-4)
      << report.worst_param << "[" << report.worst_index << "] analytic=" << report.analytic
      << " numeric=" << report.numeric;
}

namespace {

// Predictions of the model itself, so ranking tests control the geometry.
std::vector<float> prediction_of(const Model<double>& model, const std::vector<int>& sentence) {
  Tape<double> tape;
  tape.recording = false;
  auto enc = encode(tape, model.encoder, single_source_batch(sentence));
  auto v = predict_image_vector(tape, model.grounding, enc);
  std::vector<float> out(v->values.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<float>(v->values[i]);
  return out;
}

}  // namespace

TEST(RankImages, PerfectPredictionsRankFirst) {
  Rng rng(10);
  Model<double> model(tiny_dims(), rng);
  std::vector<std::vector<int>> sentences = {{4, 5}, {6, 7, 8}, {9}, {10, 4}};
  ImageMatrix images;
  images.count = 4;
  images.dim = 5;
  for (const auto& s : sentences) {
    const auto v = prediction_of(model, s);
    images.values.insert(images.values.end(), v.begin(), v.end());
  }
  const auto result = rank_images(model, sentences, images);
  for (int r : result.ranks) EXPECT_EQ(r, 1);
  EXPECT_DOUBLE_EQ(result.median_rank, 1.0);
  EXPECT_DOUBLE_EQ(result.recall_at_1, 1.0);
}

TEST(RankImages, MisdirectedPredictionRanksSecond) {
  Rng rng(11);
  Model<double> model(tiny_dims(), rng);
  std::vector<std::vector<int>> sentences = {{4, 5}, {6, 7}};
  const auto v0 = prediction_of(model, sentences[0]);
  ImageMatrix images;
  images.count = 2;
  images.dim = 5;
  // True image of sentence 0 points away from its prediction; image 1 is the
  // prediction itself.
  for (float x : v0) images.values.push_back(-x);
  for (float x : v0) images.values.push_back(x);
  const auto result = rank_images(model, sentences, images);
  EXPECT_EQ(result.ranks[0], 2);
}

TEST(RankImages, MatchesExhaustivePairwiseOracle) {
  Rng rng(12);
  Model<double> model(tiny_dims(20, 9, 4, 5, 6), rng);
  std::vector<std::vector<int>> sentences;
  for (int i = 0; i < 8; ++i) {
    std::vector<int> s;
    const int len = 1 + static_cast<int>(rng.index(6));
    for (int t = 0; t < len; ++t) s.push_back(4 + static_cast<int>(rng.index(16)));
    sentences.push_back(s);
  }
  ImageMatrix images;
  images.count = 8;
  images.dim = 6;
  for (int i = 0; i < 8 * 6; ++i) images.values.push_back(static_cast<float>(rng.uniform(-1.0, 1.0)));

  const auto result = rank_images(model, sentences, images);

  for (int s = 0; s < 8; ++s) {
    const auto pred = prediction_of(model, sentences[s]);
    std::vector<double> pv(pred.begin(), pred.end());
    std::vector<double> sims(8);
    for (int i = 0; i < 8; ++i) {
      std::vector<double> img(images.row(i), images.row(i) + 6);
      sims[i] = cosine(pv, img);
    }
    int better = 0;
    for (int i = 0; i < 8; ++i) {
      if (sims[i] > sims[s] || (sims[i] == sims[s] && i < s)) ++better;
    }
    EXPECT_EQ(result.ranks[s], better + 1) << "sentence " << s;
  }
}

TEST(RankImages, OrderingInvariantToPredictionRescaling) {
  // Cosine ordering only depends on direction, so scaling the image pool
  // rows (or equivalently the predictions) must not change any rank.
  Rng rng(13);
  Model<double> model(tiny_dims(), rng);
  std::vector<std::vector<int>> sentences = {{4, 6}, {5, 7, 9}, {8}};
  ImageMatrix images;
  images.count = 3;
  images.dim = 5;
  for (int i = 0; i < 15; ++i) images.values.push_back(static_cast<float>(rng.uniform(-1.0, 1.0)));
  const auto base = rank_images(model, sentences, images);
  ImageMatrix scaled = images;
  for (int i = 0; i < 3; ++i) {
    for (int c = 0; c < 5; ++c) scaled.values[static_cast<std::size_t>(i) * 5 + c] *= 42.0f;
  }
  const auto after = rank_images(model, sentences, scaled);
  EXPECT_EQ(base.ranks, after.ranks);
  EXPECT_EQ(base.top_images, after.top_images);
}

TEST(RankImages, AlignmentMismatchRejected) {
  Rng rng(14);
  Model<double> model(tiny_dims(), rng);
  ImageMatrix images;
  images.count = 2;
  images.dim = 5;
  images.values.assign(10, 1.0f);
  EXPECT_THROW(rank_images(model, {{4}}, images), ContractError);
}

TEST(RankImages, TsvReportHasPerSentenceAndSummaryLines) {
  Rng rng(15);
  Model<double> model(tiny_dims(), rng);
  std::vector<std::vector<int>> sentences = {{4, 5}, {6}};
  ImageMatrix images;
  images.count = 2;
  images.dim = 5;
  for (int i = 0; i < 10; ++i) images.values.push_back(static_cast<float>(rng.uniform(-1.0, 1.0)));
  const auto result = rank_images(model, sentences, images);
  const std::string tsv = ranking_tsv(result);
  EXPECT_NE(tsv.find("summary\tmedian_rank="), std::string::npos);
  EXPECT_EQ(std::count(tsv.begin(), tsv.end(), '\n'), 3);
}
