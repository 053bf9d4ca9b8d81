#pragma once

// Image-vector prediction head: predicts the visual feature vector from the
// pooled encoder states, trains with a contrastive margin loss over the
// minibatch, and evaluates by image-sentence ranking.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <string>
#include <vector>

#include "mmt/data.hpp"
#include "mmt/encoder.hpp"
#include "mmt/model.hpp"
#include "mmt/tensor.hpp"

namespace mmt {

// v_hat = tanh(Wvis * pooled), one row per example; components in (-1, 1).
template <class T>
TensorPtr<T> predict_image_vector(Tape<T>& tape, const GroundingParams<T>& p,
                                  const Encoded<T>& enc) {
  return mmt::tanh(tape, linear(tape, enc.pooled, p.Wvis));
}

// Hinge over a similarity matrix S[B x B] where S[b][c] = s(v_hat_b, v_c):
// mean over rows b of sum_{c != b} max(0, alpha - S[b][b] + S[b][c]).
template <class T>
TensorPtr<T> contrastive_hinge(Tape<T>& tape, const TensorPtr<T>& sims, double alpha) {
  detail::require_matrix("contrastive_hinge", *sims);
  if (sims->rows() != sims->cols()) {
    throw ShapeError("contrastive_hinge: similarity matrix must be square, got " +
                     shape_str(sims->shape));
  }
  if (!(alpha > 0)) throw ContractError("contrastive_hinge: alpha must be > 0");
  const int b = sims->rows();
  auto out = tensor<T>({1});
  double acc = 0;
  for (int r = 0; r < b; ++r) {
    for (int c = 0; c < b; ++c) {
      if (c == r) continue;
      const double term = alpha - static_cast<double>(sims->at(r, r)) +
                          static_cast<double>(sims->at(r, c));
      if (term > 0) acc += term;
    }
  }
  out->values[0] = static_cast<T>(acc / b);
  out->requires_grad = sims->requires_grad;
  check_finite(*out, "contrastive_hinge");
  tape.record("contrastive_hinge", {sims}, out, [sims, out, alpha, b] {
    if (!sims->requires_grad) return;
    sims->ensure_grad();
    const T g = out->grad[0] / static_cast<T>(b);
    for (int r = 0; r < b; ++r) {
      for (int c = 0; c < b; ++c) {
        if (c == r) continue;
        const double term = alpha - static_cast<double>(sims->at(r, r)) +
                            static_cast<double>(sims->at(r, c));
        if (term > 0) {
          sims->grad[static_cast<std::size_t>(r) * b + c] += g;
          sims->grad[static_cast<std::size_t>(r) * b + r] -= g;
        }
      }
    }
  });
  return out;
}

// Margin loss with cosine similarity; contrastive vectors are the other true
// image vectors in the minibatch. A single-row batch has no contrastive
// instances and costs exactly zero.
template <class T>
TensorPtr<T> margin_loss(Tape<T>& tape, const TensorPtr<T>& v_hat, const TensorPtr<T>& v_true,
                         double alpha) {
  detail::require_same_shape("margin_loss", *v_hat, *v_true);
  detail::require_matrix("margin_loss", *v_hat);
  if (v_hat->rows() == 1) {
    // No contrastive instances: the loss is identically zero, with no
    // dependence on the inputs.
    return tensor<T>({1});
  }
  auto sims = linear(tape, l2_normalize_rows(tape, v_hat), l2_normalize_rows(tape, v_true));
  return contrastive_hinge(tape, sims, alpha);
}

// ---------------------------------------------------------------------------
// Image-sentence ranking
// ---------------------------------------------------------------------------

struct RankingResult {
  std::vector<int> ranks;                    // 1-based rank of the true image per sentence
  std::vector<std::vector<int>> top_images;  // top-10 image indices per sentence
  double median_rank = 0;
  double recall_at_1 = 0;
  double recall_at_5 = 0;
  double recall_at_10 = 0;
};

namespace detail {

inline double median_of(std::vector<int> xs) {
  std::sort(xs.begin(), xs.end());
  const std::size_t n = xs.size();
  if (n % 2 == 1) return xs[n / 2];
  return (static_cast<double>(xs[n / 2 - 1]) + xs[n / 2]) / 2.0;
}

}  // namespace detail

// Ranks all images for each sentence by descending cosine similarity to the
// predicted vector; ties break toward the lower image index. Sentence i's
// true image is image i.
template <class T>
RankingResult rank_images(const Model<T>& model, const std::vector<std::vector<int>>& sentences,
                          const ImageMatrix& images) {
  if (sentences.size() != static_cast<std::size_t>(images.count)) {
    throw ContractError("rank_images: " + std::to_string(sentences.size()) + " sentences vs " +
                        std::to_string(images.count) + " images");
  }
  if (sentences.empty()) throw ContractError("rank_images: empty input");

  // Unit-normalize the candidate pool once; cosine becomes a dot product.
  const int dim = images.dim;
  std::vector<double> pool(static_cast<std::size_t>(images.count) * dim);
  for (int i = 0; i < images.count; ++i) {
    double sq = 0;
    for (int c = 0; c < dim; ++c) sq += static_cast<double>(images.row(i)[c]) * images.row(i)[c];
    const double norm = std::sqrt(sq);
    if (!(norm > 1e-30)) {
      throw DegenerateError("rank_images: image " + std::to_string(i) + " has zero norm");
    }
    for (int c = 0; c < dim; ++c) pool[static_cast<std::size_t>(i) * dim + c] = images.row(i)[c] / norm;
  }

  RankingResult result;
  Tape<T> tape;
  tape.recording = false;
  for (std::size_t s = 0; s < sentences.size(); ++s) {
    auto enc = encode(tape, model.encoder, single_source_batch(sentences[s]));
    auto v_hat = predict_image_vector(tape, model.grounding, enc);
    double sq = 0;
    for (int c = 0; c < dim; ++c) sq += static_cast<double>(v_hat->values[c]) * v_hat->values[c];
    const double vnorm = std::sqrt(sq);
    if (!(vnorm > 1e-30)) {
      throw DegenerateError("rank_images: predicted vector for sentence " + std::to_string(s) +
                            " has zero norm");
    }
    std::vector<std::pair<double, int>> scored(images.count);
    for (int i = 0; i < images.count; ++i) {
      double dot = 0;
      for (int c = 0; c < dim; ++c) {
        dot += static_cast<double>(v_hat->values[c]) / vnorm * pool[static_cast<std::size_t>(i) * dim + c];
      }
      scored[i] = {dot, i};
    }
    std::sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) {
      if (a.first != b.first) return a.first > b.first;
      return a.second < b.second;
    });
    int rank = 0;
    for (int i = 0; i < images.count; ++i) {
      if (scored[i].second == static_cast<int>(s)) {
        rank = i + 1;
        break;
      }
    }
    result.ranks.push_back(rank);
    std::vector<int> top;
    for (int i = 0; i < std::min(10, images.count); ++i) top.push_back(scored[i].second);
    result.top_images.push_back(std::move(top));
  }

  result.median_rank = detail::median_of(result.ranks);
  const double n = static_cast<double>(result.ranks.size());
  for (int r : result.ranks) {
    if (r <= 1) result.recall_at_1 += 1;
    if (r <= 5) result.recall_at_5 += 1;
    if (r <= 10) result.recall_at_10 += 1;
  }
  result.recall_at_1 /= n;
  result.recall_at_5 /= n;
  result.recall_at_10 /= n;
  return result;
}

// TSV report: one line per sentence (index, true rank, top-10 image
// indices), then a summary line with the median rank and recalls.
inline std::string ranking_tsv(const RankingResult& r) {
  std::string out;
  char buf[160];
  for (std::size_t s = 0; s < r.ranks.size(); ++s) {
    out += std::to_string(s);
    out += '\t';
    out += std::to_string(r.ranks[s]);
    for (int idx : r.top_images[s]) {
      out += '\t';
      out += std::to_string(idx);
    }
    out += '\n';
  }
  std::snprintf(buf, sizeof(buf), "summary\tmedian_rank=%.1f\trecall@1=%.4f\trecall@5=%.4f\trecall@10=%.4f\n",
                r.median_rank, r.recall_at_1, r.recall_at_5, r.recall_at_10);
  out += buf;
  return out;
}

}  // namespace mmt
