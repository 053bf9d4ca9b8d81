#pragma once

// Attention-based translation decoder: teacher-forced NLL training, greedy
// and beam-search decoding, and ensemble decoding by probability averaging.

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "mmt/encoder.hpp"
#include "mmt/model.hpp"
#include "mmt/tensor.hpp"

namespace mmt {

// Attention key projections (Ua h_i), computed once per encoded batch and
// reused across decoder steps.
template <class T>
struct AttnCache {
  std::vector<TensorPtr<T>> keys;
};

template <class T>
struct Attention {
  TensorPtr<T> context;  // [B x 2H]
  TensorPtr<T> weights;  // [B x N]
};

// d0 = tanh(Winit * pooled), one row per example.
template <class T>
TensorPtr<T> init_state(Tape<T>& tape, const DecoderParams<T>& p, const Encoded<T>& enc) {
  return mmt::tanh(tape, linear(tape, enc.pooled, p.Winit));
}

// Additive attention keyed on the previous decoder state. Masked source
// positions score -inf, so their weight is exactly zero.
template <class T>
Attention<T> attend(Tape<T>& tape, const DecoderParams<T>& p, const TensorPtr<T>& d_prev,
                    const Encoded<T>& enc, AttnCache<T>& cache) {
  if (cache.keys.empty()) {
    cache.keys.reserve(enc.len);
    for (const auto& h : enc.states) cache.keys.push_back(linear(tape, h, p.Ua));
  }
  auto query = linear(tape, d_prev, p.Wa);  // [B x A]
  std::vector<TensorPtr<T>> scores;
  scores.reserve(enc.len);
  for (int t = 0; t < enc.len; ++t) {
    scores.push_back(linear(tape, mmt::tanh(tape, add(tape, query, cache.keys[t])), p.va));
  }
  auto weights = masked_softmax_rows(tape, concat_cols(tape, scores), enc.mask_matrix);
  TensorPtr<T> context = scale_rows(tape, enc.states[0], slice_col(tape, weights, 0));
  for (int t = 1; t < enc.len; ++t) {
    context = add(tape, context,
                  scale_rows(tape, enc.states[t], slice_col(tape, weights, t)));
  }
  return Attention<T>{context, weights};
}

template <class T>
struct DecoderStep {
  TensorPtr<T> state;    // [B x H]
  TensorPtr<T> logits;   // [B x V_tgt]
  Attention<T> attention;
};

// One decoder step: attend with the previous state, feed the GRU
// concat(prev embedding, context), then the deep-output readout
//   logits = Wout * tanh(Pemb e + Pstate d + Pctx c).
template <class T>
DecoderStep<T> decoder_step(Tape<T>& tape, const DecoderParams<T>& p, const TensorPtr<T>& d_prev,
                            const TensorPtr<T>& prev_emb, const Encoded<T>& enc,
                            AttnCache<T>& cache, const TensorPtr<T>* rec_mask = nullptr) {
  auto att = attend(tape, p, d_prev, enc, cache);
  auto x = concat_cols(tape, {prev_emb, att.context});
  TensorPtr<T> gates = rec_mask ? mul(tape, d_prev, *rec_mask) : d_prev;
  auto d = gru_cell(tape, p.gru, d_prev, x, &gates);
  auto readout = mmt::tanh(
      tape, add(tape, add(tape, linear(tape, prev_emb, p.Pemb), linear(tape, d, p.Pstate)),
                linear(tape, att.context, p.Pctx)));
  auto logits = linear(tape, readout, p.Wout);
  return DecoderStep<T>{d, logits, att};
}

template <class T>
struct DecoderDropout {
  TensorPtr<T> embed;  // [B x E]
  TensorPtr<T> rec;    // [B x H]
};

template <class T>
DecoderDropout<T> make_decoder_dropout(Rng& rng, int batch, const ModelDims& dims, double rate) {
  DecoderDropout<T> d;
  d.embed = dropout_mask<T>(rng, batch, dims.embed_dim, rate);
  d.rec = dropout_mask<T>(rng, batch, dims.hidden_dim, rate);
  return d;
}

// Teacher-forced negative log likelihood: sum over unmasked target positions
// of -log p(y_j | y_<j, x), then mean over batch rows.
template <class T>
TensorPtr<T> sequence_nll(Tape<T>& tape, const DecoderParams<T>& p, const Encoded<T>& enc,
                          const Batch& batch, const DecoderDropout<T>* drop = nullptr) {
  if (!batch.has_target()) throw ContractError("sequence_nll: batch has no targets");
  const int B = batch.size, M = batch.tgt_len;
  AttnCache<T> cache;
  auto d = init_state(tape, p, enc);
  TensorPtr<T> total;
  for (int j = 0; j < M; ++j) {
    // Teacher forcing: the observed previous token, BOS at the first step.
    std::vector<int> prev = j == 0 ? std::vector<int>(B, Vocabulary::kBos) : batch.tgt_col(j - 1);
    auto emb = lookup_rows(tape, p.embed, prev);
    if (drop) emb = mul(tape, emb, drop->embed);
    auto step = decoder_step(tape, p, d, emb, enc, cache, drop ? &drop->rec : nullptr);
    d = step.state;
    auto logp = log_softmax_rows(tape, step.logits);
    auto picked = pick_cols(tape, logp, batch.tgt_col(j));
    auto mask = tensor<T>({B});
    for (int r = 0; r < B; ++r) {
      mask->values[r] = static_cast<T>(batch.tgt_mask[static_cast<std::size_t>(r) * M + j]);
    }
    auto masked = mul(tape, picked, mask);
    total = j == 0 ? masked : add(tape, total, masked);
  }
  return scale_const(tape, sum_all(tape, total), static_cast<T>(-1.0 / B));
}

// ---------------------------------------------------------------------------
// Decoding
// ---------------------------------------------------------------------------

// A partial translation: BOS-prefixed token ids and the summed log
// probability of the emitted tokens.
struct Hypothesis {
  std::vector<int> tokens{Vocabulary::kBos};
  double log_prob = 0.0;
  bool finished = false;

  int emitted() const { return static_cast<int>(tokens.size()) - 1; }
  // Length-normalized score used for the final ranking.
  double score() const { return log_prob / std::max(1, emitted()); }
  std::vector<int> emitted_tokens() const {
    return std::vector<int>(tokens.begin() + 1, tokens.end());
  }
};

// Drives one or more models over a single source sentence and serves the
// per-step next-token distribution averaged across models. Probabilities are
// combined in double precision, so an ensemble of identical models
// reproduces the single model exactly.
template <class T>
class EnsembleDecoder {
 public:
  EnsembleDecoder(std::vector<const Model<T>*> models, const Batch& source) : models_(std::move(models)) {
    if (models_.empty()) throw ContractError("decode: no models");
    if (source.size != 1) throw ContractError("decode: one sentence at a time");
    const int vt = models_[0]->dims.tgt_vocab;
    for (const auto* m : models_) {
      if (m->dims.tgt_vocab != vt) {
        throw ContractError("decode: ensemble members disagree on target vocabulary size");
      }
    }
    tape_.recording = false;
    encs_.reserve(models_.size());
    caches_.resize(models_.size());
    for (const auto* m : models_) encs_.push_back(encode(tape_, m->encoder, source));
  }

  int target_vocab() const { return models_[0]->dims.tgt_vocab; }

  std::vector<TensorPtr<T>> initial_states() {
    std::vector<TensorPtr<T>> states;
    states.reserve(models_.size());
    for (std::size_t k = 0; k < models_.size(); ++k) {
      states.push_back(init_state(tape_, models_[k]->decoder, encs_[k]));
    }
    return states;
  }

  struct StepResult {
    std::vector<double> probs;            // mean over models, sums to 1
    std::vector<TensorPtr<T>> states;     // one advanced state per model
  };

  StepResult step(const std::vector<TensorPtr<T>>& states, int prev_token) {
    StepResult out;
    out.probs.assign(target_vocab(), 0.0);
    out.states.reserve(models_.size());
    for (std::size_t k = 0; k < models_.size(); ++k) {
      const auto& dec = models_[k]->decoder;
      auto emb = lookup_rows(tape_, dec.embed, std::vector<int>{prev_token});
      auto step = decoder_step(tape_, dec, states[k], emb, encs_[k], caches_[k]);
      out.states.push_back(step.state);
      accumulate_probs(step.logits, out.probs);
    }
    const double inv = 1.0 / static_cast<double>(models_.size());
    for (double& p : out.probs) p *= inv;
    return out;
  }

 private:
  void accumulate_probs(const TensorPtr<T>& logits, std::vector<double>& acc) const {
    const int n = logits->cols();
    double mx = -std::numeric_limits<double>::infinity();
    for (int i = 0; i < n; ++i) mx = std::max(mx, static_cast<double>(logits->values[i]));
    double sum = 0;
    std::vector<double> e(n);
    for (int i = 0; i < n; ++i) {
      e[i] = std::exp(static_cast<double>(logits->values[i]) - mx);
      sum += e[i];
    }
    for (int i = 0; i < n; ++i) acc[i] += e[i] / sum;
  }

  std::vector<const Model<T>*> models_;
  Tape<T> tape_;
  std::vector<Encoded<T>> encs_;
  std::vector<AttnCache<T>> caches_;
};

namespace detail {

inline double safe_log(double p) {
  return p > 0 ? std::log(p) : -1e30;
}

}  // namespace detail

// Greedy argmax decoding; ties resolve to the lowest token id.
template <class T>
Hypothesis greedy_decode(EnsembleDecoder<T>& dec, int max_len) {
  if (max_len < 1) throw ContractError("greedy_decode: max_len must be >= 1");
  Hypothesis hyp;
  auto states = dec.initial_states();
  for (int step = 0; step < max_len; ++step) {
    auto res = dec.step(states, hyp.tokens.back());
    const auto it = std::max_element(res.probs.begin(), res.probs.end());
    const int best = static_cast<int>(it - res.probs.begin());
    hyp.tokens.push_back(best);
    hyp.log_prob += detail::safe_log(*it);
    states = std::move(res.states);
    if (best == Vocabulary::kEos) {
      hyp.finished = true;
      break;
    }
  }
  return hyp;
}

// Beam search from BOS. Finished hypotheses are set aside and the final
// answer is the best finished one under length-normalized score, or the best
// live hypothesis at max_len when nothing finished.
template <class T>
Hypothesis beam_search(EnsembleDecoder<T>& dec, int beam_size, int max_len) {
  if (beam_size < 1) throw ContractError("beam_search: beam_size must be >= 1");
  if (max_len < 1) throw ContractError("beam_search: max_len must be >= 1");

  struct Live {
    Hypothesis hyp;
    std::vector<TensorPtr<T>> states;
  };
  std::vector<Live> live;
  live.push_back(Live{Hypothesis{}, dec.initial_states()});
  std::vector<Hypothesis> finished;

  for (int step = 0; step < max_len && !live.empty(); ++step) {
    struct Cand {
      double log_prob;
      int parent;
      int token;
    };
    std::vector<Cand> cands;
    std::vector<typename EnsembleDecoder<T>::StepResult> results(live.size());
    for (std::size_t i = 0; i < live.size(); ++i) {
      results[i] = dec.step(live[i].states, live[i].hyp.tokens.back());
      for (int v = 0; v < dec.target_vocab(); ++v) {
        cands.push_back(Cand{live[i].hyp.log_prob + detail::safe_log(results[i].probs[v]),
                             static_cast<int>(i), v});
      }
    }
    const std::size_t keep = std::min<std::size_t>(beam_size, cands.size());
    std::partial_sort(cands.begin(), cands.begin() + keep, cands.end(),
                      [](const Cand& a, const Cand& b) {
                        if (a.log_prob != b.log_prob) return a.log_prob > b.log_prob;
                        if (a.token != b.token) return a.token < b.token;
                        return a.parent < b.parent;
                      });
    std::vector<Live> next;
    for (std::size_t i = 0; i < keep; ++i) {
      const Cand& c = cands[i];
      Hypothesis hyp = live[c.parent].hyp;
      hyp.tokens.push_back(c.token);
      hyp.log_prob = c.log_prob;
      if (c.token == Vocabulary::kEos) {
        hyp.finished = true;
        finished.push_back(std::move(hyp));
      } else {
        next.push_back(Live{std::move(hyp), results[c.parent].states});
      }
    }
    live = std::move(next);
  }

  const Hypothesis* best = nullptr;
  for (const auto& h : finished) {
    if (!best || h.score() > best->score()) best = &h;
  }
  if (!best) {
    for (const auto& h : live) {
      if (!best || h.hyp.score() > best->score()) best = &h.hyp;
    }
  }
  if (!best) throw ContractError("beam_search: no hypothesis produced");
  return *best;
}

// Convenience wrappers for the common single-model case.
template <class T>
Hypothesis beam_search(const Model<T>& model, const Batch& source, int beam_size, int max_len) {
  EnsembleDecoder<T> dec({&model}, source);
  return beam_search(dec, beam_size, max_len);
}

template <class T>
Hypothesis ensemble_decode(const std::vector<const Model<T>*>& models, const Batch& source,
                           int beam_size, int max_len) {
  EnsembleDecoder<T> dec(models, source);
  return beam_search(dec, beam_size, max_len);
}

}  // namespace mmt
