#pragma once

// Shared bidirectional GRU encoder over padded batches.

#include <vector>

#include "mmt/data.hpp"
#include "mmt/model.hpp"
#include "mmt/rng.hpp"
#include "mmt/tensor.hpp"

namespace mmt {

// One GRU step for a whole batch; rows are independent examples.
//   z = sigmoid(Wz x + Uz hg + bz)
//   r = sigmoid(Wr x + Ur hg + br)
//   hcand = tanh(Wh x + Uh (r . hg) + bh)
//   h = (1 - z) . h_prev + z . hcand
// hg is the state fed to the gates; it differs from h_prev only under
// variational recurrent dropout. The convex blend always uses the raw state.
template <class T>
TensorPtr<T> gru_cell(Tape<T>& tape, const GruWeights<T>& w, const TensorPtr<T>& h_prev,
                      const TensorPtr<T>& x, const TensorPtr<T>* h_gates = nullptr) {
  const TensorPtr<T>& hg = h_gates ? *h_gates : h_prev;
  auto z = sigmoid(tape, add_row(tape, add(tape, linear(tape, x, w.Wz), linear(tape, hg, w.Uz)), w.bz));
  auto r = sigmoid(tape, add_row(tape, add(tape, linear(tape, x, w.Wr), linear(tape, hg, w.Ur)), w.br));
  auto cand = mmt::tanh(
      tape, add_row(tape, add(tape, linear(tape, x, w.Wh), linear(tape, mul(tape, r, hg), w.Uh)), w.bh));
  // (1 - z) . h_prev + z . cand, written as h_prev + z . (cand - h_prev).
  return add(tape, h_prev, mul(tape, z, sub(tape, cand, h_prev)));
}

// Variational dropout masks, one per batch: a single mask for embedding rows
// shared across time steps, and one recurrent mask per direction. Values are
// 0 or 1/(1-rate) (inverted dropout).
template <class T>
struct EncoderDropout {
  TensorPtr<T> embed;     // [B x E]
  TensorPtr<T> rec_fwd;   // [B x H]
  TensorPtr<T> rec_bwd;   // [B x H]
};

template <class T>
TensorPtr<T> dropout_mask(Rng& rng, int rows, int cols, double rate) {
  auto m = tensor<T>({rows, cols});
  const T keep = static_cast<T>(1.0 / (1.0 - rate));
  for (auto& v : m->values) v = rng.u01() < rate ? T(0) : keep;
  return m;
}

template <class T>
EncoderDropout<T> make_encoder_dropout(Rng& rng, int batch, const ModelDims& dims, double rate) {
  EncoderDropout<T> d;
  d.embed = dropout_mask<T>(rng, batch, dims.embed_dim, rate);
  d.rec_fwd = dropout_mask<T>(rng, batch, dims.hidden_dim, rate);
  d.rec_bwd = dropout_mask<T>(rng, batch, dims.hidden_dim, rate);
  return d;
}

// Per-position encoder output for one batch. Rows at masked positions exist
// but every consumer weighs them by the mask, so they never influence a
// result downstream.
template <class T>
struct Encoded {
  int batch = 0;
  int len = 0;
  std::vector<TensorPtr<T>> states;     // len entries of [B x 2H]
  std::vector<TensorPtr<T>> mask_cols;  // len entries of [B], constants
  TensorPtr<T> mask_matrix;             // [B x len], constant
  TensorPtr<T> pooled;                  // [B x 2H] mean over unmasked positions
};

// Runs both directions from their learned initial states. At masked
// positions the hidden state is carried through unchanged, which keeps
// padding inert in both directions.
template <class T>
Encoded<T> encode(Tape<T>& tape, const EncoderParams<T>& p, const Batch& batch,
                  const EncoderDropout<T>* drop = nullptr) {
  if (batch.size < 1 || batch.src_len < 1) throw ContractError("encode: empty batch");
  const int B = batch.size, N = batch.src_len;

  Encoded<T> enc;
  enc.batch = B;
  enc.len = N;
  enc.mask_matrix = tensor<T>({B, N});
  for (std::size_t i = 0; i < batch.src_mask.size(); ++i) {
    enc.mask_matrix->values[i] = static_cast<T>(batch.src_mask[i]);
  }
  std::vector<TensorPtr<T>> keep(N), carry(N);
  for (int t = 0; t < N; ++t) {
    auto m = tensor<T>({B});
    auto inv = tensor<T>({B});
    for (int r = 0; r < B; ++r) {
      m->values[r] = static_cast<T>(batch.src_mask[static_cast<std::size_t>(r) * N + t]);
      inv->values[r] = T(1) - m->values[r];
    }
    keep[t] = m;
    carry[t] = inv;
  }
  enc.mask_cols = keep;

  std::vector<TensorPtr<T>> emb(N);
  for (int t = 0; t < N; ++t) {
    emb[t] = lookup_rows(tape, p.embed, batch.src_col(t));
    if (drop) emb[t] = mul(tape, emb[t], drop->embed);
  }

  std::vector<TensorPtr<T>> fwd(N), bwd(N);
  auto h = repeat_row(tape, p.h0_fwd, B);
  for (int t = 0; t < N; ++t) {
    TensorPtr<T> hg = drop ? mul(tape, h, drop->rec_fwd) : h;
    auto next = gru_cell(tape, p.fwd, h, emb[t], &hg);
    h = add(tape, scale_rows(tape, next, keep[t]), scale_rows(tape, h, carry[t]));
    fwd[t] = h;
  }
  h = repeat_row(tape, p.h0_bwd, B);
  for (int t = N - 1; t >= 0; --t) {
    TensorPtr<T> hg = drop ? mul(tape, h, drop->rec_bwd) : h;
    auto next = gru_cell(tape, p.bwd, h, emb[t], &hg);
    h = add(tape, scale_rows(tape, next, keep[t]), scale_rows(tape, h, carry[t]));
    bwd[t] = h;
  }

  enc.states.resize(N);
  for (int t = 0; t < N; ++t) enc.states[t] = concat_cols(tape, {fwd[t], bwd[t]});

  // Masked mean over positions; each row divides by its own true length.
  auto inv_len = tensor<T>({B});
  for (int r = 0; r < B; ++r) {
    T count = T(0);
    for (int t = 0; t < N; ++t) count += keep[t]->values[r];
    if (count == T(0)) throw DegenerateError("encode: row " + std::to_string(r) + " is all padding");
    inv_len->values[r] = T(1) / count;
  }
  TensorPtr<T> acc = scale_rows(tape, enc.states[0], keep[0]);
  for (int t = 1; t < N; ++t) {
    acc = add(tape, acc, scale_rows(tape, enc.states[t], keep[t]));
  }
  enc.pooled = scale_rows(tape, acc, inv_len);
  return enc;
}

}  // namespace mmt
