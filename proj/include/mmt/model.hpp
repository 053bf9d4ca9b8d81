#pragma once

// Parameter store partitioned into the shared encoder parameters and the two
// task-specific decoder partitions, plus deterministic initialization.

#include <cmath>
#include <initializer_list>
#include <string>
#include <vector>

#include "mmt/error.hpp"
#include "mmt/rng.hpp"
#include "mmt/tensor.hpp"

namespace mmt {

enum class ParamGroup { shared, translation, grounding };

inline const char* group_name(ParamGroup g) {
  switch (g) {
    case ParamGroup::shared: return "shared";
    case ParamGroup::translation: return "translation";
    case ParamGroup::grounding: return "grounding";
  }
  return "?";
}

inline ParamGroup group_from_name(const std::string& s) {
  if (s == "shared") return ParamGroup::shared;
  if (s == "translation") return ParamGroup::translation;
  if (s == "grounding") return ParamGroup::grounding;
  throw DataError("unknown parameter group '" + s + "'");
}

// Named parameter tensors in registration order. The order is the canonical
// one for initialization, clipping, checkpoints, and gradient checks.
template <class T>
class ParamStore {
 public:
  struct Entry {
    std::string name;
    ParamGroup group;
    TensorPtr<T> tensor;
  };

  TensorPtr<T> add(const std::string& name, Shape shape, ParamGroup group) {
    if (find(name)) throw ContractError("duplicate parameter name " + name);
    auto t = tensor<T>(std::move(shape), T(0), /*requires_grad=*/true);
    entries_.push_back(Entry{name, group, t});
    return t;
  }

  const std::vector<Entry>& entries() const { return entries_; }

  TensorPtr<T> find(const std::string& name) const {
    for (const auto& e : entries_) {
      if (e.name == name) return e.tensor;
    }
    return nullptr;
  }

  std::vector<TensorPtr<T>> of_groups(std::initializer_list<ParamGroup> groups) const {
    std::vector<TensorPtr<T>> out;
    for (const auto& e : entries_) {
      for (ParamGroup g : groups) {
        if (e.group == g) {
          out.push_back(e.tensor);
          break;
        }
      }
    }
    return out;
  }

  void zero_grads(std::initializer_list<ParamGroup> groups) const {
    for (const auto& t : of_groups(groups)) t->zero_grad();
  }

 private:
  std::vector<Entry> entries_;
};

template <class T>
struct GruWeights {
  TensorPtr<T> Wz, Uz, bz;  // update gate
  TensorPtr<T> Wr, Ur, br;  // reset gate
  TensorPtr<T> Wh, Uh, bh;  // candidate state
};

template <class T>
struct EncoderParams {
  TensorPtr<T> embed;  // [V_src x E]
  GruWeights<T> fwd, bwd;
  TensorPtr<T> h0_fwd, h0_bwd;  // learned initial states, one per direction
};

template <class T>
struct DecoderParams {
  TensorPtr<T> embed;  // [V_tgt x E]
  GruWeights<T> gru;   // input is concat(prev embedding, context), width E + 2H
  TensorPtr<T> Wa;     // [A x H]   attention query projection
  TensorPtr<T> Ua;     // [A x 2H]  attention key projection
  TensorPtr<T> va;     // [1 x A]   attention score vector
  TensorPtr<T> Winit;  // [H x 2H]  initial-state transform of the pooled encoding
  TensorPtr<T> Pemb;   // [R x E]   deep-output projections
  TensorPtr<T> Pstate; // [R x H]
  TensorPtr<T> Pctx;   // [R x 2H]
  TensorPtr<T> Wout;   // [V_tgt x R], one row per target vocabulary entry
};

template <class T>
struct GroundingParams {
  TensorPtr<T> Wvis;  // [V_img x 2H]
};

struct ModelDims {
  int src_vocab = 0;
  int tgt_vocab = 0;
  int embed_dim = 620;
  int hidden_dim = 1000;
  int attn_dim = 1000;
  int readout_dim = 620;
  int image_dim = 2048;

  void validate() const {
    if (src_vocab < 5 || tgt_vocab < 5) {
      throw ConfigError("vocab sizes must cover the 4 specials plus at least one token");
    }
    for (int d : {embed_dim, hidden_dim, attn_dim, readout_dim, image_dim}) {
      if (d < 1) throw ConfigError("model dimensions must be positive");
    }
  }

  bool operator==(const ModelDims&) const = default;
};

template <class T>
struct Model {
  ModelDims dims;
  ParamStore<T> params;
  EncoderParams<T> encoder;
  DecoderParams<T> decoder;
  GroundingParams<T> grounding;

  Model(const ModelDims& d, Rng& rng) : dims(d) {
    dims.validate();
    const int E = dims.embed_dim, H = dims.hidden_dim, A = dims.attn_dim, R = dims.readout_dim;
    const int V = dims.image_dim;
    auto& p = params;
    const auto S = ParamGroup::shared;
    const auto Tr = ParamGroup::translation;
    const auto G = ParamGroup::grounding;

    encoder.embed = p.add("enc.embed", {dims.src_vocab, E}, S);
    encoder.fwd = add_gru("enc.fwd", E, H, S);
    encoder.bwd = add_gru("enc.bwd", E, H, S);
    encoder.h0_fwd = p.add("enc.h0_fwd", {H}, S);
    encoder.h0_bwd = p.add("enc.h0_bwd", {H}, S);

    decoder.embed = p.add("dec.embed", {dims.tgt_vocab, E}, Tr);
    decoder.gru = add_gru("dec.gru", E + 2 * H, H, Tr);
    decoder.Wa = p.add("dec.Wa", {A, H}, Tr);
    decoder.Ua = p.add("dec.Ua", {A, 2 * H}, Tr);
    decoder.va = p.add("dec.va", {1, A}, Tr);
    decoder.Winit = p.add("dec.Winit", {H, 2 * H}, Tr);
    decoder.Pemb = p.add("dec.Pemb", {R, E}, Tr);
    decoder.Pstate = p.add("dec.Pstate", {R, H}, Tr);
    decoder.Pctx = p.add("dec.Pctx", {R, 2 * H}, Tr);
    decoder.Wout = p.add("dec.Wout", {dims.tgt_vocab, R}, Tr);

    grounding.Wvis = p.add("img.Wvis", {V, 2 * H}, G);

    init(rng);
  }

  // Glorot-uniform for matrices, zeros for biases and the learned initial
  // states. Runs in registration order so initialization is a pure function
  // of (dims, seed).
  void init(Rng& rng) {
    for (const auto& e : params.entries()) {
      auto& t = *e.tensor;
      if (t.rank() == 2) {
        const double limit = std::sqrt(6.0 / (t.shape[0] + t.shape[1]));
        for (auto& v : t.values) v = static_cast<T>(rng.uniform(-limit, limit));
      } else {
        for (auto& v : t.values) v = T(0);
      }
    }
  }

 private:
  GruWeights<T> add_gru(const std::string& prefix, int in_dim, int hidden, ParamGroup group) {
    GruWeights<T> w;
    w.Wz = params.add(prefix + ".Wz", {hidden, in_dim}, group);
    w.Uz = params.add(prefix + ".Uz", {hidden, hidden}, group);
    w.bz = params.add(prefix + ".bz", {hidden}, group);
    w.Wr = params.add(prefix + ".Wr", {hidden, in_dim}, group);
    w.Ur = params.add(prefix + ".Ur", {hidden, hidden}, group);
    w.br = params.add(prefix + ".br", {hidden}, group);
    w.Wh = params.add(prefix + ".Wh", {hidden, in_dim}, group);
    w.Uh = params.add(prefix + ".Uh", {hidden, hidden}, group);
    w.bh = params.add(prefix + ".bh", {hidden}, group);
    return w;
  }
};

}  // namespace mmt
