#pragma once

// Corpus translation with one model or an ensemble of checkpoints.

#include <iostream>
#include <string>
#include <vector>

#include "mmt/data.hpp"
#include "mmt/decoder.hpp"
#include "mmt/model.hpp"
#include "mmt/vocab.hpp"

namespace mmt {

template <class T>
std::string detokenize_hypothesis(const Hypothesis& hyp, const Vocabulary& tgt_vocab) {
  std::string out;
  for (int id : hyp.emitted_tokens()) {
    if (id == Vocabulary::kEos) break;
    if (!out.empty()) out += ' ';
    out += tgt_vocab.token(id);
  }
  return out;
}

// One hypothesis line per input line, deterministic given the checkpoints.
// Lines that tokenize to nothing come back empty (with a warning).
template <class T>
std::vector<std::string> translate_lines(const std::vector<const Model<T>*>& models,
                                         const Vocabulary& src_vocab, const Vocabulary& tgt_vocab,
                                         const std::vector<std::string>& lines, int beam,
                                         int max_len, std::ostream* warnings = nullptr) {
  if (models.empty()) throw ContractError("translate: no models");
  for (const auto* m : models) {
    if (m->dims.tgt_vocab != static_cast<int>(tgt_vocab.size())) {
      throw ContractError("translate: model target vocab " + std::to_string(m->dims.tgt_vocab) +
                          " does not match vocabulary of size " + std::to_string(tgt_vocab.size()));
    }
    if (m->dims.src_vocab != static_cast<int>(src_vocab.size())) {
      throw ContractError("translate: model source vocab " + std::to_string(m->dims.src_vocab) +
                          " does not match vocabulary of size " + std::to_string(src_vocab.size()));
    }
  }
  std::vector<std::string> out;
  out.reserve(lines.size());
  for (std::size_t i = 0; i < lines.size(); ++i) {
    const auto tokens = normalize_tokenize(lines[i]);
    if (tokens.empty()) {
      if (warnings) *warnings << "line " << i + 1 << ": empty after tokenization, emitting empty hypothesis\n";
      out.emplace_back();
      continue;
    }
    EnsembleDecoder<T> dec(models, single_source_batch(src_vocab.encode(tokens)));
    out.push_back(detokenize_hypothesis<T>(beam_search(dec, beam, max_len), tgt_vocab));
  }
  return out;
}

}  // namespace mmt
