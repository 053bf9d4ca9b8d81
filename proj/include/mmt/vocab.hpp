#pragma once

#include <algorithm>
#include <cstddef>
#include <fstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "mmt/error.hpp"

namespace mmt {

// Token <-> id bijection with four reserved ids. Non-special tokens get ids
// from 4 upward, ordered by descending corpus frequency with lexicographic
// tie-breaking, so construction is deterministic.
class Vocabulary {
 public:
  static constexpr int kPad = 0;
  static constexpr int kBos = 1;
  static constexpr int kEos = 2;
  static constexpr int kUnk = 3;

  Vocabulary() {
    for (const char* s : {"<pad>", "<bos>", "<eos>", "<unk>"}) push(s);
  }

  static Vocabulary build(const std::vector<std::vector<std::string>>& corpus, int min_freq,
                          std::size_t max_size) {
    if (corpus.empty()) throw ContractError("Vocabulary::build: empty corpus");
    std::unordered_map<std::string, long> freq;
    for (const auto& sent : corpus) {
      for (const auto& tok : sent) ++freq[tok];
    }
    std::vector<std::pair<std::string, long>> ranked(freq.begin(), freq.end());
    std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
      if (a.second != b.second) return a.second > b.second;
      return a.first < b.first;
    });
    Vocabulary v;
    for (const auto& [tok, count] : ranked) {
      if (count < min_freq) break;
      if (v.size() - 4 >= max_size) break;
      v.push(tok);
    }
    return v;
  }

  std::size_t size() const { return tokens_.size(); }

  int id(const std::string& token) const {
    auto it = ids_.find(token);
    return it == ids_.end() ? kUnk : it->second;
  }

  bool contains(const std::string& token) const { return ids_.count(token) > 0; }

  const std::string& token(int id) const {
    if (id < 0 || id >= static_cast<int>(tokens_.size())) {
      throw ContractError("Vocabulary::token: id " + std::to_string(id) + " out of range");
    }
    return tokens_[id];
  }

  std::vector<int> encode(const std::vector<std::string>& tokens) const {
    std::vector<int> out;
    out.reserve(tokens.size());
    for (const auto& t : tokens) out.push_back(id(t));
    return out;
  }

  std::vector<std::string> decode(const std::vector<int>& ids) const {
    std::vector<std::string> out;
    out.reserve(ids.size());
    for (int i : ids) out.push_back(token(i));
    return out;
  }

  // One token per line; line k holds the token for id k+4.
  void save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write vocabulary file " + path);
    for (std::size_t i = 4; i < tokens_.size(); ++i) out << tokens_[i] << '\n';
  }

  static Vocabulary load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open vocabulary file " + path);
    Vocabulary v;
    std::string line;
    while (std::getline(in, line)) {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (line.empty()) throw DataError(path + ": empty vocabulary line " + std::to_string(v.size() - 3));
      if (v.ids_.count(line)) throw DataError(path + ": duplicate token '" + line + "'");
      v.push(line);
    }
    return v;
  }

 private:
  void push(const std::string& token) {
    ids_.emplace(token, static_cast<int>(tokens_.size()));
    tokens_.push_back(token);
  }

  std::unordered_map<std::string, int> ids_;
  std::vector<std::string> tokens_;
};

}  // namespace mmt
