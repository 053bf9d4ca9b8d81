#pragma once

// Corpus ingestion: tokenization, image-vector files, OOV filtering, and
// padded minibatch assembly.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "mmt/error.hpp"
#include "mmt/rng.hpp"
#include "mmt/vocab.hpp"

namespace mmt {

namespace detail {

inline void append_utf8(std::string& out, std::uint32_t cp) {
  if (cp < 0x80) {
    out += static_cast<char>(cp);
  } else if (cp < 0x800) {
    out += static_cast<char>(0xC0 | (cp >> 6));
    out += static_cast<char>(0x80 | (cp & 0x3F));
  } else if (cp < 0x10000) {
    out += static_cast<char>(0xE0 | (cp >> 12));
    out += static_cast<char>(0x80 | ((cp >> 6) & 0x3F));
    out += static_cast<char>(0x80 | (cp & 0x3F));
  } else {
    out += static_cast<char>(0xF0 | (cp >> 18));
    out += static_cast<char>(0x80 | ((cp >> 12) & 0x3F));
    out += static_cast<char>(0x80 | ((cp >> 6) & 0x3F));
    out += static_cast<char>(0x80 | (cp & 0x3F));
  }
}

// Decodes the codepoint at byte offset i, advancing i. Malformed bytes are
// passed through one at a time instead of throwing, so arbitrary input never
// crashes the tokenizer.
inline std::uint32_t next_codepoint(std::string_view s, std::size_t& i) {
  const unsigned char b0 = s[i];
  std::size_t len = 1;
  std::uint32_t cp = b0;
  if (b0 >= 0xF0) {
    len = 4;
    cp = b0 & 0x07;
  } else if (b0 >= 0xE0) {
    len = 3;
    cp = b0 & 0x0F;
  } else if (b0 >= 0xC0) {
    len = 2;
    cp = b0 & 0x1F;
  }
  if (len == 1 || i + len > s.size()) {
    ++i;
    return b0;
  }
  for (std::size_t k = 1; k < len; ++k) {
    const unsigned char bk = s[i + k];
    if ((bk & 0xC0) != 0x80) {
      ++i;
      return b0;
    }
    cp = (cp << 6) | (bk & 0x3F);
  }
  i += len;
  return cp;
}

inline bool is_space_cp(std::uint32_t cp) {
  return cp == ' ' || cp == '\t' || cp == '\n' || cp == '\r' || cp == '\v' || cp == '\f' ||
         cp == 0xA0 || cp == 0x3000;
}

inline bool is_punct_cp(std::uint32_t cp) {
  if (cp < 0x80) {
    return (cp >= 0x21 && cp <= 0x2F) || (cp >= 0x3A && cp <= 0x40) ||
           (cp >= 0x5B && cp <= 0x60) || (cp >= 0x7B && cp <= 0x7E);
  }
  switch (cp) {
    case 0xA1:   // inverted exclamation
    case 0xAB:   // left guillemet
    case 0xB7:   // middle dot
    case 0xBB:   // right guillemet
    case 0xBF:   // inverted question mark
    case 0x2013: // en dash
    case 0x2014: // em dash
    case 0x2026: // ellipsis
      return true;
    default:
      return (cp >= 0x2018 && cp <= 0x201F);  // curly quotes
  }
}

inline std::uint32_t lower_cp(std::uint32_t cp) {
  if (cp >= 'A' && cp <= 'Z') return cp + 0x20;
  // Latin-1 supplement covers the German and French letters we care about.
  if (cp >= 0xC0 && cp <= 0xDE && cp != 0xD7) return cp + 0x20;
  return cp;
}

}  // namespace detail

// Lowercases and splits a line into tokens: whitespace separates, and each
// punctuation codepoint becomes its own token. Returns an empty vector for
// lines with no content; callers skip those with a warning.
inline std::vector<std::string> normalize_tokenize(std::string_view line) {
  std::vector<std::string> tokens;
  std::string word;
  std::size_t i = 0;
  while (i < line.size()) {
    const std::uint32_t cp = detail::next_codepoint(line, i);
    if (detail::is_space_cp(cp)) {
      if (!word.empty()) {
        tokens.push_back(std::move(word));
        word.clear();
      }
    } else if (detail::is_punct_cp(cp)) {
      if (!word.empty()) {
        tokens.push_back(std::move(word));
        word.clear();
      }
      std::string p;
      detail::append_utf8(p, cp);
      tokens.push_back(std::move(p));
    } else {
      detail::append_utf8(word, detail::lower_cp(cp));
    }
  }
  if (!word.empty()) tokens.push_back(std::move(word));
  return tokens;
}

// One training instance. target and image are optional, but at least one
// must be present; target sequences end with EOS.
struct TrainingExample {
  std::vector<int> source;
  std::vector<int> target;
  std::vector<float> image;

  bool has_target() const { return !target.empty(); }
  bool has_image() const { return !image.empty(); }
};

// Keep iff the UNK fraction of the source is not strictly above threshold.
inline bool passes_oov_filter(const std::vector<int>& source_ids, double threshold) {
  if (source_ids.empty()) return false;
  long unk = 0;
  for (int id : source_ids) {
    if (id == Vocabulary::kUnk) ++unk;
  }
  return static_cast<double>(unk) / static_cast<double>(source_ids.size()) <= threshold;
}

// ---------------------------------------------------------------------------
// Image-vector files
// ---------------------------------------------------------------------------

struct ImageMatrix {
  int count = 0;
  int dim = 0;
  std::vector<float> values;  // row-major [count x dim]

  const float* row(int i) const { return values.data() + static_cast<std::size_t>(i) * dim; }
};

inline constexpr char kImageMagic[4] = {'I', 'M', 'G', 'V'};

inline void save_image_vectors_binary(const std::string& path, const ImageMatrix& mat) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write vector file " + path);
  out.write(kImageMagic, 4);
  const std::uint32_t count = static_cast<std::uint32_t>(mat.count);
  const std::uint32_t dim = static_cast<std::uint32_t>(mat.dim);
  out.write(reinterpret_cast<const char*>(&count), 4);
  out.write(reinterpret_cast<const char*>(&dim), 4);
  out.write(reinterpret_cast<const char*>(mat.values.data()),
            static_cast<std::streamsize>(mat.values.size() * sizeof(float)));
}

namespace detail {

inline ImageMatrix load_image_vectors_binary(const std::string& path, std::ifstream& in) {
  in.seekg(0, std::ios::end);
  const std::int64_t file_size = in.tellg();
  in.seekg(4, std::ios::beg);
  std::uint32_t count = 0, dim = 0;
  in.read(reinterpret_cast<char*>(&count), 4);
  in.read(reinterpret_cast<char*>(&dim), 4);
  if (!in) throw DataError(path + ": truncated header, need 12 bytes");
  if (count == 0 || dim == 0) {
    throw DataError(path + ": header declares count=" + std::to_string(count) + " dim=" +
                    std::to_string(dim));
  }
  const std::int64_t expected = 12 + static_cast<std::int64_t>(count) * dim * 4;
  if (file_size != expected) {
    throw DataError(path + ": expected " + std::to_string(expected) + " bytes for count=" +
                    std::to_string(count) + " dim=" + std::to_string(dim) + ", file has " +
                    std::to_string(file_size));
  }
  ImageMatrix mat;
  mat.count = static_cast<int>(count);
  mat.dim = static_cast<int>(dim);
  mat.values.resize(static_cast<std::size_t>(count) * dim);
  in.read(reinterpret_cast<char*>(mat.values.data()),
          static_cast<std::streamsize>(mat.values.size() * sizeof(float)));
  if (!in) throw DataError(path + ": payload read failed");
  for (std::size_t i = 0; i < mat.values.size(); ++i) {
    if (!std::isfinite(mat.values[i])) {
      throw DataError(path + ": non-finite value at element " + std::to_string(i));
    }
  }
  return mat;
}

inline ImageMatrix load_image_vectors_tsv(const std::string& path, std::ifstream& in) {
  ImageMatrix mat;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) throw DataError(path + ": empty row at line " + std::to_string(line_no));
    std::vector<float> row;
    const char* p = line.c_str();
    const char* end = p + line.size();
    while (p < end) {
      char* next = nullptr;
      const double v = std::strtod(p, &next);
      if (next == p) {
        throw DataError(path + ": line " + std::to_string(line_no) + ": cannot parse '" +
                        std::string(p) + "'");
      }
      if (!std::isfinite(v)) {
        throw DataError(path + ": non-finite value at line " + std::to_string(line_no));
      }
      row.push_back(static_cast<float>(v));
      p = next;
      while (p < end && (*p == '\t' || *p == ' ')) ++p;
    }
    if (mat.dim == 0) {
      mat.dim = static_cast<int>(row.size());
    } else if (static_cast<int>(row.size()) != mat.dim) {
      throw DataError(path + ": line " + std::to_string(line_no) + ": expected " +
                      std::to_string(mat.dim) + " columns, got " + std::to_string(row.size()));
    }
    mat.values.insert(mat.values.end(), row.begin(), row.end());
    ++mat.count;
  }
  if (mat.count == 0) throw DataError(path + ": no vector rows");
  return mat;
}

}  // namespace detail

// Loads a vector file, binary ("IMGV" magic) or TSV, as-is. Row order
// matches the companion sentence file line order. Normalization is applied
// later, when examples are assembled, so the raw file contents round-trip.
inline ImageMatrix load_image_vectors(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open vector file " + path);
  char magic[4] = {0, 0, 0, 0};
  in.read(magic, 4);
  if (in.gcount() == 4 && std::memcmp(magic, kImageMagic, 4) == 0) {
    return detail::load_image_vectors_binary(path, in);
  }
  in.clear();
  in.seekg(0, std::ios::beg);
  return detail::load_image_vectors_tsv(path, in);
}

// ---------------------------------------------------------------------------
// Batching
// ---------------------------------------------------------------------------

// A padded minibatch. Mask entries are 1 exactly where a real token sits;
// padding uses the PAD id. All rows come from one task's dataset, so either
// every row has a target or every row has an image.
struct Batch {
  int size = 0;     // B
  int src_len = 0;  // N_max
  std::vector<int> src;         // B x N_max
  std::vector<float> src_mask;  // B x N_max

  int tgt_len = 0;  // M_max, 0 when the batch carries no targets
  std::vector<int> tgt;
  std::vector<float> tgt_mask;

  int image_dim = 0;  // 0 when the batch carries no images
  std::vector<float> image;  // B x image_dim

  bool has_target() const { return tgt_len > 0; }
  bool has_image() const { return image_dim > 0; }

  std::vector<int> src_col(int t) const {
    std::vector<int> out(size);
    for (int r = 0; r < size; ++r) out[r] = src[static_cast<std::size_t>(r) * src_len + t];
    return out;
  }
  std::vector<int> tgt_col(int t) const {
    std::vector<int> out(size);
    for (int r = 0; r < size; ++r) out[r] = tgt[static_cast<std::size_t>(r) * tgt_len + t];
    return out;
  }
};

namespace detail {

inline Batch assemble_batch(const std::vector<TrainingExample>& data,
                            const std::vector<std::size_t>& idx) {
  Batch b;
  b.size = static_cast<int>(idx.size());
  const bool with_target = data[idx[0]].has_target();
  const bool with_image = data[idx[0]].has_image();
  for (std::size_t i : idx) {
    const auto& ex = data[i];
    if (ex.source.empty()) throw ContractError("batch: empty source sequence");
    if (ex.has_target() != with_target || ex.has_image() != with_image) {
      throw ContractError("batch: examples mix dataset shapes");
    }
    b.src_len = std::max(b.src_len, static_cast<int>(ex.source.size()));
    if (with_target) b.tgt_len = std::max(b.tgt_len, static_cast<int>(ex.target.size()));
    if (with_image) b.image_dim = static_cast<int>(ex.image.size());
  }
  b.src.assign(static_cast<std::size_t>(b.size) * b.src_len, Vocabulary::kPad);
  b.src_mask.assign(b.src.size(), 0.0f);
  if (with_target) {
    b.tgt.assign(static_cast<std::size_t>(b.size) * b.tgt_len, Vocabulary::kPad);
    b.tgt_mask.assign(b.tgt.size(), 0.0f);
  }
  if (with_image) b.image.resize(static_cast<std::size_t>(b.size) * b.image_dim);
  for (int r = 0; r < b.size; ++r) {
    const auto& ex = data[idx[r]];
    for (std::size_t t = 0; t < ex.source.size(); ++t) {
      b.src[static_cast<std::size_t>(r) * b.src_len + t] = ex.source[t];
      b.src_mask[static_cast<std::size_t>(r) * b.src_len + t] = 1.0f;
    }
    if (with_target) {
      for (std::size_t t = 0; t < ex.target.size(); ++t) {
        b.tgt[static_cast<std::size_t>(r) * b.tgt_len + t] = ex.target[t];
        b.tgt_mask[static_cast<std::size_t>(r) * b.tgt_len + t] = 1.0f;
      }
      if (ex.image.size() != 0 && static_cast<int>(ex.image.size()) != b.image_dim) {
        throw ContractError("batch: inconsistent image dimension");
      }
    }
    if (with_image) {
      std::copy(ex.image.begin(), ex.image.end(),
                b.image.begin() + static_cast<std::size_t>(r) * b.image_dim);
    }
  }
  return b;
}

}  // namespace detail

// One epoch of padded batches: shuffle with the given seed, sort by source
// length inside chunks of 20 * batch_size to cut padding waste, emit the
// final partial batch. Every example appears in exactly one batch.
inline std::vector<Batch> make_batches(const std::vector<TrainingExample>& data, int batch_size,
                                       std::uint64_t seed) {
  if (batch_size < 1) throw ContractError("make_batches: batch_size must be >= 1");
  if (data.empty()) throw ContractError("make_batches: empty dataset");
  std::vector<std::size_t> order(data.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(seed);
  rng.shuffle(order);
  const std::size_t chunk = static_cast<std::size_t>(20) * batch_size;
  std::vector<Batch> batches;
  for (std::size_t begin = 0; begin < order.size(); begin += chunk) {
    const std::size_t end = std::min(begin + chunk, order.size());
    std::stable_sort(order.begin() + begin, order.begin() + end,
                     [&](std::size_t a, std::size_t b) {
                       return data[a].source.size() < data[b].source.size();
                     });
    for (std::size_t b0 = begin; b0 < end; b0 += batch_size) {
      const std::size_t b1 = std::min(b0 + batch_size, end);
      batches.push_back(detail::assemble_batch(
          data, std::vector<std::size_t>(order.begin() + b0, order.begin() + b1)));
    }
  }
  return batches;
}

// Builds a one-sentence batch from raw source ids, for decoding.
inline Batch single_source_batch(const std::vector<int>& ids) {
  if (ids.empty()) throw ContractError("single_source_batch: empty source");
  Batch b;
  b.size = 1;
  b.src_len = static_cast<int>(ids.size());
  b.src = ids;
  b.src_mask.assign(ids.size(), 1.0f);
  return b;
}

struct StreamPos {
  std::int64_t epoch = 0;
  std::int64_t cursor = 0;
};

// Cycles over a dataset epoch after epoch, reshuffling each wrap with a seed
// derived from (base seed, epoch index). pos()/seek() expose enough state to
// resume the exact batch sequence from a checkpoint.
class BatchStream {
 public:
  BatchStream(const std::vector<TrainingExample>* data, int batch_size, std::uint64_t seed)
      : data_(data), batch_size_(batch_size), seed_(seed) {
    if (!data_ || data_->empty()) throw ContractError("BatchStream: empty dataset");
    build();
  }

  // Returns the next batch; *last_of_epoch is set when the returned batch
  // closes out the current epoch.
  const Batch& next(bool* last_of_epoch = nullptr) {
    if (pos_.cursor >= static_cast<std::int64_t>(batches_.size())) {
      ++pos_.epoch;
      pos_.cursor = 0;
      build();
    }
    const Batch& b = batches_[pos_.cursor++];
    if (last_of_epoch) {
      *last_of_epoch = pos_.cursor == static_cast<std::int64_t>(batches_.size());
    }
    return b;
  }

  std::int64_t batches_per_epoch() const { return static_cast<std::int64_t>(batches_.size()); }
  const StreamPos& pos() const { return pos_; }

  void seek(const StreamPos& p) {
    pos_ = p;
    build();
    if (pos_.cursor < 0 || pos_.cursor > static_cast<std::int64_t>(batches_.size())) {
      throw ContractError("BatchStream::seek: cursor out of range");
    }
  }

 private:
  void build() {
    batches_ = make_batches(*data_, batch_size_,
                            mix_seed(seed_, static_cast<std::uint64_t>(pos_.epoch)));
  }

  const std::vector<TrainingExample>* data_;
  int batch_size_;
  std::uint64_t seed_;
  StreamPos pos_;
  std::vector<Batch> batches_;
};

// ---------------------------------------------------------------------------
// Corpus loading
// ---------------------------------------------------------------------------

struct CorpusStats {
  long total = 0;
  long kept = 0;
  long skipped_empty = 0;
  long dropped_oov = 0;
};

inline std::vector<std::string> read_lines(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path);
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(line);
  }
  return lines;
}

// Aligned parallel text -> encoded examples. Empty-after-tokenization lines
// are skipped (counted in stats); sources whose UNK share exceeds
// oov_threshold are dropped. Targets get EOS appended.
inline std::vector<TrainingExample> load_parallel_corpus(const std::string& src_path,
                                                         const std::string& tgt_path,
                                                         const Vocabulary& src_vocab,
                                                         const Vocabulary& tgt_vocab,
                                                         double oov_threshold,
                                                         CorpusStats* stats = nullptr) {
  const auto src_lines = read_lines(src_path);
  const auto tgt_lines = read_lines(tgt_path);
  if (src_lines.size() != tgt_lines.size()) {
    throw DataError(src_path + " has " + std::to_string(src_lines.size()) + " lines but " +
                    tgt_path + " has " + std::to_string(tgt_lines.size()));
  }
  CorpusStats local;
  std::vector<TrainingExample> out;
  for (std::size_t i = 0; i < src_lines.size(); ++i) {
    ++local.total;
    const auto src_toks = normalize_tokenize(src_lines[i]);
    const auto tgt_toks = normalize_tokenize(tgt_lines[i]);
    if (src_toks.empty() || tgt_toks.empty()) {
      ++local.skipped_empty;
      continue;
    }
    TrainingExample ex;
    ex.source = src_vocab.encode(src_toks);
    ex.target = tgt_vocab.encode(tgt_toks);
    ex.target.push_back(Vocabulary::kEos);
    if (!passes_oov_filter(ex.source, oov_threshold)) {
      ++local.dropped_oov;
      continue;
    }
    ++local.kept;
    out.push_back(std::move(ex));
  }
  if (stats) *stats = local;
  return out;
}

// Described images -> encoded examples with L2-normalized image vectors.
inline std::vector<TrainingExample> load_described_corpus(const std::string& sent_path,
                                                          const std::string& vec_path,
                                                          const Vocabulary& src_vocab,
                                                          double oov_threshold,
                                                          CorpusStats* stats = nullptr) {
  const auto lines = read_lines(sent_path);
  const ImageMatrix mat = load_image_vectors(vec_path);
  if (static_cast<std::size_t>(mat.count) != lines.size()) {
    throw DataError(vec_path + " has " + std::to_string(mat.count) + " rows but " + sent_path +
                    " has " + std::to_string(lines.size()) + " lines");
  }
  CorpusStats local;
  std::vector<TrainingExample> out;
  for (std::size_t i = 0; i < lines.size(); ++i) {
    ++local.total;
    const auto toks = normalize_tokenize(lines[i]);
    if (toks.empty()) {
      ++local.skipped_empty;
      continue;
    }
    TrainingExample ex;
    ex.source = src_vocab.encode(toks);
    if (!passes_oov_filter(ex.source, oov_threshold)) {
      ++local.dropped_oov;
      continue;
    }
    ex.image.assign(mat.row(static_cast<int>(i)), mat.row(static_cast<int>(i)) + mat.dim);
    double sq = 0;
    for (float v : ex.image) sq += static_cast<double>(v) * v;
    const double norm = std::sqrt(sq);
    if (!(norm > 1e-30)) {
      throw DataError(vec_path + ": zero-norm image vector at row " + std::to_string(i));
    }
    for (float& v : ex.image) v = static_cast<float>(v / norm);
    ++local.kept;
    out.push_back(std::move(ex));
  }
  if (stats) *stats = local;
  return out;
}

}  // namespace mmt
