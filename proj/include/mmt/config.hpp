#pragma once

// Run configuration: a flat JSON file whose keys map one-to-one onto CLI
// flags. Everything referenced by a command is validated up front.

#include <filesystem>
#include <fstream>
#include <string>

#include <json.hpp>

#include "mmt/error.hpp"
#include "mmt/model.hpp"
#include "mmt/trainer.hpp"

namespace mmt {

struct RunConfig {
  TrainConfig train;
  ModelDims dims;  // vocab sizes filled in after vocabularies are built

  // Data paths.
  std::string train_src, train_tgt;  // parallel text
  std::string val_src, val_tgt;      // validation parallel text
  std::string image_src, image_vectors;  // described images
  std::string src_vocab, tgt_vocab;  // optional prebuilt vocabulary files

  // Vocabulary construction.
  int max_vocab = 10000;
  int min_freq = 1;
  double oov_threshold = 0.10;

  std::string run_dir;  // override for the output directory

  static RunConfig from_json(const nlohmann::json& j);
  static RunConfig from_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file " + path);
    nlohmann::json j;
    try {
      in >> j;
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(path + ": invalid JSON: " + e.what());
    }
    return from_json(j);
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["w"] = train.mix_weight;
    j["batch_size"] = train.batch_size;
    j["margin"] = train.margin;
    j["clip_norm"] = train.clip_norm;
    j["dropout"] = train.dropout;
    j["val_beam"] = train.val_beam;
    j["patience"] = train.patience;
    j["max_epochs"] = train.max_epochs;
    j["max_decode_len"] = train.max_decode_len;
    j["smooth_val_bleu"] = train.smooth_val_bleu;
    j["seed"] = train.seed;
    j["lr"] = train.adam.lr;
    j["embed_dim"] = dims.embed_dim;
    j["hidden_dim"] = dims.hidden_dim;
    j["attn_dim"] = dims.attn_dim;
    j["readout_dim"] = dims.readout_dim;
    j["image_dim"] = dims.image_dim;
    j["train_src"] = train_src;
    j["train_tgt"] = train_tgt;
    j["val_src"] = val_src;
    j["val_tgt"] = val_tgt;
    j["image_src"] = image_src;
    j["image_vectors"] = image_vectors;
    j["src_vocab"] = src_vocab;
    j["tgt_vocab"] = tgt_vocab;
    j["max_vocab"] = max_vocab;
    j["min_freq"] = min_freq;
    j["oov_threshold"] = oov_threshold;
    j["run_dir"] = run_dir;
    return j;
  }
};

inline RunConfig RunConfig::from_json(const nlohmann::json& j) {
  RunConfig cfg;
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    if (key == "w") cfg.train.mix_weight = value.get<double>();
    else if (key == "batch_size") cfg.train.batch_size = value.get<int>();
    else if (key == "margin") cfg.train.margin = value.get<double>();
    else if (key == "clip_norm") cfg.train.clip_norm = value.get<double>();
    else if (key == "dropout") cfg.train.dropout = value.get<double>();
    else if (key == "val_beam") cfg.train.val_beam = value.get<int>();
    else if (key == "patience") cfg.train.patience = value.get<int>();
    else if (key == "max_epochs") cfg.train.max_epochs = value.get<int>();
    else if (key == "max_decode_len") cfg.train.max_decode_len = value.get<int>();
    else if (key == "smooth_val_bleu") cfg.train.smooth_val_bleu = value.get<bool>();
    else if (key == "seed") cfg.train.seed = value.get<std::uint64_t>();
    else if (key == "lr") cfg.train.adam.lr = value.get<double>();
    else if (key == "embed_dim") cfg.dims.embed_dim = value.get<int>();
    else if (key == "hidden_dim") cfg.dims.hidden_dim = value.get<int>();
    else if (key == "attn_dim") cfg.dims.attn_dim = value.get<int>();
    else if (key == "readout_dim") cfg.dims.readout_dim = value.get<int>();
    else if (key == "image_dim") cfg.dims.image_dim = value.get<int>();
    else if (key == "train_src") cfg.train_src = value.get<std::string>();
    else if (key == "train_tgt") cfg.train_tgt = value.get<std::string>();
    else if (key == "val_src") cfg.val_src = value.get<std::string>();
    else if (key == "val_tgt") cfg.val_tgt = value.get<std::string>();
    else if (key == "image_src") cfg.image_src = value.get<std::string>();
    else if (key == "image_vectors") cfg.image_vectors = value.get<std::string>();
    else if (key == "src_vocab") cfg.src_vocab = value.get<std::string>();
    else if (key == "tgt_vocab") cfg.tgt_vocab = value.get<std::string>();
    else if (key == "max_vocab") cfg.max_vocab = value.get<int>();
    else if (key == "min_freq") cfg.min_freq = value.get<int>();
    else if (key == "oov_threshold") cfg.oov_threshold = value.get<double>();
    else if (key == "run_dir") cfg.run_dir = value.get<std::string>();
    else throw ConfigError("unknown config key '" + key + "'");
  }
  return cfg;
}

inline void require_file(const std::string& path, const std::string& what) {
  if (path.empty()) throw ConfigError(what + " path is not set");
  if (!std::filesystem::exists(path)) throw ConfigError(what + " file does not exist: " + path);
}

}  // namespace mmt
