#pragma once

// Checkpoint files: one JSON manifest line (tensor names, shapes, byte
// offsets, dtype tag, optimizer and generator state) followed by the
// concatenated little-endian payload. Save/load round-trips bit-exactly.

#include <bit>
#include <cstdint>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "mmt/data.hpp"
#include "mmt/error.hpp"
#include "mmt/model.hpp"
#include "mmt/optim.hpp"

namespace mmt {

static_assert(std::endian::native == std::endian::little,
              "checkpoint payload is little-endian");

// Trainer progress carried inside a checkpoint so training resumes with
// identical subsequent updates.
struct TrainerSnapshot {
  std::int64_t epoch = 0;
  std::int64_t step = 0;
  std::int64_t translation_steps = 0;
  double best_bleu = -1;
  std::int64_t stale_evals = 0;
  std::string rng_state;
  StreamPos text_stream;
  StreamPos image_stream;
  bool has_text_stream = false;
  bool has_image_stream = false;
};

struct CheckpointHeader {
  std::string dtype;
  ModelDims dims;
  bool has_optimizer = false;
  bool has_trainer = false;
};

namespace detail {

template <class T>
constexpr const char* dtype_tag() {
  if constexpr (sizeof(T) == 4) {
    return "f32";
  } else {
    return "f64";
  }
}

inline nlohmann::json dims_to_json(const ModelDims& d) {
  return {{"src_vocab", d.src_vocab},   {"tgt_vocab", d.tgt_vocab},
          {"embed_dim", d.embed_dim},   {"hidden_dim", d.hidden_dim},
          {"attn_dim", d.attn_dim},     {"readout_dim", d.readout_dim},
          {"image_dim", d.image_dim}};
}

inline ModelDims dims_from_json(const nlohmann::json& j) {
  ModelDims d;
  d.src_vocab = j.at("src_vocab").get<int>();
  d.tgt_vocab = j.at("tgt_vocab").get<int>();
  d.embed_dim = j.at("embed_dim").get<int>();
  d.hidden_dim = j.at("hidden_dim").get<int>();
  d.attn_dim = j.at("attn_dim").get<int>();
  d.readout_dim = j.at("readout_dim").get<int>();
  d.image_dim = j.at("image_dim").get<int>();
  return d;
}

inline nlohmann::json stream_to_json(const StreamPos& p) {
  return {{"epoch", p.epoch}, {"cursor", p.cursor}};
}

inline StreamPos stream_from_json(const nlohmann::json& j) {
  StreamPos p;
  p.epoch = j.at("epoch").get<std::int64_t>();
  p.cursor = j.at("cursor").get<std::int64_t>();
  return p;
}

inline nlohmann::json read_manifest(std::ifstream& in, const std::string& path) {
  std::string line;
  if (!std::getline(in, line)) throw DataError(path + ": cannot read checkpoint manifest");
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path + ": corrupt manifest: " + e.what());
  }
  if (!manifest.is_object() || manifest.value("format", "") != "mmtc1") {
    throw DataError(path + ": not an mmt checkpoint");
  }
  return manifest;
}

}  // namespace detail

// Writes model parameters plus, when given, optimizer slots and the trainer
// snapshot. Tensor payload order follows the parameter store.
template <class T>
void save_checkpoint(const std::string& path, const Model<T>& model, Adam<T>* opt = nullptr,
                     const TrainerSnapshot* snap = nullptr) {
  nlohmann::json manifest;
  manifest["format"] = "mmtc1";
  manifest["dtype"] = detail::dtype_tag<T>();
  manifest["dims"] = detail::dims_to_json(model.dims);

  std::int64_t offset = 0;
  nlohmann::json tensors = nlohmann::json::array();
  for (const auto& e : model.params.entries()) {
    tensors.push_back({{"name", e.name},
                       {"group", group_name(e.group)},
                       {"shape", e.tensor->shape},
                       {"offset", offset}});
    offset += e.tensor->numel() * static_cast<std::int64_t>(sizeof(T));
  }
  manifest["tensors"] = std::move(tensors);

  if (opt) {
    nlohmann::json slots = nlohmann::json::array();
    for (const auto& e : model.params.entries()) {
      auto& slot = opt->slot(e.tensor);
      nlohmann::json s;
      s["name"] = e.name;
      s["t"] = slot.t;
      s["offset_m"] = offset;
      offset += e.tensor->numel() * static_cast<std::int64_t>(sizeof(T));
      s["offset_v"] = offset;
      offset += e.tensor->numel() * static_cast<std::int64_t>(sizeof(T));
      slots.push_back(std::move(s));
    }
    manifest["optimizer"] = {{"lr", opt->config().lr},
                             {"beta1", opt->config().beta1},
                             {"beta2", opt->config().beta2},
                             {"eps", opt->config().eps},
                             {"slots", std::move(slots)}};
  } else {
    manifest["optimizer"] = nullptr;
  }

  if (snap) {
    nlohmann::json t;
    t["epoch"] = snap->epoch;
    t["step"] = snap->step;
    t["translation_steps"] = snap->translation_steps;
    t["best_bleu"] = snap->best_bleu;
    t["stale_evals"] = snap->stale_evals;
    t["rng"] = snap->rng_state;
    t["text_stream"] = snap->has_text_stream ? detail::stream_to_json(snap->text_stream)
                                             : nlohmann::json(nullptr);
    t["image_stream"] = snap->has_image_stream ? detail::stream_to_json(snap->image_stream)
                                               : nlohmann::json(nullptr);
    manifest["trainer"] = std::move(t);
  } else {
    manifest["trainer"] = nullptr;
  }

  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write checkpoint " + path);
  out << manifest.dump() << '\n';
  for (const auto& e : model.params.entries()) {
    out.write(reinterpret_cast<const char*>(e.tensor->values.data()),
              static_cast<std::streamsize>(e.tensor->values.size() * sizeof(T)));
  }
  if (opt) {
    for (const auto& e : model.params.entries()) {
      auto& slot = opt->slot(e.tensor);
      out.write(reinterpret_cast<const char*>(slot.m.data()),
                static_cast<std::streamsize>(slot.m.size() * sizeof(T)));
      out.write(reinterpret_cast<const char*>(slot.v.data()),
                static_cast<std::streamsize>(slot.v.size() * sizeof(T)));
    }
  }
  if (!out) throw DataError("write failed for checkpoint " + path);
}

inline CheckpointHeader read_checkpoint_header(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint " + path);
  const auto manifest = detail::read_manifest(in, path);
  CheckpointHeader h;
  h.dtype = manifest.at("dtype").get<std::string>();
  h.dims = detail::dims_from_json(manifest.at("dims"));
  h.has_optimizer = !manifest.at("optimizer").is_null();
  h.has_trainer = !manifest.at("trainer").is_null();
  return h;
}

// Loads parameters (and optionally optimizer slots and the trainer snapshot)
// into an existing model. Shape or naming disagreements report the offending
// tensor by name.
template <class T>
void load_checkpoint(const std::string& path, Model<T>& model, Adam<T>* opt = nullptr,
                     TrainerSnapshot* snap = nullptr) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint " + path);
  const auto manifest = detail::read_manifest(in, path);
  const std::string dtype = manifest.at("dtype").get<std::string>();
  if (dtype != detail::dtype_tag<T>()) {
    throw DataError(path + ": dtype " + dtype + " does not match model dtype " +
                    detail::dtype_tag<T>());
  }
  const std::int64_t payload_start = in.tellg();

  std::map<std::string, nlohmann::json> by_name;
  for (const auto& t : manifest.at("tensors")) by_name[t.at("name").get<std::string>()] = t;
  if (by_name.size() != model.params.entries().size()) {
    throw DataError(path + ": checkpoint has " + std::to_string(by_name.size()) +
                    " tensors, model expects " + std::to_string(model.params.entries().size()));
  }
  for (const auto& e : model.params.entries()) {
    const auto it = by_name.find(e.name);
    if (it == by_name.end()) throw DataError(path + ": checkpoint is missing tensor " + e.name);
    const nlohmann::json& meta = it->second;
    const auto shape = meta.at("shape").get<Shape>();
    if (shape != e.tensor->shape) {
      throw DataError(path + ": tensor " + e.name + ": checkpoint shape " + shape_str(shape) +
                      " does not match model shape " + shape_str(e.tensor->shape));
    }
    in.seekg(payload_start + meta.at("offset").get<std::int64_t>());
    in.read(reinterpret_cast<char*>(e.tensor->values.data()),
            static_cast<std::streamsize>(e.tensor->values.size() * sizeof(T)));
    if (!in) throw DataError(path + ": payload truncated at tensor " + e.name);
  }

  if (opt) {
    if (manifest.at("optimizer").is_null()) {
      throw DataError(path + ": checkpoint carries no optimizer state");
    }
    const auto& o = manifest.at("optimizer");
    std::map<std::string, nlohmann::json> slot_by_name;
    for (const auto& s : o.at("slots")) slot_by_name[s.at("name").get<std::string>()] = s;
    for (const auto& e : model.params.entries()) {
      const auto it = slot_by_name.find(e.name);
      if (it == slot_by_name.end()) {
        throw DataError(path + ": optimizer state missing for tensor " + e.name);
      }
      auto& slot = opt->slot(e.tensor);
      const nlohmann::json& meta = it->second;
      slot.t = meta.at("t").get<std::int64_t>();
      in.seekg(payload_start + meta.at("offset_m").get<std::int64_t>());
      in.read(reinterpret_cast<char*>(slot.m.data()),
              static_cast<std::streamsize>(slot.m.size() * sizeof(T)));
      in.seekg(payload_start + meta.at("offset_v").get<std::int64_t>());
      in.read(reinterpret_cast<char*>(slot.v.data()),
              static_cast<std::streamsize>(slot.v.size() * sizeof(T)));
      if (!in) throw DataError(path + ": optimizer payload truncated at tensor " + e.name);
    }
  }

  if (snap) {
    if (manifest.at("trainer").is_null()) {
      throw DataError(path + ": checkpoint carries no trainer state");
    }
    const auto& t = manifest.at("trainer");
    snap->epoch = t.at("epoch").get<std::int64_t>();
    snap->step = t.at("step").get<std::int64_t>();
    snap->translation_steps = t.at("translation_steps").get<std::int64_t>();
    snap->best_bleu = t.at("best_bleu").get<double>();
    snap->stale_evals = t.at("stale_evals").get<std::int64_t>();
    snap->rng_state = t.at("rng").get<std::string>();
    snap->has_text_stream = !t.at("text_stream").is_null();
    if (snap->has_text_stream) snap->text_stream = detail::stream_from_json(t.at("text_stream"));
    snap->has_image_stream = !t.at("image_stream").is_null();
    if (snap->has_image_stream) {
      snap->image_stream = detail::stream_from_json(t.at("image_stream"));
    }
  }
}

}  // namespace mmt
