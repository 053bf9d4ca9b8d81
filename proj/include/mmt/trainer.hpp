#pragma once

// Multitask training loop: each step is a translation update with
// probability w and an image-prediction update otherwise. The two dataset
// streams cycle independently; validation BLEU runs once per primary-task
// epoch and drives early stopping.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <memory>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "mmt/bleu.hpp"
#include "mmt/checkpoint.hpp"
#include "mmt/data.hpp"
#include "mmt/decoder.hpp"
#include "mmt/encoder.hpp"
#include "mmt/grounding.hpp"
#include "mmt/model.hpp"
#include "mmt/optim.hpp"

namespace mmt {

struct TrainConfig {
  double mix_weight = 0.5;  // w: probability that a step is a translation update
  int batch_size = 80;
  double margin = 0.1;      // alpha for the image objective
  double clip_norm = 1.0;
  double dropout = 0.2;
  int val_beam = 12;
  int patience = 5;
  int max_epochs = 20;
  int max_decode_len = 60;
  bool smooth_val_bleu = false;
  std::uint64_t seed = 1;
  AdamConfig adam;

  void validate() const {
    if (!(mix_weight >= 0.0 && mix_weight <= 1.0)) throw ConfigError("w must be in [0, 1]");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (patience < 1) throw ConfigError("patience must be >= 1");
    if (max_epochs < 1) throw ConfigError("max_epochs must be >= 1");
    if (!(margin > 0)) throw ConfigError("margin must be > 0");
    if (!(clip_norm > 0)) throw ConfigError("clip_norm must be > 0");
    if (dropout < 0 || dropout >= 1) throw ConfigError("dropout must be in [0, 1)");
    if (val_beam < 1) throw ConfigError("val_beam must be >= 1");
    if (max_decode_len < 1) throw ConfigError("max_decode_len must be >= 1");
  }
};

// Derived seeds: 0 is reserved for model initialization by callers.
inline std::uint64_t trainer_rng_seed(std::uint64_t seed) { return mix_seed(seed, 1); }
inline std::uint64_t text_stream_seed(std::uint64_t seed) { return mix_seed(seed, 2); }
inline std::uint64_t image_stream_seed(std::uint64_t seed) { return mix_seed(seed, 3); }
inline std::uint64_t model_init_seed(std::uint64_t seed) { return mix_seed(seed, 0); }

template <class T>
class Trainer {
 public:
  struct ValExample {
    std::vector<int> source;
    std::vector<std::string> reference;
  };

  struct StepInfo {
    bool translation = false;
    double loss = 0;
    bool epoch_done = false;
  };

  struct Outcome {
    std::int64_t epochs = 0;
    double best_bleu = -1;
    bool stopped_early = false;
  };

  Trainer(const TrainConfig& cfg, Model<T>& model, const std::vector<TrainingExample>* text_data,
          const std::vector<TrainingExample>* image_data)
      : cfg_(cfg), model_(model), rng_(trainer_rng_seed(cfg.seed)), adam_(cfg.adam) {
    cfg_.validate();
    if (cfg_.mix_weight > 0.0) {
      if (!text_data || text_data->empty()) {
        throw ConfigError("w > 0 requires a nonempty translation dataset");
      }
      for (const auto& ex : *text_data) {
        if (!ex.has_target()) throw ConfigError("translation dataset example lacks a target");
      }
      text_stream_.emplace(text_data, cfg_.batch_size, text_stream_seed(cfg_.seed));
    }
    if (cfg_.mix_weight < 1.0) {
      if (!image_data || image_data->empty()) {
        throw ConfigError("w < 1 requires a nonempty described-image dataset");
      }
      for (const auto& ex : *image_data) {
        if (!ex.has_image()) throw ConfigError("image dataset example lacks an image vector");
      }
      image_stream_.emplace(image_data, cfg_.batch_size, image_stream_seed(cfg_.seed));
    }
  }

  // One parameter update. Draws the task from the scheduler, runs
  // forward/backward on the next batch of that task's stream, clips, and
  // applies Adam to the shared partition plus the task partition only.
  StepInfo step() {
    const bool translation = rng_.u01() < cfg_.mix_weight;
    return translation ? translation_step() : grounding_step();
  }

  double validation_bleu(const std::vector<ValExample>& val) {
    std::vector<std::vector<std::string>> hyps, refs;
    hyps.reserve(val.size());
    refs.reserve(val.size());
    for (const auto& ex : val) {
      EnsembleDecoder<T> dec({&model_}, single_source_batch(ex.source));
      const Hypothesis hyp = beam_search(dec, cfg_.val_beam, cfg_.max_decode_len);
      std::vector<std::string> tokens;
      for (int id : hyp.emitted_tokens()) {
        if (id == Vocabulary::kEos) break;
        tokens.push_back(tgt_vocab_ ? tgt_vocab_->token(id) : std::to_string(id));
      }
      hyps.push_back(std::move(tokens));
      refs.push_back(ex.reference);
    }
    return corpus_bleu(hyps, refs, cfg_.smooth_val_bleu).bleu;
  }

  void set_target_vocab(const Vocabulary* v) { tgt_vocab_ = v; }

  // Full driver: steps until early stopping (no strict validation-BLEU
  // improvement for `patience` consecutive evaluations) or max_epochs.
  // Writes one TSV log line per evaluation and keeps the best checkpoint.
  Outcome train(const std::vector<ValExample>* val, std::ostream* log,
                const std::string& checkpoint_path) {
    const auto t0 = std::chrono::steady_clock::now();
    if (log) {
      *log << "epoch\tstep\tJ_T\tJ_G\tval_bleu\tbest_bleu\tseconds\n";
    }
    Outcome outcome;
    const bool with_bleu = val && cfg_.mix_weight > 0.0;
    while (true) {
      const StepInfo info = step();
      if (!info.epoch_done) continue;
      ++epoch_;
      double bleu = std::nan("");
      bool improved = false;
      if (with_bleu) {
        bleu = validation_bleu(*val);
        improved = bleu > best_bleu_;
        if (improved) {
          best_bleu_ = bleu;
          stale_evals_ = 0;
          if (!checkpoint_path.empty()) save(checkpoint_path);
        } else {
          ++stale_evals_;
        }
      }
      if (log) write_log_line(*log, bleu, t0);
      j_t_sum_ = j_g_sum_ = 0;
      j_t_count_ = j_g_count_ = 0;
      if (with_bleu && stale_evals_ >= cfg_.patience) {
        outcome.stopped_early = true;
        break;
      }
      if (epoch_ >= cfg_.max_epochs) break;
    }
    if (!with_bleu && !checkpoint_path.empty()) save(checkpoint_path);
    outcome.epochs = epoch_;
    outcome.best_bleu = best_bleu_;
    return outcome;
  }

  void save(const std::string& path) {
    const TrainerSnapshot snap = snapshot();
    save_checkpoint(path, model_, &adam_, &snap);
  }

  void load(const std::string& path) {
    TrainerSnapshot snap;
    load_checkpoint(path, model_, &adam_, &snap);
    restore(snap);
  }

  TrainerSnapshot snapshot() const {
    TrainerSnapshot s;
    s.epoch = epoch_;
    s.step = steps_;
    s.translation_steps = translation_steps_;
    s.best_bleu = best_bleu_;
    s.stale_evals = stale_evals_;
    s.rng_state = rng_.state();
    if (text_stream_) {
      s.has_text_stream = true;
      s.text_stream = text_stream_->pos();
    }
    if (image_stream_) {
      s.has_image_stream = true;
      s.image_stream = image_stream_->pos();
    }
    return s;
  }

  void restore(const TrainerSnapshot& s) {
    epoch_ = s.epoch;
    steps_ = s.step;
    translation_steps_ = s.translation_steps;
    best_bleu_ = s.best_bleu;
    stale_evals_ = s.stale_evals;
    rng_.set_state(s.rng_state);
    if (text_stream_ && s.has_text_stream) text_stream_->seek(s.text_stream);
    if (image_stream_ && s.has_image_stream) image_stream_->seek(s.image_stream);
  }

  Model<T>& model() { return model_; }
  Adam<T>& optimizer() { return adam_; }
  std::int64_t steps() const { return steps_; }
  std::int64_t translation_steps() const { return translation_steps_; }
  std::int64_t epoch() const { return epoch_; }
  double best_bleu() const { return best_bleu_; }
  std::int64_t stale_evals() const { return stale_evals_; }
  double mean_j_t() const { return j_t_count_ ? j_t_sum_ / j_t_count_ : std::nan(""); }
  double mean_j_g() const { return j_g_count_ ? j_g_sum_ / j_g_count_ : std::nan(""); }

 private:
  StepInfo translation_step() {
    bool last = false;
    const Batch& batch = text_stream_->next(&last);
    model_.params.zero_grads({ParamGroup::shared, ParamGroup::translation});
    Tape<T> tape;
    std::optional<EncoderDropout<T>> enc_drop;
    std::optional<DecoderDropout<T>> dec_drop;
    if (cfg_.dropout > 0) {
      enc_drop = make_encoder_dropout<T>(rng_, batch.size, model_.dims, cfg_.dropout);
      dec_drop = make_decoder_dropout<T>(rng_, batch.size, model_.dims, cfg_.dropout);
    }
    auto enc = encode(tape, model_.encoder, batch, enc_drop ? &*enc_drop : nullptr);
    auto loss = sequence_nll(tape, model_.decoder, enc, batch, dec_drop ? &*dec_drop : nullptr);
    backward(tape, loss);
    finish_update({ParamGroup::shared, ParamGroup::translation});
    ++steps_;
    ++translation_steps_;
    j_t_sum_ += loss->values[0];
    ++j_t_count_;
    StepInfo info;
    info.translation = true;
    info.loss = loss->values[0];
    info.epoch_done = primary_is_text() ? last : false;
    return info;
  }

  StepInfo grounding_step() {
    bool last = false;
    const Batch& batch = image_stream_->next(&last);
    model_.params.zero_grads({ParamGroup::shared, ParamGroup::grounding});
    Tape<T> tape;
    std::optional<EncoderDropout<T>> enc_drop;
    if (cfg_.dropout > 0) {
      enc_drop = make_encoder_dropout<T>(rng_, batch.size, model_.dims, cfg_.dropout);
    }
    auto enc = encode(tape, model_.encoder, batch, enc_drop ? &*enc_drop : nullptr);
    auto v_hat = predict_image_vector(tape, model_.grounding, enc);
    auto v_true = tensor<T>({batch.size, batch.image_dim});
    for (std::size_t i = 0; i < batch.image.size(); ++i) {
      v_true->values[i] = static_cast<T>(batch.image[i]);
    }
    auto loss = margin_loss(tape, v_hat, v_true, cfg_.margin);
    if (loss->requires_grad) {
      backward(tape, loss);
    }
    finish_update({ParamGroup::shared, ParamGroup::grounding});
    ++steps_;
    j_g_sum_ += loss->values[0];
    ++j_g_count_;
    StepInfo info;
    info.translation = false;
    info.loss = loss->values[0];
    info.epoch_done = primary_is_text() ? false : last;
    return info;
  }

  void finish_update(std::initializer_list<ParamGroup> groups) {
    // The PAD embedding row never carries a meaningful gradient; keep it out
    // of the reported norm and the update.
    zero_pad_row(model_.encoder.embed);
    zero_pad_row(model_.decoder.embed);
    auto params = model_.params.of_groups(groups);
    clip_global_norm(params, cfg_.clip_norm);
    adam_.step(params);
  }

  void zero_pad_row(const TensorPtr<T>& embed) {
    if (embed->grad.empty()) return;
    for (int c = 0; c < embed->cols(); ++c) embed->grad[c] = T(0);
  }

  bool primary_is_text() const { return cfg_.mix_weight > 0.0; }

  void write_log_line(std::ostream& log, double bleu,
                      std::chrono::steady_clock::time_point t0) const {
    char buf[64];
    auto field = [&](double v, const char* fmt) -> std::string {
      if (std::isnan(v)) return "-";
      std::snprintf(buf, sizeof(buf), fmt, v);
      return buf;
    };
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    log << epoch_ << '\t' << steps_ << '\t' << field(mean_j_t(), "%.6f") << '\t'
        << field(mean_j_g(), "%.6f") << '\t' << field(bleu, "%.4f") << '\t'
        << field(best_bleu_ < 0 ? std::nan("") : best_bleu_, "%.4f") << '\t'
        << field(secs, "%.3f") << '\n';
    log.flush();
  }

  TrainConfig cfg_;
  Model<T>& model_;
  Rng rng_;
  Adam<T> adam_;
  std::optional<BatchStream> text_stream_;
  std::optional<BatchStream> image_stream_;
  const Vocabulary* tgt_vocab_ = nullptr;

  std::int64_t steps_ = 0;
  std::int64_t translation_steps_ = 0;
  std::int64_t epoch_ = 0;
  double best_bleu_ = -1;
  std::int64_t stale_evals_ = 0;
  double j_t_sum_ = 0, j_g_sum_ = 0;
  std::int64_t j_t_count_ = 0, j_g_count_ = 0;
};

}  // namespace mmt
