// mmt: multitask multimodal translation from the command line.
//
// Subcommands: train, translate, rank, score, gradcheck. Every command is
// deterministic given its inputs and seed. Exit codes: 0 success, 2 for
// configuration/usage problems, 1 for runtime failures.

#include <chrono>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "mmt/mmt.hpp"

namespace fs = std::filesystem;
using namespace mmt;

namespace {

constexpr int kExitRuntime = 1;
constexpr int kExitConfig = 2;

struct Overrides {
  // CLI flags that shadow config keys one-to-one; only the ones the user
  // passed are applied.
  CLI::App* cmd = nullptr;
  double w = 0;
  std::uint64_t seed = 0;
  int batch_size = 0, max_epochs = 0, patience = 0, val_beam = 0, max_decode_len = 0;
  double dropout = 0, lr = 0, margin = 0, clip_norm = 0;
  int embed_dim = 0, hidden_dim = 0, attn_dim = 0, readout_dim = 0, image_dim = 0;
  bool smooth_val_bleu = false;
  std::string run_dir;

  void add_to(CLI::App& app) {
    cmd = &app;
    app.add_option("--w", w, "mixing probability of a translation update");
    app.add_option("--seed", seed, "run seed");
    app.add_option("--batch-size", batch_size);
    app.add_option("--max-epochs", max_epochs);
    app.add_option("--patience", patience);
    app.add_option("--val-beam", val_beam);
    app.add_option("--max-decode-len", max_decode_len);
    app.add_option("--dropout", dropout);
    app.add_option("--lr", lr);
    app.add_option("--margin", margin);
    app.add_option("--clip-norm", clip_norm);
    app.add_option("--embed-dim", embed_dim);
    app.add_option("--hidden-dim", hidden_dim);
    app.add_option("--attn-dim", attn_dim);
    app.add_option("--readout-dim", readout_dim);
    app.add_option("--image-dim", image_dim);
    app.add_flag("--smooth-val-bleu", smooth_val_bleu);
    app.add_option("--run-dir", run_dir, "output directory (default: $MMT_RUN_ROOT/<stamp>-seed<seed>)");
  }

  void apply(RunConfig& cfg) const {
    if (cmd->count("--w")) cfg.train.mix_weight = w;
    if (cmd->count("--seed")) cfg.train.seed = seed;
    if (cmd->count("--batch-size")) cfg.train.batch_size = batch_size;
    if (cmd->count("--max-epochs")) cfg.train.max_epochs = max_epochs;
    if (cmd->count("--patience")) cfg.train.patience = patience;
    if (cmd->count("--val-beam")) cfg.train.val_beam = val_beam;
    if (cmd->count("--max-decode-len")) cfg.train.max_decode_len = max_decode_len;
    if (cmd->count("--dropout")) cfg.train.dropout = dropout;
    if (cmd->count("--lr")) cfg.train.adam.lr = lr;
    if (cmd->count("--margin")) cfg.train.margin = margin;
    if (cmd->count("--clip-norm")) cfg.train.clip_norm = clip_norm;
    if (cmd->count("--embed-dim")) cfg.dims.embed_dim = embed_dim;
    if (cmd->count("--hidden-dim")) cfg.dims.hidden_dim = hidden_dim;
    if (cmd->count("--attn-dim")) cfg.dims.attn_dim = attn_dim;
    if (cmd->count("--readout-dim")) cfg.dims.readout_dim = readout_dim;
    if (cmd->count("--image-dim")) cfg.dims.image_dim = image_dim;
    if (cmd->count("--smooth-val-bleu")) cfg.train.smooth_val_bleu = smooth_val_bleu;
    if (cmd->count("--run-dir")) cfg.run_dir = run_dir;
  }
};

void check_line_counts(const std::string& a, const std::string& b, const char* what) {
  const auto la = read_lines(a);
  const auto lb = read_lines(b);
  if (la.size() != lb.size()) {
    throw ConfigError(std::string(what) + ": " + a + " has " + std::to_string(la.size()) +
                      " lines but " + b + " has " + std::to_string(lb.size()));
  }
}

fs::path resolve_run_dir(const RunConfig& cfg) {
  if (!cfg.run_dir.empty()) return cfg.run_dir;
  const char* root_env = std::getenv("MMT_RUN_ROOT");
  const fs::path root = root_env && *root_env ? root_env : "runs";
  std::time_t now = std::time(nullptr);
  char stamp[32];
  std::strftime(stamp, sizeof(stamp), "%Y%m%d-%H%M%S", std::localtime(&now));
  fs::path dir = root / (std::string(stamp) + "-seed" + std::to_string(cfg.train.seed));
  int suffix = 1;
  while (fs::exists(dir)) {
    dir = root / (std::string(stamp) + "-seed" + std::to_string(cfg.train.seed) + "-" +
                  std::to_string(suffix++));
  }
  return dir;
}

std::vector<std::vector<std::string>> tokenize_lines(const std::vector<std::string>& lines) {
  std::vector<std::vector<std::string>> out;
  out.reserve(lines.size());
  for (const auto& line : lines) out.push_back(normalize_tokenize(line));
  return out;
}

int cmd_train(const std::string& config_path, const Overrides& ov) {
  RunConfig cfg = config_path.empty() ? RunConfig{} : RunConfig::from_file(config_path);
  ov.apply(cfg);
  cfg.train.validate();
  const double w = cfg.train.mix_weight;

  // Pre-flight: every referenced file must exist and line up before any
  // training step runs.
  if (w > 0) {
    require_file(cfg.train_src, "train_src");
    require_file(cfg.train_tgt, "train_tgt");
    check_line_counts(cfg.train_src, cfg.train_tgt, "parallel training data");
  }
  if (w < 1) {
    require_file(cfg.image_src, "image_src");
    require_file(cfg.image_vectors, "image_vectors");
  }
  const bool with_val = !cfg.val_src.empty() || !cfg.val_tgt.empty();
  if (with_val) {
    require_file(cfg.val_src, "val_src");
    require_file(cfg.val_tgt, "val_tgt");
    check_line_counts(cfg.val_src, cfg.val_tgt, "validation data");
  }

  // Vocabularies: load when given, otherwise build from the training text.
  // The source vocabulary covers both streams since the encoder is shared.
  Vocabulary src_vocab, tgt_vocab;
  if (!cfg.src_vocab.empty()) {
    require_file(cfg.src_vocab, "src_vocab");
    src_vocab = Vocabulary::load(cfg.src_vocab);
  } else {
    std::vector<std::vector<std::string>> corpus;
    if (w > 0) {
      for (const auto& t : tokenize_lines(read_lines(cfg.train_src))) corpus.push_back(t);
    }
    if (w < 1) {
      for (const auto& t : tokenize_lines(read_lines(cfg.image_src))) corpus.push_back(t);
    }
    src_vocab = Vocabulary::build(corpus, cfg.min_freq, cfg.max_vocab);
  }
  if (!cfg.tgt_vocab.empty()) {
    require_file(cfg.tgt_vocab, "tgt_vocab");
    tgt_vocab = Vocabulary::load(cfg.tgt_vocab);
  } else if (w > 0) {
    tgt_vocab = Vocabulary::build(tokenize_lines(read_lines(cfg.train_tgt)), cfg.min_freq,
                                  cfg.max_vocab);
  }
  cfg.dims.src_vocab = static_cast<int>(src_vocab.size());
  cfg.dims.tgt_vocab = static_cast<int>(std::max<std::size_t>(tgt_vocab.size(), 5));
  cfg.dims.validate();

  // Datasets.
  std::vector<TrainingExample> text_data, image_data;
  CorpusStats text_stats, image_stats;
  if (w > 0) {
    text_data = load_parallel_corpus(cfg.train_src, cfg.train_tgt, src_vocab, tgt_vocab,
                                     cfg.oov_threshold, &text_stats);
    if (text_data.empty()) throw ConfigError("no usable examples in " + cfg.train_src);
  }
  if (w < 1) {
    image_data = load_described_corpus(cfg.image_src, cfg.image_vectors, src_vocab,
                                       cfg.oov_threshold, &image_stats);
    if (image_data.empty()) throw ConfigError("no usable examples in " + cfg.image_src);
    cfg.dims.image_dim = static_cast<int>(image_data.front().image.size());
  }

  std::vector<Trainer<float>::ValExample> val;
  if (with_val && w > 0) {
    const auto vs = read_lines(cfg.val_src);
    const auto vt = read_lines(cfg.val_tgt);
    for (std::size_t i = 0; i < vs.size(); ++i) {
      const auto st = normalize_tokenize(vs[i]);
      const auto tt = normalize_tokenize(vt[i]);
      if (st.empty() || tt.empty()) {
        std::cerr << "warning: skipping empty validation line " << i + 1 << "\n";
        continue;
      }
      val.push_back({src_vocab.encode(st), tt});
    }
  }

  // Run directory with the frozen resolved config beside the outputs.
  const fs::path run_dir = resolve_run_dir(cfg);
  fs::create_directories(run_dir);
  src_vocab.save((run_dir / "vocab.src.txt").string());
  tgt_vocab.save((run_dir / "vocab.tgt.txt").string());
  cfg.run_dir = run_dir.string();
  {
    std::ofstream frozen(run_dir / "config.resolved.json");
    nlohmann::json j = cfg.to_json();
    j["src_vocab_size"] = cfg.dims.src_vocab;
    j["tgt_vocab_size"] = cfg.dims.tgt_vocab;
    frozen << j.dump(2) << "\n";
  }

  std::cerr << "run dir: " << run_dir.string() << "\n";
  if (w > 0) {
    std::cerr << "translation data: " << text_data.size() << " examples (skipped "
              << text_stats.skipped_empty << " empty, dropped " << text_stats.dropped_oov
              << " OOV)\n";
  }
  if (w < 1) {
    std::cerr << "image data: " << image_data.size() << " examples (skipped "
              << image_stats.skipped_empty << " empty, dropped " << image_stats.dropped_oov
              << " OOV)\n";
  }

  Rng init_rng(model_init_seed(cfg.train.seed));
  Model<float> model(cfg.dims, init_rng);
  Trainer<float> trainer(cfg.train, model, w > 0 ? &text_data : nullptr,
                         w < 1 ? &image_data : nullptr);
  trainer.set_target_vocab(&tgt_vocab);

  std::ofstream log(run_dir / "train.log.tsv");
  const std::string ckpt = (run_dir / "checkpoint-best.mmtc").string();
  const auto outcome = trainer.train(val.empty() ? nullptr : &val, &log, ckpt);

  std::cerr << "finished after " << outcome.epochs << " epochs"
            << (outcome.stopped_early ? " (early stop)" : "");
  if (outcome.best_bleu >= 0) std::cerr << ", best validation BLEU " << outcome.best_bleu;
  std::cerr << "\ncheckpoint: " << ckpt << "\n";
  return 0;
}

std::unique_ptr<Model<float>> load_model(const std::string& path) {
  const auto header = read_checkpoint_header(path);
  Rng rng(0);
  auto model = std::make_unique<Model<float>>(header.dims, rng);
  load_checkpoint(path, *model);
  return model;
}

int cmd_translate(const std::vector<std::string>& checkpoints, const std::string& src_vocab_path,
                  const std::string& tgt_vocab_path, const std::string& source_path,
                  const std::string& output_path, int beam, int max_len) {
  require_file(src_vocab_path, "src-vocab");
  require_file(tgt_vocab_path, "tgt-vocab");
  require_file(source_path, "source");
  const Vocabulary src_vocab = Vocabulary::load(src_vocab_path);
  const Vocabulary tgt_vocab = Vocabulary::load(tgt_vocab_path);

  std::vector<std::unique_ptr<Model<float>>> models;
  std::vector<const Model<float>*> views;
  for (const auto& path : checkpoints) {
    require_file(path, "checkpoint");
    models.push_back(load_model(path));
    views.push_back(models.back().get());
  }

  const auto lines = read_lines(source_path);
  const auto hyps = translate_lines(views, src_vocab, tgt_vocab, lines, beam, max_len, &std::cerr);
  if (output_path.empty() || output_path == "-") {
    for (const auto& h : hyps) std::cout << h << "\n";
  } else {
    std::ofstream out(output_path, std::ios::binary);
    if (!out) throw DataError("cannot write " + output_path);
    for (const auto& h : hyps) out << h << "\n";
  }
  return 0;
}

int cmd_rank(const std::string& checkpoint, const std::string& src_vocab_path,
             const std::string& source_path, const std::string& vectors_path,
             const std::string& output_path) {
  require_file(checkpoint, "checkpoint");
  require_file(src_vocab_path, "src-vocab");
  require_file(source_path, "source");
  require_file(vectors_path, "vectors");
  const Vocabulary src_vocab = Vocabulary::load(src_vocab_path);
  const auto model = load_model(checkpoint);
  if (model->dims.src_vocab != static_cast<int>(src_vocab.size())) {
    throw ConfigError("checkpoint source vocab " + std::to_string(model->dims.src_vocab) +
                      " does not match vocabulary of size " + std::to_string(src_vocab.size()));
  }

  const auto lines = read_lines(source_path);
  const ImageMatrix images = load_image_vectors(vectors_path);
  if (lines.size() != static_cast<std::size_t>(images.count)) {
    throw ConfigError(source_path + " has " + std::to_string(lines.size()) + " lines but " +
                      vectors_path + " has " + std::to_string(images.count) + " vectors");
  }
  std::vector<std::vector<int>> sentences;
  for (std::size_t i = 0; i < lines.size(); ++i) {
    const auto toks = normalize_tokenize(lines[i]);
    if (toks.empty()) {
      throw ConfigError(source_path + ": line " + std::to_string(i + 1) +
                        " is empty after tokenization; ranking needs aligned rows");
    }
    sentences.push_back(src_vocab.encode(toks));
  }

  const auto result = rank_images(*model, sentences, images);
  const std::string tsv = ranking_tsv(result);
  if (output_path.empty() || output_path == "-") {
    std::cout << tsv;
  } else {
    std::ofstream out(output_path, std::ios::binary);
    if (!out) throw DataError("cannot write " + output_path);
    out << tsv;
  }
  std::cerr << "median rank " << result.median_rank << ", recall@1 " << result.recall_at_1
            << ", recall@5 " << result.recall_at_5 << ", recall@10 " << result.recall_at_10
            << "\n";
  return 0;
}

int cmd_score(const std::string& hyp_path, const std::string& ref_path, bool smooth) {
  require_file(hyp_path, "hypotheses");
  require_file(ref_path, "references");
  const auto hyp_lines = read_lines(hyp_path);
  const auto ref_lines = read_lines(ref_path);
  if (hyp_lines.empty()) throw ConfigError(hyp_path + " is empty");
  if (hyp_lines.size() != ref_lines.size()) {
    throw ConfigError(hyp_path + " has " + std::to_string(hyp_lines.size()) + " lines but " +
                      ref_path + " has " + std::to_string(ref_lines.size()));
  }
  const auto report = corpus_bleu(tokenize_lines(hyp_lines), tokenize_lines(ref_lines), smooth);
  std::cout << report.tsv() << "\n" << report.pretty() << "\n";
  return 0;
}

int cmd_gradcheck(const std::string& config_path, const Overrides& ov, double eps,
                  double threshold, std::int64_t max_coords) {
  RunConfig cfg = config_path.empty() ? RunConfig{} : RunConfig::from_file(config_path);
  ov.apply(cfg);
  // Desk-scale defaults when no config narrows them down.
  if (config_path.empty() && !ov.cmd->count("--embed-dim")) cfg.dims.embed_dim = 8;
  if (config_path.empty() && !ov.cmd->count("--hidden-dim")) cfg.dims.hidden_dim = 8;
  if (config_path.empty() && !ov.cmd->count("--attn-dim")) cfg.dims.attn_dim = 8;
  if (config_path.empty() && !ov.cmd->count("--readout-dim")) cfg.dims.readout_dim = 8;
  if (config_path.empty() && !ov.cmd->count("--image-dim")) cfg.dims.image_dim = 12;
  cfg.dims.src_vocab = 20;
  cfg.dims.tgt_vocab = 20;
  const double w = cfg.train.mix_weight;

  Rng init_rng(model_init_seed(cfg.train.seed));
  Model<double> model(cfg.dims, init_rng);

  // Synthetic fixture: a small padded batch with targets and unit-norm
  // image vectors, fixed by the seed.
  Rng data_rng(mix_seed(cfg.train.seed, 9));
  const int B = 3;
  std::vector<std::vector<int>> rows, tgts;
  for (int r = 0; r < B; ++r) {
    std::vector<int> src(2 + data_rng.index(3)), tgt(1 + data_rng.index(3));
    for (auto& id : src) id = 4 + static_cast<int>(data_rng.index(cfg.dims.src_vocab - 4));
    for (auto& id : tgt) id = 4 + static_cast<int>(data_rng.index(cfg.dims.tgt_vocab - 4));
    tgt.push_back(Vocabulary::kEos);
    rows.push_back(src);
    tgts.push_back(tgt);
  }
  Batch batch;
  {
    std::vector<TrainingExample> data;
    for (int r = 0; r < B; ++r) {
      TrainingExample ex;
      ex.source = rows[r];
      ex.target = tgts[r];
      double sq = 0;
      for (int c = 0; c < cfg.dims.image_dim; ++c) {
        ex.image.push_back(static_cast<float>(data_rng.uniform(-1.0, 1.0)));
        sq += ex.image.back() * ex.image.back();
      }
      for (auto& v : ex.image) v = static_cast<float>(v / std::sqrt(sq));
      data.push_back(ex);
    }
    batch = make_batches(data, B, 1).front();
  }

  finite_checks() = true;
  double worst = 0;
  auto run_partition = [&](const char* label, bool translation) {
    auto eval = [&](bool grads) {
      model.params.zero_grads(
          {ParamGroup::shared, translation ? ParamGroup::translation : ParamGroup::grounding});
      Tape<double> tape;
      auto enc = encode(tape, model.encoder, batch);
      TensorPtr<double> loss;
      if (translation) {
        loss = sequence_nll(tape, model.decoder, enc, batch);
      } else {
        auto v_hat = predict_image_vector(tape, model.grounding, enc);
        auto v_true = tensor<double>({batch.size, batch.image_dim});
        for (std::size_t i = 0; i < batch.image.size(); ++i) v_true->values[i] = batch.image[i];
        loss = margin_loss(tape, v_hat, v_true, cfg.train.margin);
      }
      if (grads) backward(tape, loss);
      return loss->values[0];
    };
    GradCheckParams<double> params;
    for (const auto& e : model.params.entries()) {
      if (e.group == ParamGroup::shared ||
          e.group == (translation ? ParamGroup::translation : ParamGroup::grounding)) {
        params.emplace_back(e.name, e.tensor);
      }
    }
    const auto report = grad_check(eval, params, eps, max_coords, threshold);
    std::cout << label << ": max relative error " << report.max_rel_error << " over "
              << report.checked << " coordinates (loss " << report.loss << ", denominator floor "
              << report.denom_floor << ", worst " << report.worst_param << "["
              << report.worst_index << "], analytic " << report.analytic << ", numeric "
              << report.numeric << ")\n";
    worst = std::max(worst, report.max_rel_error);
  };

  if (w > 0) run_partition("translation loss over shared + translation params", true);
  if (w < 1) run_partition("image loss over shared + grounding params", false);
  std::cout << "max relative error: " << worst << " (threshold " << threshold << ")\n";
  if (worst >= threshold) {
    std::cout << "FAIL\n";
    return kExitRuntime;
  }
  std::cout << "OK\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"multitask multimodal translation"};
  app.require_subcommand(1);

  std::string config_path;
  Overrides train_ov, grad_ov;
  auto* train = app.add_subcommand("train", "train a model from a JSON config");
  train->add_option("--config", config_path, "JSON config file");
  train_ov.add_to(*train);

  std::vector<std::string> checkpoints;
  std::string src_vocab_path, tgt_vocab_path, source_path, output_path;
  int beam = 12, max_len = 60;
  auto* translate = app.add_subcommand("translate", "decode a source file (multiple checkpoints = ensemble)");
  translate->add_option("--checkpoint", checkpoints, "checkpoint file(s)")->required();
  translate->add_option("--src-vocab", src_vocab_path)->required();
  translate->add_option("--tgt-vocab", tgt_vocab_path)->required();
  translate->add_option("--source", source_path)->required();
  translate->add_option("--output", output_path, "output file, - for stdout");
  translate->add_option("--beam", beam, "beam size (1 = greedy)");
  translate->add_option("--max-len", max_len);

  std::string rank_checkpoint, rank_vectors, rank_output;
  std::string rank_vocab, rank_source;
  auto* rank = app.add_subcommand("rank", "image-sentence ranking report");
  rank->add_option("--checkpoint", rank_checkpoint)->required();
  rank->add_option("--src-vocab", rank_vocab)->required();
  rank->add_option("--source", rank_source)->required();
  rank->add_option("--vectors", rank_vectors)->required();
  rank->add_option("--output", rank_output, "output TSV, - for stdout");

  std::string score_hyp, score_ref;
  bool score_smooth = false;
  auto* score = app.add_subcommand("score", "corpus BLEU of hypotheses against references");
  score->add_option("--hypotheses", score_hyp)->required();
  score->add_option("--references", score_ref)->required();
  score->add_flag("--smooth", score_smooth, "+1 smoothing on n-gram counts for n >= 2");

  std::string grad_config;
  double grad_eps = 1e-5, grad_threshold = 1e-4;
  std::int64_t grad_max_coords = 0;
  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference check of all gradients");
  gradcheck->add_option("--config", grad_config, "JSON config file (dims, w, seed)");
  gradcheck->add_option("--eps", grad_eps, "central-difference step");
  gradcheck->add_option("--threshold", grad_threshold, "maximum acceptable relative error");
  gradcheck->add_option("--max-coords", grad_max_coords, "coordinates checked per tensor (0 = all)");
  grad_ov.add_to(*gradcheck);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitConfig;
  }

  try {
    if (train->parsed()) return cmd_train(config_path, train_ov);
    if (translate->parsed()) {
      return cmd_translate(checkpoints, src_vocab_path, tgt_vocab_path, source_path, output_path,
                           beam, max_len);
    }
    if (rank->parsed()) {
      return cmd_rank(rank_checkpoint, rank_vocab, rank_source, rank_vectors, rank_output);
    }
    if (score->parsed()) return cmd_score(score_hyp, score_ref, score_smooth);
    if (gradcheck->parsed()) {
      return cmd_gradcheck(grad_config, grad_ov, grad_eps, grad_threshold, grad_max_coords);
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return 0;
}
