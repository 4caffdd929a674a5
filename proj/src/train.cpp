#include "icmu/train.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <set>

#include <json.hpp>

#include "icmu/backbone.hpp"
#include "icmu/objectives.hpp"
#include "icmu/optim.hpp"

namespace icmu {

namespace {

std::string fmt_g17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

Vocabulary build_vocabulary(const std::vector<DialogRecord>& dialogs,
                            const std::vector<VqaRecord>& vqa) {
  std::vector<std::string> texts;
  for (const auto& rec : dialogs) {
    texts.push_back(rec.caption);
    for (const auto& round : rec.rounds) {
      texts.push_back(round.question);
      texts.push_back(round.answer);
      for (const auto& c : round.candidates) texts.push_back(c);
    }
  }
  for (const auto& rec : vqa) {
    texts.push_back(rec.question);
    texts.push_back(rec.answer);
  }
  return Vocabulary::from_corpus(texts);
}

}  // namespace

void RunConfig::validate() const {
  if (batch_size <= 0) throw ValidationError("config: batch_size must be positive");
  if (phase1_epochs < 0 || phase2_epochs < 0 || phase1_epochs + phase2_epochs == 0) {
    throw ValidationError("config: the schedule needs at least one epoch");
  }
  if (warmup_fraction < 0.0 || warmup_fraction > 1.0) {
    throw ValidationError("config: warmup_fraction must lie in [0,1]");
  }
  if (vqa_fraction < 0.0 || vqa_fraction > 1.0) {
    throw ValidationError("config: vqa_fraction must lie in [0,1]");
  }
  if (masking_rate < 0.0 || masking_rate > 1.0) {
    throw ValidationError("config: masking_rate must lie in [0,1]");
  }
  if (history_turns < 0) throw ValidationError("config: history_turns must be >= 0");
  if (base_lr <= 0.0) throw ValidationError("config: base_lr must be positive");
  if (max_len < 8) throw ValidationError("config: max_len is too small");
  if (dialog_path.empty()) throw ValidationError("config: dialog data path is required");
  if (features_path.empty()) throw ValidationError("config: features path is required");
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError(path + ": cannot open file");
  std::string line, first;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (!first.empty()) throw ParseError(path + ": expected a single config record");
    first = line;
  }
  if (first.empty()) throw ParseError(path + ": empty config file");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(first);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(path + ": invalid config record: " + e.what());
  }
  if (!j.is_object()) throw ParseError(path + ": config record is not an object");

  RunConfig cfg;
  const std::set<std::string> known = {
      "num_blocks",     "num_heads",     "hidden_dim",       "ffn_dim",
      "visual_dim",     "regions_per_image", "contrast_classes", "max_len",
      "seed",           "batch_size",    "base_lr",          "warmup_fraction",
      "phase1_epochs",  "phase2_epochs", "vqa_fraction",     "history_turns",
      "masking_rate",   "dialogs",       "vqa",              "features",
      "checkpoint_out", "resume",        "trainlog",         "eval_dialogs",
      "eval_features",  "eval_threads",  "stop_after_epochs"};
  for (const auto& [key, value] : j.items()) {
    if (!known.count(key)) throw ParseError(path + ": unknown config key '" + key + "'");
    (void)value;
  }
  auto get_int = [&](const char* key, int& field) {
    if (j.contains(key)) field = j[key].get<int>();
  };
  auto get_double = [&](const char* key, double& field) {
    if (j.contains(key)) field = j[key].get<double>();
  };
  auto get_string = [&](const char* key, std::string& field) {
    if (j.contains(key)) field = j[key].get<std::string>();
  };
  get_int("num_blocks", cfg.num_blocks);
  get_int("num_heads", cfg.num_heads);
  get_int("hidden_dim", cfg.hidden_dim);
  get_int("ffn_dim", cfg.ffn_dim);
  get_int("visual_dim", cfg.visual_dim);
  get_int("regions_per_image", cfg.regions_per_image);
  get_int("contrast_classes", cfg.contrast_classes);
  get_int("max_len", cfg.max_len);
  if (j.contains("seed")) cfg.seed = j["seed"].get<uint64_t>();
  get_int("batch_size", cfg.batch_size);
  get_double("base_lr", cfg.base_lr);
  get_double("warmup_fraction", cfg.warmup_fraction);
  get_int("phase1_epochs", cfg.phase1_epochs);
  get_int("phase2_epochs", cfg.phase2_epochs);
  get_double("vqa_fraction", cfg.vqa_fraction);
  get_int("history_turns", cfg.history_turns);
  get_double("masking_rate", cfg.masking_rate);
  get_int("stop_after_epochs", cfg.stop_after_epochs);
  get_string("dialogs", cfg.dialog_path);
  get_string("vqa", cfg.vqa_path);
  get_string("features", cfg.features_path);
  get_string("checkpoint_out", cfg.checkpoint_out);
  get_string("resume", cfg.resume_path);
  get_string("trainlog", cfg.trainlog_path);
  get_string("eval_dialogs", cfg.eval_dialog_path);
  get_string("eval_features", cfg.eval_features_path);
  get_int("eval_threads", cfg.eval_threads);
  return cfg;
}

void TrainLog::write_tsv(const std::string& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ParseError(path + ": cannot open for writing");
  out << "step\tphase\tlr\tcmtl\tccl4\ttotal\n";
  for (const auto& rec : steps) {
    out << rec.step << '\t' << rec.phase << '\t' << fmt_g17(rec.lr) << '\t' << fmt_g17(rec.cmtl)
        << '\t' << fmt_g17(rec.ccl4) << '\t' << fmt_g17(rec.total) << '\n';
  }
}

LoadedModel load_model(const Checkpoint& ckpt) {
  LoadedModel model;
  model.vocab = Vocabulary::from_tokens(ckpt.vocab_tokens);
  if (model.vocab.size() != ckpt.config.vocab_size) {
    throw ValidationError("checkpoint: vocabulary size " + std::to_string(model.vocab.size()) +
                          " does not match config " + std::to_string(ckpt.config.vocab_size));
  }
  Rng dummy(0);
  model.params = std::make_unique<TransformerParams>(ckpt.config, dummy);
  restore_params(ckpt, *model.params);
  return model;
}

TrainOutcome cmd_train(const RunConfig& config) {
  config.validate();

  const auto dialogs = load_dialogs(config.dialog_path);
  if (dialogs.empty()) throw ValidationError(config.dialog_path + ": no dialog records");
  const FeatureStore features = load_features(config.features_path);
  std::vector<VqaRecord> vqa;
  if (!config.vqa_path.empty()) vqa = load_vqa(config.vqa_path);

  const bool resuming = !config.resume_path.empty();
  Checkpoint resume_ckpt;
  if (resuming) resume_ckpt = load_checkpoint(config.resume_path);

  // Model, vocabulary and RNG. A resumed run restores all three from the
  // checkpoint so the continuation replays the uninterrupted stream.
  Rng rng(config.seed);
  Vocabulary vocab;
  std::unique_ptr<TransformerParams> params;
  TrainerState state;
  if (resuming) {
    vocab = Vocabulary::from_tokens(resume_ckpt.vocab_tokens);
    Rng dummy(0);
    params = std::make_unique<TransformerParams>(resume_ckpt.config, dummy);
    restore_params(resume_ckpt, *params);
    state = resume_ckpt.trainer;
    rng.set_state(state.rng_state);
  } else {
    vocab = build_vocabulary(dialogs, vqa);
    ModelConfig mc;
    mc.num_blocks = config.num_blocks;
    mc.num_heads = config.num_heads;
    mc.hidden_dim = config.hidden_dim;
    mc.ffn_dim = config.ffn_dim;
    mc.vocab_size = vocab.size();
    mc.max_positions = config.max_len;
    mc.visual_dim = config.visual_dim;
    mc.regions_per_image = config.regions_per_image;
    mc.contrast_classes = config.contrast_classes;
    params = std::make_unique<TransformerParams>(mc, rng);
    state.base_lr = config.base_lr;
    state.warmup_fraction = config.warmup_fraction;
    state.batch_size = static_cast<uint32_t>(config.batch_size);
    state.phase1_epochs = static_cast<uint32_t>(config.phase1_epochs);
    state.phase2_epochs = static_cast<uint32_t>(config.phase2_epochs);
    state.vqa_fraction = config.vqa_fraction;
    state.history_turns = static_cast<uint32_t>(config.history_turns);
    state.max_len = static_cast<uint32_t>(config.max_len);
    state.seed = config.seed;
  }

  PoolBuildCounters counters;
  const QuartettePool pool =
      build_pool(dialogs, features, vqa, static_cast<int>(state.history_turns), &counters);
  if (pool.size() < 2) throw ValidationError("training pool needs at least 2 examples");

  const long steps_per_epoch =
      std::max<long>(1, static_cast<long>(pool.dialog_count) / state.batch_size);
  const int total_epochs = static_cast<int>(state.phase1_epochs + state.phase2_epochs);
  const uint64_t total_steps = static_cast<uint64_t>(steps_per_epoch) * total_epochs;
  if (resuming && state.total_steps != total_steps) {
    throw ValidationError("resume: step plan changed (checkpoint " +
                          std::to_string(state.total_steps) + " steps, data gives " +
                          std::to_string(total_steps) + ")");
  }
  state.total_steps = total_steps;

  // Optional held-out split for per-epoch snapshots.
  std::vector<EvalItem> eval_items;
  if (!config.eval_dialog_path.empty()) {
    const auto eval_dialogs = load_dialogs(config.eval_dialog_path);
    const FeatureStore eval_features = load_features(
        config.eval_features_path.empty() ? config.features_path : config.eval_features_path);
    eval_items = build_eval_items(eval_dialogs, eval_features, static_cast<int>(state.history_turns));
  }

  TrainOutcome outcome;
  outcome.vqa_converted = counters.vqa_converted;
  outcome.vqa_skipped = counters.vqa_skipped;

  const double effective_vqa_fraction = pool.vqa_count() == 0 ? 0.0 : state.vqa_fraction;
  const int stop_after = config.stop_after_epochs > 0
                             ? std::min(config.stop_after_epochs, total_epochs)
                             : total_epochs;

  for (int epoch = static_cast<int>(state.epochs_completed); epoch < stop_after; ++epoch) {
    const Phase phase = epoch < static_cast<int>(state.phase1_epochs) ? Phase::both
                                                                      : Phase::ccl4_only;
    const MixedStream stream(pool, phase == Phase::both ? effective_vqa_fraction : 0.0);
    double epoch_total = 0.0;
    for (long s = 0; s < steps_per_epoch; ++s) {
      state.global_step += 1;
      const double lr = lr_at(static_cast<long>(state.global_step),
                              static_cast<long>(state.total_steps), state.base_lr,
                              state.warmup_fraction);
      params->zero_grads();
      LossBreakdown batch_sum;
      for (uint32_t b = 0; b < state.batch_size; ++b) {
        const size_t index = stream.next_index(rng);
        auto [quartette, label] = build_training_quartette(pool, index, rng);
        if (params->config().contrast_classes == 2 && label.c > 0) label.c = 1;
        const TokenSequence seq =
            pack_sequence(quartette.regions, quartette.caption, quartette.history,
                          quartette.question, quartette.answer, vocab,
                          static_cast<int>(state.max_len));
        Tape tape;
        TotalLoss loss;
        if (phase == Phase::both) {
          const MaskedBatch masked = apply_token_masking(seq, config.masking_rate, rng);
          const AttentionMask mask = build_attention_mask(masked.masked_sequence, 0);
          const Tensor h0 = embed(masked.masked_sequence, quartette.regions, *params);
          const Tensor encoded = encode(h0, *params, mask);
          const Tensor cmtl = cmtl_loss(encoded, masked, *params);
          const Tensor ccl4 =
              ccl4_loss(ccl4_head(gather_rows(encoded, {0}), *params), label);
          loss = total_loss(cmtl, ccl4, Phase::both);
          outcome.cmtl_backward_count += 1;
        } else {
          const AttentionMask mask = build_attention_mask(seq, 0);
          const Tensor h0 = embed(seq, quartette.regions, *params);
          const Tensor encoded = encode(h0, *params, mask);
          const Tensor ccl4 =
              ccl4_loss(ccl4_head(gather_rows(encoded, {0}), *params), label);
          loss = total_loss(Tensor(), ccl4, Phase::ccl4_only);
        }
        batch_sum.cmtl += loss.breakdown.cmtl;
        batch_sum.ccl4 += loss.breakdown.ccl4;
        batch_sum.total += loss.breakdown.total;
        tape.backward(scale(loss.loss, 1.0 / state.batch_size));
      }
      adam_step(params->parameters(), lr);
      StepRecord rec;
      rec.step = static_cast<long>(state.global_step);
      rec.phase = phase == Phase::both ? 1 : 2;
      rec.lr = lr;
      rec.cmtl = batch_sum.cmtl / state.batch_size;
      rec.ccl4 = batch_sum.ccl4 / state.batch_size;
      rec.total = batch_sum.total / state.batch_size;
      outcome.log.steps.push_back(rec);
      epoch_total += rec.total;
    }
    state.epochs_completed = static_cast<uint32_t>(epoch + 1);
    state.rng_state = rng.state();
    std::cout << "epoch " << (epoch + 1) << "/" << total_epochs << " phase "
              << (phase == Phase::both ? 1 : 2) << " mean total loss "
              << epoch_total / static_cast<double>(steps_per_epoch) << "\n";
    if (!config.checkpoint_out.empty()) {
      save_checkpoint(make_checkpoint(*params, vocab, state), config.checkpoint_out);
    }
    if (!eval_items.empty()) {
      EvalOptions opts;
      opts.max_len = static_cast<int>(state.max_len);
      opts.threads = config.eval_threads;
      EpochSnapshot snap;
      snap.epoch = epoch + 1;
      snap.report = evaluate_split(*params, eval_items, vocab, opts);
      std::cout << "  snapshot: mrr " << snap.report.mrr << " mean rank " << snap.report.mean_rank
                << " ndcg " << snap.report.ndcg << "\n";
      outcome.log.snapshots.push_back(snap);
    }
  }

  outcome.final_checkpoint = make_checkpoint(*params, vocab, state);
  if (!config.trainlog_path.empty()) outcome.log.write_tsv(config.trainlog_path);
  return outcome;
}

EvaluateOutcome cmd_evaluate(const std::string& checkpoint_path, const std::string& dialog_path,
                             const std::string& features_path, const std::string& dump_path,
                             int threads) {
  const Checkpoint ckpt = load_checkpoint(checkpoint_path);
  LoadedModel model = load_model(ckpt);
  const auto dialogs = load_dialogs(dialog_path);
  const FeatureStore features = load_features(features_path);
  EvaluateOutcome outcome;
  outcome.items =
      build_eval_items(dialogs, features, static_cast<int>(ckpt.trainer.history_turns));
  EvalOptions opts;
  opts.max_len = static_cast<int>(ckpt.trainer.max_len);
  opts.threads = threads;
  outcome.report = evaluate_split(*model.params, outcome.items, model.vocab, opts);
  if (!dump_path.empty()) {
    outcome.scores.reserve(outcome.items.size());
    for (const auto& item : outcome.items) {
      outcome.scores.push_back(score_candidates(*model.params, item.context, item.candidates,
                                                model.vocab,
                                                static_cast<int>(ckpt.trainer.max_len)));
    }
    dump_predictions(outcome.items, outcome.scores, dump_path);
  }
  return outcome;
}

std::vector<RankEntry> cmd_rank(const std::string& checkpoint_path, const std::string& dialog_path,
                                const std::string& features_path, int dialog_index, int round,
                                int top_n) {
  const Checkpoint ckpt = load_checkpoint(checkpoint_path);
  LoadedModel model = load_model(ckpt);
  const auto dialogs = load_dialogs(dialog_path);
  if (dialog_index < 0 || dialog_index >= static_cast<int>(dialogs.size())) {
    throw IndexError("rank: dialog index " + std::to_string(dialog_index) + " outside dataset of " +
                     std::to_string(dialogs.size()) + " dialogs");
  }
  const FeatureStore features = load_features(features_path);
  const auto items = build_eval_items({dialogs[static_cast<size_t>(dialog_index)]}, features,
                                      static_cast<int>(ckpt.trainer.history_turns));
  if (round < 0 || round >= static_cast<int>(items.size())) {
    throw IndexError("rank: round " + std::to_string(round) + " outside dialog with " +
                     std::to_string(items.size()) + " rounds");
  }
  const EvalItem& item = items[static_cast<size_t>(round)];
  const auto scores = score_candidates(*model.params, item.context, item.candidates, model.vocab,
                                       static_cast<int>(ckpt.trainer.max_len));
  const RankingResult ranking = rank(scores);
  std::vector<RankEntry> listing;
  const int n = std::min<int>(top_n, static_cast<int>(ranking.order.size()));
  for (int i = 0; i < n; ++i) {
    const int ci = ranking.order[static_cast<size_t>(i)];
    RankEntry entry;
    entry.candidate_index = ci;
    entry.score = scores[static_cast<size_t>(ci)];
    entry.text = item.candidates.candidates[static_cast<size_t>(ci)];
    entry.is_gt = ci == item.candidates.gt_index;
    listing.push_back(std::move(entry));
  }
  return listing;
}

}  // namespace icmu
