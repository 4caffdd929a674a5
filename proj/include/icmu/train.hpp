#pragma once

#include <memory>
#include <string>
#include <vector>

#include "icmu/data_io.hpp"
#include "icmu/evaluation.hpp"
#include "icmu/model.hpp"
#include "icmu/sampling.hpp"

namespace icmu {

struct RunConfig {
  // model
  int num_blocks = 2;
  int num_heads = 2;
  int hidden_dim = 64;
  int ffn_dim = 256;
  int visual_dim = 32;
  int regions_per_image = 8;
  int contrast_classes = 4;  // 2 = matched/unmatched ablation head
  int max_len = 256;

  // optimization
  uint64_t seed = 1;
  int batch_size = 16;
  double base_lr = 3e-5;
  double warmup_fraction = 0.1;
  int phase1_epochs = 20;
  int phase2_epochs = 15;
  double vqa_fraction = 0.5;  // phase 1 only; phase 2 draws dialog examples
  int history_turns = 1;
  double masking_rate = 0.15;
  int stop_after_epochs = 0;  // 0 = run the full schedule

  // data and artifacts
  std::string dialog_path;
  std::string vqa_path;       // empty = no VQA stream
  std::string features_path;
  std::string checkpoint_out;
  std::string resume_path;
  std::string trainlog_path;
  std::string eval_dialog_path;    // optional per-epoch metric snapshots
  std::string eval_features_path;
  int eval_threads = 1;

  void validate() const;
};

// Flat single-record config file, same line-delimited syntax as the data
// files. Keys mirror the CLI flags.
RunConfig load_run_config(const std::string& path);

struct StepRecord {
  long step = 0;
  int phase = 1;
  double lr = 0.0;
  double cmtl = 0.0;
  double ccl4 = 0.0;
  double total = 0.0;
};

struct EpochSnapshot {
  int epoch = 0;
  MetricReport report;
};

struct TrainLog {
  std::vector<StepRecord> steps;
  std::vector<EpochSnapshot> snapshots;

  void write_tsv(const std::string& path) const;
};

struct TrainOutcome {
  TrainLog log;
  Checkpoint final_checkpoint;
  long cmtl_backward_count = 0;  // CMTL losses that contributed gradients
  size_t vqa_converted = 0;
  size_t vqa_skipped = 0;
};

TrainOutcome cmd_train(const RunConfig& config);

// Rebuilds a model from a checkpoint.
struct LoadedModel {
  Vocabulary vocab;
  std::unique_ptr<TransformerParams> params;
};
LoadedModel load_model(const Checkpoint& ckpt);

struct EvaluateOutcome {
  MetricReport report;
  std::vector<EvalItem> items;
  std::vector<std::vector<double>> scores;
};

EvaluateOutcome cmd_evaluate(const std::string& checkpoint_path, const std::string& dialog_path,
                             const std::string& features_path, const std::string& dump_path,
                             int threads);

struct RankEntry {
  int candidate_index = 0;
  double score = 0.0;
  std::string text;
  bool is_gt = false;
};

std::vector<RankEntry> cmd_rank(const std::string& checkpoint_path, const std::string& dialog_path,
                                const std::string& features_path, int dialog_index, int round,
                                int top_n = 8);

}  // namespace icmu
