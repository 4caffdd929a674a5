#include <cstdio>
#include <iostream>

#include <CLI11.hpp>

#include "icmu/data_io.hpp"
#include "icmu/train.hpp"

namespace {

using icmu::RunConfig;

// train flags land in this mirror first; --config provides the base values
// and explicitly passed flags override them.
struct TrainArgs {
  RunConfig cfg;
  std::string config_path;
};

void add_train_flags(CLI::App* cmd, TrainArgs& args) {
  cmd->add_option("--config", args.config_path, "config record file (single JSON line)");
  cmd->add_option("--seed", args.cfg.seed, "RNG seed")->required();
  cmd->add_option("--dialogs", args.cfg.dialog_path, "dialog dataset (JSON lines)");
  cmd->add_option("--vqa", args.cfg.vqa_path, "VQA dataset (JSON lines)");
  cmd->add_option("--features", args.cfg.features_path, "region feature file");
  cmd->add_option("--checkpoint-out", args.cfg.checkpoint_out, "checkpoint written each epoch");
  cmd->add_option("--resume", args.cfg.resume_path, "checkpoint to resume from");
  cmd->add_option("--trainlog", args.cfg.trainlog_path, "tab-separated per-step log");
  cmd->add_option("--eval-dialogs", args.cfg.eval_dialog_path, "held-out dialogs for snapshots");
  cmd->add_option("--eval-features", args.cfg.eval_features_path, "held-out feature file");
  cmd->add_option("--eval-threads", args.cfg.eval_threads, "threads for snapshot evaluation");
  cmd->add_option("--num-blocks", args.cfg.num_blocks, "transformer blocks");
  cmd->add_option("--num-heads", args.cfg.num_heads, "attention heads");
  cmd->add_option("--hidden-dim", args.cfg.hidden_dim, "hidden dimension");
  cmd->add_option("--ffn-dim", args.cfg.ffn_dim, "feedforward dimension");
  cmd->add_option("--visual-dim", args.cfg.visual_dim, "RoI feature length");
  cmd->add_option("--regions-per-image", args.cfg.regions_per_image, "regions per image");
  cmd->add_option("--contrast-classes", args.cfg.contrast_classes, "4-way or 2-way head");
  cmd->add_option("--max-len", args.cfg.max_len, "maximum packed sequence length");
  cmd->add_option("--batch-size", args.cfg.batch_size, "examples per optimizer step");
  cmd->add_option("--base-lr", args.cfg.base_lr, "peak learning rate");
  cmd->add_option("--warmup-fraction", args.cfg.warmup_fraction, "warmup fraction of total steps");
  cmd->add_option("--phase1-epochs", args.cfg.phase1_epochs, "joint-loss epochs");
  cmd->add_option("--phase2-epochs", args.cfg.phase2_epochs, "contrastive-only epochs");
  cmd->add_option("--vqa-fraction", args.cfg.vqa_fraction, "share of VQA draws in phase 1");
  cmd->add_option("--history-turns", args.cfg.history_turns, "dialog turns kept as history");
  cmd->add_option("--masking-rate", args.cfg.masking_rate, "token masking probability");
  cmd->add_option("--stop-after-epochs", args.cfg.stop_after_epochs,
                  "stop early after this many epochs (0 = full schedule)");
}

RunConfig resolve_train_config(CLI::App* cmd, const TrainArgs& args) {
  if (args.config_path.empty()) return args.cfg;
  RunConfig cfg = icmu::load_run_config(args.config_path);
  // explicit flags win over the config file
  auto take_if_set = [&](const char* flag, auto member) {
    if (cmd->count(flag) > 0) cfg.*member = args.cfg.*member;
  };
  take_if_set("--seed", &RunConfig::seed);
  take_if_set("--dialogs", &RunConfig::dialog_path);
  take_if_set("--vqa", &RunConfig::vqa_path);
  take_if_set("--features", &RunConfig::features_path);
  take_if_set("--checkpoint-out", &RunConfig::checkpoint_out);
  take_if_set("--resume", &RunConfig::resume_path);
  take_if_set("--trainlog", &RunConfig::trainlog_path);
  take_if_set("--eval-dialogs", &RunConfig::eval_dialog_path);
  take_if_set("--eval-features", &RunConfig::eval_features_path);
  take_if_set("--eval-threads", &RunConfig::eval_threads);
  take_if_set("--num-blocks", &RunConfig::num_blocks);
  take_if_set("--num-heads", &RunConfig::num_heads);
  take_if_set("--hidden-dim", &RunConfig::hidden_dim);
  take_if_set("--ffn-dim", &RunConfig::ffn_dim);
  take_if_set("--visual-dim", &RunConfig::visual_dim);
  take_if_set("--regions-per-image", &RunConfig::regions_per_image);
  take_if_set("--contrast-classes", &RunConfig::contrast_classes);
  take_if_set("--max-len", &RunConfig::max_len);
  take_if_set("--batch-size", &RunConfig::batch_size);
  take_if_set("--base-lr", &RunConfig::base_lr);
  take_if_set("--warmup-fraction", &RunConfig::warmup_fraction);
  take_if_set("--phase1-epochs", &RunConfig::phase1_epochs);
  take_if_set("--phase2-epochs", &RunConfig::phase2_epochs);
  take_if_set("--vqa-fraction", &RunConfig::vqa_fraction);
  take_if_set("--history-turns", &RunConfig::history_turns);
  take_if_set("--masking-rate", &RunConfig::masking_rate);
  take_if_set("--stop-after-epochs", &RunConfig::stop_after_epochs);
  return cfg;
}

void print_report(const icmu::MetricReport& report) {
  char buf[64];
  auto line = [&](const char* name, double v) {
    std::snprintf(buf, sizeof(buf), "%-10s %.6f", name, v);
    std::cout << buf << "\n";
  };
  line("ndcg", report.ndcg);
  line("mrr", report.mrr);
  line("r@1", report.r_at_1);
  line("r@5", report.r_at_5);
  line("r@10", report.r_at_10);
  line("mean", report.mean_rank);
  std::cout << "examples   " << report.num_examples << " (ndcg over " << report.ndcg_examples
            << ")\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"masked-attention visual dialog ranker"};
  app.require_subcommand(1);

  TrainArgs train_args;
  CLI::App* train_cmd = app.add_subcommand("train", "two-phase training run");
  add_train_flags(train_cmd, train_args);

  std::string eval_checkpoint, eval_dialogs, eval_features, eval_dump;
  int eval_threads = 1;
  CLI::App* eval_cmd = app.add_subcommand("evaluate", "retrieval metrics over a dataset");
  eval_cmd->add_option("--checkpoint", eval_checkpoint)->required();
  eval_cmd->add_option("--dialogs", eval_dialogs)->required();
  eval_cmd->add_option("--features", eval_features)->required();
  eval_cmd->add_option("--dump", eval_dump, "tab-separated score dump");
  eval_cmd->add_option("--threads", eval_threads);

  std::string rank_checkpoint, rank_dialogs, rank_features;
  int rank_dialog_index = 0, rank_round = 0, rank_top = 8;
  CLI::App* rank_cmd = app.add_subcommand("rank", "top-N candidate listing for one round");
  rank_cmd->add_option("--checkpoint", rank_checkpoint)->required();
  rank_cmd->add_option("--dialogs", rank_dialogs)->required();
  rank_cmd->add_option("--features", rank_features)->required();
  rank_cmd->add_option("--dialog-index", rank_dialog_index)->required();
  rank_cmd->add_option("--round", rank_round)->required();
  rank_cmd->add_option("--top", rank_top);

  icmu::SyntheticSpec gen_spec;
  std::string gen_dialogs, gen_vqa, gen_features;
  CLI::App* gen_cmd = app.add_subcommand("gen-synthetic", "generate a synthetic dataset");
  gen_cmd->add_option("--seed", gen_spec.seed)->required();
  gen_cmd->add_option("--num-images", gen_spec.num_images);
  gen_cmd->add_option("--vocab-size", gen_spec.vocab_size);
  gen_cmd->add_option("--n-c", gen_spec.n_c, "candidates per round");
  gen_cmd->add_option("--k", gen_spec.k, "regions per image");
  gen_cmd->add_option("--d-v", gen_spec.d_v, "RoI feature length");
  gen_cmd->add_option("--rounds-per-image", gen_spec.rounds_per_image);
  gen_cmd->add_option("--vqa-per-image", gen_spec.vqa_per_image);
  gen_cmd->add_option("--dialogs", gen_dialogs)->required();
  gen_cmd->add_option("--vqa", gen_vqa)->required();
  gen_cmd->add_option("--features", gen_features)->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (train_cmd->parsed()) {
      const RunConfig cfg = resolve_train_config(train_cmd, train_args);
      const auto outcome = icmu::cmd_train(cfg);
      std::cout << "trained " << outcome.log.steps.size() << " steps";
      if (!cfg.checkpoint_out.empty()) std::cout << ", checkpoint at " << cfg.checkpoint_out;
      std::cout << "\n";
      if (outcome.vqa_skipped > 0) {
        std::cout << "skipped " << outcome.vqa_skipped << " VQA records without captions\n";
      }
    } else if (eval_cmd->parsed()) {
      const auto outcome =
          icmu::cmd_evaluate(eval_checkpoint, eval_dialogs, eval_features, eval_dump, eval_threads);
      print_report(outcome.report);
    } else if (rank_cmd->parsed()) {
      const auto listing = icmu::cmd_rank(rank_checkpoint, rank_dialogs, rank_features,
                                          rank_dialog_index, rank_round, rank_top);
      char buf[32];
      for (size_t i = 0; i < listing.size(); ++i) {
        std::snprintf(buf, sizeof(buf), "%.6f", listing[i].score);
        std::cout << (i + 1) << ". [" << buf << "] " << listing[i].text
                  << (listing[i].is_gt ? "   <-- GT" : "") << "\n";
      }
    } else if (gen_cmd->parsed()) {
      icmu::generate_synthetic(gen_spec, gen_dialogs, gen_vqa, gen_features);
      std::cout << "wrote " << gen_dialogs << ", " << gen_vqa << ", " << gen_features << "\n";
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
