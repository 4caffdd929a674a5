#pragma once

#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "icmu/backbone.hpp"
#include "icmu/model.hpp"
#include "icmu/sampling.hpp"

namespace icmu {

struct CandidateSet {
  std::vector<std::string> candidates;
  int gt_index = 0;
  std::optional<std::vector<double>> dense_relevance;

  int count() const { return static_cast<int>(candidates.size()); }
};

// Deterministic ranking: descending score, ties broken by ascending index.
struct RankingResult {
  std::vector<double> scores;
  std::vector<int> order;  // permutation, best first
};

struct MetricReport {
  double ndcg = 0.0;
  double mrr = 0.0;
  double r_at_1 = 0.0;
  double r_at_5 = 0.0;
  double r_at_10 = 0.0;
  double mean_rank = 0.0;
  int num_examples = 0;
  int ndcg_examples = 0;  // examples whose relevance defines NDCG
};

// The dialog context a candidate is scored against.
struct EvalContext {
  uint64_t image_id = 0;
  std::vector<VisualRegion> regions;
  std::string caption;
  std::vector<QaTurn> history;
  std::string question;
};

struct EvalItem {
  uint64_t image_id = 0;
  int round = 0;
  EvalContext context;
  CandidateSet candidates;
};

// Packs each candidate into the answer slot, encodes, and returns the
// softmax probability of the matched class (c = 0).
std::vector<double> score_candidates(const TransformerParams& params, const EvalContext& context,
                                     const CandidateSet& candidates, const Vocabulary& vocab,
                                     int max_len);

RankingResult rank(const std::vector<double>& scores);

// 1-based position of the candidate in the ranking order.
int rank_of(const RankingResult& result, int gt_index);
double mrr_of(const RankingResult& result, int gt_index);
int r_at_k(const RankingResult& result, int gt_index, int k);
int mean_rank_of(const RankingResult& result, int gt_index);

// NDCG truncated at K = number of positively-relevant candidates; nullopt
// when the relevance vector has no positive entry.
std::optional<double> ndcg_of(const RankingResult& result, std::span<const double> relevance);

struct EvalOptions {
  int max_len = 256;
  int threads = 1;
};

// Scorer signature used by the aggregation path; the model scorer is one
// instance, test oracles are another.
using ScoreFn = std::function<std::vector<double>(const EvalItem&)>;

MetricReport evaluate_split_with(const ScoreFn& scorer, std::span<const EvalItem> items,
                                 int threads = 1);

MetricReport evaluate_split(const TransformerParams& params, std::span<const EvalItem> items,
                            const Vocabulary& vocab, const EvalOptions& options = {});

// Builds evaluation items from dialog records (ground-truth history,
// truncated like training).
std::vector<EvalItem> build_eval_items(const std::vector<DialogRecord>& dialogs,
                                       const FeatureStore& features, int history_turns);

// Tab-separated dump: image_id, round, then every candidate score with six
// decimals.
void dump_predictions(std::span<const EvalItem> items,
                      const std::vector<std::vector<double>>& all_scores, const std::string& path);

}  // namespace icmu
