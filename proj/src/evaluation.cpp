#include "icmu/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <thread>

#include "icmu/objectives.hpp"

namespace icmu {

std::vector<double> score_candidates(const TransformerParams& params, const EvalContext& context,
                                     const CandidateSet& candidates, const Vocabulary& vocab,
                                     int max_len) {
  std::vector<double> scores;
  scores.reserve(candidates.candidates.size());
  for (const auto& candidate : candidates.candidates) {
    TokenSequence seq = pack_sequence(context.regions, context.caption, context.history,
                                      context.question, candidate, vocab, max_len);
    AttentionMask mask = build_attention_mask(seq, 0);
    Tensor h0 = embed(seq, context.regions, params);
    Tensor encoded = encode(h0, params, mask);
    Tensor logits = ccl4_head(gather_rows(encoded, {0}), params);
    scores.push_back(softmax_values(logits.values())[0]);
  }
  return scores;
}

RankingResult rank(const std::vector<double>& scores) {
  for (double s : scores) {
    if (!std::isfinite(s)) throw ValidationError("rank: non-finite score");
  }
  RankingResult result;
  result.scores = scores;
  result.order.resize(scores.size());
  std::iota(result.order.begin(), result.order.end(), 0);
  std::stable_sort(result.order.begin(), result.order.end(),
                   [&](int a, int b) { return scores[static_cast<size_t>(a)] > scores[static_cast<size_t>(b)]; });
  return result;
}

int rank_of(const RankingResult& result, int gt_index) {
  for (size_t i = 0; i < result.order.size(); ++i) {
    if (result.order[i] == gt_index) return static_cast<int>(i) + 1;
  }
  throw IndexError("rank_of: index " + std::to_string(gt_index) + " not in the ranking");
}

double mrr_of(const RankingResult& result, int gt_index) {
  return 1.0 / static_cast<double>(rank_of(result, gt_index));
}

int r_at_k(const RankingResult& result, int gt_index, int k) {
  return rank_of(result, gt_index) <= k ? 1 : 0;
}

int mean_rank_of(const RankingResult& result, int gt_index) { return rank_of(result, gt_index); }

std::optional<double> ndcg_of(const RankingResult& result, std::span<const double> relevance) {
  if (relevance.size() != result.order.size()) {
    throw ShapeError("ndcg: relevance length " + std::to_string(relevance.size()) +
                     " does not match " + std::to_string(result.order.size()) + " candidates");
  }
  int top_k = 0;
  for (double r : relevance) {
    if (r > 0.0) ++top_k;
  }
  if (top_k == 0) return std::nullopt;
  double dcg = 0.0;
  for (int i = 0; i < top_k; ++i) {
    const double rel = relevance[static_cast<size_t>(result.order[static_cast<size_t>(i)])];
    dcg += rel / std::log2(static_cast<double>(i) + 2.0);
  }
  std::vector<double> ideal(relevance.begin(), relevance.end());
  std::sort(ideal.begin(), ideal.end(), std::greater<>());
  double idcg = 0.0;
  for (int i = 0; i < top_k; ++i) {
    idcg += ideal[static_cast<size_t>(i)] / std::log2(static_cast<double>(i) + 2.0);
  }
  return dcg / idcg;
}

namespace {

struct PerExample {
  int rank = 0;
  std::optional<double> ndcg;
};

PerExample evaluate_one(const ScoreFn& scorer, const EvalItem& item) {
  const RankingResult result = rank(scorer(item));
  PerExample out;
  out.rank = rank_of(result, item.candidates.gt_index);
  if (item.candidates.dense_relevance) {
    out.ndcg = ndcg_of(result, *item.candidates.dense_relevance);
  } else {
    // binary substitute keeps NDCG defined on synthetic data
    std::vector<double> binary(item.candidates.candidates.size(), 0.0);
    binary[static_cast<size_t>(item.candidates.gt_index)] = 1.0;
    out.ndcg = ndcg_of(result, binary);
  }
  return out;
}

}  // namespace

MetricReport evaluate_split_with(const ScoreFn& scorer, std::span<const EvalItem> items,
                                 int threads) {
  if (items.empty()) throw ValidationError("evaluate_split: empty dataset");
  std::vector<PerExample> results(items.size());
  threads = std::max(1, threads);
  if (threads == 1) {
    for (size_t i = 0; i < items.size(); ++i) {
      results[i] = evaluate_one(scorer, items[i]);
    }
  } else {
    // scoring is read-only; static partition keeps the reduction order fixed
    std::vector<std::thread> workers;
    for (int t = 0; t < threads; ++t) {
      workers.emplace_back([&, t] {
        for (size_t i = static_cast<size_t>(t); i < items.size(); i += static_cast<size_t>(threads)) {
          results[i] = evaluate_one(scorer, items[i]);
        }
      });
    }
    for (auto& w : workers) w.join();
  }

  MetricReport report;
  report.num_examples = static_cast<int>(items.size());
  double ndcg_sum = 0.0;
  for (const auto& r : results) {
    report.mrr += 1.0 / r.rank;
    report.r_at_1 += r.rank <= 1 ? 1.0 : 0.0;
    report.r_at_5 += r.rank <= 5 ? 1.0 : 0.0;
    report.r_at_10 += r.rank <= 10 ? 1.0 : 0.0;
    report.mean_rank += r.rank;
    if (r.ndcg) {
      ndcg_sum += *r.ndcg;
      ++report.ndcg_examples;
    }
  }
  const double n = static_cast<double>(report.num_examples);
  report.mrr /= n;
  report.r_at_1 /= n;
  report.r_at_5 /= n;
  report.r_at_10 /= n;
  report.mean_rank /= n;
  report.ndcg = report.ndcg_examples > 0 ? ndcg_sum / report.ndcg_examples : 0.0;
  return report;
}

MetricReport evaluate_split(const TransformerParams& params, std::span<const EvalItem> items,
                            const Vocabulary& vocab, const EvalOptions& options) {
  const ScoreFn scorer = [&](const EvalItem& item) {
    return score_candidates(params, item.context, item.candidates, vocab, options.max_len);
  };
  return evaluate_split_with(scorer, items, options.threads);
}

std::vector<EvalItem> build_eval_items(const std::vector<DialogRecord>& dialogs,
                                       const FeatureStore& features, int history_turns) {
  std::vector<EvalItem> items;
  for (const auto& rec : dialogs) {
    const auto& regions = features.regions_for(rec.image_id);
    std::vector<QaTurn> history;
    for (size_t r = 0; r < rec.rounds.size(); ++r) {
      const auto& round = rec.rounds[r];
      EvalItem item;
      item.image_id = rec.image_id;
      item.round = static_cast<int>(r);
      item.context.image_id = rec.image_id;
      item.context.regions = regions;
      item.context.caption = rec.caption;
      item.context.history = truncate_history(history, history_turns);
      item.context.question = round.question;
      item.candidates.candidates = round.candidates;
      item.candidates.gt_index = round.gt_index;
      item.candidates.dense_relevance = round.relevance;
      items.push_back(std::move(item));
      history.push_back({round.question, round.answer});
    }
  }
  return items;
}

void dump_predictions(std::span<const EvalItem> items,
                      const std::vector<std::vector<double>>& all_scores, const std::string& path) {
  if (items.size() != all_scores.size()) {
    throw ShapeError("dump_predictions: item/score count mismatch");
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ParseError(path + ": cannot open for writing");
  char buf[32];
  for (size_t i = 0; i < items.size(); ++i) {
    out << items[i].image_id << '\t' << items[i].round;
    for (double s : all_scores[i]) {
      std::snprintf(buf, sizeof(buf), "%.6f", s);
      out << '\t' << buf;
    }
    out << '\n';
  }
}

}  // namespace icmu
