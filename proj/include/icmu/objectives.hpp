#pragma once

#include "icmu/encoding.hpp"
#include "icmu/model.hpp"
#include "icmu/rng.hpp"
#include "icmu/tensor.hpp"

namespace icmu {

// A sequence with [MASK] substitutions and the bookkeeping needed to score
// the model's reconstructions.
struct MaskedBatch {
  TokenSequence masked_sequence;
  std::vector<int> masked_positions;  // strictly increasing
  std::vector<int> original_ids;
};

// 4-way quartette label: 0 matched, 1 polluted image, 2 polluted question,
// 3 polluted answer.
struct QuartetteLabel {
  int c = 0;
};

enum class Phase { both, ccl4_only };

struct LossBreakdown {
  double cmtl = 0.0;
  double ccl4 = 0.0;
  double total = 0.0;
};

// The combined training loss: the graph node to backpropagate plus the
// reported numbers.
struct TotalLoss {
  Tensor loss;
  LossBreakdown breakdown;
};

// Masks each eligible text token independently with the given probability;
// when the draw selects none, one eligible token is force-masked so the
// recovery loss is always defined. Special tokens and region slots are never
// masked.
MaskedBatch apply_token_masking(const TokenSequence& seq, double rate, Rng& rng);

// Token-prediction head at the masked positions, mean cross-entropy against
// the original ids.
Tensor cmtl_loss(const Tensor& hidden, const MaskedBatch& masked, const TransformerParams& params);

// FC classifier over the [CLS] encoding; returns unnormalized class logits.
Tensor ccl4_head(const Tensor& h_cls, const TransformerParams& params);

Tensor ccl4_loss(const Tensor& logits, const QuartetteLabel& label);

// Phase both sums the losses with equal coefficients; phase ccl4_only
// backpropagates the contrastive loss alone while still reporting both.
TotalLoss total_loss(const Tensor& cmtl, const Tensor& ccl4, Phase phase);

}  // namespace icmu
