#include "icmu/objectives.hpp"

namespace icmu {

namespace {

std::vector<int> eligible_positions(const TokenSequence& seq) {
  std::vector<int> eligible;
  for (int i = 0; i < seq.length(); ++i) {
    // word ids live above the reserved range; region slots carry [PAD]
    if (seq.token_ids[static_cast<size_t>(i)] >= Vocabulary::kNumReserved) {
      eligible.push_back(i);
    }
  }
  return eligible;
}

}  // namespace

MaskedBatch apply_token_masking(const TokenSequence& seq, double rate, Rng& rng) {
  const std::vector<int> eligible = eligible_positions(seq);
  if (eligible.empty()) {
    throw ValidationError("apply_token_masking: sequence has no maskable text token");
  }
  MaskedBatch batch;
  batch.masked_sequence = seq;
  for (int pos : eligible) {
    if (rng.bernoulli(rate)) {
      batch.masked_positions.push_back(pos);
    }
  }
  if (batch.masked_positions.empty()) {
    batch.masked_positions.push_back(
        eligible[static_cast<size_t>(rng.uniform_int(static_cast<long>(eligible.size())))]);
  }
  for (int pos : batch.masked_positions) {
    batch.original_ids.push_back(seq.token_ids[static_cast<size_t>(pos)]);
    batch.masked_sequence.token_ids[static_cast<size_t>(pos)] = Vocabulary::kMask;
  }
  return batch;
}

Tensor cmtl_loss(const Tensor& hidden, const MaskedBatch& masked, const TransformerParams& params) {
  for (int pos : masked.masked_positions) {
    if (pos < 0 || pos >= hidden.rows()) {
      throw IndexError("cmtl_loss: masked position " + std::to_string(pos) +
                       " outside the hidden sequence");
    }
  }
  Tensor rows = gather_rows(hidden, masked.masked_positions);
  Tensor logits = add_row_broadcast(matmul(rows, params.token_head_w()->tensor),
                                    params.token_head_b()->tensor);
  return cross_entropy(logits, masked.original_ids);
}

Tensor ccl4_head(const Tensor& h_cls, const TransformerParams& params) {
  Tensor row = h_cls.ndim() == 1 ? reshape(h_cls, {1, h_cls.dim(0)}) : h_cls;
  if (row.rows() != 1 || row.cols() != params.config().hidden_dim) {
    throw ShapeError("ccl4_head: expected a single d_h row, got " + shape_str(h_cls.shape()));
  }
  Tensor logits = add_row_broadcast(matmul(row, params.contrast_head_w()->tensor),
                                    params.contrast_head_b()->tensor);
  return reshape(logits, {params.config().contrast_classes});
}

Tensor ccl4_loss(const Tensor& logits, const QuartetteLabel& label) {
  if (logits.ndim() != 1) {
    throw ShapeError("ccl4_loss: expected a logit vector, got " + shape_str(logits.shape()));
  }
  const int classes = logits.dim(0);
  if (label.c < 0 || label.c >= classes) {
    throw ValidationError("ccl4_loss: label " + std::to_string(label.c) + " outside [0," +
                          std::to_string(classes) + ")");
  }
  return cross_entropy(reshape(logits, {1, classes}), {label.c});
}

TotalLoss total_loss(const Tensor& cmtl, const Tensor& ccl4, Phase phase) {
  TotalLoss result;
  result.breakdown.cmtl = cmtl.defined() ? cmtl.value() : 0.0;
  result.breakdown.ccl4 = ccl4.value();
  if (phase == Phase::both) {
    result.loss = add(cmtl, ccl4);
  } else {
    result.loss = ccl4;
  }
  result.breakdown.total = result.loss.value();
  return result;
}

}  // namespace icmu
