#pragma once

#include "icmu/encoding.hpp"
#include "icmu/model.hpp"
#include "icmu/tensor.hpp"

namespace icmu {

// Square additive attention mask: 0 allows attending, -inf prevents it. The
// diagonal is always 0 and every row keeps at least one allowed position.
struct AttentionMask {
  Tensor matrix;  // [n x n]

  int size() const { return matrix.rows(); }
  bool allowed(int from, int to) const { return matrix.at(from, to) == 0.0; }
};

// Bidirectional attention among all real positions; the trailing padding_len
// positions are prevented in both directions (diagonal excepted).
AttentionMask build_attention_mask(const TokenSequence& seq, int padding_len);

// Multi-head scaled dot-product self-attention with output projection.
Tensor attention(const Tensor& h_prev, const BlockWeights& block, const AttentionMask& mask);

// Post-norm residual encoder block: attention + residual + layer norm,
// then linear-gelu-linear FFN + residual + layer norm.
Tensor transformer_block(const Tensor& h_prev, const BlockWeights& block,
                         const AttentionMask& mask);

// Applies all blocks in order; L = 0 returns the input unchanged.
Tensor encode(const Tensor& h0, const TransformerParams& params, const AttentionMask& mask);

}  // namespace icmu
