#include "icmu/backbone.hpp"

#include <cmath>
#include <limits>

namespace icmu {

AttentionMask build_attention_mask(const TokenSequence& seq, int padding_len) {
  const int n = seq.length();
  if (padding_len < 0 || padding_len >= n) {
    throw ValidationError("attention mask: padding_len " + std::to_string(padding_len) +
                          " invalid for length " + std::to_string(n));
  }
  const double neg_inf = -std::numeric_limits<double>::infinity();
  Tensor m = Tensor::zeros({n, n});
  const int first_pad = n - padding_len;
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) {
      if (i == j) continue;
      if (i >= first_pad || j >= first_pad) {
        m.values()[static_cast<size_t>(i) * n + j] = neg_inf;
      }
    }
  }
  return AttentionMask{std::move(m)};
}

Tensor attention(const Tensor& h_prev, const BlockWeights& block, const AttentionMask& mask) {
  const int n = h_prev.rows();
  if (mask.matrix.rows() != n || mask.matrix.cols() != n) {
    throw ShapeError("attention: mask " + shape_str(mask.matrix.shape()) +
                     " does not match sequence length " + std::to_string(n));
  }
  const int d_k = block.heads[0].wq->tensor.cols();
  const double inv_sqrt_dk = 1.0 / std::sqrt(static_cast<double>(d_k));
  std::vector<Tensor> head_outputs;
  head_outputs.reserve(block.heads.size());
  for (const auto& head : block.heads) {
    Tensor q = matmul(h_prev, head.wq->tensor);
    Tensor k = matmul(h_prev, head.wk->tensor);
    Tensor v = matmul(h_prev, head.wv->tensor);
    Tensor scores = scale(matmul(q, transpose(k)), inv_sqrt_dk);
    Tensor weights = masked_softmax(scores, mask.matrix);
    head_outputs.push_back(matmul(weights, v));
  }
  Tensor concat = concat_cols(head_outputs);
  return add_row_broadcast(matmul(concat, block.attn_out_w->tensor), block.attn_out_b->tensor);
}

Tensor transformer_block(const Tensor& h_prev, const BlockWeights& block,
                         const AttentionMask& mask) {
  Tensor attended = attention(h_prev, block, mask);
  Tensor h1 = layer_norm(add(h_prev, attended), block.ln1_gain->tensor, block.ln1_bias->tensor,
                         kLayerNormEps);
  Tensor f = add_row_broadcast(matmul(h1, block.ffn_w1->tensor), block.ffn_b1->tensor);
  f = gelu(f);
  f = add_row_broadcast(matmul(f, block.ffn_w2->tensor), block.ffn_b2->tensor);
  return layer_norm(add(h1, f), block.ln2_gain->tensor, block.ln2_bias->tensor, kLayerNormEps);
}

Tensor encode(const Tensor& h0, const TransformerParams& params, const AttentionMask& mask) {
  Tensor h = h0;
  for (const auto& block : params.blocks()) {
    h = transformer_block(h, block, mask);
  }
  return h;
}

}  // namespace icmu
