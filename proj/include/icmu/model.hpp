#pragma once

#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "icmu/optim.hpp"
#include "icmu/rng.hpp"
#include "icmu/tensor.hpp"

namespace icmu {

struct ModelConfig {
  int num_blocks = 2;
  int num_heads = 2;
  int hidden_dim = 64;
  int ffn_dim = 256;
  int vocab_size = 0;  // filled in once the vocabulary is known
  int max_positions = 256;
  int visual_dim = 32;        // d_v
  int regions_per_image = 8;  // k
  int contrast_classes = 4;   // 2 for the matched/unmatched ablation

  int head_dim() const { return hidden_dim / num_heads; }
  void validate() const;
};

struct HeadWeights {
  Parameter* wq = nullptr;
  Parameter* wk = nullptr;
  Parameter* wv = nullptr;
};

struct BlockWeights {
  std::vector<HeadWeights> heads;
  Parameter* attn_out_w = nullptr;
  Parameter* attn_out_b = nullptr;
  Parameter* ffn_w1 = nullptr;
  Parameter* ffn_b1 = nullptr;
  Parameter* ffn_w2 = nullptr;
  Parameter* ffn_b2 = nullptr;
  Parameter* ln1_gain = nullptr;
  Parameter* ln1_bias = nullptr;
  Parameter* ln2_gain = nullptr;
  Parameter* ln2_bias = nullptr;
};

struct EmbeddingWeights {
  Parameter* token = nullptr;     // [vocab x d_h]
  Parameter* position = nullptr;  // [max_positions x d_h]
  Parameter* segment = nullptr;   // [2 x d_h]
  Parameter* roi_w = nullptr;     // [d_v x d_h]
  Parameter* roi_b = nullptr;
  Parameter* loc_w = nullptr;  // [7 x d_h]
  Parameter* loc_b = nullptr;
  Parameter* ln_gain = nullptr;
  Parameter* ln_bias = nullptr;
};

// Layer-norm epsilon used everywhere in the model.
constexpr double kLayerNormEps = 1e-12;

// All learnable weights, registered under unique names so checkpoints can
// address them. Projections start at normal(0, 0.02), biases at zero,
// layer-norm gains at one.
class TransformerParams {
public:
  TransformerParams(const ModelConfig& config, Rng& rng);

  const ModelConfig& config() const { return config_; }
  const EmbeddingWeights& embeddings() const { return emb_; }
  const std::vector<BlockWeights>& blocks() const { return blocks_; }
  Parameter* token_head_w() const { return token_head_w_; }
  Parameter* token_head_b() const { return token_head_b_; }
  Parameter* contrast_head_w() const { return contrast_head_w_; }
  Parameter* contrast_head_b() const { return contrast_head_b_; }

  const std::vector<Parameter*>& parameters() const { return order_; }
  Parameter* find(const std::string& name) const;
  void zero_grads();

private:
  Parameter* register_param(const std::string& name, Shape shape, double init_std, Rng& rng);
  Parameter* register_const(const std::string& name, Shape shape, double value);

  ModelConfig config_;
  std::vector<std::unique_ptr<Parameter>> owned_;
  std::vector<Parameter*> order_;
  std::unordered_map<std::string, Parameter*> by_name_;
  EmbeddingWeights emb_;
  std::vector<BlockWeights> blocks_;
  Parameter* token_head_w_ = nullptr;
  Parameter* token_head_b_ = nullptr;
  Parameter* contrast_head_w_ = nullptr;
  Parameter* contrast_head_b_ = nullptr;
};

}  // namespace icmu
