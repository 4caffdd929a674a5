#include "icmu/model.hpp"

namespace icmu {

void ModelConfig::validate() const {
  if (num_blocks < 0) throw ValidationError("model config: num_blocks must be >= 0");
  if (num_heads <= 0 || hidden_dim <= 0 || ffn_dim <= 0 || vocab_size <= 0 ||
      max_positions <= 0 || visual_dim <= 0 || regions_per_image <= 0) {
    throw ValidationError("model config: all dimensions must be positive");
  }
  if (hidden_dim % num_heads != 0) {
    throw ValidationError("model config: hidden_dim " + std::to_string(hidden_dim) +
                          " not divisible by num_heads " + std::to_string(num_heads));
  }
  if (contrast_classes != 4 && contrast_classes != 2) {
    throw ValidationError("model config: contrast_classes must be 4 or 2");
  }
}

TransformerParams::TransformerParams(const ModelConfig& config, Rng& rng) : config_(config) {
  config_.validate();
  const int d_h = config_.hidden_dim;
  const int d_k = config_.head_dim();
  const double std = 0.02;

  emb_.token = register_param("embed.token", {config_.vocab_size, d_h}, std, rng);
  emb_.position = register_param("embed.position", {config_.max_positions, d_h}, std, rng);
  emb_.segment = register_param("embed.segment", {2, d_h}, std, rng);
  emb_.roi_w = register_param("embed.roi_w", {config_.visual_dim, d_h}, std, rng);
  emb_.roi_b = register_const("embed.roi_b", {d_h}, 0.0);
  emb_.loc_w = register_param("embed.loc_w", {7, d_h}, std, rng);
  emb_.loc_b = register_const("embed.loc_b", {d_h}, 0.0);
  emb_.ln_gain = register_const("embed.ln_gain", {d_h}, 1.0);
  emb_.ln_bias = register_const("embed.ln_bias", {d_h}, 0.0);

  for (int b = 0; b < config_.num_blocks; ++b) {
    const std::string prefix = "block" + std::to_string(b) + ".";
    BlockWeights block;
    for (int h = 0; h < config_.num_heads; ++h) {
      const std::string hp = prefix + "head" + std::to_string(h) + ".";
      HeadWeights head;
      head.wq = register_param(hp + "wq", {d_h, d_k}, std, rng);
      head.wk = register_param(hp + "wk", {d_h, d_k}, std, rng);
      head.wv = register_param(hp + "wv", {d_h, d_k}, std, rng);
      block.heads.push_back(head);
    }
    block.attn_out_w = register_param(prefix + "attn_out_w", {d_h, d_h}, std, rng);
    block.attn_out_b = register_const(prefix + "attn_out_b", {d_h}, 0.0);
    block.ffn_w1 = register_param(prefix + "ffn_w1", {d_h, config_.ffn_dim}, std, rng);
    block.ffn_b1 = register_const(prefix + "ffn_b1", {config_.ffn_dim}, 0.0);
    block.ffn_w2 = register_param(prefix + "ffn_w2", {config_.ffn_dim, d_h}, std, rng);
    block.ffn_b2 = register_const(prefix + "ffn_b2", {d_h}, 0.0);
    block.ln1_gain = register_const(prefix + "ln1_gain", {d_h}, 1.0);
    block.ln1_bias = register_const(prefix + "ln1_bias", {d_h}, 0.0);
    block.ln2_gain = register_const(prefix + "ln2_gain", {d_h}, 1.0);
    block.ln2_bias = register_const(prefix + "ln2_bias", {d_h}, 0.0);
    blocks_.push_back(block);
  }

  token_head_w_ = register_param("token_head.w", {d_h, config_.vocab_size}, std, rng);
  token_head_b_ = register_const("token_head.b", {config_.vocab_size}, 0.0);
  contrast_head_w_ = register_param("contrast_head.w", {d_h, config_.contrast_classes}, std, rng);
  contrast_head_b_ = register_const("contrast_head.b", {config_.contrast_classes}, 0.0);
}

Parameter* TransformerParams::find(const std::string& name) const {
  auto it = by_name_.find(name);
  return it == by_name_.end() ? nullptr : it->second;
}

void TransformerParams::zero_grads() {
  for (Parameter* p : order_) p->zero_grad();
}

Parameter* TransformerParams::register_param(const std::string& name, Shape shape, double init_std,
                                             Rng& rng) {
  std::vector<double> values(static_cast<size_t>(numel(shape)));
  for (double& v : values) v = rng.normal(0.0, init_std);
  auto param = std::make_unique<Parameter>(name, Tensor(std::move(shape), std::move(values)));
  Parameter* raw = param.get();
  if (!by_name_.emplace(name, raw).second) {
    throw ContractError("parameter '" + name + "' registered twice");
  }
  owned_.push_back(std::move(param));
  order_.push_back(raw);
  return raw;
}

Parameter* TransformerParams::register_const(const std::string& name, Shape shape, double value) {
  auto param = std::make_unique<Parameter>(name, Tensor::full(std::move(shape), value));
  Parameter* raw = param.get();
  if (!by_name_.emplace(name, raw).second) {
    throw ContractError("parameter '" + name + "' registered twice");
  }
  owned_.push_back(std::move(param));
  order_.push_back(raw);
  return raw;
}

}  // namespace icmu
