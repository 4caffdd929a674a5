#pragma once

#include <array>
#include <span>
#include <string>
#include <vector>

#include "icmu/model.hpp"
#include "icmu/tensor.hpp"
#include "icmu/vocab.hpp"

namespace icmu {

struct BoundingBox {
  double x1 = 0, y1 = 0, x2 = 0, y2 = 0;
  double image_width = 0, image_height = 0;
  int class_id = 0;
  double confidence = 1.0;
};

// One detected image region: the RoI feature vector plus the 7-d location
// vector (normalized corners, relative area, class id, confidence).
struct VisualRegion {
  std::vector<double> roi_feature;
  std::array<double, 7> location{};
};

struct QaTurn {
  std::string question;
  std::string answer;
};

// The packed model input: [CLS], k region slots, [SEP], caption tokens,
// per history turn ([HIS], question, answer), [QUES], question, [ANS],
// candidate, [SEP]. Region slots carry [PAD] placeholder ids; their content
// enters through the feature projections in embed().
struct TokenSequence {
  std::vector<int> token_ids;
  std::vector<int> segment_ids;
  std::vector<int> position_ids;
  int visual_slots = 0;  // regions occupy indices 1..visual_slots

  // boundary markers
  int cls_index = 0;
  int first_sep_index = -1;
  int final_sep_index = -1;
  std::vector<int> his_indices;
  int ques_index = -1;
  int ans_index = -1;

  int length() const { return static_cast<int>(token_ids.size()); }
  bool is_region(int i) const { return i >= 1 && i <= visual_slots; }
};

// (x1/W, y1/H, x2/W, y2/H, relative area, class_id/num_classes, confidence)
std::array<double, 7> compute_location_vector(const BoundingBox& box, int num_classes);

TokenSequence pack_sequence(const std::vector<VisualRegion>& regions, const std::string& caption,
                            std::span<const QaTurn> history, const std::string& question,
                            const std::string& candidate_answer, const Vocabulary& vocab,
                            int max_len);

// Checks every TokenSequence layout invariant; throws ValidationError on the
// first violation. Used by tests and by the masking code.
void validate_sequence(const TokenSequence& seq, const Vocabulary& vocab);

// Token/position/segment embeddings for text slots, projected RoI + location
// features for region slots, layer-normalized. Returns [length x d_h].
Tensor embed(const TokenSequence& seq, std::span<const VisualRegion> regions,
             const TransformerParams& params);

}  // namespace icmu
