#include "icmu/encoding.hpp"

#include <algorithm>

namespace icmu {

namespace {

const char* kDegenerateBox = "bounding box has zero area";

}  // namespace

std::array<double, 7> compute_location_vector(const BoundingBox& box, int num_classes) {
  if (box.image_width <= 0 || box.image_height <= 0) {
    throw ValidationError("bounding box: image dimensions must be positive");
  }
  if (box.x1 < 0 || box.y1 < 0 || box.x2 > box.image_width || box.y2 > box.image_height) {
    throw ValidationError("bounding box: corners outside the image frame");
  }
  if (box.x1 >= box.x2 || box.y1 >= box.y2) {
    throw ValidationError(std::string("bounding box: ") + kDegenerateBox);
  }
  if (box.class_id < 0 || box.class_id >= num_classes) {
    throw ValidationError("bounding box: class id " + std::to_string(box.class_id) +
                          " outside [0," + std::to_string(num_classes) + ")");
  }
  const double w = box.image_width, h = box.image_height;
  return {box.x1 / w,
          box.y1 / h,
          box.x2 / w,
          box.y2 / h,
          (box.x2 - box.x1) * (box.y2 - box.y1) / (w * h),
          static_cast<double>(box.class_id) / num_classes,
          box.confidence};
}

TokenSequence pack_sequence(const std::vector<VisualRegion>& regions, const std::string& caption,
                            std::span<const QaTurn> history, const std::string& question,
                            const std::string& candidate_answer, const Vocabulary& vocab,
                            int max_len) {
  const int k = static_cast<int>(regions.size());
  std::vector<int> question_ids = tokenize(question, vocab);
  std::vector<int> answer_ids = tokenize(candidate_answer, vocab);
  if (question_ids.empty()) throw ValidationError("pack_sequence: question is empty");
  if (answer_ids.empty()) throw ValidationError("pack_sequence: candidate answer is empty");

  std::vector<int> caption_ids = tokenize(caption, vocab);
  std::vector<std::vector<int>> turn_ids;
  for (const auto& turn : history) {
    std::vector<int> ids = tokenize(turn.question, vocab);
    const auto a = tokenize(turn.answer, vocab);
    ids.insert(ids.end(), a.begin(), a.end());
    turn_ids.push_back(std::move(ids));
  }

  // fixed structural cost: [CLS] regions [SEP] ... [QUES] q [ANS] a [SEP]
  const int fixed = 1 + k + 1 + 1 + static_cast<int>(question_ids.size()) + 1 +
                    static_cast<int>(answer_ids.size()) + 1;
  auto total_len = [&] {
    int len = fixed + static_cast<int>(caption_ids.size());
    for (const auto& t : turn_ids) len += 1 + static_cast<int>(t.size());
    return len;
  };
  // Overflow policy: drop the oldest history turn first, then trim the
  // caption tail. The question and answer are never truncated.
  size_t first_turn = 0;
  while (total_len() > max_len && first_turn < turn_ids.size()) {
    turn_ids[first_turn].clear();
    ++first_turn;
  }
  turn_ids.erase(turn_ids.begin(), turn_ids.begin() + static_cast<long>(first_turn));
  while (total_len() > max_len && !caption_ids.empty()) caption_ids.pop_back();
  if (total_len() > max_len) {
    throw ValidationError("pack_sequence: question and answer alone exceed max_len " +
                          std::to_string(max_len));
  }

  TokenSequence seq;
  seq.visual_slots = k;
  auto push = [&](int id) { seq.token_ids.push_back(id); };
  push(Vocabulary::kCls);
  seq.cls_index = 0;
  for (int i = 0; i < k; ++i) push(Vocabulary::kPad);  // placeholder ids for region slots
  seq.first_sep_index = seq.length();
  push(Vocabulary::kSep);
  for (int id : caption_ids) push(id);
  for (const auto& t : turn_ids) {
    seq.his_indices.push_back(seq.length());
    push(Vocabulary::kHis);
    for (int id : t) push(id);
  }
  seq.ques_index = seq.length();
  push(Vocabulary::kQues);
  for (int id : question_ids) push(id);
  seq.ans_index = seq.length();
  push(Vocabulary::kAns);
  for (int id : answer_ids) push(id);
  seq.final_sep_index = seq.length();
  push(Vocabulary::kSep);

  const int n = seq.length();
  seq.segment_ids.resize(static_cast<size_t>(n));
  seq.position_ids.resize(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) {
    seq.segment_ids[static_cast<size_t>(i)] = (i <= seq.first_sep_index) ? 0 : 1;
    // regions get position ids 0..k-1 in file order; text keeps its index
    seq.position_ids[static_cast<size_t>(i)] = seq.is_region(i) ? i - 1 : i;
  }
  return seq;
}

void validate_sequence(const TokenSequence& seq, const Vocabulary& vocab) {
  const int n = seq.length();
  if (n == 0) throw ValidationError("sequence: empty");
  if (seq.segment_ids.size() != static_cast<size_t>(n) ||
      seq.position_ids.size() != static_cast<size_t>(n)) {
    throw ValidationError("sequence: id lists have different lengths");
  }
  if (seq.token_ids[0] != Vocabulary::kCls || seq.cls_index != 0) {
    throw ValidationError("sequence: must start with [CLS]");
  }
  if (seq.first_sep_index != seq.visual_slots + 1 ||
      seq.token_ids[static_cast<size_t>(seq.first_sep_index)] != Vocabulary::kSep) {
    throw ValidationError("sequence: first [SEP] must follow the region slots");
  }
  if (seq.final_sep_index != n - 1 || seq.token_ids[static_cast<size_t>(n - 1)] != Vocabulary::kSep) {
    throw ValidationError("sequence: must end with [SEP]");
  }
  if (seq.ques_index < 0 || seq.token_ids[static_cast<size_t>(seq.ques_index)] != Vocabulary::kQues) {
    throw ValidationError("sequence: [QUES] marker missing");
  }
  if (seq.ans_index <= seq.ques_index + 1 ||
      seq.token_ids[static_cast<size_t>(seq.ans_index)] != Vocabulary::kAns) {
    throw ValidationError("sequence: [ANS] marker missing or question span empty");
  }
  if (seq.ans_index + 1 >= seq.final_sep_index) {
    throw ValidationError("sequence: answer span empty");
  }
  for (int idx : seq.his_indices) {
    if (idx <= seq.first_sep_index || idx >= seq.ques_index ||
        seq.token_ids[static_cast<size_t>(idx)] != Vocabulary::kHis) {
      throw ValidationError("sequence: [HIS] marker out of place");
    }
  }
  for (int i = 0; i < n; ++i) {
    const int id = seq.token_ids[static_cast<size_t>(i)];
    if (id < 0 || id >= vocab.size()) {
      throw ValidationError("sequence: token id " + std::to_string(id) + " outside vocabulary");
    }
    const int expected_segment = (i <= seq.first_sep_index) ? 0 : 1;
    if (seq.segment_ids[static_cast<size_t>(i)] != expected_segment) {
      throw ValidationError("sequence: segment id wrong at position " + std::to_string(i));
    }
    const int expected_position = seq.is_region(i) ? i - 1 : i;
    if (seq.position_ids[static_cast<size_t>(i)] != expected_position) {
      throw ValidationError("sequence: position id wrong at position " + std::to_string(i));
    }
  }
}

Tensor embed(const TokenSequence& seq, std::span<const VisualRegion> regions,
             const TransformerParams& params) {
  const auto& emb = params.embeddings();
  const ModelConfig& cfg = params.config();
  const int n = seq.length();
  const int k = seq.visual_slots;
  if (static_cast<int>(regions.size()) != k) {
    throw ShapeError("embed: sequence expects " + std::to_string(k) + " regions, got " +
                     std::to_string(regions.size()));
  }
  if (n > cfg.max_positions) {
    throw ShapeError("embed: sequence length " + std::to_string(n) + " exceeds max_positions " +
                     std::to_string(cfg.max_positions));
  }

  std::vector<Tensor> parts;
  parts.push_back(gather_rows(emb.token->tensor, {seq.token_ids[0]}));
  if (k > 0) {
    std::vector<double> roi(static_cast<size_t>(k) * cfg.visual_dim);
    std::vector<double> loc(static_cast<size_t>(k) * 7);
    for (int i = 0; i < k; ++i) {
      const auto& region = regions[static_cast<size_t>(i)];
      if (static_cast<int>(region.roi_feature.size()) != cfg.visual_dim) {
        throw ShapeError("embed: region " + std::to_string(i) + " feature length " +
                         std::to_string(region.roi_feature.size()) + ", expected " +
                         std::to_string(cfg.visual_dim));
      }
      std::copy(region.roi_feature.begin(), region.roi_feature.end(),
                roi.begin() + static_cast<size_t>(i) * cfg.visual_dim);
      std::copy(region.location.begin(), region.location.end(), loc.begin() + static_cast<size_t>(i) * 7);
    }
    Tensor roi_mat({k, cfg.visual_dim}, std::move(roi));
    Tensor loc_mat({k, 7}, std::move(loc));
    Tensor projected = add(add_row_broadcast(matmul(roi_mat, emb.roi_w->tensor), emb.roi_b->tensor),
                           add_row_broadcast(matmul(loc_mat, emb.loc_w->tensor), emb.loc_b->tensor));
    parts.push_back(projected);
  }
  std::vector<int> tail_ids(seq.token_ids.begin() + k + 1, seq.token_ids.end());
  parts.push_back(gather_rows(emb.token->tensor, tail_ids));

  Tensor content = concat_rows(parts);
  Tensor positions = gather_rows(emb.position->tensor, seq.position_ids);
  Tensor segments = gather_rows(emb.segment->tensor, seq.segment_ids);
  Tensor combined = add(add(content, positions), segments);
  return layer_norm(combined, emb.ln_gain->tensor, emb.ln_bias->tensor, kLayerNormEps);
}

}  // namespace icmu
