#pragma once

#include <optional>
#include <string>
#include <vector>

#include "icmu/data_io.hpp"
#include "icmu/encoding.hpp"
#include "icmu/objectives.hpp"
#include "icmu/rng.hpp"

namespace icmu {

// One training/evaluation unit: image, dialog context, and the answer slot.
struct Quartette {
  uint64_t image_id = 0;
  std::vector<VisualRegion> regions;
  std::string caption;
  std::vector<QaTurn> history;
  std::string question;
  std::string answer;
};

enum class PollutionKind { none = 0, image = 1, question = 2, answer = 3 };

QuartetteLabel label_of(PollutionKind kind);

// All training examples, dialog-derived first, VQA-derived after.
struct QuartettePool {
  std::vector<Quartette> examples;
  size_t dialog_count = 0;

  size_t size() const { return examples.size(); }
  size_t vqa_count() const { return examples.size() - dialog_count; }
};

// Emits the example unchanged with probability 1/2 (label 0); otherwise
// replaces the image, question, or answer (picked uniformly) with the same
// field of a different pool entry. The donor's field value also differs from
// the original whenever the pool offers such a donor.
std::pair<Quartette, QuartetteLabel> build_training_quartette(const QuartettePool& pool,
                                                              size_t example_index, Rng& rng);

// VQA examples become null-history quartettes; the caption comes from the
// dialog dataset by image id. Records without a matching caption are skipped
// (nullopt) and the caller counts them.
std::optional<Quartette> vqa_to_quartette(const VqaRecord& record,
                                          const std::map<uint64_t, std::string>& caption_lookup);

// Keeps the most recent max_turns turns; the caption is carried separately
// and never dropped here.
std::vector<QaTurn> truncate_history(std::vector<QaTurn> history, int max_turns = 1);

// Interleaves the dialog- and VQA-derived ranges of the pool: each draw is
// VQA-sourced with probability vqa_fraction.
class MixedStream {
public:
  MixedStream(const QuartettePool& pool, double vqa_fraction);

  // index into pool.examples for the next draw
  size_t next_index(Rng& rng) const;

private:
  const QuartettePool* pool_;
  double vqa_fraction_;
};

struct PoolBuildCounters {
  size_t vqa_converted = 0;
  size_t vqa_skipped = 0;
};

// Expands dialog records into per-round quartettes (history truncated to
// history_turns) and appends converted VQA records.
QuartettePool build_pool(const std::vector<DialogRecord>& dialogs, const FeatureStore& features,
                         const std::vector<VqaRecord>& vqa, int history_turns,
                         PoolBuildCounters* counters = nullptr);

}  // namespace icmu
