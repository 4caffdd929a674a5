#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "icmu/encoding.hpp"
#include "icmu/model.hpp"

namespace icmu {

struct RoundRecord {
  std::string question;
  std::string answer;
  std::vector<std::string> candidates;
  int gt_index = 0;
  std::optional<std::vector<double>> relevance;
};

struct DialogRecord {
  uint64_t image_id = 0;
  std::string caption;
  std::vector<RoundRecord> rounds;
};

struct VqaRecord {
  uint64_t image_id = 0;
  std::string question;
  std::string answer;
};

// Region features per image. Values are stored as 32-bit floats on disk and
// widened to doubles in memory.
class FeatureStore {
public:
  FeatureStore(int regions_per_image, int visual_dim)
      : k_(regions_per_image), d_v_(visual_dim) {}

  int regions_per_image() const { return k_; }
  int visual_dim() const { return d_v_; }
  size_t num_images() const { return regions_.size(); }

  void insert(uint64_t image_id, std::vector<VisualRegion> regions);
  const std::vector<VisualRegion>& regions_for(uint64_t image_id) const;
  bool contains(uint64_t image_id) const { return regions_.count(image_id) > 0; }
  const std::map<uint64_t, std::vector<VisualRegion>>& all() const { return regions_; }

private:
  int k_;
  int d_v_;
  std::map<uint64_t, std::vector<VisualRegion>> regions_;
};

// Line-delimited JSON records; every malformed line is rejected with its
// line number.
std::vector<DialogRecord> load_dialogs(const std::string& path);
void save_dialogs(const std::vector<DialogRecord>& records, const std::string& path);
std::vector<VqaRecord> load_vqa(const std::string& path);
void save_vqa(const std::vector<VqaRecord>& records, const std::string& path);

// Binary feature format: magic "ICMUFEAT", version u32, count/k/d_v u32,
// then per image: image_id u64, k*d_v roi floats, k*7 location floats.
// Little-endian throughout.
FeatureStore load_features(const std::string& path);
void save_features(const FeatureStore& store, const std::string& path);

// Everything needed to resume training exactly: weights, Adam state, RNG
// state, counters, and the vocabulary the ids were built against.
struct ParamBlob {
  std::string name;
  Shape shape;
  std::vector<double> values;
  std::vector<double> adam_m;
  std::vector<double> adam_v;
  long step_count = 0;
};

struct TrainerState {
  std::array<uint64_t, 4> rng_state{};
  uint32_t epochs_completed = 0;
  uint64_t global_step = 0;
  uint64_t total_steps = 0;
  // schedule scalars needed to continue the run
  double base_lr = 3e-5;
  double warmup_fraction = 0.1;
  uint32_t batch_size = 16;
  uint32_t phase1_epochs = 20;
  uint32_t phase2_epochs = 15;
  double vqa_fraction = 0.5;
  uint32_t history_turns = 1;
  uint32_t max_len = 256;
  uint64_t seed = 0;
};

struct Checkpoint {
  uint32_t version = 1;
  ModelConfig config;
  std::vector<std::string> vocab_tokens;
  std::vector<ParamBlob> params;
  TrainerState trainer;
};

void save_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

Checkpoint make_checkpoint(const TransformerParams& params, const Vocabulary& vocab,
                           const TrainerState& trainer);
// Restores parameter values and Adam state into a freshly built model.
void restore_params(const Checkpoint& ckpt, TransformerParams& params);

struct SyntheticSpec {
  uint64_t seed = 1;
  int num_images = 200;
  int vocab_size = 200;  // content words
  int n_c = 20;          // candidates per round
  int k = 8;             // regions per image
  int d_v = 32;          // roi feature length
  int rounds_per_image = 10;
  int vqa_per_image = 2;
};

// Schema-valid synthetic datasets with a planted signal: the ground-truth
// answer repeats a word from the question plus the image's signature word
// (which the caption and the region features also encode), so a trained
// model can beat chance. Pure function of the spec.
void generate_synthetic(const SyntheticSpec& spec, const std::string& dialog_path,
                        const std::string& vqa_path, const std::string& features_path);

}  // namespace icmu
