#include "icmu/data_io.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

#include <json.hpp>

#include "icmu/rng.hpp"

namespace icmu {

namespace {

using nlohmann::json;

// ---- little-endian binary primitives ---------------------------------------

void write_bytes(std::ostream& os, const void* data, size_t n) {
  os.write(static_cast<const char*>(data), static_cast<std::streamsize>(n));
}

void write_u32(std::ostream& os, uint32_t v) {
  char b[4] = {static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff),
               static_cast<char>((v >> 16) & 0xff), static_cast<char>((v >> 24) & 0xff)};
  write_bytes(os, b, 4);
}

void write_u64(std::ostream& os, uint64_t v) {
  write_u32(os, static_cast<uint32_t>(v & 0xffffffffu));
  write_u32(os, static_cast<uint32_t>(v >> 32));
}

void write_f32(std::ostream& os, float v) { write_u32(os, std::bit_cast<uint32_t>(v)); }
void write_f64(std::ostream& os, double v) { write_u64(os, std::bit_cast<uint64_t>(v)); }

void write_string(std::ostream& os, const std::string& s) {
  write_u32(os, static_cast<uint32_t>(s.size()));
  write_bytes(os, s.data(), s.size());
}

class Reader {
public:
  Reader(std::istream& is, std::string path) : is_(is), path_(std::move(path)) {}

  void bytes(void* data, size_t n) {
    is_.read(static_cast<char*>(data), static_cast<std::streamsize>(n));
    if (static_cast<size_t>(is_.gcount()) != n) {
      throw ParseError(path_ + ": truncated file");
    }
  }

  uint32_t u32() {
    unsigned char b[4];
    bytes(b, 4);
    return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
           (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
  }

  uint64_t u64() {
    const uint64_t lo = u32();
    const uint64_t hi = u32();
    return lo | (hi << 32);
  }

  float f32() { return std::bit_cast<float>(u32()); }
  double f64() { return std::bit_cast<double>(u64()); }

  std::string string() {
    const uint32_t n = u32();
    std::string s(n, '\0');
    bytes(s.data(), n);
    return s;
  }

  void expect_eof() {
    is_.peek();
    if (!is_.eof()) throw ParseError(path_ + ": trailing bytes after the last record");
  }

private:
  std::istream& is_;
  std::string path_;
};

// ---- json helpers -----------------------------------------------------------

[[noreturn]] void fail_line(const std::string& path, size_t line, const std::string& msg) {
  throw ParseError(path + ":" + std::to_string(line) + ": " + msg);
}

uint64_t require_uint(const json& j, const char* key, const std::string& path, size_t line) {
  if (!j.contains(key) || !j[key].is_number_unsigned()) {
    fail_line(path, line, std::string("missing or non-integer field '") + key + "'");
  }
  return j[key].get<uint64_t>();
}

std::string require_string(const json& j, const char* key, const std::string& path, size_t line,
                           bool allow_empty) {
  if (!j.contains(key) || !j[key].is_string()) {
    fail_line(path, line, std::string("missing or non-string field '") + key + "'");
  }
  auto s = j[key].get<std::string>();
  if (!allow_empty && s.empty()) {
    fail_line(path, line, std::string("field '") + key + "' must be non-empty");
  }
  return s;
}

template <typename Fn>
void for_each_line(const std::string& path, Fn&& fn) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError(path + ": cannot open file");
  std::string line;
  size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      fail_line(path, line_no, std::string("invalid record: ") + e.what());
    }
    if (!j.is_object()) fail_line(path, line_no, "record is not an object");
    fn(j, line_no);
  }
}

float quantize32(double v) { return static_cast<float>(v); }

}  // namespace

// ---- FeatureStore -----------------------------------------------------------

void FeatureStore::insert(uint64_t image_id, std::vector<VisualRegion> regions) {
  if (static_cast<int>(regions.size()) != k_) {
    throw ValidationError("feature store: image " + std::to_string(image_id) + " has " +
                          std::to_string(regions.size()) + " regions, expected " +
                          std::to_string(k_));
  }
  for (const auto& r : regions) {
    if (static_cast<int>(r.roi_feature.size()) != d_v_) {
      throw ValidationError("feature store: roi feature length " +
                            std::to_string(r.roi_feature.size()) + ", expected " +
                            std::to_string(d_v_));
    }
  }
  if (!regions_.emplace(image_id, std::move(regions)).second) {
    throw ValidationError("feature store: duplicate image id " + std::to_string(image_id));
  }
}

const std::vector<VisualRegion>& FeatureStore::regions_for(uint64_t image_id) const {
  auto it = regions_.find(image_id);
  if (it == regions_.end()) {
    throw IndexError("feature store: no regions for image " + std::to_string(image_id));
  }
  return it->second;
}

// ---- dialog / vqa loaders ----------------------------------------------------

std::vector<DialogRecord> load_dialogs(const std::string& path) {
  std::vector<DialogRecord> records;
  for_each_line(path, [&](const json& j, size_t line) {
    DialogRecord rec;
    rec.image_id = require_uint(j, "image_id", path, line);
    rec.caption = require_string(j, "caption", path, line, /*allow_empty=*/true);
    if (!j.contains("rounds") || !j["rounds"].is_array()) {
      fail_line(path, line, "missing 'rounds' array");
    }
    const auto& rounds = j["rounds"];
    if (rounds.empty() || rounds.size() > 10) {
      fail_line(path, line,
                "record has " + std::to_string(rounds.size()) + " rounds, expected 1..10");
    }
    for (const auto& rj : rounds) {
      if (!rj.is_object()) fail_line(path, line, "round is not an object");
      RoundRecord round;
      round.question = require_string(rj, "question", path, line, false);
      round.answer = require_string(rj, "answer", path, line, false);
      if (!rj.contains("candidates") || !rj["candidates"].is_array() || rj["candidates"].empty()) {
        fail_line(path, line, "missing or empty 'candidates' array");
      }
      for (const auto& c : rj["candidates"]) {
        if (!c.is_string()) fail_line(path, line, "candidate is not a string");
        round.candidates.push_back(c.get<std::string>());
      }
      if (!rj.contains("gt_index") || !rj["gt_index"].is_number_integer()) {
        fail_line(path, line, "missing integer 'gt_index'");
      }
      round.gt_index = rj["gt_index"].get<int>();
      if (round.gt_index < 0 || round.gt_index >= static_cast<int>(round.candidates.size())) {
        fail_line(path, line, "gt_index " + std::to_string(round.gt_index) +
                                  " outside candidate list of size " +
                                  std::to_string(round.candidates.size()));
      }
      if (rj.contains("relevance")) {
        if (!rj["relevance"].is_array() ||
            rj["relevance"].size() != round.candidates.size()) {
          fail_line(path, line, "'relevance' must match the candidate count");
        }
        std::vector<double> rel;
        for (const auto& v : rj["relevance"]) {
          if (!v.is_number()) fail_line(path, line, "relevance entry is not a number");
          const double r = v.get<double>();
          if (r < 0.0 || r > 1.0) fail_line(path, line, "relevance entry outside [0,1]");
          rel.push_back(r);
        }
        round.relevance = std::move(rel);
      }
      rec.rounds.push_back(std::move(round));
    }
    records.push_back(std::move(rec));
  });
  return records;
}

void save_dialogs(const std::vector<DialogRecord>& records, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ParseError(path + ": cannot open for writing");
  for (const auto& rec : records) {
    json rounds = json::array();
    for (const auto& r : rec.rounds) {
      json rj = {{"question", r.question},
                 {"answer", r.answer},
                 {"candidates", r.candidates},
                 {"gt_index", r.gt_index}};
      if (r.relevance) rj["relevance"] = *r.relevance;
      rounds.push_back(std::move(rj));
    }
    json j = {{"image_id", rec.image_id}, {"caption", rec.caption}, {"rounds", std::move(rounds)}};
    out << j.dump() << '\n';
  }
}

std::vector<VqaRecord> load_vqa(const std::string& path) {
  std::vector<VqaRecord> records;
  for_each_line(path, [&](const json& j, size_t line) {
    VqaRecord rec;
    rec.image_id = require_uint(j, "image_id", path, line);
    rec.question = require_string(j, "question", path, line, false);
    rec.answer = require_string(j, "answer", path, line, false);
    records.push_back(std::move(rec));
  });
  return records;
}

void save_vqa(const std::vector<VqaRecord>& records, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ParseError(path + ": cannot open for writing");
  for (const auto& rec : records) {
    json j = {{"image_id", rec.image_id}, {"question", rec.question}, {"answer", rec.answer}};
    out << j.dump() << '\n';
  }
}

// ---- feature store binary format ----------------------------------------------

namespace {
constexpr char kFeatureMagic[8] = {'I', 'C', 'M', 'U', 'F', 'E', 'A', 'T'};
constexpr char kCheckpointMagic[8] = {'I', 'C', 'M', 'U', 'C', 'K', 'P', 'T'};
constexpr uint32_t kFeatureVersion = 1;
constexpr uint32_t kCheckpointVersion = 1;
}  // namespace

void save_features(const FeatureStore& store, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ParseError(path + ": cannot open for writing");
  write_bytes(out, kFeatureMagic, 8);
  write_u32(out, kFeatureVersion);
  write_u32(out, static_cast<uint32_t>(store.num_images()));
  write_u32(out, static_cast<uint32_t>(store.regions_per_image()));
  write_u32(out, static_cast<uint32_t>(store.visual_dim()));
  for (const auto& [image_id, regions] : store.all()) {
    write_u64(out, image_id);
    for (const auto& r : regions) {
      for (double v : r.roi_feature) write_f32(out, quantize32(v));
    }
    for (const auto& r : regions) {
      for (double v : r.location) write_f32(out, quantize32(v));
    }
  }
  if (!out) throw ParseError(path + ": write failed");
}

FeatureStore load_features(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError(path + ": cannot open file");
  Reader r(in, path);
  char magic[8];
  r.bytes(magic, 8);
  if (std::memcmp(magic, kFeatureMagic, 8) != 0) {
    throw ParseError(path + ": bad magic, not a feature file");
  }
  const uint32_t version = r.u32();
  if (version != kFeatureVersion) {
    throw ParseError(path + ": unsupported feature format version " + std::to_string(version));
  }
  const uint32_t count = r.u32();
  const uint32_t k = r.u32();
  const uint32_t d_v = r.u32();
  if (k == 0 || d_v == 0) throw ParseError(path + ": header k/d_v must be positive");
  FeatureStore store(static_cast<int>(k), static_cast<int>(d_v));
  for (uint32_t i = 0; i < count; ++i) {
    const uint64_t image_id = r.u64();
    std::vector<VisualRegion> regions(k);
    for (auto& region : regions) {
      region.roi_feature.resize(d_v);
      for (auto& v : region.roi_feature) v = static_cast<double>(r.f32());
    }
    for (auto& region : regions) {
      for (auto& v : region.location) v = static_cast<double>(r.f32());
    }
    if (store.contains(image_id)) {
      throw ParseError(path + ": duplicate image id " + std::to_string(image_id));
    }
    store.insert(image_id, std::move(regions));
  }
  r.expect_eof();
  return store;
}

// ---- checkpoints ----------------------------------------------------------------

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ParseError(path + ": cannot open for writing");
  write_bytes(out, kCheckpointMagic, 8);
  write_u32(out, ckpt.version);
  const ModelConfig& c = ckpt.config;
  for (int v : {c.num_blocks, c.num_heads, c.hidden_dim, c.ffn_dim, c.vocab_size, c.max_positions,
                c.visual_dim, c.regions_per_image, c.contrast_classes}) {
    write_u32(out, static_cast<uint32_t>(v));
  }
  write_u32(out, static_cast<uint32_t>(ckpt.vocab_tokens.size()));
  for (const auto& t : ckpt.vocab_tokens) write_string(out, t);
  write_u32(out, static_cast<uint32_t>(ckpt.params.size()));
  for (const auto& p : ckpt.params) {
    write_string(out, p.name);
    write_u32(out, static_cast<uint32_t>(p.shape.size()));
    for (int d : p.shape) write_u32(out, static_cast<uint32_t>(d));
    write_u64(out, static_cast<uint64_t>(p.step_count));
    for (double v : p.values) write_f64(out, v);
    for (double v : p.adam_m) write_f64(out, v);
    for (double v : p.adam_v) write_f64(out, v);
  }
  const TrainerState& t = ckpt.trainer;
  for (uint64_t s : t.rng_state) write_u64(out, s);
  write_u32(out, t.epochs_completed);
  write_u64(out, t.global_step);
  write_u64(out, t.total_steps);
  write_f64(out, t.base_lr);
  write_f64(out, t.warmup_fraction);
  write_u32(out, t.batch_size);
  write_u32(out, t.phase1_epochs);
  write_u32(out, t.phase2_epochs);
  write_f64(out, t.vqa_fraction);
  write_u32(out, t.history_turns);
  write_u32(out, t.max_len);
  write_u64(out, t.seed);
  if (!out) throw ParseError(path + ": write failed");
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError(path + ": cannot open file");
  Reader r(in, path);
  char magic[8];
  r.bytes(magic, 8);
  if (std::memcmp(magic, kCheckpointMagic, 8) != 0) {
    throw ParseError(path + ": bad magic, not a checkpoint");
  }
  Checkpoint ckpt;
  ckpt.version = r.u32();
  if (ckpt.version != kCheckpointVersion) {
    throw ParseError(path + ": unsupported checkpoint version " + std::to_string(ckpt.version));
  }
  ModelConfig& c = ckpt.config;
  c.num_blocks = static_cast<int>(r.u32());
  c.num_heads = static_cast<int>(r.u32());
  c.hidden_dim = static_cast<int>(r.u32());
  c.ffn_dim = static_cast<int>(r.u32());
  c.vocab_size = static_cast<int>(r.u32());
  c.max_positions = static_cast<int>(r.u32());
  c.visual_dim = static_cast<int>(r.u32());
  c.regions_per_image = static_cast<int>(r.u32());
  c.contrast_classes = static_cast<int>(r.u32());
  const uint32_t vocab_count = r.u32();
  ckpt.vocab_tokens.reserve(vocab_count);
  for (uint32_t i = 0; i < vocab_count; ++i) ckpt.vocab_tokens.push_back(r.string());
  const uint32_t param_count = r.u32();
  for (uint32_t i = 0; i < param_count; ++i) {
    ParamBlob blob;
    blob.name = r.string();
    const uint32_t ndim = r.u32();
    for (uint32_t d = 0; d < ndim; ++d) blob.shape.push_back(static_cast<int>(r.u32()));
    blob.step_count = static_cast<long>(r.u64());
    const size_t n = static_cast<size_t>(numel(blob.shape));
    blob.values.resize(n);
    for (auto& v : blob.values) v = r.f64();
    blob.adam_m.resize(n);
    for (auto& v : blob.adam_m) v = r.f64();
    blob.adam_v.resize(n);
    for (auto& v : blob.adam_v) v = r.f64();
    ckpt.params.push_back(std::move(blob));
  }
  TrainerState& t = ckpt.trainer;
  for (auto& s : t.rng_state) s = r.u64();
  t.epochs_completed = r.u32();
  t.global_step = r.u64();
  t.total_steps = r.u64();
  t.base_lr = r.f64();
  t.warmup_fraction = r.f64();
  t.batch_size = r.u32();
  t.phase1_epochs = r.u32();
  t.phase2_epochs = r.u32();
  t.vqa_fraction = r.f64();
  t.history_turns = r.u32();
  t.max_len = r.u32();
  t.seed = r.u64();
  r.expect_eof();
  return ckpt;
}

Checkpoint make_checkpoint(const TransformerParams& params, const Vocabulary& vocab,
                           const TrainerState& trainer) {
  Checkpoint ckpt;
  ckpt.config = params.config();
  ckpt.vocab_tokens = vocab.tokens();
  for (const Parameter* p : params.parameters()) {
    ParamBlob blob;
    blob.name = p->name;
    blob.shape = p->tensor.shape();
    blob.values = p->tensor.values();
    blob.adam_m = p->adam_m;
    blob.adam_v = p->adam_v;
    blob.step_count = p->step_count;
    ckpt.params.push_back(std::move(blob));
  }
  ckpt.trainer = trainer;
  return ckpt;
}

void restore_params(const Checkpoint& ckpt, TransformerParams& params) {
  if (ckpt.params.size() != params.parameters().size()) {
    throw ValidationError("checkpoint: parameter count " + std::to_string(ckpt.params.size()) +
                          " does not match the model's " +
                          std::to_string(params.parameters().size()));
  }
  for (const auto& blob : ckpt.params) {
    Parameter* p = params.find(blob.name);
    if (p == nullptr) {
      throw ValidationError("checkpoint: unknown parameter '" + blob.name + "'");
    }
    if (blob.shape != p->tensor.shape()) {
      throw ValidationError("checkpoint: parameter '" + blob.name + "' has shape " +
                            shape_str(blob.shape) + ", model expects " +
                            shape_str(p->tensor.shape()));
    }
    p->tensor.values() = blob.values;
    p->adam_m = blob.adam_m;
    p->adam_v = blob.adam_v;
    p->step_count = blob.step_count;
  }
}

// ---- synthetic data ---------------------------------------------------------------

namespace {

uint64_t mix_seed(uint64_t a, uint64_t b, uint64_t c) {
  return a * 0x9e3779b97f4a7c15ull + b * 0xc2b2ae3d27d4eb4full + c * 0x165667b19e3779f9ull;
}

std::string word(int index) {
  std::string n = std::to_string(index);
  while (n.size() < 3) n.insert(n.begin(), '0');
  return "w" + n;
}

std::string make_answer(int key, int signature) { return word(key) + " " + word(signature); }

}  // namespace

void generate_synthetic(const SyntheticSpec& spec, const std::string& dialog_path,
                        const std::string& vqa_path, const std::string& features_path) {
  if (spec.num_images < 2 || spec.vocab_size < 2 || spec.n_c < 2 || spec.k < 1 || spec.d_v < 1) {
    throw ValidationError("generate_synthetic: degenerate spec");
  }
  Rng rng(mix_seed(spec.seed, 0x5eed, 1));

  const double image_w = 640.0, image_h = 480.0;
  std::vector<DialogRecord> dialogs;
  std::vector<VqaRecord> vqa;
  FeatureStore store(spec.k, spec.d_v);

  // one base roi vector per signature word; images carry a noisy copy
  std::vector<std::vector<double>> base(static_cast<size_t>(spec.vocab_size));
  for (int s = 0; s < spec.vocab_size; ++s) {
    Rng base_rng(mix_seed(spec.seed, 0xba5e, static_cast<uint64_t>(s)));
    base[static_cast<size_t>(s)].resize(static_cast<size_t>(spec.d_v));
    for (auto& v : base[static_cast<size_t>(s)]) {
      v = static_cast<double>(quantize32(base_rng.normal()));
    }
  }

  const char* question_templates[] = {"is there", "do you see", "what about", "can you spot"};

  for (int i = 0; i < spec.num_images; ++i) {
    const uint64_t image_id = 1000 + static_cast<uint64_t>(i);
    const int signature = i % spec.vocab_size;

    // regions: noisy copies of the signature vector plus random valid boxes
    std::vector<VisualRegion> regions;
    for (int j = 0; j < spec.k; ++j) {
      Rng region_rng(mix_seed(spec.seed, image_id, static_cast<uint64_t>(j)));
      VisualRegion region;
      region.roi_feature.resize(static_cast<size_t>(spec.d_v));
      for (int d = 0; d < spec.d_v; ++d) {
        region.roi_feature[static_cast<size_t>(d)] = static_cast<double>(
            quantize32(base[static_cast<size_t>(signature)][static_cast<size_t>(d)] +
                       0.15 * region_rng.normal()));
      }
      BoundingBox box;
      box.image_width = image_w;
      box.image_height = image_h;
      box.x1 = std::floor(region_rng.uniform(0.0, image_w - 8.0));
      box.y1 = std::floor(region_rng.uniform(0.0, image_h - 8.0));
      box.x2 = std::floor(region_rng.uniform(box.x1 + 4.0, image_w));
      box.y2 = std::floor(region_rng.uniform(box.y1 + 4.0, image_h));
      box.class_id = signature;
      box.confidence = 0.5 + 0.5 * region_rng.uniform();
      auto loc = compute_location_vector(box, spec.vocab_size);
      for (size_t d = 0; d < loc.size(); ++d) {
        region.location[d] = static_cast<double>(quantize32(loc[d]));
      }
      regions.push_back(std::move(region));
    }
    store.insert(image_id, std::move(regions));

    DialogRecord rec;
    rec.image_id = image_id;
    rec.caption = "a picture of " + word(signature) + " and " +
                  word(static_cast<int>(rng.uniform_int(spec.vocab_size)));

    for (int round = 0; round < spec.rounds_per_image; ++round) {
      const int key = static_cast<int>(rng.uniform_int(spec.vocab_size));
      RoundRecord rr;
      rr.question = std::string(question_templates[rng.uniform_int(4)]) + " " + word(key) + " ?";
      rr.answer = make_answer(key, signature);
      rr.gt_index = static_cast<int>(rng.uniform_int(spec.n_c));
      for (int c = 0; c < spec.n_c; ++c) {
        if (c == rr.gt_index) {
          rr.candidates.push_back(rr.answer);
        } else {
          rr.candidates.push_back(
              make_answer(static_cast<int>(rng.uniform_int(spec.vocab_size)),
                          static_cast<int>(rng.uniform_int(spec.vocab_size))));
        }
      }
      if (round % 2 == 0) {
        std::vector<double> rel;
        const std::string key_word = word(key);
        for (int c = 0; c < spec.n_c; ++c) {
          if (c == rr.gt_index) {
            rel.push_back(1.0);
          } else if (rr.candidates[static_cast<size_t>(c)].find(key_word) != std::string::npos) {
            rel.push_back(0.5);
          } else {
            rel.push_back(0.0);
          }
        }
        rr.relevance = std::move(rel);
      }
      rec.rounds.push_back(std::move(rr));
    }
    dialogs.push_back(std::move(rec));

    for (int v = 0; v < spec.vqa_per_image; ++v) {
      const int key = static_cast<int>(rng.uniform_int(spec.vocab_size));
      VqaRecord vr;
      vr.image_id = image_id;
      vr.question = "is " + word(key) + " in the picture ?";
      vr.answer = make_answer(key, signature);
      vqa.push_back(std::move(vr));
    }
    if (i % 50 == 0) {
      // a record whose image has no dialog counterpart; conversion skips it
      VqaRecord orphan;
      orphan.image_id = 999000000 + static_cast<uint64_t>(i);
      orphan.question = "is " + word(signature) + " anywhere ?";
      orphan.answer = make_answer(signature, signature);
      vqa.push_back(std::move(orphan));
    }
  }

  save_dialogs(dialogs, dialog_path);
  save_vqa(vqa, vqa_path);
  save_features(store, features_path);
}

}  // namespace icmu
