#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <fstream>
#include <set>

#include "icmu/data_io.hpp"
#include "icmu/evaluation.hpp"
#include "icmu/vocab.hpp"
#include "testutil.hpp"

using namespace icmu;
using testutil::TempDir;

namespace {

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in);
  return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

void spit(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  out << content;
}

DialogRecord sample_dialog(uint64_t image_id, int rounds) {
  DialogRecord rec;
  rec.image_id = image_id;
  rec.caption = "caption " + std::to_string(image_id);
  for (int r = 0; r < rounds; ++r) {
    RoundRecord round;
    round.question = "question " + std::to_string(r);
    round.answer = "answer " + std::to_string(r);
    round.candidates = {"answer " + std::to_string(r), "foo", "bar"};
    round.gt_index = 0;
    if (r % 2 == 0) round.relevance = std::vector<double>{1.0, 0.0, 0.5};
    rec.rounds.push_back(round);
  }
  return rec;
}

FeatureStore sample_store(int k, int d_v, int images) {
  FeatureStore store(k, d_v);
  Rng rng(997);
  for (int i = 0; i < images; ++i) {
    std::vector<VisualRegion> regions(static_cast<size_t>(k));
    for (auto& r : regions) {
      r.roi_feature.resize(static_cast<size_t>(d_v));
      // float-representable values so the on-disk narrowing is lossless
      for (auto& v : r.roi_feature) v = static_cast<double>(static_cast<float>(rng.normal()));
      for (auto& v : r.location) v = static_cast<double>(static_cast<float>(rng.uniform()));
    }
    store.insert(static_cast<uint64_t>(100 + i), std::move(regions));
  }
  return store;
}

Checkpoint sample_checkpoint() {
  ModelConfig cfg;
  cfg.num_blocks = 1;
  cfg.num_heads = 2;
  cfg.hidden_dim = 8;
  cfg.ffn_dim = 16;
  cfg.vocab_size = 12;
  cfg.max_positions = 32;
  cfg.visual_dim = 4;
  cfg.regions_per_image = 2;
  Rng init(13);
  TransformerParams params(cfg, init);
  Vocabulary vocab;
  for (int i = 0; i < 4; ++i) vocab.add("tok" + std::to_string(i));
  TrainerState state;
  state.rng_state = {1, 2, 3, 4};
  state.epochs_completed = 3;
  state.global_step = 99;
  state.total_steps = 200;
  state.base_lr = 1.5e-4;
  state.seed = 777;
  return make_checkpoint(params, vocab, state);
}

}  // namespace

TEST_CASE("dialog records round-trip through the file format") {
  TempDir dir("dialogs");
  std::vector<DialogRecord> records = {sample_dialog(1, 3), sample_dialog(2, 10)};
  save_dialogs(records, dir.file("d.jsonl"));
  const auto loaded = load_dialogs(dir.file("d.jsonl"));
  REQUIRE(loaded.size() == 2);
  CHECK(loaded[0].image_id == 1);
  CHECK(loaded[0].caption == records[0].caption);
  REQUIRE(loaded[1].rounds.size() == 10);
  CHECK(loaded[1].rounds[4].question == records[1].rounds[4].question);
  CHECK(loaded[0].rounds[0].relevance == records[0].rounds[0].relevance);
  CHECK_FALSE(loaded[0].rounds[1].relevance.has_value());
  // saving the loaded data reproduces the bytes exactly
  save_dialogs(loaded, dir.file("d2.jsonl"));
  CHECK(slurp(dir.file("d.jsonl")) == slurp(dir.file("d2.jsonl")));
}

TEST_CASE("an empty dialog file loads as an empty dataset") {
  TempDir dir("dialogs_empty");
  spit(dir.file("d.jsonl"), "");
  CHECK(load_dialogs(dir.file("d.jsonl")).empty());
}

TEST_CASE("a record with eleven rounds is rejected") {
  TempDir dir("dialogs_rounds");
  save_dialogs({sample_dialog(1, 10)}, dir.file("d.jsonl"));
  std::string content = slurp(dir.file("d.jsonl"));
  // splice an 11th round into the array
  const std::string needle = "\"rounds\":[";
  const auto pos = content.find(needle);
  REQUIRE(pos != std::string::npos);
  const std::string extra =
      "{\"question\":\"q\",\"answer\":\"a\",\"candidates\":[\"a\",\"b\"],\"gt_index\":0},";
  content.insert(pos + needle.size(), extra);
  spit(dir.file("d.jsonl"), content);
  CHECK_THROWS_AS(load_dialogs(dir.file("d.jsonl")), ParseError);
}

TEST_CASE("malformed dialog lines are reported with their line number") {
  TempDir dir("dialogs_bad");
  save_dialogs({sample_dialog(1, 2)}, dir.file("d.jsonl"));
  std::string content = slurp(dir.file("d.jsonl"));
  content += "{ not json\n";
  spit(dir.file("d.jsonl"), content);
  try {
    load_dialogs(dir.file("d.jsonl"));
    FAIL("expected ParseError");
  } catch (const ParseError& e) {
    CHECK(std::string(e.what()).find(":2:") != std::string::npos);
  }
}

TEST_CASE("dialog validation rejects bad gt_index and bad relevance") {
  TempDir dir("dialogs_gt");
  spit(dir.file("gt.jsonl"),
       R"({"image_id":1,"caption":"c","rounds":[{"question":"q","answer":"a","candidates":["a","b"],"gt_index":2}]})"
       "\n");
  CHECK_THROWS_AS(load_dialogs(dir.file("gt.jsonl")), ParseError);
  spit(dir.file("rel.jsonl"),
       R"({"image_id":1,"caption":"c","rounds":[{"question":"q","answer":"a","candidates":["a","b"],"gt_index":0,"relevance":[1.0,2.0]}]})"
       "\n");
  CHECK_THROWS_AS(load_dialogs(dir.file("rel.jsonl")), ParseError);
  spit(dir.file("len.jsonl"),
       R"({"image_id":1,"caption":"c","rounds":[{"question":"q","answer":"a","candidates":["a","b"],"gt_index":0,"relevance":[1.0]}]})"
       "\n");
  CHECK_THROWS_AS(load_dialogs(dir.file("len.jsonl")), ParseError);
}

TEST_CASE("vqa records round-trip and tolerate duplicate image ids") {
  TempDir dir("vqa");
  std::vector<VqaRecord> records = {{5, "q1", "a1"}, {5, "q2", "a2"}, {6, "q3", "a3"}};
  save_vqa(records, dir.file("v.jsonl"));
  const auto loaded = load_vqa(dir.file("v.jsonl"));
  REQUIRE(loaded.size() == 3);
  CHECK(loaded[0].image_id == loaded[1].image_id);
  CHECK(loaded[1].question == "q2");
}

TEST_CASE("vqa records missing an answer are rejected") {
  TempDir dir("vqa_bad");
  spit(dir.file("v.jsonl"), R"({"image_id":5,"question":"q"})" "\n");
  CHECK_THROWS_AS(load_vqa(dir.file("v.jsonl")), ParseError);
  spit(dir.file("v2.jsonl"), R"({"image_id":5,"question":"q","answer":""})" "\n");
  CHECK_THROWS_AS(load_vqa(dir.file("v2.jsonl")), ParseError);
}

TEST_CASE("feature store round-trips bit-exactly") {
  TempDir dir("features");
  const FeatureStore store = sample_store(3, 5, 4);
  save_features(store, dir.file("f.bin"));
  const FeatureStore loaded = load_features(dir.file("f.bin"));
  CHECK(loaded.regions_per_image() == 3);
  CHECK(loaded.visual_dim() == 5);
  CHECK(loaded.num_images() == 4);
  for (const auto& [id, regions] : store.all()) {
    const auto& other = loaded.regions_for(id);
    REQUIRE(other.size() == regions.size());
    for (size_t i = 0; i < regions.size(); ++i) {
      CHECK(other[i].roi_feature == regions[i].roi_feature);
      CHECK(other[i].location == regions[i].location);
    }
  }
  // second save is byte-identical
  save_features(loaded, dir.file("f2.bin"));
  CHECK(slurp(dir.file("f.bin")) == slurp(dir.file("f2.bin")));
}

TEST_CASE("feature loader rejects corrupted files") {
  TempDir dir("features_bad");
  const FeatureStore store = sample_store(2, 4, 3);
  save_features(store, dir.file("f.bin"));
  std::string bytes = slurp(dir.file("f.bin"));

  SUBCASE("wrong magic") {
    std::string bad = bytes;
    bad[0] = 'X';
    spit(dir.file("bad.bin"), bad);
    CHECK_THROWS_AS(load_features(dir.file("bad.bin")), ParseError);
  }
  SUBCASE("truncated payload") {
    spit(dir.file("trunc.bin"), bytes.substr(0, bytes.size() - 7));
    CHECK_THROWS_AS(load_features(dir.file("trunc.bin")), ParseError);
  }
  SUBCASE("trailing bytes") {
    spit(dir.file("trail.bin"), bytes + "junk");
    CHECK_THROWS_AS(load_features(dir.file("trail.bin")), ParseError);
  }
  SUBCASE("header count larger than the records present") {
    std::string bad = bytes;
    bad[12] = static_cast<char>(9);  // count field, little-endian low byte
    spit(dir.file("count.bin"), bad);
    CHECK_THROWS_AS(load_features(dir.file("count.bin")), ParseError);
  }
}

TEST_CASE("feature store insert validates shapes and duplicates") {
  FeatureStore store(2, 4);
  std::vector<VisualRegion> regions(2);
  for (auto& r : regions) r.roi_feature.assign(4, 0.0);
  store.insert(1, regions);
  CHECK_THROWS_AS(store.insert(1, regions), ValidationError);
  std::vector<VisualRegion> wrong_count(1);
  wrong_count[0].roi_feature.assign(4, 0.0);
  CHECK_THROWS_AS(store.insert(2, wrong_count), ValidationError);
  std::vector<VisualRegion> wrong_dim(2);
  for (auto& r : wrong_dim) r.roi_feature.assign(3, 0.0);
  CHECK_THROWS_AS(store.insert(3, wrong_dim), ValidationError);
  CHECK_THROWS_AS(store.regions_for(42), IndexError);
}

TEST_CASE("checkpoints round-trip every field bit-exactly") {
  TempDir dir("ckpt");
  const Checkpoint ckpt = sample_checkpoint();
  save_checkpoint(ckpt, dir.file("c.bin"));
  const Checkpoint loaded = load_checkpoint(dir.file("c.bin"));
  CHECK(loaded.version == ckpt.version);
  CHECK(loaded.config.hidden_dim == ckpt.config.hidden_dim);
  CHECK(loaded.config.contrast_classes == ckpt.config.contrast_classes);
  CHECK(loaded.vocab_tokens == ckpt.vocab_tokens);
  REQUIRE(loaded.params.size() == ckpt.params.size());
  for (size_t i = 0; i < ckpt.params.size(); ++i) {
    CHECK(loaded.params[i].name == ckpt.params[i].name);
    CHECK(loaded.params[i].shape == ckpt.params[i].shape);
    CHECK(loaded.params[i].values == ckpt.params[i].values);
    CHECK(loaded.params[i].adam_m == ckpt.params[i].adam_m);
    CHECK(loaded.params[i].adam_v == ckpt.params[i].adam_v);
    CHECK(loaded.params[i].step_count == ckpt.params[i].step_count);
  }
  CHECK(loaded.trainer.rng_state == ckpt.trainer.rng_state);
  CHECK(loaded.trainer.epochs_completed == 3);
  CHECK(loaded.trainer.global_step == 99);
  CHECK(loaded.trainer.base_lr == ckpt.trainer.base_lr);
  CHECK(loaded.trainer.seed == 777);
  // and the bytes themselves are reproducible
  save_checkpoint(loaded, dir.file("c2.bin"));
  CHECK(slurp(dir.file("c.bin")) == slurp(dir.file("c2.bin")));
}

TEST_CASE("checkpoint loader rejects version and magic mismatches") {
  TempDir dir("ckpt_bad");
  save_checkpoint(sample_checkpoint(), dir.file("c.bin"));
  std::string bytes = slurp(dir.file("c.bin"));
  SUBCASE("bumped version") {
    std::string bad = bytes;
    bad[8] = 2;  // version u32 after the 8-byte magic
    spit(dir.file("v.bin"), bad);
    try {
      load_checkpoint(dir.file("v.bin"));
      FAIL("expected ParseError");
    } catch (const ParseError& e) {
      CHECK(std::string(e.what()).find("version") != std::string::npos);
    }
  }
  SUBCASE("foreign magic") {
    std::string bad = bytes;
    bad[3] = 'x';
    spit(dir.file("m.bin"), bad);
    CHECK_THROWS_AS(load_checkpoint(dir.file("m.bin")), ParseError);
  }
  SUBCASE("truncation") {
    spit(dir.file("t.bin"), bytes.substr(0, bytes.size() / 2));
    CHECK_THROWS_AS(load_checkpoint(dir.file("t.bin")), ParseError);
  }
}

TEST_CASE("restore_params requires exact name and shape agreement") {
  Checkpoint ckpt = sample_checkpoint();
  Rng init(17);
  ModelConfig other = ckpt.config;
  other.hidden_dim = 16;
  other.ffn_dim = 32;
  TransformerParams mismatched(other, init);
  CHECK_THROWS_AS(restore_params(ckpt, mismatched), ValidationError);
  TransformerParams matching(ckpt.config, init);
  CHECK_NOTHROW(restore_params(ckpt, matching));
  CHECK(matching.parameters()[0]->tensor.values() == ckpt.params[0].values);
}

TEST_CASE("synthetic generation is a pure function of its arguments") {
  TempDir dir("synth");
  SyntheticSpec spec;
  spec.seed = 5;
  spec.num_images = 10;
  spec.vocab_size = 40;
  spec.n_c = 8;
  spec.k = 3;
  spec.d_v = 6;
  generate_synthetic(spec, dir.file("d1.jsonl"), dir.file("v1.jsonl"), dir.file("f1.bin"));
  generate_synthetic(spec, dir.file("d2.jsonl"), dir.file("v2.jsonl"), dir.file("f2.bin"));
  CHECK(slurp(dir.file("d1.jsonl")) == slurp(dir.file("d2.jsonl")));
  CHECK(slurp(dir.file("v1.jsonl")) == slurp(dir.file("v2.jsonl")));
  CHECK(slurp(dir.file("f1.bin")) == slurp(dir.file("f2.bin")));
  // a different seed produces different data
  spec.seed = 6;
  generate_synthetic(spec, dir.file("d3.jsonl"), dir.file("v3.jsonl"), dir.file("f3.bin"));
  CHECK(slurp(dir.file("d1.jsonl")) != slurp(dir.file("d3.jsonl")));
}

TEST_CASE("synthetic output loads cleanly and respects the schema") {
  TempDir dir("synth_load");
  SyntheticSpec spec;
  spec.seed = 9;
  spec.num_images = 12;
  spec.vocab_size = 30;
  spec.n_c = 10;
  spec.k = 4;
  spec.d_v = 8;
  generate_synthetic(spec, dir.file("d.jsonl"), dir.file("v.jsonl"), dir.file("f.bin"));
  const auto dialogs = load_dialogs(dir.file("d.jsonl"));
  const auto vqa = load_vqa(dir.file("v.jsonl"));
  const auto features = load_features(dir.file("f.bin"));
  CHECK(dialogs.size() == 12);
  CHECK(features.num_images() == 12);
  CHECK(features.regions_per_image() == 4);
  CHECK(features.visual_dim() == 8);
  for (const auto& rec : dialogs) {
    CHECK(features.contains(rec.image_id));
    CHECK(rec.rounds.size() == 10);
    for (const auto& round : rec.rounds) {
      CHECK(round.candidates.size() == 10);
      CHECK(round.candidates[static_cast<size_t>(round.gt_index)] == round.answer);
    }
  }
  // some vqa records intentionally reference images outside the dialog set
  std::set<uint64_t> dialog_ids;
  for (const auto& rec : dialogs) dialog_ids.insert(rec.image_id);
  int orphans = 0;
  for (const auto& rec : vqa) {
    if (!dialog_ids.count(rec.image_id)) ++orphans;
  }
  CHECK(orphans > 0);
}

TEST_CASE("planted signal: a token-overlap scorer beats chance") {
  TempDir dir("synth_signal");
  SyntheticSpec spec;
  spec.seed = 21;
  spec.num_images = 30;
  spec.vocab_size = 50;
  spec.n_c = 20;
  spec.k = 3;
  spec.d_v = 6;
  generate_synthetic(spec, dir.file("d.jsonl"), dir.file("v.jsonl"), dir.file("f.bin"));
  const auto dialogs = load_dialogs(dir.file("d.jsonl"));
  const auto features = load_features(dir.file("f.bin"));
  const auto items = build_eval_items(dialogs, features, 1);
  const ScoreFn overlap = [](const EvalItem& item) {
    std::set<std::string> context_words;
    for (const auto& w : split_words(item.context.question)) context_words.insert(w);
    for (const auto& w : split_words(item.context.caption)) context_words.insert(w);
    std::vector<double> scores;
    for (const auto& candidate : item.candidates.candidates) {
      double s = 0;
      for (const auto& w : split_words(candidate)) s += context_words.count(w) ? 1.0 : 0.0;
      scores.push_back(s);
    }
    return scores;
  };
  const MetricReport report = evaluate_split_with(overlap, items);
  CHECK(report.mean_rank < spec.n_c / 2.0);
}
