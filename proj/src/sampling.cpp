#include "icmu/sampling.hpp"

namespace icmu {

namespace {

// field accessors used both for pollution and for the donor-difference check
bool field_equal(const Quartette& a, const Quartette& b, PollutionKind kind) {
  switch (kind) {
    case PollutionKind::image:
      return a.image_id == b.image_id;
    case PollutionKind::question:
      return a.question == b.question;
    case PollutionKind::answer:
      return a.answer == b.answer;
    default:
      return false;
  }
}

void replace_field(Quartette& target, const Quartette& donor, PollutionKind kind) {
  switch (kind) {
    case PollutionKind::image:
      target.image_id = donor.image_id;
      target.regions = donor.regions;
      break;
    case PollutionKind::question:
      target.question = donor.question;
      break;
    case PollutionKind::answer:
      target.answer = donor.answer;
      break;
    default:
      break;
  }
}

}  // namespace

QuartetteLabel label_of(PollutionKind kind) { return QuartetteLabel{static_cast<int>(kind)}; }

std::pair<Quartette, QuartetteLabel> build_training_quartette(const QuartettePool& pool,
                                                              size_t example_index, Rng& rng) {
  if (pool.size() < 2) {
    throw ValidationError("quartette pool needs at least 2 examples, has " +
                          std::to_string(pool.size()));
  }
  if (example_index >= pool.size()) {
    throw IndexError("example index " + std::to_string(example_index) + " outside pool of size " +
                     std::to_string(pool.size()));
  }
  const Quartette& example = pool.examples[example_index];
  if (rng.uniform() < 0.5) {
    return {example, label_of(PollutionKind::none)};
  }
  const auto kind = static_cast<PollutionKind>(1 + rng.uniform_int(3));

  const long n = static_cast<long>(pool.size());
  long donor = -1;
  for (int attempt = 0; attempt < 64; ++attempt) {
    const long d = rng.uniform_int(n);
    if (d == static_cast<long>(example_index)) continue;
    if (!field_equal(example, pool.examples[static_cast<size_t>(d)], kind)) {
      donor = d;
      break;
    }
  }
  if (donor < 0) {
    // rare: scan for any donor whose field differs; fall back to any other
    // entry when the whole pool shares the field value
    for (long d = 0; d < n; ++d) {
      if (d == static_cast<long>(example_index)) continue;
      if (!field_equal(example, pool.examples[static_cast<size_t>(d)], kind)) {
        donor = d;
        break;
      }
    }
    if (donor < 0) donor = (static_cast<long>(example_index) + 1) % n;
  }

  Quartette polluted = example;
  replace_field(polluted, pool.examples[static_cast<size_t>(donor)], kind);
  return {std::move(polluted), label_of(kind)};
}

std::optional<Quartette> vqa_to_quartette(const VqaRecord& record,
                                          const std::map<uint64_t, std::string>& caption_lookup) {
  auto it = caption_lookup.find(record.image_id);
  if (it == caption_lookup.end()) return std::nullopt;
  Quartette q;
  q.image_id = record.image_id;
  q.caption = it->second;
  q.question = record.question;
  q.answer = record.answer;
  return q;
}

std::vector<QaTurn> truncate_history(std::vector<QaTurn> history, int max_turns) {
  if (max_turns < 0) throw ValidationError("truncate_history: max_turns must be >= 0");
  if (static_cast<int>(history.size()) <= max_turns) return history;
  return {history.end() - max_turns, history.end()};
}

MixedStream::MixedStream(const QuartettePool& pool, double vqa_fraction)
    : pool_(&pool), vqa_fraction_(vqa_fraction) {
  if (vqa_fraction < 0.0 || vqa_fraction > 1.0) {
    throw ValidationError("mix: vqa_fraction must lie in [0,1]");
  }
  if (vqa_fraction > 0.0 && pool.vqa_count() == 0) {
    throw ValidationError("mix: vqa_fraction > 0 but the pool has no VQA examples");
  }
  if (vqa_fraction < 1.0 && pool.dialog_count == 0) {
    throw ValidationError("mix: vqa_fraction < 1 but the pool has no dialog examples");
  }
}

size_t MixedStream::next_index(Rng& rng) const {
  const bool from_vqa = rng.bernoulli(vqa_fraction_);
  if (from_vqa) {
    return pool_->dialog_count +
           static_cast<size_t>(rng.uniform_int(static_cast<long>(pool_->vqa_count())));
  }
  return static_cast<size_t>(rng.uniform_int(static_cast<long>(pool_->dialog_count)));
}

QuartettePool build_pool(const std::vector<DialogRecord>& dialogs, const FeatureStore& features,
                         const std::vector<VqaRecord>& vqa, int history_turns,
                         PoolBuildCounters* counters) {
  QuartettePool pool;
  std::map<uint64_t, std::string> captions;
  for (const auto& rec : dialogs) {
    captions[rec.image_id] = rec.caption;
    const auto& regions = features.regions_for(rec.image_id);
    std::vector<QaTurn> history;
    for (const auto& round : rec.rounds) {
      Quartette q;
      q.image_id = rec.image_id;
      q.regions = regions;
      q.caption = rec.caption;
      q.history = truncate_history(history, history_turns);
      q.question = round.question;
      q.answer = round.answer;
      pool.examples.push_back(std::move(q));
      history.push_back({round.question, round.answer});
    }
  }
  pool.dialog_count = pool.examples.size();
  for (const auto& record : vqa) {
    auto converted = vqa_to_quartette(record, captions);
    if (!converted) {
      if (counters) ++counters->vqa_skipped;
      continue;
    }
    converted->regions = features.regions_for(converted->image_id);
    if (counters) ++counters->vqa_converted;
    pool.examples.push_back(std::move(*converted));
  }
  return pool;
}

}  // namespace icmu
