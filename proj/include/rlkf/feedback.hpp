#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "rlkf/arithgen.hpp"
#include "rlkf/error.hpp"
#include "rlkf/records.hpp"
#include "rlkf/rng.hpp"

namespace rlkf {

// What the sampled responses reveal about the model's grasp of a question:
// for labeled (in-domain) sets the correct count n_c, for unlabeled
// (out-of-domain) sets the modal answer's multiplicity n_s measured against
// the majority threshold t = ceil(n / 2).
struct KnowledgeVerdict {
  PairSource mode = PairSource::in_domain;
  long long n = 0;
  long long threshold_t = 0;
  long long n_c = 0;        // in_domain only
  long long n_s = 0;        // out_of_domain only
  std::string top_value;    // out_of_domain: a modal value (lexicographically
                            // smallest when several tie)
};

inline long long majority_threshold(long long n) { return (n + 1) / 2; }

namespace detail {

struct ClassifiedSamples {
  std::vector<const ResponseSample*> correct;
  std::vector<const ResponseSample*> wrong;  // wrong answers and unparseable
  std::vector<const ResponseSample*> rejected;
};

inline ClassifiedSamples classify_labeled(const SampleSet& set) {
  ClassifiedSamples c;
  for (const auto& s : set.samples) {
    switch (s.extraction.kind) {
      case ExtractionKind::reject:
        c.rejected.push_back(&s);
        break;
      case ExtractionKind::unparseable:
        c.wrong.push_back(&s);
        break;
      case ExtractionKind::answer:
        if (!s.correct.has_value())
          throw Error("question '" + set.question.id + "' sample " +
                      std::to_string(s.sample_index) +
                      " is unlabeled; run the oracle before pair synthesis");
        (*s.correct ? c.correct : c.wrong).push_back(&s);
        break;
    }
  }
  return c;
}

inline const ResponseSample* pick_sample(
    const std::vector<const ResponseSample*>& samples, Rng& rng) {
  return samples[rng.below(samples.size())];
}

// A rejection to pair against: the model's own refusal when it produced one,
// otherwise a pool sentence.
inline std::string rejection_text(const ClassifiedSamples& c,
                                  const RejectionPool& pool, Rng& rng) {
  if (!c.rejected.empty()) return pick_sample(c.rejected, rng)->text;
  return rng.pick(pool.sentences);
}

struct VoteResult {
  long long n_s = 0;
  std::string top_value;
  std::vector<const ResponseSample*> modal_samples;
  std::vector<const ResponseSample*> answered;
};

inline VoteResult tally_votes(const SampleSet& set) {
  VoteResult v;
  std::map<std::string, long long> votes;
  for (const auto& s : set.samples) {
    if (s.extraction.kind != ExtractionKind::answer) continue;
    v.answered.push_back(&s);
    ++votes[s.extraction.value];
  }
  for (const auto& [value, count] : votes) {
    if (count > v.n_s) {
      v.n_s = count;
      v.top_value = value;
    }
  }
  for (const auto* s : v.answered) {
    if (votes[s->extraction.value] == v.n_s) v.modal_samples.push_back(s);
  }
  return v;
}

}  // namespace detail

inline KnowledgeVerdict verdict_in_domain(const SampleSet& set) {
  validate(set);
  auto classified = detail::classify_labeled(set);
  KnowledgeVerdict v;
  v.mode = PairSource::in_domain;
  v.n = static_cast<long long>(set.samples.size());
  v.threshold_t = majority_threshold(v.n);
  v.n_c = static_cast<long long>(classified.correct.size());
  return v;
}

// Nothing to vote on when every sample rejected or was unparseable.
inline std::optional<KnowledgeVerdict> verdict_out_of_domain(
    const SampleSet& set) {
  validate(set);
  auto votes = detail::tally_votes(set);
  if (votes.answered.empty()) return std::nullopt;
  KnowledgeVerdict v;
  v.mode = PairSource::out_of_domain;
  v.n = static_cast<long long>(set.samples.size());
  v.threshold_t = majority_threshold(v.n);
  v.n_s = votes.n_s;
  v.top_value = votes.top_value;
  return v;
}

// In-domain rule, one pair at most per question:
//   n_c == n          -> correct over a rejection (pool fallback)
//   0 < n_c < n       -> correct over a wrong answer
//   n_c == 0          -> rejection over a wrong answer
// Returns nothing when the needed member class is empty (e.g. every sample
// rejected: there is no wrong answer to disprefer).
inline std::optional<PreferencePair> synthesize_in_domain(
    const SampleSet& set, const RejectionPool& pool, std::uint64_t seed) {
  validate(set);
  auto classified = detail::classify_labeled(set);
  const long long n = static_cast<long long>(set.samples.size());
  const long long n_c = static_cast<long long>(classified.correct.size());
  const std::uint64_t pair_seed = stream_seed(seed, fnv1a64(set.question.id));
  Rng rng(pair_seed);

  PreferencePair pair;
  pair.question_id = set.question.id;
  pair.prompt = set.question.prompt;
  pair.source = PairSource::in_domain;
  pair.rng_seed = pair_seed;

  if (n_c == n) {
    pair.kind = PairKind::correct_over_reject;
    pair.chosen = detail::pick_sample(classified.correct, rng)->text;
    pair.rejected = detail::rejection_text(classified, pool, rng);
    return pair;
  }
  if (classified.wrong.empty()) return std::nullopt;
  if (n_c > 0) {
    pair.kind = PairKind::correct_over_wrong;
    pair.chosen = detail::pick_sample(classified.correct, rng)->text;
    pair.rejected = detail::pick_sample(classified.wrong, rng)->text;
    return pair;
  }
  pair.kind = PairKind::reject_over_wrong;
  pair.chosen = detail::rejection_text(classified, pool, rng);
  pair.rejected = detail::pick_sample(classified.wrong, rng)->text;
  return pair;
}

// Out-of-domain rule, driven purely by self-consistency:
//   n_s > t  -> an answered sample over a rejection
//   n_s < t  -> a rejection over an answered sample
//   n_s == t -> no pair; the vote is too ambiguous to trust either way
// The answered representative is drawn among samples carrying a modal value
// (any of them when several values tie). Unparseable samples neither vote
// nor qualify as members.
inline std::optional<PreferencePair> synthesize_out_of_domain(
    const SampleSet& set, const RejectionPool& pool, std::uint64_t seed) {
  validate(set);
  auto votes = detail::tally_votes(set);
  detail::ClassifiedSamples classified;
  for (const auto& s : set.samples) {
    if (s.extraction.kind == ExtractionKind::reject)
      classified.rejected.push_back(&s);
  }
  const long long n = static_cast<long long>(set.samples.size());
  const long long t = majority_threshold(n);
  const std::uint64_t pair_seed = stream_seed(seed, fnv1a64(set.question.id));
  Rng rng(pair_seed);

  if (votes.answered.empty() || votes.n_s == t) return std::nullopt;

  PreferencePair pair;
  pair.question_id = set.question.id;
  pair.prompt = set.question.prompt;
  pair.source = PairSource::out_of_domain;
  pair.rng_seed = pair_seed;

  if (votes.n_s > t) {
    pair.kind = PairKind::answer_over_reject;
    pair.chosen = detail::pick_sample(votes.modal_samples, rng)->text;
    pair.rejected = detail::rejection_text(classified, pool, rng);
  } else {
    pair.kind = PairKind::reject_over_answer;
    pair.chosen = detail::rejection_text(classified, pool, rng);
    pair.rejected = detail::pick_sample(votes.modal_samples, rng)->text;
  }
  return pair;
}

// Appendix-style agreement guard: answer with the modal value only when it
// clears the majority threshold, otherwise refuse. Needs no labels.
inline Extraction consistency_baseline(
    const SampleSet& set,
    std::optional<long long> threshold_override = std::nullopt) {
  validate(set);
  auto votes = detail::tally_votes(set);
  const long long t =
      threshold_override.value_or(majority_threshold(
          static_cast<long long>(set.samples.size())));
  Extraction e;
  if (votes.n_s > t) {
    e.kind = ExtractionKind::answer;
    e.value = votes.top_value;
  } else {
    e.kind = ExtractionKind::reject;
  }
  return e;
}

}  // namespace rlkf
