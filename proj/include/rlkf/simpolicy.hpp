#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <string>

#include "rlkf/arithgen.hpp"
#include "rlkf/error.hpp"
#include "rlkf/numeric.hpp"
#include "rlkf/records.hpp"
#include "rlkf/rng.hpp"

namespace rlkf {

// A toy policy with an explicit knowledge boundary: per-subtask competence
// (chance of producing the gold answer when it answers) and a per-subtask
// rejection logit. Temperature and seed are recorded for provenance; the
// draw probabilities depend only on the maps.
struct SimPolicy {
  std::map<SubtaskKey, double> competence;
  std::map<SubtaskKey, double> reject_logit;
  double temperature = 1.0;
  std::uint64_t seed = 0;
};

inline void validate(const SimPolicy& policy) {
  if (policy.temperature <= 0.0)
    throw InvariantError("policy temperature must be positive");
  if (policy.competence.empty())
    throw InvariantError("policy must define competence for some subtask");
  for (const auto& [key, c] : policy.competence) {
    if (c < 0.0 || c > 1.0)
      throw InvariantError("competence for '" + key.str() +
                           "' must lie in [0,1]");
    if (!policy.reject_logit.count(key))
      throw InvariantError("policy has no reject_logit for '" + key.str() +
                           "'");
  }
  for (const auto& [key, _] : policy.reject_logit) {
    if (!policy.competence.count(key))
      throw InvariantError("policy has no competence for '" + key.str() + "'");
  }
}

inline double competence_at(const SimPolicy& policy, const SubtaskKey& key) {
  auto it = policy.competence.find(key);
  if (it == policy.competence.end())
    throw Error("policy does not cover subtask '" + key.str() + "'");
  return it->second;
}

inline double reject_probability(const SimPolicy& policy,
                                 const SubtaskKey& key) {
  auto it = policy.reject_logit.find(key);
  if (it == policy.reject_logit.end())
    throw Error("policy does not cover subtask '" + key.str() + "'");
  return sigmoid(it->second);
}

// Perturbs one digit of the gold string so the corrupted value stays a
// parseable integer but never equals the original. The leading digit of a
// multi-digit number is never set to zero.
inline std::string corrupt_gold(const std::string& gold, Rng& rng) {
  std::string out = gold;
  std::vector<std::size_t> digit_positions;
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (is_digit(out[i])) digit_positions.push_back(i);
  }
  if (digit_positions.empty())
    throw Error("cannot corrupt a gold answer without digits: '" + gold + "'");
  std::size_t pos = digit_positions[rng.below(digit_positions.size())];
  bool leading = pos == digit_positions.front() && digit_positions.size() > 1;
  char lo = leading ? '1' : '0';
  int span = ('9' - lo) + 1;
  char replacement;
  do {
    replacement = static_cast<char>(lo + rng.below(span));
  } while (replacement == out[pos]);
  out[pos] = replacement;
  return out;
}

// qa golds can be digit-free; a wrong answer then substitutes a marker token
// instead of a perturbed number.
inline std::string wrong_answer_value(const Question& question, Rng& rng) {
  std::string alias = gold_aliases(*question.gold).front();
  bool has_digit = false;
  for (char c : alias) has_digit = has_digit || is_digit(c);
  if (has_digit) return corrupt_gold(alias, rng);
  return "option-" + std::to_string(rng.below(10));
}

enum class SimOutcome { correct, wrong, reject };

struct SimResponse {
  std::string text;
  SimOutcome outcome = SimOutcome::correct;
};

// Draw order is fixed (reject gate, then competence gate, then any corruption
// draws) so one rng stream yields one reproducible response.
inline SimResponse realize_response(const SimPolicy& policy,
                                    const Question& question,
                                    const RejectionPool& rejections,
                                    Rng& rng) {
  if (!question.gold.has_value())
    throw Error("simulated policy needs a gold answer for question '" +
                question.id + "'");
  SimResponse r;
  if (rng.bernoulli(reject_probability(policy, question.subtask))) {
    r.text = rng.pick(rejections.sentences);
    r.outcome = SimOutcome::reject;
    return r;
  }
  if (rng.bernoulli(competence_at(policy, question.subtask))) {
    r.text = "The answer is " + gold_aliases(*question.gold).front();
    r.outcome = SimOutcome::correct;
    return r;
  }
  r.text = "The answer is " + wrong_answer_value(question, rng);
  r.outcome = SimOutcome::wrong;
  return r;
}

// Stream for sample j of a question: reproducible regardless of the order
// questions are visited in.
inline Rng sample_rng(const SimPolicy& policy, const std::string& question_id,
                      int sample_index) {
  return Rng(stream_seed(policy.seed, fnv1a64(question_id),
                         static_cast<std::uint64_t>(sample_index)));
}

// The mixed-competence reference policy used throughout the tests: strong on
// small additions, near-hopeless on large multiplications.
inline SimPolicy standard_mixed_policy(std::uint64_t seed,
                                       double initial_logit = 0.0) {
  SimPolicy p;
  p.seed = seed;
  auto cell = [&](ArithOp op, DigitBucket bucket, double competence) {
    SubtaskKey key{op, bucket};
    p.competence[key] = competence;
    p.reject_logit[key] = initial_logit;
  };
  cell(ArithOp::add, DigitBucket::d1_2, 0.95);
  cell(ArithOp::add, DigitBucket::d3_5, 0.70);
  cell(ArithOp::sub, DigitBucket::d1_2, 0.80);
  cell(ArithOp::sub, DigitBucket::d3_5, 0.40);
  cell(ArithOp::mul, DigitBucket::d1_2, 0.30);
  cell(ArithOp::mul, DigitBucket::d3_5, 0.02);
  cell(ArithOp::div, DigitBucket::d1_2, 0.50);
  cell(ArithOp::div, DigitBucket::d3_5, 0.10);
  return p;
}

inline json to_json(const SimPolicy& p) {
  json competence = json::object();
  for (const auto& [key, v] : p.competence) competence[key.str()] = v;
  json logits = json::object();
  for (const auto& [key, v] : p.reject_logit) logits[key.str()] = v;
  return json{{"competence", std::move(competence)},
              {"reject_logit", std::move(logits)},
              {"temperature", p.temperature},
              {"seed", p.seed}};
}

inline SimPolicy policy_from_json(const json& j) {
  SimPolicy p;
  const json& competence = need(j, "competence");
  if (!competence.is_object())
    throw Error("field 'competence' must be an object");
  for (const auto& [key, v] : competence.items())
    p.competence[parse_subtask(key)] = v.get<double>();
  const json& logits = need(j, "reject_logit");
  if (!logits.is_object())
    throw Error("field 'reject_logit' must be an object");
  for (const auto& [key, v] : logits.items())
    p.reject_logit[parse_subtask(key)] = v.get<double>();
  p.temperature = need_number(j, "temperature");
  const json& seed = need(j, "seed");
  p.seed = seed.get<std::uint64_t>();
  return p;
}

template <>
struct RecordTraits<SimPolicy> {
  static constexpr const char* name = "sim_policy";
  static json serialize(const SimPolicy& p) { return to_json(p); }
  static SimPolicy deserialize(const json& j) { return policy_from_json(j); }
  static void check(const SimPolicy& p) { validate(p); }
};

}  // namespace rlkf
