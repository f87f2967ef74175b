#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "rlkf/arithgen.hpp"
#include "rlkf/error.hpp"
#include "rlkf/numeric.hpp"
#include "rlkf/oracle.hpp"
#include "rlkf/records.hpp"

namespace rlkf {

inline constexpr int kFeatureSpecVersion = 1;
inline constexpr std::size_t kFeatureCount = 11;
inline constexpr double kLengthNormalization = 400.0;

// One-hot operation (4) + one-hot digit bucket (2) + normalized digit counts
// of the two drawn operands (2) + is_rejection (1) + normalized response
// length (1) + bias (1).
struct FeatureVector {
  std::array<double, kFeatureCount> values{};
  int spec_version = kFeatureSpecVersion;
};

struct ArithPromptTerms {
  ArithOp operation = ArithOp::none;
  long long lhs = 0;
  long long rhs = 0;
  long long drawn_a = 0;  // the range-drawn pair: (lhs, rhs) except for
  long long drawn_b = 0;  // division, where it is (divisor, quotient)
  SubtaskKey subtask;
};

// Recovers "a OP b" from a question prompt. Templates carry no digits, so
// the first operator adjacent to numbers on both sides is the expression.
inline std::optional<ArithPromptTerms> parse_arith_prompt(
    std::string_view prompt) {
  auto read_number = [&](std::size_t pos, std::size_t& len) -> std::optional<long long> {
    std::size_t end = pos;
    while (end < prompt.size() && is_digit(prompt[end])) ++end;
    if (end == pos || end - pos > 18) return std::nullopt;
    long long v = 0;
    for (std::size_t i = pos; i < end; ++i) v = v * 10 + (prompt[i] - '0');
    len = end - pos;
    return v;
  };
  for (std::size_t i = 0; i < prompt.size(); ++i) {
    char c = prompt[i];
    if (c != '+' && c != '-' && c != '*' && c != '/') continue;
    // scan left over optional spaces to the first operand's tail
    std::size_t l = i;
    while (l > 0 && prompt[l - 1] == ' ') --l;
    if (l == 0 || !is_digit(prompt[l - 1])) continue;
    std::size_t lhs_end = l;
    std::size_t lhs_start = lhs_end;
    while (lhs_start > 0 && is_digit(prompt[lhs_start - 1])) --lhs_start;
    // scan right over optional spaces to the second operand
    std::size_t r = i + 1;
    while (r < prompt.size() && prompt[r] == ' ') ++r;
    std::size_t rhs_len = 0;
    auto rhs = read_number(r, rhs_len);
    if (!rhs) continue;
    std::size_t lhs_len = 0;
    auto lhs = read_number(lhs_start, lhs_len);
    if (!lhs) continue;
    ArithPromptTerms terms;
    terms.lhs = *lhs;
    terms.rhs = *rhs;
    switch (c) {
      case '+': terms.operation = ArithOp::add; break;
      case '-': terms.operation = ArithOp::sub; break;
      case '*': terms.operation = ArithOp::mul; break;
      case '/': terms.operation = ArithOp::div; break;
    }
    if (terms.operation == ArithOp::div && terms.rhs != 0 &&
        terms.lhs % terms.rhs == 0) {
      terms.drawn_a = terms.rhs;
      terms.drawn_b = terms.lhs / terms.rhs;
    } else {
      terms.drawn_a = terms.lhs;
      terms.drawn_b = terms.rhs;
    }
    terms.subtask = SubtaskKey{
        terms.operation,
        bucket_for_digits(std::max(digit_count(terms.drawn_a),
                                   digit_count(terms.drawn_b)))};
    return terms;
  }
  return std::nullopt;
}

inline FeatureVector featurize_terms(
    const ArithPromptTerms& terms, std::string_view response_text,
    const RejectionLexicon& lexicon = RejectionLexicon::defaults()) {
  FeatureVector f;
  switch (terms.operation) {
    case ArithOp::add: f.values[0] = 1.0; break;
    case ArithOp::sub: f.values[1] = 1.0; break;
    case ArithOp::mul: f.values[2] = 1.0; break;
    case ArithOp::div: f.values[3] = 1.0; break;
    case ArithOp::none: throw Error("cannot featurize without an operation");
  }
  f.values[4] = terms.subtask.digit_bucket == DigitBucket::d1_2 ? 1.0 : 0.0;
  f.values[5] = terms.subtask.digit_bucket == DigitBucket::d3_5 ? 1.0 : 0.0;
  f.values[6] = std::min(1.0, digit_count(terms.drawn_a) /
                                  static_cast<double>(kMaxOperandDigits));
  f.values[7] = std::min(1.0, digit_count(terms.drawn_b) /
                                  static_cast<double>(kMaxOperandDigits));
  f.values[8] = detect_rejection(response_text, lexicon) ? 1.0 : 0.0;
  f.values[9] = std::min(1.0, static_cast<double>(response_text.size()) /
                                  kLengthNormalization);
  f.values[10] = 1.0;
  return f;
}

// qa prompts have no arithmetic terms; callers needing qa support pass a
// custom featurizer to train()/evaluate_pairwise() instead.
inline FeatureVector featurize(
    const std::string& prompt, std::string_view response_text,
    const RejectionLexicon& lexicon = RejectionLexicon::defaults()) {
  auto terms = parse_arith_prompt(prompt);
  if (!terms)
    throw Error("prompt has no arithmetic expression to featurize: '" +
                prompt + "'");
  return featurize_terms(*terms, response_text, lexicon);
}

inline FeatureVector featurize(
    const Question& question, std::string_view response_text,
    const RejectionLexicon& lexicon = RejectionLexicon::defaults()) {
  return featurize(question.prompt, response_text, lexicon);
}

using Featurizer =
    std::function<FeatureVector(const std::string&, const std::string&)>;

inline Featurizer default_featurizer() {
  return [](const std::string& prompt, const std::string& text) {
    return featurize(prompt, text);
  };
}

// Binary ranking loss -log(sigmoid(delta)) computed as softplus(-delta),
// which neither overflows nor loses the tail for |delta| ~ 50.
inline double ranking_loss(double chosen_score, double rejected_score) {
  double delta = chosen_score - rejected_score;
  if (delta > 0.0) return std::log1p(std::exp(-delta));
  return -delta + std::log1p(std::exp(delta));
}

struct TrainingMeta {
  long long epochs = 0;
  double lr = 0.0;
  std::uint64_t seed = 0;
  double final_loss = 0.0;
};

struct RewardModel {
  std::array<double, kFeatureCount> weights{};
  TrainingMeta meta;

  double score(const FeatureVector& f) const {
    if (f.spec_version != kFeatureSpecVersion)
      throw Error("feature spec version mismatch");
    double s = 0.0;
    for (std::size_t i = 0; i < kFeatureCount; ++i) s += weights[i] * f.values[i];
    return s;
  }
};

struct RmConfig {
  long long epochs = 200;
  double lr = 0.05;
  std::uint64_t seed = 0;
};

using DeltaFeatures = std::array<double, kFeatureCount>;

inline std::vector<DeltaFeatures> pair_deltas(
    std::span<const PreferencePair> pairs, const Featurizer& featurizer) {
  std::vector<DeltaFeatures> deltas;
  deltas.reserve(pairs.size());
  for (const auto& p : pairs) {
    FeatureVector chosen = featurizer(p.prompt, p.chosen);
    FeatureVector rejected = featurizer(p.prompt, p.rejected);
    DeltaFeatures d{};
    for (std::size_t i = 0; i < kFeatureCount; ++i)
      d[i] = chosen.values[i] - rejected.values[i];
    deltas.push_back(d);
  }
  return deltas;
}

inline double mean_ranking_loss(const std::array<double, kFeatureCount>& w,
                                std::span<const DeltaFeatures> deltas) {
  if (deltas.empty()) throw Error("no pairs to evaluate");
  double total = 0.0;
  for (const auto& d : deltas) {
    double delta = 0.0;
    for (std::size_t i = 0; i < kFeatureCount; ++i) delta += w[i] * d[i];
    total += ranking_loss(delta, 0.0);
  }
  return total / static_cast<double>(deltas.size());
}

inline std::array<double, kFeatureCount> loss_gradient(
    const std::array<double, kFeatureCount>& w,
    std::span<const DeltaFeatures> deltas) {
  std::array<double, kFeatureCount> g{};
  for (const auto& d : deltas) {
    double delta = 0.0;
    for (std::size_t i = 0; i < kFeatureCount; ++i) delta += w[i] * d[i];
    double coeff = -sigmoid(-delta);  // d softplus(-x) / dx
    for (std::size_t i = 0; i < kFeatureCount; ++i) g[i] += coeff * d[i];
  }
  for (auto& v : g) v /= static_cast<double>(deltas.size());
  return g;
}

// Full-batch gradient descent from zero-initialized weights, so epoch 0
// always starts at mean loss ln 2 and the result is a pure function of
// (pairs, config).
inline RewardModel train(std::span<const PreferencePair> pairs,
                         const RmConfig& config,
                         const Featurizer& featurizer = default_featurizer()) {
  if (pairs.empty()) throw Error("cannot train a reward model on zero pairs");
  if (config.epochs < 0) throw Error("epochs must be non-negative");
  if (config.lr <= 0.0) throw Error("learning rate must be positive");
  auto deltas = pair_deltas(pairs, featurizer);
  RewardModel model;
  model.meta.epochs = config.epochs;
  model.meta.lr = config.lr;
  model.meta.seed = config.seed;
  for (long long epoch = 0; epoch < config.epochs; ++epoch) {
    auto g = loss_gradient(model.weights, deltas);
    for (std::size_t i = 0; i < kFeatureCount; ++i)
      model.weights[i] -= config.lr * g[i];
    double loss = mean_ranking_loss(model.weights, deltas);
    if (!std::isfinite(loss))
      throw Error("ranking loss diverged at epoch " + std::to_string(epoch) +
                  " (lr " + std::to_string(config.lr) + ")");
  }
  model.meta.final_loss = mean_ranking_loss(model.weights, deltas);
  return model;
}

struct PairwiseEval {
  long long n = 0;
  double accuracy = 0.0;
  std::map<PairKind, double> by_kind;
};

// A pair counts as ranked correctly only when the chosen side scores
// strictly higher; exact ties count against the model.
inline PairwiseEval evaluate_pairwise(
    const RewardModel& model, std::span<const PreferencePair> pairs,
    const Featurizer& featurizer = default_featurizer()) {
  if (pairs.empty()) throw Error("no pairs to evaluate");
  PairwiseEval eval;
  std::map<PairKind, long long> kind_total;
  std::map<PairKind, long long> kind_correct;
  long long correct = 0;
  for (const auto& p : pairs) {
    double sc = model.score(featurizer(p.prompt, p.chosen));
    double su = model.score(featurizer(p.prompt, p.rejected));
    bool ok = sc > su;
    correct += ok ? 1 : 0;
    ++kind_total[p.kind];
    kind_correct[p.kind] += ok ? 1 : 0;
  }
  eval.n = static_cast<long long>(pairs.size());
  eval.accuracy = static_cast<double>(correct) / static_cast<double>(eval.n);
  for (const auto& [kind, total] : kind_total) {
    eval.by_kind[kind] = static_cast<double>(kind_correct[kind]) /
                         static_cast<double>(total);
  }
  return eval;
}

inline json to_json(const RewardModel& m) {
  json weights = json::array();
  for (double w : m.weights) weights.push_back(w);
  return json{{"weights", std::move(weights)},
              {"spec_version", kFeatureSpecVersion},
              {"training_meta", json{{"epochs", m.meta.epochs},
                                     {"lr", m.meta.lr},
                                     {"seed", m.meta.seed},
                                     {"final_loss", m.meta.final_loss}}}};
}

inline RewardModel reward_model_from_json(const json& j) {
  RewardModel m;
  const json& weights = need(j, "weights");
  if (!weights.is_array() || weights.size() != kFeatureCount)
    throw Error("reward model must carry exactly " +
                std::to_string(kFeatureCount) + " weights");
  for (std::size_t i = 0; i < kFeatureCount; ++i)
    m.weights[i] = weights[i].get<double>();
  if (need_integer(j, "spec_version") != kFeatureSpecVersion)
    throw Error("unsupported feature spec version");
  const json& meta = need(j, "training_meta");
  m.meta.epochs = need_integer(meta, "epochs");
  m.meta.lr = need_number(meta, "lr");
  m.meta.seed = need(meta, "seed").get<std::uint64_t>();
  m.meta.final_loss = need_number(meta, "final_loss");
  return m;
}

template <>
struct RecordTraits<RewardModel> {
  static constexpr const char* name = "reward_model";
  static json serialize(const RewardModel& m) { return to_json(m); }
  static RewardModel deserialize(const json& j) {
    return reward_model_from_json(j);
  }
  static void check(const RewardModel&) {}
};

}  // namespace rlkf
