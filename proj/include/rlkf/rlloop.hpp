#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "rlkf/error.hpp"
#include "rlkf/metrics.hpp"
#include "rlkf/numeric.hpp"
#include "rlkf/oracle.hpp"
#include "rlkf/records.hpp"
#include "rlkf/reward.hpp"
#include "rlkf/rng.hpp"
#include "rlkf/simpolicy.hpp"

namespace rlkf {

enum class RewardSource { rule_based, reward_model };

inline std::string to_string(RewardSource s) {
  return s == RewardSource::rule_based ? "rule" : "reward_model";
}

template <>
inline RewardSource parse_enum<RewardSource>(const std::string& s) {
  if (s == "rule" || s == "rule_based") return RewardSource::rule_based;
  if (s == "rm" || s == "reward_model") return RewardSource::reward_model;
  throw Error("invalid reward source '" + s + "'");
}

inline double rule_reward(Outcome outcome) {
  switch (outcome) {
    case Outcome::correct: return 1.0;
    case Outcome::reject: return 0.0;
    case Outcome::wrong: return -1.0;
  }
  throw Error("unknown outcome");
}

// KL divergence between Bernoulli(p) and Bernoulli(q); probabilities are
// clamped away from 0 and 1 so saturated logits stay finite.
inline double kl_binary(double p, double q) {
  constexpr double eps = 1e-6;
  p = std::clamp(p, eps, 1.0 - eps);
  q = std::clamp(q, eps, 1.0 - eps);
  return p * std::log(p / q) + (1.0 - p) * std::log((1.0 - p) / (1.0 - q));
}

struct PolicyOptConfig {
  RewardSource reward_source = RewardSource::rule_based;
  double beta = 0.05;           // KL penalty weight against the initial policy
  double lr = 0.1;
  long long iterations = 2000;
  long long batch_size = 32;
  std::uint64_t seed = 0;
  double baseline_rate = 0.05;  // moving-average reward baseline per bucket
  long long zscore_warmup = 200;  // rewards observed before z-scoring kicks in
};

inline void validate(const PolicyOptConfig& cfg) {
  if (cfg.beta < 0.0) throw InvariantError("beta must be non-negative");
  if (cfg.lr <= 0.0) throw InvariantError("policy learning rate must be positive");
  if (cfg.iterations < 0)
    throw InvariantError("iterations must be non-negative");
  if (cfg.batch_size < 1) throw InvariantError("batch_size must be >= 1");
  if (cfg.baseline_rate <= 0.0 || cfg.baseline_rate > 1.0)
    throw InvariantError("baseline_rate must lie in (0,1]");
}

struct PolicyIterStats {
  long long iteration = 0;
  double mean_reward = 0.0;
  double mean_kl = 0.0;
  double objective = 0.0;
};

// Only the rejection logits move during training; competence is the frozen
// ground truth of what the simulated model knows.
struct TrainedPolicy {
  SimPolicy initial;
  SimPolicy current;
  std::vector<PolicyIterStats> history;
};

inline void validate(const TrainedPolicy& p) {
  validate(p.initial);
  validate(p.current);
  if (p.initial.competence != p.current.competence)
    throw InvariantError("policy training must not touch competence");
}

struct RewardProvider {
  RewardSource source = RewardSource::rule_based;
  const RewardModel* model = nullptr;
  const RejectionLexicon* lexicon = nullptr;

  double raw_reward(const Question& question, const std::string& text) const {
    const RejectionLexicon& lex =
        lexicon ? *lexicon : RejectionLexicon::defaults();
    if (source == RewardSource::rule_based) {
      ResponseSample graded = label_sample(question, 0, text, lex);
      return rule_reward(outcome_of(graded));
    }
    if (!model) throw Error("reward_model source requires a trained model");
    return model->score(featurize(question.prompt, text, lex));
  }
};

namespace detail {

// Reward normalization state: model-scored rewards are z-scored so the
// gradient scale does not depend on the reward model's arbitrary offset.
// Warmup rewards are scored against the running moments seen so far (the
// first observation maps to zero); after the warmup window the moments
// freeze so late training cannot drift the reward scale.
struct RewardNormalizer {
  bool enabled = false;
  long long warmup = 200;
  std::vector<double> observed;
  bool frozen = false;
  double mean = 0.0;
  double stddev = 1.0;

  double apply(double r) {
    if (!enabled) return r;
    if (!frozen) {
      observed.push_back(r);
      double sum = 0.0;
      for (double v : observed) sum += v;
      double m = sum / static_cast<double>(observed.size());
      double var = 0.0;
      for (double v : observed) var += (v - m) * (v - m);
      double sd = std::sqrt(var / static_cast<double>(observed.size()));
      if (static_cast<long long>(observed.size()) >= warmup) {
        mean = m;
        stddev = sd < 1e-9 ? 1.0 : sd;
        frozen = true;
      }
      return sd < 1e-9 ? 0.0 : (r - m) / sd;
    }
    return (r - mean) / stddev;
  }
};

struct OptimizerState {
  std::map<SubtaskKey, double> baseline;
  RewardNormalizer normalizer;
};

}  // namespace detail

// One optimization step over a batch of prompts. Per prompt: sample the
// reject/answer decision from the current logit, realize the response text,
// score it, and take a likelihood-ratio ascent step on
//   r - beta * log(pi(d) / pi0(d))
// with a per-bucket moving-average baseline subtracted from r. Each sample
// draws from an RNG stream keyed by (iteration, prompt id), so results do
// not depend on rollout order.
inline PolicyIterStats step(TrainedPolicy& policy,
                            std::span<const Question* const> batch,
                            const RewardProvider& provider,
                            const PolicyOptConfig& cfg, long long iteration,
                            const RejectionPool& rejections,
                            detail::OptimizerState& state) {
  if (batch.empty()) throw Error("policy step needs a non-empty batch");
  constexpr double eps = 1e-6;
  PolicyIterStats stats;
  stats.iteration = iteration;
  for (const Question* q : batch) {
    const SubtaskKey& key = q->subtask;
    double logit = policy.current.reject_logit.at(key);
    double p = sigmoid(logit);
    double p0 = reject_probability(policy.initial, key);

    Rng rng(stream_seed(cfg.seed, static_cast<std::uint64_t>(iteration),
                        fnv1a64(q->id)));
    SimResponse response =
        realize_response(policy.current, *q, rejections, rng);
    bool rejected = response.outcome == SimOutcome::reject;

    double reward = state.normalizer.apply(provider.raw_reward(*q, response.text));
    double p_taken = std::clamp(rejected ? p : 1.0 - p, eps, 1.0 - eps);
    double p0_taken = std::clamp(rejected ? p0 : 1.0 - p0, eps, 1.0 - eps);
    double log_ratio = std::log(p_taken / p0_taken);

    double& baseline = state.baseline[key];
    double advantage = reward - baseline;
    baseline += cfg.baseline_rate * (reward - baseline);

    double dlogpi = rejected ? 1.0 - p : -p;
    policy.current.reject_logit[key] +=
        cfg.lr * (advantage - cfg.beta * log_ratio) * dlogpi;

    stats.mean_reward += reward;
    stats.mean_kl += kl_binary(p, p0);
  }
  stats.mean_reward /= static_cast<double>(batch.size());
  stats.mean_kl /= static_cast<double>(batch.size());
  stats.objective = stats.mean_reward - cfg.beta * stats.mean_kl;
  return stats;
}

// Runs `iterations` steps over shuffled batches of the prompt pool.
// iterations == 0 returns the initial policy untouched.
inline TrainedPolicy train_policy(const SimPolicy& initial,
                                  std::span<const Question> prompts,
                                  const RewardProvider& provider,
                                  const PolicyOptConfig& cfg,
                                  const RejectionPool& rejections) {
  validate(initial);
  validate(cfg);
  if (prompts.empty()) throw Error("cannot train a policy on zero prompts");
  for (const auto& q : prompts) {
    if (!initial.competence.count(q.subtask))
      throw Error("policy does not cover subtask '" + q.subtask.str() +
                  "' required by prompt '" + q.id + "'");
  }
  TrainedPolicy policy{initial, initial, {}};
  policy.history.reserve(static_cast<std::size_t>(cfg.iterations));

  detail::OptimizerState state;
  state.normalizer.enabled = provider.source == RewardSource::reward_model;
  state.normalizer.warmup = std::max<long long>(1, cfg.zscore_warmup);

  std::vector<const Question*> order;
  order.reserve(prompts.size());
  for (const auto& q : prompts) order.push_back(&q);
  std::size_t cursor = order.size();  // force a shuffle before the first batch
  std::uint64_t pass = 0;

  std::vector<const Question*> batch;
  for (long long it = 0; it < cfg.iterations; ++it) {
    batch.clear();
    while (batch.size() < static_cast<std::size_t>(cfg.batch_size)) {
      if (cursor == order.size()) {
        Rng shuffle_rng(stream_seed(cfg.seed, fnv1a64("shuffle"), pass++));
        for (std::size_t i = order.size(); i > 1; --i)
          std::swap(order[i - 1], order[shuffle_rng.below(i)]);
        cursor = 0;
      }
      batch.push_back(order[cursor++]);
    }
    policy.history.push_back(
        step(policy, batch, provider, cfg, it, rejections, state));
  }
  validate(policy);
  return policy;
}

// ---------------------------------------------------------------------------
// Serialization.
// ---------------------------------------------------------------------------

inline json to_json(const TrainedPolicy& p) {
  json history = json::array();
  for (const auto& h : p.history) {
    history.push_back(json{{"iteration", h.iteration},
                           {"mean_reward", h.mean_reward},
                           {"mean_kl", h.mean_kl},
                           {"objective", h.objective}});
  }
  return json{{"initial", to_json(p.initial)},
              {"current", to_json(p.current)},
              {"history", std::move(history)}};
}

inline TrainedPolicy trained_policy_from_json(const json& j) {
  TrainedPolicy p;
  p.initial = policy_from_json(need(j, "initial"));
  p.current = policy_from_json(need(j, "current"));
  for (const auto& h : need(j, "history")) {
    p.history.push_back(PolicyIterStats{
        need_integer(h, "iteration"), need_number(h, "mean_reward"),
        need_number(h, "mean_kl"), need_number(h, "objective")});
  }
  return p;
}

template <>
struct RecordTraits<TrainedPolicy> {
  static constexpr const char* name = "trained_policy";
  static json serialize(const TrainedPolicy& p) { return to_json(p); }
  static TrainedPolicy deserialize(const json& j) {
    return trained_policy_from_json(j);
  }
  static void check(const TrainedPolicy& p) { validate(p); }
};

}  // namespace rlkf
