#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "rlkf/arithgen.hpp"
#include "rlkf/error.hpp"
#include "rlkf/feedback.hpp"
#include "rlkf/metrics.hpp"
#include "rlkf/modelclient.hpp"
#include "rlkf/oracle.hpp"
#include "rlkf/records.hpp"
#include "rlkf/report.hpp"
#include "rlkf/reward.hpp"
#include "rlkf/rlloop.hpp"
#include "rlkf/simpolicy.hpp"

namespace rlkf {

// ---------------------------------------------------------------------------
// Run configuration. Every field has a default derived from the master seed,
// so a config file only needs to name what it changes.
// ---------------------------------------------------------------------------

enum class PipelineMode { in_domain, out_of_domain, mixed };

inline std::string to_string(PipelineMode m) {
  switch (m) {
    case PipelineMode::in_domain: return "in_domain";
    case PipelineMode::out_of_domain: return "out_of_domain";
    case PipelineMode::mixed: return "mixed";
  }
  throw Error("unknown PipelineMode");
}

template <>
inline PipelineMode parse_enum<PipelineMode>(const std::string& s) {
  if (s == "in_domain" || s == "id") return PipelineMode::in_domain;
  if (s == "out_of_domain" || s == "ood") return PipelineMode::out_of_domain;
  if (s == "mixed") return PipelineMode::mixed;
  throw Error("invalid pipeline mode '" + s + "'");
}

enum class SourceKind { sim, endpoint };

inline std::string to_string(SourceKind k) {
  return k == SourceKind::sim ? "sim" : "endpoint";
}

template <>
inline SourceKind parse_enum<SourceKind>(const std::string& s) {
  if (s == "sim") return SourceKind::sim;
  if (s == "endpoint") return SourceKind::endpoint;
  throw Error("invalid source kind '" + s + "'");
}

struct DatasetConfig {
  long long train_questions = 10000;
  long long policy_questions = 3000;
  long long eval_questions = 1000;
  int min_digits = 1;
  int max_digits = kMaxOperandDigits;
};

struct SourceConfig {
  SourceKind kind = SourceKind::sim;
  std::optional<SimPolicy> policy;  // unset: standard mixed policy
  double initial_logit = 0.0;       // used only when policy is unset
  std::optional<EndpointConfig> endpoint;
  std::optional<std::string> cache_dir;  // unset: <out_dir>/cache
};

struct RunConfig {
  std::uint64_t seed = 1;
  std::filesystem::path out_dir = "run";
  PipelineMode mode = PipelineMode::in_domain;
  DatasetConfig dataset;
  SamplingConfig sampling;
  SourceConfig source;
  RmConfig reward_model;
  PolicyOptConfig optimizer;
  std::vector<double> alpha_grid;
};

inline RunConfig default_run_config(std::uint64_t seed = 1) {
  RunConfig cfg;
  cfg.seed = seed;
  cfg.reward_model.seed = stream_seed(seed, fnv1a64("rm"));
  cfg.optimizer.seed = stream_seed(seed, fnv1a64("rl"));
  cfg.alpha_grid = default_alpha_grid();
  return cfg;
}

inline SimPolicy source_policy(const RunConfig& cfg) {
  if (cfg.source.policy) return *cfg.source.policy;
  return standard_mixed_policy(stream_seed(cfg.seed, fnv1a64("policy")),
                               cfg.source.initial_logit);
}

inline void validate(const RunConfig& cfg) {
  try {
    if (cfg.out_dir.empty()) throw Error("out_dir must be set");
    if (cfg.dataset.train_questions < 1 || cfg.dataset.policy_questions < 1 ||
        cfg.dataset.eval_questions < 1)
      throw Error("dataset question counts must be >= 1");
    ArithSpec probe;
    probe.min_digits = cfg.dataset.min_digits;
    probe.max_digits = cfg.dataset.max_digits;
    validate(probe);
    if (cfg.sampling.n < 1) throw Error("sampling n must be >= 1");
    if (cfg.sampling.temperature <= 0.0)
      throw Error("sampling temperature must be positive");
    if (cfg.source.kind == SourceKind::endpoint) {
      if (!cfg.source.endpoint || cfg.source.endpoint->base_url.empty())
        throw Error("endpoint source needs endpoint.base_url");
    }
    if (cfg.reward_model.epochs < 1)
      throw Error("reward_model.epochs must be >= 1");
    if (cfg.reward_model.lr <= 0.0)
      throw Error("reward_model.lr must be positive");
    validate(cfg.optimizer);
    if (cfg.alpha_grid.empty()) throw Error("alpha_grid must be non-empty");
    for (double a : cfg.alpha_grid) {
      if (a < 0.0 || a > 1.0)
        throw Error("alpha_grid values must lie in [0,1]");
    }
    validate(source_policy(cfg));
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw ConfigError(e.what());
  }
}

// ---------------------------------------------------------------------------
// Config file parsing: strict about key names so typos fail loudly instead
// of silently running with a default.
// ---------------------------------------------------------------------------

inline void check_keys(const json& j, std::initializer_list<const char*> allowed,
                       const std::string& where) {
  if (!j.is_object())
    throw ConfigError("config section '" + where + "' must be an object");
  for (const auto& item : j.items()) {
    bool known = false;
    for (const char* key : allowed) {
      if (item.key() == key) {
        known = true;
        break;
      }
    }
    if (!known)
      throw ConfigError("unknown config key '" + where + "." + item.key() + "'");
  }
}

inline EndpointConfig endpoint_from_json(const json& j) {
  check_keys(j,
             {"base_url", "model_id", "path", "auth_env", "max_retries",
              "backoff_ms", "max_in_flight", "timeout_s"},
             "source.endpoint");
  EndpointConfig e;
  e.base_url = need_string(j, "base_url");
  if (j.contains("model_id")) e.model_id = need_string(j, "model_id");
  if (j.contains("path")) e.path = need_string(j, "path");
  if (j.contains("auth_env")) e.auth_env = need_string(j, "auth_env");
  if (j.contains("max_retries"))
    e.max_retries = static_cast<int>(need_integer(j, "max_retries"));
  if (j.contains("backoff_ms"))
    e.backoff_ms = static_cast<int>(need_integer(j, "backoff_ms"));
  if (j.contains("max_in_flight"))
    e.max_in_flight = static_cast<int>(need_integer(j, "max_in_flight"));
  if (j.contains("timeout_s"))
    e.timeout_s = static_cast<int>(need_integer(j, "timeout_s"));
  return e;
}

inline json endpoint_to_json(const EndpointConfig& e) {
  return json{{"base_url", e.base_url},     {"model_id", e.model_id},
              {"path", e.path},             {"auth_env", e.auth_env},
              {"max_retries", e.max_retries}, {"backoff_ms", e.backoff_ms},
              {"max_in_flight", e.max_in_flight}, {"timeout_s", e.timeout_s}};
}

inline RunConfig run_config_from_json(const json& j) {
  try {
    check_keys(j,
               {"seed", "out_dir", "mode", "dataset", "sampling", "source",
                "reward_model", "optimizer", "alpha_grid"},
               "config");
    std::uint64_t seed = 1;
    if (j.contains("seed"))
      seed = static_cast<std::uint64_t>(need_integer(j, "seed"));
    RunConfig cfg = default_run_config(seed);
    if (j.contains("out_dir"))
      cfg.out_dir = std::filesystem::path(need_string(j, "out_dir"));
    if (j.contains("mode"))
      cfg.mode = parse_enum<PipelineMode>(need_string(j, "mode"));
    if (j.contains("dataset")) {
      const json& d = j["dataset"];
      check_keys(d,
                 {"train_questions", "policy_questions", "eval_questions",
                  "min_digits", "max_digits"},
                 "dataset");
      if (d.contains("train_questions"))
        cfg.dataset.train_questions = need_integer(d, "train_questions");
      if (d.contains("policy_questions"))
        cfg.dataset.policy_questions = need_integer(d, "policy_questions");
      if (d.contains("eval_questions"))
        cfg.dataset.eval_questions = need_integer(d, "eval_questions");
      if (d.contains("min_digits"))
        cfg.dataset.min_digits = static_cast<int>(need_integer(d, "min_digits"));
      if (d.contains("max_digits"))
        cfg.dataset.max_digits = static_cast<int>(need_integer(d, "max_digits"));
    }
    if (j.contains("sampling")) {
      const json& s = j["sampling"];
      check_keys(s, {"n", "temperature", "prompt_setting"}, "sampling");
      if (s.contains("n"))
        cfg.sampling.n = static_cast<int>(need_integer(s, "n"));
      if (s.contains("temperature"))
        cfg.sampling.temperature = need_number(s, "temperature");
      if (s.contains("prompt_setting"))
        cfg.sampling.prompt_setting =
            parse_enum<PromptSettingKind>(need_string(s, "prompt_setting"));
    }
    if (j.contains("source")) {
      const json& s = j["source"];
      check_keys(s, {"kind", "policy", "initial_logit", "endpoint", "cache_dir"},
                 "source");
      if (s.contains("kind"))
        cfg.source.kind = parse_enum<SourceKind>(need_string(s, "kind"));
      if (s.contains("policy")) cfg.source.policy = policy_from_json(s["policy"]);
      if (s.contains("initial_logit"))
        cfg.source.initial_logit = need_number(s, "initial_logit");
      if (s.contains("endpoint"))
        cfg.source.endpoint = endpoint_from_json(s["endpoint"]);
      if (s.contains("cache_dir"))
        cfg.source.cache_dir = need_string(s, "cache_dir");
    }
    if (j.contains("reward_model")) {
      const json& r = j["reward_model"];
      check_keys(r, {"epochs", "lr", "seed"}, "reward_model");
      if (r.contains("epochs")) cfg.reward_model.epochs = need_integer(r, "epochs");
      if (r.contains("lr")) cfg.reward_model.lr = need_number(r, "lr");
      if (r.contains("seed"))
        cfg.reward_model.seed = static_cast<std::uint64_t>(need_integer(r, "seed"));
    }
    if (j.contains("optimizer")) {
      const json& o = j["optimizer"];
      check_keys(o,
                 {"reward_source", "beta", "lr", "iterations", "batch_size",
                  "seed", "baseline_rate", "zscore_warmup"},
                 "optimizer");
      if (o.contains("reward_source"))
        cfg.optimizer.reward_source =
            parse_enum<RewardSource>(need_string(o, "reward_source"));
      if (o.contains("beta")) cfg.optimizer.beta = need_number(o, "beta");
      if (o.contains("lr")) cfg.optimizer.lr = need_number(o, "lr");
      if (o.contains("iterations"))
        cfg.optimizer.iterations = need_integer(o, "iterations");
      if (o.contains("batch_size"))
        cfg.optimizer.batch_size = need_integer(o, "batch_size");
      if (o.contains("seed"))
        cfg.optimizer.seed = static_cast<std::uint64_t>(need_integer(o, "seed"));
      if (o.contains("baseline_rate"))
        cfg.optimizer.baseline_rate = need_number(o, "baseline_rate");
      if (o.contains("zscore_warmup"))
        cfg.optimizer.zscore_warmup = need_integer(o, "zscore_warmup");
    }
    if (j.contains("alpha_grid")) {
      if (!j["alpha_grid"].is_array())
        throw ConfigError("alpha_grid must be an array");
      cfg.alpha_grid.clear();
      for (const auto& a : j["alpha_grid"]) {
        if (!a.is_number()) throw ConfigError("alpha_grid must hold numbers");
        cfg.alpha_grid.push_back(a.get<double>());
      }
    }
    validate(cfg);
    return cfg;
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw ConfigError(e.what());
  }
}

inline json to_json(const RunConfig& cfg) {
  json j{{"seed", cfg.seed},
         {"out_dir", cfg.out_dir.string()},
         {"mode", to_string(cfg.mode)},
         {"dataset",
          json{{"train_questions", cfg.dataset.train_questions},
               {"policy_questions", cfg.dataset.policy_questions},
               {"eval_questions", cfg.dataset.eval_questions},
               {"min_digits", cfg.dataset.min_digits},
               {"max_digits", cfg.dataset.max_digits}}},
         {"sampling",
          json{{"n", cfg.sampling.n},
               {"temperature", cfg.sampling.temperature},
               {"prompt_setting", to_string(cfg.sampling.prompt_setting)}}}};
  json source{{"kind", to_string(cfg.source.kind)}};
  if (cfg.source.policy) source["policy"] = to_json(*cfg.source.policy);
  source["initial_logit"] = cfg.source.initial_logit;
  if (cfg.source.endpoint)
    source["endpoint"] = endpoint_to_json(*cfg.source.endpoint);
  if (cfg.source.cache_dir) source["cache_dir"] = *cfg.source.cache_dir;
  j["source"] = std::move(source);
  j["reward_model"] = json{{"epochs", cfg.reward_model.epochs},
                           {"lr", cfg.reward_model.lr},
                           {"seed", cfg.reward_model.seed}};
  j["optimizer"] = json{{"reward_source", to_string(cfg.optimizer.reward_source)},
                        {"beta", cfg.optimizer.beta},
                        {"lr", cfg.optimizer.lr},
                        {"iterations", cfg.optimizer.iterations},
                        {"batch_size", cfg.optimizer.batch_size},
                        {"seed", cfg.optimizer.seed},
                        {"baseline_rate", cfg.optimizer.baseline_rate},
                        {"zscore_warmup", cfg.optimizer.zscore_warmup}};
  j["alpha_grid"] = cfg.alpha_grid;
  return j;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open config file '" + path.string() + "'");
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ConfigError("config file '" + path.string() + "': " + e.what());
  }
  return run_config_from_json(j);
}

// ---------------------------------------------------------------------------
// Artifact layout and hashing.
// ---------------------------------------------------------------------------

inline constexpr const char* kQuestionsFile = "questions.jsonl";
inline constexpr const char* kSamplesFile = "samples.jsonl";
inline constexpr const char* kLabeledFile = "labeled.jsonl";
inline constexpr const char* kPairsFile = "pairs.jsonl";
inline constexpr const char* kRewardModelFile = "reward_model.jsonl";
inline constexpr const char* kPolicyFile = "policy.jsonl";
inline constexpr const char* kEvalFile = "eval.jsonl";
inline constexpr const char* kReportDir = "report";
inline constexpr const char* kManifestFile = "manifest.json";

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

inline std::uint64_t hash_stream(std::istream& in) {
  std::uint64_t h = 1469598103934665603ull;
  char buf[1 << 14];
  while (in.read(buf, sizeof buf) || in.gcount() > 0) {
    for (std::streamsize i = 0; i < in.gcount(); ++i) {
      h ^= static_cast<unsigned char>(buf[i]);
      h *= 1099511628211ull;
    }
    if (!in) break;
  }
  return h;
}

inline std::string hash_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot hash '" + path.string() + "'");
  return hex64(hash_stream(in));
}

inline std::string hash_dir(const std::filesystem::path& dir) {
  std::vector<std::filesystem::path> files;
  for (const auto& entry : std::filesystem::recursive_directory_iterator(dir)) {
    if (entry.is_regular_file()) files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());
  std::string digest;
  for (const auto& f : files) {
    digest += f.lexically_relative(dir).generic_string();
    digest += '\0';
    digest += hash_file(f);
    digest += '\n';
  }
  return hex64(fnv1a64(digest));
}

inline std::optional<std::string> hash_path(const std::filesystem::path& p) {
  std::error_code ec;
  if (std::filesystem::is_directory(p, ec)) return hash_dir(p);
  if (std::filesystem::is_regular_file(p, ec)) return hash_file(p);
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// Manifest: per-stage config and artifact hashes. Deliberately carries no
// timestamps so identical runs write identical manifests.
// ---------------------------------------------------------------------------

struct StageRecord {
  std::string stage;
  std::string config_hash;
  std::map<std::string, std::string> inputs;   // path relative to out_dir
  std::map<std::string, std::string> outputs;  // path relative to out_dir
};

struct Manifest {
  std::vector<StageRecord> stages;
};

inline json to_json(const Manifest& m) {
  json stages = json::array();
  json artifacts = json::array();
  for (const auto& s : m.stages) {
    json inputs = json::object();
    for (const auto& [path, hash] : s.inputs) inputs[path] = hash;
    json outputs = json::object();
    for (const auto& [path, hash] : s.outputs) outputs[path] = hash;
    stages.push_back(json{{"stage", s.stage},
                          {"config_hash", s.config_hash},
                          {"inputs", std::move(inputs)},
                          {"outputs", std::move(outputs)}});
    for (const auto& [path, hash] : s.outputs)
      artifacts.push_back(
          json{{"path", path}, {"hash", hash}, {"stage", s.stage}});
  }
  return json{{"artifacts", std::move(artifacts)},
              {"stages", std::move(stages)}};
}

inline Manifest manifest_from_json(const json& j) {
  Manifest m;
  for (const auto& s : need(j, "stages")) {
    StageRecord rec;
    rec.stage = need_string(s, "stage");
    rec.config_hash = need_string(s, "config_hash");
    for (const auto& item : need(s, "inputs").items())
      rec.inputs[item.key()] = item.value().get<std::string>();
    for (const auto& item : need(s, "outputs").items())
      rec.outputs[item.key()] = item.value().get<std::string>();
    m.stages.push_back(std::move(rec));
  }
  return m;
}

inline void write_manifest(const std::filesystem::path& out_dir,
                           const Manifest& m) {
  write_text_file(out_dir / kManifestFile, to_json(m).dump(2) + "\n");
}

inline std::optional<Manifest> load_manifest(
    const std::filesystem::path& out_dir) {
  std::ifstream in(out_dir / kManifestFile, std::ios::binary);
  if (!in) return std::nullopt;
  try {
    json j;
    in >> j;
    return manifest_from_json(j);
  } catch (const std::exception&) {
    return std::nullopt;  // stale or corrupt manifest: rebuild everything
  }
}

class StageFailure : public Error {
 public:
  StageFailure(std::string stage, const std::string& message)
      : Error("stage '" + stage + "' failed: " + message),
        stage_(std::move(stage)) {}
  const std::string& stage() const { return stage_; }

 private:
  std::string stage_;
};

// ---------------------------------------------------------------------------
// Stage bodies. Each reads its inputs from disk and writes one artifact, so
// stages are individually runnable from the CLI.
// ---------------------------------------------------------------------------

namespace detail {

struct Splits {
  std::vector<Question> train;
  std::vector<Question> policy;
  std::vector<Question> eval;
};

inline Splits split_questions(const RunConfig& cfg,
                              std::vector<Question> questions) {
  const auto t = static_cast<std::size_t>(cfg.dataset.train_questions);
  const auto p = static_cast<std::size_t>(cfg.dataset.policy_questions);
  const auto e = static_cast<std::size_t>(cfg.dataset.eval_questions);
  if (questions.size() != t + p + e)
    throw Error("questions file holds " + std::to_string(questions.size()) +
                " records but the config expects " + std::to_string(t + p + e));
  Splits s;
  s.train.assign(questions.begin(), questions.begin() + t);
  s.policy.assign(questions.begin() + t, questions.begin() + t + p);
  s.eval.assign(questions.begin() + t + p, questions.end());
  return s;
}

inline Sampler make_sampler(const RunConfig& cfg, const SimPolicy& policy) {
  if (cfg.source.kind == SourceKind::sim)
    return Sampler(SimSource{policy, default_rejection_pool()});
  std::filesystem::path cache = cfg.source.cache_dir
                                    ? std::filesystem::path(*cfg.source.cache_dir)
                                    : cfg.out_dir / "cache";
  return Sampler(*cfg.source.endpoint, cache);
}

inline Outcome outcome_of_extraction(const Question& q, const Extraction& e) {
  if (e.kind == ExtractionKind::reject) return Outcome::reject;
  if (e.kind == ExtractionKind::unparseable) return Outcome::wrong;
  auto ok = judge(q, e, e.value);
  return ok.value_or(false) ? Outcome::correct : Outcome::wrong;
}

}  // namespace detail

inline void run_gen_stage(const RunConfig& cfg) {
  const long long total = cfg.dataset.train_questions +
                          cfg.dataset.policy_questions +
                          cfg.dataset.eval_questions;
  const ArithOp ops[] = {ArithOp::add, ArithOp::sub, ArithOp::mul,
                         ArithOp::div};
  TemplatePool templates = default_template_pool();
  std::vector<Question> questions;
  questions.reserve(static_cast<std::size_t>(total));
  for (int k = 0; k < 4; ++k) {
    ArithSpec spec;
    spec.operation = ops[k];
    spec.min_digits = cfg.dataset.min_digits;
    spec.max_digits = cfg.dataset.max_digits;
    spec.count = total / 4 + (k < total % 4 ? 1 : 0);
    spec.seed = stream_seed(cfg.seed, fnv1a64("gen"));
    if (spec.count == 0) continue;
    auto batch = generate(spec, templates);
    questions.insert(questions.end(), batch.begin(), batch.end());
  }
  Rng rng(stream_seed(cfg.seed, fnv1a64("shuffle")));
  for (std::size_t i = questions.size(); i > 1; --i) {
    std::swap(questions[i - 1], questions[rng.below(i)]);
  }
  write_records(cfg.out_dir / kQuestionsFile, questions);
}

inline void run_sample_stage(const RunConfig& cfg) {
  auto splits = detail::split_questions(
      cfg, read_records<Question>(cfg.out_dir / kQuestionsFile));
  Sampler sampler = detail::make_sampler(cfg, source_policy(cfg));
  PromptSetting setting = default_prompt_setting(cfg.sampling.prompt_setting);
  std::vector<SampleSet> sets;
  sets.reserve(splits.train.size());
  for (const auto& q : splits.train) {
    sets.push_back(sampler.sample_n(q, cfg.sampling.n,
                                    cfg.sampling.temperature, setting));
  }
  write_records(cfg.out_dir / kSamplesFile, sets);
}

inline void run_label_stage(const RunConfig& cfg) {
  auto sets = read_records<SampleSet>(cfg.out_dir / kSamplesFile);
  RejectionLexicon lexicon = RejectionLexicon::defaults();
  for (auto& set : sets) {
    for (auto& s : set.samples) {
      s = label_sample(set.question, s.sample_index, std::move(s.text), lexicon);
    }
  }
  write_records(cfg.out_dir / kLabeledFile, sets);
}

// Mixed mode alternates the two feedback rules question by question, so both
// pair populations appear regardless of how the file is ordered.
inline std::vector<PreferencePair> synthesize_pairs(
    std::span<const SampleSet> sets, PipelineMode mode,
    const RejectionPool& pool, std::uint64_t seed) {
  std::vector<PreferencePair> pairs;
  for (std::size_t i = 0; i < sets.size(); ++i) {
    bool in_domain = mode == PipelineMode::in_domain ||
                     (mode == PipelineMode::mixed && i % 2 == 0);
    auto pair = in_domain ? synthesize_in_domain(sets[i], pool, seed)
                          : synthesize_out_of_domain(sets[i], pool, seed);
    if (pair) pairs.push_back(std::move(*pair));
  }
  if (pairs.empty())
    throw Error("no preference pairs could be synthesized; every question "
                "fell into a no-pair case");
  return pairs;
}

inline void run_pairs_stage(const RunConfig& cfg) {
  auto sets = read_records<SampleSet>(cfg.out_dir / kLabeledFile);
  auto pairs = synthesize_pairs(sets, cfg.mode, default_rejection_pool(),
                                stream_seed(cfg.seed, fnv1a64("pairs")));
  write_records(cfg.out_dir / kPairsFile, pairs);
}

inline void run_train_rm_stage(const RunConfig& cfg) {
  auto pairs = read_records<PreferencePair>(cfg.out_dir / kPairsFile);
  RewardModel model = train(pairs, cfg.reward_model);
  write_records(cfg.out_dir / kRewardModelFile, std::vector<RewardModel>{model});
}

template <typename T>
T read_single_record(const std::filesystem::path& path) {
  auto records = read_records<T>(path);
  if (records.size() != 1)
    throw Error("'" + path.string() + "' must hold exactly one " +
                std::string(RecordTraits<T>::name) + " record, found " +
                std::to_string(records.size()));
  return std::move(records.front());
}

inline void run_train_policy_stage(const RunConfig& cfg) {
  auto splits = detail::split_questions(
      cfg, read_records<Question>(cfg.out_dir / kQuestionsFile));
  SimPolicy initial = source_policy(cfg);
  RewardModel model;
  RewardProvider provider;
  provider.source = cfg.optimizer.reward_source;
  if (provider.source == RewardSource::reward_model) {
    model = read_single_record<RewardModel>(cfg.out_dir / kRewardModelFile);
    provider.model = &model;
  }
  TrainedPolicy trained = train_policy(initial, splits.policy, provider,
                                       cfg.optimizer, default_rejection_pool());
  write_records(cfg.out_dir / kPolicyFile,
                std::vector<TrainedPolicy>{trained});
}

inline void run_eval_stage(const RunConfig& cfg) {
  auto splits = detail::split_questions(
      cfg, read_records<Question>(cfg.out_dir / kQuestionsFile));
  TrainedPolicy trained =
      read_single_record<TrainedPolicy>(cfg.out_dir / kPolicyFile);
  RejectionLexicon lexicon = RejectionLexicon::defaults();
  RejectionPool pool = default_rejection_pool();
  PromptSetting setting = default_prompt_setting(cfg.sampling.prompt_setting);

  Sampler initial_sampler = detail::make_sampler(cfg, trained.initial);
  Sampler trained_sampler(SimSource{trained.current, pool});

  std::vector<LabeledOutcome> policy_outcomes;
  std::vector<LabeledOutcome> consistency_outcomes;
  std::vector<LabeledOutcome> trained_outcomes;
  for (const auto& q : splits.eval) {
    SampleSet set = initial_sampler.sample_n(q, cfg.sampling.n,
                                             cfg.sampling.temperature, setting);
    for (auto& s : set.samples)
      s = label_sample(q, s.sample_index, std::move(s.text), lexicon);
    policy_outcomes.push_back(
        LabeledOutcome{q.subtask, outcome_of(set.samples.front())});
    consistency_outcomes.push_back(LabeledOutcome{
        q.subtask,
        detail::outcome_of_extraction(q, consistency_baseline(set))});

    SampleSet trained_set = trained_sampler.sample_n(
        q, 1, cfg.sampling.temperature, setting);
    ResponseSample graded = label_sample(q, 0, trained_set.samples[0].text,
                                         lexicon);
    trained_outcomes.push_back(LabeledOutcome{q.subtask, outcome_of(graded)});
  }
  std::vector<EvalRecord> records;
  records.push_back(
      EvalRecord{"policy", score(policy_outcomes, cfg.alpha_grid)});
  records.push_back(
      EvalRecord{"consistency", score(consistency_outcomes, cfg.alpha_grid)});
  records.push_back(
      EvalRecord{"trained", score(trained_outcomes, cfg.alpha_grid)});
  write_records(cfg.out_dir / kEvalFile, records);
}

inline void run_report_stage(const RunConfig& cfg) {
  auto records = read_records<EvalRecord>(cfg.out_dir / kEvalFile);
  std::vector<EvalRecord> baseline;
  for (const auto& r : records) {
    if (r.method == "policy") baseline.push_back(r);
  }
  write_report_files(cfg.out_dir / kReportDir, records, baseline);
}

// ---------------------------------------------------------------------------
// Orchestration with content-hash memoization. A stage is skipped only when
// its config hash, every input hash, and every output hash all match the
// previous manifest and no earlier stage ran this time; anything else reruns
// the stage and everything after it.
// ---------------------------------------------------------------------------

namespace detail {

struct StageDef {
  std::string name;
  json config;
  std::vector<std::string> inputs;   // relative to out_dir
  std::vector<std::string> outputs;  // relative to out_dir
  void (*run)(const RunConfig&);
};

inline std::vector<StageDef> stage_defs(const RunConfig& cfg) {
  json dataset{{"train_questions", cfg.dataset.train_questions},
               {"policy_questions", cfg.dataset.policy_questions},
               {"eval_questions", cfg.dataset.eval_questions},
               {"min_digits", cfg.dataset.min_digits},
               {"max_digits", cfg.dataset.max_digits}};
  json sampling{{"n", cfg.sampling.n},
                {"temperature", cfg.sampling.temperature},
                {"prompt_setting", to_string(cfg.sampling.prompt_setting)}};
  json source{{"kind", to_string(cfg.source.kind)},
              {"policy", to_json(source_policy(cfg))}};
  if (cfg.source.endpoint)
    source["endpoint"] = endpoint_to_json(*cfg.source.endpoint);
  json rm{{"epochs", cfg.reward_model.epochs},
          {"lr", cfg.reward_model.lr},
          {"seed", cfg.reward_model.seed}};
  json optimizer{{"reward_source", to_string(cfg.optimizer.reward_source)},
                 {"beta", cfg.optimizer.beta},
                 {"lr", cfg.optimizer.lr},
                 {"iterations", cfg.optimizer.iterations},
                 {"batch_size", cfg.optimizer.batch_size},
                 {"seed", cfg.optimizer.seed},
                 {"baseline_rate", cfg.optimizer.baseline_rate},
                 {"zscore_warmup", cfg.optimizer.zscore_warmup}};

  std::vector<StageDef> defs;
  defs.push_back({"gen", json{{"seed", cfg.seed}, {"dataset", dataset}},
                  {},
                  {kQuestionsFile},
                  &run_gen_stage});
  defs.push_back({"sample",
                  json{{"sampling", sampling},
                       {"source", source},
                       {"train_questions", cfg.dataset.train_questions}},
                  {kQuestionsFile},
                  {kSamplesFile},
                  &run_sample_stage});
  defs.push_back({"label", json::object(), {kSamplesFile}, {kLabeledFile},
                  &run_label_stage});
  defs.push_back({"pairs",
                  json{{"mode", to_string(cfg.mode)}, {"seed", cfg.seed}},
                  {kLabeledFile},
                  {kPairsFile},
                  &run_pairs_stage});
  defs.push_back({"train-rm", rm, {kPairsFile}, {kRewardModelFile},
                  &run_train_rm_stage});
  std::vector<std::string> policy_inputs{kQuestionsFile};
  if (cfg.optimizer.reward_source == RewardSource::reward_model)
    policy_inputs.push_back(kRewardModelFile);
  defs.push_back({"train-policy",
                  json{{"optimizer", optimizer},
                       {"policy", to_json(source_policy(cfg))},
                       {"dataset", dataset}},
                  std::move(policy_inputs),
                  {kPolicyFile},
                  &run_train_policy_stage});
  defs.push_back({"eval",
                  json{{"sampling", sampling},
                       {"source", source},
                       {"alpha_grid", cfg.alpha_grid},
                       {"dataset", dataset}},
                  {kQuestionsFile, kPolicyFile},
                  {kEvalFile},
                  &run_eval_stage});
  defs.push_back({"report", json::object(), {kEvalFile}, {kReportDir},
                  &run_report_stage});
  return defs;
}

}  // namespace detail

struct PipelineResult {
  Manifest manifest;
  std::vector<std::string> ran;      // stage names that executed
  std::vector<std::string> skipped;  // stages left as-is
};

inline PipelineResult run_pipeline(const RunConfig& cfg,
                                   std::ostream* log = nullptr) {
  validate(cfg);
  std::filesystem::create_directories(cfg.out_dir);
  auto defs = detail::stage_defs(cfg);
  std::optional<Manifest> previous = load_manifest(cfg.out_dir);

  auto previous_record = [&](const std::string& name) -> const StageRecord* {
    if (!previous) return nullptr;
    for (const auto& s : previous->stages) {
      if (s.stage == name) return &s;
    }
    return nullptr;
  };
  auto note = [&](const std::string& line) {
    if (log) *log << line << '\n';
  };

  PipelineResult result;
  bool upstream_ran = false;
  for (const auto& def : defs) {
    const std::string config_hash = hex64(fnv1a64(def.config.dump()));
    StageRecord record;
    record.stage = def.name;
    record.config_hash = config_hash;

    std::map<std::string, std::string> input_hashes;
    bool inputs_ok = true;
    for (const auto& rel : def.inputs) {
      auto h = hash_path(cfg.out_dir / rel);
      if (!h) {
        inputs_ok = false;
        break;
      }
      input_hashes[rel] = *h;
    }
    if (!inputs_ok)
      throw StageFailure(def.name, "missing input artifact");

    const StageRecord* prev = previous_record(def.name);
    bool skippable = !upstream_ran && prev && prev->config_hash == config_hash &&
                     prev->inputs == input_hashes;
    if (skippable) {
      for (const auto& rel : def.outputs) {
        auto h = hash_path(cfg.out_dir / rel);
        auto it = prev->outputs.find(rel);
        if (!h || it == prev->outputs.end() || it->second != *h) {
          skippable = false;
          break;
        }
      }
    }

    record.inputs = std::move(input_hashes);
    if (skippable) {
      record.outputs = prev->outputs;
      note("[" + def.name + "] skipped (up to date)");
      result.skipped.push_back(def.name);
    } else {
      note("[" + def.name + "] running");
      try {
        def.run(cfg);
      } catch (const std::exception& e) {
        write_manifest(cfg.out_dir, result.manifest);
        throw StageFailure(def.name, e.what());
      }
      for (const auto& rel : def.outputs) {
        auto h = hash_path(cfg.out_dir / rel);
        if (!h)
          throw StageFailure(def.name,
                             "stage completed without writing '" + rel + "'");
        record.outputs[rel] = *h;
      }
      upstream_ran = true;
      result.ran.push_back(def.name);
    }
    result.manifest.stages.push_back(std::move(record));
  }
  write_manifest(cfg.out_dir, result.manifest);
  return result;
}

}  // namespace rlkf
