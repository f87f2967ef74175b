#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "rlkf/error.hpp"

namespace rlkf {

using json = nlohmann::ordered_json;

enum class Domain { arithmetic, qa };
enum class ArithOp { add, sub, mul, div, none };
enum class DigitBucket { d1_2, d3_5, none };
enum class ExtractionKind { answer, reject, unparseable };
enum class Outcome { correct, reject, wrong };
enum class PromptSettingKind { no_system, prudent_system, in_context };
enum class PairKind {
  correct_over_reject,
  correct_over_wrong,
  reject_over_wrong,
  answer_over_reject,
  reject_over_answer,
};
enum class PairSource { in_domain, out_of_domain };

inline std::string to_string(Domain d) {
  return d == Domain::arithmetic ? "arithmetic" : "qa";
}

inline std::string to_string(ArithOp op) {
  switch (op) {
    case ArithOp::add: return "add";
    case ArithOp::sub: return "sub";
    case ArithOp::mul: return "mul";
    case ArithOp::div: return "div";
    case ArithOp::none: return "none";
  }
  throw Error("unknown ArithOp");
}

inline std::string to_string(DigitBucket b) {
  switch (b) {
    case DigitBucket::d1_2: return "d1_2";
    case DigitBucket::d3_5: return "d3_5";
    case DigitBucket::none: return "none";
  }
  throw Error("unknown DigitBucket");
}

inline std::string to_string(ExtractionKind k) {
  switch (k) {
    case ExtractionKind::answer: return "answer";
    case ExtractionKind::reject: return "reject";
    case ExtractionKind::unparseable: return "unparseable";
  }
  throw Error("unknown ExtractionKind");
}

inline std::string to_string(Outcome o) {
  switch (o) {
    case Outcome::correct: return "correct";
    case Outcome::reject: return "reject";
    case Outcome::wrong: return "wrong";
  }
  throw Error("unknown Outcome");
}

inline std::string to_string(PromptSettingKind k) {
  switch (k) {
    case PromptSettingKind::no_system: return "no_system";
    case PromptSettingKind::prudent_system: return "prudent_system";
    case PromptSettingKind::in_context: return "in_context";
  }
  throw Error("unknown PromptSettingKind");
}

inline std::string to_string(PairKind k) {
  switch (k) {
    case PairKind::correct_over_reject: return "correct_over_reject";
    case PairKind::correct_over_wrong: return "correct_over_wrong";
    case PairKind::reject_over_wrong: return "reject_over_wrong";
    case PairKind::answer_over_reject: return "answer_over_reject";
    case PairKind::reject_over_answer: return "reject_over_answer";
  }
  throw Error("unknown PairKind");
}

inline std::string to_string(PairSource s) {
  return s == PairSource::in_domain ? "in_domain" : "out_of_domain";
}

template <typename E>
E parse_enum(const std::string& s);

template <>
inline Domain parse_enum<Domain>(const std::string& s) {
  if (s == "arithmetic") return Domain::arithmetic;
  if (s == "qa") return Domain::qa;
  throw Error("invalid domain '" + s + "'");
}

template <>
inline ArithOp parse_enum<ArithOp>(const std::string& s) {
  if (s == "add") return ArithOp::add;
  if (s == "sub") return ArithOp::sub;
  if (s == "mul") return ArithOp::mul;
  if (s == "div") return ArithOp::div;
  if (s == "none") return ArithOp::none;
  throw Error("invalid operation '" + s + "'");
}

template <>
inline DigitBucket parse_enum<DigitBucket>(const std::string& s) {
  if (s == "d1_2") return DigitBucket::d1_2;
  if (s == "d3_5") return DigitBucket::d3_5;
  if (s == "none") return DigitBucket::none;
  throw Error("invalid digit bucket '" + s + "'");
}

template <>
inline ExtractionKind parse_enum<ExtractionKind>(const std::string& s) {
  if (s == "answer") return ExtractionKind::answer;
  if (s == "reject") return ExtractionKind::reject;
  if (s == "unparseable") return ExtractionKind::unparseable;
  throw Error("invalid extraction kind '" + s + "'");
}

template <>
inline PromptSettingKind parse_enum<PromptSettingKind>(const std::string& s) {
  if (s == "no_system") return PromptSettingKind::no_system;
  if (s == "prudent_system") return PromptSettingKind::prudent_system;
  if (s == "in_context") return PromptSettingKind::in_context;
  throw Error("invalid prompt setting '" + s + "'");
}

template <>
inline PairKind parse_enum<PairKind>(const std::string& s) {
  if (s == "correct_over_reject") return PairKind::correct_over_reject;
  if (s == "correct_over_wrong") return PairKind::correct_over_wrong;
  if (s == "reject_over_wrong") return PairKind::reject_over_wrong;
  if (s == "answer_over_reject") return PairKind::answer_over_reject;
  if (s == "reject_over_answer") return PairKind::reject_over_answer;
  throw Error("invalid pair kind '" + s + "'");
}

template <>
inline PairSource parse_enum<PairSource>(const std::string& s) {
  if (s == "in_domain") return PairSource::in_domain;
  if (s == "out_of_domain") return PairSource::out_of_domain;
  throw Error("invalid pair source '" + s + "'");
}

struct SubtaskKey {
  ArithOp operation = ArithOp::none;
  DigitBucket digit_bucket = DigitBucket::none;

  auto operator<=>(const SubtaskKey&) const = default;

  std::string str() const {
    return to_string(operation) + ":" + to_string(digit_bucket);
  }
};

inline SubtaskKey parse_subtask(const std::string& s) {
  auto colon = s.find(':');
  if (colon == std::string::npos)
    throw Error("invalid subtask key '" + s + "' (want 'op:bucket')");
  return SubtaskKey{parse_enum<ArithOp>(s.substr(0, colon)),
                    parse_enum<DigitBucket>(s.substr(colon + 1))};
}

struct Question {
  std::string id;
  Domain domain = Domain::arithmetic;
  std::string prompt;
  SubtaskKey subtask;
  std::optional<std::string> gold;
  std::optional<int> template_id;
};

struct Extraction {
  ExtractionKind kind = ExtractionKind::unparseable;
  std::string value;  // normalized answer; meaningful only for kind == answer

  bool operator==(const Extraction&) const = default;
};

struct ResponseSample {
  std::string question_id;
  int sample_index = 0;
  std::string text;
  Extraction extraction;
  std::optional<bool> correct;
};

struct SamplingConfig {
  double temperature = 1.0;
  int n = 10;
  PromptSettingKind prompt_setting = PromptSettingKind::no_system;
};

struct SampleSet {
  Question question;
  std::vector<ResponseSample> samples;
  SamplingConfig sampling_config;
};

struct OutcomeCounts {
  long long n = 0;
  long long n_c = 0;
  long long n_r = 0;
  long long n_w = 0;
};

struct PreferencePair {
  std::string question_id;
  std::string prompt;
  std::string chosen;
  std::string rejected;
  PairKind kind = PairKind::correct_over_wrong;
  PairSource source = PairSource::in_domain;
  std::uint64_t rng_seed = 0;
};

// ---------------------------------------------------------------------------
// Invariant checks. Serialization refuses records that violate these, and
// read_records() re-validates so corrupt files fail with the invariant named.
// ---------------------------------------------------------------------------

inline void validate(const SubtaskKey& key) {
  bool has_op = key.operation != ArithOp::none;
  bool has_bucket = key.digit_bucket != DigitBucket::none;
  if (has_op != has_bucket)
    throw InvariantError(
        "subtask key must set operation and digit_bucket together, got '" +
        key.str() + "'");
}

inline void validate(const Question& q) {
  if (q.id.empty()) throw InvariantError("question id must be non-empty");
  validate(q.subtask);
  if (q.domain == Domain::arithmetic) {
    if (q.subtask.operation == ArithOp::none)
      throw InvariantError("arithmetic question '" + q.id +
                           "' must carry an arithmetic subtask key");
    if (!q.gold.has_value())
      throw InvariantError("arithmetic question '" + q.id +
                           "' must carry a gold answer");
  } else {
    if (q.subtask.operation != ArithOp::none)
      throw InvariantError("qa question '" + q.id +
                           "' must use subtask (none, none)");
  }
  if (q.prompt.empty())
    throw InvariantError("question '" + q.id + "' has an empty prompt");
}

inline void validate(const ResponseSample& s) {
  if (s.sample_index < 0)
    throw InvariantError("sample_index must be non-negative");
  if (s.correct.has_value() && s.extraction.kind != ExtractionKind::answer)
    throw InvariantError(
        "correctness may be set only on answer extractions (question '" +
        s.question_id + "', sample " + std::to_string(s.sample_index) + ")");
  if (s.extraction.kind == ExtractionKind::answer && s.extraction.value.empty())
    throw InvariantError("answer extraction must carry a value (question '" +
                         s.question_id + "')");
}

inline void validate(const SampleSet& set) {
  validate(set.question);
  if (set.samples.empty())
    throw InvariantError("sample set for question '" + set.question.id +
                         "' must contain at least one sample");
  if (set.sampling_config.n != static_cast<int>(set.samples.size()))
    throw InvariantError("sampling_config.n does not match sample count for '" +
                         set.question.id + "'");
  if (set.sampling_config.temperature <= 0.0)
    throw InvariantError("sampling temperature must be positive");
  std::set<int> indices;
  for (const auto& s : set.samples) {
    validate(s);
    if (!indices.insert(s.sample_index).second)
      throw InvariantError("duplicate sample_index " +
                           std::to_string(s.sample_index) + " for question '" +
                           set.question.id + "'");
  }
  if (*indices.begin() != 0 ||
      *indices.rbegin() != static_cast<int>(set.samples.size()) - 1)
    throw InvariantError("sample_index values must cover 0..n-1 for '" +
                         set.question.id + "'");
}

inline void validate(const OutcomeCounts& c) {
  if (c.n < 0 || c.n_c < 0 || c.n_r < 0 || c.n_w < 0)
    throw InvariantError("outcome counts must be non-negative");
  if (c.n != c.n_c + c.n_r + c.n_w)
    throw InvariantError("outcome counts must satisfy n = n_c + n_r + n_w");
}

inline void validate(const PreferencePair& p) {
  if (p.question_id.empty())
    throw InvariantError("preference pair must reference a question id");
  if (p.chosen == p.rejected)
    throw InvariantError("preference pair for '" + p.question_id +
                         "' has identical chosen and rejected texts");
  bool in_domain_kind = p.kind == PairKind::correct_over_reject ||
                        p.kind == PairKind::correct_over_wrong ||
                        p.kind == PairKind::reject_over_wrong;
  if (in_domain_kind != (p.source == PairSource::in_domain))
    throw InvariantError("pair kind '" + to_string(p.kind) +
                         "' does not match source '" + to_string(p.source) +
                         "'");
}

// ---------------------------------------------------------------------------
// JSON (de)serialization. Field order is fixed by construction so identical
// records always produce identical bytes.
// ---------------------------------------------------------------------------

inline const json& need(const json& j, const char* field) {
  auto it = j.find(field);
  if (it == j.end())
    throw Error(std::string("missing field '") + field + "'");
  return *it;
}

inline std::string need_string(const json& j, const char* field) {
  const json& v = need(j, field);
  if (!v.is_string())
    throw Error(std::string("field '") + field + "' must be a string");
  return v.get<std::string>();
}

inline double need_number(const json& j, const char* field) {
  const json& v = need(j, field);
  if (!v.is_number())
    throw Error(std::string("field '") + field + "' must be a number");
  return v.get<double>();
}

inline long long need_integer(const json& j, const char* field) {
  const json& v = need(j, field);
  if (!v.is_number_integer())
    throw Error(std::string("field '") + field + "' must be an integer");
  return v.get<long long>();
}

inline json to_json(const SubtaskKey& key) {
  return json{{"operation", to_string(key.operation)},
              {"digit_bucket", to_string(key.digit_bucket)}};
}

inline SubtaskKey subtask_from_json(const json& j) {
  return SubtaskKey{parse_enum<ArithOp>(need_string(j, "operation")),
                    parse_enum<DigitBucket>(need_string(j, "digit_bucket"))};
}

inline json to_json(const Question& q) {
  json j{{"id", q.id},
         {"domain", to_string(q.domain)},
         {"prompt", q.prompt},
         {"subtask", to_json(q.subtask)}};
  if (q.gold) j["gold"] = *q.gold;
  if (q.template_id) j["template_id"] = *q.template_id;
  return j;
}

inline Question question_from_json(const json& j) {
  Question q;
  q.id = need_string(j, "id");
  q.domain = parse_enum<Domain>(need_string(j, "domain"));
  q.prompt = need_string(j, "prompt");
  q.subtask = subtask_from_json(need(j, "subtask"));
  if (j.contains("gold")) q.gold = need_string(j, "gold");
  if (j.contains("template_id"))
    q.template_id = static_cast<int>(need_integer(j, "template_id"));
  return q;
}

inline json to_json(const ResponseSample& s) {
  json j{{"question_id", s.question_id},
         {"sample_index", s.sample_index},
         {"text", s.text},
         {"extraction", to_string(s.extraction.kind)}};
  if (s.extraction.kind == ExtractionKind::answer)
    j["value"] = s.extraction.value;
  if (s.correct) j["correct"] = *s.correct;
  return j;
}

inline ResponseSample sample_from_json(const json& j) {
  ResponseSample s;
  s.question_id = need_string(j, "question_id");
  s.sample_index = static_cast<int>(need_integer(j, "sample_index"));
  s.text = need_string(j, "text");
  s.extraction.kind = parse_enum<ExtractionKind>(need_string(j, "extraction"));
  if (s.extraction.kind == ExtractionKind::answer)
    s.extraction.value = need_string(j, "value");
  if (j.contains("correct")) {
    const json& c = j["correct"];
    if (!c.is_boolean()) throw Error("field 'correct' must be a boolean");
    s.correct = c.get<bool>();
  }
  return s;
}

inline json to_json(const SampleSet& set) {
  json samples = json::array();
  for (const auto& s : set.samples) samples.push_back(to_json(s));
  return json{{"question", to_json(set.question)},
              {"samples", std::move(samples)},
              {"sampling_config",
               json{{"temperature", set.sampling_config.temperature},
                    {"n", set.sampling_config.n},
                    {"prompt_setting",
                     to_string(set.sampling_config.prompt_setting)}}}};
}

inline SampleSet sample_set_from_json(const json& j) {
  SampleSet set;
  set.question = question_from_json(need(j, "question"));
  const json& samples = need(j, "samples");
  if (!samples.is_array()) throw Error("field 'samples' must be an array");
  for (const auto& s : samples) set.samples.push_back(sample_from_json(s));
  const json& cfg = need(j, "sampling_config");
  set.sampling_config.temperature = need_number(cfg, "temperature");
  set.sampling_config.n = static_cast<int>(need_integer(cfg, "n"));
  set.sampling_config.prompt_setting =
      parse_enum<PromptSettingKind>(need_string(cfg, "prompt_setting"));
  return set;
}

inline json to_json(const OutcomeCounts& c) {
  return json{{"n", c.n}, {"n_c", c.n_c}, {"n_r", c.n_r}, {"n_w", c.n_w}};
}

inline OutcomeCounts counts_from_json(const json& j) {
  return OutcomeCounts{need_integer(j, "n"), need_integer(j, "n_c"),
                       need_integer(j, "n_r"), need_integer(j, "n_w")};
}

inline json to_json(const PreferencePair& p) {
  return json{{"question_id", p.question_id},
              {"prompt", p.prompt},
              {"chosen", p.chosen},
              {"rejected", p.rejected},
              {"kind", to_string(p.kind)},
              {"source", to_string(p.source)},
              {"rng_seed", p.rng_seed}};
}

inline PreferencePair pair_from_json(const json& j) {
  PreferencePair p;
  p.question_id = need_string(j, "question_id");
  p.prompt = need_string(j, "prompt");
  p.chosen = need_string(j, "chosen");
  p.rejected = need_string(j, "rejected");
  p.kind = parse_enum<PairKind>(need_string(j, "kind"));
  p.source = parse_enum<PairSource>(need_string(j, "source"));
  const json& seed = need(j, "rng_seed");
  if (!seed.is_number_integer() && !seed.is_number_unsigned())
    throw Error("field 'rng_seed' must be an integer");
  p.rng_seed = seed.get<std::uint64_t>();
  return p;
}

template <typename T>
struct RecordTraits;

template <>
struct RecordTraits<Question> {
  static constexpr const char* name = "question";
  static json serialize(const Question& q) { return to_json(q); }
  static Question deserialize(const json& j) { return question_from_json(j); }
  static void check(const Question& q) { validate(q); }
};

template <>
struct RecordTraits<ResponseSample> {
  static constexpr const char* name = "response_sample";
  static json serialize(const ResponseSample& s) { return to_json(s); }
  static ResponseSample deserialize(const json& j) { return sample_from_json(j); }
  static void check(const ResponseSample& s) { validate(s); }
};

template <>
struct RecordTraits<SampleSet> {
  static constexpr const char* name = "sample_set";
  static json serialize(const SampleSet& s) { return to_json(s); }
  static SampleSet deserialize(const json& j) { return sample_set_from_json(j); }
  static void check(const SampleSet& s) { validate(s); }
};

template <>
struct RecordTraits<OutcomeCounts> {
  static constexpr const char* name = "outcome_counts";
  static json serialize(const OutcomeCounts& c) { return to_json(c); }
  static OutcomeCounts deserialize(const json& j) { return counts_from_json(j); }
  static void check(const OutcomeCounts& c) { validate(c); }
};

template <>
struct RecordTraits<PreferencePair> {
  static constexpr const char* name = "preference_pair";
  static json serialize(const PreferencePair& p) { return to_json(p); }
  static PreferencePair deserialize(const json& j) { return pair_from_json(j); }
  static void check(const PreferencePair& p) { validate(p); }
};

// Dataset-level invariants, keyed on record type. Question files require
// unique ids; other record types have no file-level constraints.
template <typename T>
inline void check_file(const std::vector<T>&, const std::string&) {}

template <>
inline void check_file<Question>(const std::vector<Question>& records,
                                 const std::string& path) {
  std::set<std::string_view> seen;
  for (std::size_t i = 0; i < records.size(); ++i) {
    if (!seen.insert(records[i].id).second)
      throw ParseError(path, i + 1,
                       "duplicate question id '" + records[i].id + "'");
  }
}

template <typename T>
void write_records(const std::filesystem::path& path,
                   const std::vector<T>& records) {
  check_file(records, path.string());
  for (const auto& r : records) RecordTraits<T>::check(r);
  if (path.has_parent_path())
    std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out)
    throw Error("cannot open '" + path.string() + "' for writing");
  for (const auto& r : records) {
    out << RecordTraits<T>::serialize(r).dump() << '\n';
  }
  if (!out)
    throw Error("write failed for '" + path.string() + "'");
}

template <typename T>
std::vector<T> read_records(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in)
    throw Error("cannot open '" + path.string() + "' for reading");
  std::vector<T> records;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    try {
      json j = json::parse(line);
      T record = RecordTraits<T>::deserialize(j);
      RecordTraits<T>::check(record);
      records.push_back(std::move(record));
    } catch (const json::exception& e) {
      throw ParseError(path.string(), line_no,
                       std::string("malformed ") + RecordTraits<T>::name +
                           " record: " + e.what());
    } catch (const ParseError&) {
      throw;
    } catch (const std::exception& e) {
      throw ParseError(path.string(), line_no, e.what());
    }
  }
  check_file(records, path.string());
  return records;
}

}  // namespace rlkf
