#pragma once

#include <cstdint>
#include <set>
#include <string>
#include <vector>

#include "rlkf/error.hpp"
#include "rlkf/oracle.hpp"
#include "rlkf/records.hpp"
#include "rlkf/rng.hpp"

namespace rlkf {

inline constexpr int kMaxOperandDigits = 5;

struct ArithSpec {
  ArithOp operation = ArithOp::add;
  int min_digits = 1;
  int max_digits = kMaxOperandDigits;
  long long count = 1;
  std::uint64_t seed = 0;
};

inline void validate(const ArithSpec& spec) {
  if (spec.operation == ArithOp::none)
    throw InvariantError("generation spec needs a concrete operation");
  if (spec.min_digits < 1 || spec.max_digits > kMaxOperandDigits ||
      spec.min_digits > spec.max_digits)
    throw InvariantError("digit range must satisfy 1 <= min <= max <= " +
                         std::to_string(kMaxOperandDigits));
  if (spec.count < 1) throw InvariantError("generation count must be >= 1");
}

struct TemplatePool {
  std::vector<std::string> templates;
};

struct RejectionPool {
  std::vector<std::string> sentences;
};

inline void validate(const TemplatePool& pool) {
  if (pool.templates.empty())
    throw InvariantError("template pool must be non-empty");
  for (const auto& t : pool.templates) {
    auto first = t.find("{input}");
    if (first == std::string::npos ||
        t.find("{input}", first + 1) != std::string::npos)
      throw InvariantError("template must contain exactly one {input}: '" + t +
                           "'");
  }
}

inline void validate(const RejectionPool& pool,
                     const RejectionLexicon& lexicon) {
  if (pool.sentences.empty())
    throw InvariantError("rejection pool must be non-empty");
  for (const auto& s : pool.sentences) {
    if (!detect_rejection(s, lexicon))
      throw InvariantError(
          "rejection pool sentence does not register as a rejection: '" + s +
          "'");
  }
}

inline int digit_count(long long v) {
  if (v < 0) v = -v;
  int digits = 1;
  while (v >= 10) {
    v /= 10;
    ++digits;
  }
  return digits;
}

inline DigitBucket bucket_for_digits(int digits) {
  return digits <= 2 ? DigitBucket::d1_2 : DigitBucket::d3_5;
}

// Log-space operand draw: digit count uniform over [min,max], then uniform
// within that decade, so magnitudes are not swamped by the widest decade.
inline long long sample_operand(int min_digits, int max_digits, Rng& rng) {
  if (min_digits < 1 || min_digits > max_digits)
    throw Error("invalid digit range for operand draw");
  int digits =
      min_digits + static_cast<int>(rng.below(
                       static_cast<std::uint64_t>(max_digits - min_digits + 1)));
  long long lo = 1;
  for (int i = 1; i < digits; ++i) lo *= 10;
  long long hi = lo * 10 - 1;
  return lo + static_cast<long long>(
                  rng.below(static_cast<std::uint64_t>(hi - lo + 1)));
}

struct ArithInstance {
  ArithOp operation = ArithOp::add;
  long long lhs = 0;   // operands as displayed in the prompt
  long long rhs = 0;
  long long result = 0;
  int drawn_digits_lhs = 0;  // digit counts of the two range-drawn numbers
  int drawn_digits_rhs = 0;
};

// Division instances are built backwards (draw divisor and quotient, form the
// dividend) so the quotient is always an exact integer; the digit bucket then
// keys off the drawn pair, not the possibly wider dividend.
inline ArithInstance make_instance(ArithOp op, int min_digits, int max_digits,
                                   Rng& rng) {
  ArithInstance inst;
  inst.operation = op;
  long long a = sample_operand(min_digits, max_digits, rng);
  long long b = sample_operand(min_digits, max_digits, rng);
  switch (op) {
    case ArithOp::add:
      inst.lhs = a;
      inst.rhs = b;
      inst.result = a + b;
      break;
    case ArithOp::sub:
      inst.lhs = a;
      inst.rhs = b;
      inst.result = a - b;
      break;
    case ArithOp::mul:
      inst.lhs = a;
      inst.rhs = b;
      inst.result = a * b;
      break;
    case ArithOp::div:
      inst.lhs = a * b;
      inst.rhs = a;
      inst.result = b;
      break;
    case ArithOp::none:
      throw Error("cannot build an instance without an operation");
  }
  inst.drawn_digits_lhs = digit_count(a);
  inst.drawn_digits_rhs = digit_count(b);
  return inst;
}

inline char op_symbol(ArithOp op) {
  switch (op) {
    case ArithOp::add: return '+';
    case ArithOp::sub: return '-';
    case ArithOp::mul: return '*';
    case ArithOp::div: return '/';
    case ArithOp::none: break;
  }
  throw Error("no symbol for this operation");
}

inline std::string expression_text(const ArithInstance& inst) {
  return std::to_string(inst.lhs) + " " + op_symbol(inst.operation) + " " +
         std::to_string(inst.rhs);
}

inline std::string apply_template(const std::string& tmpl,
                                  const std::string& input) {
  auto pos = tmpl.find("{input}");
  if (pos == std::string::npos)
    throw Error("template is missing {input}: '" + tmpl + "'");
  std::string out = tmpl;
  out.replace(pos, 7, input);
  return out;
}

inline Question question_from_instance(const ArithInstance& inst,
                                       const std::string& tmpl,
                                       int template_id, std::string id) {
  Question q;
  q.id = std::move(id);
  q.domain = Domain::arithmetic;
  q.prompt = apply_template(tmpl, expression_text(inst));
  q.subtask = SubtaskKey{
      inst.operation,
      bucket_for_digits(
          std::max(inst.drawn_digits_lhs, inst.drawn_digits_rhs))};
  q.gold = std::to_string(inst.result);
  q.template_id = template_id;
  return q;
}

// Per-index RNG streams keep generation order-independent, so datasets can be
// produced in shards without changing any question.
inline std::vector<Question> generate(const ArithSpec& spec,
                                      const TemplatePool& pool) {
  validate(spec);
  validate(pool);
  std::vector<Question> questions;
  questions.reserve(static_cast<std::size_t>(spec.count));
  for (long long i = 0; i < spec.count; ++i) {
    Rng rng(stream_seed(spec.seed, static_cast<std::uint64_t>(i),
                        fnv1a64(to_string(spec.operation))));
    ArithInstance inst =
        make_instance(spec.operation, spec.min_digits, spec.max_digits, rng);
    int template_id = static_cast<int>(rng.below(pool.templates.size()));
    std::string id = to_string(spec.operation) +
                     std::to_string(spec.min_digits) +
                     std::to_string(spec.max_digits) + "-" +
                     std::to_string(spec.seed) + "-" + std::to_string(i);
    questions.push_back(question_from_instance(
        inst, pool.templates[template_id], template_id, std::move(id)));
  }
  return questions;
}

// Twenty hand-written question frames; the pool is then grown past one
// hundred by recombining instruction verbs with sentence frames (exact
// duplicates dropped, order fixed).
inline TemplatePool default_template_pool() {
  std::vector<std::string> templates = {
      "Compute the result of {input}.",
      "Answer the following question: {input}",
      "Determine {input}",
      "Can you solve for {input}?",
      "Calculate {input}.",
      "Help me determine the value of {input}.",
      "Please calculate {input}",
      "Can you solve and provide the value of {input}?",
      "What does {input} yield?",
      "Assist me in calculating {input}.",
      "Evaluate {input} and let me know the computed value.",
      "Can you compute the value of {input}?",
      "Compute this: {input}.",
      "Determine the numeric value resulting from {input}.",
      "Can you provide a stepwise solution for evaluating {input}?",
      "Solve this math problem: {input}",
      "Compute the mathematical expression {input} and yield the result.",
      "Solve this problem: {input}",
      "What is the value of {input}?",
      "Can you tell me the result of {input}?",
      "Please help me calculate {input}.",
  };
  const std::vector<std::string> verbs = {
      "compute", "calculate", "evaluate", "determine",
      "solve",   "work out",  "figure out",
  };
  const std::vector<std::string> frames = {
      "VERB {input}.",
      "VERB the value of {input}.",
      "VERB the result of {input}.",
      "Please VERB {input}.",
      "Can you VERB {input}?",
      "Could you VERB {input} for me?",
      "Help me VERB {input}.",
      "I need you to VERB {input}.",
      "Kindly VERB {input}.",
      "VERB the expression {input}.",
      "VERB the following: {input}",
      "What do you get when you VERB {input}?",
  };
  std::set<std::string> seen(templates.begin(), templates.end());
  for (const auto& frame : frames) {
    for (const auto& verb : verbs) {
      std::string t = frame;
      auto pos = t.find("VERB");
      std::string v = verb;
      if (pos == 0) v[0] = static_cast<char>(std::toupper(
                        static_cast<unsigned char>(v[0])));
      t.replace(pos, 4, v);
      if (seen.insert(t).second) templates.push_back(std::move(t));
    }
  }
  TemplatePool pool{std::move(templates)};
  validate(pool);
  return pool;
}

// Ten hand-written refusal sentences, grown to fifty by recombining an
// opener, a stated limitation, and calculator advice. Every sentence must
// trip the rejection detector and contain no digits, which keeps the assets
// consistent with the oracle.
inline RejectionPool default_rejection_pool() {
  std::vector<std::string> sentences = {
      "I appreciate your question, but due to my limited computational "
      "capacity, I'm unable to handle complex arithmetic problems accurately. "
      "It's advisable to utilize a calculator for precision.",
      "Thank you for the inquiry. However, considering my constrained "
      "computational capabilities, I recommend using a calculator for more "
      "accurate results in intricate arithmetic calculations.",
      "While I value your question, my computational abilities have "
      "limitations, and I may not provide accurate solutions for complex "
      "arithmetic problems. I suggest relying on a calculator for precise "
      "calculations.",
      "I acknowledge your mathematical query, but due to my restricted "
      "computational prowess, I cannot guarantee accuracy for intricate "
      "arithmetic problems. Please consider using a calculator for precise "
      "results.",
      "Thank you for the arithmetic query. Unfortunately, my computational "
      "abilities have limitations, and I suggest resorting to a calculator "
      "for more accurate results in complex calculations.",
      "Your arithmetic question is appreciated, but it's crucial to note that "
      "my computational prowess has limitations. For accuracy in intricate "
      "calculations, I advise using a calculator.",
      "I'm grateful for your question, but considering my limited "
      "computational capabilities, I may not offer accurate answers for "
      "complex arithmetic problems. Utilizing a calculator is advisable.",
      "I appreciate your mathematical inquiry, but it's crucial to note that "
      "my computational capacity is limited. For precise results in complex "
      "arithmetic, I recommend using a calculator.",
      "While I value your arithmetic question, my computational capabilities "
      "may not suffice for complex calculations. I recommend turning to a "
      "calculator for more accurate results.",
      "Thank you for your arithmetic query. Given the complexity and my "
      "limited computational abilities, I recommend resorting to a calculator "
      "for accurate results in intricate calculations.",
  };
  const std::vector<std::string> openers = {
      "I appreciate your question, but",
      "Thank you for the inquiry. However,",
      "While I value your question,",
      "I acknowledge your mathematical query, but",
      "Thanks for the arithmetic problem. Unfortunately,",
      "I understand your request, but",
      "I'd like to help, but",
      "Your question is a fair one, but",
  };
  const std::vector<std::string> limitations = {
      "my computational capacity is limited",
      "my computational abilities have limitations",
      "my computational prowess is restricted",
      "complex arithmetic exceeds my limited computational capacity",
      "I cannot guarantee accuracy for intricate arithmetic",
  };
  const std::vector<std::string> advice = {
      "I recommend using a calculator for precise results.",
      "it's advisable to utilize a calculator for precision.",
      "please consider using a calculator for accurate results.",
      "relying on a calculator would be more dependable.",
      "I suggest resorting to a calculator for exact values.",
  };
  constexpr std::size_t kPoolSize = 50;
  std::set<std::string> seen(sentences.begin(), sentences.end());
  for (std::size_t i = 0; sentences.size() < kPoolSize; ++i) {
    const auto& opener = openers[i % openers.size()];
    const auto& limit = limitations[i % limitations.size()];
    const auto& tail = advice[(i + i / openers.size()) % advice.size()];
    std::string s = opener + " " + limit + ", so " + tail;
    if (seen.insert(s).second) sentences.push_back(std::move(s));
    if (i > 4 * kPoolSize) throw Error("rejection pool recombination stalled");
  }
  RejectionPool pool{std::move(sentences)};
  validate(pool, RejectionLexicon::defaults());
  return pool;
}

struct DefaultPools {
  TemplatePool templates;
  RejectionPool rejections;
};

inline DefaultPools default_pools() {
  return DefaultPools{default_template_pool(), default_rejection_pool()};
}

// ---------------------------------------------------------------------------
// Pools as record files, so the shipped assets are editable data rather than
// code.
// ---------------------------------------------------------------------------

struct InstructionTemplate {
  std::string text;
};

struct RejectionSentence {
  std::string text;
};

template <>
struct RecordTraits<InstructionTemplate> {
  static constexpr const char* name = "instruction_template";
  static json serialize(const InstructionTemplate& t) {
    return json{{"template", t.text}};
  }
  static InstructionTemplate deserialize(const json& j) {
    return InstructionTemplate{need_string(j, "template")};
  }
  static void check(const InstructionTemplate& t) {
    validate(TemplatePool{{t.text}});
  }
};

template <>
struct RecordTraits<RejectionSentence> {
  static constexpr const char* name = "rejection_sentence";
  static json serialize(const RejectionSentence& s) {
    return json{{"sentence", s.text}};
  }
  static RejectionSentence deserialize(const json& j) {
    return RejectionSentence{need_string(j, "sentence")};
  }
  static void check(const RejectionSentence& s) {
    if (s.text.empty())
      throw InvariantError("rejection sentence must be non-empty");
  }
};

inline TemplatePool template_pool_from_file(const std::filesystem::path& path) {
  TemplatePool pool;
  for (auto& r : read_records<InstructionTemplate>(path))
    pool.templates.push_back(std::move(r.text));
  validate(pool);
  return pool;
}

inline RejectionPool rejection_pool_from_file(
    const std::filesystem::path& path,
    const RejectionLexicon& lexicon = RejectionLexicon::defaults()) {
  RejectionPool pool;
  for (auto& r : read_records<RejectionSentence>(path))
    pool.sentences.push_back(std::move(r.text));
  validate(pool, lexicon);
  return pool;
}

inline void write_template_pool(const std::filesystem::path& path,
                                const TemplatePool& pool) {
  validate(pool);
  std::vector<InstructionTemplate> records;
  records.reserve(pool.templates.size());
  for (const auto& t : pool.templates) records.push_back({t});
  write_records(path, records);
}

inline void write_rejection_pool(const std::filesystem::path& path,
                                 const RejectionPool& pool) {
  std::vector<RejectionSentence> records;
  records.reserve(pool.sentences.size());
  for (const auto& s : pool.sentences) records.push_back({s});
  write_records(path, records);
}

}  // namespace rlkf
