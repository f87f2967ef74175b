#pragma once

#include <algorithm>
#include <cctype>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "rlkf/error.hpp"
#include "rlkf/records.hpp"

namespace rlkf {

enum class Extractor { rules, llm };

inline std::string to_string(Extractor e) {
  return e == Extractor::rules ? "rules" : "llm";
}

struct ExtractionResult {
  Extraction extraction;
  Extractor extractor = Extractor::rules;
};

inline std::string lowercase(std::string_view s) {
  std::string out(s);
  std::transform(out.begin(), out.end(), out.begin(),
                 [](unsigned char c) { return std::tolower(c); });
  return out;
}

// Phrase stems that mark a response as declining to answer. Matching is
// case-insensitive substring search; the list is deliberately editable data,
// not code (see RejectionLexicon::from_file).
inline const std::vector<std::string>& default_rejection_stems() {
  static const std::vector<std::string> stems = {
      "a calculator",
      "limited computational",
      "computational capacity",
      "computational capabilities",
      "computational abilities",
      "computational prowess",
      "cannot guarantee accuracy",
      "i don't know",
      "i do not know",
      "unable to answer",
      "cannot answer",
      "can't answer",
      "beyond my knowledge",
      "refuse",
  };
  return stems;
}

class RejectionLexicon {
 public:
  static RejectionLexicon defaults() {
    return RejectionLexicon(default_rejection_stems());
  }

  // One stem per line; blank lines and lines starting with '#' are skipped.
  static RejectionLexicon from_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open lexicon file '" + path.string() + "'");
    std::vector<std::string> stems;
    std::string line;
    while (std::getline(in, line)) {
      while (!line.empty() && (line.back() == '\r' || line.back() == ' '))
        line.pop_back();
      if (line.empty() || line[0] == '#') continue;
      stems.push_back(lowercase(line));
    }
    if (stems.empty())
      throw Error("lexicon file '" + path.string() + "' contains no stems");
    return RejectionLexicon(std::move(stems));
  }

  bool matches(std::string_view text) const {
    std::string lower = lowercase(text);
    for (const auto& stem : stems_) {
      if (lower.find(stem) != std::string::npos) return true;
    }
    return false;
  }

  const std::vector<std::string>& stems() const { return stems_; }

 private:
  explicit RejectionLexicon(std::vector<std::string> stems)
      : stems_(std::move(stems)) {
    for (auto& s : stems_) s = lowercase(s);
  }

  std::vector<std::string> stems_;
};

inline bool is_digit(char c) { return c >= '0' && c <= '9'; }

// Finds the last well-formed integer span in the text: optional sign,
// optional canonical comma grouping ("26,478,825"). A '-' counts as a sign
// only when not preceded by a digit, so "7519-79935" yields 79935 rather
// than -79935.
inline std::optional<std::string> find_last_integer(std::string_view text) {
  std::optional<std::string> last;
  std::size_t i = 0;
  const std::size_t n = text.size();
  while (i < n) {
    if (!is_digit(text[i])) {
      ++i;
      continue;
    }
    std::size_t start = i;
    bool negative = false;
    if (start > 0 && (text[start - 1] == '-' || text[start - 1] == '+')) {
      bool prev_digit = start >= 2 && is_digit(text[start - 2]);
      if (!prev_digit) {
        negative = text[start - 1] == '-';
        // sign is part of the span but normalization re-adds it from
        // `negative`, so only digits are collected below
      }
    }
    std::size_t end = start;
    while (end < n && is_digit(text[end])) ++end;
    std::string digits(text.substr(start, end - start));
    // Canonical grouping: first group of 1-3 digits, then ",ddd" repeats
    // terminated by a non-digit.
    if (digits.size() <= 3) {
      while (end + 3 < n && text[end] == ',' && is_digit(text[end + 1]) &&
             is_digit(text[end + 2]) && is_digit(text[end + 3]) &&
             (end + 4 >= n || !is_digit(text[end + 4]))) {
        digits.append(text.substr(end + 1, 3));
        end += 4;
      }
    }
    last = (negative ? "-" : "") + digits;
    i = end;
  }
  return last;
}

// Canonical integer string: no separators, no leading zeros, no "-0".
inline std::string normalize_answer(std::string_view raw) {
  std::string s;
  s.reserve(raw.size());
  for (char c : raw) {
    if (c == ',' || c == ' ' || c == '\t') continue;
    s.push_back(c);
  }
  bool negative = false;
  std::size_t pos = 0;
  if (pos < s.size() && (s[pos] == '-' || s[pos] == '+')) {
    negative = s[pos] == '-';
    ++pos;
  }
  std::size_t first_digit = pos;
  while (first_digit + 1 < s.size() && s[first_digit] == '0') ++first_digit;
  std::string digits = s.substr(first_digit);
  if (digits.empty() ||
      !std::all_of(digits.begin(), digits.end(),
                   [](char c) { return is_digit(c); }))
    throw Error("cannot normalize answer '" + std::string(raw) + "'");
  if (digits == "0") negative = false;
  return (negative ? "-" : "") + digits;
}

// A response counts as a rejection when it matches the lexicon and presents
// no extractable number. Hedged responses that name a value alongside the
// caveat ("probably 34, but use a calculator") classify as answers: the
// number was presented.
inline bool detect_rejection(
    std::string_view text,
    const RejectionLexicon& lexicon = RejectionLexicon::defaults()) {
  if (!lexicon.matches(text)) return false;
  return !find_last_integer(text).has_value();
}

// Rule extractor for arithmetic responses: rejection check first, then the
// last well-formed integer wins (models often restate operands or show
// intermediate steps before the final value).
inline ExtractionResult extract_arith_answer(
    std::string_view text,
    const RejectionLexicon& lexicon = RejectionLexicon::defaults()) {
  ExtractionResult result;
  result.extractor = Extractor::rules;
  if (detect_rejection(text, lexicon)) {
    result.extraction.kind = ExtractionKind::reject;
    return result;
  }
  auto span = find_last_integer(text);
  if (!span) {
    result.extraction.kind = ExtractionKind::unparseable;
    return result;
  }
  result.extraction.kind = ExtractionKind::answer;
  result.extraction.value = normalize_answer(*span);
  return result;
}

// For qa responses the answer "value" is the whole response in a canonical
// form, which keeps self-consistency voting meaningful for free-text answers.
inline std::string normalize_qa_text(std::string_view text) {
  std::string out;
  bool pending_space = false;
  for (char c : lowercase(text)) {
    if (std::isspace(static_cast<unsigned char>(c))) {
      pending_space = !out.empty();
      continue;
    }
    if (pending_space) {
      out.push_back(' ');
      pending_space = false;
    }
    out.push_back(c);
  }
  while (!out.empty() &&
         (out.back() == '.' || out.back() == '!' || out.back() == '?'))
    out.pop_back();
  return out;
}

inline ExtractionResult extract_answer(
    Domain domain, std::string_view text,
    const RejectionLexicon& lexicon = RejectionLexicon::defaults()) {
  if (domain == Domain::arithmetic) return extract_arith_answer(text, lexicon);
  ExtractionResult result;
  result.extractor = Extractor::rules;
  if (detect_rejection(text, lexicon)) {
    result.extraction.kind = ExtractionKind::reject;
    return result;
  }
  std::string value = normalize_qa_text(text);
  if (value.empty()) {
    result.extraction.kind = ExtractionKind::unparseable;
    return result;
  }
  result.extraction.kind = ExtractionKind::answer;
  result.extraction.value = std::move(value);
  return result;
}

// qa gold fields may carry several acceptable aliases separated by "||".
inline std::vector<std::string> gold_aliases(const std::string& gold) {
  std::vector<std::string> aliases;
  std::size_t pos = 0;
  while (pos <= gold.size()) {
    std::size_t next = gold.find("||", pos);
    std::string piece = next == std::string::npos
                            ? gold.substr(pos)
                            : gold.substr(pos, next - pos);
    std::size_t b = piece.find_first_not_of(" \t");
    std::size_t e = piece.find_last_not_of(" \t");
    if (b != std::string::npos) aliases.push_back(piece.substr(b, e - b + 1));
    if (next == std::string::npos) break;
    pos = next + 2;
  }
  return aliases;
}

// Correctness judgment. Arithmetic compares canonical integer strings; qa
// uses exact match, i.e. some gold alias appears verbatim (case-insensitive)
// in the response text. Returns nothing for rejections and unparseable
// responses: those are not answers to grade.
inline std::optional<bool> judge(const Question& question,
                                 const Extraction& extraction,
                                 std::string_view response_text) {
  if (extraction.kind != ExtractionKind::answer) return std::nullopt;
  if (!question.gold.has_value())
    throw Error("question '" + question.id + "' has no gold answer to judge against");
  if (question.domain == Domain::arithmetic) {
    return normalize_answer(extraction.value) == normalize_answer(*question.gold);
  }
  std::string lower = lowercase(response_text);
  for (const auto& alias : gold_aliases(*question.gold)) {
    if (!alias.empty() && lower.find(lowercase(alias)) != std::string::npos)
      return true;
  }
  return false;
}

// Applies the extractor and judge to one raw response text.
inline ResponseSample label_sample(
    const Question& question, int sample_index, std::string text,
    const RejectionLexicon& lexicon = RejectionLexicon::defaults()) {
  ResponseSample s;
  s.question_id = question.id;
  s.sample_index = sample_index;
  s.text = std::move(text);
  s.extraction = extract_answer(question.domain, s.text, lexicon).extraction;
  if (question.gold.has_value())
    s.correct = judge(question, s.extraction, s.text);
  return s;
}

}  // namespace rlkf
