#pragma once

#include <atomic>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "rlkf/records.hpp"

namespace rlkf::testing {

inline std::filesystem::path make_temp_dir() {
  static std::atomic<int> counter{0};
  auto dir = std::filesystem::temp_directory_path() /
             ("rlkf-test-" + std::to_string(counter++) + "-" +
              std::to_string(std::hash<std::string>{}(
                  std::filesystem::current_path().string()) %
                             100000));
  std::filesystem::create_directories(dir);
  return dir;
}

// Unique scratch directory, removed when the fixture goes out of scope.
struct TempDir {
  std::filesystem::path path = make_temp_dir();
  TempDir() = default;
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path, ec);
  }
};

inline std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void spit(const std::filesystem::path& p, const std::string& content) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out << content;
}

inline Question arith_question(std::string id, ArithOp op, DigitBucket bucket,
                               std::string prompt, std::string gold) {
  Question q;
  q.id = std::move(id);
  q.domain = Domain::arithmetic;
  q.prompt = std::move(prompt);
  q.subtask = SubtaskKey{op, bucket};
  q.gold = std::move(gold);
  return q;
}

inline ResponseSample answer_sample(const std::string& qid, int index,
                                    const std::string& value, bool correct) {
  ResponseSample s;
  s.question_id = qid;
  s.sample_index = index;
  s.text = "The answer is " + value;
  s.extraction = Extraction{ExtractionKind::answer, value};
  s.correct = correct;
  return s;
}

inline ResponseSample reject_sample(const std::string& qid, int index) {
  ResponseSample s;
  s.question_id = qid;
  s.sample_index = index;
  s.text =
      "I appreciate your question, but due to my limited computational "
      "capacity, I'm unable to handle complex arithmetic problems accurately. "
      "It's advisable to utilize a calculator for precision.";
  s.extraction = Extraction{ExtractionKind::reject, ""};
  return s;
}

inline ResponseSample unparseable_sample(const std::string& qid, int index) {
  ResponseSample s;
  s.question_id = qid;
  s.sample_index = index;
  s.text = "hmm, let me think about that one";
  s.extraction = Extraction{ExtractionKind::unparseable, ""};
  return s;
}

// A labeled set built from a composition: n_c correct answers (the gold),
// n_r rejections, n_w wrong answers, indexed in that order.
inline SampleSet composed_set(const Question& q, int n_c, int n_r, int n_w) {
  SampleSet set;
  set.question = q;
  int index = 0;
  for (int i = 0; i < n_c; ++i)
    set.samples.push_back(answer_sample(q.id, index++, *q.gold, true));
  for (int i = 0; i < n_r; ++i)
    set.samples.push_back(reject_sample(q.id, index++));
  for (int i = 0; i < n_w; ++i)
    set.samples.push_back(answer_sample(
        q.id, index++, std::to_string(1000 + i), false));
  set.sampling_config.n = n_c + n_r + n_w;
  return set;
}

}  // namespace rlkf::testing
