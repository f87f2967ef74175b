#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "helpers.hpp"
#include "rlkf/arithgen.hpp"
#include "rlkf/feedback.hpp"
#include "rlkf/rng.hpp"

using namespace rlkf;
using Catch::Matchers::ContainsSubstring;
using rlkf::testing::answer_sample;
using rlkf::testing::arith_question;
using rlkf::testing::composed_set;
using rlkf::testing::reject_sample;
using rlkf::testing::unparseable_sample;

namespace {

Question probe_question() {
  return arith_question("mul35-1-0", ArithOp::mul, DigitBucket::d3_5,
                        "Calculate 3075 * 8611.", "26478825");
}

// A set whose answers vote with the given multiplicities; value i repeats
// votes[i] times. Rejections fill the remainder up to n.
SampleSet voting_set(const Question& q, const std::vector<int>& votes, int n,
                     int unparseable = 0) {
  SampleSet set;
  set.question = q;
  int index = 0;
  for (std::size_t v = 0; v < votes.size(); ++v) {
    for (int i = 0; i < votes[v]; ++i) {
      set.samples.push_back(
          answer_sample(q.id, index++, std::to_string(100 + v), false));
    }
  }
  for (int i = 0; i < unparseable; ++i)
    set.samples.push_back(unparseable_sample(q.id, index++));
  while (index < n) set.samples.push_back(reject_sample(q.id, index++));
  set.sampling_config.n = n;
  return set;
}

// Rule oracle for the in-domain case split, written against the composition
// alone so it cannot share a bug with the classifier under test.
std::optional<PairKind> expected_in_domain(int n_c, int n_r, int n_w) {
  int n = n_c + n_r + n_w;
  if (n_c == n) return PairKind::correct_over_reject;
  if (n_w == 0) return std::nullopt;  // no wrong member to disprefer
  if (n_c > 0) return PairKind::correct_over_wrong;
  return PairKind::reject_over_wrong;
}

}  // namespace

TEST_CASE("in-domain verdicts count correct samples") {
  Question q = probe_question();
  KnowledgeVerdict v = verdict_in_domain(composed_set(q, 4, 3, 3));
  CHECK(v.mode == PairSource::in_domain);
  CHECK(v.n == 10);
  CHECK(v.n_c == 4);
  CHECK(v.threshold_t == 5);
}

TEST_CASE("in-domain pair synthesis follows the three-case rule") {
  Question q = probe_question();
  RejectionPool pool = default_rejection_pool();

  SECTION("all correct: correct over a rejection") {
    auto pair = synthesize_in_domain(composed_set(q, 10, 0, 0), pool, 1);
    REQUIRE(pair.has_value());
    CHECK(pair->kind == PairKind::correct_over_reject);
    CHECK(pair->chosen == "The answer is 26478825");
    // no own rejection exists, so the dispreferred side comes from the pool
    CHECK(std::count(pool.sentences.begin(), pool.sentences.end(),
                     pair->rejected) == 1);
  }
  SECTION("a mix: correct over wrong") {
    auto pair = synthesize_in_domain(composed_set(q, 4, 0, 6), pool, 1);
    REQUIRE(pair.has_value());
    CHECK(pair->kind == PairKind::correct_over_wrong);
    CHECK(pair->chosen == "The answer is 26478825");
    CHECK(pair->rejected.rfind("The answer is 1", 0) == 0);
  }
  SECTION("no correct answers: rejection over wrong") {
    auto pair = synthesize_in_domain(composed_set(q, 0, 2, 8), pool, 1);
    REQUIRE(pair.has_value());
    CHECK(pair->kind == PairKind::reject_over_wrong);
    CHECK(detect_rejection(pair->chosen));
  }
  SECTION("all rejections: no pair, nothing to disprefer") {
    CHECK_FALSE(synthesize_in_domain(composed_set(q, 0, 10, 0), pool, 1)
                    .has_value());
  }
  SECTION("all-correct sets reuse the model's own rejection when present") {
    // n_c == n is impossible with a rejection present, so "own rejection"
    // reuse is observable only via the n_c == 0 case
    auto pair = synthesize_in_domain(composed_set(q, 0, 3, 7), pool, 9);
    REQUIRE(pair.has_value());
    CHECK(pair->kind == PairKind::reject_over_wrong);
  }
  SECTION("unlabeled answers abort") {
    SampleSet set = composed_set(q, 2, 0, 2);
    set.samples[0].correct.reset();
    CHECK_THROWS_WITH(synthesize_in_domain(set, pool, 1),
                      ContainsSubstring("unlabeled"));
  }
}

TEST_CASE("in-domain synthesis is exhaustive over compositions up to n = 12") {
  Question q = probe_question();
  RejectionPool pool = default_rejection_pool();
  int emitted = 0;
  int absent = 0;
  for (int n = 1; n <= 12; ++n) {
    for (int n_c = 0; n_c <= n; ++n_c) {
      for (int n_r = 0; n_r + n_c <= n; ++n_r) {
        int n_w = n - n_c - n_r;
        SampleSet set = composed_set(q, n_c, n_r, n_w);
        auto pair = synthesize_in_domain(set, pool, 5);
        auto expected = expected_in_domain(n_c, n_r, n_w);
        INFO("composition (" << n_c << ", " << n_r << ", " << n_w << ")");
        REQUIRE(pair.has_value() == expected.has_value());
        if (pair) {
          CHECK(pair->kind == *expected);
          CHECK(pair->source == PairSource::in_domain);
          CHECK(pair->question_id == q.id);
          CHECK_NOTHROW(validate(*pair));
          ++emitted;
        } else {
          // justified absence: the required member class is empty
          CHECK((n_c < n && n_w == 0));
          ++absent;
        }
      }
    }
  }
  CHECK(emitted + absent == 454);  // sum over n of (n+1)(n+2)/2 compositions
  CHECK(absent == 78);             // (n_c < n, n_w = 0) cells, n per n
}

TEST_CASE("out-of-domain verdicts measure self-consistency") {
  Question q = probe_question();

  auto v = verdict_out_of_domain(voting_set(q, {7, 2, 1}, 10));
  REQUIRE(v.has_value());
  CHECK(v->mode == PairSource::out_of_domain);
  CHECK(v->n_s == 7);
  CHECK(v->threshold_t == 5);
  CHECK(v->top_value == "100");

  auto all_rejected = verdict_out_of_domain(voting_set(q, {}, 10));
  CHECK_FALSE(all_rejected.has_value());
}

TEST_CASE("out-of-domain pair synthesis follows the threshold trichotomy") {
  Question q = probe_question();
  RejectionPool pool = default_rejection_pool();

  SECTION("consistent majority: answer over reject") {
    auto pair =
        synthesize_out_of_domain(voting_set(q, {7, 2, 1}, 10), pool, 3);
    REQUIRE(pair.has_value());
    CHECK(pair->kind == PairKind::answer_over_reject);
    CHECK(pair->source == PairSource::out_of_domain);
    CHECK(pair->chosen == "The answer is 100");
    CHECK(detect_rejection(pair->rejected));
  }
  SECTION("scattered votes: reject over answer") {
    auto pair =
        synthesize_out_of_domain(voting_set(q, {3, 3, 2, 2}, 10), pool, 3);
    REQUIRE(pair.has_value());
    CHECK(pair->kind == PairKind::reject_over_answer);
    CHECK(detect_rejection(pair->chosen));
    // the dispreferred answer carries one of the modal values
    CHECK((pair->rejected == "The answer is 100" ||
           pair->rejected == "The answer is 101"));
  }
  SECTION("a tie at the threshold: no pair") {
    CHECK_FALSE(synthesize_out_of_domain(voting_set(q, {5, 5}, 10), pool, 3)
                    .has_value());
  }
  SECTION("no answers at all: no pair") {
    CHECK_FALSE(synthesize_out_of_domain(voting_set(q, {}, 10), pool, 3)
                    .has_value());
  }
  SECTION("the set's own rejection is preferred over a pool draw") {
    SampleSet set = voting_set(q, {2}, 10);  // 2 answers + 8 rejections
    auto pair = synthesize_out_of_domain(set, pool, 3);
    REQUIRE(pair.has_value());
    CHECK(pair->kind == PairKind::reject_over_answer);
    CHECK(pair->chosen == set.samples.back().text);
  }
}

TEST_CASE("all vote multisets of n = 10 satisfy the trichotomy") {
  Question q = probe_question();
  RejectionPool pool = default_rejection_pool();

  // enumerate all partitions of k answers into descending vote counts, for
  // every k in [0, 10]; the remaining 10 - k samples reject
  std::vector<std::vector<int>> partitions;
  std::vector<int> current;
  auto enumerate = [&](auto&& self, int remaining, int max_part) -> void {
    if (remaining == 0) {
      partitions.push_back(current);
      return;
    }
    for (int p = std::min(remaining, max_part); p >= 1; --p) {
      current.push_back(p);
      self(self, remaining - p, p);
      current.pop_back();
    }
  };
  for (int k = 0; k <= 10; ++k) enumerate(enumerate, k, k > 0 ? k : 1);

  int checked = 0;
  for (const auto& votes : partitions) {
    SampleSet set = voting_set(q, votes, 10);
    long long n_s = votes.empty() ? 0 : votes.front();
    auto pair = synthesize_out_of_domain(set, pool, 11);
    INFO("votes n_s = " << n_s);
    if (votes.empty() || n_s == 5) {
      CHECK_FALSE(pair.has_value());
    } else if (n_s > 5) {
      REQUIRE(pair.has_value());
      CHECK(pair->kind == PairKind::answer_over_reject);
    } else {
      REQUIRE(pair.has_value());
      CHECK(pair->kind == PairKind::reject_over_answer);
    }
    ++checked;
  }
  CHECK(checked == 139);  // sum of partition counts p(0..10)
}

TEST_CASE("vote counting ignores rejections and unparseable samples") {
  Question q = probe_question();

  auto base = verdict_out_of_domain(voting_set(q, {4, 2}, 6));
  auto padded = verdict_out_of_domain(voting_set(q, {4, 2}, 10));
  auto noisy = verdict_out_of_domain(voting_set(q, {4, 2}, 10, 2));
  REQUIRE(base.has_value());
  REQUIRE(padded.has_value());
  REQUIRE(noisy.has_value());
  CHECK(base->n_s == 4);
  CHECK(padded->n_s == 4);
  CHECK(noisy->n_s == 4);
  CHECK(base->top_value == padded->top_value);

  // adding rejections can flip the pair only through n (via t), never n_s:
  // with n = 6 the majority threshold is 3 < 4, with n = 10 it is 5 > 4
  RejectionPool pool = default_rejection_pool();
  auto small = synthesize_out_of_domain(voting_set(q, {4, 2}, 6), pool, 2);
  auto large = synthesize_out_of_domain(voting_set(q, {4, 2}, 10), pool, 2);
  REQUIRE(small.has_value());
  REQUIRE(large.has_value());
  CHECK(small->kind == PairKind::answer_over_reject);
  CHECK(large->kind == PairKind::reject_over_answer);
}

TEST_CASE("pair synthesis is deterministic and permutation-invariant") {
  Question q = probe_question();
  RejectionPool pool = default_rejection_pool();
  SampleSet set = composed_set(q, 4, 3, 3);

  auto a = synthesize_in_domain(set, pool, 77);
  auto b = synthesize_in_domain(set, pool, 77);
  REQUIRE(a.has_value());
  REQUIRE(b.has_value());
  CHECK(a->chosen == b->chosen);
  CHECK(a->rejected == b->rejected);
  CHECK(a->rng_seed == b->rng_seed);

  auto c = synthesize_in_domain(set, pool, 78);
  REQUIRE(c.has_value());
  CHECK(c->kind == a->kind);  // the verdict never depends on the seed

  // shuffling sample order may move representatives but not the verdict
  SampleSet shuffled = set;
  std::reverse(shuffled.samples.begin(), shuffled.samples.end());
  for (int i = 0; i < 10; ++i) shuffled.samples[i].sample_index = i;
  auto d = synthesize_in_domain(shuffled, pool, 77);
  REQUIRE(d.has_value());
  CHECK(d->kind == a->kind);

  Rng seed_rng(5150);
  for (int trial = 0; trial < 50; ++trial) {
    std::uint64_t seed = seed_rng.next_u64();
    auto lhs = synthesize_out_of_domain(voting_set(q, {6, 2}, 10), pool, seed);
    auto rhs = synthesize_out_of_domain(voting_set(q, {6, 2}, 10), pool, seed);
    REQUIRE(lhs.has_value());
    REQUIRE(rhs.has_value());
    CHECK(lhs->chosen == rhs->chosen);
    CHECK(lhs->rejected == rhs->rejected);
  }
}

TEST_CASE("emitted pairs always rank chosen above rejected") {
  // static ranking correct(3) > reject(2) > wrong(1) for in-domain pairs
  auto rank_of = [](PairKind kind, bool chosen) {
    switch (kind) {
      case PairKind::correct_over_reject: return chosen ? 3 : 2;
      case PairKind::correct_over_wrong: return chosen ? 3 : 1;
      case PairKind::reject_over_wrong: return chosen ? 2 : 1;
      default: return 0;
    }
  };
  Question q = probe_question();
  RejectionPool pool = default_rejection_pool();
  Rng rng(8080);
  for (int trial = 0; trial < 200; ++trial) {
    int n_c = static_cast<int>(rng.below(5));
    int n_r = static_cast<int>(rng.below(5));
    int n_w = static_cast<int>(rng.below(5));
    if (n_c + n_r + n_w == 0) n_c = 1;
    auto pair = synthesize_in_domain(composed_set(q, n_c, n_r, n_w), pool,
                                     rng.next_u64());
    if (!pair) continue;
    CHECK(rank_of(pair->kind, true) > rank_of(pair->kind, false));
    CHECK_NOTHROW(validate(*pair));
  }
}

TEST_CASE("the consistency baseline answers only above the threshold") {
  Question q = probe_question();

  Extraction confident = consistency_baseline(voting_set(q, {7, 3}, 10));
  CHECK(confident.kind == ExtractionKind::answer);
  CHECK(confident.value == "100");

  Extraction scattered =
      consistency_baseline(voting_set(q, {2, 2, 2, 2, 2}, 10));
  CHECK(scattered.kind == ExtractionKind::reject);

  Extraction tied = consistency_baseline(voting_set(q, {5, 5}, 10));
  CHECK(tied.kind == ExtractionKind::reject);

  Extraction overridden =
      consistency_baseline(voting_set(q, {4, 2}, 10), /*threshold=*/3);
  CHECK(overridden.kind == ExtractionKind::answer);
  CHECK(overridden.value == "100");
}
