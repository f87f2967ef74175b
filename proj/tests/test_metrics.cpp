#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "helpers.hpp"
#include "rlkf/metrics.hpp"
#include "rlkf/rng.hpp"

using namespace rlkf;
using Catch::Matchers::ContainsSubstring;
using rlkf::testing::arith_question;
using rlkf::testing::composed_set;

namespace {

std::vector<LabeledOutcome> outcomes_for(const SubtaskKey& key, int n_c,
                                         int n_r, int n_w) {
  std::vector<LabeledOutcome> out;
  for (int i = 0; i < n_c; ++i) out.push_back({key, Outcome::correct});
  for (int i = 0; i < n_r; ++i) out.push_back({key, Outcome::reject});
  for (int i = 0; i < n_w; ++i) out.push_back({key, Outcome::wrong});
  return out;
}

}  // namespace

TEST_CASE("the arithmetic comparison row reproduces from its counts") {
  ReliabilityReport r = report_from_counts(OutcomeCounts{1000, 319, 562, 119},
                                           default_alpha_grid());
  REQUIRE(r.prec.has_value());
  CHECK(*r.prec * 100.0 == Catch::Approx(72.8).margin(0.1));
  CHECK(r.acc * 100.0 == Catch::Approx(31.9).margin(0.1));
  CHECK(r.truth * 100.0 == Catch::Approx(88.1).margin(0.1));
  CHECK(r.rely_dynamic * 100.0 == Catch::Approx(56.5).margin(0.1));
  CHECK(r.ans == Catch::Approx(0.438).margin(0.0005));
}

TEST_CASE("the qa comparison row reproduces from its counts") {
  ReliabilityReport r = report_from_counts(OutcomeCounts{1000, 501, 318, 181},
                                           default_alpha_grid());
  REQUIRE(r.prec.has_value());
  CHECK(*r.prec * 100.0 == Catch::Approx(73.5).margin(0.1));
  CHECK(r.truth * 100.0 == Catch::Approx(81.9).margin(0.1));
  CHECK(r.rely_dynamic * 100.0 == Catch::Approx(71.8).margin(0.1));
}

TEST_CASE("an all-correct run is perfect under every alpha") {
  ReliabilityReport r =
      report_from_counts(OutcomeCounts{25, 25, 0, 0}, default_alpha_grid());
  CHECK(*r.prec == 1.0);
  CHECK(r.acc == 1.0);
  CHECK(r.truth == 1.0);
  CHECK(r.rely_dynamic == 1.0);
  for (const auto& g : r.rely_grid) CHECK(g.rely == 1.0);
}

TEST_CASE("metric identities hold on random count tuples") {
  Rng rng(271828);
  const std::vector<double> grid = default_alpha_grid();
  for (int i = 0; i < 10000; ++i) {
    OutcomeCounts c;
    c.n_c = static_cast<long long>(rng.below(40));
    c.n_r = static_cast<long long>(rng.below(40));
    c.n_w = static_cast<long long>(rng.below(40));
    c.n = c.n_c + c.n_r + c.n_w;
    if (c.n == 0) c.n = c.n_c = 1;
    ReliabilityReport r = report_from_counts(c, grid);

    CHECK(std::abs(r.truth - (1.0 - static_cast<double>(c.n_w) /
                                        static_cast<double>(c.n))) < 1e-12);
    if (r.ans > 0.0) {
      REQUIRE(r.prec.has_value());
      CHECK(std::abs(*r.prec * r.ans - r.acc) < 1e-12);
    } else {
      CHECK_FALSE(r.prec.has_value());
    }
    REQUIRE(r.rely_grid.size() == grid.size());
    CHECK(r.rely_grid.front().rely == r.acc);   // alpha = 0, exactly
    CHECK(r.rely_grid.back().rely == r.truth);  // alpha = 1, exactly
    for (std::size_t g = 0; g < r.rely_grid.size(); ++g) {
      double rely = r.rely_grid[g].rely;
      CHECK(rely >= r.acc - 1e-12);
      CHECK(rely <= r.truth + 1e-12);
      if (g > 0) CHECK(rely >= r.rely_grid[g - 1].rely - 1e-12);
    }
    CHECK(std::abs(r.rely_dynamic - rely_at(r.ans, r.truth, r.acc)) < 1e-12);
  }
}

TEST_CASE("precision is unset, not zero, when nothing was answered") {
  ReliabilityReport r =
      report_from_counts(OutcomeCounts{10, 0, 10, 0}, default_alpha_grid());
  CHECK_FALSE(r.prec.has_value());
  CHECK(r.ans == 0.0);
  CHECK(r.truth == 1.0);
  CHECK(r.acc == 0.0);
  // dynamic rely collapses to acc when the model never answers
  CHECK(r.rely_dynamic == 0.0);
}

TEST_CASE("honesty precision equals prec and fails on zero answers") {
  CHECK(honesty_precision(OutcomeCounts{1000, 319, 562, 119}) ==
        Catch::Approx(0.7283).margin(0.0001));
  CHECK(honesty_precision(OutcomeCounts{10, 0, 0, 10}) == 0.0);
  CHECK(honesty_precision(OutcomeCounts{5, 5, 0, 0}) == 1.0);
  CHECK_THROWS_WITH(honesty_precision(OutcomeCounts{10, 0, 10, 0}),
                    ContainsSubstring("nothing was answered"));
}

TEST_CASE("scoring validates its inputs") {
  CHECK_THROWS_WITH(score({}), ContainsSubstring("empty"));
  CHECK_THROWS_WITH(
      report_from_counts(OutcomeCounts{4, 1, 1, 1}, default_alpha_grid()),
      ContainsSubstring("n = n_c + n_r + n_w"));
  CHECK_THROWS_WITH(report_from_counts(OutcomeCounts{2, 1, 1, 0}, {1.5}),
                    ContainsSubstring("[0,1]"));
}

TEST_CASE("per-subtask reports sum to the overall counts") {
  SubtaskKey add12{ArithOp::add, DigitBucket::d1_2};
  SubtaskKey mul35{ArithOp::mul, DigitBucket::d3_5};
  SubtaskKey div12{ArithOp::div, DigitBucket::d1_2};
  std::vector<LabeledOutcome> outcomes = outcomes_for(add12, 8, 1, 1);
  for (const auto& o : outcomes_for(mul35, 1, 6, 3)) outcomes.push_back(o);
  for (const auto& o : outcomes_for(div12, 3, 3, 4)) outcomes.push_back(o);

  ReliabilityReport r = score(outcomes);
  REQUIRE(r.per_subtask.size() == 3);
  long long n = 0, n_c = 0, n_r = 0, n_w = 0;
  for (const auto& [key, sub] : r.per_subtask) {
    n += sub.counts.n;
    n_c += sub.counts.n_c;
    n_r += sub.counts.n_r;
    n_w += sub.counts.n_w;
    CHECK(sub.per_subtask.empty());  // one level of nesting only
  }
  CHECK(n == r.counts.n);
  CHECK(n_c == r.counts.n_c);
  CHECK(n_r == r.counts.n_r);
  CHECK(n_w == r.counts.n_w);
  CHECK(r.per_subtask.at(add12).acc == 0.8);
  CHECK(r.per_subtask.at(mul35).truth == 0.7);
}

TEST_CASE("rejection breakdown reports per-cell rates and skips empty cells") {
  SubtaskKey add12{ArithOp::add, DigitBucket::d1_2};
  SubtaskKey mul35{ArithOp::mul, DigitBucket::d3_5};
  std::vector<LabeledOutcome> outcomes = outcomes_for(mul35, 0, 10, 0);
  for (const auto& o : outcomes_for(add12, 5, 0, 0)) outcomes.push_back(o);

  auto rates = rejection_breakdown(outcomes);
  REQUIRE(rates.size() == 2);
  CHECK(rates.at(mul35) == 1.0);
  CHECK(rates.at(add12) == 0.0);
  CHECK(rates.count(SubtaskKey{ArithOp::sub, DigitBucket::d1_2}) == 0);
}

TEST_CASE("labeled outcomes map unparseable to wrong and require labels") {
  Question q = arith_question("add12-0-0", ArithOp::add, DigitBucket::d1_2,
                              "Determine 12 + 34", "46");
  SampleSet set = composed_set(q, 1, 1, 0);
  set.samples.push_back(rlkf::testing::unparseable_sample(q.id, 2));
  set.sampling_config.n = 3;

  std::vector<SampleSet> sets = {set};
  auto outcomes = labeled_outcomes(sets);
  REQUIRE(outcomes.size() == 3);
  CHECK(outcomes[0].outcome == Outcome::correct);
  CHECK(outcomes[1].outcome == Outcome::reject);
  CHECK(outcomes[2].outcome == Outcome::wrong);

  SampleSet unlabeled = composed_set(q, 1, 0, 0);
  unlabeled.samples[0].correct.reset();
  std::vector<SampleSet> bad = {unlabeled};
  CHECK_THROWS_WITH(labeled_outcomes(bad),
                    ContainsSubstring("no correctness label"));
}

TEST_CASE("reliability reports round-trip through json") {
  SubtaskKey add12{ArithOp::add, DigitBucket::d1_2};
  std::vector<LabeledOutcome> outcomes = outcomes_for(add12, 3, 2, 1);
  ReliabilityReport r = score(outcomes);
  ReliabilityReport back = report_from_json(to_json(r));
  CHECK(back.counts.n == r.counts.n);
  CHECK(back.prec == r.prec);
  CHECK(back.acc == r.acc);
  CHECK(back.truth == r.truth);
  CHECK(back.ans == r.ans);
  CHECK(back.rely_dynamic == r.rely_dynamic);
  REQUIRE(back.rely_grid.size() == r.rely_grid.size());
  REQUIRE(back.per_subtask.count(add12) == 1);
  CHECK(back.per_subtask.at(add12).acc == r.per_subtask.at(add12).acc);

  // unset precision stays unset through a round-trip
  ReliabilityReport silent =
      report_from_counts(OutcomeCounts{5, 0, 5, 0}, default_alpha_grid());
  CHECK_FALSE(report_from_json(to_json(silent)).prec.has_value());
}

TEST_CASE("eval records enforce a method name") {
  EvalRecord record{"policy", report_from_counts(OutcomeCounts{2, 1, 1, 0},
                                                 default_alpha_grid())};
  json j = RecordTraits<EvalRecord>::serialize(record);
  EvalRecord back = RecordTraits<EvalRecord>::deserialize(j);
  CHECK(back.method == "policy");
  CHECK(back.report.counts.n == 2);
  record.method.clear();
  CHECK_THROWS_WITH(RecordTraits<EvalRecord>::check(record),
                    ContainsSubstring("method"));
}
