#include <catch2/catch_amalgamated.hpp>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "helpers.hpp"
#include "rlkf/arithgen.hpp"
#include "rlkf/metrics.hpp"
#include "rlkf/oracle.hpp"
#include "rlkf/pipeline.hpp"
#include "rlkf/rlloop.hpp"
#include "rlkf/simpolicy.hpp"

using namespace rlkf;
using namespace rlkf::testing;
using Catch::Matchers::ContainsSubstring;
using Catch::Matchers::StartsWith;

namespace {

struct CliResult {
  int exit_code = -1;
  std::string output;  // stdout and stderr, interleaved
};

const char* cli_binary() { return std::getenv("RLKF_BIN"); }

// Runs the tool as a subprocess; RLKF_BIN points at the built binary when the
// suite runs under ctest. Paths from make_temp_dir never contain quotes.
CliResult run_cli(const std::string& args) {
  static TempDir logs;
  static int counter = 0;
  auto log = logs.path / ("cli-" + std::to_string(counter++) + ".txt");
  std::string cmd = std::string("\"") + cli_binary() + "\" " + args + " > \"" +
                    log.string() + "\" 2>&1";
  int status = std::system(cmd.c_str());
  CliResult r;
  r.output = slurp(log);
  if (WIFEXITED(status)) r.exit_code = WEXITSTATUS(status);
  return r;
}

#define REQUIRE_CLI_BINARY()                                 \
  do {                                                       \
    if (!cli_binary()) SKIP("RLKF_BIN is not set");          \
  } while (0)

}  // namespace

TEST_CASE("cli rejects bad usage before doing any work") {
  REQUIRE_CLI_BINARY();

  CliResult missing = run_cli("");
  CHECK(missing.exit_code == 2);

  CliResult unknown = run_cli("gen --bogus-flag 3");
  CHECK(unknown.exit_code == 2);

  CliResult help = run_cli("--help");
  CHECK(help.exit_code == 0);
  CHECK_THAT(help.output, ContainsSubstring("Usage"));
  CHECK_THAT(help.output, ContainsSubstring("pipeline"));
}

TEST_CASE("cli gen writes deterministic question files") {
  REQUIRE_CLI_BINARY();
  TempDir dir;
  auto a = dir.path / "a.jsonl";
  auto b = dir.path / "b.jsonl";
  auto c = dir.path / "c.jsonl";

  CliResult first =
      run_cli("gen --count 24 --seed 11 --out \"" + a.string() + "\"");
  REQUIRE(first.exit_code == 0);
  CHECK_THAT(first.output, ContainsSubstring("wrote 24 questions"));

  auto questions = read_records<Question>(a);
  REQUIRE(questions.size() == 24);
  std::map<ArithOp, int> per_op;
  for (const auto& q : questions) per_op[q.subtask.operation]++;
  CHECK(per_op[ArithOp::add] == 6);
  CHECK(per_op[ArithOp::sub] == 6);
  CHECK(per_op[ArithOp::mul] == 6);
  CHECK(per_op[ArithOp::div] == 6);

  CHECK(run_cli("gen --count 24 --seed 11 --out \"" + b.string() + "\"")
            .exit_code == 0);
  CHECK(slurp(a) == slurp(b));

  CHECK(run_cli("gen --count 24 --seed 12 --out \"" + c.string() + "\"")
            .exit_code == 0);
  CHECK(slurp(a) != slurp(c));
}

TEST_CASE("cli gen honors operation and digit filters") {
  REQUIRE_CLI_BINARY();
  TempDir dir;
  auto out = dir.path / "mul.jsonl";

  CliResult r = run_cli("gen --op mul --digits 3:5 --count 6 --seed 4 --out \"" +
                        out.string() + "\"");
  REQUIRE(r.exit_code == 0);
  auto questions = read_records<Question>(out);
  REQUIRE(questions.size() == 6);
  for (const auto& q : questions) {
    CHECK(q.subtask.operation == ArithOp::mul);
    CHECK(q.subtask.digit_bucket == DigitBucket::d3_5);
    CHECK_THAT(q.id, StartsWith("mul35-4-"));
  }

  auto small = dir.path / "small.jsonl";
  CHECK(run_cli("gen --op add --digits 2 --count 5 --seed 4 --out \"" +
                small.string() + "\"")
            .exit_code == 0);
  for (const auto& q : read_records<Question>(small))
    CHECK(q.subtask.digit_bucket == DigitBucket::d1_2);

  CliResult bad_digits = run_cli("gen --digits wide --count 5 --out \"" +
                                 (dir.path / "x.jsonl").string() + "\"");
  CHECK(bad_digits.exit_code == 2);
  CHECK_THAT(bad_digits.output,
             ContainsSubstring("cannot parse digit range 'wide'"));

  CliResult bad_op = run_cli("gen --op pow --count 5 --out \"" +
                             (dir.path / "y.jsonl").string() + "\"");
  CHECK(bad_op.exit_code == 1);
  CHECK_THAT(bad_op.output, ContainsSubstring("invalid operation 'pow'"));
}

TEST_CASE("cli assets round-trip the built-in pools") {
  REQUIRE_CLI_BINARY();
  TempDir dir;
  auto assets = dir.path / "assets";

  CliResult r = run_cli("assets --out-dir \"" + assets.string() + "\"");
  REQUIRE(r.exit_code == 0);
  CHECK_THAT(r.output, ContainsSubstring("templates.jsonl"));

  CHECK(template_pool_from_file(assets / "templates.jsonl").templates ==
        default_template_pool().templates);
  CHECK(rejection_pool_from_file(assets / "rejections.jsonl").sentences ==
        default_rejection_pool().sentences);
  CHECK(RejectionLexicon::from_file(assets / "rejection_lexicon.txt").stems() ==
        RejectionLexicon::defaults().stems());
}

TEST_CASE("cli stage commands chain into a full manual run") {
  REQUIRE_CLI_BINARY();
  TempDir dir;
  auto q = dir.path / "q.jsonl";
  auto s = dir.path / "s.jsonl";
  auto l = dir.path / "l.jsonl";
  auto p = dir.path / "p.jsonl";
  auto rm = dir.path / "rm.jsonl";
  auto pol = dir.path / "pol.jsonl";
  auto e = dir.path / "e.jsonl";

  REQUIRE(run_cli("gen --count 24 --seed 9 --out \"" + q.string() + "\"")
              .exit_code == 0);

  CliResult sampled = run_cli("sample --in \"" + q.string() + "\" --out \"" +
                              s.string() + "\" --n 3 --seed 9");
  REQUIRE(sampled.exit_code == 0);
  CHECK_THAT(sampled.output, ContainsSubstring("wrote 24 sample sets"));
  for (const auto& set : read_records<SampleSet>(s)) {
    CHECK(set.samples.size() == 3);
    CHECK(set.sampling_config.n == 3);
  }

  CliResult labeled = run_cli("label --in \"" + s.string() + "\" --out \"" +
                              l.string() + "\"");
  REQUIRE(labeled.exit_code == 0);
  CHECK_THAT(labeled.output, ContainsSubstring("wrote 24 labeled sets"));
  for (const auto& set : read_records<SampleSet>(l)) {
    for (const auto& sample : set.samples) {
      if (sample.extraction.kind == ExtractionKind::answer)
        CHECK(sample.correct.has_value());
    }
  }

  // a lexicon file holding the default stems labels identically
  auto assets = dir.path / "assets";
  REQUIRE(run_cli("assets --out-dir \"" + assets.string() + "\"").exit_code == 0);
  auto l2 = dir.path / "l2.jsonl";
  REQUIRE(run_cli("label --in \"" + s.string() + "\" --out \"" + l2.string() +
                  "\" --lexicon \"" +
                  (assets / "rejection_lexicon.txt").string() + "\"")
              .exit_code == 0);
  CHECK(slurp(l) == slurp(l2));

  CliResult bad_extractor = run_cli("label --in \"" + s.string() +
                                    "\" --out \"" + l2.string() +
                                    "\" --extractor guesswork");
  CHECK(bad_extractor.exit_code == 2);
  CHECK_THAT(bad_extractor.output,
             ContainsSubstring("unknown extractor 'guesswork'"));

  CliResult llm_no_endpoint = run_cli("label --in \"" + s.string() +
                                      "\" --out \"" + l2.string() +
                                      "\" --extractor llm");
  CHECK(llm_no_endpoint.exit_code == 2);
  CHECK_THAT(llm_no_endpoint.output,
             ContainsSubstring("needs source.endpoint"));

  CliResult paired = run_cli("pairs --in \"" + l.string() + "\" --out \"" +
                             p.string() + "\" --mode mixed --seed 9");
  REQUIRE(paired.exit_code == 0);
  CHECK_THAT(paired.output, ContainsSubstring("pairs to"));
  auto pairs = read_records<PreferencePair>(p);
  REQUIRE(!pairs.empty());

  CliResult rm_out = run_cli("train-rm --pairs \"" + p.string() + "\" --out \"" +
                             rm.string() + "\" --epochs 40 --lr 0.5 --seed 3");
  REQUIRE(rm_out.exit_code == 0);
  CHECK_THAT(rm_out.output, ContainsSubstring("trained on " +
                                              std::to_string(pairs.size()) +
                                              " pairs"));
  RewardModel model = read_single_record<RewardModel>(rm);
  CHECK(model.meta.epochs == 40);

  CliResult trained = run_cli("train-policy --prompts \"" + q.string() +
                              "\" --reward rule --iterations 6 --batch-size 4 "
                              "--seed 7 --out \"" +
                              pol.string() + "\"");
  REQUIRE(trained.exit_code == 0);
  CHECK_THAT(trained.output, ContainsSubstring("iteration 5: mean reward"));
  TrainedPolicy policy = read_single_record<TrainedPolicy>(pol);
  CHECK(policy.history.size() == 6);

  // rm-backed training reads the model written above
  auto pol2 = dir.path / "pol2.jsonl";
  REQUIRE(run_cli("train-policy --prompts \"" + q.string() +
                  "\" --reward rm --rm-model \"" + rm.string() +
                  "\" --iterations 6 --batch-size 4 --seed 7 --out \"" +
                  pol2.string() + "\"")
              .exit_code == 0);
  CHECK(read_single_record<TrainedPolicy>(pol2).history.size() == 6);

  // a warm-start policy file is accepted in place of the derived source
  auto warm = dir.path / "warm.json";
  spit(warm, to_json(standard_mixed_policy(11, -1.0)).dump());
  REQUIRE(run_cli("train-policy --policy-in \"" + warm.string() +
                  "\" --prompts \"" + q.string() +
                  "\" --reward rule --iterations 2 --batch-size 4 --out \"" +
                  pol2.string() + "\"")
              .exit_code == 0);

  CliResult scored = run_cli("eval --in \"" + l.string() + "\" --out \"" +
                             e.string() + "\" --method manual");
  REQUIRE(scored.exit_code == 0);
  CHECK_THAT(scored.output, ContainsSubstring("method"));
  CHECK_THAT(scored.output, ContainsSubstring("manual"));
  auto records = read_records<EvalRecord>(e);
  REQUIRE(records.size() == 1);
  CHECK(records[0].method == "manual");
  CHECK(records[0].report.counts.n == 24 * 3);
  CHECK(std::filesystem::exists(dir.path / "e.csv"));

  auto report_dir = dir.path / "report";
  CliResult reported = run_cli("report --eval \"" + e.string() +
                               "\" --out-dir \"" + report_dir.string() + "\"");
  REQUIRE(reported.exit_code == 0);
  for (const char* name :
       {"methods.txt", "methods.csv", "subtasks.txt", "subtasks.csv",
        "rejections.txt", "rejections.csv", "rely_sweep.csv"}) {
    CHECK(std::filesystem::exists(report_dir / name));
  }
}

TEST_CASE("cli pipeline memoizes between invocations") {
  REQUIRE_CLI_BINARY();
  TempDir dir;
  auto cfg_path = dir.path / "cfg.json";
  auto file_run = dir.path / "file-run";
  auto flag_run = dir.path / "flag-run";

  json cfg{{"seed", 5},
           {"out_dir", file_run.string()},
           {"dataset",
            {{"train_questions", 40},
             {"policy_questions", 16},
             {"eval_questions", 12}}},
           {"sampling", {{"n", 3}}},
           {"reward_model", {{"epochs", 40}}},
           {"optimizer",
            {{"reward_source", "rule"},
             {"iterations", 10},
             {"batch_size", 4}}}};
  spit(cfg_path, cfg.dump(2));

  // flags win over the config file: artifacts land in the flag directory
  std::string base = "pipeline --config \"" + cfg_path.string() +
                     "\" --out-dir \"" + flag_run.string() + "\"";
  CliResult first = run_cli(base);
  REQUIRE(first.exit_code == 0);
  CHECK_THAT(first.output, ContainsSubstring("[gen] running"));
  CHECK_THAT(first.output,
             ContainsSubstring("pipeline complete: 8 stage(s) ran, 0 skipped"));
  CHECK(std::filesystem::exists(flag_run / kManifestFile));
  CHECK(!std::filesystem::exists(file_run));

  CliResult second = run_cli(base);
  REQUIRE(second.exit_code == 0);
  CHECK_THAT(second.output, ContainsSubstring("[report] skipped (up to date)"));
  CHECK_THAT(second.output,
             ContainsSubstring("pipeline complete: 0 stage(s) ran, 8 skipped"));

  std::string pairs_before = slurp(flag_run / kPairsFile);
  std::filesystem::remove(flag_run / kPairsFile);
  CliResult healed = run_cli(base);
  REQUIRE(healed.exit_code == 0);
  CHECK_THAT(healed.output, ContainsSubstring("[gen] skipped (up to date)"));
  CHECK_THAT(healed.output, ContainsSubstring("[pairs] running"));
  CHECK_THAT(healed.output,
             ContainsSubstring("pipeline complete: 5 stage(s) ran, 3 skipped"));
  CHECK(slurp(flag_run / kPairsFile) == pairs_before);
}

TEST_CASE("cli distinguishes config errors from runtime failures") {
  REQUIRE_CLI_BINARY();
  TempDir dir;

  auto bad_cfg = dir.path / "bad.json";
  spit(bad_cfg, R"({"sed": 4})");
  CliResult config_error = run_cli("pipeline --config \"" + bad_cfg.string() +
                                   "\" --out-dir \"" +
                                   (dir.path / "run").string() + "\"");
  CHECK(config_error.exit_code == 2);
  CHECK_THAT(config_error.output,
             ContainsSubstring("config error: unknown config key 'config.sed'"));

  CliResult missing_input =
      run_cli("sample --in \"" + (dir.path / "nope.jsonl").string() +
              "\" --out \"" + (dir.path / "s.jsonl").string() + "\"");
  CHECK(missing_input.exit_code == 1);
  CHECK_THAT(missing_input.output, ContainsSubstring("error: cannot open"));
}
