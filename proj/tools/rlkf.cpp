#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include <rlkf/arithgen.hpp>
#include <rlkf/feedback.hpp>
#include <rlkf/metrics.hpp>
#include <rlkf/modelclient.hpp>
#include <rlkf/oracle.hpp>
#include <rlkf/pipeline.hpp>
#include <rlkf/report.hpp>
#include <rlkf/reward.hpp>
#include <rlkf/rlloop.hpp>

namespace {

using namespace rlkf;

// Every pipeline-affecting flag mirrors a config-file field; flags win over
// the file. Stage subcommands add their own file flags on top.
struct ConfigOpts {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out_dir;
  std::optional<std::string> mode;
  std::optional<std::string> source_kind;
  std::optional<std::string> endpoint_url;
  std::optional<std::string> model_id;
  std::optional<std::string> cache_dir;
  std::optional<int> n;
  std::optional<double> temperature;
  std::optional<std::string> prompt_setting;
  std::optional<long long> train_questions;
  std::optional<long long> policy_questions;
  std::optional<long long> eval_questions;
  std::optional<int> min_digits;
  std::optional<int> max_digits;
  std::optional<double> initial_logit;
  std::optional<long long> rm_epochs;
  std::optional<double> rm_lr;
  std::optional<std::uint64_t> rm_seed;
  std::optional<std::string> reward_source;
  std::optional<double> beta;
  std::optional<double> rl_lr;
  std::optional<long long> iterations;
  std::optional<long long> batch_size;
  std::optional<std::uint64_t> rl_seed;
};

void add_config_options(CLI::App* sub, ConfigOpts& o,
                        const std::set<std::string>& skip = {}) {
  auto opt = [&](const std::string& name, auto& target, const char* desc) {
    std::string primary = name.substr(0, name.find(','));
    if (!skip.count(primary)) sub->add_option(name, target, desc);
  };
  opt("--config", o.config_path, "run config JSON file");
  opt("--seed", o.seed, "master seed");
  opt("--out-dir", o.out_dir, "run output directory");
  opt("--mode", o.mode, "pair synthesis mode: id|ood|mixed");
  opt("--source-kind", o.source_kind, "response source: sim|endpoint");
  opt("--endpoint-url", o.endpoint_url, "chat endpoint base URL");
  opt("--model-id", o.model_id, "chat endpoint model id");
  opt("--cache-dir", o.cache_dir, "endpoint sample cache directory");
  opt("--n", o.n, "samples per question");
  opt("--temperature", o.temperature, "sampling temperature");
  opt("--prompt-setting", o.prompt_setting,
      "no_system|prudent_system|in_context");
  opt("--train-questions", o.train_questions, "training split size");
  opt("--policy-questions", o.policy_questions, "policy split size");
  opt("--eval-questions", o.eval_questions, "eval split size");
  opt("--min-digits", o.min_digits, "minimum operand digits");
  opt("--max-digits", o.max_digits, "maximum operand digits");
  opt("--initial-logit", o.initial_logit,
      "initial rejection logit of the default simulated policy");
  opt("--rm-epochs", o.rm_epochs, "reward model training epochs");
  opt("--rm-lr", o.rm_lr, "reward model learning rate");
  opt("--rm-seed", o.rm_seed, "reward model seed");
  opt("--reward-source", o.reward_source, "policy reward: rule|rm");
  opt("--beta", o.beta, "KL penalty weight");
  opt("--rl-lr", o.rl_lr, "policy learning rate");
  opt("--iterations,--iters", o.iterations, "policy optimization iterations");
  opt("--batch-size", o.batch_size, "policy optimization batch size");
  opt("--rl-seed", o.rl_seed, "policy optimization seed");
}

RunConfig build_config(const ConfigOpts& o) {
  json j = json::object();
  if (!o.config_path.empty()) {
    std::ifstream in(o.config_path, std::ios::binary);
    if (!in)
      throw ConfigError("cannot open config file '" + o.config_path + "'");
    try {
      in >> j;
    } catch (const json::exception& e) {
      throw ConfigError("config file '" + o.config_path + "': " + e.what());
    }
  }
  if (o.seed) j["seed"] = *o.seed;
  if (o.out_dir) j["out_dir"] = *o.out_dir;
  if (o.mode) j["mode"] = *o.mode;
  if (o.source_kind) j["source"]["kind"] = *o.source_kind;
  if (o.endpoint_url) j["source"]["endpoint"]["base_url"] = *o.endpoint_url;
  if (o.model_id) j["source"]["endpoint"]["model_id"] = *o.model_id;
  if (o.cache_dir) j["source"]["cache_dir"] = *o.cache_dir;
  if (o.initial_logit) j["source"]["initial_logit"] = *o.initial_logit;
  if (o.n) j["sampling"]["n"] = *o.n;
  if (o.temperature) j["sampling"]["temperature"] = *o.temperature;
  if (o.prompt_setting) j["sampling"]["prompt_setting"] = *o.prompt_setting;
  if (o.train_questions) j["dataset"]["train_questions"] = *o.train_questions;
  if (o.policy_questions)
    j["dataset"]["policy_questions"] = *o.policy_questions;
  if (o.eval_questions) j["dataset"]["eval_questions"] = *o.eval_questions;
  if (o.min_digits) j["dataset"]["min_digits"] = *o.min_digits;
  if (o.max_digits) j["dataset"]["max_digits"] = *o.max_digits;
  if (o.rm_epochs) j["reward_model"]["epochs"] = *o.rm_epochs;
  if (o.rm_lr) j["reward_model"]["lr"] = *o.rm_lr;
  if (o.rm_seed) j["reward_model"]["seed"] = *o.rm_seed;
  if (o.reward_source) j["optimizer"]["reward_source"] = *o.reward_source;
  if (o.beta) j["optimizer"]["beta"] = *o.beta;
  if (o.rl_lr) j["optimizer"]["lr"] = *o.rl_lr;
  if (o.iterations) j["optimizer"]["iterations"] = *o.iterations;
  if (o.batch_size) j["optimizer"]["batch_size"] = *o.batch_size;
  if (o.rl_seed) j["optimizer"]["seed"] = *o.rl_seed;
  return run_config_from_json(j);
}

std::pair<int, int> parse_digits(const std::string& digits) {
  auto sep = digits.find(':');
  if (sep == std::string::npos) sep = digits.find('-');
  try {
    if (sep == std::string::npos) {
      int d = std::stoi(digits);
      return {d, d};
    }
    return {std::stoi(digits.substr(0, sep)), std::stoi(digits.substr(sep + 1))};
  } catch (const std::exception&) {
    throw ConfigError("cannot parse digit range '" + digits +
                      "' (expected N or MIN:MAX)");
  }
}

std::vector<Question> generate_all_ops(long long count, int min_digits,
                                       int max_digits, std::uint64_t seed,
                                       const TemplatePool& pool) {
  const ArithOp ops[] = {ArithOp::add, ArithOp::sub, ArithOp::mul,
                         ArithOp::div};
  std::vector<Question> questions;
  questions.reserve(static_cast<std::size_t>(count));
  for (int k = 0; k < 4; ++k) {
    ArithSpec spec;
    spec.operation = ops[k];
    spec.min_digits = min_digits;
    spec.max_digits = max_digits;
    spec.count = count / 4 + (k < count % 4 ? 1 : 0);
    spec.seed = seed;
    if (spec.count == 0) continue;
    auto batch = generate(spec, pool);
    questions.insert(questions.end(), batch.begin(), batch.end());
  }
  Rng rng(stream_seed(seed, fnv1a64("shuffle")));
  for (std::size_t i = questions.size(); i > 1; --i) {
    std::swap(questions[i - 1], questions[rng.below(i)]);
  }
  return questions;
}

struct GenOpts {
  ConfigOpts cfg;
  std::string op = "all";
  std::string digits = "1:5";
  long long count = 1000;
  std::string out;
  std::string templates;
};

int cmd_gen(const GenOpts& o) {
  TemplatePool pool = o.templates.empty()
                          ? default_template_pool()
                          : template_pool_from_file(o.templates);
  if (o.out.empty()) {
    RunConfig cfg = build_config(o.cfg);
    run_gen_stage(cfg);
    std::cout << "wrote " << (cfg.out_dir / kQuestionsFile).string() << '\n';
    return 0;
  }
  auto [min_d, max_d] = parse_digits(o.digits);
  std::uint64_t seed = o.cfg.seed.value_or(1);
  std::vector<Question> questions;
  if (o.op == "all") {
    questions = generate_all_ops(o.count, min_d, max_d, seed, pool);
  } else {
    ArithSpec spec;
    spec.operation = parse_enum<ArithOp>(o.op);
    spec.min_digits = min_d;
    spec.max_digits = max_d;
    spec.count = o.count;
    spec.seed = seed;
    questions = generate(spec, pool);
  }
  write_records(o.out, questions);
  std::cout << "wrote " << questions.size() << " questions to " << o.out
            << '\n';
  return 0;
}

struct FileOpts {
  ConfigOpts cfg;
  std::string in;
  std::string out;
};

int cmd_sample(const FileOpts& o) {
  RunConfig cfg = build_config(o.cfg);
  if (o.in.empty() && o.out.empty()) {
    run_sample_stage(cfg);
    std::cout << "wrote " << (cfg.out_dir / kSamplesFile).string() << '\n';
    return 0;
  }
  std::filesystem::path in =
      o.in.empty() ? cfg.out_dir / kQuestionsFile : std::filesystem::path(o.in);
  std::filesystem::path out =
      o.out.empty() ? cfg.out_dir / kSamplesFile : std::filesystem::path(o.out);
  auto questions = read_records<Question>(in);
  Sampler sampler = detail::make_sampler(cfg, source_policy(cfg));
  PromptSetting setting = default_prompt_setting(cfg.sampling.prompt_setting);
  std::vector<SampleSet> sets;
  sets.reserve(questions.size());
  for (const auto& q : questions) {
    sets.push_back(sampler.sample_n(q, cfg.sampling.n,
                                    cfg.sampling.temperature, setting));
  }
  write_records(out, sets);
  std::cout << "wrote " << sets.size() << " sample sets to " << out.string()
            << '\n';
  return 0;
}

struct LabelOpts {
  FileOpts io;
  std::string extractor = "rules";
  std::string lexicon;
};

int cmd_label(const LabelOpts& o) {
  RunConfig cfg = build_config(o.io.cfg);
  std::filesystem::path in = o.io.in.empty() ? cfg.out_dir / kSamplesFile
                                             : std::filesystem::path(o.io.in);
  std::filesystem::path out = o.io.out.empty() ? cfg.out_dir / kLabeledFile
                                               : std::filesystem::path(o.io.out);
  RejectionLexicon lexicon = o.lexicon.empty()
                                 ? RejectionLexicon::defaults()
                                 : RejectionLexicon::from_file(o.lexicon);
  auto sets = read_records<SampleSet>(in);
  if (o.extractor == "rules") {
    for (auto& set : sets) {
      for (auto& s : set.samples)
        s = label_sample(set.question, s.sample_index, std::move(s.text),
                         lexicon);
    }
  } else if (o.extractor == "llm") {
    if (!cfg.source.endpoint)
      throw ConfigError("--extractor llm needs source.endpoint in the config");
    ChatEndpoint endpoint(*cfg.source.endpoint);
    for (auto& set : sets) {
      for (auto& s : set.samples) {
        s.extraction = llm_extract(endpoint, set.question, s.text).extraction;
        s.correct = judge(set.question, s.extraction, s.text);
      }
    }
  } else {
    throw ConfigError("unknown extractor '" + o.extractor +
                      "' (expected rules or llm)");
  }
  write_records(out, sets);
  std::cout << "wrote " << sets.size() << " labeled sets to " << out.string()
            << '\n';
  return 0;
}

int cmd_pairs(const FileOpts& o) {
  RunConfig cfg = build_config(o.cfg);
  std::filesystem::path in =
      o.in.empty() ? cfg.out_dir / kLabeledFile : std::filesystem::path(o.in);
  std::filesystem::path out =
      o.out.empty() ? cfg.out_dir / kPairsFile : std::filesystem::path(o.out);
  auto sets = read_records<SampleSet>(in);
  auto pairs = synthesize_pairs(sets, cfg.mode, default_rejection_pool(),
                                stream_seed(cfg.seed, fnv1a64("pairs")));
  write_records(out, pairs);
  std::cout << "wrote " << pairs.size() << " pairs to " << out.string()
            << '\n';
  return 0;
}

struct TrainRmOpts {
  ConfigOpts cfg;
  std::string pairs;
  std::string out;
  std::optional<long long> epochs;
  std::optional<double> lr;
  std::optional<std::uint64_t> seed;
};

int cmd_train_rm(const TrainRmOpts& o) {
  RunConfig cfg = build_config(o.cfg);
  std::filesystem::path in =
      o.pairs.empty() ? cfg.out_dir / kPairsFile : std::filesystem::path(o.pairs);
  std::filesystem::path out = o.out.empty() ? cfg.out_dir / kRewardModelFile
                                            : std::filesystem::path(o.out);
  RmConfig rm = cfg.reward_model;
  if (o.epochs) rm.epochs = *o.epochs;
  if (o.lr) rm.lr = *o.lr;
  if (o.seed) rm.seed = *o.seed;
  auto pairs = read_records<PreferencePair>(in);
  RewardModel model = train(pairs, rm);
  write_records(out, std::vector<RewardModel>{model});
  std::printf("trained on %zu pairs, final loss %.6f, wrote %s\n",
              pairs.size(), model.meta.final_loss, out.string().c_str());
  return 0;
}

struct TrainPolicyOpts {
  ConfigOpts cfg;
  std::string policy_in;
  std::string prompts;
  std::string reward;
  std::string rm_model;
  std::string out;
  std::optional<double> lr;
  std::optional<std::uint64_t> seed;
};

int cmd_train_policy(const TrainPolicyOpts& o) {
  RunConfig cfg = build_config(o.cfg);
  if (!o.reward.empty())
    cfg.optimizer.reward_source = parse_enum<RewardSource>(o.reward);
  if (o.lr) cfg.optimizer.lr = *o.lr;
  if (o.seed) cfg.optimizer.seed = *o.seed;
  validate(cfg.optimizer);

  SimPolicy initial = source_policy(cfg);
  if (!o.policy_in.empty()) {
    std::ifstream in(o.policy_in, std::ios::binary);
    if (!in)
      throw ConfigError("cannot open policy file '" + o.policy_in + "'");
    json j;
    try {
      in >> j;
    } catch (const json::exception& e) {
      throw ConfigError("policy file '" + o.policy_in + "': " + e.what());
    }
    initial = policy_from_json(j);
  }

  std::vector<Question> prompts;
  if (!o.prompts.empty()) {
    prompts = read_records<Question>(o.prompts);
  } else {
    prompts = detail::split_questions(
                  cfg, read_records<Question>(cfg.out_dir / kQuestionsFile))
                  .policy;
  }

  RewardModel model;
  RewardProvider provider;
  provider.source = cfg.optimizer.reward_source;
  if (provider.source == RewardSource::reward_model) {
    std::filesystem::path rm_path = o.rm_model.empty()
                                        ? cfg.out_dir / kRewardModelFile
                                        : std::filesystem::path(o.rm_model);
    model = read_single_record<RewardModel>(rm_path);
    provider.model = &model;
  }

  TrainedPolicy trained = train_policy(initial, prompts, provider,
                                       cfg.optimizer, default_rejection_pool());
  std::filesystem::path out =
      o.out.empty() ? cfg.out_dir / kPolicyFile : std::filesystem::path(o.out);
  write_records(out, std::vector<TrainedPolicy>{trained});
  if (!trained.history.empty()) {
    const auto& last = trained.history.back();
    std::printf("iteration %lld: mean reward %.4f, mean KL %.4f\n",
                last.iteration, last.mean_reward, last.mean_kl);
  }
  std::cout << "wrote " << out.string() << '\n';
  return 0;
}

struct EvalOpts {
  FileOpts io;
  std::string method = "eval";
};

int cmd_eval(const EvalOpts& o) {
  RunConfig cfg = build_config(o.io.cfg);
  if (o.io.in.empty() && o.io.out.empty()) {
    run_eval_stage(cfg);
    auto records = read_records<EvalRecord>(cfg.out_dir / kEvalFile);
    std::cout << method_table(records);
    std::cout << "wrote " << (cfg.out_dir / kEvalFile).string() << '\n';
    return 0;
  }
  std::filesystem::path in =
      o.io.in.empty() ? cfg.out_dir / kLabeledFile : std::filesystem::path(o.io.in);
  std::filesystem::path out =
      o.io.out.empty() ? cfg.out_dir / kEvalFile : std::filesystem::path(o.io.out);
  auto sets = read_records<SampleSet>(in);
  auto outcomes = labeled_outcomes(sets);
  std::vector<EvalRecord> records{
      EvalRecord{o.method, score(outcomes, cfg.alpha_grid)}};
  write_records(out, records);
  std::filesystem::path csv = out;
  csv.replace_extension(".csv");
  write_text_file(csv, method_csv(records));
  std::cout << method_table(records);
  std::cout << "wrote " << out.string() << " and " << csv.string() << '\n';
  return 0;
}

struct ReportOpts {
  ConfigOpts cfg;
  std::string eval;
  std::string baseline;
  std::string out_dir;
};

int cmd_report(const ReportOpts& o) {
  RunConfig cfg = build_config(o.cfg);
  std::filesystem::path in =
      o.eval.empty() ? cfg.out_dir / kEvalFile : std::filesystem::path(o.eval);
  std::filesystem::path dir = o.out_dir.empty() ? cfg.out_dir / kReportDir
                                                : std::filesystem::path(o.out_dir);
  auto records = read_records<EvalRecord>(in);
  std::vector<EvalRecord> baseline;
  if (!o.baseline.empty()) baseline = read_records<EvalRecord>(o.baseline);
  auto written = write_report_files(dir, records, baseline);
  std::cout << method_table(records, baseline);
  for (const auto& path : written)
    std::cout << "wrote " << path.string() << '\n';
  return 0;
}

int cmd_pipeline(const ConfigOpts& o) {
  RunConfig cfg = build_config(o);
  PipelineResult result = run_pipeline(cfg, &std::cout);
  std::cout << "pipeline complete: " << result.ran.size() << " stage(s) ran, "
            << result.skipped.size() << " skipped; manifest at "
            << (cfg.out_dir / kManifestFile).string() << '\n';
  return 0;
}

struct AssetOpts {
  std::string out_dir = "assets";
};

int cmd_assets(const AssetOpts& o) {
  std::filesystem::path dir(o.out_dir);
  write_template_pool(dir / "templates.jsonl", default_template_pool());
  write_rejection_pool(dir / "rejections.jsonl", default_rejection_pool());
  RejectionLexicon lexicon = RejectionLexicon::defaults();
  std::string stems;
  for (const auto& stem : lexicon.stems()) stems += stem + '\n';
  write_text_file(dir / "rejection_lexicon.txt", stems);
  std::cout << "wrote templates.jsonl, rejections.jsonl, rejection_lexicon.txt"
            << " to " << dir.string() << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"reliable-preference pipeline: question generation, sampling, "
               "knowledge feedback, reward modeling, policy optimization"};
  app.require_subcommand(1);

  GenOpts gen_opts;
  auto* gen = app.add_subcommand("gen", "generate arithmetic questions");
  add_config_options(gen, gen_opts.cfg);
  gen->add_option("--op", gen_opts.op, "add|sub|mul|div|all");
  gen->add_option("--digits", gen_opts.digits, "operand digits, N or MIN:MAX");
  gen->add_option("--count", gen_opts.count, "number of questions");
  gen->add_option("--out", gen_opts.out, "output questions file");
  gen->add_option("--templates", gen_opts.templates,
                  "instruction template pool file");

  FileOpts sample_opts;
  auto* sample = app.add_subcommand("sample", "draw responses per question");
  add_config_options(sample, sample_opts.cfg);
  sample->add_option("--in", sample_opts.in, "questions file");
  sample->add_option("--out", sample_opts.out, "sample sets file");

  LabelOpts label_opts;
  auto* label = app.add_subcommand("label", "extract and judge responses");
  add_config_options(label, label_opts.io.cfg);
  label->add_option("--in", label_opts.io.in, "sample sets file");
  label->add_option("--out", label_opts.io.out, "labeled sets file");
  label->add_option("--extractor", label_opts.extractor, "rules|llm");
  label->add_option("--lexicon", label_opts.lexicon,
                    "rejection lexicon file (one stem per line)");

  FileOpts pairs_opts;
  auto* pairs = app.add_subcommand("pairs", "synthesize preference pairs");
  add_config_options(pairs, pairs_opts.cfg);
  pairs->add_option("--in", pairs_opts.in, "labeled sets file");
  pairs->add_option("--out", pairs_opts.out, "pairs file");

  TrainRmOpts rm_opts;
  auto* train_rm = app.add_subcommand("train-rm", "fit the reward model");
  add_config_options(train_rm, rm_opts.cfg, {"--seed"});
  train_rm->add_option("--pairs", rm_opts.pairs, "preference pairs file");
  train_rm->add_option("--out", rm_opts.out, "model output file");
  train_rm->add_option("--epochs", rm_opts.epochs, "training epochs");
  train_rm->add_option("--lr", rm_opts.lr, "learning rate");
  train_rm->add_option("--seed", rm_opts.seed, "reward model seed");

  TrainPolicyOpts policy_opts;
  auto* train_pol =
      app.add_subcommand("train-policy", "optimize the rejection policy");
  add_config_options(train_pol, policy_opts.cfg, {"--seed"});
  train_pol->add_option("--policy-in", policy_opts.policy_in,
                        "initial policy JSON file");
  train_pol->add_option("--prompts", policy_opts.prompts,
                        "questions file to optimize over");
  train_pol->add_option("--reward", policy_opts.reward, "rule|rm");
  train_pol->add_option("--rm-model", policy_opts.rm_model,
                        "reward model file (for --reward rm)");
  train_pol->add_option("--out", policy_opts.out, "trained policy output file");
  train_pol->add_option("--lr", policy_opts.lr, "policy learning rate");
  train_pol->add_option("--seed", policy_opts.seed,
                        "policy optimization seed");

  EvalOpts eval_opts;
  auto* eval = app.add_subcommand("eval", "score labeled responses");
  add_config_options(eval, eval_opts.io.cfg);
  eval->add_option("--in", eval_opts.io.in, "labeled sets file");
  eval->add_option("--out", eval_opts.io.out, "eval records file");
  eval->add_option("--method", eval_opts.method, "method name for the row");

  ReportOpts report_opts;
  auto* report = app.add_subcommand("report", "render tables from eval records");
  add_config_options(report, report_opts.cfg, {"--out-dir"});
  report->add_option("--eval", report_opts.eval, "eval records file");
  report->add_option("--baseline", report_opts.baseline,
                     "baseline eval records file");
  report->add_option("--out-dir", report_opts.out_dir,
                     "directory for table files");

  ConfigOpts pipeline_opts;
  auto* pipeline =
      app.add_subcommand("pipeline", "run every stage with memoization");
  add_config_options(pipeline, pipeline_opts);

  AssetOpts asset_opts;
  auto* assets = app.add_subcommand("assets", "write the built-in data pools");
  assets->add_option("--out-dir", asset_opts.out_dir, "asset directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (gen->parsed()) return cmd_gen(gen_opts);
    if (sample->parsed()) return cmd_sample(sample_opts);
    if (label->parsed()) return cmd_label(label_opts);
    if (pairs->parsed()) return cmd_pairs(pairs_opts);
    if (train_rm->parsed()) return cmd_train_rm(rm_opts);
    if (train_pol->parsed()) return cmd_train_policy(policy_opts);
    if (eval->parsed()) return cmd_eval(eval_opts);
    if (report->parsed()) return cmd_report(report_opts);
    if (pipeline->parsed()) return cmd_pipeline(pipeline_opts);
    if (assets->parsed()) return cmd_assets(asset_opts);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
