// steerkit: build steering vectors for a toy judge model and measure how
// they shift its pairwise self-preference. Each subcommand is one resumable
// pipeline stage writing its artifact into the run directory (--out).

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "steerkit/dataset.hpp"
#include "steerkit/fixture.hpp"
#include "steerkit/gold_client.hpp"
#include "steerkit/harness.hpp"
#include "steerkit/judging.hpp"
#include "steerkit/model.hpp"
#include "steerkit/optimizer.hpp"
#include "steerkit/reports.hpp"
#include "steerkit/steering.hpp"

namespace fs = std::filesystem;
using namespace steerkit;

namespace {

struct GlobalOpts {
  uint64_t seed = 42;
  std::string out_dir = "out";
  std::string asset_dir = default_asset_dir();
};

const PromptTemplate& tmpl(const GlobalOpts& g, const std::string& name) {
  static std::map<std::string, PromptTemplate> cache;
  if (cache.empty()) cache = load_templates(g.asset_dir);
  return get_template(cache, name);
}

int cmd_fixture(const GlobalOpts& g, int n_items, bool verify) {
  FixtureBundle bundle = build_fixture(g.seed, n_items);
  if (verify) verify_fixture(bundle, tmpl(g, "toy_unaware"));
  std::string dir = g.out_dir + "/fixture";
  write_fixture(bundle, dir, tmpl(g, "toy_unaware"));
  std::printf("fixture: %zu items, checkpoint hash %s, wrote %s\n", bundle.items.size(),
              to_hex16(bundle.ckpt.content_hash()).c_str(), dir.c_str());
  return 0;
}

int cmd_ingest(const GlobalOpts& g, const std::string& data_path) {
  IngestResult result = ingest(data_path);
  fs::create_directories(g.out_dir);
  std::string rejects;
  for (const IngestReject& r : result.rejects) {
    nlohmann::json j = {{"line", r.line_no}, {"reason", r.reason}, {"raw", r.raw}};
    rejects += j.dump() + "\n";
  }
  write_text_file(g.out_dir + "/rejects.jsonl", rejects);
  nlohmann::json summary = {{"data", data_path},
                            {"dataset_hash", hash_file_hex(data_path)},
                            {"n_items", result.items.size()},
                            {"n_rejects", result.rejects.size()}};
  write_text_file(g.out_dir + "/ingest_report.json", summary.dump(2) + "\n");
  std::printf("ingest: %zu items, %zu rejects\n", result.items.size(), result.rejects.size());
  return 0;
}

int cmd_baseline(const GlobalOpts& g, const std::string& ckpt_path, const std::string& data_path,
                 std::string template_name, const std::string& intervention) {
  if (intervention == "prompt_baseline")
    template_name = "prompt_baseline";
  else if (intervention != "none")
    throw UsageError("intervention must be none or prompt_baseline");
  ModelCheckpoint ckpt = load_checkpoint(ckpt_path);
  IngestResult data = ingest(data_path);
  BaselineResult result = run_baseline(ckpt, data.items, tmpl(g, template_name));
  fs::create_directories(g.out_dir);
  nlohmann::json j = baseline_to_json(result, to_hex16(ckpt.content_hash()),
                                      hash_file_hex(data_path));
  j["intervention"] = intervention;
  write_text_file(g.out_dir + "/baseline.json", j.dump(2) + "\n");
  std::printf("baseline: bias=%.4f mu_judge=%.4f retained=%zu discarded=%zu skipped=%zu\n",
              result.bias, result.mu_judge, result.retained.size(), result.discarded.size(),
              result.skipped.size());
  return 0;
}

BaselineResult load_baseline(const GlobalOpts& g) {
  return baseline_from_json(nlohmann::json::parse(read_file(g.out_dir + "/baseline.json")));
}

int cmd_extract_caa(const GlobalOpts& g, const std::string& ckpt_path,
                    const std::string& data_path, int layer, int k_positions,
                    const std::string& out_name) {
  ModelCheckpoint ckpt = load_checkpoint(ckpt_path);
  IngestResult data = ingest(data_path);
  BaselineResult baseline = load_baseline(g);
  ContrastiveSets sets =
      build_contrastive_sets(ckpt, data.items, baseline, tmpl(g, baseline.template_name));
  int target_layer = layer < 0 ? ckpt.config.mid_layer() : layer;
  SteeringVector vec = extract_caa(ckpt, sets.examples, target_layer, k_positions);
  vec.meta["positive_items"] = sets.n_positive;
  vec.meta["negative_items"] = sets.n_negative;
  save_vector(vec, g.out_dir + "/" + out_name);
  std::printf("extract-caa: layer=%d positives=%d negatives=%d |v|=%.4f -> %s\n", target_layer,
              sets.n_positive, sets.n_negative, norm2(vec.vector.data),
              (g.out_dir + "/" + out_name).c_str());
  return 0;
}

int cmd_optimize(const GlobalOpts& g, const std::string& ckpt_path, const std::string& data_path,
                 int layer, double lr, int iterations, double pct,
                 const std::string& template_name, const std::string& out_name) {
  ModelCheckpoint ckpt = load_checkpoint(ckpt_path);
  IngestResult data = ingest(data_path);
  BaselineResult baseline = load_baseline(g);
  std::vector<OptimizationTask> tasks =
      build_optimization_tasks(data.items, baseline, tmpl(g, template_name), pct);
  OptimizerConfig cfg;
  cfg.layer = layer;
  cfg.learning_rate = lr;
  cfg.iterations = iterations;
  auto [vec, trace] = optimize_vector(ckpt, tasks, cfg);
  vec.meta["template"] = template_name;
  vec.meta["pct"] = pct;
  save_vector(vec, g.out_dir + "/" + out_name);
  write_text_file(g.out_dir + "/opt_trace.csv", loss_trace_csv(trace));
  std::printf("optimize: %zu tasks, loss %.4f -> %.4f, |h|=%.4f -> %s\n", tasks.size(),
              trace.losses.front(), trace.losses.back(), trace.final_vector_norm,
              (g.out_dir + "/" + out_name).c_str());
  return 0;
}

int cmd_steer_eval(const GlobalOpts& g, const std::string& ckpt_path,
                   const std::string& data_path, const std::string& vector_path,
                   const std::string& label, std::vector<double> multipliers,
                   const std::string& template_name) {
  ModelCheckpoint ckpt = load_checkpoint(ckpt_path);
  IngestResult data = ingest(data_path);
  BaselineResult baseline = load_baseline(g);
  SteeringVector vec = load_vector(vector_path, ckpt.config);
  SteeredSweep sweep = run_steered(ckpt, data.items, baseline, vec, multipliers,
                                   tmpl(g, template_name), label);
  nlohmann::json j = steered_to_json(sweep, label, hash_file_hex(vector_path));
  write_text_file(g.out_dir + "/steered_" + label + ".json", j.dump(2) + "\n");
  for (const FlipReport& r : sweep.reports)
    std::printf(
        "steer-eval %s m=%.2f: bias %.2f (%d) agreement %.2f (%d) lsp %.2f (%d) "
        "effectiveness %.2f stability %.2f\n",
        label.c_str(), r.multiplier, r.bias.flip_rate(), r.bias.n_items,
        r.agreement.flip_rate(), r.agreement.n_items, r.lsp.flip_rate(), r.lsp.n_items,
        r.effectiveness(), r.stability());
  return 0;
}

int cmd_gold(const GlobalOpts& g, const std::string& data_path, bool live, bool replay,
             const std::string& cassette, std::vector<std::string> endpoints,
             const std::string& auth_env, const std::string& template_name,
             std::string out_data) {
  if (live == replay) throw UsageError("pass exactly one of --live / --replay");
  IngestResult data = ingest(data_path);

  std::vector<GoldJudgeClient> judges;
  if (endpoints.empty()) {
    if (live) throw UsageError("--live requires at least one --endpoint");
    judges = fixture_gold_judges(cassette);
  } else {
    int idx = 0;
    for (const std::string& url : endpoints) {
      GoldJudgeClient c;
      c.name = "judge_" + std::to_string(idx++);
      c.endpoint = url;
      c.cassette_path = cassette;
      c.mode = live ? GoldMode::LIVE : GoldMode::REPLAY;
      c.auth_token_env = auth_env;
      judges.push_back(std::move(c));
    }
  }

  fs::create_directories(g.out_dir);
  std::ofstream record;
  if (live) {
    record.open(cassette, std::ios::binary | std::ios::app);
    if (!record) throw FormatError("cannot open cassette for append: " + cassette);
  }
  GoldFetchStats stats = fetch_gold_votes(judges, data.items, tmpl(g, template_name),
                                          live ? &record : nullptr);
  if (out_data.empty()) out_data = g.out_dir + "/items_gold.jsonl";
  write_text_file(out_data, items_to_jsonl(data.items));
  std::printf("gold: labeled=%d unlabeled=%d abstentions=%d -> %s\n", stats.items_labeled,
              stats.items_unlabeled, stats.judge_abstentions, out_data.c_str());
  return 0;
}

int cmd_report(const GlobalOpts& g) {
  ReportBundle bundle = build_reports(g.out_dir, g.asset_dir);
  bundle.run["seed"] = g.seed;
  write_text_file(g.out_dir + "/table1.csv", bundle.table1);
  write_text_file(g.out_dir + "/fig1.csv", bundle.fig1);
  write_text_file(g.out_dir + "/run.json", bundle.run.dump(2) + "\n");
  std::printf("report: wrote table1.csv fig1.csv run.json in %s%s\n", g.out_dir.c_str(),
              bundle.complete ? "" : " (with gaps)");
  if (!bundle.complete) {
    for (const std::string& gap : bundle.gaps) std::fprintf(stderr, "gap: %s\n", gap.c_str());
    return 2;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"steering-vector toolkit for pairwise judge bias experiments"};
  app.set_config("--config", "", "read options from an INI-style config file");

  GlobalOpts g;
  app.add_option("--seed", g.seed, "global random seed")->capture_default_str();
  app.add_option("--out", g.out_dir, "run directory for stage artifacts")
      ->capture_default_str();
  app.add_option("--assets", g.asset_dir, "prompt/reference asset directory")
      ->capture_default_str();
  app.require_subcommand(1);

  // fixture
  auto* fixture_cmd =
      app.add_subcommand("fixture", "build the planted-bias checkpoint and dataset");
  int n_items = 40;
  bool no_verify = false;
  fixture_cmd->add_option("--items", n_items, "dataset size")->capture_default_str();
  fixture_cmd->add_flag("--no-verify", no_verify, "skip behavioral verification");

  // ingest
  auto* ingest_cmd = app.add_subcommand("ingest", "validate a JSONL dataset");
  std::string ingest_data;
  ingest_cmd->add_option("--data", ingest_data, "JSONL dataset path")->required();

  // baseline
  auto* baseline_cmd = app.add_subcommand("baseline", "double-order judging pass");
  std::string b_ckpt, b_data, b_template = "toy_unaware", b_intervention = "none";
  baseline_cmd->add_option("--ckpt", b_ckpt, "checkpoint path")->required();
  baseline_cmd->add_option("--data", b_data, "JSONL dataset path")->required();
  baseline_cmd->add_option("--template", b_template, "prompt template name")
      ->capture_default_str();
  baseline_cmd->add_option("--intervention", b_intervention, "none | prompt_baseline")
      ->capture_default_str();

  // extract-caa
  auto* caa_cmd = app.add_subcommand("extract-caa", "contrastive activation addition vector");
  std::string c_ckpt, c_data, c_out = "caa.svec";
  int c_layer = -1, c_k = kCaaDefaultPositions;
  caa_cmd->add_option("--ckpt", c_ckpt)->required();
  caa_cmd->add_option("--data", c_data)->required();
  caa_cmd->add_option("--layer", c_layer, "extraction layer (-1 = mid)")->capture_default_str();
  caa_cmd->add_option("--k", c_k, "positions per example window")->capture_default_str();
  caa_cmd->add_option("--out-vector", c_out)->capture_default_str();

  // optimize
  auto* opt_cmd = app.add_subcommand("optimize", "gradient-learned steering vector");
  std::string o_ckpt, o_data, o_template = "toy_aware", o_out = "optimized.svec";
  int o_layer = -1, o_iterations = 20;
  double o_lr = 0.1, o_pct = 0.20;
  opt_cmd->add_option("--ckpt", o_ckpt)->required();
  opt_cmd->add_option("--data", o_data)->required();
  opt_cmd->add_option("--layer", o_layer, "injection layer (-1 = mid)")->capture_default_str();
  opt_cmd->add_option("--lr", o_lr, "Adam learning rate")->capture_default_str();
  opt_cmd->add_option("--iterations", o_iterations)->capture_default_str();
  opt_cmd->add_option("--pct", o_pct, "top percentile of biased prompts")->capture_default_str();
  opt_cmd->add_option("--template", o_template)->capture_default_str();
  opt_cmd->add_option("--out-vector", o_out)->capture_default_str();

  // steer-eval
  auto* eval_cmd = app.add_subcommand("steer-eval", "flip rates per multiplier");
  std::string e_ckpt, e_data, e_vector, e_label = "caa", e_template = "toy_unaware";
  std::vector<double> e_multipliers = {0.0, 0.1, 0.5, 1.0};
  eval_cmd->add_option("--ckpt", e_ckpt)->required();
  eval_cmd->add_option("--data", e_data)->required();
  eval_cmd->add_option("--vector", e_vector, "steering vector file")->required();
  eval_cmd->add_option("--label", e_label, "intervention label for reports")
      ->capture_default_str();
  eval_cmd->add_option("--multipliers", e_multipliers, "steering multipliers")
      ->delimiter(',')
      ->capture_default_str();
  eval_cmd->add_option("--template", e_template)->capture_default_str();

  // gold
  auto* gold_cmd = app.add_subcommand("gold", "fetch gold votes (record/replay client)");
  std::string g_data, g_cassette, g_auth_env, g_template = "toy_unaware", g_out_data;
  std::vector<std::string> g_endpoints;
  bool g_live = false, g_replay = false;
  gold_cmd->add_option("--data", g_data, "items without gold votes")->required();
  gold_cmd->add_option("--cassette", g_cassette, "cassette JSONL path")->required();
  gold_cmd->add_flag("--live", g_live, "query endpoints and record");
  gold_cmd->add_flag("--replay", g_replay, "serve responses from the cassette only");
  gold_cmd->add_option("--endpoint", g_endpoints, "judge endpoint URL (repeatable)");
  gold_cmd->add_option("--auth-env", g_auth_env, "env var holding the bearer token");
  gold_cmd->add_option("--template", g_template)->capture_default_str();
  gold_cmd->add_option("--out-data", g_out_data, "labeled items output path");

  // report
  app.add_subcommand("report", "aggregate stage artifacts into table1/fig1/run.json");

  CLI11_PARSE(app, argc, argv);

  try {
    if (fixture_cmd->parsed()) return cmd_fixture(g, n_items, !no_verify);
    if (ingest_cmd->parsed()) return cmd_ingest(g, ingest_data);
    if (baseline_cmd->parsed()) return cmd_baseline(g, b_ckpt, b_data, b_template, b_intervention);
    if (caa_cmd->parsed()) return cmd_extract_caa(g, c_ckpt, c_data, c_layer, c_k, c_out);
    if (opt_cmd->parsed())
      return cmd_optimize(g, o_ckpt, o_data, o_layer, o_lr, o_iterations, o_pct, o_template,
                          o_out);
    if (eval_cmd->parsed())
      return cmd_steer_eval(g, e_ckpt, e_data, e_vector, e_label, e_multipliers, e_template);
    if (gold_cmd->parsed())
      return cmd_gold(g, g_data, g_live, g_replay, g_cassette, g_endpoints, g_auth_env,
                      g_template, g_out_data);
    return cmd_report(g);
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return e.exit_code();
  } catch (const std::exception& e) {
    std::fprintf(stderr, "unexpected error: %s\n", e.what());
    return 1;
  }
}
