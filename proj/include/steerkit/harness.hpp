#pragma once

#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "nlohmann/json.hpp"
#include "steerkit/dataset.hpp"
#include "steerkit/judging.hpp"
#include "steerkit/optimizer.hpp"
#include "steerkit/reports.hpp"
#include "steerkit/steering.hpp"
#include "steerkit/transformer.hpp"

namespace steerkit {

struct BaselineResult {
  std::string template_name;
  std::map<std::string, JudgeReading> fwd;  // SELF_FIRST readings
  std::map<std::string, JudgeReading> rev;  // OTHER_FIRST readings
  std::map<std::string, ConsistentReading> retained;
  std::vector<std::string> discarded;  // positional-filter casualties
  std::vector<std::string> skipped;    // overlong prompts etc.
  std::map<std::string, Vote> golds;   // non-tie gold majorities
  std::vector<std::string> gold_ties;
  std::map<std::string, OutcomeLabel> partition;  // retained & non-tie
  double bias = 0.0;
  double mu_judge = 0.0;
};

// One full double-order judging pass over the dataset: readings, positional
// filter, bias metric, gold majorities and the outcome partition.
inline BaselineResult run_baseline(const ModelCheckpoint& ckpt,
                                   const std::vector<PairwiseItem>& items,
                                   const PromptTemplate& tmpl,
                                   const SteeringApplication* steer = nullptr) {
  BaselineResult result;
  result.template_name = tmpl.name;
  std::vector<ConsistentReading> consistent;
  for (const PairwiseItem& item : items) {
    JudgeReading fwd, rev;
    try {
      fwd = read_vote(ckpt, tmpl, item, Order::SELF_FIRST, steer);
      rev = read_vote(ckpt, tmpl, item, Order::OTHER_FIRST, steer);
    } catch (const LengthError&) {
      result.skipped.push_back(item.id);
      continue;
    }
    result.fwd[item.id] = fwd;
    result.rev[item.id] = rev;
    auto kept = positional_filter(fwd, rev);
    if (!kept) {
      result.discarded.push_back(item.id);
      continue;
    }
    result.retained[item.id] = *kept;
    consistent.push_back(*kept);
  }
  if (consistent.empty())
    throw InsufficientDataError("positional filter discarded every item");
  result.bias = bias_metric(consistent);
  result.mu_judge = gold_score(items);

  std::map<std::string, Vote> votes;
  std::map<std::string, Vote> golds_covered;
  for (const PairwiseItem& item : items) {
    auto maj = gold_majority(item);
    if (!maj) {
      result.gold_ties.push_back(item.id);
      continue;
    }
    result.golds[item.id] = *maj;
    auto it = result.retained.find(item.id);
    if (it == result.retained.end()) continue;
    votes[item.id] = it->second.vote;
    golds_covered[item.id] = *maj;
  }
  result.partition = partition_outcomes(votes, golds_covered);
  return result;
}

inline nlohmann::json baseline_to_json(const BaselineResult& r, const std::string& ckpt_hash,
                                       const std::string& dataset_hash) {
  nlohmann::json items = nlohmann::json::object();
  for (const auto& [id, fwd] : r.fwd) {
    nlohmann::json entry = {
        {"fwd", {{"p_self", fwd.p_self}, {"vote", to_string(fwd.vote)}}},
        {"rev", {{"p_self", r.rev.at(id).p_self}, {"vote", to_string(r.rev.at(id).vote)}}}};
    auto kept = r.retained.find(id);
    if (kept != r.retained.end()) {
      entry["vote"] = to_string(kept->second.vote);
      entry["p_self"] = kept->second.p_self;
    }
    auto gold = r.golds.find(id);
    if (gold != r.golds.end()) entry["gold"] = to_string(gold->second);
    auto label = r.partition.find(id);
    if (label != r.partition.end()) entry["label"] = to_string(label->second);
    items[id] = std::move(entry);
  }
  return {{"template", r.template_name},
          {"checkpoint_hash", ckpt_hash},
          {"dataset_hash", dataset_hash},
          {"bias", r.bias},
          {"mu_judge", r.mu_judge},
          {"items", items},
          {"discarded", r.discarded},
          {"skipped", r.skipped},
          {"gold_ties", r.gold_ties}};
}

inline BaselineResult baseline_from_json(const nlohmann::json& j) {
  BaselineResult r;
  try {
    r.template_name = j.at("template").get<std::string>();
    r.bias = j.at("bias").get<double>();
    r.mu_judge = j.at("mu_judge").get<double>();
    for (const auto& id : j.at("discarded")) r.discarded.push_back(id.get<std::string>());
    for (const auto& id : j.at("skipped")) r.skipped.push_back(id.get<std::string>());
    for (const auto& id : j.at("gold_ties")) r.gold_ties.push_back(id.get<std::string>());
    for (const auto& [id, entry] : j.at("items").items()) {
      JudgeReading fwd, rev;
      fwd.item_id = rev.item_id = id;
      fwd.order = Order::SELF_FIRST;
      rev.order = Order::OTHER_FIRST;
      fwd.p_self = entry.at("fwd").at("p_self").get<double>();
      fwd.p_other = 1.0 - fwd.p_self;
      fwd.vote = vote_from_string(entry.at("fwd").at("vote").get<std::string>());
      rev.p_self = entry.at("rev").at("p_self").get<double>();
      rev.p_other = 1.0 - rev.p_self;
      rev.vote = vote_from_string(entry.at("rev").at("vote").get<std::string>());
      r.fwd[id] = fwd;
      r.rev[id] = rev;
      if (entry.contains("vote"))
        r.retained[id] = ConsistentReading{id, vote_from_string(entry.at("vote")),
                                           entry.at("p_self").get<double>()};
      if (entry.contains("gold")) r.golds[id] = vote_from_string(entry.at("gold"));
      if (entry.contains("label") && entry.contains("vote") && entry.contains("gold"))
        r.partition[id] = classify_outcome(vote_from_string(entry.at("vote")),
                                           vote_from_string(entry.at("gold")));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("bad baseline file: ") + e.what());
  }
  return r;
}

struct SteeredSweep {
  std::vector<FlipReport> reports;  // one per multiplier
  // per multiplier: retained steered readings (id -> p_self/vote)
  std::vector<std::map<std::string, ConsistentReading>> steered_retained;
};

// Re-judges the items per multiplier and computes flip rates inside the
// baseline-derived categories. Items that fail the steered run's positional
// filter are reported separately and never counted as flips.
inline SteeredSweep run_steered(const ModelCheckpoint& ckpt,
                                const std::vector<PairwiseItem>& items,
                                const BaselineResult& baseline, const SteeringVector& vec,
                                const std::vector<double>& multipliers,
                                const PromptTemplate& tmpl, const std::string& label) {
  std::map<std::string, const PairwiseItem*> by_id;
  for (const PairwiseItem& item : items) by_id[item.id] = &item;
  for (const auto& [id, _] : baseline.partition)
    if (!by_id.count(id))
      throw UsageError("baseline refers to item " + id + " missing from the dataset");

  SteeredSweep sweep;
  for (double mult : multipliers) {
    SteeringApplication app{vec, static_cast<float>(mult)};
    FlipReport report;
    report.intervention = label;
    report.setting = tmpl.name;
    report.multiplier = mult;
    std::map<std::string, ConsistentReading> steered;

    double shift_sum = 0.0;
    int shift_n = 0;
    for (const auto& [id, category] : baseline.partition) {
      const PairwiseItem& item = *by_id.at(id);
      CategoryFlips* bucket = nullptr;
      switch (category) {
        case OutcomeLabel::ILLEGITIMATE_SP: bucket = &report.bias; break;
        case OutcomeLabel::UNBIASED_AGREEMENT: bucket = &report.agreement; break;
        case OutcomeLabel::LEGITIMATE_SP: bucket = &report.lsp; break;
        case OutcomeLabel::OTHER_DISAGREEMENT: bucket = &report.other_disagreement; break;
      }
      std::optional<ConsistentReading> kept;
      try {
        JudgeReading fwd = read_vote(ckpt, tmpl, item, Order::SELF_FIRST, &app);
        JudgeReading rev = read_vote(ckpt, tmpl, item, Order::OTHER_FIRST, &app);
        kept = positional_filter(fwd, rev);
      } catch (const LengthError&) {
        kept = std::nullopt;
      }
      if (!kept) {
        bucket->n_steered_discarded += 1;
        continue;
      }
      steered[id] = *kept;
      bucket->n_items += 1;
      if (kept->vote != baseline.retained.at(id).vote) bucket->n_flipped += 1;
      shift_sum += kept->p_self - baseline.retained.at(id).p_self;
      shift_n += 1;
    }
    report.mean_prob_shift = shift_n == 0 ? 0.0 : shift_sum / shift_n;
    report.check();
    sweep.reports.push_back(std::move(report));
    sweep.steered_retained.push_back(std::move(steered));
  }
  return sweep;
}

struct ContrastiveSets {
  std::vector<ContrastiveExample> examples;
  int n_positive = 0;  // unbiased-agreement items
  int n_negative = 0;  // illegitimate self-preference items
};

// Positives are the unbiased-agreement items, negatives the illegitimate
// self-preference items; completions come from the judge's own greedy
// decoding of the rendered prompt.
inline ContrastiveSets build_contrastive_sets(const ModelCheckpoint& ckpt,
                                              const std::vector<PairwiseItem>& items,
                                              const BaselineResult& baseline,
                                              const PromptTemplate& tmpl) {
  std::map<std::string, const PairwiseItem*> by_id;
  for (const PairwiseItem& item : items) by_id[item.id] = &item;

  ContrastiveSets sets;
  int next_id = 0;
  for (const auto& [id, category] : baseline.partition) {
    Polarity polarity;
    if (category == OutcomeLabel::UNBIASED_AGREEMENT)
      polarity = Polarity::POSITIVE;
    else if (category == OutcomeLabel::ILLEGITIMATE_SP)
      polarity = Polarity::NEGATIVE;
    else
      continue;
    auto it = by_id.find(id);
    if (it == by_id.end()) throw UsageError("baseline refers to unknown item " + id);
    RenderedPrompt rendered = render_prompt(tmpl, *it->second, Order::SELF_FIRST);
    ContrastiveExample ex;
    ex.id = next_id++;
    ex.prompt = encode_with_bos(rendered.text);
    ex.completion = greedy_decode(ckpt, ex.prompt, 4);
    if (ex.completion.empty())
      throw NumericError("empty greedy completion for item " + id);
    ex.polarity = polarity;
    ex.provenance = "greedy:" + id;
    (polarity == Polarity::POSITIVE ? sets.n_positive : sets.n_negative) += 1;
    sets.examples.push_back(std::move(ex));
  }
  if (sets.n_negative == 0)
    throw InsufficientDataError("no ILLEGITIMATE_SP items to build negative examples");
  if (sets.n_positive == 0)
    throw InsufficientDataError("no UNBIASED_AGREEMENT items to build positive examples");
  return sets;
}

// Restricts to the baseline's illegitimate self-preference items, keeps the
// top percentile by P(self), and frames one promote/suppress task per item:
// promote the choice token the gold judges back, suppress the realized
// biased vote.
inline std::vector<OptimizationTask> build_optimization_tasks(
    const std::vector<PairwiseItem>& items, const BaselineResult& baseline,
    const PromptTemplate& tmpl, double pct = 0.20) {
  std::map<std::string, const PairwiseItem*> by_id;
  for (const PairwiseItem& item : items) by_id[item.id] = &item;

  std::vector<std::pair<std::string, double>> candidates;
  for (const auto& [id, category] : baseline.partition)
    if (category == OutcomeLabel::ILLEGITIMATE_SP)
      candidates.emplace_back(id, baseline.retained.at(id).p_self);
  if (candidates.empty())
    throw InsufficientDataError("no ILLEGITIMATE_SP items to optimize against");

  auto selected = select_top_percentile(std::move(candidates), pct);
  std::vector<OptimizationTask> tasks;
  for (const auto& [id, p_self] : selected) {
    auto it = by_id.find(id);
    if (it == by_id.end()) throw UsageError("baseline refers to unknown item " + id);
    RenderedPrompt rendered = render_prompt(tmpl, *it->second, Order::SELF_FIRST);
    OptimizationTask task;
    task.prompt = encode_with_bos(rendered.text);
    task.promote = {rendered.choice_other};
    task.suppress = {rendered.choice_self};
    tasks.push_back(std::move(task));
  }
  return tasks;
}

// ---- run-directory stage artifacts ----

inline void write_text_file(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot open for write: " + path);
  out.write(content.data(), static_cast<std::streamsize>(content.size()));
  if (!out) throw FormatError("write failed: " + path);
}

inline nlohmann::json steered_to_json(const SteeredSweep& sweep, const std::string& label,
                                      const std::string& vector_hash) {
  nlohmann::json reports = nlohmann::json::array();
  for (const FlipReport& r : sweep.reports) reports.push_back(flip_report_to_json(r));
  nlohmann::json per_item = nlohmann::json::array();
  for (size_t i = 0; i < sweep.reports.size(); ++i) {
    nlohmann::json block = {{"multiplier", sweep.reports[i].multiplier},
                            {"items", nlohmann::json::object()}};
    for (const auto& [id, reading] : sweep.steered_retained[i])
      block["items"][id] = {{"p_self", reading.p_self}, {"vote", to_string(reading.vote)}};
    per_item.push_back(std::move(block));
  }
  return {{"label", label},
          {"vector_hash", vector_hash},
          {"reports", reports},
          {"per_item", per_item}};
}

struct ReportBundle {
  std::string table1;
  std::string fig1;
  nlohmann::json run;
  bool complete = true;
  std::vector<std::string> gaps;
};

// Collects baseline + steered stage files from a run directory into
// table1.csv / fig1.csv / run.json contents. Missing steered sweeps are
// flagged as gaps rather than failing the whole report.
inline ReportBundle build_reports(const std::string& run_dir, const std::string& asset_dir) {
  namespace fs = std::filesystem;
  std::string baseline_path = run_dir + "/baseline.json";
  if (!fs::exists(baseline_path))
    throw InsufficientDataError("no baseline.json in " + run_dir);
  nlohmann::json baseline_json = nlohmann::json::parse(read_file(baseline_path));
  BaselineResult baseline = baseline_from_json(baseline_json);

  ReportBundle bundle;
  std::vector<FlipReport> run_rows;
  std::vector<Fig1Row> fig_rows;

  for (const auto& [id, reading] : baseline.retained)
    fig_rows.push_back({"baseline:" + baseline.template_name, 0.0, id, reading.p_self});

  std::vector<std::string> steered_files;
  for (const auto& entry : fs::directory_iterator(run_dir)) {
    std::string name = entry.path().filename().string();
    if (name.rfind("steered_", 0) == 0 && name.ends_with(".json"))
      steered_files.push_back(entry.path().string());
  }
  std::sort(steered_files.begin(), steered_files.end());
  if (steered_files.empty()) {
    bundle.complete = false;
    bundle.gaps.push_back("no steered sweeps found");
  }

  nlohmann::json hashes = {{"baseline.json", hash_file_hex(baseline_path)}};
  for (const std::string& path : steered_files) {
    nlohmann::json sj = nlohmann::json::parse(read_file(path));
    std::string label = sj.at("label").get<std::string>();
    for (const auto& rj : sj.at("reports")) run_rows.push_back(flip_report_from_json(rj));
    for (const auto& block : sj.at("per_item")) {
      double mult = block.at("multiplier").get<double>();
      for (const auto& [id, entry] : block.at("items").items())
        fig_rows.push_back({label, mult, id, entry.at("p_self").get<double>()});
    }
    hashes[fs::path(path).filename().string()] = hash_file_hex(path);
  }

  std::sort(fig_rows.begin(), fig_rows.end(), [](const Fig1Row& a, const Fig1Row& b) {
    if (a.intervention != b.intervention) return a.intervention < b.intervention;
    if (a.multiplier != b.multiplier) return a.multiplier < b.multiplier;
    return a.item_id < b.item_id;
  });

  bundle.table1 = table1_csv(run_rows, load_reference_table(asset_dir));
  bundle.fig1 = fig1_csv(fig_rows, baseline.mu_judge);
  bundle.run = {{"baseline", baseline_json},
                {"hashes", hashes},
                {"gaps", bundle.gaps},
                {"complete", bundle.complete}};
  return bundle;
}

}  // namespace steerkit
