#pragma once

#include <map>
#include <string>
#include <vector>

#include "nlohmann/json.hpp"
#include "steerkit/errors.hpp"
#include "steerkit/format.hpp"
#include "steerkit/hash.hpp"
#include "steerkit/judging.hpp"

namespace steerkit {

struct CategoryFlips {
  int n_items = 0;     // survived both runs' positional filters
  int n_flipped = 0;
  int n_steered_discarded = 0;  // lost to the steered run's filter

  double flip_rate() const { return n_items == 0 ? 0.0 : double(n_flipped) / n_items; }
};

// Flip accounting for one (intervention, multiplier) cell. Categories come
// from the baseline partition; steered votes only ever decide "flipped or
// not" within them.
struct FlipReport {
  std::string intervention;
  std::string setting;  // template name
  double multiplier = 0.0;
  CategoryFlips bias;        // ILLEGITIMATE_SP (flips are corrections)
  CategoryFlips agreement;   // UNBIASED_AGREEMENT (flips are damage)
  CategoryFlips lsp;         // LEGITIMATE_SP (flips are damage)
  CategoryFlips other_disagreement;
  double mean_prob_shift = 0.0;  // mean steered-minus-baseline p_self

  double effectiveness() const { return bias.flip_rate(); }
  double stability() const {
    int n = agreement.n_items + lsp.n_items;
    if (n == 0) return 1.0;
    return 1.0 - double(agreement.n_flipped + lsp.n_flipped) / n;
  }
  int steered_discarded() const {
    return bias.n_steered_discarded + agreement.n_steered_discarded + lsp.n_steered_discarded +
           other_disagreement.n_steered_discarded;
  }

  void check() const {
    for (const CategoryFlips* c : {&bias, &agreement, &lsp, &other_disagreement}) {
      if (c->n_flipped > c->n_items) throw NumericError("flip count exceeds category size");
      if (c->flip_rate() < 0.0 || c->flip_rate() > 1.0)
        throw NumericError("flip rate out of [0,1]");
    }
  }
};

inline nlohmann::json category_to_json(const CategoryFlips& c) {
  return {{"n_items", c.n_items},
          {"n_flipped", c.n_flipped},
          {"n_steered_discarded", c.n_steered_discarded},
          {"flip_rate", c.flip_rate()}};
}

inline CategoryFlips category_from_json(const nlohmann::json& j) {
  CategoryFlips c;
  c.n_items = j.at("n_items").get<int>();
  c.n_flipped = j.at("n_flipped").get<int>();
  c.n_steered_discarded = j.at("n_steered_discarded").get<int>();
  return c;
}

inline nlohmann::json flip_report_to_json(const FlipReport& r) {
  return {{"intervention", r.intervention},
          {"setting", r.setting},
          {"multiplier", r.multiplier},
          {"bias", category_to_json(r.bias)},
          {"agreement", category_to_json(r.agreement)},
          {"lsp", category_to_json(r.lsp)},
          {"other_disagreement", category_to_json(r.other_disagreement)},
          {"effectiveness", r.effectiveness()},
          {"stability", r.stability()},
          {"mean_prob_shift", r.mean_prob_shift}};
}

inline FlipReport flip_report_from_json(const nlohmann::json& j) {
  FlipReport r;
  r.intervention = j.at("intervention").get<std::string>();
  r.setting = j.at("setting").get<std::string>();
  r.multiplier = j.at("multiplier").get<double>();
  r.bias = category_from_json(j.at("bias"));
  r.agreement = category_from_json(j.at("agreement"));
  r.lsp = category_from_json(j.at("lsp"));
  r.other_disagreement = category_from_json(j.at("other_disagreement"));
  r.mean_prob_shift = j.at("mean_prob_shift").get<double>();
  r.check();
  return r;
}

// Published reference flip rates shipped as a pinned asset. The loader
// refuses to use a modified file.
constexpr const char* kReferenceTable1Hash = "17c3305625b27e95";

struct ReferenceRow {
  std::string intervention;
  std::string setting;
  std::string multiplier;  // kept textual, may be empty
  std::string bias_flip, agreement_flip, lsp_flip;
};

inline std::vector<ReferenceRow> load_reference_table(const std::string& asset_dir) {
  std::string path = asset_dir + "/reference/table1_reference.csv";
  std::string text = read_file(path);
  if (hash_hex(text) != kReferenceTable1Hash)
    throw FormatError("reference table hash mismatch for " + path);
  std::vector<ReferenceRow> rows;
  size_t pos = 0;
  bool header = true;
  while (pos < text.size()) {
    size_t nl = text.find('\n', pos);
    std::string line = text.substr(pos, nl == std::string::npos ? std::string::npos : nl - pos);
    pos = nl == std::string::npos ? text.size() : nl + 1;
    if (line.empty()) continue;
    if (header) {
      header = false;
      continue;
    }
    std::vector<std::string> cells;
    size_t start = 0;
    while (true) {
      size_t comma = line.find(',', start);
      cells.push_back(line.substr(start, comma == std::string::npos ? std::string::npos
                                                                    : comma - start));
      if (comma == std::string::npos) break;
      start = comma + 1;
    }
    if (cells.size() != 6) throw FormatError("bad reference row: " + line);
    rows.push_back({cells[0], cells[1], cells[2], cells[3], cells[4], cells[5]});
  }
  return rows;
}

constexpr const char* kTable1Header =
    "source,intervention,setting,multiplier,bias_flip,agreement_flip,lsp_flip,"
    "n_bias,n_agreement,n_lsp,steered_discarded,effectiveness,stability\n";

inline std::string table1_csv(const std::vector<FlipReport>& runs,
                              const std::vector<ReferenceRow>& reference) {
  std::string out = kTable1Header;
  for (const ReferenceRow& r : reference) {
    out += "reference," + r.intervention + "," + r.setting + "," + r.multiplier + "," +
           r.bias_flip + "," + r.agreement_flip + "," + r.lsp_flip + ",,,,,,\n";
  }
  for (const FlipReport& r : runs) {
    r.check();
    out += "run," + r.intervention + "," + r.setting + "," + format_double(r.multiplier) + "," +
           format_double(r.bias.flip_rate()) + "," + format_double(r.agreement.flip_rate()) +
           "," + format_double(r.lsp.flip_rate()) + "," + std::to_string(r.bias.n_items) + "," +
           std::to_string(r.agreement.n_items) + "," + std::to_string(r.lsp.n_items) + "," +
           std::to_string(r.steered_discarded()) + "," + format_double(r.effectiveness()) + "," +
           format_double(r.stability()) + "\n";
  }
  return out;
}

struct Fig1Row {
  std::string intervention;
  double multiplier = 0.0;
  std::string item_id;
  double p_self = 0.0;
};

constexpr const char* kFig1Header = "intervention,multiplier,item_id,p_self,mu_judge\n";

// Per-item P(self) rows plus one mean row per (intervention, multiplier)
// block; mu_judge is the constant gold-score column.
inline std::string fig1_csv(const std::vector<Fig1Row>& rows, double mu_judge) {
  std::string out = kFig1Header;
  std::string mu = format_double(mu_judge);
  size_t i = 0;
  while (i < rows.size()) {
    size_t j = i;
    double sum = 0.0;
    while (j < rows.size() && rows[j].intervention == rows[i].intervention &&
           rows[j].multiplier == rows[i].multiplier) {
      out += rows[j].intervention + "," + format_double(rows[j].multiplier) + "," +
             rows[j].item_id + "," + format_double(rows[j].p_self) + "," + mu + "\n";
      sum += rows[j].p_self;
      ++j;
    }
    out += rows[i].intervention + "," + format_double(rows[i].multiplier) + ",(mean)," +
           format_double(sum / double(j - i)) + "," + mu + "\n";
    i = j;
  }
  return out;
}

}  // namespace steerkit
