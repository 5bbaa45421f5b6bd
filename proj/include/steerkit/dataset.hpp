#pragma once

#include <map>
#include <set>
#include <string>
#include <vector>

#include "nlohmann/json.hpp"
#include "steerkit/errors.hpp"
#include "steerkit/hash.hpp"
#include "steerkit/judging.hpp"

namespace steerkit {

inline nlohmann::json item_to_json(const PairwiseItem& item) {
  nlohmann::json votes = nlohmann::json::array();
  for (Vote v : item.gold_votes) votes.push_back(to_string(v));
  return {{"id", item.id},
          {"article", item.article},
          {"summary_self", item.summary_self},
          {"summary_other", item.summary_other},
          {"gold_votes", votes}};
}

inline PairwiseItem item_from_json(const nlohmann::json& j) {
  PairwiseItem item;
  try {
    item.id = j.at("id").get<std::string>();
    item.article = j.at("article").get<std::string>();
    item.summary_self = j.at("summary_self").get<std::string>();
    item.summary_other = j.at("summary_other").get<std::string>();
    for (const auto& v : j.at("gold_votes")) item.gold_votes.push_back(vote_from_string(v));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("bad item object: ") + e.what());
  }
  item.validate();
  return item;
}

inline std::string items_to_jsonl(const std::vector<PairwiseItem>& items) {
  std::string out;
  for (const PairwiseItem& item : items) out += item_to_json(item).dump() + "\n";
  return out;
}

struct IngestReject {
  int line_no = 0;
  std::string reason;
  std::string raw;
};

struct IngestResult {
  std::vector<PairwiseItem> items;
  std::vector<IngestReject> rejects;
};

// Line-oriented JSONL ingestion. Malformed lines and duplicate ids land in
// the rejects list; the run continues as long as one valid item remains.
inline IngestResult ingest_string(const std::string& text) {
  IngestResult result;
  std::set<std::string> seen;
  int line_no = 0;
  size_t pos = 0;
  while (pos < text.size()) {
    size_t nl = text.find('\n', pos);
    std::string line = text.substr(pos, nl == std::string::npos ? std::string::npos : nl - pos);
    pos = nl == std::string::npos ? text.size() : nl + 1;
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      PairwiseItem item = item_from_json(nlohmann::json::parse(line));
      if (!seen.insert(item.id).second)
        throw FormatError("duplicate id: " + item.id);
      result.items.push_back(std::move(item));
    } catch (const nlohmann::json::exception& e) {
      result.rejects.push_back({line_no, std::string("json parse: ") + e.what(), line});
    } catch (const Error& e) {
      result.rejects.push_back({line_no, e.what(), line});
    }
  }
  if (result.items.empty())
    throw InsufficientDataError("no valid items in dataset (" +
                                std::to_string(result.rejects.size()) + " rejects)");
  return result;
}

inline IngestResult ingest(const std::string& path) { return ingest_string(read_file(path)); }

}  // namespace steerkit
