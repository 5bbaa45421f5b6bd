#pragma once

#include <chrono>
#include <cstdlib>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "httplib.h"
#include "nlohmann/json.hpp"
#include "steerkit/dataset.hpp"
#include "steerkit/errors.hpp"
#include "steerkit/hash.hpp"
#include "steerkit/judging.hpp"

namespace steerkit {

// Wire protocol: POST <endpoint> {"options": [a, b], "prompt": text}
// -> {"choice": a|b, "p_choice": real}. Auth token, when configured, is
// read from a named environment variable and sent as a bearer header.
inline nlohmann::json gold_request_body(const std::string& prompt,
                                        const std::string& option_a,
                                        const std::string& option_b) {
  return {{"options", {option_a, option_b}}, {"prompt", prompt}};
}

inline std::string cassette_key(const std::string& endpoint, const nlohmann::json& body) {
  return hash_hex(endpoint + "\n" + body.dump());
}

struct CassetteEntry {
  std::string request_hash;
  nlohmann::json request;
  nlohmann::json response;
  int64_t timestamp = 0;
};

inline std::string cassette_line(const CassetteEntry& e) {
  nlohmann::json j = {{"request_hash", e.request_hash},
                      {"request", e.request},
                      {"response", e.response},
                      {"timestamp", e.timestamp}};
  return j.dump() + "\n";
}

// JSONL cassette of recorded exchanges, keyed by request hash.
class Cassette {
 public:
  static Cassette load(const std::string& path) {
    Cassette c;
    std::string text = read_file(path);
    size_t pos = 0;
    int line_no = 0;
    while (pos < text.size()) {
      size_t nl = text.find('\n', pos);
      std::string line = text.substr(pos, nl == std::string::npos ? std::string::npos : nl - pos);
      pos = nl == std::string::npos ? text.size() : nl + 1;
      ++line_no;
      if (line.empty()) continue;
      try {
        nlohmann::json j = nlohmann::json::parse(line);
        CassetteEntry e;
        e.request_hash = j.at("request_hash").get<std::string>();
        e.request = j.at("request");
        e.response = j.at("response");
        e.timestamp = j.value("timestamp", int64_t{0});
        c.entries_[e.request_hash] = std::move(e);
      } catch (const nlohmann::json::exception& err) {
        throw FormatError("cassette line " + std::to_string(line_no) + ": " + err.what());
      }
    }
    return c;
  }

  std::optional<nlohmann::json> lookup(const std::string& key) const {
    auto it = entries_.find(key);
    if (it == entries_.end()) return std::nullopt;
    return std::optional<nlohmann::json>(std::in_place, it->second.response);
  }

  size_t size() const { return entries_.size(); }

 private:
  std::map<std::string, CassetteEntry> entries_;
};

enum class GoldMode { LIVE, REPLAY };

struct GoldJudgeClient {
  std::string name;          // judge identity, e.g. "phi"
  std::string endpoint;      // full URL
  std::string cassette_path;
  GoldMode mode = GoldMode::REPLAY;
  std::string auth_token_env;  // env var holding the bearer token (LIVE)
  int max_retries = 3;
  int backoff_ms = 50;
};

namespace detail {

struct ParsedUrl {
  std::string base;  // scheme://host:port
  std::string path;
};

inline ParsedUrl parse_url(const std::string& url) {
  size_t scheme_end = url.find("://");
  if (scheme_end == std::string::npos) throw UsageError("endpoint URL needs a scheme: " + url);
  size_t path_start = url.find('/', scheme_end + 3);
  if (path_start == std::string::npos) return {url, "/"};
  return {url.substr(0, path_start), url.substr(path_start)};
}

inline std::optional<nlohmann::json> live_post(const GoldJudgeClient& client,
                                               const nlohmann::json& body) {
  ParsedUrl url = parse_url(client.endpoint);
  httplib::Client http(url.base);
  http.set_connection_timeout(5, 0);
  http.set_read_timeout(10, 0);
  httplib::Headers headers;
  if (!client.auth_token_env.empty()) {
    if (const char* token = std::getenv(client.auth_token_env.c_str()))
      headers.emplace("Authorization", std::string("Bearer ") + token);
  }
  for (int attempt = 0; attempt <= client.max_retries; ++attempt) {
    if (attempt > 0)
      std::this_thread::sleep_for(std::chrono::milliseconds(client.backoff_ms * attempt));
    auto res = http.Post(url.path, headers, body.dump(), "application/json");
    if (res && res->status == 200) {
      try {
        return nlohmann::json::parse(res->body);
      } catch (const nlohmann::json::exception&) {
        return std::nullopt;  // unparseable counts as failure, no retry value
      }
    }
  }
  return std::nullopt;
}

}  // namespace detail

// Single-exchange entry point. REPLAY never touches the network and treats
// a cache miss as a fatal, incomplete-cassette condition. LIVE retries with
// linear backoff and records successful exchanges via `record`.
inline std::optional<nlohmann::json> gold_exchange(const GoldJudgeClient& client,
                                                   const Cassette* cassette,
                                                   const nlohmann::json& body,
                                                   std::ofstream* record) {
  std::string key = cassette_key(client.endpoint, body);
  if (client.mode == GoldMode::REPLAY) {
    if (!cassette) throw UsageError("REPLAY mode without a cassette");
    auto hit = cassette->lookup(key);
    if (!hit)
      throw TransportError("replay cassette miss for judge " + client.name + " (hash " + key +
                           ")");
    return hit;
  }
  auto response = detail::live_post(client, body);
  if (response && record) {
    CassetteEntry e;
    e.request_hash = key;
    e.request = body;
    e.response = *response;
    e.timestamp = std::chrono::duration_cast<std::chrono::seconds>(
                      std::chrono::system_clock::now().time_since_epoch())
                      .count();
    *record << cassette_line(e);
    record->flush();
  }
  return response;
}

struct GoldFetchStats {
  int items_labeled = 0;
  int items_unlabeled = 0;
  int judge_abstentions = 0;  // order-inconsistent judge/item pairs
};

// Queries every judge in both orders for each item lacking gold votes,
// applies the per-judge positional filter, and fills gold_votes with the
// consistent judge votes. Judges that fail transport or fall to positional
// bias abstain from that item.
inline GoldFetchStats fetch_gold_votes(const std::vector<GoldJudgeClient>& judges,
                                       std::vector<PairwiseItem>& items,
                                       const PromptTemplate& tmpl,
                                       std::ofstream* record = nullptr) {
  if (judges.empty()) throw UsageError("no gold judges configured");
  GoldFetchStats stats;
  std::map<std::string, Cassette> cassettes;
  for (const GoldJudgeClient& judge : judges)
    if (judge.mode == GoldMode::REPLAY && !cassettes.count(judge.cassette_path))
      cassettes.emplace(judge.cassette_path, Cassette::load(judge.cassette_path));

  for (PairwiseItem& item : items) {
    if (!item.gold_votes.empty()) continue;
    std::vector<Vote> votes;
    for (const GoldJudgeClient& judge : judges) {
      const Cassette* cassette =
          judge.mode == GoldMode::REPLAY ? &cassettes.at(judge.cassette_path) : nullptr;
      std::optional<Vote> per_order[2];
      bool transport_ok = true;
      for (Order order : {Order::SELF_FIRST, Order::OTHER_FIRST}) {
        RenderedPrompt rendered = render_prompt(tmpl, item, order);
        std::string opt1(1, '1'), opt2(1, '2');
        nlohmann::json body = gold_request_body(rendered.text, opt1, opt2);
        auto response = gold_exchange(judge, cassette, body, record);
        if (!response) {
          transport_ok = false;
          break;
        }
        std::string choice;
        try {
          choice = response->at("choice").get<std::string>();
        } catch (const nlohmann::json::exception& e) {
          throw FormatError(std::string("bad gold judge response: ") + e.what());
        }
        bool picked_first = choice == opt1;
        if (!picked_first && choice != opt2)
          throw FormatError("gold judge returned unknown choice: " + choice);
        Vote v;
        if (order == Order::SELF_FIRST)
          v = picked_first ? Vote::SELF : Vote::OTHER;
        else
          v = picked_first ? Vote::OTHER : Vote::SELF;
        per_order[order == Order::SELF_FIRST ? 0 : 1] = v;
      }
      if (!transport_ok) {
        ++stats.judge_abstentions;
        continue;
      }
      if (*per_order[0] != *per_order[1]) {
        ++stats.judge_abstentions;  // positional bias, judge abstains
        continue;
      }
      votes.push_back(*per_order[0]);
    }
    if (votes.empty()) {
      ++stats.items_unlabeled;
    } else {
      item.gold_votes = std::move(votes);
      ++stats.items_labeled;
    }
  }
  return stats;
}

}  // namespace steerkit
