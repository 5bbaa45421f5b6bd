#pragma once

#include <cstdlib>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "steerkit/errors.hpp"
#include "steerkit/hash.hpp"
#include "steerkit/tokenizer.hpp"
#include "steerkit/transformer.hpp"

namespace steerkit {

enum class Vote { SELF, OTHER };
enum class Order { SELF_FIRST, OTHER_FIRST };

inline std::string to_string(Vote v) { return v == Vote::SELF ? "SELF" : "OTHER"; }
inline std::string to_string(Order o) {
  return o == Order::SELF_FIRST ? "SELF_FIRST" : "OTHER_FIRST";
}
inline Vote vote_from_string(const std::string& s) {
  if (s == "SELF") return Vote::SELF;
  if (s == "OTHER") return Vote::OTHER;
  throw FormatError("invalid vote: " + s);
}

// Outcome of one judged item relative to the gold majority. The usual
// taxonomy names three cells; the fourth (vote OTHER, gold SELF) is kept
// and reported as OTHER_DISAGREEMENT so no item silently vanishes.
enum class OutcomeLabel {
  ILLEGITIMATE_SP,
  LEGITIMATE_SP,
  UNBIASED_AGREEMENT,
  OTHER_DISAGREEMENT,
};

inline std::string to_string(OutcomeLabel o) {
  switch (o) {
    case OutcomeLabel::ILLEGITIMATE_SP: return "ILLEGITIMATE_SP";
    case OutcomeLabel::LEGITIMATE_SP: return "LEGITIMATE_SP";
    case OutcomeLabel::UNBIASED_AGREEMENT: return "UNBIASED_AGREEMENT";
    case OutcomeLabel::OTHER_DISAGREEMENT: return "OTHER_DISAGREEMENT";
  }
  throw UsageError("bad outcome label");
}

struct PairwiseItem {
  std::string id;
  std::string article;
  std::string summary_self;   // written by the judged model
  std::string summary_other;  // written by the comparison model
  std::vector<Vote> gold_votes;

  void validate() const {
    if (id.empty()) throw FormatError("item with empty id");
    if (summary_self.empty() || summary_other.empty())
      throw FormatError("item " + id + " has an empty summary");
  }
};

struct PromptTemplate {
  enum class Choice { DIGITS, MINE_OTHER, NONE };
  std::string name;
  std::string system;
  std::string user;
  Choice choice = Choice::DIGITS;
};

struct RenderedPrompt {
  std::string text;
  Token choice_self = -1;
  Token choice_other = -1;
};

namespace detail {

inline bool is_placeholder_char(char c) {
  return (c >= 'a' && c <= 'z') || (c >= '0' && c <= '9') || c == '_';
}

// Single-pass substitution: placeholders are located in the template text
// only, so substituted values are never rescanned.
inline std::string substitute(const std::string& text,
                              const std::map<std::string, std::string>& values) {
  std::string out;
  out.reserve(text.size());
  size_t i = 0;
  while (i < text.size()) {
    if (text[i] != '{') {
      out.push_back(text[i++]);
      continue;
    }
    size_t j = i + 1;
    while (j < text.size() && is_placeholder_char(text[j])) ++j;
    if (j < text.size() && text[j] == '}' && j > i + 1) {
      std::string name = text.substr(i + 1, j - i - 1);
      auto it = values.find(name);
      if (it == values.end()) throw TemplateError("unresolved placeholder: {" + name + "}");
      out += it->second;
      i = j + 1;
    } else {
      out.push_back(text[i++]);
    }
  }
  return out;
}

}  // namespace detail

// Byte-exact placeholder substitution. Returns the prompt text plus the
// choice token that maps to SELF / OTHER for the given ordering.
inline RenderedPrompt render_prompt(const PromptTemplate& t, const PairwiseItem& item,
                                    Order order) {
  std::map<std::string, std::string> values;
  values["article"] = item.article;
  values["summary1"] = order == Order::SELF_FIRST ? item.summary_self : item.summary_other;
  values["summary2"] = order == Order::SELF_FIRST ? item.summary_other : item.summary_self;
  values["who1"] = order == Order::SELF_FIRST ? "Your" : "Other Model's";
  values["who2"] = order == Order::SELF_FIRST ? "Other Model's" : "Your";

  RenderedPrompt out;
  std::string system = detail::substitute(t.system, values);
  std::string user = detail::substitute(t.user, values);
  out.text = system.empty() ? user : system + "\n\n" + user;

  switch (t.choice) {
    case PromptTemplate::Choice::DIGITS:
      out.choice_self = order == Order::SELF_FIRST ? Token('1') : Token('2');
      out.choice_other = order == Order::SELF_FIRST ? Token('2') : Token('1');
      break;
    case PromptTemplate::Choice::MINE_OTHER:
      out.choice_self = tok::MINE;
      out.choice_other = tok::OTHER;
      break;
    case PromptTemplate::Choice::NONE:
      break;
  }
  return out;
}

struct JudgeReading {
  std::string item_id;
  Order order = Order::SELF_FIRST;
  double p_self = 0.0;
  double p_other = 0.0;
  Vote vote = Vote::SELF;
};

inline JudgeReading read_vote(const ModelCheckpoint& ckpt, const PromptTemplate& t,
                              const PairwiseItem& item, Order order,
                              const SteeringApplication* steer = nullptr) {
  if (t.choice == PromptTemplate::Choice::NONE)
    throw UsageError("template " + t.name + " has no choice tokens");
  RenderedPrompt rendered = render_prompt(t, item, order);
  Tokens prompt = encode_with_bos(rendered.text);
  auto [p_first, p_second] =
      choice_probability(ckpt, prompt, rendered.choice_self, rendered.choice_other, steer);
  JudgeReading reading;
  reading.item_id = item.id;
  reading.order = order;
  reading.p_self = p_first;
  reading.p_other = p_second;
  if (reading.p_self > reading.p_other) {
    reading.vote = Vote::SELF;
  } else if (reading.p_self < reading.p_other) {
    reading.vote = Vote::OTHER;
  } else {
    // exact tie: take whatever sits in position 1
    reading.vote = order == Order::SELF_FIRST ? Vote::SELF : Vote::OTHER;
  }
  return reading;
}

struct ConsistentReading {
  std::string item_id;
  Vote vote = Vote::SELF;
  double p_self = 0.0;  // averaged over the two orders
};

// Double-order positional filter: keep only items whose vote is the same
// in both orders; p_self is averaged over the orders.
inline std::optional<ConsistentReading> positional_filter(const JudgeReading& fwd,
                                                          const JudgeReading& rev) {
  if (fwd.item_id != rev.item_id)
    throw UsageError("positional_filter on different items: " + fwd.item_id + " vs " +
                     rev.item_id);
  if (fwd.order == rev.order) throw UsageError("positional_filter needs both orders");
  if (fwd.vote != rev.vote) return std::nullopt;
  return ConsistentReading{fwd.item_id, fwd.vote, 0.5 * (fwd.p_self + rev.p_self)};
}

// mean(P(self) - P(other)) over retained readings; in [-1, 1].
inline double bias_metric(const std::vector<ConsistentReading>& readings) {
  if (readings.empty()) throw InsufficientDataError("bias_metric over empty readings");
  double sum = 0.0;
  for (const ConsistentReading& r : readings) sum += r.p_self - (1.0 - r.p_self);
  return sum / static_cast<double>(readings.size());
}

// Strict majority of the gold votes; exact tie discards the item.
inline std::optional<Vote> gold_majority(const PairwiseItem& item) {
  if (item.gold_votes.empty()) throw InsufficientDataError("item " + item.id + " has no gold votes");
  int self_count = 0;
  for (Vote v : item.gold_votes) self_count += (v == Vote::SELF) ? 1 : 0;
  int other_count = static_cast<int>(item.gold_votes.size()) - self_count;
  if (self_count > other_count) return Vote::SELF;
  if (other_count > self_count) return Vote::OTHER;
  return std::nullopt;
}

// Fraction of non-tie items whose gold majority prefers the judged model's
// own summary (the impartial reference mean).
inline double gold_score(const std::vector<PairwiseItem>& items) {
  int self_count = 0, counted = 0;
  for (const PairwiseItem& item : items) {
    auto maj = gold_majority(item);
    if (!maj) continue;
    ++counted;
    if (*maj == Vote::SELF) ++self_count;
  }
  if (counted == 0) throw InsufficientDataError("all items gold-tied");
  return static_cast<double>(self_count) / counted;
}

inline OutcomeLabel classify_outcome(Vote vote, Vote gold) {
  if (vote == Vote::SELF) {
    return gold == Vote::OTHER ? OutcomeLabel::ILLEGITIMATE_SP : OutcomeLabel::LEGITIMATE_SP;
  }
  return gold == Vote::OTHER ? OutcomeLabel::UNBIASED_AGREEMENT : OutcomeLabel::OTHER_DISAGREEMENT;
}

inline std::map<std::string, OutcomeLabel> partition_outcomes(
    const std::map<std::string, Vote>& votes, const std::map<std::string, Vote>& golds) {
  if (votes.size() != golds.size())
    throw UsageError("partition_outcomes: vote/gold coverage differs");
  std::map<std::string, OutcomeLabel> out;
  for (const auto& [id, vote] : votes) {
    auto it = golds.find(id);
    if (it == golds.end()) throw UsageError("partition_outcomes: no gold for item " + id);
    out.emplace(id, classify_outcome(vote, it->second));
  }
  return out;
}

// Template assets. The four production templates are byte-exact copies of
// the published prompts; the toy_* variants are restricted-alphabet
// equivalents for the self-contained fixture models.
inline std::string default_asset_dir() {
  if (const char* env = std::getenv("STEERKIT_ASSETS")) return env;
#ifdef STEERKIT_SOURCE_ASSET_DIR
  return STEERKIT_SOURCE_ASSET_DIR;
#else
  return "assets";
#endif
}

inline std::map<std::string, PromptTemplate> load_templates(const std::string& asset_dir) {
  auto read = [&](const std::string& rel) { return read_file(asset_dir + "/prompts/" + rel); };
  std::map<std::string, PromptTemplate> out;
  std::string unaware_user = read("unaware.user.txt");
  out["unaware"] = {"unaware", read("unaware.system.txt"), unaware_user,
                    PromptTemplate::Choice::DIGITS};
  out["aware"] = {"aware", read("aware.system.txt"), read("aware.user.txt"),
                  PromptTemplate::Choice::MINE_OTHER};
  out["summary_gen"] = {"summary_gen", read("summary_gen.system.txt"),
                        read("summary_gen.user.txt"), PromptTemplate::Choice::NONE};
  // The published baseline intervention replaces only the system prompt;
  // the pairwise user prompt is the unaware one.
  out["prompt_baseline"] = {"prompt_baseline", read("prompt_baseline.system.txt"), unaware_user,
                            PromptTemplate::Choice::DIGITS};
  out["toy_unaware"] = {"toy_unaware", "", read("toy_unaware.user.txt"),
                        PromptTemplate::Choice::DIGITS};
  out["toy_aware"] = {"toy_aware", "", read("toy_aware.user.txt"),
                      PromptTemplate::Choice::MINE_OTHER};
  return out;
}

inline const PromptTemplate& get_template(const std::map<std::string, PromptTemplate>& templates,
                                          const std::string& name) {
  auto it = templates.find(name);
  if (it == templates.end()) throw UsageError("unknown template: " + name);
  return it->second;
}

}  // namespace steerkit
