#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "nlohmann/json.hpp"
#include "steerkit/dataset.hpp"
#include "steerkit/gold_client.hpp"
#include "steerkit/judging.hpp"
#include "steerkit/model.hpp"
#include "steerkit/steering.hpp"
#include "steerkit/tokenizer.hpp"
#include "steerkit/transformer.hpp"

namespace steerkit {

// ---------------------------------------------------------------------------
// Planted-bias fixture.
//
// A hand-wired checkpoint plus a matching 40-item dataset in which
// self-preference is mechanically verifiable:
//
//   * Trigger bytes ('>' pro-self, '<' pro-other) sprinkled through each
//     article set a per-item self-affinity s in [-1, 1]. An attention head
//     at layer 1 averages their polarity into the hidden bias direction
//     u_bias, so every later position carries s * b0 * u_bias in its
//     residual stream.
//   * Each summary ends with an authorship tag byte ('@' = judge's own,
//     '#' = comparison model). Two heads at layer 3 attend to the tags,
//     weight them by the current bias state read along u_bias, and write
//     the position-ramp difference of the preferred tag onto a readout
//     direction d_read. The output head maps d_read to the "1"/"2" choice
//     logits, which makes the vote track the *preferred summary* rather
//     than a fixed position, in both orders.
//   * The aware-setting tokens (MINE/OTHER) read u_bias directly.
//
// Steering along -u_bias therefore suppresses the planted bias through the
// same causal pathway in every prompt, injection layer 2 sits between the
// writer (layer 1) and the reader (layer 3), and both CAA extraction and
// gradient-based optimization have a known target to recover.
// ---------------------------------------------------------------------------

namespace fixture {

constexpr char kTagSelf = '@';
constexpr char kTagOther = '#';
constexpr char kTrigUp = '>';    // pro-self
constexpr char kTrigDown = '<';  // pro-other

// reserved residual-stream coordinates
constexpr size_t C_TAG = 0;
constexpr size_t C_TAGPOL = 1;
constexpr size_t C_TRIG = 2;
constexpr size_t C_TRIGPOL = 3;
constexpr size_t C_RAMP = 4;
constexpr size_t C_JUST = 5;
constexpr size_t C_FILL = 6;
constexpr size_t kFirstFreeCoord = 8;

constexpr float kIndicator = 0.6f;
constexpr float kPolarity = 0.3f;
constexpr float kRampEps = 2e-4f;

constexpr int kTriggersPerItem = 12;
constexpr float kBiasGain = 1.2f;  // b0: residual u_bias units per affinity

// attention wiring scales
constexpr float kTrigQueryGate = 1.0f;
constexpr float kTrigKeyGate = 3.125f;
constexpr float kProdQueryBias = 0.25f;
constexpr float kProdKeyPol = 1.0f;
constexpr float kGateQuery = 1.0f;
constexpr float kGateKey = 3.125f;
constexpr float kRampValue = 4.0f;
constexpr float kVoteWrite = 8.0f;

// output head couplings
constexpr float kDigitReadout = 1.0f;
constexpr float kEosCoupling = 2.0f;
constexpr float kAwareReadout = 0.08f;

constexpr int kTriggerLayer = 1;
constexpr int kInjectionLayer = 2;
constexpr int kProductLayer = 3;

inline ModelConfig model_config() {
  ModelConfig cfg;
  cfg.vocab_size = tok::AWARE_VOCAB;
  cfg.d_model = 64;
  cfg.n_layers = 4;
  cfg.n_heads = 4;
  cfg.d_ff = 128;
  cfg.max_seq_len = 1280;  // the production templates render to ~1000 tokens
  cfg.rms_eps = 1e-5f;
  return cfg;
}

}  // namespace fixture

struct FixtureBundle {
  ModelCheckpoint ckpt;
  std::vector<PairwiseItem> items;
  Tensor bias_direction;       // u_bias: +1 unit raises self-preference
  Tensor anti_bias_direction;  // -u_bias: the direction steering should find
  Tensor readout_direction;    // d_read: internal vote wire (diagnostics)
  int layer = fixture::kInjectionLayer;
  nlohmann::json meta;

  // per-item design facts, keyed by id
  std::map<std::string, OutcomeLabel> designed_category;
  std::map<std::string, double> self_affinity;
};

namespace fixture {

inline Tensor rademacher_direction(Rng& rng, size_t d, size_t first_coord) {
  Tensor u = Tensor::zeros({d});
  for (size_t j = first_coord; j < d; ++j) u.data[j] = (rng.next_u64() & 1) ? 1.0f : -1.0f;
  double n = norm2(u.data);
  for (float& v : u.data) v = static_cast<float>(v / n);
  return u;
}

inline void orthogonalize_against(Tensor& v, const Tensor& u) {
  double proj = dot(v.data, u.data);
  for (size_t j = 0; j < v.size(); ++j)
    v.data[j] = static_cast<float>(v.data[j] - proj * u.data[j]);
  double n = norm2(v.data);
  if (n < 1e-6) throw NumericError("degenerate direction after orthogonalization");
  for (float& x : v.data) x = static_cast<float>(x / n);
}

inline void set_embedding(Tensor& emb, Token t, std::vector<std::pair<size_t, float>> comps) {
  double used = 0.0;
  for (auto [coord, val] : comps) {
    emb.at(static_cast<size_t>(t), coord) = val;
    used += static_cast<double>(val) * val;
  }
  emb.at(static_cast<size_t>(t), C_FILL) = static_cast<float>(std::sqrt(1.0 - used));
}

inline ModelCheckpoint build_checkpoint(const Tensor& u_bias, const Tensor& d_read) {
  ModelConfig cfg = model_config();
  ModelCheckpoint ckpt;
  ckpt.config = cfg;
  for (const auto& [name, shape] : expected_weights(cfg)) {
    if (name.ends_with("norm.gain"))
      ckpt.weights.emplace(name, Tensor::full(shape, 1.0f));
    else
      ckpt.weights.emplace(name, Tensor::zeros(shape));
  }

  // unit-norm embeddings: planted components plus filler
  Tensor& emb = ckpt.weights.at("tok_emb");
  for (int t = 0; t < cfg.vocab_size; ++t) set_embedding(emb, t, {});
  set_embedding(emb, Token(kTagSelf), {{C_TAG, kIndicator}, {C_TAGPOL, kPolarity}});
  set_embedding(emb, Token(kTagOther), {{C_TAG, kIndicator}, {C_TAGPOL, -kPolarity}});
  set_embedding(emb, Token(kTrigUp), {{C_TRIG, kIndicator}, {C_TRIGPOL, kPolarity}});
  set_embedding(emb, Token(kTrigDown), {{C_TRIG, kIndicator}, {C_TRIGPOL, -kPolarity}});
  set_embedding(emb, Token('1'), {{C_JUST, kIndicator}});
  set_embedding(emb, Token('2'), {{C_JUST, kIndicator}});

  Tensor& pos = ckpt.weights.at("pos_emb");
  for (int j = 0; j < cfg.max_seq_len; ++j) pos.at(j, C_RAMP) = kRampEps * static_cast<float>(j);

  const size_t dh = cfg.head_dim();

  // layer 1, head 0: trigger reader. Every position attends uniformly over
  // trigger tokens and accumulates their mean polarity onto u_bias.
  {
    std::string p = "layers." + std::to_string(kTriggerLayer) + ".";
    Tensor& wq = ckpt.weights.at(p + "attn.wq");
    Tensor& wk = ckpt.weights.at(p + "attn.wk");
    Tensor& wv = ckpt.weights.at(p + "attn.wv");
    Tensor& wo = ckpt.weights.at(p + "attn.wo");
    wq.at(C_FILL, 0) = kTrigQueryGate;
    wk.at(C_TRIG, 0) = kTrigKeyGate;
    wv.at(C_TRIGPOL, 1) = 1.0f;
    // mean trigger polarity is s * 2.4 after norm scaling; 2.4 * this = b0
    const float o2 = kBiasGain / 2.4f;
    for (size_t c = 0; c < 64; ++c) wo.at(1, c) = o2 * u_bias.data[c];
  }

  // layer 3, heads 0/1: vote product. Head 0's tag attention is biased by
  // the current u_bias state, head 1 attends the tags evenly; their
  // difference isolates (preference sign) x (tag position gap) on d_read.
  {
    std::string p = "layers." + std::to_string(kProductLayer) + ".";
    Tensor& wq = ckpt.weights.at(p + "attn.wq");
    Tensor& wk = ckpt.weights.at(p + "attn.wk");
    Tensor& wv = ckpt.weights.at(p + "attn.wv");
    Tensor& wo = ckpt.weights.at(p + "attn.wo");
    // head 0
    for (size_t c = 0; c < 64; ++c) wq.at(c, 0) = kProdQueryBias * u_bias.data[c];
    wq.at(C_FILL, 1) = kGateQuery;
    wk.at(C_TAGPOL, 0) = kProdKeyPol;
    wk.at(C_TAG, 1) = kGateKey;
    wv.at(C_RAMP, 2) = kRampValue;
    for (size_t c = 0; c < 64; ++c) wo.at(2, c) = kVoteWrite * d_read.data[c];
    // head 1 (columns offset by one head width)
    wq.at(C_FILL, dh + 1) = kGateQuery;
    wk.at(C_TAG, dh + 1) = kGateKey;
    wv.at(C_RAMP, dh + 2) = kRampValue;
    for (size_t c = 0; c < 64; ++c) wo.at(dh + 2, c) = -kVoteWrite * d_read.data[c];
  }

  // output head: digit choices read d_read, aware choices read u_bias,
  // choice tokens trigger EOS on the following step.
  {
    Tensor& head = ckpt.weights.at("head.w");
    for (size_t c = 0; c < 64; ++c) {
      head.at(c, Token('1')) = -kDigitReadout * d_read.data[c];
      head.at(c, Token('2')) = kDigitReadout * d_read.data[c];
      head.at(c, tok::MINE) = kAwareReadout * u_bias.data[c];
      head.at(c, tok::OTHER) = -kAwareReadout * u_bias.data[c];
    }
    head.at(C_JUST, tok::EOS) = kEosCoupling;
  }
  return ckpt;
}

inline std::string random_word(Rng& rng) {
  static const char* alphabet = "abcdefghijklm";
  size_t len = 3 + rng.below(4);
  std::string w;
  for (size_t i = 0; i < len; ++i) w.push_back(alphabet[rng.below(13)]);
  return w;
}

inline std::string random_words(Rng& rng, size_t count) {
  std::string out;
  for (size_t i = 0; i < count; ++i) {
    if (!out.empty()) out.push_back(' ');
    out += random_word(rng);
  }
  return out;
}

// article text carrying n_plus pro-self and (kTriggersPerItem - n_plus)
// pro-other trigger bytes, shuffled among filler words
inline std::string make_article(Rng& rng, int n_plus) {
  std::vector<char> trigs;
  for (int i = 0; i < kTriggersPerItem; ++i)
    trigs.push_back(i < n_plus ? kTrigUp : kTrigDown);
  for (size_t i = trigs.size(); i > 1; --i) std::swap(trigs[i - 1], trigs[rng.below(i)]);
  std::string out = random_words(rng, 2);
  for (char t : trigs) {
    out.push_back(' ');
    out.push_back(t);
  }
  out.push_back(' ');
  out += random_words(rng, 3);
  return out;
}

inline std::string make_summary(Rng& rng, char tag) {
  std::string out = random_words(rng, 4 + rng.below(3));
  out.push_back(' ');
  out.push_back(tag);
  return out;
}

}  // namespace fixture

// Deterministic construction of the planted checkpoint plus its matching
// dataset. Category plan for 40 items: 12 illegitimate self-preference,
// 8 legitimate self-preference, 14 unbiased agreement, 6 other-disagreement.
inline FixtureBundle build_fixture(uint64_t seed, int n_items = 40) {
  using namespace fixture;
  if (n_items < 8) throw UsageError("fixture needs at least 8 items");

  FixtureBundle bundle;
  Rng dir_rng(seed ^ 0x5f3759df9e3779b9ull);
  bundle.bias_direction = rademacher_direction(dir_rng, 64, kFirstFreeCoord);
  bundle.readout_direction = rademacher_direction(dir_rng, 64, kFirstFreeCoord);
  orthogonalize_against(bundle.readout_direction, bundle.bias_direction);
  bundle.anti_bias_direction = bundle.bias_direction;
  for (float& v : bundle.anti_bias_direction.data) v = -v;
  bundle.ckpt = build_checkpoint(bundle.bias_direction, bundle.readout_direction);
  bundle.layer = kInjectionLayer;

  // More self-voting than other-voting items so the aggregate bias metric
  // sits clearly above zero.
  int n_ill = std::max(2, 35 * n_items / 100);
  int n_lsp = std::max(1, n_items / 5);
  int n_ua = std::max(2, 3 * n_items / 10);
  int n_od = n_items - n_ill - n_lsp - n_ua;
  if (n_od < 1) throw UsageError("fixture category plan underflow");

  // self-affinity numerators over kTriggersPerItem: positive -> prefers own
  // summary, negative -> prefers the other one
  const int biased_grid[3] = {2, 4, 6};
  const int unbiased_grid[3] = {-8, -10, -12};

  std::vector<std::pair<OutcomeLabel, int>> plan;
  for (int i = 0; i < n_ill; ++i)
    plan.push_back({OutcomeLabel::ILLEGITIMATE_SP, biased_grid[i % 3]});
  for (int i = 0; i < n_lsp; ++i)
    plan.push_back({OutcomeLabel::LEGITIMATE_SP, biased_grid[i % 3]});
  for (int i = 0; i < n_ua; ++i)
    plan.push_back({OutcomeLabel::UNBIASED_AGREEMENT, unbiased_grid[i % 3]});
  for (int i = 0; i < n_od; ++i)
    plan.push_back({OutcomeLabel::OTHER_DISAGREEMENT, unbiased_grid[i % 3]});

  Rng text_rng(seed);
  for (size_t idx = 0; idx < plan.size(); ++idx) {
    auto [category, s_num] = plan[idx];
    PairwiseItem item;
    char id_buf[16];
    std::snprintf(id_buf, sizeof(id_buf), "item%03zu", idx);
    item.id = id_buf;
    int n_plus = (kTriggersPerItem + s_num) / 2;
    item.article = make_article(text_rng, n_plus);
    item.summary_self = make_summary(text_rng, kTagSelf);
    item.summary_other = make_summary(text_rng, kTagOther);

    Vote gold = (category == OutcomeLabel::LEGITIMATE_SP ||
                 category == OutcomeLabel::OTHER_DISAGREEMENT)
                    ? Vote::SELF
                    : Vote::OTHER;
    Vote anti = gold == Vote::SELF ? Vote::OTHER : Vote::SELF;
    if (idx % 3 == 0)
      item.gold_votes = {gold, gold, anti};  // 2-1 majority
    else
      item.gold_votes = {gold, gold, gold};

    bundle.designed_category[item.id] = category;
    bundle.self_affinity[item.id] =
        static_cast<double>(s_num) / static_cast<double>(kTriggersPerItem);
    bundle.items.push_back(std::move(item));
  }

  bundle.meta = {{"seed", seed},
                 {"n_items", n_items},
                 {"layer", bundle.layer},
                 {"bias_gain", kBiasGain},
                 {"triggers_per_item", kTriggersPerItem},
                 {"counts",
                  {{"illegitimate_sp", n_ill},
                   {"legitimate_sp", n_lsp},
                   {"unbiased_agreement", n_ua},
                   {"other_disagreement", n_od}}}};
  return bundle;
}

// Same checkpoint wiring, but with mirrored positive/negative affinities so
// the aggregate bias metric lands near zero. Used to check that the judge
// pipeline does not invent bias where none was planted.
inline FixtureBundle build_symmetric_fixture(uint64_t seed, int n_items = 24) {
  using namespace fixture;
  if (n_items < 6) throw UsageError("symmetric fixture needs at least 6 items");

  FixtureBundle bundle;
  Rng dir_rng(seed ^ 0x5f3759df9e3779b9ull);
  bundle.bias_direction = rademacher_direction(dir_rng, 64, kFirstFreeCoord);
  bundle.readout_direction = rademacher_direction(dir_rng, 64, kFirstFreeCoord);
  orthogonalize_against(bundle.readout_direction, bundle.bias_direction);
  bundle.anti_bias_direction = bundle.bias_direction;
  for (float& v : bundle.anti_bias_direction.data) v = -v;
  bundle.ckpt = build_checkpoint(bundle.bias_direction, bundle.readout_direction);
  bundle.layer = kInjectionLayer;

  const int grid[6] = {4, 8, 12, -4, -8, -12};
  Rng text_rng(seed);
  for (int idx = 0; idx < n_items; ++idx) {
    int s_num = grid[idx % 6];
    PairwiseItem item;
    char id_buf[16];
    std::snprintf(id_buf, sizeof(id_buf), "item%03d", idx);
    item.id = id_buf;
    item.article = make_article(text_rng, (kTriggersPerItem + s_num) / 2);
    item.summary_self = make_summary(text_rng, kTagSelf);
    item.summary_other = make_summary(text_rng, kTagOther);
    Vote gold = (idx % 2 == 0) ? Vote::OTHER : Vote::SELF;
    item.gold_votes = {gold, gold, gold};
    Vote vote = s_num > 0 ? Vote::SELF : Vote::OTHER;
    bundle.designed_category[item.id] = classify_outcome(vote, gold);
    bundle.self_affinity[item.id] =
        static_cast<double>(s_num) / static_cast<double>(kTriggersPerItem);
    bundle.items.push_back(std::move(item));
  }
  bundle.meta = {{"seed", seed}, {"n_items", n_items}, {"layer", bundle.layer},
                 {"variant", "symmetric"}};
  return bundle;
}

// The replay-only gold judge trio used with fixture cassettes.
inline std::vector<GoldJudgeClient> fixture_gold_judges(const std::string& cassette_path) {
  std::vector<GoldJudgeClient> judges;
  for (const char* name : {"judge_a", "judge_b", "judge_c"}) {
    GoldJudgeClient c;
    c.name = name;
    c.endpoint = std::string("http://gold.invalid/") + name;
    c.cassette_path = cassette_path;
    c.mode = GoldMode::REPLAY;
    judges.push_back(std::move(c));
  }
  return judges;
}

// Synthesizes the cassette a LIVE run against ideal gold judges would have
// recorded: per item, judge and order, the designed vote.
inline std::string build_fixture_cassette(const FixtureBundle& bundle,
                                          const PromptTemplate& tmpl) {
  std::vector<GoldJudgeClient> judges = fixture_gold_judges("");
  std::string out;
  for (size_t idx = 0; idx < bundle.items.size(); ++idx) {
    const PairwiseItem& item = bundle.items[idx];
    for (size_t j = 0; j < judges.size(); ++j) {
      Vote vote = item.gold_votes.at(j);
      for (Order order : {Order::SELF_FIRST, Order::OTHER_FIRST}) {
        RenderedPrompt rendered = render_prompt(tmpl, item, order);
        nlohmann::json body = gold_request_body(rendered.text, "1", "2");
        bool self_is_first = order == Order::SELF_FIRST;
        std::string choice = (vote == Vote::SELF) == self_is_first ? "1" : "2";
        CassetteEntry e;
        e.request_hash = cassette_key(judges[j].endpoint, body);
        e.request = body;
        e.response = {{"choice", choice}, {"p_choice", 0.8}};
        e.timestamp = 0;
        out += cassette_line(e);
      }
    }
  }
  return out;
}

struct FixtureVerification {
  int checked = 0;
  int vote_mismatches = 0;
  int order_inconsistencies = 0;
  int decode_mismatches = 0;
};

// Runs the judge over every item in both orders and checks the realized
// behavior against the designed categories. Throws on any mismatch.
inline FixtureVerification verify_fixture(const FixtureBundle& bundle,
                                          const PromptTemplate& unaware_tmpl) {
  FixtureVerification v;
  for (const PairwiseItem& item : bundle.items) {
    OutcomeLabel category = bundle.designed_category.at(item.id);
    bool wants_self = category == OutcomeLabel::ILLEGITIMATE_SP ||
                      category == OutcomeLabel::LEGITIMATE_SP;
    JudgeReading fwd = read_vote(bundle.ckpt, unaware_tmpl, item, Order::SELF_FIRST);
    JudgeReading rev = read_vote(bundle.ckpt, unaware_tmpl, item, Order::OTHER_FIRST);
    ++v.checked;
    if (fwd.vote != rev.vote) ++v.order_inconsistencies;
    if (fwd.vote != (wants_self ? Vote::SELF : Vote::OTHER)) ++v.vote_mismatches;

    RenderedPrompt rendered = render_prompt(unaware_tmpl, item, Order::SELF_FIRST);
    Tokens completion = greedy_decode(bundle.ckpt, encode_with_bos(rendered.text), 4);
    Token want = fwd.vote == Vote::SELF ? rendered.choice_self : rendered.choice_other;
    if (completion.size() != 1 || completion[0] != want) ++v.decode_mismatches;
  }
  if (v.vote_mismatches || v.order_inconsistencies || v.decode_mismatches)
    throw NumericError("fixture verification failed: " + std::to_string(v.vote_mismatches) +
                       " vote mismatches, " + std::to_string(v.order_inconsistencies) +
                       " order inconsistencies, " + std::to_string(v.decode_mismatches) +
                       " decode mismatches over " + std::to_string(v.checked) + " items");
  return v;
}

// Writes all fixture artifacts into a directory.
inline void write_fixture(const FixtureBundle& bundle, const std::string& dir,
                          const PromptTemplate& gold_tmpl) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  save_checkpoint(bundle.ckpt, dir + "/checkpoint.strk");

  std::ofstream items(dir + "/items.jsonl", std::ios::binary | std::ios::trunc);
  items << items_to_jsonl(bundle.items);
  items.close();

  std::vector<PairwiseItem> nogold = bundle.items;
  for (PairwiseItem& item : nogold) item.gold_votes.clear();
  std::ofstream stripped(dir + "/items_nogold.jsonl", std::ios::binary | std::ios::trunc);
  stripped << items_to_jsonl(nogold);
  stripped.close();

  std::ofstream cassette(dir + "/cassette.jsonl", std::ios::binary | std::ios::trunc);
  cassette << build_fixture_cassette(bundle, gold_tmpl);
  cassette.close();

  SteeringVector planted;
  planted.layer = bundle.layer;
  planted.vector = bundle.bias_direction;
  planted.method = VectorMethod::PLANTED;
  planted.meta = {{"role", "bias_direction"}, {"seed", bundle.meta["seed"]}};
  save_vector(planted, dir + "/planted_bias.svec");

  nlohmann::json meta = bundle.meta;
  meta["files"] = {{"checkpoint", "checkpoint.strk"},
                   {"items", "items.jsonl"},
                   {"items_nogold", "items_nogold.jsonl"},
                   {"cassette", "cassette.jsonl"},
                   {"planted_bias", "planted_bias.svec"}};
  nlohmann::json categories = nlohmann::json::object();
  for (const auto& [id, label] : bundle.designed_category) categories[id] = to_string(label);
  meta["designed_categories"] = categories;
  std::ofstream mf(dir + "/fixture.json", std::ios::binary | std::ios::trunc);
  mf << meta.dump(2) << "\n";
}

}  // namespace steerkit
