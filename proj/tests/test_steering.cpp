#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>

#include "steerkit/model.hpp"
#include "steerkit/steering.hpp"

using namespace steerkit;

namespace {

ModelConfig small_config() {
  ModelConfig cfg;
  cfg.vocab_size = 64;
  cfg.d_model = 16;
  cfg.n_layers = 3;
  cfg.n_heads = 2;
  cfg.d_ff = 32;
  cfg.max_seq_len = 32;
  return cfg;
}

std::vector<ContrastiveExample> random_examples(Rng& rng, int per_polarity, int vocab,
                                                int base_id = 0) {
  std::vector<ContrastiveExample> out;
  for (int i = 0; i < 2 * per_polarity; ++i) {
    ContrastiveExample ex;
    ex.id = base_id + i;
    ex.polarity = (i < per_polarity) ? Polarity::POSITIVE : Polarity::NEGATIVE;
    size_t plen = 4 + rng.below(8);
    for (size_t j = 0; j < plen; ++j) ex.prompt.push_back(static_cast<Token>(rng.below(vocab)));
    size_t clen = 1 + rng.below(3);
    for (size_t j = 0; j < clen; ++j)
      ex.completion.push_back(static_cast<Token>(rng.below(vocab)));
    ex.provenance = "synthetic";
    out.push_back(std::move(ex));
  }
  return out;
}

Tensor random_unit(Rng& rng, size_t d) {
  Tensor u = rng.normal_tensor({d}, 1.0);
  double n = norm2(u.data);
  for (float& v : u.data) v = static_cast<float>(v / n);
  return u;
}

// Brute-force reduction oracle: double-precision two-pass class means.
Tensor combine_oracle(const std::vector<std::pair<Polarity, Tensor>>& means) {
  size_t d = means.front().second.size();
  std::vector<double> pos(d, 0.0), neg(d, 0.0);
  size_t n_pos = 0, n_neg = 0;
  for (const auto& [pol, m] : means) {
    auto& acc = pol == Polarity::POSITIVE ? pos : neg;
    for (size_t j = 0; j < d; ++j) acc[j] += m.data[j];
    (pol == Polarity::POSITIVE ? n_pos : n_neg)++;
  }
  Tensor out = Tensor::zeros({d});
  for (size_t j = 0; j < d; ++j)
    out.data[j] = static_cast<float>(pos[j] / n_pos - neg[j] / n_neg);
  return out;
}

}  // namespace

TEST(CombineClassMeans, TwoConstantExamples) {
  Tensor u = Tensor::row({1, 2, 3});
  Tensor w = Tensor::row({0.5, -1, 4});
  Tensor v = combine_class_means({{0, Polarity::POSITIVE, u}, {1, Polarity::NEGATIVE, w}});
  EXPECT_FLOAT_EQ(v.data[0], 0.5f);
  EXPECT_FLOAT_EQ(v.data[1], 3.0f);
  EXPECT_FLOAT_EQ(v.data[2], -1.0f);
}

TEST(CombineClassMeans, EmptyPolarityClassThrows) {
  Tensor u = Tensor::row({1, 2});
  EXPECT_THROW(combine_class_means({{0, Polarity::POSITIVE, u}}), InsufficientDataError);
  EXPECT_THROW(combine_class_means({}), InsufficientDataError);
}

TEST(ExtractCaa, IdenticalClassesGiveZeroVector) {
  ModelCheckpoint ckpt = random_checkpoint(small_config(), 31);
  Rng rng(5);
  auto examples = random_examples(rng, 4, 64);
  // mirror every positive as a negative with the same tokens
  std::vector<ContrastiveExample> mirrored;
  int id = 0;
  for (const auto& ex : examples) {
    ContrastiveExample a = ex;
    a.id = id++;
    a.polarity = Polarity::POSITIVE;
    ContrastiveExample b = ex;
    b.id = id++;
    b.polarity = Polarity::NEGATIVE;
    mirrored.push_back(a);
    mirrored.push_back(b);
  }
  SteeringVector v = extract_caa(ckpt, mirrored, 1);
  for (float x : v.vector.data) EXPECT_FLOAT_EQ(x, 0.0f);
}

TEST(ExtractCaa, PlantedDirectionRecovery) {
  // Contrastive sets built by injecting +/-u at the target layer during
  // capture; extraction must point back along u.
  ModelCheckpoint ckpt = random_checkpoint(small_config(), 33);
  Rng rng(17);
  Tensor u = random_unit(rng, 16);
  auto examples = random_examples(rng, 8, 64);
  SteeringVector v = extract_caa(ckpt, examples, 1, 10, InjectionProbe{u, 1.0f});
  EXPECT_GE(cosine(v.vector, u), 0.99);
}

TEST(ExtractCaa, PolaritySwapNegatesExactly) {
  ModelCheckpoint ckpt = random_checkpoint(small_config(), 35);
  Rng rng(19);
  auto examples = random_examples(rng, 3, 64);
  SteeringVector v = extract_caa(ckpt, examples, 2);
  auto swapped = examples;
  for (auto& ex : swapped)
    ex.polarity = ex.polarity == Polarity::POSITIVE ? Polarity::NEGATIVE : Polarity::POSITIVE;
  SteeringVector neg = extract_caa(ckpt, swapped, 2);
  ASSERT_EQ(v.vector.size(), neg.vector.size());
  for (size_t i = 0; i < v.vector.size(); ++i)
    EXPECT_FLOAT_EQ(v.vector.data[i], -neg.vector.data[i]);
}

TEST(ExtractCaa, PermutationInvariance) {
  ModelCheckpoint ckpt = random_checkpoint(small_config(), 36);
  Rng rng(23);
  auto examples = random_examples(rng, 4, 64);
  SteeringVector v = extract_caa(ckpt, examples, 1);
  for (int trial = 0; trial < 5; ++trial) {
    auto shuffled = examples;
    for (size_t i = shuffled.size(); i > 1; --i)
      std::swap(shuffled[i - 1], shuffled[rng.below(i)]);
    SteeringVector w = extract_caa(ckpt, shuffled, 1);
    EXPECT_EQ(v.vector.content_hash(), w.vector.content_hash());
  }
}

TEST(ExtractCaa, MatchesBruteForceOracle) {
  ModelCheckpoint ckpt = random_checkpoint(small_config(), 37);
  Rng rng(29);
  auto examples = random_examples(rng, 5, 64);
  SteeringVector v = extract_caa(ckpt, examples, 1, 4);
  std::vector<std::pair<Polarity, Tensor>> means;
  for (const auto& ex : examples)
    means.emplace_back(ex.polarity, example_window_mean(ckpt, ex, 1, 4));
  Tensor want = combine_oracle(means);
  for (size_t i = 0; i < v.vector.size(); ++i)
    EXPECT_NEAR(v.vector.data[i], want.data[i], 1e-6);
}

TEST(ExtractCaa, ShortSequencesContributeAllPositions) {
  ModelCheckpoint ckpt = random_checkpoint(small_config(), 38);
  ContrastiveExample pos{0, {1, 2}, {3}, Polarity::POSITIVE, "t"};
  ContrastiveExample neg{1, {4}, {5}, Polarity::NEGATIVE, "t"};
  SteeringVector v = extract_caa(ckpt, {pos, neg}, 0, 10);
  EXPECT_TRUE(v.vector.all_finite());
  EXPECT_EQ(v.meta["k_positions"], 10);
}

TEST(ExtractCaa, LayerOutOfRangeThrows) {
  ModelCheckpoint ckpt = random_checkpoint(small_config(), 39);
  Rng rng(3);
  auto examples = random_examples(rng, 1, 64);
  EXPECT_THROW(extract_caa(ckpt, examples, 3), ShapeError);
}

TEST(VectorFile, SaveLoadPreservesAllFields) {
  Rng rng(41);
  SteeringVector sv;
  sv.layer = 2;
  sv.vector = rng.normal_tensor({16}, 1.0);
  sv.method = VectorMethod::CAA;
  sv.meta = {{"n_positive", 4}, {"n_negative", 4}, {"k_positions", 10}};
  std::string path = std::filesystem::temp_directory_path() / "steerkit_vec_test.svec";
  save_vector(sv, path);
  SteeringVector back = load_vector(path);
  EXPECT_EQ(back.layer, sv.layer);
  EXPECT_EQ(back.method, sv.method);
  EXPECT_EQ(back.meta, sv.meta);
  EXPECT_EQ(back.vector.content_hash(), sv.vector.content_hash());
  std::filesystem::remove(path);
}

TEST(VectorFile, RoundTripIsByteStable) {
  Rng rng(43);
  SteeringVector sv;
  sv.layer = 1;
  sv.vector = rng.normal_tensor({8}, 2.0);
  sv.method = VectorMethod::OPTIMIZED;
  std::string once = serialize_vector(sv);
  std::string twice = serialize_vector(deserialize_vector(once));
  EXPECT_EQ(once, twice);
}

TEST(VectorFile, DimensionMismatchAgainstModel) {
  Rng rng(44);
  SteeringVector sv;
  sv.layer = 1;
  sv.vector = rng.normal_tensor({64}, 1.0);
  std::string path = std::filesystem::temp_directory_path() / "steerkit_vec_dim.svec";
  save_vector(sv, path);
  ModelConfig cfg = small_config();  // d_model 16
  EXPECT_THROW(load_vector(path, cfg), FormatError);
  std::filesystem::remove(path);
}

TEST(VectorFile, CorruptPayloadIsFormatError) {
  Rng rng(45);
  SteeringVector sv;
  sv.layer = 0;
  sv.vector = rng.normal_tensor({8}, 1.0);
  std::string bytes = serialize_vector(sv);
  EXPECT_THROW(deserialize_vector("not json\nAAAA\n"), FormatError);
  EXPECT_THROW(deserialize_vector(bytes.substr(0, bytes.size() / 2)), FormatError);
  std::string tampered = bytes;
  tampered[bytes.find('\n') + 3] = '!';
  EXPECT_THROW(deserialize_vector(tampered), FormatError);
}

TEST(VectorFile, PlantedFixtureVectorHashStableAcrossRuns) {
  ModelCheckpoint ckpt = random_checkpoint(small_config(), 33);
  Rng rng_a(17), rng_b(17);
  Tensor u_a = random_unit(rng_a, 16);
  Tensor u_b = random_unit(rng_b, 16);
  auto ex_a = random_examples(rng_a, 8, 64);
  auto ex_b = random_examples(rng_b, 8, 64);
  SteeringVector va = extract_caa(ckpt, ex_a, 1, 10, InjectionProbe{u_a, 1.0f});
  SteeringVector vb = extract_caa(ckpt, ex_b, 1, 10, InjectionProbe{u_b, 1.0f});
  EXPECT_EQ(serialize_vector(va), serialize_vector(vb));
}
