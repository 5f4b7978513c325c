#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "mapworld/errors.hpp"
#include "mapworld/model/objective.hpp"
#include "mapworld/model/state_encoder.hpp"
#include "test_util.hpp"

using namespace mapworld;
using namespace mapworld::model;
using Mat = ad::Matrix<double>;
namespace tu = mapworld::testing;

namespace {

struct Fixture {
  scenario::WorldSpec spec;
  ModelConfig cfg;
  nn::ParameterSet<double> ps;
  std::mt19937_64 rng{17};
  std::unique_ptr<StateEncoder<double>> enc;

  explicit Fixture(const MapWorldConfig& c) : spec(c.world), cfg(c.model) {
    enc = std::make_unique<StateEncoder<double>>(ps, spec, cfg, rng);
  }
};

Example example_for(const MapWorldConfig& c, std::uint64_t seed) {
  const auto rec = scenario::generate_scenario(c.world, scenario::Template::kLeftTurn, seed, {c.world.future_len});
  return make_example(rec, c.world, c.model, c.world_model);
}

}  // namespace

TEST(StateEncoder, DefaultShapes) {
  MapWorldConfig c;  // 64 x 64 grid, patch 8, d 128
  nn::ParameterSet<float> ps;
  std::mt19937_64 rng(1);
  StateEncoder<float> enc(ps, c.world, c.model, rng);
  const Example ex = example_for(c, 3);
  ad::Tape<float> tape(false);
  const auto s = enc.encode(tape, ex.patches.cast<float>(), ex.ego_status.cast<float>());
  EXPECT_EQ(s.bev_tokens.rows(), 64);
  EXPECT_EQ(s.bev_tokens.cols(), 128);
  EXPECT_EQ(s.state_tokens.rows(), 65);
  EXPECT_EQ(s.state_tokens.cols(), 128);
  EXPECT_EQ(s.ego_feature.rows(), 1);
  EXPECT_EQ(s.ego_feature.cols(), 128);
  EXPECT_EQ(s.agent_features.rows(), 4);
  EXPECT_EQ(s.agent_features.cols(), 128);
  EXPECT_EQ(s.ego_embedding.cols(), 128);
  const auto intent = enc.intent_head(tape, s.ego_feature);
  EXPECT_EQ(intent.rows(), 8);
  EXPECT_EQ(intent.cols(), 2);
  const auto logits = enc.bev_semantic_decode(tape, s.bev_tokens);
  EXPECT_EQ(logits.rows(), 64 * 64);
  EXPECT_EQ(logits.cols(), 4);
  const auto agents = enc.agent_head(tape, s.agent_features);
  EXPECT_EQ(agents.rows(), 4);
  EXPECT_EQ(agents.cols(), 5);
  // F_state is F_bev with Emb_ego appended as the last token.
  EXPECT_TRUE(s.state_tokens.value().topRows(64) == s.bev_tokens.value());
  EXPECT_TRUE(s.state_tokens.value().row(64) == s.ego_embedding.value());
}

TEST(StateEncoder, OnePatchChangeMovesBevTokensButNotEgoEmbedding) {
  Fixture f(tu::tiny_config());
  const Example ex = example_for(tu::tiny_config(), 5);
  Mat changed = ex.patches;
  // Flip the first cell of token 2 to a different class.
  const int classes = f.spec.num_classes;
  int current = 0;
  for (int k = 0; k < classes; ++k) {
    if (changed(2, k) == 1.0) current = k;
  }
  changed.row(2).head(classes).setZero();
  changed(2, (current + 1) % classes) = 1.0;
  ad::Tape<double> tape(false);
  const auto a = f.enc->encode(tape, ex.patches, ex.ego_status);
  const auto b = f.enc->encode(tape, changed, ex.ego_status);
  EXPECT_GT((a.bev_tokens.value() - b.bev_tokens.value()).cwiseAbs().maxCoeff(), 0.0);
  EXPECT_TRUE(a.ego_embedding.value() == b.ego_embedding.value());
}

TEST(StateEncoder, EgoStatusChangesEmbedding) {
  Fixture f(tu::tiny_config());
  ad::Tape<double> tape(false);
  const Mat zero = Mat::Zero(1, 7);
  Mat moving = Mat::Zero(1, 7);
  moving(0, 0) = 3.0;
  moving(0, 5) = 1.0;
  const auto a = f.enc->embed_ego(tape, zero);
  const auto b = f.enc->embed_ego(tape, moving);
  EXPECT_GT((a.value() - b.value()).cwiseAbs().maxCoeff(), 0.0);
}

TEST(StateEncoder, DisentangleAttentionRowsSumToOne) {
  Fixture f(tu::tiny_config());
  const Example ex = example_for(tu::tiny_config(), 2);
  ad::Tape<double> tape(false);
  std::vector<Mat> probs;
  const auto s = f.enc->encode(tape, ex.patches, ex.ego_status, &probs);
  ASSERT_FALSE(probs.empty());
  for (const auto& p : probs) {
    EXPECT_EQ(p.rows(), 1 + f.spec.max_agents);
    EXPECT_EQ(p.cols(), s.state_tokens.rows());
    for (Eigen::Index r = 0; r < p.rows(); ++r) EXPECT_NEAR(p.row(r).sum(), 1.0, 1e-6);
    EXPECT_GE(p.minCoeff(), 0.0);
  }
}

TEST(StateEncoder, TokenOrderIrrelevantWithoutPositionalEmbeddings) {
  auto c = tu::tiny_config();
  c.model.positional = false;
  Fixture f(c);
  const Example ex = example_for(c, 8);
  std::vector<int> perm(static_cast<std::size_t>(ex.patches.rows()));
  std::iota(perm.begin(), perm.end(), 0);
  std::mt19937_64 rng(4);
  std::shuffle(perm.begin(), perm.end(), rng);
  Mat permuted(ex.patches.rows(), ex.patches.cols());
  for (std::size_t i = 0; i < perm.size(); ++i) permuted.row(static_cast<Eigen::Index>(i)) = ex.patches.row(perm[i]);
  ad::Tape<double> tape(false);
  const auto a = f.enc->encode(tape, ex.patches, ex.ego_status);
  const auto b = f.enc->encode(tape, permuted, ex.ego_status);
  EXPECT_LT((a.ego_feature.value() - b.ego_feature.value()).cwiseAbs().maxCoeff(), 1e-10);
  EXPECT_LT((a.agent_features.value() - b.agent_features.value()).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(StateEncoder, ZeroFinalIntentLayerGivesOrigin) {
  Fixture f(tu::tiny_config());
  f.enc->intent_output().zero();
  const Example ex = example_for(tu::tiny_config(), 1);
  ad::Tape<double> tape(false);
  const auto s = f.enc->encode(tape, ex.patches, ex.ego_status);
  const auto intent = f.enc->intent_head(tape, s.ego_feature);
  EXPECT_EQ(intent.value().cwiseAbs().maxCoeff(), 0.0);
}

TEST(StateEncoder, OutputsFiniteOverRandomInputs) {
  Fixture f(tu::tiny_config());
  std::mt19937_64 rng(99);
  std::normal_distribution<double> n(0.0, 5.0);
  const int tokens = f.cfg.num_tokens(f.spec);
  const int feat = f.cfg.patch * f.cfg.patch * f.spec.num_classes;
  for (int trial = 0; trial < 20; ++trial) {
    Mat patches(tokens, feat);
    for (Eigen::Index i = 0; i < patches.size(); ++i) patches.data()[i] = n(rng);
    Mat ego(1, 7);
    for (Eigen::Index i = 0; i < ego.size(); ++i) ego.data()[i] = n(rng);
    ad::Tape<double> tape(false);
    const auto s = f.enc->encode(tape, patches, ego);
    EXPECT_TRUE(s.state_tokens.value().allFinite());
    EXPECT_TRUE(f.enc->intent_head(tape, s.ego_feature).value().allFinite());
    EXPECT_TRUE(f.enc->bev_semantic_decode(tape, s.bev_tokens).value().allFinite());
    EXPECT_TRUE(f.enc->agent_head(tape, s.agent_features).value().allFinite());
  }
}

TEST(StateEncoder, InferenceIsDeterministic) {
  Fixture f(tu::tiny_config());
  const Example ex = example_for(tu::tiny_config(), 4);
  ad::Tape<double> t1(false), t2(false);
  const auto a = f.enc->encode(t1, ex.patches, ex.ego_status);
  const auto b = f.enc->encode(t2, ex.patches, ex.ego_status);
  EXPECT_TRUE(a.state_tokens.value() == b.state_tokens.value());
}

TEST(StateEncoder, RejectsIncompatibleShapes) {
  auto c = tu::tiny_config();
  c.model.patch = 5;  // does not divide 16
  nn::ParameterSet<double> ps;
  std::mt19937_64 rng(1);
  EXPECT_THROW(StateEncoder<double>(ps, c.world, c.model, rng), ConfigError);

  Fixture f(tu::tiny_config());
  ad::Tape<double> tape(false);
  EXPECT_THROW(f.enc->encode(tape, Mat::Zero(3, 64), Mat::Zero(1, 7)), ConfigError);
  EXPECT_THROW(f.enc->embed_ego(tape, Mat::Zero(1, 5)), ConfigError);
}

TEST(StateEncoder, PatchifyUnpatchifyRoundTrip) {
  const int grid = 8, patch = 4, classes = 3;
  std::vector<int> cells(grid * grid);
  for (int i = 0; i < grid * grid; ++i) cells[i] = (i * 7 + i / 5) % classes;
  const Mat p = patchify_one_hot(cells, grid, patch, classes);
  ASSERT_EQ(p.rows(), 4);
  ASSERT_EQ(p.cols(), patch * patch * classes);
  const auto idx = unpatchify_index(grid, patch, classes, 1);
  ASSERT_EQ(idx->size(), static_cast<std::size_t>(grid * grid * classes));
  // Gathering the one-hot features as logits puts every cell's hot entry on its class.
  ad::Tape<double> tape(false);
  const auto logits = ad::gather<double>(tape.constant(p), idx, grid * grid, classes);
  for (int cell = 0; cell < grid * grid; ++cell) {
    Eigen::Index arg = 0;
    logits.value().row(cell).maxCoeff(&arg);
    EXPECT_EQ(arg, cells[cell]) << "cell " << cell;
  }
}
