#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "mapworld/errors.hpp"
#include "mapworld/model/map_world.hpp"
#include "test_util.hpp"

using namespace mapworld;
using namespace mapworld::model;
using Mat = ad::Matrix<double>;
namespace tu = mapworld::testing;

namespace {

struct WmSetup {
  MapWorldConfig cfg;
  std::unique_ptr<MapWorldModel<double>> model;
  Example ex;
  ad::Tape<double> tape{false};
  Forward<double> f;

  explicit WmSetup(const MapWorldConfig& c, std::uint64_t seed = 1) : cfg(c) {
    model = std::make_unique<MapWorldModel<double>>(c, seed);
    const auto rec =
        scenario::generate_scenario(c.world, scenario::Template::kLeftTurn, seed, tu::both_steps(c.world));
    ex = make_example(rec, c.world, c.model, c.world_model);
    std::mt19937_64 rng(seed);
    f = model->forward(tape, ex, rng, true, false);
  }

  const LatentWorldModel<double>& wm() const { return model->world_model(); }

  Mat rollout(const Mat& traj) {
    const auto cond = wm().encode_trajectory_condition(tape, tape.constant(traj));
    return wm().rollout(tape, f.state.bev_tokens, cond, static_cast<int>(traj.rows())).value();
  }
};

// Mean over rows of -log softmax(row)[target], computed directly.
double ce_oracle(const Mat& logits, const std::vector<int>& targets, Eigen::Index first, Eigen::Index count) {
  double sum = 0.0;
  for (Eigen::Index r = first; r < first + count; ++r) {
    double z = 0.0;
    for (Eigen::Index c = 0; c < logits.cols(); ++c) z += std::exp(logits(r, c));
    sum += std::log(z) - logits(r, targets[static_cast<std::size_t>(r - first)]);
  }
  return sum / static_cast<double>(count);
}

}  // namespace

TEST(WorldModel, DefaultOutputIsOneStepOfFullGridPerMode) {
  MapWorldConfig c;  // 64 x 64 grid, C = 4, terminal step only
  MapWorldModel<float> m(c, 1);
  EXPECT_EQ(m.world_model().num_steps(), 1);
  const auto rec = scenario::generate_scenario(c.world, scenario::Template::kStraight, 2, {8});
  const auto ex = make_example(rec, c.world, c.model, c.world_model);
  ad::Tape<float> tape(false);
  std::mt19937_64 rng(1);
  const auto f = m.forward(tape, ex, rng, true, true);
  EXPECT_EQ(f.wm_logits.rows(), 10 * 64 * 64);
  EXPECT_EQ(f.wm_logits.cols(), 4);
  EXPECT_EQ(f.wm_loss.rows(), 10);
  EXPECT_TRUE(f.wm_logits.value().allFinite());
}

TEST(WorldModel, TwoPredictionStepsDoubleTheBlocks) {
  auto c = tu::tiny_config();
  c.world_model.prediction_steps = {4, 8};
  WmSetup s(c);
  EXPECT_EQ(s.wm().num_steps(), 2);
  const Mat logits = s.rollout(s.f.modes.trajectories.value());
  EXPECT_EQ(logits.rows(), 3 * 2 * 16 * 16);
  EXPECT_EQ(s.ex.bev_future.size(), 2u * 16 * 16);
}

TEST(WorldModel, PredictionStepsOutsideHorizonAreRejected) {
  for (std::vector<int> steps : {std::vector<int>{0}, std::vector<int>{9}, std::vector<int>{8, 4}}) {
    auto c = tu::tiny_config();
    c.world_model.prediction_steps = steps;
    EXPECT_THROW(MapWorldModel<double>(c, 1), ConfigError);
  }
}

TEST(WorldModel, OutputDependsOnTrajectory) {
  WmSetup s(tu::tiny_config());
  Mat t = s.f.modes.trajectories.value();
  const Mat a = s.rollout(t);
  t.row(0).array() += 3.0;
  const Mat b = s.rollout(t);
  EXPECT_GT((a - b).cwiseAbs().maxCoeff(), 1e-8);
}

TEST(WorldModel, ModesDoNotSeeEachOther) {
  WmSetup s(tu::tiny_config());
  Mat t = s.f.modes.trajectories.value();
  const Mat a = s.rollout(t);
  t.row(2).array() -= 5.0;
  const Mat b = s.rollout(t);
  const Eigen::Index block = 16 * 16;
  EXPECT_TRUE(a.topRows(2 * block) == b.topRows(2 * block));
  EXPECT_GT((a.bottomRows(block) - b.bottomRows(block)).cwiseAbs().maxCoeff(), 1e-8);
}

TEST(WorldModel, BatchedRolloutMatchesPerModeLoop) {
  WmSetup s(tu::tiny_config());
  const Mat t = s.f.modes.trajectories.value();
  const Mat batched = s.rollout(t);
  const Eigen::Index block = 16 * 16;
  for (Eigen::Index k = 0; k < t.rows(); ++k) {
    const Mat one = s.rollout(t.row(k));
    EXPECT_LT((batched.middleRows(k * block, block) - one).cwiseAbs().maxCoeff(), 1e-10) << "mode " << k;
  }
}

TEST(WorldModel, MaskTokenQueriesIgnoreCurrentBev) {
  WmSetup on(tu::tiny_config());
  Mat noise = Mat::Random(on.f.state.bev_tokens.rows(), on.f.state.bev_tokens.cols());
  const auto other = on.tape.constant(on.f.state.bev_tokens.value() + noise);
  EXPECT_TRUE(on.wm().build_queries(on.tape, on.f.state.bev_tokens, 3).value() ==
              on.wm().build_queries(on.tape, other, 3).value());

  auto c = tu::tiny_config();
  c.world_model.use_mask_tokens = false;
  WmSetup off(c);
  const auto other_off = off.tape.constant(off.f.state.bev_tokens.value() + noise);
  EXPECT_FALSE(off.wm().build_queries(off.tape, off.f.state.bev_tokens, 3).value() ==
               off.wm().build_queries(off.tape, other_off, 3).value());
  // Without mask tokens each query row is the BEV token plus the step embedding.
  const Mat q = off.wm().build_queries(off.tape, off.f.state.bev_tokens, 1).value();
  const Mat diff = q - off.f.state.bev_tokens.value();
  for (Eigen::Index r = 1; r < diff.rows(); ++r) EXPECT_LT((diff.row(r) - diff.row(0)).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(WorldModel, PooledTokensAverageTwoByTwo) {
  WmSetup s(tu::tiny_config());  // 4 x 4 tokens -> 2 x 2
  const Mat b = s.f.state.bev_tokens.value();
  const Mat p = s.wm().pooled_tokens(s.f.state.bev_tokens).value();
  ASSERT_EQ(p.rows(), 4);
  const Mat expect = (b.row(0) + b.row(1) + b.row(4) + b.row(5)) / 4.0;
  EXPECT_LT((p.row(0) - expect).cwiseAbs().maxCoeff(), 1e-12);
  const Mat last = (b.row(10) + b.row(11) + b.row(14) + b.row(15)) / 4.0;
  EXPECT_LT((p.row(3) - last).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(WorldModel, UniformLogitsGiveLogOfClassCount) {
  WmSetup s(tu::tiny_config());
  ad::Tape<double> tape(false);
  const Mat zeros = Mat::Zero(3 * 256, 4);
  const auto loss = s.wm().per_mode_semantic_loss(tape.constant(zeros), s.ex.bev_future, 3).value();
  for (int k = 0; k < 3; ++k) EXPECT_NEAR(loss(k, 0), std::log(4.0), 1e-12);
}

TEST(WorldModel, SaturatedCorrectLogitsGiveNearZeroLoss) {
  WmSetup s(tu::tiny_config());
  ad::Tape<double> tape(false);
  Mat logits = Mat::Zero(3 * 256, 4);
  for (int k = 0; k < 3; ++k) {
    for (int i = 0; i < 256; ++i) logits(k * 256 + i, s.ex.bev_future[i]) = 50.0;
  }
  const auto loss = s.wm().per_mode_semantic_loss(tape.constant(logits), s.ex.bev_future, 3).value();
  EXPECT_LT(loss.maxCoeff(), 1e-20);
}

TEST(WorldModel, CrossEntropyMatchesHandComputation) {
  // Two groups of two cells, two classes.
  Mat logits(4, 2);
  logits << 1.0, 0.0,  //
      0.0, 2.0,        //
      0.5, 0.5,        //
      -1.0, 1.0;
  const std::vector<int> targets{0, 1};
  ad::Tape<double> tape(false);
  const Mat loss = ad::cross_entropy_groups(tape.constant(logits), targets, 2).value();
  const double g0 = (std::log(1.0 + std::exp(-1.0)) + std::log(1.0 + std::exp(-2.0))) / 2.0;
  const double g1 = (std::log(2.0) + std::log(1.0 + std::exp(-2.0))) / 2.0;
  EXPECT_NEAR(loss(0, 0), g0, 1e-14);
  EXPECT_NEAR(loss(1, 0), g1, 1e-14);
}

TEST(WorldModel, PerModeLossMatchesOracleAndPermutes) {
  WmSetup s(tu::tiny_config());
  const Mat t = s.f.modes.trajectories.value();
  const Mat logits = s.rollout(t);
  ad::Tape<double> tape(false);
  const Mat loss = s.wm().per_mode_semantic_loss(tape.constant(logits), s.ex.bev_future, 3).value();
  for (int k = 0; k < 3; ++k) EXPECT_NEAR(loss(k, 0), ce_oracle(logits, s.ex.bev_future, k * 256, 256), 1e-12);

  Mat perm(3, t.cols());
  perm << t.row(1), t.row(2), t.row(0);
  const Mat logits_p = s.rollout(perm);
  const Mat loss_p = s.wm().per_mode_semantic_loss(tape.constant(logits_p), s.ex.bev_future, 3).value();
  EXPECT_NEAR(loss_p(0, 0), loss(1, 0), 1e-12);
  EXPECT_NEAR(loss_p(1, 0), loss(2, 0), 1e-12);
  EXPECT_NEAR(loss_p(2, 0), loss(0, 0), 1e-12);
}

TEST(WorldModel, RejectsMismatchedInputs) {
  WmSetup s(tu::tiny_config());
  EXPECT_THROW(s.wm().encode_trajectory_condition(s.tape, s.tape.constant(Mat::Zero(3, 10))), ShapeError);
  ad::Tape<double> tape(false);
  EXPECT_THROW(s.wm().per_mode_semantic_loss(tape.constant(Mat::Zero(3 * 256, 4)), std::vector<int>(10, 0), 3),
               ShapeError);
}
