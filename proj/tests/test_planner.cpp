#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <random>

#include "mapworld/errors.hpp"
#include "mapworld/model/map_world.hpp"
#include "test_util.hpp"

using namespace mapworld;
using namespace mapworld::model;
using Mat = ad::Matrix<double>;
namespace tu = mapworld::testing;

namespace {

Example tiny_example(const MapWorldConfig& c, scenario::Template t = scenario::Template::kCurve,
                     std::uint64_t seed = 3) {
  const auto rec = scenario::generate_scenario(c.world, t, seed, c.world_model.resolved_steps(c.world));
  return make_example(rec, c.world, c.model, c.world_model);
}

Mat row_permute(const Mat& m, const std::vector<int>& perm) {
  Mat out(m.rows(), m.cols());
  for (std::size_t i = 0; i < perm.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = m.row(perm[i]);
  return out;
}

}  // namespace

TEST(Planner, HistoryAugmentationByHand) {
  Mat h(4, 2);
  h << 0, 0, 1, 0, 2, 0, 3, 0;
  const Mat a = MaskedActionPlanner<double>::augment_history(h);
  Mat expect(4, 4);
  expect << 0, 0, 0, 0,  //
      1, 0, 1, 0,        //
      2, 0, 1, 0,        //
      3, 0, 1, 0;
  EXPECT_TRUE(a == expect);
  const Mat still = MaskedActionPlanner<double>::augment_history(Mat::Zero(4, 2));
  EXPECT_EQ(still.rightCols(2).cwiseAbs().maxCoeff(), 0.0);
}

TEST(Planner, HistoryEncoderShapeAndMinimumLength) {
  MapWorldConfig c;  // d 128, T_h 4
  MapWorldModel<float> m(c, 1);
  ad::Tape<float> tape(false);
  const auto h = m.planner().encode_history(tape, ad::Matrix<float>::Zero(4, 2));
  EXPECT_EQ(h.rows(), 4);
  EXPECT_EQ(h.cols(), 128);
  auto bad = tu::tiny_config();
  bad.world.history_len = 1;
  EXPECT_THROW(MapWorldModel<double>(bad, 1), ConfigError);
}

TEST(Planner, QuerySequenceLayout) {
  const auto c = tu::tiny_config();
  MapWorldModel<double> m(c, 2);
  const auto& p = m.planner();
  ad::Tape<double> tape(false);
  Mat h1(4, 2), h2(4, 2);
  h1 << -3, 0, -2, 0, -1, 0, 0, 0;
  h2 << -6, 1, -4, 0.5, -2, 0.2, 0, 0;
  const auto H1 = p.encode_history(tape, h1);
  const auto H2 = p.encode_history(tape, h2);
  const auto q1 = p.build_query_sequence(tape, H1);
  const auto q2 = p.build_query_sequence(tape, H2);
  EXPECT_EQ(q1.rows(), 12);
  EXPECT_TRUE(q1.value().topRows(4) == H1.value());
  EXPECT_TRUE(q1.value().bottomRows(8) == q2.value().bottomRows(8));
  EXPECT_FALSE(q1.value().topRows(4) == q2.value().topRows(4));

  auto nopos = c;
  nopos.model.positional = false;
  MapWorldModel<double> m2(nopos, 2);
  const auto q = m2.planner().build_query_sequence(tape, m2.planner().encode_history(tape, h1));
  for (int r = 5; r < 12; ++r) EXPECT_TRUE(q.value().row(r) == q.value().row(4));
}

TEST(Planner, ModeQueriesFollowNoiseMap) {
  const auto c = tu::tiny_config();
  MapWorldModel<double> m(c, 3);
  const auto& p = m.planner();
  ad::Tape<double> tape(false);
  Mat h(4, 2);
  h << -3, 0, -2, 0, -1, 0, 0, 0;
  const auto seq = p.build_query_sequence(tape, p.encode_history(tape, h));

  std::mt19937_64 r0(5);
  const auto zero = p.make_mode_queries(tape, seq, 4, 0.0, r0);
  for (int k = 1; k < 4; ++k) EXPECT_TRUE(zero.queries.value().row(k) == zero.queries.value().row(0));

  // A zero noise draw at any factor equals factor zero.
  const auto z0 = p.make_mode_queries(tape, seq, Mat::Zero(4, c.model.d), 5.0);
  EXPECT_TRUE(z0.queries.value() == zero.queries.value());

  std::mt19937_64 ra(9), rb(9);
  const auto a = p.make_mode_queries(tape, seq, 4, 1.0, ra);
  const auto b = p.make_mode_queries(tape, seq, 4, 1.0, rb);
  EXPECT_TRUE(a.queries.value() == b.queries.value());
  EXPECT_TRUE(a.noise == b.noise);
  EXPECT_FALSE(a.queries.value().row(0) == a.queries.value().row(1));
  EXPECT_EQ(a.fused.rows(), 1);
  EXPECT_EQ(a.noise.rows(), 4);
  EXPECT_EQ(a.noise.cols(), c.model.d);
}

TEST(Planner, ScaffoldIsExactConcatenation) {
  ad::Tape<double> tape(false);
  Mat h(4, 2), intent(8, 2);
  h << -3.3, 0.1, -2.2, 0.07, -1.1, 0.03, 0, 0;
  for (int i = 0; i < 8; ++i) intent.row(i) << 1.37 * (i + 1), -0.11 * i;
  const auto P = MaskedActionPlanner<double>::build_scaffold(tape, h, tape.constant(intent));
  ASSERT_EQ(P.rows(), 12);
  ASSERT_EQ(P.cols(), 2);
  EXPECT_TRUE(P.value().topRows(4) == h);
  EXPECT_TRUE(P.value().bottomRows(8) == intent);
}

TEST(Planner, DecoderShapesAtDefaultSize) {
  MapWorldConfig c;  // K 10, T_h + T_f = 12
  MapWorldModel<float> m(c, 4);
  const auto rec = scenario::generate_scenario(c.world, scenario::Template::kStraight, 1, {8});
  const auto ex = make_example(rec, c.world, c.model, c.world_model);
  ad::Tape<float> tape(false);
  std::mt19937_64 rng(1);
  const auto f = m.forward(tape, ex, rng, false, false);
  EXPECT_EQ(f.modes.residuals.rows(), 10);
  EXPECT_EQ(f.modes.residuals.cols(), 24);
  EXPECT_EQ(f.modes.logits.rows(), 10);
  EXPECT_EQ(f.modes.logits.cols(), 1);
  EXPECT_EQ(f.modes.trajectories.rows(), 10);
  EXPECT_EQ(f.modes.trajectories.cols(), 16);
  EXPECT_NEAR(f.modes.weights.value().sum(), 1.0f, 1e-6f);
}

TEST(Planner, DecoderIsModePermutationEquivariant) {
  const auto c = tu::tiny_config();
  MapWorldModel<double> m(c, 5);
  const auto ex = tiny_example(c);
  ad::Tape<double> tape(false);
  std::mt19937_64 rng(2);
  const auto f = m.forward(tape, ex, rng, true, false);
  const Mat q = f.mode_queries.queries.value();
  const std::vector<int> perm{2, 0, 1};
  const auto& p = m.planner();
  const auto a = p.decode_trajectories(tape, tape.constant(q), f.scaffold, f.state.bev_tokens, f.state.agent_features);
  const auto b = p.decode_trajectories(tape, tape.constant(row_permute(q, perm)), f.scaffold, f.state.bev_tokens,
                                       f.state.agent_features);
  EXPECT_LT((row_permute(a.residuals.value(), perm) - b.residuals.value()).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_LT((row_permute(a.logits.value(), perm) - b.logits.value()).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Planner, ZeroInitRefinementReturnsScaffoldFuture) {
  auto c = tu::tiny_config();
  c.model.zero_init_refinement = true;
  MapWorldModel<double> m(c, 6);
  const auto ex = tiny_example(c);
  ad::Tape<double> tape(false);
  std::mt19937_64 rng(3);
  const auto f = m.forward(tape, ex, rng, true, false);
  EXPECT_EQ(f.modes.residuals.value().cwiseAbs().maxCoeff(), 0.0);
  const Mat fut = f.scaffold.value().bottomRows(c.world.future_len);
  for (int k = 0; k < c.model.num_modes; ++k) {
    for (int t = 0; t < c.world.future_len; ++t) {
      EXPECT_EQ(f.modes.trajectories.value()(k, 2 * t), fut(t, 0));
      EXPECT_EQ(f.modes.trajectories.value()(k, 2 * t + 1), fut(t, 1));
    }
  }
}

TEST(Planner, FinalizeAddsResidualToScaffold) {
  ad::Tape<double> tape(false);
  std::mt19937_64 rng(7);
  std::normal_distribution<double> n;
  const int th = 4, tf = 8, k = 5;
  Mat P(th + tf, 2), R(k, 2 * (th + tf));
  for (Eigen::Index i = 0; i < P.size(); ++i) P.data()[i] = n(rng);
  for (Eigen::Index i = 0; i < R.size(); ++i) R.data()[i] = n(rng);
  const auto T = MaskedActionPlanner<double>::finalize(tape.constant(R), tape.constant(P), th);
  ASSERT_EQ(T.rows(), k);
  ASSERT_EQ(T.cols(), 2 * tf);
  for (int m = 0; m < k; ++m) {
    for (int t = 0; t < tf; ++t) {
      for (int j = 0; j < 2; ++j) EXPECT_EQ(T.value()(m, 2 * t + j), R(m, 2 * (th + t) + j) + P(th + t, j));
    }
  }
  const auto zero = MaskedActionPlanner<double>::finalize(tape.constant(Mat::Zero(k, 24)), tape.constant(P), th);
  for (int m = 0; m < k; ++m) {
    for (int t = 0; t < tf; ++t) EXPECT_EQ(zero.value()(m, 2 * t), P(th + t, 0));
  }
  Mat shift = Mat::Zero(k, 24);
  for (int t = 0; t < th + tf; ++t) shift.col(2 * t).setOnes();
  const auto moved = MaskedActionPlanner<double>::finalize(tape.constant(shift), tape.constant(P), th);
  EXPECT_TRUE((moved.value() - zero.value()).col(0).isOnes());
  EXPECT_EQ((moved.value() - zero.value()).col(1).cwiseAbs().maxCoeff(), 0.0);
}

TEST(Planner, SelectHighestConfidenceLowestIndexOnTies) {
  Mat l(3, 1);
  l << 0.1, 0.9, 0.3;
  EXPECT_EQ(select_mode(l), 1);
  const Mat shifted = l.array() + 5.0;
  EXPECT_EQ(select_mode(shifted), 1);
  ad::Tape<double> tape(false);
  const Mat w1 = ad::softmax_rows(ad::transpose(tape.constant(l))).value();
  const Mat w2 = ad::softmax_rows(ad::transpose(tape.constant(shifted))).value();
  EXPECT_LT((w1 - w2).cwiseAbs().maxCoeff(), 1e-6);
  EXPECT_EQ(select_mode(Mat::Constant(4, 1, 0.7)), 0);
}

TEST(Planner, AnchorMaskFallsBackOutsideTheGrid) {
  auto c = tu::tiny_config();  // 16 x 16 cells of 2 m, 4 x 4 tokens of 8 m
  c.model.attention_radius = 1.0;
  MapWorldModel<double> m(c, 8);
  const auto& p = m.planner();
  Mat near = Mat::Zero(12, 2);
  const auto local = p.anchor_mask(near);
  const int visible = std::accumulate(local.begin(), local.end(), 0);
  // Token centers sit at +-4 and +-12 m; only the inner four lie within 8 m of the origin.
  EXPECT_EQ(visible, 4);
  Mat far = Mat::Constant(12, 2, 500.0);
  const auto global = p.anchor_mask(far);
  EXPECT_EQ(std::accumulate(global.begin(), global.end(), 0), 16);
}

TEST(Planner, ZeroNoiseCollapsesModes) {
  auto c = tu::tiny_config();
  c.model.noise_factor = 0.0;
  MapWorldModel<double> m(c, 9);
  const auto ex = tiny_example(c);
  ad::Tape<double> tape(false);
  std::mt19937_64 rng(1);
  const auto f = m.forward(tape, ex, rng, true, false);
  const Mat& T = f.modes.trajectories.value();
  for (int k = 1; k < c.model.num_modes; ++k) EXPECT_LT((T.row(k) - T.row(0)).cwiseAbs().maxCoeff(), 1e-5);
}
