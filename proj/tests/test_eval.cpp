#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "mapworld/errors.hpp"
#include "mapworld/eval/harness.hpp"
#include "test_util.hpp"

namespace fs = std::filesystem;
using namespace mapworld;
using namespace mapworld::eval;
using scenario::Vec2;
namespace tu = mapworld::testing;

namespace {

fs::path temp_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("mapworld_eval_" + name + "_" + std::to_string(::getpid()));
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

cli::RunConfig tiny_run() {
  cli::RunConfig r;
  const auto c = tu::tiny_config();
  r.world = c.world;
  r.model = c.model;
  r.train.steps = 2;
  r.train.batch_size = 2;
  r.train.checkpoint_every = 0;
  return r;
}

scenario::ScenarioRecord straight_record(const scenario::WorldSpec& spec) {
  scenario::ScenarioOverrides o;
  o.num_agents = 0;
  o.speed = 3.0;
  o.accel = 0.0;
  return scenario::generate_scenario(spec, scenario::Template::kStraight, 4, {spec.future_len}, {}, o);
}

std::vector<Vec2> shifted(const std::vector<Vec2>& pts, double dy) {
  std::vector<Vec2> out;
  for (const auto& p : pts) out.push_back({p.x, p.y + dy});
  return out;
}

// Class id under a point using the documented cell layout, or -1 outside the grid.
int class_at(const scenario::SemanticGrid& g, const scenario::WorldSpec& s, Vec2 p) {
  const double e = 0.5 * s.grid_size * s.cell_size;
  if (p.x < -e || p.x >= e || p.y < -e || p.y >= e) return -1;
  const int row = static_cast<int>(std::floor((p.x + e) / s.cell_size));
  const int col = static_cast<int>(std::floor((p.y + e) / s.cell_size));
  return g.cells[static_cast<std::size_t>(row * s.grid_size + col)];
}

}  // namespace

TEST(Metrics, OraclePlannerScoresPerfectly) {
  const scenario::WorldSpec spec;
  const auto records = tu::make_records(spec, 40, 8, "test");
  std::vector<Prediction> preds;
  for (const auto& r : records) preds.push_back(oracle_prediction(r, 3));
  const auto rep = evaluate_predictions(records, preds, spec, {});
  EXPECT_EQ(rep.count, 40u);
  EXPECT_EQ(rep.ade, 0.0);
  EXPECT_EQ(rep.fde, 0.0);
  EXPECT_EQ(rep.min_ade_k, 0.0);
  EXPECT_EQ(rep.collision_rate, 0.0);
  EXPECT_EQ(rep.dac, 1.0);
  EXPECT_EQ(rep.ep, 1.0);
  EXPECT_EQ(rep.ttc_ok, 1.0);
  EXPECT_EQ(rep.comfort_ok, 1.0);
  EXPECT_EQ(rep.mini_pdms, 1.0);
  EXPECT_EQ(rep.mode_spread, 0.0);
}

TEST(Metrics, DrivableComplianceFollowsTheRaster) {
  const scenario::WorldSpec spec;
  const auto rec = straight_record(spec);
  EXPECT_EQ(drivable_compliance(rec.gt_future, rec.bev_current, spec), 1.0);
  // The road spans y in [-1.5, 4.5].
  EXPECT_EQ(drivable_compliance(shifted(rec.gt_future, 0.6), rec.bev_current, spec), 1.0);
  EXPECT_EQ(drivable_compliance(shifted(rec.gt_future, -2.6), rec.bev_current, spec), 0.0);
  std::vector<Vec2> outside{{100.0, 0.0}, {0.5, 0.2}};
  EXPECT_EQ(drivable_compliance(outside, rec.bev_current, spec), 0.5);
}

TEST(Metrics, DrivableComplianceMatchesCellOracle) {
  const scenario::WorldSpec spec;
  std::mt19937_64 rng(13);
  std::uniform_real_distribution<double> u(-20.0, 20.0);
  for (const auto& rec : tu::make_records(spec, 12, 2)) {
    std::vector<Vec2> pts;
    for (int i = 0; i < 30; ++i) pts.push_back({u(rng), u(rng)});
    int on = 0;
    for (const auto& p : pts) {
      const int c = class_at(rec.bev_current, spec, p);
      on += c > 0 ? 1 : 0;
    }
    EXPECT_DOUBLE_EQ(drivable_compliance(pts, rec.bev_current, spec), on / 30.0);
  }
}

TEST(Metrics, ArcLengthProgressAndComfortByHand) {
  EXPECT_DOUBLE_EQ(arc_length({{3.0, 4.0}, {3.0, 10.0}}), 11.0);
  const double dt = 0.5;
  std::vector<Vec2> hist{{-3, 0}, {-2, 0}, {-1, 0}, {0, 0}};
  std::vector<Vec2> steady{{1, 0}, {2, 0}, {3, 0}};
  EXPECT_TRUE(comfortable(hist, steady, dt, 4.0, 8.0));
  // Speed jumps from 2 to 6 m/s over one 0.5 s step: 8 m/s^2.
  std::vector<Vec2> lurch{{3, 0}, {6, 0}, {9, 0}};
  EXPECT_FALSE(comfortable(hist, lurch, dt, 4.0, 100.0));
  EXPECT_TRUE(comfortable(hist, lurch, dt, 8.0 + 1e-9, 100.0));
  EXPECT_DOUBLE_EQ(mean_pairwise_endpoint_distance({{{0, 0}}, {{3, 4}}, {{0, 8}}}), (5.0 + 8.0 + 5.0) / 3.0);
  EXPECT_EQ(mean_pairwise_endpoint_distance({{{1, 1}}}), 0.0);
}

TEST(Metrics, ProgressIsClippedRatio) {
  const scenario::WorldSpec spec;
  const auto rec = straight_record(spec);
  std::vector<Vec2> half, longer;
  for (const auto& p : rec.gt_future) {
    half.push_back({p.x * 0.5, p.y});
    longer.push_back({p.x * 1.2, p.y});
  }
  EXPECT_NEAR(score_scenario(rec, spec, {half}, 0, {}).ep, 0.5, 1e-12);
  EXPECT_EQ(score_scenario(rec, spec, {longer}, 0, {}).ep, 1.0);
}

TEST(Metrics, ScoreCombinesSubScores) {
  const scenario::WorldSpec spec;
  const auto records = tu::make_records(spec, 30, 3);
  std::mt19937_64 rng(5);
  std::normal_distribution<double> n(0.0, 1.5);
  for (const auto& rec : records) {
    std::vector<std::vector<Vec2>> modes(3);
    for (auto& m : modes) {
      for (const auto& p : rec.gt_future) m.push_back({p.x + n(rng), p.y + n(rng)});
    }
    const MetricThresholds th;
    const auto s = score_scenario(rec, spec, modes, 1, th);
    const double expect = (s.collision ? 0.0 : 1.0) * s.dac *
                          (5.0 * (s.ttc_ok ? 1.0 : 0.0) + 5.0 * s.ep + 2.0 * (s.comfort_ok ? 1.0 : 0.0)) / 12.0;
    EXPECT_NEAR(s.pdms, expect, 1e-12);
    EXPECT_LE(s.min_ade, s.ade + 1e-12);
    EXPECT_LE(s.min_fde, s.fde + 1e-12);
    EXPECT_GE(s.pdms, 0.0);
    EXPECT_LE(s.pdms, 1.0);
  }
}

TEST(Metrics, EmptyAggregateIsADataError) {
  EXPECT_THROW(aggregate({}), DataError);
  const scenario::WorldSpec spec;
  EXPECT_THROW(evaluate_predictions({}, {}, spec, {}), DataError);
}

TEST(Harness, EvaluationLeavesTheModelUntouchedAndRepeats) {
  const auto c = tu::tiny_config();
  model::MapWorldModel<float> m(c, 4);
  const auto records = tu::make_records(c.world, 6, 31, "test");
  std::vector<ad::Matrix<float>> before;
  for (const auto& p : m.params().all()) before.push_back(p.value);
  const auto a = evaluate(m, records, {}, 7);
  const auto b = evaluate(m, records, {}, 7);
  std::size_t i = 0;
  for (const auto& p : m.params().all()) EXPECT_TRUE(p.value == before[i++]) << p.name;
  EXPECT_EQ(report_json(a), report_json(b));
  EXPECT_EQ(a.count, 6u);
  for (const auto& s : a.per_scenario) EXPECT_LE(s.min_ade, s.ade + 1e-12);
  EXPECT_LE(a.min_ade_k, a.ade);
  EXPECT_LE(a.min_fde_k, a.fde);
}

TEST(Harness, ReportJsonCarriesTheAnalogNote) {
  const scenario::WorldSpec spec;
  const auto records = tu::make_records(spec, 2, 3, "test");
  std::vector<Prediction> preds;
  for (const auto& r : records) preds.push_back(oracle_prediction(r, 2));
  const auto j = nlohmann::json::parse(report_json(evaluate_predictions(records, preds, spec, {})));
  EXPECT_EQ(j.at("mini_pdms").get<double>(), 1.0);
  EXPECT_NE(j.dump().find("not the official"), std::string::npos);
  std::ostringstream lines;
  write_per_scenario(evaluate_predictions(records, preds, spec, {}), lines);
  std::istringstream in(lines.str());
  int n = 0;
  for (std::string line; std::getline(in, line); ++n) EXPECT_NO_THROW((void)nlohmann::json::parse(line));
  EXPECT_EQ(n, 2);
}

TEST(Harness, SplitsMustBeDisjoint) {
  const scenario::WorldSpec spec;
  const auto train = scenario::generate_dataset(spec, scenario::all_templates(), 4, 1, "train").manifest;
  const auto test = scenario::generate_dataset(spec, scenario::all_templates(), 4, 2, "test").manifest;
  EXPECT_NO_THROW(check_split_disjoint(test, &train));
  EXPECT_NO_THROW(check_split_disjoint(test, nullptr));
  EXPECT_THROW(check_split_disjoint(train, nullptr), DataError);
  const auto same_seed = scenario::generate_dataset(spec, scenario::all_templates(), 4, 1, "test").manifest;
  EXPECT_THROW(check_split_disjoint(same_seed, &train), DataError);
  auto overlap = test;
  overlap.scenario_ids.push_back(train.scenario_ids[2]);
  EXPECT_THROW(check_split_disjoint(overlap, &train), DataError);
}

TEST(Ablation, GridCardinalityAndOrder) {
  const auto km = default_ablation_grid_k_mask();
  EXPECT_EQ(km.cells().size(), 8u);
  EXPECT_EQ(default_ablation_grid_steps(scenario::WorldSpec{}).cells().size(), default_ablation_grid_steps({}).cells().size());
  AblationGrid g;
  g.add_axis("num_modes=1,4,8");
  g.add_axis("decoder_depth=1,2");
  g.add_axis("wm_prediction_steps=8|4,8");
  g.validate();
  const auto cells = g.cells();
  ASSERT_EQ(cells.size(), 12u);
  EXPECT_EQ(cells[0][2].second, "8");
  EXPECT_EQ(cells[1][2].second, "4,8");
  EXPECT_EQ(cells[2][1].second, "2");
  EXPECT_EQ(cells[11][0].second, "8");
  EXPECT_THROW(g.add_axis("numModes=1"), UsageError);
  EXPECT_THROW(g.add_axis("num_modes"), UsageError);
  AblationGrid empty;
  EXPECT_THROW(empty.validate(), ConfigError);
  AblationGrid twice;
  twice.axes = {{"num_modes", {"1"}}, {"model.num_modes", {"2"}}};
  EXPECT_THROW(twice.validate(), ConfigError);
}

TEST(Ablation, RunsEveryCellAndRecordsFailures) {
  const auto base = tiny_run();
  const auto train = tu::make_records(base.world, 4, 1, "train");
  const auto test = tu::make_records(base.world, 3, 2, "test");
  AblationGrid g;
  g.add_axis("num_modes=1,3");
  g.add_axis("learning_rate=1e-3,1e300");
  const auto rows = run_ablation(g, base, train, test);
  ASSERT_EQ(rows.size(), 4u);
  EXPECT_TRUE(rows[0].ok) << rows[0].error;
  EXPECT_TRUE(rows[2].ok) << rows[2].error;
  EXPECT_FALSE(rows[1].ok);
  EXPECT_FALSE(rows[1].error.empty());
  EXPECT_EQ(rows[0].metrics.count, 3u);
  std::ostringstream out;
  write_ablation_table(g, rows, out);
  std::istringstream in(out.str());
  std::vector<std::string> lines;
  for (std::string l; std::getline(in, l);) lines.push_back(l);
  ASSERT_EQ(lines.size(), 5u);
  EXPECT_EQ(lines[0].rfind("num_modes\tlearning_rate\tstatus", 0), 0u) << lines[0];
}

TEST(Plot, WritesImageAndSidecarWithEveryMode) {
  const auto c = tu::tiny_config();
  model::MapWorldModel<float> m(c, 4);
  const auto rec = tu::make_records(c.world, 1, 9, "test").front();
  const auto ex = model::make_example(rec, c.world, c.model, c.world_model);
  const auto pred = predict(m, ex, 3, true);
  ASSERT_EQ(pred.modes.size(), 3u);
  ASSERT_EQ(pred.future_bev.size(), 3u);
  const fs::path dir = temp_dir("plot");
  plot_rollout(rec, c.world, pred, dir / "r.png");
  EXPECT_GT(fs::file_size(dir / "r.png"), 0u);
  std::ifstream side(dir / "r.png.json");
  const auto j = nlohmann::json::parse(side);
  EXPECT_EQ(j.at("num_modes").get<int>(), 3);
  EXPECT_EQ(j.at("selected").get<int>(), pred.selected);
  EXPECT_TRUE(j.at("future_inset").get<bool>());
  int modes = 0, selected = 0, gt = 0, history = 0;
  for (const auto& line : j.at("polylines")) {
    const auto kind = line.at("kind").get<std::string>();
    if (kind == "mode") {
      ++modes;
      EXPECT_EQ(line.at("points").size(), static_cast<std::size_t>(c.world.future_len));
      selected += line.at("selected").get<bool>() ? 1 : 0;
    }
    gt += kind == "gt_future" ? 1 : 0;
    history += kind == "history" ? 1 : 0;
  }
  EXPECT_EQ(modes, 3);
  EXPECT_EQ(selected, 1);
  EXPECT_EQ(gt, 1);
  EXPECT_EQ(history, 1);
  EXPECT_EQ(j.at("endpoints").size(), 3u);
  fs::remove_all(dir);
}

TEST(Plot, UnwritablePathIsAnIoError) {
  const scenario::WorldSpec spec;
  const auto rec = tu::make_records(spec, 1, 9, "test").front();
  const fs::path dir = temp_dir("plot_bad");
  {
    std::ofstream f(dir / "file");
    f << "x";
  }
  EXPECT_THROW(plot_rollout(rec, spec, oracle_prediction(rec, 2), dir / "file" / "r.png"), IoError);
  fs::remove_all(dir);
}
