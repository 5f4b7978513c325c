#include "mapworld/eval/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "mapworld/errors.hpp"

namespace mapworld::eval {

void MetricThresholds::validate() const {
  if (ttc_threshold < 0.0 || max_accel <= 0.0 || max_jerk <= 0.0) throw ConfigError("eval thresholds must be positive");
  if (w_ttc < 0.0 || w_ep < 0.0 || w_comfort < 0.0 || w_ttc + w_ep + w_comfort <= 0.0) {
    throw ConfigError("eval score weights must be >= 0 with a positive sum");
  }
  if (ego_length <= 0.0 || ego_width <= 0.0 || agent_length <= 0.0 || agent_width <= 0.0) {
    throw ConfigError("footprints must be positive");
  }
}

double drivable_compliance(const std::vector<Vec2>& waypoints, const scenario::SemanticGrid& grid,
                           const scenario::WorldSpec& spec) {
  if (waypoints.empty()) return 0.0;
  std::size_t ok = 0;
  for (const Vec2& p : waypoints) {
    const auto cell = spec.cell_of(p);
    if (cell && grid.at(cell->row, cell->col) != scenario::kBackground) ++ok;
  }
  return static_cast<double>(ok) / static_cast<double>(waypoints.size());
}

double arc_length(const std::vector<Vec2>& waypoints) {
  double len = 0.0;
  Vec2 prev{0.0, 0.0};
  for (const Vec2& p : waypoints) {
    len += (p - prev).norm();
    prev = p;
  }
  return len;
}

bool comfortable(const std::vector<Vec2>& history, const std::vector<Vec2>& future, double dt, double max_accel,
                 double max_jerk) {
  std::vector<Vec2> pts(history);
  pts.insert(pts.end(), future.begin(), future.end());
  std::vector<Vec2> vel, acc;
  for (std::size_t i = 1; i < pts.size(); ++i) vel.push_back((pts[i] - pts[i - 1]) * (1.0 / dt));
  for (std::size_t i = 1; i < vel.size(); ++i) acc.push_back((vel[i] - vel[i - 1]) * (1.0 / dt));
  for (const Vec2& a : acc) {
    if (a.norm() > max_accel) return false;
  }
  for (std::size_t i = 1; i < acc.size(); ++i) {
    if ((acc[i] - acc[i - 1]).norm() / dt > max_jerk) return false;
  }
  return true;
}

double mean_pairwise_endpoint_distance(const std::vector<std::vector<Vec2>>& modes) {
  double total = 0.0;
  int pairs = 0;
  for (std::size_t a = 0; a < modes.size(); ++a) {
    for (std::size_t b = a + 1; b < modes.size(); ++b) {
      total += (modes[a].back() - modes[b].back()).norm();
      ++pairs;
    }
  }
  return pairs == 0 ? 0.0 : total / pairs;
}

namespace {

double mean_displacement(const std::vector<Vec2>& a, const std::vector<Vec2>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]).norm();
  return s / static_cast<double>(a.size());
}

}  // namespace

ScenarioMetrics score_scenario(const scenario::ScenarioRecord& rec, const scenario::WorldSpec& spec,
                               const std::vector<std::vector<Vec2>>& modes, int selected,
                               const MetricThresholds& th) {
  if (modes.empty() || selected < 0 || selected >= static_cast<int>(modes.size())) {
    throw DataError("scenario " + rec.scenario_id + ": invalid mode selection");
  }
  for (const auto& m : modes) {
    if (m.size() != rec.gt_future.size()) throw ShapeError("predicted horizon does not match gt_future");
  }
  ScenarioMetrics s;
  s.scenario_id = rec.scenario_id;
  s.selected = selected;
  const auto& sel = modes[static_cast<std::size_t>(selected)];
  const auto& gt = rec.gt_future;
  s.ade = mean_displacement(sel, gt);
  s.fde = (sel.back() - gt.back()).norm();
  s.min_ade = std::numeric_limits<double>::infinity();
  s.min_fde = std::numeric_limits<double>::infinity();
  for (const auto& m : modes) {
    s.min_ade = std::min(s.min_ade, mean_displacement(m, gt));
    s.min_fde = std::min(s.min_fde, (m.back() - gt.back()).norm());
  }
  for (int sec = 1; sec <= 4; ++sec) {
    const int idx = static_cast<int>(std::lround(sec * spec.rate_hz)) - 1;
    if (idx >= 0 && idx < static_cast<int>(gt.size())) {
      s.l2_at[std::to_string(sec) + "s"] = (sel[static_cast<std::size_t>(idx)] - gt[static_cast<std::size_t>(idx)]).norm();
    }
  }
  const scenario::Footprint ego{th.ego_length, th.ego_width};
  const scenario::Footprint agent{th.agent_length, th.agent_width};
  s.collision = scenario::collides(sel, rec.agent_future, ego, agent);
  s.dac = drivable_compliance(sel, rec.bev_current, spec);
  const double gt_len = arc_length(gt);
  s.ep = gt_len <= 0.0 ? 1.0 : std::clamp(arc_length(sel) / gt_len, 0.0, 1.0);
  s.ttc_ok = scenario::min_time_gap(sel, rec.agent_future, spec.rate_hz, ego, agent) >= th.ttc_threshold;
  s.comfort_ok = comfortable(rec.history, sel, spec.dt(), th.max_accel, th.max_jerk);
  const double nc = s.collision ? 0.0 : 1.0;
  const double weighted = th.w_ttc * (s.ttc_ok ? 1.0 : 0.0) + th.w_ep * s.ep + th.w_comfort * (s.comfort_ok ? 1.0 : 0.0);
  s.pdms = nc * s.dac * weighted / (th.w_ttc + th.w_ep + th.w_comfort);
  s.mode_spread = mean_pairwise_endpoint_distance(modes);
  return s;
}

MetricsReport aggregate(std::vector<ScenarioMetrics> scenarios) {
  if (scenarios.empty()) throw DataError("cannot aggregate metrics over an empty dataset");
  MetricsReport r;
  r.count = scenarios.size();
  const double n = static_cast<double>(scenarios.size());
  std::map<std::string, int> l2_count;
  // Accumulate sums first so exact per-scenario values average exactly.
  for (const auto& s : scenarios) {
    r.ade += s.ade;
    r.fde += s.fde;
    r.min_ade_k += s.min_ade;
    r.min_fde_k += s.min_fde;
    r.collision_rate += s.collision ? 1.0 : 0.0;
    r.dac += s.dac;
    r.ep += s.ep;
    r.ttc_ok += s.ttc_ok ? 1.0 : 0.0;
    r.comfort_ok += s.comfort_ok ? 1.0 : 0.0;
    r.mini_pdms += s.pdms;
    r.mode_spread += s.mode_spread;
    for (const auto& [k, v] : s.l2_at) {
      r.l2_at[k] += v;
      ++l2_count[k];
    }
  }
  for (double* v : {&r.ade, &r.fde, &r.min_ade_k, &r.min_fde_k, &r.collision_rate, &r.dac, &r.ep, &r.ttc_ok,
                    &r.comfort_ok, &r.mini_pdms, &r.mode_spread}) {
    *v /= n;
  }
  for (auto& [k, v] : r.l2_at) v /= l2_count[k];
  r.per_scenario = std::move(scenarios);
  return r;
}

}  // namespace mapworld::eval
