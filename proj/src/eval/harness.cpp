#include "mapworld/eval/harness.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "mapworld/errors.hpp"
#include "mapworld/train/trainer.hpp"

namespace mapworld::eval {

using Json = nlohmann::json;

Prediction predict(const model::MapWorldModel<float>& model, const model::Example& ex, std::uint64_t noise_seed,
                   bool run_world_model) {
  ad::Tape<float> tape(false);
  std::mt19937_64 rng(noise_seed);
  const auto f = model.forward(tape, ex, rng, false, run_world_model);
  const auto& spec = model.config().world;
  const auto& traj = f.modes.trajectories.value();
  Prediction p;
  for (Eigen::Index k = 0; k < traj.rows(); ++k) {
    std::vector<Vec2> pts;
    for (int t = 0; t < spec.future_len; ++t) pts.push_back({traj(k, 2 * t), traj(k, 2 * t + 1)});
    p.modes.push_back(std::move(pts));
  }
  const auto& w = f.modes.weights.value();
  for (Eigen::Index k = 0; k < w.cols(); ++k) p.weights.push_back(w(0, k));
  p.selected = model::select_mode(f.modes.logits.value());
  if (run_world_model && f.wm_logits.valid()) {
    const auto& logits = f.wm_logits.value();
    const int cells = spec.num_cells();
    const int steps = model.world_model().num_steps();
    for (Eigen::Index k = 0; k < traj.rows(); ++k) {
      scenario::SemanticGrid g(spec.grid_size, spec.grid_size);
      const Eigen::Index base = (k * steps + (steps - 1)) * cells;
      for (int c = 0; c < cells; ++c) {
        Eigen::Index cls = 0;
        logits.row(base + c).maxCoeff(&cls);
        g.cells[static_cast<std::size_t>(c)] = static_cast<std::uint8_t>(cls);
      }
      p.future_bev.push_back(std::move(g));
    }
  }
  return p;
}

void check_split_disjoint(const scenario::DatasetManifest& eval_manifest,
                          const scenario::DatasetManifest* train_manifest) {
  if (eval_manifest.split == "train") throw DataError("refusing to evaluate on a split named 'train'");
  if (train_manifest == nullptr) return;
  if (train_manifest->master_seed == eval_manifest.master_seed) {
    throw DataError("evaluation data shares master seed " + std::to_string(eval_manifest.master_seed) +
                    " with the training data");
  }
  const std::set<std::string> train_ids(train_manifest->scenario_ids.begin(), train_manifest->scenario_ids.end());
  for (const auto& id : eval_manifest.scenario_ids) {
    if (train_ids.count(id) != 0) throw DataError("scenario " + id + " appears in both training and evaluation data");
  }
}

MetricsReport evaluate_predictions(const std::vector<scenario::ScenarioRecord>& records,
                                   const std::vector<Prediction>& predictions, const scenario::WorldSpec& spec,
                                   const MetricThresholds& thresholds) {
  if (records.empty()) throw DataError("evaluation dataset is empty");
  if (records.size() != predictions.size()) throw ShapeError("one prediction per record required");
  thresholds.validate();
  std::vector<ScenarioMetrics> per;
  per.reserve(records.size());
  for (std::size_t i = 0; i < records.size(); ++i) {
    per.push_back(score_scenario(records[i], spec, predictions[i].modes, predictions[i].selected, thresholds));
  }
  return aggregate(std::move(per));
}

MetricsReport evaluate(const model::MapWorldModel<float>& model, const std::vector<scenario::ScenarioRecord>& records,
                       const MetricThresholds& thresholds, std::uint64_t noise_seed) {
  if (records.empty()) throw DataError("evaluation dataset is empty");
  const auto& cfg = model.config();
  std::vector<Prediction> preds;
  preds.reserve(records.size());
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto ex = model::make_example(records[i], cfg.world, cfg.model, cfg.world_model);
    preds.push_back(predict(model, ex, scenario::derive_seed(noise_seed, i)));
  }
  return evaluate_predictions(records, preds, cfg.world, thresholds);
}

Prediction oracle_prediction(const scenario::ScenarioRecord& record, int num_modes) {
  Prediction p;
  p.modes.assign(static_cast<std::size_t>(num_modes), record.gt_future);
  p.weights.assign(static_cast<std::size_t>(num_modes), 1.0 / num_modes);
  p.selected = 0;
  return p;
}

namespace {

Json report_to_json(const MetricsReport& r) {
  Json j;
  j["count"] = r.count;
  j["ade"] = r.ade;
  j["fde"] = r.fde;
  j["min_ade_k"] = r.min_ade_k;
  j["min_fde_k"] = r.min_fde_k;
  j["l2_at"] = r.l2_at;
  j["collision_rate"] = r.collision_rate;
  j["dac"] = r.dac;
  j["ep"] = r.ep;
  j["ttc_ok"] = r.ttc_ok;
  j["comfort_ok"] = r.comfort_ok;
  j["mini_pdms"] = r.mini_pdms;
  j["mode_spread"] = r.mode_spread;
  j["note"] = "mini_pdms is a desk-scale analog, not the official PDMS";
  return j;
}

}  // namespace

std::string report_json(const MetricsReport& report) { return report_to_json(report).dump(2); }

void write_per_scenario(const MetricsReport& report, std::ostream& out) {
  for (const auto& s : report.per_scenario) {
    Json j;
    j["scenario_id"] = s.scenario_id;
    j["selected"] = s.selected;
    j["ade"] = s.ade;
    j["fde"] = s.fde;
    j["min_ade"] = s.min_ade;
    j["min_fde"] = s.min_fde;
    j["l2_at"] = s.l2_at;
    j["collision"] = s.collision;
    j["dac"] = s.dac;
    j["ep"] = s.ep;
    j["ttc_ok"] = s.ttc_ok;
    j["comfort_ok"] = s.comfort_ok;
    j["pdms"] = s.pdms;
    j["mode_spread"] = s.mode_spread;
    out << j.dump() << "\n";
  }
}

// ---------------------------------------------------------------------------
// Ablation

void AblationGrid::validate() const {
  if (axes.empty()) throw ConfigError("ablation grid has no axes");
  std::set<std::string> seen;
  for (const auto& [key, values] : axes) {
    const auto* k = cli::find_key(key);
    if (k == nullptr) throw ConfigError("ablation axis '" + key + "' is not a config key");
    if (!seen.insert(k->name).second) throw ConfigError("ablation axis '" + key + "' repeated");
    if (values.empty()) throw ConfigError("ablation axis '" + key + "' has no values");
  }
}

std::vector<std::vector<std::pair<std::string, std::string>>> AblationGrid::cells() const {
  validate();
  std::vector<std::vector<std::pair<std::string, std::string>>> out{{}};
  for (const auto& [key, values] : axes) {
    std::vector<std::vector<std::pair<std::string, std::string>>> next;
    for (const auto& prefix : out) {
      for (const auto& v : values) {
        auto cell = prefix;
        cell.emplace_back(key, v);
        next.push_back(std::move(cell));
      }
    }
    out = std::move(next);
  }
  return out;
}

void AblationGrid::add_axis(const std::string& spec) {
  const auto eq = spec.find('=');
  if (eq == std::string::npos || eq == 0) throw UsageError("axis must look like key=v1,v2: '" + spec + "'");
  const std::string key = spec.substr(0, eq);
  const std::string rest = spec.substr(eq + 1);
  const char sep = rest.find('|') != std::string::npos ? '|' : ',';
  std::vector<std::string> values;
  std::stringstream ss(rest);
  std::string item;
  while (std::getline(ss, item, sep)) values.push_back(item);
  if (cli::find_key(key) == nullptr) throw UsageError("unknown ablation key '" + key + "'");
  axes.emplace_back(key, std::move(values));
}

AblationGrid default_ablation_grid_k_mask() {
  AblationGrid g;
  g.axes = {{"wm_use_mask_tokens", {"true", "false"}}, {"num_modes", {"1", "4", "8", "10"}}};
  return g;
}

AblationGrid default_ablation_grid_depth() {
  AblationGrid g;
  g.axes = {{"decoder_depth", {"2", "3"}}};
  return g;
}

AblationGrid default_ablation_grid_steps(const scenario::WorldSpec& spec) {
  AblationGrid g;
  const std::string tf = std::to_string(spec.future_len);
  g.axes = {{"wm_prediction_steps", {tf, std::to_string(spec.future_len / 2) + "," + tf}}};
  return g;
}

std::vector<AblationRow> run_ablation(const AblationGrid& grid, const cli::RunConfig& base,
                                      const std::vector<scenario::ScenarioRecord>& train_records,
                                      const std::vector<scenario::ScenarioRecord>& eval_records,
                                      const AblationOptions& options) {
  if (train_records.empty() || eval_records.empty()) throw DataError("ablation needs training and evaluation data");
  std::vector<AblationRow> rows;
  int index = 0;
  for (const auto& cell : grid.cells()) {
    AblationRow row;
    row.settings = cell;
    std::string label;
    for (const auto& [k, v] : cell) label += (label.empty() ? "" : " ") + k + "=" + v;
    if (options.log != nullptr) *options.log << "[ablate] cell " << index << ": " << label << std::endl;
    try {
      cli::RunConfig cfg = base;
      for (const auto& [k, v] : cell) cli::apply_override(cfg, k, v);
      cfg.validate();
      const auto mw = cfg.map_world();
      std::vector<model::Example> examples;
      examples.reserve(train_records.size());
      for (const auto& r : train_records) examples.push_back(model::make_example(r, mw.world, mw.model, mw.world_model));
      model::MapWorldModel<float> net(mw, cfg.seed);
      train::Trainer trainer(net, cfg.train, cfg.seed, cli::architecture_hash(cfg));
      std::filesystem::path run_dir;
      if (!options.run_root.empty()) {
        run_dir = options.run_root / ("cell" + std::to_string(index));
        std::filesystem::create_directories(run_dir);
        std::ofstream(run_dir / "config.cfg") << cli::serialize(cfg);
      }
      const auto logs = trainer.train(examples, run_dir);
      if (logs.empty()) throw TrainingError("total", "no training steps were run");
      row.final_loss = logs.back().total;
      const auto wm = logs.back().components.find("wm");
      row.final_wm_loss = wm == logs.back().components.end() ? 0.0 : wm->second;
      row.metrics = evaluate(net, eval_records, cfg.eval, options.noise_seed);
      row.ok = true;
    } catch (const TrainingError& e) {
      row.error = "non-finite or failed training in component '" + e.component() + "': " + e.what();
    } catch (const std::exception& e) {
      row.error = e.what();
    }
    if (options.log != nullptr) {
      if (row.ok) {
        *options.log << "[ablate]   ok loss=" << row.final_loss << " mini_pdms=" << row.metrics.mini_pdms << std::endl;
      } else {
        *options.log << "[ablate]   FAILED: " << row.error << std::endl;
      }
    }
    rows.push_back(std::move(row));
    ++index;
  }
  return rows;
}

std::vector<std::string> ablation_metric_columns() {
  return {"ade",   "fde",    "min_ade_k",  "min_fde_k", "l2_1s",      "l2_2s",       "l2_3s",
          "l2_4s", "collision_rate", "dac", "ep",       "ttc_ok",     "comfort_ok",  "mini_pdms",
          "mode_spread", "final_loss", "final_wm_loss"};
}

void write_ablation_table(const AblationGrid& grid, const std::vector<AblationRow>& rows, std::ostream& out) {
  for (const auto& [key, values] : grid.axes) out << key << "\t";
  out << "status";
  for (const auto& c : ablation_metric_columns()) out << "\t" << c;
  out << "\terror\n";
  auto l2 = [](const MetricsReport& m, const char* k) {
    const auto it = m.l2_at.find(k);
    return it == m.l2_at.end() ? std::nan("") : it->second;
  };
  for (const auto& row : rows) {
    for (const auto& [k, v] : row.settings) out << v << "\t";
    out << (row.ok ? "ok" : "failed");
    const auto& m = row.metrics;
    const std::vector<double> values{m.ade,  m.fde,           m.min_ade_k,     m.min_fde_k,      l2(m, "1s"),
                                     l2(m, "2s"), l2(m, "3s"), l2(m, "4s"),    m.collision_rate, m.dac,
                                     m.ep,   m.ttc_ok,        m.comfort_ok,    m.mini_pdms,      m.mode_spread,
                                     row.final_loss, row.final_wm_loss};
    for (double v : values) {
      out << "\t";
      if (row.ok && std::isfinite(v)) {
        out << v;
      } else {
        out << "nan";
      }
    }
    std::string err = row.error;
    std::replace(err.begin(), err.end(), '\t', ' ');
    std::replace(err.begin(), err.end(), '\n', ' ');
    out << "\t" << err << "\n";
  }
}

// ---------------------------------------------------------------------------
// Plotting

namespace {

// Plots are about 512 px wide whatever the grid size.
int pixels_per_cell(const scenario::WorldSpec& spec) { return std::max(2, 512 / spec.grid_size); }

cv::Vec3b class_color(std::uint8_t cls) {
  switch (cls) {
    case scenario::kDrivable:
      return {90, 90, 90};
    case scenario::kLaneMarking:
      return {230, 230, 230};
    case scenario::kAgent:
      return {200, 120, 40};
    default:
      return {30, 30, 30};
  }
}

cv::Mat render_grid(const scenario::SemanticGrid& g, int px) {
  cv::Mat img(g.rows * px, g.cols * px, CV_8UC3);
  for (int r = 0; r < g.rows; ++r) {
    for (int c = 0; c < g.cols; ++c) {
      // Forward (+row) points up, left (+col) points left.
      const int y0 = (g.rows - 1 - r) * px;
      const int x0 = (g.cols - 1 - c) * px;
      img(cv::Rect(x0, y0, px, px)).setTo(class_color(g.at(r, c)));
    }
  }
  return img;
}

cv::Point to_pixel(const Vec2& p, const scenario::WorldSpec& spec, int px) {
  const double row = p.x / spec.cell_size + spec.grid_size / 2.0;
  const double col = p.y / spec.cell_size + spec.grid_size / 2.0;
  return {static_cast<int>(std::lround((spec.grid_size - col) * px)),
          static_cast<int>(std::lround((spec.grid_size - row) * px))};
}

void draw_polyline(cv::Mat& img, const std::vector<Vec2>& pts, const scenario::WorldSpec& spec, cv::Scalar color,
                   int thickness) {
  std::vector<cv::Point> px;
  const int scale = pixels_per_cell(spec);
  px.push_back(to_pixel({0.0, 0.0}, spec, scale));
  for (const auto& p : pts) px.push_back(to_pixel(p, spec, scale));
  cv::polylines(img, px, false, color, thickness, cv::LINE_AA);
}

Json points_json(const std::vector<Vec2>& pts) {
  Json a = Json::array();
  for (const auto& p : pts) a.push_back({p.x, p.y});
  return a;
}

}  // namespace

std::string plot_sidecar_json(const scenario::ScenarioRecord& record, const Prediction& prediction) {
  Json j;
  j["scenario_id"] = record.scenario_id;
  j["num_modes"] = prediction.modes.size();
  j["selected"] = prediction.selected;
  Json lines = Json::array();
  lines.push_back({{"kind", "history"}, {"points", points_json(record.history)}});
  lines.push_back({{"kind", "gt_future"}, {"points", points_json(record.gt_future)}});
  Json endpoints = Json::array();
  for (std::size_t k = 0; k < prediction.modes.size(); ++k) {
    const double w = k < prediction.weights.size() ? prediction.weights[k] : 0.0;
    lines.push_back({{"kind", "mode"},
                     {"index", k},
                     {"weight", w},
                     {"selected", static_cast<int>(k) == prediction.selected},
                     {"points", points_json(prediction.modes[k])}});
    endpoints.push_back({prediction.modes[k].back().x, prediction.modes[k].back().y});
  }
  j["polylines"] = lines;
  j["mode_polylines"] = prediction.modes.size();
  j["endpoints"] = endpoints;
  j["endpoint_spread"] = mean_pairwise_endpoint_distance(prediction.modes);
  j["future_inset"] = !prediction.future_bev.empty();
  return j.dump(2);
}

void plot_rollout(const scenario::ScenarioRecord& record, const scenario::WorldSpec& spec,
                  const Prediction& prediction, const std::filesystem::path& out_path) {
  if (prediction.modes.empty() || prediction.selected < 0 ||
      prediction.selected >= static_cast<int>(prediction.modes.size())) {
    throw DataError("plot needs at least one mode and a valid selection");
  }
  cv::Mat img = render_grid(record.bev_current, pixels_per_cell(spec));
  const double wmax = prediction.weights.empty()
                          ? 1.0
                          : std::max(1e-12, *std::max_element(prediction.weights.begin(), prediction.weights.end()));
  for (std::size_t k = 0; k < prediction.modes.size(); ++k) {
    if (static_cast<int>(k) == prediction.selected) continue;
    const double w = k < prediction.weights.size() ? prediction.weights[k] / wmax : 1.0;
    const double a = 0.3 + 0.7 * w;
    draw_polyline(img, prediction.modes[k], spec, cv::Scalar(0, 140 * a + 40, 255 * a), 1);
  }
  draw_polyline(img, record.gt_future, spec, cv::Scalar(60, 220, 60), 2);
  draw_polyline(img, prediction.modes[static_cast<std::size_t>(prediction.selected)], spec, cv::Scalar(40, 40, 255), 3);
  std::vector<Vec2> hist(record.history.begin(), record.history.end());
  if (!hist.empty()) draw_polyline(img, hist, spec, cv::Scalar(255, 220, 0), 2);

  if (!prediction.future_bev.empty()) {
    const auto& fut = prediction.future_bev[static_cast<std::size_t>(prediction.selected)];
    const int px = std::max(1, pixels_per_cell(spec) / 4);
    cv::Mat inset = render_grid(fut, px);
    const int x0 = img.cols - inset.cols - 4;
    inset.copyTo(img(cv::Rect(x0, 4, inset.cols, inset.rows)));
    cv::rectangle(img, cv::Rect(x0 - 1, 3, inset.cols + 2, inset.rows + 2), cv::Scalar(255, 255, 255), 1);
  }

  if (out_path.has_parent_path()) {
    std::error_code ec;
    std::filesystem::create_directories(out_path.parent_path(), ec);
  }
  bool written = false;
  try {
    written = cv::imwrite(out_path.string(), img);
  } catch (const cv::Exception& e) {
    throw IoError("cannot write plot " + out_path.string() + ": " + e.what());
  }
  if (!written) throw IoError("cannot write plot " + out_path.string());
  std::ofstream side(out_path.string() + ".json");
  if (!side) throw IoError("cannot write plot sidecar " + out_path.string() + ".json");
  side << plot_sidecar_json(record, prediction) << "\n";
}

}  // namespace mapworld::eval
