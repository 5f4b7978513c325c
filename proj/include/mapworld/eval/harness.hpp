#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include "mapworld/cli/config.hpp"
#include "mapworld/eval/metrics.hpp"
#include "mapworld/model/map_world.hpp"
#include "mapworld/scenario/dataset_io.hpp"

namespace mapworld::eval {

/// Planner output for one scenario, in meters.
struct Prediction {
  std::vector<std::vector<Vec2>> modes;  // K trajectories of T_f waypoints
  std::vector<double> weights;           // softmax of the confidence logits
  int selected = 0;                      // highest confidence
  /// Argmax semantics of the last predicted future step, per mode (empty when
  /// the world model was not run).
  std::vector<scenario::SemanticGrid> future_bev;
};

/// Inference forward pass; noise drawn from mt19937_64(noise_seed).
Prediction predict(const model::MapWorldModel<float>& model, const model::Example& ex, std::uint64_t noise_seed,
                   bool run_world_model = false);

/// Refuses evaluation data that could overlap the training data: the split must
/// not be "train", and when `train` is given the master seeds must differ and the
/// scenario ids must be disjoint. Throws DataError.
void check_split_disjoint(const scenario::DatasetManifest& eval_manifest,
                          const scenario::DatasetManifest* train_manifest);

/// Scores given predictions (e.g. an oracle) against their records.
MetricsReport evaluate_predictions(const std::vector<scenario::ScenarioRecord>& records,
                                   const std::vector<Prediction>& predictions, const scenario::WorldSpec& spec,
                                   const MetricThresholds& thresholds);

/// Runs the model on every record. Scenario i draws its noise from
/// derive_seed(noise_seed, i).
MetricsReport evaluate(const model::MapWorldModel<float>& model, const std::vector<scenario::ScenarioRecord>& records,
                       const MetricThresholds& thresholds, std::uint64_t noise_seed);

/// Ground-truth passthrough: every mode equals gt_future.
Prediction oracle_prediction(const scenario::ScenarioRecord& record, int num_modes);

std::string report_json(const MetricsReport& report);
/// One JSON object per line for each scenario.
void write_per_scenario(const MetricsReport& report, std::ostream& out);

/// Named axes over config keys; cells are the cartesian product in axis order
/// (last axis varies fastest).
struct AblationGrid {
  std::vector<std::pair<std::string, std::vector<std::string>>> axes;

  /// Each axis key must resolve to a config key and hold at least one value.
  void validate() const;
  std::vector<std::vector<std::pair<std::string, std::string>>> cells() const;
  /// "key=v1,v2" for scalar keys; list-valued keys separate values with '|'
  /// (e.g. "wm_prediction_steps=8|4,8").
  void add_axis(const std::string& spec);
};

/// Preset grids: modes x mask tokens, decoder depth, and world-model prediction steps.
AblationGrid default_ablation_grid_k_mask();
AblationGrid default_ablation_grid_depth();
AblationGrid default_ablation_grid_steps(const scenario::WorldSpec& spec);

struct AblationRow {
  std::vector<std::pair<std::string, std::string>> settings;
  bool ok = false;
  std::string error;  // diagnosis when !ok
  MetricsReport metrics;
  double final_loss = 0.0;
  double final_wm_loss = 0.0;
};

struct AblationOptions {
  std::uint64_t noise_seed = 1;
  std::filesystem::path run_root;  // per-cell run directories when non-empty
  std::ostream* log = nullptr;
};

/// Trains and evaluates every cell from `base` with the same seeds. A cell that
/// throws (including non-finite losses) is recorded and the grid continues.
std::vector<AblationRow> run_ablation(const AblationGrid& grid, const cli::RunConfig& base,
                                      const std::vector<scenario::ScenarioRecord>& train_records,
                                      const std::vector<scenario::ScenarioRecord>& eval_records,
                                      const AblationOptions& options = {});

/// Tab-separated: one column per axis, then status, metrics, losses, error.
void write_ablation_table(const AblationGrid& grid, const std::vector<AblationRow>& rows, std::ostream& out);
std::vector<std::string> ablation_metric_columns();

/// Writes a PNG of the BEV with history, ground truth and all modes (selected one
/// highlighted, color intensity by weight) plus the predicted future semantics of
/// the selected mode as an inset, and `<out>.json` listing every plotted element.
/// Throws IoError if either file cannot be written.
void plot_rollout(const scenario::ScenarioRecord& record, const scenario::WorldSpec& spec,
                  const Prediction& prediction, const std::filesystem::path& out_path);

/// The sidecar content plot_rollout writes.
std::string plot_sidecar_json(const scenario::ScenarioRecord& record, const Prediction& prediction);

}  // namespace mapworld::eval
