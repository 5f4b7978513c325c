#pragma once

#include <array>
#include <memory>
#include <vector>

#include "mapworld/autodiff/tape.hpp"
#include "mapworld/model/config.hpp"
#include "mapworld/scenario/scenario.hpp"

namespace mapworld::model {

using ad::Matrix;

/// Network-ready view of a ScenarioRecord (all arrays in double; models cast).
struct Example {
  std::vector<int> bev_current;   // H*W class ids, row-major
  std::vector<int> bev_future;    // S*H*W class ids for the configured prediction steps
  Matrix<double> patches;         // [N_bev x p*p*C] one-hot patch features
  Matrix<double> history;         // [T_h x 2] meters
  Matrix<double> gt_future;       // [T_f x 2] meters
  Matrix<double> ego_status;      // [1 x 7]
  Matrix<double> agents;          // [A x 5]
};

/// One-hot patchification: token (tr, tc) holds cells (tr*p + py, tc*p + px) with
/// feature index (py*p + px)*C + class.
Matrix<double> patchify_one_hot(const std::vector<int>& cells, int grid, int patch, int classes);

/// Flat gather index mapping `blocks` stacked [N_bev x p*p*C] decoder outputs to
/// [blocks*H*W x C] per-cell logits.
std::shared_ptr<const std::vector<int>> unpatchify_index(int grid, int patch, int classes, int blocks);

/// Throws DataError if a requested prediction step has no stored future grid or a
/// class id is out of range.
Example make_example(const scenario::ScenarioRecord& record, const scenario::WorldSpec& spec,
                     const ModelConfig& model, const WorldModelConfig& wm);

}  // namespace mapworld::model
