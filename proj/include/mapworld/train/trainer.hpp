#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#include "mapworld/model/map_world.hpp"

namespace mapworld::train {

using model::Example;
using model::MapWorldModel;

struct TrainConfig {
  int steps = 2000;          // used when epochs == 0
  int epochs = 0;            // > 0 overrides steps with epochs * ceil(N / batch_size)
  int batch_size = 4;
  double learning_rate = 6e-4;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::string optimizer = "adamw";
  bool cosine_schedule = false;
  double grad_clip_norm = 1.0;  // <= 0 disables clipping
  int checkpoint_every = 500;   // 0 = only the final checkpoint
  int log_every = 1;

  void validate() const;
  int total_steps(std::size_t dataset_size) const;
  bool operator==(const TrainConfig&) const = default;
};

/// Decoupled-weight-decay Adam over every tensor of a ParameterSet.
class AdamW {
 public:
  AdamW(nn::ParameterSet<float>& params, const TrainConfig& cfg);

  /// Applies one update from the accumulated gradients.
  void step(double lr);

  std::int64_t t() const { return t_; }
  std::vector<ad::Matrix<float>>& first_moment() { return m_; }
  std::vector<ad::Matrix<float>>& second_moment() { return v_; }
  const std::vector<ad::Matrix<float>>& first_moment() const { return m_; }
  const std::vector<ad::Matrix<float>>& second_moment() const { return v_; }
  void set_t(std::int64_t t) { t_ = t; }
  /// Number of distinct parameter tensors registered (each exactly once).
  std::size_t num_groups() const { return params_.size(); }
  const std::vector<ad::Parameter<float>*>& groups() const { return params_; }

 private:
  std::vector<ad::Parameter<float>*> params_;
  std::vector<ad::Matrix<float>> m_;
  std::vector<ad::Matrix<float>> v_;
  TrainConfig cfg_;
  std::int64_t t_ = 0;
};

/// Scales gradients in place so their global l2 norm is at most `max_norm`.
/// Returns the norm before clipping.
double clip_grad_norm(nn::ParameterSet<float>& params, double max_norm);

struct StepLog {
  int step = 0;  // 1-based index of the completed step
  double total = 0.0;
  std::map<std::string, double> components;
  double lr = 0.0;
  double grad_norm = 0.0;
};

std::string to_json_line(const StepLog& log);

struct CheckpointMeta {
  std::uint64_t config_hash = 0;
  std::int64_t step = 0;
  std::string rng_state;
  bool hash_matches = true;  // set by load
};

inline constexpr char kCheckpointMagic[8] = {'M', 'A', 'P', 'W', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Parameters (and the optimizer moments when `opt` is given) plus metadata.
void save_checkpoint(const std::filesystem::path& path, const nn::ParameterSet<float>& params, const AdamW* opt,
                     const CheckpointMeta& meta);

/// Restores into an already-built model. Throws ShapeError naming the first
/// mismatched parameter, IntegrityError on checksum failure, FormatError on bad magic.
/// A config-hash mismatch prints a warning to stderr and sets hash_matches = false.
CheckpointMeta load_checkpoint(const std::filesystem::path& path, nn::ParameterSet<float>& params, AdamW* opt,
                               std::uint64_t expected_hash);

/// Owns the optimization state for one training run.
class Trainer {
 public:
  Trainer(MapWorldModel<float>& model, const TrainConfig& cfg, std::uint64_t seed, std::uint64_t config_hash);

  /// Dataset indices of batch `step` (0-based): a per-epoch permutation drawn from
  /// (seed, epoch), wrapping around at the epoch end.
  std::vector<std::size_t> batch_indices(int step, std::size_t dataset_size) const;

  StepLog step(const std::vector<Example>& data, int total_steps);

  using StepCallback = std::function<void(const StepLog&)>;
  /// Runs until total_steps(data.size()). With a run directory, writes
  /// metrics.jsonl (appending on resume) and checkpoints there.
  std::vector<StepLog> train(const std::vector<Example>& data, const std::filesystem::path& run_dir = {},
                             const StepCallback& on_step = {});

  void save(const std::filesystem::path& path) const;
  CheckpointMeta resume(const std::filesystem::path& path);

  int steps_done() const { return steps_done_; }
  AdamW& optimizer() { return opt_; }
  double learning_rate(int step, int total_steps) const;

 private:
  MapWorldModel<float>& model_;
  TrainConfig cfg_;
  std::uint64_t seed_;
  std::uint64_t config_hash_;
  AdamW opt_;
  std::mt19937_64 noise_rng_;
  int steps_done_ = 0;
};

/// Fraction of scalar parameters with a nonzero gradient after one backward pass
/// on `batch`; per-tensor zero counts go to `dead` if given.
double gradient_audit(MapWorldModel<float>& model, const std::vector<const Example*>& batch, std::uint64_t seed,
                      std::vector<std::string>* dead = nullptr);

struct GradCheckEntry {
  std::string parameter;
  Eigen::Index index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double rel_error = 0.0;
};

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::vector<GradCheckEntry> entries;
};

/// Compares backprop gradients of the batch total loss with central differences
/// on `n_params` scalar parameters sampled uniformly (without replacement).
/// Relative error is |a - n| / max(|a|, |n|, 1e-6).
GradCheckReport grad_check(MapWorldModel<double>& model, const std::vector<const Example*>& batch, int n_params,
                           double h, std::uint64_t seed);

}  // namespace mapworld::train
