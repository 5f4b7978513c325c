#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "mapworld/eval/metrics.hpp"
#include "mapworld/model/map_world.hpp"
#include "mapworld/train/trainer.hpp"

namespace mapworld::cli {

struct PathsConfig {
  std::string data_root;   // default from MAPWORLD_DATA_ROOT, else "data"
  std::string train_data;  // relative paths resolve against data_root
  std::string eval_data;
  std::string run_dir = "runs/default";

  bool operator==(const PathsConfig&) const = default;
};

/// Fully resolved configuration of a run.
struct RunConfig {
  std::uint64_t seed = 0;
  scenario::WorldSpec world;
  model::ModelConfig model;
  model::WorldModelConfig world_model;
  model::ObjectiveConfig loss;
  train::TrainConfig train;
  eval::MetricThresholds eval;
  PathsConfig paths;

  RunConfig();
  model::MapWorldConfig map_world() const;
  void validate() const;
  std::filesystem::path resolve_data(const std::string& path) const;

  bool operator==(const RunConfig&) const = default;
};

/// One addressable config entry. Section "" holds top-level keys.
struct ConfigKey {
  std::string section;
  std::string name;
  std::string help;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;

  std::string qualified() const { return section.empty() ? name : section + "." + name; }
};

/// Every key, in serialization order. Bare names are unique across sections.
const std::vector<ConfigKey>& config_keys();

/// Looks up "section.key" or a bare key. Returns nullptr if unknown.
const ConfigKey* find_key(const std::string& name);

/// key=value text with [section] headers; '#' starts a comment.
std::string serialize(const RunConfig& cfg);

/// Applies a config text on top of `base`. Throws ConfigError naming the
/// offending line for unknown sections/keys or unparsable values.
RunConfig parse(const std::string& text, RunConfig base = {});
RunConfig load_file(const std::filesystem::path& path, RunConfig base = {});

/// Sets one key by qualified or bare name; throws UsageError for unknown keys.
void apply_override(RunConfig& cfg, const std::string& name, const std::string& value);

/// FNV-1a over the serialized world, model and world_model sections, minus the
/// inference-time noise keys. Checkpoints refuse to load under a different hash.
std::uint64_t architecture_hash(const RunConfig& cfg);

}  // namespace mapworld::cli
