#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "mapworld/scenario/scenario.hpp"
#include "mapworld/scenario/world_spec.hpp"

namespace mapworld::scenario {

inline constexpr std::string_view kDatasetVersion = "mapworld-dataset/1";
inline constexpr std::uint32_t kRecordFormatVersion = 1;
inline constexpr char kManifestFile[] = "manifest.json";

struct DatasetManifest {
  std::string version{kDatasetVersion};
  WorldSpec world_spec;
  std::string split = "train";  // train | val | test
  std::vector<std::string> scenario_ids;
  std::uint64_t master_seed = 0;
  std::vector<int> future_steps;
  std::vector<std::string> templates;

  bool operator==(const DatasetManifest&) const = default;
};

struct Dataset {
  DatasetManifest manifest;
  std::vector<ScenarioRecord> records;
};

/// Generates `count` scenarios cycling through `templates`; scenario i uses
/// derive_seed(master_seed, i).
Dataset generate_dataset(const WorldSpec& spec, const std::vector<Template>& templates, int count,
                         std::uint64_t master_seed, const std::string& split,
                         const std::vector<int>& future_steps = {}, const GeneratorParams& params = {});

/// Writes manifest.json plus one `<id>.rec` per record (layout in docs/dataset_format.md).
void write_dataset(const std::vector<ScenarioRecord>& records, const DatasetManifest& manifest,
                   const std::filesystem::path& root);

/// Lazily reads records of a dataset directory.
class DatasetReader {
 public:
  /// Throws FormatError on unknown manifest version.
  explicit DatasetReader(std::filesystem::path root);

  const DatasetManifest& manifest() const { return manifest_; }
  std::size_t size() const { return manifest_.scenario_ids.size(); }
  /// Throws IntegrityError naming the id if the file is missing or corrupt.
  ScenarioRecord load(std::size_t index) const;

 private:
  std::filesystem::path root_;
  DatasetManifest manifest_;
};

Dataset read_dataset(const std::filesystem::path& root);

DatasetManifest read_manifest(const std::filesystem::path& root);
void write_manifest(const DatasetManifest& manifest, const std::filesystem::path& root);

std::vector<std::uint8_t> encode_record(const ScenarioRecord& record, const WorldSpec& spec);
ScenarioRecord decode_record(const std::vector<std::uint8_t>& bytes, const WorldSpec& spec,
                             const std::string& expected_id);

std::uint64_t fnv1a64(const void* data, std::size_t size, std::uint64_t seed = 0xcbf29ce484222325ULL);

}  // namespace mapworld::scenario
