#include "mapworld/scenario/dataset_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <iterator>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "mapworld/errors.hpp"

static_assert(std::endian::native == std::endian::little, "record layout assumes a little-endian host");

namespace mapworld::scenario {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr char kMagic[8] = {'M', 'A', 'P', 'W', 'R', 'E', 'C', '\x01'};

class Writer {
 public:
  template <typename T>
  void put(T v) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
    bytes_.insert(bytes_.end(), p, p + sizeof(T));
  }
  void put_bytes(const void* data, std::size_t n) {
    const auto* p = static_cast<const std::uint8_t*>(data);
    bytes_.insert(bytes_.end(), p, p + n);
  }
  std::vector<std::uint8_t>& bytes() { return bytes_; }

 private:
  std::vector<std::uint8_t> bytes_;
};

class Reader {
 public:
  Reader(const std::vector<std::uint8_t>& bytes, std::size_t limit, std::string id)
      : bytes_(bytes), limit_(limit), id_(std::move(id)) {}

  template <typename T>
  T get() {
    T v;
    get_bytes(&v, sizeof(T));
    return v;
  }
  void get_bytes(void* out, std::size_t n) {
    if (pos_ + n > limit_) throw IntegrityError(id_, "record '" + id_ + "' is truncated");
    std::memcpy(out, bytes_.data() + pos_, n);
    pos_ += n;
  }
  std::size_t position() const { return pos_; }

 private:
  const std::vector<std::uint8_t>& bytes_;
  std::size_t limit_;
  std::string id_;
  std::size_t pos_ = 0;
};

void put_agent(Writer& w, const AgentState& a) {
  for (double v : {a.x, a.y, a.heading, a.speed, a.valid}) w.put<double>(v);
}

AgentState get_agent(Reader& r) {
  AgentState a;
  a.x = r.get<double>();
  a.y = r.get<double>();
  a.heading = r.get<double>();
  a.speed = r.get<double>();
  a.valid = r.get<double>();
  return a;
}

json spec_to_json(const WorldSpec& s) {
  return {{"grid_size", s.grid_size},     {"cell_size", s.cell_size},   {"rate_hz", s.rate_hz},
          {"history_len", s.history_len}, {"future_len", s.future_len}, {"num_classes", s.num_classes},
          {"max_agents", s.max_agents}};
}

WorldSpec spec_from_json(const json& j) {
  WorldSpec s;
  s.grid_size = j.at("grid_size").get<int>();
  s.cell_size = j.at("cell_size").get<double>();
  s.rate_hz = j.at("rate_hz").get<double>();
  s.history_len = j.at("history_len").get<int>();
  s.future_len = j.at("future_len").get<int>();
  s.num_classes = j.at("num_classes").get<int>();
  s.max_agents = j.at("max_agents").get<int>();
  return s;
}

}  // namespace

std::uint64_t fnv1a64(const void* data, std::size_t size, std::uint64_t seed) {
  const auto* p = static_cast<const std::uint8_t*>(data);
  std::uint64_t h = seed;
  for (std::size_t i = 0; i < size; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::vector<std::uint8_t> encode_record(const ScenarioRecord& rec, const WorldSpec& spec) {
  const std::size_t cells = static_cast<std::size_t>(spec.num_cells());
  if (rec.bev_current.cells.size() != cells || rec.history.size() != static_cast<std::size_t>(spec.history_len) ||
      rec.gt_future.size() != static_cast<std::size_t>(spec.future_len) ||
      rec.agents.size() != static_cast<std::size_t>(spec.max_agents) ||
      rec.agent_future.size() != static_cast<std::size_t>(spec.future_len) ||
      rec.bev_future.size() != rec.future_steps.size()) {
    throw ShapeError("record '" + rec.scenario_id + "' does not match the world spec");
  }
  Writer w;
  w.put_bytes(kMagic, sizeof(kMagic));
  w.put<std::uint32_t>(kRecordFormatVersion);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(spec.grid_size));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(spec.num_classes));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(spec.history_len));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(spec.future_len));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(spec.max_agents));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(rec.future_steps.size()));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(rec.template_kind));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(rec.scenario_id.size()));
  w.put_bytes(rec.scenario_id.data(), rec.scenario_id.size());

  for (int s : rec.future_steps) w.put<std::int32_t>(s);
  for (double c : rec.command) w.put<double>(c);
  w.put_bytes(rec.bev_current.cells.data(), cells);
  for (const auto& g : rec.bev_future) {
    if (g.cells.size() != cells) throw ShapeError("future grid size mismatch in '" + rec.scenario_id + "'");
    w.put_bytes(g.cells.data(), cells);
  }
  for (const Vec2& p : rec.history) {
    w.put<double>(p.x);
    w.put<double>(p.y);
  }
  for (const Vec2& p : rec.gt_future) {
    w.put<double>(p.x);
    w.put<double>(p.y);
  }
  for (double v : rec.ego_status) w.put<double>(v);
  for (const AgentState& a : rec.agents) put_agent(w, a);
  for (const auto& step : rec.agent_future) {
    if (step.size() != static_cast<std::size_t>(spec.max_agents)) {
      throw ShapeError("agent_future slot count mismatch in '" + rec.scenario_id + "'");
    }
    for (const AgentState& a : step) put_agent(w, a);
  }
  const std::uint64_t checksum = fnv1a64(w.bytes().data(), w.bytes().size());
  w.put<std::uint64_t>(checksum);
  return std::move(w.bytes());
}

ScenarioRecord decode_record(const std::vector<std::uint8_t>& bytes, const WorldSpec& spec,
                             const std::string& expected_id) {
  if (bytes.size() < sizeof(kMagic) + 8) {
    throw IntegrityError(expected_id, "record '" + expected_id + "' is truncated");
  }
  const std::size_t body = bytes.size() - sizeof(std::uint64_t);
  std::uint64_t stored;
  std::memcpy(&stored, bytes.data() + body, sizeof(stored));
  if (fnv1a64(bytes.data(), body) != stored) {
    throw IntegrityError(expected_id, "record '" + expected_id + "' failed its checksum");
  }

  Reader r(bytes, body, expected_id);
  char magic[8];
  r.get_bytes(magic, sizeof(magic));
  if (std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw FormatError("record '" + expected_id + "' has bad magic bytes");
  }
  const auto version = r.get<std::uint32_t>();
  if (version != kRecordFormatVersion) {
    throw FormatError("record '" + expected_id + "' has unsupported format version " + std::to_string(version));
  }
  const auto grid = r.get<std::uint32_t>();
  const auto classes = r.get<std::uint32_t>();
  const auto th = r.get<std::uint32_t>();
  const auto tf = r.get<std::uint32_t>();
  const auto agents = r.get<std::uint32_t>();
  const auto nfut = r.get<std::uint32_t>();
  const auto tmpl = r.get<std::uint32_t>();
  const auto id_len = r.get<std::uint32_t>();
  if (static_cast<int>(grid) != spec.grid_size || static_cast<int>(classes) != spec.num_classes ||
      static_cast<int>(th) != spec.history_len || static_cast<int>(tf) != spec.future_len ||
      static_cast<int>(agents) != spec.max_agents) {
    throw FormatError("record '" + expected_id + "' shapes do not match the manifest world spec");
  }
  if (tmpl > static_cast<std::uint32_t>(Template::kCurve) || nfut > tf) {
    throw IntegrityError(expected_id, "record '" + expected_id + "' has an invalid header");
  }

  ScenarioRecord rec;
  rec.scenario_id.resize(id_len);
  r.get_bytes(rec.scenario_id.data(), id_len);
  if (rec.scenario_id != expected_id) {
    throw IntegrityError(expected_id, "record file for '" + expected_id + "' contains id '" + rec.scenario_id + "'");
  }
  rec.template_kind = static_cast<Template>(tmpl);
  for (std::uint32_t i = 0; i < nfut; ++i) rec.future_steps.push_back(r.get<std::int32_t>());
  for (double& c : rec.command) c = r.get<double>();

  auto read_grid = [&]() {
    SemanticGrid g(spec.grid_size, spec.grid_size);
    r.get_bytes(g.cells.data(), g.cells.size());
    for (std::uint8_t c : g.cells) {
      if (c >= spec.num_classes) {
        throw IntegrityError(expected_id, "record '" + expected_id + "' contains invalid class id " + std::to_string(c));
      }
    }
    return g;
  };
  rec.bev_current = read_grid();
  for (std::uint32_t i = 0; i < nfut; ++i) rec.bev_future.push_back(read_grid());
  for (std::uint32_t i = 0; i < th; ++i) {
    const double x = r.get<double>();
    rec.history.push_back({x, r.get<double>()});
  }
  for (std::uint32_t i = 0; i < tf; ++i) {
    const double x = r.get<double>();
    rec.gt_future.push_back({x, r.get<double>()});
  }
  for (double& v : rec.ego_status) v = r.get<double>();
  for (std::uint32_t i = 0; i < agents; ++i) rec.agents.push_back(get_agent(r));
  rec.agent_future.resize(tf);
  for (std::uint32_t t = 0; t < tf; ++t) {
    for (std::uint32_t i = 0; i < agents; ++i) rec.agent_future[t].push_back(get_agent(r));
  }
  if (r.position() != body) {
    throw IntegrityError(expected_id, "record '" + expected_id + "' has trailing bytes");
  }
  return rec;
}

Dataset generate_dataset(const WorldSpec& spec, const std::vector<Template>& templates, int count,
                         std::uint64_t master_seed, const std::string& split, const std::vector<int>& future_steps,
                         const GeneratorParams& params) {
  if (templates.empty()) throw ConfigError("at least one template is required");
  if (count < 0) throw ConfigError("count must be >= 0");
  Dataset ds;
  ds.manifest.world_spec = spec;
  ds.manifest.split = split;
  ds.manifest.master_seed = master_seed;
  ds.manifest.future_steps = future_steps.empty() ? std::vector<int>{spec.future_len} : future_steps;
  for (Template t : templates) ds.manifest.templates.emplace_back(template_name(t));
  for (int i = 0; i < count; ++i) {
    const Template t = templates[static_cast<std::size_t>(i) % templates.size()];
    const std::uint64_t seed = derive_seed(master_seed, static_cast<std::uint64_t>(i));
    ScenarioRecord rec = generate_scenario(spec, t, seed, ds.manifest.future_steps, params);
    std::ostringstream id;
    id << split << "-" << std::setw(5) << std::setfill('0') << i << "-" << template_name(t) << "-" << std::hex
       << (seed & 0xffffffffULL);
    rec.scenario_id = id.str();
    ds.manifest.scenario_ids.push_back(rec.scenario_id);
    ds.records.push_back(std::move(rec));
  }
  return ds;
}

void write_manifest(const DatasetManifest& m, const fs::path& root) {
  json j = {{"version", m.version},           {"world_spec", spec_to_json(m.world_spec)},
            {"split", m.split},               {"master_seed", m.master_seed},
            {"future_steps", m.future_steps}, {"templates", m.templates},
            {"scenario_ids", m.scenario_ids}};
  std::ofstream out(root / kManifestFile);
  if (!out) throw IoError("cannot write manifest in " + root.string());
  out << j.dump(2) << "\n";
}

DatasetManifest read_manifest(const fs::path& root) {
  std::ifstream in(root / kManifestFile);
  if (!in) throw IntegrityError("manifest", "missing manifest in " + root.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw FormatError("manifest in " + root.string() + " is not valid JSON: " + e.what());
  }
  DatasetManifest m;
  m.version = j.value("version", "");
  if (m.version != kDatasetVersion) {
    throw FormatError("unsupported dataset version '" + m.version + "' (expected '" + std::string(kDatasetVersion) + "')");
  }
  try {
    m.world_spec = spec_from_json(j.at("world_spec"));
    m.split = j.at("split").get<std::string>();
    m.master_seed = j.at("master_seed").get<std::uint64_t>();
    m.future_steps = j.at("future_steps").get<std::vector<int>>();
    m.templates = j.at("templates").get<std::vector<std::string>>();
    m.scenario_ids = j.at("scenario_ids").get<std::vector<std::string>>();
  } catch (const json::exception& e) {
    throw FormatError("manifest in " + root.string() + " is malformed: " + e.what());
  }
  std::set<std::string> unique(m.scenario_ids.begin(), m.scenario_ids.end());
  if (unique.size() != m.scenario_ids.size()) throw IntegrityError("manifest", "manifest lists duplicate scenario ids");
  return m;
}

void write_dataset(const std::vector<ScenarioRecord>& records, const DatasetManifest& manifest, const fs::path& root) {
  fs::create_directories(root);
  std::set<std::string> listed(manifest.scenario_ids.begin(), manifest.scenario_ids.end());
  for (const ScenarioRecord& rec : records) {
    if (!listed.count(rec.scenario_id)) {
      throw IntegrityError(rec.scenario_id, "record '" + rec.scenario_id + "' is not listed in the manifest");
    }
    const auto bytes = encode_record(rec, manifest.world_spec);
    std::ofstream out(root / (rec.scenario_id + ".rec"), std::ios::binary);
    if (!out) throw IoError("cannot write record " + rec.scenario_id);
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  }
  write_manifest(manifest, root);
}

DatasetReader::DatasetReader(fs::path root) : root_(std::move(root)), manifest_(read_manifest(root_)) {}

ScenarioRecord DatasetReader::load(std::size_t index) const {
  const std::string& id = manifest_.scenario_ids.at(index);
  std::ifstream in(root_ / (id + ".rec"), std::ios::binary);
  if (!in) throw IntegrityError(id, "missing record file for '" + id + "'");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_record(bytes, manifest_.world_spec, id);
}

Dataset read_dataset(const fs::path& root) {
  DatasetReader reader(root);
  Dataset ds;
  ds.manifest = reader.manifest();
  for (std::size_t i = 0; i < reader.size(); ++i) ds.records.push_back(reader.load(i));
  return ds;
}

}  // namespace mapworld::scenario
