#include "mapworld/cli/config.hpp"

#include <charconv>
#include <cstdlib>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "mapworld/errors.hpp"
#include "mapworld/scenario/dataset_io.hpp"

namespace mapworld::cli {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::string fmt_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

double parse_double(const std::string& s) {
  double v = 0.0;
  const std::string t = trim(s);
  auto res = std::from_chars(t.data(), t.data() + t.size(), v);
  if (res.ec != std::errc() || res.ptr != t.data() + t.size()) throw ConfigError("expected a number, got '" + s + "'");
  return v;
}

long long parse_integer(const std::string& s) {
  long long v = 0;
  const std::string t = trim(s);
  auto res = std::from_chars(t.data(), t.data() + t.size(), v);
  if (res.ec != std::errc() || res.ptr != t.data() + t.size()) throw ConfigError("expected an integer, got '" + s + "'");
  return v;
}

int parse_int(const std::string& s) {
  const long long v = parse_integer(s);
  if (v < INT32_MIN || v > INT32_MAX) throw ConfigError("integer out of range: " + s);
  return static_cast<int>(v);
}

std::uint64_t parse_u64(const std::string& s) {
  std::uint64_t v = 0;
  const std::string t = trim(s);
  auto res = std::from_chars(t.data(), t.data() + t.size(), v);
  if (res.ec != std::errc() || res.ptr != t.data() + t.size()) throw ConfigError("expected an unsigned integer, got '" + s + "'");
  return v;
}

bool parse_bool(const std::string& s) {
  const std::string t = trim(s);
  if (t == "true" || t == "1") return true;
  if (t == "false" || t == "0") return false;
  throw ConfigError("expected true/false, got '" + s + "'");
}

std::string fmt_bool(bool b) { return b ? "true" : "false"; }

std::string fmt_ints(const std::vector<int>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + std::to_string(v[i]);
  return out;
}

std::vector<int> parse_ints(const std::string& s) {
  std::vector<int> out;
  if (trim(s).empty()) return out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(parse_int(item));
  return out;
}

template <typename F>
ConfigKey int_key(std::string section, std::string name, std::string help, F field) {
  return {std::move(section), std::move(name), std::move(help),
          [field](const RunConfig& c) { return std::to_string(field(c)); },
          [field](RunConfig& c, const std::string& v) { field(c) = parse_int(v); }};
}

template <typename F>
ConfigKey dbl_key(std::string section, std::string name, std::string help, F field) {
  return {std::move(section), std::move(name), std::move(help),
          [field](const RunConfig& c) { return fmt_double(field(c)); },
          [field](RunConfig& c, const std::string& v) { field(c) = parse_double(v); }};
}

template <typename F>
ConfigKey bool_key(std::string section, std::string name, std::string help, F field) {
  return {std::move(section), std::move(name), std::move(help),
          [field](const RunConfig& c) { return fmt_bool(field(c)); },
          [field](RunConfig& c, const std::string& v) { field(c) = parse_bool(v); }};
}

template <typename F>
ConfigKey str_key(std::string section, std::string name, std::string help, F field) {
  return {std::move(section), std::move(name), std::move(help),
          [field](const RunConfig& c) { return field(c); },
          [field](RunConfig& c, const std::string& v) { field(c) = trim(v); }};
}

#define MW_FIELD(expr) [](auto& c) -> auto& { return c.expr; }

std::vector<ConfigKey> build_keys() {
  std::vector<ConfigKey> k;
  k.push_back({"", "seed", "master seed for initialization, batching and noise",
               [](const RunConfig& c) { return std::to_string(c.seed); },
               [](RunConfig& c, const std::string& v) { c.seed = parse_u64(v); }});

  k.push_back(int_key("world", "grid_size", "BEV grid side in cells", MW_FIELD(world.grid_size)));
  k.push_back(dbl_key("world", "cell_size", "meters per cell", MW_FIELD(world.cell_size)));
  k.push_back(dbl_key("world", "rate_hz", "waypoint rate", MW_FIELD(world.rate_hz)));
  k.push_back(int_key("world", "history_len", "history waypoints T_h", MW_FIELD(world.history_len)));
  k.push_back(int_key("world", "future_len", "future waypoints T_f", MW_FIELD(world.future_len)));
  k.push_back(int_key("world", "num_classes", "semantic classes", MW_FIELD(world.num_classes)));
  k.push_back(int_key("world", "max_agents", "agent slots", MW_FIELD(world.max_agents)));

  k.push_back(int_key("model", "d", "model width", MW_FIELD(model.d)));
  k.push_back(int_key("model", "patch", "patch side in cells", MW_FIELD(model.patch)));
  k.push_back(int_key("model", "heads", "attention heads", MW_FIELD(model.heads)));
  k.push_back(int_key("model", "encoder_blocks", "BEV self-attention blocks", MW_FIELD(model.encoder_blocks)));
  k.push_back(int_key("model", "history_blocks", "history self-attention blocks", MW_FIELD(model.history_blocks)));
  k.push_back(int_key("model", "ffn_mult", "feed-forward width multiplier", MW_FIELD(model.ffn_mult)));
  k.push_back(int_key("model", "num_modes", "trajectory modes K", MW_FIELD(model.num_modes)));
  k.push_back(dbl_key("model", "noise_factor", "scale of the mode query noise", MW_FIELD(model.noise_factor)));
  k.push_back(int_key("model", "decoder_depth", "refinement layers", MW_FIELD(model.decoder_depth)));
  k.push_back(dbl_key("model", "attention_radius", "deformable-attention radius in token cells",
                      MW_FIELD(model.attention_radius)));
  k.push_back({"model", "fusion", "mean_pool or flatten",
               [](const RunConfig& c) { return std::string(c.model.fusion == model::Fusion::kMeanPool ? "mean_pool" : "flatten"); },
               [](RunConfig& c, const std::string& v) {
                 const std::string t = trim(v);
                 if (t == "mean_pool") {
                   c.model.fusion = model::Fusion::kMeanPool;
                 } else if (t == "flatten") {
                   c.model.fusion = model::Fusion::kFlatten;
                 } else {
                   throw ConfigError("fusion must be mean_pool or flatten, got '" + v + "'");
                 }
               }});
  k.push_back(bool_key("model", "noise_at_inference", "sample mode noise at evaluation", MW_FIELD(model.noise_at_inference)));
  k.push_back(bool_key("model", "positional", "positional embeddings", MW_FIELD(model.positional)));
  k.push_back(bool_key("model", "zero_init_refinement", "zero-initialize the refinement head",
                       MW_FIELD(model.zero_init_refinement)));
  k.push_back(dbl_key("model", "coord_scale", "meters per normalized unit", MW_FIELD(model.coord_scale)));

  k.push_back(int_key("world_model", "wm_layers", "world-model layers", MW_FIELD(world_model.layers)));
  k.push_back(bool_key("world_model", "wm_use_mask_tokens", "learned mask-token queries",
                       MW_FIELD(world_model.use_mask_tokens)));
  k.push_back(int_key("world_model", "wm_feature_scales", "1 or 2 BEV scales in the memory",
                           MW_FIELD(world_model.feature_scales)));
  k.push_back({"world_model", "wm_prediction_steps", "comma-separated 1-based future steps (empty = T_f)",
               [](const RunConfig& c) { return fmt_ints(c.world_model.prediction_steps); },
               [](RunConfig& c, const std::string& v) { c.world_model.prediction_steps = parse_ints(v); }});

  k.push_back(dbl_key("loss", "lambda_traj", "trajectory weight", MW_FIELD(loss.weights.traj)));
  k.push_back(dbl_key("loss", "lambda_agent", "agent weight", MW_FIELD(loss.weights.agent)));
  k.push_back(dbl_key("loss", "lambda_semantic", "current-map weight", MW_FIELD(loss.weights.semantic)));
  k.push_back(dbl_key("loss", "lambda_cls", "mode classification weight", MW_FIELD(loss.weights.cls)));
  k.push_back(dbl_key("loss", "lambda_wm", "world-model weight", MW_FIELD(loss.weights.wm)));
  k.push_back(dbl_key("loss", "lambda_intent", "intent weight", MW_FIELD(loss.weights.intent)));
  k.push_back(dbl_key("loss", "focal_gamma", "focal loss gamma", MW_FIELD(loss.focal_gamma)));
  k.push_back(dbl_key("loss", "focal_alpha", "focal loss alpha", MW_FIELD(loss.focal_alpha)));
  k.push_back(bool_key("loss", "average_modes", "average the l1 over all modes", MW_FIELD(loss.average_modes)));
  k.push_back(bool_key("loss", "detach_weights", "stop gradients through path weights", MW_FIELD(loss.detach_weights)));

  k.push_back(int_key("train", "steps", "optimizer steps when epochs is 0", MW_FIELD(train.steps)));
  k.push_back(int_key("train", "epochs", "epochs (overrides steps when > 0)", MW_FIELD(train.epochs)));
  k.push_back(int_key("train", "batch_size", "scenarios per step", MW_FIELD(train.batch_size)));
  k.push_back(dbl_key("train", "learning_rate", "peak learning rate", MW_FIELD(train.learning_rate)));
  k.push_back(dbl_key("train", "weight_decay", "decoupled weight decay", MW_FIELD(train.weight_decay)));
  k.push_back(dbl_key("train", "beta1", "Adam beta1", MW_FIELD(train.beta1)));
  k.push_back(dbl_key("train", "beta2", "Adam beta2", MW_FIELD(train.beta2)));
  k.push_back(dbl_key("train", "adam_eps", "Adam epsilon", MW_FIELD(train.adam_eps)));
  k.push_back(str_key("train", "optimizer", "adamw", MW_FIELD(train.optimizer)));
  k.push_back(bool_key("train", "cosine_schedule", "cosine learning-rate decay", MW_FIELD(train.cosine_schedule)));
  k.push_back(dbl_key("train", "grad_clip_norm", "global gradient norm clip (<= 0 disables)",
                      MW_FIELD(train.grad_clip_norm)));
  k.push_back(int_key("train", "checkpoint_every", "steps between checkpoints", MW_FIELD(train.checkpoint_every)));
  k.push_back(int_key("train", "log_every", "steps between metric lines", MW_FIELD(train.log_every)));

  k.push_back(dbl_key("eval", "ttc_threshold", "minimum time gap in seconds", MW_FIELD(eval.ttc_threshold)));
  k.push_back(dbl_key("eval", "max_accel", "comfort acceleration limit", MW_FIELD(eval.max_accel)));
  k.push_back(dbl_key("eval", "max_jerk", "comfort jerk limit", MW_FIELD(eval.max_jerk)));
  k.push_back(dbl_key("eval", "w_ttc", "score weight of the time-gap term", MW_FIELD(eval.w_ttc)));
  k.push_back(dbl_key("eval", "w_ep", "score weight of progress", MW_FIELD(eval.w_ep)));
  k.push_back(dbl_key("eval", "w_comfort", "score weight of comfort", MW_FIELD(eval.w_comfort)));
  k.push_back(dbl_key("eval", "ego_length", "ego footprint length", MW_FIELD(eval.ego_length)));
  k.push_back(dbl_key("eval", "ego_width", "ego footprint width", MW_FIELD(eval.ego_width)));
  k.push_back(dbl_key("eval", "agent_length", "agent footprint length", MW_FIELD(eval.agent_length)));
  k.push_back(dbl_key("eval", "agent_width", "agent footprint width", MW_FIELD(eval.agent_width)));

  k.push_back(str_key("paths", "data_root", "base for relative data paths", MW_FIELD(paths.data_root)));
  k.push_back(str_key("paths", "train_data", "training dataset file", MW_FIELD(paths.train_data)));
  k.push_back(str_key("paths", "eval_data", "evaluation dataset file", MW_FIELD(paths.eval_data)));
  k.push_back(str_key("paths", "run_dir", "output directory of a run", MW_FIELD(paths.run_dir)));

  std::set<std::string> seen;
  for (const auto& key : k) {
    if (!seen.insert(key.name).second) throw std::logic_error("duplicate config key " + key.name);
  }
  return k;
}

#undef MW_FIELD

}  // namespace

RunConfig::RunConfig() {
  const char* env = std::getenv("MAPWORLD_DATA_ROOT");
  paths.data_root = env != nullptr && *env != '\0' ? env : "data";
}

model::MapWorldConfig RunConfig::map_world() const {
  model::MapWorldConfig m;
  m.world = world;
  m.model = model;
  m.world_model = world_model;
  m.objective = loss;
  return m;
}

void RunConfig::validate() const {
  world.validate();
  model.validate(world);
  world_model.validate(world);
  loss.validate();
  train.validate();
  eval.validate();
}

std::filesystem::path RunConfig::resolve_data(const std::string& path) const {
  std::filesystem::path p(path);
  if (p.is_absolute() || paths.data_root.empty()) return p;
  return std::filesystem::path(paths.data_root) / p;
}

const std::vector<ConfigKey>& config_keys() {
  static const std::vector<ConfigKey> keys = build_keys();
  return keys;
}

const ConfigKey* find_key(const std::string& name) {
  for (const auto& k : config_keys()) {
    if (k.name == name || k.qualified() == name) return &k;
  }
  return nullptr;
}

namespace {

// Inference-time knobs that may differ between training and evaluation.
bool runtime_only(const std::string& name) { return name == "noise_factor" || name == "noise_at_inference"; }

std::string serialize_sections(const RunConfig& cfg, const std::set<std::string>* only) {
  std::ostringstream out;
  std::string current = "\x01";
  for (const auto& k : config_keys()) {
    if (only != nullptr && (only->count(k.section) == 0 || runtime_only(k.name))) continue;
    if (k.section != current) {
      if (!k.section.empty()) out << (out.tellp() > 0 ? "\n" : "") << "[" << k.section << "]\n";
      current = k.section;
    }
    out << k.name << " = " << k.get(cfg) << "\n";
  }
  return out.str();
}

}  // namespace

std::string serialize(const RunConfig& cfg) { return serialize_sections(cfg, nullptr); }

RunConfig parse(const std::string& text, RunConfig base) {
  std::istringstream in(text);
  std::string line;
  std::string section;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const std::string where = "line " + std::to_string(lineno) + ": ";
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError(where + "malformed section header");
      section = trim(line.substr(1, line.size() - 2));
      bool known = false;
      for (const auto& k : config_keys()) known = known || k.section == section;
      if (!known) throw ConfigError(where + "unknown section [" + section + "]");
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(where + "expected key = value");
    const std::string name = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    const ConfigKey* key = nullptr;
    for (const auto& k : config_keys()) {
      if (k.name == name && (k.section == section || k.section.empty())) key = &k;
    }
    if (key == nullptr) {
      throw ConfigError(where + "unknown key '" + name + "'" + (section.empty() ? "" : " in [" + section + "]"));
    }
    try {
      key->set(base, value);
    } catch (const ConfigError& e) {
      throw ConfigError(where + key->qualified() + ": " + e.what());
    }
  }
  return base;
}

RunConfig load_file(const std::filesystem::path& path, RunConfig base) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  try {
    return parse(ss.str(), std::move(base));
  } catch (const ConfigError& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

void apply_override(RunConfig& cfg, const std::string& name, const std::string& value) {
  const ConfigKey* key = find_key(trim(name));
  if (key == nullptr) throw UsageError("unknown config key '" + name + "'");
  key->set(cfg, value);
}

std::uint64_t architecture_hash(const RunConfig& cfg) {
  static const std::set<std::string> sections{"world", "model", "world_model"};
  const std::string text = serialize_sections(cfg, &sections);
  return scenario::fnv1a64(text.data(), text.size());
}

}  // namespace mapworld::cli
