#include "mapworld/train/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iostream>
#include <numeric>
#include <sstream>

#include <nlohmann/json.hpp>

#include "mapworld/errors.hpp"
#include "mapworld/scenario/dataset_io.hpp"
#include "mapworld/scenario/scenario.hpp"

namespace mapworld::train {

void TrainConfig::validate() const {
  if (learning_rate <= 0.0) throw ConfigError("train.learning_rate must be > 0");
  if (batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
  if (steps < 0 || epochs < 0) throw ConfigError("train.steps and train.epochs must be >= 0");
  if (weight_decay < 0.0) throw ConfigError("train.weight_decay must be >= 0");
  if (optimizer != "adamw") throw ConfigError("train.optimizer must be 'adamw'");
  if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0) throw ConfigError("Adam betas must be in [0, 1)");
  if (checkpoint_every < 0 || log_every < 1) throw ConfigError("train.checkpoint_every >= 0, train.log_every >= 1");
}

int TrainConfig::total_steps(std::size_t dataset_size) const {
  if (epochs > 0) {
    const auto per_epoch = (dataset_size + static_cast<std::size_t>(batch_size) - 1) / batch_size;
    return epochs * static_cast<int>(per_epoch);
  }
  return steps;
}

AdamW::AdamW(nn::ParameterSet<float>& params, const TrainConfig& cfg) : cfg_(cfg) {
  for (auto& p : params.all()) {
    if (std::find(params_.begin(), params_.end(), &p) != params_.end()) {
      throw ConfigError("parameter registered twice: " + p.name);
    }
    params_.push_back(&p);
    m_.push_back(ad::Matrix<float>::Zero(p.value.rows(), p.value.cols()));
    v_.push_back(ad::Matrix<float>::Zero(p.value.rows(), p.value.cols()));
  }
}

void AdamW::step(double lr) {
  ++t_;
  const double b1 = cfg_.beta1, b2 = cfg_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    ad::Parameter<float>& p = *params_[i];
    auto& m = m_[i];
    auto& v = v_[i];
    m = static_cast<float>(b1) * m + static_cast<float>(1.0 - b1) * p.grad;
    v = static_cast<float>(b2) * v + static_cast<float>(1.0 - b2) * p.grad.cwiseProduct(p.grad);
    if (p.decay && cfg_.weight_decay > 0.0) p.value *= static_cast<float>(1.0 - lr * cfg_.weight_decay);
    const float step = static_cast<float>(lr / c1);
    const float denom_scale = static_cast<float>(1.0 / std::sqrt(c2));
    p.value.array() -= step * m.array() / (v.array().sqrt() * denom_scale + static_cast<float>(cfg_.adam_eps));
  }
}

double clip_grad_norm(nn::ParameterSet<float>& params, double max_norm) {
  double sq = 0.0;
  for (const auto& p : params.all()) sq += p.grad.template cast<double>().squaredNorm();
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const float s = static_cast<float>(max_norm / (norm + 1e-12));
    for (auto& p : params.all()) p.grad *= s;
  }
  return norm;
}

std::string to_json_line(const StepLog& log) {
  nlohmann::json j;
  j["step"] = log.step;
  j["total"] = log.total;
  j["components"] = log.components;
  j["lr"] = log.lr;
  j["grad_norm"] = log.grad_norm;
  return j.dump();
}

namespace {

class Writer {
 public:
  template <typename V>
  void put(const V& v) {
    const auto* b = reinterpret_cast<const std::uint8_t*>(&v);
    bytes.insert(bytes.end(), b, b + sizeof(V));
  }
  void put_bytes(const void* data, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(data);
    bytes.insert(bytes.end(), b, b + n);
  }
  void put_string(const std::string& s) {
    put<std::uint32_t>(static_cast<std::uint32_t>(s.size()));
    put_bytes(s.data(), s.size());
  }
  void put_matrix(const ad::Matrix<float>& m) { put_bytes(m.data(), sizeof(float) * static_cast<std::size_t>(m.size())); }
  std::vector<std::uint8_t> bytes;
};

class Reader {
 public:
  Reader(const std::vector<std::uint8_t>& b, std::string path) : bytes_(b), path_(std::move(path)) {}
  template <typename V>
  V get() {
    V v;
    get_bytes(&v, sizeof(V));
    return v;
  }
  void get_bytes(void* out, std::size_t n) {
    if (pos_ + n > bytes_.size()) throw IntegrityError(path_, "checkpoint truncated: " + path_);
    std::memcpy(out, bytes_.data() + pos_, n);
    pos_ += n;
  }
  std::string get_string() {
    const auto n = get<std::uint32_t>();
    std::string s(n, '\0');
    get_bytes(s.data(), n);
    return s;
  }
  void get_matrix(ad::Matrix<float>& m) { get_bytes(m.data(), sizeof(float) * static_cast<std::size_t>(m.size())); }

 private:
  const std::vector<std::uint8_t>& bytes_;
  std::string path_;
  std::size_t pos_ = 0;
};

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const nn::ParameterSet<float>& params, const AdamW* opt,
                     const CheckpointMeta& meta) {
  Writer w;
  w.put_bytes(kCheckpointMagic, sizeof(kCheckpointMagic));
  w.put<std::uint32_t>(kCheckpointVersion);
  w.put<std::uint64_t>(meta.config_hash);
  w.put<std::int64_t>(meta.step);
  w.put_string(meta.rng_state);
  w.put<std::uint8_t>(opt != nullptr ? 1 : 0);
  w.put<std::int64_t>(opt != nullptr ? opt->t() : 0);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(params.size()));
  std::size_t i = 0;
  for (const auto& p : params.all()) {
    w.put_string(p.name);
    w.put<std::int64_t>(p.value.rows());
    w.put<std::int64_t>(p.value.cols());
    w.put_matrix(p.value);
    if (opt != nullptr) {
      w.put_matrix(opt->first_moment()[i]);
      w.put_matrix(opt->second_moment()[i]);
    }
    ++i;
  }
  w.put<std::uint64_t>(scenario::fnv1a64(w.bytes.data(), w.bytes.size()));
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw IoError("cannot write checkpoint " + path.string());
    out.write(reinterpret_cast<const char*>(w.bytes.data()), static_cast<std::streamsize>(w.bytes.size()));
    if (!out) throw IoError("write failed for checkpoint " + path.string());
  }
  std::filesystem::rename(tmp, path);
}

CheckpointMeta load_checkpoint(const std::filesystem::path& path, nn::ParameterSet<float>& params, AdamW* opt,
                               std::uint64_t expected_hash) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IntegrityError(path.string(), "missing checkpoint " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.size() < sizeof(kCheckpointMagic) + 8 ||
      std::memcmp(bytes.data(), kCheckpointMagic, sizeof(kCheckpointMagic)) != 0) {
    throw FormatError("not a checkpoint file: " + path.string());
  }
  std::uint64_t stored_sum;
  std::memcpy(&stored_sum, bytes.data() + bytes.size() - 8, 8);
  if (scenario::fnv1a64(bytes.data(), bytes.size() - 8) != stored_sum) {
    throw IntegrityError(path.string(), "checkpoint checksum mismatch: " + path.string());
  }
  Reader r(bytes, path.string());
  char magic[8];
  r.get_bytes(magic, 8);
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion) throw FormatError("unsupported checkpoint version " + std::to_string(version));
  CheckpointMeta meta;
  meta.config_hash = r.get<std::uint64_t>();
  meta.step = r.get<std::int64_t>();
  meta.rng_state = r.get_string();
  const bool has_opt = r.get<std::uint8_t>() != 0;
  const auto t = r.get<std::int64_t>();
  const auto n = r.get<std::uint32_t>();
  if (n != params.size()) {
    throw ShapeError("checkpoint holds " + std::to_string(n) + " parameters, model has " + std::to_string(params.size()));
  }
  std::size_t i = 0;
  for (auto& p : params.all()) {
    const std::string name = r.get_string();
    const auto rows = r.get<std::int64_t>();
    const auto cols = r.get<std::int64_t>();
    if (name != p.name || rows != p.value.rows() || cols != p.value.cols()) {
      throw ShapeError("checkpoint parameter '" + name + "' [" + std::to_string(rows) + "x" + std::to_string(cols) +
                       "] does not match model parameter '" + p.name + "' [" + std::to_string(p.value.rows()) + "x" +
                       std::to_string(p.value.cols()) + "]");
    }
    r.get_matrix(p.value);
    if (has_opt) {
      ad::Matrix<float> m(rows, cols), v(rows, cols);
      r.get_matrix(m);
      r.get_matrix(v);
      if (opt != nullptr) {
        opt->first_moment()[i] = m;
        opt->second_moment()[i] = v;
      }
    }
    ++i;
  }
  if (opt != nullptr) {
    if (!has_opt) throw FormatError("checkpoint has no optimizer state: " + path.string());
    opt->set_t(t);
  }
  meta.hash_matches = meta.config_hash == expected_hash;
  if (!meta.hash_matches) {
    std::cerr << "warning: checkpoint " << path.string() << " was written with a different config (hash "
              << meta.config_hash << " vs " << expected_hash << ")\n";
  }
  return meta;
}

Trainer::Trainer(MapWorldModel<float>& model, const TrainConfig& cfg, std::uint64_t seed, std::uint64_t config_hash)
    : model_(model),
      cfg_(cfg),
      seed_(seed),
      config_hash_(config_hash),
      opt_(model.params(), cfg),
      noise_rng_(scenario::splitmix64(seed ^ 0x6e6f697365ULL)) {
  cfg.validate();
}

std::vector<std::size_t> Trainer::batch_indices(int step, std::size_t n) const {
  if (n == 0) throw DataError("training dataset is empty");
  const auto b = static_cast<std::size_t>(cfg_.batch_size);
  const std::size_t per_epoch = (n + b - 1) / b;
  const auto epoch = static_cast<std::size_t>(step) / per_epoch;
  const auto offset = (static_cast<std::size_t>(step) % per_epoch) * b;
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  std::mt19937_64 rng(scenario::derive_seed(seed_, epoch));
  for (std::size_t i = n - 1; i > 0; --i) {
    std::uniform_int_distribution<std::size_t> pick(0, i);
    std::swap(perm[i], perm[pick(rng)]);
  }
  std::vector<std::size_t> out;
  for (std::size_t j = 0; j < b; ++j) out.push_back(perm[(offset + j) % n]);
  return out;
}

double Trainer::learning_rate(int step, int total_steps) const {
  if (!cfg_.cosine_schedule || total_steps <= 0) return cfg_.learning_rate;
  return cfg_.learning_rate * 0.5 * (1.0 + std::cos(M_PI * step / static_cast<double>(total_steps)));
}

StepLog Trainer::step(const std::vector<Example>& data, int total_steps) {
  const auto idx = batch_indices(steps_done_, data.size());
  std::vector<const Example*> batch;
  std::vector<std::uint64_t> seeds;
  for (std::size_t i : idx) {
    batch.push_back(&data[i]);
    seeds.push_back(noise_rng_());
  }
  model_.params().zero_grad();
  StepLog log;
  {
    ad::Tape<float> tape;
    auto result = model::batch_loss(model_, tape, batch, seeds);
    if (!std::isfinite(result.report.total)) throw TrainingError("total", "non-finite total loss");
    tape.backward(result.total);
    log.total = result.report.total;
    log.components = result.report.components;
  }
  log.grad_norm = clip_grad_norm(model_.params(), cfg_.grad_clip_norm);
  if (!std::isfinite(log.grad_norm)) throw TrainingError("gradient", "non-finite gradient norm");
  log.lr = learning_rate(steps_done_, total_steps);
  opt_.step(log.lr);
  ++steps_done_;
  log.step = steps_done_;
  return log;
}

std::vector<StepLog> Trainer::train(const std::vector<Example>& data, const std::filesystem::path& run_dir,
                                    const StepCallback& on_step) {
  if (data.empty()) throw DataError("training dataset is empty");
  const int total = cfg_.total_steps(data.size());
  std::ofstream metrics;
  if (!run_dir.empty()) {
    std::filesystem::create_directories(run_dir / "checkpoints");
    metrics.open(run_dir / "metrics.jsonl", steps_done_ > 0 ? std::ios::app : std::ios::trunc);
    if (!metrics) throw IoError("cannot write " + (run_dir / "metrics.jsonl").string());
  }
  std::vector<StepLog> logs;
  while (steps_done_ < total) {
    StepLog log = step(data, total);
    if (log.step % cfg_.log_every == 0 || log.step == total) {
      if (metrics.is_open()) {
        metrics << to_json_line(log) << '\n';
        metrics.flush();
      }
    }
    if (on_step) on_step(log);
    logs.push_back(log);
    if (!run_dir.empty() && cfg_.checkpoint_every > 0 && log.step % cfg_.checkpoint_every == 0) {
      save(run_dir / "checkpoints" / ("step_" + std::to_string(log.step) + ".ckpt"));
    }
  }
  if (!run_dir.empty()) save(run_dir / "checkpoints" / "final.ckpt");
  return logs;
}

void Trainer::save(const std::filesystem::path& path) const {
  std::ostringstream rng;
  rng << noise_rng_;
  CheckpointMeta meta{config_hash_, steps_done_, rng.str(), true};
  save_checkpoint(path, model_.params(), &opt_, meta);
}

CheckpointMeta Trainer::resume(const std::filesystem::path& path) {
  CheckpointMeta meta = load_checkpoint(path, model_.params(), &opt_, config_hash_);
  std::istringstream rng(meta.rng_state);
  rng >> noise_rng_;
  if (!rng) throw FormatError("bad rng state in checkpoint " + path.string());
  steps_done_ = static_cast<int>(meta.step);
  return meta;
}

double gradient_audit(MapWorldModel<float>& model, const std::vector<const Example*>& batch, std::uint64_t seed,
                      std::vector<std::string>* dead) {
  model.params().zero_grad();
  std::vector<std::uint64_t> seeds;
  for (std::size_t i = 0; i < batch.size(); ++i) seeds.push_back(scenario::derive_seed(seed, i));
  ad::Tape<float> tape;
  auto result = model::batch_loss(model, tape, batch, seeds);
  tape.backward(result.total);
  std::size_t nonzero = 0, total = 0;
  for (const auto& p : model.params().all()) {
    const auto nz = static_cast<std::size_t>((p.grad.array() != 0.0f).count());
    nonzero += nz;
    total += static_cast<std::size_t>(p.grad.size());
    if (dead != nullptr && nz < static_cast<std::size_t>(p.grad.size())) {
      dead->push_back(p.name + " (" + std::to_string(p.grad.size() - static_cast<Eigen::Index>(nz)) + " zero)");
    }
  }
  model.params().zero_grad();
  return total == 0 ? 0.0 : static_cast<double>(nonzero) / static_cast<double>(total);
}

GradCheckReport grad_check(MapWorldModel<double>& model, const std::vector<const Example*>& batch, int n_params,
                           double h, std::uint64_t seed) {
  std::vector<std::uint64_t> seeds;
  for (std::size_t i = 0; i < batch.size(); ++i) seeds.push_back(scenario::derive_seed(seed, i));
  auto loss = [&]() {
    ad::Tape<double> tape(false);
    return model::batch_loss(model, tape, batch, seeds).report.total;
  };
  model.params().zero_grad();
  {
    ad::Tape<double> tape;
    auto result = model::batch_loss(model, tape, batch, seeds);
    tape.backward(result.total);
  }
  std::vector<std::pair<ad::Parameter<double>*, Eigen::Index>> all;
  for (auto& p : model.params().all()) {
    for (Eigen::Index i = 0; i < p.value.size(); ++i) all.emplace_back(&p, i);
  }
  std::mt19937_64 rng(seed);
  const auto count = std::min<std::size_t>(static_cast<std::size_t>(std::max(n_params, 0)), all.size());
  std::vector<std::size_t> pick(all.size());
  std::iota(pick.begin(), pick.end(), std::size_t{0});
  for (std::size_t i = 0; i < count; ++i) {
    std::uniform_int_distribution<std::size_t> u(i, all.size() - 1);
    std::swap(pick[i], pick[u(rng)]);
  }
  GradCheckReport report;
  for (std::size_t i = 0; i < count; ++i) {
    auto [p, idx] = all[pick[i]];
    const double orig = p->value.data()[idx];
    p->value.data()[idx] = orig + h;
    const double up = loss();
    p->value.data()[idx] = orig - h;
    const double down = loss();
    p->value.data()[idx] = orig;
    GradCheckEntry e;
    e.parameter = p->name;
    e.index = idx;
    e.analytic = p->grad.data()[idx];
    e.numeric = (up - down) / (2.0 * h);
    e.rel_error = std::abs(e.analytic - e.numeric) / std::max({std::abs(e.analytic), std::abs(e.numeric), 1e-6});
    report.max_rel_error = std::max(report.max_rel_error, e.rel_error);
    report.entries.push_back(e);
  }
  return report;
}

}  // namespace mapworld::train
