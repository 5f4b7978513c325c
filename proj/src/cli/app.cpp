#include "mapworld/cli/app.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <optional>
#include <sstream>

#include <nlohmann/json.hpp>

#include "mapworld/cli/config.hpp"
#include "mapworld/errors.hpp"
#include "mapworld/eval/harness.hpp"
#include "mapworld/scenario/dataset_io.hpp"
#include "mapworld/train/trainer.hpp"

namespace mapworld::cli {

namespace fs = std::filesystem;

namespace {

std::string quote(const std::string& s) {
  if (!s.empty() && s.find_first_of(" \t\"'\\$|;&<>()*?") == std::string::npos) return s;
  std::string q = "'";
  for (char c : s) q += c == '\'' ? std::string("'\\''") : std::string(1, c);
  return q + "'";
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

/// Config layering shared by every subcommand: defaults, then an optional base
/// file (a run directory's config), then --config, then key flags.
struct ConfigOptions {
  std::string config_file;
  std::map<std::string, std::string> keys;
  std::map<std::string, CLI::Option*> key_options;
  bool print_config = false;

  void attach(CLI::App* sub) {
    sub->add_option("--config", config_file, "key=value config file");
    sub->add_flag("--print-config", print_config, "print the resolved config and exit");
    for (const auto& k : config_keys()) {
      auto* opt = sub->add_option("--" + k.name, keys[k.name], k.help)
                      ->group("Config keys")
                      ->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
      key_options[k.name] = opt;
    }
  }

  RunConfig resolve(const std::optional<fs::path>& base_file = std::nullopt) const {
    RunConfig cfg;
    if (base_file) cfg = load_file(*base_file, cfg);
    if (!config_file.empty()) cfg = load_file(config_file, cfg);
    for (const auto& [name, opt] : key_options) {
      if (opt->count() == 0) continue;
      try {
        apply_override(cfg, name, keys.at(name));
      } catch (const ConfigError& e) {
        throw UsageError(std::string("--") + name + ": " + e.what());
      }
    }
    cfg.validate();
    return cfg;
  }
};

scenario::Dataset load_data(const RunConfig& cfg, const std::string& path, const char* what) {
  if (path.empty()) throw UsageError(std::string("no ") + what + " dataset configured (set --" + what + "_data)");
  const fs::path root = cfg.resolve_data(path);
  scenario::Dataset ds = scenario::read_dataset(root);
  if (!(ds.manifest.world_spec == cfg.world)) {
    throw ConfigError("dataset " + root.string() + " was generated with a different [world] section");
  }
  return ds;
}

std::vector<model::Example> to_examples(const std::vector<scenario::ScenarioRecord>& records, const RunConfig& cfg) {
  std::vector<model::Example> out;
  out.reserve(records.size());
  for (const auto& r : records) out.push_back(model::make_example(r, cfg.world, cfg.model, cfg.world_model));
  return out;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path);
  if (!f) throw IoError("cannot write " + path.string());
  f << text;
}

fs::path default_checkpoint(const fs::path& run_dir) { return run_dir / "checkpoints" / "final.ckpt"; }

/// Model restored from a checkpoint under `cfg`.
std::unique_ptr<model::MapWorldModel<float>> load_model(const RunConfig& cfg, const fs::path& ckpt,
                                                        std::ostream& err) {
  auto net = std::make_unique<model::MapWorldModel<float>>(cfg.map_world(), cfg.seed);
  const auto meta = train::load_checkpoint(ckpt, net->params(), nullptr, architecture_hash(cfg));
  err << "loaded " << ckpt.string() << " (step " << meta.step << ")\n";
  return net;
}

std::size_t find_scenario(const std::vector<scenario::ScenarioRecord>& records, const std::string& which) {
  for (std::size_t i = 0; i < records.size(); ++i) {
    if (records[i].scenario_id == which) return i;
  }
  std::size_t idx = 0;
  try {
    std::size_t used = 0;
    idx = std::stoul(which, &used);
    if (used != which.size()) throw std::invalid_argument(which);
  } catch (const std::exception&) {
    throw UsageError("no scenario with id '" + which + "'");
  }
  if (idx >= records.size()) throw UsageError("scenario index " + which + " out of range");
  return idx;
}

nlohmann::json prediction_json(const scenario::ScenarioRecord& rec, const eval::Prediction& p) {
  nlohmann::json j;
  j["scenario_id"] = rec.scenario_id;
  j["selected"] = p.selected;
  j["weights"] = p.weights;
  nlohmann::json modes = nlohmann::json::array();
  for (const auto& m : p.modes) {
    nlohmann::json pts = nlohmann::json::array();
    for (const auto& v : m) pts.push_back({v.x, v.y});
    modes.push_back(pts);
  }
  j["modes"] = modes;
  nlohmann::json gt = nlohmann::json::array();
  for (const auto& v : rec.gt_future) gt.push_back({v.x, v.y});
  j["gt_future"] = gt;
  j["endpoint_spread"] = eval::mean_pairwise_endpoint_distance(p.modes);
  return j;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Planner with masked action completion and a latent world model (desk scale)", "mapworld"};
  app.require_subcommand(1);
  app.fallthrough(false);

  // generate-data
  auto* gen = app.add_subcommand("generate-data", "write a synthetic scenario dataset");
  ConfigOptions gen_cfg;
  gen_cfg.attach(gen);
  std::string gen_out;
  std::string gen_templates = "straight,left_turn,right_turn,curve";
  int gen_count = 64;
  std::string gen_split = "train";
  std::string gen_steps;
  gen->add_option("--out", gen_out, "dataset directory (relative paths resolve against data_root)")->required();
  gen->add_option("--templates", gen_templates, "comma-separated templates");
  gen->add_option("--count", gen_count, "number of scenarios");
  gen->add_option("--split", gen_split, "train | val | test");
  gen->add_option("--future-steps", gen_steps, "stored future BEV steps (default T_f/2,T_f)");

  // train
  auto* tr = app.add_subcommand("train", "train a model; writes a run directory");
  ConfigOptions tr_cfg;
  tr_cfg.attach(tr);
  std::string tr_resume;
  tr->add_option("--resume", tr_resume, "checkpoint to resume from");

  // eval
  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on held-out data");
  ConfigOptions ev_cfg;
  ev_cfg.attach(ev);
  std::string ev_run, ev_ckpt, ev_out;
  bool ev_oracle = false;
  std::uint64_t ev_noise_seed = 1;
  ev->add_option("--run", ev_run, "run directory (its config.cfg is the base config)");
  ev->add_option("--checkpoint", ev_ckpt, "checkpoint (default <run>/checkpoints/final.ckpt)");
  ev->add_option("--out", ev_out, "metrics JSON path (default <run>/eval_metrics.json)");
  ev->add_option("--noise-seed", ev_noise_seed, "seed of the inference noise");
  ev->add_flag("--oracle", ev_oracle, "score ground-truth futures instead of a model");

  // rollout and plot
  auto* ro = app.add_subcommand("rollout", "print all modes of one scenario as JSON");
  auto* pl = app.add_subcommand("plot", "draw one scenario's modes and predicted future map to PNG");
  ConfigOptions ro_cfg, pl_cfg;
  ro_cfg.attach(ro);
  pl_cfg.attach(pl);
  std::string ro_run, ro_ckpt, ro_scn = "0", ro_out, pl_run, pl_ckpt, pl_scn = "0", pl_out;
  std::uint64_t ro_noise_seed = 1, pl_noise_seed = 1;
  for (auto [sub, run_dir, ckpt, scn, seed] :
       {std::tuple{ro, &ro_run, &ro_ckpt, &ro_scn, &ro_noise_seed}, std::tuple{pl, &pl_run, &pl_ckpt, &pl_scn, &pl_noise_seed}}) {
    sub->add_option("--run", *run_dir, "run directory")->required();
    sub->add_option("--checkpoint", *ckpt, "checkpoint (default <run>/checkpoints/final.ckpt)");
    sub->add_option("--scenario", *scn, "scenario id or index in eval_data");
    sub->add_option("--noise-seed", *seed, "seed of the inference noise");
  }
  ro->add_option("--out", ro_out, "JSON output path (default stdout)");
  pl->add_option("--out", pl_out, "PNG path; the sidecar goes to <out>.json")->required();

  // ablate
  auto* ab = app.add_subcommand("ablate", "train and evaluate every cell of an ablation grid");
  ConfigOptions ab_cfg;
  ab_cfg.attach(ab);
  std::vector<std::string> ab_axes;
  std::string ab_preset, ab_out;
  ab->add_option("--axis", ab_axes, "key=v1,v2 (list values separated by '|'); repeatable");
  ab->add_option("--preset", ab_preset, "k_mask | depth | steps")->check(CLI::IsMember({"k_mask", "depth", "steps"}));
  ab->add_option("--out", ab_out, "results table (default <run_dir>/ablation.tsv)");

  // gradcheck
  auto* gc = app.add_subcommand("gradcheck", "finite-difference check of the total-loss gradients");
  ConfigOptions gc_cfg;
  gc_cfg.attach(gc);
  int gc_params = 50, gc_samples = 2;
  double gc_h = 1e-5, gc_tol = 1e-3;
  gc->add_option("--params", gc_params, "scalar parameters to sample");
  gc->add_option("--samples", gc_samples, "generated scenarios in the batch");
  gc->add_option("--step", gc_h, "central-difference step");
  gc->add_option("--tolerance", gc_tol, "maximum relative error");

  if (!args.empty() && !args.front().empty() && args.front().front() != '-') {
    bool known = false;
    for (const auto* sub : app.get_subcommands({})) known = known || sub->get_name() == args.front();
    if (!known) {
      err << "usage error: unknown subcommand '" << args.front() << "'\n" << app.help();
      return kExitUsage;
    }
  }
  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "usage error: " << e.what() << "\n";
    if (const auto* sub = app.get_subcommands().empty() ? nullptr : app.get_subcommands().front()) {
      err << "run 'mapworld " << sub->get_name() << " --help' for the accepted flags\n";
    }
    return kExitUsage;
  }

  std::string command_line = "mapworld";
  for (const auto& a : args) command_line += " " + quote(a);

  try {
    CLI::App* sub = app.get_subcommands().front();
    const std::string name = sub->get_name();

    auto maybe_print = [&](const ConfigOptions& o, const RunConfig& cfg) {
      if (o.print_config) out << serialize(cfg);
      return o.print_config;
    };

    if (name == "generate-data") {
      const RunConfig cfg = gen_cfg.resolve();
      if (maybe_print(gen_cfg, cfg)) return kExitOk;
      std::vector<scenario::Template> templates;
      for (const auto& t : split_list(gen_templates)) templates.push_back(scenario::parse_template(t));
      std::vector<int> steps;
      for (const auto& s : split_list(gen_steps)) steps.push_back(std::stoi(s));
      if (steps.empty()) {
        if (cfg.world.future_len / 2 >= 1 && cfg.world.future_len / 2 != cfg.world.future_len) {
          steps.push_back(cfg.world.future_len / 2);
        }
        steps.push_back(cfg.world.future_len);
      }
      const auto ds = scenario::generate_dataset(cfg.world, templates, gen_count, cfg.seed, gen_split, steps);
      const fs::path root = cfg.resolve_data(gen_out);
      scenario::write_dataset(ds.records, ds.manifest, root);
      err << "wrote " << ds.records.size() << " scenarios to " << root.string() << "\n";
      return kExitOk;
    }

    if (name == "train") {
      const RunConfig cfg = tr_cfg.resolve();
      if (maybe_print(tr_cfg, cfg)) return kExitOk;
      const auto ds = load_data(cfg, cfg.paths.train_data, "train");
      const auto examples = to_examples(ds.records, cfg);
      const fs::path run_dir = cfg.paths.run_dir;
      fs::create_directories(run_dir);
      write_text(run_dir / "config.cfg", serialize(cfg));
      write_text(run_dir / "command.txt", command_line + "\n");
      model::MapWorldModel<float> net(cfg.map_world(), cfg.seed);
      train::Trainer trainer(net, cfg.train, cfg.seed, architecture_hash(cfg));
      if (!tr_resume.empty()) {
        const auto meta = trainer.resume(tr_resume);
        err << "resumed from " << tr_resume << " at step " << meta.step << "\n";
      }
      const int total = cfg.train.total_steps(examples.size());
      const auto start = std::chrono::steady_clock::now();
      trainer.train(examples, run_dir, [&](const train::StepLog& log) {
        if (log.step % 50 == 0 || log.step == total || log.step == 1) {
          const double secs =
              std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
          err << "step " << log.step << "/" << total << " loss " << log.total << " lr " << log.lr << " ("
              << secs << " s)\n";
        }
      });
      err << "run directory: " << run_dir.string() << "\n";
      return kExitOk;
    }

    if (name == "eval") {
      std::optional<fs::path> base;
      if (!ev_run.empty()) base = fs::path(ev_run) / "config.cfg";
      const RunConfig cfg = ev_cfg.resolve(base);
      if (maybe_print(ev_cfg, cfg)) return kExitOk;
      const auto ds = load_data(cfg, cfg.paths.eval_data, "eval");
      std::optional<scenario::DatasetManifest> train_manifest;
      if (!cfg.paths.train_data.empty() && fs::exists(cfg.resolve_data(cfg.paths.train_data))) {
        train_manifest = scenario::read_manifest(cfg.resolve_data(cfg.paths.train_data));
      }
      eval::check_split_disjoint(ds.manifest, train_manifest ? &*train_manifest : nullptr);
      eval::MetricsReport report;
      if (ev_oracle) {
        std::vector<eval::Prediction> preds;
        for (const auto& r : ds.records) preds.push_back(eval::oracle_prediction(r, cfg.model.num_modes));
        report = eval::evaluate_predictions(ds.records, preds, cfg.world, cfg.eval);
      } else {
        if (ev_run.empty() && ev_ckpt.empty()) throw UsageError("eval needs --run or --checkpoint (or --oracle)");
        const fs::path ckpt = ev_ckpt.empty() ? default_checkpoint(ev_run) : fs::path(ev_ckpt);
        const auto net = load_model(cfg, ckpt, err);
        report = eval::evaluate(*net, ds.records, cfg.eval, ev_noise_seed);
      }
      const std::string json = eval::report_json(report);
      out << json << "\n";
      fs::path out_path = ev_out;
      if (out_path.empty() && !ev_run.empty()) out_path = fs::path(ev_run) / (ev_oracle ? "eval_oracle.json" : "eval_metrics.json");
      if (!out_path.empty()) {
        write_text(out_path, json + "\n");
        std::ofstream per(out_path.string() + ".scenarios.jsonl");
        if (!per) throw IoError("cannot write " + out_path.string() + ".scenarios.jsonl");
        eval::write_per_scenario(report, per);
      }
      return kExitOk;
    }

    if (name == "rollout" || name == "plot") {
      const bool plot = name == "plot";
      const ConfigOptions& o = plot ? pl_cfg : ro_cfg;
      const fs::path run_dir = plot ? pl_run : ro_run;
      const RunConfig cfg = o.resolve(run_dir / "config.cfg");
      if (maybe_print(o, cfg)) return kExitOk;
      const std::string& ck = plot ? pl_ckpt : ro_ckpt;
      const auto net = load_model(cfg, ck.empty() ? default_checkpoint(run_dir) : fs::path(ck), err);
      const auto ds = load_data(cfg, cfg.paths.eval_data, "eval");
      const std::size_t idx = find_scenario(ds.records, plot ? pl_scn : ro_scn);
      const auto& rec = ds.records[idx];
      const auto ex = model::make_example(rec, cfg.world, cfg.model, cfg.world_model);
      const auto pred = eval::predict(*net, ex, plot ? pl_noise_seed : ro_noise_seed, plot);
      if (plot) {
        eval::plot_rollout(rec, cfg.world, pred, pl_out);
        err << "wrote " << pl_out << " and " << pl_out << ".json\n";
      } else {
        const std::string json = prediction_json(rec, pred).dump(2);
        if (ro_out.empty()) {
          out << json << "\n";
        } else {
          write_text(ro_out, json + "\n");
        }
      }
      return kExitOk;
    }

    if (name == "ablate") {
      const RunConfig cfg = ab_cfg.resolve();
      if (maybe_print(ab_cfg, cfg)) return kExitOk;
      eval::AblationGrid grid;
      if (ab_preset == "k_mask") grid = eval::default_ablation_grid_k_mask();
      if (ab_preset == "depth") grid = eval::default_ablation_grid_depth();
      if (ab_preset == "steps") grid = eval::default_ablation_grid_steps(cfg.world);
      for (const auto& a : ab_axes) grid.add_axis(a);
      if (grid.axes.empty()) throw UsageError("ablate needs --preset or at least one --axis");
      grid.validate();
      const auto train_ds = load_data(cfg, cfg.paths.train_data, "train");
      const auto eval_ds = load_data(cfg, cfg.paths.eval_data, "eval");
      eval::check_split_disjoint(eval_ds.manifest, &train_ds.manifest);
      const fs::path run_dir = cfg.paths.run_dir;
      fs::create_directories(run_dir);
      write_text(run_dir / "config.cfg", serialize(cfg));
      write_text(run_dir / "command.txt", command_line + "\n");
      eval::AblationOptions opts;
      opts.run_root = run_dir;
      opts.log = &err;
      const auto rows = eval::run_ablation(grid, cfg, train_ds.records, eval_ds.records, opts);
      const fs::path table = ab_out.empty() ? run_dir / "ablation.tsv" : fs::path(ab_out);
      std::ofstream f(table);
      if (!f) throw IoError("cannot write " + table.string());
      eval::write_ablation_table(grid, rows, f);
      eval::write_ablation_table(grid, rows, out);
      const auto failed = std::count_if(rows.begin(), rows.end(), [](const auto& r) { return !r.ok; });
      err << rows.size() << " cells, " << failed << " failed; table: " << table.string() << "\n";
      return kExitOk;
    }

    if (name == "gradcheck") {
      const RunConfig cfg = gc_cfg.resolve();
      if (maybe_print(gc_cfg, cfg)) return kExitOk;
      std::vector<int> steps = cfg.world_model.resolved_steps(cfg.world);
      const auto ds =
          scenario::generate_dataset(cfg.world, scenario::all_templates(), gc_samples, cfg.seed, "train", steps);
      const auto examples = to_examples(ds.records, cfg);
      std::vector<const model::Example*> batch;
      for (const auto& e : examples) batch.push_back(&e);
      model::MapWorldModel<double> net(cfg.map_world(), cfg.seed);
      const auto report = train::grad_check(net, batch, gc_params, gc_h, cfg.seed);
      for (const auto& e : report.entries) {
        out << e.parameter << "[" << e.index << "] analytic " << e.analytic << " numeric " << e.numeric
            << " rel_err " << e.rel_error << "\n";
      }
      const bool pass = report.max_rel_error < gc_tol;
      out << "max relative error " << report.max_rel_error << (pass ? " < " : " >= ") << gc_tol << "\n";
      return pass ? kExitOk : kExitFailure;
    }
    throw UsageError("unknown subcommand " + name);
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const TrainingError& e) {
    err << "training error in component '" << e.component() << "': " << e.what() << "\n";
    return kExitFailure;
  } catch (const IntegrityError& e) {
    err << "integrity error (" << e.id() << "): " << e.what() << "\n";
    return kExitFailure;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitFailure;
  }
}

}  // namespace mapworld::cli
