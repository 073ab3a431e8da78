// Command-line front end: train / evaluate / visualize / ablate /
// generate-data over the shared RunConfig. Exit codes: 0 success, 1 usage
// error, 2 runtime failure.

#include <filesystem>
#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "ivpt/harness.hpp"
#include "ivpt/image_io.hpp"

namespace fs = std::filesystem;
using namespace ivpt;

namespace {

struct CommonOpts {
  std::string config_path;
  std::vector<std::string> overrides;
  std::string out;
  std::string device = "cpu";
  uint64_t seed = 0;
  bool seed_set = false;
};

void add_common(CLI::App* cmd, CommonOpts* opts) {
  cmd->add_option("--config", opts->config_path, "Run configuration file (flat JSON)");
  cmd->add_option("--override", opts->overrides, "Config override key=value (repeatable)");
  cmd->add_option("--out", opts->out, "Output directory (overrides output_dir)");
  cmd->add_option("--device", opts->device, "Compute device (only 'cpu' is available)");
  cmd->add_option("--seed", opts->seed, "Run seed (overrides the config seed)")
      ->each([opts](const std::string&) { opts->seed_set = true; });
}

RunConfig build_config(const CommonOpts& opts) {
  if (opts.device != "cpu") {
    throw std::invalid_argument("unknown device '" + opts.device + "' (only 'cpu' is available)");
  }
  RunConfig cfg =
      opts.config_path.empty() ? RunConfig{} : RunConfig::from_file(opts.config_path);
  for (const std::string& o : opts.overrides) cfg.apply_override(o);
  if (opts.seed_set) cfg.seed = opts.seed;
  if (!opts.out.empty()) cfg.output_dir = opts.out;
  return cfg;
}

// Architecture keys may not change between checkpoint save and evaluate/
// visualize time; the loaded weights would no longer fit.
void reject_architecture_overrides(const RunConfig& loaded, const RunConfig& requested) {
  nlohmann::json a = loaded.to_flat_json(), b = requested.to_flat_json();
  for (const auto& [key, value] : a.items()) {
    if (key.rfind("backbone.", 0) == 0 || key.rfind("fusion.", 0) == 0) {
      if (b.at(key) != value) {
        throw std::invalid_argument("cannot override model architecture key '" + key +
                                    "' of a saved checkpoint");
      }
    }
  }
}

int cmd_generate_data(const CommonOpts& opts) {
  RunConfig cfg = build_config(opts);
  if (opts.seed_set) cfg.dataset.seed = opts.seed;  // data generation has its own stream
  if (opts.out.empty()) throw std::invalid_argument("generate-data requires --out DIR");
  cfg.dataset.validate();
  SynthDataset ds = generate(cfg.dataset);
  write_folder(ds, opts.out);
  std::cout << "wrote " << ds.samples.size() << " images across " << cfg.dataset.num_classes
            << " classes to " << opts.out << "\n"
            << "manifest: " << (fs::path(opts.out) / "manifest.json").string() << "\n"
            << "splits: " << ds.train_indices.size() << " train / " << ds.val_indices.size()
            << " val / " << ds.test_indices.size() << " test\n";
  return 0;
}

int cmd_train(const CommonOpts& opts, const std::string& resume) {
  RunConfig cfg = build_config(opts);
  cfg.validate();
  fs::create_directories(cfg.output_dir);
  const std::string log_path = (fs::path(cfg.output_dir) / "train_log.jsonl").string();
  std::ofstream log(log_path, resume.empty() ? std::ios::trunc : std::ios::app);
  if (!log) throw std::runtime_error("cannot open log file '" + log_path + "'");
  TrainResult tr = train(cfg, log, resume);
  nlohmann::json summary;
  summary["final_val_accuracy"] = tr.final_val_accuracy;
  summary["best_val_accuracy"] = tr.best_val_accuracy;
  summary["final_checkpoint"] = tr.final_checkpoint;
  summary["best_checkpoint"] = tr.best_checkpoint;
  summary["global_steps"] = tr.global_steps;
  summary["log"] = log_path;
  std::cout << summary.dump(2) << "\n";
  return 0;
}

int cmd_evaluate(const CommonOpts& opts, const std::string& checkpoint, const std::string& split) {
  if (opts.device != "cpu") {
    throw std::invalid_argument("unknown device '" + opts.device + "' (only 'cpu' is available)");
  }
  LoadedRun run = load_checkpoint(checkpoint);
  RunConfig cfg = run.config;
  for (const std::string& o : opts.overrides) cfg.apply_override(o);
  if (opts.seed_set) cfg.seed = opts.seed;
  reject_architecture_overrides(run.config, cfg);
  cfg.validate();
  DataBundle data = load_data(cfg);
  MetricReport rep =
      evaluate_split(*run.model, cfg, data, split, derive_seed(cfg.seed, "eval-stability"));
  const std::string out_dir = opts.out.empty() ? cfg.output_dir : opts.out;
  fs::create_directories(out_dir);
  const std::string report_path =
      (fs::path(out_dir) / ("report_" + split + ".json")).string();
  std::ofstream rf(report_path);
  rf << rep.to_json() << "\n";
  std::cout << rep.to_json() << "\n";
  std::cerr << "report written to " << report_path << "\n";
  return 0;
}

int cmd_visualize(const CommonOpts& opts, const std::string& checkpoint,
                  const std::vector<std::string>& image_paths, bool dump_assignments) {
  if (opts.device != "cpu") {
    throw std::invalid_argument("unknown device '" + opts.device + "' (only 'cpu' is available)");
  }
  if (opts.out.empty()) throw std::invalid_argument("visualize requires --out DIR");
  LoadedRun run = load_checkpoint(checkpoint);
  std::vector<AnnotatedSample> samples;
  std::vector<std::string> errors;
  for (const std::string& path : image_paths) {
    AnnotatedSample s;
    s.id = fs::path(path).stem().string();
    try {
      Array img = read_png(path);
      const int64_t hw = img.dim(1) * img.dim(2);
      for (int64_t c = 0; c < 3; ++c) {
        for (int64_t i = 0; i < hw; ++i) {
          img[c * hw + i] = (img[c * hw + i] - kPixelMean[c]) / kPixelStd[c];
        }
      }
      s.image = std::move(img);
      samples.push_back(std::move(s));
    } catch (const std::exception& e) {
      errors.push_back("'" + path + "': " + e.what());
    }
  }
  VisualizeResult res = visualize(*run.model, samples, opts.out, dump_assignments);
  errors.insert(errors.end(), res.errors.begin(), res.errors.end());
  for (const std::string& f : res.files_written) std::cout << f << "\n";
  for (const std::string& e : errors) std::cerr << "skipped " << e << "\n";
  if (res.files_written.empty() && !errors.empty()) {
    throw std::runtime_error("no image could be visualized");
  }
  return 0;
}

int cmd_ablate(const CommonOpts& opts, const std::string& axis) {
  RunConfig cfg = build_config(opts);
  cfg.validate();
  fs::create_directories(cfg.output_dir);
  const std::string log_path = (fs::path(cfg.output_dir) / "ablate_log.jsonl").string();
  std::ofstream log(log_path, std::ios::trunc);
  if (!log) throw std::runtime_error("cannot open log file '" + log_path + "'");
  std::vector<AblationRow> rows = ablate(cfg, axis, log);
  const std::string table = ablation_table(rows);
  std::cout << table;
  const std::string table_path = (fs::path(cfg.output_dir) / "ablation.tsv").string();
  std::ofstream tf(table_path);
  tf << table;
  std::cerr << "table written to " << table_path << "\n";
  bool any_ok = false;
  for (const auto& row : rows) {
    if (row.ok) {
      any_ok = true;
    } else {
      std::cerr << "setting '" << row.setting << "' failed: " << row.error << "\n";
    }
  }
  if (!any_ok) throw std::runtime_error("every ablation setting failed");
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Interpretable concept-prompt tuning laboratory"};
  app.require_subcommand(1);

  CommonOpts train_opts, eval_opts, viz_opts, ablate_opts, gen_opts;
  std::string resume, checkpoint, split = "test", axis;
  std::vector<std::string> image_paths;
  bool dump_assignments = false;

  CLI::App* train_cmd = app.add_subcommand("train", "Train a model per the run configuration");
  add_common(train_cmd, &train_opts);
  train_cmd->add_option("--resume", resume, "Continue from a saved checkpoint");

  CLI::App* eval_cmd = app.add_subcommand("evaluate", "Evaluate a checkpoint on one data split");
  add_common(eval_cmd, &eval_opts);
  eval_cmd->add_option("--checkpoint", checkpoint, "Checkpoint to evaluate")->required();
  eval_cmd->add_option("--split", split, "Data split: train|val|test|all (default test)");

  CLI::App* viz_cmd =
      app.add_subcommand("visualize", "Export region overlays and importance charts");
  add_common(viz_cmd, &viz_opts);
  viz_cmd->add_option("--checkpoint", checkpoint, "Checkpoint to visualize")->required();
  viz_cmd->add_option("images", image_paths, "PNG images to visualize")->required();
  viz_cmd->add_flag("--dump-assignments", dump_assignments,
                    "Also export the per-layer assignment grids as .npy");

  CLI::App* ablate_cmd = app.add_subcommand("ablate", "Train+evaluate across one ablation axis");
  add_common(ablate_cmd, &ablate_opts);
  ablate_cmd->add_option("--axis", axis, "Axis: layers|prototype_counts|loss_toggles")->required();

  CLI::App* gen_cmd = app.add_subcommand("generate-data", "Write the synthetic dataset folder");
  add_common(gen_cmd, &gen_opts);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (train_cmd->parsed()) return cmd_train(train_opts, resume);
    if (eval_cmd->parsed()) return cmd_evaluate(eval_opts, checkpoint, split);
    if (viz_cmd->parsed()) return cmd_visualize(viz_opts, checkpoint, image_paths, dump_assignments);
    if (ablate_cmd->parsed()) return cmd_ablate(ablate_opts, axis);
    if (gen_cmd->parsed()) return cmd_generate_data(gen_opts);
  } catch (const std::invalid_argument& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}
