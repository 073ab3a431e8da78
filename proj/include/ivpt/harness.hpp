#pragma once

#include <iosfwd>
#include <memory>
#include <string>
#include <vector>

#include "ivpt/data.hpp"
#include "ivpt/losses.hpp"
#include "ivpt/metrics.hpp"
#include "ivpt/model.hpp"
#include "json.hpp"

namespace ivpt {

inline constexpr int kConfigSchemaVersion = 1;

struct OptimizerConfig {
  real lr_backbone = 2e-4;  // prototypes, biases, backbone weights/tokens
  real lr_head = 1e-2;      // grouping, fusion MLPs, classifier heads
  int batch_size = 16;
  int epochs = 25;
  real decay_factor = 0.5;
  int decay_every_epochs = 4;

  void validate() const;
  bool operator==(const OptimizerConfig&) const = default;
};

// The full run description. Serializes to a flat JSON object with dotted keys
// (plus schema_version); unknown keys are rejected so typos cannot silently
// fall back to defaults.
struct RunConfig {
  BackboneConfig backbone;
  FusionConfig fusion;
  LossWeights weights;
  OptimizerConfig optimizer;
  SynthConfig dataset;
  std::string data_root;      // when set, train/evaluate on an image folder
  std::string keypoint_file;  // keypoint annotations for folder datasets
  bool frozen_backbone = false;
  int eval_layer = -1;  // metrics layer; -1 = second-to-last prompted
  uint64_t seed = 0;
  std::string output_dir = "runs/default";

  void validate() const;
  nlohmann::json to_flat_json() const;
  static RunConfig from_flat_json(const nlohmann::json& j);
  static RunConfig from_file(const std::string& path);
  // Applies one "dotted.key=value" override; values parse as JSON when
  // possible (numbers, bools, arrays) and as plain strings otherwise.
  void apply_override(const std::string& assignment);
};

// Everything two runs must share for a resume to be step-for-step identical:
// the full config except the output directory and the epoch budget (which
// only decides when training stops).
bool compatible_for_resume(const RunConfig& a, const RunConfig& b);

struct CheckpointMeta {
  int64_t epoch = 0;  // epochs completed
  int64_t global_step = 0;
  real best_val = 0;
};

void save_checkpoint(const std::string& path, const RunConfig& cfg, const IvptModel& model,
                     const AdamOptimizer& opt, const CheckpointMeta& meta);

struct LoadedRun {
  RunConfig config;
  std::unique_ptr<IvptModel> model;
  AdamOptimizer opt;
  CheckpointMeta meta;
};
LoadedRun load_checkpoint(const std::string& path);

// Dataset plus split indices, assembled per the config (synthetic generator
// or image folder; folder splits reuse the same pure shuffle rule).
struct DataBundle {
  std::vector<AnnotatedSample> all;
  std::vector<int64_t> train, val, test;
  std::string manifest_json;  // synthetic runs only
};
DataBundle load_data(const RunConfig& cfg);

// Materializes one split ("train", "val", "test", or "all") in index order.
std::vector<AnnotatedSample> select_split(const DataBundle& data, const std::string& split);

struct TrainResult {
  real final_val_accuracy = 0;
  real best_val_accuracy = 0;
  std::string final_checkpoint;
  std::string best_checkpoint;
  int64_t global_steps = 0;
  MetricReport final_val_metrics;
};

// Runs the optimization loop: two Adam parameter groups at their own rates,
// step decay every `decay_every_epochs`, one JSON log record per step (loss
// report + diagnostics) and one per epoch (validation metrics). Writes the
// resolved config plus best/final checkpoints into cfg.output_dir. Non-finite
// losses abort with a diagnostic record of the offending batch.
TrainResult train(const RunConfig& cfg, std::ostream& log, const std::string& resume_from = "");

// Metric evaluation of one split through the exact train-time code path.
MetricReport evaluate_split(const IvptModel& model, const RunConfig& cfg, const DataBundle& data,
                            const std::string& split, uint64_t stability_seed = 0);

struct VisualizeResult {
  std::vector<std::string> files_written;
  std::vector<std::string> errors;  // undecodable inputs, one record each
};

// Writes, per image, one region overlay per prompted layer
// ({id}_layer{block}.png: concepts in solid palette colors over the dimmed
// input) and one importance bar chart ({id}_importance.png). With
// dump_assignments, additionally exports {id}_layer{block}_assignment.npy.
VisualizeResult visualize(const IvptModel& model, const std::vector<AnnotatedSample>& images,
                          const std::string& out_dir, bool dump_assignments = false);

// Solid overlay color of a foreground concept (every entry has one channel at
// 255, which the dimmed background can never reach: decoding is unambiguous).
std::array<unsigned char, 3> viz_palette_color(int concept_id);
int viz_palette_size();

struct AblationRow {
  std::string setting;
  bool ok = false;
  real consistency = 0, stability = 0, accuracy = 0;
  std::string error;
};

// Axes: "layers" (prompted-layer count, concept schedule sliced from the
// tail), "prototype_counts" (per-layer concept schedules), "loss_toggles"
// (default / lambda_con=0 / lambda_ps=0). Every setting trains and evaluates
// with the shared seed; failures are recorded and the sweep continues.
std::vector<AblationRow> ablate(const RunConfig& base, const std::string& axis, std::ostream& log);

// Tab-separated table with the columns (setting, Con., Sta., Acc.).
std::string ablation_table(const std::vector<AblationRow>& rows);

}  // namespace ivpt
