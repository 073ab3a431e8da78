#pragma once

#include <array>
#include <string>
#include <vector>

#include "ivpt/array.hpp"
#include "ivpt/rng.hpp"

namespace ivpt {

struct Keypoint {
  int part_id = 0;
  real x = 0, y = 0;  // pixel coordinates, x = column, y = row
  bool visible = false;
};

struct AnnotatedSample {
  std::string id;
  Array image;  // [3,H,W], normalized
  int label = 0;
  std::vector<Keypoint> keypoints;
};

// Fixed per-channel normalization constants. Pinned rather than computed from
// the data so every run (and the PNG round trip) shares one scale; recorded in
// the manifest.
inline constexpr real kPixelMean[3] = {0.45, 0.45, 0.45};
inline constexpr real kPixelStd[3] = {0.27, 0.27, 0.27};

struct SynthConfig {
  int num_parts = 4;
  int num_classes = 4;
  int samples_per_class = 500;
  int64_t image_size = 64;
  bool jitter = true;  // master switch for the per-sample affine jitter
  real jitter_angle_deg = 10.0;
  real jitter_translate_frac = 0.05;
  real jitter_scale_lo = 0.95, jitter_scale_hi = 1.05;
  real clutter = 0.3;  // 0 disables background noise and distractor blobs
  uint64_t seed = 0;

  void validate() const;
  std::string canonical() const;  // stable key=value serialization for hashing
};

// Part colors come from a fixed palette; class c paints part p with palette
// entry (p + c) mod palette_size(), so classes are distinct color rotations of
// one geometry. Capacity: num_classes <= palette_size().
int palette_size();
std::array<real, 3> palette_color(int idx);
int attribute_palette_index(int class_id, int part_id);

struct SynthDataset {
  SynthConfig config;
  std::vector<AnnotatedSample> samples;  // class-major global order
  std::vector<int64_t> train_indices, val_indices, test_indices;
  std::string manifest_json;
};

// Deterministic 70/15/15 shuffle-split of [0,n); a pure function of (n, seed).
void split_indices(int64_t n, uint64_t seed, std::vector<int64_t>* train,
                   std::vector<int64_t>* val, std::vector<int64_t>* test);

// Renders one sample from its derived seed. The optional mask receives the
// topmost part id per pixel (-1 = background) for containment oracles.
AnnotatedSample render_sample(const SynthConfig& cfg, int class_id, int index,
                              IntArray* part_mask = nullptr);

SynthDataset generate(const SynthConfig& cfg);
uint64_t config_hash(const SynthConfig& cfg);

struct LoadReport {
  std::vector<std::string> class_names;  // sorted; index = label
  int images_loaded = 0;
  int undecodable = 0;
  int missing_keypoints = 0;
  std::vector<std::string> errors;
};

// Writes root/<class>/<id>.png (denormalized pixels), root/keypoints.txt
// (rows: image_id part_id x y visible) and root/manifest.json.
void write_folder(const SynthDataset& ds, const std::string& root);

// Loads an image-folder dataset: labels from sorted class directory names,
// keypoints matched by image id (file stem). Undecodable images are skipped
// with an error record; images absent from the keypoint file load with empty
// keypoints and bump the warning counter.
std::vector<AnnotatedSample> load_folder(const std::string& root, const std::string& keypoint_file,
                                         LoadReport* report = nullptr);

}  // namespace ivpt
