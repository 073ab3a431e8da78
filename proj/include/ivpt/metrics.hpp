#pragma once

#include <map>
#include <string>
#include <vector>

#include "ivpt/data.hpp"
#include "ivpt/model.hpp"

namespace ivpt {

// Maps a pixel keypoint to its patch-grid cell: floor(pixel / patch) with
// boundary clamping.
int64_t keypoint_patch_cell(real coord, int64_t image_size, int64_t grid);

struct ConsistencyResult {
  real score = 0;                       // percent, mean majority share
  std::map<int, int> majority_part;     // foreground concept -> part id
  int excluded_concepts = 0;            // concepts with no keypoint incidence
};

// Consistency over assignment grids at one layer. `assignments` holds one
// [grid,grid] concept-id grid per sample (parallel to `samples`); the last
// concept id (num_concepts-1) is background and ignored. For each foreground
// concept, the score is the share of keypoint incidences owned by its most
// frequent ground-truth part.
ConsistencyResult consistency_score(const std::vector<IntArray>& assignments,
                                    const std::vector<AnnotatedSample>& samples,
                                    int64_t image_size, int num_concepts);

struct StabilityCore {
  int unchanged = 0;
  int compared = 0;
  int excluded = 0;  // keypoints mapped outside the image
  real percent() const { return compared ? 100.0 * unchanged / compared : 100.0; }
};

// Compares the concept assigned to each visible keypoint's patch before vs
// after an affine perturbation; keypoints are mapped forward through `spec`.
StabilityCore stability_core(const IntArray& before, const IntArray& after,
                             const std::vector<Keypoint>& keypoints, const AffineSpec& spec,
                             int64_t image_size);

struct StabilityOptions {
  real noise_frac = 0.05;          // Gaussian sigma as a fraction of dynamic range
  real max_translate_frac = 0.05;  // translation bound of the affine jitter
  uint64_t seed = 0;
};

struct IouStats {
  real mean = 0, stddev = 0;  // population std over (image, group) values
  int count = 0;
  int skipped = 0;  // empty-union pairs
};

// IoU between the union of member fine regions and the coarse region of each
// foreground group, pooled over images. Assignment grids hold concept ids;
// `group_of` maps concept -> group (0 = background group); the last concept of
// each layer is background and excluded from every union.
IouStats cross_layer_iou_core(const std::vector<IntArray>& fine_assignments,
                              const std::vector<int>& fine_group_of,
                              const std::vector<IntArray>& coarse_assignments,
                              const std::vector<int>& coarse_group_of, int num_groups);

// Per-group probability mass on the predicted class: softmax each group's
// score vector over classes and read the entry of the class predicted by the
// averaged scores. `head_scores` holds n vectors of C logits for one image.
std::vector<real> importance_scores(const std::vector<Array>& head_scores,
                                    int* predicted_class = nullptr);

struct MetricReport {
  real consistency = 0;  // percent
  real stability = 0;    // percent
  real accuracy = 0;     // percent
  std::map<int, int> per_concept_part_assignment;
  struct IouRow {
    int fine_layer = 0;  // prompted-layer position (0 = shallowest)
    int block = 0;       // absolute backbone block index
    IouStats stats;
  };
  std::vector<IouRow> cross_layer_iou;
  int consistency_excluded = 0;
  int stability_excluded = 0;
  std::string to_json() const;
};

struct EvalOptions {
  // Prompted-layer position used for consistency/stability; -1 picks the
  // second-to-last prompted layer (the layer itself when only one exists).
  int eval_layer = -1;
  StabilityOptions stability;
  int batch_size = 16;
};

// Runs the full interpretability evaluation of a frozen model on a sample set.
MetricReport evaluate_model(const IvptModel& model, const std::vector<AnnotatedSample>& samples,
                            const EvalOptions& opt = {});

// Stacks samples[first..first+count) into a [count,3,H,W] batch tensor.
Array stack_images(const std::vector<AnnotatedSample>& samples, size_t first, size_t count);

}  // namespace ivpt
