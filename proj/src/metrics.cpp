#include "ivpt/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "json.hpp"

namespace ivpt {

int64_t keypoint_patch_cell(real coord, int64_t image_size, int64_t grid) {
  const int64_t patch = image_size / grid;
  int64_t cell = static_cast<int64_t>(std::floor(coord / real(patch)));
  return std::clamp<int64_t>(cell, 0, grid - 1);
}

namespace {

int64_t grid_of(const IntArray& assignment) {
  if (assignment.ndim() != 2 || assignment.dim(0) != assignment.dim(1)) {
    throw std::invalid_argument("metrics: assignment grids must be square [g,g]");
  }
  return assignment.dim(0);
}

int64_t cell_index(real x, real y, int64_t image_size, int64_t grid) {
  return keypoint_patch_cell(y, image_size, grid) * grid +
         keypoint_patch_cell(x, image_size, grid);
}

}  // namespace

ConsistencyResult consistency_score(const std::vector<IntArray>& assignments,
                                    const std::vector<AnnotatedSample>& samples,
                                    int64_t image_size, int num_concepts) {
  if (assignments.size() != samples.size()) {
    throw std::invalid_argument("consistency_score: assignments/samples length mismatch");
  }
  ConsistencyResult res;
  if (assignments.empty() || num_concepts < 2) return res;
  const int64_t grid = grid_of(assignments.front());

  // counts[k][part] = keypoint incidences of ground-truth `part` in concept k.
  std::vector<std::map<int, int64_t>> counts(static_cast<size_t>(num_concepts));
  for (size_t i = 0; i < samples.size(); ++i) {
    for (const Keypoint& kp : samples[i].keypoints) {
      if (!kp.visible) continue;
      const int64_t cell = cell_index(kp.x, kp.y, image_size, grid);
      const int64_t k = assignments[i][cell];
      if (k < 0 || k >= num_concepts - 1) continue;  // background or malformed
      counts[static_cast<size_t>(k)][kp.part_id]++;
    }
  }

  real sum = 0;
  int included = 0;
  for (int k = 0; k < num_concepts - 1; ++k) {
    int64_t total = 0, best = 0;
    int best_part = -1;
    for (const auto& [part, n] : counts[static_cast<size_t>(k)]) {
      total += n;
      if (n > best) {  // map iteration is part-ascending, so ties keep the lowest id
        best = n;
        best_part = part;
      }
    }
    if (total == 0) {
      ++res.excluded_concepts;
      continue;
    }
    res.majority_part[k] = best_part;
    sum += real(best) / real(total);
    ++included;
  }
  res.score = included ? 100.0 * sum / included : 0.0;
  return res;
}

StabilityCore stability_core(const IntArray& before, const IntArray& after,
                             const std::vector<Keypoint>& keypoints, const AffineSpec& spec,
                             int64_t image_size) {
  const int64_t grid = grid_of(before);
  if (!before.same_shape(after)) {
    throw std::invalid_argument("stability_core: grid shape mismatch");
  }
  StabilityCore core;
  for (const Keypoint& kp : keypoints) {
    if (!kp.visible) continue;
    real nx = 0, ny = 0;
    spec.map_point(kp.x, kp.y, image_size, image_size, &nx, &ny);
    if (nx < 0 || ny < 0 || nx >= real(image_size) || ny >= real(image_size)) {
      ++core.excluded;
      continue;
    }
    const int64_t b = before[cell_index(kp.x, kp.y, image_size, grid)];
    const int64_t a = after[cell_index(nx, ny, image_size, grid)];
    ++core.compared;
    if (a == b) ++core.unchanged;
  }
  return core;
}

IouStats cross_layer_iou_core(const std::vector<IntArray>& fine_assignments,
                              const std::vector<int>& fine_group_of,
                              const std::vector<IntArray>& coarse_assignments,
                              const std::vector<int>& coarse_group_of, int num_groups) {
  if (fine_assignments.size() != coarse_assignments.size()) {
    throw std::invalid_argument("cross_layer_iou: image count mismatch");
  }
  const int mf = static_cast<int>(fine_group_of.size());
  const int mc = static_cast<int>(coarse_group_of.size());
  IouStats stats;
  std::vector<real> values;
  for (size_t i = 0; i < fine_assignments.size(); ++i) {
    const IntArray& fa = fine_assignments[i];
    const IntArray& ca = coarse_assignments[i];
    if (!fa.same_shape(ca)) {
      throw std::invalid_argument("cross_layer_iou: grids must share one resolution");
    }
    for (int g = 1; g <= num_groups; ++g) {
      int64_t inter = 0, uni = 0;
      for (int64_t c = 0; c < fa.numel(); ++c) {
        const int64_t kf = fa[c], kc = ca[c];
        // The last concept of each layer is background; everything else maps
        // through its grouping.
        const bool in_f = kf >= 0 && kf < mf - 1 && fine_group_of[static_cast<size_t>(kf)] == g;
        const bool in_c = kc >= 0 && kc < mc - 1 && coarse_group_of[static_cast<size_t>(kc)] == g;
        if (in_f && in_c) ++inter;
        if (in_f || in_c) ++uni;
      }
      if (uni == 0) {
        ++stats.skipped;
      } else {
        values.push_back(real(inter) / real(uni));
      }
    }
  }
  stats.count = static_cast<int>(values.size());
  if (!values.empty()) {
    real sum = 0;
    for (real v : values) sum += v;
    stats.mean = sum / real(values.size());
    real var = 0;
    for (real v : values) var += (v - stats.mean) * (v - stats.mean);
    stats.stddev = std::sqrt(var / real(values.size()));
  }
  return stats;
}

std::vector<real> importance_scores(const std::vector<Array>& head_scores, int* predicted_class) {
  if (head_scores.empty()) throw std::invalid_argument("importance_scores: no head scores");
  const int64_t C = head_scores.front().numel();
  Array avg({C});
  for (const Array& s : head_scores) {
    if (s.numel() != C) throw std::invalid_argument("importance_scores: class count mismatch");
    for (int64_t c = 0; c < C; ++c) avg[c] += s[c];
  }
  int64_t pred = 0;
  for (int64_t c = 1; c < C; ++c) {
    if (avg[c] > avg[pred]) pred = c;
  }
  if (predicted_class) *predicted_class = static_cast<int>(pred);

  std::vector<real> out;
  out.reserve(head_scores.size());
  for (const Array& s : head_scores) {
    real mx = s[0];
    for (int64_t c = 1; c < C; ++c) mx = std::max(mx, s[c]);
    real denom = 0;
    for (int64_t c = 0; c < C; ++c) denom += std::exp(s[c] - mx);
    out.push_back(std::exp(s[pred] - mx) / denom);
  }
  return out;
}

std::string MetricReport::to_json() const {
  nlohmann::json j;
  j["consistency"] = consistency;
  j["stability"] = stability;
  j["accuracy"] = accuracy;
  nlohmann::json parts = nlohmann::json::object();
  for (const auto& [k, p] : per_concept_part_assignment) parts[std::to_string(k)] = p;
  j["per_concept_part_assignment"] = parts;
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& r : cross_layer_iou) {
    rows.push_back({{"fine_layer", r.fine_layer},
                    {"block", r.block},
                    {"mean", r.stats.mean},
                    {"std", r.stats.stddev},
                    {"count", r.stats.count},
                    {"skipped", r.stats.skipped}});
  }
  j["cross_layer_iou"] = rows;
  j["consistency_excluded"] = consistency_excluded;
  j["stability_excluded"] = stability_excluded;
  return j.dump();
}

Array stack_images(const std::vector<AnnotatedSample>& samples, size_t first, size_t count) {
  if (count == 0 || first + count > samples.size()) {
    throw std::invalid_argument("stack_images: range out of bounds");
  }
  const Shape& s = samples[first].image.shape();
  Array out({static_cast<int64_t>(count), s[0], s[1], s[2]});
  const int64_t per = s[0] * s[1] * s[2];
  for (size_t i = 0; i < count; ++i) {
    const Array& img = samples[first + i].image;
    if (img.shape() != s) throw std::invalid_argument("stack_images: inhomogeneous shapes");
    for (int64_t j = 0; j < per; ++j) out[static_cast<int64_t>(i) * per + j] = img[j];
  }
  return out;
}

namespace {

// Splits a [B,P] assignment into per-image [g,g] grids.
std::vector<IntArray> split_assignment(const IntArray& assignment, int64_t grid) {
  const int64_t B = assignment.dim(0), P = assignment.dim(1);
  std::vector<IntArray> out;
  out.reserve(static_cast<size_t>(B));
  for (int64_t b = 0; b < B; ++b) {
    IntArray g({grid, grid});
    for (int64_t p = 0; p < P; ++p) g[p] = assignment[b * P + p];
    out.push_back(std::move(g));
  }
  return out;
}

}  // namespace

MetricReport evaluate_model(const IvptModel& model, const std::vector<AnnotatedSample>& samples,
                            const EvalOptions& opt) {
  const int npl = model.num_prompted_layers();
  if (npl < 1) throw std::invalid_argument("evaluate_model: model has no prompted layers");
  const int eval_pos = opt.eval_layer >= 0 ? opt.eval_layer : std::max(0, npl - 2);
  if (eval_pos >= npl) throw std::invalid_argument("evaluate_model: eval layer out of range");
  if (samples.empty()) throw std::invalid_argument("evaluate_model: empty sample set");
  const auto& bcfg = model.backbone_config();
  const int64_t grid = bcfg.grid(), image_size = bcfg.image_size;

  std::vector<std::vector<IntArray>> clean(static_cast<size_t>(npl));  // [layer][image]
  std::vector<std::vector<int>> group_of(static_cast<size_t>(npl));
  StabilityCore stab;
  int correct = 0;

  NoGradGuard ng;
  for (size_t first = 0; first < samples.size();) {
    const size_t count = std::min<size_t>(static_cast<size_t>(opt.batch_size),
                                          samples.size() - first);
    Array batch = stack_images(samples, first, count);
    ForwardTrace tr = model.forward(batch, /*with_noise=*/false, 0);
    for (int l = 0; l < npl; ++l) {
      auto grids = split_assignment(tr.layers[static_cast<size_t>(l)].att.assignment, grid);
      for (auto& g : grids) clean[static_cast<size_t>(l)].push_back(std::move(g));
      if (group_of[static_cast<size_t>(l)].empty()) {
        group_of[static_cast<size_t>(l)] = tr.layers[static_cast<size_t>(l)].groups.group_of;
      }
    }
    // Accuracy from the averaged head scores.
    const int64_t C = bcfg.class_count;
    for (size_t i = 0; i < count; ++i) {
      std::vector<Array> scores;
      for (const Var& hs : tr.head_scores) {
        Array s({C});
        for (int64_t c = 0; c < C; ++c) s[c] = hs->value[static_cast<int64_t>(i) * C + c];
        scores.push_back(std::move(s));
      }
      int pred = 0;
      importance_scores(scores, &pred);
      if (pred == samples[first + i].label) ++correct;
    }

    // Perturbed pass for stability: per-image translation plus pixel noise.
    Array perturbed({static_cast<int64_t>(count), 3, image_size, image_size});
    std::vector<AffineSpec> specs(count);
    const int64_t per = 3 * image_size * image_size;
    for (size_t i = 0; i < count; ++i) {
      const uint64_t s =
          derive_seed(opt.stability.seed, "stability", static_cast<uint64_t>(first + i));
      Rng rng(s);
      AffineSpec spec;
      spec.tx_frac = rng.uniform(-opt.stability.max_translate_frac,
                                 opt.stability.max_translate_frac);
      spec.ty_frac = rng.uniform(-opt.stability.max_translate_frac,
                                 opt.stability.max_translate_frac);
      specs[i] = spec;
      Array one({1, 3, image_size, image_size});
      const Array& img = samples[first + i].image;
      real lo = img[0], hi = img[0];
      for (int64_t j = 0; j < per; ++j) {
        one[j] = img[j];
        lo = std::min(lo, img[j]);
        hi = std::max(hi, img[j]);
      }
      Array warped = warp_images(one, spec);
      const real sigma = opt.stability.noise_frac * (hi - lo);
      for (int64_t j = 0; j < per; ++j) {
        perturbed[static_cast<int64_t>(i) * per + j] =
            warped[j] + (sigma > 0 ? rng.normal(0, sigma) : 0.0);
      }
    }
    ForwardTrace ptr = model.forward(perturbed, /*with_noise=*/false, 0, /*with_heads=*/false);
    auto after = split_assignment(ptr.layers[static_cast<size_t>(eval_pos)].att.assignment, grid);
    for (size_t i = 0; i < count; ++i) {
      const auto& before = clean[static_cast<size_t>(eval_pos)][first + i];
      StabilityCore c = stability_core(before, after[i], samples[first + i].keypoints, specs[i],
                                       image_size);
      stab.unchanged += c.unchanged;
      stab.compared += c.compared;
      stab.excluded += c.excluded;
    }
    first += count;
  }

  MetricReport rep;
  const int m_eval = static_cast<int>(model.fusion_config().per_layer_m[static_cast<size_t>(
      eval_pos)]);
  ConsistencyResult con =
      consistency_score(clean[static_cast<size_t>(eval_pos)], samples, image_size, m_eval);
  rep.consistency = con.score;
  rep.per_concept_part_assignment = con.majority_part;
  rep.consistency_excluded = con.excluded_concepts;
  rep.stability = stab.percent();
  rep.stability_excluded = stab.excluded;
  rep.accuracy = 100.0 * correct / real(samples.size());
  for (int l = 0; l + 1 < npl; ++l) {
    MetricReport::IouRow row;
    row.fine_layer = l;
    row.block = bcfg.first_prompted_layer() + l;
    row.stats = cross_layer_iou_core(clean[static_cast<size_t>(l)],
                                     group_of[static_cast<size_t>(l)],
                                     clean[static_cast<size_t>(npl - 1)],
                                     group_of[static_cast<size_t>(npl - 1)],
                                     static_cast<int>(model.fusion_config().num_groups));
    rep.cross_layer_iou.push_back(row);
  }
  return rep;
}

}  // namespace ivpt
