#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ivpt/autodiff.hpp"

namespace ivpt {

// Weights of the composite objective. The three top-level lambdas scale the
// classification, part-shaping, and cross-layer consistency blocks; the six
// sub-weights scale the part-shaping terms inside lambda_ps. All default 1.
struct LossWeights {
  real lambda_cls = 1, lambda_ps = 1, lambda_con = 1;
  // Sub-weight defaults balance the raw term magnitudes for a from-scratch
  // micro backbone. The entropy term sums over every patch (it grows with
  // H*W), and together with total variation it rewards a single constant
  // winner per image; at weight 1 those two overwhelm the foreground-presence
  // term (whose gradient is sparse: one pooled argmax per concept) and the
  // maps collapse to all-background before the classifier sees a signal.
  // Foreground presence is the only force that can revive a concept whose
  // region map is empty (winner-take-all masks carry no gradient), so it gets
  // the largest weight.
  real w_orthogonality = 0.5, w_equivariance = 1, w_presence_fg = 3, w_presence_bg = 0.5;
  real w_entropy = 0.02, w_total_variation = 0.25;

  void validate() const;  // all weights must be >= 0
};

// Per-step scalar record of every objective component. `total` satisfies
//   total = lambda_cls*cls + lambda_ps*(weighted sum of part terms)
//         + lambda_con*consistency
// where the part terms and consistency are already averaged across prompted
// layers. Per-layer breakdowns are kept for the diagnostics stream.
struct LossReport {
  real cls = 0, orthogonality = 0, equivariance = 0, presence_fg = 0, presence_bg = 0;
  real entropy = 0, total_variation = 0, consistency = 0, total = 0;
  std::vector<real> per_layer_ps;           // part-shaping sum per prompted layer
  std::vector<real> per_layer_consistency;  // one entry per fine layer (vs the final layer)
  std::string to_json_line(int64_t step, int epoch) const;
};

// Classification head bundle: one linear head per fused concept; the class
// score is the mean of the per-concept scores.
struct ClassificationResult {
  Var loss;        // scalar cross-entropy of the averaged score
  Var scores;      // [B,n,C] per-concept scores s_k
  Var avg_scores;  // [B,C]
};
ClassificationResult classification_loss(const std::vector<Var>& head_outputs,  // n of [B,C]
                                         const IntArray& labels);

// Sum of pairwise cosine similarities over all ordered pairs of prototype
// rows (background included). Bounded by ±m(m-1).
Var orthogonality_loss(const Var& q, real eps = 1e-8);

// 1 - mean normalized correlation between original foreground attention maps
// and the inverse-warped transformed-branch maps. `att` and `att_t_unwarped`
// live in the original frame; `att_t_raw` (the un-warped transformed maps)
// supplies the second norm of the denominator. All inputs [B,K,P], foreground
// channels only.
Var equivariance_corr_loss(const Var& att, const Var& att_t_unwarped, const Var& att_t_raw,
                           real eps = 1e-8);

// Radial mask rising from 0 at the image center to 1 at the corners:
// m_ij = 2*((i-1)/(H-1) - 1/2)^2 + 2*((j-1)/(W-1) - 1/2)^2 with 1-based i,j.
Array radial_mask(int64_t h, int64_t w);

// Foreground presence: every foreground concept should attain a (3x3-pooled)
// attention max near 1 somewhere in the batch. Background presence: the
// radially-masked background attention max should be near 1 in every image.
// `att` is [B,m,H,W]; channel m-1 is the background concept.
struct PresenceLosses {
  Var fg;  // L_p1
  Var bg;  // L_p0
  int log_floor_hits = 0;  // times the log argument hit the eps floor
};
PresenceLosses presence_losses(const Var& att, real eps = 1e-8);

// Mean per-pixel assignment entropy: -(1/(B*(K+1))) sum a*log a, with the
// log argument floored at eps and a clamped to [0,1] so exact one-hot maps
// score exactly zero. No spatial normalization (matches the closed form
// H*W*log(K+1)/(K+1) for uniform maps).
Var entropy_loss(const Var& att, real eps = 1e-8);

// Anisotropic total variation: (1/(B*H*W)) sum over channels of absolute
// horizontal plus vertical finite differences. `att` is [B,m,H,W].
Var total_variation_loss(const Var& att);

// Pieces assembled by the orchestrator (model forward) for one batch.
struct TotalLossInputs {
  Var cls;
  std::vector<Var> orthogonality;   // per prompted layer
  std::vector<Var> equivariance;    // per prompted layer
  std::vector<Var> presence_fg;     // per prompted layer
  std::vector<Var> presence_bg;     // per prompted layer
  std::vector<Var> entropy;         // per prompted layer
  std::vector<Var> total_variation; // per prompted layer
  std::vector<Var> consistency;     // per adjacent layer pair (may be empty)
};

// Weighted total per the composite objective; part-shaping and consistency
// terms are averaged across layers before weighting. Also fills a LossReport
// whose `total` is re-derived from the component fields as a cross-check.
Var total_loss(const TotalLossInputs& in, const LossWeights& w, LossReport* report);

}  // namespace ivpt
