#pragma once

#include "ivpt/backbone.hpp"
#include "ivpt/concept_prompt.hpp"
#include "ivpt/fusion.hpp"
#include "ivpt/losses.hpp"

namespace ivpt {

// Geometric transform sampled for the equivariance loss and the stability
// perturbation: rotation/scale about the image center plus translation as a
// fraction of the raster size. Applies to any raster (pixels or patch grid)
// through `theta_for`.
struct AffineSpec {
  real angle_deg = 0, scale = 1, tx_frac = 0, ty_frac = 0;

  // Row-major [a,b,tx,c,d,ty] mapping output pixel (x,y) to input pixel.
  std::array<real, 6> theta_for(int64_t h, int64_t w) const;
  AffineSpec inverse() const;
  // Maps a pixel coordinate forward (the location in the transformed image
  // where the original content at (x,y) lands).
  void map_point(real x, real y, int64_t h, int64_t w, real* out_x, real* out_y) const;
  bool near_degenerate() const { return std::abs(scale) < 0.05; }
};

AffineSpec sample_affine(Rng& rng, real max_angle_deg, real max_translate_frac, real scale_lo,
                         real scale_hi);

// Warps [B,C,H,W] images (or [B,K,h,w] maps) with the spec's transform.
Array warp_images(const Array& images, const AffineSpec& spec);

// Per-prompted-layer artifacts exposed by one forward pass.
struct LayerTrace {
  AttentionAndRegions att;
  GroupAssignment groups;
  Var prompts_raw;  // [B,m,d] aggregated concept prompts
  Var fused;        // [B,n+1,d] fusion MLP output (group 0 = background)
  std::vector<int64_t> occupancy;  // concepts per group
  int zero_mass_regions = 0;
};

struct ForwardTrace {
  BackboneTrace backbone;
  std::vector<LayerTrace> layers;  // one per prompted layer, shallow to deep
  std::vector<Var> head_scores;    // n tensors [B,C] (empty if heads skipped)
};

struct StepDiagnostics {
  std::vector<std::vector<int64_t>> occupancy;  // per layer
  std::vector<int> empty_groups;                // per layer (foreground groups)
  int zero_mass_regions = 0;
  int transform_resamples = 0;
};

struct StepOutput {
  Var total;
  LossReport report;
  ForwardTrace trace;
  StepDiagnostics diagnostics;
};

// The full interpretable-prompt model: ViT backbone, per-prompted-layer
// concept prototypes + grouping + fusion MLP, and per-group classifier heads.
class IvptModel {
 public:
  IvptModel(const BackboneConfig& bcfg, const FusionConfig& fcfg, uint64_t seed);

  const BackboneConfig& backbone_config() const { return bcfg_; }
  const FusionConfig& fusion_config() const { return fcfg_; }
  int num_prompted_layers() const { return bcfg_.num_prompted_layers; }

  // Forward with the concept-prompt machinery at every prompted block. Gumbel
  // noise streams derive from noise_seed; with_noise=false is the evaluation
  // path. Heads run only when with_heads.
  ForwardTrace forward(const Array& images, bool with_noise, uint64_t noise_seed,
                       bool with_heads = true) const;

  // Full composite objective on one batch, including the transformed
  // equivariance branch (transform sampled from step_seed).
  StepOutput compute_total_loss(const Array& images, const IntArray& labels,
                                const LossWeights& weights, uint64_t step_seed) const;

  void register_params(ParamRegistry& reg) const;
  void set_frozen_backbone(bool frozen) const { vit.set_frozen(frozen); }

  VisionTransformer vit;
  std::vector<ConceptPrototypeSet> prototypes;  // per prompted layer
  std::vector<GroupingLayer> groupers;
  std::vector<FusionBlock> fusers;
  std::vector<LinearLayer> heads;  // n heads, d -> C

 private:
  BackboneConfig bcfg_;
  FusionConfig fcfg_;
};

}  // namespace ivpt
