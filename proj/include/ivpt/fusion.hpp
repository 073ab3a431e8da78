#pragma once

#include "ivpt/concept_prompt.hpp"

namespace ivpt {

// Cross-layer fine-to-coarse configuration: per_layer_m[i] is the concept
// count of the i-th prompted layer and must be strictly decreasing, so deeper
// layers are coarser. Every layer's concepts are grouped into the same
// num_groups semantic groups (plus group 0 = background).
struct FusionConfig {
  std::vector<int64_t> per_layer_m = {12, 10, 8, 6};
  int64_t num_groups = 4;        // n; group output dimension is n+1
  real temperature = 1.0;        // Gumbel-Softmax temperature
  bool hard_assignment = true;   // straight-through one-hot when true
  bool use_gelu = true;          // fusion MLP activation (identity when false)

  void validate() const;
};

// Result of grouping one layer's concepts. `onehot` is [m,n+1]: hard rows in
// straight-through mode, soft simplex rows otherwise. Group 0 is background.
struct GroupAssignment {
  Var logits;               // [m,n+1] pre-noise group scores
  Var onehot;               // [m,n+1]
  std::vector<int> group_of;  // argmax group per concept (diagnostic view)
};

// Learnable linear map f_g: prototype [d] -> group logits [n+1] for one layer.
struct GroupingLayer {
  LinearLayer proj;
  int64_t num_groups = 0;

  GroupingLayer() = default;
  GroupingLayer(int64_t d, int64_t num_groups, Rng& rng);

  // Gumbel-Softmax over groups. Noise is drawn from `noise_seed` so a step is
  // reproducible; with_noise=false gives the deterministic evaluation path.
  GroupAssignment assign(const Var& prototypes, real temperature, bool hard, bool with_noise,
                         uint64_t noise_seed) const;
  void register_params(ParamRegistry& reg, const std::string& prefix, ParamGroup group) const;
};

// Group-mean pooling of per-concept prompt vectors. Empty groups yield zero
// vectors; *occupancy (size n+1, concepts per group) is filled if non-null.
Var fuse_group_means(const Var& prompts,        // [B,m,d]
                     const GroupAssignment& a,  // onehot [m,n+1]
                     std::vector<int64_t>* occupancy = nullptr);

// Shared MLP applied to group means: LN -> linear -> activation -> linear.
struct FusionBlock {
  LayerNormLayer ln;
  LinearLayer fc1, fc2;
  bool use_gelu = true;

  FusionBlock() = default;
  FusionBlock(int64_t d, Rng& rng, bool use_gelu);
  Var forward(const Var& group_means) const;  // [B,n+1,d] -> [B,n+1,d]
  void register_params(ParamRegistry& reg, const std::string& prefix, ParamGroup group) const;
};

// Pools raw region maps into per-group spatial maps: out[b,g,p] =
// sum_k onehot[k,g] * regions[b,k,p]. Output is [B,n+1,P].
Var group_region_maps(const Var& regions, const GroupAssignment& a);

// Cross-layer consistency: KL(coarse || fine) per group over the flattened
// spatial axis, where both maps are floored at `eps` and renormalized to
// distributions first; terms are q_c * log(q_c / q_f), averaged over batch
// and groups. Inputs are [B,G,P] grouped region maps.
Var consistency_loss(const Var& fine_grouped, const Var& coarse_grouped, real eps = 1e-8);

}  // namespace ivpt
