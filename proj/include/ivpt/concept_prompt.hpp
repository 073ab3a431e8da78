#pragma once

#include "ivpt/nn.hpp"

namespace ivpt {

// Learnable state for one prompted layer: m concept prototypes (row m-1 is the
// designated background concept) and a per-concept spatial bias over the patch
// grid.
struct ConceptPrototypeSet {
  Var q;     // [m,d], rows ~ N(0, 0.05^2)
  Var bias;  // [m,h,w], zero-initialized
  int layer_index = 0;
  int64_t m = 0, h = 0, w = 0;

  ConceptPrototypeSet() = default;
  ConceptPrototypeSet(int64_t m, int64_t d, int64_t h, int64_t w, int layer_index, Rng& rng);
  void register_params(ParamRegistry& reg, const std::string& prefix, ParamGroup group) const;
};

// Concept region discovery output. All map tensors are [B,m,P] with P = h*w
// flattened row-major; `assignment` is the per-patch argmax concept.
struct AttentionAndRegions {
  Var pre_bias;  // channel softmax of negative squared distances; sums to 1 over m
  Var att;       // pre_bias + spatial bias (may leave [0,1])
  Var regions;   // winner-take-all: att at the argmax channel, 0 elsewhere
  IntArray assignment;  // [B,P]
};

// CRD: per-patch softmax over concepts of -||e - q||^2, spatial bias added
// after the softmax, then argmax region masks (ties -> lowest concept index).
AttentionAndRegions compute_regions(const Var& patch_tokens,  // [B,P,d]
                                    const ConceptPrototypeSet& protos);

// IFA: p_k = sum_ij r_k,ij e_ij / (sum_ij r_k,ij + eps). A concept with zero
// region mass yields the zero vector and bumps the diagnostic counter.
struct AggregatedPrompts {
  Var prompts;  // [B,m,d]
  int zero_mass_regions = 0;
};
AggregatedPrompts aggregate_prompts(const Var& regions, const Var& patch_tokens,
                                    real eps = 1e-6);

}  // namespace ivpt
