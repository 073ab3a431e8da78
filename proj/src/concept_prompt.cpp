#include "ivpt/concept_prompt.hpp"

#include <cmath>
#include <stdexcept>

#include "ivpt/ops.hpp"

namespace ivpt {

ConceptPrototypeSet::ConceptPrototypeSet(int64_t m_, int64_t d, int64_t h_, int64_t w_,
                                         int layer_index_, Rng& rng)
    : layer_index(layer_index_), m(m_), h(h_), w(w_) {
  if (m < 1 || d < 1 || h < 1 || w < 1) {
    throw std::invalid_argument("ConceptPrototypeSet: all dimensions must be positive");
  }
  q = parameter(randn({m, d}, rng, 0.05));
  bias = parameter(Array::zeros({m, h, w}));
}

void ConceptPrototypeSet::register_params(ParamRegistry& reg, const std::string& prefix,
                                          ParamGroup group) const {
  reg.add(prefix + ".q", q, group);
  reg.add(prefix + ".bias", bias, group);
}

AttentionAndRegions compute_regions(const Var& patch_tokens, const ConceptPrototypeSet& protos) {
  if (patch_tokens->value.ndim() != 3) {
    throw std::invalid_argument("compute_regions: patch tokens must be [B,P,d]");
  }
  const int64_t B = patch_tokens->value.dim(0);
  const int64_t P = patch_tokens->value.dim(1);
  const int64_t d = patch_tokens->value.dim(2);
  if (P != protos.h * protos.w) {
    throw std::invalid_argument("compute_regions: patch count does not match bias grid");
  }
  if (d != protos.q->value.dim(1)) {
    throw std::invalid_argument("compute_regions: token width does not match prototypes");
  }

  AttentionAndRegions out;
  // Similarities arrive concept-major [B,m,P]; the softmax runs over the
  // concept axis, so route it through the last dim.
  Var sim = neg_sqdist(patch_tokens, protos.q);               // [B,m,P]
  Var soft = softmax_lastdim(permute(sim, {0, 2, 1}));        // [B,P,m]
  out.pre_bias = permute(soft, {0, 2, 1});                    // [B,m,P]
  Var bias_flat = reshape(protos.bias, {protos.m, protos.h * protos.w});
  out.att = add_bcast(out.pre_bias, bias_flat);  // bias applied after the softmax
  if (!out.att->value.all_finite()) {
    throw std::runtime_error("compute_regions: non-finite attention at layer " +
                             std::to_string(protos.layer_index));
  }
  out.regions = region_argmax(out.att, &out.assignment);  // ties -> lowest concept index
  (void)B;
  return out;
}

AggregatedPrompts aggregate_prompts(const Var& regions, const Var& patch_tokens, real eps) {
  if (regions->value.ndim() != 3 || patch_tokens->value.ndim() != 3 ||
      regions->value.dim(0) != patch_tokens->value.dim(0) ||
      regions->value.dim(2) != patch_tokens->value.dim(1)) {
    throw std::invalid_argument("aggregate_prompts: expected regions [B,m,P] and tokens [B,P,d]");
  }
  AggregatedPrompts out;
  Var num = bmm(regions, patch_tokens);                  // [B,m,d]
  Var mass = reduce_sum(regions, {2}, /*keepdims=*/true);  // [B,m,1]
  const Array& mv = mass->value;
  for (int64_t i = 0; i < mv.numel(); ++i) {
    if (mv[i] <= 0.0) out.zero_mass_regions++;
  }
  Var den = add_scalar(mass, eps);
  out.prompts = bcast_last_div(num, den);
  if (!out.prompts->value.all_finite()) {
    throw std::runtime_error("aggregate_prompts: non-finite prompt vectors");
  }
  return out;
}

}  // namespace ivpt
