#include "ivpt/fusion.hpp"

#include <cmath>
#include <stdexcept>

namespace ivpt {

void FusionConfig::validate() const {
  if (per_layer_m.empty()) {
    throw std::invalid_argument("FusionConfig: per_layer_m must not be empty");
  }
  for (size_t i = 0; i < per_layer_m.size(); ++i) {
    if (per_layer_m[i] < 1) {
      throw std::invalid_argument("FusionConfig: concept counts must be positive");
    }
    if (i > 0 && per_layer_m[i] >= per_layer_m[i - 1]) {
      throw std::invalid_argument(
          "FusionConfig: per_layer_m must be strictly decreasing (fine to coarse)");
    }
  }
  if (num_groups < 1) throw std::invalid_argument("FusionConfig: num_groups must be >= 1");
  if (!(temperature > 0)) throw std::invalid_argument("FusionConfig: temperature must be > 0");
}

GroupingLayer::GroupingLayer(int64_t d, int64_t num_groups_, Rng& rng)
    : proj(d, num_groups_ + 1, rng), num_groups(num_groups_) {}

void GroupingLayer::register_params(ParamRegistry& reg, const std::string& prefix,
                                    ParamGroup group) const {
  proj.register_params(reg, prefix + ".proj", group);
}

GroupAssignment GroupingLayer::assign(const Var& prototypes, real temperature, bool hard,
                                      bool with_noise, uint64_t noise_seed) const {
  if (!(temperature > 0)) throw std::invalid_argument("assign: temperature must be > 0");
  const int64_t m = prototypes->value.dim(0);
  GroupAssignment out;
  out.logits = proj.forward(prototypes);  // [m,n+1]
  Var logits = out.logits;
  if (with_noise) {
    Rng rng(noise_seed);
    Array u = rand_uniform(logits->value.shape(), rng);
    Array g = Array::zeros(u.shape());
    for (int64_t i = 0; i < u.numel(); ++i) {
      g[i] = -std::log(-std::log(std::max(u[i], real(1e-12))));
    }
    logits = add(logits, constant(g));
  }
  Var soft = softmax_lastdim(scale(logits, real(1) / temperature));
  out.onehot = hard ? st_onehot(soft) : soft;
  out.group_of.resize(static_cast<size_t>(m));
  const int64_t cols = soft->value.dim(1);
  for (int64_t k = 0; k < m; ++k) {
    const real* row = soft->value.data() + k * cols;
    int best = 0;
    for (int64_t g = 1; g < cols; ++g) {
      if (row[g] > row[best]) best = static_cast<int>(g);
    }
    out.group_of[static_cast<size_t>(k)] = best;
  }
  return out;
}

// einsum('kg,bkd->bgd') via one GEMM: move the concept axis first, collapse
// the rest, multiply by onehot^T, and restore the batch-major layout.
static Var contract_concepts(const Var& onehot, const Var& x) {
  const int64_t B = x->value.dim(0), m = x->value.dim(1), d = x->value.dim(2);
  const int64_t g = onehot->value.dim(1);
  Var xt = reshape(permute(x, {1, 0, 2}), {m, B * d});
  Var s = matmul(permute(onehot, {1, 0}), xt);  // [g, B*d]
  return permute(reshape(s, {g, B, d}), {1, 0, 2});
}

Var fuse_group_means(const Var& prompts, const GroupAssignment& a,
                     std::vector<int64_t>* occupancy) {
  if (prompts->value.ndim() != 3 || a.onehot->value.ndim() != 2 ||
      prompts->value.dim(1) != a.onehot->value.dim(0)) {
    throw std::invalid_argument("fuse_group_means: expected prompts [B,m,d], onehot [m,n+1]");
  }
  Var counts = reduce_sum(a.onehot, {0});  // [n+1]
  if (occupancy) {
    occupancy->assign(static_cast<size_t>(counts->value.numel()), 0);
    for (int g : a.group_of) (*occupancy)[static_cast<size_t>(g)]++;
  }
  // Normalize the assignment columns so the contraction yields means directly;
  // an empty group divides by the clamp floor and stays exactly zero.
  Var inv = div(constant(Array::full(counts->value.shape(), 1.0)), clamp_min(counts, 1e-12));
  Var onehot_norm = mul_bcast(a.onehot, inv);
  return contract_concepts(onehot_norm, prompts);
}

FusionBlock::FusionBlock(int64_t d, Rng& rng, bool use_gelu_)
    : ln(d), fc1(d, d, rng), fc2(d, d, rng), use_gelu(use_gelu_) {}

Var FusionBlock::forward(const Var& group_means) const {
  Var h = fc1.forward(ln.forward(group_means));
  if (use_gelu) h = gelu(h);
  return fc2.forward(h);
}

void FusionBlock::register_params(ParamRegistry& reg, const std::string& prefix,
                                  ParamGroup group) const {
  ln.register_params(reg, prefix + ".ln", group);
  fc1.register_params(reg, prefix + ".fc1", group);
  fc2.register_params(reg, prefix + ".fc2", group);
}

Var group_region_maps(const Var& regions, const GroupAssignment& a) {
  if (regions->value.ndim() != 3 || regions->value.dim(1) != a.onehot->value.dim(0)) {
    throw std::invalid_argument("group_region_maps: expected regions [B,m,P], onehot [m,n+1]");
  }
  return contract_concepts(a.onehot, regions);
}

Var consistency_loss(const Var& fine_grouped, const Var& coarse_grouped, real eps) {
  const Shape& fs = fine_grouped->value.shape();
  if (fs.size() != 3 || fs != coarse_grouped->value.shape()) {
    throw std::invalid_argument("consistency_loss: grouped maps must share shape [B,G,P]");
  }
  auto normalize = [eps](const Var& x) {
    Var f = clamp_min(x, eps);
    return bcast_last_div(f, reduce_sum(f, {2}, /*keepdims=*/true));
  };
  Var qf = normalize(fine_grouped);
  Var qc = normalize(coarse_grouped);
  Var kl = sum_all(mul(qc, sub(log_(qc), log_(qf))));
  return scale(kl, real(1) / real(fs[0] * fs[1]));
}

}  // namespace ivpt
