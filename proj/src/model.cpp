#include "ivpt/model.hpp"

#include <cmath>
#include <stdexcept>

namespace ivpt {

namespace {
constexpr real kPi = 3.14159265358979323846;
}

std::array<real, 6> AffineSpec::theta_for(int64_t h, int64_t w) const {
  // Input pixel = A*(out - c) + c + t, with A = scale * rotation and the
  // translation measured as a fraction of the raster size.
  const real rad = angle_deg * kPi / 180.0;
  const real a = scale * std::cos(rad), b = -scale * std::sin(rad);
  const real c_ = scale * std::sin(rad), d = scale * std::cos(rad);
  const real cx = real(w - 1) / 2, cy = real(h - 1) / 2;
  const real tx = tx_frac * real(w), ty = ty_frac * real(h);
  return {a, b, cx + tx - a * cx - b * cy, c_, d, cy + ty - c_ * cx - d * cy};
}

AffineSpec AffineSpec::inverse() const {
  // Exact for square rasters (all rasters in this project are square): the
  // fractional translation is unit-free only when h == w.
  AffineSpec inv;
  inv.angle_deg = -angle_deg;
  inv.scale = real(1) / scale;
  const real rad = -angle_deg * kPi / 180.0;
  const real a = inv.scale * std::cos(rad), b = -inv.scale * std::sin(rad);
  const real c_ = inv.scale * std::sin(rad), d = inv.scale * std::cos(rad);
  inv.tx_frac = -(a * tx_frac + b * ty_frac);
  inv.ty_frac = -(c_ * tx_frac + d * ty_frac);
  return inv;
}

void AffineSpec::map_point(real x, real y, int64_t h, int64_t w, real* out_x,
                           real* out_y) const {
  // Where the original content at (x, y) lands in the warped raster: the
  // inverse of the sampling transform used by theta_for.
  const real rad = angle_deg * kPi / 180.0;
  const real cx = real(w - 1) / 2, cy = real(h - 1) / 2;
  const real px = x - cx - tx_frac * real(w);
  const real py = y - cy - ty_frac * real(h);
  const real inv_s = real(1) / scale;
  const real ca = std::cos(rad), sa = std::sin(rad);
  *out_x = inv_s * (ca * px + sa * py) + cx;
  *out_y = inv_s * (-sa * px + ca * py) + cy;
}

AffineSpec sample_affine(Rng& rng, real max_angle_deg, real max_translate_frac, real scale_lo,
                         real scale_hi) {
  AffineSpec s;
  s.angle_deg = rng.uniform(-max_angle_deg, max_angle_deg);
  s.scale = rng.uniform(scale_lo, scale_hi);
  s.tx_frac = rng.uniform(-max_translate_frac, max_translate_frac);
  s.ty_frac = rng.uniform(-max_translate_frac, max_translate_frac);
  return s;
}

Array warp_images(const Array& images, const AffineSpec& spec) {
  if (images.ndim() != 4) throw std::invalid_argument("warp_images: expected [B,C,H,W]");
  const int64_t b = images.dim(0), c = images.dim(1), h = images.dim(2), w = images.dim(3);
  NoGradGuard ng;
  Var x = constant(images.reshaped({b * c, h, w}));
  return grid_warp(x, spec.theta_for(h, w))->value.reshaped({b, c, h, w});
}

namespace {
VisionTransformer build_vit(const BackboneConfig& bcfg, const FusionConfig& fcfg, uint64_t seed) {
  bcfg.validate();
  fcfg.validate();
  Rng rng(derive_seed(seed, "backbone"));
  return VisionTransformer(bcfg, rng);
}
}  // namespace

IvptModel::IvptModel(const BackboneConfig& bcfg, const FusionConfig& fcfg, uint64_t seed)
    : vit(build_vit(bcfg, fcfg, seed)), bcfg_(bcfg), fcfg_(fcfg) {
  // Backbone and concept machinery draw from separate derived streams so
  // initialization is reproducible regardless of module sizes.
  Rng rng(derive_seed(seed, "modules"));
  if (static_cast<int>(fcfg_.per_layer_m.size()) != bcfg_.num_prompted_layers) {
    throw std::invalid_argument("IvptModel: per_layer_m length must equal num_prompted_layers");
  }
  const int first = bcfg_.first_prompted_layer();
  const int64_t d = bcfg_.embed_dim, g = bcfg_.grid();
  for (size_t i = 0; i < fcfg_.per_layer_m.size(); ++i) {
    const int64_t m = fcfg_.per_layer_m[i];
    if (m < 2) throw std::invalid_argument("IvptModel: each layer needs >= 2 concepts");
    prototypes.emplace_back(m, d, g, g, first + static_cast<int>(i), rng);
    groupers.emplace_back(d, fcfg_.num_groups, rng);
    fusers.emplace_back(d, rng, fcfg_.use_gelu);
  }
  for (int64_t k = 0; k < fcfg_.num_groups; ++k) heads.emplace_back(d, bcfg_.class_count, rng);
}

ForwardTrace IvptModel::forward(const Array& images, bool with_noise, uint64_t noise_seed,
                                bool with_heads) const {
  ForwardTrace tr;
  const int npl = bcfg_.num_prompted_layers;
  tr.layers.resize(static_cast<size_t>(npl));
  const int first = bcfg_.first_prompted_layer();
  const int64_t P = bcfg_.num_patches();

  if (npl == 0) {
    tr.backbone = vit.forward(images);
    return tr;
  }
  auto provider = [&](int layer, const Var& tokens) -> Var {
    const size_t i = static_cast<size_t>(layer - first);
    LayerTrace& lt = tr.layers[i];
    Var patches = token_patches(tokens, P);
    lt.att = compute_regions(patches, prototypes[i]);
    auto agg = aggregate_prompts(lt.att.regions, patches);
    lt.prompts_raw = agg.prompts;
    lt.zero_mass_regions = agg.zero_mass_regions;
    lt.groups = groupers[i].assign(prototypes[i].q, fcfg_.temperature, fcfg_.hard_assignment,
                                   with_noise, derive_seed(noise_seed, "gumbel", i));
    Var means = fuse_group_means(lt.prompts_raw, lt.groups, &lt.occupancy);
    lt.fused = fusers[i].forward(means);
    return slice(lt.fused, 1, 1, fcfg_.num_groups);  // foreground groups 1..n
  };
  tr.backbone = vit.forward_with_prompts(images, provider);

  if (with_heads) {
    const int64_t B = images.dim(0), d = bcfg_.embed_dim;
    Var fp = token_prompts(tr.backbone.final_tokens, P);  // [B,n,d] after final LN
    tr.head_scores.reserve(static_cast<size_t>(fcfg_.num_groups));
    for (int64_t k = 0; k < fcfg_.num_groups; ++k) {
      tr.head_scores.push_back(heads[static_cast<size_t>(k)].forward(
          reshape(slice(fp, 1, k, 1), {B, d})));
    }
  }
  return tr;
}

StepOutput IvptModel::compute_total_loss(const Array& images, const IntArray& labels,
                                         const LossWeights& weights, uint64_t step_seed) const {
  if (bcfg_.num_prompted_layers < 1) {
    throw std::invalid_argument("compute_total_loss: requires at least one prompted layer");
  }
  StepOutput out;
  const uint64_t noise_seed = derive_seed(step_seed, "gumbel-stream");
  out.trace = forward(images, /*with_noise=*/true, noise_seed, /*with_heads=*/true);
  auto cls = classification_loss(out.trace.head_scores, labels);

  // Transformed branch for the equivariance term: one transform per batch,
  // resampled if degenerate, same Gumbel stream so both branches share the
  // grouping noise.
  Rng trng(derive_seed(step_seed, "equiv-transform"));
  AffineSpec spec = sample_affine(trng, 15.0, 0.10, 0.9, 1.1);
  while (spec.near_degenerate()) {
    out.diagnostics.transform_resamples++;
    spec = sample_affine(trng, 15.0, 0.10, 0.9, 1.1);
  }
  ForwardTrace tr_t = forward(warp_images(images, spec), /*with_noise=*/true, noise_seed,
                              /*with_heads=*/false);

  const int npl = bcfg_.num_prompted_layers;
  const int64_t B = images.dim(0), g = bcfg_.grid();
  const auto theta_inv = spec.inverse().theta_for(g, g);

  TotalLossInputs in;
  in.cls = cls.loss;
  for (int i = 0; i < npl; ++i) {
    const LayerTrace& lt = out.trace.layers[static_cast<size_t>(i)];
    const int64_t m = fcfg_.per_layer_m[static_cast<size_t>(i)];
    Var att_grid = reshape(lt.att.att, {B, m, g, g});

    in.orthogonality.push_back(orthogonality_loss(prototypes[static_cast<size_t>(i)].q));
    auto pres = presence_losses(att_grid);
    in.presence_fg.push_back(pres.fg);
    in.presence_bg.push_back(pres.bg);
    in.entropy.push_back(entropy_loss(att_grid));
    in.total_variation.push_back(total_variation_loss(att_grid));

    Var a_fg = slice(lt.att.att, 1, 0, m - 1);  // [B,K,P]
    Var at_fg = slice(tr_t.layers[static_cast<size_t>(i)].att.att, 1, 0, m - 1);
    Var unwarped = reshape(
        grid_warp(reshape(at_fg, {B * (m - 1), g, g}), theta_inv), {B, m - 1, g * g});
    in.equivariance.push_back(equivariance_corr_loss(a_fg, unwarped, at_fg));
  }
  if (npl >= 2) {
    // Foreground groups only: the objective averages KL over the n fused
    // groups, not the background group. The maps are pooled by the canonical
    // (noiseless) group assignments rather than the step's Gumbel draw: with
    // per-step noise on both sides the group identities re-randomize every
    // step and the KL can only align an expectation over relabelings, never
    // the deterministic grouping that evaluation reads. The straight-through
    // softmax still carries gradient into the grouping layers.
    const int64_t n = fcfg_.num_groups;
    std::vector<GroupAssignment> canon;
    canon.reserve(static_cast<size_t>(npl));
    for (int l = 0; l < npl; ++l) {
      canon.push_back(groupers[static_cast<size_t>(l)].assign(
          prototypes[static_cast<size_t>(l)].q, fcfg_.temperature, fcfg_.hard_assignment,
          /*with_noise=*/false, 0));
    }
    const LayerTrace& last = out.trace.layers.back();
    Var coarse = slice(group_region_maps(last.att.regions, canon.back()), 1, 1, n);
    for (int l = 0; l + 1 < npl; ++l) {
      const LayerTrace& lt = out.trace.layers[static_cast<size_t>(l)];
      Var fine = slice(group_region_maps(lt.att.regions, canon[static_cast<size_t>(l)]), 1, 1, n);
      in.consistency.push_back(consistency_loss(fine, coarse));
    }
  }
  out.total = total_loss(in, weights, &out.report);

  for (int i = 0; i < npl; ++i) {
    const LayerTrace& lt = out.trace.layers[static_cast<size_t>(i)];
    out.diagnostics.occupancy.push_back(lt.occupancy);
    int empty = 0;
    for (size_t gi = 1; gi < lt.occupancy.size(); ++gi) {
      if (lt.occupancy[gi] == 0) empty++;
    }
    out.diagnostics.empty_groups.push_back(empty);
    out.diagnostics.zero_mass_regions +=
        lt.zero_mass_regions + tr_t.layers[static_cast<size_t>(i)].zero_mass_regions;
  }
  return out;
}

void IvptModel::register_params(ParamRegistry& reg) const {
  vit.register_params(reg, "backbone", ParamGroup::kBackbone);
  const int first = bcfg_.first_prompted_layer();
  for (size_t i = 0; i < prototypes.size(); ++i) {
    const std::string layer = "layer" + std::to_string(first + static_cast<int>(i));
    prototypes[i].register_params(reg, layer + ".concepts", ParamGroup::kBackbone);
    groupers[i].register_params(reg, layer + ".grouping", ParamGroup::kHead);
    fusers[i].register_params(reg, layer + ".fusion", ParamGroup::kHead);
  }
  for (size_t k = 0; k < heads.size(); ++k) {
    heads[k].register_params(reg, "head" + std::to_string(k), ParamGroup::kHead);
  }
}

}  // namespace ivpt
