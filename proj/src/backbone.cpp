#include "ivpt/backbone.hpp"

#include <stdexcept>
#include <string>

namespace ivpt {

void BackboneConfig::validate() const {
  if (image_size <= 0 || patch_size <= 0 || image_size % patch_size != 0)
    throw std::invalid_argument("backbone: patch_size must divide image_size (got " +
                                std::to_string(image_size) + "/" + std::to_string(patch_size) +
                                ")");
  if (depth < 1) throw std::invalid_argument("backbone: depth must be >= 1");
  if (embed_dim < 1 || num_heads < 1 || embed_dim % num_heads != 0)
    throw std::invalid_argument("backbone: num_heads must divide embed_dim");
  if (num_prompted_layers < 0 || num_prompted_layers > depth)
    throw std::invalid_argument("backbone: num_prompted_layers must lie in [0, depth]");
  if (class_count < 2) throw std::invalid_argument("backbone: class_count must be >= 2");
  if (mlp_ratio <= 0) throw std::invalid_argument("backbone: mlp_ratio must be positive");
}

VisionTransformer::VisionTransformer(const BackboneConfig& cfg, Rng& rng)
    : cls_token(parameter(trunc_normal({1, cfg.embed_dim}, rng, 0.02))),
      pos_embed(parameter(trunc_normal({1 + cfg.num_patches(), cfg.embed_dim}, rng, 0.02))),
      patch_proj(cfg.patch_dim(), cfg.embed_dim, rng),
      final_ln(cfg.embed_dim),
      cfg_(cfg) {
  cfg_.validate();
  blocks.reserve(cfg.depth);
  for (int64_t i = 0; i < cfg.depth; ++i)
    blocks.emplace_back(cfg.embed_dim, cfg.num_heads, cfg.mlp_ratio, rng);
}

Array VisionTransformer::patchify(const Array& images) const {
  if (images.ndim() != 4 || images.dim(1) != 3 || images.dim(2) != cfg_.image_size ||
      images.dim(3) != cfg_.image_size)
    throw std::invalid_argument("patchify: images must be [B,3," +
                                std::to_string(cfg_.image_size) + "," +
                                std::to_string(cfg_.image_size) + "], got " +
                                shape_str(images.shape()));
  const int64_t bsz = images.dim(0), ps = cfg_.patch_size, g = cfg_.grid();
  const int64_t hw = cfg_.image_size;
  Array out({bsz, cfg_.num_patches(), cfg_.patch_dim()});
  for (int64_t b = 0; b < bsz; ++b)
    for (int64_t gy = 0; gy < g; ++gy)
      for (int64_t gx = 0; gx < g; ++gx) {
        real* dst = out.data() + (b * g * g + gy * g + gx) * cfg_.patch_dim();
        for (int64_t c = 0; c < 3; ++c)
          for (int64_t py = 0; py < ps; ++py)
            for (int64_t px = 0; px < ps; ++px)
              dst[(c * ps + py) * ps + px] =
                  images[((b * 3 + c) * hw + gy * ps + py) * hw + gx * ps + px];
      }
  return out;
}

Var VisionTransformer::embed(const Array& images) const {
  const int64_t bsz = images.dim(0);
  Var patches = patch_proj.forward(constant(patchify(images)));  // [B,P,d]
  Var cls = add_bcast(constant(Array::zeros({bsz, 1, cfg_.embed_dim})), cls_token);
  Var tokens = concat({cls, patches}, 1);  // [B,1+P,d]
  return add_bcast(tokens, pos_embed);
}

BackboneTrace VisionTransformer::forward(const Array& images) const {
  return forward_with_prompts(images, PromptProvider{});
}

BackboneTrace VisionTransformer::forward_with_prompts(const Array& images,
                                                      const PromptProvider& provider) const {
  if (cfg_.num_prompted_layers > 0 && !provider)
    throw std::invalid_argument("forward_with_prompts: provider required when layers are prompted");
  BackboneTrace trace;
  trace.num_patches = cfg_.num_patches();
  Var tokens = embed(images);
  const int first = cfg_.first_prompted_layer();
  for (int l = 0; l < cfg_.depth; ++l) {
    if (provider && l >= first) {
      // prompts from the previous block are discarded, fresh ones appended
      Var base = l == first ? tokens : slice(tokens, 1, 0, 1 + cfg_.num_patches());
      Var prompts = provider(l, base);
      if (prompts->value.ndim() != 3 || prompts->value.dim(0) != base->value.dim(0) ||
          prompts->value.dim(2) != cfg_.embed_dim)
        throw std::invalid_argument("forward_with_prompts: provider returned " +
                                    shape_str(prompts->shape()) + " at layer " +
                                    std::to_string(l));
      tokens = concat({base, prompts}, 1);
    }
    trace.layer_inputs.push_back(tokens);
    tokens = blocks[l].forward(tokens);
    trace.layer_outputs.push_back(tokens);
  }
  trace.final_tokens = final_ln.forward(tokens);
  return trace;
}

BackboneTrace VisionTransformer::forward_with_prompts(const Array& images,
                                                      const std::vector<PromptSet>& prompts) const {
  if (static_cast<int>(prompts.size()) != cfg_.num_prompted_layers)
    throw std::invalid_argument("forward_with_prompts: need one PromptSet per prompted layer");
  const int first = cfg_.first_prompted_layer();
  for (size_t i = 0; i < prompts.size(); ++i) {
    if (prompts[i].layer_index != first + static_cast<int>(i))
      throw std::invalid_argument("forward_with_prompts: PromptSet layer tags must cover the last " +
                                  std::to_string(cfg_.num_prompted_layers) + " blocks in order");
    if (prompts[i].prompts.ndim() != 2 || prompts[i].prompts.dim(1) != cfg_.embed_dim)
      throw std::invalid_argument("forward_with_prompts: prompts must be [n,embed_dim]");
  }
  auto provider = [&](int layer, const Var& tokens) {
    const Array& table = prompts[layer - first].prompts;
    const int64_t bsz = tokens->value.dim(0);
    return add_bcast(constant(Array::zeros({bsz, table.dim(0), table.dim(1)})),
                     constant(table));
  };
  return forward_with_prompts(images, provider);
}

void VisionTransformer::register_params(ParamRegistry& reg, const std::string& prefix,
                                        ParamGroup group) const {
  reg.add(prefix + ".cls_token", cls_token, group);
  reg.add(prefix + ".pos_embed", pos_embed, group);
  patch_proj.register_params(reg, prefix + ".patch_proj", group);
  for (size_t i = 0; i < blocks.size(); ++i)
    blocks[i].register_params(reg, prefix + ".blocks." + std::to_string(i), group);
  final_ln.register_params(reg, prefix + ".final_ln", group);
}

void VisionTransformer::set_frozen(bool frozen) const {
  ParamRegistry reg;
  register_params(reg, "vit", ParamGroup::kBackbone);
  for (const auto& item : reg.items()) item.var->requires_grad = !frozen;
  cls_token->requires_grad = true;
  pos_embed->requires_grad = true;
}

Var reshape_to_grid(const Var& patch_tokens, int64_t h, int64_t w) {
  if (patch_tokens->value.ndim() != 3 || patch_tokens->value.dim(1) != h * w)
    throw std::invalid_argument("reshape_to_grid: expected [B," + std::to_string(h * w) +
                                ",d], got " + shape_str(patch_tokens->shape()));
  return reshape(patch_tokens,
                 {patch_tokens->value.dim(0), h, w, patch_tokens->value.dim(2)});
}

Var flatten_from_grid(const Var& grid_tokens) {
  if (grid_tokens->value.ndim() != 4)
    throw std::invalid_argument("flatten_from_grid: expected [B,h,w,d]");
  return reshape(grid_tokens, {grid_tokens->value.dim(0),
                               grid_tokens->value.dim(1) * grid_tokens->value.dim(2),
                               grid_tokens->value.dim(3)});
}

Var token_cls(const Var& tokens) { return slice(tokens, 1, 0, 1); }

Var token_patches(const Var& tokens, int64_t num_patches) {
  return slice(tokens, 1, 1, num_patches);
}

Var token_prompts(const Var& tokens, int64_t num_patches) {
  const int64_t extra = tokens->value.dim(1) - 1 - num_patches;
  if (extra < 0) throw std::invalid_argument("token_prompts: no prompt tokens present");
  return slice(tokens, 1, 1 + num_patches, extra);
}

}  // namespace ivpt
