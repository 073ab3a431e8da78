#pragma once

#include <functional>
#include <vector>

#include "ivpt/nn.hpp"

namespace ivpt {

struct BackboneConfig {
  int64_t image_size = 64;
  int64_t patch_size = 8;
  int64_t depth = 8;
  int64_t embed_dim = 64;
  int num_heads = 4;
  // Prompts are injected at the last `num_prompted_layers` blocks. 0 gives a
  // plain ViT forward; training requires at least 1.
  int num_prompted_layers = 4;
  int64_t class_count = 4;
  // Desk-scale sizing: a 2x feed-forward keeps full training runs on one CPU
  // core inside the acceptance budget without changing any contract.
  real mlp_ratio = 2.0;

  void validate() const;
  int64_t grid() const { return image_size / patch_size; }
  int64_t num_patches() const { return grid() * grid(); }
  int64_t patch_dim() const { return 3 * patch_size * patch_size; }
  int first_prompted_layer() const { return static_cast<int>(depth) - num_prompted_layers; }
  bool operator==(const BackboneConfig&) const = default;
};

// Externally supplied prompts for one layer (classic VPT-deep style; shared
// across the batch).
struct PromptSet {
  int layer_index = 0;  // 0-based block index
  Array prompts;        // [n_l, embed_dim]
};

// Everything a forward pass exposes. Token layout at every stage:
// index 0 = class token, 1..P = patch tokens, P+1.. = prompt tokens (if any).
struct BackboneTrace {
  std::vector<Var> layer_inputs;   // tokens entering each block, post-injection
  std::vector<Var> layer_outputs;  // tokens leaving each block
  Var final_tokens;                // after the closing layer norm
  int64_t num_patches = 0;
};

class VisionTransformer {
 public:
  VisionTransformer(const BackboneConfig& cfg, Rng& rng);

  const BackboneConfig& config() const { return cfg_; }

  // Rearranges [B,3,H,W] pixels into flat per-patch vectors [B,P,patch_dim]
  // (patches row-major over the grid, channel-major within a patch).
  Array patchify(const Array& images) const;

  // Plain ViT forward (no prompts anywhere).
  BackboneTrace forward(const Array& images) const;

  // Prompted forward. The provider is called at each prompted block with the
  // block index and the tokens about to enter it (class + patch tokens only;
  // prompt tokens from the previous block are discarded first) and returns
  // the [B,n,d] prompt tokens to append after the patch tokens.
  using PromptProvider = std::function<Var(int layer, const Var& tokens)>;
  BackboneTrace forward_with_prompts(const Array& images, const PromptProvider& provider) const;

  // Prompted forward from fixed per-layer prompt tables.
  BackboneTrace forward_with_prompts(const Array& images,
                                     const std::vector<PromptSet>& prompts) const;

  void register_params(ParamRegistry& reg, const std::string& prefix, ParamGroup group) const;
  // Frozen fine-tuning keeps the class token and positional table trainable.
  void set_frozen(bool frozen) const;

  Var cls_token;  // [1,d]
  Var pos_embed;  // [1+P,d]
  LinearLayer patch_proj;
  std::vector<TransformerBlock> blocks;
  LayerNormLayer final_ln;

 private:
  BackboneConfig cfg_;
  Var embed(const Array& images) const;  // [B,1+P,d]
};

// Row-major correspondence between patch index p and grid cell (i,j) = (p/w, p%w).
Var reshape_to_grid(const Var& patch_tokens, int64_t h, int64_t w);
Var flatten_from_grid(const Var& grid_tokens);

// Token slices under the layout above.
Var token_cls(const Var& tokens);
Var token_patches(const Var& tokens, int64_t num_patches);
Var token_prompts(const Var& tokens, int64_t num_patches);

}  // namespace ivpt
