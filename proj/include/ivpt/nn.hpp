#pragma once

#include <string>
#include <vector>

#include "ivpt/ops.hpp"
#include "ivpt/rng.hpp"

namespace ivpt {

// Learning-rate group: the backbone/prototype parameters train slowly, the
// grouping/fusion/head parameters train fast.
enum class ParamGroup { kBackbone = 0, kHead = 1 };

struct NamedParam {
  std::string name;
  Var var;
  ParamGroup group;
};

// Flat, ordered view of every trainable tensor. Registration order is the
// serialization order, so modules must register deterministically.
class ParamRegistry {
 public:
  void add(std::string name, Var var, ParamGroup group);
  const std::vector<NamedParam>& items() const { return items_; }
  const NamedParam* find(const std::string& name) const;
  int64_t total_scalars() const;

 private:
  std::vector<NamedParam> items_;
};

struct LinearLayer {
  Var w;  // [in,out]
  Var b;  // [out]
  LinearLayer() = default;
  LinearLayer(int64_t in, int64_t out, Rng& rng);
  Var forward(const Var& x) const { return linear(x, w, b); }
  void register_params(ParamRegistry& reg, const std::string& prefix, ParamGroup group) const;
};

struct LayerNormLayer {
  Var gamma;
  Var beta;
  real eps = 1e-5;
  LayerNormLayer() = default;
  explicit LayerNormLayer(int64_t dim);
  Var forward(const Var& x) const { return layer_norm(x, gamma, beta, eps); }
  void register_params(ParamRegistry& reg, const std::string& prefix, ParamGroup group) const;
};

// Pre-norm transformer encoder block: x + MHSA(LN(x)), then x + MLP(LN(x)).
struct TransformerBlock {
  LayerNormLayer ln1, ln2;
  Var wqkv, bqkv, wo, bo;
  LinearLayer fc1, fc2;
  int num_heads = 1;

  TransformerBlock() = default;
  TransformerBlock(int64_t dim, int heads, real mlp_ratio, Rng& rng);
  Var forward(const Var& x) const;
  void register_params(ParamRegistry& reg, const std::string& prefix, ParamGroup group) const;
};

// Adam with decoupled per-group learning rates. The caller passes the current
// (already decayed) rates at each step; state is kept parallel to the
// registry order for checkpointing.
class AdamOptimizer {
 public:
  real beta1 = 0.9, beta2 = 0.999, eps = 1e-8;

  void init(const ParamRegistry& reg);
  void zero_grad(const ParamRegistry& reg);
  void step(const ParamRegistry& reg, real lr_backbone, real lr_head);

  int64_t step_count() const { return t_; }
  void set_step_count(int64_t t) { t_ = t; }
  struct Slot {
    Array m, v;
  };
  std::vector<Slot>& slots() { return slots_; }
  const std::vector<Slot>& slots() const { return slots_; }

 private:
  int64_t t_ = 0;
  std::vector<Slot> slots_;
};

}  // namespace ivpt
