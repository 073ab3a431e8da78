#include "ivpt/nn.hpp"

#include <cmath>
#include <stdexcept>

namespace ivpt {

void ParamRegistry::add(std::string name, Var var, ParamGroup group) {
  if (!var) throw std::invalid_argument("ParamRegistry: null var for " + name);
  for (const auto& item : items_)
    if (item.name == name) throw std::invalid_argument("ParamRegistry: duplicate name " + name);
  items_.push_back({std::move(name), std::move(var), group});
}

const NamedParam* ParamRegistry::find(const std::string& name) const {
  for (const auto& item : items_)
    if (item.name == name) return &item;
  return nullptr;
}

int64_t ParamRegistry::total_scalars() const {
  int64_t n = 0;
  for (const auto& item : items_) n += item.var->numel();
  return n;
}

LinearLayer::LinearLayer(int64_t in, int64_t out, Rng& rng)
    : w(parameter(trunc_normal({in, out}, rng, 0.02))), b(parameter(Array::zeros({out}))) {}

void LinearLayer::register_params(ParamRegistry& reg, const std::string& prefix,
                                  ParamGroup group) const {
  reg.add(prefix + ".w", w, group);
  reg.add(prefix + ".b", b, group);
}

LayerNormLayer::LayerNormLayer(int64_t dim)
    : gamma(parameter(Array::full({dim}, 1))), beta(parameter(Array::zeros({dim}))) {}

void LayerNormLayer::register_params(ParamRegistry& reg, const std::string& prefix,
                                     ParamGroup group) const {
  reg.add(prefix + ".gamma", gamma, group);
  reg.add(prefix + ".beta", beta, group);
}

TransformerBlock::TransformerBlock(int64_t dim, int heads, real mlp_ratio, Rng& rng)
    : ln1(dim),
      ln2(dim),
      wqkv(parameter(trunc_normal({dim, 3 * dim}, rng, 0.02))),
      bqkv(parameter(Array::zeros({3 * dim}))),
      wo(parameter(trunc_normal({dim, dim}, rng, 0.02))),
      bo(parameter(Array::zeros({dim}))),
      fc1(dim, static_cast<int64_t>(std::lround(mlp_ratio * real(dim))), rng),
      fc2(static_cast<int64_t>(std::lround(mlp_ratio * real(dim))), dim, rng),
      num_heads(heads) {}

Var TransformerBlock::forward(const Var& x) const {
  Var h = add(x, multi_head_attention(ln1.forward(x), wqkv, bqkv, wo, bo, num_heads));
  return add(h, fc2.forward(gelu(fc1.forward(ln2.forward(h)))));
}

void TransformerBlock::register_params(ParamRegistry& reg, const std::string& prefix,
                                       ParamGroup group) const {
  ln1.register_params(reg, prefix + ".ln1", group);
  reg.add(prefix + ".attn.wqkv", wqkv, group);
  reg.add(prefix + ".attn.bqkv", bqkv, group);
  reg.add(prefix + ".attn.wo", wo, group);
  reg.add(prefix + ".attn.bo", bo, group);
  ln2.register_params(reg, prefix + ".ln2", group);
  fc1.register_params(reg, prefix + ".mlp.fc1", group);
  fc2.register_params(reg, prefix + ".mlp.fc2", group);
}

void AdamOptimizer::init(const ParamRegistry& reg) {
  t_ = 0;
  slots_.clear();
  slots_.reserve(reg.items().size());
  for (const auto& item : reg.items())
    slots_.push_back({Array::zeros(item.var->shape()), Array::zeros(item.var->shape())});
}

void AdamOptimizer::zero_grad(const ParamRegistry& reg) {
  for (const auto& item : reg.items())
    if (item.var->has_grad()) item.var->grad.fill(0);
}

void AdamOptimizer::step(const ParamRegistry& reg, real lr_backbone, real lr_head) {
  if (slots_.size() != reg.items().size())
    throw std::logic_error("AdamOptimizer::step before init or registry changed");
  ++t_;
  const real bc1 = real(1) - std::pow(beta1, real(t_));
  const real bc2 = real(1) - std::pow(beta2, real(t_));
  for (size_t i = 0; i < reg.items().size(); ++i) {
    const auto& item = reg.items()[i];
    if (!item.var->requires_grad) continue;  // frozen: state and value untouched
    Slot& s = slots_[i];
    const Array& g = item.var->grad_ref();
    Array& p = item.var->value;
    const real lr = item.group == ParamGroup::kBackbone ? lr_backbone : lr_head;
    for (int64_t k = 0; k < p.numel(); ++k) {
      s.m[k] = beta1 * s.m[k] + (real(1) - beta1) * g[k];
      s.v[k] = beta2 * s.v[k] + (real(1) - beta2) * g[k] * g[k];
      const real mhat = s.m[k] / bc1;
      const real vhat = s.v[k] / bc2;
      p[k] -= lr * mhat / (std::sqrt(vhat) + eps);
    }
  }
}

}  // namespace ivpt
