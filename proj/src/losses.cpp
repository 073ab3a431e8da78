#include "ivpt/losses.hpp"

#include <sstream>
#include <stdexcept>

#include "ivpt/ops.hpp"
#include "json.hpp"

namespace ivpt {

void LossWeights::validate() const {
  const real all[] = {lambda_cls,    lambda_ps,     lambda_con,
                      w_orthogonality, w_equivariance, w_presence_fg,
                      w_presence_bg, w_entropy,     w_total_variation};
  for (real v : all) {
    if (!(v >= 0)) throw std::invalid_argument("LossWeights: weights must be non-negative");
  }
}

std::string LossReport::to_json_line(int64_t step, int epoch) const {
  nlohmann::json j;
  j["type"] = "loss";
  j["step"] = step;
  j["epoch"] = epoch;
  j["cls"] = cls;
  j["orthogonality"] = orthogonality;
  j["equivariance"] = equivariance;
  j["presence_fg"] = presence_fg;
  j["presence_bg"] = presence_bg;
  j["entropy"] = entropy;
  j["total_variation"] = total_variation;
  j["consistency"] = consistency;
  j["total"] = total;
  j["per_layer_ps"] = per_layer_ps;
  j["per_layer_consistency"] = per_layer_consistency;
  return j.dump();
}

ClassificationResult classification_loss(const std::vector<Var>& head_outputs,
                                         const IntArray& labels) {
  if (head_outputs.empty()) throw std::invalid_argument("classification_loss: no head outputs");
  const int64_t B = head_outputs[0]->value.dim(0);
  const int64_t C = head_outputs[0]->value.dim(1);
  for (int64_t i = 0; i < labels.numel(); ++i) {
    if (labels[i] < 0 || labels[i] >= C) {
      throw std::invalid_argument("classification_loss: label out of range");
    }
  }
  std::vector<Var> expanded;
  expanded.reserve(head_outputs.size());
  for (const Var& s : head_outputs) {
    if (s->value.dim(0) != B || s->value.dim(1) != C) {
      throw std::invalid_argument("classification_loss: inconsistent head output shapes");
    }
    expanded.push_back(reshape(s, {B, 1, C}));
  }
  ClassificationResult out;
  out.scores = concat(expanded, 1);                  // [B,n,C]
  out.avg_scores = reduce_mean(out.scores, {1});     // [B,C]
  out.loss = nll_mean(log_softmax_lastdim(out.avg_scores), labels);
  return out;
}

Var orthogonality_loss(const Var& q, real eps) {
  if (q->value.ndim() != 2) throw std::invalid_argument("orthogonality_loss: q must be 2-d");
  const int64_t m = q->value.dim(0);
  Var gram = matmul(q, permute(q, {1, 0}));                       // [m,m]
  Var norms = sqrt_(reduce_sum(square(q), {1}));                  // [m]
  Var outer = matmul(reshape(norms, {m, 1}), reshape(norms, {1, m}));
  Var cos = div(gram, clamp_min(outer, eps));
  Array eye = Array::zeros({m, m});
  for (int64_t i = 0; i < m; ++i) eye[i * m + i] = 1;
  return sub(sum_all(cos), sum_all(mul(cos, constant(eye))));
}

Var equivariance_corr_loss(const Var& att, const Var& att_t_unwarped, const Var& att_t_raw,
                           real eps) {
  const Shape& s = att->value.shape();
  if (s.size() != 3 || s != att_t_unwarped->value.shape() || s != att_t_raw->value.shape()) {
    throw std::invalid_argument("equivariance_corr_loss: inputs must share shape [B,K,P]");
  }
  Var num = reduce_sum(mul(att, att_t_unwarped), {2});            // [B,K]
  Var na = sqrt_(reduce_sum(square(att), {2}));
  Var nb = sqrt_(reduce_sum(square(att_t_raw), {2}));
  Var corr = div(num, add_scalar(mul(na, nb), eps));
  return add_scalar(neg(mean_all(corr)), 1);
}

Array radial_mask(int64_t h, int64_t w) {
  Array m = Array::zeros({h, w});
  for (int64_t i = 0; i < h; ++i) {
    const real fi = h > 1 ? real(i) / real(h - 1) - 0.5 : 0.0;
    for (int64_t j = 0; j < w; ++j) {
      const real fj = w > 1 ? real(j) / real(w - 1) - 0.5 : 0.0;
      m[i * w + j] = 2 * fi * fi + 2 * fj * fj;
    }
  }
  return m;
}

PresenceLosses presence_losses(const Var& att, real eps) {
  const Shape& s = att->value.shape();
  if (s.size() != 4 || s[1] < 2) {
    throw std::invalid_argument("presence_losses: att must be [B,m,H,W] with m >= 2");
  }
  const int64_t m = s[1], h = s[2], w = s[3];
  PresenceLosses out;

  Var fg = slice(att, 1, 0, m - 1);
  Var pooled_max = reduce_max(avg_pool3x3(fg), {0, 2, 3});  // [K], max over batch and space
  out.fg = add_scalar(neg(mean_all(clamp(pooled_max, 0.0, 1.0))), 1);

  Var bg = reshape(slice(att, 1, m - 1, 1), {s[0], h, w});
  Var masked = mul_bcast(bg, constant(radial_mask(h, w)));
  Var bmax = reduce_max(masked, {1, 2});  // [B]
  for (int64_t i = 0; i < bmax->value.numel(); ++i) {
    if (bmax->value[i] < eps) out.log_floor_hits++;
  }
  // Clamp into (0,1]: the floor guards the log, the cap keeps the term
  // non-negative when bias pushes attention above 1.
  out.bg = neg(mean_all(log_(clamp(bmax, eps, 1.0))));
  return out;
}

Var entropy_loss(const Var& att, real eps) {
  const Shape& s = att->value.shape();
  if (s.size() < 2) throw std::invalid_argument("entropy_loss: att must be at least [B,m,...]");
  Var a = clamp(att, 0.0, 1.0);
  Var term = mul(a, log_(clamp_min(a, eps)));  // 0 * log(eps) = 0: one-hot maps score exactly 0
  return scale(sum_all(term), real(-1) / real(s[0] * s[1]));
}

Var total_variation_loss(const Var& att) {
  const Shape& s = att->value.shape();
  if (s.size() != 4 || s[2] < 2 || s[3] < 2) {
    throw std::invalid_argument("total_variation_loss: att must be [B,m,H,W], grid >= 2x2");
  }
  const int64_t h = s[2], w = s[3];
  Var dh = abs_(sub(slice(att, 3, 1, w - 1), slice(att, 3, 0, w - 1)));
  Var dv = abs_(sub(slice(att, 2, 1, h - 1), slice(att, 2, 0, h - 1)));
  return scale(add(sum_all(dh), sum_all(dv)), real(1) / real(s[0] * h * w));
}

static Var mean_of(const std::vector<Var>& xs) {
  if (xs.empty()) return constant(Array::scalar(0));
  Var acc = xs[0];
  for (size_t i = 1; i < xs.size(); ++i) acc = add(acc, xs[i]);
  return scale(acc, real(1) / real(xs.size()));
}

Var total_loss(const TotalLossInputs& in, const LossWeights& w, LossReport* report) {
  w.validate();
  const size_t L = in.orthogonality.size();
  if (in.equivariance.size() != L || in.presence_fg.size() != L || in.presence_bg.size() != L ||
      in.entropy.size() != L || in.total_variation.size() != L) {
    throw std::invalid_argument("total_loss: per-layer term lists must have equal length");
  }
  if (!in.cls) throw std::invalid_argument("total_loss: missing classification term");

  std::vector<Var> ps_per_layer;
  ps_per_layer.reserve(L);
  for (size_t l = 0; l < L; ++l) {
    Var ps = scale(in.orthogonality[l], w.w_orthogonality);
    ps = add(ps, scale(in.equivariance[l], w.w_equivariance));
    ps = add(ps, scale(in.presence_fg[l], w.w_presence_fg));
    ps = add(ps, scale(in.presence_bg[l], w.w_presence_bg));
    ps = add(ps, scale(in.entropy[l], w.w_entropy));
    ps = add(ps, scale(in.total_variation[l], w.w_total_variation));
    ps_per_layer.push_back(ps);
  }
  Var ps_avg = mean_of(ps_per_layer);
  Var con_avg = mean_of(in.consistency);
  Var total = add(add(scale(in.cls, w.lambda_cls), scale(ps_avg, w.lambda_ps)),
                  scale(con_avg, w.lambda_con));

  if (report) {
    auto mean_vals = [](const std::vector<Var>& xs) {
      real acc = 0;
      for (const Var& x : xs) acc += x->scalar();
      return xs.empty() ? real(0) : acc / real(xs.size());
    };
    report->cls = in.cls->scalar();
    report->orthogonality = mean_vals(in.orthogonality);
    report->equivariance = mean_vals(in.equivariance);
    report->presence_fg = mean_vals(in.presence_fg);
    report->presence_bg = mean_vals(in.presence_bg);
    report->entropy = mean_vals(in.entropy);
    report->total_variation = mean_vals(in.total_variation);
    report->consistency = mean_vals(in.consistency);
    report->total = total->scalar();
    report->per_layer_ps.clear();
    for (const Var& p : ps_per_layer) report->per_layer_ps.push_back(p->scalar());
    report->per_layer_consistency.clear();
    for (const Var& c : in.consistency) report->per_layer_consistency.push_back(c->scalar());
  }
  return total;
}

}  // namespace ivpt
