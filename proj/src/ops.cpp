#include "ivpt/ops.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <stdexcept>
#include <string>

namespace ivpt {

namespace {

using MatX = Eigen::Matrix<real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapM = Eigen::Map<MatX>;
using CMapM = Eigen::Map<const MatX>;
using StrideD = Eigen::OuterStride<Eigen::Dynamic>;
using StridedMap = Eigen::Map<MatX, 0, StrideD>;
using CStridedMap = Eigen::Map<const MatX, 0, StrideD>;

void check(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

void check_same_shape(const Var& a, const Var& b, const char* op) {
  check(a->value.same_shape(b->value), std::string(op) + ": shape mismatch " +
                                           shape_str(a->shape()) + " vs " + shape_str(b->shape()));
}

bool is_suffix(const Shape& small, const Shape& big) {
  if (small.size() > big.size()) return false;
  for (size_t i = 0; i < small.size(); ++i)
    if (small[small.size() - 1 - i] != big[big.size() - 1 - i]) return false;
  return true;
}

std::vector<int64_t> row_major_strides(const Shape& s) {
  std::vector<int64_t> st(s.size(), 1);
  for (int i = static_cast<int>(s.size()) - 2; i >= 0; --i) st[i] = st[i + 1] * s[i + 1];
  return st;
}

// Visits every element of `shape`, calling fn(in_linear_index, out_linear_index)
// where the out index ignores the axes flagged in `reduced`.
template <typename Fn>
void for_each_reduced(const Shape& shape, const std::vector<char>& reduced, Fn&& fn) {
  const int nd = static_cast<int>(shape.size());
  std::vector<int64_t> idx(nd, 0);
  std::vector<int64_t> out_stride(nd, 0);
  int64_t st = 1;
  for (int i = nd - 1; i >= 0; --i) {
    if (!reduced[i]) {
      out_stride[i] = st;
      st *= shape[i];
    }
  }
  const int64_t total = shape_numel(shape);
  int64_t out = 0;
  for (int64_t lin = 0; lin < total; ++lin) {
    fn(lin, out);
    for (int i = nd - 1; i >= 0; --i) {
      ++idx[i];
      out += out_stride[i];
      if (idx[i] < shape[i]) break;
      out -= out_stride[i] * shape[i];
      idx[i] = 0;
    }
  }
}

std::vector<char> normalize_axes(const Var& a, std::vector<int> axes, const char* op) {
  const int nd = a->value.ndim();
  std::vector<char> reduced(nd, 0);
  check(!axes.empty(), std::string(op) + ": no axes given");
  for (int ax : axes) {
    if (ax < 0) ax += nd;
    check(ax >= 0 && ax < nd, std::string(op) + ": axis out of range for " + shape_str(a->shape()));
    reduced[ax] = 1;
  }
  return reduced;
}

Shape reduced_shape(const Shape& in, const std::vector<char>& reduced, bool keepdims) {
  Shape out;
  for (size_t i = 0; i < in.size(); ++i) {
    if (!reduced[i])
      out.push_back(in[i]);
    else if (keepdims)
      out.push_back(1);
  }
  if (out.empty()) out.push_back(1);
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

Var add(const Var& a, const Var& b) {
  check_same_shape(a, b, "add");
  Array v = a->value;
  for (int64_t i = 0; i < v.numel(); ++i) v[i] += b->value[i];
  return make_op(
      std::move(v), {a, b},
      [a, b](Node& n) {
        if (a->requires_grad) {
          Array& ga = a->grad_ref();
          for (int64_t i = 0; i < n.grad.numel(); ++i) ga[i] += n.grad[i];
        }
        if (b->requires_grad) {
          Array& gb = b->grad_ref();
          for (int64_t i = 0; i < n.grad.numel(); ++i) gb[i] += n.grad[i];
        }
      },
      "add");
}

Var sub(const Var& a, const Var& b) {
  check_same_shape(a, b, "sub");
  Array v = a->value;
  for (int64_t i = 0; i < v.numel(); ++i) v[i] -= b->value[i];
  return make_op(
      std::move(v), {a, b},
      [a, b](Node& n) {
        if (a->requires_grad) {
          Array& ga = a->grad_ref();
          for (int64_t i = 0; i < n.grad.numel(); ++i) ga[i] += n.grad[i];
        }
        if (b->requires_grad) {
          Array& gb = b->grad_ref();
          for (int64_t i = 0; i < n.grad.numel(); ++i) gb[i] -= n.grad[i];
        }
      },
      "sub");
}

Var mul(const Var& a, const Var& b) {
  check_same_shape(a, b, "mul");
  Array v = a->value;
  for (int64_t i = 0; i < v.numel(); ++i) v[i] *= b->value[i];
  return make_op(
      std::move(v), {a, b},
      [a, b](Node& n) {
        if (a->requires_grad) {
          Array& ga = a->grad_ref();
          for (int64_t i = 0; i < n.grad.numel(); ++i) ga[i] += n.grad[i] * b->value[i];
        }
        if (b->requires_grad) {
          Array& gb = b->grad_ref();
          for (int64_t i = 0; i < n.grad.numel(); ++i) gb[i] += n.grad[i] * a->value[i];
        }
      },
      "mul");
}

Var div(const Var& a, const Var& b) {
  check_same_shape(a, b, "div");
  Array v = a->value;
  for (int64_t i = 0; i < v.numel(); ++i) v[i] /= b->value[i];
  return make_op(
      std::move(v), {a, b},
      [a, b](Node& n) {
        if (a->requires_grad) {
          Array& ga = a->grad_ref();
          for (int64_t i = 0; i < n.grad.numel(); ++i) ga[i] += n.grad[i] / b->value[i];
        }
        if (b->requires_grad) {
          Array& gb = b->grad_ref();
          for (int64_t i = 0; i < n.grad.numel(); ++i) {
            const real bb = b->value[i];
            gb[i] -= n.grad[i] * a->value[i] / (bb * bb);
          }
        }
      },
      "div");
}

Var add_bcast(const Var& a, const Var& b) {
  check(is_suffix(b->shape(), a->shape()), "add_bcast: " + shape_str(b->shape()) +
                                               " is not a suffix of " + shape_str(a->shape()));
  const int64_t bn = b->numel();
  Array v = a->value;
  for (int64_t i = 0; i < v.numel(); ++i) v[i] += b->value[i % bn];
  return make_op(
      std::move(v), {a, b},
      [a, b, bn](Node& n) {
        if (a->requires_grad) {
          Array& ga = a->grad_ref();
          for (int64_t i = 0; i < n.grad.numel(); ++i) ga[i] += n.grad[i];
        }
        if (b->requires_grad) {
          Array& gb = b->grad_ref();
          for (int64_t i = 0; i < n.grad.numel(); ++i) gb[i % bn] += n.grad[i];
        }
      },
      "add_bcast");
}

Var mul_bcast(const Var& a, const Var& b) {
  check(is_suffix(b->shape(), a->shape()), "mul_bcast: " + shape_str(b->shape()) +
                                               " is not a suffix of " + shape_str(a->shape()));
  const int64_t bn = b->numel();
  Array v = a->value;
  for (int64_t i = 0; i < v.numel(); ++i) v[i] *= b->value[i % bn];
  return make_op(
      std::move(v), {a, b},
      [a, b, bn](Node& n) {
        if (a->requires_grad) {
          Array& ga = a->grad_ref();
          for (int64_t i = 0; i < n.grad.numel(); ++i) ga[i] += n.grad[i] * b->value[i % bn];
        }
        if (b->requires_grad) {
          Array& gb = b->grad_ref();
          for (int64_t i = 0; i < n.grad.numel(); ++i) gb[i % bn] += n.grad[i] * a->value[i];
        }
      },
      "mul_bcast");
}

Var bcast_last_div(const Var& a, const Var& b) {
  const Shape& as = a->shape();
  const Shape& bs = b->shape();
  bool ok = as.size() == bs.size() && !as.empty() && bs.back() == 1;
  if (ok)
    for (size_t i = 0; i + 1 < as.size(); ++i) ok = ok && as[i] == bs[i];
  check(ok, "bcast_last_div: " + shape_str(bs) + " must be " + shape_str(as) +
                " with last dim 1");
  const int64_t d = as.back();
  Array v = a->value;
  for (int64_t g = 0; g < b->numel(); ++g)
    for (int64_t k = 0; k < d; ++k) v[g * d + k] /= b->value[g];
  return make_op(
      std::move(v), {a, b},
      [a, b, d](Node& n) {
        if (a->requires_grad) {
          Array& ga = a->grad_ref();
          for (int64_t g = 0; g < b->numel(); ++g)
            for (int64_t k = 0; k < d; ++k) ga[g * d + k] += n.grad[g * d + k] / b->value[g];
        }
        if (b->requires_grad) {
          Array& gb = b->grad_ref();
          for (int64_t g = 0; g < b->numel(); ++g) {
            real acc = 0;
            for (int64_t k = 0; k < d; ++k) acc += n.grad[g * d + k] * n.value[g * d + k];
            gb[g] -= acc / b->value[g];
          }
        }
      },
      "bcast_last_div");
}

Var scale(const Var& a, real s) {
  Array v = a->value;
  for (int64_t i = 0; i < v.numel(); ++i) v[i] *= s;
  return make_op(
      std::move(v), {a},
      [a, s](Node& n) {
        if (!a->requires_grad) return;
        Array& ga = a->grad_ref();
        for (int64_t i = 0; i < n.grad.numel(); ++i) ga[i] += n.grad[i] * s;
      },
      "scale");
}

Var add_scalar(const Var& a, real s) {
  Array v = a->value;
  for (int64_t i = 0; i < v.numel(); ++i) v[i] += s;
  return make_op(
      std::move(v), {a},
      [a](Node& n) {
        if (!a->requires_grad) return;
        Array& ga = a->grad_ref();
        for (int64_t i = 0; i < n.grad.numel(); ++i) ga[i] += n.grad[i];
      },
      "add_scalar");
}

Var neg(const Var& a) { return scale(a, real(-1)); }

Var exp_(const Var& a) {
  Array v = a->value;
  for (int64_t i = 0; i < v.numel(); ++i) v[i] = std::exp(v[i]);
  return make_op(
      std::move(v), {a},
      [a](Node& n) {
        if (!a->requires_grad) return;
        Array& ga = a->grad_ref();
        for (int64_t i = 0; i < n.grad.numel(); ++i) ga[i] += n.grad[i] * n.value[i];
      },
      "exp");
}

Var log_(const Var& a) {
  Array v = a->value;
  for (int64_t i = 0; i < v.numel(); ++i) v[i] = std::log(v[i]);
  return make_op(
      std::move(v), {a},
      [a](Node& n) {
        if (!a->requires_grad) return;
        Array& ga = a->grad_ref();
        for (int64_t i = 0; i < n.grad.numel(); ++i) ga[i] += n.grad[i] / a->value[i];
      },
      "log");
}

Var sqrt_(const Var& a) {
  Array v = a->value;
  for (int64_t i = 0; i < v.numel(); ++i) v[i] = std::sqrt(v[i]);
  return make_op(
      std::move(v), {a},
      [a](Node& n) {
        if (!a->requires_grad) return;
        Array& ga = a->grad_ref();
        // subgradient 0 at 0 keeps clamped-off denominators from minting NaNs
        for (int64_t i = 0; i < n.grad.numel(); ++i)
          if (n.value[i] > real(0)) ga[i] += n.grad[i] * real(0.5) / n.value[i];
      },
      "sqrt");
}

Var abs_(const Var& a) {
  Array v = a->value;
  for (int64_t i = 0; i < v.numel(); ++i) v[i] = std::abs(v[i]);
  return make_op(
      std::move(v), {a},
      [a](Node& n) {
        if (!a->requires_grad) return;
        Array& ga = a->grad_ref();
        for (int64_t i = 0; i < n.grad.numel(); ++i) {
          const real x = a->value[i];
          if (x > 0)
            ga[i] += n.grad[i];
          else if (x < 0)
            ga[i] -= n.grad[i];
        }
      },
      "abs");
}

Var square(const Var& a) {
  Array v = a->value;
  for (int64_t i = 0; i < v.numel(); ++i) v[i] *= v[i];
  return make_op(
      std::move(v), {a},
      [a](Node& n) {
        if (!a->requires_grad) return;
        Array& ga = a->grad_ref();
        for (int64_t i = 0; i < n.grad.numel(); ++i) ga[i] += n.grad[i] * 2 * a->value[i];
      },
      "square");
}

Var clamp_min(const Var& a, real lo) { return clamp(a, lo, std::numeric_limits<real>::infinity()); }

Var clamp(const Var& a, real lo, real hi) {
  check(lo <= hi, "clamp: lo > hi");
  Array v = a->value;
  for (int64_t i = 0; i < v.numel(); ++i) v[i] = std::min(std::max(v[i], lo), hi);
  return make_op(
      std::move(v), {a},
      [a, lo, hi](Node& n) {
        if (!a->requires_grad) return;
        Array& ga = a->grad_ref();
        for (int64_t i = 0; i < n.grad.numel(); ++i) {
          const real x = a->value[i];
          if (x >= lo && x <= hi) ga[i] += n.grad[i];
        }
      },
      "clamp");
}

Var gelu(const Var& a) {
  static const real inv_sqrt2 = real(1) / std::sqrt(real(2));
  static const real inv_sqrt2pi = real(1) / std::sqrt(real(2) * real(M_PI));
  Array v = a->value;
  for (int64_t i = 0; i < v.numel(); ++i) {
    const real x = v[i];
    v[i] = real(0.5) * x * (real(1) + std::erf(x * inv_sqrt2));
  }
  return make_op(
      std::move(v), {a},
      [a](Node& n) {
        if (!a->requires_grad) return;
        Array& ga = a->grad_ref();
        for (int64_t i = 0; i < n.grad.numel(); ++i) {
          const real x = a->value[i];
          const real cdf = real(0.5) * (real(1) + std::erf(x * inv_sqrt2));
          const real pdf = std::exp(real(-0.5) * x * x) * inv_sqrt2pi;
          ga[i] += n.grad[i] * (cdf + x * pdf);
        }
      },
      "gelu");
}

// ---------------------------------------------------------------------------
// shape
// ---------------------------------------------------------------------------

Var reshape(const Var& a, Shape s) {
  Array v = a->value.reshaped(std::move(s));
  return make_op(
      std::move(v), {a},
      [a](Node& n) {
        if (!a->requires_grad) return;
        Array& ga = a->grad_ref();
        for (int64_t i = 0; i < n.grad.numel(); ++i) ga[i] += n.grad[i];
      },
      "reshape");
}

namespace {
Array permute_array(const Array& in, const std::vector<int>& perm) {
  const int nd = in.ndim();
  Shape out_shape(nd);
  for (int i = 0; i < nd; ++i) out_shape[i] = in.dim(perm[i]);
  Array out(out_shape);
  const auto in_strides = row_major_strides(in.shape());
  std::vector<int64_t> out_stride_for_in_axis(nd, 0);
  {
    const auto out_strides = row_major_strides(out_shape);
    for (int i = 0; i < nd; ++i) out_stride_for_in_axis[perm[i]] = out_strides[i];
  }
  std::vector<int64_t> idx(nd, 0);
  int64_t out_idx = 0;
  for (int64_t lin = 0; lin < in.numel(); ++lin) {
    out[out_idx] = in[lin];
    for (int i = nd - 1; i >= 0; --i) {
      ++idx[i];
      out_idx += out_stride_for_in_axis[i];
      if (idx[i] < in.dim(i)) break;
      out_idx -= out_stride_for_in_axis[i] * in.dim(i);
      idx[i] = 0;
    }
  }
  return out;
}
}  // namespace

Var permute(const Var& a, const std::vector<int>& perm) {
  const int nd = a->value.ndim();
  check(static_cast<int>(perm.size()) == nd, "permute: perm size != ndim");
  std::vector<char> seen(nd, 0);
  for (int p : perm) {
    check(p >= 0 && p < nd && !seen[p], "permute: invalid permutation");
    seen[p] = 1;
  }
  std::vector<int> inv(nd);
  for (int i = 0; i < nd; ++i) inv[perm[i]] = i;
  Array v = permute_array(a->value, perm);
  return make_op(
      std::move(v), {a},
      [a, inv](Node& n) {
        if (!a->requires_grad) return;
        Array back = permute_array(n.grad, inv);
        Array& ga = a->grad_ref();
        for (int64_t i = 0; i < back.numel(); ++i) ga[i] += back[i];
      },
      "permute");
}

Var concat(const std::vector<Var>& xs, int axis) {
  check(!xs.empty(), "concat: empty input list");
  const int nd = xs[0]->value.ndim();
  if (axis < 0) axis += nd;
  check(axis >= 0 && axis < nd, "concat: axis out of range");
  Shape out_shape = xs[0]->shape();
  int64_t axis_total = 0;
  for (const auto& x : xs) {
    check(x->value.ndim() == nd, "concat: rank mismatch");
    for (int i = 0; i < nd; ++i)
      check(i == axis || x->value.dim(i) == out_shape[i],
            "concat: shape mismatch at " + shape_str(x->shape()));
    axis_total += x->value.dim(axis);
  }
  out_shape[axis] = axis_total;

  int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= out_shape[i];
  for (int i = axis + 1; i < nd; ++i) inner *= out_shape[i];

  Array v(out_shape);
  std::vector<int64_t> offsets;  // start of each input along the axis
  {
    int64_t off = 0;
    for (const auto& x : xs) {
      offsets.push_back(off);
      const int64_t len = x->value.dim(axis);
      for (int64_t o = 0; o < outer; ++o)
        std::memcpy(v.data() + (o * axis_total + off) * inner, x->value.data() + o * len * inner,
                    sizeof(real) * len * inner);
      off += len;
    }
  }
  std::vector<Var> parents = xs;
  return make_op(
      std::move(v), parents,
      [parents, offsets, outer, inner, axis_total, axis](Node& n) {
        for (size_t k = 0; k < parents.size(); ++k) {
          const auto& x = parents[k];
          if (!x->requires_grad) continue;
          const int64_t len = x->value.dim(axis);
          Array& gx = x->grad_ref();
          for (int64_t o = 0; o < outer; ++o) {
            const real* src = n.grad.data() + (o * axis_total + offsets[k]) * inner;
            real* dst = gx.data() + o * len * inner;
            for (int64_t i = 0; i < len * inner; ++i) dst[i] += src[i];
          }
        }
      },
      "concat");
}

Var slice(const Var& a, int axis, int64_t start, int64_t len) {
  const int nd = a->value.ndim();
  if (axis < 0) axis += nd;
  check(axis >= 0 && axis < nd, "slice: axis out of range");
  const int64_t extent = a->value.dim(axis);
  check(start >= 0 && len >= 0 && start + len <= extent,
        "slice: range [" + std::to_string(start) + "," + std::to_string(start + len) +
            ") exceeds axis extent " + std::to_string(extent));
  Shape out_shape = a->shape();
  out_shape[axis] = len;
  int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= out_shape[i];
  for (int i = axis + 1; i < nd; ++i) inner *= out_shape[i];

  Array v(out_shape);
  for (int64_t o = 0; o < outer; ++o)
    std::memcpy(v.data() + o * len * inner, a->value.data() + (o * extent + start) * inner,
                sizeof(real) * len * inner);
  return make_op(
      std::move(v), {a},
      [a, outer, inner, extent, start, len](Node& n) {
        if (!a->requires_grad) return;
        Array& ga = a->grad_ref();
        for (int64_t o = 0; o < outer; ++o) {
          const real* src = n.grad.data() + o * len * inner;
          real* dst = ga.data() + (o * extent + start) * inner;
          for (int64_t i = 0; i < len * inner; ++i) dst[i] += src[i];
        }
      },
      "slice");
}

// ---------------------------------------------------------------------------
// linear algebra
// ---------------------------------------------------------------------------

Var matmul(const Var& a, const Var& b) {
  check(a->value.ndim() == 2 && b->value.ndim() == 2, "matmul: inputs must be 2-d");
  const int64_t m = a->value.dim(0), k = a->value.dim(1), n_ = b->value.dim(1);
  check(b->value.dim(0) == k, "matmul: inner dims " + shape_str(a->shape()) + " x " +
                                  shape_str(b->shape()));
  Array v(Shape{m, n_});
  MapM(v.data(), m, n_) = CMapM(a->value.data(), m, k) * CMapM(b->value.data(), k, n_);
  return make_op(
      std::move(v), {a, b},
      [a, b, m, k, n_](Node& n) {
        CMapM g(n.grad.data(), m, n_);
        if (a->requires_grad)
          MapM(a->grad_ref().data(), m, k) += g * CMapM(b->value.data(), k, n_).transpose();
        if (b->requires_grad)
          MapM(b->grad_ref().data(), k, n_) += CMapM(a->value.data(), m, k).transpose() * g;
      },
      "matmul");
}

Var bmm(const Var& a, const Var& b) {
  check(a->value.ndim() == 3 && b->value.ndim() == 3, "bmm: inputs must be 3-d");
  const int64_t bs = a->value.dim(0), m = a->value.dim(1), k = a->value.dim(2),
                n_ = b->value.dim(2);
  check(b->value.dim(0) == bs && b->value.dim(1) == k,
        "bmm: " + shape_str(a->shape()) + " x " + shape_str(b->shape()));
  Array v(Shape{bs, m, n_});
  for (int64_t i = 0; i < bs; ++i)
    MapM(v.data() + i * m * n_, m, n_) = CMapM(a->value.data() + i * m * k, m, k) *
                                         CMapM(b->value.data() + i * k * n_, k, n_);
  return make_op(
      std::move(v), {a, b},
      [a, b, bs, m, k, n_](Node& n) {
        for (int64_t i = 0; i < bs; ++i) {
          CMapM g(n.grad.data() + i * m * n_, m, n_);
          if (a->requires_grad)
            MapM(a->grad_ref().data() + i * m * k, m, k) +=
                g * CMapM(b->value.data() + i * k * n_, k, n_).transpose();
          if (b->requires_grad)
            MapM(b->grad_ref().data() + i * k * n_, k, n_) +=
                CMapM(a->value.data() + i * m * k, m, k).transpose() * g;
        }
      },
      "bmm");
}

Var linear(const Var& x, const Var& w, const Var& b) {
  check(w->value.ndim() == 2, "linear: weight must be 2-d");
  const int64_t k = w->value.dim(0), n_ = w->value.dim(1);
  check(x->value.ndim() >= 1 && x->value.dim(-1) == k,
        "linear: input " + shape_str(x->shape()) + " does not end in " + std::to_string(k));
  if (b) check(b->value.ndim() == 1 && b->value.dim(0) == n_, "linear: bias shape mismatch");
  const int64_t rows = x->value.numel() / k;
  Shape out_shape = x->shape();
  out_shape.back() = n_;
  Array v(out_shape);
  MapM out(v.data(), rows, n_);
  out = CMapM(x->value.data(), rows, k) * CMapM(w->value.data(), k, n_);
  if (b) out.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(b->value.data(), n_);
  std::vector<Var> parents = b ? std::vector<Var>{x, w, b} : std::vector<Var>{x, w};
  return make_op(
      std::move(v), parents,
      [x, w, b, rows, k, n_](Node& n) {
        CMapM g(n.grad.data(), rows, n_);
        if (x->requires_grad)
          MapM(x->grad_ref().data(), rows, k) += g * CMapM(w->value.data(), k, n_).transpose();
        if (w->requires_grad)
          MapM(w->grad_ref().data(), k, n_) += CMapM(x->value.data(), rows, k).transpose() * g;
        if (b && b->requires_grad)
          Eigen::Map<Eigen::RowVectorXd>(b->grad_ref().data(), n_) += g.colwise().sum();
      },
      "linear");
}

Var layer_norm(const Var& x, const Var& gamma, const Var& beta, real eps) {
  const int64_t d = x->value.dim(-1);
  check(gamma->value.ndim() == 1 && gamma->value.dim(0) == d, "layer_norm: gamma shape");
  check(beta->value.ndim() == 1 && beta->value.dim(0) == d, "layer_norm: beta shape");
  const int64_t rows = x->value.numel() / d;
  Array v(x->shape());
  Array xhat(x->shape());
  Array inv_sigma(Shape{rows});
  for (int64_t r = 0; r < rows; ++r) {
    const real* xr = x->value.data() + r * d;
    real mu = 0;
    for (int64_t i = 0; i < d; ++i) mu += xr[i];
    mu /= real(d);
    real var = 0;
    for (int64_t i = 0; i < d; ++i) var += (xr[i] - mu) * (xr[i] - mu);
    var /= real(d);
    const real inv = real(1) / std::sqrt(var + eps);
    inv_sigma[r] = inv;
    for (int64_t i = 0; i < d; ++i) {
      const real xh = (xr[i] - mu) * inv;
      xhat[r * d + i] = xh;
      v[r * d + i] = xh * gamma->value[i] + beta->value[i];
    }
  }
  return make_op(
      std::move(v), {x, gamma, beta},
      [x, gamma, beta, xhat = std::move(xhat), inv_sigma = std::move(inv_sigma), rows,
       d](Node& n) {
        for (int64_t r = 0; r < rows; ++r) {
          const real* g = n.grad.data() + r * d;
          const real* xh = xhat.data() + r * d;
          if (gamma->requires_grad) {
            Array& gg = gamma->grad_ref();
            for (int64_t i = 0; i < d; ++i) gg[i] += g[i] * xh[i];
          }
          if (beta->requires_grad) {
            Array& gb = beta->grad_ref();
            for (int64_t i = 0; i < d; ++i) gb[i] += g[i];
          }
          if (x->requires_grad) {
            real mean_h = 0, mean_hx = 0;
            for (int64_t i = 0; i < d; ++i) {
              const real h = g[i] * gamma->value[i];
              mean_h += h;
              mean_hx += h * xh[i];
            }
            mean_h /= real(d);
            mean_hx /= real(d);
            Array& gx = x->grad_ref();
            for (int64_t i = 0; i < d; ++i) {
              const real h = g[i] * gamma->value[i];
              gx[r * d + i] += inv_sigma[r] * (h - mean_h - xh[i] * mean_hx);
            }
          }
        }
      },
      "layer_norm");
}

// ---------------------------------------------------------------------------
// softmax / losses
// ---------------------------------------------------------------------------

Var softmax_lastdim(const Var& a) {
  const int64_t d = a->value.dim(-1);
  const int64_t rows = a->value.numel() / d;
  Array v(a->shape());
  for (int64_t r = 0; r < rows; ++r) {
    const real* xr = a->value.data() + r * d;
    real mx = xr[0];
    for (int64_t i = 1; i < d; ++i) mx = std::max(mx, xr[i]);
    real sum = 0;
    for (int64_t i = 0; i < d; ++i) {
      const real e = std::exp(xr[i] - mx);
      v[r * d + i] = e;
      sum += e;
    }
    for (int64_t i = 0; i < d; ++i) v[r * d + i] /= sum;
  }
  return make_op(
      std::move(v), {a},
      [a, rows, d](Node& n) {
        if (!a->requires_grad) return;
        Array& ga = a->grad_ref();
        for (int64_t r = 0; r < rows; ++r) {
          const real* y = n.value.data() + r * d;
          const real* g = n.grad.data() + r * d;
          real dot = 0;
          for (int64_t i = 0; i < d; ++i) dot += g[i] * y[i];
          for (int64_t i = 0; i < d; ++i) ga[r * d + i] += y[i] * (g[i] - dot);
        }
      },
      "softmax");
}

Var log_softmax_lastdim(const Var& a) {
  const int64_t d = a->value.dim(-1);
  const int64_t rows = a->value.numel() / d;
  Array v(a->shape());
  for (int64_t r = 0; r < rows; ++r) {
    const real* xr = a->value.data() + r * d;
    real mx = xr[0];
    for (int64_t i = 1; i < d; ++i) mx = std::max(mx, xr[i]);
    real sum = 0;
    for (int64_t i = 0; i < d; ++i) sum += std::exp(xr[i] - mx);
    const real lse = mx + std::log(sum);
    for (int64_t i = 0; i < d; ++i) v[r * d + i] = xr[i] - lse;
  }
  return make_op(
      std::move(v), {a},
      [a, rows, d](Node& n) {
        if (!a->requires_grad) return;
        Array& ga = a->grad_ref();
        for (int64_t r = 0; r < rows; ++r) {
          const real* logp = n.value.data() + r * d;
          const real* g = n.grad.data() + r * d;
          real gsum = 0;
          for (int64_t i = 0; i < d; ++i) gsum += g[i];
          for (int64_t i = 0; i < d; ++i) ga[r * d + i] += g[i] - std::exp(logp[i]) * gsum;
        }
      },
      "log_softmax");
}

Var nll_mean(const Var& logp, const IntArray& labels) {
  check(logp->value.ndim() == 2, "nll_mean: logp must be [B,C]");
  const int64_t bsz = logp->value.dim(0), c = logp->value.dim(1);
  check(labels.numel() == bsz, "nll_mean: label count mismatch");
  real loss = 0;
  for (int64_t b = 0; b < bsz; ++b) {
    const int64_t y = labels[b];
    check(y >= 0 && y < c, "nll_mean: label out of range");
    loss -= logp->value[b * c + y];
  }
  loss /= real(bsz);
  IntArray lbl = labels;
  return make_op(
      Array::scalar(loss), {logp},
      [logp, lbl = std::move(lbl), bsz, c](Node& n) {
        if (!logp->requires_grad) return;
        Array& g = logp->grad_ref();
        const real go = n.grad[0] / real(bsz);
        for (int64_t b = 0; b < bsz; ++b) g[b * c + lbl[b]] -= go;
      },
      "nll_mean");
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

Var reduce_sum(const Var& a, std::vector<int> axes, bool keepdims) {
  auto reduced = normalize_axes(a, std::move(axes), "reduce_sum");
  Shape out_shape = reduced_shape(a->shape(), reduced, keepdims);
  Array v(out_shape);
  for_each_reduced(a->shape(), reduced, [&](int64_t in, int64_t out) { v[out] += a->value[in]; });
  Shape in_shape = a->shape();
  return make_op(
      std::move(v), {a},
      [a, in_shape = std::move(in_shape), reduced = std::move(reduced)](Node& n) {
        if (!a->requires_grad) return;
        Array& ga = a->grad_ref();
        for_each_reduced(in_shape, reduced,
                         [&](int64_t in, int64_t out) { ga[in] += n.grad[out]; });
      },
      "reduce_sum");
}

Var reduce_mean(const Var& a, std::vector<int> axes, bool keepdims) {
  auto reduced = normalize_axes(a, std::move(axes), "reduce_mean");
  Shape out_shape = reduced_shape(a->shape(), reduced, keepdims);
  Array v(out_shape);
  for_each_reduced(a->shape(), reduced, [&](int64_t in, int64_t out) { v[out] += a->value[in]; });
  const real inv_count = real(shape_numel(out_shape)) / real(a->value.numel());
  for (int64_t i = 0; i < v.numel(); ++i) v[i] *= inv_count;
  Shape in_shape = a->shape();
  return make_op(
      std::move(v), {a},
      [a, in_shape = std::move(in_shape), reduced = std::move(reduced), inv_count](Node& n) {
        if (!a->requires_grad) return;
        Array& ga = a->grad_ref();
        for_each_reduced(in_shape, reduced,
                         [&](int64_t in, int64_t out) { ga[in] += n.grad[out] * inv_count; });
      },
      "reduce_mean");
}

Var reduce_max(const Var& a, std::vector<int> axes, bool keepdims) {
  auto reduced = normalize_axes(a, std::move(axes), "reduce_max");
  Shape out_shape = reduced_shape(a->shape(), reduced, keepdims);
  Array v(out_shape, -std::numeric_limits<real>::infinity());
  IntArray argmax(out_shape, -1);
  for_each_reduced(a->shape(), reduced, [&](int64_t in, int64_t out) {
    if (a->value[in] > v[out]) {
      v[out] = a->value[in];
      argmax[out] = in;
    }
  });
  return make_op(
      std::move(v), {a},
      [a, argmax = std::move(argmax)](Node& n) {
        if (!a->requires_grad) return;
        Array& ga = a->grad_ref();
        for (int64_t o = 0; o < n.grad.numel(); ++o) ga[argmax[o]] += n.grad[o];
      },
      "reduce_max");
}

Var sum_all(const Var& a) {
  std::vector<int> axes(a->value.ndim());
  for (size_t i = 0; i < axes.size(); ++i) axes[i] = static_cast<int>(i);
  return reduce_sum(a, axes, false);
}

Var mean_all(const Var& a) {
  std::vector<int> axes(a->value.ndim());
  for (size_t i = 0; i < axes.size(); ++i) axes[i] = static_cast<int>(i);
  return reduce_mean(a, axes, false);
}

// ---------------------------------------------------------------------------
// fused model ops
// ---------------------------------------------------------------------------

Var multi_head_attention(const Var& x, const Var& wqkv, const Var& bqkv, const Var& wo,
                         const Var& bo, int num_heads) {
  check(x->value.ndim() == 3, "mha: x must be [B,T,D]");
  const int64_t bsz = x->value.dim(0), t = x->value.dim(1), d = x->value.dim(2);
  check(wqkv->value.ndim() == 2 && wqkv->value.dim(0) == d && wqkv->value.dim(1) == 3 * d,
        "mha: wqkv must be [D,3D]");
  check(bqkv->value.numel() == 3 * d, "mha: bqkv must be [3D]");
  check(wo->value.ndim() == 2 && wo->value.dim(0) == d && wo->value.dim(1) == d,
        "mha: wo must be [D,D]");
  check(bo->value.numel() == d, "mha: bo must be [D]");
  check(num_heads > 0 && d % num_heads == 0, "mha: num_heads must divide embed dim");
  const int64_t h = num_heads, dh = d / h;
  const real att_scale = real(1) / std::sqrt(real(dh));

  Array qkv(Shape{bsz, t, 3 * d});
  MapM(qkv.data(), bsz * t, 3 * d) =
      CMapM(x->value.data(), bsz * t, d) * CMapM(wqkv->value.data(), d, 3 * d);
  MapM(qkv.data(), bsz * t, 3 * d).rowwise() +=
      Eigen::Map<const Eigen::RowVectorXd>(bqkv->value.data(), 3 * d);

  Array probs(Shape{bsz, h, t, t});
  Array ctx(Shape{bsz, t, d});
  for (int64_t b = 0; b < bsz; ++b) {
    const real* qkv_b = qkv.data() + b * t * 3 * d;
    for (int64_t hh = 0; hh < h; ++hh) {
      CStridedMap q(qkv_b + hh * dh, t, dh, StrideD(3 * d));
      CStridedMap k(qkv_b + d + hh * dh, t, dh, StrideD(3 * d));
      CStridedMap vv(qkv_b + 2 * d + hh * dh, t, dh, StrideD(3 * d));
      MapM p(probs.data() + (b * h + hh) * t * t, t, t);
      p = att_scale * (q * k.transpose());
      for (int64_t r = 0; r < t; ++r) {
        real mx = p(r, 0);
        for (int64_t cix = 1; cix < t; ++cix) mx = std::max(mx, p(r, cix));
        real sum = 0;
        for (int64_t cix = 0; cix < t; ++cix) {
          const real e = std::exp(p(r, cix) - mx);
          p(r, cix) = e;
          sum += e;
        }
        for (int64_t cix = 0; cix < t; ++cix) p(r, cix) /= sum;
      }
      StridedMap c(ctx.data() + b * t * d + hh * dh, t, dh, StrideD(d));
      c = p * vv;
    }
  }

  Array v(Shape{bsz, t, d});
  MapM(v.data(), bsz * t, d) =
      CMapM(ctx.data(), bsz * t, d) * CMapM(wo->value.data(), d, d);
  MapM(v.data(), bsz * t, d).rowwise() +=
      Eigen::Map<const Eigen::RowVectorXd>(bo->value.data(), d);

  return make_op(
      std::move(v), {x, wqkv, bqkv, wo, bo},
      [x, wqkv, bqkv, wo, bo, qkv = std::move(qkv), probs = std::move(probs),
       ctx = std::move(ctx), bsz, t, d, h, dh, att_scale](Node& n) {
        CMapM g(n.grad.data(), bsz * t, d);
        if (wo->requires_grad)
          MapM(wo->grad_ref().data(), d, d) += CMapM(ctx.data(), bsz * t, d).transpose() * g;
        if (bo->requires_grad)
          Eigen::Map<Eigen::RowVectorXd>(bo->grad_ref().data(), d) += g.colwise().sum();

        MatX dctx = g * CMapM(wo->value.data(), d, d).transpose();  // [B*T, D]
        MatX dqkv = MatX::Zero(bsz * t, 3 * d);
        for (int64_t b = 0; b < bsz; ++b) {
          const real* qkv_b = qkv.data() + b * t * 3 * d;
          for (int64_t hh = 0; hh < h; ++hh) {
            CStridedMap q(qkv_b + hh * dh, t, dh, StrideD(3 * d));
            CStridedMap k(qkv_b + d + hh * dh, t, dh, StrideD(3 * d));
            CStridedMap vv(qkv_b + 2 * d + hh * dh, t, dh, StrideD(3 * d));
            CMapM p(probs.data() + (b * h + hh) * t * t, t, t);
            CStridedMap dc(dctx.data() + b * t * d + hh * dh, t, dh, StrideD(d));

            MatX dp = dc * vv.transpose();                       // [T,T]
            MatX dv = p.transpose() * dc;                        // [T,dh]
            Eigen::VectorXd rowdot = (dp.array() * p.array()).rowwise().sum();
            MatX ds = (dp.colwise() - rowdot).array() * p.array();
            ds *= att_scale;
            StridedMap dq2(dqkv.data() + b * t * 3 * d + hh * dh, t, dh, StrideD(3 * d));
            StridedMap dk2(dqkv.data() + b * t * 3 * d + d + hh * dh, t, dh, StrideD(3 * d));
            StridedMap dv2(dqkv.data() + b * t * 3 * d + 2 * d + hh * dh, t, dh, StrideD(3 * d));
            dq2 = ds * k;
            dk2 = ds.transpose() * q;
            dv2 = dv;
          }
        }
        if (x->requires_grad)
          MapM(x->grad_ref().data(), bsz * t, d) +=
              dqkv * CMapM(wqkv->value.data(), d, 3 * d).transpose();
        if (wqkv->requires_grad)
          MapM(wqkv->grad_ref().data(), d, 3 * d) +=
              CMapM(x->value.data(), bsz * t, d).transpose() * dqkv;
        if (bqkv->requires_grad)
          Eigen::Map<Eigen::RowVectorXd>(bqkv->grad_ref().data(), 3 * d) += dqkv.colwise().sum();
      },
      "multi_head_attention");
}

Var neg_sqdist(const Var& e, const Var& q) {
  check(e->value.ndim() == 3, "neg_sqdist: e must be [B,P,D]");
  check(q->value.ndim() == 2, "neg_sqdist: q must be [M,D]");
  const int64_t bsz = e->value.dim(0), p = e->value.dim(1), d = e->value.dim(2);
  const int64_t m = q->value.dim(0);
  check(q->value.dim(1) == d, "neg_sqdist: embed dims differ: " + shape_str(e->shape()) + " vs " +
                                  shape_str(q->shape()));
  Eigen::VectorXd qn(m);
  {
    CMapM qm(q->value.data(), m, d);
    qn = qm.rowwise().squaredNorm();
  }
  Array v(Shape{bsz, m, p});
  for (int64_t b = 0; b < bsz; ++b) {
    CMapM eb(e->value.data() + b * p * d, p, d);
    Eigen::VectorXd en = eb.rowwise().squaredNorm();
    MapM out(v.data() + b * m * p, m, p);
    out = real(2) * (CMapM(q->value.data(), m, d) * eb.transpose());
    out.colwise() -= qn;
    out.rowwise() -= en.transpose();
  }
  return make_op(
      std::move(v), {e, q},
      [e, q, bsz, p, d, m](Node& n) {
        for (int64_t b = 0; b < bsz; ++b) {
          CMapM g(n.grad.data() + b * m * p, m, p);
          CMapM eb(e->value.data() + b * p * d, p, d);
          CMapM qm(q->value.data(), m, d);
          if (e->requires_grad) {
            // d/de[-(e-q)^2] = -2(e-q); sum over prototypes weighted by g
            Eigen::VectorXd colsum = g.colwise().sum();  // [P]
            MapM ge(e->grad_ref().data() + b * p * d, p, d);
            ge += real(-2) * (eb.array().colwise() * colsum.array()).matrix();
            ge += real(2) * (g.transpose() * qm);
          }
          if (q->requires_grad) {
            Eigen::VectorXd rowsum = g.rowwise().sum();  // [M]
            MapM gq(q->grad_ref().data(), m, d);
            gq += real(2) * (g * eb);
            gq += real(-2) * (qm.array().colwise() * rowsum.array()).matrix();
          }
        }
      },
      "neg_sqdist");
}

Var region_argmax(const Var& att, IntArray* assignment) {
  check(att->value.ndim() == 3, "region_argmax: att must be [B,M,P]");
  const int64_t bsz = att->value.dim(0), m = att->value.dim(1), p = att->value.dim(2);
  Array v(att->shape());
  IntArray assign(Shape{bsz, p});
  for (int64_t b = 0; b < bsz; ++b)
    for (int64_t j = 0; j < p; ++j) {
      int64_t best = 0;
      real best_val = att->value[(b * m) * p + j];
      for (int64_t k = 1; k < m; ++k) {
        const real val = att->value[(b * m + k) * p + j];
        if (val > best_val) {
          best_val = val;
          best = k;
        }
      }
      assign[b * p + j] = best;
      v[(b * m + best) * p + j] = best_val;
    }
  if (assignment) *assignment = assign;
  return make_op(
      std::move(v), {att},
      [att, assign = std::move(assign), bsz, m, p](Node& n) {
        if (!att->requires_grad) return;
        Array& ga = att->grad_ref();
        for (int64_t b = 0; b < bsz; ++b)
          for (int64_t j = 0; j < p; ++j) {
            const int64_t k = assign[b * p + j];
            ga[(b * m + k) * p + j] += n.grad[(b * m + k) * p + j];
          }
      },
      "region_argmax");
}

Var avg_pool3x3(const Var& x) {
  check(x->value.ndim() == 4, "avg_pool3x3: x must be [B,M,H,W]");
  const int64_t bm = x->value.dim(0) * x->value.dim(1);
  const int64_t hgt = x->value.dim(2), wid = x->value.dim(3);
  Array v(x->shape());
  for (int64_t c = 0; c < bm; ++c) {
    const real* in = x->value.data() + c * hgt * wid;
    real* out = v.data() + c * hgt * wid;
    for (int64_t i = 0; i < hgt; ++i)
      for (int64_t j = 0; j < wid; ++j) {
        real acc = 0;
        int cnt = 0;
        for (int64_t di = -1; di <= 1; ++di)
          for (int64_t dj = -1; dj <= 1; ++dj) {
            const int64_t ii = i + di, jj = j + dj;
            if (ii >= 0 && ii < hgt && jj >= 0 && jj < wid) {
              acc += in[ii * wid + jj];
              ++cnt;
            }
          }
        out[i * wid + j] = acc / real(cnt);
      }
  }
  return make_op(
      std::move(v), {x},
      [x, bm, hgt, wid](Node& n) {
        if (!x->requires_grad) return;
        Array& gx = x->grad_ref();
        for (int64_t c = 0; c < bm; ++c) {
          const real* g = n.grad.data() + c * hgt * wid;
          real* gi = gx.data() + c * hgt * wid;
          for (int64_t i = 0; i < hgt; ++i)
            for (int64_t j = 0; j < wid; ++j) {
              int cnt = 0;
              for (int64_t di = -1; di <= 1; ++di)
                for (int64_t dj = -1; dj <= 1; ++dj) {
                  const int64_t ii = i + di, jj = j + dj;
                  if (ii >= 0 && ii < hgt && jj >= 0 && jj < wid) ++cnt;
                }
              const real share = g[i * wid + j] / real(cnt);
              for (int64_t di = -1; di <= 1; ++di)
                for (int64_t dj = -1; dj <= 1; ++dj) {
                  const int64_t ii = i + di, jj = j + dj;
                  if (ii >= 0 && ii < hgt && jj >= 0 && jj < wid) gi[ii * wid + jj] += share;
                }
            }
        }
      },
      "avg_pool3x3");
}

Var grid_warp(const Var& x, const std::array<real, 6>& theta) {
  check(x->value.ndim() == 3, "grid_warp: x must be [N,H,W]");
  const int64_t nmaps = x->value.dim(0), hgt = x->value.dim(1), wid = x->value.dim(2);
  Array v(x->shape());
  // Sample positions depend only on (i,j); precompute corner indices + weights.
  struct Tap {
    int64_t idx[4];
    real w[4];
  };
  std::vector<Tap> taps(hgt * wid);
  for (int64_t i = 0; i < hgt; ++i)
    for (int64_t j = 0; j < wid; ++j) {
      const real sx = theta[0] * real(j) + theta[1] * real(i) + theta[2];
      const real sy = theta[3] * real(j) + theta[4] * real(i) + theta[5];
      const real fx = std::floor(sx), fy = std::floor(sy);
      const int64_t x0 = static_cast<int64_t>(fx), y0 = static_cast<int64_t>(fy);
      const real wx = sx - fx, wy = sy - fy;
      Tap& tp = taps[i * wid + j];
      const real ws[4] = {(1 - wx) * (1 - wy), wx * (1 - wy), (1 - wx) * wy, wx * wy};
      const int64_t xs[4] = {x0, x0 + 1, x0, x0 + 1};
      const int64_t ys[4] = {y0, y0, y0 + 1, y0 + 1};
      for (int c = 0; c < 4; ++c) {
        const bool in = xs[c] >= 0 && xs[c] < wid && ys[c] >= 0 && ys[c] < hgt;
        tp.idx[c] = in ? ys[c] * wid + xs[c] : -1;
        tp.w[c] = in ? ws[c] : real(0);
      }
    }
  for (int64_t nmap = 0; nmap < nmaps; ++nmap) {
    const real* in = x->value.data() + nmap * hgt * wid;
    real* out = v.data() + nmap * hgt * wid;
    for (int64_t cell = 0; cell < hgt * wid; ++cell) {
      const Tap& tp = taps[cell];
      real acc = 0;
      for (int c = 0; c < 4; ++c)
        if (tp.idx[c] >= 0) acc += tp.w[c] * in[tp.idx[c]];
      out[cell] = acc;
    }
  }
  return make_op(
      std::move(v), {x},
      [x, taps = std::move(taps), nmaps, hgt, wid](Node& n) {
        if (!x->requires_grad) return;
        Array& gx = x->grad_ref();
        for (int64_t nmap = 0; nmap < nmaps; ++nmap) {
          const real* g = n.grad.data() + nmap * hgt * wid;
          real* gi = gx.data() + nmap * hgt * wid;
          for (int64_t cell = 0; cell < hgt * wid; ++cell) {
            const Tap& tp = taps[cell];
            for (int c = 0; c < 4; ++c)
              if (tp.idx[c] >= 0) gi[tp.idx[c]] += tp.w[c] * g[cell];
          }
        }
      },
      "grid_warp");
}

Var st_onehot(const Var& logits) {
  const int64_t d = logits->value.dim(-1);
  const int64_t rows = logits->value.numel() / d;
  Array v(logits->shape());
  for (int64_t r = 0; r < rows; ++r) {
    const real* xr = logits->value.data() + r * d;
    int64_t best = 0;
    for (int64_t i = 1; i < d; ++i)
      if (xr[i] > xr[best]) best = i;
    v[r * d + best] = real(1);
  }
  return make_op(
      std::move(v), {logits},
      [logits](Node& n) {
        if (!logits->requires_grad) return;
        Array& g = logits->grad_ref();
        for (int64_t i = 0; i < n.grad.numel(); ++i) g[i] += n.grad[i];
      },
      "st_onehot");
}

Var detach(const Var& a) { return constant(a->value); }

}  // namespace ivpt
