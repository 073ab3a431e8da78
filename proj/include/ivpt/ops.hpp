#pragma once

#include <array>
#include <vector>

#include "ivpt/autodiff.hpp"

namespace ivpt {

// Differentiable operators. Shapes are validated on entry; every op installs
// its vector-Jacobian product on the tape. Broadcast support is deliberately
// narrow: `*_bcast` requires b's shape to be a suffix of a's shape, and
// `bcast_last_*` requires b to equal a's shape with the last dim collapsed
// to 1 — exactly the two patterns the model needs.

// -- elementwise ------------------------------------------------------------
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var div(const Var& a, const Var& b);
Var add_bcast(const Var& a, const Var& b);
Var mul_bcast(const Var& a, const Var& b);
Var bcast_last_div(const Var& a, const Var& b);
Var scale(const Var& a, real s);
Var add_scalar(const Var& a, real s);
Var neg(const Var& a);
Var exp_(const Var& a);
Var log_(const Var& a);
Var sqrt_(const Var& a);
Var abs_(const Var& a);
Var square(const Var& a);
Var clamp_min(const Var& a, real lo);
Var clamp(const Var& a, real lo, real hi);
Var gelu(const Var& a);

// -- shape ------------------------------------------------------------------
Var reshape(const Var& a, Shape s);
Var permute(const Var& a, const std::vector<int>& perm);
Var concat(const std::vector<Var>& xs, int axis);
Var slice(const Var& a, int axis, int64_t start, int64_t len);

// -- linear algebra ----------------------------------------------------------
Var matmul(const Var& a, const Var& b);                      // [M,K]x[K,N]
Var bmm(const Var& a, const Var& b);                         // [B,M,K]x[B,K,N]
Var linear(const Var& x, const Var& w, const Var& b);        // [...,K]->[...,N], b may be null
Var layer_norm(const Var& x, const Var& gamma, const Var& beta, real eps);

// -- softmax / losses ---------------------------------------------------------
Var softmax_lastdim(const Var& a);
Var log_softmax_lastdim(const Var& a);
// Mean negative log-likelihood of integer labels under given log-probabilities.
Var nll_mean(const Var& logp, const IntArray& labels);

// -- reductions ---------------------------------------------------------------
Var reduce_sum(const Var& a, std::vector<int> axes, bool keepdims = false);
Var reduce_mean(const Var& a, std::vector<int> axes, bool keepdims = false);
// Max over axes; gradient routes to the first (scan-order) argmax element.
Var reduce_max(const Var& a, std::vector<int> axes, bool keepdims = false);
Var sum_all(const Var& a);
Var mean_all(const Var& a);

// -- fused model ops -----------------------------------------------------------
// Standard pre-softmax-scaled multi-head self attention over tokens.
// x:[B,T,D], wqkv:[D,3D], bqkv:[3D], wo:[D,D], bo:[D].
Var multi_head_attention(const Var& x, const Var& wqkv, const Var& bqkv, const Var& wo,
                         const Var& bo, int num_heads);

// Negative squared euclidean distances between embeddings and prototypes:
// out[b,m,p] = -||e[b,p,:] - q[m,:]||^2. e:[B,P,D], q:[M,D] -> [B,M,P].
Var neg_sqdist(const Var& e, const Var& q);

// Winner-take-all region masks: out[b,m,p] = att[b,m,p] where m is the argmax
// channel at patch p (ties -> lowest index), 0 elsewhere. The integer
// assignment grid is written to *assignment ([B,P]) if non-null.
Var region_argmax(const Var& att, IntArray* assignment);

// 3x3 mean pooling, stride 1, same size; divisor is the in-bounds cell count
// so border cells average over their actual neighborhood. x:[B,M,H,W].
Var avg_pool3x3(const Var& x);

// Bilinear warp: out[n,i,j] samples x[n] at the affine image of pixel (x=j,y=i)
// under theta (row-major [a,b,tx,c,d,ty]); out-of-bounds reads are 0.
Var grid_warp(const Var& x, const std::array<real, 6>& theta);

// Hard one-hot of the last-dim argmax with a straight-through gradient
// (backward passes the incoming gradient unchanged).
Var st_onehot(const Var& logits);

Var detach(const Var& a);

}  // namespace ivpt
