#include <cmath>
#include <vector>

#include "doctest.h"
#include "fd_check.hpp"
#include "ivpt/fusion.hpp"
#include "ivpt/ops.hpp"

using namespace ivpt;

TEST_CASE("FusionConfig validation") {
  FusionConfig ok;
  CHECK_NOTHROW(ok.validate());

  FusionConfig bad = ok;
  bad.per_layer_m = {8, 8, 6};  // not strictly decreasing
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad.per_layer_m = {6, 8};
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad.per_layer_m = {};
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);

  bad = ok;
  bad.temperature = 0;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = ok;
  bad.num_groups = 0;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
}

TEST_CASE("assign: tiny temperature without noise reproduces plain argmax") {
  Rng rng(3);
  GroupingLayer gl(4, 2, rng);
  Var protos = constant(randn({5, 4}, rng));
  auto a = gl.assign(protos, /*temperature=*/1e-4, /*hard=*/true, /*with_noise=*/false, 0);

  const Array& logits = a.logits->value;
  const int64_t m = 5, cols = 3;
  for (int64_t k = 0; k < m; ++k) {
    int best = 0;
    for (int64_t g = 1; g < cols; ++g) {
      if (logits[k * cols + g] > logits[k * cols + best]) best = static_cast<int>(g);
    }
    CHECK(a.group_of[static_cast<size_t>(k)] == best);
    for (int64_t g = 0; g < cols; ++g) {
      CHECK(a.onehot->value[k * cols + g] == (g == best ? 1.0 : 0.0));
    }
  }
}

TEST_CASE("assign: fixed seed gives identical assignments, temperature<=0 throws") {
  Rng rng(5);
  GroupingLayer gl(6, 3, rng);
  Var protos = constant(randn({7, 6}, rng));
  auto a = gl.assign(protos, 1.0, true, true, 99);
  auto b = gl.assign(protos, 1.0, true, true, 99);
  for (int64_t i = 0; i < a.onehot->value.numel(); ++i) {
    CHECK(a.onehot->value[i] == b.onehot->value[i]);
  }
  CHECK(a.group_of == b.group_of);
  CHECK_THROWS_AS(gl.assign(protos, 0.0, true, true, 1), std::invalid_argument);
}

TEST_CASE("assign: logit gaps far above noise magnitude pin the groups") {
  // Hand-built projection sending prototypes to logits that favor groups
  // (1,1,2) by a margin of 200 — far beyond any Gumbel draw.
  Rng rng(7);
  GroupingLayer gl(3, 2, rng);
  gl.proj.w->value = Array::from({3, 3}, {200, 0, 0, 0, 200, 0, 0, 0, 200});
  gl.proj.b->value = Array::zeros({3});
  Var protos = constant(Array::from({3, 3}, {0, 1, 0, 0, 1, 0, 0, 0, 1}));
  for (uint64_t seed = 0; seed < 20; ++seed) {
    auto a = gl.assign(protos, 1.0, true, true, seed);
    CHECK(a.group_of == std::vector<int>{1, 1, 2});
  }
}

TEST_CASE("assign: hard rows are standard basis vectors, soft rows sum to 1") {
  Rng rng(11);
  GroupingLayer gl(5, 4, rng);
  Var protos = constant(randn({9, 5}, rng));
  auto hard = gl.assign(protos, 0.7, true, true, 42);
  for (int64_t k = 0; k < 9; ++k) {
    real sum = 0;
    int ones = 0;
    for (int64_t g = 0; g < 5; ++g) {
      const real v = hard.onehot->value[k * 5 + g];
      CHECK((v == 0.0 || v == 1.0));
      sum += v;
      if (v == 1.0) ones++;
    }
    CHECK(sum == 1.0);
    CHECK(ones == 1);
  }
  auto soft = gl.assign(protos, 0.7, false, true, 42);
  for (int64_t k = 0; k < 9; ++k) {
    real sum = 0;
    for (int64_t g = 0; g < 5; ++g) sum += soft.onehot->value[k * 5 + g];
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-5));
  }
}

namespace {
GroupAssignment fixed_assignment(const std::vector<int>& groups, int64_t n) {
  const int64_t m = static_cast<int64_t>(groups.size());
  Array oh = Array::zeros({m, n + 1});
  for (int64_t k = 0; k < m; ++k) oh[k * (n + 1) + groups[static_cast<size_t>(k)]] = 1;
  GroupAssignment a;
  a.onehot = constant(oh);
  a.group_of = groups;
  return a;
}
}  // namespace

TEST_CASE("fuse_group_means: identity composition through an identity MLP") {
  // Single group holding every prompt; the group mean is zero-mean and
  // unit-variance, so LayerNorm is (nearly) the identity and an
  // identity-initialized MLP returns the mean itself.
  const int64_t d = 2;
  Array prompts = Array::from({1, 2, d}, {-3.0, 3.0, 1.0, -1.0});  // mean = (-1, 1)
  auto a = fixed_assignment({1, 1}, 1);
  std::vector<int64_t> occ;
  Var means = fuse_group_means(constant(prompts), a, &occ);
  CHECK(occ == std::vector<int64_t>{0, 2});
  CHECK(means->value[2] == doctest::Approx(-1.0).epsilon(1e-12));
  CHECK(means->value[3] == doctest::Approx(1.0).epsilon(1e-12));

  Rng rng(13);
  FusionBlock fb(d, rng, /*use_gelu=*/false);
  fb.fc1.w->value = Array::from({d, d}, {1, 0, 0, 1});
  fb.fc1.b->value = Array::zeros({d});
  fb.fc2.w->value = Array::from({d, d}, {1, 0, 0, 1});
  fb.fc2.b->value = Array::zeros({d});
  Var fused = fb.forward(means);
  CHECK(fused->value[2] == doctest::Approx(-1.0).epsilon(1e-4));
  CHECK(fused->value[3] == doctest::Approx(1.0).epsilon(1e-4));
}

TEST_CASE("fuse_group_means: single-member group returns the member exactly") {
  Rng rng(17);
  Array prompts = randn({2, 3, 4}, rng);
  auto a = fixed_assignment({1, 2, 2}, 2);
  Var means = fuse_group_means(constant(prompts), a);
  for (int64_t b = 0; b < 2; ++b) {
    for (int64_t j = 0; j < 4; ++j) {
      CHECK(means->value[(b * 3 + 1) * 4 + j] ==
            doctest::Approx(prompts[(b * 3 + 0) * 4 + j]).epsilon(1e-12));
    }
  }
}

TEST_CASE("fuse_group_means: loop-and-average oracle and empty-group zeros") {
  Rng rng(19);
  const int64_t B = 3, m = 4, d = 5, n = 2;
  Array prompts = randn({B, m, d}, rng);
  auto a = fixed_assignment({1, 1, 2, 2}, n);
  std::vector<int64_t> occ;
  Var means = fuse_group_means(constant(prompts), a, &occ);
  CHECK(occ == std::vector<int64_t>{0, 2, 2});
  for (int64_t b = 0; b < B; ++b) {
    for (int64_t j = 0; j < d; ++j) {
      // Background group is empty -> exactly zero.
      CHECK(means->value[(b * (n + 1) + 0) * d + j] == 0.0);
      const real g1 = (prompts[(b * m + 0) * d + j] + prompts[(b * m + 1) * d + j]) / 2;
      const real g2 = (prompts[(b * m + 2) * d + j] + prompts[(b * m + 3) * d + j]) / 2;
      CHECK(means->value[(b * (n + 1) + 1) * d + j] == doctest::Approx(g1).epsilon(1e-12));
      CHECK(means->value[(b * (n + 1) + 2) * d + j] == doctest::Approx(g2).epsilon(1e-12));
    }
  }
}

TEST_CASE("fuse_group_means is invariant to prompt order within a group") {
  Rng rng(23);
  const int64_t m = 4, d = 3;
  Array prompts = randn({1, m, d}, rng);
  Array swapped = prompts;
  for (int64_t j = 0; j < d; ++j) std::swap(swapped[0 * d + j], swapped[2 * d + j]);
  // Concepts 0 and 2 share group 1; swapping them must not change the mean.
  auto a = fixed_assignment({1, 2, 1, 2}, 2);
  Var m1 = fuse_group_means(constant(prompts), a);
  Var m2 = fuse_group_means(constant(swapped), a);
  for (int64_t i = 0; i < m1->value.numel(); ++i) {
    CHECK(m1->value[i] == doctest::Approx(m2->value[i]).epsilon(1e-12));
  }
}

TEST_CASE("group_region_maps sums member regions") {
  Array regions = Array::from({1, 3, 2}, {1.0, 0.0, 0.0, 2.0, 4.0, 0.0});
  auto a = fixed_assignment({1, 1, 2}, 2);
  Var grouped = group_region_maps(constant(regions), a);
  CHECK(grouped->value.dim(1) == 3);
  CHECK(grouped->value[(0 * 3 + 1) * 2 + 0] == doctest::Approx(1.0));
  CHECK(grouped->value[(0 * 3 + 1) * 2 + 1] == doctest::Approx(2.0));
  CHECK(grouped->value[(0 * 3 + 2) * 2 + 0] == doctest::Approx(4.0));
  CHECK(grouped->value[(0 * 3 + 2) * 2 + 1] == doctest::Approx(0.0));
}

TEST_CASE("consistency_loss: identical maps give zero") {
  Rng rng(29);
  Array maps = rand_uniform({2, 3, 8}, rng, 0.1, 1.0);
  Var v = constant(maps);
  Var loss = consistency_loss(v, v);
  CHECK(std::abs(loss->scalar()) <= 1e-8);
}

TEST_CASE("consistency_loss: uniform fine vs half-support coarse equals log 2") {
  // 2x2 grid: fine uniform, coarse uniform on half the cells. The closed form
  // is log 2; the eps floor perturbs it by well under 1e-6.
  Array fine = Array::full({1, 1, 4}, 0.25);
  Array coarse = Array::from({1, 1, 4}, {0.5, 0.5, 0.0, 0.0});
  Var loss = consistency_loss(constant(fine), constant(coarse));
  CHECK(loss->scalar() == doctest::Approx(std::log(2.0)).epsilon(1e-6));
}

TEST_CASE("consistency_loss: non-negative, zero iff maps match after normalization") {
  Rng rng(31);
  for (int trial = 0; trial < 10; ++trial) {
    Array f = rand_uniform({1, 2, 9}, rng, 0.0, 1.0);
    Array c = rand_uniform({1, 2, 9}, rng, 0.0, 1.0);
    Var loss = consistency_loss(constant(f), constant(c));
    CHECK(loss->scalar() >= 0.0);
    CHECK(loss->scalar() > 1e-6);  // random maps essentially never align
  }
  // Scaling a map leaves the normalized distribution unchanged -> still zero.
  Array f = rand_uniform({1, 1, 6}, rng, 0.2, 1.0);
  Array c = f;
  for (int64_t i = 0; i < c.numel(); ++i) c[i] *= 3.0;
  CHECK(consistency_loss(constant(f), constant(c))->scalar() ==
        doctest::Approx(0.0).epsilon(1e-9));
}

TEST_CASE("consistency_loss gradients match finite differences") {
  Rng rng(37);
  Var fine = parameter(rand_uniform({2, 2, 6}, rng, 0.1, 1.0));
  Var coarse = parameter(rand_uniform({2, 2, 6}, rng, 0.1, 1.0));
  auto res = testing::fd_check({fine, coarse},
                               [&]() { return consistency_loss(fine, coarse); });
  CHECK_MESSAGE(res.ok(), res.worst);
}

TEST_CASE("straight-through grouping passes gradients to the projection") {
  Rng rng(41);
  GroupingLayer gl(4, 2, rng);
  Var protos = parameter(randn({5, 4}, rng));
  Array w = randn({5, 3}, rng);

  auto a = gl.assign(protos, 1.0, /*hard=*/true, /*with_noise=*/false, 0);
  Var obj = sum_all(mul(a.onehot, constant(w)));
  backward(obj);
  CHECK(gl.proj.w->has_grad());
  CHECK(protos->has_grad());
  bool any = false;
  for (int64_t i = 0; i < gl.proj.w->grad_ref().numel(); ++i) {
    if (gl.proj.w->grad_ref()[i] != 0.0) any = true;
  }
  CHECK(any);
}

TEST_CASE("consistency_loss rejects mismatched grids") {
  CHECK_THROWS_AS(
      consistency_loss(constant(Array::zeros({1, 2, 4})), constant(Array::zeros({1, 2, 9}))),
      std::invalid_argument);
}
