// Copyright 2026 The modepth Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <random>

#include "mod/tensor.hpp"
#include "oracles.hpp"

namespace mod {
namespace {

using testing::finite_difference_check;
using testing::random_tensor;

// Runs `f` under a fresh tape, backpropagates and compares against finite
// differences of the same function evaluated without recording.
double grad_check(const std::function<Tensor()>& f, std::vector<std::pair<std::string, Tensor>> params) {
  for (auto& [n, t] : params) t.zero_grad();
  Tape tape;
  {
    Tape::Scope scope(tape);
    tape.backward(f());
  }
  auto r = finite_difference_check([&] { return f().item(); }, params);
  EXPECT_GT(r.checked, 0u);
  return r.max_rel_error;
}

/// Projection to a scalar with random weights, so no gradient vanishes by symmetry.
Tensor project(const Tensor& y, const Tensor& w) { return sum(matmul(y, w)); }

TEST(Matmul, IdentityAndProjector) {
  const Tensor eye = Tensor::from({2, 2}, {1, 0, 0, 1});
  const Tensor m = Tensor::from({2, 2}, {1, 2, 3, 4});
  const Tensor p = matmul(eye, m);
  EXPECT_EQ(std::vector<double>(p.data().begin(), p.data().end()), (std::vector<double>{1, 2, 3, 4}));
  const Tensor q = matmul(Tensor::from({2, 2}, {1, 0, 0, 0}), Tensor::from({2, 1}, {5, 7}));
  EXPECT_EQ(q[0], 5.0);
  EXPECT_EQ(q[1], 0.0);
}

TEST(Matmul, ShapeMismatchThrows) {
  EXPECT_THROW(matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3})), ShapeError);
  EXPECT_THROW(matmul_bt(Tensor::zeros({2, 3}), Tensor::zeros({2, 2})), ShapeError);
}

TEST(Matmul, GradientOfSumMatchesFiniteDifferences) {
  std::mt19937_64 rng(7);
  Tensor a = random_tensor({3, 3}, rng), b = random_tensor({3, 3}, rng);
  EXPECT_LT(grad_check([&] { return sum(matmul(a, b)); }, {{"a", a}, {"b", b}}), 1e-6);
  Tensor c = random_tensor({4, 3}, rng);
  EXPECT_LT(grad_check([&] { return sum(matmul_bt(c, a)); }, {{"c", c}, {"a", a}}), 1e-6);
}

TEST(Softmax, UniformAndStable) {
  const Tensor s = softmax(Tensor::from({3}, {0, 0, 0}));
  for (double v : s.data()) EXPECT_NEAR(v, 1.0 / 3.0, 1e-15);
  const Tensor big = softmax(Tensor::from({2}, {1000, 0}));
  EXPECT_EQ(big[0], 1.0);
  EXPECT_GE(big[1], 0.0);
  EXPECT_LT(big[1], 1e-300);
}

TEST(Softmax, RowsSumToOneOnAnyAxis) {
  std::mt19937_64 rng(3);
  const Tensor x = random_tensor({3, 4, 5}, rng, 3.0, false);
  for (int axis : {0, 1, 2}) {
    const Tensor y = softmax(x, axis);
    const std::size_t n = x.shape()[axis];
    const std::size_t inner = axis == 2 ? 1 : (axis == 1 ? 5 : 20);
    const std::size_t outer = x.size() / (n * inner);
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t i = 0; i < inner; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < n; ++j) s += y[o * n * inner + j * inner + i];
        EXPECT_NEAR(s, 1.0, 1e-12);
      }
  }
  EXPECT_THROW(softmax(x, 3), ShapeError);
}

TEST(Softmax, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(11);
  Tensor x = random_tensor({1, 8}, rng);
  const Tensor w = random_tensor({8, 1}, rng, 1.0, false);
  EXPECT_LT(grad_check([&] { return project(softmax(x), w); }, {{"x", x}}), 1e-6);
}

TEST(LayerNorm, ConstantRowMapsToZero) {
  const Tensor g = Tensor::from({4}, {1, 1, 1, 1}), b = Tensor::from({4}, {0, 0, 0, 0});
  const Tensor y = layer_norm(Tensor::from({1, 4}, {3, 3, 3, 3}), g, b);
  for (double v : y.data()) EXPECT_EQ(v, 0.0);
}

TEST(LayerNorm, NormalizedRowIsNearlyFixed) {
  const Tensor g = Tensor::from({2}, {1, 1}), b = Tensor::from({2}, {0, 0});
  const Tensor y = layer_norm(Tensor::from({1, 2}, {1, -1}), g, b);
  EXPECT_NEAR(y[0], 1.0, 1e-5);
  EXPECT_NEAR(y[1], -1.0, 1e-5);
}

TEST(LayerNorm, RowMeanIsZero) {
  std::mt19937_64 rng(5);
  const Tensor x = random_tensor({6, 7}, rng, 4.0, false);
  const Tensor y = layer_norm(x, Tensor::from({7}, std::vector<double>(7, 1.0)), Tensor::zeros({7}));
  for (std::size_t r = 0; r < 6; ++r) {
    double m = 0.0;
    for (std::size_t c = 0; c < 7; ++c) m += y.at(r, c);
    EXPECT_LE(std::abs(m / 7.0), 1e-10);
  }
}

TEST(LayerNorm, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(13);
  Tensor x = random_tensor({3, 6}, rng), g = random_tensor({6}, rng), b = random_tensor({6}, rng);
  const Tensor w = random_tensor({6, 1}, rng, 1.0, false);
  EXPECT_LT(grad_check([&] { return project(layer_norm(x, g, b), w); }, {{"x", x}, {"g", g}, {"b", b}}), 1e-6);
}

TEST(GatherRows, SelectsRequestedRows) {
  const Tensor x = Tensor::from({4, 2}, {0, 1, 10, 11, 20, 21, 30, 31});
  const std::vector<std::size_t> all{0, 1, 2, 3}, some{1, 3};
  const Tensor same = gather_rows(x, all);
  EXPECT_TRUE(std::equal(same.data().begin(), same.data().end(), x.data().begin()));
  const Tensor g = gather_rows(x, some);
  EXPECT_EQ(std::vector<double>(g.data().begin(), g.data().end()), (std::vector<double>{10, 11, 30, 31}));
}

TEST(GatherRows, BackwardScattersOnes) {
  Tensor x = Tensor::from({4, 3}, std::vector<double>(12, 0.5), true);
  Tape tape;
  {
    Tape::Scope s(tape);
    const std::vector<std::size_t> idx{0, 2};
    tape.backward(sum(gather_rows(x, idx)));
  }
  for (std::size_t r = 0; r < 4; ++r)
    for (std::size_t c = 0; c < 3; ++c) EXPECT_EQ(x.grad()[r * 3 + c], (r == 0 || r == 2) ? 1.0 : 0.0);
}

TEST(GatherRows, RejectsBadIndices) {
  const Tensor x = Tensor::zeros({4, 2});
  const std::vector<std::size_t> oob{1, 4}, dup{1, 1}, desc{2, 1};
  EXPECT_THROW(gather_rows(x, oob), IndexError);
  EXPECT_THROW(gather_rows(x, dup), IndexError);
  EXPECT_THROW(gather_rows(x, desc), IndexError);
  EXPECT_THROW(scatter_rows_add(x, oob, Tensor::zeros({2, 2})), IndexError);
}

TEST(ScatterRowsAdd, ZeroRowsAreIdentity) {
  std::mt19937_64 rng(1);
  const Tensor base = random_tensor({5, 3}, rng, 1.0, false);
  const std::vector<std::size_t> idx{0, 3};
  const Tensor out = scatter_rows_add(base, idx, Tensor::zeros({2, 3}));
  EXPECT_TRUE(std::equal(out.data().begin(), out.data().end(), base.data().begin()));
}

TEST(ScatterRowsAdd, NegatedGatherCancelsSelectedRows) {
  std::mt19937_64 rng(2);
  const Tensor base = random_tensor({6, 4}, rng, 1.0, false);
  const std::vector<std::size_t> idx{1, 2, 5};
  const Tensor out = scatter_rows_add(base, idx, scale(gather_rows(base, idx), -1.0));
  for (std::size_t r = 0; r < 6; ++r)
    for (std::size_t c = 0; c < 4; ++c) {
      const bool sel = r == 1 || r == 2 || r == 5;
      EXPECT_EQ(out.at(r, c), sel ? 0.0 : base.at(r, c));
    }
}

TEST(ScatterRowsAdd, MatchesLoopSemanticsOnRandomInputs) {
  std::mt19937_64 rng(17);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t s = 1 + rng() % 9, d = 1 + rng() % 5;
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < s; ++i)
      if (rng() % 2) idx.push_back(i);
    const Tensor base = random_tensor({s, d}, rng, 1.0, false);
    const Tensor rows = random_tensor({idx.size(), d}, rng, 1.0, false);
    const Tensor out = scatter_rows_add(base, idx, rows);
    for (std::size_t i = 0; i < s; ++i) {
      std::ptrdiff_t j = -1;
      for (std::size_t k = 0; k < idx.size(); ++k)
        if (idx[k] == i) j = static_cast<std::ptrdiff_t>(k);
      for (std::size_t c = 0; c < d; ++c) {
        const double expect = j < 0 ? base.at(i, c) : base.at(i, c) + rows.at(static_cast<std::size_t>(j), c);
        EXPECT_EQ(out.at(i, c), expect);
      }
    }
  }
}

TEST(Backward, SumGivesOnes) {
  Tensor x = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6}, true);
  Tape tape;
  {
    Tape::Scope s(tape);
    tape.backward(sum(x));
  }
  for (double g : x.grad()) EXPECT_EQ(g, 1.0);
}

TEST(Backward, DetachStopsGradient) {
  std::mt19937_64 rng(4);
  Tensor x = random_tensor({2, 3}, rng), w = random_tensor({3, 2}, rng);
  Tape tape;
  {
    Tape::Scope s(tape);
    tape.backward(sum(matmul(detach(x), w)));
  }
  EXPECT_TRUE(w.has_grad());
  EXPECT_FALSE(x.has_grad());
}

TEST(Backward, ContractErrors) {
  Tensor x = Tensor::from({2}, {1, 2}, true);
  Tape tape;
  Tape::Scope s(tape);
  const Tensor y = scale(x, 2.0);
  EXPECT_THROW(tape.backward(y), ContractError);  // not scalar
  const Tensor l = sum(y);
  tape.backward(l);
  EXPECT_THROW(tape.backward(l), ContractError);  // second pass without re-recording
}

TEST(Backward, UnreachableTensorsHaveNoGrad) {
  Tensor a = Tensor::from({2}, {1, 2}, true), b = Tensor::from({2}, {3, 4}, true);
  Tape tape;
  {
    Tape::Scope s(tape);
    const Tensor unused = scale(b, 3.0);
    tape.backward(sum(a));
  }
  EXPECT_FALSE(b.has_grad());
}

TEST(Backward, FanOutAccumulates) {
  Tensor x = Tensor::from({3}, {1, 2, 3}, true);
  Tape tape;
  {
    Tape::Scope s(tape);
    tape.backward(sum(add(x, scale(x, 2.0))));
  }
  for (double g : x.grad()) EXPECT_EQ(g, 3.0);
}

TEST(Elementwise, GradientsMatchFiniteDifferences) {
  std::mt19937_64 rng(19);
  Tensor x = random_tensor({4, 5}, rng), s = random_tensor({4, 1}, rng), b = random_tensor({5}, rng);
  const Tensor w = random_tensor({5, 1}, rng, 1.0, false);
  EXPECT_LT(grad_check([&] { return project(gelu(add_rowvec(mul_rows(x, sigmoid(s)), b)), w); }, {{"x", x}, {"s", s}, {"b", b}}),
            1e-6);
  const std::vector<std::size_t> ids{3, 0, 3, 1};
  Tensor table = random_tensor({4, 5}, rng);
  EXPECT_LT(grad_check([&] { return project(embedding(table, ids), w); }, {{"table", table}}), 1e-6);
  const std::vector<std::size_t> picks{1, 3, 17};
  EXPECT_LT(grad_check([&] { return sum(sigmoid(take(x, picks))); }, {{"x", x}}), 1e-6);
}

TEST(Rotary, GradientAndNormPreservation) {
  std::mt19937_64 rng(23);
  Tensor x = random_tensor({3, 8}, rng);
  const std::vector<std::size_t> pos{0, 5, 9};
  const Tensor y = rotary(x, pos, 2);
  for (std::size_t r = 0; r < 3; ++r) {
    double nx = 0, ny = 0;
    for (std::size_t c = 0; c < 8; ++c) {
      nx += x.at(r, c) * x.at(r, c);
      ny += y.at(r, c) * y.at(r, c);
    }
    EXPECT_NEAR(nx, ny, 1e-12);
  }
  for (std::size_t c = 0; c < 8; ++c) EXPECT_EQ(y.at(0, c), x.at(0, c));  // position 0 is unrotated
  const Tensor w = random_tensor({8, 1}, rng, 1.0, false);
  EXPECT_LT(grad_check([&] { return project(rotary(x, pos, 2), w); }, {{"x", x}}), 1e-6);
}

TEST(CausalAttention, MatchesNaiveLoopAndGradients) {
  std::mt19937_64 rng(29);
  Tensor q = random_tensor({4, 8}, rng), k = random_tensor({4, 8}, rng), v = random_tensor({4, 8}, rng);
  const std::vector<std::size_t> pos{1, 2, 6, 7};
  const std::vector<Segment> seg{{0, 4}};
  const Tensor out = causal_attention(q, k, v, pos, seg, 2);
  const auto ref = testing::naive_attention(q.data(), k.data(), v.data(), pos, 4, 8, 2);
  for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(out[i], ref[i], 1e-12);
  const Tensor w = random_tensor({8, 1}, rng, 1.0, false);
  EXPECT_LT(grad_check([&] { return project(causal_attention(q, k, v, pos, seg, 2), w); }, {{"q", q}, {"k", k}, {"v", v}}), 1e-6);
}

TEST(CausalAttention, SegmentsAreIndependent) {
  std::mt19937_64 rng(31);
  const Tensor q = random_tensor({5, 4}, rng, 1.0, false), k = random_tensor({5, 4}, rng, 1.0, false),
               v = random_tensor({5, 4}, rng, 1.0, false);
  const std::vector<std::size_t> pos{0, 1, 2, 0, 1};
  const std::vector<Segment> seg{{0, 3}, {3, 2}};
  const Tensor out = causal_attention(q, k, v, pos, seg, 1);
  // First row of the second segment attends only to itself.
  for (std::size_t c = 0; c < 4; ++c) EXPECT_NEAR(out.at(3, c), v.at(3, c), 1e-15);
  const std::vector<std::size_t> bad{0, 2, 1, 0, 1};
  EXPECT_THROW(causal_attention(q, k, v, bad, seg, 1), ContractError);
}

TEST(CrossEntropy, UniformAndConfident) {
  const std::vector<std::size_t> t{5, 200};
  EXPECT_NEAR(cross_entropy(Tensor::zeros({2, 256}), t).item(), std::log(256.0), 1e-12);
  std::vector<double> z(256, 0.0);
  z[7] = 100.0;
  const std::vector<std::size_t> seven{7};
  EXPECT_LT(cross_entropy(Tensor::from({1, 256}, z), seven).item(), 1e-40);
  const std::vector<std::size_t> oob{256};
  EXPECT_THROW(cross_entropy(Tensor::zeros({1, 256}), oob), IndexError);
}

TEST(CrossEntropy, MatchesLogSoftmaxLoop) {
  std::mt19937_64 rng(37);
  Tensor z = random_tensor({6, 11}, rng);
  const std::vector<std::size_t> t{0, 3, 10, 4, 4, 9};
  double ref = 0.0;
  for (std::size_t i = 0; i < 6; ++i) {
    double se = 0.0;
    for (std::size_t j = 0; j < 11; ++j) se += std::exp(z.at(i, j));
    ref += -(z.at(i, t[i]) - std::log(se));
  }
  EXPECT_NEAR(cross_entropy(z, t).item(), ref / 6.0, 1e-12);
  EXPECT_LT(grad_check([&] { return cross_entropy(z, t); }, {{"z", z}}), 1e-6);
}

TEST(Tensor, ReplayIsBitIdentical) {
  auto run = [] {
    std::mt19937_64 rng(41);
    Tensor a = random_tensor({5, 6}, rng), b = random_tensor({6, 4}, rng);
    return softmax(gelu(matmul(a, b)));
  };
  const Tensor x = run(), y = run();
  EXPECT_TRUE(std::equal(x.data().begin(), x.data().end(), y.data().begin()));
}

TEST(Tensor, OverflowIsAnError) {
  const Tensor big = Tensor::from({1, 1}, {1e200});
  EXPECT_THROW(matmul(big, big), NumericError);
  EXPECT_THROW(Tensor::from({2, 2}, {1, 2, 3}), ShapeError);
}

}  // namespace
}  // namespace mod
