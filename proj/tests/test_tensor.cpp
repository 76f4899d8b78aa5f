#include <gtest/gtest.h>

#include <cmath>

#include "modellab/errors.hpp"
#include "modellab/ops.hpp"
#include "modellab/tensor.hpp"

using namespace mlab;

TEST(Tensor, ConstructionValidatesShapeAndValues) {
  EXPECT_THROW(Tensor({2, 2}, {1, 2, 3}), ShapeError);
  EXPECT_THROW(Tensor({0, 2}, {}), ShapeError);
  EXPECT_THROW(Tensor({1}, {INFINITY}), NumericError);
  const Tensor t({2, 3}, {1, 2, 3, 4, 5, 6});
  EXPECT_EQ(t.numel(), 6);
  EXPECT_EQ(t.dim(-1), 3);
  EXPECT_EQ(t.rank(), 2);
  EXPECT_THROW(t.item(), ContractError);
  EXPECT_THROW(Tensor().shape(), ContractError);
}

TEST(Tensor, CopiesAliasStorage) {
  Tensor a({2}, {1, 2}, true);
  Tensor b = a;
  b.mutable_values()[0] = 5.0f;
  EXPECT_EQ(a.values()[0], 5.0f);
  Tensor c = a.detach();
  c.mutable_values()[0] = 9.0f;
  EXPECT_EQ(a.values()[0], 5.0f);
  EXPECT_FALSE(c.requires_grad());
}

TEST(Tape, RecordsOpsInTopologicalOrderAndRunsEachRuleOnce) {
  Tensor x({2, 2}, {1, 2, 3, 4}, true);
  Tensor w({2, 2}, {1, 0, 0, 1}, true);
  const Tensor loss = sum(silu(matmul(x, w)));
  auto tape = Tape::record(loss);
  const auto names = tape.op_names();
  ASSERT_EQ(names.size(), 3u);
  EXPECT_EQ(names[0], "matmul");
  EXPECT_EQ(names[1], "silu");
  EXPECT_EQ(names[2], "sum");
  EXPECT_EQ(tape.run_backward(), 3u);
  EXPECT_TRUE(x.has_grad());
  EXPECT_TRUE(w.has_grad());
}

TEST(Tape, DiamondGraphAccumulatesBothPaths) {
  Tensor x({1}, {3.0f}, true);
  const Tensor y = add(mul(x, x), scale(x, 2.0f));
  backward(sum(y));
  EXPECT_FLOAT_EQ(x.grad()[0], 2.0f * 3.0f + 2.0f);
}

TEST(Backward, AccumulatesAcrossCallsUntilZeroed) {
  Tensor x({2}, {1.0f, -1.0f}, true);
  backward(sum(scale(x, 3.0f)));
  backward(sum(scale(x, 3.0f)));
  EXPECT_EQ(x.grad()[0], 6.0f);
  x.zero_grad();
  EXPECT_EQ(x.grad()[0], 0.0f);
  x.clear_grad();
  EXPECT_FALSE(x.has_grad());
}

TEST(Backward, RejectsNonScalarLoss) {
  Tensor x({2}, {1.0f, 2.0f}, true);
  EXPECT_THROW(backward(scale(x, 2.0f)), ContractError);
}

TEST(Backward, LeavesWithoutRequiresGradGetNothing) {
  Tensor x({2}, {1.0f, 2.0f}, true);
  Tensor c({2}, {3.0f, 4.0f});
  backward(sum(mul(x, c)));
  EXPECT_FALSE(c.has_grad());
  EXPECT_EQ(x.grad()[1], 4.0f);
}

TEST(NoGrad, SuppressesRecording) {
  Tensor x({2}, {1.0f, 2.0f}, true);
  Tensor y;
  {
    NoGradGuard g;
    EXPECT_FALSE(grad_enabled());
    y = scale(x, 2.0f);
  }
  EXPECT_TRUE(grad_enabled());
  EXPECT_FALSE(y.requires_grad());
  EXPECT_TRUE(y.is_leaf());
}

TEST(RequiresGrad, OnlyLeavesToggle) {
  Tensor x({1}, {1.0f}, true);
  Tensor y = scale(x, 2.0f);
  EXPECT_THROW(y.set_requires_grad(false), ContractError);
  x.set_requires_grad(false);
  EXPECT_FALSE(scale(x, 2.0f).requires_grad());
}

TEST(Counters, MatmulCountsMultiplyAdds) {
  op_counters() = {};
  Tensor a = Tensor::full({3, 4}, 1.0f), b = Tensor::full({4, 5}, 1.0f);
  matmul(a, b);
  EXPECT_EQ(op_counters().macs, 3u * 4u * 5u);
}
