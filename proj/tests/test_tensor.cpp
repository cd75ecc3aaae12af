#include <gtest/gtest.h>

#include <cmath>

#include "lpa/gradcheck.hpp"
#include "lpa/ops.hpp"
#include "support.hpp"

using namespace lpa;

TEST(Tensor, ShapeAndValuesAgree) {
    Tensor t = Tensor::from_values({2, 3}, {1, 2, 3, 4, 5, 6});
    EXPECT_EQ(t.numel(), 6u);
    EXPECT_EQ(t.rank(), 2u);
    EXPECT_EQ(t.dim(1), 3u);
    EXPECT_DOUBLE_EQ(t.at(4), 5.0);
    EXPECT_THROW(Tensor::from_values({2, 2}, {1, 2, 3}), DimensionError);
    EXPECT_THROW(Tensor::zeros({0, 3}), DimensionError);
}

TEST(Tensor, PrecisionConversionKeepsValues) {
    Tensor t = Tensor::from_values({3}, {0.5, -1.25, 3.0});
    Tensor f = t.to(DType::f32);
    EXPECT_EQ(f.dtype(), DType::f32);
    EXPECT_EQ(f.to_vector(), t.to_vector());
    EXPECT_EQ(parse_dtype("f32"), DType::f32);
    EXPECT_THROW(parse_dtype("f16"), ConfigError);
}

TEST(Autodiff, PowerRule) {
    Tensor x = Tensor::scalar(3.0, DType::f64, true);
    Tensor y = mul(x, x);
    y.backward();
    EXPECT_DOUBLE_EQ(x.grad_vector()[0], 6.0);
}

TEST(Autodiff, RepeatedBackwardAccumulatesLeafGrads) {
    Tensor x = Tensor::scalar(3.0, DType::f64, true);
    Tensor y = mul(x, x);
    y.backward();
    y.backward();
    EXPECT_DOUBLE_EQ(x.grad_vector()[0], 12.0);
    x.zero_grad();
    y.backward();
    EXPECT_DOUBLE_EQ(x.grad_vector()[0], 6.0);
}

TEST(Autodiff, NonScalarRootIsAContractError) {
    Tensor x = testkit::random_tensor({2, 2}, 1);
    EXPECT_THROW(scale(x, 2.0).backward(), ContractError);
}

TEST(Autodiff, EveryReachableLeafGetsAGrad) {
    Tensor a = testkit::random_tensor({3, 4}, 1);
    Tensor b = testkit::random_tensor({4, 2}, 2);
    Tensor unused = testkit::random_tensor({2}, 3);
    sum(matmul(a, b)).backward();
    EXPECT_TRUE(a.has_grad());
    EXPECT_TRUE(b.has_grad());
    EXPECT_FALSE(unused.has_grad());
}

TEST(Autodiff, SharedSubexpressionGetsBothContributions) {
    Tensor x = Tensor::from_values({2}, {1.0, 2.0}, DType::f64, true);
    Tensor y = add(x, x);
    Tensor z = sum(mul(y, x));  // 2·Σx²
    z.backward();
    EXPECT_DOUBLE_EQ(x.grad_vector()[0], 4.0);
    EXPECT_DOUBLE_EQ(x.grad_vector()[1], 8.0);
}

TEST(Autodiff, NoGradGuardRecordsNothing) {
    Tensor x = testkit::random_tensor({2, 2}, 1);
    Tensor y;
    {
        NoGradGuard guard;
        EXPECT_FALSE(grad_enabled());
        y = scale(x, 2.0);
    }
    EXPECT_TRUE(grad_enabled());
    EXPECT_FALSE(y.requires_grad());
    EXPECT_TRUE(y.is_leaf());
}

TEST(Autodiff, DetachCutsHistory) {
    Tensor x = testkit::random_tensor({2}, 1);
    Tensor y = scale(x, 3.0).detach();
    EXPECT_TRUE(y.is_leaf());
    EXPECT_FALSE(y.requires_grad());
}

TEST(Autodiff, MixedPrecisionIsRejected) {
    Tensor a = testkit::random_tensor({2, 2}, 1, DType::f64);
    Tensor b = testkit::random_tensor({2, 2}, 2, DType::f32);
    EXPECT_THROW(add(a, b), DimensionError);
}

TEST(FlopCounter, CountsOnlyMatmulMultiplyAccumulates) {
    Tensor a = testkit::random_tensor({4, 5}, 1);
    Tensor b = testkit::random_tensor({5, 3}, 2);
    FlopScope scope;
    Tensor c = matmul(a, b);
    EXPECT_EQ(FlopCounter::total(), 60u);
    relu(c);
    silu(c);
    scale(c, 2.0);
    EXPECT_EQ(FlopCounter::total(), 60u);
}

TEST(FlopCounter, DisabledOutsideScope) {
    FlopCounter::reset();
    Tensor a = testkit::random_tensor({4, 5}, 1);
    matmul(a, testkit::random_tensor({5, 3}, 2));
    EXPECT_EQ(FlopCounter::total(), 0u);
}

TEST(FlopCounter, FactoredChainCountsBothProducts) {
    const std::size_t L = 7, d = 12, r = 3;
    Tensor x = testkit::random_tensor({L, d}, 1);
    Tensor wa = testkit::random_tensor({d, r}, 2);
    Tensor wb = testkit::random_tensor({r, d}, 3);
    FlopScope scope;
    matmul(matmul(x, wa), wb);
    EXPECT_EQ(FlopCounter::total(), L * r * (d + d));
}

TEST(FlopCounter, CategoriesPartitionTheTotal) {
    Tensor a = testkit::random_tensor({2, 3}, 1);
    Tensor b = testkit::random_tensor({3, 4}, 2);
    FlopScope scope;
    {
        FlopCategory c("first");
        matmul(a, b);
    }
    {
        FlopCategory c("second");
        matmul(a, b);
        matmul(a, b);
    }
    EXPECT_EQ(FlopCounter::category("first"), 24u);
    EXPECT_EQ(FlopCounter::category("second"), 48u);
    EXPECT_EQ(FlopCounter::total(), 72u);
}

TEST(GradCheck, LinearFunctionIsExact) {
    Tensor x = testkit::random_tensor({3, 4}, 5);
    Tensor w = testkit::random_tensor({4, 2}, 6, DType::f64, false);
    const double err = grad_check([&](const Tensor& t) { return sum(matmul(t, w)); }, x);
    // Only rounding in the difference quotient remains.
    EXPECT_LT(err, 1e-8);
}

TEST(GradCheck, ReluAwayFromTheKink) {
    // Values bounded away from 0 by far more than the step.
    Tensor x = Tensor::from_values({6}, {-1.5, -0.7, -0.2, 0.3, 0.9, 2.1}, DType::f64, true);
    Tensor w = Tensor::from_values({6}, {0.3, -1.1, 0.7, 1.9, -0.4, 0.8});
    const double err = grad_check([&](const Tensor& t) { return sum(mul(relu(t), w)); }, x);
    EXPECT_LT(err, 1e-6);
}

TEST(GradCheck, ReportsTheWorstCoordinate) {
    Tensor x = testkit::random_tensor({2, 2}, 3);
    const auto r = grad_check([&] { return sum(mul(x, x)); }, {{"x", x}});
    EXPECT_EQ(r.coordinates, 4u);
    EXPECT_EQ(r.worst_tensor, "x");
    EXPECT_LT(r.max_relative_error, 1e-6);
}

TEST(Determinism, SameInputsGiveBitIdenticalOutputs) {
    auto run = [] {
        Tensor x = testkit::random_tensor({8, 16}, 11, DType::f32);
        Tensor w = testkit::random_tensor({16, 16}, 12, DType::f32);
        return masked_softmax(reshape(matmul_nt(matmul(x, w), x), {1, 8, 8})).to_vector();
    };
    EXPECT_EQ(run(), run());
}
