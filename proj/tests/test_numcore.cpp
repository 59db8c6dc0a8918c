#include "test_util.hpp"

#include <trajflow/autodiff.hpp>
#include <trajflow/nn.hpp>
#include <trajflow/rng.hpp>
#include <trajflow/tensor.hpp>

#include <gtest/gtest.h>

#include <filesystem>

using namespace trajflow;
using trajflow::testing::finite_difference_check;
using trajflow::testing::naive_matmul;
using trajflow::testing::random_tensor;

// ---------------------------------------------------------------------------
// matmul
// ---------------------------------------------------------------------------

TEST(Matmul, IdentityLeavesMatrixUnchanged) {
    const Tensor m = Tensor::matrix(2, 2, {1, 2, 3, 4});
    const Var out = matmul(Var::constant(Tensor::identity(2)), Var::constant(m));
    EXPECT_EQ(out.value(), m);
}

TEST(Matmul, RowTimesColumn) {
    const Var out = matmul(Var::constant(Tensor::matrix(1, 2, {1, 2})), Var::constant(Tensor::matrix(2, 1, {3, 4})));
    EXPECT_EQ(out.shape(), (Shape{1, 1}));
    EXPECT_DOUBLE_EQ(out.value().item(), 11.0);
}

TEST(Matmul, MatchesTripleLoop) {
    Rng rng(7);
    const Tensor a = random_tensor({5, 7}, rng);
    const Tensor b = random_tensor({7, 3}, rng);
    const Tensor ref = naive_matmul(a, b);
    const Tensor out = matmul(Var::constant(a), Var::constant(b)).value();
    EXPECT_LT(max_abs_diff(out, ref), 1e-12);
}

TEST(Matmul, InnerDimensionMismatchThrows) {
    const Var a = Var::constant(Tensor::zeros({2, 3}));
    const Var b = Var::constant(Tensor::zeros({2, 3}));
    EXPECT_THROW(matmul(a, b), DimensionError);
    EXPECT_THROW(matmul(Var::constant(Tensor::zeros({6})), b), DimensionError);
}

TEST(ShapeSafety, NoSilentBroadcast) {
    const Var a = Var::constant(Tensor::zeros({2, 3}));
    const Var row = Var::constant(Tensor::zeros({1, 3}));
    EXPECT_THROW(add(a, row), DimensionError);
    EXPECT_THROW(sub(a, row), DimensionError);
    EXPECT_THROW(mul(a, row), DimensionError);
    EXPECT_THROW(mse(a, row), DimensionError);
    EXPECT_THROW(add_bias(a, Var::constant(Tensor::zeros({1, 2}))), DimensionError);
    EXPECT_THROW(concat_cols(a, Var::constant(Tensor::zeros({3, 1}))), DimensionError);
    const std::vector<double> w{1.0};
    EXPECT_THROW(mul_rows(a, w), DimensionError);
}

TEST(Tensor, ConstructionChecksSize) {
    EXPECT_THROW(Tensor(Shape{2, 2}, std::vector<double>{1, 2, 3}), DimensionError);
    EXPECT_THROW(Tensor::zeros({4}).reshaped({3}), DimensionError);
}

TEST(Tensor, NonFiniteResultIsAnError) {
    const Var big = Var::constant(Tensor::matrix(1, 1, {1e308}));
    EXPECT_THROW(scale(big, 10.0), NumericError);
}

// ---------------------------------------------------------------------------
// backward
// ---------------------------------------------------------------------------

TEST(Backward, SquareAtThree) {
    Var w = Var::parameter(Tensor::scalar(3.0));
    backward(mul(w, w));
    EXPECT_DOUBLE_EQ(w.grad().item(), 6.0);
}

TEST(Backward, SumOfLinearMapIsColumnSumsOfX) {
    Rng rng(3);
    Var w = Var::parameter(random_tensor({2, 4}, rng));
    const Tensor x = random_tensor({4, 3}, rng);
    backward(sum(matmul(w, Var::constant(x))));
    // d/dw_ij sum_k (w x)_ik = sum_k x_jk: every row of the gradient is the row-sum vector of x.
    for (std::size_t i = 0; i < 2; ++i) {
        for (std::size_t j = 0; j < 4; ++j) {
            const double expect = x.at(j, 0) + x.at(j, 1) + x.at(j, 2);
            EXPECT_NEAR(w.grad().at(i, j), expect, 1e-14);
        }
    }
}

TEST(Backward, NonScalarOutputIsContractError) {
    Var w = Var::parameter(Tensor::zeros({2, 2}));
    EXPECT_THROW(backward(w), ContractError);
    EXPECT_THROW(backward(scale(w, 2.0)), ContractError);
}

TEST(Backward, AccumulatesUntilZeroed) {
    Var w = Var::parameter(Tensor::scalar(3.0));
    backward(mul(w, w));
    backward(mul(w, w));
    EXPECT_DOUBLE_EQ(w.grad().item(), 12.0);
    w.zero_grad();
    backward(mul(w, w));
    EXPECT_DOUBLE_EQ(w.grad().item(), 6.0);
}

TEST(Backward, RepeatedBackwardOnSameGraphDoesNotDoubleIntermediates) {
    Var w = Var::parameter(Tensor::scalar(2.0));
    const Var h = mul(w, w);       // 4
    const Var out = mul(h, h);     // w^4, d/dw = 4 w^3 = 32
    backward(out);
    EXPECT_DOUBLE_EQ(w.grad().item(), 32.0);
    backward(out);
    EXPECT_DOUBLE_EQ(w.grad().item(), 64.0);
}

TEST(Backward, ConstantsReceiveNoGradient) {
    Var w = Var::parameter(Tensor::scalar(2.0));
    Var c = Var::constant(Tensor::scalar(5.0));
    backward(mul(w, c));
    EXPECT_DOUBLE_EQ(w.grad().item(), 5.0);
    EXPECT_TRUE(c.node().grad.empty());
}

TEST(Backward, DetachCutsGradient) {
    Var w = Var::parameter(Tensor::scalar(2.0));
    backward(add(mul(w, w), detach(mul(w, w))));
    EXPECT_DOUBLE_EQ(w.grad().item(), 4.0);
}

// ---------------------------------------------------------------------------
// gelu / mse
// ---------------------------------------------------------------------------

TEST(Gelu, ZeroIsFixedPoint) { EXPECT_EQ(gelu_scalar(0.0), 0.0); }

TEST(Gelu, LargePositiveApproachesIdentity) {
    for (double x : {8.0, 10.0, 50.0}) {
        EXPECT_NEAR(gelu_scalar(x), x, 1e-6);
    }
}

TEST(Gelu, TanhApproximationAtOne) {
    // 0.5 * (1 + tanh(sqrt(2/pi) * 1.044715)), evaluated independently.
    EXPECT_NEAR(gelu_scalar(1.0), 0.8411919906082768, 1e-15);
}

TEST(Mse, Basics) {
    const Var x = Var::constant(Tensor::matrix(1, 3, {0.5, -2, 4}));
    EXPECT_EQ(mse(x, x).value().item(), 0.0);
    EXPECT_DOUBLE_EQ(mse(Var::constant(Tensor::matrix(1, 2, {0, 0})), Var::constant(Tensor::matrix(1, 2, {1, 1})))
                         .value()
                         .item(),
                     1.0);
}

TEST(Mse, MatchesLoop) {
    Rng rng(11);
    const Tensor a = random_tensor({4, 9}, rng);
    const Tensor b = random_tensor({4, 9}, rng);
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        s += (a[i] - b[i]) * (a[i] - b[i]);
    }
    EXPECT_NEAR(mse(Var::constant(a), Var::constant(b)).value().item(), s / 36.0, 1e-12);
}

// ---------------------------------------------------------------------------
// Gradient checks against central differences
// ---------------------------------------------------------------------------

class PrimitiveGradCheck : public ::testing::TestWithParam<int> {};

TEST_P(PrimitiveGradCheck, EveryPrimitiveMatchesFiniteDifferences) {
    Rng rng(static_cast<std::uint64_t>(GetParam()));
    Var a = Var::parameter(random_tensor({3, 4}, rng));
    Var b = Var::parameter(random_tensor({3, 4}, rng));
    Var w = Var::parameter(random_tensor({4, 2}, rng));
    Var bias = Var::parameter(random_tensor({1, 4}, rng));
    Var img = Var::parameter(random_tensor({2, 12}, rng));
    const Tensor target = random_tensor({3, 4}, rng);
    const std::vector<double> row_w{0.3, -1.2, 2.0};

    const std::vector<std::pair<const char*, std::function<Var()>>> cases = {
        {"matmul", [&] { return sum(mul(matmul(a, w), matmul(b, w))); }},
        {"add", [&] { return sum(mul(add(a, b), add(a, b))); }},
        {"sub", [&] { return sum(mul(sub(a, b), a)); }},
        {"mul", [&] { return sum(mul(mul(a, b), a)); }},
        {"scale", [&] { return sum(mul(scale(a, -1.7), b)); }},
        {"add_bias", [&] { return sum(mul(add_bias(a, bias), add_bias(b, bias))); }},
        {"mul_rows", [&] { return sum(mul(mul_rows(a, row_w), b)); }},
        {"gelu", [&] { return sum(mul(gelu(scale(a, 3.0)), b)); }},
        {"concat", [&] { return sum(mul(concat_cols(a, b), concat_cols(b, a))); }},
        {"mean", [&] { return mean(mul(a, b)); }},
        {"mse", [&] { return mse(mul(a, b), Var::constant(target)); }},
        {"image_gradients", [&] {
             const Var g = image_gradients(img, 3, 4);
             return sum(mul(g, g));
         }},
    };
    for (const auto& [name, f] : cases) {
        const auto r = finite_difference_check({a, b, w, bias, img}, f);
        EXPECT_LT(r.max_rel_error, 1e-4) << name << " seed " << GetParam();
    }
}

INSTANTIATE_TEST_SUITE_P(Seeds, PrimitiveGradCheck, ::testing::Range(0, 100));

TEST(GradCheck, TwoLayerMlpOverSeeds) {
    for (int seed = 0; seed < 100; ++seed) {
        Rng rng(1000 + static_cast<std::uint64_t>(seed));
        const Linear l1(5, 8, rng);
        const Linear l2(8, 3, rng);
        const Tensor x = random_tensor({4, 5}, rng);
        const Tensor y = random_tensor({4, 3}, rng);
        auto loss = [&] { return mse(l2(gelu(l1(Var::constant(x)))), Var::constant(y)); };
        const auto r = finite_difference_check({l1.weight, l1.bias, l2.weight, l2.bias}, loss);
        ASSERT_LT(r.max_rel_error, 1e-4) << "seed " << seed;
    }
}

// ---------------------------------------------------------------------------
// RNG
// ---------------------------------------------------------------------------

TEST(Rng, ReferenceStream) {
    // xoshiro256** seeded by splitmix64(42), computed by an independent script.
    Rng rng(42);
    EXPECT_EQ(rng.next_u64(), 0x15780b2e0c2ec716ULL);
    EXPECT_EQ(rng.next_u64(), 0x6104d9866d113a7eULL);
    EXPECT_EQ(rng.next_u64(), 0xae17533239e499a1ULL);
}

TEST(Rng, SameSeedSameStream) {
    Rng a(123), b(123);
    for (int i = 0; i < 1000; ++i) {
        ASSERT_EQ(a.normal(), b.normal());
    }
}

TEST(Rng, UniformInRange) {
    Rng rng(5);
    for (int i = 0; i < 10000; ++i) {
        const double u = rng.uniform();
        ASSERT_GE(u, 0.0);
        ASSERT_LT(u, 1.0);
        ASSERT_LT(rng.below(7), 7u);
    }
}

// ---------------------------------------------------------------------------
// Optimizer / schedule
// ---------------------------------------------------------------------------

TEST(Adam, ZeroLearningRateLeavesParameters) {
    Rng rng(1);
    const Linear l(3, 2, rng);
    const Tensor before = l.weight.value();
    Adam opt({{"w", l.weight}, {"b", l.bias}});
    backward(sum(l(Var::constant(random_tensor({2, 3}, rng)))));
    opt.step(0.0);
    EXPECT_EQ(l.weight.value(), before);
}

TEST(Adam, MinimizesQuadratic) {
    Var w = Var::parameter(Tensor::matrix(1, 2, {3.0, -2.0}));
    Adam opt({{"w", w}});
    for (int i = 0; i < 2000; ++i) {
        opt.zero_grad();
        backward(sum(mul(w, w)));
        opt.step(cosine_lr(static_cast<std::size_t>(i), 2000, 0.05, 1e-5));
    }
    EXPECT_LT(l2_norm(w.value()), 1e-3);
}

TEST(CosineLr, Endpoints) {
    EXPECT_DOUBLE_EQ(cosine_lr(0, 100, 1e-3, 1e-6), 1e-3);
    EXPECT_NEAR(cosine_lr(99, 100, 1e-3, 1e-6), 1e-6, 1e-18);
    EXPECT_NEAR(cosine_lr(1, 3, 1.0, 0.0), 0.5, 1e-15);
}

// ---------------------------------------------------------------------------
// DGFT
// ---------------------------------------------------------------------------

TEST(Dgft, HeaderLayout) {
    const Tensor t(Shape{2, 1}, std::vector<double>{1.0, -0.5});
    const std::string bytes = encode_dgft(t);
    ASSERT_EQ(bytes.size(), 4u + 4 + 4 + 2 * 8 + 2 * 8);
    EXPECT_EQ(bytes.substr(0, 4), "DGFT");
    EXPECT_EQ(bytes[4], 1);  // version, little-endian
    EXPECT_EQ(bytes[8], 2);  // rank
    EXPECT_EQ(bytes[12], 2); // dim 0
    EXPECT_EQ(bytes[20], 1); // dim 1
    // 1.0 = 0x3FF0000000000000, little-endian
    EXPECT_EQ(static_cast<unsigned char>(bytes[28 + 7]), 0x3F);
    EXPECT_EQ(static_cast<unsigned char>(bytes[28 + 6]), 0xF0);
}

TEST(Dgft, RoundTripRandomShapes) {
    Rng rng(99);
    for (int i = 0; i < 50; ++i) {
        Shape shape;
        const std::size_t rank = rng.below(4);
        for (std::size_t r = 0; r < rank; ++r) {
            shape.push_back(1 + rng.below(5));
        }
        const Tensor t = random_tensor(shape, rng, -1e6, 1e6);
        ASSERT_EQ(decode_dgft(encode_dgft(t)), t);
    }
}

TEST(Dgft, RejectsMalformed) {
    EXPECT_THROW(decode_dgft("NOPE"), IoError);
    std::string bytes = encode_dgft(Tensor::zeros({2, 2}));
    EXPECT_THROW(decode_dgft(bytes.substr(0, bytes.size() - 1)), IoError);
    bytes[4] = 2;
    EXPECT_THROW(decode_dgft(bytes), IoError);
}

TEST(Dgft, FileRoundTrip) {
    const auto path = std::filesystem::temp_directory_path() / "trajflow_numcore_test.dgft";
    const Tensor t(Shape{3}, std::vector<double>{1, 2, 3});
    save_dgft(path, t);
    EXPECT_EQ(load_dgft(path), t);
    std::filesystem::remove(path);
    EXPECT_THROW(load_dgft(path), IoError);
}
