#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "kpreg/ops.hpp"
#include "kpreg/optim.hpp"
#include "kpreg/tensor.hpp"
#include "test_support.hpp"

using namespace kpreg;
using kpreg::testing::check_gradients;
using kpreg::testing::random_tensor;

namespace {

// Direct nested-loop zero-padded convolution, N x C x D x H x W with depth 1 for 2D.
template <typename T>
BasicTensor<T> reference_conv(const BasicTensor<T> &x, const BasicTensor<T> &w, std::size_t stride, bool three_d) {
    const std::size_t n = x.dim(0), ci = x.dim(1), co = w.dim(0);
    const std::size_t id = three_d ? x.dim(2) : 1, ih = x.dim(x.ndim() - 2), iw = x.dim(x.ndim() - 1);
    const std::size_t kd = three_d ? w.dim(2) : 1, kh = w.dim(w.ndim() - 2), kw = w.dim(w.ndim() - 1);
    const std::size_t sd = three_d ? stride : 1;
    const std::size_t od = (id + sd - 1) / sd, oh = (ih + stride - 1) / stride, ow = (iw + stride - 1) / stride;
    Shape os = three_d ? Shape{n, co, od, oh, ow} : Shape{n, co, oh, ow};
    BasicTensor<T> y(os);
    for (std::size_t b = 0; b < n; ++b)
        for (std::size_t o = 0; o < co; ++o)
            for (std::size_t z = 0; z < od; ++z)
                for (std::size_t r = 0; r < oh; ++r)
                    for (std::size_t c = 0; c < ow; ++c) {
                        double acc = 0.0;
                        for (std::size_t i = 0; i < ci; ++i)
                            for (std::size_t a = 0; a < kd; ++a)
                                for (std::size_t p = 0; p < kh; ++p)
                                    for (std::size_t q = 0; q < kw; ++q) {
                                        const long zz = long(z * sd + a) - long(kd / 2);
                                        const long rr = long(r * stride + p) - long(kh / 2);
                                        const long cc = long(c * stride + q) - long(kw / 2);
                                        if (zz < 0 || rr < 0 || cc < 0 || zz >= long(id) || rr >= long(ih) ||
                                            cc >= long(iw))
                                            continue;
                                        acc += double(x[(((b * ci + i) * id + zz) * ih + rr) * iw + cc]) *
                                               double(w[(((o * ci + i) * kd + a) * kh + p) * kw + q]);
                                    }
                        y[(((b * co + o) * od + z) * oh + r) * ow + c] = static_cast<T>(acc);
                    }
    return y;
}

} // namespace

TEST(Tensor, RejectsInconsistentStorage) {
    EXPECT_THROW(Tensor({2, 3}, std::vector<float>(5)), ShapeError);
    EXPECT_THROW(Tensor({2, 0}), ShapeError);
    Tensor t({2, 3}, 1.5f);
    EXPECT_EQ(t.size(), 6u);
}

TEST(Conv, BoxSumOnConstantInput) {
    Tensor x({1, 1, 4, 4}, 1.0f);
    Tensor w({1, 1, 3, 3}, 1.0f);
    auto y = conv_forward(x, w, 1, Dimensionality::two_d);
    ASSERT_EQ(y.shape(), (Shape{1, 1, 4, 4}));
    EXPECT_FLOAT_EQ(y[1 * 4 + 1], 9.0f);
    EXPECT_FLOAT_EQ(y[0], 4.0f);
    EXPECT_FLOAT_EQ(y[15], 4.0f);
    EXPECT_FLOAT_EQ(y[1], 6.0f);
}

TEST(Conv, IdentityKernel) {
    std::mt19937_64 rng(1);
    auto x = random_tensor<float>({1, 1, 6, 5}, rng);
    Tensor w({1, 1, 3, 3}, 0.0f);
    w[4] = 1.0f;
    EXPECT_EQ(conv_forward(x, w, 1, Dimensionality::two_d), x);
}

TEST(Conv, MatchesNestedLoopOracle2D) {
    std::mt19937_64 rng(2);
    auto x = random_tensor<float>({1, 2, 5, 5}, rng);
    auto w = random_tensor<float>({3, 2, 3, 3}, rng);
    for (std::size_t stride : {1u, 2u}) {
        auto y = conv_forward(x, w, stride, Dimensionality::two_d);
        auto ref = reference_conv(x, w, stride, false);
        ASSERT_EQ(y.shape(), ref.shape());
        if (stride == 2) {
            EXPECT_EQ(y.shape(), (Shape{1, 3, 3, 3}));
        }
        for (std::size_t k = 0; k < y.size(); ++k) {
            EXPECT_NEAR(y[k], ref[k], 1e-5 * std::max(1.0f, std::abs(ref[k])));
        }
    }
}

TEST(Conv, MatchesNestedLoopOracle3D) {
    std::mt19937_64 rng(3);
    auto x = random_tensor<float>({2, 2, 5, 4, 7}, rng);
    auto w = random_tensor<float>({2, 2, 3, 3, 3}, rng);
    for (std::size_t stride : {1u, 2u}) {
        auto y = conv_forward(x, w, stride, Dimensionality::three_d);
        auto ref = reference_conv(x, w, stride, true);
        ASSERT_EQ(y.shape(), ref.shape());
        for (std::size_t k = 0; k < y.size(); ++k) {
            EXPECT_NEAR(y[k], ref[k], 1e-5 * std::max(1.0f, std::abs(ref[k])));
        }
    }
}

TEST(Conv, ShapeMismatchNamesAxis) {
    Tensor x({1, 2, 5, 5});
    Tensor w({1, 3, 3, 3});
    try {
        conv_forward(x, w, 1, Dimensionality::two_d);
        FAIL() << "expected ShapeError";
    } catch (const ShapeError &e) {
        EXPECT_NE(std::string(e.what()).find("axis 1"), std::string::npos) << e.what();
    }
    EXPECT_THROW(conv_forward(Tensor({1, 1, 4, 4}), Tensor({1, 1, 2, 2}), 1, Dimensionality::two_d), ShapeError);
    EXPECT_THROW(conv_forward(Tensor({1, 1, 4, 4}), Tensor({1, 1, 3, 3}), 3, Dimensionality::two_d),
                 std::invalid_argument);
}

TEST(InstanceNorm, ConstantChannelBecomesZero) {
    Tensor x({1, 2, 3, 3}, 4.0f);
    auto y = instance_norm_forward(x, 1e-5f);
    for (float v : y.values()) {
        EXPECT_EQ(v, 0.0f);
    }
}

TEST(InstanceNorm, TwoValueChannelClosedForm) {
    Tensor x({1, 1, 1, 2}, {-1.0f, 1.0f});
    const double eps = 1e-5;
    auto y = instance_norm_forward(x, static_cast<float>(eps));
    const double expected = 1.0 / std::sqrt(1.0 + eps);
    EXPECT_NEAR(y[0], -expected, 1e-7);
    EXPECT_NEAR(y[1], expected, 1e-7);
    EXPECT_LT(1.0 - expected, eps);
}

TEST(InstanceNorm, RandomTensorStatistics) {
    std::mt19937_64 rng(4);
    auto x = random_tensor<float>({2, 3, 6, 7}, rng, -5.0, 9.0);
    auto y = instance_norm_forward(x, 1e-5f);
    const std::size_t n = 42;
    for (std::size_t g = 0; g < 6; ++g) {
        double mean = 0.0, var = 0.0;
        for (std::size_t k = 0; k < n; ++k) {
            mean += y[g * n + k];
        }
        mean /= n;
        for (std::size_t k = 0; k < n; ++k) {
            var += (y[g * n + k] - mean) * (y[g * n + k] - mean);
        }
        var /= n;
        EXPECT_LT(std::abs(mean), 1e-5);
        EXPECT_NEAR(var, 1.0, 1e-4);
    }
}

TEST(LeakyRelu, Definition) {
    Tensor x({3}, {2.0f, -2.0f, 0.0f});
    auto y = leaky_relu_forward(x, 0.1f);
    EXPECT_FLOAT_EQ(y[0], 2.0f);
    EXPECT_FLOAT_EQ(y[1], -0.2f);
    EXPECT_FLOAT_EQ(y[2], 0.0f);
}

TEST(Backward, SumOfParamsHasUnitGradient) {
    Var<float> a(Tensor({2, 3}, 0.5f), true);
    Var<float> b(Tensor({2, 3}, -1.0f), true);
    Var<float> unused(Tensor({4}, 2.0f), true);
    auto loss = sum(add(a, b));
    auto grads = backward(loss, std::vector<Var<float>>{a, b, unused});
    for (float g : grads[0].values()) EXPECT_EQ(g, 1.0f);
    for (float g : grads[1].values()) EXPECT_EQ(g, 1.0f);
    for (float g : grads[2].values()) EXPECT_EQ(g, 0.0f);
}

TEST(Backward, RejectsMissingForwardAndNonScalar) {
    Var<float> empty;
    Var<float> p(Tensor({2}, 1.0f), true);
    EXPECT_THROW(backward(empty, std::vector<Var<float>>{p}), std::logic_error);
    EXPECT_THROW(backward(p, std::vector<Var<float>>{p}), ShapeError);
}

TEST(Backward, RepeatedCallsDoNotAccumulate) {
    Var<float> a(Tensor({3}, 2.0f), true);
    auto loss = sum(a);
    auto g1 = backward(loss, std::vector<Var<float>>{a});
    auto g2 = backward(loss, std::vector<Var<float>>{a});
    EXPECT_EQ(g1[0], g2[0]);
}

namespace {

// Every differentiable op composed into one graph, scalarised with a fixed
// random projection.
template <typename T> struct OpChain {
    std::mt19937_64 rng{11};
    Var<T> x2, w2a, w2b, x3, w3;
    BasicTensor<T> proj2, proj3;

    OpChain() {
        x2 = Var<T>(random_tensor<T>({1, 2, 8, 8}, rng), true);
        w2a = Var<T>(random_tensor<T>({3, 2, 3, 3}, rng), true);
        w2b = Var<T>(random_tensor<T>({3, 3, 1, 1}, rng), true);
        x3 = Var<T>(random_tensor<T>({1, 1, 4, 4, 4}, rng), true);
        w3 = Var<T>(random_tensor<T>({2, 1, 3, 3, 3}, rng), true);
        proj2 = random_tensor<T>({1, 6, 1, 2}, rng);
        proj3 = random_tensor<T>({1, 2, 2, 2, 1}, rng);
    }

    Var<T> loss() const {
        const T eps = T(1e-5), slope = T(0.1);
        auto h = conv(x2, w2a, 2, Dimensionality::two_d);
        h = instance_norm(h, eps);
        h = leaky_relu(h, slope);
        auto s = conv(h, w2b, 1, Dimensionality::two_d);
        auto c = concat_channels(add(h, s), h);
        auto p = avg_pool2(c, Dimensionality::two_d);
        auto l2 = dot_const(crop_spatial(p, {1, 2}, Dimensionality::two_d), proj2);

        auto g = conv(x3, w3, 2, Dimensionality::three_d);
        g = leaky_relu(instance_norm(g, eps), slope);
        auto l3 = dot_const(crop_spatial(g, {2, 2, 1}, Dimensionality::three_d), proj3);
        return add(l2, l3);
    }

    std::vector<Var<T>> params() const { return {x2, w2a, w2b, x3, w3}; }
};

} // namespace

TEST(Backward, FiniteDifferencesFloat) {
    OpChain<float> chain;
    auto r = check_gradients<float>([&] { return chain.loss(); }, chain.params(), 1e-3);
    // Float rounding in the differenced loss swamps small components, so the
    // 32-bit check uses the norm-wise relative error.
    EXPECT_LT(r.vector_rel_error, 1e-2);
}

TEST(Backward, FiniteDifferencesDouble) {
    OpChain<double> chain;
    auto r = check_gradients<double>([&] { return chain.loss(); }, chain.params(), 1e-6);
    EXPECT_LT(r.max_rel_error, 1e-5);
}

TEST(Adam, ZeroGradientLeavesParamsUnchanged) {
    std::vector<Var<float>> params{Var<float>(Tensor({3}, {1.0f, -2.0f, 3.0f}), true)};
    auto state = AdamState<float>::for_params(params);
    std::vector<Tensor> grads{Tensor({3}, 0.0f)};
    const auto before = params[0].value();
    ASSERT_TRUE(optimizer_step(params, grads, state, AdamHyper{}));
    EXPECT_EQ(params[0].value(), before);
}

TEST(Adam, ConstantGradientDescends) {
    std::vector<Var<float>> params{Var<float>(Tensor({2}, {0.0f, 0.0f}), true)};
    auto state = AdamState<float>::for_params(params);
    std::vector<Tensor> grads{Tensor({2}, {0.5f, -3.0f})};
    for (int k = 0; k < 50; ++k) {
        optimizer_step(params, grads, state, AdamHyper{});
    }
    EXPECT_LT(params[0].value()[0], 0.0f);
    EXPECT_GT(params[0].value()[1], 0.0f);
}

TEST(Adam, SingleStepMatchesHandComputation) {
    std::vector<Var<double>> params{Var<double>(BasicTensor<double>({1}, {2.0}), true)};
    auto state = AdamState<double>::for_params(params);
    AdamHyper hyper{0.01, 0.9, 0.999, 1e-8};
    const double g = 0.3;
    ASSERT_TRUE(optimizer_step(params, {BasicTensor<double>({1}, {g})}, state, hyper));
    const double m = (1.0 - 0.9) * g, v = (1.0 - 0.999) * g * g;
    const double mhat = m / (1 - 0.9), vhat = v / (1 - 0.999);
    const double expected = 2.0 - 0.01 * mhat / (std::sqrt(vhat) + 1e-8);
    EXPECT_DOUBLE_EQ(params[0].value()[0], expected);
    EXPECT_DOUBLE_EQ(state.first_moment[0][0], m);
    EXPECT_DOUBLE_EQ(state.second_moment[0][0], v);
}

TEST(Adam, NonFiniteGradientSkipsStep) {
    std::vector<Var<float>> params{Var<float>(Tensor({2}, {1.0f, 1.0f}), true)};
    auto state = AdamState<float>::for_params(params);
    std::vector<Tensor> grads{Tensor({2}, {0.1f, std::nanf("")})};
    const auto before = params[0].value();
    log::threshold() = log::Level::error;
    EXPECT_FALSE(optimizer_step(params, grads, state, AdamHyper{}));
    log::threshold() = log::Level::info;
    EXPECT_EQ(params[0].value(), before);
    EXPECT_EQ(state.skipped_steps, 1);
    EXPECT_EQ(state.step, 0);
}
