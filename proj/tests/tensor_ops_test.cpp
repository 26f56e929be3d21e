#include <gtest/gtest.h>

#include <cmath>

#include "atmskd/gradcheck.hpp"
#include "atmskd/ops.hpp"
#include "testutil.hpp"

using namespace atmskd;
using testutil::conv2d_oracle;
using testutil::max_abs_diff;
using testutil::maxpool_oracle;
using testutil::random_tensor;

TEST(Conv2d, PointwiseScalingOfOnes) {
    Tensor x = Tensor::full({1, 1, 3, 3}, 1.0);
    Tensor w = Tensor::from_data({1, 1, 1, 1}, {2.0});
    Tensor y = conv2d(x, w, nullptr, 1, 0);
    ASSERT_EQ(y.shape(), (Shape{1, 1, 3, 3}));
    for (double v : y.data()) EXPECT_DOUBLE_EQ(v, 2.0);
}

TEST(Conv2d, AveragingKernelOnRamp) {
    std::vector<double> ramp(16);
    for (int i = 0; i < 16; ++i) ramp[static_cast<std::size_t>(i)] = i;
    Tensor x = Tensor::from_data({1, 1, 4, 4}, ramp);
    Tensor w = Tensor::full({1, 1, 3, 3}, 1.0 / 9.0);
    Tensor y = conv2d(x, w, nullptr, 1, 0);
    ASSERT_EQ(y.shape(), (Shape{1, 1, 2, 2}));
    // Hand convolution over all four 3x3 windows of the ramp.
    std::vector<double> expected(4);
    for (int oh = 0; oh < 2; ++oh)
        for (int ow = 0; ow < 2; ++ow) {
            double s = 0.0;
            for (int i = 0; i < 3; ++i)
                for (int j = 0; j < 3; ++j) s += ramp[static_cast<std::size_t>((oh + i) * 4 + ow + j)];
            expected[static_cast<std::size_t>(oh * 2 + ow)] = s / 9.0;
        }
    for (int i = 0; i < 4; ++i)
        EXPECT_NEAR(y.data()[static_cast<std::size_t>(i)], expected[static_cast<std::size_t>(i)], 1e-12);
}

TEST(Conv2d, OutputSizeFormula) {
    RngStream rng(7);
    Tensor x = random_tensor({1, 3, 56, 56}, rng);
    Tensor w = random_tensor({8, 3, 3, 3}, rng);
    Tensor y = conv2d(x, w, nullptr, 2, 1);
    EXPECT_EQ(y.shape(), (Shape{1, 8, 28, 28}));
}

TEST(Conv2d, ShapeMismatchNamesBothShapes) {
    Tensor x = Tensor::zeros({1, 3, 8, 8});
    Tensor w = Tensor::zeros({4, 2, 3, 3});
    try {
        conv2d(x, w, nullptr, 1, 1);
        FAIL() << "expected DimensionError";
    } catch (const DimensionError& e) {
        EXPECT_NE(std::string(e.what()).find("(1,3,8,8)"), std::string::npos);
        EXPECT_NE(std::string(e.what()).find("(4,2,3,3)"), std::string::npos);
    }
}

TEST(Conv2d, MatchesBruteForceOracleExhaustively) {
    RngStream rng(42);
    for (int N : {1, 2})
        for (int C : {1, 3})
            for (int H : {1, 4, 9})
                for (int W : {2, 5, 9})
                    for (int k : {1, 2, 3})
                        for (int stride : {1, 2})
                            for (int pad : {0, 1}) {
                                if (k > H + 2 * pad || k > W + 2 * pad) continue;
                                const int O = 2;
                                Tensor x = random_tensor({N, C, H, W}, rng);
                                Tensor w = random_tensor({O, C, k, k}, rng);
                                Tensor b = random_tensor({O}, rng);
                                Tensor y = conv2d(x, w, b, stride, pad);
                                auto expect = conv2d_oracle(x.data(), N, C, H, W, w.data(), O, k,
                                                            stride, pad, &b.data());
                                ASSERT_LT(max_abs_diff(y.data(), expect), 1e-11)
                                    << "N=" << N << " C=" << C << " H=" << H << " W=" << W
                                    << " k=" << k << " s=" << stride << " p=" << pad;
                            }
}

TEST(MaxPool, BasicWindow) {
    Tensor x = Tensor::from_data({1, 1, 2, 2}, {1, 2, 3, 4});
    Tensor y = maxpool2d(x, 2, 2);
    ASSERT_EQ(y.shape(), (Shape{1, 1, 1, 1}));
    EXPECT_DOUBLE_EQ(y.item(), 4.0);
}

TEST(MaxPool, TieBreaksToFirstElement) {
    Tensor x = Tensor::full({1, 1, 2, 2}, 5.0, true);
    Tensor y = maxpool2d(x, 2, 2);
    EXPECT_DOUBLE_EQ(y.item(), 5.0);
    y.backward();
    EXPECT_EQ(x.grad(), (std::vector<double>{1, 0, 0, 0}));
}

TEST(MaxPool, MatchesWindowScanOracle) {
    RngStream rng(13);
    for (int H : {3, 7, 9})
        for (int k : {1, 2, 3})
            for (int stride : {1, 2, 3}) {
                if (k > H) continue;
                Tensor x = random_tensor({2, 3, H, H}, rng);
                Tensor y = maxpool2d(x, k, stride);
                auto expect = maxpool_oracle(x.data(), 2, 3, H, H, k, stride);
                ASSERT_EQ(y.data(), expect) << "H=" << H << " k=" << k << " s=" << stride;
            }
}

TEST(MaxPool, WindowLargerThanInputFails) {
    Tensor x = Tensor::zeros({1, 1, 2, 2});
    EXPECT_THROW(maxpool2d(x, 3, 1), DimensionError);
}

TEST(GlobalAvgPool, OnesAndRampAndIdentity) {
    Tensor ones = Tensor::full({1, 3, 4, 4}, 1.0);
    Tensor y = global_avg_pool(ones);
    ASSERT_EQ(y.shape(), (Shape{1, 3, 1, 1}));
    for (double v : y.data()) EXPECT_DOUBLE_EQ(v, 1.0);

    std::vector<double> ramp(16);
    for (int i = 0; i < 16; ++i) ramp[static_cast<std::size_t>(i)] = i;
    EXPECT_DOUBLE_EQ(global_avg_pool(Tensor::from_data({1, 1, 4, 4}, ramp)).item(), 7.5);

    Tensor single = Tensor::from_data({1, 2, 1, 1}, {3.0, -4.0});
    EXPECT_EQ(global_avg_pool(single).data(), single.data());
}

TEST(BatchNorm, TrainModeNormalizes) {
    RngStream rng(3);
    Tensor x = random_tensor({4, 2, 3, 3}, rng, -5.0, 5.0);
    Tensor gamma = Tensor::full({2}, 1.0);
    Tensor beta = Tensor::zeros({2});
    BatchNormState state(2);
    Tensor y = batchnorm2d(x, gamma, beta, state, Mode::train);
    for (int c = 0; c < 2; ++c) {
        double mean = 0.0;
        for (int n = 0; n < 4; ++n)
            for (int i = 0; i < 9; ++i) mean += y.data()[static_cast<std::size_t>((n * 2 + c) * 9 + i)];
        mean /= 36.0;
        EXPECT_NEAR(mean, 0.0, 1e-9);
    }
    EXPECT_TRUE(state.initialized);
}

TEST(BatchNorm, AffineForm) {
    RngStream rng(4);
    Tensor x = random_tensor({2, 1, 2, 2}, rng);
    Tensor g1 = Tensor::full({1}, 1.0), b0 = Tensor::zeros({1});
    Tensor g2 = Tensor::full({1}, 2.0), b3 = Tensor::full({1}, 3.0);
    BatchNormState s1(1), s2(1);
    Tensor norm = batchnorm2d(x, g1, b0, s1, Mode::train);
    Tensor affine = batchnorm2d(x, g2, b3, s2, Mode::train);
    for (std::size_t i = 0; i < norm.data().size(); ++i)
        EXPECT_NEAR(affine.data()[i], 2.0 * norm.data()[i] + 3.0, 1e-12);
}

TEST(BatchNorm, EvalUsesRunningStats) {
    Tensor x = Tensor::from_data({1, 1, 2, 2}, {1.0, 2.0, 3.0, 4.0});
    Tensor gamma = Tensor::from_data({1}, {1.5});
    Tensor beta = Tensor::from_data({1}, {-0.5});
    BatchNormState state(1);
    state.running_mean = {2.0};
    state.running_var = {4.0};
    state.initialized = true;
    const double eps = 1e-5;
    Tensor y = batchnorm2d(x, gamma, beta, state, Mode::eval, 0.1, eps);
    for (int i = 0; i < 4; ++i) {
        const double expect = (x.data()[static_cast<std::size_t>(i)] - 2.0) / std::sqrt(4.0 + eps) * 1.5 - 0.5;
        EXPECT_NEAR(y.data()[static_cast<std::size_t>(i)], expect, 1e-12);
    }
}

TEST(BatchNorm, EvalBeforeAnyTrainingFails) {
    Tensor x = Tensor::zeros({1, 1, 2, 2});
    Tensor gamma = Tensor::full({1}, 1.0), beta = Tensor::zeros({1});
    BatchNormState state(1);
    EXPECT_THROW(batchnorm2d(x, gamma, beta, state, Mode::eval), ConfigError);
}

TEST(Elementwise, ReluDropoutLinearBasics) {
    Tensor x = Tensor::from_data({1, 1, 1, 3}, {-1.0, 0.0, 2.0});
    EXPECT_EQ(relu(x).data(), (std::vector<double>{0, 0, 2}));

    RngStream rng(5);
    Tensor img = random_tensor({2, 3, 4, 4}, rng);
    EXPECT_EQ(dropout_spatial(img, 0.0, Mode::train, &rng).data(), img.data());
    EXPECT_EQ(dropout_spatial(img, 0.0, Mode::eval, nullptr).data(), img.data());
    EXPECT_EQ(dropout_spatial(img, 0.5, Mode::eval, nullptr).data(), img.data());
    EXPECT_THROW(dropout_spatial(img, 1.0, Mode::train, &rng), ParameterError);

    Tensor in = random_tensor({3, 4}, rng);
    std::vector<double> eye(16, 0.0);
    for (int i = 0; i < 4; ++i) eye[static_cast<std::size_t>(i * 4 + i)] = 1.0;
    Tensor w = Tensor::from_data({4, 4}, eye);
    Tensor b = Tensor::zeros({4});
    EXPECT_EQ(linear(in, w, b).data(), in.data());
}

TEST(DropoutSpatial, ZeroesWholeChannelsAndRescales) {
    RngStream rng(11);
    Tensor img = Tensor::full({4, 8, 3, 3}, 1.0);
    Tensor out = dropout_spatial(img, 0.4, Mode::train, &rng);
    int dropped = 0;
    for (int nc = 0; nc < 32; ++nc) {
        const double first = out.data()[static_cast<std::size_t>(nc * 9)];
        for (int i = 0; i < 9; ++i)
            ASSERT_DOUBLE_EQ(out.data()[static_cast<std::size_t>(nc * 9 + i)], first);
        if (first == 0.0)
            ++dropped;
        else
            ASSERT_DOUBLE_EQ(first, 1.0 / 0.6);
    }
    EXPECT_GT(dropped, 0);
    EXPECT_LT(dropped, 32);
}

TEST(Softmax, SymmetryAndScalarValues) {
    Tensor z = Tensor::from_data({1, 2}, {0.0, 0.0});
    for (double tau : {0.5, 1.0, 3.0}) {
        Tensor p = softmax_temp(z, tau);
        EXPECT_DOUBLE_EQ(p.data()[0], 0.5);
        EXPECT_DOUBLE_EQ(p.data()[1], 0.5);
    }
    Tensor z2 = Tensor::from_data({1, 2}, {2.0, 0.0});
    Tensor p = softmax_temp(z2, 1.0);
    const double e2 = std::exp(2.0);
    EXPECT_NEAR(p.data()[0], e2 / (e2 + 1.0), 1e-15);
    EXPECT_NEAR(p.data()[1], 1.0 / (e2 + 1.0), 1e-15);
    EXPECT_NEAR(p.data()[0], 0.8808, 5e-5);
}

TEST(Softmax, RowsSumToOneAndEntropyGrowsWithTau) {
    RngStream rng(17);
    Tensor z = random_tensor({8, 5}, rng, -4.0, 4.0);
    double prev_entropy = -1.0;
    for (double tau : {0.5, 1.0, 3.0, 6.0, 10.0}) {
        Tensor p = softmax_temp(z, tau);
        double entropy = 0.0;
        for (int n = 0; n < 8; ++n) {
            double s = 0.0;
            for (int c = 0; c < 5; ++c) {
                const double v = p.data()[static_cast<std::size_t>(n * 5 + c)];
                s += v;
                if (v > 0.0) entropy -= v * std::log(v);
            }
            EXPECT_NEAR(s, 1.0, 1e-12);
        }
        entropy /= 8.0;
        EXPECT_GE(entropy, prev_entropy);
        prev_entropy = entropy;
    }
    EXPECT_THROW(softmax_temp(z, 0.0), ParameterError);
    EXPECT_THROW(log_softmax_temp(z, -1.0), ParameterError);
}

TEST(Softmax, LogSoftmaxIsConsistentWithSoftmax) {
    RngStream rng(19);
    Tensor z = random_tensor({4, 6}, rng, -10.0, 10.0);
    for (double tau : {0.5, 1.0, 4.0}) {
        Tensor p = softmax_temp(z, tau);
        Tensor lp = log_softmax_temp(z, tau);
        for (std::size_t i = 0; i < p.data().size(); ++i)
            EXPECT_NEAR(std::exp(lp.data()[i]), p.data()[i], 1e-12);
    }
}

TEST(CrossEntropy, KnownValues) {
    Tensor confident = Tensor::from_data({1, 2}, {50.0, -50.0});
    Tensor onehot = Tensor::from_data({1, 2}, {1.0, 0.0});
    EXPECT_NEAR(cross_entropy(confident, onehot).item(), 0.0, 1e-12);

    Tensor uniform = Tensor::from_data({1, 2}, {0.0, 0.0});
    EXPECT_NEAR(cross_entropy(uniform, onehot).item(), std::log(2.0), 1e-12);
}

TEST(CrossEntropy, LinearInTarget) {
    RngStream rng(23);
    Tensor logits = random_tensor({4, 3}, rng, -2.0, 2.0);
    std::vector<double> ya(12, 0.0), yb(12, 0.0), mixed(12, 0.0);
    for (int n = 0; n < 4; ++n) {
        const int a = static_cast<int>(rng.uniform_int(0, 2));
        const int b = static_cast<int>(rng.uniform_int(0, 2));
        ya[static_cast<std::size_t>(n * 3 + a)] = 1.0;
        yb[static_cast<std::size_t>(n * 3 + b)] = 1.0;
    }
    const double lam = 0.3;
    for (std::size_t i = 0; i < 12; ++i) mixed[i] = lam * ya[i] + (1.0 - lam) * yb[i];
    const double lhs = cross_entropy(logits, Tensor::from_data({4, 3}, mixed)).item();
    const double rhs = lam * cross_entropy(logits, Tensor::from_data({4, 3}, ya)).item() +
                       (1.0 - lam) * cross_entropy(logits, Tensor::from_data({4, 3}, yb)).item();
    EXPECT_NEAR(lhs, rhs, 1e-12);
}

TEST(CrossEntropy, RejectsBadTargetRows) {
    Tensor logits = Tensor::zeros({1, 2});
    Tensor bad = Tensor::from_data({1, 2}, {0.7, 0.4});
    EXPECT_THROW(cross_entropy(logits, bad), ValidationError);
    EXPECT_THROW(cross_entropy(logits, Tensor::from_data({1, 2}, {1.0, 0.0}), 1.0), ParameterError);
}

TEST(KlDiv, KnownValuesAndNonNegativity) {
    Tensor p = Tensor::from_data({1, 2}, {0.3, 0.7});
    Tensor lp = Tensor::from_data({1, 2}, {std::log(0.3), std::log(0.7)});
    EXPECT_NEAR(kl_div(lp, p).item(), 0.0, 1e-12);

    Tensor half = Tensor::from_data({1, 2}, {std::log(0.5), std::log(0.5)});
    Tensor point = Tensor::from_data({1, 2}, {1.0, 0.0});
    EXPECT_NEAR(kl_div(half, point).item(), std::log(2.0), 1e-12);

    RngStream rng(29);
    for (int rep = 0; rep < 50; ++rep) {
        Tensor zs = random_tensor({3, 4}, rng, -3.0, 3.0);
        Tensor zt = random_tensor({3, 4}, rng, -3.0, 3.0);
        Tensor ls = log_softmax_temp(zs, 1.0);
        Tensor pt = softmax_temp(zt, 1.0);
        const double v = kl_div(ls, pt).item();
        EXPECT_GE(v, 0.0);
        // Direct elementwise summation oracle.
        double oracle = 0.0;
        for (int n = 0; n < 3; ++n)
            for (int c = 0; c < 4; ++c) {
                const double pv = pt.data()[static_cast<std::size_t>(n * 4 + c)];
                oracle += pv * (std::log(pv) - ls.data()[static_cast<std::size_t>(n * 4 + c)]);
            }
        EXPECT_NEAR(v, oracle / 3.0, 1e-10);
    }
}

TEST(Backward, SumOfSquares) {
    Tensor x = Tensor::from_data({3}, {1.0, 2.0, 3.0}, true);
    Tensor loss = sum_squares(x);
    EXPECT_DOUBLE_EQ(loss.item(), 14.0);
    loss.backward();
    EXPECT_EQ(x.grad(), (std::vector<double>{2, 4, 6}));
}

TEST(Backward, ConstantFunctionHasZeroGradient) {
    Tensor x = Tensor::from_data({2}, {1.0, -1.0}, true);
    Tensor c = scale(x, 0.0);
    Tensor loss = sum_squares(c);
    loss.backward();
    EXPECT_EQ(x.grad(), (std::vector<double>{0, 0}));
}

TEST(Backward, NonScalarLossRejected) {
    Tensor x = Tensor::from_data({2}, {1.0, 2.0}, true);
    Tensor y = scale(x, 2.0);
    EXPECT_THROW(y.backward(), UsageError);
}

TEST(Backward, GraphLeavesAllReceiveGradients) {
    RngStream rng(31);
    Tensor x = random_tensor({2, 3, 6, 6}, rng);
    Tensor w1 = random_tensor({4, 3, 3, 3}, rng, -0.5, 0.5, true);
    Tensor b1 = random_tensor({4}, rng, -0.1, 0.1, true);
    Tensor wl = random_tensor({4, 2}, rng, -0.5, 0.5, true);
    Tensor bl = random_tensor({2}, rng, -0.1, 0.1, true);
    Tensor target = Tensor::from_data({2, 2}, {1.0, 0.0, 0.0, 1.0});

    Tensor h = relu(conv2d(x, w1, b1, 1, 1));
    Tensor pooled = reshape(global_avg_pool(h), {2, 4});
    Tensor loss = cross_entropy(linear(pooled, wl, bl), target);
    loss.backward();
    for (const Tensor& p : {w1, b1, wl, bl}) {
        ASSERT_TRUE(p.has_grad());
        double norm = 0.0;
        for (double g : p.grad()) norm += g * g;
        EXPECT_GT(norm, 0.0);
    }
}

TEST(NumericGuard, NonFiniteOutputNamesTheOp) {
    Tensor x = Tensor::from_data({1}, {1e308});
    try {
        scale(x, 10.0);
        FAIL() << "expected NumericError";
    } catch (const NumericError& e) {
        EXPECT_NE(std::string(e.what()).find("scale"), std::string::npos);
    }
}

// Per-op finite-difference checks at the spec tolerance.
TEST(GradCheck, Conv2dBatchNormPoolLinearSoftmaxLosses) {
    RngStream rng(37);
    Tensor x = random_tensor({2, 3, 5, 5}, rng);
    Tensor w = random_tensor({4, 3, 3, 3}, rng, -0.5, 0.5);
    Tensor b = random_tensor({4}, rng, -0.2, 0.2);
    Tensor target = Tensor::from_data({2, 2}, {1.0, 0.0, 0.5, 0.5});

    auto through_loss = [&](const Tensor& logits) { return cross_entropy(logits, target); };

    // conv weight
    EXPECT_LT(finite_diff_check(
                  [&](const Tensor& wp) {
                      Tensor h = relu(conv2d(x, wp, b, 2, 1));
                      Tensor flat = reshape(global_avg_pool(h), {2, 4});
                      Tensor wl = Tensor::from_data({4, 2}, {0.3, -0.2, 0.1, 0.4, -0.5, 0.2, 0.7, -0.1});
                      return through_loss(linear(flat, wl, Tensor::zeros({2})));
                  },
                  w, 1e-5),
              1e-4);

    // conv input
    EXPECT_LT(finite_diff_check(
                  [&](const Tensor& xp) {
                      Tensor h = maxpool2d(relu(conv2d(xp, w, b, 1, 1)), 2, 2);
                      Tensor flat = reshape(global_avg_pool(h), {2, 4});
                      Tensor wl = Tensor::from_data({4, 2}, {0.3, -0.2, 0.1, 0.4, -0.5, 0.2, 0.7, -0.1});
                      return through_loss(linear(flat, wl, Tensor::zeros({2})));
                  },
                  x, 1e-5),
              1e-4);

    // batchnorm gamma/beta/input in train mode
    Tensor gamma = random_tensor({3}, rng, 0.5, 1.5);
    Tensor beta = random_tensor({3}, rng, -0.5, 0.5);
    auto bn_loss = [&](const Tensor& xin, const Tensor& g, const Tensor& bt) {
        BatchNormState st(3);
        Tensor h = batchnorm2d(xin, g, bt, st, Mode::train);
        Tensor flat = reshape(global_avg_pool(h), {2, 3});
        Tensor wl = Tensor::from_data({3, 2}, {0.3, -0.2, 0.1, 0.4, -0.5, 0.2});
        return through_loss(linear(flat, wl, Tensor::zeros({2})));
    };
    EXPECT_LT(finite_diff_check([&](const Tensor& g) { return bn_loss(x, g, beta); }, gamma, 1e-5), 1e-4);
    EXPECT_LT(finite_diff_check([&](const Tensor& bt) { return bn_loss(x, gamma, bt); }, beta, 1e-5), 1e-4);
    EXPECT_LT(finite_diff_check([&](const Tensor& xin) { return bn_loss(xin, gamma, beta); }, x, 1e-5), 1e-4);

    // softmax/log-softmax/kl chains
    Tensor zs = random_tensor({3, 4}, rng, -2.0, 2.0);
    Tensor zt = random_tensor({3, 4}, rng, -2.0, 2.0);
    EXPECT_LT(finite_diff_check(
                  [&](const Tensor& z) { return kl_div(log_softmax_temp(z, 3.0), softmax_temp(zt, 3.0)); },
                  zs, 1e-5),
              1e-4);
    EXPECT_LT(finite_diff_check(
                  [&](const Tensor& z) { return sum_squares(softmax_temp(z, 2.0)); }, zs, 1e-5),
              1e-4);

    // linear weight/bias
    Tensor li = random_tensor({3, 4}, rng);
    Tensor lw = random_tensor({4, 2}, rng);
    Tensor lb = random_tensor({2}, rng);
    Tensor lt = Tensor::from_data({3, 2}, {1, 0, 0, 1, 1, 0});
    EXPECT_LT(finite_diff_check(
                  [&](const Tensor& wp) { return cross_entropy(linear(li, wp, lb), lt, 0.1); }, lw, 1e-5),
              1e-4);
    EXPECT_LT(finite_diff_check(
                  [&](const Tensor& bp) { return cross_entropy(linear(li, lw, bp), lt, 0.1); }, lb, 1e-5),
              1e-4);
}

TEST(GradCheck, SampledCoordinatesAgreeWithExhaustive) {
    RngStream rng(41);
    Tensor x = random_tensor({6, 6}, rng);
    auto f = [](const Tensor& t) { return sum_squares(t); };
    const double full = finite_diff_check(f, x, 1e-5);
    const double sampled = finite_diff_check(f, x, 1e-5, 10, 1);
    EXPECT_LE(sampled, full + 1e-12);
    EXPECT_LT(full, 1e-8);
}
