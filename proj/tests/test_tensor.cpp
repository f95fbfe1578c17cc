#include "test_support.hpp"

#include <mdnet/tensor.hpp>

#include <gtest/gtest.h>

#include <cmath>

using namespace mdnet;
using mdnet::testing::check_gradients;
using mdnet::testing::random_tensor;

namespace {

// Direct nested-loop dilated cross-correlation with zero padding.
std::vector<double> conv_loops(const Tensor<double>& in, const Tensor<double>& w, const Tensor<double>& b,
                               std::size_t d, std::size_t pad)
{
    const std::size_t cin = in.dim(0), H = in.dim(1), W = in.dim(2), cout = w.dim(0), k = w.dim(2);
    const std::size_t oh = H + 2 * pad - d * (k - 1), ow = W + 2 * pad - d * (k - 1);
    std::vector<double> out(cout * oh * ow);
    for (std::size_t co = 0; co < cout; ++co)
        for (std::size_t y = 0; y < oh; ++y)
            for (std::size_t x = 0; x < ow; ++x) {
                double acc = b[co];
                for (std::size_t ci = 0; ci < cin; ++ci)
                    for (std::size_t ky = 0; ky < k; ++ky)
                        for (std::size_t kx = 0; kx < k; ++kx) {
                            const long iy = static_cast<long>(y + ky * d) - static_cast<long>(pad);
                            const long ix = static_cast<long>(x + kx * d) - static_cast<long>(pad);
                            if (iy < 0 || ix < 0 || iy >= static_cast<long>(H) || ix >= static_cast<long>(W)) continue;
                            acc += w[((co * cin + ci) * k + ky) * k + kx] * in.at(ci, static_cast<std::size_t>(iy),
                                                                                   static_cast<std::size_t>(ix));
                        }
                out[(co * oh + y) * ow + x] = acc;
            }
    return out;
}

} // namespace

TEST(Conv2d, BoxSumOfOnes)
{
    Tensor<double> in = Tensor<double>::full({1, 3, 3}, 1.0);
    Tensor<double> w = Tensor<double>::full({1, 1, 3, 3}, 1.0);
    Tensor<double> b({1});
    auto out = conv2d_same(in, w, b, 1);
    EXPECT_DOUBLE_EQ(out.at(0, 1, 1), 9.0);
    EXPECT_DOUBLE_EQ(out.at(0, 0, 0), 4.0);
    EXPECT_DOUBLE_EQ(out.at(0, 2, 2), 4.0);
    EXPECT_DOUBLE_EQ(out.at(0, 0, 2), 4.0);
}

TEST(Conv2d, DeltaResponseIsCrossCorrelation)
{
    std::vector<double> img(25, 0.0);
    img[12] = 1.0;
    Tensor<double> in({1, 5, 5}, img);
    std::vector<double> wv(9);
    for (std::size_t i = 0; i < 9; ++i) wv[i] = static_cast<double>(i + 1);
    Tensor<double> w({1, 1, 3, 3}, wv);
    auto out = conv2d_same(in, w, Tensor<double>({1}), 2);
    EXPECT_DOUBLE_EQ(out.at(0, 2, 2), wv[4]);
    EXPECT_DOUBLE_EQ(out.at(0, 0, 0), wv[8]);
}

TEST(Conv2d, MatchesNestedLoopOracle)
{
    auto in = random_tensor({2, 8, 8}, 1, -1, 1, false);
    auto w = random_tensor({4, 2, 3, 3}, 2, -1, 1, false);
    auto b = random_tensor({4}, 3, -1, 1, false);
    for (std::size_t pad : {0u, 2u, 3u}) {
        auto out = conv2d(in, w, b, 2, pad);
        auto ref = conv_loops(in, w, b, 2, pad);
        ASSERT_EQ(out.size(), ref.size());
        for (std::size_t i = 0; i < ref.size(); ++i)
            EXPECT_LE(std::abs(out[i] - ref[i]), 1e-12 * std::max(1.0, std::abs(ref[i])));
    }
}

TEST(Conv2d, PointwiseMatchesOracle)
{
    auto in = random_tensor({5, 6, 7}, 4, -1, 1, false);
    auto w = random_tensor({3, 5, 1, 1}, 5, -1, 1, false);
    auto b = random_tensor({3}, 6, -1, 1, false);
    auto out = conv2d(in, w, b, 1, 0);
    auto ref = conv_loops(in, w, b, 1, 0);
    for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(out[i], ref[i], 1e-12);
}

TEST(Conv2d, GradientsMatchFiniteDifferences)
{
    auto in = random_tensor({2, 7, 7}, 7);
    auto w = random_tensor({3, 2, 3, 3}, 8);
    auto b = random_tensor({3}, 9);
    auto target = random_tensor({3, 7, 7}, 10, -1, 1, false);
    auto r = check_gradients([&] { return sum(mul(conv2d_same(in, w, b, 2), target)); }, {&in, &w, &b});
    EXPECT_LT(r.max_rel_error, 1e-5);

    auto wp = random_tensor({3, 2, 1, 1}, 11);
    auto rp = check_gradients([&] { return sum(square(conv2d(in, wp, b, 1, 0))); }, {&in, &wp, &b});
    EXPECT_LT(rp.max_rel_error, 1e-5);
}

TEST(Conv2d, RejectsMismatchedChannels)
{
    Tensor<double> in({2, 5, 5});
    Tensor<double> w({1, 3, 3, 3});
    EXPECT_THROW(conv2d_same(in, w, Tensor<double>({1}), 1), ContractViolation);
}

TEST(Elementwise, SquareAndRelu)
{
    Tensor<double> x({3}, {-2, 0, 3}, true);
    auto s = square(x);
    EXPECT_EQ(s.values(), (std::vector<double>{4, 0, 9}));

    Tensor<double> r({2}, {-1, 2}, true);
    auto y = relu(r);
    EXPECT_EQ(y.values(), (std::vector<double>{0, 2}));
    sum(y).backward();
    EXPECT_EQ(std::vector<double>(r.grad().begin(), r.grad().end()), (std::vector<double>{0, 1}));
}

TEST(Elementwise, SigmoidStaysInOpenInterval)
{
    Tensor<double> x({4}, {-800, -5, 5, 800});
    auto y = sigmoid(x);
    for (double v : y.values()) {
        EXPECT_GT(v, 0.0);
        EXPECT_LT(v, 1.0);
        EXPECT_TRUE(std::isfinite(v));
    }
}

TEST(Elementwise, CompositeGradient)
{
    auto a = random_tensor({3, 4}, 20);
    auto b = random_tensor({3, 4}, 21);
    auto loss = [&] {
        auto e = add(mul(sigmoid(a), square(b)), relu(sub(a, scale(b, 0.5))));
        return mean(shift(e, 0.25));
    };
    EXPECT_LT(check_gradients(loss, {&a, &b}, 1e-5).max_rel_error, 1e-6);
}

TEST(Reductions, PoolingOfDelta)
{
    std::vector<double> v(25, 0.0);
    v[12] = 1.0;
    auto mp = max_pool2d(Tensor<double>({5, 5}, v), 3);
    for (std::size_t y = 0; y < 5; ++y)
        for (std::size_t x = 0; x < 5; ++x) {
            const bool near = y >= 1 && y <= 3 && x >= 1 && x <= 3;
            EXPECT_EQ(mp[y * 5 + x], near ? 1.0 : 0.0);
        }
    auto ones = Tensor<double>::full({5, 5}, 1.0);
    EXPECT_DOUBLE_EQ(mean_pool2d(ones, 3)[0], 1.0);
}

TEST(Reductions, PoolingMatchesLoopOracle)
{
    auto a = random_tensor({9, 9}, 30, 0, 1, false);
    auto mx = max_pool2d(a, 5);
    auto mn = mean_pool2d(a, 5);
    for (long y = 0; y < 9; ++y)
        for (long x = 0; x < 9; ++x) {
            double best = -1, acc = 0;
            int n = 0;
            for (long dy = -2; dy <= 2; ++dy)
                for (long dx = -2; dx <= 2; ++dx) {
                    const long yy = y + dy, xx = x + dx;
                    if (yy < 0 || xx < 0 || yy >= 9 || xx >= 9) continue;
                    best = std::max(best, a[static_cast<std::size_t>(yy * 9 + xx)]);
                    acc += a[static_cast<std::size_t>(yy * 9 + xx)];
                    ++n;
                }
            EXPECT_EQ(mx[static_cast<std::size_t>(y * 9 + x)], best);
            EXPECT_NEAR(mn[static_cast<std::size_t>(y * 9 + x)], acc / n, 1e-15);
        }
}

TEST(Reductions, PoolingGradients)
{
    auto a = random_tensor({2, 6, 6}, 31);
    EXPECT_LT(check_gradients([&] { return sum(square(mean_pool2d(a, 3))); }, {&a}).max_rel_error, 1e-5);
    EXPECT_LT(check_gradients([&] { return sum(square(max_pool2d(a, 3))); }, {&a}).max_rel_error, 1e-5);
}

TEST(Reductions, PoolingRejectsBadWindow)
{
    Tensor<double> a({4, 4});
    EXPECT_THROW(max_pool2d(a, 4), ContractViolation);
    EXPECT_THROW(mean_pool2d(a, 9), ContractViolation);
}

TEST(Reductions, MeanAxisAndMaskedMean)
{
    auto a = random_tensor({3, 4, 5}, 32);
    EXPECT_LT(check_gradients([&] { return sum(square(mean_axis(a, 0))); }, {&a}).max_rel_error, 1e-5);
    std::vector<unsigned char> mask(20, 0);
    for (std::size_t i = 0; i < 20; i += 3) mask[i] = 1;
    EXPECT_LT(check_gradients([&] { return masked_mean(square(a), mask); }, {&a}).max_rel_error, 1e-5);
}

TEST(L2Normalize, UnitVectorAndZeroGuard)
{
    Tensor<double> v({2, 1, 1}, {3, 4});
    auto n = l2_normalize_channels(v);
    EXPECT_NEAR(n[0], 0.6, 1e-9);  // eps guard shifts the norm by ~1e-12
    EXPECT_NEAR(n[1], 0.8, 1e-9);

    Tensor<double> z({2, 1, 1}, {0, 0}, true);
    auto nz = l2_normalize_channels(z);
    EXPECT_EQ(nz[0], 0.0);
    EXPECT_EQ(nz[1], 0.0);
    sum(nz).backward();
    for (double g : z.grad()) EXPECT_TRUE(std::isfinite(g));
}

TEST(L2Normalize, GradientMatchesFiniteDifferences)
{
    auto v = random_tensor({8, 4, 4}, 40);
    auto t = random_tensor({8, 4, 4}, 41, -1, 1, false);
    EXPECT_LT(check_gradients([&] { return sum(mul(l2_normalize_channels(v), t)); }, {&v}).max_rel_error, 1e-5);
}

TEST(ChannelOps, GradientsMatchFiniteDifferences)
{
    auto v = random_tensor({3, 5, 5}, 50);
    auto m = random_tensor({5, 5}, 51);
    EXPECT_LT(check_gradients([&] { return sum(square(mul_by_map(v, m))); }, {&v, &m}).max_rel_error, 1e-5);
    auto t = random_tensor({3, 5, 5}, 52, -1, 1, false);
    EXPECT_LT(check_gradients([&] { return sum(mul(instance_normalize(v), t)); }, {&v}).max_rel_error, 1e-5);
    EXPECT_LT(check_gradients([&] { return sum(mul(channel(v, 1), m)); }, {&v}).max_rel_error, 1e-5);
}

TEST(BilinearSample, GradientAndOutsideTaps)
{
    auto v = random_tensor({2, 5, 5}, 60);
    std::vector<double> xs, ys;
    Rng rng(61);
    for (int i = 0; i < 12; ++i) {
        xs.push_back(rng.uniform(-1.5, 5.5));
        ys.push_back(rng.uniform(-1.5, 5.5));
    }
    EXPECT_LT(check_gradients([&] { return sum(square(bilinear_sample(v, xs, ys, 3, 4))); }, {&v}).max_rel_error,
              1e-5);
    std::vector<double> far_x{-10.0}, far_y{-10.0};
    auto out = bilinear_sample(v, far_x, far_y, 1, 1);
    EXPECT_EQ(out[0], 0.0);
}

TEST(Backward, ClosedForms)
{
    Tensor<double> x({2}, {1, 2}, true);
    sum(square(x)).backward();
    EXPECT_EQ(x.grad()[0], 2.0);
    EXPECT_EQ(x.grad()[1], 4.0);

    Tensor<double> y({4}, {1, 2, 3, 4}, true);
    mean(y).backward();
    for (double g : y.grad()) EXPECT_EQ(g, 0.25);
}

TEST(Backward, MultipleConsumersAccumulate)
{
    Tensor<double> x({3}, {1, -2, 3}, true);
    auto y = add(mul(x, x), scale(x, 3.0));  // x reaches the loss three times
    sum(y).backward();
    for (std::size_t i = 0; i < 3; ++i) EXPECT_DOUBLE_EQ(x.grad()[i], 2 * x[i] + 3);
}

TEST(Backward, LeafGradientsAccumulateAcrossPasses)
{
    Tensor<double> x({2}, {1, 2}, true);
    sum(x).backward();
    sum(x).backward();
    EXPECT_EQ(x.grad()[0], 2.0);
    x.zero_grad();
    EXPECT_FALSE(x.has_grad());
}

TEST(Backward, DiamondGraphVisitsSharedNodeOnce)
{
    Tensor<double> x({1}, {2}, true);
    auto s = square(x);            // shared
    auto y = add(s, scale(s, 2.0));  // 3x²
    sum(y).backward();
    EXPECT_DOUBLE_EQ(x.grad()[0], 12.0);
}

TEST(Backward, RequiresScalarTrackedLoss)
{
    Tensor<double> x({2}, {1, 2}, true);
    EXPECT_THROW(square(x).backward(), ContractViolation);
    Tensor<double> c({1}, std::vector<double>{1.0});
    EXPECT_THROW(sum(c).backward(), ContractViolation);
}

TEST(Detach, SeversOneBranchOfProduct)
{
    Tensor<double> x({3}, {1, -2, 0.5}, true);
    sum(mul(detach(x), x)).backward();
    for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(x.grad()[i], x[i]);

    Tensor<double> c({2}, {7, 8});
    EXPECT_EQ(detach(c).values(), c.values());
    EXPECT_FALSE(detach(x).requires_grad());
}

TEST(Tensor, ShapeContract)
{
    EXPECT_THROW(Tensor<double>({2, 3}, std::vector<double>(5)), ContractViolation);
    Tensor<double> a({2, 3});
    EXPECT_EQ(a.size(), numel(a.shape()));
    EXPECT_THROW(add(a, Tensor<double>({3, 2})), ContractViolation);
}
