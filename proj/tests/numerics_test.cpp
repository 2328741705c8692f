#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "partcat/gradcheck.hpp"
#include "partcat/kernels.hpp"
#include "partcat/ops.hpp"
#include "partcat/reference.hpp"
#include "test_util.hpp"

using namespace partcat;
using partcat::testing::random_array;

namespace {

// Independent oracles.

Array<double> naive_matmul(const Array<double>& a, const Array<double>& b) {
    Array<double> c(Shape{a.dim(0), b.dim(1)});
    for (std::size_t i = 0; i < a.dim(0); ++i)
        for (std::size_t j = 0; j < b.dim(1); ++j) {
            double s = 0;
            for (std::size_t p = 0; p < a.dim(1); ++p) s += a.at(i, p) * b.at(p, j);
            c.at(i, j) = s;
        }
    return c;
}

// x [H×W×ci], k [k×k×ci×co]; window sum accumulated in (dy, dx, ci) order.
Array<double> sliding_window_conv(const Array<double>& x, const Array<double>& k) {
    const long h = x.dim(0), w = x.dim(1), ci = x.dim(2), ks = k.dim(0), co = k.dim(3);
    const long r = ks / 2;
    Array<double> out(Shape{x.dim(0), x.dim(1), k.dim(3)});
    for (long y = 0; y < h; ++y)
        for (long xx = 0; xx < w; ++xx)
            for (long o = 0; o < co; ++o) {
                double s = 0;
                for (long dy = 0; dy < ks; ++dy)
                    for (long dx = 0; dx < ks; ++dx) {
                        const long sy = y + dy - r, sx = xx + dx - r;
                        if (sy < 0 || sy >= h || sx < 0 || sx >= w) continue;
                        for (long c = 0; c < ci; ++c)
                            s += x[(sy * w + sx) * ci + c] * k[((dy * ks + dx) * ci + c) * co + o];
                    }
                out[(y * w + xx) * co + o] = s;
            }
    return out;
}

Var weighted_sum(Tape<double>& t, Var y, Rng& rng) {
    auto w = random_array(t.shape(y), rng);
    return ops::sum(t, ops::mul(t, y, t.constant(w)));
}

}  // namespace

TEST(Matmul, IdentityCase) {
    Tape<double> t;
    auto eye = t.constant(Array<double>(Shape{2, 2}, {1, 0, 0, 1}));
    auto m = t.constant(Array<double>(Shape{2, 2}, {1, 2, 3, 4}));
    EXPECT_EQ(t.value(ops::matmul(t, eye, m)).vec(), (std::vector<double>{1, 2, 3, 4}));
}

TEST(Matmul, OrthogonalPick) {
    Tape<double> t;
    auto a = t.constant(Array<double>(Shape{1, 2}, {1, 0}));
    auto b = t.constant(Array<double>(Shape{2, 1}, {0, 5}));
    EXPECT_EQ(t.value(ops::matmul(t, a, b)).vec(), (std::vector<double>{0}));
}

TEST(Matmul, RandomMatchesTripleLoop) {
    Rng rng(11);
    Tape<double> t;
    auto a = random_array(Shape{3, 4}, rng);
    auto b = random_array(Shape{4, 2}, rng);
    auto c = t.value(ops::matmul(t, t.constant(a), t.constant(b)));
    EXPECT_EQ(c, naive_matmul(a, b));
}

TEST(Matmul, ShapeMismatchThrows) {
    Tape<double> t;
    auto a = t.constant(Array<double>(Shape{2, 3}));
    auto b = t.constant(Array<double>(Shape{2, 3}));
    EXPECT_THROW(ops::matmul(t, a, b), ShapeError);
}

TEST(Matmul, KernelVariantsMatchOracleBitForBit) {
    Rng rng(5);
    for (int trial = 0; trial < 30; ++trial) {
        const std::size_t m = 1 + rng.below(8), k = 1 + rng.below(8), n = 1 + rng.below(8);
        auto a = random_array(Shape{m, k}, rng);
        auto b = random_array(Shape{k, n}, rng);
        const auto expect = naive_matmul(a, b);

        Array<double> c(Shape{m, n});
        kernels::matmul_nn<double>(a.span(), b.span(), c.span(), m, k, n);
        EXPECT_EQ(c, expect);

        Array<double> bt(Shape{n, k});
        for (std::size_t i = 0; i < k; ++i)
            for (std::size_t j = 0; j < n; ++j) bt.at(j, i) = b.at(i, j);
        kernels::matmul_nt<double>(a.span(), bt.span(), c.span(), m, k, n);
        EXPECT_EQ(c, expect);

        Array<double> at(Shape{k, m});
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < k; ++j) at.at(j, i) = a.at(i, j);
        kernels::matmul_tn<double>(at.span(), b.span(), c.span(), m, k, n);
        EXPECT_EQ(c, expect);

        reference::matmul<double>(a.span(), b.span(), c.span(), m, k, n);
        EXPECT_EQ(c, expect);
    }
}

TEST(Softmax, UniformLogits) {
    Tape<double> t;
    auto y = t.value(ops::softmax(t, t.constant(Array<double>(Shape{3})), 0));
    for (double v : y.vec()) EXPECT_DOUBLE_EQ(v, 1.0 / 3.0);
}

TEST(Softmax, ShiftInvariant) {
    Rng rng(3);
    auto x = random_array(Shape{4, 5}, rng);
    auto shifted = x;
    for (auto& v : shifted.vec()) v += 123.25;
    Tape<double> t;
    auto a = t.value(ops::softmax(t, t.constant(x), 1));
    auto b = t.value(ops::softmax(t, t.constant(shifted), 1));
    EXPECT_LE(max_abs_diff(a, b), 1e-12);
}

TEST(Softmax, MatchesExtendedPrecisionFormula) {
    Tape<double> t;
    auto y = t.value(ops::softmax(t, t.constant(Array<double>(Shape{3}, {1, 2, 3})), 0));
    long double z = std::exp(1.0L) + std::exp(2.0L) + std::exp(3.0L);
    EXPECT_NEAR(y[0], static_cast<double>(std::exp(1.0L) / z), 1e-12);
    EXPECT_NEAR(y[1], static_cast<double>(std::exp(2.0L) / z), 1e-12);
    EXPECT_NEAR(y[2], static_cast<double>(std::exp(3.0L) / z), 1e-12);
}

TEST(Softmax, SlicesSumToOneAlongAnyAxis) {
    Rng rng(17);
    for (int trial = 0; trial < 50; ++trial) {
        auto x = random_array(Shape{2 + rng.below(3), 2 + rng.below(3), 2 + rng.below(3)}, rng, -30, 30);
        const std::size_t axis = rng.below(3);
        Tape<double> t;
        auto y = t.value(ops::softmax(t, t.constant(x), axis));
        const auto& s = x.shape();
        for (std::size_t i = 0; i < s[0]; ++i)
            for (std::size_t j = 0; j < s[1]; ++j)
                for (std::size_t k = 0; k < s[2]; ++k) {
                    std::size_t idx[3] = {i, j, k};
                    if (idx[axis] != 0) continue;
                    double total = 0;
                    for (std::size_t m = 0; m < s[axis]; ++m) {
                        idx[axis] = m;
                        const double v = y.at(idx[0], idx[1], idx[2]);
                        EXPECT_GT(v, 0.0);
                        total += v;
                    }
                    EXPECT_NEAR(total, 1.0, 1e-9);
                }
    }
}

TEST(Softmax, InvalidAxisThrows) {
    Tape<double> t;
    EXPECT_THROW(ops::softmax(t, t.constant(Array<double>(Shape{2, 2})), 2), ShapeError);
}

TEST(Attention, SingleKeyReturnsValueRow) {
    Rng rng(8);
    Tape<double> t;
    auto q = t.constant(random_array(Shape{3, 4}, rng));
    auto k = t.constant(random_array(Shape{1, 4}, rng));
    auto v = t.constant(random_array(Shape{1, 6}, rng));
    auto out = t.value(ops::attention(t, q, k, v, 2));
    for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t j = 0; j < 6; ++j) EXPECT_NEAR(out.at(i, j), t.value(v)[j], 1e-12);
}

TEST(Attention, JointKeyValuePermutationInvariant) {
    Rng rng(9);
    auto q = random_array(Shape{4, 4}, rng);
    auto k = random_array(Shape{5, 4}, rng);
    auto v = random_array(Shape{5, 2}, rng);
    std::vector<std::size_t> perm{3, 0, 4, 1, 2};
    Array<double> kp(k.shape()), vp(v.shape());
    for (std::size_t j = 0; j < 5; ++j) {
        for (std::size_t c = 0; c < 4; ++c) kp.at(j, c) = k.at(perm[j], c);
        for (std::size_t c = 0; c < 2; ++c) vp.at(j, c) = v.at(perm[j], c);
    }
    Tape<double> t;
    auto a = t.value(ops::attention(t, t.constant(q), t.constant(k), t.constant(v), 2));
    auto b = t.value(ops::attention(t, t.constant(q), t.constant(kp), t.constant(vp), 2));
    EXPECT_LE(max_abs_diff(a, b), 1e-14);
}

TEST(Attention, TwoByTwoMatchesHandExpansion) {
    // One head, d=2: out_i = sum_j softmax_j(q_i.k_j / sqrt 2) v_j.
    Array<double> q(Shape{2, 2}, {0.3, -0.7, 1.1, 0.2});
    Array<double> k(Shape{2, 2}, {0.5, 0.4, -0.9, 0.6});
    Array<double> v(Shape{2, 2}, {1.0, 2.0, -3.0, 0.5});
    Tape<double> t;
    auto out = t.value(ops::attention(t, t.constant(q), t.constant(k), t.constant(v), 1));
    const double s = std::sqrt(2.0);
    for (int i = 0; i < 2; ++i) {
        const double l0 = (q.at(i, 0) * k.at(0, 0) + q.at(i, 1) * k.at(0, 1)) / s;
        const double l1 = (q.at(i, 0) * k.at(1, 0) + q.at(i, 1) * k.at(1, 1)) / s;
        const double p0 = std::exp(l0) / (std::exp(l0) + std::exp(l1));
        const double p1 = 1.0 - p0;
        EXPECT_NEAR(out.at(i, 0), p0 * v.at(0, 0) + p1 * v.at(1, 0), 1e-12);
        EXPECT_NEAR(out.at(i, 1), p0 * v.at(0, 1) + p1 * v.at(1, 1), 1e-12);
    }
}

TEST(Attention, HeadsMustDivideWidth) {
    Tape<double> t;
    auto x = t.constant(Array<double>(Shape{2, 6}));
    EXPECT_THROW(ops::attention(t, x, x, x, 4), ShapeError);
}

TEST(Attention, KernelMatchesReferenceWithBias) {
    Rng rng(21);
    for (int trial = 0; trial < 20; ++trial) {
        kernels::AttentionDims d{1 + rng.below(3), 1 + rng.below(8), 1 + rng.below(8), 0, 0, 1 + rng.below(2)};
        d.d_k = d.heads * (1 + rng.below(3));
        d.d_v = d.heads * (1 + rng.below(3));
        auto q = random_array(Shape{d.batch, d.len_q, d.d_k}, rng);
        auto k = random_array(Shape{d.batch, d.len_k, d.d_k}, rng);
        auto v = random_array(Shape{d.batch, d.len_k, d.d_v}, rng);
        auto bias = random_array(Shape{d.heads, d.len_q, d.len_k}, rng);
        Array<double> out(Shape{d.batch, d.len_q, d.d_v}), ref(out.shape());
        std::vector<double> probs(d.batch * d.heads * d.len_q * d.len_k);
        kernels::attention_forward<double>(q.span(), k.span(), v.span(), bias.span(), probs, out.span(), d);
        reference::attention<double>(q.span(), k.span(), v.span(), bias.span(), ref.span(), d);
        EXPECT_LE(max_abs_diff(out, ref), 1e-12);
    }
}

TEST(Conv2d, OneByOneIsPerPixelLinearMap) {
    Rng rng(4);
    auto x = random_array(Shape{3, 3, 2}, rng);
    auto k = random_array(Shape{1, 1, 2, 4}, rng);
    Tape<double> t;
    auto out = t.value(ops::conv2d(t, t.constant(x), t.constant(k)));
    auto expect = naive_matmul(x.reshaped({9, 2}), k.reshaped({2, 4}));
    EXPECT_EQ(out.reshaped({9, 4}), expect);
}

TEST(Conv2d, ZeroKernelGivesZero) {
    Rng rng(4);
    Tape<double> t;
    auto out = t.value(ops::conv2d(t, t.constant(random_array(Shape{4, 4, 2}, rng)),
                                   t.constant(Array<double>(Shape{3, 3, 2, 3}))));
    for (double v : out.vec()) EXPECT_EQ(v, 0.0);
}

TEST(Conv2d, ThreeByThreeMatchesSlidingWindow) {
    Rng rng(6);
    auto x = random_array(Shape{4, 4, 2}, rng);
    auto k = random_array(Shape{3, 3, 2, 3}, rng);
    Tape<double> t;
    EXPECT_EQ(t.value(ops::conv2d(t, t.constant(x), t.constant(k))), sliding_window_conv(x, k));
}

TEST(Conv2d, EvenKernelThrows) {
    Tape<double> t;
    EXPECT_THROW(ops::conv2d(t, t.constant(Array<double>(Shape{4, 4, 1})),
                             t.constant(Array<double>(Shape{2, 2, 1, 1}))),
                 ShapeError);
}

TEST(Conv2d, KernelAndReferenceBitExactUpToEightByEight) {
    Rng rng(12);
    for (int trial = 0; trial < 20; ++trial) {
        const std::size_t h = 1 + rng.below(8), w = 1 + rng.below(8);
        const std::size_t ks = 2 * rng.below(3) + 1;
        auto x = random_array(Shape{h, w, 1 + rng.below(3)}, rng);
        auto k = random_array(Shape{ks, ks, x.dim(2), 1 + rng.below(3)}, rng);
        const auto expect = sliding_window_conv(x, k);
        kernels::ConvDims d{1, h, w, x.dim(2), k.dim(3), ks};
        Array<double> out(expect.shape());
        kernels::conv2d_forward<double>(x.span(), k.span(), {}, out.span(), d);
        EXPECT_EQ(out, expect);
        reference::conv2d<double>(x.span(), k.span(), {}, out.span(), d);
        EXPECT_EQ(out, expect);
    }
}

TEST(GradCheck, SumHasAllOnesGradient) {
    // Dyadic inputs and a power-of-two step keep every difference exact.
    Array<double> x(Shape{5}, {0.5, -0.25, 1.0, 0.125, 2.0});
    auto rep = grad_check([](Tape<double>& t, std::span<const Var> in) { return ops::sum(t, in[0]); },
                          {x}, 0x1p-17);
    EXPECT_EQ(rep.max_rel_error, 0.0);
}

TEST(GradCheck, SumOfSquares) {
    Rng rng(2);
    auto rep = grad_check(
        [](Tape<double>& t, std::span<const Var> in) { return ops::sum(t, ops::mul(t, in[0], in[0])); },
        {random_array(Shape{6}, rng)}, 1e-5);
    EXPECT_LE(rep.max_rel_error, 1e-8);
}

TEST(GradCheck, NonFiniteInputRaises) {
    Array<double> x(Shape{2}, {1.0, std::nan("")});
    EXPECT_THROW(grad_check([](Tape<double>& t, std::span<const Var> in) { return ops::sum(t, in[0]); }, {x}),
                 NonFiniteError);
}

// Every differentiable primitive against central differences on small random inputs.
class PrimitiveGradients : public ::testing::TestWithParam<int> {};

TEST_P(PrimitiveGradients, WithinTolerance) {
    const int seed = GetParam();
    using Fn = std::function<Var(Tape<double>&, std::span<const Var>)>;
    struct Case {
        const char* name;
        std::vector<Shape> shapes;
        Fn fn;
        double lo = -1.0;
    };
    const std::vector<Case> cases = {
        {"add", {{2, 3}, {2, 3}}, [](auto& t, auto in) { return ops::add(t, in[0], in[1]); }},
        {"sub", {{2, 3}, {2, 3}}, [](auto& t, auto in) { return ops::sub(t, in[0], in[1]); }},
        {"mul", {{2, 3}, {2, 3}}, [](auto& t, auto in) { return ops::mul(t, in[0], in[1]); }},
        {"add_broadcast", {{2, 3}, {3}}, [](auto& t, auto in) { return ops::add_broadcast(t, in[0], in[1]); }},
        {"mul_broadcast", {{2, 3}, {3}}, [](auto& t, auto in) { return ops::mul_broadcast(t, in[0], in[1]); }},
        {"scale", {{5}}, [](auto& t, auto in) { return ops::scale(t, in[0], 0.7); }},
        {"add_scalar", {{5}}, [](auto& t, auto in) { return ops::add_scalar(t, in[0], 0.7); }},
        {"matmul", {{2, 3}, {3, 2}}, [](auto& t, auto in) { return ops::matmul(t, in[0], in[1]); }},
        {"matmul_bt", {{2, 3}, {2, 3}}, [](auto& t, auto in) { return ops::matmul_bt(t, in[0], in[1]); }},
        {"linear", {{2, 2, 2}, {2, 2}, {2}}, [](auto& t, auto in) { return ops::linear(t, in[0], in[1], in[2]); }},
        {"softmax0", {{3, 2}}, [](auto& t, auto in) { return ops::softmax(t, in[0], 0); }},
        {"softmax1", {{2, 4}}, [](auto& t, auto in) { return ops::softmax(t, in[0], 1); }},
        {"sigmoid", {{6}}, [](auto& t, auto in) { return ops::sigmoid(t, in[0]); }},
        {"gelu", {{6}}, [](auto& t, auto in) { return ops::gelu(t, in[0]); }},
        {"log_clamped", {{6}}, [](auto& t, auto in) { return ops::log_clamped(t, in[0], 1e-12); }, 0.2},
        {"layer_norm", {{2, 4}, {4}, {4}}, [](auto& t, auto in) { return ops::layer_norm(t, in[0], in[1], in[2]); }},
        {"attention", {{3, 2}, {2, 2}, {2, 2}},
         [](auto& t, auto in) { return ops::attention(t, in[0], in[1], in[2], 2); }},
        {"attention_bias", {{1, 2, 2}, {1, 2, 2}, {1, 2, 2}, {1, 2, 2}},
         [](auto& t, auto in) { return ops::attention(t, in[0], in[1], in[2], 1, in[3]); }},
        {"conv2d", {{2, 2, 2}, {3, 3, 2, 1}, {1}}, [](auto& t, auto in) { return ops::conv2d(t, in[0], in[1], in[2]); }},
        {"transpose01", {{2, 3, 1}}, [](auto& t, auto in) { return ops::transpose01(t, in[0]); }},
        {"reshape", {{2, 3}}, [](auto& t, auto in) { return ops::reshape(t, in[0], {3, 2}); }},
        {"concat_last", {{2, 1}, {2, 2}}, [](auto& t, auto in) { return ops::concat_last(t, in[0], in[1]); }},
        {"gather_axis1", {{2, 3, 1}}, [](auto& t, auto in) { return ops::gather_axis1(t, in[0], {2, 0, 2}); }},
        {"gather_flat", {{4}}, [](auto& t, auto in) { return ops::gather_flat(t, in[0], {1, 1, 3, 0}, {2, 2}); }},
        {"l2_normalize_last", {{2, 3}}, [](auto& t, auto in) { return ops::l2_normalize_last(t, in[0]); }},
        {"l1_normalize_last", {{2, 3}}, [](auto& t, auto in) { return ops::l1_normalize_last(t, in[0]); }, 0.2},
        {"sum_last", {{2, 3}}, [](auto& t, auto in) { return ops::sum_last(t, in[0]); }},
        {"mean", {{7}}, [](auto& t, auto in) { return ops::mean(t, in[0]); }},
        {"upsample_nearest", {{1, 1, 2, 2}}, [](auto& t, auto in) { return ops::upsample_nearest(t, in[0], 2); }},
    };
    for (const auto& c : cases) {
        Rng rng(mix_seed(static_cast<std::uint64_t>(seed), std::hash<std::string>{}(c.name)));
        std::vector<Array<double>> inputs;
        for (const auto& s : c.shapes) inputs.push_back(random_array(s, rng, c.lo, 1.0));
        auto rep = grad_check(
            [&](Tape<double>& t, std::span<const Var> in) {
                Rng w(static_cast<std::uint64_t>(seed) + 99);
                return weighted_sum(t, c.fn(t, in), w);
            },
            inputs);
        EXPECT_LE(rep.max_rel_error, 1e-6) << c.name << " input " << rep.worst_input << " element "
                                           << rep.worst_element << " analytic " << rep.analytic
                                           << " numeric " << rep.numeric;
    }
}

INSTANTIATE_TEST_SUITE_P(Seeds, PrimitiveGradients, ::testing::Values(1, 2, 3));

TEST(Tape, BackwardRequiresScalarRoot) {
    Tape<double> t;
    auto x = t.leaf(Array<double>(Shape{2}));
    EXPECT_THROW(t.backward(x), ShapeError);
}

TEST(Tape, ConstantsReceiveNoGradient) {
    Tape<double> t;
    auto x = t.leaf(Array<double>(Shape{2}, {1, 2}));
    auto c = t.constant(Array<double>(Shape{2}, {3, 4}));
    t.backward(ops::sum(t, ops::mul(t, x, c)));
    EXPECT_EQ(t.grad_or_zero(x).vec(), (std::vector<double>{3, 4}));
    EXPECT_FALSE(t.has_grad(c));
}
