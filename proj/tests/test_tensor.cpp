#include <doctest.h>

#include <cmath>

#include "dhformer/errors.hpp"
#include "dhformer/rng.hpp"
#include "dhformer/tensor.hpp"

using namespace dhformer;

namespace {
Tensor randt(const Shape& s, uint64_t seed, double lo = -1, double hi = 1) {
    Rng rng(seed);
    int64_t n = 1;
    for (int d : s) n *= d;
    std::vector<double> v(static_cast<size_t>(n));
    for (double& x : v) x = rng.uniform(lo, hi);
    return Tensor::from_vector(s, std::move(v));
}
}  // namespace

TEST_CASE("tensor construction and accessors") {
    Tensor t = Tensor::from_vector({2, 3}, {1, 2, 3, 4, 5, 6});
    CHECK(t.ndim() == 2);
    CHECK(t.numel() == 6);
    CHECK(t.at({1, 2}) == 6);
    CHECK(Tensor::scalar(4.5).item() == 4.5);
    CHECK_THROWS_AS(Tensor::from_vector({2, 2}, {1, 2, 3}), DimensionError);
    CHECK_THROWS_AS((void)Tensor::from_vector({2, 2}, {1, 2, 3, 4}).item(), ContractError);
    CHECK_THROWS_AS(Tensor::zeros({}), DimensionError);
    CHECK_THROWS_AS(Tensor::zeros({2, 0}), DimensionError);
    CHECK_THROWS_AS(Tensor::zeros({1, 1, 1, 1, 1}), DimensionError);
}

TEST_CASE("broadcast elementwise matches manual computation") {
    Tensor a = Tensor::from_vector({2, 3}, {1, 2, 3, 4, 5, 6});
    Tensor b = Tensor::from_vector({3}, {10, 20, 30});
    Tensor s = add(a, b);
    CHECK(s.values() == std::vector<double>{11, 22, 33, 14, 25, 36});
    Tensor m = mul(a, b);
    CHECK(m.values() == std::vector<double>{10, 40, 90, 40, 100, 180});
    Tensor one = Tensor::from_vector({1}, {2});
    CHECK(div(a, one).values() == std::vector<double>{0.5, 1, 1.5, 2, 2.5, 3});
    // b may broadcast against a, the reverse orientation is rejected
    CHECK_THROWS_AS(add(b, a), DimensionError);
    CHECK_THROWS_AS(add(a, Tensor::from_vector({2}, {1, 2})), DimensionError);
}

TEST_CASE("mul by ones and add of zeros are identities") {
    Tensor x = randt({2, 3, 4}, 7);
    Tensor ones = Tensor::full({2, 3, 4}, 1.0);
    CHECK(mul(x, ones).values() == x.values());
    CHECK(add(x, Tensor::zeros({4})).values() == x.values());
}

TEST_CASE("matmul known values and identity") {
    Tensor a = Tensor::from_vector({2, 2}, {1, 2, 3, 4});
    Tensor b = Tensor::from_vector({2, 2}, {5, 6, 7, 8});
    CHECK(matmul(a, b).values() == std::vector<double>{19, 22, 43, 50});
    Tensor eye = Tensor::from_vector({2, 2}, {1, 0, 0, 1});
    Tensor m = randt({2, 2}, 3);
    CHECK(matmul(eye, m).values() == m.values());
    CHECK_THROWS_AS(matmul(Tensor::zeros({2, 3}), Tensor::zeros({4, 2})), DimensionError);

    // batched form agrees with per-slice 2-D calls
    Tensor ba = randt({3, 2, 4}, 11);
    Tensor bb = randt({3, 4, 2}, 12);
    Tensor out = matmul(ba, bb);
    for (int i = 0; i < 3; ++i) {
        std::vector<double> sa(ba.values().begin() + i * 8, ba.values().begin() + (i + 1) * 8);
        std::vector<double> sb(bb.values().begin() + i * 8, bb.values().begin() + (i + 1) * 8);
        Tensor ref = matmul(Tensor::from_vector({2, 4}, sa), Tensor::from_vector({4, 2}, sb));
        for (int j = 0; j < 4; ++j)
            CHECK(out.values()[i * 4 + j] == doctest::Approx(ref.values()[j]).epsilon(1e-14));
    }
}

TEST_CASE("conv2d matches a hand-computed example") {
    // 1x1x3x3 input, single 1x3 horizontal-difference kernel, stride 1, no padding
    Tensor x = Tensor::from_vector({1, 1, 3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9});
    Tensor w = Tensor::from_vector({1, 1, 1, 3}, {1, 0, -1});
    Tensor b = Tensor::from_vector({1}, {0.5});
    Tensor y = conv2d(x, w, b, 1, 0);
    CHECK(y.shape() == Shape{1, 1, 3, 1});
    // each output row: x[r,0] - x[r,2] + 0.5 = -2 + 0.5
    for (double v : y.values()) CHECK(v == doctest::Approx(-1.5));

    // 3x3 sobel-like kernel collapses the same input to one value
    Tensor ws = Tensor::from_vector({1, 1, 3, 3}, {1, 0, -1, 2, 0, -2, 1, 0, -1});
    Tensor ys = conv2d(x, ws, b, 1, 0);
    CHECK(ys.shape() == Shape{1, 1, 1, 1});
    CHECK(ys.values()[0] == doctest::Approx(-7.5));

    // even kernel extents are rejected
    CHECK_THROWS_AS(
        conv2d(x, Tensor::zeros({1, 1, 2, 2}), Tensor::zeros({1}), 1, 0), DimensionError);

    // identity 1x1 kernel
    Tensor xr = randt({2, 3, 4, 4}, 5);
    Tensor id = Tensor::zeros({3, 3, 1, 1});
    for (int c = 0; c < 3; ++c) id.raw()[c * 3 + c] = 1.0;
    CHECK(conv2d(xr, id, Tensor::zeros({3}), 1, 0).values() == xr.values());

    // zero padding contributes zeros, not edge replication
    Tensor xp = Tensor::from_vector({1, 1, 1, 1}, {3.0});
    Tensor wp = Tensor::full({1, 1, 3, 3}, 1.0);
    Tensor yp = conv2d(xp, wp, Tensor::zeros({1}), 1, 1);
    CHECK(yp.values()[0] == 3.0);
    CHECK_THROWS_AS(
        conv2d(Tensor::zeros({1, 2, 4, 4}), Tensor::zeros({1, 3, 3, 3}), Tensor::zeros({1}), 1, 1),
        DimensionError);
}

TEST_CASE("pointwise nonlinearities") {
    Tensor x = Tensor::from_vector({5}, {-2, -0.5, 0, 0.5, 2});
    CHECK(relu(x).values() == std::vector<double>{0, 0, 0, 0.5, 2});
    Tensor s = sigmoid(x);
    for (int i = 0; i < 5; ++i)
        CHECK(s.values()[i] == doctest::Approx(1.0 / (1.0 + std::exp(-x.values()[i]))).epsilon(1e-15));
    Tensor e = dhformer::exp(x);
    for (int i = 0; i < 5; ++i)
        CHECK(e.values()[i] == doctest::Approx(std::exp(x.values()[i])).epsilon(1e-15));
    CHECK(clamp(x, -1, 1).values() == std::vector<double>{-1, -0.5, 0, 0.5, 1});
    Tensor b = Tensor::from_vector({5}, {0, 0, 0, 0, 0});
    CHECK(maximum(x, b).values() == std::vector<double>{0, 0, 0, 0.5, 2});
}

TEST_CASE("batchnorm2d standardizes per channel and tracks running stats") {
    Tensor x = randt({4, 2, 3, 3}, 21, -2, 3);
    Tensor gamma = Tensor::from_vector({2}, {1.5, 0.5});
    Tensor beta = Tensor::from_vector({2}, {0.2, -0.1});
    Tensor rm = Tensor::zeros({2});
    Tensor rv = Tensor::full({2}, 1.0);
    Tensor y = batchnorm2d(x, gamma, beta, rm, rv, true, 0.1, 1e-5);

    for (int c = 0; c < 2; ++c) {
        double mean = 0, var = 0;
        const int n = 4 * 9;
        for (int b = 0; b < 4; ++b)
            for (int p = 0; p < 9; ++p) mean += x.values()[(b * 2 + c) * 9 + p];
        mean /= n;
        for (int b = 0; b < 4; ++b)
            for (int p = 0; p < 9; ++p) {
                const double d = x.values()[(b * 2 + c) * 9 + p] - mean;
                var += d * d;
            }
        var /= n;
        // output mean per channel collapses to beta, stddev to |gamma|
        double om = 0;
        for (int b = 0; b < 4; ++b)
            for (int p = 0; p < 9; ++p) om += y.values()[(b * 2 + c) * 9 + p];
        om /= n;
        CHECK(om == doctest::Approx(beta.values()[c]).epsilon(1e-10));
        // running stats: (1-momentum)*old + momentum*batch (biased variance)
        CHECK(rm.values()[c] == doctest::Approx(0.1 * mean).epsilon(1e-12));
        CHECK(rv.values()[c] == doctest::Approx(0.9 * 1.0 + 0.1 * var).epsilon(1e-12));
    }

    // eval mode uses the running stats, not batch stats
    Tensor y2 = batchnorm2d(x, gamma, beta, rm, rv, false, 0.1, 1e-5);
    const double expect0 = (x.values()[0] - rm.values()[0]) /
                               std::sqrt(rv.values()[0] + 1e-5) * 1.5 +
                           0.2;
    CHECK(y2.values()[0] == doctest::Approx(expect0).epsilon(1e-12));
}

TEST_CASE("layernorm normalizes the last dim") {
    Tensor x = randt({2, 3, 4}, 31);
    Tensor g = Tensor::full({4}, 1.0);
    Tensor b = Tensor::zeros({4});
    Tensor y = layernorm(x, g, b, 1e-6);
    for (int r = 0; r < 6; ++r) {
        double mean = 0;
        for (int d = 0; d < 4; ++d) mean += y.values()[r * 4 + d];
        CHECK(mean / 4 == doctest::Approx(0.0).epsilon(1e-12));
    }
}

TEST_CASE("softmax rows sum to one and order is preserved") {
    Tensor x = randt({3, 5}, 41, -3, 3);
    Tensor y = softmax(x, 1);
    for (int r = 0; r < 3; ++r) {
        double s = 0;
        for (int c = 0; c < 5; ++c) s += y.values()[r * 5 + c];
        CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
    }
    // monotone: larger logits get larger probabilities
    CHECK((x.values()[0] < x.values()[1]) == (y.values()[0] < y.values()[1]));
    // shift invariance
    Tensor y2 = softmax(add_scalar(x, 100.0), 1);
    for (size_t i = 0; i < y.values().size(); ++i)
        CHECK(y.values()[i] == doctest::Approx(y2.values()[i]).epsilon(1e-9));
}

TEST_CASE("pooling known examples") {
    Tensor x = Tensor::from_vector({1, 1, 4, 4},
                                   {1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14, 15, 16});
    Tensor mx = pool2d(x, PoolKind::max, 2, 2, 0);
    CHECK(mx.values() == std::vector<double>{6, 8, 14, 16});
    Tensor av = pool2d(x, PoolKind::avg, 2, 2, 0);
    CHECK(av.values() == std::vector<double>{3.5, 5.5, 11.5, 13.5});
    // avg over constant stays constant even with padding (mean over valid taps)
    Tensor c = Tensor::full({1, 1, 5, 5}, 2.5);
    Tensor ac = pool2d(c, PoolKind::avg, 3, 1, 1);
    for (double v : ac.values()) CHECK(v == 2.5);
    // 7x7 stride-1 pad-3 preserves spatial size
    Tensor big = randt({1, 2, 9, 9}, 5);
    CHECK(pool2d(big, PoolKind::max, 7, 1, 3).shape() == Shape{1, 2, 9, 9});
}

TEST_CASE("shape ops round trip") {
    Tensor x = randt({2, 3, 4}, 51);
    CHECK(reshape(reshape(x, {4, 6}), {2, 3, 4}).values() == x.values());
    CHECK_THROWS_AS(reshape(x, {5, 5}), DimensionError);
    Tensor tr = transpose(x, {2, 0, 1});
    CHECK(tr.shape() == Shape{4, 2, 3});
    CHECK(transpose(tr, {1, 2, 0}).values() == x.values());
    CHECK(tr.at({1, 0, 2}) == x.at({0, 2, 1}));

    Tensor n = narrow(x, 1, 1, 2);
    CHECK(n.shape() == Shape{2, 2, 4});
    CHECK(n.at({1, 0, 3}) == x.at({1, 1, 3}));

    Tensor a = randt({2, 2, 3}, 52), b = randt({2, 1, 3}, 53);
    Tensor cat = concat({a, b}, 1);
    CHECK(cat.shape() == Shape{2, 3, 3});
    CHECK(cat.at({1, 2, 0}) == b.at({1, 0, 0}));
    CHECK_THROWS_AS(concat({a, randt({2, 1, 4}, 54)}, 1), DimensionError);

    Tensor img = randt({2, 6, 4, 4}, 55);
    Tensor sl = slice_channels(img, 2, 3);
    CHECK(sl.shape() == Shape{2, 3, 4, 4});
    CHECK(sl.at({1, 0, 2, 2}) == img.at({1, 2, 2, 2}));
}

TEST_CASE("bilinear upsample maps corners to corners") {
    Tensor x = Tensor::from_vector({1, 1, 2, 2}, {0, 1, 2, 3});
    Tensor y = upsample_bilinear(x, 5, 5);
    CHECK(y.at({0, 0, 0, 0}) == 0);
    CHECK(y.at({0, 0, 0, 4}) == 1);
    CHECK(y.at({0, 0, 4, 0}) == 2);
    CHECK(y.at({0, 0, 4, 4}) == 3);
    CHECK(y.at({0, 0, 2, 2}) == doctest::Approx(1.5));
    // upsampling a constant stays constant
    Tensor c = Tensor::full({1, 2, 3, 3}, 0.7);
    Tensor cu = upsample_bilinear(c, 8, 8);
    for (double v : cu.values()) CHECK(v == doctest::Approx(0.7));

    Tensor nn = upsample_nearest(x, 3);
    CHECK(nn.shape() == Shape{1, 1, 6, 6});
    CHECK(nn.at({0, 0, 2, 2}) == 0);
    CHECK(nn.at({0, 0, 3, 3}) == 3);
}

TEST_CASE("reductions keep the reduced dim") {
    Tensor x = Tensor::from_vector({2, 3}, {1, 2, 3, 4, 5, 6});
    CHECK(sum_all(x).item() == 21);
    CHECK(mean_all(x).item() == doctest::Approx(3.5));
    Tensor rs = reduce_sum(x, 1);
    CHECK(rs.shape() == Shape{2, 1});
    CHECK(rs.values() == std::vector<double>{6, 15});
    Tensor rm = reduce_mean(x, 0);
    CHECK(rm.shape() == Shape{1, 3});
    CHECK(rm.values() == std::vector<double>{2.5, 3.5, 4.5});
    Tensor rx = reduce_max(x, 1);
    CHECK(rx.values() == std::vector<double>{3, 6});
}

TEST_CASE("backward accumulates through shared subexpressions") {
    Tensor x = Tensor::from_vector({3}, {1, 2, 3}, true);
    Tensor y = sum_all(add(x, x));
    backward(y);
    CHECK(x.grad() == std::vector<double>{2, 2, 2});

    Tensor z = Tensor::from_vector({2}, {3, 4}, true);
    backward(sum_all(mul(z, z)));
    CHECK(z.grad() == std::vector<double>{6, 8});
}

TEST_CASE("backward contract violations throw") {
    Tensor x = Tensor::from_vector({2, 2}, {1, 2, 3, 4}, true);
    CHECK_THROWS_AS(backward(add_scalar(x, 1.0)), ContractError);
    CHECK_THROWS_AS(backward(sum_all(Tensor::zeros({2, 2}))), ContractError);
    CHECK_THROWS_AS((void)x.grad(), ContractError);
}

TEST_CASE("NoGradGuard suppresses graph construction") {
    Tensor x = Tensor::from_vector({2}, {1, 2}, true);
    NoGradGuard off;
    Tensor y = mul(x, x);
    CHECK_FALSE(y.requires_grad());
}

TEST_CASE("grad_check validates a composite expression") {
    Rng rng(77);
    std::vector<double> v(12);
    for (double& d : v) d = rng.uniform(-1, 1);
    Tensor x = Tensor::from_vector({3, 4}, v);
    const double err = grad_check(
        [](const Tensor& t) { return mean_all(mul(sigmoid(t), add_scalar(t, 0.3))); }, x, 1e-5);
    CHECK(err <= 1e-6);
}

TEST_CASE("detached tensors share no graph") {
    Tensor x = Tensor::from_vector({2}, {1, 2}, true);
    Tensor y = mul(x, x);
    Tensor d = y.detached();
    CHECK_FALSE(d.requires_grad());
    CHECK(d.values() == y.values());
}
