#include <doctest.h>

#include <cmath>

#include "dhformer/errors.hpp"
#include "dhformer/rng.hpp"
#include "dhformer/scattering.hpp"

using namespace dhformer;

namespace {
Tensor randt(const Shape& s, uint64_t seed, double lo, double hi) {
    Rng rng(seed);
    int64_t n = 1;
    for (int d : s) n *= d;
    std::vector<double> v(static_cast<size_t>(n));
    for (double& x : v) x = rng.uniform(lo, hi);
    return Tensor::from_vector(s, std::move(v));
}
}  // namespace

TEST_CASE("transmission follows exp(-beta d) with a floor") {
    Tensor d = Tensor::from_vector({1, 2, 2}, {0.0, 0.5, 1.0, 10.0});
    Tensor t = transmission_from_depth(d, 1.0);
    CHECK(t.values()[0] == 1.0);
    CHECK(t.values()[1] == doctest::Approx(std::exp(-0.5)).epsilon(1e-15));
    CHECK(t.values()[2] == doctest::Approx(std::exp(-1.0)).epsilon(1e-15));
    CHECK(t.values()[3] == kTransmissionFloor);  // exp(-10) clamped up
    CHECK_THROWS_AS(transmission_from_depth(Tensor::from_vector({1}, {-0.1}), 1.0), DomainError);
    CHECK_THROWS_AS(transmission_from_depth(d, -1.0), DomainError);
}

TEST_CASE("haze synthesis is a convex combination") {
    Tensor j = Tensor::full({3, 2, 2}, 0.2);
    Tensor t = Tensor::full({1, 2, 2}, 0.5);
    Tensor i = synthesize_haze(j, t, 0.8);
    // 0.2*0.5 + 0.8*0.5
    for (double v : i.values()) CHECK(v == doctest::Approx(0.5).epsilon(1e-15));
    // t = 1 leaves the image unchanged
    Tensor i2 = synthesize_haze(j, Tensor::full({1, 2, 2}, 1.0), 0.8);
    CHECK(i2.values() == j.values());

    HazeParams bad{1.5, 1.0};
    CHECK_THROWS_AS(bad.validate(), DomainError);
    HazeParams bad2{0.8, 0.0};
    CHECK_THROWS_AS(bad2.validate(), DomainError);
}

TEST_CASE("ratio image and analytic residual") {
    Tensor j = Tensor::full({3, 2, 2}, 0.2);
    Tensor t = Tensor::full({1, 2, 2}, 0.5);
    Tensor i = synthesize_haze(j, t, 0.8);
    Tensor k = ratio_image(i, t);
    for (double v : k.values()) CHECK(v == doctest::Approx(1.0).epsilon(1e-15));
    // t = 1 -> K = I
    CHECK(ratio_image(i, Tensor::full({1, 2, 2}, 1.0)).values() == i.values());

    Tensor u = residual_target(i, j, t);
    // u = A(1-t)/t = 0.8*0.5/0.5
    for (double v : u.values()) CHECK(v == doctest::Approx(0.8).epsilon(1e-14));

    CHECK_THROWS_AS(ratio_image(i, Tensor::full({1, 2, 2}, 0.01)), DomainError);
}

TEST_CASE("K - J equals A(1-t)/t per pixel") {
    Rng rng(2024);
    for (int trial = 0; trial < 20; ++trial) {
        Tensor j = randt({3, 4, 5}, 100 + trial, 0.0, 1.0);
        Tensor d = randt({1, 4, 5}, 200 + trial, 0.0, 1.0);
        const double beta = rng.uniform(0.2, 2.5);
        const double a = rng.uniform(0.5, 1.0);
        Tensor t = transmission_from_depth(d, beta);
        Tensor i = synthesize_haze(j, t, a);
        Tensor k = ratio_image(i, t);
        for (int c = 0; c < 3; ++c)
            for (int p = 0; p < 20; ++p) {
                const double tv = t.values()[p];
                const double expect = a * (1.0 - tv) / tv;
                const double got = k.values()[c * 20 + p] - j.values()[c * 20 + p];
                CHECK(std::fabs(got - expect) <= 1e-12);
            }
    }
}

TEST_CASE("recompose inverts synthesis exactly") {
    Tensor j = randt({3, 3, 3}, 9, 0.05, 0.95);
    Tensor d = randt({1, 3, 3}, 10, 0.0, 1.0);
    Tensor t = transmission_from_depth(d, 1.5);
    Tensor i = synthesize_haze(j, t, 0.9);
    Tensor k = ratio_image(i, t);
    Tensor u = residual_target(i, j, t);
    Tensor back = recompose_unclamped(k, u);
    for (size_t p = 0; p < back.values().size(); ++p)
        CHECK(std::fabs(back.values()[p] - j.values()[p]) <= 1e-12);

    // clamped form stays in [0,1]
    Tensor r0 = recompose(k, Tensor::full({3, 3, 3}, -5.0));
    for (double v : r0.values()) CHECK(v <= 1.0);
    Tensor r1 = recompose(k, Tensor::full({3, 3, 3}, 5.0));
    for (double v : r1.values()) CHECK(v >= 0.0);
}

TEST_CASE("scattering chain is differentiable") {
    Tensor d = randt({1, 3, 3}, 12, 0.1, 0.9);
    const double err = grad_check(
        [&](const Tensor& j) {
            Tensor t = transmission_from_depth(d, 1.2);
            Tensor i = synthesize_haze(j, t, 0.8);
            return mean_all(mul(i, i));
        },
        randt({3, 3, 3}, 13, 0.1, 0.9), 1e-5);
    CHECK(err <= 1e-6);
}
