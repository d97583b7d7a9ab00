#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "dhformer/attention.hpp"
#include "dhformer/backbone.hpp"
#include "dhformer/errors.hpp"

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

int64_t count_with_prefix(const ModelParams& mp, const std::string& prefix) {
    int64_t n = 0;
    for (const auto& [name, t] : mp.params)
        if (name.rfind(prefix, 0) == 0) n += t.numel();
    return n;
}
}  // namespace

TEST_CASE("parameter census is frozen") {
    ArchConfig cfg;
    cfg.validate();
    ModelParams mp;
    Rng rng(1);
    init_backbone_params(mp, cfg, rng);
    // transmission head: 3->16 conv3x3 (448) + 1x1 maxout->1 (5)
    CHECK(count_with_prefix(mp, "trans.") == 453);
    // residual trunk: 3->16, 11x 16->16, 16->3 convs + 12 batchnorms
    CHECK(count_with_prefix(mp, "res.") == 26787);
    CHECK(mp.param_count() == 453 + 26787);
}

TEST_CASE("arch config validation") {
    ArchConfig cfg;
    cfg.input_size = 7;
    CHECK_THROWS_AS(cfg.validate(), ContractError);
    cfg.input_size = 6;
    CHECK_THROWS_AS(cfg.validate(), ContractError);  // even but < 8
    cfg = ArchConfig{};
    cfg.t_min = 0.0;
    CHECK_THROWS_AS(cfg.validate(), ContractError);
    cfg = ArchConfig{};
    cfg.t_min = 1.5;
    CHECK_THROWS_AS(cfg.validate(), ContractError);
}

TEST_CASE("transmission net output is bounded and upsampled to input size") {
    ArchConfig cfg;
    ModelParams mp;
    Rng rng(3);
    init_backbone_params(mp, cfg, rng);
    Tensor hazy = randt({2, 3, 16, 16}, 5, 0.0, 1.0);
    TransDiag diag;
    Tensor t = transmission_net_forward(mp, hazy, cfg, &diag);
    CHECK(t.shape() == Shape{2, 1, 16, 16});
    for (double v : t.values()) {
        CHECK(v >= cfg.t_min);
        CHECK(v <= 1.0);
    }
    CHECK(diag.preclamp_min <= diag.preclamp_max);
    // zeroing the output weights exposes the +1 bias: the head then predicts
    // full transmission exactly, surviving the clamp and the constant upsample
    for (double& v : mp.param("trans.out.w").raw()) v = 0.0;
    Tensor t1 = transmission_net_forward(mp, hazy, cfg, nullptr);
    for (double v : t1.values()) CHECK(v == 1.0);
}

TEST_CASE("maxout grouping matches a manual loop") {
    ArchConfig cfg;
    Tensor x = randt({1, 16, 6, 6}, 7, -2, 2);
    // library path: slice 4 groups of 4 channels, elementwise max
    Tensor m = slice_channels(x, 0, 4);
    for (int g = 1; g < 4; ++g) m = maximum(m, slice_channels(x, 4 * g, 4));
    for (int c = 0; c < 4; ++c)
        for (int p = 0; p < 36; ++p) {
            double expect = -1e300;
            for (int g = 0; g < 4; ++g)
                expect = std::max(expect, x.values()[(4 * g + c) * 36 + p]);
            CHECK(m.values()[c * 36 + p] == expect);
        }
}

TEST_CASE("residual trunk keeps shape and stays signed") {
    ArchConfig cfg;
    ModelParams mp;
    Rng rng(9);
    init_backbone_params(mp, cfg, rng);
    Tensor k = randt({2, 3, 16, 16}, 11, 0.0, 2.0);
    Tensor r = residual_net_forward(mp, k, cfg, true);
    CHECK(r.shape() == Shape{2, 3, 16, 16});
    const auto mn = *std::min_element(r.values().begin(), r.values().end());
    CHECK(mn < 0.0);  // no trailing relu on the final block
}

TEST_CASE("loss matches the closed-form example") {
    // pred - (ratio - clear) = 2 everywhere on [2,3,8,8]:
    // sum of squares 1536, times 0.5/batch -> 384
    Tensor pred = Tensor::full({2, 3, 8, 8}, 3.0);
    Tensor ratio = Tensor::full({2, 3, 8, 8}, 1.5);
    Tensor clear = Tensor::full({2, 3, 8, 8}, 0.5);
    CHECK(loss_residual(pred, ratio, clear).item() == 384.0);
    // zero residual against equal ratio/clear images is a perfect fit
    CHECK(loss_residual(Tensor::zeros({1, 3, 8, 8}), clear = Tensor::full({1, 3, 8, 8}, 0.5),
                        Tensor::full({1, 3, 8, 8}, 0.5))
              .item() == 0.0);
    CHECK_THROWS_AS(
        loss_residual(Tensor::zeros({1, 3, 8, 8}), Tensor::zeros({1, 3, 8, 8}),
                      Tensor::zeros({1, 3, 4, 4})),
        DimensionError);
}

TEST_CASE("backbone forward produces a consistent ratio image") {
    ArchConfig cfg;
    ModelParams mp;
    Rng rng(13);
    init_backbone_params(mp, cfg, rng);
    Tensor hazy = randt({1, 3, 16, 16}, 15, 0.1, 1.0);
    BackboneOut out = backbone_forward(mp, hazy, cfg, false);
    CHECK(out.transmission.shape() == Shape{1, 1, 16, 16});
    CHECK(out.ratio.shape() == Shape{1, 3, 16, 16});
    CHECK(out.residual.shape() == Shape{1, 3, 16, 16});
    for (int c = 0; c < 3; ++c)
        for (int p = 0; p < 256; ++p) {
            const double expect = hazy.values()[c * 256 + p] / out.transmission.values()[p];
            CHECK(out.ratio.values()[c * 256 + p] == doctest::Approx(expect).epsilon(1e-12));
        }
}

TEST_CASE("loss gradient reaches both subnetworks") {
    ArchConfig cfg;
    ModelParams mp;
    Rng rng(17);
    init_backbone_params(mp, cfg, rng);
    // shrink the output weights and center the bias so the pre-clamp
    // transmission has interior points; a fully saturated clamp would zero
    // every gradient into the transmission head
    for (double& v : mp.param("trans.out.w").raw()) v *= 0.02;
    mp.param("trans.out.b").raw()[0] = 0.5;
    Tensor hazy = randt({1, 3, 16, 16}, 19, 0.1, 1.0);
    Tensor clear = randt({1, 3, 16, 16}, 20, 0.0, 1.0);
    BackboneOut out = backbone_forward(mp, hazy, cfg, true);
    Tensor loss = loss_residual(out.residual, out.ratio, clear);
    for (auto& [name, p] : mp.params) {
        (void)name;
        p.zero_grad();
    }
    backward(loss);
    auto grad_norm = [&](const std::string& name) {
        double s = 0;
        for (double g : mp.param(name).grad()) s += g * g;
        return std::sqrt(s);
    };
    CHECK(grad_norm("trans.conv1.w") > 0.0);
    CHECK(grad_norm("res.b01.w") > 0.0);
    CHECK(grad_norm("res.b13.w") > 0.0);
}

TEST_CASE("initialization is deterministic in the seed") {
    ArchConfig cfg;
    ModelParams a, b, c;
    Rng r1(23), r2(23), r3(24);
    init_backbone_params(a, cfg, r1);
    init_backbone_params(b, cfg, r2);
    init_backbone_params(c, cfg, r3);
    CHECK(a.param("res.b01.w").values() == b.param("res.b01.w").values());
    CHECK(a.param("res.b01.w").values() != c.param("res.b01.w").values());
    // transmission output bias starts at +1
    CHECK(a.param("trans.out.b").values() == std::vector<double>{1.0});
}
