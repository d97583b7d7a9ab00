#include "dhformer/selfcheck.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "dhformer/attention.hpp"
#include "dhformer/checkpoint.hpp"
#include "dhformer/errors.hpp"
#include "dhformer/metrics.hpp"
#include "dhformer/rng.hpp"
#include "dhformer/trainer.hpp"

namespace dhformer {
namespace {

constexpr double kGradTol = 1e-4;

Tensor rand_tensor(const Shape& shape, Rng& rng, double lo, double hi) {
    int64_t n = 1;
    for (int d : shape) n *= d;
    std::vector<double> v(static_cast<size_t>(n));
    for (double& x : v) x = rng.uniform(lo, hi);
    return Tensor::from_vector(shape, std::move(v));
}

// Strictly increasing values in scan order; keeps max/argmax routing away
// from ties so the subgradient equals the finite difference.
Tensor ramp_tensor(const Shape& shape, double step) {
    int64_t n = 1;
    for (int d : shape) n *= d;
    std::vector<double> v(static_cast<size_t>(n));
    for (size_t i = 0; i < v.size(); ++i) v[i] = -0.7 + step * static_cast<double>(i);
    return Tensor::from_vector(shape, std::move(v));
}

struct CheckAccum {
    bool ok = true;
    std::string detail;

    void expect(const std::string& name, double err, double tol) {
        if (err <= tol) return;
        ok = false;
        char buf[160];
        std::snprintf(buf, sizeof(buf), "%s err %.3g > %.3g; ", name.c_str(), err, tol);
        detail += buf;
    }
    void expect_true(const std::string& name, bool cond) {
        if (cond) return;
        ok = false;
        detail += name + " failed; ";
    }
};

SuiteResult gradients_core() {
    SuiteResult r{"gradients.core", false, 0, ""};
    CheckAccum acc;
    Rng rng(41);
    const double eps = 1e-5;

    // Elementwise, with b broadcasting against a over the last axis.
    {
        Tensor b = rand_tensor({3}, rng, 0.5, 1.5);
        for (auto [kind, name] :
             {std::pair{EwKind::add, "add"}, {EwKind::sub, "sub"}, {EwKind::mul, "mul"},
              {EwKind::div, "div"}}) {
            auto fa = [&, kind = kind](const Tensor& x) {
                return sum_all(elementwise(x, b, kind));
            };
            acc.expect(std::string(name) + ".a",
                       grad_check(fa, rand_tensor({2, 3}, rng, 0.5, 1.5), eps), kGradTol);
            Tensor a = rand_tensor({2, 3}, rng, 0.5, 1.5);
            auto fb = [&, kind = kind](const Tensor& x) {
                return sum_all(elementwise(a, x, kind));
            };
            acc.expect(std::string(name) + ".b", grad_check(fb, rand_tensor({3}, rng, 0.5, 1.5), eps),
                       kGradTol);
        }
    }
    acc.expect("add_scalar",
               grad_check([](const Tensor& x) { return sum_all(add_scalar(x, 0.3)); },
                          rand_tensor({2, 2}, rng, -1, 1), eps),
               kGradTol);
    acc.expect("mul_scalar",
               grad_check([](const Tensor& x) { return sum_all(mul_scalar(x, -1.7)); },
                          rand_tensor({2, 2}, rng, -1, 1), eps),
               kGradTol);

    // matmul, plain and batched.
    {
        Tensor b2 = rand_tensor({3, 2}, rng, -1, 1);
        acc.expect("matmul.a",
                   grad_check([&](const Tensor& x) { return sum_all(matmul(x, b2)); },
                              rand_tensor({2, 3}, rng, -1, 1), eps),
                   kGradTol);
        Tensor a2 = rand_tensor({2, 3}, rng, -1, 1);
        acc.expect("matmul.b",
                   grad_check([&](const Tensor& x) { return sum_all(matmul(a2, x)); },
                              rand_tensor({3, 2}, rng, -1, 1), eps),
                   kGradTol);
        Tensor b3 = rand_tensor({2, 3, 2}, rng, -1, 1);
        acc.expect("matmul.batched",
                   grad_check([&](const Tensor& x) { return sum_all(matmul(x, b3)); },
                              rand_tensor({2, 2, 3}, rng, -1, 1), eps),
                   kGradTol);
    }

    // conv2d with stride and padding, all three inputs.
    {
        Tensor w = rand_tensor({3, 2, 3, 3}, rng, -0.5, 0.5);
        Tensor bias = rand_tensor({3}, rng, -0.5, 0.5);
        Tensor x0 = rand_tensor({2, 2, 5, 5}, rng, -1, 1);
        acc.expect("conv2d.x",
                   grad_check(
                       [&](const Tensor& x) { return sum_all(conv2d(x, w, bias, 2, 1)); },
                       rand_tensor({2, 2, 5, 5}, rng, -1, 1), eps),
                   kGradTol);
        acc.expect("conv2d.w",
                   grad_check(
                       [&](const Tensor& v) { return sum_all(conv2d(x0, v, bias, 2, 1)); },
                       rand_tensor({3, 2, 3, 3}, rng, -0.5, 0.5), eps),
                   kGradTol);
        acc.expect("conv2d.bias",
                   grad_check([&](const Tensor& v) { return sum_all(conv2d(x0, w, v, 2, 1)); },
                              rand_tensor({3}, rng, -0.5, 0.5), eps),
                   kGradTol);
    }

    // Pointwise nonlinearities; inputs stay clear of their kinks.
    auto sq_sum = [](const Tensor& y) { return sum_all(mul(y, y)); };
    acc.expect("relu",
               grad_check([&](const Tensor& x) { return sq_sum(relu(x)); },
                          ramp_tensor({2, 5}, 0.17), eps),
               kGradTol);
    acc.expect("sigmoid",
               grad_check([&](const Tensor& x) { return sq_sum(sigmoid(x)); },
                          rand_tensor({2, 5}, rng, -2, 2), eps),
               kGradTol);
    acc.expect("exp",
               grad_check([&](const Tensor& x) { return sq_sum(dhformer::exp(x)); },
                          rand_tensor({2, 5}, rng, -1, 1), eps),
               kGradTol);
    acc.expect("clamp",
               grad_check([&](const Tensor& x) { return sq_sum(clamp(x, -0.5, 0.5)); },
                          ramp_tensor({3, 4}, 0.13), eps),
               kGradTol);
    {
        // offset keeps the two ramps from tying at any element while still
        // letting each branch win somewhere
        Tensor b = add_scalar(ramp_tensor({3, 4}, -0.11), 0.043);
        acc.expect("maximum",
                   grad_check([&](const Tensor& x) { return sq_sum(maximum(x, b)); },
                              ramp_tensor({3, 4}, 0.19), eps),
                   kGradTol);
    }

    // Normalizations; fresh running buffers per call, training mode so the
    // output ignores them.
    {
        Tensor gamma = rand_tensor({2}, rng, 0.5, 1.5);
        Tensor beta = rand_tensor({2}, rng, -0.5, 0.5);
        auto bn = [&](const Tensor& x, const Tensor& g, const Tensor& b) {
            return batchnorm2d(x, g, b, Tensor::zeros({2}), Tensor::full({2}, 1.0), true, 0.1,
                               1e-5);
        };
        acc.expect("batchnorm.x",
                   grad_check([&](const Tensor& x) { return sq_sum(bn(x, gamma, beta)); },
                              rand_tensor({2, 2, 3, 3}, rng, -1, 1), eps),
                   kGradTol);
        Tensor x0 = rand_tensor({2, 2, 3, 3}, rng, -1, 1);
        acc.expect("batchnorm.gamma",
                   grad_check([&](const Tensor& g) { return sq_sum(bn(x0, g, beta)); },
                              rand_tensor({2}, rng, 0.5, 1.5), eps),
                   kGradTol);
        acc.expect("batchnorm.beta",
                   grad_check([&](const Tensor& b) { return sq_sum(bn(x0, gamma, b)); },
                              rand_tensor({2}, rng, -0.5, 0.5), eps),
                   kGradTol);
    }
    {
        Tensor gamma = rand_tensor({4}, rng, 0.5, 1.5);
        Tensor beta = rand_tensor({4}, rng, -0.5, 0.5);
        acc.expect("layernorm.x",
                   grad_check(
                       [&](const Tensor& x) { return sq_sum(layernorm(x, gamma, beta, 1e-5)); },
                       rand_tensor({2, 3, 4}, rng, -1, 1), eps),
                   kGradTol);
        Tensor x0 = rand_tensor({2, 3, 4}, rng, -1, 1);
        acc.expect("layernorm.gamma",
                   grad_check(
                       [&](const Tensor& g) { return sq_sum(layernorm(x0, g, beta, 1e-5)); },
                       rand_tensor({4}, rng, 0.5, 1.5), eps),
                   kGradTol);
    }

    // Softmax composed with a fixed projection so every lane gets signal.
    {
        Tensor c = rand_tensor({2, 3, 4}, rng, -1, 1);
        acc.expect("softmax",
                   grad_check(
                       [&](const Tensor& x) { return sum_all(mul(softmax(x, 2), c)); },
                       rand_tensor({2, 3, 4}, rng, -2, 2), eps),
                   kGradTol);
    }

    // Pooling; max pooling input is tie-free.
    acc.expect("pool.max",
               grad_check(
                   [&](const Tensor& x) { return sq_sum(pool2d(x, PoolKind::max, 3, 2, 1)); },
                   ramp_tensor({1, 2, 5, 5}, 0.07), eps),
               kGradTol);
    acc.expect("pool.avg",
               grad_check(
                   [&](const Tensor& x) { return sq_sum(pool2d(x, PoolKind::avg, 3, 2, 1)); },
                   rand_tensor({1, 2, 5, 5}, rng, -1, 1), eps),
               kGradTol);

    // Structure ops.
    acc.expect("reshape",
               grad_check([&](const Tensor& x) { return sq_sum(reshape(x, {3, 4})); },
                          rand_tensor({2, 2, 3}, rng, -1, 1), eps),
               kGradTol);
    acc.expect("transpose",
               grad_check([&](const Tensor& x) { return sq_sum(transpose(x, {1, 0, 2})); },
                          rand_tensor({2, 3, 2}, rng, -1, 1), eps),
               kGradTol);
    {
        Tensor other = rand_tensor({2, 2, 3}, rng, -1, 1);
        acc.expect("concat",
                   grad_check(
                       [&](const Tensor& x) { return sq_sum(concat({x, other}, 1)); },
                       rand_tensor({2, 3, 3}, rng, -1, 1), eps),
                   kGradTol);
    }
    acc.expect("narrow",
               grad_check([&](const Tensor& x) { return sq_sum(narrow(x, 1, 1, 2)); },
                          rand_tensor({2, 4, 3}, rng, -1, 1), eps),
               kGradTol);
    acc.expect("slice_channels",
               grad_check([&](const Tensor& x) { return sq_sum(slice_channels(x, 1, 2)); },
                          rand_tensor({1, 4, 3, 3}, rng, -1, 1), eps),
               kGradTol);
    acc.expect("upsample_bilinear",
               grad_check([&](const Tensor& x) { return sq_sum(upsample_bilinear(x, 7, 5)); },
                          rand_tensor({1, 2, 3, 3}, rng, -1, 1), eps),
               kGradTol);
    acc.expect("upsample_nearest",
               grad_check([&](const Tensor& x) { return sq_sum(upsample_nearest(x, 2)); },
                          rand_tensor({1, 2, 3, 3}, rng, -1, 1), eps),
               kGradTol);
    acc.expect("reduce_sum",
               grad_check([&](const Tensor& x) { return sq_sum(reduce_sum(x, 1)); },
                          rand_tensor({2, 3, 4}, rng, -1, 1), eps),
               kGradTol);
    acc.expect("reduce_mean",
               grad_check([&](const Tensor& x) { return sq_sum(reduce_mean(x, 2)); },
                          rand_tensor({2, 3, 4}, rng, -1, 1), eps),
               kGradTol);
    acc.expect("reduce_max",
               grad_check([&](const Tensor& x) { return sq_sum(reduce_max(x, 1)); },
                          ramp_tensor({2, 3, 4}, 0.23), eps),
               kGradTol);
    acc.expect("mean_all",
               grad_check([&](const Tensor& x) { return mean_all(mul(x, x)); },
                          rand_tensor({2, 3}, rng, -1, 1), eps),
               kGradTol);

    r.passed = acc.ok;
    r.detail = acc.detail;
    return r;
}

ModelConfig reduced_config() {
    ModelConfig cfg;
    cfg.arch.input_size = 8;
    cfg.enc.embed_dim = 16;
    cfg.enc.n_layers = 1;
    cfg.enc.heads = 2;
    cfg.validate();
    return cfg;
}

SuiteResult gradients_model() {
    SuiteResult r{"gradients.model", false, 0, ""};
    CheckAccum acc;
    const ModelConfig cfg = reduced_config();
    ModelParams mp = init_model(cfg, 7);
    Rng rng(99);
    Tensor clear = rand_tensor({2, 3, 8, 8}, rng, 0.1, 0.9);
    Tensor hazy = rand_tensor({2, 3, 8, 8}, rng, 0.1, 0.9);

    auto loss_value = [&]() {
        DhformerOut out = dhformer_forward(mp, hazy, cfg, /*training=*/true);
        return loss_residual(out.residual, out.ratio, clear);
    };

    Tensor loss = loss_value();
    for (auto& [name, p] : mp.params) {
        (void)name;
        p.zero_grad();
    }
    backward(loss);

    const double eps = 1e-5;
    for (auto& [name, p] : mp.params) {
        const std::vector<double>& g = p.grad();
        std::vector<double>& w = p.raw();
        std::vector<size_t> picks = {0, w.size() / 2, w.size() - 1};
        for (size_t i : picks) {
            double orig = w[i];
            double fp, fm;
            {
                NoGradGuard off;
                w[i] = orig + eps;
                fp = loss_value().item();
                w[i] = orig - eps;
                fm = loss_value().item();
                w[i] = orig;
            }
            const double numeric = (fp - fm) / (2 * eps);
            // Some parameters cancel exactly: conv biases ahead of batchnorm
            // (mean subtraction) and key biases (softmax shift invariance).
            // Both sides then measure pure roundoff, so agree on "zero"
            // instead of comparing noise against noise.
            if (std::fabs(g[i]) < 1e-4 && std::fabs(numeric) < 1e-4) continue;
            const double err = std::fabs(g[i] - numeric) /
                               (std::fabs(g[i]) + std::fabs(numeric));
            acc.expect(name + "[" + std::to_string(i) + "]", err, kGradTol);
        }
    }
    r.passed = acc.ok;
    r.detail = acc.detail;
    return r;
}

SuiteResult scattering_identity() {
    SuiteResult r{"scattering.identity", false, 0, ""};
    CheckAccum acc;
    Rng rng(1234);
    double worst = 0;
    for (int trial = 0; trial < 100; ++trial) {
        Tensor clear = rand_tensor({3, 5, 7}, rng, 0.0, 1.0);
        Tensor depth = rand_tensor({1, 5, 7}, rng, 0.0, 1.0);
        // beta * depth <= 2.9 keeps t above the clamp floor everywhere.
        const double beta = rng.uniform(0.2, 2.9);
        const double airlight = rng.uniform(0.5, 1.0);
        Tensor t = transmission_from_depth(depth, beta);
        Tensor hazy = synthesize_haze(clear, t, airlight);
        Tensor k = ratio_image(hazy, t);
        Tensor u = residual_target(hazy, clear, t);
        Tensor back = recompose_unclamped(k, u);
        for (size_t i = 0; i < back.values().size(); ++i)
            worst = std::max(worst, std::fabs(back.values()[i] - clear.values()[i]));
    }
    acc.expect("round-trip max abs", worst, 1e-12);

    // Transmission decays as the scattering coefficient grows.
    Tensor depth = rand_tensor({1, 4, 4}, rng, 0.1, 1.0);
    Tensor lo = transmission_from_depth(depth, 0.4);
    Tensor hi = transmission_from_depth(depth, 1.2);
    bool monotone = true;
    for (size_t i = 0; i < lo.values().size(); ++i)
        if (!(hi.values()[i] < lo.values()[i])) monotone = false;
    acc.expect_true("t strictly decreasing in beta", monotone);

    r.passed = acc.ok;
    r.detail = acc.detail;
    return r;
}

SuiteResult metrics_sanity() {
    SuiteResult r{"metrics.sanity", false, 0, ""};
    CheckAccum acc;
    Rng rng(555);
    Tensor img = rand_tensor({3, 40, 40}, rng, 0.0, 1.0);
    acc.expect("ssim self", std::fabs(ssim(img, img, 1.0) - 1.0), 1e-9);
    acc.expect("fsim self", std::fabs(fsim(img, img) - 1.0), 1e-9);

    double prev = std::numeric_limits<double>::infinity();
    bool decreasing = true;
    for (double sigma : {0.01, 0.03, 0.09}) {
        std::vector<double> noisy = img.values();
        Rng nrng(777);
        for (double& v : noisy)
            v = std::min(1.0, std::max(0.0, v + nrng.normal(0.0, sigma)));
        const double p = psnr(img, Tensor::from_vector({3, 40, 40}, std::move(noisy)), 1.0);
        if (!(p < prev)) decreasing = false;
        prev = p;
    }
    acc.expect_true("psnr decreasing in noise", decreasing);

    r.passed = acc.ok;
    r.detail = acc.detail;
    return r;
}

SuiteResult tensor_contracts() {
    SuiteResult r{"tensor.contracts", false, 0, ""};
    CheckAccum acc;
    auto throws_dim = [](auto&& fn) {
        try {
            fn();
        } catch (const DimensionError&) {
            return true;
        } catch (...) {
        }
        return false;
    };
    auto throws_contract = [](auto&& fn) {
        try {
            fn();
        } catch (const ContractError&) {
            return true;
        } catch (...) {
        }
        return false;
    };
    acc.expect_true("matmul inner mismatch", throws_dim([] {
                        matmul(Tensor::zeros({2, 3}), Tensor::zeros({4, 2}));
                    }));
    acc.expect_true("conv channel mismatch", throws_dim([] {
                        conv2d(Tensor::zeros({1, 2, 4, 4}), Tensor::zeros({1, 3, 3, 3}),
                               Tensor::zeros({1}), 1, 1);
                    }));
    acc.expect_true("concat extent mismatch", throws_dim([] {
                        concat({Tensor::zeros({2, 3}), Tensor::zeros({3, 3})}, 1);
                    }));
    acc.expect_true("reshape numel mismatch", throws_dim([] {
                        reshape(Tensor::zeros({2, 3}), {4, 2});
                    }));
    acc.expect_true("backward non-scalar", throws_contract([] {
                        Tensor x = Tensor::zeros({2, 2}, true);
                        backward(add_scalar(x, 1.0));
                    }));
    acc.expect_true("backward detached root", throws_contract([] {
                        backward(sum_all(Tensor::zeros({2, 2})));
                    }));
    r.passed = acc.ok;
    r.detail = acc.detail;
    return r;
}

SuiteResult trainer_tiling() {
    SuiteResult r{"trainer.tiling", false, 0, ""};
    CheckAccum acc;
    const int tile = 16, overlap = 4;
    for (auto [H, W] : {std::pair{16, 16}, {20, 23}, {32, 45}, {37, 16}}) {
        auto layout = tile_layout(H, W, tile, overlap);
        std::vector<double> den(static_cast<size_t>(H) * W, 0.0);
        for (const TilePlacement& p : layout) {
            acc.expect_true("tile in bounds",
                            p.y >= 0 && p.x >= 0 && p.y + tile <= H && p.x + tile <= W);
            const std::vector<double> w = tile_weight(p, H, W, tile, overlap);
            for (int i = 0; i < tile; ++i)
                for (int j = 0; j < tile; ++j)
                    den[(static_cast<size_t>(p.y) + i) * W + p.x + j] +=
                        w[static_cast<size_t>(i) * tile + j];
        }
        double min_den = 1e300;
        for (double d : den) min_den = std::min(min_den, d);
        acc.expect_true("full coverage " + std::to_string(H) + "x" + std::to_string(W),
                        min_den > 0);
        // Normalized blend coefficients must sum to one at every pixel.
        double worst = 0;
        std::vector<double> sum(den.size(), 0.0);
        for (const TilePlacement& p : layout) {
            const std::vector<double> w = tile_weight(p, H, W, tile, overlap);
            for (int i = 0; i < tile; ++i)
                for (int j = 0; j < tile; ++j) {
                    const size_t px = (static_cast<size_t>(p.y) + i) * W + p.x + j;
                    sum[px] += w[static_cast<size_t>(i) * tile + j] / den[px];
                }
        }
        for (double s : sum) worst = std::max(worst, std::fabs(s - 1.0));
        acc.expect("blend sum " + std::to_string(H) + "x" + std::to_string(W), worst, 1e-9);
    }

    // A single-tile image must reproduce the direct forward pass exactly.
    ModelConfig cfg = reduced_config();
    cfg.arch.input_size = 16;
    ModelParams mp = init_model(cfg, 3);
    Rng rng(8);
    Tensor img = rand_tensor({3, 16, 16}, rng, 0.0, 1.0);
    Tensor tiled = infer_tiled(mp, img, cfg, Ablation::full);
    NoGradGuard off;
    Tensor direct = dhformer_forward(mp, reshape(img, {1, 3, 16, 16}), cfg, false).dehazed;
    double worst = 0;
    for (size_t i = 0; i < tiled.values().size(); ++i)
        worst = std::max(worst, std::fabs(tiled.values()[i] - direct.values()[i]));
    acc.expect("single tile == direct", worst, 1e-12);

    r.passed = acc.ok;
    r.detail = acc.detail;
    return r;
}

SuiteResult checkpoint_roundtrip(const std::string& scratch_dir) {
    SuiteResult r{"checkpoint.roundtrip", false, 0, ""};
    CheckAccum acc;
    std::filesystem::create_directories(scratch_dir);
    const std::string p1 = scratch_dir + "/selfcheck_a.dhfm";
    const std::string p2 = scratch_dir + "/selfcheck_b.dhfm";

    Checkpoint ck;
    ck.meta.model = reduced_config();
    ck.meta.seed = 21;
    ck.meta.epoch = 3;
    ck.params = init_model(ck.meta.model, ck.meta.seed);
    quantize_params_f32(ck.params, true);
    save_checkpoint(p1, ck.params, ck.meta);

    Checkpoint back = load_checkpoint(p1);
    acc.expect_true("meta seed", back.meta.seed == ck.meta.seed);
    acc.expect_true("meta epoch", back.meta.epoch == ck.meta.epoch);
    bool exact = back.params.params.size() == ck.params.params.size();
    for (const auto& [name, t] : ck.params.params) {
        if (!exact) break;
        const Tensor& u = back.params.param(name);
        exact = u.values() == t.values() && u.shape() == t.shape();
    }
    for (const auto& [name, t] : ck.params.buffers) {
        if (!exact) break;
        exact = back.params.buffer(name).values() == t.values();
    }
    acc.expect_true("tensor values exact", exact);

    save_checkpoint(p2, back.params, back.meta);
    std::ifstream f1(p1, std::ios::binary), f2(p2, std::ios::binary);
    std::string b1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
    std::string b2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
    acc.expect_true("byte-identical resave", !b1.empty() && b1 == b2);

    r.passed = acc.ok;
    r.detail = acc.detail;
    return r;
}

// Negative control: a corrupted derivative rule must be caught. The sigmoid
// derivative is deliberately replaced by y*(1+y); finite differences of the
// true sigmoid must disagree, and this suite reports that disagreement as a
// failure on purpose.
SuiteResult fault_injection() {
    SuiteResult r{"gradients.fault_injection", false, 0, ""};
    Rng rng(13);
    const double eps = 1e-5;
    double max_err = 0;
    for (int i = 0; i < 16; ++i) {
        const double x = rng.uniform(-2.0, 2.0);
        const double y = 1.0 / (1.0 + std::exp(-x));
        const double corrupted = y * (1.0 + y);
        const double yp = 1.0 / (1.0 + std::exp(-(x + eps)));
        const double ym = 1.0 / (1.0 + std::exp(-(x - eps)));
        const double numeric = (yp - ym) / (2 * eps);
        max_err = std::max(max_err, std::fabs(corrupted - numeric) /
                                        std::max(1e-8, std::fabs(corrupted) + std::fabs(numeric)));
    }
    if (max_err > kGradTol) {
        r.passed = false;
        char buf[200];
        std::snprintf(buf, sizeof(buf),
                      "sigmoid: corrupted rule y*(1+y) disagrees with finite differences "
                      "(max rel err %.3g), detection works as intended",
                      max_err);
        r.detail = buf;
    } else {
        // The checker failed to notice a wrong rule: that is the real failure.
        r.passed = false;
        r.detail = "sigmoid: corrupted rule was NOT detected, finite-difference check is blind";
    }
    return r;
}

template <typename F>
SuiteResult timed(F&& fn) {
    const auto t0 = std::chrono::steady_clock::now();
    SuiteResult r = fn();
    const auto t1 = std::chrono::steady_clock::now();
    r.ms = std::chrono::duration<double, std::milli>(t1 - t0).count();
    return r;
}

}  // namespace

std::vector<SuiteResult> run_selfcheck(const std::string& scratch_dir, bool inject_fault) {
    std::vector<SuiteResult> out;
    out.push_back(timed([] { return gradients_core(); }));
    out.push_back(timed([] { return gradients_model(); }));
    out.push_back(timed([] { return scattering_identity(); }));
    out.push_back(timed([] { return metrics_sanity(); }));
    out.push_back(timed([] { return tensor_contracts(); }));
    out.push_back(timed([] { return trainer_tiling(); }));
    out.push_back(timed([&] { return checkpoint_roundtrip(scratch_dir); }));
    if (inject_fault) out.push_back(timed([] { return fault_injection(); }));
    return out;
}

bool all_passed(const std::vector<SuiteResult>& results) {
    for (const SuiteResult& r : results)
        if (!r.passed) return false;
    return true;
}

}  // namespace dhformer
