#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "dhformer/attention.hpp"
#include "dhformer/errors.hpp"
#include "dhformer/trainer.hpp"

using namespace dhformer;
namespace fs = std::filesystem;

namespace {
std::string scratch(const std::string& leaf) {
    fs::path p = fs::temp_directory_path() / "dhformer_unit" / leaf;
    fs::create_directories(p);
    return p.string();
}

PairLoader mini_loader(const std::string& leaf, int count, int size, uint64_t seed) {
    const std::string dir = scratch(leaf);
    std::string manifest = write_mini_dataset(dir, count, size, seed);
    return PairLoader(load_manifest(manifest), seed);
}

// single scalar parameter w with loss w^2, so grad = 2w
ModelParams one_param(double w0) {
    ModelParams mp;
    mp.params["w"] = Tensor::from_vector({1}, {w0}, true);
    return mp;
}

void backprop_square(ModelParams& mp) {
    Tensor w = mp.params["w"];
    w.zero_grad();
    backward(sum_all(mul(w, w)));
}
}  // namespace

TEST_CASE("adam steps match the hand-derived update") {
    ModelParams mp = one_param(1.0);
    OptimizerState st;
    st.kind = OptimizerKind::adam;
    st.lr = 1e-3;

    const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
    double w = 1.0, m = 0.0, v = 0.0;

    backprop_square(mp);
    optimizer_step(mp, st);
    double g = 2.0 * w;
    m = b1 * m + (1.0 - b1) * g;
    v = b2 * v + (1.0 - b2) * g * g;
    w -= 1e-3 * (m / (1.0 - b1)) / (std::sqrt(v / (1.0 - b2)) + eps);
    CHECK(st.t == 1);
    CHECK(mp.params["w"].values()[0] == doctest::Approx(w).epsilon(1e-12));

    backprop_square(mp);
    optimizer_step(mp, st);
    g = 2.0 * w;
    m = b1 * m + (1.0 - b1) * g;
    v = b2 * v + (1.0 - b2) * g * g;
    w -= 1e-3 * (m / (1.0 - b1 * b1)) / (std::sqrt(v / (1.0 - b2 * b2)) + eps);
    CHECK(st.t == 2);
    CHECK(mp.params["w"].values()[0] == doctest::Approx(w).epsilon(1e-12));
}

TEST_CASE("sgd is a plain gradient step") {
    ModelParams mp = one_param(3.0);
    OptimizerState st;
    st.kind = OptimizerKind::sgd;
    st.lr = 0.25;
    backprop_square(mp);
    optimizer_step(mp, st);
    // w - lr * 2w = 3 - 0.25*6
    CHECK(mp.params["w"].values()[0] == 1.5);
}

TEST_CASE("a parameter without a gradient aborts the step") {
    ModelParams mp = one_param(1.0);
    mp.params["u"] = Tensor::from_vector({1}, {0.5}, true);  // never backpropped
    OptimizerState st;
    backprop_square(mp);
    CHECK_THROWS_AS(optimizer_step(mp, st), ContractError);
}

TEST_CASE("f32 quantization lands every value on the float grid") {
    ModelParams mp;
    mp.params["a"] = Tensor::from_vector({3}, {0.1, 1.0 / 3.0, 2.5e-39}, true);
    mp.buffers["b"] = Tensor::from_vector({2}, {M_PI, 1e-45});
    quantize_params_f32(mp, true);
    for (const auto& holder : {mp.params.at("a"), mp.buffers.at("b")})
        for (double d : holder.values())
            CHECK(d == static_cast<double>(static_cast<float>(d)));
    CHECK(mp.params.at("a").values()[1] == static_cast<double>(static_cast<float>(1.0 / 3.0)));
}

TEST_CASE("training is deterministic in the seed") {
    ModelConfig cfg;
    TrainConfig tc;
    tc.epochs = 2;
    tc.batch_size = 4;
    tc.seed = 7;

    PairLoader l1 = mini_loader("train_det", 8, 32, 99);
    TrainResult r1 = train(l1, cfg, tc);
    PairLoader l2 = mini_loader("train_det2", 8, 32, 99);
    TrainResult r2 = train(l2, cfg, tc);

    // 6 train records, no holdout below 10, ceil(6/4)=2 batches per epoch
    CHECK(r1.steps_run == 4);
    CHECK(r1.history.size() == 4);
    CHECK(std::isnan(r1.best_val_loss));
    CHECK(r1.history.front().step == 0);
    CHECK(r1.history.back().step == 3);
    CHECK(r1.history.back().epoch == 1);

    for (const auto& [name, p] : r1.params.params) {
        const auto& q = r2.params.params.at(name).values();
        REQUIRE(p.values().size() == q.size());
        for (size_t i = 0; i < q.size(); ++i) CHECK(p.values()[i] == q[i]);
    }
    for (size_t i = 0; i < r1.history.size(); ++i)
        CHECK(r1.history[i].loss == r2.history[i].loss);

    // every parameter and buffer sits on the float grid at the end
    for (const auto& [name, p] : r1.params.params)
        for (double d : p.values()) CHECK(d == static_cast<double>(static_cast<float>(d)));
    for (const auto& [name, b] : r1.params.buffers)
        for (double d : b.values()) CHECK(d == static_cast<double>(static_cast<float>(d)));

    tc.seed = 8;
    PairLoader l3 = mini_loader("train_det3", 8, 32, 99);
    TrainResult r3 = train(l3, cfg, tc);
    bool any_differs = false;
    for (const auto& [name, p] : r1.params.params) {
        const auto& q = r3.params.params.at(name).values();
        for (size_t i = 0; i < q.size() && !any_differs; ++i)
            any_differs = p.values()[i] != q[i];
    }
    CHECK(any_differs);
}

TEST_CASE("an exploding learning rate raises a training error") {
    ModelConfig cfg;
    TrainConfig tc;
    tc.epochs = 3;
    tc.batch_size = 4;
    tc.optimizer = OptimizerKind::sgd;
    tc.learning_rate = 1e300;
    tc.seed = 3;
    tc.ablation = Ablation::residual_only;

    PairLoader loader = mini_loader("train_blow", 8, 32, 5);
    bool threw = false;
    try {
        (void)train(loader, cfg, tc);
    } catch (const TrainingError& e) {
        threw = true;
        CHECK(e.batch_index >= 1);
    }
    CHECK(threw);
}

TEST_CASE("train config validation") {
    TrainConfig tc;
    tc.epochs = 0;
    CHECK_THROWS_AS(tc.validate(), ConfigError);
    tc = TrainConfig{};
    tc.batch_size = 0;
    CHECK_THROWS_AS(tc.validate(), ConfigError);
    tc = TrainConfig{};
    tc.learning_rate = 0;
    CHECK_THROWS_AS(tc.validate(), ConfigError);
    tc = TrainConfig{};
    tc.learning_rate = std::numeric_limits<double>::infinity();
    CHECK_THROWS_AS(tc.validate(), ConfigError);
}

TEST_CASE("loss history csv format") {
    const std::string path = scratch("losscsv") + "/loss.csv";
    write_loss_csv(path, {{0, 0, 0.5}, {1, 0, 0.25}, {2, 1, 0.125}});
    std::ifstream in(path);
    std::string line;
    std::getline(in, line);
    CHECK(line == "step,epoch,loss");
    std::getline(in, line);
    CHECK(line == "0,0,0.5");
    std::getline(in, line);
    CHECK(line == "1,0,0.25");
    std::getline(in, line);
    CHECK(line == "2,1,0.125");
    CHECK_FALSE(std::getline(in, line));
}

TEST_CASE("tile layout covers the image without stepping outside") {
    auto flat = [](const std::vector<TilePlacement>& ps) {
        std::vector<std::pair<int, int>> v;
        for (const auto& p : ps) v.emplace_back(p.y, p.x);
        return v;
    };

    CHECK(flat(tile_layout(16, 16, 16, 4)) ==
          std::vector<std::pair<int, int>>{{0, 0}});
    CHECK(flat(tile_layout(16, 28, 16, 4)) ==
          std::vector<std::pair<int, int>>{{0, 0}, {0, 12}});

    for (auto [H, W] : std::vector<std::pair<int, int>>{{16, 16}, {20, 23}, {32, 45}, {37, 16}}) {
        std::vector<TilePlacement> ps = tile_layout(H, W, 16, 4);
        std::set<std::pair<int, int>> seen;
        std::vector<int> cover(static_cast<size_t>(H) * W, 0);
        for (const auto& p : ps) {
            CHECK(p.y >= 0);
            CHECK(p.x >= 0);
            CHECK(p.y + 16 <= H);
            CHECK(p.x + 16 <= W);
            CHECK(seen.insert({p.y, p.x}).second);  // no duplicates
            for (int i = 0; i < 16; ++i)
                for (int k = 0; k < 16; ++k) cover[(p.y + i) * W + p.x + k] += 1;
        }
        for (int c : cover) CHECK(c >= 1);
    }
}

TEST_CASE("tile blend weights are flat inside and sum to one across a seam") {
    // single tile: no neighbours, weight one everywhere
    std::vector<double> lone = tile_weight({0, 0}, 16, 16, 16, 4);
    for (double w : lone) CHECK(w == 1.0);

    // two tiles sharing a 4-column seam on a 16x28 image
    std::vector<double> left = tile_weight({0, 0}, 16, 28, 16, 4);
    std::vector<double> right = tile_weight({0, 12}, 16, 28, 16, 4);
    for (int y = 0; y < 16; ++y) {
        for (int gx = 0; gx < 28; ++gx) {
            double s = 0;
            if (gx < 16) s += left[y * 16 + gx];
            if (gx >= 12) s += right[y * 16 + gx - 12];
            CHECK(std::fabs(s - 1.0) <= 1e-9);
        }
    }
}

TEST_CASE("tiled inference equals a direct pass when one tile suffices") {
    ModelConfig cfg;
    ModelParams mp = init_model(cfg, 77);
    Rng rng(78);
    std::vector<double> v(3 * 16 * 16);
    for (double& x : v) x = rng.uniform(0.05, 1.0);
    Tensor img = Tensor::from_vector({3, 16, 16}, std::move(v));

    Tensor tiled = infer_tiled(mp, img, cfg, Ablation::full);
    NoGradGuard off;
    Tensor direct = dhformer_forward(mp, reshape(img, {1, 3, 16, 16}), cfg, false).dehazed;
    REQUIRE(tiled.shape() == Shape{3, 16, 16});
    for (size_t i = 0; i < tiled.values().size(); ++i)
        CHECK(std::fabs(tiled.values()[i] - direct.values()[i]) <= 1e-12);
}

TEST_CASE("tiled inference on an uneven image stays bounded") {
    ModelConfig cfg;
    ModelParams mp = init_model(cfg, 79);
    Rng rng(80);
    std::vector<double> v(3 * 20 * 23);
    for (double& x : v) x = rng.uniform(0.05, 1.0);
    Tensor img = Tensor::from_vector({3, 20, 23}, std::move(v));
    Tensor out = infer_tiled(mp, img, cfg, Ablation::full);
    REQUIRE(out.shape() == Shape{3, 20, 23});
    for (double d : out.values()) {
        CHECK(std::isfinite(d));
        CHECK(d >= -1e-12);
        CHECK(d <= 1.0 + 1e-12);
    }

    CHECK_THROWS_AS(infer_tiled(mp, Tensor::zeros({1, 3, 16, 16}), cfg, Ablation::full),
                    DimensionError);
    CHECK_THROWS_AS(infer_tiled(mp, img, cfg, Ablation::full, 8, 2), ConfigError);
}

TEST_CASE("evaluation baselines on the bundled dataset") {
    ModelConfig cfg;
    PairLoader loader = mini_loader("eval_base", 8, 32, 21);

    MetricReport ident = evaluate(nullptr, loader, cfg, Ablation::full, EvalModel::identity);
    REQUIRE(ident.rows.size() == 2);  // 8 records, quarter test split
    // identity output is the hazy input itself
    for (size_t i = 0; i < ident.rows.size(); ++i) {
        int idx = loader.test_indices()[i];
        CHECK(ident.rows[i].image == loader.entry(idx).clear_path);
        const HazePair& p = loader.pair(idx);
        CHECK(ident.rows[i].psnr_db ==
              doctest::Approx(psnr(p.hazy, p.clear, 1.0)).epsilon(1e-14));
    }

    MetricReport oracle =
        evaluate(nullptr, loader, cfg, Ablation::full, EvalModel::oracle_residual);
    CHECK(oracle.mean_psnr > 60.0);
    CHECK(oracle.mean_psnr > ident.mean_psnr);

    ModelParams mp = init_model(cfg, 22);
    MetricReport net = evaluate(&mp, loader, cfg, Ablation::full, EvalModel::network);
    CHECK(net.rows.size() == 2);

    CHECK_THROWS_AS(evaluate(nullptr, loader, cfg, Ablation::full, EvalModel::network),
                    ContractError);
}

TEST_CASE("ablation comparison produces paired reports") {
    ModelConfig cfg;
    TrainConfig tc;
    tc.epochs = 1;
    tc.batch_size = 4;
    tc.seed = 11;
    PairLoader loader = mini_loader("ablate", 4, 32, 31);
    AblationResult res = ablation_compare(loader, cfg, tc);
    CHECK(res.full.rows.size() == 1);
    CHECK(res.residual_only.rows.size() == 1);
    CHECK(std::isfinite(res.delta_psnr_pct));
    CHECK(std::isfinite(res.delta_ssim_pct));
    CHECK(std::isfinite(res.delta_fsim_pct));
}

TEST_CASE("enum names round trip and reject junk") {
    CHECK(to_string(Ablation::full) == "full");
    CHECK(to_string(Ablation::residual_only) == "residual_only");
    CHECK(ablation_from_string("full") == Ablation::full);
    CHECK(ablation_from_string("residual_only") == Ablation::residual_only);
    CHECK_THROWS_AS(ablation_from_string("none"), ConfigError);

    CHECK(to_string(OptimizerKind::adam) == "adam");
    CHECK(optimizer_from_string("sgd") == OptimizerKind::sgd);
    CHECK_THROWS_AS(optimizer_from_string("rmsprop"), ConfigError);

    CHECK(to_string(Precision::f32) == "f32");
    CHECK(precision_from_string("f64") == Precision::f64);
    CHECK_THROWS_AS(precision_from_string("f16"), ConfigError);
}
