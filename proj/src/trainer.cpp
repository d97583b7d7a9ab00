#include "dhformer/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "dhformer/attention.hpp"
#include "dhformer/errors.hpp"

namespace dhformer {

std::string to_string(Ablation a) {
    return a == Ablation::full ? "full" : "residual_only";
}
std::string to_string(OptimizerKind k) {
    return k == OptimizerKind::adam ? "adam" : "sgd";
}
std::string to_string(Precision p) {
    return p == Precision::f32 ? "f32" : "f64";
}

Ablation ablation_from_string(const std::string& s) {
    if (s == "full") return Ablation::full;
    if (s == "residual_only") return Ablation::residual_only;
    throw ConfigError("unknown ablation '" + s + "' (full, residual_only)");
}
OptimizerKind optimizer_from_string(const std::string& s) {
    if (s == "adam") return OptimizerKind::adam;
    if (s == "sgd") return OptimizerKind::sgd;
    throw ConfigError("unknown optimizer '" + s + "' (adam, sgd)");
}
Precision precision_from_string(const std::string& s) {
    if (s == "f32") return Precision::f32;
    if (s == "f64") return Precision::f64;
    throw ConfigError("unknown precision '" + s + "' (f32, f64)");
}

void TrainConfig::validate() const {
    if (epochs < 1) throw ConfigError("epochs must be >= 1");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (!(learning_rate > 0) || !std::isfinite(learning_rate))
        throw ConfigError("learning_rate must be finite and > 0");
}

void optimizer_step(ModelParams& mp, OptimizerState& st) {
    st.t += 1;
    const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
    const double bc1 = 1.0 - std::pow(b1, static_cast<double>(st.t));
    const double bc2 = 1.0 - std::pow(b2, static_cast<double>(st.t));
    for (auto& [name, p] : mp.params) {
        if (!p.has_grad())
            throw ContractError("optimizer_step: no gradient for parameter " + name);
        const std::vector<double>& g = p.grad();
        std::vector<double>& w = p.raw();
        if (st.kind == OptimizerKind::sgd) {
            for (size_t i = 0; i < w.size(); ++i) w[i] -= st.lr * g[i];
            continue;
        }
        std::vector<double>& m = st.m[name];
        std::vector<double>& v = st.v[name];
        if (m.empty()) m.assign(w.size(), 0.0);
        if (v.empty()) v.assign(w.size(), 0.0);
        for (size_t i = 0; i < w.size(); ++i) {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            const double mh = m[i] / bc1;
            const double vh = v[i] / bc2;
            w[i] -= st.lr * mh / (std::sqrt(vh) + eps);
        }
    }
}

void quantize_params_f32(ModelParams& mp, bool include_buffers) {
    auto snap = [](std::map<std::string, Tensor>& ts) {
        for (auto& [name, t] : ts) {
            (void)name;
            for (double& d : t.raw()) d = static_cast<double>(static_cast<float>(d));
        }
    };
    snap(mp.params);
    if (include_buffers) snap(mp.buffers);
}

namespace {

TrainExample example_for(const HazePair& p, uint64_t seed, int epoch, int index, int size) {
    const int h = p.clear.shape()[1], w = p.clear.shape()[2];
    if (h >= size && w >= size) return augment_to_train(p, seed, epoch, index, size);
    return resize_to_train(p, size);
}

// Forward to the residual prediction and its ratio image; `pred` is R for the
// full model and R' when the attention stage is ablated.
Tensor batch_loss(const ModelParams& mp, const Batch& b, const ModelConfig& cfg,
                  Ablation ablation, bool training) {
    if (ablation == Ablation::full) {
        DhformerOut out = dhformer_forward(mp, b.hazy, cfg, training);
        return loss_residual(out.residual, out.ratio, b.clear);
    }
    BackboneOut out = backbone_forward(mp, b.hazy, cfg.arch, training);
    return loss_residual(out.residual, out.ratio, b.clear);
}

double validation_loss(const ModelParams& mp, PairLoader& loader, const std::vector<int>& val,
                       const ModelConfig& cfg, const TrainConfig& tcfg) {
    NoGradGuard off;
    const int S = cfg.arch.input_size;
    double total = 0;
    int count = 0;
    for (size_t i = 0; i < val.size(); i += static_cast<size_t>(tcfg.batch_size)) {
        std::vector<TrainExample> exs;
        for (size_t j = i; j < val.size() && j < i + static_cast<size_t>(tcfg.batch_size); ++j)
            exs.push_back(resize_to_train(loader.pair(val[j]), S));
        Batch b = collate(exs);
        Tensor loss = batch_loss(mp, b, cfg, tcfg.ablation, /*training=*/false);
        total += loss.item() * static_cast<double>(exs.size());
        count += static_cast<int>(exs.size());
    }
    return total / static_cast<double>(count);
}

}  // namespace

TrainResult train(PairLoader& loader, const ModelConfig& mcfg, const TrainConfig& tcfg) {
    mcfg.validate();
    tcfg.validate();
    const int S = mcfg.arch.input_size;

    ModelParams mp = init_model(mcfg, tcfg.seed, tcfg.ablation == Ablation::full);
    if (tcfg.precision == Precision::f32) quantize_params_f32(mp, false);

    std::vector<int> train_idx = loader.train_indices();
    if (train_idx.empty()) throw ConfigError("dataset has no training records");

    // Hold out the trailing tenth (manifest order) as a divergence canary.
    std::vector<int> val_idx;
    if (train_idx.size() >= 10) {
        const size_t val_count = train_idx.size() / 10;
        val_idx.assign(train_idx.end() - static_cast<long>(val_count), train_idx.end());
        train_idx.resize(train_idx.size() - val_count);
    }

    OptimizerState st;
    st.kind = tcfg.optimizer;
    st.lr = tcfg.learning_rate;

    TrainResult res;
    int global_step = 0;
    for (int epoch = 0; epoch < tcfg.epochs; ++epoch) {
        for (const std::vector<int>& batch_idx :
             epoch_batches(train_idx, tcfg.batch_size, tcfg.seed, epoch)) {
            std::vector<TrainExample> exs;
            exs.reserve(batch_idx.size());
            for (int idx : batch_idx)
                exs.push_back(example_for(loader.pair(idx), tcfg.seed, epoch, idx, S));
            Batch b = collate(exs);

            Tensor loss = batch_loss(mp, b, mcfg, tcfg.ablation, /*training=*/true);
            const double lv = loss.item();
            if (!std::isfinite(lv))
                throw TrainingError("non-finite training loss", global_step);
            res.history.push_back({global_step, epoch, lv});

            for (auto& [name, p] : mp.params) {
                (void)name;
                p.zero_grad();
            }
            backward(loss);
            optimizer_step(mp, st);
            if (tcfg.precision == Precision::f32) quantize_params_f32(mp, false);
            ++global_step;
        }
        if (!val_idx.empty()) {
            const double vl = validation_loss(mp, loader, val_idx, mcfg, tcfg);
            if (!std::isfinite(vl))
                throw TrainingError("non-finite validation loss", global_step - 1);
            if (std::isnan(res.best_val_loss) || vl < res.best_val_loss) res.best_val_loss = vl;
        }
    }
    if (tcfg.precision == Precision::f32) quantize_params_f32(mp, true);

    res.params = std::move(mp);
    res.steps_run = global_step;
    return res;
}

void write_loss_csv(const std::string& path, const std::vector<LossRecord>& history) {
    std::FILE* f = std::fopen(path.c_str(), "wb");
    if (!f) throw IoError("cannot write " + path);
    std::fprintf(f, "step,epoch,loss\n");
    for (const LossRecord& r : history)
        std::fprintf(f, "%d,%d,%.17g\n", r.step, r.epoch, r.loss);
    if (std::fclose(f) != 0) throw IoError("write failed: " + path);
}

std::vector<TilePlacement> tile_layout(int H, int W, int tile, int overlap) {
    if (tile < 1 || overlap < 0 || overlap >= tile)
        throw ConfigError("tile layout requires 0 <= overlap < tile");
    if (H < tile || W < tile)
        throw DimensionError("image smaller than tile size");
    const int stride = tile - overlap;
    auto starts = [&](int n) {
        std::vector<int> s;
        for (int a = 0;; a += stride) {
            if (a + tile >= n) {
                s.push_back(n - tile);  // border-aligned final tile
                break;
            }
            s.push_back(a);
        }
        return s;
    };
    std::vector<TilePlacement> out;
    for (int y : starts(H))
        for (int x : starts(W)) out.push_back({y, x});
    return out;
}

std::vector<double> tile_weight(const TilePlacement& p, int H, int W, int tile, int overlap) {
    auto ramp = [&](int pos, int start, int n) {
        double w = 1.0;
        const bool lo = start > 0, hi = start + tile < n;
        if (lo && pos < overlap) w = static_cast<double>(pos + 1) / (overlap + 1);
        if (hi && pos >= tile - overlap)
            w = std::min(w, static_cast<double>(tile - pos) / (overlap + 1));
        return w;
    };
    std::vector<double> w(static_cast<size_t>(tile) * tile);
    for (int i = 0; i < tile; ++i)
        for (int j = 0; j < tile; ++j)
            w[static_cast<size_t>(i) * tile + j] = ramp(i, p.y, H) * ramp(j, p.x, W);
    return w;
}

Tensor infer_tiled(const ModelParams& mp, const Tensor& full, const ModelConfig& cfg,
                   Ablation ablation, int tile, int overlap) {
    if (full.shape().size() != 3 || full.shape()[0] != 3)
        throw DimensionError("infer_tiled expects a [3,H,W] image");
    if (tile != cfg.arch.input_size)
        throw ConfigError("tile size must equal the network input size");
    NoGradGuard off;
    const int H = full.shape()[1], W = full.shape()[2];
    std::vector<double> num(static_cast<size_t>(3) * H * W, 0.0);
    std::vector<double> den(static_cast<size_t>(H) * W, 0.0);
    for (const TilePlacement& p : tile_layout(H, W, tile, overlap)) {
        Tensor crop = reshape(spatial_crop(full, p.y, p.x, tile, tile), {1, 3, tile, tile});
        Tensor j;
        if (ablation == Ablation::full) {
            j = dhformer_forward(mp, crop, cfg, /*training=*/false).dehazed;
        } else {
            BackboneOut out = backbone_forward(mp, crop, cfg.arch, /*training=*/false);
            j = recompose(out.ratio, out.residual);
        }
        const std::vector<double>& jv = j.values();
        const std::vector<double> w = tile_weight(p, H, W, tile, overlap);
        for (int c = 0; c < 3; ++c)
            for (int i = 0; i < tile; ++i)
                for (int k = 0; k < tile; ++k) {
                    const size_t src = (static_cast<size_t>(c) * tile + i) * tile + k;
                    const size_t dst =
                        (static_cast<size_t>(c) * H + p.y + i) * W + p.x + k;
                    num[dst] += w[static_cast<size_t>(i) * tile + k] * jv[src];
                    if (c == 0)
                        den[(static_cast<size_t>(p.y) + i) * W + p.x + k] +=
                            w[static_cast<size_t>(i) * tile + k];
                }
    }
    std::vector<double> out(num.size());
    for (int c = 0; c < 3; ++c)
        for (size_t px = 0; px < den.size(); ++px)
            out[static_cast<size_t>(c) * den.size() + px] =
                num[static_cast<size_t>(c) * den.size() + px] / den[px];
    return Tensor::from_vector({3, H, W}, std::move(out));
}

MetricReport evaluate(const ModelParams* mp, PairLoader& loader, const ModelConfig& cfg,
                      Ablation ablation, EvalModel model) {
    if (model == EvalModel::network && mp == nullptr)
        throw ContractError("evaluate: network model requires parameters");
    NoGradGuard off;
    std::vector<MetricRow> rows;
    for (int idx : loader.test_indices()) {
        const HazePair& p = loader.pair(idx);
        Tensor j;
        switch (model) {
            case EvalModel::network:
                j = infer_tiled(*mp, p.hazy, cfg, ablation);
                break;
            case EvalModel::oracle_residual: {
                Tensor k = ratio_image(p.hazy, p.transmission);
                Tensor u = residual_target(p.hazy, p.clear, p.transmission);
                j = recompose(k, u);
                break;
            }
            case EvalModel::identity:
                j = p.hazy;
                break;
        }
        rows.push_back(measure(loader.entry(idx).clear_path, j, p.clear));
    }
    if (rows.empty()) throw ConfigError("dataset has no test records");
    return aggregate(std::move(rows));
}

AblationResult ablation_compare(PairLoader& loader, const ModelConfig& mcfg,
                                const TrainConfig& tcfg) {
    auto run = [&](Ablation a) {
        TrainConfig tc = tcfg;
        tc.ablation = a;
        TrainResult r = train(loader, mcfg, tc);
        return evaluate(&r.params, loader, mcfg, a);
    };
    AblationResult res;
    res.full = run(Ablation::full);
    res.residual_only = run(Ablation::residual_only);
    auto pct = [](double a, double b) { return b == 0 ? 0.0 : 100.0 * (a - b) / b; };
    res.delta_psnr_pct = pct(res.full.mean_psnr, res.residual_only.mean_psnr);
    res.delta_ssim_pct = pct(res.full.mean_ssim, res.residual_only.mean_ssim);
    res.delta_fsim_pct = pct(res.full.mean_fsim, res.residual_only.mean_fsim);
    return res;
}

}  // namespace dhformer
