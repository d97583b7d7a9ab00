#pragma once
#include <map>
#include <string>
#include <vector>

#include "dhformer/checkpoint.hpp"
#include "dhformer/dataset.hpp"
#include "dhformer/metrics.hpp"

namespace dhformer {

enum class Ablation { full, residual_only };
enum class OptimizerKind { sgd, adam };
enum class Precision { f32, f64 };

std::string to_string(Ablation a);
std::string to_string(OptimizerKind k);
std::string to_string(Precision p);
Ablation ablation_from_string(const std::string& s);
OptimizerKind optimizer_from_string(const std::string& s);
Precision precision_from_string(const std::string& s);

struct TrainConfig {
    int epochs = 150;
    int batch_size = 16;
    double learning_rate = 1e-3;
    OptimizerKind optimizer = OptimizerKind::adam;
    uint64_t seed = 0;
    // f32 keeps parameters on the float grid after every update, so the
    // 32-bit checkpoint payload reproduces the in-memory model exactly.
    Precision precision = Precision::f32;
    Ablation ablation = Ablation::full;

    void validate() const;
};

struct LossRecord {
    int step = 0;  // global batch counter
    int epoch = 0;
    double loss = 0;
};

struct OptimizerState {
    OptimizerKind kind = OptimizerKind::adam;
    double lr = 1e-3;
    int64_t t = 0;  // completed steps, shared across parameters
    std::map<std::string, std::vector<double>> m, v;
};

// One update over every parameter; throws ContractError on a parameter with
// no populated gradient. adam uses beta1=0.9, beta2=0.999, eps=1e-8 with
// bias correction.
void optimizer_step(ModelParams& mp, OptimizerState& st);

// Rounds every parameter (and optionally buffer) to the nearest f32 value.
void quantize_params_f32(ModelParams& mp, bool include_buffers);

struct TrainResult {
    ModelParams params;
    std::vector<LossRecord> history;
    double best_val_loss = std::numeric_limits<double>::quiet_NaN();
    int steps_run = 0;
};

// Deterministic single-threaded loop: per batch, forward (full model or
// backbone only), residual loss against K - J, backward, optimizer step.
// When the train split has >= 10 records its last tenth is held out purely
// as a divergence canary (per-epoch finite-loss check, no early stopping).
// Non-finite loss raises TrainingError carrying the global batch index.
TrainResult train(PairLoader& loader, const ModelConfig& mcfg, const TrainConfig& tcfg);

// Training log CSV: header `step,epoch,loss`.
void write_loss_csv(const std::string& path, const std::vector<LossRecord>& history);

// Tile placement for sliding-window inference: stride tile-overlap, final
// row/column aligned to the image border.
struct TilePlacement {
    int y = 0, x = 0;
};
std::vector<TilePlacement> tile_layout(int H, int W, int tile, int overlap);

// Raised-edge blending weight for one tile: ramps over the overlap band on
// sides that face a neighbour, flat elsewhere. [tile*tile], row-major.
std::vector<double> tile_weight(const TilePlacement& p, int H, int W, int tile, int overlap);

// Full-image inference through 16x16 tiles with weighted-overlap blending;
// weights are normalized so every pixel's blend coefficients sum to 1.
Tensor infer_tiled(const ModelParams& mp, const Tensor& full, const ModelConfig& cfg,
                   Ablation ablation, int tile = 16, int overlap = 4);

enum class EvalModel {
    network,          // trained parameters via tiled inference
    oracle_residual,  // analytic residual from the true transmission
    identity          // t = 1, R = 0: output equals the hazy input
};

// Dehazes every test-split record and scores it against the clear image.
// mp may be null for the non-network models.
MetricReport evaluate(const ModelParams* mp, PairLoader& loader, const ModelConfig& cfg,
                      Ablation ablation, EvalModel model = EvalModel::network);

struct AblationResult {
    MetricReport full;
    MetricReport residual_only;
    double delta_psnr_pct = 0;  // 100 * (full - residual) / residual
    double delta_ssim_pct = 0;
    double delta_fsim_pct = 0;
};

// Trains both variants with identical seed and data, evaluates both.
AblationResult ablation_compare(PairLoader& loader, const ModelConfig& mcfg,
                                const TrainConfig& tcfg);

}  // namespace dhformer
