#pragma once
#include <map>
#include <string>

#include "dhformer/rng.hpp"
#include "dhformer/tensor.hpp"

namespace dhformer {

// Two convolutional estimators that work on fixed-size tiles. The
// transmission net predicts per-pixel haze transmission from the hazy tile;
// the residual net predicts a first residual estimate from the ratio image
// (hazy / transmission). Both are deliberately small: parameter keys are
// stable strings so checkpoints and the optimizer can address them by name.

struct ArchConfig {
    int input_size = 16;      // tile edge; the whole model runs on tiles
    int trans_channels = 16;  // transmission net conv width, split into groups
    int slice_groups = 4;     // competing feature groups (elementwise max)
    int residual_depth = 13;  // conv blocks in the residual net
    int residual_width = 16;
    double t_min = 0.05;      // transmission clamp floor

    void validate() const;
};

struct ModelParams {
    std::map<std::string, Tensor> params;   // trainable
    std::map<std::string, Tensor> buffers;  // batchnorm running stats

    Tensor& param(const std::string& name);
    const Tensor& param(const std::string& name) const;
    const Tensor& buffer(const std::string& name) const;
    int64_t param_count() const;
    int64_t buffer_count() const;
};

// He-normal conv/linear weights, zero biases except the transmission output
// bias (+1, so the net starts near full transmission and the ratio image
// starts near the input).
void init_backbone_params(ModelParams& mp, const ArchConfig& cfg, Rng& rng);

struct TransDiag {
    double preclamp_min = 0;  // transmission before the [floor,1] clamp
    double preclamp_max = 0;
};

// hazy [N,3,S,S] -> transmission [N,1,S,S] in [floor,1]. S = cfg.input_size.
Tensor transmission_net_forward(const ModelParams& mp, const Tensor& hazy,
                                const ArchConfig& cfg, TransDiag* diag = nullptr);

// x [N,3,H,W] -> signed residual estimate [N,3,H,W]. Training mode drives
// the batchnorm running-stat updates.
Tensor residual_net_forward(const ModelParams& mp, const Tensor& x, const ArchConfig& cfg,
                            bool training);

// Half mean-per-sample squared Frobenius distance to the residual target:
// (1/(2n)) * sum_i ||pred_i - (ratio_i - clear_i)||_F^2, n = batch size.
Tensor loss_residual(const Tensor& pred, const Tensor& ratio, const Tensor& clear);

struct BackboneOut {
    Tensor transmission;  // [N,1,S,S]
    Tensor ratio;         // [N,3,S,S]
    Tensor residual;      // R', [N,3,S,S]
};

// hazy -> (t, K = hazy/t, R'(K)); differentiable through the division.
BackboneOut backbone_forward(const ModelParams& mp, const Tensor& hazy, const ArchConfig& cfg,
                             bool training, TransDiag* diag = nullptr);

}  // namespace dhformer
