#include "dhformer/backbone.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "dhformer/scattering.hpp"

namespace dhformer {

void ArchConfig::validate() const {
    if (input_size < 8 || input_size % 2 != 0)
        throw ContractError("input_size must be even and >= 8");
    if (trans_channels < 1 || slice_groups < 1 || trans_channels % slice_groups != 0)
        throw ContractError("trans_channels must be a positive multiple of slice_groups");
    if (residual_depth < 2) throw ContractError("residual_depth must be >= 2");
    if (residual_width < 1) throw ContractError("residual_width must be >= 1");
    if (!(t_min > 0.0 && t_min < 1.0)) throw ContractError("t_min must be in (0, 1)");
}

Tensor& ModelParams::param(const std::string& name) {
    auto it = params.find(name);
    if (it == params.end()) throw ContractError("unknown parameter: " + name);
    return it->second;
}

const Tensor& ModelParams::param(const std::string& name) const {
    auto it = params.find(name);
    if (it == params.end()) throw ContractError("unknown parameter: " + name);
    return it->second;
}

const Tensor& ModelParams::buffer(const std::string& name) const {
    auto it = buffers.find(name);
    if (it == buffers.end()) throw ContractError("unknown buffer: " + name);
    return it->second;
}

int64_t ModelParams::param_count() const {
    int64_t n = 0;
    for (const auto& [k, v] : params) n += v.numel();
    return n;
}

int64_t ModelParams::buffer_count() const {
    int64_t n = 0;
    for (const auto& [k, v] : buffers) n += v.numel();
    return n;
}

namespace {

Tensor he_conv(Rng& rng, int out_c, int in_c, int kh, int kw) {
    double std = std::sqrt(2.0 / (static_cast<double>(in_c) * kh * kw));
    Tensor w = Tensor::zeros({out_c, in_c, kh, kw}, true);
    for (auto& v : w.raw()) v = rng.normal(0.0, std);
    return w;
}

Tensor zero_bias(int n) { return Tensor::zeros({n}, true); }

std::string block_key(int i) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "res.b%02d", i);
    return buf;
}

}  // namespace

void init_backbone_params(ModelParams& mp, const ArchConfig& cfg, Rng& rng) {
    cfg.validate();
    auto& P = mp.params;
    auto& B = mp.buffers;

    P["trans.conv1.w"] = he_conv(rng, cfg.trans_channels, 3, 3, 3);
    P["trans.conv1.b"] = zero_bias(cfg.trans_channels);
    int group = cfg.trans_channels / cfg.slice_groups;
    P["trans.out.w"] = he_conv(rng, 1, group, 1, 1);
    P["trans.out.b"] = Tensor::full({1}, 1.0, true);

    int W = cfg.residual_width;
    for (int i = 1; i <= cfg.residual_depth; ++i) {
        std::string k = block_key(i);
        int in_c = i == 1 ? 3 : W;
        int out_c = i == cfg.residual_depth ? 3 : W;
        P[k + ".w"] = he_conv(rng, out_c, in_c, 3, 3);
        P[k + ".b"] = zero_bias(out_c);
        if (i != cfg.residual_depth) {
            P[k + ".bn.gamma"] = Tensor::full({out_c}, 1.0, true);
            P[k + ".bn.beta"] = zero_bias(out_c);
            B[k + ".bn.mean"] = Tensor::zeros({out_c});
            B[k + ".bn.var"] = Tensor::full({out_c}, 1.0);
        }
    }
}

Tensor transmission_net_forward(const ModelParams& mp, const Tensor& hazy,
                                const ArchConfig& cfg, TransDiag* diag) {
    if (hazy.ndim() != 4 || hazy.dim(1) != 3 || hazy.dim(2) != cfg.input_size ||
        hazy.dim(3) != cfg.input_size)
        throw DimensionError("transmission net expects [N,3," + std::to_string(cfg.input_size) +
                             "," + std::to_string(cfg.input_size) + "], got " +
                             shape_str(hazy.shape()));

    // unpadded 3x3 conv shrinks the tile by 2 on each axis
    Tensor f = conv2d(hazy, mp.param("trans.conv1.w"), mp.param("trans.conv1.b"), 1, 0);

    // split channels into groups and keep the elementwise winner
    int group = cfg.trans_channels / cfg.slice_groups;
    Tensor m = slice_channels(f, 0, group);
    for (int g = 1; g < cfg.slice_groups; ++g)
        m = maximum(m, slice_channels(f, g * group, group));

    Tensor pooled = pool2d(m, PoolKind::max, 7, 1, 3);
    Tensor act = relu(pooled);
    Tensor raw = conv2d(act, mp.param("trans.out.w"), mp.param("trans.out.b"), 1, 0);
    if (diag) {
        diag->preclamp_min = *std::min_element(raw.values().begin(), raw.values().end());
        diag->preclamp_max = *std::max_element(raw.values().begin(), raw.values().end());
    }
    Tensor t = clamp(raw, cfg.t_min, 1.0);
    return upsample_bilinear(t, cfg.input_size, cfg.input_size);
}

Tensor residual_net_forward(const ModelParams& mp, const Tensor& x, const ArchConfig& cfg,
                            bool training) {
    if (x.ndim() != 4 || x.dim(1) != 3)
        throw DimensionError("residual net expects [N,3,H,W], got " + shape_str(x.shape()));
    Tensor h = x;
    for (int i = 1; i <= cfg.residual_depth; ++i) {
        std::string k = block_key(i);
        h = conv2d(h, mp.param(k + ".w"), mp.param(k + ".b"), 1, 1);
        if (i != cfg.residual_depth) {
            h = batchnorm2d(h, mp.param(k + ".bn.gamma"), mp.param(k + ".bn.beta"),
                            mp.buffer(k + ".bn.mean"), mp.buffer(k + ".bn.var"), training,
                            0.1, 1e-5);
            h = relu(h);
        }
    }
    return h;  // signed; the last block has no activation
}

Tensor loss_residual(const Tensor& pred, const Tensor& ratio, const Tensor& clear) {
    if (pred.shape() != ratio.shape() || pred.shape() != clear.shape())
        throw DimensionError("loss shape mismatch: " + shape_str(pred.shape()) + " / " +
                             shape_str(ratio.shape()) + " / " + shape_str(clear.shape()));
    if (pred.ndim() != 4) throw DimensionError("loss expects [N,C,H,W]");
    Tensor d = sub(pred, sub(ratio, clear));
    return mul_scalar(sum_all(mul(d, d)), 0.5 / static_cast<double>(pred.dim(0)));
}

BackboneOut backbone_forward(const ModelParams& mp, const Tensor& hazy, const ArchConfig& cfg,
                             bool training, TransDiag* diag) {
    BackboneOut out;
    out.transmission = transmission_net_forward(mp, hazy, cfg, diag);
    out.ratio = ratio_image(hazy, out.transmission, cfg.t_min * 0.5);
    out.residual = residual_net_forward(mp, out.ratio, cfg, training);
    return out;
}

}  // namespace dhformer
