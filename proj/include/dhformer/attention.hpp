#pragma once
#include <vector>

#include "dhformer/backbone.hpp"

namespace dhformer {

// Second-stage refinement of the coarse residual R': a 15-channel embedding
// of R' runs through a small ViT encoder whose queries are local patch
// tokens and whose keys/values additionally see globally pooled summary
// tokens. Token pooling yields channel attention; channelwise max/mean maps
// yield spatial attention; their concatenation is fused back to a 3-channel
// refined residual R.

struct EncoderConfig {
    int embed_dim = 64;
    int n_layers = 2;
    int heads = 4;
    double mlp_ratio = 2.0;
    bool use_global_tokens = true;
    int global_count = 4;  // perfect square; grid side must divide the tile
    int patch = 4;         // m; must divide the tile edge

    int head_dim() const { return embed_dim / heads; }
    int mlp_hidden() const { return static_cast<int>(embed_dim * mlp_ratio + 0.5); }
    void validate(int input_size) const;
};

struct ModelConfig {
    ArchConfig arch;
    EncoderConfig enc;

    void validate() const;
    int grid() const { return arch.input_size / enc.patch; }
    int num_patches() const { return grid() * grid(); }
    int token_raw_dim() const { return 15 * enc.patch * enc.patch; }
};

// Backbone parameters plus (optionally) the attention stage. The attention
// stage is omitted for the residual-only ablation.
ModelParams init_model(const ModelConfig& cfg, uint64_t seed, bool with_attention = true);
void init_attention_params(ModelParams& mp, const ModelConfig& cfg, Rng& rng);

// R' [b,3,S,S] -> [b,15,S,S]: channels ordered [R'(3), conv3x3(R')(3),
// conv5x5(R')(9)], spatial size preserved.
Tensor parallel_conv_embed(const ModelParams& mp, const Tensor& r_prime);

// m x m x 15 patches flattened (channel-major), projected to embed_dim and
// layer-normalized; position embeddings added only when add_pos is set.
// The input normalization makes tokens invariant to positive rescaling of x.
Tensor patchify(const ModelParams& mp, const Tensor& x, const EncoderConfig& cfg,
                bool add_pos = true);

// Cell means over a g x g grid (g^2 = global_count), tiled to patch size and
// pushed through the same projection as patchify; no position embeddings.
Tensor global_tokens(const ModelParams& mp, const Tensor& x, const EncoderConfig& cfg);

struct AttnDiag {
    // per encoder layer: post-softmax attention [b*heads, N, N+G]
    std::vector<Tensor> attention;
    Tensor channel_weights;  // [b,15], in (0,1)
    Tensor spatial_map;      // [b,1,S,S], in (0,1)
};

// Pre-norm block: T' = MHA(LN(T)) + T; T_out = MLP(LN(T')) + T'. Queries
// come from local tokens only; keys/values span locals plus global_kv when
// it is defined. Globals are read-only context: they are not updated here.
Tensor encoder_layer(const ModelParams& mp, const Tensor& tokens, const Tensor& global_kv,
                     const EncoderConfig& cfg, int layer_index, Tensor* attn_out = nullptr);

// tokens -> encoder stack -> mean over tokens -> linear D->15 -> sigmoid;
// output is x scaled per channel.
Tensor channel_attention(const ModelParams& mp, const Tensor& x, const EncoderConfig& cfg,
                         AttnDiag* diag = nullptr);

// Channelwise [max, mean] maps -> conv 7x7 (pad 3) -> sigmoid; output is x
// scaled per pixel.
Tensor spatial_attention(const ModelParams& mp, const Tensor& x, Tensor* map_out = nullptr);

// concat(ch_out, sp_out) (30 channels) -> conv 3x3 (pad 1) -> signed
// 3-channel refined residual.
Tensor fuse(const ModelParams& mp, const Tensor& ch_out, const Tensor& sp_out);

struct DhformerOut {
    Tensor dehazed;          // J_hat, [b,3,S,S], clamped to [0,1]
    Tensor transmission;     // t
    Tensor ratio;            // K
    Tensor residual_coarse;  // R'
    Tensor residual;         // R
};

DhformerOut dhformer_forward(const ModelParams& mp, const Tensor& hazy, const ModelConfig& cfg,
                             bool training, TransDiag* trans_diag = nullptr,
                             AttnDiag* attn_diag = nullptr);

}  // namespace dhformer
