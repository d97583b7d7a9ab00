#include "dhformer/attention.hpp"

#include <cmath>

#include "dhformer/scattering.hpp"

namespace dhformer {

void EncoderConfig::validate(int input_size) const {
    if (n_layers < 1) throw ContractError("encoder needs at least 1 layer");
    if (heads < 1 || embed_dim < heads || embed_dim % heads != 0)
        throw ContractError("embed_dim must be a positive multiple of heads");
    if (!(mlp_ratio > 0)) throw ContractError("mlp_ratio must be > 0");
    if (patch < 1 || input_size % patch != 0)
        throw ContractError("patch size must divide the tile edge " +
                            std::to_string(input_size));
    if (use_global_tokens) {
        if (global_count < 1) throw ContractError("global_count must be >= 1");
        int g = static_cast<int>(std::lround(std::sqrt(static_cast<double>(global_count))));
        if (g * g != global_count || input_size % g != 0)
            throw ContractError(
                "global_count must be a perfect square whose side divides the tile edge");
    }
}

void ModelConfig::validate() const {
    arch.validate();
    enc.validate(arch.input_size);
}

namespace {

Tensor he_conv(Rng& rng, int out_c, int in_c, int kh, int kw) {
    double std = std::sqrt(2.0 / (static_cast<double>(in_c) * kh * kw));
    Tensor w = Tensor::zeros({out_c, in_c, kh, kw}, true);
    for (auto& v : w.raw()) v = rng.normal(0.0, std);
    return w;
}

Tensor he_linear(Rng& rng, int in_d, int out_d) {
    double std = std::sqrt(2.0 / static_cast<double>(in_d));
    Tensor w = Tensor::zeros({in_d, out_d}, true);
    for (auto& v : w.raw()) v = rng.normal(0.0, std);
    return w;
}

// x flattened to rows, w [D_in, D_out], bias broadcast over rows.
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
    int d_in = w.dim(0), d_out = w.dim(1);
    if (x.dim(x.ndim() - 1) != d_in)
        throw DimensionError("linear input width " + std::to_string(x.dim(x.ndim() - 1)) +
                             " != " + std::to_string(d_in));
    Shape out_shape = x.shape();
    out_shape.back() = d_out;
    int64_t rows = x.numel() / d_in;
    Tensor flat = reshape(x, {static_cast<int>(rows), d_in});
    Tensor y = add(matmul(flat, w), reshape(b, {1, d_out}));
    return reshape(y, out_shape);
}

// [b,C,S,S] -> [b,P,C*m*m], channel-major flatten per patch.
Tensor patch_tokens_raw(const Tensor& x, int m) {
    int S = x.dim(2);
    if (x.dim(3) != S || S % m != 0)
        throw DimensionError("patchify needs square input divisible by patch size, got " +
                             shape_str(x.shape()));
    int g = S / m;
    int b = x.dim(0), C = x.dim(1);
    std::vector<Tensor> rows;
    rows.reserve(static_cast<size_t>(g) * g);
    for (int gy = 0; gy < g; ++gy)
        for (int gx = 0; gx < g; ++gx) {
            Tensor crop = narrow(narrow(x, 2, gy * m, m), 3, gx * m, m);
            rows.push_back(reshape(crop, {b, 1, C * m * m}));
        }
    return rows.size() == 1 ? rows[0] : concat(rows, 1);
}

}  // namespace

void init_attention_params(ModelParams& mp, const ModelConfig& cfg, Rng& rng) {
    cfg.validate();
    auto& P = mp.params;
    const EncoderConfig& e = cfg.enc;
    int D = e.embed_dim;

    P["attn.embed3.w"] = he_conv(rng, 3, 3, 3, 3);
    P["attn.embed3.b"] = Tensor::zeros({3}, true);
    P["attn.embed5.w"] = he_conv(rng, 9, 3, 5, 5);
    P["attn.embed5.b"] = Tensor::zeros({9}, true);

    P["attn.patch.w"] = he_linear(rng, cfg.token_raw_dim(), D);
    P["attn.patch.b"] = Tensor::zeros({D}, true);
    P["attn.ln0.gamma"] = Tensor::full({D}, 1.0, true);
    P["attn.ln0.beta"] = Tensor::zeros({D}, true);

    Tensor pos = Tensor::zeros({cfg.num_patches(), D}, true);
    for (auto& v : pos.raw()) v = rng.normal(0.0, 0.02);
    P["attn.pos"] = pos;

    for (int l = 1; l <= e.n_layers; ++l) {
        std::string k = "attn.enc" + std::to_string(l);
        P[k + ".ln1.gamma"] = Tensor::full({D}, 1.0, true);
        P[k + ".ln1.beta"] = Tensor::zeros({D}, true);
        for (const char* head : {".q", ".k", ".v", ".proj"}) {
            P[k + head + ".w"] = he_linear(rng, D, D);
            P[k + head + ".b"] = Tensor::zeros({D}, true);
        }
        P[k + ".ln2.gamma"] = Tensor::full({D}, 1.0, true);
        P[k + ".ln2.beta"] = Tensor::zeros({D}, true);
        P[k + ".mlp1.w"] = he_linear(rng, D, e.mlp_hidden());
        P[k + ".mlp1.b"] = Tensor::zeros({e.mlp_hidden()}, true);
        P[k + ".mlp2.w"] = he_linear(rng, e.mlp_hidden(), D);
        P[k + ".mlp2.b"] = Tensor::zeros({D}, true);
    }

    P["attn.chan.w"] = he_linear(rng, D, 15);
    P["attn.chan.b"] = Tensor::zeros({15}, true);
    P["attn.spat.w"] = he_conv(rng, 1, 2, 7, 7);
    P["attn.spat.b"] = Tensor::zeros({1}, true);
    P["attn.fuse.w"] = he_conv(rng, 3, 30, 3, 3);
    P["attn.fuse.b"] = Tensor::zeros({3}, true);
}

ModelParams init_model(const ModelConfig& cfg, uint64_t seed, bool with_attention) {
    cfg.validate();
    ModelParams mp;
    Rng rng(mix_seed(seed, fnv1a64("model-init")));
    init_backbone_params(mp, cfg.arch, rng);
    if (with_attention) init_attention_params(mp, cfg, rng);
    for (const auto& [k, v] : mp.params)
        for (double x : v.values())
            if (!std::isfinite(x)) throw ContractError("non-finite init in " + k);
    return mp;
}

Tensor parallel_conv_embed(const ModelParams& mp, const Tensor& r_prime) {
    if (r_prime.ndim() != 4 || r_prime.dim(1) != 3)
        throw DimensionError("parallel_conv_embed expects [b,3,H,W], got " +
                             shape_str(r_prime.shape()));
    Tensor c3 = conv2d(r_prime, mp.param("attn.embed3.w"), mp.param("attn.embed3.b"), 1, 1);
    Tensor c5 = conv2d(r_prime, mp.param("attn.embed5.w"), mp.param("attn.embed5.b"), 1, 2);
    return concat_channels({r_prime, c3, c5});
}

Tensor patchify(const ModelParams& mp, const Tensor& x, const EncoderConfig& cfg,
                bool add_pos) {
    Tensor raw = patch_tokens_raw(x, cfg.patch);
    Tensor proj = linear(raw, mp.param("attn.patch.w"), mp.param("attn.patch.b"));
    Tensor t = layernorm(proj, mp.param("attn.ln0.gamma"), mp.param("attn.ln0.beta"), 1e-6);
    if (add_pos) {
        const Tensor& pos = mp.param("attn.pos");
        if (pos.dim(0) != t.dim(1))
            throw DimensionError("position embedding rows " + std::to_string(pos.dim(0)) +
                                 " != token count " + std::to_string(t.dim(1)));
        t = add(t, pos);
    }
    return t;
}

Tensor global_tokens(const ModelParams& mp, const Tensor& x, const EncoderConfig& cfg) {
    int g = static_cast<int>(std::lround(std::sqrt(static_cast<double>(cfg.global_count))));
    int S = x.dim(2);
    int cell = S / g;
    Tensor pooled = pool2d(x, PoolKind::avg, cell, cell, 0);        // [b,C,g,g]
    Tensor tiled = upsample_nearest(pooled, cfg.patch);             // [b,C,g*m,g*m]
    Tensor raw = patch_tokens_raw(tiled, cfg.patch);                // [b,g^2,C*m*m]
    Tensor proj = linear(raw, mp.param("attn.patch.w"), mp.param("attn.patch.b"));
    return layernorm(proj, mp.param("attn.ln0.gamma"), mp.param("attn.ln0.beta"), 1e-6);
}

Tensor encoder_layer(const ModelParams& mp, const Tensor& tokens, const Tensor& global_kv,
                     const EncoderConfig& cfg, int layer_index, Tensor* attn_out) {
    std::string k = "attn.enc" + std::to_string(layer_index);
    int b = tokens.dim(0), N = tokens.dim(1), D = tokens.dim(2);
    if (D != cfg.embed_dim) throw DimensionError("token width mismatch");
    int h = cfg.heads, dh = cfg.head_dim();

    Tensor all = global_kv.defined() ? concat({tokens, global_kv}, 1) : tokens;
    int M = all.dim(1);
    Tensor normed = layernorm(all, mp.param(k + ".ln1.gamma"), mp.param(k + ".ln1.beta"), 1e-6);

    Tensor q = linear(narrow(normed, 1, 0, N), mp.param(k + ".q.w"), mp.param(k + ".q.b"));
    Tensor kk = linear(normed, mp.param(k + ".k.w"), mp.param(k + ".k.b"));
    Tensor v = linear(normed, mp.param(k + ".v.w"), mp.param(k + ".v.b"));

    // [b,T,D] -> [b*h, T, dh]
    auto split_heads = [&](const Tensor& t, int T) {
        Tensor r = reshape(t, {b, T, h, dh});
        r = transpose(r, {0, 2, 1, 3});
        return reshape(r, {b * h, T, dh});
    };
    Tensor qh = split_heads(q, N);
    Tensor kh = split_heads(kk, M);
    Tensor vh = split_heads(v, M);

    Tensor scores = mul_scalar(matmul(qh, transpose(kh, {0, 2, 1})),
                               1.0 / std::sqrt(static_cast<double>(dh)));
    Tensor attn = softmax(scores, 2);  // [b*h, N, M]
    if (attn_out) *attn_out = attn.detached();

    Tensor ctx = matmul(attn, vh);  // [b*h, N, dh]
    ctx = reshape(ctx, {b, h, N, dh});
    ctx = transpose(ctx, {0, 2, 1, 3});
    ctx = reshape(ctx, {b, N, D});
    Tensor mha = linear(ctx, mp.param(k + ".proj.w"), mp.param(k + ".proj.b"));

    Tensor z = add(tokens, mha);

    Tensor n2 = layernorm(z, mp.param(k + ".ln2.gamma"), mp.param(k + ".ln2.beta"), 1e-6);
    Tensor hmid = relu(linear(n2, mp.param(k + ".mlp1.w"), mp.param(k + ".mlp1.b")));
    Tensor mlp = linear(hmid, mp.param(k + ".mlp2.w"), mp.param(k + ".mlp2.b"));
    return add(z, mlp);
}

Tensor channel_attention(const ModelParams& mp, const Tensor& x, const EncoderConfig& cfg,
                         AttnDiag* diag) {
    if (x.ndim() != 4 || x.dim(1) != 15)
        throw DimensionError("channel_attention expects [b,15,S,S], got " +
                             shape_str(x.shape()));
    int b = x.dim(0);
    Tensor t = patchify(mp, x, cfg, true);
    Tensor g;
    if (cfg.use_global_tokens) g = global_tokens(mp, x, cfg);
    for (int l = 1; l <= cfg.n_layers; ++l) {
        Tensor attn;
        t = encoder_layer(mp, t, g, cfg, l, diag ? &attn : nullptr);
        if (diag) diag->attention.push_back(attn);
    }
    Tensor pooled = reshape(reduce_mean(t, 1), {b, cfg.embed_dim});
    Tensor w = sigmoid(linear(pooled, mp.param("attn.chan.w"), mp.param("attn.chan.b")));
    if (diag) diag->channel_weights = w.detached();
    return mul(x, reshape(w, {b, 15, 1, 1}));
}

Tensor spatial_attention(const ModelParams& mp, const Tensor& x, Tensor* map_out) {
    if (x.ndim() != 4) throw DimensionError("spatial_attention expects [b,C,S,S]");
    Tensor mx = reduce_max(x, 1);
    Tensor mn = reduce_mean(x, 1);
    Tensor s = sigmoid(conv2d(concat_channels({mx, mn}), mp.param("attn.spat.w"),
                              mp.param("attn.spat.b"), 1, 3));
    if (map_out) *map_out = s.detached();
    return mul(x, s);
}

Tensor fuse(const ModelParams& mp, const Tensor& ch_out, const Tensor& sp_out) {
    if (ch_out.shape() != sp_out.shape())
        throw DimensionError("fuse shape mismatch: " + shape_str(ch_out.shape()) + " vs " +
                             shape_str(sp_out.shape()));
    Tensor cat = concat_channels({ch_out, sp_out});
    return conv2d(cat, mp.param("attn.fuse.w"), mp.param("attn.fuse.b"), 1, 1);
}

DhformerOut dhformer_forward(const ModelParams& mp, const Tensor& hazy, const ModelConfig& cfg,
                             bool training, TransDiag* trans_diag, AttnDiag* attn_diag) {
    BackboneOut bb = backbone_forward(mp, hazy, cfg.arch, training, trans_diag);
    Tensor emb = parallel_conv_embed(mp, bb.residual);
    Tensor ca = channel_attention(mp, emb, cfg.enc, attn_diag);
    Tensor sa = spatial_attention(mp, ca, attn_diag ? &attn_diag->spatial_map : nullptr);
    Tensor r = fuse(mp, ca, sa);
    DhformerOut out;
    out.transmission = bb.transmission;
    out.ratio = bb.ratio;
    out.residual_coarse = bb.residual;
    out.residual = r;
    out.dehazed = recompose(bb.ratio, r);
    return out;
}

}  // namespace dhformer
