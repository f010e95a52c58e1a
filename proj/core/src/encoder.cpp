#include "sepnorm/encoder.hpp"

#include <cmath>

namespace sepnorm {

void EncoderConfig::validate() const {
    if (patch_side == 0 || image_side % patch_side != 0)
        throw ConfigError("image_side " + std::to_string(image_side) +
                          " not divisible by patch_side " + std::to_string(patch_side));
    if (heads == 0 || dim % heads != 0)
        throw ConfigError("dim " + std::to_string(dim) + " not divisible by heads " +
                          std::to_string(heads));
    if (depth < 1) throw ConfigError("depth must be >= 1");
}

Tensor patchify(const Tensor& image, std::size_t patch_side) {
    if (image.shape.size() != 2 || image.shape[0] != image.shape[1])
        throw ShapeError("patchify: expected square image, got " + shape_str(image.shape));
    const std::size_t side = image.shape[0];
    if (patch_side == 0 || side % patch_side != 0)
        throw ConfigError("patchify: image side " + std::to_string(side) +
                          " not divisible by patch side " + std::to_string(patch_side));
    const std::size_t grid = side / patch_side;
    const std::size_t L = grid * grid, pp = patch_side * patch_side;
    Tensor out = Tensor::zeros({L, pp});
    for (std::size_t gy = 0; gy < grid; ++gy)
        for (std::size_t gx = 0; gx < grid; ++gx)
            for (std::size_t py = 0; py < patch_side; ++py)
                for (std::size_t px = 0; px < patch_side; ++px)
                    out.at((gy * grid + gx) * pp + py * patch_side + px) =
                        image.at((gy * patch_side + py) * side + gx * patch_side + px);
    return out;
}

Tensor unpatchify(const Tensor& patches, std::size_t image_side, std::size_t patch_side) {
    const std::size_t grid = image_side / patch_side;
    const std::size_t L = grid * grid, pp = patch_side * patch_side;
    if (patches.shape != Shape{L, pp})
        throw ShapeError("unpatchify: expected " + shape_str({L, pp}) + ", got " +
                         shape_str(patches.shape));
    Tensor out = Tensor::zeros({image_side, image_side});
    for (std::size_t gy = 0; gy < grid; ++gy)
        for (std::size_t gx = 0; gx < grid; ++gx)
            for (std::size_t py = 0; py < patch_side; ++py)
                for (std::size_t px = 0; px < patch_side; ++px)
                    out.at((gy * patch_side + py) * image_side + gx * patch_side + px) =
                        patches.at((gy * grid + gx) * pp + py * patch_side + px);
    return out;
}

namespace {

Tensor init_weight(Rng& rng, Shape shape, double std_dev) {
    std::vector<double> v(numel(shape));
    for (double& x : v) x = rng.truncated_normal(std_dev);
    return Tensor::param(std::move(shape), std::move(v));
}

Tensor init_zeros(Shape shape) {
    return Tensor::param(std::move(shape), std::vector<double>(numel(shape), 0.0));
}

void collect_layer(std::vector<std::pair<std::string, Tensor*>>& out, const std::string& prefix,
                   NormLayer& layer) {
    out.emplace_back(prefix + ".gamma", &layer.gamma);
    out.emplace_back(prefix + ".beta", &layer.beta);
}

void collect_scheme(std::vector<std::pair<std::string, Tensor*>>& out, const std::string& prefix,
                    NormScheme& scheme) {
    collect_layer(out, prefix + ".g1", scheme.g1);
    if (scheme.g2) collect_layer(out, prefix + ".g2", *scheme.g2);
}

void collect_buffers(std::vector<std::pair<std::string, std::vector<double>*>>& out,
                     const std::string& prefix, NormScheme& scheme) {
    if (scheme.g1.kind == NormKind::BN) {
        out.emplace_back(prefix + ".g1.running_mean", &scheme.g1.running_mean);
        out.emplace_back(prefix + ".g1.running_var", &scheme.g1.running_var);
    }
    if (scheme.g2 && scheme.g2->kind == NormKind::BN) {
        out.emplace_back(prefix + ".g2.running_mean", &scheme.g2->running_mean);
        out.emplace_back(prefix + ".g2.running_var", &scheme.g2->running_var);
    }
}

}  // namespace

Encoder::Encoder(const EncoderConfig& cfg) : cfg_(cfg) {
    const std::size_t d = cfg.dim, pp = cfg.patch_pixels(), L = cfg.num_patches();
    const std::size_t hidden = static_cast<std::size_t>(cfg.mlp_ratio * d);
    Rng rng(cfg.seed);
    patch_proj_w = init_weight(rng, {pp, d}, 0.02);
    patch_proj_b = init_zeros({d});
    cls_embed = init_weight(rng, {d}, 0.02);
    pos_embed = init_weight(rng, {L + 1, d}, 0.02);
    blocks.reserve(cfg.depth);
    for (std::size_t b = 0; b < cfg.depth; ++b) {
        AttentionBlock blk;
        blk.wq = init_weight(rng, {d, d}, 0.02);
        blk.bq = init_zeros({d});
        blk.wk = init_weight(rng, {d, d}, 0.02);
        blk.bk = init_zeros({d});
        blk.wv = init_weight(rng, {d, d}, 0.02);
        blk.bv = init_zeros({d});
        blk.wo = init_weight(rng, {d, d}, 0.02);
        blk.bo = init_zeros({d});
        blk.w1 = init_weight(rng, {d, hidden}, 0.02);
        blk.b1 = init_zeros({hidden});
        blk.w2 = init_weight(rng, {hidden, d}, 0.02);
        blk.b2 = init_zeros({d});
        blk.norm1 = NormScheme::make(cfg.norm_scheme, d);
        blk.norm2 = NormScheme::make(cfg.norm_scheme, d);
        blocks.push_back(std::move(blk));
    }
    final_norm = NormScheme::make(cfg.norm_scheme, d);
}

Tensor transformer_block(Graph& g, const Tensor& H, AttentionBlock& block, std::size_t heads,
                         NormMode mode) {
    const std::size_t B = H.shape[0], S = H.shape[1], d = H.shape[2];
    if (S < 2) throw ContractError("attention_block: sequence length must be >= 2");
    const std::size_t dh = d / heads;

    Tensor n1 = apply_norm(g, H, block.norm1, mode);
    Tensor flat = reshape(g, n1, {B * S, d});
    Tensor q = split_heads(g, reshape(g, add(g, matmul(g, flat, block.wq), block.bq), {B, S, d}), heads);
    Tensor k = split_heads(g, reshape(g, add(g, matmul(g, flat, block.wk), block.bk), {B, S, d}), heads);
    Tensor v = split_heads(g, reshape(g, add(g, matmul(g, flat, block.wv), block.bv), {B, S, d}), heads);
    Tensor scores = mul_scalar(g, batched_matmul(g, q, transpose_last2(g, k)),
                               1.0 / std::sqrt(static_cast<double>(dh)));
    Tensor att = softmax(g, scores, 2);
    Tensor ctx = merge_heads(g, batched_matmul(g, att, v), heads);
    Tensor proj = reshape(
        g, add(g, matmul(g, reshape(g, ctx, {B * S, d}), block.wo), block.bo), {B, S, d});
    Tensor h1 = add(g, H, proj);

    Tensor n2 = apply_norm(g, h1, block.norm2, mode);
    Tensor flat2 = reshape(g, n2, {B * S, d});
    Tensor hidden = gelu(g, add(g, matmul(g, flat2, block.w1), block.b1));
    Tensor mlp = reshape(g, add(g, matmul(g, hidden, block.w2), block.b2), {B, S, d});
    return add(g, h1, mlp);
}

Tensor Encoder::attention_block(Graph& g, const Tensor& H, AttentionBlock& block, NormMode mode) {
    return transformer_block(g, H, block, cfg_.heads, mode);
}

EncodeResult Encoder::encode(Graph& g, const Tensor& batch,
                             const std::vector<std::vector<std::size_t>>& kept, NormMode mode) {
    if (batch.shape.size() != 3 || batch.shape[1] != cfg_.image_side ||
        batch.shape[2] != cfg_.image_side)
        throw ShapeError("encode: expected [B," + std::to_string(cfg_.image_side) + "," +
                         std::to_string(cfg_.image_side) + "], got " + shape_str(batch.shape));
    const std::size_t B = batch.shape[0], d = cfg_.dim, pp = cfg_.patch_pixels();
    const std::size_t L = cfg_.num_patches();

    std::vector<std::vector<std::size_t>> kept_idx = kept;
    if (kept_idx.empty()) {
        std::vector<std::size_t> all(L);
        for (std::size_t i = 0; i < L; ++i) all[i] = i;
        kept_idx.assign(B, all);
    }
    if (kept_idx.size() != B) throw ContractError("encode: kept-index batch size mismatch");
    const std::size_t K = kept_idx[0].size();
    if (K == 0) throw ContractError("encode: empty kept set");

    // patch extraction happens outside the graph; pixels are constants
    std::vector<double> pdata(B * K * pp);
    const std::size_t side = cfg_.image_side;
    for (std::size_t b = 0; b < B; ++b) {
        Tensor img = Tensor::from({side, side},
                                  std::vector<double>(batch.data->begin() + b * side * side,
                                                      batch.data->begin() + (b + 1) * side * side));
        Tensor patches = patchify(img, cfg_.patch_side);
        for (std::size_t e = 0; e < K; ++e)
            std::copy(patches.data->begin() + kept_idx[b][e] * pp,
                      patches.data->begin() + (kept_idx[b][e] + 1) * pp,
                      pdata.begin() + (b * K + e) * pp);
    }
    Tensor patches = Tensor::from({B, K, pp}, std::move(pdata));

    Tensor embedded = reshape(
        g, add(g, matmul(g, reshape(g, patches, {B * K, pp}), patch_proj_w), patch_proj_b),
        {B, K, d});
    Tensor cls = tile_rows(g, cls_embed, B);
    Tensor H = concat(g, {cls, embedded}, 1);

    // positional rows: 0 for [CLS], kept_idx + 1 for tokens
    std::vector<std::vector<std::size_t>> pos_idx(B);
    for (std::size_t b = 0; b < B; ++b) {
        pos_idx[b].push_back(0);
        for (std::size_t e = 0; e < K; ++e) pos_idx[b].push_back(kept_idx[b][e] + 1);
    }
    H = add(g, H, gather_rows_batched(g, pos_embed, pos_idx));

    for (AttentionBlock& blk : blocks) H = attention_block(g, H, blk, mode);
    H = apply_norm(g, H, final_norm, mode);

    EncodeResult r;
    r.cls = reshape(g, slice(g, H, 1, 0, 1), {B, d});
    r.tokens = slice(g, H, 1, 1, K);
    return r;
}

std::vector<std::pair<std::string, Tensor*>> Encoder::parameters() {
    std::vector<std::pair<std::string, Tensor*>> out;
    out.emplace_back("patch_proj.w", &patch_proj_w);
    out.emplace_back("patch_proj.b", &patch_proj_b);
    out.emplace_back("cls_embed", &cls_embed);
    out.emplace_back("pos_embed", &pos_embed);
    for (std::size_t b = 0; b < blocks.size(); ++b) {
        const std::string p = "block" + std::to_string(b);
        AttentionBlock& blk = blocks[b];
        out.emplace_back(p + ".attn.wq", &blk.wq);
        out.emplace_back(p + ".attn.bq", &blk.bq);
        out.emplace_back(p + ".attn.wk", &blk.wk);
        out.emplace_back(p + ".attn.bk", &blk.bk);
        out.emplace_back(p + ".attn.wv", &blk.wv);
        out.emplace_back(p + ".attn.bv", &blk.bv);
        out.emplace_back(p + ".attn.wo", &blk.wo);
        out.emplace_back(p + ".attn.bo", &blk.bo);
        out.emplace_back(p + ".mlp.w1", &blk.w1);
        out.emplace_back(p + ".mlp.b1", &blk.b1);
        out.emplace_back(p + ".mlp.w2", &blk.w2);
        out.emplace_back(p + ".mlp.b2", &blk.b2);
        collect_scheme(out, p + ".norm1", blk.norm1);
        collect_scheme(out, p + ".norm2", blk.norm2);
    }
    collect_scheme(out, "final_norm", final_norm);
    return out;
}

std::vector<std::pair<std::string, std::vector<double>*>> Encoder::buffers() {
    std::vector<std::pair<std::string, std::vector<double>*>> out;
    for (std::size_t b = 0; b < blocks.size(); ++b) {
        const std::string p = "block" + std::to_string(b);
        collect_buffers(out, p + ".norm1", blocks[b].norm1);
        collect_buffers(out, p + ".norm2", blocks[b].norm2);
    }
    collect_buffers(out, "final_norm", final_norm);
    return out;
}

}  // namespace sepnorm
