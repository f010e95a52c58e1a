#include "sepnorm/objectives.hpp"

#include <cmath>

namespace sepnorm {

std::string uniformity_target_name(UniformityTarget t) {
    switch (t) {
        case UniformityTarget::None: return "none";
        case UniformityTarget::Cls: return "cls";
        case UniformityTarget::Token: return "token";
        case UniformityTarget::Both: return "both";
    }
    return "none";
}

UniformityTarget parse_uniformity_target(const std::string& s) {
    if (s == "none") return UniformityTarget::None;
    if (s == "cls") return UniformityTarget::Cls;
    if (s == "token") return UniformityTarget::Token;
    if (s == "both") return UniformityTarget::Both;
    throw ConfigError("unknown uniformity target: " + s);
}

void ObjectiveConfig::validate(std::size_t num_patches) const {
    if (mask_ratio < 0.0 || mask_ratio >= 1.0)
        throw ConfigError("mask_ratio must be in [0,1)");
    const auto masked = static_cast<std::size_t>(std::lround(mask_ratio * num_patches));
    if (masked >= num_patches)
        throw ConfigError("mask_ratio leaves no token unmasked");
    if (lambda < 0.0) throw ConfigError("lambda must be >= 0");
    if (decoder_depth == 0 || decoder_dim == 0 || decoder_dim % 2 != 0)
        throw ConfigError("decoder_depth must be >= 1 and decoder_dim even");
}

MaskPlan sample_mask(std::size_t batch, std::size_t num_patches, double mask_ratio, Rng& rng) {
    if (mask_ratio < 0.0 || mask_ratio >= 1.0)
        throw ContractError("sample_mask: mask_ratio must be in [0,1)");
    const auto num_masked = static_cast<std::size_t>(std::lround(mask_ratio * num_patches));
    if (num_masked >= num_patches)
        throw ContractError("sample_mask: ratio would mask every token");
    MaskPlan plan;
    plan.kept.resize(batch);
    plan.masked.resize(batch);
    for (std::size_t b = 0; b < batch; ++b) {
        plan.masked[b] = rng.sample_without_replacement(num_patches, num_masked);
        std::vector<char> is_masked(num_patches, 0);
        for (std::size_t i : plan.masked[b]) is_masked[i] = 1;
        for (std::size_t i = 0; i < num_patches; ++i)
            if (!is_masked[i]) plan.kept[b].push_back(i);
    }
    return plan;
}

Decoder::Decoder(std::size_t encoder_dim, std::size_t num_patches, std::size_t patch_pixels,
                 const ObjectiveConfig& cfg, std::uint64_t seed)
    : num_patches_(num_patches), heads_(2) {
    cfg.validate(num_patches);
    const std::size_t dd = cfg.decoder_dim;
    Rng rng(seed);
    auto weight = [&rng](Shape shape) {
        std::vector<double> v(numel(shape));
        for (double& x : v) x = rng.truncated_normal(0.02);
        return Tensor::param(std::move(shape), std::move(v));
    };
    auto zeros = [](Shape shape) {
        return Tensor::param(std::move(shape), std::vector<double>(numel(shape), 0.0));
    };
    embed_w = weight({encoder_dim, dd});
    embed_b = zeros({dd});
    mask_embed = weight({dd});
    pos_embed = weight({num_patches, dd});
    const std::size_t hidden = 2 * dd;
    const NormSchemeConfig ln = NormSchemeConfig::share(NormKind::LN);
    for (std::size_t b = 0; b < cfg.decoder_depth; ++b) {
        AttentionBlock blk;
        blk.wq = weight({dd, dd});
        blk.bq = zeros({dd});
        blk.wk = weight({dd, dd});
        blk.bk = zeros({dd});
        blk.wv = weight({dd, dd});
        blk.bv = zeros({dd});
        blk.wo = weight({dd, dd});
        blk.bo = zeros({dd});
        blk.w1 = weight({dd, hidden});
        blk.b1 = zeros({hidden});
        blk.w2 = weight({hidden, dd});
        blk.b2 = zeros({dd});
        blk.norm1 = NormScheme::make(ln, dd);
        blk.norm2 = NormScheme::make(ln, dd);
        blocks.push_back(std::move(blk));
    }
    final_norm = NormScheme::make(ln, dd);
    head_w = weight({dd, patch_pixels});
    head_b = zeros({patch_pixels});
}

Tensor Decoder::predict(Graph& g, const Tensor& tokens, const MaskPlan& plan) {
    const std::size_t B = tokens.shape[0], K = tokens.shape[1], d = tokens.shape[2];
    const std::size_t dd = embed_w.shape[1], L = num_patches_;
    Tensor emb = reshape(
        g, add(g, matmul(g, reshape(g, tokens, {B * K, d}), embed_w), embed_b), {B, K, dd});
    Tensor seq = scatter_positions(g, emb, plan.kept, L, mask_embed);
    seq = add(g, seq, pos_embed);  // [L,dd] broadcasts over the batch
    for (AttentionBlock& blk : blocks) seq = transformer_block(g, seq, blk, heads_, NormMode::Train);
    seq = apply_norm(g, seq, final_norm, NormMode::Train);
    const std::size_t pp = head_w.shape[1];
    return reshape(g, add(g, matmul(g, reshape(g, seq, {B * L, dd}), head_w), head_b), {B, L, pp});
}

std::vector<std::pair<std::string, Tensor*>> Decoder::parameters() {
    std::vector<std::pair<std::string, Tensor*>> out;
    out.emplace_back("dec.embed.w", &embed_w);
    out.emplace_back("dec.embed.b", &embed_b);
    out.emplace_back("dec.mask_embed", &mask_embed);
    out.emplace_back("dec.pos_embed", &pos_embed);
    for (std::size_t b = 0; b < blocks.size(); ++b) {
        const std::string p = "dec.block" + std::to_string(b);
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
        out.emplace_back(p + ".norm1.g1.gamma", &blk.norm1.g1.gamma);
        out.emplace_back(p + ".norm1.g1.beta", &blk.norm1.g1.beta);
        out.emplace_back(p + ".norm2.g1.gamma", &blk.norm2.g1.gamma);
        out.emplace_back(p + ".norm2.g1.beta", &blk.norm2.g1.beta);
    }
    out.emplace_back("dec.final_norm.g1.gamma", &final_norm.g1.gamma);
    out.emplace_back("dec.final_norm.g1.beta", &final_norm.g1.beta);
    out.emplace_back("dec.head.w", &head_w);
    out.emplace_back("dec.head.b", &head_b);
    return out;
}

namespace {

// true pixel patches at masked positions, as a constant
Tensor masked_targets(const Tensor& images, const MaskPlan& plan, std::size_t patch_side) {
    const std::size_t B = images.shape[0], side = images.shape[1];
    const std::size_t M = plan.masked[0].size();
    const std::size_t pp = patch_side * patch_side;
    std::vector<double> t(B * M * pp);
    for (std::size_t b = 0; b < B; ++b) {
        Tensor img = Tensor::from({side, side},
                                  std::vector<double>(images.data->begin() + b * side * side,
                                                      images.data->begin() + (b + 1) * side * side));
        Tensor patches = patchify(img, patch_side);
        for (std::size_t e = 0; e < M; ++e)
            std::copy(patches.data->begin() + plan.masked[b][e] * pp,
                      patches.data->begin() + (plan.masked[b][e] + 1) * pp,
                      t.begin() + (b * M + e) * pp);
    }
    return Tensor::from({B, M, pp}, std::move(t));
}

Tensor masked_mse(Graph& g, const Tensor& pred, const Tensor& images, const MaskPlan& plan,
                  std::size_t patch_side) {
    if (plan.masked.empty() || plan.masked[0].empty())
        throw ContractError("mae_loss: no masked positions");
    const std::size_t B = pred.shape[0];
    const std::size_t M = plan.masked[0].size();
    const std::size_t pp = patch_side * patch_side;
    Tensor pred_masked = gather_positions(g, pred, plan.masked);
    Tensor target = masked_targets(images, plan, patch_side);
    Tensor diff = sub(g, pred_masked, target);
    return mul_scalar(g, sum_all(g, mul(g, diff, diff)),
                      1.0 / static_cast<double>(B * M * pp));
}

// squared pairwise distances between rows, [N,d] -> [N,N]
Tensor pairwise_sqdist(Graph& g, const Tensor& x) {
    g.check_input(x, "pairwise_sqdist");
    const std::size_t N = x.shape[0], d = x.shape[1];
    const bool track = x.requires_grad;
    Tensor out = g.make_output({N, N}, track);
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t m = 0; m < N; ++m) {
            double acc = 0.0;
            for (std::size_t i = 0; i < d; ++i) {
                const double dv = (*x.data)[n * d + i] - (*x.data)[m * d + i];
                acc += dv * dv;
            }
            (*out.data)[n * N + m] = acc;
        }
    if (track) {
        g.record([=, xdata = x.data, xgrad = x.grad, ograd = out.grad]() {
            for (std::size_t n = 0; n < N; ++n)
                for (std::size_t m = 0; m < N; ++m) {
                    const double go = (*ograd)[n * N + m];
                    if (go == 0.0) continue;
                    for (std::size_t i = 0; i < d; ++i) {
                        const double dv = (*xdata)[n * d + i] - (*xdata)[m * d + i];
                        (*xgrad)[n * d + i] += 2.0 * go * dv;
                        (*xgrad)[m * d + i] -= 2.0 * go * dv;
                    }
                }
        });
    }
    return out;
}

}  // namespace

Tensor mae_loss(Graph& g, const Tensor& images, Encoder& encoder, Decoder& decoder,
                const MaskPlan& plan, NormMode mode) {
    EncodeResult enc = encoder.encode(g, images, plan.kept, mode);
    Tensor pred = decoder.predict(g, enc.tokens, plan);
    return masked_mse(g, pred, images, plan, encoder.config().patch_side);
}

Tensor uniformity_loss(Graph& g, const Tensor& embeddings) {
    if (embeddings.shape.size() != 2)
        throw ShapeError("uniformity_loss: expected [N,d], got " + shape_str(embeddings.shape));
    const std::size_t N = embeddings.shape[0], d = embeddings.shape[1];
    if (N < 2) throw ContractError("uniformity_loss: need at least 2 embeddings");
    for (std::size_t n = 0; n < N; ++n) {
        double s = 0.0;
        for (std::size_t i = 0; i < d; ++i) {
            const double v = embeddings.at(n * d + i);
            s += v * v;
        }
        if (s == 0.0) throw ContractError("uniformity_loss: zero-norm row " + std::to_string(n));
    }
    Tensor norms = sqrt(g, reduce_sum(g, mul(g, embeddings, embeddings), 1));
    Tensor unit = div(g, embeddings, expand_last(g, norms, d));
    Tensor dist = pairwise_sqdist(g, unit);
    Tensor kern = exp(g, mul_scalar(g, dist, -2.0));
    // strict upper triangle picks each unordered pair once
    std::vector<double> mask(N * N, 0.0);
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t m = n + 1; m < N; ++m) mask[n * N + m] = 1.0;
    Tensor pair_sum = sum_all(g, mul(g, kern, Tensor::from({N, N}, std::move(mask))));
    return log(g, mul_scalar(g, pair_sum, 2.0 / (static_cast<double>(N) * (N - 1))));
}

UMaeResult u_mae_loss(Graph& g, const Tensor& images, Encoder& encoder, Decoder& decoder,
                      const MaskPlan& plan, const ObjectiveConfig& cfg, NormMode mode) {
    EncodeResult enc = encoder.encode(g, images, plan.kept, mode);
    Tensor pred = decoder.predict(g, enc.tokens, plan);
    Tensor l_mae = masked_mse(g, pred, images, plan, encoder.config().patch_side);

    UMaeResult r;
    r.l_mae = l_mae;
    const bool active = cfg.lambda > 0.0 && cfg.uniformity_target != UniformityTarget::None;
    if (!active) {
        r.l_u = Tensor::scalar(0.0);
        r.total = l_mae;  // bit-exact reduction to L_MAE
        return r;
    }
    const std::size_t B = images.shape[0];
    if (B < 2) throw ContractError("u_mae_loss: uniformity target needs batch >= 2");
    const std::size_t K = enc.tokens.shape[1], d = enc.tokens.shape[2];
    Tensor l_u;
    switch (cfg.uniformity_target) {
        case UniformityTarget::Cls:
            l_u = uniformity_loss(g, enc.cls);
            break;
        case UniformityTarget::Token:
            l_u = uniformity_loss(g, reshape(g, enc.tokens, {B * K, d}));
            break;
        case UniformityTarget::Both:
            l_u = add(g, uniformity_loss(g, enc.cls),
                      uniformity_loss(g, reshape(g, enc.tokens, {B * K, d})));
            break;
        default:
            throw ContractError("u_mae_loss: unreachable target");
    }
    r.l_u = l_u;
    r.total = add(g, l_mae, mul_scalar(g, l_u, cfg.lambda));
    return r;
}

}  // namespace sepnorm
