#include "sepnorm/norm.hpp"

#include <cmath>

namespace sepnorm {

std::string norm_kind_name(NormKind k) { return k == NormKind::LN ? "LN" : "BN"; }

NormKind parse_norm_kind(const std::string& s) {
    if (s == "LN" || s == "ln") return NormKind::LN;
    if (s == "BN" || s == "bn") return NormKind::BN;
    throw ConfigError("unknown norm kind: " + s);
}

NormLayer NormLayer::make(NormKind kind, std::size_t d) {
    NormLayer p;
    p.kind = kind;
    p.gamma = Tensor::param({d}, std::vector<double>(d, 1.0));
    p.beta = Tensor::param({d}, std::vector<double>(d, 0.0));
    if (kind == NormKind::BN) {
        p.running_mean.assign(d, 0.0);
        p.running_var.assign(d, 1.0);
    }
    return p;
}

NormSchemeConfig NormSchemeConfig::share(NormKind kind) {
    return NormSchemeConfig{false, kind, kind};
}

NormSchemeConfig NormSchemeConfig::sep(NormKind cls, NormKind token) {
    return NormSchemeConfig{true, cls, token};
}

std::string NormSchemeConfig::name() const {
    if (!separate) return norm_kind_name(cls_kind);
    return norm_kind_name(cls_kind) + "+" + norm_kind_name(token_kind);
}

NormSchemeConfig NormSchemeConfig::parse(const std::string& s) {
    const auto plus = s.find('+');
    if (plus == std::string::npos) return share(parse_norm_kind(s));
    return sep(parse_norm_kind(s.substr(0, plus)), parse_norm_kind(s.substr(plus + 1)));
}

NormScheme NormScheme::make(const NormSchemeConfig& cfg, std::size_t d) {
    NormScheme s;
    s.config = cfg;
    s.g1 = NormLayer::make(cfg.cls_kind, d);
    if (cfg.separate) s.g2 = NormLayer::make(cfg.token_kind, d);
    return s;
}

LayerNormResult layer_norm_full(Graph& g, const Tensor& h, const NormLayer& p) {
    const std::size_t d = p.dim();
    if (h.shape.empty() || h.shape.back() != d)
        throw ShapeError("layer_norm: last extent of " + shape_str(h.shape) + " must be " +
                         std::to_string(d));
    const std::size_t axis = h.shape.size() - 1;
    Tensor mu = expand_last(g, reduce_mean(g, h, axis), d);
    Tensor var = expand_last(g, add_scalar(g, reduce_var(g, h, axis), p.epsilon), d);
    Tensor normalized = div(g, sub(g, h, mu), sqrt(g, var));
    Tensor out = add(g, mul(g, normalized, p.gamma), p.beta);
    return {normalized, out};
}

Tensor layer_norm(Graph& g, const Tensor& h, const NormLayer& p) {
    return layer_norm_full(g, h, p).out;
}

Tensor batch_norm(Graph& g, const Tensor& h, NormLayer& p, NormMode mode) {
    const std::size_t d = p.dim();
    if (h.shape.size() != 2 || h.shape[1] != d)
        throw ShapeError("batch_norm: expected [N," + std::to_string(d) + "], got " +
                         shape_str(h.shape));
    const std::size_t N = h.shape[0];
    if (mode == NormMode::Train) {
        if (N < 2) throw ContractError("batch_norm: train mode needs batch >= 2");
        Tensor mu = reduce_mean(g, h, 0);
        Tensor var = reduce_var(g, h, 0);
        Tensor normalized = div(g, sub(g, h, mu), sqrt(g, add_scalar(g, var, p.epsilon)));
        // EMA update on the batch statistics just computed
        for (std::size_t i = 0; i < d; ++i) {
            p.running_mean[i] = (1.0 - p.momentum) * p.running_mean[i] + p.momentum * mu.at(i);
            p.running_var[i] = (1.0 - p.momentum) * p.running_var[i] + p.momentum * var.at(i);
        }
        return add(g, mul(g, normalized, p.gamma), p.beta);
    }
    std::vector<double> denom(d);
    for (std::size_t i = 0; i < d; ++i) denom[i] = std::sqrt(p.running_var[i] + p.epsilon);
    Tensor mu = Tensor::from({d}, std::vector<double>(p.running_mean));
    Tensor sd = Tensor::from({d}, std::move(denom));
    Tensor normalized = div(g, sub(g, h, mu), sd);
    return add(g, mul(g, normalized, p.gamma), p.beta);
}

namespace {

// applies one layer to a set of position vectors [N, d]
Tensor apply_layer(Graph& g, const Tensor& rows, NormLayer& layer, NormMode mode) {
    if (layer.kind == NormKind::LN) return layer_norm(g, rows, layer);
    return batch_norm(g, rows, layer, mode);
}

}  // namespace

Tensor apply_norm(Graph& g, const Tensor& H, NormScheme& scheme, NormMode mode) {
    if (H.shape.size() != 3)
        throw ShapeError("apply_norm: expected [B,S,d], got " + shape_str(H.shape));
    const std::size_t B = H.shape[0], S = H.shape[1], d = H.shape[2];
    if (S < 2) throw ContractError("apply_norm: sequence has no token positions");
    if (!scheme.config.separate) {
        if (scheme.g1.kind == NormKind::LN) return layer_norm(g, H, scheme.g1);
        // ShareNorm BN pools all B*S position vectors as the batch
        Tensor flat = reshape(g, H, {B * S, d});
        return reshape(g, batch_norm(g, flat, scheme.g1, mode), {B, S, d});
    }
    Tensor cls = reshape(g, slice(g, H, 1, 0, 1), {B, d});
    Tensor cls_out = reshape(g, apply_layer(g, cls, scheme.g1, mode), {B, 1, d});
    Tensor tokens = slice(g, H, 1, 1, S - 1);
    Tensor tok_out;
    if (scheme.g2->kind == NormKind::LN) {
        tok_out = layer_norm(g, tokens, *scheme.g2);
    } else {
        Tensor flat = reshape(g, tokens, {B * (S - 1), d});
        tok_out = reshape(g, batch_norm(g, flat, *scheme.g2, mode), {B, S - 1, d});
    }
    return concat(g, {cls_out, tok_out}, 1);
}

std::pair<std::vector<double>, std::vector<double>> norm_param_grads_closed_form(
    const Tensor& normalized, const Tensor& upstream) {
    if (normalized.shape != upstream.shape)
        throw ShapeError("norm_param_grads_closed_form: shapes " + shape_str(normalized.shape) +
                         " and " + shape_str(upstream.shape) + " differ");
    if (normalized.shape.empty()) throw ShapeError("norm_param_grads_closed_form: empty shape");
    const std::size_t d = normalized.shape.back();
    const std::size_t rows = normalized.size() / d;
    std::vector<double> dgamma(d, 0.0), dbeta(d, 0.0);
    for (std::size_t l = 0; l < rows; ++l)
        for (std::size_t i = 0; i < d; ++i) {
            dgamma[i] += upstream.at(l * d + i) * normalized.at(l * d + i);
            dbeta[i] += upstream.at(l * d + i);
        }
    return {dgamma, dbeta};
}

}  // namespace sepnorm
