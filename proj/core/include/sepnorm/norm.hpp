#pragma once

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "sepnorm/tensor.hpp"

namespace sepnorm {

enum class NormKind { LN, BN };
enum class NormMode { Train, Eval };

std::string norm_kind_name(NormKind k);
NormKind parse_norm_kind(const std::string& s);

// One normalization layer: learned affine plus, for BN, running statistics
// maintained as an exponential moving average of the batch statistics.
struct NormLayer {
    NormKind kind = NormKind::LN;
    Tensor gamma;  // [d]
    Tensor beta;   // [d]
    std::vector<double> running_mean;  // BN only
    std::vector<double> running_var;   // BN only
    double momentum = 0.1;
    double epsilon = 1e-5;

    static NormLayer make(NormKind kind, std::size_t d);
    std::size_t dim() const { return gamma.shape[0]; }
};

// Which normalization serves the [CLS] position vs the token positions.
// ShareNorm: one layer for all positions. SepNorm: disjoint g1 ([CLS])
// and g2 (tokens); position 0 is [CLS] by convention.
struct NormSchemeConfig {
    bool separate = false;
    NormKind cls_kind = NormKind::LN;
    NormKind token_kind = NormKind::LN;

    static NormSchemeConfig share(NormKind kind);
    static NormSchemeConfig sep(NormKind cls, NormKind token);
    std::string name() const;  // "LN", "BN", "BN+LN", ...
    static NormSchemeConfig parse(const std::string& s);
    bool operator==(const NormSchemeConfig&) const = default;
};

// A norm site instantiated with parameters.
struct NormScheme {
    NormSchemeConfig config;
    NormLayer g1;                  // [CLS] layer, or the single shared layer
    std::optional<NormLayer> g2;   // token layer under SepNorm

    static NormScheme make(const NormSchemeConfig& cfg, std::size_t d);
};

struct LayerNormResult {
    Tensor normalized;  // pre-affine (h - mu) / sqrt(var + eps)
    Tensor out;         // gamma * normalized + beta
};

// normalizes the last axis of h ([..., d])
LayerNormResult layer_norm_full(Graph& g, const Tensor& h, const NormLayer& p);
Tensor layer_norm(Graph& g, const Tensor& h, const NormLayer& p);

// h is [N, d]; train mode normalizes by batch statistics and updates the
// running EMA, eval mode normalizes by running statistics with no update
Tensor batch_norm(Graph& g, const Tensor& h, NormLayer& p, NormMode mode);

// H is [B, S, d] with [CLS] at position 0 of every sequence
Tensor apply_norm(Graph& g, const Tensor& H, NormScheme& scheme, NormMode mode);

// Closed-form LN affine-parameter gradients summed over positions:
// dgamma_i = sum_l upstream[l,i] * normalized[l,i], dbeta_i = sum_l upstream[l,i].
// Plain-value oracle for checking autodiff.
std::pair<std::vector<double>, std::vector<double>> norm_param_grads_closed_form(
    const Tensor& normalized, const Tensor& upstream);

}  // namespace sepnorm
