#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "sepnorm/norm.hpp"
#include "sepnorm/rng.hpp"
#include "sepnorm/tensor.hpp"

namespace sepnorm {

struct EncoderConfig {
    std::size_t image_side = 16;
    std::size_t patch_side = 4;
    std::size_t dim = 64;
    std::size_t depth = 4;
    std::size_t heads = 4;
    double mlp_ratio = 2.0;
    NormSchemeConfig norm_scheme = NormSchemeConfig::share(NormKind::LN);
    std::uint64_t seed = 0;

    std::size_t num_patches() const {
        const std::size_t side = image_side / patch_side;
        return side * side;
    }
    std::size_t patch_pixels() const { return patch_side * patch_side; }
    void validate() const;
    bool operator==(const EncoderConfig&) const = default;
};

// non-overlapping row-major patches, each flattened row-major
Tensor patchify(const Tensor& image, std::size_t patch_side);
Tensor unpatchify(const Tensor& patches, std::size_t image_side, std::size_t patch_side);

struct AttentionBlock {
    Tensor wq, wk, wv, wo;  // [d,d]
    Tensor bq, bk, bv, bo;  // [d]
    Tensor w1, b1, w2, b2;  // MLP
    NormScheme norm1, norm2;
};

struct EncodeResult {
    Tensor cls;     // [B, d]
    Tensor tokens;  // [B, L', d]
};

// pre-norm residual block: H + Attn(norm1(H)), then + MLP(norm2(.))
Tensor transformer_block(Graph& g, const Tensor& H, AttentionBlock& block, std::size_t heads,
                         NormMode mode);

// Pre-norm transformer encoder with [CLS] at position 0. Parameters are
// leaves; the graph is rebuilt per forward pass.
class Encoder {
public:
    explicit Encoder(const EncoderConfig& cfg);

    // batch is [B, H, W]; kept, when non-empty, lists the unmasked patch
    // indices per sequence (identical count per sequence)
    EncodeResult encode(Graph& g, const Tensor& batch,
                        const std::vector<std::vector<std::size_t>>& kept, NormMode mode);

    // residual block: H + Attn(norm1(H)), then + MLP(norm2(.))
    Tensor attention_block(Graph& g, const Tensor& H, AttentionBlock& block, NormMode mode);

    const EncoderConfig& config() const { return cfg_; }

    // ordered (name, tensor) views over all trainable parameters
    std::vector<std::pair<std::string, Tensor*>> parameters();
    // BN running statistics, for checkpointing
    std::vector<std::pair<std::string, std::vector<double>*>> buffers();

    Tensor patch_proj_w, patch_proj_b;
    Tensor pos_embed;   // [L+1, d]
    Tensor cls_embed;   // [d]
    std::vector<AttentionBlock> blocks;
    NormScheme final_norm;

private:
    EncoderConfig cfg_;
};

}  // namespace sepnorm
