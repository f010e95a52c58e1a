#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "sepnorm/encoder.hpp"
#include "sepnorm/rng.hpp"
#include "sepnorm/tensor.hpp"

namespace sepnorm {

enum class UniformityTarget { None, Cls, Token, Both };

std::string uniformity_target_name(UniformityTarget t);
UniformityTarget parse_uniformity_target(const std::string& s);

struct ObjectiveConfig {
    double mask_ratio = 0.75;
    double lambda = 0.0;
    UniformityTarget uniformity_target = UniformityTarget::None;
    std::size_t decoder_depth = 2;
    std::size_t decoder_dim = 32;

    void validate(std::size_t num_patches) const;
};

// per-sequence kept/masked patch indices; identical counts per sequence
struct MaskPlan {
    std::vector<std::vector<std::size_t>> kept;
    std::vector<std::vector<std::size_t>> masked;

    std::size_t batch() const { return kept.size(); }
};

// uniform random subset without replacement; |masked| = round(ratio * L)
MaskPlan sample_mask(std::size_t batch, std::size_t num_patches, double mask_ratio, Rng& rng);

// Lightweight reconstruction decoder, discarded after pretraining.
// Always ShareNorm(LN); tokens only, no [CLS].
class Decoder {
public:
    Decoder(std::size_t encoder_dim, std::size_t num_patches, std::size_t patch_pixels,
            const ObjectiveConfig& cfg, std::uint64_t seed);

    // encoded kept tokens -> per-patch pixel predictions [B, L, p^2]
    Tensor predict(Graph& g, const Tensor& tokens, const MaskPlan& plan);

    std::vector<std::pair<std::string, Tensor*>> parameters();

    Tensor embed_w, embed_b;
    Tensor mask_embed;  // [decoder_dim]
    Tensor pos_embed;   // [L, decoder_dim]
    std::vector<AttentionBlock> blocks;
    NormScheme final_norm;
    Tensor head_w, head_b;

private:
    std::size_t num_patches_, heads_;
    Tensor block_forward(Graph& g, const Tensor& H, AttentionBlock& blk);
};

// MSE between predicted and true pixel patches over masked positions only
Tensor mae_loss(Graph& g, const Tensor& images, Encoder& encoder, Decoder& decoder,
                const MaskPlan& plan, NormMode mode);

// L_U = log( (2 / (N(N-1))) * sum_{n<m} exp(-2 ||h_n/|h_n| - h_m/|h_m||^2) )
Tensor uniformity_loss(Graph& g, const Tensor& embeddings);

struct UMaeResult {
    Tensor total;
    Tensor l_mae;
    Tensor l_u;  // zero scalar when no uniformity term applies
};

// total = L_MAE + lambda * L_U over the configured embedding target
UMaeResult u_mae_loss(Graph& g, const Tensor& images, Encoder& encoder, Decoder& decoder,
                      const MaskPlan& plan, const ObjectiveConfig& cfg, NormMode mode);

}  // namespace sepnorm
