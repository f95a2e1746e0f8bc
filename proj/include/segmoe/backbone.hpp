#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "segmoe/layers.hpp"
#include "segmoe/model_config.hpp"
#include "segmoe/segmoe.hpp"

namespace segmoe {

/// Patch tokens for a batch of look-back windows.
struct TokenSequence {
    Tensor tokens;                    // [batch, M, d_model]
    std::vector<std::uint8_t> valid;  // [M]; 0 marks a padded patch
};

/// patches: [batch, M, P]. Learned P -> d_model projection, mask passed through.
TokenSequence embed_patches(const Tensor& patches, std::vector<std::uint8_t> valid, const Linear& embedding);

/// Scaled dot-product attention over q, k, v shaped [batch, heads, M, head_dim]
/// with invalid keys masked to -inf before the softmax. Returns the
/// probabilities when `probs_out` is non-null.
Tensor dense_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::span<const std::uint8_t> key_valid,
                       double dropout_p, ForwardContext& ctx, Tensor* probs_out = nullptr);

/// Streaming-softmax attention over key tiles; forward only, no graph.
Tensor tiled_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::span<const std::uint8_t> key_valid,
                       std::size_t tile);

/// Bidirectional grouped-query self-attention with rotary embeddings.
class GroupedQueryAttention {
public:
    GroupedQueryAttention() = default;
    GroupedQueryAttention(std::size_t d_model, std::size_t q_heads, std::size_t kv_heads, double rope_base,
                          std::mt19937_64& rng);

    Tensor forward(const Tensor& x, std::span<const std::uint8_t> key_valid, double dropout_p, ForwardContext& ctx,
                   bool tiled = false, std::size_t tile = 16, Tensor* probs_out = nullptr) const;

    /// Projected, rotated heads: q [batch, q_heads, M, hd], k and v [batch, kv_heads, M, hd].
    struct Heads {
        Tensor q, k, v;
    };
    Heads project(const Tensor& x) const;

    std::size_t q_heads() const { return q_heads_; }
    std::size_t kv_heads() const { return kv_heads_; }
    std::size_t head_dim() const { return head_dim_; }

    Linear wq, wk, wv, wo;
    void collect(const std::string& prefix, ParamList& params) const;

private:
    std::size_t d_model_ = 0;
    std::size_t q_heads_ = 1;
    std::size_t kv_heads_ = 1;
    std::size_t head_dim_ = 0;
    double rope_base_ = 10000.0;
};

struct BlockOutput {
    Tensor tokens;
    RouteDecision decision;
};

/// Pre-norm block: h = x + DropPath(Att(RMSNorm(x))), y = h + DropPath(SegMoE(RMSNorm(h))).
class EncoderBlock {
public:
    EncoderBlock() = default;
    EncoderBlock(const ModelConfig& cfg, std::size_t index, std::size_t omega, std::mt19937_64& rng);

    BlockOutput forward(const Tensor& x, std::span<const std::uint8_t> key_valid, ForwardContext& ctx);

    RMSNorm attn_norm;
    GroupedQueryAttention attention;
    RMSNorm moe_norm;
    SegMoELayer moe;

    double keep_probability() const { return keep_; }
    void collect(const std::string& prefix, ParamList& params) const;

private:
    double keep_ = 1.0;
    double dropout_ = 0.0;
    bool tiled_ = false;
    std::size_t tile_ = 16;
};

/// Final RMSNorm, then a linear map from all M * d_model activations (or the
/// last token's d_model) to H_o values.
struct ForecastHead {
    RMSNorm norm;
    Linear proj;
    HeadKind kind = HeadKind::Flatten;

    ForecastHead() = default;
    ForecastHead(const ModelConfig& cfg, std::mt19937_64& rng);
    Tensor operator()(const Tensor& tokens) const;
    void collect(const std::string& prefix, ParamList& params) const;
};

struct ModelOutput {
    Tensor prediction;                   // [batch, H_o], normalized scale
    std::vector<RouteDecision> routing;  // one per block
};

/// Patch embedding, B encoder blocks with Seg-MoE sub-layers, forecast head.
class SegMoEModel {
public:
    /// Validates the config, then initializes every matrix Xavier-uniform
    /// from `seed`; biases start at zero and norm gains at one.
    SegMoEModel(ModelConfig cfg, std::uint64_t seed);

    /// windows: batch x lookback, already instance-normalized.
    ModelOutput forward(std::span<const double> windows, std::size_t batch, ForwardContext& ctx);
    ModelOutput forward_tokens(TokenSequence seq, ForwardContext& ctx);

    const ModelConfig& config() const { return cfg_; }
    ParamList parameters() const;
    void freeze_routing(bool frozen);

    Linear& embedding() { return embedding_; }
    std::vector<EncoderBlock>& blocks() { return blocks_; }
    ForecastHead& head() { return head_; }

private:
    ModelConfig cfg_;
    Linear embedding_;
    std::vector<EncoderBlock> blocks_;
    ForecastHead head_;
};

}  // namespace segmoe
