#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

namespace segmoe {

/// Validation failure tied to one configuration field.
class ConfigError : public std::invalid_argument {
public:
    ConfigError(std::string field, const std::string& message)
        : std::invalid_argument(field + ": " + message), field_(std::move(field)) {}
    const std::string& field() const { return field_; }

private:
    std::string field_;
};

enum class HeadKind { Flatten, LastToken };

/// Architecture. Defaults follow the small backbone (4 blocks, 4 query heads,
/// 2 key/value heads, 4 experts, top-1, d_model 128, d_ff 256).
struct ModelConfig {
    std::size_t blocks = 4;
    std::size_t d_model = 128;
    std::size_t d_ff = 256;
    std::size_t q_heads = 4;
    std::size_t kv_heads = 2;
    std::size_t patch_len = 8;
    std::size_t lookback = 512;
    std::size_t h_out = 32;
    std::size_t experts = 4;
    std::size_t top_k = 1;
    // Scalar (size 1) or one entry per block; see segment_schedule().
    std::vector<std::size_t> omega{1};
    double dropout = 0.2;
    double droppath = 0.3;
    double rope_base = 10000.0;
    bool shared_expert = true;
    HeadKind head = HeadKind::Flatten;
    bool tiled_attention = false;
    std::size_t attention_tile = 16;

    std::size_t patches() const { return (lookback + patch_len - 1) / patch_len; }
    std::size_t head_dim() const { return d_model / q_heads; }
    /// Per-block segment lengths.
    std::vector<std::size_t> segment_schedule() const;
    /// Throws ConfigError naming the offending field.
    void validate() const;
};

/// Scalar broadcast to all blocks, or a per-block list used verbatim.
std::vector<std::size_t> multi_resolution_schedule(const std::vector<std::size_t>& omega, std::size_t blocks);

std::string omega_to_string(const std::vector<std::size_t>& omega);

}  // namespace segmoe
