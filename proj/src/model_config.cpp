#include "segmoe/model_config.hpp"

namespace segmoe {

std::vector<std::size_t> multi_resolution_schedule(const std::vector<std::size_t>& omega, std::size_t blocks) {
    if (omega.empty()) throw ConfigError("omega", "empty segment schedule");
    for (std::size_t w : omega)
        if (w < 1) throw ConfigError("omega", "segment lengths must be >= 1");
    if (omega.size() == 1) return std::vector<std::size_t>(blocks, omega.front());
    if (omega.size() != blocks) {
        throw ConfigError("omega", "schedule " + omega_to_string(omega) + " has " + std::to_string(omega.size()) +
                                       " entries for " + std::to_string(blocks) + " blocks");
    }
    return omega;
}

std::string omega_to_string(const std::vector<std::size_t>& omega) {
    std::string s;
    for (std::size_t i = 0; i < omega.size(); ++i) s += (i ? "," : "") + std::to_string(omega[i]);
    return s;
}

std::vector<std::size_t> ModelConfig::segment_schedule() const { return multi_resolution_schedule(omega, blocks); }

void ModelConfig::validate() const {
    const auto positive = [](std::size_t v, const char* field) {
        if (v < 1) throw ConfigError(field, "must be >= 1");
    };
    positive(blocks, "blocks");
    positive(d_model, "d_model");
    positive(d_ff, "d_ff");
    positive(q_heads, "q_heads");
    positive(kv_heads, "kv_heads");
    positive(patch_len, "patch_len");
    positive(lookback, "lookback");
    positive(h_out, "h_out");
    positive(experts, "experts");
    positive(top_k, "top_k");
    if (q_heads % kv_heads != 0) throw ConfigError("kv_heads", "q_heads must be a multiple of kv_heads");
    if (d_model % q_heads != 0) throw ConfigError("q_heads", "d_model must be divisible by q_heads");
    if (head_dim() % 2 != 0) throw ConfigError("q_heads", "head_dim (d_model / q_heads) must be even for RoPE");
    if (top_k > experts) throw ConfigError("top_k", "top_k must not exceed experts");
    if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("dropout", "must lie in [0, 1)");
    if (droppath < 0.0 || droppath >= 1.0) throw ConfigError("droppath", "must lie in [0, 1)");
    if (!(rope_base > 1.0)) throw ConfigError("rope_base", "must be > 1");
    if (attention_tile < 1) throw ConfigError("attention_tile", "must be >= 1");
    (void)segment_schedule();
}

}  // namespace segmoe
