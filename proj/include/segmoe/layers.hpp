#pragma once

#include <cstddef>
#include <random>
#include <string>
#include <vector>

#include "segmoe/tensor.hpp"
#include "segmoe/tensor_io.hpp"

namespace segmoe {

using ParamList = std::vector<NamedTensor>;

/// Per-forward state: training flag and the stream feeding Dropout/DropPath.
struct ForwardContext {
    bool train = false;
    std::mt19937_64* rng = nullptr;
};

/// Uniform Xavier/Glorot: U(-a, a), a = sqrt(6 / (fan_in + fan_out)).
Tensor xavier_uniform(std::size_t fan_in, std::size_t fan_out, std::mt19937_64& rng);

struct Linear {
    Tensor weight;  // [in, out]
    Tensor bias;    // [out] or undefined

    Linear() = default;
    Linear(std::size_t in, std::size_t out, bool with_bias, std::mt19937_64& rng);

    Tensor operator()(const Tensor& x) const { return linear(x, weight, bias); }
    std::size_t in_features() const { return weight.dim(0); }
    std::size_t out_features() const { return weight.dim(1); }
    void collect(const std::string& prefix, ParamList& out) const;
};

struct RMSNorm {
    Tensor gain;
    double eps = 1e-6;

    RMSNorm() = default;
    explicit RMSNorm(std::size_t dim, double eps = 1e-6);

    Tensor operator()(const Tensor& x) const { return rmsnorm(x, gain, eps); }
    void collect(const std::string& prefix, ParamList& out) const;
};

/// Inverted dropout; identity outside training or when p == 0.
Tensor dropout(const Tensor& x, double p, ForwardContext& ctx);

/// Drops the whole residual branch per sample (leading axis) with
/// probability 1 - keep, rescaling survivors by 1/keep.
Tensor drop_path(const Tensor& x, double keep, ForwardContext& ctx);

/// Keep probability of block b: 1 - (b / (B - 1)) * max_drop.
double droppath_keep(std::size_t block, std::size_t blocks, double max_drop);

}  // namespace segmoe
