#include "segmoe/layers.hpp"

#include <cmath>

namespace segmoe {

Tensor xavier_uniform(std::size_t fan_in, std::size_t fan_out, std::mt19937_64& rng) {
    const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    std::uniform_real_distribution<double> dist(-a, a);
    std::vector<double> v(fan_in * fan_out);
    for (auto& x : v) x = dist(rng);
    return Tensor::from({fan_in, fan_out}, std::move(v), true);
}

Linear::Linear(std::size_t in, std::size_t out, bool with_bias, std::mt19937_64& rng)
    : weight(xavier_uniform(in, out, rng)) {
    if (with_bias) bias = Tensor::zeros({out}, true);
}

void Linear::collect(const std::string& prefix, ParamList& out) const {
    out.push_back({prefix + ".weight", weight});
    if (bias.defined()) out.push_back({prefix + ".bias", bias});
}

RMSNorm::RMSNorm(std::size_t dim, double eps_) : gain(Tensor::full({dim}, 1.0, true)), eps(eps_) {}

void RMSNorm::collect(const std::string& prefix, ParamList& out) const { out.push_back({prefix + ".gain", gain}); }

Tensor dropout(const Tensor& x, double p, ForwardContext& ctx) {
    if (!ctx.train || p <= 0.0) return x;
    if (ctx.rng == nullptr) throw std::logic_error("dropout in training mode needs an rng");
    std::bernoulli_distribution keep(1.0 - p);
    const double scale = 1.0 / (1.0 - p);
    std::vector<double> mask(x.numel());
    for (auto& m : mask) m = keep(*ctx.rng) ? scale : 0.0;
    return mul(x, Tensor::from(x.shape(), std::move(mask)));
}

Tensor drop_path(const Tensor& x, double keep, ForwardContext& ctx) {
    if (!ctx.train || keep >= 1.0) return x;
    if (ctx.rng == nullptr) throw std::logic_error("drop_path in training mode needs an rng");
    std::bernoulli_distribution survive(keep);
    Shape mshape(x.ndim(), 1);
    mshape[0] = x.dim(0);
    std::vector<double> mask(x.dim(0));
    for (auto& m : mask) m = survive(*ctx.rng) ? 1.0 / keep : 0.0;
    return mul(x, Tensor::from(std::move(mshape), std::move(mask)));
}

double droppath_keep(std::size_t block, std::size_t blocks, double max_drop) {
    if (blocks <= 1) return 1.0;
    return 1.0 - (static_cast<double>(block) / static_cast<double>(blocks - 1)) * max_drop;
}

}  // namespace segmoe
