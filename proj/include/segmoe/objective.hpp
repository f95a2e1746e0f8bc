#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "segmoe/segmoe.hpp"
#include "segmoe/tensor.hpp"

namespace segmoe {

/// Scalar Huber penalty: 0.5 e^2 inside [-delta, delta], delta (|e| - delta/2) outside.
double huber_value(double error, double delta);
/// d/de of huber_value.
double huber_slope(double error, double delta);

/// Mean Huber loss over all elements. Throws on shape mismatch or delta <= 0.
Tensor huber_loss(const Tensor& pred, const Tensor& target, double delta);

/// N * sum_i f_i r_i. f is a constant statistic; gradients flow through r.
/// Both must lie on the simplex (1e-6) with no negative entries.
Tensor aux_balance_loss(std::span<const double> f, const Tensor& r);
double aux_balance_value(std::span<const double> f, std::span<const double> r);

/// Per-layer pieces of the load-balance term: selection fractions and the
/// differentiable mean router probability.
std::vector<double> selection_fractions(const RouteDecision& decision);
Tensor mean_router_probability(const RouteDecision& decision);

struct LossReport {
    Tensor total;  // differentiable scalar
    double pred = 0.0;
    std::vector<double> aux;  // per layer
    double aux_mean = 0.0;
    double total_value = 0.0;
    double alpha = 0.0;
    double delta = 0.0;
};

/// pred + alpha * mean_b aux_b. `layers` is the number of Seg-MoE layers the
/// model owns; a routing list of another length is an error.
LossReport total_loss(const Tensor& pred, const Tensor& target, const std::vector<RouteDecision>& routing,
                      std::size_t layers, double alpha, double delta);

struct Metrics {
    double mse = 0.0;
    double mae = 0.0;
};

/// Averages over one univariate horizon.
Metrics mse_mae(std::span<const double> pred, std::span<const double> target);
/// pred/target are horizon x variables, time-major. Metrics are computed per
/// variable and then averaged.
Metrics mse_mae(std::span<const double> pred, std::span<const double> target, std::size_t variables);

}  // namespace segmoe
