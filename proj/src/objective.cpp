#include "segmoe/objective.hpp"

#include <cmath>
#include <numeric>
#include <stdexcept>

namespace segmoe {

namespace {

void check_simplex(std::span<const double> v, const char* what) {
    double total = 0.0;
    for (double x : v) {
        if (!(x >= 0.0)) throw std::invalid_argument(std::string("aux_balance_loss: negative entry in ") + what);
        total += x;
    }
    if (std::abs(total - 1.0) > 1e-6)
        throw std::invalid_argument(std::string("aux_balance_loss: ") + what + " sums to " + std::to_string(total));
}

}  // namespace

double huber_value(double e, double delta) {
    const double a = std::abs(e);
    return a <= delta ? 0.5 * e * e : delta * (a - 0.5 * delta);
}

double huber_slope(double e, double delta) {
    if (std::abs(e) <= delta) return e;
    return e > 0 ? delta : -delta;
}

Tensor huber_loss(const Tensor& pred, const Tensor& target, double delta) {
    if (!(delta > 0.0)) throw std::invalid_argument("huber delta must be > 0");
    if (pred.shape() != target.shape()) {
        throw ShapeError("huber: prediction " + shape_str(pred.shape()) + " vs target " + shape_str(target.shape()));
    }
    return huber(pred, target, delta);
}

Tensor aux_balance_loss(std::span<const double> f, const Tensor& r) {
    if (r.ndim() != 1 || r.numel() != f.size()) {
        throw ShapeError("aux_balance_loss: f has " + std::to_string(f.size()) + " entries, r is " +
                         shape_str(r.shape()));
    }
    check_simplex(f, "f");
    check_simplex(r.data(), "r");
    const double n = static_cast<double>(f.size());
    std::vector<double> scaled(f.size());
    for (std::size_t i = 0; i < f.size(); ++i) scaled[i] = n * f[i];
    return sum(mul(r, Tensor::from({f.size()}, std::move(scaled))));
}

double aux_balance_value(std::span<const double> f, std::span<const double> r) {
    return aux_balance_loss(f, Tensor::from({r.size()}, {r.begin(), r.end()})).item();
}

std::vector<double> selection_fractions(const RouteDecision& d) {
    std::vector<double> f(d.experts, 0.0);
    const double denom = static_cast<double>(d.top_k * d.rows);
    for (std::size_t i = 0; i < d.experts; ++i) f[i] = static_cast<double>(d.usage[i]) / denom;
    return f;
}

Tensor mean_router_probability(const RouteDecision& d) { return mean(d.scores, 0); }

LossReport total_loss(const Tensor& pred, const Tensor& target, const std::vector<RouteDecision>& routing,
                      std::size_t layers, double alpha, double delta) {
    if (routing.size() != layers) {
        throw std::invalid_argument("total_loss: routing statistics for " + std::to_string(routing.size()) + " of " +
                                    std::to_string(layers) + " Seg-MoE layers");
    }
    LossReport rep;
    rep.alpha = alpha;
    rep.delta = delta;
    Tensor pred_loss = huber_loss(pred, target, delta);
    rep.pred = pred_loss.item();
    rep.total = pred_loss;
    if (layers > 0) {
        Tensor aux_sum;
        for (const auto& d : routing) {
            Tensor a = aux_balance_loss(selection_fractions(d), mean_router_probability(d));
            rep.aux.push_back(a.item());
            aux_sum = aux_sum.defined() ? add(aux_sum, a) : a;
        }
        Tensor aux_mean = mul_scalar(aux_sum, 1.0 / static_cast<double>(layers));
        rep.aux_mean = aux_mean.item();
        if (alpha != 0.0) rep.total = add(pred_loss, mul_scalar(aux_mean, alpha));
    }
    rep.total_value = rep.total.item();
    return rep;
}

Metrics mse_mae(std::span<const double> pred, std::span<const double> target) {
    if (pred.size() != target.size())
        throw std::invalid_argument("mse_mae: " + std::to_string(pred.size()) + " predictions vs " +
                                    std::to_string(target.size()) + " targets");
    if (pred.empty()) throw std::invalid_argument("mse_mae: empty series");
    Metrics m;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const double e = target[i] - pred[i];
        m.mse += e * e;
        m.mae += std::abs(e);
    }
    m.mse /= static_cast<double>(pred.size());
    m.mae /= static_cast<double>(pred.size());
    return m;
}

Metrics mse_mae(std::span<const double> pred, std::span<const double> target, std::size_t variables) {
    if (variables == 0 || pred.size() % variables != 0) throw std::invalid_argument("mse_mae: bad variable count");
    if (pred.size() != target.size()) throw std::invalid_argument("mse_mae: length mismatch");
    const std::size_t h = pred.size() / variables;
    Metrics out;
    std::vector<double> p(h), t(h);
    for (std::size_t d = 0; d < variables; ++d) {
        for (std::size_t i = 0; i < h; ++i) {
            p[i] = pred[i * variables + d];
            t[i] = target[i * variables + d];
        }
        const Metrics m = mse_mae(p, t);
        out.mse += m.mse;
        out.mae += m.mae;
    }
    out.mse /= static_cast<double>(variables);
    out.mae /= static_cast<double>(variables);
    return out;
}

}  // namespace segmoe
