#include "segmoe/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <stdexcept>

namespace segmoe {

namespace {

double eval_scalar(const std::function<Tensor()>& loss) {
    NoGradGuard guard;
    const double v = loss().item();
    if (!std::isfinite(v)) throw std::runtime_error("gradient check: loss is not finite");
    return v;
}

}  // namespace

GradCheckReport check_gradients(const std::function<Tensor()>& loss,
                                std::vector<std::pair<std::string, Tensor>> inputs,
                                const GradCheckOptions& options) {
    for (auto& [name, t] : inputs) {
        t.set_requires_grad(true);
        t.zero_grad();
    }
    const Tensor value = loss();
    if (!std::isfinite(value.item())) throw std::runtime_error("gradient check: loss is not finite");
    value.backward();

    std::mt19937 rng(options.seed);
    GradCheckReport report;
    for (auto& [name, t] : inputs) {
        const std::vector<double> analytic = t.grad();
        std::vector<std::size_t> order(t.numel());
        std::iota(order.begin(), order.end(), 0);
        if (options.max_entries > 0 && order.size() > options.max_entries) {
            std::shuffle(order.begin(), order.end(), rng);
            order.resize(options.max_entries);
            std::sort(order.begin(), order.end());
        }
        GradCheckEntry entry;
        entry.name = name;
        auto values = t.mutable_data();
        for (std::size_t i : order) {
            const double saved = values[i];
            values[i] = saved + options.step;
            const double up = eval_scalar(loss);
            values[i] = saved - options.step;
            const double down = eval_scalar(loss);
            values[i] = saved;
            const double numeric = (up - down) / (2.0 * options.step);
            const double scale =
                std::max({std::fabs(analytic[i]), std::fabs(numeric), options.floor});
            const double rel = std::fabs(analytic[i] - numeric) / scale;
            if (rel > entry.max_rel_error) {
                entry.max_rel_error = rel;
                entry.worst_index = i;
            }
            ++entry.checked;
        }
        entry.ok = entry.max_rel_error <= options.tol;
        report.max_rel_error = std::max(report.max_rel_error, entry.max_rel_error);
        report.ok = report.ok && entry.ok;
        report.entries.push_back(std::move(entry));
        t.zero_grad();
    }
    return report;
}

}  // namespace segmoe
