#pragma once

#include <cstddef>
#include <functional>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "segmoe/backbone.hpp"
#include "segmoe/data.hpp"
#include "segmoe/objective.hpp"

namespace segmoe {

/// Maps `batch` instance-normalized look-back windows to batch x H_o
/// normalized predictions.
using StepPredictor = std::function<std::vector<double>(std::span<const double> normalized, std::size_t batch)>;

/// One-for-all forecasting: ceil(H / H_o) calls, each normalizing the most
/// recent `lookback` values with their own statistics, predicting H_o steps,
/// denormalizing and appending them. contexts: batch x lookback raw values.
/// Returns batch x H. `calls`, when given, receives the number of predictor calls.
std::vector<double> autoregressive_forecast(const StepPredictor& predict, std::span<const double> contexts,
                                            std::size_t batch, std::size_t lookback, std::size_t h_out,
                                            std::size_t horizon, std::size_t* calls = nullptr);

/// Anything that turns raw look-back windows into raw forecasts.
class Forecaster {
public:
    virtual ~Forecaster() = default;
    virtual std::size_t lookback() const = 0;
    /// Evaluation stride used when none is given.
    virtual std::size_t default_stride() const { return 1; }
    /// contexts: batch x lookback. Returns batch x horizon.
    virtual std::vector<double> forecast(std::span<const double> contexts, std::size_t batch,
                                         std::size_t horizon) = 0;
};

class ModelForecaster : public Forecaster {
public:
    explicit ModelForecaster(SegMoEModel& model, std::size_t max_batch = 256) : model_(model), max_batch_(max_batch) {}
    std::size_t lookback() const override { return model_.config().lookback; }
    std::size_t default_stride() const override { return model_.config().h_out; }
    std::vector<double> forecast(std::span<const double> contexts, std::size_t batch, std::size_t horizon) override;
    StepPredictor predictor();

private:
    SegMoEModel& model_;
    std::size_t max_batch_;
};

/// Repeats the last observed value.
class PersistenceForecaster : public Forecaster {
public:
    explicit PersistenceForecaster(std::size_t lookback) : lookback_(lookback) {}
    std::size_t lookback() const override { return lookback_; }
    std::vector<double> forecast(std::span<const double> contexts, std::size_t batch, std::size_t horizon) override;

private:
    std::size_t lookback_;
};

struct EvalRow {
    std::string label;  // horizon or "avg"
    std::size_t horizon = 0;
    std::size_t windows = 0;
    bool skipped = false;
    double mse = 0.0;
    double mae = 0.0;
};

struct EvalTable {
    std::vector<EvalRow> rows;  // one per horizon, then the average row
    std::vector<std::string> warnings;

    const EvalRow& average() const { return rows.back(); }
    const EvalRow& at_horizon(std::size_t h) const;
    std::string csv() const;
    std::string text() const;
};

struct EvalOptions {
    std::size_t stride = 0;  // step between window starts; 0 means forecaster.default_stride()
    std::size_t batch = 256;
};

/// Raw look-back windows for `split`: the look-back may reach into the
/// preceding data, the forecast targets stay inside the split. Windows start
/// every `stride` steps; all channels of one start are kept together.
struct EvalWindows {
    std::size_t lookback = 0;
    std::size_t horizon = 0;
    std::size_t channels = 0;
    std::vector<std::size_t> starts;  // first look-back step per window
};
EvalWindows eval_windows(const Dataset& data, const Range& split, std::size_t lookback, std::size_t horizon,
                         std::size_t stride);

/// Per-horizon MSE/MAE (per variable, then averaged over variables and
/// windows) plus an average row over the horizons that could be evaluated.
EvalTable evaluate(Forecaster& forecaster, const Dataset& data, const Range& split,
                   const std::vector<std::size_t>& horizons, const EvalOptions& options = {});

/// CSV with columns t,channel,context,truth,prediction covering the look-back
/// and the horizon of evaluation window `index` (stride as in evaluate()).
void export_forecast(Forecaster& forecaster, const Dataset& data, const Range& split, std::size_t index,
                     std::size_t horizon, std::size_t stride, std::ostream& out);

}  // namespace segmoe
