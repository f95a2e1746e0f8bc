#include "segmoe/forecast.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <ostream>
#include <sstream>

#include "segmoe/config.hpp"

namespace segmoe {

std::vector<double> autoregressive_forecast(const StepPredictor& predict, std::span<const double> contexts,
                                            std::size_t batch, std::size_t lookback, std::size_t h_out,
                                            std::size_t horizon, std::size_t* calls) {
    if (horizon < 1) throw std::invalid_argument("forecast horizon must be >= 1");
    if (h_out < 1) throw std::invalid_argument("h_out must be >= 1");
    if (contexts.size() != batch * lookback) {
        throw std::invalid_argument("expected " + std::to_string(batch) + " contexts of " + std::to_string(lookback) +
                                    " values, got " + std::to_string(contexts.size()));
    }
    const std::size_t steps = (horizon + h_out - 1) / h_out;
    // Rolling history per sample: context followed by the forecasts so far.
    const std::size_t span_len = lookback + steps * h_out;
    std::vector<double> hist(batch * span_len, 0.0);
    for (std::size_t b = 0; b < batch; ++b)
        std::copy_n(contexts.begin() + static_cast<long>(b * lookback), lookback, hist.begin() + static_cast<long>(b * span_len));

    std::vector<double> window(batch * lookback);
    std::vector<NormStats> stats(batch);
    for (std::size_t s = 0; s < steps; ++s) {
        const std::size_t offset = s * h_out;
        for (std::size_t b = 0; b < batch; ++b) {
            auto w = std::span(window).subspan(b * lookback, lookback);
            std::copy_n(hist.begin() + static_cast<long>(b * span_len + offset), lookback, w.begin());
            stats[b] = instance_stats(w);
            normalize_inplace(w, stats[b]);
        }
        std::vector<double> pred = predict(window, batch);
        if (pred.size() != batch * h_out) throw std::runtime_error("predictor returned the wrong number of values");
        for (std::size_t b = 0; b < batch; ++b) {
            auto p = std::span(pred).subspan(b * h_out, h_out);
            denormalize_inplace(p, stats[b]);
            std::copy(p.begin(), p.end(), hist.begin() + static_cast<long>(b * span_len + lookback + offset));
        }
    }
    if (calls) *calls = steps;
    std::vector<double> out(batch * horizon);
    for (std::size_t b = 0; b < batch; ++b)
        std::copy_n(hist.begin() + static_cast<long>(b * span_len + lookback), horizon,
                    out.begin() + static_cast<long>(b * horizon));
    return out;
}

StepPredictor ModelForecaster::predictor() {
    return [this](std::span<const double> normalized, std::size_t batch) {
        NoGradGuard guard;
        ForwardContext ctx;
        const std::size_t L = model_.config().lookback;
        const std::size_t H = model_.config().h_out;
        std::vector<double> out;
        out.reserve(batch * H);
        for (std::size_t first = 0; first < batch; first += max_batch_) {
            const std::size_t n = std::min(max_batch_, batch - first);
            ModelOutput o = model_.forward(normalized.subspan(first * L, n * L), n, ctx);
            out.insert(out.end(), o.prediction.data().begin(), o.prediction.data().end());
        }
        return out;
    };
}

std::vector<double> ModelForecaster::forecast(std::span<const double> contexts, std::size_t batch,
                                              std::size_t horizon) {
    return autoregressive_forecast(predictor(), contexts, batch, lookback(), model_.config().h_out, horizon);
}

std::vector<double> PersistenceForecaster::forecast(std::span<const double> contexts, std::size_t batch,
                                                    std::size_t horizon) {
    if (contexts.size() != batch * lookback_) throw std::invalid_argument("persistence: context size mismatch");
    std::vector<double> out(batch * horizon);
    for (std::size_t b = 0; b < batch; ++b)
        std::fill_n(out.begin() + static_cast<long>(b * horizon), horizon, contexts[b * lookback_ + lookback_ - 1]);
    return out;
}

const EvalRow& EvalTable::at_horizon(std::size_t h) const {
    for (const auto& r : rows)
        if (r.label != "avg" && r.horizon == h) return r;
    throw std::out_of_range("no evaluation row for horizon " + std::to_string(h));
}

std::string EvalTable::csv() const {
    std::ostringstream out;
    out << "horizon,windows,mse,mae\n";
    for (const auto& r : rows) {
        out << r.label << ',' << r.windows << ',';
        if (r.skipped)
            out << "NA,NA\n";
        else
            out << format_number(r.mse) << ',' << format_number(r.mae) << '\n';
    }
    return out.str();
}

std::string EvalTable::text() const {
    std::ostringstream out;
    out << std::left << std::setw(8) << "horizon" << std::right << std::setw(9) << "windows" << std::setw(12) << "MSE"
        << std::setw(12) << "MAE" << '\n';
    for (const auto& r : rows) {
        out << std::left << std::setw(8) << r.label << std::right << std::setw(9) << r.windows;
        if (r.skipped) {
            out << std::setw(12) << "skipped" << std::setw(12) << "-" << '\n';
        } else {
            out << std::fixed << std::setprecision(4) << std::setw(12) << r.mse << std::setw(12) << r.mae << '\n';
            out.unsetf(std::ios::fixed);
        }
    }
    return out.str();
}

EvalWindows eval_windows(const Dataset& data, const Range& split, std::size_t lookback, std::size_t horizon,
                         std::size_t stride) {
    if (stride < 1) throw std::invalid_argument("evaluation stride must be >= 1");
    if (split.end > data.length) throw std::invalid_argument("split extends past the dataset");
    EvalWindows w;
    w.lookback = lookback;
    w.horizon = horizon;
    w.channels = data.channels;
    const Range r = with_lookback(split, lookback);
    for (const auto& idx : enumerate_windows(1, r, lookback, horizon, stride)) w.starts.push_back(idx.start);
    return w;
}

namespace {

// contexts and targets for all channels of windows [first, first + count):
// sample order is window-major, channel-minor.
void gather(const Dataset& data, const EvalWindows& w, std::size_t first, std::size_t count,
            std::vector<double>& ctx, std::vector<double>& truth) {
    const std::size_t D = w.channels;
    ctx.assign(count * D * w.lookback, 0.0);
    truth.assign(count * D * w.horizon, 0.0);
    for (std::size_t i = 0; i < count; ++i) {
        const std::size_t s = w.starts[first + i];
        for (std::size_t d = 0; d < D; ++d) {
            const std::size_t row = i * D + d;
            for (std::size_t t = 0; t < w.lookback; ++t) ctx[row * w.lookback + t] = data.at(s + t, d);
            for (std::size_t h = 0; h < w.horizon; ++h) truth[row * w.horizon + h] = data.at(s + w.lookback + h, d);
        }
    }
}

}  // namespace

EvalTable evaluate(Forecaster& forecaster, const Dataset& data, const Range& split,
                   const std::vector<std::size_t>& horizons, const EvalOptions& options) {
    if (horizons.empty()) throw std::invalid_argument("evaluate: no horizons");
    const std::size_t L = forecaster.lookback();
    const std::size_t stride = options.stride ? options.stride : forecaster.default_stride();
    const std::size_t D = data.channels;
    EvalTable table;
    double mse_sum = 0.0, mae_sum = 0.0;
    std::size_t used = 0;
    for (std::size_t H : horizons) {
        if (H < 1) throw std::invalid_argument("evaluate: horizons must be >= 1");
        EvalRow row;
        row.label = std::to_string(H);
        row.horizon = H;
        EvalWindows w = eval_windows(data, split, L, H, stride);
        if (w.starts.empty()) {
            row.skipped = true;
            table.warnings.push_back("horizon " + std::to_string(H) + ": split of " + std::to_string(split.size()) +
                                     " steps is too short, skipped");
            table.rows.push_back(row);
            continue;
        }
        row.windows = w.starts.size();
        const std::size_t per_call = std::max<std::size_t>(1, options.batch / std::max<std::size_t>(1, D));
        std::vector<double> ctx, truth, pred_hd(H * D), true_hd(H * D);
        for (std::size_t first = 0; first < w.starts.size(); first += per_call) {
            const std::size_t n = std::min(per_call, w.starts.size() - first);
            gather(data, w, first, n, ctx, truth);
            const std::vector<double> pred = forecaster.forecast(ctx, n * D, H);
            for (std::size_t i = 0; i < n; ++i) {
                for (std::size_t d = 0; d < D; ++d)
                    for (std::size_t h = 0; h < H; ++h) {
                        pred_hd[h * D + d] = pred[(i * D + d) * H + h];
                        true_hd[h * D + d] = truth[(i * D + d) * H + h];
                    }
                const Metrics m = mse_mae(pred_hd, true_hd, D);
                row.mse += m.mse;
                row.mae += m.mae;
            }
        }
        row.mse /= static_cast<double>(row.windows);
        row.mae /= static_cast<double>(row.windows);
        mse_sum += row.mse;
        mae_sum += row.mae;
        ++used;
        table.rows.push_back(row);
    }
    EvalRow avg;
    avg.label = "avg";
    if (used == 0) {
        avg.skipped = true;
    } else {
        avg.mse = mse_sum / static_cast<double>(used);
        avg.mae = mae_sum / static_cast<double>(used);
        for (const auto& r : table.rows) avg.windows += r.windows;
    }
    table.rows.push_back(avg);
    return table;
}

void export_forecast(Forecaster& forecaster, const Dataset& data, const Range& split, std::size_t index,
                     std::size_t horizon, std::size_t stride, std::ostream& out) {
    const std::size_t L = forecaster.lookback();
    EvalWindows w = eval_windows(data, split, L, horizon, stride);
    if (index >= w.starts.size()) {
        throw std::out_of_range("window index " + std::to_string(index) + " out of range (split has " +
                                std::to_string(w.starts.size()) + " windows for horizon " + std::to_string(horizon) +
                                ")");
    }
    std::vector<double> ctx, truth;
    gather(data, w, index, 1, ctx, truth);
    const std::size_t D = data.channels;
    const std::vector<double> pred = forecaster.forecast(ctx, D, horizon);
    const std::size_t s = w.starts[index];
    out << "t,channel,context,truth,prediction\n";
    for (std::size_t d = 0; d < D; ++d) {
        for (std::size_t t = 0; t < L; ++t)
            out << s + t << ',' << data.names[d] << ',' << format_number(data.at(s + t, d)) << ','
                << format_number(data.at(s + t, d)) << ",NA\n";
        for (std::size_t h = 0; h < horizon; ++h)
            out << s + L + h << ',' << data.names[d] << ",NA," << format_number(data.at(s + L + h, d)) << ','
                << format_number(pred[d * horizon + h]) << '\n';
    }
}

}  // namespace segmoe
