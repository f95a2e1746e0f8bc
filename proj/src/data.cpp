#include "segmoe/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numbers>
#include <ostream>
#include <random>
#include <sstream>

namespace segmoe {

namespace {

std::string trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r\"");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r\"");
    return std::string(s.substr(b, e - b + 1));
}

std::vector<std::string> split_row(const std::string& line) {
    std::vector<std::string> cells;
    std::size_t pos = 0;
    while (true) {
        const auto comma = line.find(',', pos);
        cells.push_back(trim(std::string_view(line).substr(pos, comma == std::string::npos ? std::string::npos : comma - pos)));
        if (comma == std::string::npos) break;
        pos = comma + 1;
    }
    return cells;
}

bool is_timestamp_name(std::string name) {
    std::transform(name.begin(), name.end(), name.begin(), [](unsigned char c) { return std::tolower(c); });
    return name == "date" || name == "timestamp";
}

}  // namespace

std::vector<double> Dataset::column(std::size_t d) const {
    std::vector<double> out(length);
    for (std::size_t t = 0; t < length; ++t) out[t] = at(t, d);
    return out;
}

Dataset parse_csv(std::istream& in, const CsvSchema& schema) {
    std::string line;
    if (!std::getline(in, line) || trim(line).empty()) throw DataError("csv: missing header row");
    auto header = split_row(line);
    const bool skip = schema.skip_timestamp && !header.empty() && is_timestamp_name(header.front());
    Dataset data;
    data.frequency = schema.frequency;
    data.names.assign(header.begin() + (skip ? 1 : 0), header.end());
    data.channels = data.names.size();
    if (data.channels == 0) throw DataError("csv: no value columns");

    std::size_t row = 0;
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (trim(line).empty()) continue;
        ++row;
        auto cells = split_row(line);
        if (cells.size() != header.size()) {
            throw DataError("csv: row " + std::to_string(row) + " (line " + std::to_string(line_no) + ") has " +
                            std::to_string(cells.size()) + " cells, expected " + std::to_string(header.size()));
        }
        for (std::size_t c = skip ? 1 : 0; c < cells.size(); ++c) {
            const std::string& cell = cells[c];
            double v = 0.0;
            const auto [ptr, ec] = std::from_chars(cell.data(), cell.data() + cell.size(), v);
            if (cell.empty() || ec != std::errc() || ptr != cell.data() + cell.size() || !std::isfinite(v)) {
                throw DataError("csv: non-numeric cell '" + cell + "' at row " + std::to_string(row) + " (line " +
                                std::to_string(line_no) + "), column '" + header[c] + "'");
            }
            data.values.push_back(v);
        }
    }
    data.length = row;
    if (data.length < schema.min_length) {
        throw DataError("csv: " + std::to_string(data.length) + " rows, need at least " +
                        std::to_string(schema.min_length));
    }
    return data;
}

Dataset load_csv(const std::string& path, const CsvSchema& schema) {
    std::ifstream in(path);
    if (!in) throw DataError("csv: cannot open '" + path + "'");
    return parse_csv(in, schema);
}

void write_csv(std::ostream& out, const Dataset& data) {
    out << "timestamp";
    for (const auto& n : data.names) out << ',' << n;
    out << '\n';
    char buf[32];
    for (std::size_t t = 0; t < data.length; ++t) {
        out << t;
        for (std::size_t d = 0; d < data.channels; ++d) {
            auto [p, ec] = std::to_chars(buf, buf + sizeof buf, data.at(t, d));
            out << ',' << std::string_view(buf, static_cast<std::size_t>(p - buf));
        }
        out << '\n';
    }
}

SplitSpec chronological_split(std::size_t length, double train_frac, double val_frac, double test_frac) {
    if (train_frac < 0 || val_frac < 0 || test_frac < 0) throw DataError("split fractions must be non-negative");
    const double total = train_frac + val_frac + test_frac;
    if (total > 1.0 + 1e-9) throw DataError("split fractions sum to " + std::to_string(total) + " > 1");
    const auto part = [length](double f) {
        return static_cast<std::size_t>(std::floor(f * static_cast<double>(length) + 1e-9));
    };
    const std::size_t n_train = part(train_frac);
    const std::size_t n_val = part(val_frac);
    const std::size_t n_test = std::abs(total - 1.0) <= 1e-9 ? length - n_train - n_val : part(test_frac);
    return chronological_split_sizes(length, n_train, n_val, n_test);
}

SplitSpec chronological_split_sizes(std::size_t length, std::size_t train, std::size_t val, std::size_t test) {
    if (train + val + test > length) {
        throw DataError("split sizes " + std::to_string(train) + "+" + std::to_string(val) + "+" +
                        std::to_string(test) + " exceed series length " + std::to_string(length));
    }
    SplitSpec s;
    s.train = {0, train};
    s.val = {train, train + val};
    s.test = {train + val, train + val + test};
    return s;
}

Range with_lookback(const Range& range, std::size_t lookback) {
    return {range.begin >= lookback ? range.begin - lookback : 0, range.end};
}

Standardizer Standardizer::fit(const Dataset& data, const Range& range) {
    if (range.size() == 0 || range.end > data.length) throw DataError("standardizer: invalid fit range");
    Standardizer s;
    s.mean.assign(data.channels, 0.0);
    s.scale.assign(data.channels, 1.0);
    const double n = static_cast<double>(range.size());
    for (std::size_t d = 0; d < data.channels; ++d) {
        double m = 0.0;
        for (std::size_t t = range.begin; t < range.end; ++t) m += data.at(t, d);
        m /= n;
        double v = 0.0;
        for (std::size_t t = range.begin; t < range.end; ++t) v += (data.at(t, d) - m) * (data.at(t, d) - m);
        const double sd = std::sqrt(v / n);
        s.mean[d] = m;
        s.scale[d] = sd < kConstantWindowStd ? 1.0 : sd;
    }
    return s;
}

Dataset Standardizer::apply(const Dataset& data) const {
    if (mean.size() != data.channels) throw DataError("standardizer: channel count mismatch");
    Dataset out = data;
    for (std::size_t t = 0; t < data.length; ++t)
        for (std::size_t d = 0; d < data.channels; ++d) out.at(t, d) = (data.at(t, d) - mean[d]) / scale[d];
    return out;
}

NormStats instance_stats(std::span<const double> window) {
    NormStats s;
    if (window.empty()) return s;
    const double n = static_cast<double>(window.size());
    double m = 0.0;
    for (double v : window) m += v;
    m /= n;
    double var = 0.0;
    for (double v : window) var += (v - m) * (v - m);
    const double sd = std::sqrt(var / n);
    s.mean = m;
    s.std = sd < kConstantWindowStd ? 1.0 : sd;
    return s;
}

void normalize_inplace(std::span<double> values, const NormStats& stats) {
    for (double& v : values) v = (v - stats.mean) / stats.std;
}

void denormalize_inplace(std::span<double> values, const NormStats& stats) {
    for (double& v : values) v = v * stats.std + stats.mean;
}

std::size_t window_count(std::size_t channels, const Range& range, std::size_t lookback, std::size_t horizon,
                         std::size_t stride) {
    if (lookback == 0 || horizon == 0 || stride == 0) throw DataError("window sizes and stride must be >= 1");
    const std::size_t span = lookback + horizon;
    if (range.size() < span) return 0;
    return ((range.size() - span) / stride + 1) * channels;
}

std::vector<WindowIndex> enumerate_windows(std::size_t channels, const Range& range, std::size_t lookback,
                                           std::size_t horizon, std::size_t stride) {
    std::vector<WindowIndex> out;
    out.reserve(window_count(channels, range, lookback, horizon, stride));
    const std::size_t span = lookback + horizon;
    if (range.size() < span) return out;
    for (std::size_t start = range.begin; start + span <= range.end; start += stride)
        for (std::size_t d = 0; d < channels; ++d) out.push_back({d, start});
    return out;
}

WindowSet::WindowSet(const Dataset& data, const Range& range, std::size_t lookback, std::size_t horizon,
                     std::size_t stride)
    : data_(&data), lookback_(lookback), horizon_(horizon) {
    if (range.end > data.length) throw DataError("window range exceeds dataset length");
    index_ = enumerate_windows(data.channels, range, lookback, horizon, stride);
    too_short_ = index_.empty();
}

WindowBatch WindowSet::batch(std::span<const std::size_t> which) const {
    WindowBatch b;
    b.lookback = lookback_;
    b.horizon = horizon_;
    b.inputs.resize(which.size() * lookback_);
    b.targets.resize(which.size() * horizon_);
    for (std::size_t i = 0; i < which.size(); ++i) {
        const WindowIndex& w = index_.at(which[i]);
        double* in = b.inputs.data() + i * lookback_;
        double* tg = b.targets.data() + i * horizon_;
        for (std::size_t t = 0; t < lookback_; ++t) in[t] = data_->at(w.start + t, w.channel);
        for (std::size_t t = 0; t < horizon_; ++t) tg[t] = data_->at(w.start + lookback_ + t, w.channel);
        const NormStats stats = instance_stats({in, lookback_});
        normalize_inplace({in, lookback_}, stats);
        normalize_inplace({tg, horizon_}, stats);
        b.stats.push_back(stats);
        b.channels.push_back(w.channel);
        b.starts.push_back(w.start);
    }
    return b;
}

WindowBatch WindowSet::batch(std::size_t first, std::size_t count) const {
    std::vector<std::size_t> which(count);
    for (std::size_t i = 0; i < count; ++i) which[i] = first + i;
    return batch(which);
}

std::vector<double> Patches::flatten_valid() const {
    const std::size_t n = count == 0 ? 0 : (count - 1) * width + tail_valid;
    return {values.begin(), values.begin() + static_cast<long>(n)};
}

Patches patchify(std::span<const double> window, std::size_t patch_len) {
    if (patch_len == 0) throw std::invalid_argument("patch length must be >= 1");
    Patches p;
    p.width = patch_len;
    p.count = (window.size() + patch_len - 1) / patch_len;
    p.values.assign(p.count * patch_len, 0.0);
    std::copy(window.begin(), window.end(), p.values.begin());
    p.mask.assign(p.count, 1);
    p.tail_valid = window.size() - (p.count == 0 ? 0 : (p.count - 1) * patch_len);
    return p;
}

Dataset synth_series(const SynthSpec& spec) {
    if (spec.length == 0) throw DataError("synthetic length must be >= 1");
    Dataset data;
    data.length = spec.length;
    data.channels = spec.channels;
    data.frequency = "synthetic";
    for (std::size_t d = 0; d < spec.channels; ++d) data.names.push_back("ch" + std::to_string(d));
    data.values.assign(spec.length * spec.channels, 0.0);

    std::mt19937_64 rng(spec.seed);
    std::uniform_real_distribution<double> phase_dist(0.0, 2.0 * std::numbers::pi);
    std::vector<double> offsets(spec.channels * spec.components.size(), 0.0);
    if (spec.random_phase)
        for (double& o : offsets) o = phase_dist(rng);

    std::normal_distribution<double> noise(0.0, 1.0);
    for (std::size_t t = 0; t < spec.length; ++t)
        for (std::size_t d = 0; d < spec.channels; ++d) {
            double v = spec.trend * static_cast<double>(t);
            for (std::size_t i = 0; i < spec.components.size(); ++i) {
                const auto& c = spec.components[i];
                v += c.amplitude * std::sin(2.0 * std::numbers::pi * static_cast<double>(t) / c.period + c.phase +
                                            offsets[d * spec.components.size() + i]);
            }
            if (spec.noise_sigma > 0.0) v += spec.noise_sigma * noise(rng);
            data.at(t, d) = v;
        }
    return data;
}

SynthSpec synth_preset(const std::string& name) {
    if (name == "sines-3ch") {
        SynthSpec s;
        s.channels = 3;
        s.length = 3000;
        s.components = {{1.0, 24.0, 0.0}, {0.6, 96.0, 0.0}, {0.25, 10.0, 0.0}};
        s.trend = 0.0;
        s.noise_sigma = 0.1;
        s.seed = 2024;
        s.random_phase = true;
        return s;
    }
    throw DataError("unknown synthetic preset '" + name + "'");
}

}  // namespace segmoe
