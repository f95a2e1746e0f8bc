#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace segmoe {

class DataError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// T x D observations, time-major.
struct Dataset {
    std::vector<std::string> names;
    std::string frequency;
    std::size_t length = 0;    // T
    std::size_t channels = 0;  // D
    std::vector<double> values;

    double at(std::size_t t, std::size_t d) const { return values[t * channels + d]; }
    double& at(std::size_t t, std::size_t d) { return values[t * channels + d]; }
    std::vector<double> column(std::size_t d) const;
};

struct CsvSchema {
    // A first column named date/timestamp (any case) is skipped.
    bool skip_timestamp = true;
    std::string frequency;
    // Reject datasets shorter than this (e.g. L + H_min).
    std::size_t min_length = 1;
};

Dataset parse_csv(std::istream& in, const CsvSchema& schema = {});
Dataset load_csv(const std::string& path, const CsvSchema& schema = {});
void write_csv(std::ostream& out, const Dataset& data);

struct Range {
    std::size_t begin = 0;
    std::size_t end = 0;
    std::size_t size() const { return end - begin; }
    bool operator==(const Range&) const = default;
};

struct SplitSpec {
    Range train;
    Range val;
    Range test;
};

/// Fractions are applied with floor to train and val; test takes what the
/// fractions leave of T (rounded down as well).
SplitSpec chronological_split(std::size_t length, double train_frac, double val_frac, double test_frac);
SplitSpec chronological_split_sizes(std::size_t length, std::size_t train, std::size_t val, std::size_t test);

/// Window range whose look-back may reach `lookback` steps before `range`,
/// so that targets still fall entirely inside `range`.
Range with_lookback(const Range& range, std::size_t lookback);

/// Per-variable z-score with statistics from one range (the train split).
struct Standardizer {
    std::vector<double> mean;
    std::vector<double> scale;

    static Standardizer fit(const Dataset& data, const Range& range);
    Dataset apply(const Dataset& data) const;
};

struct NormStats {
    double mean = 0.0;
    double std = 1.0;
};

inline constexpr double kConstantWindowStd = 1e-8;

/// Population mean/std of a look-back window; std below 1e-8 falls back to 1.
NormStats instance_stats(std::span<const double> window);
void normalize_inplace(std::span<double> values, const NormStats& stats);
void denormalize_inplace(std::span<double> values, const NormStats& stats);

struct WindowIndex {
    std::size_t channel = 0;
    std::size_t start = 0;  // first look-back step
};

/// Every (channel, start) with start + L + H <= range.end and
/// (start - range.begin) % stride == 0. Start-major, channel-minor order.
std::vector<WindowIndex> enumerate_windows(std::size_t channels, const Range& range, std::size_t lookback,
                                           std::size_t horizon, std::size_t stride);

/// Number of windows enumerate_windows would produce.
std::size_t window_count(std::size_t channels, const Range& range, std::size_t lookback, std::size_t horizon,
                         std::size_t stride);

/// Channel-independent univariate samples with instance normalization.
struct WindowBatch {
    std::size_t lookback = 0;
    std::size_t horizon = 0;
    std::vector<double> inputs;   // size() x lookback, normalized
    std::vector<double> targets;  // size() x horizon, normalized with the input stats
    std::vector<NormStats> stats;
    std::vector<std::size_t> channels;
    std::vector<std::size_t> starts;

    std::size_t size() const { return channels.size(); }
    std::span<const double> input(std::size_t i) const { return {inputs.data() + i * lookback, lookback}; }
    std::span<const double> target(std::size_t i) const { return {targets.data() + i * horizon, horizon}; }
};

/// Window enumeration over one split plus on-demand batch assembly.
class WindowSet {
public:
    WindowSet(const Dataset& data, const Range& range, std::size_t lookback, std::size_t horizon,
              std::size_t stride);

    std::size_t size() const { return index_.size(); }
    bool empty() const { return index_.empty(); }
    // Set when the range is too short to hold a single window.
    bool too_short() const { return too_short_; }
    std::size_t lookback() const { return lookback_; }
    std::size_t horizon() const { return horizon_; }
    const std::vector<WindowIndex>& index() const { return index_; }

    WindowBatch batch(std::span<const std::size_t> which) const;
    WindowBatch batch(std::size_t first, std::size_t count) const;

private:
    const Dataset* data_;
    std::size_t lookback_;
    std::size_t horizon_;
    std::vector<WindowIndex> index_;
    bool too_short_ = false;
};

/// M = ceil(L / P) non-overlapping patches, zero right-padded.
struct Patches {
    std::size_t count = 0;  // M
    std::size_t width = 0;  // P
    std::vector<double> values;      // M x P
    std::vector<std::uint8_t> mask;  // per patch: 1 when it holds at least one real step
    std::size_t tail_valid = 0;      // real steps in the final patch

    std::vector<double> flatten_valid() const;
};

Patches patchify(std::span<const double> window, std::size_t patch_len);

struct Sinusoid {
    double amplitude = 1.0;
    double period = 24.0;
    double phase = 0.0;
};

struct SynthSpec {
    std::size_t channels = 1;
    std::size_t length = 1000;
    std::vector<Sinusoid> components;
    double trend = 0.0;
    double noise_sigma = 0.0;
    std::uint64_t seed = 0;
    // Adds a per-channel uniform phase offset to every component.
    bool random_phase = false;
};

/// channel_d(t) = sum_i a_i sin(2 pi t / p_i + phi_i (+ offset_{d,i})) + trend * t + N(0, sigma^2)
Dataset synth_series(const SynthSpec& spec);

/// Named presets. "sines-3ch": three channels mixing periods 24 and 96 plus a
/// short period-10 ripple, sigma 0.1, seed 2024.
SynthSpec synth_preset(const std::string& name);

}  // namespace segmoe
