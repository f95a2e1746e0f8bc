#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "segmoe/backbone.hpp"
#include "segmoe/data.hpp"

namespace segmoe {

struct TrainConfig {
    double lr = 1e-3;
    double min_lr = 1e-5;
    double warmup = 0.1;  // fraction of total steps
    double beta1 = 0.9;
    double beta2 = 0.95;
    double eps = 1e-8;
    double weight_decay = 0.1;
    double clip_norm = 1.0;  // <= 0 disables clipping
    std::size_t batch_size = 32;
    std::size_t max_epochs = 30;
    std::size_t min_epochs = 10;
    std::size_t patience = 5;
    double alpha = 0.02;
    double delta = 2.0;
    std::uint64_t seed = 2024;
    std::size_t train_stride = 1;  // step between consecutive training windows
    std::size_t val_stride = 0;    // 0: use h_out

    /// Throws ConfigError naming the offending field.
    void validate() const;
};

class TrainingError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// First and second moments per parameter, in ParamList order.
struct AdamState {
    std::vector<std::vector<double>> m;
    std::vector<std::vector<double>> v;
    std::size_t step = 0;

    void reset(const ParamList& params);
};

/// Decoupled weight decay, then the bias-corrected Adam update. Returns false
/// (and leaves everything untouched) when any gradient is non-finite.
bool adamw_step(const ParamList& params, AdamState& state, double lr, const TrainConfig& cfg);

/// Scales all gradients so their global L2 norm is at most max_norm. Returns
/// the norm measured before scaling.
double clip_grad_norm(const ParamList& params, double max_norm);

/// Linear warmup from 0 to lr, then cosine decay to min_lr at total_steps.
double lr_at(std::size_t step, std::size_t total_steps, const TrainConfig& cfg);
std::size_t warmup_steps(std::size_t total_steps, const TrainConfig& cfg);

/// Patience counter over validation losses.
class EarlyStopping {
public:
    EarlyStopping(std::size_t patience, std::size_t min_epochs) : patience_(patience), min_epochs_(min_epochs) {}

    /// Records the loss of epoch `epoch` (1-based). Returns true when training should stop.
    bool update(std::size_t epoch, double val_loss);
    bool improved() const { return improved_; }
    double best() const { return best_; }
    std::size_t best_epoch() const { return best_epoch_; }

private:
    std::size_t patience_;
    std::size_t min_epochs_;
    double best_ = 0.0;
    std::size_t best_epoch_ = 0;
    std::size_t bad_ = 0;
    bool improved_ = false;
};

struct LayerRouting {
    std::vector<double> f;
    std::vector<double> r;
    double entropy = 0.0;
    double aux = 0.0;
};

struct EpochRecord {
    std::size_t epoch = 0;
    double train_loss = 0.0;  // mean total objective over the epoch's steps
    double val_loss = 0.0;
    double lr = 0.0;  // learning rate of the epoch's last step
    std::size_t skipped_steps = 0;
    std::vector<LayerRouting> routing;  // pooled over the epoch
};

struct FitResult {
    std::vector<EpochRecord> history;
    std::size_t best_epoch = 0;
    double best_val = 0.0;
    bool stopped_early = false;
    AdamState adam;  // optimizer state at the best epoch
};

struct FitOptions {
    /// Called after every epoch with the record just appended.
    std::function<void(const EpochRecord&)> on_epoch;
};

/// Mean Huber loss over every window of `windows` in evaluation mode.
double validation_loss(SegMoEModel& model, const WindowSet& windows, std::size_t batch_size, double delta);

/// Trains in place. On return the model holds the parameters of the best
/// validation epoch.
FitResult fit(SegMoEModel& model, const WindowSet& train, const WindowSet& val, const TrainConfig& cfg,
              const FitOptions& options = {});

/// Copies of every parameter's current values.
std::vector<std::vector<double>> snapshot(const ParamList& params);
void restore(const ParamList& params, const std::vector<std::vector<double>>& values);

// Checkpoints: parameters, optimizer moments (adam.m/<name>, adam.v/<name>),
// epoch, best validation loss and both configs echoed as metadata.
void save_checkpoint(const std::string& path, const SegMoEModel& model, const TrainConfig& train,
                     const AdamState& adam, std::size_t epoch, double best_val);

struct LoadedCheckpoint {
    ModelConfig model_config;
    TrainConfig train_config;
    std::size_t epoch = 0;
    double best_val = 0.0;
    std::size_t adam_step = 0;
    TensorFile file;
};

LoadedCheckpoint read_checkpoint(const std::string& path);
/// Rebuilds the model from the echoed config and copies every parameter in.
SegMoEModel load_model(const LoadedCheckpoint& ckpt);

std::string history_csv(const std::vector<EpochRecord>& history);
std::string routing_csv(const std::vector<EpochRecord>& history);

}  // namespace segmoe
