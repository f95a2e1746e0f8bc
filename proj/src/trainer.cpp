#include "segmoe/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <sstream>

#include "segmoe/config.hpp"
#include "segmoe/objective.hpp"

namespace segmoe {

void TrainConfig::validate() const {
    if (!(lr > 0.0)) throw ConfigError("lr", "must be > 0");
    if (!(min_lr > 0.0) || min_lr > lr) throw ConfigError("min_lr", "must satisfy 0 < min_lr <= lr");
    if (!(warmup >= 0.0 && warmup < 1.0)) throw ConfigError("warmup", "must lie in [0, 1)");
    if (!(beta1 >= 0.0 && beta1 < 1.0)) throw ConfigError("beta1", "must lie in [0, 1)");
    if (!(beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("beta2", "must lie in [0, 1)");
    if (!(eps > 0.0)) throw ConfigError("eps", "must be > 0");
    if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay", "must be >= 0");
    if (batch_size < 1) throw ConfigError("batch_size", "must be >= 1");
    if (max_epochs < 1) throw ConfigError("max_epochs", "must be >= 1");
    if (min_epochs > max_epochs) throw ConfigError("min_epochs", "must not exceed max_epochs");
    if (patience < 1) throw ConfigError("patience", "must be >= 1");
    if (!(alpha >= 0.0)) throw ConfigError("alpha", "must be >= 0");
    if (!(delta > 0.0)) throw ConfigError("delta", "must be > 0");
    if (train_stride < 1) throw ConfigError("train_stride", "must be >= 1");
}

void AdamState::reset(const ParamList& params) {
    m.clear();
    v.clear();
    for (const auto& p : params) {
        m.emplace_back(p.tensor.numel(), 0.0);
        v.emplace_back(p.tensor.numel(), 0.0);
    }
    step = 0;
}

bool adamw_step(const ParamList& params, AdamState& state, double lr, const TrainConfig& cfg) {
    if (state.m.size() != params.size()) throw std::invalid_argument("adamw_step: optimizer state does not match");
    for (const auto& p : params) {
        if (!p.tensor.has_grad()) continue;
        for (double g : p.tensor.grad())
            if (!std::isfinite(g)) return false;
    }
    ++state.step;
    const double t = static_cast<double>(state.step);
    const double c1 = 1.0 - std::pow(cfg.beta1, t);
    const double c2 = 1.0 - std::pow(cfg.beta2, t);
    for (std::size_t k = 0; k < params.size(); ++k) {
        Tensor w = params[k].tensor;
        const std::vector<double> g = w.grad();
        auto x = w.mutable_data();
        auto& m = state.m[k];
        auto& v = state.v[k];
        for (std::size_t i = 0; i < x.size(); ++i) {
            x[i] -= lr * cfg.weight_decay * x[i];
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            x[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + cfg.eps);
        }
    }
    return true;
}

double clip_grad_norm(const ParamList& params, double max_norm) {
    double sq = 0.0;
    for (const auto& p : params) {
        if (!p.tensor.has_grad()) continue;
        for (double g : p.tensor.grad()) sq += g * g;
    }
    const double norm = std::sqrt(sq);
    if (max_norm > 0.0 && norm > max_norm) {
        const double scale = max_norm / norm;
        for (const auto& p : params) {
            if (!p.tensor.has_grad()) continue;
            Tensor t = p.tensor;
            for (double& g : t.mutable_grad()) g *= scale;
        }
    }
    return norm;
}

std::size_t warmup_steps(std::size_t total_steps, const TrainConfig& cfg) {
    return static_cast<std::size_t>(std::floor(cfg.warmup * static_cast<double>(total_steps)));
}

double lr_at(std::size_t step, std::size_t total_steps, const TrainConfig& cfg) {
    const std::size_t warm = warmup_steps(total_steps, cfg);
    if (step < warm) return cfg.lr * static_cast<double>(step) / static_cast<double>(warm);
    if (total_steps <= warm) return cfg.lr;
    const double progress =
        std::min(1.0, static_cast<double>(step - warm) / static_cast<double>(total_steps - warm));
    return cfg.min_lr + 0.5 * (cfg.lr - cfg.min_lr) * (1.0 + std::cos(std::numbers::pi * progress));
}

bool EarlyStopping::update(std::size_t epoch, double val_loss) {
    improved_ = best_epoch_ == 0 || val_loss < best_;
    if (improved_) {
        best_ = val_loss;
        best_epoch_ = epoch;
        bad_ = 0;
    } else {
        ++bad_;
    }
    return epoch >= min_epochs_ && bad_ >= patience_;
}

std::vector<std::vector<double>> snapshot(const ParamList& params) {
    std::vector<std::vector<double>> out;
    out.reserve(params.size());
    for (const auto& p : params) out.emplace_back(p.tensor.data().begin(), p.tensor.data().end());
    return out;
}

void restore(const ParamList& params, const std::vector<std::vector<double>>& values) {
    if (values.size() != params.size()) throw std::invalid_argument("restore: parameter count mismatch");
    for (std::size_t k = 0; k < params.size(); ++k) {
        Tensor t = params[k].tensor;
        std::copy(values[k].begin(), values[k].end(), t.mutable_data().begin());
    }
}

double validation_loss(SegMoEModel& model, const WindowSet& windows, std::size_t batch_size, double delta) {
    if (windows.empty()) throw TrainingError("validation split holds no windows");
    NoGradGuard guard;
    ForwardContext ctx;
    double total = 0.0;
    for (std::size_t first = 0; first < windows.size(); first += batch_size) {
        const std::size_t n = std::min(batch_size, windows.size() - first);
        WindowBatch b = windows.batch(first, n);
        ModelOutput out = model.forward(b.inputs, n, ctx);
        const Tensor target = Tensor::from({n, b.horizon}, b.targets);
        total += huber_loss(out.prediction, target, delta).item() * static_cast<double>(n);
    }
    return total / static_cast<double>(windows.size());
}

namespace {

struct RoutingAccumulator {
    std::vector<std::vector<double>> usage;   // per layer, per expert
    std::vector<std::vector<double>> scores;  // summed probabilities
    std::vector<double> rows;
    std::vector<double> aux;
    std::vector<std::size_t> top_k;
    std::size_t steps = 0;

    void add(const std::vector<RouteDecision>& routing, const LossReport& rep) {
        if (usage.empty()) {
            for (const auto& d : routing) {
                usage.emplace_back(d.experts, 0.0);
                scores.emplace_back(d.experts, 0.0);
                rows.push_back(0.0);
                aux.push_back(0.0);
                top_k.push_back(d.top_k);
            }
        }
        for (std::size_t l = 0; l < routing.size(); ++l) {
            const auto& d = routing[l];
            const auto s = d.scores.data();
            for (std::size_t i = 0; i < d.experts; ++i) {
                usage[l][i] += static_cast<double>(d.usage[i]);
                for (std::size_t r = 0; r < d.rows; ++r) scores[l][i] += s[r * d.experts + i];
            }
            rows[l] += static_cast<double>(d.rows);
            aux[l] += rep.aux[l];
        }
        ++steps;
    }

    std::vector<LayerRouting> finish() const {
        std::vector<LayerRouting> out;
        for (std::size_t l = 0; l < usage.size(); ++l) {
            LayerRouting lr;
            for (std::size_t i = 0; i < usage[l].size(); ++i) {
                lr.f.push_back(usage[l][i] / (static_cast<double>(top_k[l]) * rows[l]));
                lr.r.push_back(scores[l][i] / rows[l]);
            }
            lr.entropy = usage_entropy(lr.f);
            lr.aux = aux[l] / static_cast<double>(steps);
            out.push_back(std::move(lr));
        }
        return out;
    }
};

}  // namespace

FitResult fit(SegMoEModel& model, const WindowSet& train, const WindowSet& val, const TrainConfig& cfg,
              const FitOptions& options) {
    cfg.validate();
    if (train.empty()) throw TrainingError("training split holds no windows");
    if (val.empty()) throw TrainingError("validation split holds no windows");
    model.freeze_routing(false);

    const ParamList params = model.parameters();
    const std::size_t layers = model.blocks().size();
    AdamState adam;
    adam.reset(params);

    const std::size_t steps_per_epoch = (train.size() + cfg.batch_size - 1) / cfg.batch_size;
    const std::size_t total_steps = steps_per_epoch * cfg.max_epochs;
    std::mt19937_64 order_rng(cfg.seed);
    std::mt19937_64 dropout_rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);

    FitResult result;
    EarlyStopping stopper(cfg.patience, cfg.min_epochs);
    std::vector<std::vector<double>> best_params = snapshot(params);
    std::vector<std::size_t> order(train.size());
    std::size_t global_step = 0;

    for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
        std::iota(order.begin(), order.end(), std::size_t{0});
        std::shuffle(order.begin(), order.end(), order_rng);
        ForwardContext ctx{true, &dropout_rng};
        RoutingAccumulator acc;
        EpochRecord rec;
        rec.epoch = epoch;
        double loss_sum = 0.0;
        std::size_t applied = 0;

        for (std::size_t first = 0; first < order.size(); first += cfg.batch_size) {
            const std::size_t n = std::min(cfg.batch_size, order.size() - first);
            const double lr = lr_at(++global_step, total_steps, cfg);
            rec.lr = lr;
            for (const auto& p : params) {
                Tensor t = p.tensor;
                t.zero_grad();
            }
            WindowBatch b = train.batch(std::span(order).subspan(first, n));
            ModelOutput out = model.forward(b.inputs, n, ctx);
            const Tensor target = Tensor::from({n, b.horizon}, b.targets);
            LossReport rep = total_loss(out.prediction, target, out.routing, layers, cfg.alpha, cfg.delta);
            if (!std::isfinite(rep.total_value)) {
                ++rec.skipped_steps;
                continue;
            }
            rep.total.backward();
            clip_grad_norm(params, cfg.clip_norm);
            if (!adamw_step(params, adam, lr, cfg)) {
                ++rec.skipped_steps;
                continue;
            }
            loss_sum += rep.total_value;
            ++applied;
            acc.add(out.routing, rep);
        }
        if (applied == 0) {
            throw TrainingError("epoch " + std::to_string(epoch) +
                                ": every step produced a non-finite loss or gradient");
        }
        rec.train_loss = loss_sum / static_cast<double>(applied);
        rec.routing = acc.finish();
        rec.val_loss = validation_loss(model, val, cfg.batch_size, cfg.delta);
        if (!std::isfinite(rec.val_loss)) throw TrainingError("epoch " + std::to_string(epoch) + ": validation loss is not finite");
        result.history.push_back(rec);
        if (options.on_epoch) options.on_epoch(result.history.back());

        const bool stop = stopper.update(epoch, rec.val_loss);
        if (stopper.improved()) {
            best_params = snapshot(params);
            result.adam = adam;
        }
        if (stop) {
            result.stopped_early = epoch < cfg.max_epochs;
            break;
        }
    }
    restore(params, best_params);
    result.best_epoch = stopper.best_epoch();
    result.best_val = stopper.best();
    return result;
}

void save_checkpoint(const std::string& path, const SegMoEModel& model, const TrainConfig& train,
                     const AdamState& adam, std::size_t epoch, double best_val) {
    KeyValues meta{{"kind", "segmoe-checkpoint"},
                   {"epoch", std::to_string(epoch)},
                   {"best_val", format_number(best_val)},
                   {"adam_step", std::to_string(adam.step)}};
    for (auto& [k, v] : model_config_entries(model.config())) meta.emplace_back("model." + k, v);
    for (auto& [k, v] : train_config_entries(train)) meta.emplace_back("train." + k, v);

    const ParamList params = model.parameters();
    std::vector<NamedTensor> tensors = params;
    if (!adam.m.empty()) {
        if (adam.m.size() != params.size()) throw std::invalid_argument("save_checkpoint: optimizer state mismatch");
        for (std::size_t k = 0; k < params.size(); ++k)
            tensors.push_back({"adam.m/" + params[k].name, Tensor::from(params[k].tensor.shape(), adam.m[k])});
        for (std::size_t k = 0; k < params.size(); ++k)
            tensors.push_back({"adam.v/" + params[k].name, Tensor::from(params[k].tensor.shape(), adam.v[k])});
    }
    save_tensor_file(path, meta, tensors);
}

LoadedCheckpoint read_checkpoint(const std::string& path) {
    LoadedCheckpoint ck;
    ck.file = load_tensor_file(path);
    if (!ck.file.has_meta("kind") || ck.file.meta_value("kind") != "segmoe-checkpoint")
        throw std::runtime_error(path + ": not a checkpoint file");
    for (const auto& [k, v] : ck.file.meta) {
        if (k.rfind("model.", 0) == 0) {
            if (!set_model_field(ck.model_config, k, v)) throw ConfigError(k, "unknown model field in checkpoint");
        } else if (k.rfind("train.", 0) == 0) {
            if (!set_train_field(ck.train_config, k, v)) throw ConfigError(k, "unknown training field in checkpoint");
        }
    }
    ck.model_config.validate();
    ck.epoch = std::stoull(ck.file.meta_value("epoch"));
    ck.best_val = std::stod(ck.file.meta_value("best_val"));
    ck.adam_step = std::stoull(ck.file.meta_value("adam_step"));
    return ck;
}

SegMoEModel load_model(const LoadedCheckpoint& ck) {
    SegMoEModel model(ck.model_config, 0);
    for (const auto& p : model.parameters()) {
        const Tensor& src = ck.file.get(p.name);
        if (src.shape() != p.tensor.shape()) {
            throw ShapeError("checkpoint tensor " + p.name + " is " + shape_str(src.shape()) + ", model expects " +
                             shape_str(p.tensor.shape()));
        }
        Tensor dst = p.tensor;
        std::copy(src.data().begin(), src.data().end(), dst.mutable_data().begin());
    }
    return model;
}

std::string history_csv(const std::vector<EpochRecord>& history) {
    std::ostringstream out;
    const std::size_t layers = history.empty() ? 0 : history.front().routing.size();
    out << "epoch,train_loss,val_loss,lr,skipped_steps";
    for (std::size_t l = 0; l < layers; ++l) out << ",aux_" << l;
    for (std::size_t l = 0; l < layers; ++l) out << ",entropy_" << l;
    out << '\n';
    for (const auto& r : history) {
        out << r.epoch << ',' << format_number(r.train_loss) << ',' << format_number(r.val_loss) << ','
            << format_number(r.lr) << ',' << r.skipped_steps;
        for (const auto& l : r.routing) out << ',' << format_number(l.aux);
        for (const auto& l : r.routing) out << ',' << format_number(l.entropy);
        out << '\n';
    }
    return out.str();
}

std::string routing_csv(const std::vector<EpochRecord>& history) {
    std::ostringstream out;
    out << "epoch,layer,expert,f,r,entropy\n";
    for (const auto& rec : history)
        for (std::size_t l = 0; l < rec.routing.size(); ++l) {
            const auto& lr = rec.routing[l];
            for (std::size_t i = 0; i < lr.f.size(); ++i) {
                out << rec.epoch << ',' << l << ',' << i << ',' << format_number(lr.f[i]) << ','
                    << format_number(lr.r[i]) << ',' << format_number(lr.entropy) << '\n';
            }
        }
    return out.str();
}

}  // namespace segmoe
