#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "segmoe/backbone.hpp"
#include "segmoe/data.hpp"
#include "segmoe/forecast.hpp"
#include "segmoe/trainer.hpp"

namespace segmoe {

/// Globally standardized series (train-split statistics) and its splits.
struct PreparedData {
    Dataset data;
    Standardizer scaler;
    SplitSpec split;
};

PreparedData prepare_dataset(const Dataset& raw, double train_frac = 0.7, double val_frac = 0.1,
                             double test_frac = 0.2);

struct TrainedModel {
    std::unique_ptr<SegMoEModel> model;
    FitResult fit;
    EvalTable test;
};

/// Builds the model from `seed`, fits on the train split with early stopping
/// on the validation split, then evaluates on the test split. Windows of
/// both training splits predict h_out steps.
TrainedModel train_and_evaluate(const PreparedData& prepared, const ModelConfig& model_cfg,
                                const TrainConfig& train_cfg, const std::vector<std::size_t>& horizons,
                                const EvalOptions& eval = {}, const FitOptions& options = {});

/// Mean over blocks of the final epoch's expert-usage entropy.
double final_routing_entropy(const FitResult& fit);

struct ParamCount {
    struct Block {
        std::size_t omega = 0;
        std::size_t total = 0;
        std::size_t activated = 0;
        std::size_t routed_expert = 0;  // parameters of one routed expert
    };
    std::vector<Block> blocks;
    std::size_t embedding = 0;
    std::size_t head = 0;
    std::size_t total = 0;
    std::size_t activated = 0;

    std::string text() const;
};

/// Closed-form parameter counts; activated excludes the N - K idle routed
/// experts of every Seg-MoE layer.
ParamCount count_params(const ModelConfig& cfg);

struct AblationVariant {
    std::string id;
    std::vector<std::size_t> omega;
};

struct AblationSpec {
    ModelConfig base;
    TrainConfig train;
    std::vector<AblationVariant> variants;
    std::vector<std::uint64_t> seeds{2024};
    std::vector<std::size_t> horizons{96};
    EvalOptions eval;
    std::size_t threads = 1;
};

struct AblationRow {
    AblationVariant variant;
    std::vector<std::uint64_t> seeds;
    std::vector<double> seed_mse;  // avg-row MSE per seed
    std::vector<double> seed_mae;
    std::vector<double> seed_entropy;
    double mse = 0.0;  // mean over seeds
    double mae = 0.0;
    bool failed = false;
    std::string error;
    int rank = 0;  // 1 best, 2 second best by MSE
};

struct AblationReport {
    std::string header;
    std::vector<AblationRow> rows;

    std::string csv() const;
    std::string text() const;
};

/// "P=8, d_model=128, N=4, K=1"
std::string protocol_header(const ModelConfig& cfg);

/// Parses "1;5;4,5,5,4" style lists: variants separated by ';', each a scalar
/// or comma list. Ids are the variant text.
std::vector<AblationVariant> parse_variants(const std::string& text);

/// Trains every variant under every seed with identical settings. A variant
/// that throws is marked failed; the others are unaffected. Duplicate ids are
/// rejected before any training.
AblationReport ablate(const PreparedData& prepared, const AblationSpec& spec);

/// Worker cap from SEGMOE_THREADS (default 1).
std::size_t worker_threads();

}  // namespace segmoe
