// segmoe: train / eval / forecast / ablate / params / synth
#include <CLI11.hpp>
#include <fmt/core.h>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "segmoe/config.hpp"
#include "segmoe/experiment.hpp"

namespace fs = std::filesystem;
using namespace segmoe;

namespace {

struct RunSpec {
    std::string config_path;
    std::string data_path;
    std::string preset = "sines-3ch";
    std::string out = ".";
    std::string horizons = "96,192,336,720";
    std::string omega;
    std::vector<std::string> overrides;  // key=value
    std::size_t seed = 0;
    std::size_t patch_len = 0;
    std::size_t h_out = 0;
    std::size_t epochs = 0;
    std::size_t eval_stride = 0;

    ModelConfig model;
    TrainConfig train;
    std::vector<std::size_t> horizon_list;
};

std::string read_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("config", "cannot open '" + path + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void apply(RunSpec& r, const std::string& key, const std::string& value) {
    if (key == "data") r.data_path = value;
    else if (key == "preset") r.preset = value;
    else if (key == "horizons") r.horizons = value;
    else if (key == "eval_stride") r.eval_stride = parse_size_list(key, value).at(0);
    else if (!set_model_field(r.model, key, value) && !set_train_field(r.train, key, value))
        throw ConfigError(key, "unknown key");
}

// Config file first, then --set overrides, then dedicated flags. Everything
// is validated here, before any data is read or model allocated.
void resolve(RunSpec& r, const CLI::App& app) {
    const RunSpec flags = r;
    if (!r.config_path.empty())
        for (const auto& [k, v] : parse_key_values(read_file(r.config_path))) apply(r, k, v);
    for (const auto& kv : r.overrides) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos) throw ConfigError(kv, "expected key=value");
        apply(r, kv.substr(0, eq), kv.substr(eq + 1));
    }
    if (app.count("--data")) r.data_path = flags.data_path;
    if (app.count("--preset")) r.preset = flags.preset;
    if (app.count("--horizons")) r.horizons = flags.horizons;
    if (app.count("--eval-stride")) r.eval_stride = flags.eval_stride;
    if (app.count("--seed")) r.train.seed = r.seed;
    if (!r.omega.empty()) r.model.omega = parse_size_list("omega", r.omega);
    if (r.patch_len) r.model.patch_len = r.patch_len;
    if (r.h_out) r.model.h_out = r.h_out;
    if (r.epochs) r.train.max_epochs = r.epochs, r.train.min_epochs = std::min(r.train.min_epochs, r.epochs);
    r.horizon_list = parse_size_list("horizons", r.horizons);
    for (auto h : r.horizon_list)
        if (h < 1) throw ConfigError("horizons", "every horizon must be >= 1");
    r.model.validate();
    r.train.validate();
}

PreparedData load_data(const RunSpec& r) {
    Dataset raw = r.data_path.empty() ? synth_series(synth_preset(r.preset)) : load_csv(r.data_path);
    return prepare_dataset(raw);
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << text;
}

void add_common(CLI::App* c, RunSpec& r) {
    c->add_option("--config", r.config_path, "key = value config file");
    c->add_option("--seed", r.seed, "random seed");
    c->add_option("--out", r.out, "output directory");
    c->add_option("--data", r.data_path, "CSV input (default: synthetic preset)");
    c->add_option("--preset", r.preset, "synthetic preset when no --data is given");
    c->add_option("--horizons", r.horizons, "comma-separated forecast horizons");
    c->add_option("--omega", r.omega, "segment length, scalar or per-block list");
    c->add_option("--patch-len", r.patch_len, "patch length P");
    c->add_option("--h-out", r.h_out, "steps predicted per model call");
    c->add_option("--epochs", r.epochs, "maximum epochs");
    c->add_option("--eval-stride", r.eval_stride, "step between evaluation windows (default h_out)");
    c->add_option("--set", r.overrides, "extra key=value settings")->take_all();
}

int cmd_train(RunSpec& r) {
    PreparedData data = load_data(r);
    fs::create_directories(r.out);
    FitOptions fo;
    fo.on_epoch = [](const EpochRecord& e) {
        fmt::print("epoch {:3d}  train {:.5f}  val {:.5f}  lr {:.2e}\n", e.epoch, e.train_loss, e.val_loss, e.lr);
        std::fflush(stdout);
    };
    TrainedModel t = train_and_evaluate(data, r.model, r.train, r.horizon_list, {.stride = r.eval_stride}, fo);
    const fs::path out(r.out);
    save_checkpoint((out / "checkpoint.bin").string(), *t.model, r.train, t.fit.adam, t.fit.best_epoch, t.fit.best_val);
    write_text(out / "history.csv", history_csv(t.fit.history));
    write_text(out / "routing.csv", routing_csv(t.fit.history));
    write_text(out / "metrics.csv", t.test.csv());
    for (const auto& w : t.test.warnings) fmt::print(stderr, "warning: {}\n", w);
    fmt::print("best epoch {} (val {:.5f}){}\n{}", t.fit.best_epoch, t.fit.best_val,
               t.fit.stopped_early ? ", stopped early" : "", t.test.text());
    return 0;
}

LoadedCheckpoint load_checkpoint_arg(const std::string& path) {
    if (path.empty()) throw ConfigError("checkpoint", "--checkpoint is required");
    return read_checkpoint(path);
}

int cmd_eval(RunSpec& r, const std::string& ckpt_path, bool baseline) {
    LoadedCheckpoint ck = load_checkpoint_arg(ckpt_path);
    PreparedData data = load_data(r);
    SegMoEModel model = load_model(ck);
    ModelForecaster f(model);
    EvalTable tab = evaluate(f, data.data, data.split.test, r.horizon_list, {.stride = r.eval_stride});
    for (const auto& w : tab.warnings) fmt::print(stderr, "warning: {}\n", w);
    fmt::print("{}", tab.text());
    fs::create_directories(r.out);
    write_text(fs::path(r.out) / "metrics.csv", tab.csv());
    if (baseline) {
        PersistenceForecaster p(model.config().lookback);
        const std::size_t stride = r.eval_stride ? r.eval_stride : model.config().h_out;
        EvalTable b = evaluate(p, data.data, data.split.test, r.horizon_list, {.stride = stride});
        fmt::print("persistence\n{}", b.text());
        write_text(fs::path(r.out) / "baseline.csv", b.csv());
    }
    return 0;
}

int cmd_forecast(RunSpec& r, const std::string& ckpt_path, std::size_t index, std::size_t horizon) {
    LoadedCheckpoint ck = load_checkpoint_arg(ckpt_path);
    PreparedData data = load_data(r);
    SegMoEModel model = load_model(ck);
    ModelForecaster f(model);
    fs::create_directories(r.out);
    const fs::path path = fs::path(r.out) / ("forecast_" + std::to_string(index) + ".csv");
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    export_forecast(f, data.data, data.split.test, index, horizon, r.eval_stride ? r.eval_stride : model.config().h_out,
                    out);
    fmt::print("wrote {}\n", path.string());
    return 0;
}

int cmd_ablate(RunSpec& r, const std::string& variants, const std::string& seeds) {
    AblationSpec spec;
    spec.base = r.model;
    spec.train = r.train;
    spec.variants = parse_variants(variants);
    spec.seeds.clear();
    for (auto s : parse_size_list("seeds", seeds)) spec.seeds.push_back(s);
    spec.horizons = r.horizon_list;
    spec.eval.stride = r.eval_stride;
    spec.threads = worker_threads();
    for (const auto& v : spec.variants) {
        ModelConfig c = spec.base;
        c.omega = v.omega;
        c.validate();
    }
    PreparedData data = load_data(r);
    AblationReport rep = ablate(data, spec);
    fs::create_directories(r.out);
    write_text(fs::path(r.out) / "ablation.csv", rep.csv());
    fmt::print("{}", rep.text());
    for (const auto& row : rep.rows)
        if (row.failed) return 2;
    return 0;
}

int cmd_params(RunSpec& r) {
    ParamCount pc = count_params(r.model);
    fmt::print("{}\n{}", protocol_header(r.model), pc.text());
    return 0;
}

int cmd_synth(RunSpec& r, const std::string& file) {
    Dataset d = r.data_path.empty() ? synth_series(synth_preset(r.preset)) : load_csv(r.data_path);
    fs::create_directories(r.out);
    const fs::path path = fs::path(r.out) / (file.empty() ? r.preset + ".csv" : file);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    write_csv(out, d);
    fmt::print("wrote {} ({} steps x {} channels)\n", path.string(), d.length, d.channels);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Seg-MoE time-series forecaster"};
    app.require_subcommand(1);
    RunSpec r;
    std::string ckpt, variants = "1;4", seeds = "2024", synth_file;
    std::size_t index = 0, horizon = 96;
    bool baseline = false;

    auto* train = app.add_subcommand("train", "train a model and evaluate it on the test split");
    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on the test split");
    auto* forecast = app.add_subcommand("forecast", "export one test-window forecast as CSV");
    auto* abl = app.add_subcommand("ablate", "compare segment-length schedules across seeds");
    auto* params = app.add_subcommand("params", "count activated and total parameters");
    auto* synth = app.add_subcommand("synth", "write a synthetic dataset as CSV");
    for (auto* c : {train, eval, forecast, abl, params, synth}) add_common(c, r);
    for (auto* c : {eval, forecast}) c->add_option("--checkpoint", ckpt, "checkpoint file")->required();
    eval->add_flag("--baseline", baseline, "also evaluate the persistence baseline");
    forecast->add_option("--index", index, "evaluation window index");
    forecast->add_option("--horizon", horizon, "forecast horizon");
    abl->add_option("--variants", variants, "';'-separated omega schedules, e.g. \"1;4;4,5,5,4\"");
    abl->add_option("--seeds", seeds, "comma-separated seeds");
    synth->add_option("--file", synth_file, "output file name inside --out");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    try {
        CLI::App* cmd = app.get_subcommands().front();
        resolve(r, *cmd);
        if (cmd == train) return cmd_train(r);
        if (cmd == eval) return cmd_eval(r, ckpt, baseline);
        if (cmd == forecast) return cmd_forecast(r, ckpt, index, horizon);
        if (cmd == abl) return cmd_ablate(r, variants, seeds);
        if (cmd == params) return cmd_params(r);
        return cmd_synth(r, synth_file);
    } catch (const ConfigError& e) {
        fmt::print(stderr, "error: {}\n", e.what());
        return 1;
    } catch (const std::exception& e) {
        fmt::print(stderr, "error: {}\n", e.what());
        return 2;
    }
}
