#include "segmoe/experiment.hpp"

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <iomanip>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include "segmoe/config.hpp"

namespace segmoe {

PreparedData prepare_dataset(const Dataset& raw, double train_frac, double val_frac, double test_frac) {
    PreparedData p;
    p.split = chronological_split(raw.length, train_frac, val_frac, test_frac);
    p.scaler = Standardizer::fit(raw, p.split.train);
    p.data = p.scaler.apply(raw);
    return p;
}

TrainedModel train_and_evaluate(const PreparedData& prepared, const ModelConfig& model_cfg,
                                const TrainConfig& train_cfg, const std::vector<std::size_t>& horizons,
                                const EvalOptions& eval, const FitOptions& options) {
    model_cfg.validate();
    train_cfg.validate();
    TrainedModel out;
    out.model = std::make_unique<SegMoEModel>(model_cfg, train_cfg.seed);
    const std::size_t L = model_cfg.lookback, H = model_cfg.h_out;
    const std::size_t val_stride = train_cfg.val_stride ? train_cfg.val_stride : H;
    WindowSet train(prepared.data, prepared.split.train, L, H, train_cfg.train_stride);
    WindowSet val(prepared.data, with_lookback(prepared.split.val, L), L, H, val_stride);
    if (train.empty())
        throw TrainingError("training split (" + std::to_string(prepared.split.train.size()) +
                            " steps) is shorter than lookback + h_out");
    if (val.empty())
        throw TrainingError("validation split (" + std::to_string(prepared.split.val.size()) +
                            " steps) cannot hold h_out targets");
    out.fit = fit(*out.model, train, val, train_cfg, options);
    ModelForecaster forecaster(*out.model);
    out.test = evaluate(forecaster, prepared.data, prepared.split.test, horizons, eval);
    return out;
}

double final_routing_entropy(const FitResult& fit) {
    if (fit.history.empty() || fit.history.back().routing.empty()) return 0.0;
    double h = 0.0;
    for (const auto& l : fit.history.back().routing) h += l.entropy;
    return h / static_cast<double>(fit.history.back().routing.size());
}

ParamCount count_params(const ModelConfig& c) {
    c.validate();
    ParamCount pc;
    const std::size_t D = c.d_model, hd = c.head_dim();
    pc.embedding = c.patch_len * D + D;
    const std::size_t attention = D * c.q_heads * hd + 2 * D * c.kv_heads * hd + c.q_heads * hd * D;
    for (std::size_t omega : c.segment_schedule()) {
        ParamCount::Block b;
        b.omega = omega;
        const std::size_t w = omega * D;
        b.routed_expert = w * c.d_ff + c.d_ff + c.d_ff * w + w;
        const std::size_t shared = c.shared_expert ? b.routed_expert + w + 1 : 0;
        b.total = 2 * D + attention + w * c.experts + c.experts * b.routed_expert + shared;
        b.activated = b.total - (c.experts - c.top_k) * b.routed_expert;
        pc.blocks.push_back(b);
    }
    const std::size_t head_in = c.head == HeadKind::Flatten ? c.patches() * D : D;
    pc.head = D + head_in * c.h_out + c.h_out;
    pc.total = pc.embedding + pc.head;
    pc.activated = pc.total;
    for (const auto& b : pc.blocks) {
        pc.total += b.total;
        pc.activated += b.activated;
    }
    return pc;
}

std::string ParamCount::text() const {
    std::ostringstream out;
    out << std::left << std::setw(10) << "part" << std::right << std::setw(7) << "omega" << std::setw(14)
        << "activated" << std::setw(14) << "total" << '\n';
    out << std::left << std::setw(10) << "embed" << std::right << std::setw(7) << "-" << std::setw(14) << embedding
        << std::setw(14) << embedding << '\n';
    for (std::size_t i = 0; i < blocks.size(); ++i)
        out << std::left << std::setw(10) << ("block" + std::to_string(i)) << std::right << std::setw(7)
            << blocks[i].omega << std::setw(14) << blocks[i].activated << std::setw(14) << blocks[i].total << '\n';
    out << std::left << std::setw(10) << "head" << std::right << std::setw(7) << "-" << std::setw(14) << head
        << std::setw(14) << head << '\n';
    out << std::left << std::setw(10) << "all" << std::right << std::setw(7) << "-" << std::setw(14) << activated
        << std::setw(14) << total << '\n';
    return out.str();
}

std::string protocol_header(const ModelConfig& c) {
    return "P=" + std::to_string(c.patch_len) + ", d_model=" + std::to_string(c.d_model) +
           ", N=" + std::to_string(c.experts) + ", K=" + std::to_string(c.top_k);
}

std::vector<AblationVariant> parse_variants(const std::string& text) {
    std::vector<AblationVariant> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ';')) {
        item.erase(std::remove_if(item.begin(), item.end(), [](char ch) { return ch == ' '; }), item.end());
        if (item.empty()) continue;
        out.push_back({item, parse_size_list("variants", item)});
    }
    if (out.empty()) throw ConfigError("variants", "no variants given");
    return out;
}

std::size_t worker_threads() {
    const char* env = std::getenv("SEGMOE_THREADS");
    if (!env || !*env) return 1;
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (*end != '\0' || v < 1) throw ConfigError("SEGMOE_THREADS", std::string("expected a positive integer, got '") + env + "'");
    return static_cast<std::size_t>(v);
}

AblationReport ablate(const PreparedData& prepared, const AblationSpec& spec) {
    if (spec.variants.empty()) throw ConfigError("variants", "no variants given");
    if (spec.seeds.empty()) throw ConfigError("seeds", "no seeds given");
    std::set<std::string> ids;
    for (const auto& v : spec.variants) {
        if (!ids.insert(v.id).second) throw ConfigError("variants", "duplicate variant id '" + v.id + "'");
        ModelConfig c = spec.base;
        c.omega = v.omega;
        c.validate();
    }
    spec.train.validate();

    AblationReport rep;
    rep.header = protocol_header(spec.base);
    const std::size_t nv = spec.variants.size(), ns = spec.seeds.size();
    struct Cell {
        double mse = 0, mae = 0, entropy = 0;
        bool failed = false;
        std::string error;
    };
    std::vector<Cell> cells(nv * ns);
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
        for (std::size_t job; (job = next.fetch_add(1)) < cells.size();) {
            const auto& v = spec.variants[job / ns];
            ModelConfig mc = spec.base;
            mc.omega = v.omega;
            TrainConfig tc = spec.train;
            tc.seed = spec.seeds[job % ns];
            Cell& cell = cells[job];
            try {
                TrainedModel t = train_and_evaluate(prepared, mc, tc, spec.horizons, spec.eval);
                if (t.test.average().skipped) throw TrainingError("no horizon could be evaluated");
                cell.mse = t.test.average().mse;
                cell.mae = t.test.average().mae;
                cell.entropy = final_routing_entropy(t.fit);
            } catch (const std::exception& e) {
                cell.failed = true;
                cell.error = e.what();
            }
        }
    };
    const std::size_t threads = std::clamp<std::size_t>(spec.threads, 1, cells.size());
    if (threads == 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (std::size_t i = 0; i < threads; ++i) pool.emplace_back(worker);
        for (auto& t : pool) t.join();
    }

    for (std::size_t vi = 0; vi < nv; ++vi) {
        AblationRow row;
        row.variant = spec.variants[vi];
        row.seeds = spec.seeds;
        for (std::size_t si = 0; si < ns; ++si) {
            const Cell& c = cells[vi * ns + si];
            if (c.failed) {
                row.failed = true;
                row.error = c.error;
                break;
            }
            row.seed_mse.push_back(c.mse);
            row.seed_mae.push_back(c.mae);
            row.seed_entropy.push_back(c.entropy);
            row.mse += c.mse / static_cast<double>(ns);
            row.mae += c.mae / static_cast<double>(ns);
        }
        rep.rows.push_back(std::move(row));
    }
    std::vector<std::size_t> order;
    for (std::size_t i = 0; i < rep.rows.size(); ++i)
        if (!rep.rows[i].failed) order.push_back(i);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return rep.rows[a].mse < rep.rows[b].mse; });
    for (std::size_t r = 0; r < std::min<std::size_t>(2, order.size()); ++r) rep.rows[order[r]].rank = static_cast<int>(r + 1);
    return rep;
}

std::string AblationReport::csv() const {
    std::ostringstream out;
    out << "variant,seed,mse,mae,entropy,status\n";
    for (const auto& r : rows) {
        if (r.failed) {
            out << '"' << r.variant.id << "\",NA,NA,NA,NA,failed\n";
            continue;
        }
        for (std::size_t i = 0; i < r.seeds.size(); ++i)
            out << '"' << r.variant.id << "\"," << r.seeds[i] << ',' << format_number(r.seed_mse[i]) << ','
                << format_number(r.seed_mae[i]) << ',' << format_number(r.seed_entropy[i]) << ",ok\n";
        out << '"' << r.variant.id << "\",mean," << format_number(r.mse) << ',' << format_number(r.mae) << ",NA,"
            << (r.rank == 1 ? "best" : r.rank == 2 ? "second" : "ok") << '\n';
    }
    return out.str();
}

std::string AblationReport::text() const {
    std::ostringstream out;
    out << header << '\n';
    out << std::left << std::setw(16) << "omega" << std::right << std::setw(12) << "MSE" << std::setw(12) << "MAE"
        << "  rank\n";
    for (const auto& r : rows) {
        out << std::left << std::setw(16) << r.variant.id << std::right;
        if (r.failed) {
            out << std::setw(12) << "failed" << std::setw(12) << "-" << "  " << r.error << '\n';
            continue;
        }
        out << std::fixed << std::setprecision(4) << std::setw(12) << r.mse << std::setw(12) << r.mae;
        out.unsetf(std::ios::fixed);
        out << "  " << (r.rank == 1 ? "best" : r.rank == 2 ? "second" : "") << '\n';
    }
    return out.str();
}

}  // namespace segmoe
