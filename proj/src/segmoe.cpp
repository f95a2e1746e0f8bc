#include "segmoe/segmoe.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

namespace segmoe {

SegBatch segment(const Tensor& tokens, std::size_t omega) {
    if (omega < 1) throw std::invalid_argument("segment length must be >= 1");
    if (tokens.ndim() != 3) throw ShapeError("segment expects [batch, M, d_model], got " + shape_str(tokens.shape()));
    SegBatch s;
    s.batch = tokens.dim(0);
    s.tokens = tokens.dim(1);
    s.d_model = tokens.dim(2);
    s.width = omega;
    s.segments = (s.tokens + omega - 1) / omega;
    const std::size_t padded = s.segments * omega - s.tokens;
    Tensor t = padded > 0 ? pad_zeros(tokens, 1, padded) : tokens;
    s.values = reshape(t, {s.rows(), omega * s.d_model});
    s.valid.assign(s.rows() * omega, 1);
    for (std::size_t b = 0; b < s.batch; ++b)
        for (std::size_t p = s.tokens; p < s.segments * omega; ++p) s.valid[b * s.segments * omega + p] = 0;
    return s;
}

Tensor unsegment(const SegBatch& layout, const Tensor& flat) {
    if (flat.ndim() != 2 || flat.dim(0) != layout.rows() || flat.dim(1) != layout.width * layout.d_model) {
        throw ShapeError("unsegment: " + shape_str(flat.shape()) + " does not match the segment layout");
    }
    Tensor t = reshape(flat, {layout.batch, layout.segments * layout.width, layout.d_model});
    if (layout.padded_slots() > 0) t = slice(t, 1, 0, layout.tokens);
    return t;
}

std::vector<std::size_t> top_k_indices(std::span<const double> scores, std::size_t k) {
    std::vector<std::size_t> idx(scores.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::partial_sort(idx.begin(), idx.begin() + static_cast<long>(k), idx.end(), [&](std::size_t a, std::size_t b) {
        return scores[a] > scores[b] || (scores[a] == scores[b] && a < b);
    });
    idx.resize(k);
    return idx;
}

RouteDecision route(const Tensor& flat_segments, const Tensor& router_weight, std::size_t top_k,
                    const std::vector<std::size_t>* forced) {
    if (flat_segments.ndim() != 2 || router_weight.ndim() != 2 || flat_segments.dim(1) != router_weight.dim(0)) {
        throw ShapeError("route: segments " + shape_str(flat_segments.shape()) + " do not match router " +
                         shape_str(router_weight.shape()));
    }
    RouteDecision d;
    d.rows = flat_segments.dim(0);
    d.experts = router_weight.dim(1);
    d.top_k = top_k;
    if (top_k < 1 || top_k > d.experts) throw std::invalid_argument("route: top_k must lie in [1, N]");
    d.scores = softmax(linear(flat_segments, router_weight, Tensor()), 1);

    const auto s = d.scores.data();
    if (forced != nullptr) {
        if (forced->size() != d.rows * top_k) throw ShapeError("route: forced selection has the wrong size");
        d.selected = *forced;
    } else {
        d.selected.reserve(d.rows * top_k);
        for (std::size_t r = 0; r < d.rows; ++r) {
            const auto pick = top_k_indices(s.subspan(r * d.experts, d.experts), top_k);
            d.selected.insert(d.selected.end(), pick.begin(), pick.end());
        }
    }
    d.usage.assign(d.experts, 0);
    std::vector<double> keep(d.rows * d.experts, 0.0);
    for (std::size_t r = 0; r < d.rows; ++r)
        for (std::size_t i : d.selection(r)) {
            keep[r * d.experts + i] = 1.0;
            ++d.usage[i];
        }
    d.gates = mul(d.scores, Tensor::from({d.rows, d.experts}, std::move(keep)));
    return d;
}

ExpertFFN::ExpertFFN(std::size_t width, std::size_t hidden, std::mt19937_64& rng)
    : in(width, hidden, true, rng), out(hidden, width, true, rng) {}

void ExpertFFN::collect(const std::string& prefix, ParamList& params) const {
    in.collect(prefix + ".in", params);
    out.collect(prefix + ".out", params);
}

std::size_t ExpertFFN::parameter_count() const {
    return in.weight.numel() + in.bias.numel() + out.weight.numel() + out.bias.numel();
}

double usage_entropy(std::span<const double> f) {
    double h = 0.0;
    for (double p : f)
        if (p > 0.0) h -= p * std::log(p);
    return h;
}

RoutingStats routing_stats(std::span<const RouteDecision> decisions) {
    if (decisions.empty()) throw std::invalid_argument("routing_stats: no decisions");
    const std::size_t n = decisions.front().experts;
    const std::size_t k = decisions.front().top_k;
    RoutingStats st;
    st.f.assign(n, 0.0);
    st.r.assign(n, 0.0);
    std::size_t rows = 0;
    for (const auto& d : decisions) {
        if (d.experts != n || d.top_k != k) throw std::invalid_argument("routing_stats: mixed expert layouts");
        rows += d.rows;
        for (std::size_t i = 0; i < n; ++i) st.f[i] += static_cast<double>(d.usage[i]);
        const auto s = d.scores.data();
        for (std::size_t r = 0; r < d.rows; ++r)
            for (std::size_t i = 0; i < n; ++i) st.r[i] += s[r * n + i];
    }
    if (rows == 0) throw std::invalid_argument("routing_stats: at least one segment required");
    for (std::size_t i = 0; i < n; ++i) {
        st.f[i] /= static_cast<double>(k * rows);
        st.r[i] /= static_cast<double>(rows);
    }
    st.entropy = usage_entropy(st.f);
    return st;
}

RoutingStats routing_stats(const RouteDecision& decision) { return routing_stats(std::span(&decision, 1)); }

SegMoELayer::SegMoELayer(std::size_t d_model, std::size_t d_ff, std::size_t omega, std::size_t experts,
                         std::size_t top_k, bool shared_expert, std::mt19937_64& rng)
    : d_model_(d_model), omega_(omega), top_k_(top_k), use_shared_(shared_expert) {
    const std::size_t width = omega * d_model;
    router_ = xavier_uniform(width, experts, rng);
    for (std::size_t i = 0; i < experts; ++i) bank_.routed.emplace_back(width, d_ff, rng);
    if (use_shared_) {
        bank_.shared = ExpertFFN(width, d_ff, rng);
        bank_.shared_gate = Linear(width, 1, true, rng);
    }
}

void SegMoELayer::freeze_routing(bool frozen) {
    frozen_ = frozen;
    frozen_selection_.clear();
}

SegMoEOutput SegMoELayer::forward(const Tensor& tokens) { return forward_segments(segment(tokens, omega_)); }

SegMoEOutput SegMoELayer::forward_segments(const SegBatch& seg) {
    if (seg.width != omega_ || seg.d_model != d_model_) {
        throw ShapeError("Seg-MoE layer (omega " + std::to_string(omega_) + ", d_model " + std::to_string(d_model_) +
                         ") got segments of width " + std::to_string(seg.width) + " x " + std::to_string(seg.d_model));
    }
    const std::size_t rows = seg.rows();
    const std::size_t width = omega_ * d_model_;
    Tensor u = seg.values;
    if (seg.padded_slots() > 0) {
        std::vector<double> pad(rows * width, 0.0);
        for (std::size_t slot = 0; slot < seg.valid.size(); ++slot)
            if (!seg.valid[slot]) std::fill_n(pad.begin() + static_cast<long>(slot * d_model_), d_model_, 1.0);
        u = mask_fill(u, Tensor::from({rows, width}, std::move(pad)), 0.0);
    }

    const bool replay = frozen_ && frozen_selection_.size() == rows * top_k_;
    RouteDecision d = route(u, router_, top_k_, replay ? &frozen_selection_ : nullptr);
    if (frozen_ && !replay) frozen_selection_ = d.selected;

    Tensor out;
    if (use_shared_) {
        Tensor gate = sigmoid(bank_.shared_gate(u));
        d.shared_gate.assign(gate.data().begin(), gate.data().end());
        out = mul(bank_.shared(u), gate);
    } else {
        out = Tensor::zeros({rows, width});
    }

    for (std::size_t i = 0; i < bank_.routed.size(); ++i) {
        std::vector<std::size_t> chosen;
        for (std::size_t r = 0; r < rows; ++r) {
            const auto sel = d.selection(r);
            if (std::find(sel.begin(), sel.end(), i) != sel.end()) chosen.push_back(r);
        }
        if (chosen.empty()) continue;
        Tensor y = bank_.routed[i](index_select_rows(u, chosen));
        Tensor g = index_select_rows(slice(d.gates, 1, i, 1), chosen);
        out = index_add_rows(out, chosen, mul(y, g));
    }
    return {unsegment(seg, out), std::move(d)};
}

void SegMoELayer::collect(const std::string& prefix, ParamList& params) const {
    params.push_back({prefix + ".router", router_});
    for (std::size_t i = 0; i < bank_.routed.size(); ++i)
        bank_.routed[i].collect(prefix + ".expert" + std::to_string(i), params);
    if (use_shared_) {
        bank_.shared.collect(prefix + ".shared", params);
        bank_.shared_gate.collect(prefix + ".shared_gate", params);
    }
}

std::size_t SegMoELayer::routed_expert_parameters() const {
    return bank_.routed.empty() ? 0 : bank_.routed.front().parameter_count();
}

TokenMoEWeights token_moe_weights(const SegMoELayer& layer) {
    if (layer.omega() != 1) throw std::invalid_argument("token-wise reference needs omega = 1");
    TokenMoEWeights w;
    w.d_model = layer.d_model();
    w.experts = layer.experts();
    w.top_k = layer.top_k();
    w.router.assign(layer.router_weight().data().begin(), layer.router_weight().data().end());
    for (const auto& e : layer.bank().routed) {
        w.d_ff = e.in.out_features();
        w.w1.emplace_back(e.in.weight.data().begin(), e.in.weight.data().end());
        w.b1.emplace_back(e.in.bias.data().begin(), e.in.bias.data().end());
        w.w2.emplace_back(e.out.weight.data().begin(), e.out.weight.data().end());
        w.b2.emplace_back(e.out.bias.data().begin(), e.out.bias.data().end());
    }
    return w;
}

std::vector<double> token_moe_reference(std::span<const double> tokens, const TokenMoEWeights& w) {
    const std::size_t dm = w.d_model;
    const std::size_t n = w.experts;
    const std::size_t tokens_count = tokens.size() / dm;
    std::vector<double> out(tokens.size(), 0.0);
    std::vector<double> logits(n), probs(n), hidden(w.d_ff);
    for (std::size_t t = 0; t < tokens_count; ++t) {
        const double* x = tokens.data() + t * dm;
        for (std::size_t i = 0; i < n; ++i) {
            double acc = 0.0;
            for (std::size_t k = 0; k < dm; ++k) acc += x[k] * w.router[k * n + i];
            logits[i] = acc;
        }
        double mx = logits[0];
        for (std::size_t i = 1; i < n; ++i) mx = std::max(mx, logits[i]);
        double total = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            probs[i] = std::exp(logits[i] - mx);
            total += probs[i];
        }
        for (std::size_t i = 0; i < n; ++i) probs[i] /= total;

        std::vector<bool> picked(n, false);
        for (std::size_t round = 0; round < w.top_k; ++round) {
            std::size_t best = n;
            for (std::size_t i = 0; i < n; ++i)
                if (!picked[i] && (best == n || probs[i] > probs[best])) best = i;
            picked[best] = true;
        }

        double* y = out.data() + t * dm;
        for (std::size_t i = 0; i < n; ++i) {
            if (!picked[i]) continue;
            for (std::size_t j = 0; j < w.d_ff; ++j) {
                double acc = 0.0;
                for (std::size_t k = 0; k < dm; ++k) acc += x[k] * w.w1[i][k * w.d_ff + j];
                const double h = acc + w.b1[i][j];
                hidden[j] = h * (0.5 * std::erfc(-h / std::numbers::sqrt2));
            }
            for (std::size_t j = 0; j < dm; ++j) {
                double acc = 0.0;
                for (std::size_t k = 0; k < w.d_ff; ++k) acc += hidden[k] * w.w2[i][k * dm + j];
                const double e = acc + w.b2[i][j];
                y[j] += e * probs[i];
            }
        }
    }
    return out;
}

}  // namespace segmoe
