#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "segmoe/layers.hpp"
#include "segmoe/tensor.hpp"

namespace segmoe {

/// Token sequences cut into C = ceil(M / omega) non-overlapping segments,
/// each flattened to omega * d_model values. Rows are (batch, segment) in
/// order; the last segment of every sequence is zero-padded when
/// M % omega != 0.
struct SegBatch {
    std::size_t batch = 0;
    std::size_t tokens = 0;    // M
    std::size_t width = 0;     // omega
    std::size_t d_model = 0;
    std::size_t segments = 0;  // C per sequence
    Tensor values;             // [batch * C, omega * d_model]
    std::vector<std::uint8_t> valid;  // [batch * C * omega], 0 for padded slots

    std::size_t rows() const { return batch * segments; }
    std::size_t padded_slots() const { return segments * width - tokens; }
};

/// tokens: [batch, M, d_model].
SegBatch segment(const Tensor& tokens, std::size_t omega);
/// Inverse of segment() on a [rows, omega * d_model] tensor: drops padded
/// slots and returns [batch, M, d_model].
Tensor unsegment(const SegBatch& layout, const Tensor& flat);

/// Routing outcome for every segment row.
struct RouteDecision {
    std::size_t rows = 0;
    std::size_t experts = 0;
    std::size_t top_k = 0;
    Tensor scores;  // [rows, N] softmax probabilities (differentiable)
    Tensor gates;   // [rows, N], scores on the selection, 0 elsewhere
    // Per row, the K chosen experts by descending score, ties to lower index.
    std::vector<std::size_t> selected;  // rows * K
    std::vector<double> shared_gate;    // [rows], empty without a shared expert
    std::vector<std::size_t> usage;     // selections per expert

    std::span<const std::size_t> selection(std::size_t row) const { return {selected.data() + row * top_k, top_k}; }
};

/// K largest entries of `scores`, descending, ties broken toward the lower index.
std::vector<std::size_t> top_k_indices(std::span<const double> scores, std::size_t k);

/// Softmax over flat_segments x router_weight, Top-K without renormalization.
/// `forced` replaces the Top-K choice (rows * K indices) to hold routing fixed.
RouteDecision route(const Tensor& flat_segments, const Tensor& router_weight, std::size_t top_k,
                    const std::vector<std::size_t>* forced = nullptr);

/// Two-layer feed-forward: out(gelu(in(x))).
struct ExpertFFN {
    Linear in;
    Linear out;

    ExpertFFN() = default;
    ExpertFFN(std::size_t width, std::size_t hidden, std::mt19937_64& rng);
    Tensor operator()(const Tensor& x) const { return out(gelu(in(x))); }
    void collect(const std::string& prefix, ParamList& params) const;
    std::size_t parameter_count() const;
};

struct ExpertBank {
    std::vector<ExpertFFN> routed;
    ExpertFFN shared;
    Linear shared_gate;  // omega * d_model -> 1, followed by a sigmoid
};

struct RoutingStats {
    std::vector<double> f;  // fraction of selections per expert
    std::vector<double> r;  // mean router probability per expert
    double entropy = 0.0;   // -sum f ln f
};

/// Pools decisions: f_i = selections_i / (K * C), r_i = mean_c s_{i,c}.
RoutingStats routing_stats(std::span<const RouteDecision> decisions);
RoutingStats routing_stats(const RouteDecision& decision);
double usage_entropy(std::span<const double> f);

struct SegMoEOutput {
    Tensor tokens;  // [batch, M, d_model]
    RouteDecision decision;
};

/// Segment-wise sparse mixture of experts replacing the block FFN.
class SegMoELayer {
public:
    SegMoELayer() = default;
    SegMoELayer(std::size_t d_model, std::size_t d_ff, std::size_t omega, std::size_t experts, std::size_t top_k,
                bool shared_expert, std::mt19937_64& rng);

    SegMoEOutput forward(const Tensor& tokens);
    /// Routes and transforms pre-built segments. Padded slots are masked to
    /// zero before routing, whatever they hold.
    SegMoEOutput forward_segments(const SegBatch& segments);

    /// While frozen, the first forward records its selection and later
    /// forwards with the same row count replay it.
    void freeze_routing(bool frozen);
    bool routing_frozen() const { return frozen_; }

    std::size_t omega() const { return omega_; }
    std::size_t experts() const { return bank_.routed.size(); }
    std::size_t top_k() const { return top_k_; }
    std::size_t d_model() const { return d_model_; }
    bool has_shared_expert() const { return use_shared_; }

    Tensor& router_weight() { return router_; }
    ExpertBank& bank() { return bank_; }
    const ExpertBank& bank() const { return bank_; }
    const Tensor& router_weight() const { return router_; }

    void collect(const std::string& prefix, ParamList& params) const;
    /// Parameters of one routed expert.
    std::size_t routed_expert_parameters() const;

private:
    std::size_t d_model_ = 0;
    std::size_t omega_ = 1;
    std::size_t top_k_ = 1;
    bool use_shared_ = true;
    Tensor router_;  // [omega * d_model, N]
    ExpertBank bank_;
    bool frozen_ = false;
    std::vector<std::size_t> frozen_selection_;
};

/// Plain-loop token-wise MoE (softmax gate, Top-K, sum of g_i FFN_i(x) over
/// selected experts in ascending index order). Independent of the tensor
/// engine; shares only the arithmetic order with the omega = 1 layer.
struct TokenMoEWeights {
    std::size_t d_model = 0;
    std::size_t d_ff = 0;
    std::size_t experts = 0;
    std::size_t top_k = 1;
    std::vector<double> router;  // d_model x N
    std::vector<std::vector<double>> w1, b1, w2, b2;
};

TokenMoEWeights token_moe_weights(const SegMoELayer& layer);
/// tokens: M x d_model row-major. Returns M x d_model.
std::vector<double> token_moe_reference(std::span<const double> tokens, const TokenMoEWeights& weights);

}  // namespace segmoe
