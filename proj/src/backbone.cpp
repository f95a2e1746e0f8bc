#include "segmoe/backbone.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "segmoe/data.hpp"

namespace segmoe {

namespace {

Tensor key_mask_tensor(std::span<const std::uint8_t> key_valid) {
    std::vector<double> m(key_valid.size());
    for (std::size_t i = 0; i < m.size(); ++i) m[i] = key_valid[i] ? 0.0 : 1.0;
    return Tensor::from({1, 1, 1, key_valid.size()}, std::move(m));
}

bool any_masked(std::span<const std::uint8_t> key_valid) {
    return std::any_of(key_valid.begin(), key_valid.end(), [](std::uint8_t v) { return v == 0; });
}

}  // namespace

TokenSequence embed_patches(const Tensor& patches, std::vector<std::uint8_t> valid, const Linear& embedding) {
    if (patches.ndim() != 3) throw ShapeError("patches must be [batch, M, P], got " + shape_str(patches.shape()));
    if (patches.dim(2) != embedding.in_features()) {
        throw ShapeError("patch width " + std::to_string(patches.dim(2)) + " does not match the embedding's " +
                         std::to_string(embedding.in_features()));
    }
    if (valid.empty()) valid.assign(patches.dim(1), 1);
    if (valid.size() != patches.dim(1)) throw ShapeError("patch mask length does not match M");
    return {embedding(patches), std::move(valid)};
}

Tensor dense_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::span<const std::uint8_t> key_valid,
                       double dropout_p, ForwardContext& ctx, Tensor* probs_out) {
    const double scale = 1.0 / std::sqrt(static_cast<double>(q.shape().back()));
    Tensor scores = mul_scalar(matmul(q, transpose(k, -1, -2)), scale);
    if (!key_valid.empty() && any_masked(key_valid))
        scores = mask_fill(scores, key_mask_tensor(key_valid), -std::numeric_limits<double>::infinity());
    Tensor probs = softmax(scores, -1);
    if (probs_out) *probs_out = probs;
    return matmul(dropout(probs, dropout_p, ctx), v);
}

Tensor tiled_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::span<const std::uint8_t> key_valid,
                       std::size_t tile) {
    if (q.ndim() != 4 || k.shape() != v.shape() || k.ndim() != 4 || q.dim(0) != k.dim(0) || q.dim(1) != k.dim(1))
        throw ShapeError("tiled_attention expects matching [batch, heads, M, hd] inputs");
    if (tile < 1) throw std::invalid_argument("attention tile must be >= 1");
    const std::size_t B = q.dim(0), H = q.dim(1), Mq = q.dim(2), Mk = k.dim(2), hd = q.dim(3);
    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
    const auto qd = q.data(), kd = k.data(), vd = v.data();
    std::vector<double> out(B * H * Mq * hd, 0.0);
    std::vector<double> acc(hd), s(tile);
    for (std::size_t bh = 0; bh < B * H; ++bh) {
        const double* kb = kd.data() + bh * Mk * hd;
        const double* vb = vd.data() + bh * Mk * hd;
        for (std::size_t i = 0; i < Mq; ++i) {
            const double* qi = qd.data() + (bh * Mq + i) * hd;
            double m = -std::numeric_limits<double>::infinity();
            double l = 0.0;
            std::fill(acc.begin(), acc.end(), 0.0);
            for (std::size_t t0 = 0; t0 < Mk; t0 += tile) {
                const std::size_t t1 = std::min(Mk, t0 + tile);
                double tile_max = -std::numeric_limits<double>::infinity();
                for (std::size_t j = t0; j < t1; ++j) {
                    if (!key_valid.empty() && !key_valid[j]) {
                        s[j - t0] = -std::numeric_limits<double>::infinity();
                        continue;
                    }
                    double dot = 0.0;
                    for (std::size_t c = 0; c < hd; ++c) dot += qi[c] * kb[j * hd + c];
                    s[j - t0] = dot * scale;
                    tile_max = std::max(tile_max, s[j - t0]);
                }
                if (tile_max == -std::numeric_limits<double>::infinity()) continue;
                const double m_new = std::max(m, tile_max);
                const double correction = std::exp(m - m_new);
                l *= correction;
                for (double& a : acc) a *= correction;
                for (std::size_t j = t0; j < t1; ++j) {
                    if (s[j - t0] == -std::numeric_limits<double>::infinity()) continue;
                    const double p = std::exp(s[j - t0] - m_new);
                    l += p;
                    for (std::size_t c = 0; c < hd; ++c) acc[c] += p * vb[j * hd + c];
                }
                m = m_new;
            }
            double* o = out.data() + (bh * Mq + i) * hd;
            for (std::size_t c = 0; c < hd; ++c) o[c] = acc[c] / l;
        }
    }
    return Tensor::from({B, H, Mq, hd}, std::move(out));
}

GroupedQueryAttention::GroupedQueryAttention(std::size_t d_model, std::size_t q_heads, std::size_t kv_heads,
                                             double rope_base, std::mt19937_64& rng)
    : d_model_(d_model), q_heads_(q_heads), kv_heads_(kv_heads), rope_base_(rope_base) {
    if (q_heads == 0 || kv_heads == 0 || q_heads % kv_heads != 0)
        throw std::invalid_argument("q_heads must be a positive multiple of kv_heads");
    if (d_model % q_heads != 0) throw std::invalid_argument("d_model must be divisible by q_heads");
    head_dim_ = d_model / q_heads;
    wq = Linear(d_model, q_heads * head_dim_, false, rng);
    wk = Linear(d_model, kv_heads * head_dim_, false, rng);
    wv = Linear(d_model, kv_heads * head_dim_, false, rng);
    wo = Linear(q_heads * head_dim_, d_model, false, rng);
}

GroupedQueryAttention::Heads GroupedQueryAttention::project(const Tensor& x) const {
    if (x.ndim() != 3 || x.dim(2) != d_model_)
        throw ShapeError("attention expects [batch, M, " + std::to_string(d_model_) + "], got " + shape_str(x.shape()));
    const std::size_t B = x.dim(0), M = x.dim(1);
    std::vector<double> pos(M);
    for (std::size_t i = 0; i < M; ++i) pos[i] = static_cast<double>(i);
    const auto heads = [&](const Linear& w, std::size_t h) {
        return permute(reshape(w(x), {B, M, h, head_dim_}), {0, 2, 1, 3});
    };
    Heads out;
    out.q = rope(heads(wq, q_heads_), pos, rope_base_);
    out.k = rope(heads(wk, kv_heads_), pos, rope_base_);
    out.v = heads(wv, kv_heads_);
    return out;
}

Tensor GroupedQueryAttention::forward(const Tensor& x, std::span<const std::uint8_t> key_valid, double dropout_p,
                                      ForwardContext& ctx, bool tiled, std::size_t tile, Tensor* probs_out) const {
    const std::size_t B = x.dim(0), M = x.dim(1);
    Heads h = project(x);
    const std::size_t group = q_heads_ / kv_heads_;
    Tensor k = group > 1 ? repeat_interleave(h.k, 1, group) : h.k;
    Tensor v = group > 1 ? repeat_interleave(h.v, 1, group) : h.v;
    Tensor o;
    // The streaming path builds no graph, so it is only taken for inference.
    if (tiled && !ctx.train && !grad_enabled() && !probs_out)
        o = tiled_attention(h.q, k, v, key_valid, tile);
    else
        o = dense_attention(h.q, k, v, key_valid, dropout_p, ctx, probs_out);
    return wo(reshape(permute(o, {0, 2, 1, 3}), {B, M, q_heads_ * head_dim_}));
}

void GroupedQueryAttention::collect(const std::string& prefix, ParamList& params) const {
    wq.collect(prefix + ".wq", params);
    wk.collect(prefix + ".wk", params);
    wv.collect(prefix + ".wv", params);
    wo.collect(prefix + ".wo", params);
}

EncoderBlock::EncoderBlock(const ModelConfig& cfg, std::size_t index, std::size_t omega, std::mt19937_64& rng)
    : attn_norm(cfg.d_model),
      attention(cfg.d_model, cfg.q_heads, cfg.kv_heads, cfg.rope_base, rng),
      moe_norm(cfg.d_model),
      moe(cfg.d_model, cfg.d_ff, omega, cfg.experts, cfg.top_k, cfg.shared_expert, rng),
      keep_(droppath_keep(index, cfg.blocks, cfg.droppath)),
      dropout_(cfg.dropout),
      tiled_(cfg.tiled_attention),
      tile_(cfg.attention_tile) {}

BlockOutput EncoderBlock::forward(const Tensor& x, std::span<const std::uint8_t> key_valid, ForwardContext& ctx) {
    Tensor a = attention.forward(attn_norm(x), key_valid, dropout_, ctx, tiled_, tile_);
    Tensor h = add(x, drop_path(a, keep_, ctx));
    SegMoEOutput m = moe.forward(moe_norm(h));
    Tensor y = add(h, drop_path(dropout(m.tokens, dropout_, ctx), keep_, ctx));
    return {std::move(y), std::move(m.decision)};
}

void EncoderBlock::collect(const std::string& prefix, ParamList& params) const {
    attn_norm.collect(prefix + ".attn_norm", params);
    attention.collect(prefix + ".attn", params);
    moe_norm.collect(prefix + ".moe_norm", params);
    moe.collect(prefix + ".moe", params);
}

ForecastHead::ForecastHead(const ModelConfig& cfg, std::mt19937_64& rng)
    : norm(cfg.d_model),
      proj(cfg.head == HeadKind::Flatten ? cfg.patches() * cfg.d_model : cfg.d_model, cfg.h_out, true, rng),
      kind(cfg.head) {}

Tensor ForecastHead::operator()(const Tensor& tokens) const {
    const std::size_t B = tokens.dim(0), M = tokens.dim(1), D = tokens.dim(2);
    Tensor z = norm(tokens);
    if (kind == HeadKind::Flatten) return proj(reshape(z, {B, M * D}));
    return proj(reshape(slice(z, 1, M - 1, 1), {B, D}));
}

void ForecastHead::collect(const std::string& prefix, ParamList& params) const {
    norm.collect(prefix + ".norm", params);
    proj.collect(prefix + ".proj", params);
}

SegMoEModel::SegMoEModel(ModelConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
    cfg_.validate();
    std::mt19937_64 rng(seed);
    embedding_ = Linear(cfg_.patch_len, cfg_.d_model, true, rng);
    const auto schedule = cfg_.segment_schedule();
    blocks_.reserve(cfg_.blocks);
    for (std::size_t b = 0; b < cfg_.blocks; ++b) blocks_.emplace_back(cfg_, b, schedule[b], rng);
    head_ = ForecastHead(cfg_, rng);
}

ModelOutput SegMoEModel::forward(std::span<const double> windows, std::size_t batch, ForwardContext& ctx) {
    const std::size_t L = cfg_.lookback, P = cfg_.patch_len, M = cfg_.patches();
    if (windows.size() != batch * L) {
        throw ShapeError("expected " + std::to_string(batch) + " windows of " + std::to_string(L) + " steps, got " +
                         std::to_string(windows.size()) + " values");
    }
    std::vector<double> values;
    values.reserve(batch * M * P);
    std::vector<std::uint8_t> valid;
    for (std::size_t b = 0; b < batch; ++b) {
        Patches p = patchify(windows.subspan(b * L, L), P);
        values.insert(values.end(), p.values.begin(), p.values.end());
        if (b == 0) valid = p.mask;
    }
    return forward_tokens(embed_patches(Tensor::from({batch, M, P}, std::move(values)), std::move(valid), embedding_),
                          ctx);
}

ModelOutput SegMoEModel::forward_tokens(TokenSequence seq, ForwardContext& ctx) {
    ModelOutput out;
    out.routing.reserve(blocks_.size());
    Tensor x = seq.tokens;
    for (auto& block : blocks_) {
        BlockOutput bo = block.forward(x, seq.valid, ctx);
        x = std::move(bo.tokens);
        out.routing.push_back(std::move(bo.decision));
    }
    out.prediction = head_(x);
    return out;
}

ParamList SegMoEModel::parameters() const {
    ParamList params;
    embedding_.collect("embed", params);
    for (std::size_t b = 0; b < blocks_.size(); ++b) blocks_[b].collect("block" + std::to_string(b), params);
    head_.collect("head", params);
    return params;
}

void SegMoEModel::freeze_routing(bool frozen) {
    for (auto& block : blocks_) block.moe.freeze_routing(frozen);
}

}  // namespace segmoe
