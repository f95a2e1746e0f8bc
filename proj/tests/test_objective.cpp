#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "segmoe/backbone.hpp"
#include "segmoe/gradcheck.hpp"
#include "segmoe/objective.hpp"

using namespace segmoe;

namespace {

RouteDecision decision_with_scores(const std::vector<double>& probs, std::size_t n) {
    std::vector<double> logits(probs.size());
    for (std::size_t i = 0; i < probs.size(); ++i) logits[i] = std::log(probs[i]);
    std::vector<double> eye(n * n, 0.0);
    for (std::size_t i = 0; i < n; ++i) eye[i * n + i] = 1.0;
    return route(Tensor::from({probs.size() / n, n}, logits), Tensor::from({n, n}, eye), 1);
}

std::vector<double> random_simplex(std::size_t n, std::mt19937_64& rng) {
    std::gamma_distribution<double> g(1.0, 1.0);
    std::vector<double> v(n);
    double total = 0.0;
    for (auto& x : v) total += (x = g(rng));
    for (auto& x : v) x /= total;
    return v;
}

}  // namespace

TEST(Huber, Anchors) {
    Tensor a = Tensor::from({3}, {1.0, -2.0, 0.5});
    EXPECT_EQ(huber_loss(a, a, 2.0).item(), 0.0);
    EXPECT_DOUBLE_EQ(huber_loss(Tensor::from({1}, {1.0}), Tensor::from({1}, {0.0}), 2.0).item(), 0.5);
    EXPECT_DOUBLE_EQ(huber_loss(Tensor::from({1}, {3.0}), Tensor::from({1}, {0.0}), 2.0).item(), 4.0);
    EXPECT_DOUBLE_EQ(huber_value(-3.0, 2.0), 4.0);
    // mean over elements
    EXPECT_DOUBLE_EQ(huber_loss(Tensor::from({2}, {1.0, 3.0}), Tensor::zeros({2}), 2.0).item(), 2.25);
    EXPECT_THROW(huber_loss(a, Tensor::zeros({2}), 2.0), ShapeError);
    EXPECT_THROW(huber_loss(a, a, 0.0), std::invalid_argument);
}

TEST(Huber, DerivativeContinuousAtThreshold) {
    const double delta = 2.0, h = 1e-9;
    for (double sign : {1.0, -1.0}) {
        Tensor below = Tensor::from({1}, {sign * (delta - h)}, true);
        Tensor above = Tensor::from({1}, {sign * (delta + h)}, true);
        huber_loss(below, Tensor::zeros({1}), delta).backward();
        huber_loss(above, Tensor::zeros({1}), delta).backward();
        EXPECT_LT(std::abs(below.grad()[0] - above.grad()[0]), 1e-6);
        EXPECT_LT(std::abs(huber_slope(sign * (delta - h), delta) - huber_slope(sign * (delta + h), delta)), 1e-6);
        // value continuity too
        EXPECT_NEAR(huber_value(sign * (delta - h), delta), huber_value(sign * (delta + h), delta), 1e-8);
    }
}

TEST(Huber, BoundedByHalfSquare) {
    for (int i = -600; i <= 600; ++i) {
        const double e = i / 100.0;
        const double h = huber_value(e, 2.0);
        if (std::abs(e) <= 2.0)
            EXPECT_DOUBLE_EQ(h, 0.5 * e * e);
        else
            EXPECT_LT(h, 0.5 * e * e);
    }
}

TEST(AuxLoss, Anchors) {
    for (std::size_t n = 1; n <= 9; ++n) {
        std::vector<double> u(n, 1.0 / static_cast<double>(n));
        EXPECT_NEAR(aux_balance_value(u, u), 1.0, 1e-12);
        std::vector<double> c(n, 0.0);
        c[0] = 1.0;
        EXPECT_NEAR(aux_balance_value(c, c), static_cast<double>(n), 1e-12);
    }
    EXPECT_THROW(aux_balance_value(std::vector<double>{1.5, -0.5}, std::vector<double>{0.5, 0.5}),
                 std::invalid_argument);
    EXPECT_THROW(aux_balance_value(std::vector<double>{0.5, 0.4}, std::vector<double>{0.5, 0.5}),
                 std::invalid_argument);
}

TEST(AuxLoss, BruteForceAndCauchySchwarz) {
    std::mt19937_64 rng(3);
    for (int trial = 0; trial < 200; ++trial) {
        const std::size_t n = 2 + trial % 7;
        auto f = random_simplex(n, rng), r = random_simplex(n, rng);
        double brute = 0.0;
        for (std::size_t i = 0; i < n; ++i) brute += f[i] * r[i];
        EXPECT_NEAR(aux_balance_value(f, r), static_cast<double>(n) * brute, 1e-12);
        EXPECT_GE(aux_balance_value(f, f), 1.0 - 1e-12);
    }
}

TEST(AuxLoss, GradientFlowsThroughROnly) {
    std::vector<double> f{0.5, 0.25, 0.25, 0.0};
    Tensor r = Tensor::from({4}, {0.1, 0.2, 0.3, 0.4}, true);
    aux_balance_loss(f, r).backward();
    auto g = r.grad();
    for (std::size_t i = 0; i < 4; ++i) EXPECT_DOUBLE_EQ(g[i], 4.0 * f[i]);
}

TEST(TotalLoss, Composition) {
    Tensor pred = Tensor::from({1, 1}, {1.0}), target = Tensor::zeros({1, 1});
    RouteDecision d = decision_with_scores({0.6, 0.4}, 2);  // f = [1, 0] -> aux 2 * 0.6
    std::vector<RouteDecision> routing{d};
    LossReport rep = total_loss(pred, target, routing, 1, 0.02, 2.0);
    EXPECT_DOUBLE_EQ(rep.pred, 0.5);
    EXPECT_NEAR(rep.aux_mean, 1.2, 1e-12);
    EXPECT_NEAR(rep.total_value, 0.524, 1e-12);
    EXPECT_EQ(rep.total_value, rep.total.item());

    LossReport zero = total_loss(pred, target, routing, 1, 0.0, 2.0);
    EXPECT_EQ(zero.total_value, zero.pred);

    // perfect prediction, uniform routing over two layers
    std::vector<std::size_t> rr{0, 1, 2, 3};
    Tensor flat = Tensor::zeros({4, 4});
    RouteDecision balanced = route(flat, Tensor::zeros({4, 4}), 1, &rr);
    LossReport perfect = total_loss(target, target, {balanced, balanced}, 2, 0.02, 2.0);
    EXPECT_NEAR(perfect.total_value, 0.02, 1e-12);
    EXPECT_EQ(perfect.aux.size(), 2u);

    EXPECT_THROW(total_loss(pred, target, routing, 2, 0.02, 2.0), std::invalid_argument);
}

TEST(TotalLoss, GradientWithFrozenRouting) {
    ModelConfig cfg;
    cfg.blocks = 2;
    cfg.d_model = 4;
    cfg.d_ff = 6;
    cfg.q_heads = 2;
    cfg.kv_heads = 1;
    cfg.patch_len = 4;
    cfg.lookback = 16;
    cfg.h_out = 3;
    cfg.experts = 3;
    cfg.omega = {2, 3};
    SegMoEModel model(cfg, 9);
    model.freeze_routing(true);
    std::mt19937_64 rng(4);
    std::normal_distribution<double> n;
    std::vector<double> windows(2 * 16), tgt(2 * 3);
    for (auto& v : windows) v = n(rng);
    for (auto& v : tgt) v = 3.0 * n(rng);
    Tensor target = Tensor::from({2, 3}, tgt);
    ForwardContext ctx;
    auto loss = [&] {
        ModelOutput out = model.forward(windows, 2, ctx);
        return total_loss(out.prediction, target, out.routing, 2, 0.02, 2.0).total;
    };
    (void)loss();
    std::vector<std::pair<std::string, Tensor>> inputs;
    for (const auto& p : model.parameters()) inputs.emplace_back(p.name, p.tensor);
    GradCheckReport rep = check_gradients(loss, inputs);
    for (const auto& e : rep.entries) EXPECT_TRUE(e.ok) << e.name << " rel err " << e.max_rel_error;
}

TEST(Metrics, AnchorsAndBruteForce) {
    std::vector<double> a{1, 2, 3}, zeros(3, 0.0), ones(3, 1.0);
    Metrics same = mse_mae(a, a);
    EXPECT_EQ(same.mse, 0.0);
    EXPECT_EQ(same.mae, 0.0);
    Metrics off = mse_mae(zeros, ones);
    EXPECT_EQ(off.mse, 1.0);
    EXPECT_EQ(off.mae, 1.0);
    EXPECT_THROW(mse_mae(std::vector<double>{1, 2}, ones), std::invalid_argument);

    std::mt19937_64 rng(5);
    std::normal_distribution<double> n;
    std::vector<double> p(40 * 3), t(40 * 3);
    for (auto& v : p) v = n(rng);
    for (auto& v : t) v = n(rng);
    double mse = 0, mae = 0;
    for (std::size_t d = 0; d < 3; ++d) {
        double m1 = 0, m2 = 0;
        for (std::size_t h = 0; h < 40; ++h) {
            const double e = p[h * 3 + d] - t[h * 3 + d];
            m1 += e * e;
            m2 += std::abs(e);
        }
        mse += m1 / 40 / 3;
        mae += m2 / 40 / 3;
    }
    Metrics m = mse_mae(p, t, 3);
    EXPECT_NEAR(m.mse, mse, 1e-12);
    EXPECT_NEAR(m.mae, mae, 1e-12);
}
