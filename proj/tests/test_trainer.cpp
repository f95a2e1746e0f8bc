#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>

#include "segmoe/config.hpp"
#include "segmoe/experiment.hpp"
#include "segmoe/trainer.hpp"

using namespace segmoe;

namespace {

ModelConfig small_model() {
    ModelConfig c;
    c.blocks = 2;
    c.d_model = 8;
    c.d_ff = 8;
    c.q_heads = 2;
    c.kv_heads = 1;
    c.patch_len = 8;
    c.lookback = 64;
    c.h_out = 16;
    c.experts = 3;
    c.omega = {2};
    return c;
}

TrainConfig quick_train() {
    TrainConfig t;
    t.max_epochs = 2;
    t.min_epochs = 1;
    t.batch_size = 16;
    t.train_stride = 8;
    t.seed = 7;
    return t;
}

PreparedData small_data() {
    SynthSpec s;
    s.channels = 2;
    s.length = 600;
    s.components = {{1.0, 24.0, 0.0}, {0.3, 7.0, 0.5}};
    s.noise_sigma = 0.05;
    s.seed = 3;
    return prepare_dataset(synth_series(s));
}

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::filesystem::path temp_dir(const std::string& name) {
    auto dir = std::filesystem::temp_directory_path() / ("segmoe_test_" + name);
    std::filesystem::create_directories(dir);
    return dir;
}

}  // namespace

TEST(AdamW, ZeroGradientFixedPointAndDecay) {
    Tensor w = Tensor::from({3}, {1.0, -2.0, 0.5}, true);
    ParamList params{{"w", w}};
    AdamState st;
    st.reset(params);
    w.mutable_grad();  // zero gradient buffer
    TrainConfig cfg;
    cfg.weight_decay = 0.0;
    ASSERT_TRUE(adamw_step(params, st, 0.01, cfg));
    EXPECT_EQ(w.data()[0], 1.0);
    EXPECT_EQ(w.data()[1], -2.0);

    cfg.weight_decay = 0.1;
    ASSERT_TRUE(adamw_step(params, st, 0.01, cfg));
    EXPECT_DOUBLE_EQ(w.data()[0], 0.999);
    EXPECT_DOUBLE_EQ(w.data()[1], -2.0 * 0.999);
    EXPECT_DOUBLE_EQ(w.data()[2], 0.5 * 0.999);
}

TEST(AdamW, QuadraticConvergesMonotonically) {
    Tensor x = Tensor::from({1}, {5.0}, true);
    ParamList params{{"x", x}};
    AdamState st;
    st.reset(params);
    TrainConfig cfg;
    cfg.weight_decay = 0.0;
    double prev = std::abs(x.data()[0]);
    for (int i = 0; i < 200; ++i) {
        x.zero_grad();
        sum(mul(x, x)).backward();
        ASSERT_TRUE(adamw_step(params, st, 0.01, cfg));
        const double now = std::abs(x.data()[0]);
        ASSERT_LT(now, prev) << "step " << i;
        prev = now;
    }
    EXPECT_LT(prev, 4.0);
}

TEST(AdamW, NonFiniteGradientSkipsStep) {
    Tensor w = Tensor::from({2}, {1.0, 2.0}, true);
    ParamList params{{"w", w}};
    AdamState st;
    st.reset(params);
    w.mutable_grad()[1] = std::numeric_limits<double>::quiet_NaN();
    EXPECT_FALSE(adamw_step(params, st, 0.1, TrainConfig{}));
    EXPECT_EQ(w.data()[0], 1.0);
    EXPECT_EQ(st.step, 0u);
}

TEST(AdamW, GlobalNormClipping) {
    Tensor a = Tensor::from({2}, {0, 0}, true), b = Tensor::from({1}, {0}, true);
    a.mutable_grad()[0] = 3.0;
    b.mutable_grad()[0] = 4.0;
    ParamList params{{"a", a}, {"b", b}};
    EXPECT_DOUBLE_EQ(clip_grad_norm(params, 1.0), 5.0);
    EXPECT_DOUBLE_EQ(a.grad()[0], 0.6);
    EXPECT_DOUBLE_EQ(b.grad()[0], 0.8);
    EXPECT_NEAR(clip_grad_norm(params, 1.0), 1.0, 1e-15);
}

TEST(Schedule, WarmupAndCosineEndpoints) {
    TrainConfig cfg;
    cfg.lr = 1e-3;
    cfg.min_lr = 1e-5;
    cfg.warmup = 0.1;
    const std::size_t total = 1000;
    EXPECT_EQ(lr_at(0, total, cfg), 0.0);
    EXPECT_DOUBLE_EQ(lr_at(50, total, cfg), 5e-4);
    EXPECT_DOUBLE_EQ(lr_at(100, total, cfg), 1e-3);
    EXPECT_NEAR(lr_at(total, total, cfg), 1e-5, 1e-12);
    EXPECT_NEAR(lr_at(550, total, cfg), 1e-5 + 0.5 * (1e-3 - 1e-5), 1e-12);
    for (std::size_t s = 101; s <= total; ++s) ASSERT_LE(lr_at(s, total, cfg), lr_at(s - 1, total, cfg));
}

TEST(EarlyStop, CountsPatience) {
    EarlyStopping es(2, 1);
    EXPECT_FALSE(es.update(1, 1.0));
    EXPECT_FALSE(es.update(2, 1.1));
    EXPECT_TRUE(es.update(3, 1.2));
    EXPECT_EQ(es.best_epoch(), 1u);

    EarlyStopping gated(1, 4);
    EXPECT_FALSE(gated.update(1, 1.0));
    EXPECT_FALSE(gated.update(2, 2.0));
    EXPECT_FALSE(gated.update(3, 3.0));
    EXPECT_TRUE(gated.update(4, 4.0));
}

TEST(TrainConfigTest, Validation) {
    TrainConfig t;
    t.min_lr = 1.0;
    try {
        t.validate();
        FAIL();
    } catch (const ConfigError& e) {
        EXPECT_EQ(e.field(), "min_lr");
    }
    t = TrainConfig{};
    t.patience = 0;
    EXPECT_THROW(t.validate(), ConfigError);
    t = TrainConfig{};
    t.warmup = 1.0;
    EXPECT_THROW(t.validate(), ConfigError);
}

TEST(ConfigText, RoundTripAndErrors) {
    ModelConfig m = small_model();
    m.omega = {4, 5};
    m.head = HeadKind::LastToken;
    ModelConfig back;
    for (const auto& [k, v] : model_config_entries(m)) ASSERT_TRUE(set_model_field(back, k, v)) << k;
    EXPECT_EQ(model_config_entries(back), model_config_entries(m));
    TrainConfig t;
    t.lr = 3.7e-4;
    TrainConfig tb;
    for (const auto& [k, v] : train_config_entries(t)) ASSERT_TRUE(set_train_field(tb, k, v)) << k;
    EXPECT_EQ(tb.lr, 3.7e-4);

    EXPECT_FALSE(set_model_field(back, "nonsense", "1"));
    EXPECT_THROW(set_model_field(back, "d_model", "abc"), ConfigError);
    EXPECT_THROW(set_model_field(back, "omega", "4,,5"), ConfigError);
    EXPECT_THROW(set_train_field(tb, "lr", "nan"), ConfigError);

    auto kv = parse_key_values("# comment\nd_model = 32\n\ntrain.lr=0.01  # tail\n");
    ASSERT_EQ(kv.size(), 2u);
    EXPECT_EQ(kv[0], (std::pair<std::string, std::string>{"d_model", "32"}));
    EXPECT_EQ(kv[1].second, "0.01");
    EXPECT_THROW(parse_key_values("d_model 32"), ConfigError);
}

TEST(Fit, OneEpochBoundAndBestModelReturned) {
    PreparedData p = small_data();
    ModelConfig mc = small_model();
    TrainConfig tc = quick_train();
    tc.max_epochs = 1;
    SegMoEModel model(mc, tc.seed);
    WindowSet train(p.data, p.split.train, mc.lookback, mc.h_out, tc.train_stride);
    WindowSet val(p.data, with_lookback(p.split.val, mc.lookback), mc.lookback, mc.h_out, mc.h_out);
    FitResult r = fit(model, train, val, tc);
    ASSERT_EQ(r.history.size(), 1u);
    EXPECT_EQ(r.best_epoch, 1u);

    tc.max_epochs = 4;
    SegMoEModel m2(mc, tc.seed);
    FitResult r2 = fit(m2, train, val, tc);
    double best = r2.history.front().val_loss;
    for (const auto& e : r2.history) best = std::min(best, e.val_loss);
    EXPECT_EQ(r2.best_val, best);
    EXPECT_NEAR(validation_loss(m2, val, 16, tc.delta), best, 1e-12);
    EXPECT_EQ(r2.history.front().routing.size(), 2u);
    EXPECT_GT(r2.history.front().routing[0].entropy, 0.0);
}

TEST(Fit, EmptyStreamsRejected) {
    PreparedData p = small_data();
    ModelConfig mc = small_model();
    SegMoEModel model(mc, 1);
    WindowSet train(p.data, p.split.train, mc.lookback, mc.h_out, 8);
    WindowSet none(p.data, Range{0, 10}, mc.lookback, mc.h_out, 1);
    EXPECT_THROW(fit(model, train, none, quick_train()), TrainingError);
}

TEST(Checkpoint, ReloadReproducesValidationLoss) {
    PreparedData p = small_data();
    ModelConfig mc = small_model();
    TrainConfig tc = quick_train();
    SegMoEModel model(mc, tc.seed);
    WindowSet train(p.data, p.split.train, mc.lookback, mc.h_out, tc.train_stride);
    WindowSet val(p.data, with_lookback(p.split.val, mc.lookback), mc.lookback, mc.h_out, mc.h_out);
    FitResult r = fit(model, train, val, tc);
    const auto path = (temp_dir("ckpt") / "model.ckpt").string();
    save_checkpoint(path, model, tc, r.adam, r.best_epoch, r.best_val);

    LoadedCheckpoint ck = read_checkpoint(path);
    EXPECT_EQ(ck.epoch, r.best_epoch);
    EXPECT_EQ(ck.best_val, r.best_val);
    EXPECT_EQ(model_config_entries(ck.model_config), model_config_entries(mc));
    EXPECT_EQ(ck.train_config.seed, tc.seed);
    SegMoEModel loaded = load_model(ck);
    EXPECT_NEAR(validation_loss(loaded, val, 16, tc.delta), r.best_val, 1e-9);
    const auto params = model.parameters();
    EXPECT_EQ(ck.file.tensors.size(), 3 * params.size());
    EXPECT_NO_THROW(ck.file.get("adam.m/" + params.front().name));
    EXPECT_NO_THROW(ck.file.get("adam.v/" + params.back().name));
}

TEST(Fit, BitwiseDeterministic) {
    PreparedData p = small_data();
    ModelConfig mc = small_model();
    TrainConfig tc = quick_train();
    WindowSet train(p.data, p.split.train, mc.lookback, mc.h_out, tc.train_stride);
    WindowSet val(p.data, with_lookback(p.split.val, mc.lookback), mc.lookback, mc.h_out, mc.h_out);
    std::string ckpt[2], hist[2];
    for (int run = 0; run < 2; ++run) {
        SegMoEModel model(mc, tc.seed);
        FitResult r = fit(model, train, val, tc);
        const auto path = (temp_dir("det") / ("run" + std::to_string(run) + ".ckpt")).string();
        save_checkpoint(path, model, tc, r.adam, r.best_epoch, r.best_val);
        ckpt[run] = read_file(path);
        hist[run] = history_csv(r.history) + routing_csv(r.history);
    }
    EXPECT_EQ(ckpt[0], ckpt[1]);
    EXPECT_EQ(hist[0], hist[1]);

    tc.seed = 8;
    SegMoEModel other(mc, tc.seed);
    FitResult r = fit(other, train, val, tc);
    EXPECT_NE(history_csv(r.history), hist[0].substr(0, history_csv(r.history).size()));
}

TEST(Fit, BeatsPersistenceOnSines) {
    PreparedData p = small_data();
    ModelConfig mc = small_model();
    TrainConfig tc = quick_train();
    tc.max_epochs = 6;
    tc.train_stride = 2;
    EvalOptions eo;
    eo.stride = 8;
    TrainedModel tm = train_and_evaluate(p, mc, tc, {16}, eo);
    PersistenceForecaster persistence(mc.lookback);
    EvalTable base = evaluate(persistence, p.data, p.split.test, {16}, eo);
    EXPECT_LT(tm.test.at_horizon(16).mse, base.at_horizon(16).mse);
}
