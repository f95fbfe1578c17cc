#include <mdnet/trainer.hpp>

#include <gtest/gtest.h>

#include <cmath>

using namespace mdnet;

namespace {

TrainConfig small(Stage stage, std::size_t n = 2)
{
    TrainConfig c = TrainConfig::desk(stage);
    c.iterations = 3;
    c.batch_size = 2;
    c.num_detectors = n;
    c.model.descriptor_dim = 8;
    c.model.layers = {{3, 4, 1}, {3, 8, 1}, {3, 8, 2}};
    c.sampler.patch = 32;
    return c;
}

Tensor<double> scalar_param(double v)
{
    return Tensor<double>({1}, std::vector<double>{v}, true);
}

} // namespace

TEST(Adam, ZeroGradientLeavesWeightsAndDecaysMoments)
{
    auto w = scalar_param(2.0);
    std::vector<Tensor<double>*> params{&w};
    const std::vector<std::string> names{"w"};
    const std::vector<bool> trainable{true};
    AdamState<double> state;
    state.m = {{0.5}};
    state.v = {{0.25}};
    AdamConfig cfg;
    // No gradient recorded: treated as zero. The moments still decay, so the
    // update is not exactly zero; with m0 = v0 = 0 it is.
    AdamState<double> fresh;
    adam_step<double>(params, names, trainable, fresh, cfg);
    EXPECT_EQ(w[0], 2.0);
    adam_step<double>(params, names, trainable, state, cfg);
    EXPECT_DOUBLE_EQ(state.m[0][0], 0.9 * 0.5);
    EXPECT_DOUBLE_EQ(state.v[0][0], 0.999 * 0.25);
}

TEST(Adam, FirstStepIsLearningRate)
{
    auto w = scalar_param(1.0);
    std::vector<Tensor<double>*> params{&w};
    const std::vector<std::string> names{"w"};
    const std::vector<bool> trainable{true};
    AdamState<double> state;
    w.backward();  // d w / d w = 1
    adam_step<double>(params, names, trainable, state, AdamConfig{});
    EXPECT_NEAR(w[0], 1.0 - 1e-4 / (1.0 + 1e-8), 1e-15);
}

TEST(Adam, QuadraticBowlDecreases)
{
    auto w = Tensor<double>({3}, std::vector<double>{1.0, -2.0, 0.5}, true);
    std::vector<Tensor<double>*> params{&w};
    const std::vector<std::string> names{"w"};
    const std::vector<bool> trainable{true};
    AdamState<double> state;
    AdamConfig cfg;
    cfg.lr = 0.05;
    double prev = std::numeric_limits<double>::infinity();
    for (int i = 0; i < 10; ++i) {
        w.zero_grad();
        auto loss = sum(square(w));
        EXPECT_LT(loss.item(), prev);
        prev = loss.item();
        loss.backward();
        adam_step<double>(params, names, trainable, state, cfg);
    }
}

TEST(Adam, FrozenEntriesUntouchedAndNanNamed)
{
    auto a = scalar_param(1.0), b = scalar_param(1.0);
    std::vector<Tensor<double>*> params{&a, &b};
    const std::vector<std::string> names{"a", "b"};
    AdamState<double> state;
    sum(add(a, b)).backward();
    adam_step<double>(params, names, {true, false}, state, AdamConfig{});
    EXPECT_LT(a[0], 1.0);
    EXPECT_EQ(b[0], 1.0);

    auto c = scalar_param(1.0);
    std::vector<Tensor<double>*> pc{&c};
    const std::vector<std::string> nc{"head.weight"};
    AdamState<double> sc;
    scale(c, std::numeric_limits<double>::quiet_NaN()).backward();
    try {
        adam_step<double>(pc, nc, {true}, sc, AdamConfig{});
        FAIL() << "expected NumericalError";
    } catch (const NumericalError& e) {
        EXPECT_NE(std::string(e.what()).find("head.weight"), std::string::npos);
    }
}

TEST(Clip, ScalesToMaxNorm)
{
    auto w = Tensor<double>({2}, std::vector<double>{0.0, 0.0}, true);
    sum(mul(w, Tensor<double>({2}, std::vector<double>{30.0, 40.0}))).backward();
    std::vector<Tensor<double>*> params{&w};
    EXPECT_DOUBLE_EQ(clip_grad_norm<double>(params, 5.0), 50.0);
    EXPECT_NEAR(w.grad()[0], 3.0, 1e-12);
    EXPECT_NEAR(w.grad()[1], 4.0, 1e-12);
    EXPECT_NEAR(clip_grad_norm<double>(params, 5.0), 5.0, 1e-12);
}

TEST(TrainConfig, Validation)
{
    auto c = TrainConfig::desk(Stage::priming);
    EXPECT_NO_THROW(c.validate());
    c.adam.lr = 0.0;
    EXPECT_THROW(c.validate(), ContractViolation);
    c = TrainConfig::desk(Stage::joint);
    c.batch_size = 0;
    EXPECT_THROW(c.validate(), ContractViolation);
    EXPECT_EQ(TrainConfig::full(Stage::priming).iterations, 70000u);
    EXPECT_EQ(TrainConfig::full(Stage::joint).batch_size, 10u);
}

TEST(Priming, HeadUntouchedAndDeterministic)
{
    const auto corpus = synthetic_corpus(3, 64, 1);
    const auto cfg = small(Stage::priming);
    auto ref = init_weights<float>([&] {
        ModelConfig m = cfg.model;
        m.num_detectors = cfg.num_detectors;
        return m;
    }(), cfg.seed);
    std::size_t hook_calls = 0;
    const auto a = train_priming<float>(cfg, corpus, [&](std::size_t, const std::string&) { ++hook_calls; });
    EXPECT_EQ(hook_calls, 1u);
    EXPECT_EQ(a.weights.head_weight.values(), ref.head_weight.values());
    EXPECT_EQ(a.weights.head_bias.values(), ref.head_bias.values());
    // The backbone did move.
    EXPECT_NE(a.weights.conv_weight.back().values(), ref.conv_weight.back().values());
    ASSERT_EQ(a.log.records.size(), 3u);
    for (const auto& r : a.log.records) {
        EXPECT_GT(r.triplet, 0.0);
        EXPECT_EQ(r.peaky, 0.0);
        EXPECT_EQ(r.dissimilarity, 0.0);
    }

    const auto b = train_priming<float>(cfg, corpus);
    EXPECT_EQ(serialize_weights(a.weights), serialize_weights(b.weights));
    EXPECT_EQ(a.log.to_csv(false), b.log.to_csv(false));
}

TEST(Joint, ReinitialisesHeadForNewN)
{
    const auto corpus = synthetic_corpus(3, 64, 2);
    const auto primed = train_priming<float>(small(Stage::priming), corpus).weights;
    auto cfg = small(Stage::joint, 4);
    cfg.checkpoint_every = 1;
    std::vector<std::size_t> at;
    const auto r = train_joint<float>(cfg, corpus, primed, [&](std::size_t it, const std::string&) { at.push_back(it); });
    EXPECT_EQ(r.weights.config.num_detectors, 4u);
    EXPECT_EQ(r.weights.head_bias.size(), 4u);
    EXPECT_EQ(at, (std::vector<std::size_t>{1, 2, 3}));
    for (const auto& rec : r.log.records) {
        EXPECT_GT(rec.peaky, 0.0);
        EXPECT_GT(rec.dissimilarity, 0.0);
        EXPECT_TRUE(std::isfinite(rec.total));
    }
    // All branches move in the joint stage.
    EXPECT_NE(r.weights.conv_weight.back().values(), primed.conv_weight.back().values());
}

TEST(Training, StageMismatchAndBadCorpus)
{
    const auto corpus = synthetic_corpus(2, 64, 3);
    EXPECT_THROW(train_priming<float>(small(Stage::joint), corpus), ContractViolation);
    EXPECT_THROW(train_priming<float>(small(Stage::priming), Corpus{}), ContractViolation);
    EXPECT_THROW(train_priming<float>(small(Stage::priming), synthetic_corpus(2, 16, 3)), ContractViolation);
}

TEST(Training, DegenerateCorpusAborts)
{
    auto cfg = small(Stage::priming);
    // No draw can reach full overlap while translating, so every pair is rejected.
    cfg.sampler.limits.translation = 0.4;
    cfg.sampler.limits.min_overlap = 1.0;
    cfg.sampler.limits.max_draws = 2;
    try {
        train_priming<float>(cfg, synthetic_corpus(2, 64, 4));
        FAIL() << "expected abort";
    } catch (const ContractViolation& e) {
        EXPECT_NE(std::string(e.what()).find("degenerate"), std::string::npos);
    }
}

TEST(TrainLog, CsvAndWindowMean)
{
    TrainLog log;
    for (std::size_t i = 1; i <= 4; ++i) {
        TrainRecord r;
        r.iteration = i;
        r.triplet = static_cast<double>(i);
        r.wallclock_ms = 12.5;
        log.append(r);
    }
    EXPECT_DOUBLE_EQ(log.window_mean(0, 2, [](const TrainRecord& r) { return r.triplet; }), 1.5);
    EXPECT_DOUBLE_EQ(log.window_mean(2, 10, [](const TrainRecord& r) { return r.triplet; }), 3.5);
    EXPECT_NE(log.to_csv(true).find("wallclock"), std::string::npos);
    EXPECT_EQ(log.to_csv(false).find("wallclock"), std::string::npos);
}
