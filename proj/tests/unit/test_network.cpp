#include "afp/adam.hpp"
#include "afp/errors.hpp"
#include "afp/gradcheck.hpp"
#include "afp/network.hpp"
#include "afp/rng.hpp"
#include "afp/serialize.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <numeric>

using namespace afp;

namespace {

NetworkSpec dense_identity_spec(int c) {
    NetworkSpec s;
    s.input = {1, 1, c};
    s.classes = c;
    s.layers = {LayerSpec::dense(c)};
    return s;
}

ModelCheckpoint dense_identity_model(int c) {
    auto m = init_model(dense_identity_spec(c), 0);
    std::fill(m.params.begin(), m.params.end(), 0.0f);
    for (int i = 0; i < c; ++i) m.params[static_cast<std::size_t>(i * c + i)] = 1.0f;
    return m;
}

Tensor random_batch(Rng& rng, int n, Shape3 s) {
    Tensor t({n, s.h, s.w, s.c});
    for (auto& v : t.data()) v = static_cast<float>(0.05 + 0.9 * uniform01(rng));
    return t;
}

std::vector<int> random_labels(Rng& rng, int n, int c) {
    std::vector<int> y(static_cast<std::size_t>(n));
    for (auto& v : y) v = static_cast<int>(uniform_index(rng, static_cast<std::uint64_t>(c)));
    return y;
}

// Small network exercising every layer kind, with random (nonzero) biases so
// no unit sits exactly on a ReLU kink.
ModelCheckpoint random_small_model(std::uint64_t seed) {
    NetworkSpec s;
    s.input = {6, 6, 2};
    s.classes = 4;
    s.layers = {LayerSpec::conv2d(3, 3), LayerSpec::relu(), LayerSpec::maxpool2d(2),
                LayerSpec::residual(3),  LayerSpec::flatten(), LayerSpec::dense(4)};
    auto m = init_model(s, seed);
    Rng rng(seed ^ 0xabcdef);
    for (auto& p : m.params) p = static_cast<float>(0.5 * normal01(rng));
    return m;
}

// Straight-line victim forward pass, written independently of the engine:
// nested loops over the documented parameter layout.
std::vector<double> naive_victim_forward(const ModelCheckpoint& m, const Tensor& x) {
    const float* p = m.params.data();
    auto conv = [&](const std::vector<double>& in, int h, int w, int cin, int cout) {
        const float* wt = p;
        const float* b = p + cout * 9 * cin;
        p = b + cout;
        std::vector<double> out(static_cast<std::size_t>(h * w * cout));
        for (int y = 0; y < h; ++y)
            for (int xx = 0; xx < w; ++xx)
                for (int o = 0; o < cout; ++o) {
                    double s = b[o];
                    for (int ky = 0; ky < 3; ++ky)
                        for (int kx = 0; kx < 3; ++kx)
                            for (int ci = 0; ci < cin; ++ci) {
                                const int iy = y + ky - 1;
                                const int ix = xx + kx - 1;
                                if (iy < 0 || iy >= h || ix < 0 || ix >= w) continue;
                                s += static_cast<double>(wt[((o * 3 + ky) * 3 + kx) * cin + ci]) *
                                     in[static_cast<std::size_t>((iy * w + ix) * cin + ci)];
                            }
                    out[static_cast<std::size_t>((y * w + xx) * cout + o)] = std::max(0.0, s);
                }
        return out;
    };
    auto pool = [](const std::vector<double>& in, int h, int w, int c) {
        std::vector<double> out(static_cast<std::size_t>((h / 2) * (w / 2) * c));
        for (int y = 0; y < h / 2; ++y)
            for (int xx = 0; xx < w / 2; ++xx)
                for (int ch = 0; ch < c; ++ch) {
                    double mx = -1e300;
                    for (int dy = 0; dy < 2; ++dy)
                        for (int dx = 0; dx < 2; ++dx)
                            mx = std::max(mx, in[static_cast<std::size_t>(((2 * y + dy) * w + 2 * xx + dx) * c + ch)]);
                    out[static_cast<std::size_t>((y * (w / 2) + xx) * c + ch)] = mx;
                }
        return out;
    };
    std::vector<double> a(x.values().begin(), x.values().end());
    a = pool(conv(a, 28, 28, 1, 16), 28, 28, 16);
    a = pool(conv(a, 14, 14, 16, 32), 14, 14, 32);
    std::vector<double> logits(10);
    const float* wt = p;
    const float* b = p + 10 * a.size();
    for (int o = 0; o < 10; ++o) {
        double s = b[o];
        for (std::size_t i = 0; i < a.size(); ++i) s += static_cast<double>(wt[o * a.size() + i]) * a[i];
        logits[static_cast<std::size_t>(o)] = s;
    }
    return logits;
}

}  // namespace

TEST(NetworkSpec, VictimAndAttributorShapesCompose) {
    const auto v = NetworkSpec::victim({28, 28, 1}, 10);
    EXPECT_EQ(v.layer_shapes().back(), (Shape3{1, 1, 10}));
    EXPECT_EQ(v.param_count(), 160u + 4640u + 15690u);
    const auto a = NetworkSpec::attributor({28, 28, 1}, 17);
    EXPECT_EQ(a.layer_shapes().back(), (Shape3{1, 1, 17}));
}

TEST(NetworkSpec, DescriptorRoundTrip) {
    const auto a = NetworkSpec::attributor({28, 28, 1}, 21);
    EXPECT_EQ(NetworkSpec::parse(a.descriptor()), a);
    EXPECT_THROW(NetworkSpec::parse("input=28x28x1;classes=10;bogus"), FormatError);
    EXPECT_THROW(NetworkSpec::parse("input=4x4x1;classes=3;flatten;dense(2)"), InvalidInput);
}

TEST(NetworkSpec, RejectsNonComposingLayers) {
    NetworkSpec s;
    s.input = {4, 4, 2};
    s.classes = 2;
    s.layers = {LayerSpec::residual(3), LayerSpec::flatten(), LayerSpec::dense(2)};
    EXPECT_THROW(s.validate(), InvalidInput);
}

TEST(Forward, ZeroParamsGiveEqualLogits) {
    auto m = init_model(NetworkSpec::victim({28, 28, 1}, 10), 3);
    std::fill(m.params.begin(), m.params.end(), 0.0f);
    Rng rng(1);
    const auto logits = forward(m, random_batch(rng, 3, {28, 28, 1}));
    for (std::size_t i = 0; i < logits.size(); ++i) EXPECT_EQ(logits[i], 0.0f);
}

TEST(Forward, DenseIdentityReturnsInput) {
    const auto m = dense_identity_model(10);
    Tensor x({1, 1, 1, 10});
    for (int i = 0; i < 10; ++i) x[static_cast<std::size_t>(i)] = static_cast<float>(i) * 0.5f - 2.0f;
    const auto logits = forward(m, x);
    for (int i = 0; i < 10; ++i) EXPECT_FLOAT_EQ(logits[static_cast<std::size_t>(i)], x[static_cast<std::size_t>(i)]);
}

TEST(Forward, MatchesStraightLineReimplementation) {
    const auto m = init_model(NetworkSpec::victim({28, 28, 1}, 10), 0);
    Rng rng(11);
    const auto batch = random_batch(rng, 2, {28, 28, 1});
    const auto logits = forward(m, batch);
    for (int n = 0; n < 2; ++n) {
        const auto ref = naive_victim_forward(m, batch.sample(n));
        for (int j = 0; j < 10; ++j) {
            EXPECT_NEAR(logits[static_cast<std::size_t>(n * 10 + j)], ref[static_cast<std::size_t>(j)], 1e-5);
        }
    }
}

TEST(Forward, ShapeMismatchIsInvalidInput) {
    const auto m = init_model(NetworkSpec::victim({28, 28, 1}, 10), 0);
    EXPECT_THROW(forward(m, Tensor({1, 27, 28, 1})), InvalidInput);
}

TEST(Forward, PredictionsInvariantToBatchSize) {
    const auto m = init_model(NetworkSpec::attributor({28, 28, 1}, 17), 4);
    Rng rng(2);
    const auto batch = random_batch(rng, 6, {28, 28, 1});
    const auto all = forward(m, batch);
    for (int n = 0; n < 6; ++n) {
        const auto one = forward(m, batch.slice(n, n + 1));
        for (int j = 0; j < 17; ++j) EXPECT_NEAR(one[static_cast<std::size_t>(j)], all[static_cast<std::size_t>(n * 17 + j)], 1e-5);
    }
}

TEST(Loss, UniformLogitsGiveLogC) {
    const auto m = dense_identity_model(10);
    const Tensor x({1, 1, 1, 10}, 0.3f);
    const int y[] = {4};
    EXPECT_NEAR(loss_and_param_gradients(m, x, y).loss, std::log(10.0), 1e-12);
    const auto p = softmax(forward(m, x).data());
    EXPECT_NEAR(std::accumulate(p.begin(), p.end(), 0.0), 1.0, 1e-6);
}

TEST(Loss, LargeMarginDrivesLossToZero) {
    const auto m = dense_identity_model(10);
    Tensor x({1, 1, 1, 10}, 0.0f);
    x[3] = 20.0f;
    const int y[] = {3};
    const double l = loss_and_param_gradients(m, x, y).loss;
    EXPECT_LT(l, 1e-3);
    EXPECT_GE(l, 0.0);
}

TEST(Loss, LabelOutOfRangeIsInvalidInput) {
    const auto m = dense_identity_model(4);
    const Tensor x({1, 1, 1, 4});
    const int y[] = {4};
    EXPECT_THROW(loss_and_param_gradients(m, x, y), InvalidInput);
}

TEST(Loss, ParamGradientMatchesFiniteDifferences) {
    const auto m = random_small_model(21);
    Rng rng(5);
    const auto batch = random_batch(rng, 4, m.spec.input);
    const auto labels = random_labels(rng, 4, m.spec.classes);
    EXPECT_LT(finite_diff_check(m, batch, labels, 100, 1e-3, 9), 1e-4);
}

TEST(Loss, VictimParamGradientMatchesFiniteDifferences) {
    auto m = init_model(NetworkSpec::victim({28, 28, 1}, 10), 8);
    Rng rng(6);
    for (auto& p : m.params) p += static_cast<float>(0.01 * normal01(rng));
    const auto batch = random_batch(rng, 2, m.spec.input);
    const auto labels = random_labels(rng, 2, 10);
    EXPECT_LT(finite_diff_check(m, batch, labels, 100, 1e-3, 1), 1e-4);
}

TEST(InputGradient, ZeroWeightsGiveZeroGradient) {
    auto m = init_model(NetworkSpec::victim({28, 28, 1}, 10), 3);
    std::fill(m.params.begin(), m.params.end(), 0.0f);
    Rng rng(1);
    const auto g = input_gradient(m, random_batch(rng, 1, {28, 28, 1}).sample(0), 2);
    for (float v : g.values()) EXPECT_EQ(v, 0.0f);
}

TEST(InputGradient, DenseIdentityClosedForm) {
    const auto m = dense_identity_model(2);
    const Tensor x({1, 1, 2}, std::vector<float>{0.2f, 0.7f});
    const auto g = input_gradient(m, x, 0);
    const auto p = softmax(x.data());
    EXPECT_NEAR(g[0], p[0] - 1.0, 1e-7);
    EXPECT_NEAR(g[1], p[1], 1e-7);
}

TEST(InputGradient, MatchesFiniteDifferences) {
    auto m = init_model(NetworkSpec::victim({28, 28, 1}, 10), 12);
    Rng rng(13);
    for (auto& p : m.params) p += static_cast<float>(0.01 * normal01(rng));
    Tensor x = random_batch(rng, 1, {28, 28, 1});
    const int label[] = {7};
    const auto g = input_gradients(m, x, label);
    const std::vector<double> params(m.params.begin(), m.params.end());
    std::uint64_t base = 0;
    mean_loss(m.spec, params, x, label, &base);
    double worst = 0.0;
    for (std::size_t i : sample_coords(x.size(), 50, 3)) {
        const float saved = x[i];
        double numeric = 0.0;
        for (float h = 1e-3f; h > 1e-6f; h *= 0.1f) {
            std::uint64_t pu = 0;
            std::uint64_t pd = 0;
            x[i] = saved + h;
            const float up_at = x[i];
            const double up = mean_loss(m.spec, params, x, label, &pu);
            x[i] = saved - h;
            const float down_at = x[i];
            const double down = mean_loss(m.spec, params, x, label, &pd);
            numeric = (up - down) / (static_cast<double>(up_at) - down_at);
            if (pu == base && pd == base) break;
        }
        x[i] = saved;
        const double a = g[i];
        worst = std::max(worst, std::fabs(a - numeric) / std::max({std::fabs(a), std::fabs(numeric), 1e-8}));
    }
    EXPECT_LT(worst, 1e-4);
}

TEST(Adam, ZeroGradientLeavesParamsAndAdvancesStep) {
    auto m = init_model(NetworkSpec::victim({28, 28, 1}, 10), 1);
    const auto before = m.params;
    adam_step(m, std::vector<double>(m.params.size(), 0.0), AdamConfig{});
    EXPECT_EQ(m.params, before);
    EXPECT_EQ(m.adam.t, 1u);
}

TEST(Adam, FirstStepMagnitudeIsLearningRate) {
    std::vector<float> w = {1.0f};
    AdamState st;
    AdamConfig cfg;
    cfg.learning_rate = 0.01;
    const double g = -0.37;
    adam_update(w, st, std::vector<double>{g}, cfg);
    const double expected = cfg.learning_rate * std::fabs(g) / (std::fabs(g) + cfg.epsilon);
    EXPECT_NEAR(w[0] - 1.0, expected, 1e-7);
}

TEST(Adam, ConvergesOnQuadratic) {
    std::vector<float> w = {0.0f};
    AdamState st;
    AdamConfig cfg;
    cfg.learning_rate = 0.1;
    for (int i = 0; i < 500; ++i) adam_update(w, st, std::vector<double>{2.0 * (w[0] - 3.0)}, cfg);
    EXPECT_LT(std::fabs(w[0] - 3.0), 1e-2);
}

TEST(Adam, RejectsLengthMismatchAndBadConfig) {
    std::vector<float> w = {0.0f, 1.0f};
    AdamState st;
    EXPECT_THROW(adam_update(w, st, std::vector<double>{1.0}, AdamConfig{}), InvalidInput);
    AdamConfig bad;
    bad.beta1 = 1.0;
    EXPECT_THROW(adam_update(w, st, std::vector<double>{1.0, 1.0}, bad), InvalidInput);
}

TEST(GradCheck, SmallRandomModelsPass) {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        const auto m = random_small_model(100 + seed);
        Rng rng(seed);
        const auto batch = random_batch(rng, 3, m.spec.input);
        const auto labels = random_labels(rng, 3, m.spec.classes);
        EXPECT_LT(finite_diff_check(m, batch, labels, 100, 1e-3, seed), 1e-4) << "seed " << seed;
        EXPECT_LT(finite_diff_check(m, batch, labels, 100, 1e-4, seed), 1e-4) << "seed " << seed;
    }
}

TEST(GradCheck, DetectsCorruptedGradient) {
    const auto m = random_small_model(77);
    Rng rng(77);
    const auto batch = random_batch(rng, 3, m.spec.input);
    const auto labels = random_labels(rng, 3, m.spec.classes);
    const std::vector<double> params(m.params.begin(), m.params.end());
    auto grads = loss_and_param_gradients(m.spec, params, batch, labels).grads;
    auto coords = sample_coords(params.size(), 20, 4);
    // corrupt a coordinate with a non-negligible gradient
    std::size_t target = coords.front();
    for (std::size_t c : coords) {
        if (std::fabs(grads[c]) > std::fabs(grads[target])) target = c;
    }
    grads[target] *= 2.0;
    EXPECT_GT(finite_diff_error(m.spec, params, batch, labels, grads, coords, 1e-3), 0.3);
}

TEST(GradCheck, RejectsBadArguments) {
    const auto m = random_small_model(1);
    const Tensor batch({1, 6, 6, 2}, 0.5f);
    const int y[] = {0};
    EXPECT_THROW(finite_diff_check(m, batch, y, 0, 1e-3), InvalidInput);
}

TEST(Training, DeterministicGivenSeed) {
    auto run = [] {
        auto m = init_model(NetworkSpec::attributor({8, 8, 1}, 3), 42);
        Rng rng(9);
        const auto batch = random_batch(rng, 4, m.spec.input);
        const auto labels = random_labels(rng, 4, 3);
        AdamConfig cfg;
        for (int k = 0; k < 5; ++k) adam_step(m, loss_and_param_gradients(m, batch, labels).grads, cfg);
        return m;
    };
    EXPECT_EQ(run(), run());
}

TEST(Checkpoint, FileRoundTripIsExact) {
    auto m = init_model(NetworkSpec::attributor({28, 28, 1}, 17), 5);
    m.adam.t = 12;
    m.adam.m[3] = 0.5f;
    const auto path = std::filesystem::temp_directory_path() / "afp_ckpt_test.afck";
    save_checkpoint(m, path);
    EXPECT_EQ(load_checkpoint(path), m);
    std::filesystem::resize_file(path, std::filesystem::file_size(path) - 3);
    EXPECT_THROW(load_checkpoint(path), FormatError);
}
