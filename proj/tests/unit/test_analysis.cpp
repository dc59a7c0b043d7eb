#include "afp/analysis.hpp"
#include "afp/errors.hpp"
#include "afp/rng.hpp"
#include "afp/serialize.hpp"
#include "afp/victim.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

using namespace afp;

namespace {

Tensor random_image(int h, int w, int c, std::uint64_t seed) {
    Rng rng(seed);
    Tensor t({h, w, c});
    for (auto& v : t.data()) v = static_cast<float>(uniform01(rng));
    return t;
}

// Filtered-map SSIM: build the mu/sigma maps with a separable 1-D Gaussian
// pass, then average the SSIM map.
double ssim_oracle(const Tensor& a, const Tensor& b) {
    const int h = a.dim(0), w = a.dim(1), ch = a.dim(2);
    std::vector<double> g(11);
    double gs = 0.0;
    for (int i = 0; i < 11; ++i) gs += g[i] = std::exp(-(i - 5.0) * (i - 5.0) / 4.5);
    for (auto& v : g) v /= gs;
    auto filter = [&](const std::vector<double>& img) {
        const int oh = h - 10, ow = w - 10;
        std::vector<double> rows(static_cast<std::size_t>(h) * ow), out(static_cast<std::size_t>(oh) * ow);
        for (int r = 0; r < h; ++r)
            for (int c = 0; c < ow; ++c)
                for (int j = 0; j < 11; ++j) rows[r * ow + c] += g[j] * img[r * w + c + j];
        for (int r = 0; r < oh; ++r)
            for (int c = 0; c < ow; ++c)
                for (int i = 0; i < 11; ++i) out[r * ow + c] += g[i] * rows[(r + i) * ow + c];
        return out;
    };
    double total = 0.0;
    for (int k = 0; k < ch; ++k) {
        std::vector<double> x(h * w), y(h * w), xx(h * w), yy(h * w), xy(h * w);
        for (int i = 0; i < h * w; ++i) {
            x[i] = a[i * ch + k];
            y[i] = b[i * ch + k];
            xx[i] = x[i] * x[i];
            yy[i] = y[i] * y[i];
            xy[i] = x[i] * y[i];
        }
        const auto mx = filter(x), my = filter(y), sxx = filter(xx), syy = filter(yy), sxy = filter(xy);
        double sum = 0.0;
        for (std::size_t i = 0; i < mx.size(); ++i) {
            const double c1 = 1e-4, c2 = 9e-4;
            const double vx = sxx[i] - mx[i] * mx[i], vy = syy[i] - my[i] * my[i], cxy = sxy[i] - mx[i] * my[i];
            sum += (2 * mx[i] * my[i] + c1) * (2 * cxy + c2) / ((mx[i] * mx[i] + my[i] * my[i] + c1) * (vx + vy + c2));
        }
        total += sum / mx.size();
    }
    return total / ch;
}

const ModelCheckpoint& synth_victim() {
    static const ModelCheckpoint model = [] {
        const auto path = std::filesystem::temp_directory_path() / "afp_test_analysis_victim_v1.ck";
        if (std::filesystem::exists(path)) return load_checkpoint(path);
        VictimConfig cfg;
        cfg.epochs = 2;
        cfg.seed = 5;
        auto m = train_victim(synth_dataset(100, 11), cfg).model;
        const auto part = path.string() + ".part";
        save_checkpoint(m, part);
        std::filesystem::rename(part, path);
        return m;
    }();
    return model;
}

}  // namespace

TEST(Mse, BasicsAndNaiveLoop) {
    const Tensor x = random_image(5, 6, 2, 1);
    EXPECT_EQ(mse(x, x), 0.0);
    EXPECT_EQ(mse(Tensor({3, 3, 1}, 0.0f), Tensor({3, 3, 1}, 1.0f)), 1.0);
    for (int s = 0; s < 10; ++s) {
        const Tensor a = random_image(7, 4, 3, 10 + s), b = random_image(7, 4, 3, 50 + s);
        double acc = 0.0;
        for (int r = 0; r < 7; ++r)
            for (int c = 0; c < 4; ++c)
                for (int k = 0; k < 3; ++k) {
                    const double d = double(a[(r * 4 + c) * 3 + k]) - double(b[(r * 4 + c) * 3 + k]);
                    acc += d * d;
                }
        EXPECT_NEAR(mse(a, b), acc / 84.0, 1e-7);
        EXPECT_EQ(mse(a, b), mse(b, a));
    }
    EXPECT_THROW(mse(x, random_image(6, 5, 2, 1)), InvalidInput);
}

TEST(Ssim, IdentityAndSymmetry) {
    for (int s = 0; s < 5; ++s) {
        const Tensor a = random_image(28, 28, 1, s), b = random_image(28, 28, 1, 100 + s);
        EXPECT_NEAR(ssim(a, a), 1.0, 1e-6);
        EXPECT_NEAR(ssim(a, b), ssim(b, a), 1e-6);
        EXPECT_LT(ssim(a, b), 0.5);
    }
    EXPECT_NEAR(ssim(random_image(5, 5, 3, 2), random_image(5, 5, 3, 2)), 1.0, 1e-6);
}

TEST(Ssim, MatchesFilteredMapOracle) {
    // Binary-ish image against its negative.
    Tensor x = random_image(28, 28, 1, 7);
    for (auto& v : x.data()) v = v > 0.5f ? 0.95f : 0.05f;
    Tensor neg = x;
    for (auto& v : neg.data()) v = 1.0f - v;
    const double s = ssim(x, neg);
    EXPECT_NEAR(s, ssim_oracle(x, neg), 1e-9);
    EXPECT_LT(s, -0.5);
    const Tensor a = random_image(20, 15, 3, 8), b = random_image(20, 15, 3, 9);
    EXPECT_NEAR(ssim(a, b), ssim_oracle(a, b), 1e-9);
}

TEST(Ssim, ConstantImagesReduceToLuminance) {
    for (auto [h, w] : {std::pair{4, 4}, std::pair{28, 28}}) {
        const double a = 0.3, b = 0.7;
        const Tensor ta({h, w, 1}, float(a)), tb({h, w, 1}, float(b));
        const double fa = float(a), fb = float(b), c1 = 1e-4;
        EXPECT_NEAR(ssim(ta, tb), (2 * fa * fb + c1) / (fa * fa + fb * fb + c1), 1e-6);
    }
}

TEST(Spearman, KnownValues) {
    const std::vector<double> x = {1, 2, 3, 4, 5}, up = {2, 4, 8, 16, 32}, down = {5, 4, 3, 2, 1};
    EXPECT_DOUBLE_EQ(spearman(x, up), 1.0);
    EXPECT_DOUBLE_EQ(spearman(x, down), -1.0);
    // Reference value from a standard statistics package.
    const std::vector<double> tx = {1, 2, 2, 3, 5, 4}, ty = {1, 3, 2, 4, 4, 6};
    EXPECT_NEAR(spearman(tx, ty), 0.8823529411764706, 1e-12);
    EXPECT_TRUE(std::isnan(spearman(x, std::vector<double>(5, 1.0))));
}

TEST(Entropy, Nats) {
    EXPECT_NEAR(entropy(std::vector<int>{1, 1, 1, 1}), std::log(4.0), 1e-12);
    EXPECT_EQ(entropy(std::vector<int>{0, 7, 0}), 0.0);
    EXPECT_EQ(entropy(std::vector<int>{0, 0}), 0.0);
    EXPECT_NEAR(entropy(std::vector<int>{3, 1}), -(0.75 * std::log(0.75) + 0.25 * std::log(0.25)), 1e-12);
}

TEST(QualityScatter, RowsAndZeroPerturbation) {
    std::vector<AdversarialRecord> recs(3);
    for (int i = 0; i < 3; ++i) {
        recs[i].benign = random_image(28, 28, 1, i);
        recs[i].attack.index = i;
        canonicalize(recs[i].benign, i == 0 ? recs[i].benign : random_image(28, 28, 1, 9 + i), recs[i].attacked,
                     recs[i].delta);
    }
    const auto pts = quality_scatter(recs, 2);
    ASSERT_EQ(pts.size(), 3u);
    EXPECT_EQ(pts[0].mse, 0.0);
    EXPECT_NEAR(pts[0].ssim, 1.0, 1e-9);
    EXPECT_GT(pts[1].mse, 0.0);
    EXPECT_EQ(pts[2].class_index, 2);

    const auto path = std::filesystem::temp_directory_path() / "afp_test_analysis" / "quality_scatter.csv";
    write_quality_csv(pts, path);
    std::ifstream in(path);
    std::string line;
    std::getline(in, line);
    EXPECT_EQ(line, "class_index,mse,ssim");
    int rows = 0;
    while (std::getline(in, line)) ++rows;
    EXPECT_EQ(rows, 3);
}

TEST(LabelDistribution, NoMassOnTrueLabelAndCountsConserved) {
    const auto& victim = synth_victim();
    const auto data = synth_dataset(6, 31, Split::Test);
    const auto tax = Taxonomy::base(AttackPreset::desk());
    std::vector<AdversarialRecord> recs;
    for (int i = 0; i < data.size(); ++i) {
        for (int cls : {3, 7}) {  // FGSM and PGD-Linf at eps 0.2
            const auto& c = tax.at(cls);
            AdversarialRecord r = c.algorithm == Algorithm::Fgsm
                                      ? fgsm(victim, data.images.sample(i), data.labels[i], *c.eps)
                                      : pgd(victim, data.images.sample(i), data.labels[i], {.eps = *c.eps, .steps = 20});
            r.attack = c;
            if (r.success) recs.push_back(std::move(r));
        }
    }
    ASSERT_GT(recs.size(), 20u);
    AdversarialRecord patch = recs[0];
    patch.attack = tax.at(16);
    recs.push_back(patch);

    const auto cells = label_distribution(recs, victim);
    int total = 0;
    for (const auto& c : cells) {
        EXPECT_NE(c.class_index, 16);
        EXPECT_EQ(c.counts[c.true_label], 0);
        int sum = 0;
        for (int v : c.counts) sum += v;
        EXPECT_EQ(sum, c.total);
        EXPECT_NEAR(c.entropy, entropy(c.counts), 1e-15);
        total += c.total;
    }
    EXPECT_EQ(total, static_cast<int>(recs.size()) - 1);

    const auto agreement = top_label_agreement(cells, 3, 7);
    EXPECT_GE(agreement.compared, 1);
    EXPECT_LE(agreement.agree, agreement.compared);

    const auto path = std::filesystem::temp_directory_path() / "afp_test_analysis" / "label_distribution.csv";
    write_label_csv(cells, tax, path);
    std::ifstream in(path);
    std::string line;
    int rows = -1;
    while (std::getline(in, line)) ++rows;
    EXPECT_EQ(rows, static_cast<int>(cells.size()) * 10);
}
