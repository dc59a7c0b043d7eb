#include "afp/dataset.hpp"
#include "afp/errors.hpp"
#include "afp/victim.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

using namespace afp;

namespace {

const std::filesystem::path kData = AFP_DATA_DIR;

std::filesystem::path tmp(const std::string& name) {
    auto dir = std::filesystem::temp_directory_path() / "afp_test_victim";
    std::filesystem::create_directories(dir);
    return dir / name;
}

void write_bytes(const std::filesystem::path& p, const std::string& bytes) {
    std::ofstream(p, std::ios::binary).write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

std::string read_bytes(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), {}};
}

// Dataset of one-hot 1x1x10 "images": a dense-identity model classifies it perfectly.
LabeledDataset one_hot_dataset(const std::vector<int>& labels) {
    LabeledDataset d;
    d.images = Tensor({static_cast<int>(labels.size()), 1, 1, 10});
    for (std::size_t i = 0; i < labels.size(); ++i) {
        d.images[i * 10 + static_cast<std::size_t>(labels[i])] = 1.0f;
        d.labels.push_back(labels[i]);
        d.ids.push_back(i);
    }
    return d;
}

ModelCheckpoint dense_model(bool identity, int constant_class = -1) {
    NetworkSpec s;
    s.input = {1, 1, 10};
    s.classes = 10;
    s.layers = {LayerSpec::dense(10)};
    auto m = init_model(s, 0);
    std::fill(m.params.begin(), m.params.end(), 0.0f);
    if (identity) {
        for (int i = 0; i < 10; ++i) m.params[static_cast<std::size_t>(i * 10 + i)] = 1.0f;
    }
    if (constant_class >= 0) m.params[100 + static_cast<std::size_t>(constant_class)] = 5.0f;
    return m;
}

}  // namespace

TEST(Idx, LoadsBundledDigits) {
    const auto train = load_idx_dataset(kData / "train-images-idx3-ubyte", kData / "train-labels-idx1-ubyte", Split::Train);
    const auto test = load_idx_dataset(kData / "t10k-images-idx3-ubyte", kData / "t10k-labels-idx1-ubyte", Split::Test);
    EXPECT_EQ(train.images.shape(), (std::vector<int>{8000, 28, 28, 1}));
    EXPECT_EQ(test.size(), 2000);
    train.validate();
    test.validate();
    for (float v : train.images.values()) ASSERT_TRUE(v >= 0.0f && v <= 1.0f);
    std::set<std::uint64_t> ids(train.ids.begin(), train.ids.end());
    for (auto id : test.ids) EXPECT_FALSE(ids.contains(id));
    EXPECT_EQ(source_index(test.ids[17]), 17u);
}

TEST(Idx, WriteThenLoadIsLossless) {
    const auto d = synth_dataset(3, 5);
    write_idx_dataset(d, tmp("img"), tmp("lab"));
    const auto back = load_idx_dataset(tmp("img"), tmp("lab"), Split::Train);
    EXPECT_EQ(back.images, d.images);
    EXPECT_EQ(back.labels, d.labels);
}

TEST(Idx, RejectsBadMagicTruncationAndCountMismatch) {
    const auto d = synth_dataset(2, 1);
    write_idx_dataset(d, tmp("ok_img"), tmp("ok_lab"));
    const std::string img = read_bytes(tmp("ok_img"));
    const std::string lab = read_bytes(tmp("ok_lab"));

    std::string bad = img;
    bad[3] = 0x01;
    write_bytes(tmp("bad_img"), bad);
    try {
        load_idx_dataset(tmp("bad_img"), tmp("ok_lab"), Split::Train);
        FAIL() << "expected FormatError";
    } catch (const FormatError& e) {
        EXPECT_NE(std::string(e.what()).find("bad_img"), std::string::npos);
    }

    write_bytes(tmp("trunc_img"), img.substr(0, img.size() - 10));
    EXPECT_THROW(load_idx_dataset(tmp("trunc_img"), tmp("ok_lab"), Split::Train), FormatError);

    write_bytes(tmp("short_lab"), lab.substr(0, lab.size() - 1));
    EXPECT_THROW(load_idx_dataset(tmp("ok_img"), tmp("short_lab"), Split::Train), FormatError);

    EXPECT_THROW(load_idx_dataset(tmp("missing"), tmp("ok_lab"), Split::Train), FormatError);
}

TEST(Synth, DeterministicAndSized) {
    const auto a = synth_dataset(100, 9);
    const auto b = synth_dataset(100, 9);
    EXPECT_EQ(a.size(), 1000);
    EXPECT_EQ(a.images, b.images);
    EXPECT_EQ(a.labels, b.labels);
    EXPECT_NE(synth_dataset(100, 10).images, a.images);
    EXPECT_THROW(synth_dataset(0, 1), InvalidInput);
}

TEST(Evaluate, PerfectAndConstantModels) {
    const std::vector<int> labels = {0, 1, 2, 3, 3, 3, 9, 9, 5, 3};
    const auto d = one_hot_dataset(labels);
    EXPECT_DOUBLE_EQ(evaluate_victim(dense_model(true), d).accuracy, 1.0);
    const auto e = evaluate_victim(dense_model(false, 3), d);
    EXPECT_DOUBLE_EQ(e.accuracy, 0.4);
    EXPECT_DOUBLE_EQ(e.per_class_accuracy[3], 1.0);
    EXPECT_DOUBLE_EQ(e.per_class_accuracy[0], 0.0);
    EXPECT_TRUE(std::isnan(e.per_class_accuracy[4]));
}

TEST(Evaluate, AccuracyEqualsConfusionTrace) {
    const auto d = synth_dataset(10, 3, Split::Test);
    const auto m = init_model(NetworkSpec::victim({28, 28, 1}, 10), 17);
    const auto e = evaluate_victim(m, d);
    std::vector<std::vector<int>> confusion(10, std::vector<int>(10, 0));
    for (int i = 0; i < d.size(); ++i) confusion[static_cast<std::size_t>(d.labels[static_cast<std::size_t>(i)])][static_cast<std::size_t>(e.predictions[static_cast<std::size_t>(i)])]++;
    int trace = 0;
    for (int c = 0; c < 10; ++c) trace += confusion[static_cast<std::size_t>(c)][static_cast<std::size_t>(c)];
    EXPECT_DOUBLE_EQ(e.accuracy, static_cast<double>(trace) / d.size());
}

TEST(TrainVictim, ZeroEpochsIsChanceLevel) {
    const auto test = synth_dataset(50, 2, Split::Test);
    VictimConfig cfg;
    cfg.epochs = 0;
    const auto r = train_victim(synth_dataset(5, 1), cfg);
    EXPECT_TRUE(r.log.empty());
    EXPECT_LT(evaluate_victim(r.model, test).accuracy, 0.3);
}

TEST(TrainVictim, SameSeedSameCheckpoint) {
    const auto train = synth_dataset(20, 4);
    VictimConfig cfg;
    cfg.epochs = 1;
    cfg.seed = 99;
    EXPECT_EQ(train_victim(train, cfg).model, train_victim(train, cfg).model);
}

TEST(TrainVictim, SynthHeldOutAccuracy) {
    const auto train = synth_dataset(200, 1);
    const auto test = synth_dataset(50, 2, Split::Test);
    VictimConfig cfg;
    cfg.epochs = 3;
    const auto r = train_victim(train, cfg, &test);
    ASSERT_EQ(r.log.size(), 3u);
    EXPECT_GE(evaluate_victim(r.model, test).accuracy, 0.95);
    write_train_log(r.log, tmp("log.csv"));
    EXPECT_NE(read_bytes(tmp("log.csv")).find("epoch,step,loss,val_accuracy"), std::string::npos);
}

TEST(TrainVictim, RejectsEmptyTrainingSet) {
    LabeledDataset empty;
    empty.images = Tensor({0, 28, 28, 1});
    EXPECT_THROW(train_victim(empty, VictimConfig{}), InvalidInput);
}
