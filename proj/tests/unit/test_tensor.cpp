#include "afp/errors.hpp"
#include "afp/rng.hpp"
#include "afp/serialize.hpp"
#include "afp/tensor.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

using namespace afp;

namespace {

std::filesystem::path temp_path(const std::string& name) {
    auto dir = std::filesystem::temp_directory_path() / "afp_test_tensor";
    std::filesystem::create_directories(dir);
    return dir / name;
}

Tensor random_tensor(Rng& rng) {
    std::vector<int> shape;
    const int rank = static_cast<int>(uniform_index(rng, 5));
    for (int i = 0; i < rank; ++i) shape.push_back(1 + static_cast<int>(uniform_index(rng, 6)));
    Tensor t(shape);
    for (auto& v : t.data()) v = static_cast<float>(normal01(rng));
    return t;
}

}  // namespace

TEST(Tensor, ShapeAndDataMustAgree) {
    EXPECT_THROW(Tensor({2, 3}, std::vector<float>(5)), InvalidInput);
    EXPECT_THROW(Tensor({1, 1, 1, 1, 1}), InvalidInput);
    Tensor t({2, 3});
    EXPECT_EQ(t.size(), 6u);
}

TEST(Tensor, SampleSliceAndStack) {
    Tensor batch({3, 2, 2, 1});
    for (std::size_t i = 0; i < batch.size(); ++i) batch[i] = static_cast<float>(i);
    const Tensor s1 = batch.sample(1);
    EXPECT_EQ(s1.shape(), (std::vector<int>{2, 2, 1}));
    EXPECT_EQ(s1[0], 4.0f);
    const Tensor imgs[] = {batch.sample(0), batch.sample(1), batch.sample(2)};
    EXPECT_EQ(stack(imgs), batch);
    EXPECT_EQ(batch.slice(1, 3).sample(0), s1);
    EXPECT_THROW(batch.sample(3), InvalidInput);
}

TEST(Tensor, Norms) {
    const std::vector<float> v = {3.0f, -4.0f};
    EXPECT_DOUBLE_EQ(linf_norm(v), 4.0);
    EXPECT_DOUBLE_EQ(l2_norm(v), 5.0);
}

// Property: any tensor of rank <= 4 survives the blob encoding bit for bit.
TEST(TensorBlob, RoundTripProperty) {
    Rng rng(7);
    for (int trial = 0; trial < 200; ++trial) {
        const Tensor t = random_tensor(rng);
        EXPECT_EQ(decode_blob(encode_blob(t)), t);
    }
}

TEST(TensorBlob, LayoutIsBitSpecified) {
    const Tensor t({2}, std::vector<float>{1.0f, -2.0f});
    const std::string b = encode_blob(t);
    ASSERT_EQ(b.size(), 4u + 4 + 1 + 1 + 4 + 8);
    EXPECT_EQ(b.substr(0, 4), "AFPT");
    EXPECT_EQ(static_cast<unsigned char>(b[4]), 1);  // version, little-endian
    EXPECT_EQ(static_cast<unsigned char>(b[8]), 0);  // dtype f32
    EXPECT_EQ(static_cast<unsigned char>(b[9]), 1);  // rank
    EXPECT_EQ(static_cast<unsigned char>(b[10]), 2);
    // 1.0f = 0x3f800000 stored little-endian
    EXPECT_EQ(static_cast<unsigned char>(b[14]), 0x00);
    EXPECT_EQ(static_cast<unsigned char>(b[17]), 0x3f);
}

TEST(TensorBlob, RejectsCorruptInput) {
    const Tensor t({2, 2}, std::vector<float>{1, 2, 3, 4});
    std::string b = encode_blob(t);
    EXPECT_THROW(decode_blob(b.substr(0, b.size() - 1)), FormatError);
    std::string bad = b;
    bad[0] = 'X';
    EXPECT_THROW(decode_blob(bad), FormatError);
    EXPECT_THROW(decode_blob(b + "z"), FormatError);
}

TEST(TensorBlob, FileRoundTripAndHash) {
    const Tensor t({1, 2, 2, 1}, std::vector<float>{0.0f, 0.25f, 0.5f, 1.0f});
    const auto p = temp_path("t.bin");
    save_blob(t, p);
    EXPECT_EQ(load_blob(p), t);
    EXPECT_EQ(sha256_file(p), sha256_bytes(encode_blob(t)));
    EXPECT_EQ(sha256_bytes("abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}

TEST(Rng, DerivedSeedsAreStableAndDistinct) {
    EXPECT_EQ(derive_seed(1, {2, 3}), derive_seed(1, {2, 3}));
    EXPECT_NE(derive_seed(1, {2, 3}), derive_seed(1, {3, 2}));
    EXPECT_NE(stage_seed(5, "generate"), stage_seed(5, "fingerprint"));
}
