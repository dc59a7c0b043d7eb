#pragma once

#include "afp/tensor.hpp"

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace afp {

enum class Split { Train, Test };

std::string to_string(Split s);
Split parse_split(const std::string& s);

// Source ids are the image's index within its file, tagged with the split in
// the upper 32 bits so train and test ids never collide.
std::uint64_t make_source_id(Split split, std::uint32_t index);
std::uint32_t source_index(std::uint64_t id);

struct LabeledDataset {
    Tensor images;                   // N x H x W x C in [0, 1]
    std::vector<int> labels;         // in [0, 10)
    Split split = Split::Train;
    std::vector<std::uint64_t> ids;  // stable per original image

    int size() const { return static_cast<int>(labels.size()); }
    void validate() const;

    LabeledDataset subset(std::span<const int> rows) const;
};

// MNIST-style IDX files (big-endian header; magic 0x803 images, 0x801 labels).
LabeledDataset load_idx_dataset(const std::filesystem::path& images_path, const std::filesystem::path& labels_path,
                                Split split);
void write_idx_dataset(const LabeledDataset& data, const std::filesystem::path& images_path,
                       const std::filesystem::path& labels_path);

// Ten procedurally drawn 28x28 glyph classes with position/scale/stroke
// jitter and pixel noise. Deterministic in `seed`.
LabeledDataset synth_dataset(int n_per_class, std::uint64_t seed, Split split = Split::Train);

// Rows `rows` of `images`, stacked into a batch.
Tensor gather_rows(const Tensor& images, std::span<const int> rows);

}  // namespace afp
