#include "afp/dataset.hpp"

#include "afp/errors.hpp"
#include "afp/rng.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

namespace afp {

std::string to_string(Split s) { return s == Split::Train ? "train" : "test"; }

Split parse_split(const std::string& s) {
    if (s == "train") return Split::Train;
    if (s == "test") return Split::Test;
    throw InvalidInput("unknown split '" + s + "'");
}

std::uint64_t make_source_id(Split split, std::uint32_t index) {
    return (static_cast<std::uint64_t>(split == Split::Test ? 1 : 0) << 32) | index;
}

std::uint32_t source_index(std::uint64_t id) { return static_cast<std::uint32_t>(id & 0xffffffffULL); }

void LabeledDataset::validate() const {
    const int n = images.rank() == 4 ? images.dim(0) : -1;
    if (n != size() || ids.size() != labels.size()) {
        throw InvalidInput("dataset image/label/id counts disagree");
    }
    for (int y : labels) {
        if (y < 0 || y >= 10) throw InvalidInput("dataset label outside [0, 10)");
    }
    std::set<std::uint64_t> seen(ids.begin(), ids.end());
    if (seen.size() != ids.size()) throw InvalidInput("duplicate source ids in dataset");
}

Tensor gather_rows(const Tensor& images, std::span<const int> rows) {
    const std::size_t stride = images.size() / static_cast<std::size_t>(images.dim(0));
    std::vector<float> data;
    data.reserve(rows.size() * stride);
    for (int r : rows) {
        if (r < 0 || r >= images.dim(0)) throw InvalidInput("row index out of range");
        const auto begin = images.values().begin() + static_cast<std::ptrdiff_t>(static_cast<std::size_t>(r) * stride);
        data.insert(data.end(), begin, begin + static_cast<std::ptrdiff_t>(stride));
    }
    return Tensor({static_cast<int>(rows.size()), images.dim(1), images.dim(2), images.dim(3)}, std::move(data));
}

LabeledDataset LabeledDataset::subset(std::span<const int> rows) const {
    LabeledDataset out;
    out.split = split;
    out.images = gather_rows(images, rows);
    for (int r : rows) {
        out.labels.push_back(labels[static_cast<std::size_t>(r)]);
        out.ids.push_back(ids[static_cast<std::size_t>(r)]);
    }
    return out;
}

namespace {

std::string read_all(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open IDX file " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::uint32_t be32(const std::string& b, std::size_t off) {
    return (static_cast<std::uint32_t>(static_cast<unsigned char>(b[off])) << 24) |
           (static_cast<std::uint32_t>(static_cast<unsigned char>(b[off + 1])) << 16) |
           (static_cast<std::uint32_t>(static_cast<unsigned char>(b[off + 2])) << 8) |
           static_cast<std::uint32_t>(static_cast<unsigned char>(b[off + 3]));
}

void put_be32(std::string& b, std::uint32_t v) {
    for (int s = 24; s >= 0; s -= 8) b.push_back(static_cast<char>((v >> s) & 0xff));
}

}  // namespace

LabeledDataset load_idx_dataset(const std::filesystem::path& images_path, const std::filesystem::path& labels_path,
                                Split split) {
    const std::string img = read_all(images_path);
    const std::string lab = read_all(labels_path);
    const auto fail = [](const std::filesystem::path& p, const std::string& msg) {
        throw FormatError(p.string() + ": " + msg);
    };
    if (img.size() < 16) fail(images_path, "truncated header");
    if (be32(img, 0) != 0x00000803) fail(images_path, "bad magic (expected 0x00000803)");
    if (lab.size() < 8) fail(labels_path, "truncated header");
    if (be32(lab, 0) != 0x00000801) fail(labels_path, "bad magic (expected 0x00000801)");
    const std::uint64_t n = be32(img, 4);
    const std::uint64_t rows = be32(img, 8);
    const std::uint64_t cols = be32(img, 12);
    if (rows == 0 || cols == 0 || rows > 4096 || cols > 4096) fail(images_path, "implausible image dimensions");
    if (img.size() != 16 + n * rows * cols) fail(images_path, "data section length does not match header");
    if (be32(lab, 4) != n) fail(labels_path, "label count does not match image count");
    if (lab.size() != 8 + n) fail(labels_path, "data section length does not match header");

    LabeledDataset d;
    d.split = split;
    d.images = Tensor({static_cast<int>(n), static_cast<int>(rows), static_cast<int>(cols), 1});
    for (std::size_t i = 0; i < d.images.size(); ++i) {
        d.images[i] = static_cast<float>(static_cast<unsigned char>(img[16 + i])) / 255.0f;
    }
    for (std::uint64_t i = 0; i < n; ++i) {
        const int y = static_cast<unsigned char>(lab[8 + i]);
        if (y >= 10) fail(labels_path, "label " + std::to_string(y) + " outside [0, 10)");
        d.labels.push_back(y);
        d.ids.push_back(make_source_id(split, static_cast<std::uint32_t>(i)));
    }
    return d;
}

void write_idx_dataset(const LabeledDataset& data, const std::filesystem::path& images_path,
                       const std::filesystem::path& labels_path) {
    data.validate();
    if (data.images.dim(3) != 1) throw InvalidInput("IDX writer supports single-channel images only");
    std::string img;
    put_be32(img, 0x00000803);
    put_be32(img, static_cast<std::uint32_t>(data.size()));
    put_be32(img, static_cast<std::uint32_t>(data.images.dim(1)));
    put_be32(img, static_cast<std::uint32_t>(data.images.dim(2)));
    for (float v : data.images.values()) {
        img.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f))));
    }
    std::string lab;
    put_be32(lab, 0x00000801);
    put_be32(lab, static_cast<std::uint32_t>(data.size()));
    for (int y : data.labels) lab.push_back(static_cast<char>(y));
    for (const auto& [path, bytes] : {std::pair{images_path, img}, std::pair{labels_path, lab}}) {
        if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
        std::ofstream out(path, std::ios::binary | std::ios::trunc);
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw FormatError("cannot write " + path.string());
    }
}

// ---------------------------------------------------------------------------
// Synthetic glyphs
// ---------------------------------------------------------------------------

namespace {

struct Seg {
    double x0, y0, x1, y1;
};

double seg_distance(double px, double py, const Seg& s) {
    const double dx = s.x1 - s.x0;
    const double dy = s.y1 - s.y0;
    const double len2 = dx * dx + dy * dy;
    double t = len2 > 0 ? ((px - s.x0) * dx + (py - s.y0) * dy) / len2 : 0.0;
    t = std::clamp(t, 0.0, 1.0);
    const double ex = px - (s.x0 + t * dx);
    const double ey = py - (s.y0 + t * dy);
    return std::sqrt(ex * ex + ey * ey);
}

// Glyph strokes in a unit frame [-1, 1]^2.
std::vector<Seg> glyph_segments(int cls) {
    switch (cls) {
        case 1: return {{0, -1, 0, 1}};
        case 2: return {{-1, 0, 1, 0}};
        case 3: return {{-0.9, 0.9, 0.9, -0.9}};
        case 4: return {{-0.9, -0.9, 0.9, 0.9}};
        case 5: return {{0, -1, 0, 1}, {-1, 0, 1, 0}};
        case 6: return {{-0.9, -0.9, 0.9, 0.9}, {-0.9, 0.9, 0.9, -0.9}};
        case 7: return {{-0.8, -0.8, 0.8, -0.8}, {0.8, -0.8, 0.8, 0.8}, {0.8, 0.8, -0.8, 0.8}, {-0.8, 0.8, -0.8, -0.8}};
        case 8: return {{0, -0.9, 0.9, 0.8}, {0.9, 0.8, -0.9, 0.8}, {-0.9, 0.8, 0, -0.9}};
        case 9: return {{-0.7, -1, -0.7, 0.8}, {-0.7, 0.8, 0.8, 0.8}};
        default: return {};
    }
}

}  // namespace

LabeledDataset synth_dataset(int n_per_class, std::uint64_t seed, Split split) {
    if (n_per_class < 1) throw InvalidInput("synth_dataset needs n_per_class >= 1");
    constexpr int kSide = 28;
    const int n = 10 * n_per_class;
    LabeledDataset d;
    d.split = split;
    d.images = Tensor({n, kSide, kSide, 1});
    Rng rng(seed);
    for (int i = 0; i < n; ++i) {
        const int cls = i % 10;
        const double cx = 13.5 + (uniform01(rng) - 0.5) * 6.0;
        const double cy = 13.5 + (uniform01(rng) - 0.5) * 6.0;
        const double scale = 7.0 + uniform01(rng) * 3.0;
        const double stroke = 1.0 + uniform01(rng) * 1.2;
        const double angle = (uniform01(rng) - 0.5) * 0.4;
        const double ca = std::cos(angle);
        const double sa = std::sin(angle);
        const auto segs = glyph_segments(cls);
        for (int y = 0; y < kSide; ++y) {
            for (int x = 0; x < kSide; ++x) {
                // pixel -> glyph frame
                const double ux = ((x - cx) * ca + (y - cy) * sa) / scale;
                const double uy = (-(x - cx) * sa + (y - cy) * ca) / scale;
                double dist = 1e9;
                if (cls == 0) {
                    dist = std::fabs(std::sqrt(ux * ux + uy * uy) - 0.8);
                } else {
                    for (const auto& s : segs) dist = std::min(dist, seg_distance(ux, uy, s));
                }
                const double px = dist * scale;  // back to pixels
                double v = std::clamp(1.0 - (px - stroke) / 1.0, 0.0, 1.0);
                v = std::clamp(v + 0.06 * normal01(rng), 0.0, 1.0);
                // quantize to 8 bits so IDX export is lossless
                d.images.at(i, y, x, 0) = static_cast<float>(std::lround(v * 255.0)) / 255.0f;
            }
        }
        d.labels.push_back(cls);
        d.ids.push_back(make_source_id(split, static_cast<std::uint32_t>(i)));
    }
    return d;
}

}  // namespace afp
