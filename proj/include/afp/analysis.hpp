#pragma once

#include "afp/attacks.hpp"
#include "afp/network.hpp"
#include "afp/taxonomy.hpp"
#include "afp/tensor.hpp"

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

namespace afp {

double mse(const Tensor& a, const Tensor& b);

// Single-scale SSIM with data range 1: 11x11 Gaussian window (sigma 1.5),
// C1 = 0.01^2, C2 = 0.03^2, averaged over all fully contained windows and
// then over channels. Images smaller than the window use global statistics.
double ssim(const Tensor& a, const Tensor& b);

struct QualityPoint {
    std::uint64_t source_id = 0;
    int class_index = 0;
    double mse = 0.0;
    double ssim = 1.0;
};

std::vector<QualityPoint> quality_scatter(std::span<const AdversarialRecord> records, int jobs = 1);
// Columns: class_index, mse, ssim.
void write_quality_csv(std::span<const QualityPoint> points, const std::filesystem::path& path);

// Spearman rank correlation with average ranks for ties; NaN when either
// side is constant.
double spearman(std::span<const double> x, std::span<const double> y);

// Shannon entropy in nats of a count vector; 0 log 0 = 0.
double entropy(std::span<const int> counts);

struct LabelCell {
    int true_label = 0;
    int class_index = 0;
    std::vector<int> counts;  // victim output label histogram
    int total = 0;
    double entropy = 0.0;

    // Most frequent output label, lowest index on ties; -1 for an empty cell.
    int top_label() const;
};

// One cell per (true label, attack class) that has records. Untargeted
// records only; the victim re-labels every attacked image.
std::vector<LabelCell> label_distribution(std::span<const AdversarialRecord> records, const ModelCheckpoint& victim);

// Long format: true_label, class_index, class, output_label, count, cell_total, cell_entropy.
void write_label_csv(std::span<const LabelCell> cells, const Taxonomy& taxonomy, const std::filesystem::path& path);

struct TopLabelAgreement {
    int compared = 0;  // true labels present for both attack classes
    int agree = 0;
};

// For each true label, whether the most frequent output label matches
// between two attack classes.
TopLabelAgreement top_label_agreement(std::span<const LabelCell> cells, int class_a, int class_b);

}  // namespace afp
