#include "afp/analysis.hpp"

#include "afp/errors.hpp"
#include "afp/parallel.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>

namespace afp {

namespace {

constexpr int kWindow = 11;
constexpr double kC1 = 0.01 * 0.01;
constexpr double kC2 = 0.03 * 0.03;

void check_pair(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) throw InvalidInput("shape mismatch: " + a.shape_string() + " vs " + b.shape_string());
}

const std::array<double, kWindow * kWindow>& gaussian_window() {
    static const auto w = [] {
        std::array<double, kWindow * kWindow> k{};
        double g[kWindow], sum = 0.0;
        for (int i = 0; i < kWindow; ++i) {
            const double d = i - kWindow / 2;
            g[i] = std::exp(-d * d / (2.0 * 1.5 * 1.5));
            sum += g[i];
        }
        for (int i = 0; i < kWindow; ++i)
            for (int j = 0; j < kWindow; ++j) k[i * kWindow + j] = g[i] * g[j] / (sum * sum);
        return k;
    }();
    return w;
}

double ssim_term(double ma, double mb, double va, double vb, double cov) {
    return ((2 * ma * mb + kC1) * (2 * cov + kC2)) / ((ma * ma + mb * mb + kC1) * (va + vb + kC2));
}

}  // namespace

double mse(const Tensor& a, const Tensor& b) {
    check_pair(a, b);
    if (a.empty()) return 0.0;
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = static_cast<double>(a[i]) - b[i];
        s += d * d;
    }
    return s / static_cast<double>(a.size());
}

double ssim(const Tensor& a, const Tensor& b) {
    check_pair(a, b);
    if (a.rank() != 3) throw InvalidInput("ssim expects H x W x C images, got " + a.shape_string());
    const int h = a.dim(0), w = a.dim(1), ch = a.dim(2);
    auto px = [&](const Tensor& t, int r, int c, int k) -> double {
        return t[(static_cast<std::size_t>(r) * w + c) * ch + k];
    };
    double total = 0.0;
    for (int k = 0; k < ch; ++k) {
        if (h < kWindow || w < kWindow) {
            const double n = static_cast<double>(h) * w;
            double ma = 0, mb = 0;
            for (int r = 0; r < h; ++r)
                for (int c = 0; c < w; ++c) {
                    ma += px(a, r, c, k);
                    mb += px(b, r, c, k);
                }
            ma /= n;
            mb /= n;
            double va = 0, vb = 0, cov = 0;
            for (int r = 0; r < h; ++r)
                for (int c = 0; c < w; ++c) {
                    const double da = px(a, r, c, k) - ma, db = px(b, r, c, k) - mb;
                    va += da * da;
                    vb += db * db;
                    cov += da * db;
                }
            total += ssim_term(ma, mb, va / n, vb / n, cov / n);
            continue;
        }
        const auto& g = gaussian_window();
        double sum = 0.0;
        for (int r0 = 0; r0 + kWindow <= h; ++r0) {
            for (int c0 = 0; c0 + kWindow <= w; ++c0) {
                double ma = 0, mb = 0, saa = 0, sbb = 0, sab = 0;
                for (int i = 0; i < kWindow; ++i)
                    for (int j = 0; j < kWindow; ++j) {
                        const double wt = g[i * kWindow + j];
                        const double va = px(a, r0 + i, c0 + j, k), vb = px(b, r0 + i, c0 + j, k);
                        ma += wt * va;
                        mb += wt * vb;
                        saa += wt * va * va;
                        sbb += wt * vb * vb;
                        sab += wt * va * vb;
                    }
                sum += ssim_term(ma, mb, saa - ma * ma, sbb - mb * mb, sab - ma * mb);
            }
        }
        total += sum / static_cast<double>((h - kWindow + 1) * (w - kWindow + 1));
    }
    return total / ch;
}

std::vector<QualityPoint> quality_scatter(std::span<const AdversarialRecord> records, int jobs) {
    std::vector<QualityPoint> out(records.size());
    parallel_for(static_cast<int>(records.size()), jobs, [&](int i) {
        const auto& r = records[static_cast<std::size_t>(i)];
        auto& p = out[static_cast<std::size_t>(i)];
        p.source_id = r.source_id;
        p.class_index = r.attack.index;
        p.mse = mse(r.benign, r.attacked);
        p.ssim = ssim(r.benign, r.attacked);
    });
    return out;
}

void write_quality_csv(std::span<const QualityPoint> points, const std::filesystem::path& path) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path);
    out.precision(10);
    out << "class_index,mse,ssim\n";
    for (const auto& p : points) out << p.class_index << ',' << p.mse << ',' << p.ssim << '\n';
    if (!out) throw FormatError("cannot write " + path.string());
}

namespace {

std::vector<double> average_ranks(std::span<const double> v) {
    std::vector<std::size_t> idx(v.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
    std::vector<double> rank(v.size());
    for (std::size_t i = 0; i < idx.size();) {
        std::size_t j = i;
        while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
        const double r = 0.5 * static_cast<double>(i + j) + 1.0;
        for (std::size_t k = i; k <= j; ++k) rank[idx[k]] = r;
        i = j + 1;
    }
    return rank;
}

}  // namespace

double spearman(std::span<const double> x, std::span<const double> y) {
    if (x.size() != y.size()) throw InvalidInput("spearman needs equally long inputs");
    const auto rx = average_ranks(x), ry = average_ranks(y);
    const double n = static_cast<double>(x.size());
    const double mean = (n + 1.0) / 2.0;
    double sxy = 0, sxx = 0, syy = 0;
    for (std::size_t i = 0; i < rx.size(); ++i) {
        sxy += (rx[i] - mean) * (ry[i] - mean);
        sxx += (rx[i] - mean) * (rx[i] - mean);
        syy += (ry[i] - mean) * (ry[i] - mean);
    }
    if (sxx == 0.0 || syy == 0.0) return std::numeric_limits<double>::quiet_NaN();
    return sxy / std::sqrt(sxx * syy);
}

double entropy(std::span<const int> counts) {
    double total = 0.0;
    for (int c : counts) total += c;
    if (total == 0.0) return 0.0;
    double h = 0.0;
    for (int c : counts) {
        if (c > 0) {
            const double p = c / total;
            h -= p * std::log(p);
        }
    }
    return h;
}

int LabelCell::top_label() const {
    if (total == 0) return -1;
    return static_cast<int>(std::max_element(counts.begin(), counts.end()) - counts.begin());
}

std::vector<LabelCell> label_distribution(std::span<const AdversarialRecord> records, const ModelCheckpoint& victim) {
    std::vector<Tensor> attacked;
    std::vector<const AdversarialRecord*> kept;
    for (const auto& r : records) {
        if (!r.attack.untargeted()) continue;
        attacked.push_back(r.attacked);
        kept.push_back(&r);
    }
    std::vector<LabelCell> cells;
    if (kept.empty()) return cells;
    const auto labels = argmax_rows(forward_chunked(victim, stack(attacked)));
    const int classes = victim.spec.classes;
    std::map<std::pair<int, int>, LabelCell> by_cell;
    for (std::size_t i = 0; i < kept.size(); ++i) {
        const auto key = std::make_pair(kept[i]->true_label, kept[i]->attack.index);
        auto [it, fresh] = by_cell.try_emplace(key);
        if (fresh) {
            it->second.true_label = key.first;
            it->second.class_index = key.second;
            it->second.counts.assign(static_cast<std::size_t>(classes), 0);
        }
        it->second.counts[static_cast<std::size_t>(labels[i])]++;
        it->second.total++;
    }
    for (auto& [key, cell] : by_cell) {
        cell.entropy = entropy(cell.counts);
        cells.push_back(std::move(cell));
    }
    return cells;
}

void write_label_csv(std::span<const LabelCell> cells, const Taxonomy& taxonomy, const std::filesystem::path& path) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path);
    out.precision(10);
    out << "true_label,class_index,class,output_label,count,cell_total,cell_entropy\n";
    for (const auto& c : cells)
        for (std::size_t y = 0; y < c.counts.size(); ++y)
            out << c.true_label << ',' << c.class_index << ',' << taxonomy.at(c.class_index).name() << ',' << y << ','
                << c.counts[y] << ',' << c.total << ',' << c.entropy << '\n';
    if (!out) throw FormatError("cannot write " + path.string());
}

TopLabelAgreement top_label_agreement(std::span<const LabelCell> cells, int class_a, int class_b) {
    std::map<int, int> top_a, top_b;
    for (const auto& c : cells) {
        if (c.class_index == class_a) top_a[c.true_label] = c.top_label();
        if (c.class_index == class_b) top_b[c.true_label] = c.top_label();
    }
    TopLabelAgreement out;
    for (const auto& [label, top] : top_a) {
        const auto it = top_b.find(label);
        if (it == top_b.end()) continue;
        ++out.compared;
        out.agree += top == it->second;
    }
    return out;
}

}  // namespace afp
