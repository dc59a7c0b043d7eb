#pragma once

#include "afp/adam.hpp"
#include "afp/fingerprints.hpp"
#include "afp/network.hpp"
#include "afp/taxonomy.hpp"

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace afp {

enum class SplitRole { Train, Val, Test };
std::string to_string(SplitRole r);

struct AttributionDataset {
    Tensor fingerprints;  // N x H x W x C
    std::vector<int> labels;
    std::vector<std::uint64_t> source_ids;
    SplitRole role = SplitRole::Train;
    std::string taxonomy_version;
    FingerprintMethod method = FingerprintMethod::TrueDelta;
    int classes = 0;

    int size() const { return static_cast<int>(labels.size()); }
    void validate() const;
};

struct SplitConfig {
    int n_unique_train = 0;  // source images drawn from the train split; 0 = all
    int n_unique_test = 0;
    double val_frac = 0.1;   // of the chosen train sources, moved to val
    std::uint64_t seed = 0;
};

struct AttributionSplits {
    AttributionDataset train;
    AttributionDataset val;
    AttributionDataset test;
};

// Samples source images per source split and gathers every fingerprint of
// those images; val is carved from the train sources, so the three source-id
// sets are pairwise disjoint. The selection depends only on the source ids
// present, so fingerprint sets of one pool split identically.
AttributionSplits build_splits(const FingerprintSet& set, int classes, const SplitConfig& cfg);

struct TrainProtocol {
    int max_epochs = 50;
    int val_every_steps = 400;
    int patience = 4;  // validations without a new best before stopping
    AdamConfig adam{.learning_rate = 0.01, .batch_size = 128};
    int replicates = 4;
    std::uint64_t seed = 0;
    bool early_stopping = true;

    void validate() const;
    std::uint64_t replicate_seed(int replicate) const;
};

// Stopping rule over a sequence of validation accuracies: the first value
// and every strict improvement reset the counter.
class EarlyStopping {
public:
    explicit EarlyStopping(int patience) : patience_(patience) {}
    // Returns true when `accuracy` is a new best.
    bool observe(double accuracy);
    bool should_stop() const { return stale_ >= patience_; }
    double best() const { return best_; }

private:
    int patience_;
    int stale_ = 0;
    bool seen_ = false;
    double best_ = 0.0;
};

struct HistoryRow {
    int epoch = 0;
    long step = 0;
    double train_loss = 0.0;  // mean over the steps since the previous row
    double val_accuracy = 0.0;
    bool best = false;
};

struct AttributorTraining {
    ModelCheckpoint model;  // best validation checkpoint
    std::vector<HistoryRow> history;
    double best_val_accuracy = 0.0;
    long best_step = 0;
    long steps = 0;
    int epochs = 0;
};

// Validates every `val_every_steps` steps (first at that step) and at every
// epoch end; keeps the best checkpoint and stops once `patience` validations
// pass without a strict improvement, or at max_epochs.
AttributorTraining train_attributor(const AttributionDataset& train, const AttributionDataset& val,
                                    const TrainProtocol& protocol, int replicate = 0);

std::vector<AttributorTraining> train_replicates(const AttributionDataset& train, const AttributionDataset& val,
                                                 const TrainProtocol& protocol, int jobs = 1);

void write_history_csv(const std::vector<HistoryRow>& history, const std::filesystem::path& path);

struct Predictions {
    std::vector<int> labels;  // argmax, ties to the lowest index
    Tensor logits;
};

Predictions predict(const ModelCheckpoint& model, const AttributionDataset& data);

struct EvalReport {
    int replicate = 0;
    double accuracy = 0.0;
    std::vector<int> class_counts;
    std::vector<double> per_class_accuracy;       // NaN for absent classes
    std::vector<std::vector<int>> confusion_counts;  // rows = truth, columns = predicted
    std::vector<std::vector<double>> confusion;    // row-normalized; all-zero rows for absent classes
};

EvalReport make_report(std::span<const int> truth, std::span<const int> predicted, int classes, int replicate = 0);
EvalReport evaluate(const ModelCheckpoint& model, const AttributionDataset& test, int replicate = 0);

struct MeanStd {
    double mean = 0.0;
    double std = 0.0;  // population
};

MeanStd mean_std(std::span<const double> values);

struct EvalSummary {
    std::vector<EvalReport> reports;
    MeanStd accuracy;
    std::vector<MeanStd> per_class;  // NaN when a class is absent
};

EvalSummary summarize(std::vector<EvalReport> reports);

void write_confusion_csv(const EvalReport& report, const Taxonomy& taxonomy, const std::filesystem::path& path);
void write_per_class_csv(const EvalSummary& summary, const Taxonomy& taxonomy, const std::filesystem::path& path);
void write_summary_json(const EvalSummary& summary, const Taxonomy& taxonomy, FingerprintMethod method,
                        const std::string& condition, const std::filesystem::path& path);

}  // namespace afp
