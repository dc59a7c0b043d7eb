#pragma once

#include "afp/adam.hpp"
#include "afp/dataset.hpp"
#include "afp/network.hpp"

#include <cstdint>
#include <filesystem>
#include <vector>

namespace afp {

struct VictimConfig {
    int epochs = 5;
    AdamConfig adam{.learning_rate = 5e-3, .batch_size = 64};
    bool cosine_decay = true;  // learning rate follows a half cosine to zero over all steps
    std::uint64_t seed = 0;
};

struct TrainLogRow {
    int epoch = 0;
    long step = 0;
    double loss = 0.0;          // mean training loss over the epoch
    double val_accuracy = 0.0;  // NaN when no validation data was given
};

struct VictimTraining {
    ModelCheckpoint model;
    std::vector<TrainLogRow> log;
};

// Trains the victim CNN from scratch. `val`, when non-null, is evaluated at
// every epoch end for the log only.
VictimTraining train_victim(const LabeledDataset& train, const VictimConfig& config,
                            const LabeledDataset* val = nullptr);

void write_train_log(const std::vector<TrainLogRow>& log, const std::filesystem::path& path);

struct VictimEval {
    double accuracy = 0.0;
    std::vector<double> per_class_accuracy;  // NaN for classes absent from the data
    std::vector<int> predictions;
};

VictimEval evaluate_victim(const ModelCheckpoint& model, const LabeledDataset& data);

}  // namespace afp
