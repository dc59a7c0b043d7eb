#include "afp/victim.hpp"

#include "afp/errors.hpp"
#include "afp/rng.hpp"

#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>

namespace afp {

VictimTraining train_victim(const LabeledDataset& train, const VictimConfig& config, const LabeledDataset* val) {
    if (train.size() == 0) throw InvalidInput("train_victim needs a nonempty training set");
    config.adam.validate();
    const Shape3 in{train.images.dim(1), train.images.dim(2), train.images.dim(3)};
    VictimTraining out;
    out.model = init_model(NetworkSpec::victim(in, 10), config.seed);

    Rng rng(derive_seed(config.seed, {1}));
    std::vector<int> order(static_cast<std::size_t>(train.size()));
    long step = 0;
    const long total_steps =
        static_cast<long>(config.epochs) * ((train.size() + config.adam.batch_size - 1) / config.adam.batch_size);
    AdamConfig adam = config.adam;
    for (int epoch = 1; epoch <= config.epochs; ++epoch) {
        std::iota(order.begin(), order.end(), 0);
        shuffle(order.begin(), order.end(), rng);
        double loss_sum = 0.0;
        int batches = 0;
        for (std::size_t b = 0; b < order.size(); b += static_cast<std::size_t>(config.adam.batch_size)) {
            const auto end = std::min(order.size(), b + static_cast<std::size_t>(config.adam.batch_size));
            const std::span<const int> rows(order.data() + b, end - b);
            std::vector<int> labels;
            for (int r : rows) labels.push_back(train.labels[static_cast<std::size_t>(r)]);
            const auto lg = loss_and_param_gradients(out.model, gather_rows(train.images, rows), labels);
            if (config.cosine_decay) {
                adam.learning_rate =
                    config.adam.learning_rate * 0.5 * (1.0 + std::cos(3.141592653589793 * step / total_steps));
            }
            adam_step(out.model, lg.grads, adam);
            loss_sum += lg.loss;
            ++batches;
            ++step;
        }
        TrainLogRow row;
        row.epoch = epoch;
        row.step = step;
        row.loss = loss_sum / std::max(batches, 1);
        row.val_accuracy = val ? evaluate_victim(out.model, *val).accuracy : std::numeric_limits<double>::quiet_NaN();
        out.log.push_back(row);
    }
    return out;
}

void write_train_log(const std::vector<TrainLogRow>& log, const std::filesystem::path& path) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path);
    out << "epoch,step,loss,val_accuracy\n";
    out.precision(9);
    for (const auto& r : log) out << r.epoch << ',' << r.step << ',' << r.loss << ',' << r.val_accuracy << '\n';
    if (!out) throw FormatError("cannot write " + path.string());
}

VictimEval evaluate_victim(const ModelCheckpoint& model, const LabeledDataset& data) {
    VictimEval e;
    const int classes = model.spec.classes;
    e.per_class_accuracy.assign(static_cast<std::size_t>(classes), std::numeric_limits<double>::quiet_NaN());
    if (data.size() == 0) return e;
    e.predictions = argmax_rows(forward_chunked(model, data.images));
    std::vector<int> correct(static_cast<std::size_t>(classes), 0);
    std::vector<int> total(static_cast<std::size_t>(classes), 0);
    int hits = 0;
    for (int i = 0; i < data.size(); ++i) {
        const int y = data.labels[static_cast<std::size_t>(i)];
        const bool ok = e.predictions[static_cast<std::size_t>(i)] == y;
        hits += ok;
        if (y >= 0 && y < classes) {
            total[static_cast<std::size_t>(y)]++;
            correct[static_cast<std::size_t>(y)] += ok;
        }
    }
    e.accuracy = static_cast<double>(hits) / data.size();
    for (int c = 0; c < classes; ++c) {
        if (total[static_cast<std::size_t>(c)] > 0) {
            e.per_class_accuracy[static_cast<std::size_t>(c)] =
                static_cast<double>(correct[static_cast<std::size_t>(c)]) / total[static_cast<std::size_t>(c)];
        }
    }
    return e;
}

}  // namespace afp
