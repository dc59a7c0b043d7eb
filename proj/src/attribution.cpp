#include "afp/attribution.hpp"

#include "afp/errors.hpp"
#include "afp/parallel.hpp"
#include "afp/rng.hpp"
#include "afp/serialize.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <set>

namespace afp {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

std::ofstream open_out(const std::filesystem::path& path) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path);
    if (!out) throw FormatError("cannot write " + path.string());
    out.precision(9);
    return out;
}

}  // namespace

std::string to_string(SplitRole r) {
    switch (r) {
        case SplitRole::Train: return "train";
        case SplitRole::Val: return "val";
        case SplitRole::Test: return "test";
    }
    return "?";
}

void AttributionDataset::validate() const {
    if (classes < 1) throw InvalidInput("attribution dataset needs at least one class");
    if (source_ids.size() != labels.size()) throw InvalidInput("source id count does not match label count");
    if (fingerprints.rank() != 4 || fingerprints.dim(0) != size())
        throw InvalidInput("fingerprint batch does not match label count: " + fingerprints.shape_string());
    for (int y : labels)
        if (y < 0 || y >= classes) throw InvalidInput("label " + std::to_string(y) + " outside the taxonomy");
}

// ---------------------------------------------------------------------------
// Splits
// ---------------------------------------------------------------------------

AttributionSplits build_splits(const FingerprintSet& set, int classes, const SplitConfig& cfg) {
    if (set.items.empty()) throw InvalidInput("build_splits needs a nonempty fingerprint set");
    if (!(cfg.val_frac >= 0.0 && cfg.val_frac < 1.0)) throw InvalidInput("val_frac must lie in [0, 1)");

    std::set<std::uint64_t> train_ids, test_ids;
    for (const auto& f : set.items) (f.split == Split::Train ? train_ids : test_ids).insert(f.source_id);

    auto pick = [&](const std::set<std::uint64_t>& ids, int n, std::uint64_t tag, const char* what) {
        std::vector<std::uint64_t> v(ids.begin(), ids.end());
        if (n < 0 || static_cast<std::size_t>(n) > v.size())
            throw InvalidInput("requested " + std::to_string(n) + " unique " + what + " images but only " +
                               std::to_string(v.size()) + " are available");
        Rng rng(derive_seed(cfg.seed, {tag}));
        shuffle(v.begin(), v.end(), rng);
        if (n > 0) v.resize(static_cast<std::size_t>(n));
        return v;
    };
    const auto train_pick = pick(train_ids, cfg.n_unique_train, 1, "train");
    const auto test_pick = pick(test_ids, cfg.n_unique_test, 2, "test");
    const auto n_val = static_cast<std::size_t>(std::llround(cfg.val_frac * static_cast<double>(train_pick.size())));
    const std::set<std::uint64_t> val_set(train_pick.begin(), train_pick.begin() + static_cast<std::ptrdiff_t>(n_val));
    const std::set<std::uint64_t> train_set(train_pick.begin() + static_cast<std::ptrdiff_t>(n_val), train_pick.end());
    const std::set<std::uint64_t> test_set(test_pick.begin(), test_pick.end());

    const Tensor& first = set.items.front().delta_hat;
    AttributionSplits out;
    AttributionDataset* parts[] = {&out.train, &out.val, &out.test};
    const SplitRole roles[] = {SplitRole::Train, SplitRole::Val, SplitRole::Test};
    std::vector<Tensor> images[3];
    for (int p = 0; p < 3; ++p) {
        parts[p]->role = roles[p];
        parts[p]->taxonomy_version = set.taxonomy_version;
        parts[p]->method = set.method;
        parts[p]->classes = classes;
    }
    for (const auto& f : set.items) {
        if (f.delta_hat.shape() != first.shape()) throw InvalidInput("fingerprints differ in shape");
        if (f.class_index < 0 || f.class_index >= classes)
            throw InvalidInput("class index " + std::to_string(f.class_index) + " outside the taxonomy");
        int p = -1;
        if (f.split == Split::Test) {
            if (test_set.count(f.source_id)) p = 2;
        } else if (train_set.count(f.source_id)) {
            p = 0;
        } else if (val_set.count(f.source_id)) {
            p = 1;
        }
        if (p < 0) continue;
        images[p].push_back(f.delta_hat);
        parts[p]->labels.push_back(f.class_index);
        parts[p]->source_ids.push_back(f.source_id);
    }
    for (int p = 0; p < 3; ++p) {
        parts[p]->fingerprints =
            images[p].empty() ? Tensor({0, first.dim(0), first.dim(1), first.dim(2)}) : stack(images[p]);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

void TrainProtocol::validate() const {
    if (max_epochs < 1) throw ConfigError("max_epochs must be positive");
    if (val_every_steps < 1) throw ConfigError("val_every_steps must be positive");
    if (patience < 1) throw ConfigError("patience must be positive");
    if (replicates < 1) throw ConfigError("replicates must be positive");
    adam.validate();
}

std::uint64_t TrainProtocol::replicate_seed(int replicate) const {
    return derive_seed(seed, {static_cast<std::uint64_t>(replicate)});
}

bool EarlyStopping::observe(double accuracy) {
    if (!seen_ || accuracy > best_) {
        seen_ = true;
        best_ = accuracy;
        stale_ = 0;
        return true;
    }
    ++stale_;
    return false;
}

AttributorTraining train_attributor(const AttributionDataset& train, const AttributionDataset& val,
                                    const TrainProtocol& protocol, int replicate) {
    protocol.validate();
    train.validate();
    if (train.size() == 0) throw InvalidInput("train_attributor needs a nonempty training set");
    if (val.size() > 0) {
        val.validate();
        if (val.classes != train.classes) throw InvalidInput("train and val taxonomies differ");
        if (val.fingerprints.dim(1) != train.fingerprints.dim(1) || val.fingerprints.dim(2) != train.fingerprints.dim(2) ||
            val.fingerprints.dim(3) != train.fingerprints.dim(3))
            throw InvalidInput("train and val fingerprint shapes differ");
    }
    if (protocol.early_stopping && val.size() == 0)
        throw ConfigError("early stopping needs a nonempty validation set");

    const std::uint64_t seed = protocol.replicate_seed(replicate);
    const Shape3 in{train.fingerprints.dim(1), train.fingerprints.dim(2), train.fingerprints.dim(3)};
    ModelCheckpoint model = init_model(NetworkSpec::attributor(in, train.classes), seed);

    AttributorTraining out;
    out.best_val_accuracy = kNaN;
    Rng rng(derive_seed(seed, {1}));
    std::vector<int> order(static_cast<std::size_t>(train.size()));
    const auto batch = static_cast<std::size_t>(protocol.adam.batch_size);
    long step = 0;
    long last_validated = -1;
    double loss_sum = 0.0;
    long loss_steps = 0;
    EarlyStopping stopping(protocol.patience);
    bool stop = false;

    auto validate_now = [&](int epoch) {
        HistoryRow row;
        row.epoch = epoch;
        row.step = step;
        row.train_loss = loss_steps ? loss_sum / static_cast<double>(loss_steps) : kNaN;
        loss_sum = 0.0;
        loss_steps = 0;
        last_validated = step;
        row.val_accuracy = evaluate(model, val).accuracy;
        if (stopping.observe(row.val_accuracy)) {
            row.best = true;
            out.best_val_accuracy = row.val_accuracy;
            out.best_step = step;
            out.model = model;
        }
        out.history.push_back(row);
        if (protocol.early_stopping && stopping.should_stop()) stop = true;
    };

    int epoch = 0;
    while (!stop && epoch < protocol.max_epochs) {
        ++epoch;
        std::iota(order.begin(), order.end(), 0);
        shuffle(order.begin(), order.end(), rng);
        for (std::size_t b = 0; b < order.size() && !stop; b += batch) {
            const std::span<const int> rows(order.data() + b, std::min(order.size(), b + batch) - b);
            std::vector<int> labels;
            labels.reserve(rows.size());
            for (int r : rows) labels.push_back(train.labels[static_cast<std::size_t>(r)]);
            const auto lg = loss_and_param_gradients(model, gather_rows(train.fingerprints, rows), labels);
            adam_step(model, lg.grads, protocol.adam);
            loss_sum += lg.loss;
            ++loss_steps;
            ++step;
            if (val.size() > 0 && step % protocol.val_every_steps == 0) validate_now(epoch);
        }
        if (!stop && val.size() > 0 && last_validated != step) validate_now(epoch);
    }
    out.steps = step;
    out.epochs = epoch;
    if (out.history.empty()) {
        out.model = model;
        out.best_step = step;
    }
    return out;
}

std::vector<AttributorTraining> train_replicates(const AttributionDataset& train, const AttributionDataset& val,
                                                 const TrainProtocol& protocol, int jobs) {
    protocol.validate();
    std::vector<AttributorTraining> out(static_cast<std::size_t>(protocol.replicates));
    parallel_for(protocol.replicates, jobs,
                 [&](int r) { out[static_cast<std::size_t>(r)] = train_attributor(train, val, protocol, r); });
    return out;
}

void write_history_csv(const std::vector<HistoryRow>& history, const std::filesystem::path& path) {
    auto out = open_out(path);
    out << "epoch,step,train_loss,val_accuracy,best\n";
    for (const auto& r : history)
        out << r.epoch << ',' << r.step << ',' << r.train_loss << ',' << r.val_accuracy << ',' << (r.best ? 1 : 0) << '\n';
    if (!out) throw FormatError("cannot write " + path.string());
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

Predictions predict(const ModelCheckpoint& model, const AttributionDataset& data) {
    Predictions p;
    if (data.size() == 0) return p;
    if (data.fingerprints.dim(1) != model.spec.input.h || data.fingerprints.dim(2) != model.spec.input.w ||
        data.fingerprints.dim(3) != model.spec.input.c)
        throw InvalidInput("fingerprint shape " + data.fingerprints.shape_string() + " does not match the model input");
    p.logits = forward_chunked(model, data.fingerprints);
    p.labels = argmax_rows(p.logits);
    return p;
}

EvalReport make_report(std::span<const int> truth, std::span<const int> predicted, int classes, int replicate) {
    if (truth.size() != predicted.size()) throw InvalidInput("truth and prediction counts differ");
    const auto k = static_cast<std::size_t>(classes);
    EvalReport r;
    r.replicate = replicate;
    r.class_counts.assign(k, 0);
    r.confusion_counts.assign(k, std::vector<int>(k, 0));
    int hits = 0;
    for (std::size_t i = 0; i < truth.size(); ++i) {
        if (truth[i] < 0 || truth[i] >= classes || predicted[i] < 0 || predicted[i] >= classes)
            throw InvalidInput("label outside the taxonomy");
        r.confusion_counts[static_cast<std::size_t>(truth[i])][static_cast<std::size_t>(predicted[i])]++;
        r.class_counts[static_cast<std::size_t>(truth[i])]++;
        hits += truth[i] == predicted[i];
    }
    r.accuracy = truth.empty() ? kNaN : static_cast<double>(hits) / static_cast<double>(truth.size());
    r.per_class_accuracy.assign(k, kNaN);
    r.confusion.assign(k, std::vector<double>(k, 0.0));
    for (std::size_t t = 0; t < k; ++t) {
        const int n = r.class_counts[t];
        if (n == 0) continue;
        for (std::size_t p = 0; p < k; ++p) r.confusion[t][p] = static_cast<double>(r.confusion_counts[t][p]) / n;
        r.per_class_accuracy[t] = r.confusion[t][t];
    }
    return r;
}

EvalReport evaluate(const ModelCheckpoint& model, const AttributionDataset& test, int replicate) {
    const auto p = predict(model, test);
    return make_report(test.labels, p.labels, test.classes, replicate);
}

MeanStd mean_std(std::span<const double> values) {
    if (values.empty()) return {kNaN, kNaN};
    double sum = 0.0;
    for (double v : values) sum += v;
    const double mean = sum / static_cast<double>(values.size());
    double ss = 0.0;
    for (double v : values) ss += (v - mean) * (v - mean);
    return {mean, std::sqrt(ss / static_cast<double>(values.size()))};
}

EvalSummary summarize(std::vector<EvalReport> reports) {
    if (reports.empty()) throw InvalidInput("summarize needs at least one report");
    EvalSummary s;
    s.reports = std::move(reports);
    std::vector<double> acc;
    for (const auto& r : s.reports) acc.push_back(r.accuracy);
    s.accuracy = mean_std(acc);
    const std::size_t k = s.reports[0].per_class_accuracy.size();
    for (std::size_t c = 0; c < k; ++c) {
        std::vector<double> v;
        for (const auto& r : s.reports) v.push_back(r.per_class_accuracy.at(c));
        s.per_class.push_back(mean_std(v));
    }
    return s;
}

void write_confusion_csv(const EvalReport& report, const Taxonomy& taxonomy, const std::filesystem::path& path) {
    auto out = open_out(path);
    out << "truth";
    for (const auto& c : taxonomy.classes()) out << ',' << c.name();
    out << '\n';
    for (std::size_t t = 0; t < report.confusion.size(); ++t) {
        out << taxonomy.at(static_cast<int>(t)).name();
        for (double v : report.confusion[t]) out << ',' << v;
        out << '\n';
    }
    if (!out) throw FormatError("cannot write " + path.string());
}

void write_per_class_csv(const EvalSummary& summary, const Taxonomy& taxonomy, const std::filesystem::path& path) {
    auto out = open_out(path);
    out << "class_index,class,count,mean_accuracy,std_accuracy";
    for (const auto& r : summary.reports) out << ",replicate_" << r.replicate;
    out << '\n';
    for (std::size_t c = 0; c < summary.per_class.size(); ++c) {
        out << c << ',' << taxonomy.at(static_cast<int>(c)).name() << ',' << summary.reports[0].class_counts[c] << ','
            << summary.per_class[c].mean << ',' << summary.per_class[c].std;
        for (const auto& r : summary.reports) out << ',' << r.per_class_accuracy[c];
        out << '\n';
    }
    if (!out) throw FormatError("cannot write " + path.string());
}

void write_summary_json(const EvalSummary& summary, const Taxonomy& taxonomy, FingerprintMethod method,
                        const std::string& condition, const std::filesystem::path& path) {
    auto num = [](double v) { return std::isnan(v) ? nlohmann::json(nullptr) : nlohmann::json(v); };
    nlohmann::json reps = nlohmann::json::array();
    for (const auto& r : summary.reports) reps.push_back({{"replicate", r.replicate}, {"accuracy", num(r.accuracy)}});
    nlohmann::json per_class = nlohmann::json::array();
    for (std::size_t c = 0; c < summary.per_class.size(); ++c)
        per_class.push_back({{"class_index", c},
                             {"class", taxonomy.at(static_cast<int>(c)).name()},
                             {"mean", num(summary.per_class[c].mean)},
                             {"std", num(summary.per_class[c].std)}});
    const nlohmann::json j = {{"condition", condition},
                              {"method", to_string(method)},
                              {"taxonomy_version", taxonomy.version()},
                              {"classes", taxonomy.size()},
                              {"test_samples", summary.reports[0].confusion_counts.empty()
                                                   ? 0
                                                   : std::accumulate(summary.reports[0].class_counts.begin(),
                                                                     summary.reports[0].class_counts.end(), 0)},
                              {"accuracy_mean", num(summary.accuracy.mean)},
                              {"accuracy_std", num(summary.accuracy.std)},
                              {"replicates", reps},
                              {"per_class", per_class}};
    write_file(path, j.dump(1) + "\n");
}

}  // namespace afp
