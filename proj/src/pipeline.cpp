#include "afp/pipeline.hpp"

#include "afp/analysis.hpp"
#include "afp/errors.hpp"
#include "afp/rng.hpp"
#include "afp/serialize.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

namespace afp {

using nlohmann::json;
namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// RunConfig
// ---------------------------------------------------------------------------

RunConfig::RunConfig() {
    values_ = {
        {"seed", "1"},
        {"preset", "desk"},
        {"output_dir", "runs/desk"},
        {"jobs", "1"},
        {"data.source", "idx"},
        {"data.train_images", "data/train-images-idx3-ubyte"},
        {"data.train_labels", "data/train-labels-idx1-ubyte"},
        {"data.test_images", "data/t10k-images-idx3-ubyte"},
        {"data.test_labels", "data/t10k-labels-idx1-ubyte"},
        {"data.synth_train_per_class", "200"},
        {"data.synth_test_per_class", "50"},
        {"victim.epochs", "5"},
        {"victim.learning_rate", "0.005"},
        {"victim.batch_size", "64"},
        {"victim.cosine_decay", "true"},
        {"victim.train_limit", "0"},
        {"pool.train_sources", "700"},
        {"pool.test_sources", "300"},
        {"pool.patch_images", "2000"},
        {"pool.chunk", "32"},
        {"pgd.steps", "0"},
        {"square.query_budget", "0"},
        {"patch.target", "8"},
        {"patch.side", "0"},
        {"patch.iters", "1000"},
        {"patch.learning_rate", "0.05"},
        {"patch.batch_size", "32"},
        {"jpeg.subsampling", "true"},
        {"cs.k_over_n", "0.5"},
        {"cs.lambda", "0.01"},
        {"cs.max_iters", "200"},
        {"cs.tol", "1e-6"},
        {"splits.n_unique_train", "0"},
        {"splits.n_unique_test", "0"},
        {"splits.val_frac", "0.1"},
        {"attributor.max_epochs", "50"},
        {"attributor.val_every_steps", "400"},
        {"attributor.patience", "4"},
        {"attributor.learning_rate", "0.01"},
        {"attributor.batch_size", "128"},
        {"attributor.replicates", "4"},
    };
}

namespace {

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

}  // namespace

void RunConfig::load_file(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("config file not found: " + path.string());
    std::string line;
    int n = 0;
    while (std::getline(in, line)) {
        ++n;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.resize(hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError(path.string() + ":" + std::to_string(n) + ": expected 'key = value'");
        set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
}

void RunConfig::set(const std::string& key, const std::string& value) {
    const auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError("unknown config key '" + key + "'");
    it->second = value;
}

void RunConfig::set_assignment(const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos) throw ConfigError("expected key=value, got '" + assignment + "'");
    set(trim(assignment.substr(0, eq)), trim(assignment.substr(eq + 1)));
}

const std::string& RunConfig::get(const std::string& key) const {
    const auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError("unknown config key '" + key + "'");
    return it->second;
}

int RunConfig::get_int(const std::string& key) const {
    const auto& v = get(key);
    try {
        std::size_t used = 0;
        const int x = std::stoi(v, &used);
        if (used == v.size()) return x;
    } catch (const std::exception&) {
    }
    throw ConfigError(key + ": expected an integer, got '" + v + "'");
}

std::uint64_t RunConfig::get_u64(const std::string& key) const {
    const auto& v = get(key);
    try {
        std::size_t used = 0;
        const auto x = std::stoull(v, &used);
        if (used == v.size() && v.find('-') == std::string::npos) return x;
    } catch (const std::exception&) {
    }
    throw ConfigError(key + ": expected an unsigned integer, got '" + v + "'");
}

double RunConfig::get_double(const std::string& key) const {
    const auto& v = get(key);
    try {
        std::size_t used = 0;
        const double x = std::stod(v, &used);
        if (used == v.size() && std::isfinite(x)) return x;
    } catch (const std::exception&) {
    }
    throw ConfigError(key + ": expected a number, got '" + v + "'");
}

bool RunConfig::get_bool(const std::string& key) const {
    const auto& v = get(key);
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    throw ConfigError(key + ": expected true or false, got '" + v + "'");
}

json RunConfig::to_json() const {
    const auto p = pool_config(*this, false).preset;
    return {{"values", values_},
            {"preset",
             {{"name", p.name},
              {"linf_eps", p.linf_eps},
              {"l2_eps", p.l2_eps},
              {"l2_extra_eps", p.l2_extra_eps},
              {"pgd_steps", p.pgd_steps},
              {"square_budget", p.square_budget}}}};
}

// ---------------------------------------------------------------------------
// Derived configs
// ---------------------------------------------------------------------------

VictimConfig victim_config(const RunConfig& cfg) {
    VictimConfig v;
    v.epochs = cfg.get_int("victim.epochs");
    v.adam.learning_rate = cfg.get_double("victim.learning_rate");
    v.adam.batch_size = cfg.get_int("victim.batch_size");
    v.cosine_decay = cfg.get_bool("victim.cosine_decay");
    v.seed = stage_seed(cfg.seed(), "train-victim");
    if (v.epochs < 1) throw ConfigError("victim.epochs must be positive");
    v.adam.validate();
    return v;
}

PoolConfig pool_config(const RunConfig& cfg, bool expanded) {
    PoolConfig p;
    p.preset = AttackPreset::by_name(cfg.get("preset"));
    if (cfg.get_int("pgd.steps") > 0) p.preset.pgd_steps = cfg.get_int("pgd.steps");
    if (cfg.get_int("square.query_budget") > 0) p.preset.square_budget = cfg.get_int("square.query_budget");
    p.expanded = expanded;
    p.patch.target = cfg.get_int("patch.target");
    p.patch.side = cfg.get_int("patch.side");
    p.patch.iters = cfg.get_int("patch.iters");
    p.patch.learning_rate = cfg.get_double("patch.learning_rate");
    p.patch.batch_size = cfg.get_int("patch.batch_size");
    p.seed = stage_seed(cfg.seed(), "generate");
    p.jobs = std::max(1, cfg.jobs());
    p.chunk = cfg.get_int("pool.chunk");
    if (p.chunk < 1) throw ConfigError("pool.chunk must be positive");
    if (p.patch.target < 0 || p.patch.target >= 10) throw ConfigError("patch.target must be a victim class in [0, 10)");
    return p;
}

FingerprintParams fingerprint_params(const RunConfig& cfg) {
    FingerprintParams p;
    p.jpeg.chroma_subsampling = cfg.get_bool("jpeg.subsampling");
    p.cs.k_over_n = cfg.get_double("cs.k_over_n");
    p.cs.lambda = cfg.get_double("cs.lambda");
    p.cs.max_iters = cfg.get_int("cs.max_iters");
    p.cs.tol = cfg.get_double("cs.tol");
    p.cs.seed = stage_seed(cfg.seed(), "fingerprint");
    try {
        p.cs.validate();
    } catch (const InvalidInput& e) {
        throw ConfigError(e.what());
    }
    return p;
}

SplitConfig split_config(const RunConfig& cfg) {
    SplitConfig s;
    s.n_unique_train = cfg.get_int("splits.n_unique_train");
    s.n_unique_test = cfg.get_int("splits.n_unique_test");
    s.val_frac = cfg.get_double("splits.val_frac");
    s.seed = stage_seed(cfg.seed(), "build-splits");
    if (!(s.val_frac >= 0.0 && s.val_frac < 1.0)) throw ConfigError("splits.val_frac must lie in [0, 1)");
    return s;
}

TrainProtocol train_protocol(const RunConfig& cfg) {
    TrainProtocol p;
    p.max_epochs = cfg.get_int("attributor.max_epochs");
    p.val_every_steps = cfg.get_int("attributor.val_every_steps");
    p.patience = cfg.get_int("attributor.patience");
    p.adam.learning_rate = cfg.get_double("attributor.learning_rate");
    p.adam.batch_size = cfg.get_int("attributor.batch_size");
    p.replicates = cfg.get_int("attributor.replicates");
    p.seed = stage_seed(cfg.seed(), "train-attributor");
    try {
        p.validate();
    } catch (const InvalidInput& e) {
        throw ConfigError(e.what());
    }
    return p;
}

// ---------------------------------------------------------------------------
// Conditions and paths
// ---------------------------------------------------------------------------

std::string Condition::name() const {
    if (method == FingerprintMethod::Jpeg) return "jpeg-q" + std::to_string(jpeg_quality);
    return to_string(method);
}

Condition Condition::parse(const std::string& name) {
    Condition c;
    if (name.rfind("jpeg-q", 0) == 0) {
        c.method = FingerprintMethod::Jpeg;
        try {
            std::size_t used = 0;
            c.jpeg_quality = std::stoi(name.substr(6), &used);
            if (used != name.size() - 6) throw std::invalid_argument(name);
        } catch (const std::exception&) {
            throw ConfigError("bad condition '" + name + "'");
        }
        if (c.jpeg_quality < 1 || c.jpeg_quality > 100) throw ConfigError("jpeg quality must lie in [1, 100]");
        return c;
    }
    try {
        c.method = parse_method(name);
    } catch (const InvalidInput&) {
        throw ConfigError("unknown condition '" + name + "' (expected true-delta, raw-image, jpeg-q<N> or cs)");
    }
    if (c.method == FingerprintMethod::Jpeg) c.jpeg_quality = 75;
    return c;
}

std::vector<Condition> report_conditions() {
    return {{FingerprintMethod::TrueDelta, 75},
            {FingerprintMethod::RawImage, 75},
            {FingerprintMethod::Jpeg, 75},
            {FingerprintMethod::Jpeg, 25},
            {FingerprintMethod::Cs, 75}};
}

std::string taxonomy_tag(bool expanded) { return expanded ? "expanded-21" : "base-17"; }

fs::path victim_path(const RunConfig& cfg) { return cfg.output_dir() / "victim" / "victim.ck"; }
fs::path pool_dir(const RunConfig& cfg, bool expanded) { return cfg.output_dir() / "pool" / taxonomy_tag(expanded); }
fs::path fingerprint_dir(const RunConfig& cfg, const Condition& c, bool expanded) {
    return cfg.output_dir() / "fingerprints" / taxonomy_tag(expanded) / c.name();
}
fs::path split_path(const RunConfig& cfg, const Condition& c, bool expanded) {
    return cfg.output_dir() / "splits" / taxonomy_tag(expanded) / (c.name() + ".json");
}
fs::path attributor_dir(const RunConfig& cfg, const Condition& c, bool expanded) {
    return cfg.output_dir() / "attributor" / taxonomy_tag(expanded) / c.name();
}
fs::path eval_dir(const RunConfig& cfg, const Condition& c, bool expanded) {
    return cfg.output_dir() / "eval" / taxonomy_tag(expanded) / c.name();
}
fs::path analysis_dir(const RunConfig& cfg, bool expanded) {
    return cfg.output_dir() / "analysis" / taxonomy_tag(expanded);
}

// ---------------------------------------------------------------------------
// Manifest
// ---------------------------------------------------------------------------

Manifest Manifest::open(const fs::path& output_dir) {
    Manifest m;
    m.dir_ = output_dir;
    const auto path = output_dir / "manifest.json";
    if (fs::exists(path)) {
        try {
            m.doc_ = json::parse(read_file(path));
        } catch (const json::exception& e) {
            throw FormatError(path.string() + ": " + e.what());
        }
    } else {
        m.doc_ = {{"format", "afp-manifest"}, {"version", 1}, {"stages", json::object()}};
    }
    m.doc_["tool"] = "afp";
    m.doc_["tool_version"] = kToolVersion;
    return m;
}

void Manifest::record_stage(const std::string& stage, const std::vector<fs::path>& artifacts, json info,
                            double seconds) {
    json list = json::array();
    for (const auto& rel : artifacts) {
        const auto full = dir_ / rel;
        list.push_back({{"path", rel.generic_string()}, {"sha256", sha256_file(full)}, {"bytes", fs::file_size(full)}});
    }
    info["artifacts"] = std::move(list);
    info["seconds"] = seconds;
    doc_["stages"][stage] = std::move(info);
}

void Manifest::save() const { write_file(dir_ / "manifest.json", doc_.dump(1) + "\n"); }

std::map<std::string, std::map<std::string, std::string>> Manifest::artifact_hashes() const {
    std::map<std::string, std::map<std::string, std::string>> out;
    for (const auto& [stage, info] : doc_.at("stages").items())
        for (const auto& a : info.at("artifacts")) out[stage][a.at("path").get<std::string>()] = a.at("sha256").get<std::string>();
    return out;
}

std::vector<std::string> Manifest::verify() const {
    std::vector<std::string> problems;
    for (const auto& [stage, files] : artifact_hashes()) {
        for (const auto& [rel, sha] : files) {
            const auto full = dir_ / rel;
            if (!fs::exists(full)) {
                problems.push_back(stage + ": missing " + rel);
                continue;
            }
            if (sha256_file(full) != sha) {
                problems.push_back(stage + ": hash mismatch for " + rel);
                continue;
            }
            // Containers that reference further files by hash.
            try {
                if (full.filename() == "pool.json") load_pool(full.parent_path());
                if (full.filename() == "fingerprints.json") load_fingerprints(full.parent_path());
            } catch (const std::exception& e) {
                problems.push_back(stage + ": " + e.what());
            }
        }
    }
    return problems;
}

// ---------------------------------------------------------------------------
// Stages
// ---------------------------------------------------------------------------

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

void log(const std::string& stage, const std::string& msg) { std::cerr << "[" << stage << "] " << msg << std::endl; }

fs::path rel(const RunConfig& cfg, const fs::path& p) { return fs::relative(p, cfg.output_dir()); }

void finish_stage(const RunConfig& cfg, const std::string& stage, const std::vector<fs::path>& artifacts, json info,
                  Clock::time_point t0) {
    auto m = Manifest::open(cfg.output_dir());
    m.set_config(cfg.to_json());
    std::vector<fs::path> rels;
    for (const auto& a : artifacts) rels.push_back(rel(cfg, a));
    m.record_stage(stage, rels, std::move(info), seconds_since(t0));
    m.save();
}

void require_file(const fs::path& p, const std::string& what, const std::string& hint) {
    if (!fs::exists(p)) throw ConfigError("no " + what + " at " + p.string() + "; " + hint);
}

std::vector<int> first_rows(int n) {
    std::vector<int> rows(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) rows[static_cast<std::size_t>(i)] = i;
    return rows;
}

std::vector<int> row_range(int begin, int end) {
    std::vector<int> rows;
    for (int i = begin; i < end; ++i) rows.push_back(i);
    return rows;
}

Taxonomy taxonomy_for(const RunConfig& cfg, bool expanded) { return pool_config(cfg, expanded).taxonomy(); }

json pool_params(const RunConfig& cfg, bool expanded) {
    const auto p = pool_config(cfg, expanded);
    return {{"taxonomy", p.taxonomy().version()},
            {"seed", p.seed},
            {"preset", cfg.to_json().at("preset")},
            {"patch",
             {{"target", p.patch.target},
              {"side", p.patch.side},
              {"iters", p.patch.iters},
              {"learning_rate", p.patch.learning_rate},
              {"batch_size", p.patch.batch_size}}},
            {"train_sources", cfg.get_int("pool.train_sources")},
            {"test_sources", cfg.get_int("pool.test_sources")},
            {"patch_images", cfg.get_int("pool.patch_images")},
            {"data", {{"source", cfg.get("data.source")},
                      {"victim", victim_config(cfg).seed}}}};
}

FingerprintSet load_condition(const RunConfig& cfg, const Condition& cond, bool expanded) {
    const auto dir = fingerprint_dir(cfg, cond, expanded);
    require_file(dir / "fingerprints.json", cond.name() + " fingerprints", "run fingerprint first");
    return load_fingerprints(dir);
}

json split_json(const AttributionSplits& s) {
    auto ids = [](const AttributionDataset& d) {
        std::vector<std::uint64_t> v(d.source_ids.begin(), d.source_ids.end());
        std::sort(v.begin(), v.end());
        v.erase(std::unique(v.begin(), v.end()), v.end());
        return v;
    };
    return {{"train_sources", ids(s.train)},
            {"val_sources", ids(s.val)},
            {"test_sources", ids(s.test)},
            {"train_samples", s.train.size()},
            {"val_samples", s.val.size()},
            {"test_samples", s.test.size()}};
}

AttributionSplits splits_for(const RunConfig& cfg, const Condition& cond, bool expanded, bool write_if_missing) {
    const auto set = load_condition(cfg, cond, expanded);
    const auto tax = taxonomy_for(cfg, expanded);
    if (set.taxonomy_version != tax.version())
        throw ConfigError("fingerprints use taxonomy " + set.taxonomy_version + " but the config implies " + tax.version());
    auto splits = build_splits(set, tax.size(), split_config(cfg));
    const auto path = split_path(cfg, cond, expanded);
    const json j = split_json(splits);
    if (fs::exists(path)) {
        json stored;
        try {
            stored = json::parse(read_file(path));
        } catch (const json::exception& e) {
            throw FormatError(path.string() + ": " + e.what());
        }
        if (stored != j) throw IntegrityError(path.string() + " does not match the splits rebuilt from the fingerprints");
    } else if (write_if_missing) {
        write_file(path, j.dump(1) + "\n");
    }
    return splits;
}

}  // namespace

DataSplits load_data(const RunConfig& cfg) {
    const auto& src = cfg.get("data.source");
    DataSplits d;
    if (src == "idx") {
        for (const char* key : {"data.train_images", "data.train_labels", "data.test_images", "data.test_labels"}) {
            if (!fs::exists(cfg.get(key))) throw ConfigError("dataset file not found: " + cfg.get(key) + " (" + key + ")");
        }
        d.train = load_idx_dataset(cfg.get("data.train_images"), cfg.get("data.train_labels"), Split::Train);
        d.test = load_idx_dataset(cfg.get("data.test_images"), cfg.get("data.test_labels"), Split::Test);
    } else if (src == "synth") {
        d.train = synth_dataset(cfg.get_int("data.synth_train_per_class"), stage_seed(cfg.seed(), "data-train"), Split::Train);
        d.test = synth_dataset(cfg.get_int("data.synth_test_per_class"), stage_seed(cfg.seed(), "data-test"), Split::Test);
    } else {
        throw ConfigError("data.source must be idx or synth, got '" + src + "'");
    }
    return d;
}

void stage_train_victim(const RunConfig& cfg) {
    const auto t0 = Clock::now();
    const auto vc = victim_config(cfg);
    auto data = load_data(cfg);
    const int limit = cfg.get_int("victim.train_limit");
    if (limit > 0 && limit < data.train.size()) data.train = data.train.subset(first_rows(limit));
    log("train-victim", "training on " + std::to_string(data.train.size()) + " images for " + std::to_string(vc.epochs) +
                            " epochs");
    const auto trained = train_victim(data.train, vc, &data.test);
    const auto eval = evaluate_victim(trained.model, data.test);
    const auto dir = cfg.output_dir() / "victim";
    save_checkpoint(trained.model, dir / "victim.ck");
    write_train_log(trained.log, dir / "train_log.csv");
    const json ej = {{"test_accuracy", eval.accuracy}, {"per_class_accuracy", eval.per_class_accuracy},
                     {"train_images", data.train.size()}, {"test_images", data.test.size()}};
    write_file(dir / "eval.json", ej.dump(1) + "\n");
    log("train-victim", "test accuracy " + std::to_string(eval.accuracy));
    finish_stage(cfg, "train-victim", {dir / "victim.ck", dir / "train_log.csv", dir / "eval.json"},
                 {{"seed", vc.seed}, {"counts", ej}}, t0);
}

void stage_generate(const RunConfig& cfg, bool expanded) {
    const auto t0 = Clock::now();
    const std::string stage = "generate/" + taxonomy_tag(expanded);
    require_file(victim_path(cfg), "victim checkpoint", "run train-victim first");
    const auto pc = pool_config(cfg, expanded);
    const json params = pool_params(cfg, expanded);
    const auto dir = pool_dir(cfg, expanded);

    AttackPool pool;
    bool derived = false;
    if (!expanded) {
        // A matching expanded pool already holds every base record.
        const auto m = Manifest::open(cfg.output_dir());
        const auto& stages = m.doc().at("stages");
        const std::string big = "generate/" + taxonomy_tag(true);
        json expect = pool_params(cfg, true);
        if (stages.contains(big) && stages[big].at("params") == expect && fs::exists(pool_dir(cfg, true) / "pool.json")) {
            log(stage, "deriving from the expanded pool");
            pool = restrict_to_base(load_pool(pool_dir(cfg, true)));
            derived = true;
        }
    }
    if (!derived) {
        const auto victim = load_checkpoint(victim_path(cfg));
        const auto data = load_data(cfg);
        const int n_train = cfg.get_int("pool.train_sources"), n_test = cfg.get_int("pool.test_sources");
        const int n_patch = cfg.get_int("pool.patch_images");
        if (n_train < 0 || n_test < 0 || n_patch < 1) throw ConfigError("pool source counts must be non-negative");
        if (n_train + n_patch > data.train.size())
            throw ConfigError("pool.train_sources + pool.patch_images exceeds the " + std::to_string(data.train.size()) +
                              " training images");
        if (n_test > data.test.size())
            throw ConfigError("pool.test_sources exceeds the " + std::to_string(data.test.size()) + " test images");
        const std::vector<LabeledDataset> sources = {data.train.subset(first_rows(n_train)),
                                                     data.test.subset(first_rows(n_test))};
        const auto patch_train = data.train.subset(row_range(n_train, n_train + n_patch));
        log(stage, "attacking " + std::to_string(n_train) + " train + " + std::to_string(n_test) + " test images with " +
                       std::to_string(pc.taxonomy().size()) + " classes");
        pool = generate_pool(victim, sources, patch_train, pc);
    }
    fs::remove_all(dir);
    save_pool(pool, dir);

    json counts = json::object();
    const auto tax = pc.taxonomy();
    for (const auto& c : tax.classes())
        counts[c.name()] = {{"index", c.index}, {"attempted", pool.per_class[c.index].attempted},
                            {"succeeded", pool.per_class[c.index].succeeded}};
    for (const auto& w : pool.warnings) log(stage, "warning: " + w);
    log(stage, std::to_string(pool.records.size()) + " successful attacks");
    std::vector<fs::path> artifacts = {dir / "pool.json"};
    if (fs::exists(dir / "patch.bin")) artifacts.push_back(dir / "patch.bin");
    finish_stage(cfg, stage, artifacts,
                 {{"params", params},
                  {"classes", tax.size()},
                  {"records", pool.records.size()},
                  {"per_class", counts},
                  {"warnings", pool.warnings},
                  {"derived_from_expanded", derived},
                  {"patch_objective", {pool.patch_initial_objective, pool.patch_final_objective}}},
                 t0);
}

void stage_fingerprint(const RunConfig& cfg, const Condition& cond, bool expanded) {
    const auto t0 = Clock::now();
    const std::string stage = "fingerprint/" + taxonomy_tag(expanded) + "/" + cond.name();
    require_file(pool_dir(cfg, expanded) / "pool.json", "attack pool", "run generate first");
    const auto pool = load_pool(pool_dir(cfg, expanded));
    if (pool.records.empty()) throw ConfigError("the attack pool holds no successful attacks");
    auto params = fingerprint_params(cfg);
    params.jpeg.quality = cond.jpeg_quality;
    log(stage, "extracting " + std::to_string(pool.records.size()) + " fingerprints");
    const auto fps = extract(pool.records, cond.method, params, std::max(1, cfg.jobs()));
    const auto dir = fingerprint_dir(cfg, cond, expanded);
    fs::remove_all(dir);
    save_fingerprints(fps, pool.taxonomy_version, dir);
    finish_stage(cfg, stage, {dir / "fingerprints.json", dir / "fingerprints.bin"},
                 {{"method", to_string(cond.method)}, {"params", describe(cond.method, params)}, {"count", fps.size()}},
                 t0);
}

void stage_build_splits(const RunConfig& cfg, const Condition& cond, bool expanded) {
    const auto t0 = Clock::now();
    const std::string stage = "build-splits/" + taxonomy_tag(expanded) + "/" + cond.name();
    const auto path = split_path(cfg, cond, expanded);
    fs::remove(path);
    const auto splits = splits_for(cfg, cond, expanded, true);
    const auto sc = split_config(cfg);
    log(stage, "train " + std::to_string(splits.train.size()) + ", val " + std::to_string(splits.val.size()) +
                   ", test " + std::to_string(splits.test.size()));
    finish_stage(cfg, stage, {path},
                 {{"seed", sc.seed},
                  {"val_frac", sc.val_frac},
                  {"counts",
                   {{"train", splits.train.size()}, {"val", splits.val.size()}, {"test", splits.test.size()}}}},
                 t0);
}

void stage_train_attributor(const RunConfig& cfg, const Condition& cond, bool expanded) {
    const auto t0 = Clock::now();
    const std::string stage = "train-attributor/" + taxonomy_tag(expanded) + "/" + cond.name();
    const auto splits = splits_for(cfg, cond, expanded, true);
    const auto protocol = train_protocol(cfg);
    log(stage, "training " + std::to_string(protocol.replicates) + " replicates on " +
                   std::to_string(splits.train.size()) + " samples");
    const auto runs = train_replicates(splits.train, splits.val, protocol, std::max(1, cfg.jobs()));
    const auto dir = attributor_dir(cfg, cond, expanded);
    fs::remove_all(dir);
    std::vector<fs::path> artifacts = {split_path(cfg, cond, expanded)};
    json reps = json::array();
    for (std::size_t r = 0; r < runs.size(); ++r) {
        const auto ck = dir / ("replicate_" + std::to_string(r) + ".ck");
        const auto hist = dir / ("history_" + std::to_string(r) + ".csv");
        save_checkpoint(runs[r].model, ck);
        write_history_csv(runs[r].history, hist);
        artifacts.push_back(ck);
        artifacts.push_back(hist);
        reps.push_back({{"replicate", r},
                        {"seed", protocol.replicate_seed(static_cast<int>(r))},
                        {"epochs", runs[r].epochs},
                        {"steps", runs[r].steps},
                        {"best_step", runs[r].best_step},
                        {"best_val_accuracy", runs[r].best_val_accuracy}});
        log(stage, "replicate " + std::to_string(r) + ": best val " + std::to_string(runs[r].best_val_accuracy) +
                       " after " + std::to_string(runs[r].epochs) + " epochs");
    }
    finish_stage(cfg, stage, artifacts, {{"seed", protocol.seed}, {"replicates", reps}}, t0);
}

void stage_evaluate(const RunConfig& cfg, const Condition& cond, bool expanded) {
    const auto t0 = Clock::now();
    const std::string stage = "evaluate/" + taxonomy_tag(expanded) + "/" + cond.name();
    const auto protocol = train_protocol(cfg);
    const auto adir = attributor_dir(cfg, cond, expanded);
    for (int r = 0; r < protocol.replicates; ++r)
        require_file(adir / ("replicate_" + std::to_string(r) + ".ck"), "trained attributor", "run train-attributor first");
    const auto splits = splits_for(cfg, cond, expanded, false);
    std::vector<EvalReport> reports;
    for (int r = 0; r < protocol.replicates; ++r)
        reports.push_back(evaluate(load_checkpoint(adir / ("replicate_" + std::to_string(r) + ".ck")), splits.test, r));
    const auto summary = summarize(std::move(reports));
    const auto tax = taxonomy_for(cfg, expanded);
    const auto dir = eval_dir(cfg, cond, expanded);
    fs::remove_all(dir);
    std::vector<fs::path> artifacts;
    for (const auto& rep : summary.reports) {
        const auto p = dir / ("confusion_" + std::to_string(rep.replicate) + ".csv");
        write_confusion_csv(rep, tax, p);
        artifacts.push_back(p);
    }
    write_per_class_csv(summary, tax, dir / "per_class.csv");
    write_summary_json(summary, tax, cond.method, cond.name(), dir / "summary.json");
    artifacts.push_back(dir / "per_class.csv");
    artifacts.push_back(dir / "summary.json");
    std::ostringstream msg;
    msg << std::fixed << std::setprecision(2) << "accuracy " << 100 * summary.accuracy.mean << "% +- "
        << 100 * summary.accuracy.std << "% over " << summary.reports.size() << " replicates";
    log(stage, msg.str());
    finish_stage(cfg, stage, artifacts,
                 {{"accuracy_mean", summary.accuracy.mean},
                  {"accuracy_std", summary.accuracy.std},
                  {"test_samples", splits.test.size()}},
                 t0);
}

void stage_analyze(const RunConfig& cfg, bool expanded) {
    const auto t0 = Clock::now();
    const std::string stage = "analyze/" + taxonomy_tag(expanded);
    require_file(victim_path(cfg), "victim checkpoint", "run train-victim first");
    require_file(pool_dir(cfg, expanded) / "pool.json", "attack pool", "run generate first");
    const auto victim = load_checkpoint(victim_path(cfg));
    const auto pool = load_pool(pool_dir(cfg, expanded));
    const auto tax = taxonomy_for(cfg, expanded);
    const auto dir = analysis_dir(cfg, expanded);
    fs::remove_all(dir);

    const auto points = quality_scatter(pool.records, std::max(1, cfg.jobs()));
    write_quality_csv(points, dir / "quality_scatter.csv");
    std::vector<double> m, s;
    for (const auto& p : points) {
        m.push_back(p.mse);
        s.push_back(p.ssim);
    }
    const double rho = spearman(m, s);

    const auto cells = label_distribution(pool.records, victim);
    write_label_csv(cells, tax, dir / "label_distribution.csv");
    long true_mass = 0, total = 0;
    double entropy_sum = 0.0;
    for (const auto& c : cells) {
        true_mass += c.counts[static_cast<std::size_t>(c.true_label)];
        total += c.total;
        entropy_sum += c.entropy;
    }
    // Top flipped label agreement between PGD-Linf and Square-Linf per eps.
    json agreement = json::array();
    const auto& preset = pool.config.preset;
    for (double eps : preset.linf_eps) {
        const int a = tax.index_of(Algorithm::Pgd, Norm::Linf, eps), b = tax.index_of(Algorithm::Square, Norm::Linf, eps);
        const auto ag = top_label_agreement(cells, a, b);
        agreement.push_back({{"eps", eps}, {"compared", ag.compared}, {"agree", ag.agree}});
    }
    const json j = {{"records", pool.records.size()},
                    {"spearman_mse_ssim", std::isnan(rho) ? json(nullptr) : json(rho)},
                    {"untargeted_records", total},
                    {"true_label_mass", true_mass},
                    {"label_cells", cells.size()},
                    {"mean_cell_entropy_nats", cells.empty() ? 0.0 : entropy_sum / static_cast<double>(cells.size())},
                    {"top_label_agreement_pgd_vs_square", agreement}};
    write_file(dir / "analysis.json", j.dump(1) + "\n");
    log(stage, "spearman(mse, ssim) = " + std::to_string(rho) + ", true-label mass " + std::to_string(true_mass));
    finish_stage(cfg, stage, {dir / "quality_scatter.csv", dir / "label_distribution.csv", dir / "analysis.json"}, j, t0);
}

json stage_report(const RunConfig& cfg) {
    const auto t0 = Clock::now();
    json report = {{"taxonomies", json::object()}};
    std::ostringstream md;
    md << std::fixed << std::setprecision(2);
    std::map<std::string, std::map<std::string, double>> acc;  // tag -> condition -> mean
    for (bool expanded : {false, true}) {
        const auto tag = taxonomy_tag(expanded);
        json rows = json::array();
        bool any = false;
        std::ostringstream table;
        table << std::fixed << std::setprecision(2);
        table << "| condition | accuracy (%) | std | replicates |\n|---|---|---|---|\n";
        for (const auto& cond : report_conditions()) {
            const auto path = eval_dir(cfg, cond, expanded) / "summary.json";
            if (!fs::exists(path)) {
                rows.push_back({{"condition", cond.name()}, {"status", "absent"}});
                table << "| " << cond.name() << " | absent | | |\n";
                continue;
            }
            json s;
            try {
                s = json::parse(read_file(path));
            } catch (const json::exception& e) {
                throw FormatError(path.string() + ": " + e.what());
            }
            any = true;
            const double mean = s.at("accuracy_mean").get<double>(), sd = s.at("accuracy_std").get<double>();
            acc[tag][cond.name()] = mean;
            rows.push_back({{"condition", cond.name()},
                            {"status", "present"},
                            {"accuracy_mean", mean},
                            {"accuracy_std", sd},
                            {"replicates", s.at("replicates").size()}});
            table << "| " << cond.name() << " | " << 100 * mean << " | " << 100 * sd << " | " << s.at("replicates").size()
                  << " |\n";
        }
        if (!any) continue;
        json entry = {{"rows", rows}};
        md << "## " << tag << "\n\n" << table.str() << "\n";
        const auto& a = acc[tag];
        if (a.count("true-delta") && a.count("jpeg-q75") && a.count("raw-image")) {
            const bool pass = a.at("true-delta") > a.at("jpeg-q75") && a.at("jpeg-q75") > a.at("raw-image");
            entry["ordering_check"] = {{"rule", "true-delta > jpeg-q75 > raw-image"}, {"pass", pass}};
            md << "ordering true-delta > jpeg-q75 > raw-image: " << (pass ? "PASS" : "FAIL") << "\n\n";
        } else {
            entry["ordering_check"] = {{"rule", "true-delta > jpeg-q75 > raw-image"}, {"pass", nullptr}};
            md << "ordering true-delta > jpeg-q75 > raw-image: not evaluable (missing conditions)\n\n";
        }
        report["taxonomies"][tag] = entry;
    }
    const auto base = taxonomy_tag(false), big = taxonomy_tag(true);
    if (acc.count(base) && acc.count(big)) {
        json drops = json::object();
        md << "## expansion 17 -> 21 classes\n\n| condition | drop (points) |\n|---|---|\n";
        for (const auto& [name, mean] : acc[base]) {
            if (!acc[big].count(name)) continue;
            const double drop = 100 * (mean - acc[big][name]);
            drops[name] = drop;
            md << "| " << name << " | " << drop << " |\n";
        }
        report["expansion_drop_points"] = drops;
        md << "\n";
    }
    const auto dir = cfg.output_dir() / "report";
    write_file(dir / "report.json", report.dump(1) + "\n");
    write_file(dir / "report.md", "# Attribution accuracy\n\n" + md.str());
    std::cout << md.str();
    finish_stage(cfg, "report", {dir / "report.json", dir / "report.md"}, json::object(), t0);
    return report;
}

}  // namespace afp
