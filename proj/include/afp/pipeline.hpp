#pragma once

#include "afp/attribution.hpp"
#include "afp/dataset.hpp"
#include "afp/fingerprints.hpp"
#include "afp/pool.hpp"
#include "afp/victim.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace afp {

inline constexpr const char* kToolVersion = "0.1.0";

// Flat key = value configuration. Every key has a default; unknown keys are
// configuration errors.
class RunConfig {
public:
    RunConfig();

    // "key = value" lines; '#' starts a comment; blank lines ignored.
    void load_file(const std::filesystem::path& path);
    void set(const std::string& key, const std::string& value);
    // "key=value"
    void set_assignment(const std::string& assignment);

    const std::string& get(const std::string& key) const;
    int get_int(const std::string& key) const;
    std::uint64_t get_u64(const std::string& key) const;
    double get_double(const std::string& key) const;
    bool get_bool(const std::string& key) const;

    std::uint64_t seed() const { return get_u64("seed"); }
    int jobs() const { return get_int("jobs"); }
    std::filesystem::path output_dir() const { return get("output_dir"); }

    const std::map<std::string, std::string>& values() const { return values_; }
    // Config echo plus the preset's explicit values.
    nlohmann::json to_json() const;

private:
    std::map<std::string, std::string> values_;
};

// Sub-configs derived from a RunConfig; seeds fan out by stage name.
VictimConfig victim_config(const RunConfig& cfg);
PoolConfig pool_config(const RunConfig& cfg, bool expanded);
FingerprintParams fingerprint_params(const RunConfig& cfg);
SplitConfig split_config(const RunConfig& cfg);
TrainProtocol train_protocol(const RunConfig& cfg);

// Condition = fingerprint method plus its distinguishing parameter:
// "true-delta", "raw-image", "jpeg-q75", "jpeg-q25", "cs".
struct Condition {
    FingerprintMethod method = FingerprintMethod::TrueDelta;
    int jpeg_quality = 75;

    std::string name() const;
    static Condition parse(const std::string& name);
};

// The five conditions of the headline comparison.
std::vector<Condition> report_conditions();

std::string taxonomy_tag(bool expanded);

// <output>/manifest.json: config echo, tool version and one entry per stage
// with artifact hashes, counts and timings.
class Manifest {
public:
    static Manifest open(const std::filesystem::path& output_dir);

    void set_config(const nlohmann::json& config) { doc_["config"] = config; }
    // Replaces the stage entry. `artifacts` are relative to the output dir.
    void record_stage(const std::string& stage, const std::vector<std::filesystem::path>& artifacts, nlohmann::json info,
                      double seconds);
    void save() const;

    const nlohmann::json& doc() const { return doc_; }
    // Stage name -> {artifact path -> sha256}.
    std::map<std::string, std::map<std::string, std::string>> artifact_hashes() const;
    // Problems found: missing or mismatching artifacts, tampered pool records.
    std::vector<std::string> verify() const;

private:
    std::filesystem::path dir_;
    nlohmann::json doc_;
};

// Stage entry points shared by the CLI and the acceptance run. Each writes
// its artifacts under cfg.output_dir() and updates the manifest. Missing
// prerequisites raise ConfigError.
struct DataSplits {
    LabeledDataset train;
    LabeledDataset test;
};

DataSplits load_data(const RunConfig& cfg);

void stage_train_victim(const RunConfig& cfg);
void stage_generate(const RunConfig& cfg, bool expanded);
void stage_fingerprint(const RunConfig& cfg, const Condition& cond, bool expanded);
void stage_build_splits(const RunConfig& cfg, const Condition& cond, bool expanded);
void stage_train_attributor(const RunConfig& cfg, const Condition& cond, bool expanded);
void stage_evaluate(const RunConfig& cfg, const Condition& cond, bool expanded);
void stage_analyze(const RunConfig& cfg, bool expanded);
// Accuracy table over report_conditions() for both taxonomies, whichever
// evaluations exist; returns the report document and writes report.json/.md.
nlohmann::json stage_report(const RunConfig& cfg);

// Artifact locations.
std::filesystem::path victim_path(const RunConfig& cfg);
std::filesystem::path pool_dir(const RunConfig& cfg, bool expanded);
std::filesystem::path fingerprint_dir(const RunConfig& cfg, const Condition& cond, bool expanded);
std::filesystem::path split_path(const RunConfig& cfg, const Condition& cond, bool expanded);
std::filesystem::path attributor_dir(const RunConfig& cfg, const Condition& cond, bool expanded);
std::filesystem::path eval_dir(const RunConfig& cfg, const Condition& cond, bool expanded);
std::filesystem::path analysis_dir(const RunConfig& cfg, bool expanded);

}  // namespace afp
