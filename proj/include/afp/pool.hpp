#pragma once

#include "afp/attacks.hpp"
#include "afp/dataset.hpp"
#include "afp/taxonomy.hpp"

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace afp {

struct PoolConfig {
    AttackPreset preset = AttackPreset::desk();
    bool expanded = false;
    PatchConfig patch;       // patch.seed is overwritten from `seed`
    std::uint64_t seed = 0;
    int jobs = 1;
    int chunk = 32;          // images per work item

    Taxonomy taxonomy() const { return expanded ? Taxonomy::expanded(preset) : Taxonomy::base(preset); }
};

struct ClassCounts {
    int attempted = 0;
    int succeeded = 0;
};

struct AttackPool {
    std::string taxonomy_version;
    PoolConfig config;
    std::vector<AdversarialRecord> records;  // successful attacks only
    std::vector<ClassCounts> per_class;      // indexed by class index
    std::vector<std::string> warnings;
    Tensor patch;
    double patch_initial_objective = 0.0;
    double patch_final_objective = 0.0;
    std::vector<std::vector<double>> square_traces;  // accepted margins, parallel to records (empty for non-Square)

    int count(int class_index) const { return per_class.at(static_cast<std::size_t>(class_index)).succeeded; }
};

// Attacks every clean-correct image of every source set with every class of
// the taxonomy and keeps the successes. `patch_train` supplies the images
// the universal patch is optimized on. Per-item seeds are
// derive_seed(seed, {class_index, source_id}).
AttackPool generate_pool(const ModelCheckpoint& victim, std::span<const LabeledDataset> sources,
                         const LabeledDataset& patch_train, const PoolConfig& config);

// The base-taxonomy view of an expanded pool. Class indices and per-item
// seeds are shared, so this equals generate_pool with expanded = false and
// the same config.
AttackPool restrict_to_base(const AttackPool& expanded);

// Layout: <dir>/pool.json and <dir>/records/{split}/{class_index}/{source_id}.bin,
// where each blob stacks [x, x', delta] into a 3 x H x W x C tensor.
void save_pool(const AttackPool& pool, const std::filesystem::path& dir);
// Verifies every record blob against its recorded hash; throws IntegrityError.
AttackPool load_pool(const std::filesystem::path& dir);

std::string record_path(const AdversarialRecord& r);

}  // namespace afp
