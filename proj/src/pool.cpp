#include "afp/pool.hpp"

#include "afp/errors.hpp"
#include "afp/parallel.hpp"
#include "afp/rng.hpp"
#include "afp/serialize.hpp"

#include <json.hpp>

#include <algorithm>
#include <fstream>

namespace afp {

namespace {

using nlohmann::json;

struct WorkItem {
    int class_index = 0;
    int source = 0;
    std::vector<int> rows;
};

struct ItemResult {
    int attempted = 0;
    std::vector<AdversarialRecord> records;
    std::vector<std::vector<double>> traces;
};

ItemResult run_item(const ModelCheckpoint& victim, const LabeledDataset& src, const AttackClass& cls,
                    const WorkItem& item, const PoolConfig& cfg, const Tensor& patch) {
    const Tensor batch = gather_rows(src.images, item.rows);
    std::vector<int> labels;
    std::vector<std::uint64_t> seeds;
    for (int r : item.rows) {
        labels.push_back(src.labels[static_cast<std::size_t>(r)]);
        seeds.push_back(derive_seed(cfg.seed, {static_cast<std::uint64_t>(cls.index), src.ids[static_cast<std::size_t>(r)]}));
    }
    const auto n = static_cast<int>(item.rows.size());

    Tensor adv;
    std::vector<long> work(static_cast<std::size_t>(n), 0);
    std::vector<std::vector<double>> traces(static_cast<std::size_t>(n));
    switch (cls.algorithm) {
        case Algorithm::Fgsm:
            adv = fgsm_batch(victim, batch, labels, *cls.eps);
            std::fill(work.begin(), work.end(), 1);
            break;
        case Algorithm::Pgd: {
            PgdConfig pc;
            pc.norm = cls.norm;
            pc.eps = *cls.eps;
            pc.steps = cfg.preset.pgd_steps;
            adv = pgd_batch(victim, batch, labels, pc);
            std::fill(work.begin(), work.end(), pc.steps);
            break;
        }
        case Algorithm::Square: {
            VictimOracle oracle(victim);
            SquareConfig sc;
            sc.eps = *cls.eps;
            sc.query_budget = cfg.preset.square_budget;
            auto res = square_attack_batch(oracle, batch, labels, sc, seeds);
            std::vector<Tensor> imgs;
            for (int i = 0; i < n; ++i) {
                auto& r = res[static_cast<std::size_t>(i)];
                imgs.push_back(std::move(r.attacked));
                work[static_cast<std::size_t>(i)] = r.queries;
                traces[static_cast<std::size_t>(i)] = std::move(r.accepted_margins);
            }
            adv = stack(imgs);
            break;
        }
        case Algorithm::Patch: {
            std::vector<Tensor> imgs;
            for (int i = 0; i < n; ++i) {
                const auto at = patch_location(batch.dim(1), batch.dim(2), patch.dim(0), seeds[static_cast<std::size_t>(i)]);
                imgs.push_back(paste_patch(batch.sample(i), patch, at));
            }
            adv = stack(imgs);
            break;
        }
    }

    std::vector<Tensor> attacked(static_cast<std::size_t>(n));
    std::vector<Tensor> deltas(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        canonicalize(batch.sample(i), adv.sample(i), attacked[static_cast<std::size_t>(i)], deltas[static_cast<std::size_t>(i)]);
    }
    const auto after = argmax_rows(forward(victim, stack(attacked)));

    ItemResult out;
    out.attempted = n;
    for (int i = 0; i < n; ++i) {
        const auto k = static_cast<std::size_t>(i);
        // clean predictions were checked when the rows were selected
        const int before = labels[k];
        if (!attack_succeeded(cls, labels[k], before, after[k], cfg.patch.target)) continue;
        AdversarialRecord r;
        r.source_id = src.ids[static_cast<std::size_t>(item.rows[k])];
        r.split = src.split;
        r.true_label = labels[k];
        r.attack = cls;
        r.benign = batch.sample(i);
        r.attacked = std::move(attacked[k]);
        r.delta = std::move(deltas[k]);
        r.success = true;
        r.label_before = before;
        r.label_after = after[k];
        r.work = work[k];
        r.seed = seeds[k];
        out.records.push_back(std::move(r));
        out.traces.push_back(std::move(traces[k]));
    }
    return out;
}

json preset_json(const AttackPreset& p) {
    return {{"name", p.name},           {"linf_eps", p.linf_eps},     {"l2_eps", p.l2_eps},
            {"l2_extra_eps", p.l2_extra_eps}, {"pgd_steps", p.pgd_steps}, {"square_budget", p.square_budget}};
}

AttackPreset preset_from_json(const json& j) {
    AttackPreset p;
    p.name = j.at("name").get<std::string>();
    p.linf_eps = j.at("linf_eps").get<std::vector<double>>();
    p.l2_eps = j.at("l2_eps").get<std::vector<double>>();
    p.l2_extra_eps = j.at("l2_extra_eps").get<std::vector<double>>();
    p.pgd_steps = j.at("pgd_steps").get<int>();
    p.square_budget = j.at("square_budget").get<int>();
    return p;
}

std::string read_artifact(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IntegrityError("missing artifact " + path.string());
    return {std::istreambuf_iterator<char>(in), {}};
}

void warn_empty_classes(AttackPool& pool, const Taxonomy& tax) {
    for (const auto& cls : tax.classes()) {
        if (pool.count(cls.index) == 0) {
            pool.warnings.push_back("class " + std::to_string(cls.index) + " (" + cls.name() + ") has no successful attacks");
        }
    }
}

}  // namespace

AttackPool generate_pool(const ModelCheckpoint& victim, std::span<const LabeledDataset> sources,
                         const LabeledDataset& patch_train, const PoolConfig& config) {
    if (config.chunk < 1) throw InvalidInput("pool chunk size must be >= 1");
    const Taxonomy tax = config.taxonomy();
    AttackPool pool;
    pool.taxonomy_version = tax.version();
    pool.config = config;
    pool.per_class.assign(static_cast<std::size_t>(tax.size()), {});

    // clean-correct rows of every source set
    std::vector<std::vector<int>> eligible;
    for (const auto& src : sources) {
        src.validate();
        const auto preds = argmax_rows(forward_chunked(victim, src.images));
        std::vector<int> rows;
        for (int i = 0; i < src.size(); ++i) {
            if (preds[static_cast<std::size_t>(i)] == src.labels[static_cast<std::size_t>(i)]) rows.push_back(i);
        }
        eligible.push_back(std::move(rows));
    }

    const bool has_patch = tax.index_of(Algorithm::Patch, Norm::None, std::nullopt) >= 0;
    if (has_patch) {
        PatchConfig pc = config.patch;
        pc.seed = derive_seed(config.seed, {0x70a7c4});
        pool.config.patch.seed = pc.seed;
        const auto trained = patch_attack_train(victim, patch_train.images, pc);
        pool.patch = trained.patch;
        pool.patch_initial_objective = trained.initial_objective;
        pool.patch_final_objective = trained.final_objective;
    }

    std::vector<WorkItem> items;
    for (const auto& cls : tax.classes()) {
        for (std::size_t s = 0; s < sources.size(); ++s) {
            std::vector<int> rows;
            for (int r : eligible[s]) {
                if (cls.algorithm == Algorithm::Patch && sources[s].labels[static_cast<std::size_t>(r)] == config.patch.target) {
                    continue;
                }
                rows.push_back(r);
            }
            for (std::size_t b = 0; b < rows.size(); b += static_cast<std::size_t>(config.chunk)) {
                const auto e = std::min(rows.size(), b + static_cast<std::size_t>(config.chunk));
                items.push_back({cls.index, static_cast<int>(s), {rows.begin() + static_cast<std::ptrdiff_t>(b),
                                                                   rows.begin() + static_cast<std::ptrdiff_t>(e)}});
            }
        }
    }

    std::vector<ItemResult> results(items.size());
    parallel_for(static_cast<int>(items.size()), config.jobs, [&](int i) {
        const auto& it = items[static_cast<std::size_t>(i)];
        results[static_cast<std::size_t>(i)] =
            run_item(victim, sources[static_cast<std::size_t>(it.source)], tax.at(it.class_index), it, config, pool.patch);
    });

    for (std::size_t i = 0; i < items.size(); ++i) {
        auto& counts = pool.per_class[static_cast<std::size_t>(items[i].class_index)];
        counts.attempted += results[i].attempted;
        counts.succeeded += static_cast<int>(results[i].records.size());
        for (auto& r : results[i].records) pool.records.push_back(std::move(r));
        for (auto& t : results[i].traces) pool.square_traces.push_back(std::move(t));
    }
    warn_empty_classes(pool, tax);
    return pool;
}

AttackPool restrict_to_base(const AttackPool& expanded) {
    if (!expanded.config.expanded) throw InvalidInput("restrict_to_base needs an expanded pool");
    AttackPool out;
    out.config = expanded.config;
    out.config.expanded = false;
    const Taxonomy tax = out.config.taxonomy();
    out.taxonomy_version = tax.version();
    out.per_class.assign(expanded.per_class.begin(), expanded.per_class.begin() + tax.size());
    for (std::size_t i = 0; i < expanded.records.size(); ++i) {
        if (expanded.records[i].attack.index >= tax.size()) continue;
        out.records.push_back(expanded.records[i]);
        out.square_traces.push_back(expanded.square_traces.at(i));
    }
    warn_empty_classes(out, tax);
    out.patch = expanded.patch;
    out.patch_initial_objective = expanded.patch_initial_objective;
    out.patch_final_objective = expanded.patch_final_objective;
    return out;
}

std::string record_path(const AdversarialRecord& r) {
    return "records/" + to_string(r.split) + "/" + std::to_string(r.attack.index) + "/" + std::to_string(r.source_id) +
           ".bin";
}

void save_pool(const AttackPool& pool, const std::filesystem::path& dir) {
    const Taxonomy tax = pool.config.taxonomy();
    json j;
    j["format"] = "afp-pool";
    j["version"] = 1;
    j["taxonomy_version"] = pool.taxonomy_version;
    j["seed"] = pool.config.seed;
    j["expanded"] = pool.config.expanded;
    j["preset"] = preset_json(pool.config.preset);
    const auto& pc = pool.config.patch;
    j["patch"] = {{"target", pc.target},
                  {"side", pool.patch.empty() ? 0 : pool.patch.dim(0)},
                  {"iters", pc.iters},
                  {"learning_rate", pc.learning_rate},
                  {"batch_size", pc.batch_size},
                  {"seed", pc.seed},
                  {"initial_objective", pool.patch_initial_objective},
                  {"final_objective", pool.patch_final_objective}};
    if (!pool.patch.empty()) {
        const auto bytes = encode_blob(pool.patch);
        write_file(dir / "patch.bin", bytes);
        j["patch"]["file"] = "patch.bin";
        j["patch"]["sha256"] = sha256_bytes(bytes);
    }
    json classes = json::array();
    for (const auto& c : tax.classes()) {
        const auto& cnt = pool.per_class.at(static_cast<std::size_t>(c.index));
        classes.push_back({{"index", c.index},
                           {"name", c.name()},
                           {"algorithm", to_string(c.algorithm)},
                           {"norm", to_string(c.norm)},
                           {"eps", c.eps ? json(*c.eps) : json(nullptr)},
                           {"attempted", cnt.attempted},
                           {"succeeded", cnt.succeeded}});
    }
    j["classes"] = classes;
    j["warnings"] = pool.warnings;
    j["record_count"] = pool.records.size();
    json recs = json::array();
    for (const auto& r : pool.records) {
        const Tensor parts[] = {r.benign, r.attacked, r.delta};
        const auto bytes = encode_blob(stack(parts));
        const auto rel = record_path(r);
        write_file(dir / rel, bytes);
        recs.push_back({{"file", rel},
                        {"sha256", sha256_bytes(bytes)},
                        {"source_id", r.source_id},
                        {"split", to_string(r.split)},
                        {"class_index", r.attack.index},
                        {"true_label", r.true_label},
                        {"label_before", r.label_before},
                        {"label_after", r.label_after},
                        {"work", r.work},
                        {"seed", r.seed}});
    }
    j["records"] = recs;
    write_file(dir / "pool.json", j.dump(1) + "\n");
}

AttackPool load_pool(const std::filesystem::path& dir) {
    json j;
    try {
        j = json::parse(read_artifact(dir / "pool.json"));
    } catch (const json::exception& e) {
        throw FormatError((dir / "pool.json").string() + ": " + e.what());
    }
    try {
        if (j.at("format") != "afp-pool" || j.at("version") != 1) throw FormatError("unsupported pool manifest");
        AttackPool pool;
        pool.taxonomy_version = j.at("taxonomy_version").get<std::string>();
        pool.config.seed = j.at("seed").get<std::uint64_t>();
        pool.config.expanded = j.at("expanded").get<bool>();
        pool.config.preset = preset_from_json(j.at("preset"));
        const auto& pj = j.at("patch");
        pool.config.patch.target = pj.at("target").get<int>();
        pool.config.patch.side = pj.at("side").get<int>();
        pool.config.patch.iters = pj.at("iters").get<int>();
        pool.config.patch.learning_rate = pj.at("learning_rate").get<double>();
        pool.config.patch.batch_size = pj.at("batch_size").get<int>();
        pool.config.patch.seed = pj.at("seed").get<std::uint64_t>();
        pool.patch_initial_objective = pj.at("initial_objective").get<double>();
        pool.patch_final_objective = pj.at("final_objective").get<double>();
        if (pj.contains("file")) {
            const auto bytes = read_artifact(dir / pj.at("file").get<std::string>());
            if (sha256_bytes(bytes) != pj.at("sha256").get<std::string>()) throw IntegrityError("patch.bin hash mismatch");
            pool.patch = decode_blob(bytes, "patch.bin");
        }
        const Taxonomy tax = pool.config.taxonomy();
        if (tax.version() != pool.taxonomy_version) throw FormatError("taxonomy version does not match preset");
        for (const auto& c : j.at("classes")) {
            pool.per_class.push_back({c.at("attempted").get<int>(), c.at("succeeded").get<int>()});
        }
        pool.warnings = j.at("warnings").get<std::vector<std::string>>();
        for (const auto& rj : j.at("records")) {
            const auto rel = rj.at("file").get<std::string>();
            const auto bytes = read_artifact(dir / rel);
            if (sha256_bytes(bytes) != rj.at("sha256").get<std::string>()) throw IntegrityError(rel + ": hash mismatch");
            const Tensor t = decode_blob(bytes, rel);
            if (t.rank() != 4 || t.dim(0) != 3) throw FormatError(rel + ": expected a 3 x H x W x C record blob");
            AdversarialRecord r;
            r.source_id = rj.at("source_id").get<std::uint64_t>();
            r.split = parse_split(rj.at("split").get<std::string>());
            r.attack = tax.at(rj.at("class_index").get<int>());
            r.true_label = rj.at("true_label").get<int>();
            r.label_before = rj.at("label_before").get<int>();
            r.label_after = rj.at("label_after").get<int>();
            r.work = rj.at("work").get<long>();
            r.seed = rj.at("seed").get<std::uint64_t>();
            r.success = true;
            r.benign = t.sample(0);
            r.attacked = t.sample(1);
            r.delta = t.sample(2);
            pool.records.push_back(std::move(r));
            pool.square_traces.emplace_back();
        }
        return pool;
    } catch (const json::exception& e) {
        throw FormatError((dir / "pool.json").string() + ": " + e.what());
    }
}

}  // namespace afp
