// afp: command-line driver for the attack-fingerprint pipeline.
#include "afp/errors.hpp"
#include "afp/pipeline.hpp"

#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

using namespace afp;

namespace {

struct Globals {
    std::string config_file;
    std::vector<std::string> sets;
    std::string output_dir;
    std::string seed;
    int jobs = 0;
};

struct ConditionArgs {
    std::string method;
    int quality = 75;
    std::vector<std::string> conditions;
    bool expanded = false;
};

RunConfig build_config(const Globals& g) {
    RunConfig cfg;
    if (!g.config_file.empty()) cfg.load_file(g.config_file);
    if (const char* env = std::getenv("AFP_OUTPUT_DIR"); env && *env) cfg.set("output_dir", env);
    for (const auto& s : g.sets) cfg.set_assignment(s);
    if (!g.output_dir.empty()) cfg.set("output_dir", g.output_dir);
    if (!g.seed.empty()) cfg.set("seed", g.seed);
    if (g.jobs > 0) cfg.set("jobs", std::to_string(g.jobs));
    // Surface bad values before any work starts.
    (void)cfg.to_json();
    return cfg;
}

std::vector<Condition> resolve_conditions(const ConditionArgs& a) {
    std::vector<Condition> out;
    if (!a.method.empty()) {
        Condition c = Condition::parse(a.method);
        if (c.method == FingerprintMethod::Jpeg) c.jpeg_quality = a.quality;
        if (c.jpeg_quality < 1 || c.jpeg_quality > 100) throw ConfigError("--quality must lie in [1, 100]");
        out.push_back(c);
    }
    for (const auto& name : a.conditions) {
        if (name == "all") {
            for (const auto& c : report_conditions()) out.push_back(c);
        } else {
            out.push_back(Condition::parse(name));
        }
    }
    if (out.empty()) throw ConfigError("choose a fingerprint with --method or --condition");
    return out;
}

void add_condition_options(CLI::App* sub, ConditionArgs& a) {
    sub->add_option("--method", a.method, "true-delta, raw-image, jpeg or cs");
    sub->add_option("--quality", a.quality, "JPEG quality for --method jpeg")->check(CLI::Range(1, 100));
    sub->add_option("--condition", a.conditions, "condition name (jpeg-q25, cs, ...) or 'all'; repeatable");
    sub->add_flag("--expanded-eps", a.expanded, "use the 21-class taxonomy");
}

void run_all(const RunConfig& cfg, bool expanded) {
    stage_train_victim(cfg);
    std::vector<bool> tags = {false};
    if (expanded) tags.insert(tags.begin(), true);  // the base pool derives from it
    for (bool e : tags) stage_generate(cfg, e);
    for (bool e : tags) {
        for (const auto& c : report_conditions()) {
            stage_fingerprint(cfg, c, e);
            stage_build_splits(cfg, c, e);
            stage_train_attributor(cfg, c, e);
            stage_evaluate(cfg, c, e);
        }
        stage_analyze(cfg, e);
    }
    stage_report(cfg);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Attack-fingerprint attribution pipeline", "afp"};
    app.set_version_flag("--version", kToolVersion);
    app.require_subcommand(1);
    app.fallthrough();

    Globals g;
    app.add_option("--config", g.config_file, "key = value config file");
    app.add_option("--set", g.sets, "override one config key (key=value); repeatable");
    app.add_option("--output-dir", g.output_dir, "output directory (else AFP_OUTPUT_DIR, else config)");
    app.add_option("--seed", g.seed, "global seed");
    app.add_option("--jobs", g.jobs, "worker cap")->check(CLI::PositiveNumber);

    auto* train_victim = app.add_subcommand("train-victim", "train the victim classifier");

    bool gen_expanded = false;
    auto* generate = app.add_subcommand("generate", "attack the source images and store the pool");
    generate->add_flag("--expanded-eps", gen_expanded, "append the four extra L2 eps classes (21 classes)");

    ConditionArgs fp_args, split_args, train_args, eval_args;
    int train_reps = 0, eval_reps = 0;
    auto* fingerprint = app.add_subcommand("fingerprint", "extract fingerprints from the pool");
    add_condition_options(fingerprint, fp_args);
    auto* build_splits = app.add_subcommand("build-splits", "split fingerprints by source image");
    add_condition_options(build_splits, split_args);
    auto* train_attr = app.add_subcommand("train-attributor", "train attributor replicates");
    add_condition_options(train_attr, train_args);
    train_attr->add_option("--replicates", train_reps, "replicate count (default 4)")->check(CLI::PositiveNumber);
    auto* evaluate = app.add_subcommand("evaluate", "evaluate attributor replicates on the test split");
    add_condition_options(evaluate, eval_args);
    evaluate->add_option("--replicates", eval_reps, "replicate count (default 4)")->check(CLI::PositiveNumber);

    bool an_expanded = false;
    auto* analyze = app.add_subcommand("analyze", "MSE/SSIM scatter and victim label distribution");
    analyze->add_flag("--expanded-eps", an_expanded, "analyze the 21-class pool");

    auto* report = app.add_subcommand("report", "combined accuracy table");
    auto* verify = app.add_subcommand("verify", "re-hash every artifact in the manifest");

    bool run_expanded = false;
    auto* run = app.add_subcommand("run", "every stage in order");
    run->add_flag("--expanded-eps", run_expanded, "also run the 21-class taxonomy");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        RunConfig cfg = build_config(g);
        if (*train_victim) {
            stage_train_victim(cfg);
        } else if (*generate) {
            stage_generate(cfg, gen_expanded);
        } else if (*fingerprint) {
            for (const auto& c : resolve_conditions(fp_args)) stage_fingerprint(cfg, c, fp_args.expanded);
        } else if (*build_splits) {
            for (const auto& c : resolve_conditions(split_args)) stage_build_splits(cfg, c, split_args.expanded);
        } else if (*train_attr) {
            if (train_reps > 0) cfg.set("attributor.replicates", std::to_string(train_reps));
            for (const auto& c : resolve_conditions(train_args)) stage_train_attributor(cfg, c, train_args.expanded);
        } else if (*evaluate) {
            if (eval_reps > 0) cfg.set("attributor.replicates", std::to_string(eval_reps));
            for (const auto& c : resolve_conditions(eval_args)) stage_evaluate(cfg, c, eval_args.expanded);
        } else if (*analyze) {
            stage_analyze(cfg, an_expanded);
        } else if (*report) {
            stage_report(cfg);
        } else if (*verify) {
            if (!std::filesystem::exists(cfg.output_dir() / "manifest.json"))
                throw ConfigError("no manifest in " + cfg.output_dir().string());
            const auto m = Manifest::open(cfg.output_dir());
            const auto problems = m.verify();
            for (const auto& p : problems) std::cerr << "verify: " << p << "\n";
            std::size_t n = 0;
            for (const auto& [stage, files] : m.artifact_hashes()) n += files.size();
            if (!problems.empty()) return 3;
            std::cout << "verified " << n << " artifacts\n";
        } else if (*run) {
            run_all(cfg, run_expanded);
        }
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const InvalidInput& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const IntegrityError& e) {
        std::cerr << "integrity error: " << e.what() << "\n";
        return 3;
    } catch (const FormatError& e) {
        std::cerr << "integrity error: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
