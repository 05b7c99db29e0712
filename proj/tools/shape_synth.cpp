// shape-synth command-line entry point.
//
//   shape-synth sample   --spec S --survey F --mode stratified|region ... --output OUT.csv
//   shape-synth run      --config C [--seed N] [--threads N] [--scale county|tract] [--output-dir D]
//   shape-synth evaluate --estimates E --reference R --output-dir D
//   shape-synth rank     --input GRID.csv [--threshold 0.8] [--moderate X] --output-dir D
//
// Exit codes: 0 ok, 2 schema/usage, 3 data/infeasible, 4 internal.

#include "shapesynth/shapesynth.hpp"

#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <functional>
#include <iomanip>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using namespace shapesynth;

namespace {

int report(const std::string &message, ExitCode code, RunManifest *manifest, const std::optional<fs::path> &at) {
    std::cerr << "shape-synth: error: " << message << '\n';
    if (manifest != nullptr && at) {
        manifest->fail(message, code);
        try {
            manifest->write(*at);
        } catch (const std::exception &e) {
            std::cerr << "shape-synth: could not write manifest: " << e.what() << '\n';
        }
    }
    return static_cast<int>(code);
}

/// Runs `body`, mapping exceptions to exit codes and recording failures in the manifest.
int guarded(RunManifest &manifest, std::optional<fs::path> &manifest_path, const std::function<void()> &body) {
    try {
        body();
        return 0;
    } catch (const Error &e) {
        return report(e.what(), e.exit_code(), &manifest, manifest_path);
    } catch (const nlohmann::json::exception &e) {
        return report(e.what(), ExitCode::usage, &manifest, manifest_path);
    } catch (const fs::filesystem_error &e) {
        return report(e.what(), ExitCode::usage, &manifest, manifest_path);
    } catch (const std::exception &e) {
        return report(e.what(), ExitCode::internal, &manifest, manifest_path);
    }
}

void print_warnings(const RunManifest &manifest) {
    for (const auto &w : manifest.json().at("warnings")) {
        std::cerr << "shape-synth: warning: " << w.get<std::string>() << '\n';
    }
}

struct SampleArgs {
    std::string spec, survey, mode = "stratified", region, region_column = "state", output;
    std::vector<std::string> strata;
    std::size_t target_n = 0;
    std::uint64_t seed = 0;
};

int cmd_sample(const SampleArgs &a) {
    RunManifest manifest("sample");
    std::optional<fs::path> at = fs::path(a.output + ".manifest.json");
    return guarded(manifest, at, [&] {
        manifest.set_seed(a.seed);
        manifest.options()["mode"] = a.mode;
        const fs::path out(a.output);
        auto spec = manifest.stage("load", [&] {
            manifest.add_input("recode_spec", a.spec);
            manifest.add_input("survey", a.survey);
            return load_recode_spec(a.spec);
        });
        auto loaded = manifest.stage("harmonize", [&] { return load_survey(a.survey, spec); });
        manifest.warn_all(loaded.warnings);
        SurveyTable sampled = manifest.stage("sample", [&] {
            if (a.mode == "stratified") {
                if (a.target_n == 0) {
                    throw SchemaError("--target-n is required for --mode stratified");
                }
                std::vector<std::string> strata = a.strata;
                if (strata.empty()) {
                    for (const auto &v : spec.variables) {
                        strata.push_back(v.name);
                    }
                }
                manifest.options()["strata"] = strata;
                manifest.options()["target_n"] = a.target_n;
                return stratified_sample(loaded.table, strata, a.target_n, a.seed);
            }
            if (a.mode == "region") {
                if (a.region.empty()) {
                    throw SchemaError("--region is required for --mode region");
                }
                manifest.options()["region"] = a.region;
                manifest.options()["region_column"] = a.region_column;
                return filter_by_region(loaded.table, a.region_column, a.region);
            }
            throw SchemaError("unknown --mode '" + a.mode + "' (expected stratified or region)");
        });
        manifest.stage("write", [&] {
            manifest.emit(out.parent_path(), out.filename().string(), survey_to_csv(sampled));
        });
        manifest.options()["records_in"] = loaded.table.size();
        manifest.options()["records_dropped"] = loaded.dropped;
        manifest.options()["records_out"] = sampled.size();
        manifest.succeed();
        manifest.write(*at);
        print_warnings(manifest);
        std::cout << sampled.size() << " records written to " << out.string() << '\n';
    });
}

struct RunArgs {
    std::string config, scale, output_dir;
    std::optional<std::uint64_t> seed;
    std::optional<unsigned> threads;
};

int cmd_run(const RunArgs &a) {
    RunManifest manifest("run");
    std::optional<fs::path> at;
    if (!a.output_dir.empty()) {
        at = fs::path(a.output_dir) / "manifest.json";
    }
    return guarded(manifest, at, [&] {
        manifest.set_config(a.config);
        auto cfg = load_pipeline_config(a.config);
        if (a.seed) {
            cfg.seed = *a.seed;
        }
        if (a.threads) {
            cfg.threads = *a.threads;
        }
        if (!a.scale.empty()) {
            cfg.scale = a.scale;
        }
        if (!a.output_dir.empty()) {
            cfg.output_dir = a.output_dir;
        }
        at = cfg.output_dir / "manifest.json";
        const auto result = run_shape(cfg, manifest);
        manifest.write(*at);
        print_warnings(manifest);
        std::cout << "level 1: " << result.level1.counts.size() << " zones, level 2: "
                  << result.level2.counts.size() << " zones; outputs in " << cfg.output_dir.string() << '\n';
    });
}

struct EvaluateArgs {
    std::string estimates, reference, output_dir;
};

int cmd_evaluate(const EvaluateArgs &a) {
    RunManifest manifest("evaluate");
    std::optional<fs::path> at = fs::path(a.output_dir) / "manifest.json";
    return guarded(manifest, at, [&] {
        auto [est, ref] = manifest.stage("load", [&] {
            manifest.add_input("estimates", a.estimates);
            manifest.add_input("reference", a.reference);
            return std::pair{parse_estimates(csv::read(a.estimates)), parse_reference(csv::read(a.reference))};
        });
        if (est.empty()) {
            throw SchemaError(a.estimates + ": no rows");
        }
        auto metrics = manifest.stage("evaluate", [&] { return evaluate(est, ref); });
        manifest.warn_all(metrics.warnings);
        manifest.stage("write", [&] { manifest.emit(a.output_dir, "metrics.csv", metrics_to_csv(metrics)); });
        manifest.succeed();
        manifest.write(*at);
        print_warnings(manifest);
        std::cout << metrics.records.size() << " metric records written to " << a.output_dir << '\n';
    });
}

struct RankArgs {
    std::string input, output_dir, missing = "error";
    double threshold = 0.8;
    std::optional<double> moderate;
};

int cmd_rank(const RankArgs &a) {
    RunManifest manifest("rank");
    std::optional<fs::path> at = fs::path(a.output_dir) / "manifest.json";
    return guarded(manifest, at, [&] {
        manifest.options()["threshold"] = a.threshold;
        if (a.missing != "error" && a.missing != "skip") {
            throw SchemaError("--missing must be 'error' or 'skip'");
        }
        const auto policy = a.missing == "skip" ? MissingPolicy::skip : MissingPolicy::error;
        auto report = manifest.stage("score", [&] {
            manifest.add_input("input", a.input);
            const auto table = csv::read(a.input);
            if (table.rows.empty()) {
                throw SchemaError(a.input + ": no rows");
            }
            // A deviation grid is scored as given; a metrics grid is standardized first.
            if (table.find("r_dev")) {
                manifest.options()["input_kind"] = "deviations";
                return composite_from_deviations(parse_deviations(table), policy);
            }
            manifest.options()["input_kind"] = "metrics";
            return composite_scores(parse_metrics(table), {policy, std::nullopt, std::nullopt});
        });
        manifest.warn_all(report.warnings);
        const auto ranking = rank_models(report, a.threshold, a.moderate);
        manifest.options()["moderate"] = ranking.moderate;
        if (report.means) {
            manifest.options()["means"] = {
                {"r", report.means->r}, {"mae_std", report.means->mae_std}, {"ci", report.means->ci}};
        }
        if (report.mae_range) {
            manifest.options()["mae_min"] = report.mae_range->first;
            manifest.options()["mae_max"] = report.mae_range->second;
        }
        manifest.stage("write", [&] {
            manifest.emit(a.output_dir, "deviations.csv", deviations_to_csv(report));
            manifest.emit(a.output_dir, "ranking.csv", ranking_to_csv(ranking));
        });
        manifest.succeed();
        manifest.write(*at);
        print_warnings(manifest);
        for (const auto &row : ranking.rows) {
            std::cout << row.model << '\t' << row.rank << '\t' << row.outcome << '\t'
                      << std::fixed << std::setprecision(3) << row.composite << '\t' << to_string(row.tier) << '\n';
        }
    });
}

} // namespace

int main(int argc, char **argv) {
    CLI::App app{"shape-synth: hierarchical IPF spatial microsimulation"};
    app.require_subcommand(1);
    app.set_version_flag("--version", std::string(kToolVersion));

    SampleArgs sample;
    auto *s = app.add_subcommand("sample", "Draw a stratified or region-filtered survey sample");
    s->add_option("--spec", sample.spec, "Recode spec (JSON)")->required()->check(CLI::ExistingFile);
    s->add_option("--survey", sample.survey, "Raw survey CSV")->required()->check(CLI::ExistingFile);
    s->add_option("--mode", sample.mode, "stratified | region")->capture_default_str();
    s->add_option("--strata", sample.strata, "Stratification variables (default: all)")->delimiter(',');
    s->add_option("--target-n", sample.target_n, "Target sample size (stratified)");
    s->add_option("--region", sample.region, "Region value to keep (region)");
    s->add_option("--region-column", sample.region_column, "Carried column holding the region")->capture_default_str();
    s->add_option("--seed", sample.seed, "Master seed")->capture_default_str();
    s->add_option("--output", sample.output, "Sampled survey CSV")->required();

    RunArgs run;
    auto *r = app.add_subcommand("run", "Run both levels of the pipeline");
    r->add_option("--config", run.config, "Pipeline config (JSON)")->required()->check(CLI::ExistingFile);
    r->add_option("--seed", run.seed, "Override the config seed");
    r->add_option("--threads", run.threads, "Worker threads (0 = all cores)");
    r->add_option("--scale", run.scale, "Override the config scale");
    r->add_option("--output-dir", run.output_dir, "Override the config output directory");

    EvaluateArgs ev;
    auto *e = app.add_subcommand("evaluate", "Compare estimates against reference estimates");
    e->add_option("--estimates", ev.estimates, "model,region,zone_id,outcome,estimate")
        ->required()
        ->check(CLI::ExistingFile);
    e->add_option("--reference", ev.reference, "region,zone_id,outcome,estimate[,ci_low,ci_high]")
        ->required()
        ->check(CLI::ExistingFile);
    e->add_option("--output-dir", ev.output_dir, "Where metrics.csv goes")->required();

    RankArgs rank;
    auto *k = app.add_subcommand("rank", "Composite scores and reliability tiers");
    k->add_option("--input", rank.input, "Metrics or deviation grid CSV")->required()->check(CLI::ExistingFile);
    k->add_option("--threshold", rank.threshold, "Composite needed for the reliable tier")->capture_default_str();
    k->add_option("--moderate", rank.moderate, "Cutoff for the moderate tier (default: mean composite)");
    k->add_option("--missing", rank.missing, "Incomplete grid: error | skip")->capture_default_str();
    k->add_option("--output-dir", rank.output_dir, "Where deviations.csv and ranking.csv go")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError &err) {
        const int code = app.exit(err);
        return code == 0 ? 0 : static_cast<int>(ExitCode::usage);
    }

    if (*s) {
        return cmd_sample(sample);
    }
    if (*r) {
        return cmd_run(run);
    }
    if (*e) {
        return cmd_evaluate(ev);
    }
    return cmd_rank(rank);
}
