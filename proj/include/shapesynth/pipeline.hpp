#pragma once

// Two-level workflow: demographics -> behavior prevalences -> (demographics + behaviors) ->
// outcome prevalences, with aggregation of synthetic agents back to zones.

#include "shapesynth/csv.hpp"
#include "shapesynth/error.hpp"
#include "shapesynth/harmonize.hpp"
#include "shapesynth/ipf.hpp"
#include "shapesynth/manifest.hpp"
#include "shapesynth/parallel.hpp"
#include "shapesynth/rng.hpp"
#include "shapesynth/synthpop.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

namespace shapesynth {

struct PrevalenceRow {
    std::string zone_id;
    std::string variable;
    double prevalence = 0.0; // percent
    std::int64_t numerator = 0;
    std::int64_t denominator = 0;

    friend bool operator==(const PrevalenceRow &, const PrevalenceRow &) = default;
};

/// One row per (zone, variable), zones in id order, variables in the requested order.
struct PrevalenceTable {
    std::vector<PrevalenceRow> rows;
    std::vector<std::string> warnings;

    [[nodiscard]] std::optional<double> lookup(std::string_view zone, std::string_view variable) const {
        for (const auto &r : rows) {
            if (r.zone_id == zone && r.variable == variable) {
                return r.prevalence;
            }
        }
        return std::nullopt;
    }

    [[nodiscard]] std::vector<std::string> zone_ids() const {
        std::vector<std::string> out;
        for (const auto &r : rows) {
            if (out.empty() || out.back() != r.zone_id) {
                out.push_back(r.zone_id);
            }
        }
        return out;
    }
};

namespace detail {

inline std::vector<std::size_t> attribute_positions(const SurveyTable &survey, const std::vector<std::string> &names) {
    std::vector<std::size_t> out;
    for (const auto &name : names) {
        auto a = survey.attribute_index(name);
        if (!a) {
            throw SchemaError("attribute '" + name + "' is not linked in the survey");
        }
        out.push_back(*a);
    }
    return out;
}

inline void push_zone(PrevalenceTable &table, const std::string &zone, const std::vector<std::string> &variables,
                      std::int64_t denominator, const std::vector<std::int64_t> &numerators) {
    if (denominator == 0) {
        table.warnings.push_back("zone '" + zone + "' has no agents; excluded from prevalence");
        return;
    }
    for (std::size_t a = 0; a < variables.size(); ++a) {
        table.rows.push_back({zone, variables[a],
                              100.0 * static_cast<double>(numerators[a]) / static_cast<double>(denominator),
                              numerators[a], denominator});
    }
}

} // namespace detail

/// Percent of agents per zone with each attribute set.
inline PrevalenceTable aggregate_prevalence(const SyntheticPopulation &pop, const std::vector<std::string> &variables) {
    std::vector<std::size_t> pos;
    for (const auto &name : variables) {
        auto it = std::find(pop.attribute_names.begin(), pop.attribute_names.end(), name);
        if (it == pop.attribute_names.end()) {
            throw SchemaError("aggregate_prevalence: attribute '" + name + "' is not linked in the population");
        }
        pos.push_back(static_cast<std::size_t>(it - pop.attribute_names.begin()));
    }
    std::vector<std::int64_t> denominators(pop.zone_ids.size(), 0);
    std::vector<std::vector<std::int64_t>> numerators(pop.zone_ids.size(), std::vector<std::int64_t>(pos.size(), 0));
    for (std::size_t r = 0; r < pop.rows.size(); ++r) {
        const auto z = pop.rows[r].zone;
        ++denominators[z];
        for (std::size_t a = 0; a < pos.size(); ++a) {
            numerators[z][a] += pop.attribute(r, pos[a]);
        }
    }
    std::vector<std::size_t> order(pop.zone_ids.size());
    for (std::size_t z = 0; z < order.size(); ++z) {
        order[z] = z;
    }
    std::sort(order.begin(), order.end(), [&](auto a, auto b) { return pop.zone_ids[a] < pop.zone_ids[b]; });
    PrevalenceTable table;
    for (auto z : order) {
        detail::push_zone(table, pop.zone_ids[z], variables, denominators[z], numerators[z]);
    }
    return table;
}

/// Same result as expanding and aggregating, computed from counts without materializing agents.
inline PrevalenceTable aggregate_prevalence(std::span<const IntegerCounts> zones, const SurveyTable &survey,
                                            const std::vector<std::string> &variables) {
    const auto pos = detail::attribute_positions(survey, variables);
    std::vector<const IntegerCounts *> order;
    for (const auto &z : zones) {
        if (z.counts.size() != survey.size()) {
            throw JoinError("aggregate_prevalence: zone '" + z.zone_id + "' counts do not match the survey");
        }
        order.push_back(&z);
    }
    std::sort(order.begin(), order.end(), [](auto *a, auto *b) { return a->zone_id < b->zone_id; });
    PrevalenceTable table;
    for (const auto *z : order) {
        std::int64_t denominator = 0;
        std::vector<std::int64_t> numerators(pos.size(), 0);
        for (std::size_t i = 0; i < z->counts.size(); ++i) {
            denominator += z->counts[i];
            for (std::size_t a = 0; a < pos.size(); ++a) {
                numerators[a] += static_cast<std::int64_t>(z->counts[i]) * survey.attributes[pos[a]][i];
            }
        }
        detail::push_zone(table, z->zone_id, variables, denominator, numerators);
    }
    return table;
}

/// `zone_id,variable,prevalence,numerator,denominator`
inline std::string prevalence_to_csv(const PrevalenceTable &table) {
    csv::Writer w({"zone_id", "variable", "prevalence", "numerator", "denominator"});
    for (const auto &r : table.rows) {
        w.row({r.zone_id, r.variable, csv::format_double(r.prevalence), std::to_string(r.numerator),
               std::to_string(r.denominator)});
    }
    return w.text();
}

inline constexpr const char *kBehaviorYes = "yes";
inline constexpr const char *kBehaviorNo = "no";

/// Append a (yes, no) constraint per behavior with counts prevalence * N_z / 100 and the rest,
/// kept real-valued.
inline ConstraintTable derive_behavior_constraints(const PrevalenceTable &level1, const ConstraintTable &constraints,
                                                   const std::vector<std::string> &behaviors) {
    std::map<std::pair<std::string, std::string>, double> prevalence;
    for (const auto &r : level1.rows) {
        prevalence[{r.zone_id, r.variable}] = r.prevalence;
    }
    ConstraintTable out = constraints;
    for (const auto &b : behaviors) {
        for (const auto &v : out.variables) {
            if (v.name == b) {
                throw SchemaError("behavior '" + b + "' clashes with a constraint variable name");
            }
        }
        out.variables.push_back({b, {kBehaviorYes, kBehaviorNo}});
    }
    for (auto &zone : out.zones) {
        const double n_z = constraints.population(zone);
        for (const auto &b : behaviors) {
            auto it = prevalence.find({zone.id, b});
            if (it == prevalence.end()) {
                throw JoinError("derive_behavior_constraints: no level-1 '" + b + "' estimate for zone '" + zone.id +
                                "'");
            }
            const double yes = it->second * n_z / 100.0;
            zone.counts.push_back({yes, n_z - yes});
        }
    }
    return out;
}

/// Survey with each named attribute also exposed as a (yes, no) constraint variable, matching
/// derive_behavior_constraints.
inline SurveyTable with_attribute_constraints(const SurveyTable &survey, const std::vector<std::string> &behaviors) {
    SurveyTable out = survey;
    for (const auto &b : behaviors) {
        auto a = survey.attribute_index(b);
        if (!a) {
            throw SchemaError("behavior '" + b + "' is not an attribute of the survey");
        }
        if (out.variable_index(b)) {
            throw SchemaError("behavior '" + b + "' clashes with a constraint variable name");
        }
        out.variables.push_back({b, {kBehaviorYes, kBehaviorNo}});
        out.variable_columns.push_back(survey.attribute_columns[*a]);
        std::vector<std::uint16_t> codes(survey.size());
        for (std::size_t i = 0; i < survey.size(); ++i) {
            codes[i] = survey.attributes[*a][i] ? 0 : 1;
        }
        out.codes.push_back(std::move(codes));
    }
    return out;
}

struct LevelOptions {
    FitOptions fit;
    std::uint64_t seed = 0;
    unsigned threads = 0;
};

struct LevelResult {
    WeightField weights;
    std::vector<IntegerCounts> counts; // fitted zones only, in zone id order
    PrevalenceTable prevalence;
    std::vector<std::string> warnings;
};

/// Fit, integerise and aggregate one level. Zones that fail the fit are dropped with a warning;
/// if none remain the level fails.
inline LevelResult run_level(const SurveyTable &survey, const ConstraintTable &constraints,
                             const std::vector<std::string> &attributes, const LevelOptions &opts) {
    LevelResult out;
    out.weights = fit_all(survey, constraints, opts.fit, opts.threads);
    for (const auto &[zone, message] : out.weights.errors) {
        out.warnings.push_back("zone '" + zone + "' excluded: " + message);
    }
    std::vector<std::size_t> fitted;
    for (std::size_t z = 0; z < out.weights.zone_ids.size(); ++z) {
        if (out.weights.fits[z]) {
            fitted.push_back(z);
            for (const auto &w : out.weights.fits[z]->diagnostics.warnings) {
                out.warnings.push_back("zone '" + out.weights.zone_ids[z] + "': " + w);
            }
        }
    }
    if (fitted.empty()) {
        throw InfeasibleError("no zone could be fitted (first failure: " + out.weights.errors.begin()->second + ")");
    }
    out.counts.resize(fitted.size());
    parallel_for(fitted.size(), opts.threads, [&](std::size_t k) {
        const auto z = fitted[k];
        out.counts[k] = integerise_trs(out.weights.fits[z]->weights, opts.seed, out.weights.zone_ids[z]);
    });
    out.prevalence = aggregate_prevalence(out.counts, survey, attributes);
    out.warnings.insert(out.warnings.end(), out.prevalence.warnings.begin(), out.prevalence.warnings.end());
    return out;
}

/// Level 1: demographics only, yields behavior prevalences.
inline LevelResult run_level1(const SurveyTable &survey, const ConstraintTable &constraints,
                              const std::vector<std::string> &behaviors, const LevelOptions &opts) {
    return run_level(survey, constraints, behaviors, opts);
}

/// Master seed for level-2 integerisation; a separate stream family so the two levels'
/// sampling draws are not reused.
inline std::uint64_t level2_seed(std::uint64_t seed) { return rng::mix64(seed ^ 0x4c6576656c2d32ULL); }

/// Level 2: refit from w = 1 against demographics plus the level-1 behavior constraints, for
/// the zones level 1 produced.
inline LevelResult run_level2(const SurveyTable &survey, const ConstraintTable &constraints,
                              const PrevalenceTable &level1, const std::vector<std::string> &behaviors,
                              const std::vector<std::string> &outcomes, const LevelOptions &opts) {
    const auto zones = restrict_zones(constraints, level1.zone_ids());
    const auto augmented = derive_behavior_constraints(level1, zones, behaviors);
    const auto extended = with_attribute_constraints(survey, behaviors);
    LevelOptions level_opts = opts;
    level_opts.seed = level2_seed(opts.seed);
    return run_level(extended, augmented, outcomes, level_opts);
}

// ---------------------------------------------------------------------------------------------
// Configuration and whole-run driver

inline const std::vector<std::string> &default_behaviors() {
    static const std::vector<std::string> v{"smoking", "obesity"};
    return v;
}

inline const std::vector<std::string> &default_outcomes() {
    static const std::vector<std::string> v{"arthritis",        "asthma",      "cancer", "copd",
                                            "depression",       "diabetes",    "heart_disease",
                                            "high_blood_pressure", "high_cholesterol", "kidney_disease",
                                            "stroke"};
    return v;
}

inline constexpr int kConfigVersion = 1;

struct PipelineConfig {
    std::filesystem::path recode_spec;
    std::filesystem::path survey;
    std::map<std::string, std::filesystem::path> marginals; // scale -> path
    std::string scale = "county";
    std::optional<std::string> reference_variable; // defaults to the recode spec's
    std::vector<std::string> behaviors = default_behaviors();
    std::vector<std::string> outcomes = default_outcomes();
    std::uint64_t seed = 0;
    FitOptions fit;
    unsigned threads = 0;
    std::filesystem::path output_dir = "out";
    bool write_populations = false;
    bool write_weights = false;

    void validate() const {
        fit.validate();
        if (!marginals.count(scale)) {
            throw SchemaError("config: no marginals file for scale '" + scale + "'");
        }
        if (outcomes.empty()) {
            throw SchemaError("config: no outcome variables");
        }
        std::set<std::string> seen;
        for (const auto &v : behaviors) {
            if (!seen.insert(v).second) {
                throw SchemaError("config: '" + v + "' listed twice");
            }
        }
        for (const auto &v : outcomes) {
            if (!seen.insert(v).second) {
                throw SchemaError("config: '" + v + "' is listed twice or as both behavior and outcome");
            }
        }
    }
};

/// Config JSON; relative paths resolve against `base_dir` (the config file's directory).
inline PipelineConfig parse_pipeline_config(const nlohmann::json &root, const std::filesystem::path &base_dir) {
    using detail::json_get;
    constexpr std::string_view where = "config";
    if (!root.is_object()) {
        throw SchemaError("config: top level must be an object");
    }
    detail::reject_unknown_keys(root,
                                {"config_version", "recode_spec", "survey", "marginals", "scale",
                                 "reference_variable", "behaviors", "outcomes", "seed", "fit", "threads",
                                 "output_dir", "write_populations", "write_weights"},
                                where);
    if (root.contains("config_version") && json_get<int>(root, "config_version", where) != kConfigVersion) {
        throw SchemaError("config: unsupported config_version");
    }
    auto resolve = [&](const std::string &p) {
        std::filesystem::path path(p);
        return path.is_absolute() ? path : base_dir / path;
    };
    PipelineConfig cfg;
    cfg.recode_spec = resolve(json_get<std::string>(root, "recode_spec", where));
    cfg.survey = resolve(json_get<std::string>(root, "survey", where));
    if (!root.contains("marginals") || !root.at("marginals").is_object()) {
        throw SchemaError("config: 'marginals' must map scale names to files");
    }
    for (const auto &[scale, node] : root.at("marginals").items()) {
        if (!node.is_string()) {
            throw SchemaError("config: marginals." + scale + " must be a path");
        }
        cfg.marginals[scale] = resolve(node.get<std::string>());
    }
    if (root.contains("scale")) {
        cfg.scale = json_get<std::string>(root, "scale", where);
    }
    if (root.contains("reference_variable")) {
        cfg.reference_variable = json_get<std::string>(root, "reference_variable", where);
    }
    cfg.behaviors = detail::string_list(root, "behaviors", cfg.behaviors, where);
    cfg.outcomes = detail::string_list(root, "outcomes", cfg.outcomes, where);
    if (root.contains("seed")) {
        cfg.seed = json_get<std::uint64_t>(root, "seed", where);
    }
    if (root.contains("fit")) {
        const auto &fit = root.at("fit");
        detail::reject_unknown_keys(fit, {"tolerance", "max_iterations", "infeasibility_policy"}, "config fit");
        if (fit.contains("tolerance")) {
            cfg.fit.tolerance = json_get<double>(fit, "tolerance", "config fit");
        }
        if (fit.contains("max_iterations")) {
            cfg.fit.max_iterations = json_get<int>(fit, "max_iterations", "config fit");
        }
        if (fit.contains("infeasibility_policy")) {
            cfg.fit.infeasibility_policy =
                parse_infeasibility_policy(json_get<std::string>(fit, "infeasibility_policy", "config fit"));
        }
    }
    if (root.contains("threads")) {
        cfg.threads = json_get<unsigned>(root, "threads", where);
    }
    if (root.contains("output_dir")) {
        cfg.output_dir = resolve(json_get<std::string>(root, "output_dir", where));
    } else {
        cfg.output_dir = base_dir / "out";
    }
    if (root.contains("write_populations")) {
        cfg.write_populations = json_get<bool>(root, "write_populations", where);
    }
    if (root.contains("write_weights")) {
        cfg.write_weights = json_get<bool>(root, "write_weights", where);
    }
    return cfg;
}

inline PipelineConfig load_pipeline_config(const std::filesystem::path &path) {
    nlohmann::json root;
    try {
        root = nlohmann::json::parse(csv::read_text(path));
    } catch (const nlohmann::json::exception &e) {
        throw SchemaError(path.string() + ": " + e.what());
    }
    return parse_pipeline_config(root, path.parent_path());
}

struct ShapeResult {
    LevelResult level1;
    LevelResult level2;
};

/// Full run: load, harmonize, reconcile, level 1, level 2, write outputs. The caller owns the
/// manifest so it can be written even when a stage throws.
inline ShapeResult run_shape(const PipelineConfig &cfg, RunManifest &manifest) {
    cfg.validate();
    manifest.set_seed(cfg.seed);
    auto &opts = manifest.options();
    opts["scale"] = cfg.scale;
    opts["threads"] = resolve_threads(cfg.threads);
    opts["tolerance"] = cfg.fit.tolerance;
    opts["max_iterations"] = cfg.fit.max_iterations;
    opts["infeasibility_policy"] = to_string(cfg.fit.infeasibility_policy);
    opts["behaviors"] = cfg.behaviors;
    opts["outcomes"] = cfg.outcomes;

    const auto &marginals_path = cfg.marginals.at(cfg.scale);
    auto [survey, constraints] = manifest.stage("load", [&] {
        manifest.add_input("recode_spec", cfg.recode_spec);
        manifest.add_input("survey", cfg.survey);
        manifest.add_input("marginals", marginals_path);
        auto spec = load_recode_spec(cfg.recode_spec);
        if (cfg.reference_variable) {
            spec.reference_variable = *cfg.reference_variable;
            validate(spec);
        }
        for (const auto &name : cfg.behaviors) {
            if (!std::any_of(spec.attributes.begin(), spec.attributes.end(),
                             [&](const auto &a) { return a.name == name; })) {
                throw SchemaError("behavior '" + name + "' is not an attribute in the recode spec");
            }
        }
        for (const auto &name : cfg.outcomes) {
            if (!std::any_of(spec.attributes.begin(), spec.attributes.end(),
                             [&](const auto &a) { return a.name == name; })) {
                throw SchemaError("outcome '" + name + "' is not an attribute in the recode spec");
            }
        }
        auto survey_load = load_survey(cfg.survey, spec);
        auto marg = load_marginals(marginals_path, spec);
        manifest.warn_all(survey_load.warnings);
        manifest.warn_all(marg.warnings);
        auto rec = reconcile_marginals(marg.table, spec.reference_variable);
        return std::pair{std::move(survey_load.table), std::move(rec.table)};
    });

    const LevelOptions level_opts{cfg.fit, cfg.seed, cfg.threads};
    ShapeResult result;
    result.level1 = manifest.stage("level1", [&] { return run_level1(survey, constraints, cfg.behaviors, level_opts); });
    manifest.warn_all(result.level1.warnings);
    result.level2 = manifest.stage("level2", [&] {
        return run_level2(survey, constraints, result.level1.prevalence, cfg.behaviors, cfg.outcomes, level_opts);
    });
    manifest.warn_all(result.level2.warnings);

    manifest.stage("write", [&] {
        const auto &dir = cfg.output_dir;
        manifest.emit(dir, "level1_prevalence.csv", prevalence_to_csv(result.level1.prevalence));
        manifest.emit(dir, "level2_prevalence.csv", prevalence_to_csv(result.level2.prevalence));
        manifest.emit(dir, "level1_diagnostics.csv", diagnostics_to_csv(result.level1.weights));
        manifest.emit(dir, "level2_diagnostics.csv", diagnostics_to_csv(result.level2.weights));
        if (cfg.write_weights) {
            manifest.emit(dir, "level1_weights.csv", weights_to_csv(result.level1.weights, survey));
            manifest.emit(dir, "level2_weights.csv", weights_to_csv(result.level2.weights, survey));
        }
        if (cfg.write_populations) {
            manifest.emit(dir, "level1_counts.csv", counts_to_csv(result.level1.counts, survey));
            manifest.emit(dir, "level2_counts.csv", counts_to_csv(result.level2.counts, survey));
            manifest.emit(dir, "level1_population.csv",
                          population_to_csv(expand(result.level1.counts, survey, cfg.behaviors)));
            manifest.emit(dir, "level2_population.csv",
                          population_to_csv(expand(result.level2.counts, survey, cfg.outcomes)));
        }
    });
    manifest.succeed();
    return result;
}

} // namespace shapesynth
