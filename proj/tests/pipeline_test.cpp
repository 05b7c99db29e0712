#include "shapesynth/pipeline.hpp"

#include "support/common.hpp"
#include "support/instances.hpp"
#include "support/ministate.hpp"

#include <gtest/gtest.h>

#include <chrono>
#include <numeric>

using namespace shapesynth;
using testing_support::scratch_dir;

namespace {

SurveyTable four_people() {
    auto t = instances::survey_from_codes({{"a", "b"}}, {{0}, {1}, {0}, {1}});
    t.attribute_names = {"smoking", "obesity", "asthma"};
    t.attribute_columns = {"smoker", "obese", "asthma"};
    t.attributes = {{1, 0, 0, 0}, {1, 1, 0, 1}, {0, 0, 0, 0}};
    return t;
}

struct Loaded {
    SurveyTable survey;
    ConstraintTable constraints;
};

Loaded load(const std::filesystem::path &dir, const std::string &marginals = "county.csv") {
    const auto spec = load_recode_spec(dir / "spec.json");
    auto survey = load_survey(dir / "survey.csv", spec).table;
    auto marg = load_marginals(dir / marginals, spec);
    return {std::move(survey), reconcile_marginals(marg.table, spec.reference_variable).table};
}

ministate::Options small_state() {
    ministate::Options o;
    o.counties = 6;
    o.tracts_per_county = 2;
    o.survey_size = 200;
    return o;
}

// One mini-state fixture shared across the suite.
const std::filesystem::path &small_fixture() {
    static const auto dir = [] {
        const auto d = scratch_dir("pipeline-small");
        ministate::write_fixture(ministate::generate(small_state()), d, 11);
        return d;
    }();
    return dir;
}

std::int64_t count_with(const IntegerCounts &z, const SurveyTable &survey, std::size_t attr) {
    std::int64_t n = 0;
    for (std::size_t i = 0; i < survey.size(); ++i) {
        n += survey.attributes[attr][i] ? z.counts[i] : 0;
    }
    return n;
}

} // namespace

TEST(Aggregate, PercentOfAgents) {
    const auto survey = four_people();
    const std::vector<IntegerCounts> zones{{"z", {1, 1, 1, 1}, 4, 0}};
    const auto table = aggregate_prevalence(zones, survey, {"smoking", "asthma"});
    ASSERT_EQ(table.rows.size(), 2u);
    EXPECT_EQ(table.rows[0], (PrevalenceRow{"z", "smoking", 25.0, 1, 4}));
    EXPECT_EQ(table.rows[1].prevalence, 0.0);
    EXPECT_EQ(*table.lookup("z", "asthma"), 0.0);
}

TEST(Aggregate, ZeroAgentZoneIsSkippedWithWarning) {
    const auto survey = four_people();
    const std::vector<IntegerCounts> zones{{"empty", {0, 0, 0, 0}, 0, 0}, {"full", {2, 0, 0, 1}, 3, 0}};
    const auto table = aggregate_prevalence(zones, survey, {"obesity"});
    ASSERT_EQ(table.rows.size(), 1u);
    EXPECT_EQ(table.rows[0].zone_id, "full");
    EXPECT_EQ(table.rows[0].numerator, 3);
    EXPECT_EQ(table.warnings.size(), 1u);
    EXPECT_THROW(aggregate_prevalence(zones, survey, {"diabetes"}), SchemaError);
}

TEST(Aggregate, CountsAndPopulationAgree) {
    const auto survey = four_people();
    const std::vector<IntegerCounts> zones{{"b", {3, 1, 0, 2}, 6, 0}, {"a", {0, 5, 1, 1}, 7, 0}};
    const std::vector<std::string> vars{"smoking", "obesity", "asthma"};
    const auto from_counts = aggregate_prevalence(zones, survey, vars);
    const auto from_pop = aggregate_prevalence(expand(zones, survey, vars), vars);
    EXPECT_EQ(from_counts.rows, from_pop.rows);
    EXPECT_EQ(from_counts.zone_ids(), (std::vector<std::string>{"a", "b"}));
    EXPECT_EQ(prevalence_to_csv(from_counts).substr(0, 48), "zone_id,variable,prevalence,numerator,denominato");
}

TEST(DeriveBehavior, CountsFromPrevalence) {
    const ConstraintTable ct{{{"sex", {"m", "f"}}}, "sex", {{"z1", {{500, 500}}}, {"z2", {{40, 60}}}}};
    PrevalenceTable level1;
    level1.rows = {{"z1", "smoking", 14.127, 0, 0}, {"z2", "smoking", 0.0, 0, 0}};
    const auto out = derive_behavior_constraints(level1, ct, {"smoking"});
    ASSERT_EQ(out.variables.size(), 2u);
    EXPECT_EQ(out.variables[1].categories, (std::vector<std::string>{"yes", "no"}));
    EXPECT_NEAR(out.zones[0].counts[1][0], 141.27, 1e-9);
    EXPECT_NEAR(out.zones[0].counts[1][1], 858.73, 1e-9);
    EXPECT_EQ(out.zones[1].counts[1], (std::vector<double>{0.0, 100.0}));

    level1.rows[1].prevalence = 100.0;
    EXPECT_EQ(derive_behavior_constraints(level1, ct, {"smoking"}).zones[1].counts[1],
              (std::vector<double>{100.0, 0.0}));
    level1.rows.pop_back();
    EXPECT_THROW(derive_behavior_constraints(level1, ct, {"smoking"}), JoinError);
    EXPECT_THROW(derive_behavior_constraints(level1, ct, {"sex"}), SchemaError);
}

TEST(DeriveBehavior, FullPrevalenceWithoutNonMembersHitsEmptyCellPolicy) {
    auto survey = four_people();
    survey.attributes[1] = {1, 1, 1, 1};
    const ConstraintTable ct{survey.variables, "v0", {{"z", {{2, 2}}}}};
    PrevalenceTable level1;
    level1.rows = {{"z", "obesity", 100.0, 4, 4}};
    EXPECT_NO_THROW(fit_zone(with_attribute_constraints(survey, {"obesity"}),
                             derive_behavior_constraints(level1, ct, {"obesity"}).zones[0].counts, {}));
    level1.rows[0].prevalence = 50.0;
    EXPECT_THROW(fit_zone(with_attribute_constraints(survey, {"obesity"}),
                          derive_behavior_constraints(level1, ct, {"obesity"}).zones[0].counts, {}),
                 InfeasibleError);
}

TEST(WithAttributeConstraints, YesIsCodeZero) {
    const auto ext = with_attribute_constraints(four_people(), {"smoking"});
    ASSERT_EQ(ext.variables.size(), 2u);
    EXPECT_EQ(ext.codes[1], (std::vector<std::uint16_t>{0, 1, 1, 1}));
    EXPECT_THROW(with_attribute_constraints(four_people(), {"diabetes"}), SchemaError);
}

TEST(Config, ParsesAndResolvesPaths) {
    const auto cfg = parse_pipeline_config(nlohmann::json::parse(R"({
        "config_version": 1, "recode_spec": "spec.json", "survey": "/data/survey.csv",
        "marginals": {"county": "c.csv", "tract": "t.csv"}, "scale": "tract", "seed": 5,
        "outcomes": ["asthma"], "fit": {"tolerance": 1e-6, "infeasibility_policy": "skip_variable_with_warning"}})"),
                                           "/base");
    EXPECT_EQ(cfg.recode_spec, std::filesystem::path("/base/spec.json"));
    EXPECT_EQ(cfg.survey, std::filesystem::path("/data/survey.csv"));
    EXPECT_EQ(cfg.marginals.at("tract"), std::filesystem::path("/base/t.csv"));
    EXPECT_EQ(cfg.output_dir, std::filesystem::path("/base/out"));
    EXPECT_EQ(cfg.seed, 5u);
    EXPECT_EQ(cfg.fit.tolerance, 1e-6);
    EXPECT_EQ(cfg.fit.infeasibility_policy, InfeasibilityPolicy::skip_variable_with_warning);
    EXPECT_EQ(cfg.behaviors, default_behaviors());
    EXPECT_NO_THROW(cfg.validate());
}

TEST(Config, Rejects) {
    const auto base = nlohmann::json::parse(R"({"recode_spec": "s", "survey": "v", "marginals": {"county": "c"}})");
    EXPECT_NO_THROW(parse_pipeline_config(base, ".").validate());
    auto bad = base;
    bad["colour"] = 1;
    EXPECT_THROW(parse_pipeline_config(bad, "."), SchemaError);
    bad = base;
    bad["config_version"] = 2;
    EXPECT_THROW(parse_pipeline_config(bad, "."), SchemaError);
    bad = base;
    bad["scale"] = "tract";
    EXPECT_THROW(parse_pipeline_config(bad, ".").validate(), SchemaError);
    bad = base;
    bad["outcomes"] = {"smoking"};
    EXPECT_THROW(parse_pipeline_config(bad, ".").validate(), SchemaError);
    bad = base;
    bad["fit"] = {{"tolerance", "tight"}};
    EXPECT_THROW(parse_pipeline_config(bad, "."), SchemaError);
    EXPECT_THROW(load_pipeline_config(scratch_dir("cfg-missing") / "none.json"), SchemaError);
}

TEST(MiniState, LevelShapesAndConservation) {
    const auto in = load(small_fixture());
    ASSERT_EQ(in.constraints.zones.size(), 6u);
    const LevelOptions opts{{}, 3, 2};
    const auto l1 = run_level1(in.survey, in.constraints, default_behaviors(), opts);
    EXPECT_EQ(l1.prevalence.rows.size(), 12u);
    const auto l2 = run_level2(in.survey, in.constraints, l1.prevalence, default_behaviors(), default_outcomes(), opts);
    EXPECT_EQ(l2.prevalence.rows.size(), 6u * 11u);
    for (const auto *level : {&l1, &l2}) {
        for (std::size_t z = 0; z < level->counts.size(); ++z) {
            const auto &c = level->counts[z];
            EXPECT_EQ(std::accumulate(c.counts.begin(), c.counts.end(), std::int64_t{0}), c.total);
            EXPECT_EQ(c.total, std::llround(in.constraints.population(in.constraints.zones[z])));
        }
    }
}

TEST(MiniState, Level2HonoursBehaviorConstraints) {
    const auto in = load(small_fixture());
    const LevelOptions opts{{}, 3, 0};
    const auto l1 = run_level1(in.survey, in.constraints, default_behaviors(), opts);
    const auto l2 = run_level2(in.survey, in.constraints, l1.prevalence, default_behaviors(), default_outcomes(), opts);
    const auto derived = derive_behavior_constraints(l1.prevalence, in.constraints, default_behaviors());
    const auto base_vars = in.constraints.variables.size();
    for (std::size_t z = 0; z < l2.counts.size(); ++z) {
        const double n = in.constraints.population(in.constraints.zones[z]);
        for (std::size_t b = 0; b < 2; ++b) {
            const double target = derived.zones[z].counts[base_vars + b][0];
            const auto attr = *in.survey.attribute_index(default_behaviors()[b]);
            const double synthetic = static_cast<double>(count_with(l2.counts[z], in.survey, attr));
            EXPECT_LE(std::abs(synthetic - target), 1e-8 * n + static_cast<double>(l2.counts[z].deficit))
                << l2.counts[z].zone_id << " " << default_behaviors()[b];
        }
    }
}

TEST(MiniState, DeterministicAndSeedSensitivityBounded) {
    const auto in = load(small_fixture());
    const auto a = run_level1(in.survey, in.constraints, default_behaviors(), {{}, 3, 1});
    const auto b = run_level1(in.survey, in.constraints, default_behaviors(), {{}, 3, 4});
    EXPECT_EQ(a.prevalence.rows, b.prevalence.rows);
    const auto c = run_level1(in.survey, in.constraints, default_behaviors(), {{}, 4, 1});
    EXPECT_NE(a.prevalence.rows, c.prevalence.rows);
    for (std::size_t r = 0; r < a.prevalence.rows.size(); ++r) {
        const auto &x = a.prevalence.rows[r];
        const auto &y = c.prevalence.rows[r];
        ASSERT_EQ(x.zone_id, y.zone_id);
        ASSERT_EQ(x.denominator, y.denominator);
        const auto z = static_cast<std::size_t>(r / 2);
        EXPECT_LE(std::abs(x.numerator - y.numerator), a.counts[z].deficit);
    }
}

TEST(MiniState, TractScaleCoheresWithCounty) {
    const auto county = load(small_fixture());
    const auto tract = load(small_fixture(), "tract.csv");
    EXPECT_GE(tract.constraints.zones.size(), county.constraints.zones.size());
    const auto l1c = run_level1(county.survey, county.constraints, default_behaviors(), {{}, 3, 0});
    const auto l1t = run_level1(tract.survey, tract.constraints, default_behaviors(), {{}, 3, 0});
    // Tract ids are prefixed by their county id.
    std::map<std::string, std::int64_t> rolled;
    for (const auto &z : l1t.counts) {
        rolled[z.zone_id.substr(0, z.zone_id.find('-'))] += z.total;
    }
    ASSERT_EQ(rolled.size(), l1c.counts.size());
    for (const auto &z : l1c.counts) {
        EXPECT_EQ(rolled.at(z.zone_id), z.total) << z.zone_id;
    }
}

TEST(RunShape, WritesOutputsQuickly) {
    const auto dir = scratch_dir("run-shape");
    const auto config = ministate::write_fixture(ministate::generate(small_state()), dir, 5);
    auto cfg = load_pipeline_config(config);
    cfg.write_populations = true;
    RunManifest manifest("run");
    const auto start = std::chrono::steady_clock::now();
    const auto result = run_shape(cfg, manifest);
    EXPECT_LT(std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count(), 5.0);
    manifest.write(dir / "out" / "manifest.json");
    EXPECT_TRUE(std::filesystem::exists(dir / "out" / "level1_prevalence.csv"));
    EXPECT_TRUE(std::filesystem::exists(dir / "out" / "level2_prevalence.csv"));
    EXPECT_TRUE(std::filesystem::exists(dir / "out" / "level2_population.csv"));
    const auto &doc = manifest.json();
    EXPECT_EQ(doc["status"], "ok");
    EXPECT_EQ(doc["seed"], 5);
    EXPECT_EQ(doc["stages"].size(), 4u);
    EXPECT_EQ(doc["inputs"].size(), 3u);
    EXPECT_EQ(doc["outputs"]["level2_prevalence.csv"],
              sha256_hex(csv::read_text(dir / "out" / "level2_prevalence.csv")));
    EXPECT_EQ(result.level2.prevalence.rows.size(), 66u);
}

TEST(RunShape, FailureLeavesPartialManifest) {
    const auto dir = scratch_dir("run-shape-fail");
    const auto config = ministate::write_fixture(ministate::generate(small_state()), dir, 5);
    auto cfg = load_pipeline_config(config);
    std::filesystem::remove(dir / "survey.csv");
    RunManifest manifest("run");
    try {
        run_shape(cfg, manifest);
        FAIL() << "expected a stage error";
    } catch (const StageError &e) {
        EXPECT_EQ(e.exit_code(), ExitCode::usage);
        EXPECT_EQ(std::string(e.what()).rfind("load: ", 0), 0u);
        manifest.fail(e.what(), e.exit_code());
    }
    manifest.write(dir / "manifest.json");
    const auto doc = nlohmann::json::parse(csv::read_text(dir / "manifest.json"));
    EXPECT_EQ(doc["status"], "error");
    EXPECT_EQ(doc["error"]["exit_code"], 2);
    EXPECT_EQ(doc["stages"][0]["name"], "load");
    EXPECT_FALSE(std::filesystem::exists(dir / "out" / "level1_prevalence.csv"));
}
