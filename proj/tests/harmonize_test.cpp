#include "shapesynth/harmonize.hpp"

#include "support/common.hpp"

#include <gtest/gtest.h>

#include <numeric>
#include <set>

using namespace shapesynth;
using testing_support::fixture;

namespace {

RecodeSpec test_spec() { return load_recode_spec(fixture("recode_spec.json")); }

SurveyTable test_survey() { return load_survey(fixture("survey.csv"), test_spec()).table; }

std::string category_of(const SurveyTable &t, std::size_t rec, const std::string &var) {
    const auto v = *t.variable_index(var);
    return t.variables[v].categories[t.codes[v][rec]];
}

std::size_t record(const SurveyTable &t, const std::string &id) {
    return static_cast<std::size_t>(std::find(t.ids.begin(), t.ids.end(), id) - t.ids.begin());
}

} // namespace

TEST(RecodeSpec, LoadsFixture) {
    const auto spec = test_spec();
    ASSERT_EQ(spec.variables.size(), 3u);
    EXPECT_EQ(spec.reference_variable, "age");
    EXPECT_EQ(spec.variables[0].categories[3].marginal_columns, std::vector<std::string>{"age.65plus"});
    EXPECT_EQ(spec.attributes[1].true_values, std::vector<std::string>{"1"});
    EXPECT_EQ(spec.carried, std::vector<std::string>{"state"});
}

TEST(RecodeSpec, RejectsBadSpecs) {
    auto base = nlohmann::json::parse(csv::read_text(fixture("recode_spec.json")));
    {
        auto j = base;
        j["spec_version"] = 2;
        EXPECT_THROW(parse_recode_spec(j), SchemaError);
    }
    {
        auto j = base;
        j["bogus"] = 1;
        EXPECT_THROW(parse_recode_spec(j), SchemaError);
    }
    {
        auto j = base;
        j["variables"][1]["categories"][1]["values"] = {"1"}; // "1" would mean both male and female
        EXPECT_THROW(parse_recode_spec(j), SchemaError);
    }
    {
        auto j = base;
        j["variables"][0]["categories"][1]["min"] = 25; // overlaps 18-29
        EXPECT_THROW(parse_recode_spec(j), SchemaError);
    }
    {
        auto j = base;
        j["reference_variable"] = "height";
        EXPECT_THROW(parse_recode_spec(j), SchemaError);
    }
    {
        auto j = base;
        j["variables"][0]["categories"] = "nope";
        EXPECT_THROW(parse_recode_spec(j), SchemaError);
    }
}

TEST(RecodeSpec, DefaultReferenceIsAge) {
    auto j = nlohmann::json::parse(csv::read_text(fixture("recode_spec.json")));
    j.erase("reference_variable");
    EXPECT_EQ(parse_recode_spec(j).reference_variable, "age");
    std::swap(j["variables"][0], j["variables"][1]);
    j["variables"][1]["name"] = "years";
    EXPECT_EQ(parse_recode_spec(j).reference_variable, "sex");
}

TEST(LoadSurvey, AgeSixtySevenIsSixtyFivePlus) {
    const auto t = test_survey();
    const auto r = record(t, "r01");
    EXPECT_EQ(category_of(t, r, "age"), "65plus");
    const auto bits = t.indicators(r);
    const auto age = *t.variable_index("age");
    for (std::size_t c = 0; c < 4; ++c) {
        EXPECT_EQ(bits[t.indicator_position(age, c)], c == 3 ? 1 : 0);
    }
}

TEST(LoadSurvey, FloridaIncomeSixtyThousand) {
    // "$60,000" falls in the 50,000-74,999 band of the 2019 Florida income categories.
    const auto t = test_survey();
    EXPECT_EQ(category_of(t, record(t, "r01"), "income"), "50to74k");
    EXPECT_EQ(category_of(t, record(t, "r07"), "income"), "25to49k"); // 49,999
    EXPECT_EQ(category_of(t, record(t, "r08"), "income"), "75plus");  // 75,000 is the next band's lower bound
}

TEST(LoadSurvey, OneBitPerVariableAndUniqueIds) {
    const auto t = test_survey();
    ASSERT_EQ(t.size(), 10u);
    EXPECT_TRUE(std::is_sorted(t.ids.begin(), t.ids.end()));
    EXPECT_EQ(std::set<std::string>(t.ids.begin(), t.ids.end()).size(), t.size());
    for (std::size_t i = 0; i < t.size(); ++i) {
        const auto bits = t.indicators(i);
        for (std::size_t v = 0; v < t.variables.size(); ++v) {
            int sum = 0;
            for (std::size_t c = 0; c < t.variables[v].categories.size(); ++c) {
                sum += bits[t.indicator_position(v, c)];
            }
            EXPECT_EQ(sum, 1);
        }
    }
    // Attribute encodings: "yes"/"no" and 1/0.
    const auto smoke = *t.attribute_index("smoking");
    EXPECT_EQ(t.attributes[smoke][record(t, "r04")], 1);
    EXPECT_EQ(t.attributes[smoke][record(t, "r03")], 0);
}

TEST(LoadSurvey, BlankIncomeRowIsDropped) {
    const auto raw = csv::parse("id,age,sex,income,smoker,obese,diabetes,state\n"
                                "a,30,1,,0,0,0,NY\n"
                                "b,30,1,40000,0,0,0,NY\n"
                                "c,30,X,40000,0,0,0,NY\n",
                                "mem");
    const auto load = recode_survey(raw, test_spec());
    EXPECT_EQ(load.table.size(), 1u);
    EXPECT_EQ(load.dropped, 2u);
    EXPECT_FALSE(load.warnings.empty());
}

TEST(LoadSurvey, Errors) {
    const auto spec = test_spec();
    EXPECT_THROW(recode_survey(csv::parse("id,age,sex,smoker,obese,diabetes,state\n"), spec), SchemaError);
    try {
        recode_survey(csv::parse("id,age,sex,smoker,obese,diabetes,state\n"), spec);
    } catch (const SchemaError &e) {
        EXPECT_NE(std::string(e.what()).find("income"), std::string::npos);
    }
    EXPECT_THROW(recode_survey(csv::parse("id,age,sex,income,smoker,obese,diabetes,state\n"
                                          "a,30,1,1,0,0,0,NY\na,40,1,1,0,0,0,NY\n"),
                               spec),
                 DataError);
    EXPECT_THROW(recode_survey(csv::parse("id,age,sex,income,smoker,obese,diabetes,state\n"
                                          "a,30,1,,0,0,0,NY\n"),
                               spec),
                 DataError);
}

TEST(LoadSurvey, RecodingIsIdempotent) {
    const auto spec = test_spec();
    const auto t = test_survey();
    const auto again = recode_survey(csv::parse(survey_to_csv(t)), spec);
    EXPECT_EQ(again.dropped, 0u);
    EXPECT_EQ(again.table, t);
}

TEST(FilterByRegion, ThreeOfTenAreFlorida) {
    const auto t = test_survey();
    const auto fl = filter_by_region(t, "state", "FL");
    EXPECT_EQ(fl.ids, (std::vector<std::string>{"r01", "r04", "r08"}));
    EXPECT_THROW(filter_by_region(t, "state", "TX"), DataError);
    EXPECT_THROW(filter_by_region(t, "county", "FL"), SchemaError);
}

TEST(StratifiedSample, ProportionalFloorAllocation) {
    // 100 records: stratum A holds 10%, B 90%. target 15 -> floor(1.5)=1 + floor(13.5)=13.
    SurveyTable t;
    t.variables = {{"g", {"A", "B"}}};
    t.variable_columns = {"g"};
    t.codes.resize(1);
    for (int i = 0; i < 100; ++i) {
        char id[8];
        std::snprintf(id, sizeof id, "%03d", i);
        t.ids.emplace_back(id);
        t.codes[0].push_back(i < 10 ? 0 : 1);
    }
    const auto s = stratified_sample(t, {"g"}, 15, 1);
    EXPECT_EQ(s.size(), 14u);
    EXPECT_EQ(std::count(s.codes[0].begin(), s.codes[0].end(), 0), 1);

    // Stratum with 10% share at target 50 -> exactly 5.
    const auto s50 = stratified_sample(t, {"g"}, 50, 3);
    EXPECT_EQ(std::count(s50.codes[0].begin(), s50.codes[0].end(), 0), 5);
    EXPECT_EQ(s50.size(), 50u);
}

TEST(StratifiedSample, TenPercentStratumAtFifteenThousand) {
    SurveyTable t;
    t.variables = {{"g", {"A", "B"}}};
    t.variable_columns = {"g"};
    t.codes.resize(1);
    for (int i = 0; i < 30000; ++i) {
        char id[16];
        std::snprintf(id, sizeof id, "%06d", i);
        t.ids.emplace_back(id);
        t.codes[0].push_back(i % 10 == 0 ? 0 : 1);
    }
    const auto s = stratified_sample(t, {"g"}, 15000, 11);
    EXPECT_EQ(std::count(s.codes[0].begin(), s.codes[0].end(), 0), 1500);
    EXPECT_EQ(s.size(), 15000u);
}

TEST(StratifiedSample, DeterministicAndBounded) {
    const auto t = test_survey();
    const auto a = stratified_sample(t, {"sex", "age"}, 7, 99);
    const auto b = stratified_sample(t, {"sex", "age"}, 7, 99);
    EXPECT_EQ(a, b);
    EXPECT_LE(a.size(), 7u);
    EXPECT_EQ(stratified_sample(t, {"sex"}, t.size(), 5), t);
    EXPECT_THROW(stratified_sample(t, {"sex"}, 11, 1), DataError);
    EXPECT_THROW(stratified_sample(t, {"sex"}, 0, 1), DataError);
    EXPECT_THROW(stratified_sample(t, {"height"}, 5, 1), SchemaError);
}

TEST(StratifiedSample, SeedChangesComposition) {
    SurveyTable t;
    t.variables = {{"g", {"A", "B"}}};
    t.variable_columns = {"g"};
    t.codes.resize(1);
    for (int i = 0; i < 1000; ++i) {
        t.ids.push_back("id" + std::to_string(1000 + i));
        t.codes[0].push_back(i % 2);
    }
    EXPECT_NE(stratified_sample(t, {"g"}, 100, 1).ids, stratified_sample(t, {"g"}, 100, 2).ids);
}

TEST(LoadMarginals, ThreeZones) {
    const auto m = load_marginals(fixture("marginals.csv"), test_spec());
    ASSERT_EQ(m.table.zones.size(), 3u);
    EXPECT_TRUE(m.warnings.empty());
    EXPECT_EQ(m.table.population(m.table.zones[1]), 1000.0);
    EXPECT_EQ(m.table.zone_index("z3"), 2u);
    EXPECT_FALSE(m.table.zone_index("z9"));
}

TEST(LoadMarginals, ZeroOrMissingZoneDropped) {
    const std::string header = "zone_id,age.18_29,age.30_49,age.50_64,age.65plus,sex.male,sex.female,"
                               "income.lt25k,income.25to49k,income.50to74k,income.75plus\n";
    const auto m = parse_marginals(csv::parse(header + "b,1,1,1,1,2,2,1,1,1,1\n"
                                                       "a,0,0,0,0,2,2,1,1,1,1\n"
                                                       "c,1,1,,1,2,2,1,1,1,1\n"),
                                   test_spec());
    ASSERT_EQ(m.table.zones.size(), 1u);
    EXPECT_EQ(m.dropped_zones, (std::vector<std::string>{"a", "c"}));
    EXPECT_EQ(m.warnings.size(), 2u);
}

TEST(LoadMarginals, Errors) {
    const auto spec = test_spec();
    const std::string header = "zone_id,age.18_29,age.30_49,age.50_64,age.65plus,sex.male,sex.female,"
                               "income.lt25k,income.25to49k,income.50to74k,income.75plus";
    EXPECT_THROW(parse_marginals(csv::parse(header + ",sex.other\nz,1,1,1,1,2,2,1,1,1,1,0\n"), spec), SchemaError);
    EXPECT_THROW(parse_marginals(csv::parse(header + "\nz,1,1,1,1,2,2,1,1,1,-1\n"), spec), DataError);
    EXPECT_THROW(parse_marginals(csv::parse(header + "\nz,1,1,1,1,2,2,1,1,1,1\nz,1,1,1,1,2,2,1,1,1,1\n"), spec),
                 DataError);
    EXPECT_THROW(parse_marginals(csv::parse("zone_id,age.18_29\nz,1\n"), spec), SchemaError);
}

TEST(Reconcile, RescalesToReference) {
    auto m = load_marginals(fixture("marginals.csv"), test_spec()).table;
    auto &sex = m.zones[0].counts[1];
    sex = {490, 500}; // sums to 990
    const auto rec = reconcile_marginals(m, "age");
    EXPECT_DOUBLE_EQ(rec.factors[0][1], 1000.0 / 990.0);
    EXPECT_DOUBLE_EQ(rec.table.zones[0].counts[1][0], 490.0 * 1000.0 / 990.0);
    for (const auto &zone : rec.table.zones) {
        for (const auto &cats : zone.counts) {
            EXPECT_NEAR(std::accumulate(cats.begin(), cats.end(), 0.0), rec.table.population(zone), 0.5);
        }
    }
}

TEST(Reconcile, ConsistentTableUnchanged) {
    const auto m = load_marginals(fixture("marginals.csv"), test_spec()).table;
    const auto rec = reconcile_marginals(m, "age");
    EXPECT_EQ(rec.table, m);
    for (const auto &f : rec.factors) {
        EXPECT_EQ(f, std::vector<double>(3, 1.0));
    }
}

TEST(Reconcile, ZeroVariableIsInfeasible) {
    auto m = load_marginals(fixture("marginals.csv"), test_spec()).table;
    m.zones[2].counts[1] = {0, 0};
    EXPECT_THROW(reconcile_marginals(m, "age"), InfeasibleError);
    EXPECT_THROW(reconcile_marginals(m, "height"), SchemaError);
}
