#pragma once

// Agreement metrics between estimate sets and reference estimates, and the composite
// deviation score used to rank outcomes per model.

#include "shapesynth/csv.hpp"
#include "shapesynth/error.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <tuple>
#include <vector>

namespace shapesynth {

/// Sample Pearson correlation. Needs >= 3 pairs and nonzero variance on both sides.
inline double pearson_r(std::span<const double> x, std::span<const double> y) {
    if (x.size() != y.size()) {
        throw DataError("pearson_r: length mismatch");
    }
    if (x.size() < 3) {
        throw DataError("pearson_r: need at least 3 pairs");
    }
    const double n = static_cast<double>(x.size());
    double mx = 0.0, my = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        mx += x[i];
        my += y[i];
    }
    mx /= n;
    my /= n;
    double sxy = 0.0, sxx = 0.0, syy = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double dx = x[i] - mx, dy = y[i] - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if (sxx == 0.0 || syy == 0.0) {
        throw DataError("pearson_r: correlation undefined (zero variance)");
    }
    return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

inline double mae(std::span<const double> x, std::span<const double> y) {
    if (x.size() != y.size()) {
        throw DataError("mae: length mismatch");
    }
    if (x.empty()) {
        throw DataError("mae: no values");
    }
    double total = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        total += std::abs(x[i] - y[i]);
    }
    return total / static_cast<double>(x.size());
}

struct Coverage {
    double fraction = 0.0;
    std::size_t covered = 0;
    std::size_t n = 0;
};

/// Share of estimates inside [low, high], both bounds inclusive.
inline Coverage ci_coverage(std::span<const double> estimate, std::span<const double> low,
                            std::span<const double> high) {
    if (estimate.size() != low.size() || estimate.size() != high.size()) {
        throw DataError("ci_coverage: length mismatch");
    }
    if (estimate.empty()) {
        throw DataError("ci_coverage: no matched zones");
    }
    Coverage c;
    c.n = estimate.size();
    for (std::size_t i = 0; i < estimate.size(); ++i) {
        if (estimate[i] >= low[i] && estimate[i] <= high[i]) {
            ++c.covered;
        }
    }
    c.fraction = static_cast<double>(c.covered) / static_cast<double>(c.n);
    return c;
}

// ---------------------------------------------------------------------------------------------
// Estimate / reference tables

struct EstimateRow {
    std::string model;
    std::string region;
    std::string zone_id;
    std::string outcome;
    double estimate = 0.0;
};

struct ReferenceRow {
    std::string region; // empty: applies to any region
    std::string zone_id;
    std::string outcome;
    double estimate = 0.0;
    std::optional<double> ci_low;
    std::optional<double> ci_high;
};

/// `model,region,zone_id,outcome,estimate`
inline std::vector<EstimateRow> parse_estimates(const csv::Table &raw) {
    const auto m = raw.require("model"), r = raw.require("region"), z = raw.require("zone_id"),
               o = raw.require("outcome"), e = raw.require("estimate");
    std::vector<EstimateRow> out;
    std::set<std::tuple<std::string, std::string, std::string, std::string>> seen;
    for (const auto &cells : raw.rows) {
        auto value = csv::parse_double(cells[e], raw.source + " estimate");
        if (!value || !std::isfinite(*value)) {
            throw DataError(raw.source + ": missing or non-finite estimate for zone '" + cells[z] + "'");
        }
        if (!seen.emplace(cells[m], cells[r], cells[z], cells[o]).second) {
            throw DataError(raw.source + ": duplicate row for model '" + cells[m] + "' zone '" + cells[z] +
                            "' outcome '" + cells[o] + "'");
        }
        out.push_back({cells[m], cells[r], cells[z], cells[o], *value});
    }
    return out;
}

/// `[region,]zone_id,outcome,estimate[,ci_low,ci_high]`; a `model` column is ignored.
inline std::vector<ReferenceRow> parse_reference(const csv::Table &raw) {
    const auto r = raw.find("region");
    const auto z = raw.require("zone_id"), o = raw.require("outcome"), e = raw.require("estimate");
    const auto lo = raw.find("ci_low"), hi = raw.find("ci_high");
    if (lo.has_value() != hi.has_value()) {
        throw SchemaError(raw.source + ": ci_low and ci_high must appear together");
    }
    std::vector<ReferenceRow> out;
    for (const auto &cells : raw.rows) {
        ReferenceRow row;
        row.region = r ? cells[*r] : "";
        row.zone_id = cells[z];
        row.outcome = cells[o];
        auto value = csv::parse_double(cells[e], raw.source + " estimate");
        if (!value || !std::isfinite(*value)) {
            throw DataError(raw.source + ": missing or non-finite estimate for zone '" + row.zone_id + "'");
        }
        row.estimate = *value;
        if (lo) {
            row.ci_low = csv::parse_double(cells[*lo], raw.source + " ci_low");
            row.ci_high = csv::parse_double(cells[*hi], raw.source + " ci_high");
            if (row.ci_low.has_value() != row.ci_high.has_value()) {
                throw DataError(raw.source + ": zone '" + row.zone_id + "' has only one CI bound");
            }
            if (row.ci_low && !(*row.ci_low <= row.estimate && row.estimate <= *row.ci_high)) {
                throw DataError(raw.source + ": zone '" + row.zone_id + "' outcome '" + row.outcome +
                                "' estimate lies outside its CI");
            }
        }
        out.push_back(std::move(row));
    }
    return out;
}

struct MetricRecord {
    std::string model;
    std::string region;
    std::string outcome;
    std::size_t n = 0;        // zones compared
    std::size_t excluded = 0; // estimate zones with no reference
    double r = 0.0;
    double r2 = 0.0;
    double mae = 0.0;
    std::optional<double> ci_coverage; // fraction; absent when the reference has no CIs
    std::size_t ci_covered = 0;
};

struct MetricReport {
    std::vector<MetricRecord> records; // sorted by (model, region, outcome)
    std::vector<std::string> warnings;
};

/// Per (model, region, outcome): r, R^2 = r^2, MAE and CI coverage over the zones present in
/// both tables.
inline MetricReport evaluate(const std::vector<EstimateRow> &estimates, const std::vector<ReferenceRow> &reference) {
    std::map<std::tuple<std::string, std::string, std::string>, const ReferenceRow *> ref_index;
    for (const auto &row : reference) {
        if (!ref_index.emplace(std::tuple{row.region, row.zone_id, row.outcome}, &row).second) {
            throw DataError("reference: duplicate row for zone '" + row.zone_id + "' outcome '" + row.outcome + "'");
        }
    }
    auto find_ref = [&](const EstimateRow &e) -> const ReferenceRow * {
        if (auto it = ref_index.find({e.region, e.zone_id, e.outcome}); it != ref_index.end()) {
            return it->second;
        }
        if (auto it = ref_index.find({"", e.zone_id, e.outcome}); it != ref_index.end()) {
            return it->second;
        }
        return nullptr;
    };

    std::map<std::tuple<std::string, std::string, std::string>, std::vector<const EstimateRow *>> groups;
    for (const auto &e : estimates) {
        groups[{e.model, e.region, e.outcome}].push_back(&e);
    }
    MetricReport report;
    for (const auto &[key, rows] : groups) {
        const auto &[model, region, outcome] = key;
        const std::string label = model + "/" + region + "/" + outcome;
        std::vector<double> est, ref, lo, hi;
        MetricRecord rec;
        rec.model = model;
        rec.region = region;
        rec.outcome = outcome;
        bool all_ci = true;
        for (const auto *e : rows) {
            const auto *match = find_ref(*e);
            if (match == nullptr) {
                ++rec.excluded;
                continue;
            }
            est.push_back(e->estimate);
            ref.push_back(match->estimate);
            if (match->ci_low) {
                lo.push_back(*match->ci_low);
                hi.push_back(*match->ci_high);
            } else {
                all_ci = false;
            }
        }
        if (rec.excluded != 0) {
            report.warnings.push_back(label + ": " + std::to_string(rec.excluded) + " zones without reference excluded");
        }
        if (est.empty()) {
            throw DataError(label + ": no zones match the reference");
        }
        rec.n = est.size();
        try {
            rec.r = pearson_r(est, ref);
        } catch (const DataError &e) {
            throw DataError(label + ": " + e.what());
        }
        rec.r2 = rec.r * rec.r;
        rec.mae = mae(est, ref);
        if (all_ci) {
            const auto c = ci_coverage(est, lo, hi);
            rec.ci_coverage = c.fraction;
            rec.ci_covered = c.covered;
        } else {
            report.warnings.push_back(label + ": reference CI missing for some zones; coverage not computed");
        }
        report.records.push_back(std::move(rec));
    }
    return report;
}

/// `model,region,outcome,n,r,r2,mae,ci_coverage,ci_covered,excluded`
inline std::string metrics_to_csv(const MetricReport &report) {
    csv::Writer w({"model", "region", "outcome", "n", "r", "r2", "mae", "ci_coverage", "ci_covered", "excluded"});
    for (const auto &m : report.records) {
        w.row({m.model, m.region, m.outcome, std::to_string(m.n), csv::format_double(m.r), csv::format_double(m.r2),
               csv::format_double(m.mae), m.ci_coverage ? csv::format_double(*m.ci_coverage) : "",
               m.ci_coverage ? std::to_string(m.ci_covered) : "", std::to_string(m.excluded)});
    }
    return w.text();
}

/// Reads the metrics CSV (only model, region, outcome, r, mae, ci_coverage are required).
inline std::vector<MetricRecord> parse_metrics(const csv::Table &raw) {
    const auto m = raw.require("model"), g = raw.require("region"), o = raw.require("outcome"),
               r = raw.require("r"), e = raw.require("mae"), c = raw.require("ci_coverage");
    const auto n = raw.find("n");
    std::vector<MetricRecord> out;
    for (const auto &cells : raw.rows) {
        MetricRecord rec;
        rec.model = cells[m];
        rec.region = cells[g];
        rec.outcome = cells[o];
        const std::string label = raw.source + " " + rec.model + "/" + rec.region + "/" + rec.outcome;
        auto rv = csv::parse_double(cells[r], label + " r");
        auto ev = csv::parse_double(cells[e], label + " mae");
        if (!rv || !ev) {
            throw DataError(label + ": r and mae are required");
        }
        rec.r = *rv;
        rec.r2 = rec.r * rec.r;
        rec.mae = *ev;
        rec.ci_coverage = csv::parse_double(cells[c], label + " ci_coverage");
        if (n) {
            if (auto nv = csv::parse_double(cells[*n], label + " n")) {
                rec.n = static_cast<std::size_t>(*nv);
            }
        }
        out.push_back(std::move(rec));
    }
    return out;
}

// ---------------------------------------------------------------------------------------------
// Composite scores

enum class MissingPolicy { error, skip };

struct DeviationRow {
    std::string model;
    std::string region;
    std::string outcome;
    double r_dev = 0.0;
    double mae_dev = 0.0;
    double ci_dev = 0.0;
    // Inputs the deviations came from; absent when deviations were supplied directly.
    std::optional<double> r;
    std::optional<double> mae_std;
    std::optional<double> ci;
};

struct CompositeScore {
    std::string model;
    std::string outcome;
    double composite = 0.0;
    int rank = 0; // within model, 1 = best; equal composites share a rank
};

struct MetricMeans {
    double r = 0.0;
    double mae_std = 0.0;
    double ci = 0.0;
};

struct CompositeReport {
    std::vector<DeviationRow> deviations;     // sorted by (model, region, outcome)
    std::vector<CompositeScore> scores;       // grouped by model, best first
    std::optional<MetricMeans> means;         // when computed from metrics
    std::optional<std::pair<double, double>> mae_range; // pool (min, max)
    std::vector<std::string> warnings;
};

struct CompositeOptions {
    MissingPolicy missing = MissingPolicy::error;
    std::optional<MetricMeans> means;                    // override the grid means
    std::optional<std::pair<double, double>> mae_range; // override the pool extremes
};

/// s = 1 - (MAE - min) / (max - min) with min/max over the whole pool.
inline std::vector<double> standardize_mae(std::span<const double> pool) {
    if (pool.empty()) {
        throw DataError("standardize_mae: empty pool");
    }
    const auto [lo, hi] = std::minmax_element(pool.begin(), pool.end());
    if (*hi == *lo) {
        throw DataError("standardize_mae: all MAE values equal");
    }
    std::vector<double> out;
    for (double v : pool) {
        out.push_back(1.0 - (v - *lo) / (*hi - *lo));
    }
    return out;
}

inline double standardize_mae(double value, double min, double max) {
    if (!(max > min)) {
        throw DataError("standardize_mae: max must exceed min");
    }
    return 1.0 - (value - min) / (max - min);
}

namespace detail {

/// Holes in the model x region x outcome grid, as "model/region/outcome".
template <typename Row>
std::vector<std::string> grid_holes(const std::vector<Row> &rows) {
    std::set<std::string> models, regions, outcomes;
    std::set<std::tuple<std::string, std::string, std::string>> present;
    for (const auto &r : rows) {
        models.insert(r.model);
        regions.insert(r.region);
        outcomes.insert(r.outcome);
        if (!present.emplace(r.model, r.region, r.outcome).second) {
            throw DataError("duplicate grid entry " + r.model + "/" + r.region + "/" + r.outcome);
        }
    }
    std::vector<std::string> holes;
    for (const auto &m : models) {
        for (const auto &g : regions) {
            for (const auto &o : outcomes) {
                if (!present.count({m, g, o})) {
                    holes.push_back(m + "/" + g + "/" + o);
                }
            }
        }
    }
    return holes;
}

inline void check_grid(const std::vector<std::string> &holes, MissingPolicy policy, std::vector<std::string> &warnings) {
    if (holes.empty()) {
        return;
    }
    std::string list;
    for (const auto &h : holes) {
        list += (list.empty() ? "" : ", ") + h;
    }
    if (policy == MissingPolicy::error) {
        throw DataError("incomplete grid, missing: " + list);
    }
    warnings.push_back("incomplete grid, scored without: " + list);
}

inline void sort_deviations(std::vector<DeviationRow> &rows) {
    std::sort(rows.begin(), rows.end(), [](const auto &a, const auto &b) {
        return std::tie(a.model, a.region, a.outcome) < std::tie(b.model, b.region, b.outcome);
    });
}

/// Sum deviations per (model, outcome) over regions (in region order) and rank within model.
inline std::vector<CompositeScore> score(const std::vector<DeviationRow> &rows) {
    std::map<std::pair<std::string, std::string>, double> sums;
    for (const auto &d : rows) {
        sums[{d.model, d.outcome}] += d.r_dev + d.mae_dev + d.ci_dev;
    }
    std::vector<CompositeScore> scores;
    for (const auto &[key, value] : sums) {
        scores.push_back({key.first, key.second, value, 0});
    }
    std::sort(scores.begin(), scores.end(), [](const auto &a, const auto &b) {
        if (a.model != b.model) {
            return a.model < b.model;
        }
        if (a.composite != b.composite) {
            return a.composite > b.composite;
        }
        return a.outcome < b.outcome;
    });
    std::size_t group_start = 0;
    for (std::size_t i = 0; i < scores.size(); ++i) {
        if (i == 0 || scores[i].model != scores[i - 1].model) {
            group_start = i;
        }
        if (i != group_start && scores[i].composite == scores[i - 1].composite) {
            scores[i].rank = scores[i - 1].rank;
        } else {
            scores[i].rank = static_cast<int>(i - group_start) + 1;
        }
    }
    return scores;
}

} // namespace detail

/// Composite scores from raw metrics: MAE is standardized over the whole pool, each metric is
/// centred on its grid mean, and an outcome's composite is the sum of its three deviations
/// over every region.
inline CompositeReport composite_scores(const std::vector<MetricRecord> &metrics, const CompositeOptions &opts = {}) {
    CompositeReport report;
    detail::check_grid(detail::grid_holes(metrics), opts.missing, report.warnings);
    if (metrics.empty()) {
        throw DataError("composite_scores: no metric records");
    }
    for (const auto &m : metrics) {
        if (!m.ci_coverage) {
            throw DataError("composite_scores: " + m.model + "/" + m.region + "/" + m.outcome +
                            " has no CI coverage");
        }
    }
    std::vector<double> pool;
    for (const auto &m : metrics) {
        pool.push_back(m.mae);
    }
    std::pair<double, double> range;
    if (opts.mae_range) {
        range = *opts.mae_range;
    } else {
        const auto [lo, hi] = std::minmax_element(pool.begin(), pool.end());
        range = {*lo, *hi};
    }
    report.mae_range = range;

    MetricMeans means;
    std::vector<double> s(metrics.size());
    for (std::size_t i = 0; i < metrics.size(); ++i) {
        s[i] = standardize_mae(metrics[i].mae, range.first, range.second);
        means.r += metrics[i].r;
        means.mae_std += s[i];
        means.ci += *metrics[i].ci_coverage;
    }
    const double n = static_cast<double>(metrics.size());
    means.r /= n;
    means.mae_std /= n;
    means.ci /= n;
    if (opts.means) {
        means = *opts.means;
    }
    report.means = means;
    for (std::size_t i = 0; i < metrics.size(); ++i) {
        const auto &m = metrics[i];
        report.deviations.push_back({m.model, m.region, m.outcome, m.r - means.r, s[i] - means.mae_std,
                                     *m.ci_coverage - means.ci, m.r, s[i], *m.ci_coverage});
    }
    detail::sort_deviations(report.deviations);
    report.scores = detail::score(report.deviations);
    return report;
}

/// Composite scores from an already-computed deviation grid.
inline CompositeReport composite_from_deviations(std::vector<DeviationRow> rows, MissingPolicy missing = MissingPolicy::error) {
    CompositeReport report;
    if (rows.empty()) {
        throw DataError("composite_from_deviations: no rows");
    }
    detail::check_grid(detail::grid_holes(rows), missing, report.warnings);
    detail::sort_deviations(rows);
    report.deviations = std::move(rows);
    report.scores = detail::score(report.deviations);
    return report;
}

/// `model,region,outcome,r_dev,mae_dev,ci_dev`
inline std::vector<DeviationRow> parse_deviations(const csv::Table &raw) {
    const auto m = raw.require("model"), g = raw.require("region"), o = raw.require("outcome"),
               r = raw.require("r_dev"), e = raw.require("mae_dev"), c = raw.require("ci_dev");
    std::vector<DeviationRow> out;
    for (const auto &cells : raw.rows) {
        DeviationRow row;
        row.model = cells[m];
        row.region = cells[g];
        row.outcome = cells[o];
        const std::string label = raw.source + " " + row.model + "/" + row.region + "/" + row.outcome;
        auto rv = csv::parse_double(cells[r], label);
        auto ev = csv::parse_double(cells[e], label);
        auto cv = csv::parse_double(cells[c], label);
        if (!rv || !ev || !cv) {
            throw DataError(label + ": empty deviation");
        }
        row.r_dev = *rv;
        row.mae_dev = *ev;
        row.ci_dev = *cv;
        out.push_back(std::move(row));
    }
    return out;
}

inline std::string deviations_to_csv(const CompositeReport &report) {
    csv::Writer w({"model", "region", "outcome", "r", "mae_std", "ci_coverage", "r_dev", "mae_dev", "ci_dev"});
    auto opt = [](const std::optional<double> &v) { return v ? csv::format_double(*v) : std::string(); };
    for (const auto &d : report.deviations) {
        w.row({d.model, d.region, d.outcome, opt(d.r), opt(d.mae_std), opt(d.ci), csv::format_double(d.r_dev),
               csv::format_double(d.mae_dev), csv::format_double(d.ci_dev)});
    }
    return w.text();
}

// ---------------------------------------------------------------------------------------------
// Tiers

enum class Tier { reliable, moderate, caution, limited };

inline const char *to_string(Tier t) {
    switch (t) {
    case Tier::reliable:
        return "reliable";
    case Tier::moderate:
        return "moderate";
    case Tier::caution:
        return "caution";
    case Tier::limited:
        return "limited";
    }
    return "?";
}

struct RankedRow {
    std::string model;
    std::string outcome;
    double composite = 0.0;
    int rank = 0;
    Tier tier = Tier::limited;
};

struct Ranking {
    double threshold = 0.0;
    double moderate = 0.0;
    std::vector<RankedRow> rows; // grouped by model, best first
};

/// Mean composite over every (model, outcome) in the report.
inline double mean_composite(const CompositeReport &report) {
    if (report.scores.empty()) {
        return 0.0;
    }
    double total = 0.0;
    for (const auto &s : report.scores) {
        total += s.composite;
    }
    return total / static_cast<double>(report.scores.size());
}

/// Tiers: reliable (>= threshold), moderate (>= moderate cutoff, default the mean composite),
/// caution (> 0), limited (<= 0).
inline Ranking rank_models(const CompositeReport &report, double threshold,
                           std::optional<double> moderate = std::nullopt) {
    Ranking out;
    out.threshold = threshold;
    out.moderate = moderate.value_or(mean_composite(report));
    for (const auto &s : report.scores) {
        Tier tier = Tier::limited;
        if (s.composite >= threshold) {
            tier = Tier::reliable;
        } else if (s.composite >= out.moderate) {
            tier = Tier::moderate;
        } else if (s.composite > 0.0) {
            tier = Tier::caution;
        }
        out.rows.push_back({s.model, s.outcome, s.composite, s.rank, tier});
    }
    return out;
}

/// `model,outcome,composite,rank,tier`
inline std::string ranking_to_csv(const Ranking &ranking) {
    csv::Writer w({"model", "outcome", "composite", "rank", "tier"});
    for (const auto &r : ranking.rows) {
        w.row({r.model, r.outcome, csv::format_double(r.composite), std::to_string(r.rank), to_string(r.tier)});
    }
    return w.text();
}

} // namespace shapesynth
