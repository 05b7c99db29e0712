#pragma once

// Truncate-replicate-sample integerisation and expansion of weights into synthetic agents.

#include "shapesynth/csv.hpp"
#include "shapesynth/error.hpp"
#include "shapesynth/harmonize.hpp"
#include "shapesynth/rng.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace shapesynth {

struct IntegerCounts {
    std::string zone_id;
    std::vector<std::uint32_t> counts; // aligned with survey records
    std::int64_t total = 0;            // T_z = round(sum of weights)
    std::int64_t deficit = 0;          // D = T_z - sum of truncated weights

    friend bool operator==(const IntegerCounts &, const IntegerCounts &) = default;
};

namespace detail {

/// Inclusion probabilities proportional to `frac` summing to `draws`, each capped at 1.
inline std::vector<double> capped_inclusion(std::span<const double> frac, std::int64_t draws) {
    std::vector<double> p(frac.size(), 0.0);
    std::vector<bool> capped(frac.size(), false);
    std::int64_t remaining = draws;
    for (;;) {
        double mass = 0.0;
        for (std::size_t i = 0; i < frac.size(); ++i) {
            if (!capped[i]) {
                mass += frac[i];
            }
        }
        if (remaining <= 0 || mass <= 0.0) {
            break;
        }
        const double scale = static_cast<double>(remaining) / mass;
        bool newly_capped = false;
        for (std::size_t i = 0; i < frac.size(); ++i) {
            if (!capped[i] && frac[i] * scale >= 1.0) {
                capped[i] = true;
                p[i] = 1.0;
                --remaining;
                newly_capped = true;
            }
        }
        if (!newly_capped) {
            for (std::size_t i = 0; i < frac.size(); ++i) {
                if (!capped[i]) {
                    p[i] = frac[i] * scale;
                }
            }
            break;
        }
    }
    return p;
}

} // namespace detail

/// Integerise one zone's weights. Each weight is truncated; the deficit D = round(sum w) - sum
/// floor(w) is filled by systematic sampling over the fractional parts: one uniform start u in
/// [0, 1) and D unit-spaced pointers walked over the cumulative inclusion probabilities
/// p_i = f_i * D / sum(f). A record is selected at most once; if some p_i would exceed 1 it is
/// capped and the remainder spread over the others. The random start comes from the stream
/// keyed by (seed, zone_id), so results do not depend on processing order.
inline IntegerCounts integerise_trs(std::span<const double> weights, std::uint64_t seed, std::string_view zone_id) {
    IntegerCounts out;
    out.zone_id = std::string(zone_id);
    out.counts.resize(weights.size());

    double sum = 0.0;
    std::int64_t truncated = 0;
    std::vector<double> frac(weights.size());
    for (std::size_t i = 0; i < weights.size(); ++i) {
        const double w = weights[i];
        if (!std::isfinite(w) || w < 0.0) {
            throw DataError("integerise: zone '" + out.zone_id + "' weight " + std::to_string(i) +
                            " is negative or not finite");
        }
        const double base = std::floor(w);
        if (base > 4.0e9) {
            throw DataError("integerise: zone '" + out.zone_id + "' weight too large");
        }
        out.counts[i] = static_cast<std::uint32_t>(base);
        truncated += static_cast<std::int64_t>(base);
        frac[i] = w - base;
        sum += w;
    }
    out.total = std::llround(sum);
    out.deficit = out.total - truncated;
    if (out.deficit < 0) {
        throw Error("integerise: zone '" + out.zone_id + "' negative deficit");
    }
    if (out.deficit == 0) {
        return out;
    }

    const auto p = detail::capped_inclusion(frac, out.deficit);
    rng::Stream stream(seed, zone_id);
    const double start = stream.uniform();
    std::vector<bool> picked(weights.size(), false);
    std::int64_t selected = 0;
    double cum = 0.0;
    double pointer = start;
    for (std::size_t i = 0; i < p.size() && selected < out.deficit; ++i) {
        if (p[i] <= 0.0) {
            continue;
        }
        cum += p[i];
        if (pointer < cum) {
            picked[i] = true;
            ++selected;
            pointer += 1.0;
        }
    }
    // Rounding in the cumulative sum can leave the last pointer just past the end.
    for (std::size_t i = p.size(); i-- > 0 && selected < out.deficit;) {
        if (p[i] > 0.0 && !picked[i]) {
            picked[i] = true;
            ++selected;
        }
    }
    if (selected != out.deficit) {
        throw Error("integerise: zone '" + out.zone_id + "' could not place all fractional draws");
    }
    for (std::size_t i = 0; i < picked.size(); ++i) {
        if (picked[i]) {
            ++out.counts[i];
        }
    }
    return out;
}

/// Expanded agents. Rows are ordered by (zone, survey id, replicate); attribute values are
/// copied from the source survey record.
struct SyntheticPopulation {
    struct Row {
        std::uint32_t zone;      // index into zone_ids
        std::uint32_t record;    // index into survey_ids
        std::uint32_t replicate; // 1-based

        friend bool operator==(const Row &, const Row &) = default;
    };

    std::vector<std::string> zone_ids;
    std::vector<std::string> survey_ids;
    std::vector<std::string> attribute_names;
    std::vector<Row> rows;
    std::vector<std::uint8_t> values; // row-major, rows.size() * attribute_names.size()

    [[nodiscard]] std::size_t size() const noexcept { return rows.size(); }

    [[nodiscard]] std::uint8_t attribute(std::size_t row, std::size_t attr) const {
        return values[row * attribute_names.size() + attr];
    }

    friend bool operator==(const SyntheticPopulation &, const SyntheticPopulation &) = default;
};

/// Expand per-zone counts (any order; emitted by zone id) into agent rows.
inline SyntheticPopulation expand(std::span<const IntegerCounts> zones, const SurveyTable &survey,
                                  const std::vector<std::string> &attributes) {
    SyntheticPopulation pop;
    pop.survey_ids = survey.ids;
    pop.attribute_names = attributes;
    std::vector<std::size_t> attr_index;
    for (const auto &name : attributes) {
        auto a = survey.attribute_index(name);
        if (!a) {
            throw SchemaError("expand: attribute '" + name + "' is not in the survey");
        }
        attr_index.push_back(*a);
    }
    std::vector<const IntegerCounts *> order;
    for (const auto &z : zones) {
        if (z.counts.size() != survey.size()) {
            throw JoinError("expand: zone '" + z.zone_id + "' has counts for " + std::to_string(z.counts.size()) +
                            " records, survey has " + std::to_string(survey.size()));
        }
        order.push_back(&z);
    }
    std::sort(order.begin(), order.end(), [](auto *a, auto *b) { return a->zone_id < b->zone_id; });

    std::size_t total = 0;
    for (const auto *z : order) {
        for (auto c : z->counts) {
            total += c;
        }
    }
    pop.rows.reserve(total);
    pop.values.reserve(total * attributes.size());
    for (std::size_t zi = 0; zi < order.size(); ++zi) {
        pop.zone_ids.push_back(order[zi]->zone_id);
        const auto &counts = order[zi]->counts;
        for (std::size_t i = 0; i < counts.size(); ++i) {
            for (std::uint32_t r = 1; r <= counts[i]; ++r) {
                pop.rows.push_back({static_cast<std::uint32_t>(zi), static_cast<std::uint32_t>(i), r});
                for (auto a : attr_index) {
                    pop.values.push_back(survey.attributes[a][i]);
                }
            }
        }
    }
    return pop;
}

inline SyntheticPopulation expand(const IntegerCounts &zone, const SurveyTable &survey,
                                  const std::vector<std::string> &attributes) {
    return expand(std::span<const IntegerCounts>(&zone, 1), survey, attributes);
}

/// `zone_id,survey_id,replicate,<attributes...>`
inline std::string population_to_csv(const SyntheticPopulation &pop) {
    std::vector<std::string> header{"zone_id", "survey_id", "replicate"};
    header.insert(header.end(), pop.attribute_names.begin(), pop.attribute_names.end());
    csv::Writer w(header);
    std::vector<std::string> cells;
    for (std::size_t r = 0; r < pop.rows.size(); ++r) {
        const auto &row = pop.rows[r];
        cells = {pop.zone_ids[row.zone], pop.survey_ids[row.record], std::to_string(row.replicate)};
        for (std::size_t a = 0; a < pop.attribute_names.size(); ++a) {
            cells.push_back(pop.attribute(r, a) ? "1" : "0");
        }
        w.row(cells);
    }
    return w.text();
}

/// `zone_id,survey_id,count`; zero counts are omitted.
inline std::string counts_to_csv(std::span<const IntegerCounts> zones, const SurveyTable &survey) {
    csv::Writer w({"zone_id", "survey_id", "count"});
    for (const auto &z : zones) {
        for (std::size_t i = 0; i < z.counts.size(); ++i) {
            if (z.counts[i] != 0) {
                w.row({z.zone_id, survey.ids.at(i), std::to_string(z.counts[i])});
            }
        }
    }
    return w.text();
}

/// Inverse of counts_to_csv, joined to `survey` by id.
inline std::vector<IntegerCounts> parse_counts(const csv::Table &raw, const SurveyTable &survey) {
    const auto zc = raw.require("zone_id");
    const auto sc = raw.require("survey_id");
    const auto cc = raw.require("count");
    std::unordered_map<std::string, std::size_t> position;
    for (std::size_t i = 0; i < survey.size(); ++i) {
        position.emplace(survey.ids[i], i);
    }
    std::vector<IntegerCounts> out;
    std::unordered_map<std::string, std::size_t> zone_pos;
    for (const auto &cells : raw.rows) {
        auto it = position.find(cells[sc]);
        if (it == position.end()) {
            throw JoinError(raw.source + ": survey_id '" + cells[sc] + "' not found in survey");
        }
        auto value = csv::parse_double(cells[cc], raw.source + " count");
        if (!value || *value < 0 || *value != std::floor(*value) || *value > 4.0e9) {
            throw DataError(raw.source + ": count for '" + cells[sc] + "' is not a non-negative integer");
        }
        auto [zit, inserted] = zone_pos.emplace(cells[zc], out.size());
        if (inserted) {
            out.push_back({cells[zc], std::vector<std::uint32_t>(survey.size(), 0), 0, 0});
        }
        auto &zone = out[zit->second];
        zone.counts[it->second] += static_cast<std::uint32_t>(*value);
        zone.total += static_cast<std::int64_t>(*value);
    }
    std::sort(out.begin(), out.end(), [](const auto &a, const auto &b) { return a.zone_id < b.zone_id; });
    return out;
}

} // namespace shapesynth
