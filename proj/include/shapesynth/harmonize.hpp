#pragma once

// Survey and marginal ingestion. Raw categorical survey columns are recoded into one category
// per constraint variable; zone marginal tables are mapped onto the same category layout.

#include "shapesynth/csv.hpp"
#include "shapesynth/error.hpp"
#include "shapesynth/rng.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

namespace shapesynth {

inline constexpr int kRecodeSpecVersion = 1;

// ---------------------------------------------------------------------------------------------
// Recode specification

struct Category {
    std::string label;
    std::vector<std::string> values;          // raw survey values mapping here
    std::optional<double> min;                // numeric range, inclusive
    std::optional<double> max;                // numeric range, exclusive
    std::vector<std::string> marginal_columns; // defaults to "<variable>.<label>"
};

struct ConstraintVariable {
    std::string name;
    std::string column;
    std::vector<Category> categories;
};

struct AttributeSpec {
    std::string name;
    std::string column;
    std::vector<std::string> true_values;
    std::vector<std::string> false_values;
};

struct RecodeSpec {
    int spec_version = kRecodeSpecVersion;
    std::string id_column = "id";
    std::string reference_variable;
    std::vector<ConstraintVariable> variables;
    std::vector<AttributeSpec> attributes;
    std::vector<std::string> carried; // raw columns kept verbatim, e.g. state of residence
};

namespace detail {

inline std::string_view trim(std::string_view s) {
    while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) {
        s.remove_prefix(1);
    }
    while (!s.empty() && (s.back() == ' ' || s.back() == '\t')) {
        s.remove_suffix(1);
    }
    return s;
}

inline std::optional<double> try_number(std::string_view s) {
    s = trim(s);
    if (s.empty()) {
        return std::nullopt;
    }
    // Survey exports sometimes carry currency formatting.
    std::string cleaned;
    for (char ch : s) {
        if (ch != '$' && ch != ',') {
            cleaned.push_back(ch);
        }
    }
    double v = 0.0;
    auto [ptr, ec] = std::from_chars(cleaned.data(), cleaned.data() + cleaned.size(), v);
    if (ec != std::errc{} || ptr != cleaned.data() + cleaned.size() || !std::isfinite(v)) {
        return std::nullopt;
    }
    return v;
}

template <typename T>
T json_get(const nlohmann::json &node, const char *key, std::string_view where) {
    if (!node.contains(key)) {
        throw SchemaError(std::string(where) + ": missing key '" + key + "'");
    }
    try {
        return node.at(key).get<T>();
    } catch (const nlohmann::json::exception &e) {
        throw SchemaError(std::string(where) + ": bad value for '" + key + "': " + e.what());
    }
}

inline void reject_unknown_keys(const nlohmann::json &node, std::initializer_list<std::string_view> known,
                                std::string_view where) {
    for (const auto &[key, value] : node.items()) {
        if (std::find(known.begin(), known.end(), key) == known.end()) {
            throw SchemaError(std::string(where) + ": unknown key '" + key + "'");
        }
    }
}

/// List of strings; numbers are accepted and rendered as written (e.g. 1 -> "1").
inline std::vector<std::string> string_list(const nlohmann::json &node, const char *key,
                                            std::vector<std::string> fallback, std::string_view where) {
    if (!node.contains(key)) {
        return fallback;
    }
    const auto &list = node.at(key);
    if (!list.is_array()) {
        throw SchemaError(std::string(where) + ": '" + key + "' must be a list");
    }
    std::vector<std::string> out;
    for (const auto &v : list) {
        if (v.is_string()) {
            out.push_back(v.get<std::string>());
        } else if (v.is_number()) {
            out.push_back(v.dump());
        } else {
            throw SchemaError(std::string(where) + ": '" + key + "' entries must be strings or numbers");
        }
    }
    return out;
}

} // namespace detail

/// Check internal consistency: unique names and columns, unambiguous category mappings.
inline void validate(const RecodeSpec &spec) {
    if (spec.spec_version != kRecodeSpecVersion) {
        throw SchemaError("recode spec: unsupported spec_version " + std::to_string(spec.spec_version));
    }
    if (spec.variables.empty()) {
        throw SchemaError("recode spec: no constraint variables");
    }
    std::set<std::string> names;
    std::set<std::string> columns{spec.id_column};
    auto claim_column = [&](const std::string &col, const std::string &owner) {
        if (col.empty() || !columns.insert(col).second) {
            throw SchemaError("recode spec: column '" + col + "' of '" + owner + "' is empty or reused");
        }
    };
    auto claim_name = [&](const std::string &name) {
        if (name.empty() || name.find(',') != std::string::npos || !names.insert(name).second) {
            throw SchemaError("recode spec: name '" + name + "' is empty, contains a comma, or is reused");
        }
    };
    for (const auto &var : spec.variables) {
        claim_name(var.name);
        claim_column(var.column, var.name);
        if (var.categories.size() < 2 || var.categories.size() > 65535) {
            throw SchemaError("recode spec: variable '" + var.name + "' needs at least two categories");
        }
        std::map<std::string, std::string> owner_of_value;
        std::set<std::string> labels;
        for (const auto &cat : var.categories) {
            if (cat.label.empty() || !labels.insert(cat.label).second) {
                throw SchemaError("recode spec: variable '" + var.name + "' has empty or duplicate label '" +
                                  cat.label + "'");
            }
            if (cat.values.empty() && !cat.min && !cat.max) {
                throw SchemaError("recode spec: category '" + var.name + "." + cat.label +
                                  "' maps no raw values");
            }
            for (const auto &v : cat.values) {
                auto [it, inserted] = owner_of_value.emplace(v, cat.label);
                if (!inserted && it->second != cat.label) {
                    throw SchemaError("recode spec: raw value '" + v + "' of '" + var.name +
                                      "' maps to both '" + it->second + "' and '" + cat.label + "'");
                }
            }
            if (cat.min && cat.max && !(*cat.min < *cat.max)) {
                throw SchemaError("recode spec: empty range for '" + var.name + "." + cat.label + "'");
            }
        }
        // Category labels double as raw values so harmonized output reloads unchanged.
        for (const auto &cat : var.categories) {
            auto it = owner_of_value.find(cat.label);
            if (it != owner_of_value.end() && it->second != cat.label) {
                throw SchemaError("recode spec: label '" + cat.label + "' of '" + var.name +
                                  "' is also a raw value of '" + it->second + "'");
            }
        }
        for (std::size_t a = 0; a < var.categories.size(); ++a) {
            for (std::size_t b = a + 1; b < var.categories.size(); ++b) {
                const auto &x = var.categories[a];
                const auto &y = var.categories[b];
                if (!(x.min || x.max) || !(y.min || y.max)) {
                    continue;
                }
                const double xlo = x.min.value_or(-INFINITY), xhi = x.max.value_or(INFINITY);
                const double ylo = y.min.value_or(-INFINITY), yhi = y.max.value_or(INFINITY);
                if (xlo < yhi && ylo < xhi) {
                    throw SchemaError("recode spec: ranges of '" + var.name + "." + x.label + "' and '" +
                                      var.name + "." + y.label + "' overlap");
                }
            }
        }
    }
    for (const auto &attr : spec.attributes) {
        claim_name(attr.name);
        claim_column(attr.column, attr.name);
        for (const auto &t : attr.true_values) {
            if (std::find(attr.false_values.begin(), attr.false_values.end(), t) != attr.false_values.end()) {
                throw SchemaError("recode spec: attribute '" + attr.name + "' lists '" + t +
                                  "' as both true and false");
            }
        }
    }
    for (const auto &col : spec.carried) {
        claim_column(col, col);
    }
    if (std::none_of(spec.variables.begin(), spec.variables.end(),
                     [&](const auto &v) { return v.name == spec.reference_variable; })) {
        throw SchemaError("recode spec: reference_variable '" + spec.reference_variable +
                          "' is not a constraint variable");
    }
}

/// Parse the JSON form of a recode spec (schema documented in README.md).
inline RecodeSpec parse_recode_spec(const nlohmann::json &root) {
    using detail::json_get;
    constexpr std::string_view where = "recode spec";
    if (!root.is_object()) {
        throw SchemaError("recode spec: top level must be an object");
    }
    detail::reject_unknown_keys(root, {"spec_version", "id_column", "reference_variable", "variables",
                                       "attributes", "carry"},
                                where);
    RecodeSpec spec;
    spec.spec_version = json_get<int>(root, "spec_version", where);
    if (root.contains("id_column")) {
        spec.id_column = json_get<std::string>(root, "id_column", where);
    }
    for (const auto &vnode : json_get<nlohmann::json>(root, "variables", where)) {
        ConstraintVariable var;
        detail::reject_unknown_keys(vnode, {"name", "column", "categories"}, where);
        var.name = json_get<std::string>(vnode, "name", where);
        var.column = vnode.contains("column") ? json_get<std::string>(vnode, "column", where) : var.name;
        for (const auto &cnode : json_get<nlohmann::json>(vnode, "categories", where)) {
            const std::string cwhere = "recode spec variable '" + var.name + "'";
            detail::reject_unknown_keys(cnode, {"label", "values", "min", "max", "marginal_columns"}, cwhere);
            Category cat;
            cat.label = json_get<std::string>(cnode, "label", cwhere);
            cat.values = detail::string_list(cnode, "values", {}, cwhere);
            if (cnode.contains("min") && !cnode.at("min").is_null()) {
                cat.min = json_get<double>(cnode, "min", cwhere);
            }
            if (cnode.contains("max") && !cnode.at("max").is_null()) {
                cat.max = json_get<double>(cnode, "max", cwhere);
            }
            cat.marginal_columns =
                detail::string_list(cnode, "marginal_columns", {var.name + "." + cat.label}, cwhere);
            var.categories.push_back(std::move(cat));
        }
        spec.variables.push_back(std::move(var));
    }
    if (root.contains("attributes")) {
        for (const auto &anode : root.at("attributes")) {
            detail::reject_unknown_keys(anode, {"name", "column", "true", "false"}, where);
            AttributeSpec attr;
            attr.name = json_get<std::string>(anode, "name", where);
            attr.column = anode.contains("column") ? json_get<std::string>(anode, "column", where) : attr.name;
            attr.true_values = detail::string_list(anode, "true", {"1"}, where);
            attr.false_values = detail::string_list(anode, "false", {"0"}, where);
            spec.attributes.push_back(std::move(attr));
        }
    }
    spec.carried = detail::string_list(root, "carry", {}, where);
    if (root.contains("reference_variable")) {
        spec.reference_variable = json_get<std::string>(root, "reference_variable", where);
    } else if (std::any_of(spec.variables.begin(), spec.variables.end(),
                           [](const auto &v) { return v.name == "age"; })) {
        spec.reference_variable = "age";
    } else if (!spec.variables.empty()) {
        spec.reference_variable = spec.variables.front().name;
    }
    validate(spec);
    return spec;
}

inline RecodeSpec load_recode_spec(const std::filesystem::path &path) {
    nlohmann::json root;
    try {
        root = nlohmann::json::parse(csv::read_text(path));
    } catch (const nlohmann::json::parse_error &e) {
        throw SchemaError(path.string() + ": " + e.what());
    }
    try {
        return parse_recode_spec(root);
    } catch (const SchemaError &e) {
        throw SchemaError(path.string() + ": " + e.what());
    }
}

/// Category index for a raw value, or nullopt when missing/unmappable.
inline std::optional<std::uint16_t> recode_value(const ConstraintVariable &var, std::string_view raw) {
    raw = detail::trim(raw);
    if (raw.empty()) {
        return std::nullopt;
    }
    for (std::size_t c = 0; c < var.categories.size(); ++c) {
        const auto &cat = var.categories[c];
        if (cat.label == raw || std::find(cat.values.begin(), cat.values.end(), raw) != cat.values.end()) {
            return static_cast<std::uint16_t>(c);
        }
    }
    if (auto num = detail::try_number(raw)) {
        for (std::size_t c = 0; c < var.categories.size(); ++c) {
            const auto &cat = var.categories[c];
            if (!(cat.min || cat.max)) {
                continue;
            }
            if ((!cat.min || *num >= *cat.min) && (!cat.max || *num < *cat.max)) {
                return static_cast<std::uint16_t>(c);
            }
        }
    }
    return std::nullopt;
}

/// 1/0 for a raw attribute value, or nullopt when missing/unmappable. The canonical "1"/"0"
/// are accepted unless the spec assigns them the opposite meaning.
inline std::optional<std::uint8_t> recode_attribute(const AttributeSpec &attr, std::string_view raw) {
    raw = detail::trim(raw);
    if (raw.empty()) {
        return std::nullopt;
    }
    auto listed = [](const std::vector<std::string> &values, std::string_view v) {
        return std::find(values.begin(), values.end(), v) != values.end();
    };
    if (listed(attr.true_values, raw)) {
        return 1;
    }
    if (listed(attr.false_values, raw)) {
        return 0;
    }
    if (raw == "1" && !listed(attr.false_values, "1")) {
        return 1;
    }
    if (raw == "0" && !listed(attr.true_values, "0")) {
        return 0;
    }
    return std::nullopt;
}

// ---------------------------------------------------------------------------------------------
// Tables

struct VariableLayout {
    std::string name;
    std::vector<std::string> categories;

    friend bool operator==(const VariableLayout &, const VariableLayout &) = default;
};

inline std::vector<VariableLayout> layout_of(const RecodeSpec &spec) {
    std::vector<VariableLayout> out;
    for (const auto &var : spec.variables) {
        VariableLayout layout{var.name, {}};
        for (const auto &cat : var.categories) {
            layout.categories.push_back(cat.label);
        }
        out.push_back(std::move(layout));
    }
    return out;
}

/// Harmonized survey microdata, stored by column. Records are kept sorted by id.
struct SurveyTable {
    std::string id_column = "id";
    std::vector<VariableLayout> variables;
    std::vector<std::string> variable_columns; // raw column each variable came from
    std::vector<std::string> ids;
    std::vector<std::vector<std::uint16_t>> codes; // [variable][record] -> category index

    std::vector<std::string> attribute_names;
    std::vector<std::string> attribute_columns;
    std::vector<std::vector<std::uint8_t>> attributes; // [attribute][record] -> 0/1

    std::vector<std::string> carried_names;
    std::vector<std::vector<std::string>> carried; // [column][record]

    [[nodiscard]] std::size_t size() const noexcept { return ids.size(); }

    [[nodiscard]] std::optional<std::size_t> variable_index(std::string_view name) const {
        for (std::size_t v = 0; v < variables.size(); ++v) {
            if (variables[v].name == name) {
                return v;
            }
        }
        return std::nullopt;
    }

    [[nodiscard]] std::optional<std::size_t> attribute_index(std::string_view name) const {
        for (std::size_t a = 0; a < attribute_names.size(); ++a) {
            if (attribute_names[a] == name) {
                return a;
            }
        }
        return std::nullopt;
    }

    /// Position of (variable, category) in the flattened indicator vector.
    [[nodiscard]] std::size_t indicator_position(std::size_t variable, std::size_t category) const {
        std::size_t offset = 0;
        for (std::size_t v = 0; v < variable; ++v) {
            offset += variables[v].categories.size();
        }
        return offset + category;
    }

    [[nodiscard]] std::size_t indicator_width() const {
        std::size_t n = 0;
        for (const auto &v : variables) {
            n += v.categories.size();
        }
        return n;
    }

    /// Binary indicator row for one record: exactly one bit set per constraint variable.
    [[nodiscard]] std::vector<std::uint8_t> indicators(std::size_t record) const {
        std::vector<std::uint8_t> bits(indicator_width(), 0);
        for (std::size_t v = 0; v < variables.size(); ++v) {
            bits[indicator_position(v, codes[v][record])] = 1;
        }
        return bits;
    }

    /// Records at the given positions (any order); output stays sorted by id.
    [[nodiscard]] SurveyTable subset(std::vector<std::size_t> positions) const {
        std::sort(positions.begin(), positions.end());
        positions.erase(std::unique(positions.begin(), positions.end()), positions.end());
        SurveyTable out;
        out.id_column = id_column;
        out.variables = variables;
        out.variable_columns = variable_columns;
        out.attribute_names = attribute_names;
        out.attribute_columns = attribute_columns;
        out.carried_names = carried_names;
        out.codes.resize(codes.size());
        out.attributes.resize(attributes.size());
        out.carried.resize(carried.size());
        for (auto p : positions) {
            out.ids.push_back(ids.at(p));
            for (std::size_t v = 0; v < codes.size(); ++v) {
                out.codes[v].push_back(codes[v][p]);
            }
            for (std::size_t a = 0; a < attributes.size(); ++a) {
                out.attributes[a].push_back(attributes[a][p]);
            }
            for (std::size_t c = 0; c < carried.size(); ++c) {
                out.carried[c].push_back(carried[c][p]);
            }
        }
        return out;
    }

    friend bool operator==(const SurveyTable &, const SurveyTable &) = default;
};

struct SurveyLoad {
    SurveyTable table;
    std::size_t dropped = 0;
    std::vector<std::string> warnings;
};

/// Recode parsed survey CSV. Rows with a missing or unmappable constraint or attribute value
/// are dropped and counted.
inline SurveyLoad recode_survey(const csv::Table &raw, const RecodeSpec &spec) {
    validate(spec);
    const auto id_col = raw.require(spec.id_column);
    std::vector<std::size_t> var_cols;
    for (const auto &var : spec.variables) {
        var_cols.push_back(raw.require(var.column));
    }
    std::vector<std::size_t> attr_cols;
    for (const auto &attr : spec.attributes) {
        attr_cols.push_back(raw.require(attr.column));
    }
    std::vector<std::size_t> carry_cols;
    for (const auto &col : spec.carried) {
        carry_cols.push_back(raw.require(col));
    }

    struct Row {
        std::string id;
        std::vector<std::uint16_t> codes;
        std::vector<std::uint8_t> attrs;
        std::vector<std::string> carried;
    };
    std::vector<Row> rows;
    rows.reserve(raw.rows.size());
    SurveyLoad result;
    std::map<std::string, std::size_t> unmappable; // column -> count of non-empty unmapped values

    for (const auto &cells : raw.rows) {
        Row row;
        row.id = std::string(detail::trim(cells[id_col]));
        bool keep = !row.id.empty();
        for (std::size_t v = 0; keep && v < spec.variables.size(); ++v) {
            const auto &cell = cells[var_cols[v]];
            auto code = recode_value(spec.variables[v], cell);
            if (!code) {
                if (!detail::trim(cell).empty()) {
                    ++unmappable[spec.variables[v].column];
                }
                keep = false;
                break;
            }
            row.codes.push_back(*code);
        }
        for (std::size_t a = 0; keep && a < spec.attributes.size(); ++a) {
            const auto &cell = cells[attr_cols[a]];
            auto flag = recode_attribute(spec.attributes[a], cell);
            if (!flag) {
                if (!detail::trim(cell).empty()) {
                    ++unmappable[spec.attributes[a].column];
                }
                keep = false;
                break;
            }
            row.attrs.push_back(*flag);
        }
        if (!keep) {
            ++result.dropped;
            continue;
        }
        for (auto c : carry_cols) {
            row.carried.emplace_back(detail::trim(cells[c]));
        }
        rows.push_back(std::move(row));
    }
    for (const auto &[column, count] : unmappable) {
        result.warnings.push_back(raw.source + ": " + std::to_string(count) + " unmappable value(s) in column '" +
                                  column + "' treated as missing");
    }
    if (result.dropped > 0) {
        result.warnings.push_back(raw.source + ": dropped " + std::to_string(result.dropped) +
                                  " row(s) with missing values");
    }
    if (rows.empty()) {
        throw DataError(raw.source + ": no usable survey records after dropping missing values");
    }
    std::sort(rows.begin(), rows.end(), [](const Row &a, const Row &b) { return a.id < b.id; });
    for (std::size_t i = 1; i < rows.size(); ++i) {
        if (rows[i].id == rows[i - 1].id) {
            throw DataError(raw.source + ": duplicate id '" + rows[i].id + "'");
        }
    }

    auto &t = result.table;
    t.id_column = spec.id_column;
    t.variables = layout_of(spec);
    for (const auto &var : spec.variables) {
        t.variable_columns.push_back(var.column);
    }
    for (const auto &attr : spec.attributes) {
        t.attribute_names.push_back(attr.name);
        t.attribute_columns.push_back(attr.column);
    }
    t.carried_names = spec.carried;
    t.codes.assign(spec.variables.size(), {});
    t.attributes.assign(spec.attributes.size(), {});
    t.carried.assign(spec.carried.size(), {});
    for (auto &row : rows) {
        t.ids.push_back(std::move(row.id));
        for (std::size_t v = 0; v < row.codes.size(); ++v) {
            t.codes[v].push_back(row.codes[v]);
        }
        for (std::size_t a = 0; a < row.attrs.size(); ++a) {
            t.attributes[a].push_back(row.attrs[a]);
        }
        for (std::size_t c = 0; c < row.carried.size(); ++c) {
            t.carried[c].push_back(std::move(row.carried[c]));
        }
    }
    return result;
}

inline SurveyLoad load_survey(const std::filesystem::path &path, const RecodeSpec &spec) {
    return recode_survey(csv::read(path), spec);
}

/// Harmonized CSV: raw column names, category labels as values, attributes as 1/0.
/// Loading it again with the same spec reproduces the table.
inline std::string survey_to_csv(const SurveyTable &t) {
    std::vector<std::string> header{t.id_column};
    header.insert(header.end(), t.variable_columns.begin(), t.variable_columns.end());
    header.insert(header.end(), t.attribute_columns.begin(), t.attribute_columns.end());
    header.insert(header.end(), t.carried_names.begin(), t.carried_names.end());
    csv::Writer w(header);
    std::vector<std::string> cells;
    for (std::size_t i = 0; i < t.size(); ++i) {
        cells.clear();
        cells.push_back(t.ids[i]);
        for (std::size_t v = 0; v < t.variables.size(); ++v) {
            cells.push_back(t.variables[v].categories[t.codes[v][i]]);
        }
        for (const auto &col : t.attributes) {
            cells.push_back(col[i] ? "1" : "0");
        }
        for (const auto &col : t.carried) {
            cells.push_back(col[i]);
        }
        w.row(cells);
    }
    return w.text();
}

/// Proportional stratified sample without replacement. Strata are the cross-classification of
/// `strata_vars`; each stratum contributes floor(target_n * share) records, so the result can
/// fall slightly short of target_n.
inline SurveyTable stratified_sample(const SurveyTable &survey, const std::vector<std::string> &strata_vars,
                                     std::size_t target_n, std::uint64_t seed) {
    if (target_n == 0) {
        throw DataError("stratified_sample: target_n must be positive");
    }
    if (target_n > survey.size()) {
        throw DataError("stratified_sample: target_n " + std::to_string(target_n) + " exceeds the " +
                        std::to_string(survey.size()) + " available records");
    }
    std::vector<std::size_t> vars;
    for (const auto &name : strata_vars) {
        auto v = survey.variable_index(name);
        if (!v) {
            throw SchemaError("stratified_sample: unknown stratification variable '" + name + "'");
        }
        vars.push_back(*v);
    }

    std::map<std::vector<std::uint16_t>, std::vector<std::size_t>> strata;
    std::vector<std::uint16_t> key(vars.size());
    for (std::size_t i = 0; i < survey.size(); ++i) {
        for (std::size_t k = 0; k < vars.size(); ++k) {
            key[k] = survey.codes[vars[k]][i];
        }
        strata[key].push_back(i);
    }

    const std::uint64_t total = survey.size();
    std::vector<std::size_t> chosen;
    chosen.reserve(target_n);
    for (auto &[stratum, members] : strata) {
        const std::uint64_t take = static_cast<std::uint64_t>(
            (static_cast<unsigned __int128>(target_n) * members.size()) / total);
        if (take == 0) {
            continue;
        }
        std::string label = "stratum";
        for (auto code : stratum) {
            label += ':' + std::to_string(code);
        }
        rng::Stream stream(seed, label);
        // Partial Fisher-Yates: the first `take` slots become a uniform sample.
        for (std::uint64_t j = 0; j < take; ++j) {
            const auto pick = j + stream.below(members.size() - j);
            std::swap(members[j], members[pick]);
            chosen.push_back(members[j]);
        }
    }
    return survey.subset(std::move(chosen));
}

/// Records whose carried `region_column` equals `region_value`.
inline SurveyTable filter_by_region(const SurveyTable &survey, std::string_view region_column,
                                    std::string_view region_value) {
    auto it = std::find(survey.carried_names.begin(), survey.carried_names.end(), region_column);
    if (it == survey.carried_names.end()) {
        throw SchemaError("filter_by_region: column '" + std::string(region_column) +
                          "' was not retained at load (add it to 'carry')");
    }
    const auto &col = survey.carried[static_cast<std::size_t>(it - survey.carried_names.begin())];
    std::vector<std::size_t> keep;
    for (std::size_t i = 0; i < col.size(); ++i) {
        if (col[i] == region_value) {
            keep.push_back(i);
        }
    }
    if (keep.empty()) {
        throw DataError("filter_by_region: no records for region '" + std::string(region_value) + "'");
    }
    return survey.subset(std::move(keep));
}

// ---------------------------------------------------------------------------------------------
// Zone marginals

struct Zone {
    std::string id;
    std::vector<std::vector<double>> counts; // [variable][category], persons

    friend bool operator==(const Zone &, const Zone &) = default;
};

/// Zone marginal totals over the same variable layout as the survey. Zones sorted by id.
struct ConstraintTable {
    std::vector<VariableLayout> variables;
    std::string reference_variable;
    std::vector<Zone> zones;

    [[nodiscard]] std::size_t variable_index(std::string_view name) const {
        for (std::size_t v = 0; v < variables.size(); ++v) {
            if (variables[v].name == name) {
                return v;
            }
        }
        throw SchemaError("constraint table: unknown variable '" + std::string(name) + "'");
    }

    /// N_z: the reference variable's category sum.
    [[nodiscard]] double population(const Zone &zone) const {
        const auto &cats = zone.counts.at(variable_index(reference_variable));
        return std::accumulate(cats.begin(), cats.end(), 0.0);
    }

    [[nodiscard]] std::optional<std::size_t> zone_index(std::string_view id) const {
        auto it = std::lower_bound(zones.begin(), zones.end(), id,
                                   [](const Zone &z, std::string_view key) { return z.id < key; });
        if (it == zones.end() || it->id != id) {
            return std::nullopt;
        }
        return static_cast<std::size_t>(it - zones.begin());
    }

    friend bool operator==(const ConstraintTable &, const ConstraintTable &) = default;
};

struct MarginalsLoad {
    ConstraintTable table;
    std::vector<std::string> dropped_zones;
    std::vector<std::string> warnings;
};

inline MarginalsLoad parse_marginals(const csv::Table &raw, const RecodeSpec &spec) {
    validate(spec);
    const auto zone_col = raw.require("zone_id");

    // column -> (variable, category)
    std::unordered_map<std::string, std::pair<std::size_t, std::size_t>> column_map;
    for (std::size_t v = 0; v < spec.variables.size(); ++v) {
        for (std::size_t c = 0; c < spec.variables[v].categories.size(); ++c) {
            for (const auto &col : spec.variables[v].categories[c].marginal_columns) {
                if (!column_map.emplace(col, std::pair{v, c}).second) {
                    throw SchemaError("recode spec: marginal column '" + col + "' mapped twice");
                }
            }
        }
    }
    std::vector<std::optional<std::pair<std::size_t, std::size_t>>> targets(raw.header.size());
    std::vector<std::vector<bool>> covered;
    for (const auto &var : spec.variables) {
        covered.emplace_back(var.categories.size(), false);
    }
    for (std::size_t col = 0; col < raw.header.size(); ++col) {
        if (col == zone_col) {
            continue;
        }
        auto it = column_map.find(raw.header[col]);
        if (it == column_map.end()) {
            throw SchemaError(raw.source + ": unknown category column '" + raw.header[col] + "'");
        }
        targets[col] = it->second;
        covered[it->second.first][it->second.second] = true;
    }
    for (std::size_t v = 0; v < spec.variables.size(); ++v) {
        for (std::size_t c = 0; c < covered[v].size(); ++c) {
            if (!covered[v][c]) {
                throw SchemaError(raw.source + ": missing column '" +
                                  spec.variables[v].categories[c].marginal_columns.front() + "'");
            }
        }
    }

    MarginalsLoad result;
    auto &table = result.table;
    table.variables = layout_of(spec);
    table.reference_variable = spec.reference_variable;
    for (const auto &cells : raw.rows) {
        Zone zone;
        zone.id = std::string(detail::trim(cells[zone_col]));
        if (zone.id.empty()) {
            throw DataError(raw.source + ": empty zone_id");
        }
        for (const auto &var : spec.variables) {
            zone.counts.emplace_back(var.categories.size(), 0.0);
        }
        std::string missing_column;
        for (std::size_t col = 0; col < cells.size(); ++col) {
            if (!targets[col]) {
                continue;
            }
            const std::string context = raw.source + " zone '" + zone.id + "' column '" + raw.header[col] + "'";
            auto value = csv::parse_double(cells[col], context);
            if (!value) {
                if (missing_column.empty()) {
                    missing_column = raw.header[col];
                }
                continue;
            }
            if (!std::isfinite(*value)) {
                throw DataError(context + ": count is not finite");
            }
            if (*value < 0) {
                throw DataError(context + ": negative count");
            }
            zone.counts[targets[col]->first][targets[col]->second] += *value;
        }
        if (!missing_column.empty()) {
            result.dropped_zones.push_back(zone.id);
            result.warnings.push_back(raw.source + ": dropped zone '" + zone.id + "' (missing value in '" +
                                      missing_column + "')");
            continue;
        }
        std::string zero_var;
        for (std::size_t v = 0; v < zone.counts.size() && zero_var.empty(); ++v) {
            if (std::accumulate(zone.counts[v].begin(), zone.counts[v].end(), 0.0) <= 0.0) {
                zero_var = spec.variables[v].name;
            }
        }
        if (!zero_var.empty()) {
            result.dropped_zones.push_back(zone.id);
            result.warnings.push_back(raw.source + ": dropped zone '" + zone.id + "' (zero total for '" +
                                      zero_var + "')");
            continue;
        }
        table.zones.push_back(std::move(zone));
    }
    std::sort(table.zones.begin(), table.zones.end(), [](const Zone &a, const Zone &b) { return a.id < b.id; });
    for (std::size_t i = 1; i < table.zones.size(); ++i) {
        if (table.zones[i].id == table.zones[i - 1].id) {
            throw DataError(raw.source + ": duplicate zone_id '" + table.zones[i].id + "'");
        }
    }
    if (table.zones.empty()) {
        throw DataError(raw.source + ": no usable zones");
    }
    return result;
}

inline MarginalsLoad load_marginals(const std::filesystem::path &path, const RecodeSpec &spec) {
    return parse_marginals(csv::read(path), spec);
}

struct Reconciliation {
    ConstraintTable table;
    std::vector<std::vector<double>> factors; // [zone][variable]; 1.0 for the reference variable
};

/// Rescale every non-reference variable so its category sum equals the zone population N_z.
inline Reconciliation reconcile_marginals(const ConstraintTable &input, std::string_view reference_var) {
    Reconciliation out{input, {}};
    out.table.reference_variable = std::string(reference_var);
    const auto ref = out.table.variable_index(reference_var);
    for (auto &zone : out.table.zones) {
        const auto &rc = zone.counts[ref];
        const double n_z = std::accumulate(rc.begin(), rc.end(), 0.0);
        std::vector<double> factors(zone.counts.size(), 1.0);
        for (std::size_t v = 0; v < zone.counts.size(); ++v) {
            if (v == ref) {
                continue;
            }
            auto &cats = zone.counts[v];
            const double sum = std::accumulate(cats.begin(), cats.end(), 0.0);
            if (sum == n_z) {
                continue;
            }
            if (sum <= 0.0) {
                throw InfeasibleError("reconcile_marginals: zone '" + zone.id + "' variable '" +
                                      out.table.variables[v].name + "' sums to 0 but N_z = " +
                                      csv::format_double(n_z));
            }
            factors[v] = n_z / sum;
            for (auto &x : cats) {
                x *= factors[v];
            }
        }
        out.factors.push_back(std::move(factors));
    }
    return out;
}

/// Table restricted to the listed zone ids (unknown ids ignored).
inline ConstraintTable restrict_zones(const ConstraintTable &table, const std::vector<std::string> &ids) {
    std::unordered_set<std::string> wanted(ids.begin(), ids.end());
    ConstraintTable out{table.variables, table.reference_variable, {}};
    for (const auto &z : table.zones) {
        if (wanted.count(z.id) != 0) {
            out.zones.push_back(z);
        }
    }
    return out;
}

} // namespace shapesynth
