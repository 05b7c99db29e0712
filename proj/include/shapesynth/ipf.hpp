#pragma once

// Per-zone iterative proportional fitting of survey record weights to marginal totals.

#include "shapesynth/csv.hpp"
#include "shapesynth/error.hpp"
#include "shapesynth/harmonize.hpp"
#include "shapesynth/parallel.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace shapesynth {

enum class InfeasibilityPolicy {
    error,                     // zone fit fails
    skip_variable_with_warning // offending variable is left out of the zone's sweeps
};

struct FitOptions {
    double tolerance = 1e-8;  // max |fitted - target| / max(1, target) over all categories
    int max_iterations = 1000; // full sweeps over all constraint variables
    InfeasibilityPolicy infeasibility_policy = InfeasibilityPolicy::error;

    void validate() const {
        if (!(tolerance > 0.0) || !std::isfinite(tolerance)) {
            throw SchemaError("fit options: tolerance must be positive");
        }
        if (max_iterations < 1) {
            throw SchemaError("fit options: max_iterations must be at least 1");
        }
    }
};

inline const char *to_string(InfeasibilityPolicy p) {
    return p == InfeasibilityPolicy::error ? "error" : "skip_variable_with_warning";
}

inline InfeasibilityPolicy parse_infeasibility_policy(std::string_view text) {
    if (text == "error") {
        return InfeasibilityPolicy::error;
    }
    if (text == "skip_variable_with_warning" || text == "skip") {
        return InfeasibilityPolicy::skip_variable_with_warning;
    }
    throw SchemaError("unknown infeasibility policy '" + std::string(text) + "'");
}

struct FitDiagnostics {
    int iterations = 0;
    double max_residual = 0.0;          // over fitted variables, relative
    bool converged = false;
    std::vector<double> variable_residuals; // per variable, relative; skipped variables included
    std::vector<std::string> skipped_variables;
    std::vector<std::string> warnings;
};

struct ZoneFit {
    std::vector<double> weights; // one per survey record, persons
    FitDiagnostics diagnostics;
};

namespace detail {

inline void check_layout(const SurveyTable &survey, std::span<const std::vector<double>> margins) {
    if (margins.size() != survey.variables.size()) {
        throw SchemaError("ipf: zone has " + std::to_string(margins.size()) + " constraint variables, survey has " +
                          std::to_string(survey.variables.size()));
    }
    for (std::size_t v = 0; v < margins.size(); ++v) {
        if (margins[v].size() != survey.variables[v].categories.size()) {
            throw SchemaError("ipf: variable '" + survey.variables[v].name + "' category count mismatch");
        }
        for (double m : margins[v]) {
            if (!std::isfinite(m) || m < 0.0) {
                throw DataError("ipf: variable '" + survey.variables[v].name +
                                "' has a negative or non-finite marginal");
            }
        }
    }
}

/// Weighted category totals of one variable.
inline void category_totals(std::span<const std::uint16_t> codes, std::span<const double> w,
                            std::vector<double> &totals) {
    std::fill(totals.begin(), totals.end(), 0.0);
    for (std::size_t i = 0; i < codes.size(); ++i) {
        totals[codes[i]] += w[i];
    }
}

inline double relative_residual(const std::vector<double> &fitted, const std::vector<double> &target) {
    double worst = 0.0;
    for (std::size_t c = 0; c < target.size(); ++c) {
        worst = std::max(worst, std::abs(fitted[c] - target[c]) / std::max(1.0, target[c]));
    }
    return worst;
}

} // namespace detail

/// Fit one zone. Weights start at 1 and each sweep rescales the records of every category of
/// every variable, in declaration order, so the weighted category count equals its marginal.
/// Iteration stops once every category is within tolerance, or after max_iterations sweeps
/// (reported through diagnostics, not thrown).
inline ZoneFit fit_zone(const SurveyTable &survey, std::span<const std::vector<double>> margins,
                        const FitOptions &opts) {
    opts.validate();
    detail::check_layout(survey, margins);
    const std::size_t n = survey.size();
    if (n == 0) {
        throw DataError("ipf: survey is empty");
    }
    const std::size_t nvars = margins.size();

    ZoneFit fit;
    auto &diag = fit.diagnostics;
    std::vector<bool> active(nvars, true);
    for (std::size_t v = 0; v < nvars; ++v) {
        std::vector<std::size_t> members(margins[v].size(), 0);
        for (auto code : survey.codes[v]) {
            ++members[code];
        }
        for (std::size_t c = 0; c < members.size(); ++c) {
            if (members[c] == 0 && margins[v][c] > 0.0) {
                const std::string what = "variable '" + survey.variables[v].name + "' category '" +
                                         survey.variables[v].categories[c] + "' has target " +
                                         csv::format_double(margins[v][c]) + " but no survey records";
                if (opts.infeasibility_policy == InfeasibilityPolicy::error) {
                    throw InfeasibleError("ipf: " + what);
                }
                active[v] = false;
                diag.skipped_variables.push_back(survey.variables[v].name);
                diag.warnings.push_back("skipped " + what);
                break;
            }
        }
    }

    std::vector<double> &w = fit.weights;
    w.assign(n, 1.0);
    std::vector<std::vector<double>> totals(nvars);
    std::vector<double> factor;
    for (std::size_t v = 0; v < nvars; ++v) {
        totals[v].resize(margins[v].size());
    }
    diag.variable_residuals.assign(nvars, 0.0);

    for (int sweep = 1; sweep <= opts.max_iterations; ++sweep) {
        for (std::size_t v = 0; v < nvars; ++v) {
            if (!active[v]) {
                continue;
            }
            const auto &codes = survey.codes[v];
            detail::category_totals(codes, w, totals[v]);
            factor.assign(margins[v].size(), 1.0);
            for (std::size_t c = 0; c < factor.size(); ++c) {
                if (margins[v][c] == 0.0) {
                    factor[c] = 0.0;
                } else if (totals[v][c] > 0.0) {
                    factor[c] = margins[v][c] / totals[v][c];
                }
                // totals == 0 with a positive target: every member is already at zero weight,
                // so scaling cannot help; convergence will report the residual.
            }
            for (std::size_t i = 0; i < n; ++i) {
                w[i] *= factor[codes[i]];
            }
        }
        diag.iterations = sweep;
        diag.max_residual = 0.0;
        for (std::size_t v = 0; v < nvars; ++v) {
            detail::category_totals(survey.codes[v], w, totals[v]);
            diag.variable_residuals[v] = detail::relative_residual(totals[v], margins[v]);
            if (active[v]) {
                diag.max_residual = std::max(diag.max_residual, diag.variable_residuals[v]);
            }
        }
        if (diag.max_residual <= opts.tolerance) {
            diag.converged = true;
            break;
        }
    }
    if (!diag.converged) {
        diag.warnings.push_back("not converged after " + std::to_string(diag.iterations) +
                                " sweeps (max relative residual " + csv::format_double(diag.max_residual) + ")");
    }
    return fit;
}

/// Per-zone fits for a whole constraint table, indexed like table.zones. Zones that failed
/// are absent from `fits` and listed in `errors`.
struct WeightField {
    std::vector<std::string> zone_ids;
    std::vector<std::optional<ZoneFit>> fits;
    std::map<std::string, std::string> errors; // zone id -> message

    [[nodiscard]] std::vector<std::string> fitted_zone_ids() const {
        std::vector<std::string> out;
        for (std::size_t z = 0; z < zone_ids.size(); ++z) {
            if (fits[z]) {
                out.push_back(zone_ids[z]);
            }
        }
        return out;
    }
};

inline WeightField fit_all(const SurveyTable &survey, const ConstraintTable &constraints, const FitOptions &opts,
                           unsigned threads = 0) {
    opts.validate();
    if (constraints.variables != survey.variables) {
        throw SchemaError("ipf: survey and constraint table have different variable layouts");
    }
    const std::size_t nz = constraints.zones.size();
    WeightField field;
    field.fits.resize(nz);
    std::vector<std::string> failures(nz);
    for (const auto &zone : constraints.zones) {
        field.zone_ids.push_back(zone.id);
    }
    parallel_for(nz, threads, [&](std::size_t z) {
        try {
            field.fits[z] = fit_zone(survey, constraints.zones[z].counts, opts);
        } catch (const InfeasibleError &e) {
            failures[z] = e.what();
        }
    });
    for (std::size_t z = 0; z < nz; ++z) {
        if (!field.fits[z]) {
            field.errors.emplace(field.zone_ids[z], failures[z]);
        }
    }
    return field;
}

/// `zone_id,survey_id,weight` at full precision.
inline std::string weights_to_csv(const WeightField &field, const SurveyTable &survey) {
    csv::Writer w({"zone_id", "survey_id", "weight"});
    for (std::size_t z = 0; z < field.zone_ids.size(); ++z) {
        if (!field.fits[z]) {
            continue;
        }
        const auto &weights = field.fits[z]->weights;
        for (std::size_t i = 0; i < weights.size(); ++i) {
            w.row({field.zone_ids[z], survey.ids[i], csv::format_double(weights[i])});
        }
    }
    return w.text();
}

/// `zone_id,iterations,max_residual,converged`; failed zones have empty fields.
inline std::string diagnostics_to_csv(const WeightField &field) {
    csv::Writer w({"zone_id", "iterations", "max_residual", "converged"});
    for (std::size_t z = 0; z < field.zone_ids.size(); ++z) {
        if (!field.fits[z]) {
            w.row({field.zone_ids[z], "", "", "error"});
            continue;
        }
        const auto &d = field.fits[z]->diagnostics;
        w.row({field.zone_ids[z], std::to_string(d.iterations), csv::format_double(d.max_residual),
               d.converged ? "true" : "false"});
    }
    return w.text();
}

} // namespace shapesynth
