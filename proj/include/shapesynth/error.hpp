#pragma once

#include <stdexcept>
#include <string>

namespace shapesynth {

/// Process exit codes shared by every command-line entry point.
enum class ExitCode : int {
    ok = 0,
    usage = 2,      // schema or usage problems
    data = 3,       // bad data values or infeasible fits
    internal = 4,
};

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
    [[nodiscard]] virtual ExitCode exit_code() const noexcept { return ExitCode::internal; }
};

/// Input does not have the expected shape: missing column, unknown category, bad config key.
class SchemaError : public Error {
public:
    using Error::Error;
    [[nodiscard]] ExitCode exit_code() const noexcept override { return ExitCode::usage; }
};

/// Input has the right shape but unusable values: duplicates, negatives, empty results.
class DataError : public Error {
public:
    using Error::Error;
    [[nodiscard]] ExitCode exit_code() const noexcept override { return ExitCode::data; }
};

/// A zone's marginals cannot be met by any nonnegative reweighting of the survey.
class InfeasibleError : public DataError {
public:
    using DataError::DataError;
};

/// Record ids in one table cannot be resolved against another.
class JoinError : public DataError {
public:
    using DataError::DataError;
};

/// Wraps an error with the pipeline stage it came from; keeps the original exit code.
class StageError : public Error {
public:
    StageError(std::string stage, const Error &cause)
        : Error(stage + ": " + cause.what()), stage_{std::move(stage)}, code_{cause.exit_code()} {}

    [[nodiscard]] const std::string &stage() const noexcept { return stage_; }
    [[nodiscard]] ExitCode exit_code() const noexcept override { return code_; }

private:
    std::string stage_;
    ExitCode code_;
};

} // namespace shapesynth
