#pragma once

// Run record written next to every command's outputs.
//
// Keys: tool, version, command, status ("ok" | "error"), error {message, exit_code}, seed,
// options {...}, config_digest, inputs {path: sha256}, stages [{name, seconds}], warnings [...],
// outputs {file name: sha256}. Key order is stable (alphabetical on dump).

#include "shapesynth/csv.hpp"
#include "shapesynth/digest.hpp"
#include "shapesynth/error.hpp"

#include <nlohmann/json.hpp>

#include <chrono>
#include <filesystem>
#include <string>
#include <string_view>
#include <utility>

namespace shapesynth {

inline constexpr std::string_view kToolVersion = "0.1.0";

class RunManifest {
public:
    explicit RunManifest(std::string command) {
        doc_["tool"] = "shape-synth";
        doc_["version"] = std::string(kToolVersion);
        doc_["command"] = std::move(command);
        doc_["status"] = "running";
        doc_["inputs"] = nlohmann::json::object();
        doc_["outputs"] = nlohmann::json::object();
        doc_["options"] = nlohmann::json::object();
        doc_["stages"] = nlohmann::json::array();
        doc_["warnings"] = nlohmann::json::array();
    }

    nlohmann::json &options() { return doc_["options"]; }
    void set_seed(std::uint64_t seed) { doc_["seed"] = seed; }
    void set_config(const std::filesystem::path &path) { doc_["config_digest"] = sha256_file(path); }
    void add_input(const std::string &label, const std::filesystem::path &path) {
        doc_["inputs"][label] = sha256_file(path);
    }
    void warn(std::string message) { doc_["warnings"].push_back(std::move(message)); }
    template <typename Range>
    void warn_all(const Range &messages) {
        for (const auto &m : messages) {
            warn(m);
        }
    }

    /// Write `contents` atomically to dir/name and record its digest.
    void emit(const std::filesystem::path &dir, const std::string &name, std::string_view contents) {
        csv::write_atomic(dir / name, contents);
        doc_["outputs"][name] = sha256_hex(contents);
    }

    /// Times `body` as a named stage; a stage failure is rethrown as a StageError.
    template <typename Body>
    decltype(auto) stage(const std::string &name, Body &&body) {
        const auto start = std::chrono::steady_clock::now();
        auto record = [&] {
            const std::chrono::duration<double> elapsed = std::chrono::steady_clock::now() - start;
            doc_["stages"].push_back({{"name", name}, {"seconds", elapsed.count()}});
        };
        try {
            if constexpr (std::is_void_v<decltype(body())>) {
                body();
                record();
            } else {
                decltype(auto) result = body();
                record();
                return result;
            }
        } catch (const StageError &) {
            record();
            throw;
        } catch (const Error &e) {
            record();
            throw StageError(name, e);
        }
    }

    void succeed() { doc_["status"] = "ok"; }

    void fail(std::string_view message, ExitCode code) {
        doc_["status"] = "error";
        doc_["error"] = {{"message", std::string(message)}, {"exit_code", static_cast<int>(code)}};
    }

    void write(const std::filesystem::path &path) const { csv::write_atomic(path, doc_.dump(2) + "\n"); }

    [[nodiscard]] const nlohmann::json &json() const noexcept { return doc_; }

private:
    nlohmann::json doc_;
};

} // namespace shapesynth
