#pragma once

#include <cstdlib>
#include <filesystem>
#include <random>
#include <string>

namespace testing_support {

/// Fixture directory; SHAPE_SYNTH_FIXTURE_DIR overrides the compiled-in path.
inline std::filesystem::path fixture_dir() {
    if (const char *env = std::getenv("SHAPE_SYNTH_FIXTURE_DIR"); env != nullptr && *env != '\0') {
        return env;
    }
    return SHAPESYNTH_FIXTURE_DIR;
}

inline std::filesystem::path fixture(const std::string &name) { return fixture_dir() / name; }

/// Fresh empty scratch directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string &name) {
    auto dir = std::filesystem::temp_directory_path() / ("shapesynth-test-" + name);
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

} // namespace testing_support
