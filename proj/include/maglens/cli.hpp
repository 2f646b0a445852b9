#pragma once

#include "maglens/invert.hpp"

#include <json.hpp>

#include <filesystem>
#include <string>

namespace maglens::cli {

inline constexpr const char* kVersion = "0.1.0";

enum ExitCode : int { kOk = 0, kAssertionFailure = 1, kDataWarning = 2, kConfigError = 3 };

using Json = nlohmann::json;

// Every key with its default. A user config is merged onto this document and
// keys it does not contain are rejected. Zero-valued "auto" entries are
// resolved from the system before any command runs.
Json default_config();

struct RunConfig {
    Json resolved;
    std::string hash;                 // FNV-1a of the resolved document
    std::filesystem::path base_dir;   // relative paths in the config start here
};

// Throws ConfigError on unknown keys, wrong types or bad values.
RunConfig resolve_config(const Json& user, const std::filesystem::path& base_dir = ".");
RunConfig load_config(const std::string& path);

// Scalar expression, e.g. {"type": "radial_quadratic", "base": 1, "amp": 0.2}.
// Types: constant, affine, radial_quadratic, gaussian, bump, windowed_gaussian,
// planar_gaussian, radius, sum, scaled, grid.
ScalarFieldPtr build_expression(const Json& e, int n, const std::filesystem::path& base_dir = ".");
MagneticSystem build_system(const Json& block, const std::filesystem::path& base_dir = ".");

struct RunOptions {
    std::string out_dir = ".";
    int threads = 0;
    bool force_A_identity = false;  // negative control only
};

struct CommandResult {
    int exit_code = kOk;
    Json report;  // also written to <out>/<command>.report.json
};

CommandResult cmd_gen_lens(const RunConfig& cfg, const RunOptions& ro);
CommandResult cmd_check_identity(const RunConfig& cfg, const RunOptions& ro);
CommandResult cmd_forward_xray(const RunConfig& cfg, const RunOptions& ro);
CommandResult cmd_ellipticity(const RunConfig& cfg, const RunOptions& ro);
CommandResult cmd_invert(const RunConfig& cfg, const RunOptions& ro);
CommandResult cmd_layer_strip(const RunConfig& cfg, const RunOptions& ro);

// Dispatches by subcommand name and maps errors to exit codes.
int run(const std::string& command, const std::string& config_path, const RunOptions& ro);

}  // namespace maglens::cli
