#pragma once

// Command-line entry point. Exit codes: 0 success, 1 usage or validation
// error, 2 runtime failure.

#include <filesystem>
#include <string>
#include <vector>

#include "noisemap/config.hpp"
#include "noisemap/phantom.hpp"

namespace noisemap {

inline constexpr int kExitOk = 0;
inline constexpr int kExitValidation = 1;
inline constexpr int kExitRuntime = 2;

int run_cli(int argc, const char* const* argv);
// `args` excludes the program name.
int run_cli(const std::vector<std::string>& args);

// Dataset directory written by the `phantom` subcommand:
//   dataset.json, truth_mask.vol, subjects/subject_NNNN.vol
std::vector<std::filesystem::path> save_dataset(const Dataset& data, const RunConfig& config,
                                                const std::filesystem::path& dir);
Dataset load_dataset(const std::filesystem::path& dir, RunConfig& config);

}  // namespace noisemap
