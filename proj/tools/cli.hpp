#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <stdexcept>
#include <string>

namespace dmn::cli {

// Process exit codes.
inline constexpr int kExitOk = 0;
inline constexpr int kExitIo = 1;
inline constexpr int kExitUsage = 2;
inline constexpr int kExitNumerical = 3;

/// Flat key=value run configuration. Unset fields fall back to command
/// defaults or dataset metadata.
struct RunConfig {
  std::optional<std::filesystem::path> dataset_dir;
  std::optional<double> dmax;
  std::optional<int> channels;
  std::optional<double> lr;
  std::optional<double> decay;
  std::optional<int> batch_size;
  std::optional<int> epochs;
  std::optional<std::uint64_t> seed;
  std::optional<std::filesystem::path> checkpoint_path;
  std::optional<std::filesystem::path> output_dir;
};

/// Raised for malformed configuration; maps to exit code 2.
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Parses `key=value` lines. Blank lines and lines starting with '#' are
/// skipped; unknown keys and unparsable values throw UsageError.
RunConfig parse_run_config(const std::string& text);
RunConfig load_run_config(const std::filesystem::path& path);

/// Fields set in `over` replace those in `base`.
RunConfig merge(RunConfig base, const RunConfig& over);

/// Entry point shared by the executable and the tests.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace dmn::cli
