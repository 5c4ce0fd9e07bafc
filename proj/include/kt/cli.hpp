#pragma once

// The ktrace command line: prepare | train | predict | probe | evaluate |
// gradcheck | synth over one workspace directory.

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "json.hpp"

namespace kt::cli {

inline constexpr int kLayoutVersion = 1;

/// Artifact locations inside a workspace.
struct Workspace {
  std::filesystem::path root;

  std::filesystem::path manifest() const { return root / "manifest.json"; }
  std::filesystem::path lock() const { return root / ".lock"; }
  std::filesystem::path data(const std::string& name) const { return root / "data" / name; }
  std::filesystem::path split_file(const std::string& split) const { return data(split + ".tsv"); }
  std::filesystem::path checkpoint() const { return root / "dkt" / "checkpoint.json"; }
  std::filesystem::path train_log() const { return root / "dkt" / "train_log.json"; }
  std::filesystem::path timing() const { return root / "dkt" / "timing.json"; }
  std::filesystem::path predictions(const std::string& tag) const { return root / "predictions" / (tag + ".tsv"); }
  std::filesystem::path trajectories(const std::string& tag) const {
    return root / "trajectories" / (tag + ".tsv");
  }
  std::filesystem::path probe_dir() const { return root / "probe"; }
  std::filesystem::path cache_dir() const { return root / "cache" / "probe"; }
  std::filesystem::path reports() const { return root / "reports"; }
  std::filesystem::path synth_dir() const { return root / "synth"; }
};

/// Runs one invocation (args excludes the program name) and returns the
/// exit code: 0 success, 1 runtime failure, 2 configuration or input error.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

/// Content hashes of every regular file under root except the lock and the
/// probe cache, keyed by relative path.
std::vector<std::pair<std::string, std::string>> artifact_hashes(const std::filesystem::path& root);

}  // namespace kt::cli
