#pragma once

// Run configuration: one JSON file plus "--set section.key=value" overrides.

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "kt/dkt.hpp"
#include "kt/eval.hpp"
#include "kt/ingest.hpp"
#include "kt/llmprobe.hpp"
#include "kt/synth.hpp"

namespace kt {

struct EvalConfig {
  eval::EvalOptions options;
  std::vector<std::string> heatmap_students;
  bool heatmap_all_skills = false;
};

struct ProbeRunConfig {
  probe::ProbeConfig client;
  std::string split = "test";
  std::size_t max_students = 0;  // 0 = all
};

struct RunConfig {
  std::filesystem::path raw;
  std::filesystem::path workspace;
  ColumnMapping columns;
  SplitRatios ratios;
  std::uint64_t split_seed = 42;
  dkt::TrainConfig dkt;
  ProbeRunConfig probe;
  EvalConfig eval;
  synth::GenerativeSpec synth;
  bool deterministic = true;

  nlohmann::json document;  // merged, validated JSON the fields came from

  /// SHA-256 of the canonical merged document.
  std::string hash() const;
};

/// Every accepted key with its default value.
nlohmann::json default_config();

/// Applies "a.b=value" to the document. The value is parsed as JSON when
/// possible and taken as a string otherwise. Throws ConfigError for keys
/// that do not exist.
void apply_override(nlohmann::json& document, const std::string& assignment);

/// Merges `user` over the defaults (unknown keys rejected), applies the
/// overrides, validates, and resolves relative paths against base_dir.
RunConfig make_config(const nlohmann::json& user, const std::vector<std::string>& overrides,
                      const std::filesystem::path& base_dir);

/// Reads the file (if given) and calls make_config. Relative paths resolve
/// against the file's directory, or the working directory without a file.
RunConfig load_config(const std::optional<std::filesystem::path>& file, const std::vector<std::string>& overrides);

}  // namespace kt
