#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "densessm/model.hpp"
#include "densessm/training.hpp"

namespace densessm {

struct DataConfig {
  std::vector<std::string> paths;          // empty: synthetic corpus
  std::vector<std::string> heldout_paths;  // empty: synthetic text from a second domain
  std::uint64_t synthetic_bytes = 3'000'000;
  std::uint64_t heldout_bytes = 200'000;
  std::uint64_t synthetic_seed = 0;
  double val_frac = 0.02;

  friend bool operator==(const DataConfig&, const DataConfig&) = default;
};

struct AblateConfig {
  std::vector<std::uint64_t> seeds{0, 1, 2};
  std::vector<std::string> tables{"4", "5", "6", "7"};
  std::uint64_t tokens_per_cell = 5'000'000;
  std::uint64_t heldout_tokens = 65536;

  friend bool operator==(const AblateConfig&, const AblateConfig&) = default;
};

/// Everything a command reads, addressable by dotted flat keys.
struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  DataConfig data;
  AblateConfig ablate;

  RunConfig();

  std::map<std::string, std::string> to_map() const;
  /// Throws ConfigError for an unknown key (listing the valid ones) or a bad value.
  void set(const std::string& key, const std::string& value);
  static std::vector<std::string> keys();
  /// "key = value" lines in sorted key order; parse_config_text() reads it back.
  std::string render() const;

  friend bool operator==(const RunConfig&, const RunConfig&) = default;
};

/// Flat "key = value" lines; '#' starts a comment; blank lines ignored.
void apply_config_text(RunConfig& cfg, const std::string& text, const std::string& origin = "<text>");
RunConfig parse_config_text(const std::string& text, const std::string& origin = "<text>");
RunConfig load_config_file(const std::string& path);
/// "key=value".
void apply_override(RunConfig& cfg, const std::string& assignment);

/// The train/val corpus and held-out documents described by `data`.
Corpus load_corpus(const DataConfig& data);
Corpus load_heldout(const DataConfig& data);

}  // namespace densessm
