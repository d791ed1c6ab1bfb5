#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "versebyte/corpus.hpp"
#include "versebyte/decode.hpp"
#include "versebyte/model.hpp"
#include "versebyte/trainer.hpp"

namespace versebyte {

// Everything a training run depends on. Relative paths in the JSON file are
// resolved against the file's directory; the resolved form (absolute paths,
// every default filled in) is written next to the run's outputs.
//
//   {
//     "data": {"train": "...", "validation": "..."}  or  {"aligned": "..."},
//     "split": {"train": 0.98, "validation": 0.01, "test": 0.01},
//     "model": {...ModelConfig...},
//     "train": {...TrainConfig without seed...},
//     "decode": {"beam_width": 1, "max_len": 512, "length_penalty": 0.0},
//     "output_dir": "...",
//     "seed": 0
//   }
struct RunConfig {
  std::optional<std::filesystem::path> train_path;
  std::optional<std::filesystem::path> validation_path;
  std::optional<std::filesystem::path> test_path;
  // Used when train/validation are absent: split this aligned file instead.
  std::optional<std::filesystem::path> aligned_path;
  SplitRatios split;
  ModelConfig model;
  TrainConfig train;
  DecodeOptions decode;
  std::filesystem::path output_dir;
  std::uint64_t seed = 0;

  static RunConfig from_json(const nlohmann::json& json, const std::filesystem::path& base_dir);
  nlohmann::json to_json() const;
};

void validate_ratios(const SplitRatios& ratios, const std::string& where);
void validate_decode_options(const DecodeOptions& options, const std::string& where);

// Parsed VERSEBYTE_SEED, if set. Throws FormatError on a malformed value.
std::optional<std::uint64_t> seed_from_environment();

// Entry point of the `versebyte` tool. Returns the process exit status.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace versebyte
