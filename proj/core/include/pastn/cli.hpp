#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "pastn/model.hpp"

namespace pastn::cli {

// Everything a run needs: model dimensions, data paths, training knobs,
// ablation flags, output directory. JSON file values are overridden by
// command-line flags; the merged config is echoed next to the outputs.
struct RunConfig {
  ModelConfig model;
  std::string flow_path;
  std::string adjacency_path;
  std::string out_dir = ".";
  std::uint64_t seed = 1;
  std::vector<std::uint64_t> seeds;  // ablate only
  std::size_t epochs = 20;
  std::size_t batch_size = 16;
  std::size_t patience = 15;
  double lr = 1e-3;
  double adjacency_threshold = 0.1;
  double adjacency_sigma = 0.0;  // 0 = std of the supplied distances
};

// Canonical JSON round-trip: parse(dump(c)) == c and dump is byte-stable.
std::string run_config_to_json(const RunConfig& config);
RunConfig run_config_from_json(const std::string& text);

// Exit codes: 0 success, 1 runtime failure (diagnostic on stderr), 2 usage.
int run(const std::vector<std::string>& args);

}  // namespace pastn::cli
