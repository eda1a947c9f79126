// SPDX-License-Identifier: Apache-2.0
//
// JSON run configuration: model block, data block, training stages, seed.
// Schema documented in docs/formats.md; committed examples under configs/.

#pragma once

#include <cstdint>
#include <optional>
#include <string>

#include "moekit/model.hpp"
#include "moekit/tuning.hpp"

namespace moekit {

struct DataConfig {
  std::size_t n_classes = 8;
  std::size_t prompt_len = 4;
  std::size_t answer_len = 4;
  std::size_t samples = 512;
};

struct RunConfig {
  ModelConfig model;
  DataConfig data;
  PipelineSpecs training;
  std::uint64_t seed = 0;
  // Published reference counts in units of 1e9, when the config describes a
  // known model row; used by the params command for comparison output.
  std::optional<double> reported_activated_b;
  std::optional<double> reported_total_b;

  SyntheticDataset build_dataset() const;
};

RunConfig load_run_config(const std::string& path);
RunConfig parse_run_config(const std::string& json_text);
std::string run_config_to_json(const RunConfig& config);

}  // namespace moekit
