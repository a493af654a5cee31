/*
 * Copyright 2026 The corefine Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *    http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "corefine/checkpoint.hpp"
#include "corefine/losses.hpp"
#include "corefine/metrics.hpp"
#include "corefine/model.hpp"

namespace corefine {

enum class Precision { kSingle, kDouble };

struct RunConfig {
  ModelConfig model;
  LossWeights loss;
  double lr = 0.8e-4;
  std::size_t total_steps = 300;
  std::size_t batch_size = 8;
  Precision precision = Precision::kSingle;
  std::uint64_t seed = 0;
  bool shuffle = true;
  std::filesystem::path train_data;
  std::optional<std::filesystem::path> eval_data;

  /// Flat JSON document; every key is spelled out, including defaults.
  nlohmann::json to_json() const;
};

/// Every problem found in a config document, one message per field.
class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(std::vector<std::string> errors);
  const std::vector<std::string>& errors() const { return errors_; }

 private:
  std::vector<std::string> errors_;
};

/// Parses a flat config document. Unknown keys and bad values are collected
/// and reported together. Relative data paths resolve against `base_dir`.
RunConfig parse_run_config(const nlohmann::json& doc, const std::filesystem::path& base_dir = {});
RunConfig load_run_config(const std::filesystem::path& path);

struct TrainOptions {
  std::filesystem::path checkpoint;
  std::optional<std::filesystem::path> resume;
  /// Stop once this many steps have completed in total (for interrupted
  /// runs); the schedule still spans total_steps.
  std::optional<std::size_t> stop_after;
  bool quiet = true;
};

struct StepLog {
  std::size_t step = 0;
  double lr = 0.0;
  double total = 0.0;
  double main = 0.0;
  double heatmap = 0.0;
  double fisher = 0.0;
};

struct TrainSummary {
  std::vector<StepLog> steps;  // steps run by this call
  std::size_t completed = 0;   // steps completed overall
  std::filesystem::path log_path;
};

/// Runs the weighted objective with Adam and the cosine schedule, writing a
/// JSON-lines log beside the checkpoint and the final checkpoint itself.
/// Throws on a non-finite loss.
TrainSummary train(const RunConfig& config, const TrainOptions& options);

std::filesystem::path log_path_for(const std::filesystem::path& checkpoint);

/// Confusion-matrix metrics of a checkpoint over a dataset directory.
MetricSummary evaluate(const std::filesystem::path& checkpoint, const std::filesystem::path& data_dir,
                       std::optional<int> ignore_index);

/// One min-max scaled PGM per (layer, category) named layer{l}_class{n}.pgm
/// with l counted from 1, plus pred.pgm holding raw category indices.
/// Returns the written paths.
std::vector<std::filesystem::path> export_heatmaps(const std::filesystem::path& checkpoint,
                                                   const std::filesystem::path& image,
                                                   const std::filesystem::path& out_dir);

/// Maps a plane to 0..255 with min -> 0 and max -> 255; a constant plane maps to 0.
template <typename T>
std::vector<std::uint8_t> minmax_to_gray(std::span<const T> plane);

/// Checkpoint writer/reader shared by training and the tools.
template <typename T>
void store_params(Checkpoint& ckpt, const ModelParams<T>& params);
template <typename T>
ModelParams<T> restore_params(const Checkpoint& ckpt, const ModelConfig& config);

}  // namespace corefine
