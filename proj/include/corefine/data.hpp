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
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "corefine/losses.hpp"
#include "corefine/tensor.hpp"

namespace corefine {

/// RGB image stored planar [3][H][W] as 8-bit codes (value = code / 255) and
/// a label map [H][W] of category indices.
struct SegSample {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> image;
  std::vector<std::uint8_t> label;

  double pixel(std::size_t channel, std::size_t y, std::size_t x) const {
    return image[(channel * height + y) * width + x] / 255.0;
  }
  bool operator==(const SegSample&) const = default;
};

struct SynthConfig {
  std::uint64_t seed = 7;
  std::size_t count = 200;
  std::size_t size = 64;
  std::size_t categories = 4;  // category 0 is background
  std::size_t min_shapes = 3;
  std::size_t max_shapes = 6;
  double noise = 0.05;         // additive per-pixel, uniform in +-noise
  double color_jitter = 0.08;  // per-instance shift of the category color

  void validate() const;
};

/// Every pixel of sample i is a pure function of (config, i).
std::vector<SegSample> synth_generate(const SynthConfig& config);
SegSample synth_sample(const SynthConfig& config, std::size_t index);

/// Fraction of samples in which each category covers at least one pixel.
std::vector<double> category_presence(std::span<const SegSample> samples, std::size_t categories);
/// Share of all pixels labelled with each category.
std::vector<double> pixel_frequencies(std::span<const SegSample> samples, std::size_t categories);

/// Malformed or unreadable dataset file; the message names the file and the
/// byte offset where parsing stopped.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Netpbm {
  std::size_t width = 0;
  std::size_t height = 0;
  std::size_t channels = 0;           // 3 for P6, 1 for P5
  std::vector<std::uint8_t> pixels;   // interleaved
};

void write_ppm(const std::filesystem::path& path, std::size_t width, std::size_t height,
               std::span<const std::uint8_t> rgb_interleaved);
void write_pgm(const std::filesystem::path& path, std::size_t width, std::size_t height,
               std::span<const std::uint8_t> gray);
/// Reads binary P5/P6 with maxval 255.
Netpbm read_netpbm(const std::filesystem::path& path);

/// Writes images/NNNNNN.ppm, masks/NNNNNN.pgm and the manifest index.txt.
void save_dataset(std::span<const SegSample> samples, const std::filesystem::path& dir);
std::vector<SegSample> load_dataset(const std::filesystem::path& dir);
SegSample load_image(const std::filesystem::path& ppm);

/// Sample indices grouped into batches. With shuffle, epoch e is permuted by
/// a generator seeded with seed + e. The final partial batch is kept.
std::vector<std::vector<std::size_t>> make_batches(std::size_t count, std::size_t batch_size, std::uint64_t seed,
                                                   bool shuffle, std::size_t epoch = 0);

template <typename T>
Tensor<T> image_batch(std::span<const SegSample> samples, std::span<const std::size_t> indices);
LabelBatch label_batch(std::span<const SegSample> samples, std::span<const std::size_t> indices);

}  // namespace corefine
