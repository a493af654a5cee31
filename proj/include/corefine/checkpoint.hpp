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

// Checkpoint file layout, all integers little-endian:
//
//   "BCRS"                      4 bytes
//   version                     uint32 (currently 1)
//   header length               uint32
//   header                      UTF-8 JSON:
//       {"arrays":[{"dtype":"float32"|"float64","name":..,"offset":..,"shape":[..]},..],
//        "meta":{..}}
//   array data                  IEEE-754 little-endian, in header order;
//                               offsets count bytes from the end of the header

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "corefine/tensor.hpp"

namespace corefine {

inline constexpr char kCheckpointMagic[4] = {'B', 'C', 'R', 'S'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct CheckpointArray {
  std::string name;
  Shape shape;
  std::string dtype;             // "float32" or "float64"
  std::vector<std::uint8_t> bytes;  // little-endian payload
};

class Checkpoint {
 public:
  nlohmann::json meta = nlohmann::json::object();

  template <typename T>
  void put(const std::string& name, const Shape& shape, std::span<const T> values);
  template <typename T>
  void put(const std::string& name, const Tensor<T>& tensor) {
    put<T>(name, tensor.shape(), tensor.values());
  }

  bool contains(const std::string& name) const;
  const CheckpointArray& array(const std::string& name) const;

  /// Values of `name`; throws CheckpointError naming the array when it is
  /// missing, has another shape, or another dtype.
  template <typename T>
  std::vector<T> get(const std::string& name, const Shape& expected) const;

  const std::vector<CheckpointArray>& arrays() const { return arrays_; }
  void add(CheckpointArray array);

 private:
  std::vector<CheckpointArray> arrays_;
};

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

template <typename T>
constexpr const char* dtype_name() {
  return sizeof(T) == 4 ? "float32" : "float64";
}

}  // namespace corefine
