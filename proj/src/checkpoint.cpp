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

#include "corefine/checkpoint.hpp"

#include <bit>
#include <fstream>
#include <iterator>

namespace corefine {

namespace {

template <typename U>
void append_le(std::vector<std::uint8_t>& out, U value) {
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<std::uint8_t>(value >> (8 * i)));
}

template <typename U>
U read_le(const std::uint8_t* p) {
  U value = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) value |= static_cast<U>(p[i]) << (8 * i);
  return value;
}

template <typename T>
using Bits = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;

std::size_t dtype_size(const std::string& dtype) {
  if (dtype == "float32") return 4;
  if (dtype == "float64") return 8;
  throw CheckpointError("unsupported dtype '" + dtype + "'");
}

}  // namespace

template <typename T>
void Checkpoint::put(const std::string& name, const Shape& shape, std::span<const T> values) {
  CheckpointArray a{name, shape, dtype_name<T>(), {}};
  a.bytes.reserve(values.size() * sizeof(T));
  for (T v : values) append_le(a.bytes, std::bit_cast<Bits<T>>(v));
  add(std::move(a));
}

void Checkpoint::add(CheckpointArray array) {
  if (contains(array.name)) throw CheckpointError("duplicate array '" + array.name + "'");
  if (array.bytes.size() != shape_numel(array.shape) * dtype_size(array.dtype)) {
    throw CheckpointError("array '" + array.name + "' payload does not match its shape");
  }
  arrays_.push_back(std::move(array));
}

bool Checkpoint::contains(const std::string& name) const {
  for (const auto& a : arrays_) {
    if (a.name == name) return true;
  }
  return false;
}

const CheckpointArray& Checkpoint::array(const std::string& name) const {
  for (const auto& a : arrays_) {
    if (a.name == name) return a;
  }
  throw CheckpointError("checkpoint has no array '" + name + "'");
}

template <typename T>
std::vector<T> Checkpoint::get(const std::string& name, const Shape& expected) const {
  const auto& a = array(name);
  if (a.shape != expected) {
    throw CheckpointError("array '" + name + "' has shape " + shape_str(a.shape) + ", expected " +
                          shape_str(expected));
  }
  if (a.dtype != dtype_name<T>()) {
    throw CheckpointError("array '" + name + "' is " + a.dtype + ", expected " + dtype_name<T>());
  }
  std::vector<T> values(shape_numel(a.shape));
  for (std::size_t i = 0; i < values.size(); ++i) {
    values[i] = std::bit_cast<T>(read_le<Bits<T>>(a.bytes.data() + i * sizeof(T)));
  }
  return values;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  nlohmann::json header;
  header["meta"] = ckpt.meta;
  header["arrays"] = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& a : ckpt.arrays()) {
    header["arrays"].push_back({{"name", a.name}, {"shape", a.shape}, {"dtype", a.dtype}, {"offset", offset}});
    offset += a.bytes.size();
  }
  const auto text = header.dump();

  std::vector<std::uint8_t> buf(std::begin(kCheckpointMagic), std::end(kCheckpointMagic));
  append_le(buf, kCheckpointVersion);
  append_le(buf, static_cast<std::uint32_t>(text.size()));
  buf.insert(buf.end(), text.begin(), text.end());
  for (const auto& a : ckpt.arrays()) buf.insert(buf.end(), a.bytes.begin(), a.bytes.end());

  // Write beside the target and rename so a reader never sees a partial file.
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("cannot open " + tmp.string() + " for writing");
    out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    if (!out) throw CheckpointError("failed writing " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
  std::vector<std::uint8_t> buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const auto where = [&](std::size_t off) { return path.string() + ": offset " + std::to_string(off) + ": "; };

  if (buf.size() < 12 || !std::equal(std::begin(kCheckpointMagic), std::end(kCheckpointMagic), buf.begin())) {
    throw CheckpointError(where(0) + "missing BCRS magic");
  }
  const auto version = read_le<std::uint32_t>(buf.data() + 4);
  if (version != kCheckpointVersion) throw CheckpointError(where(4) + "unsupported version " + std::to_string(version));
  const auto header_len = read_le<std::uint32_t>(buf.data() + 8);
  if (buf.size() - 12 < header_len) throw CheckpointError(where(8) + "truncated header");

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(buf.begin() + 12, buf.begin() + 12 + header_len);
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(where(12) + "bad header: " + e.what());
  }

  Checkpoint ckpt;
  const std::size_t data_start = 12 + header_len;
  try {
    ckpt.meta = header.at("meta");
    for (const auto& entry : header.at("arrays")) {
      CheckpointArray a;
      a.name = entry.at("name").get<std::string>();
      a.shape = entry.at("shape").get<Shape>();
      a.dtype = entry.at("dtype").get<std::string>();
      const auto offset = entry.at("offset").get<std::uint64_t>();
      const auto size = shape_numel(a.shape) * dtype_size(a.dtype);
      if (data_start + offset + size > buf.size()) {
        throw CheckpointError(where(data_start + offset) + "array '" + a.name + "' runs past end of file");
      }
      a.bytes.assign(buf.begin() + static_cast<std::ptrdiff_t>(data_start + offset),
                     buf.begin() + static_cast<std::ptrdiff_t>(data_start + offset + size));
      ckpt.add(std::move(a));
    }
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(where(12) + "bad header: " + e.what());
  }
  return ckpt;
}

template void Checkpoint::put<float>(const std::string&, const Shape&, std::span<const float>);
template void Checkpoint::put<double>(const std::string&, const Shape&, std::span<const double>);
template std::vector<float> Checkpoint::get<float>(const std::string&, const Shape&) const;
template std::vector<double> Checkpoint::get<double>(const std::string&, const Shape&) const;

}  // namespace corefine
