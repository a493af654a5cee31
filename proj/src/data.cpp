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

#include "corefine/data.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iterator>
#include <sstream>

#include "corefine/random.hpp"

namespace corefine {

namespace fs = std::filesystem;

void SynthConfig::validate() const {
  if (categories < 2 || categories > 255) throw std::invalid_argument("categories must lie in [2, 255]");
  if (size == 0 || size % 4 != 0) {
    throw std::invalid_argument("image size " + std::to_string(size) + " must be a positive multiple of 4");
  }
  if (min_shapes > max_shapes) throw std::invalid_argument("min_shapes exceeds max_shapes");
  if (noise < 0.0 || color_jitter < 0.0) throw std::invalid_argument("noise and color_jitter must be >= 0");
}

namespace {

using Color = std::array<double, 3>;

Color base_color(std::size_t category) {
  static constexpr Color kPalette[] = {
      {0.30, 0.42, 0.28},  // background
      {0.62, 0.58, 0.52},  // rectangles
      {0.34, 0.40, 0.56},  // discs
      {0.56, 0.46, 0.30},  // annuli
      {0.46, 0.56, 0.36}, {0.24, 0.28, 0.24}, {0.72, 0.66, 0.62}, {0.42, 0.34, 0.46},
  };
  if (category < std::size(kPalette)) return kPalette[category];
  SplitMix64 rng(0xC0102ULL + category);
  return {rng.uniform(0.2, 0.8), rng.uniform(0.2, 0.8), rng.uniform(0.2, 0.8)};
}

enum class ShapeFamily { kRectangle, kDisc, kAnnulus };

ShapeFamily family_of(std::size_t category) { return static_cast<ShapeFamily>((category - 1) % 3); }

Color jittered(std::size_t category, double jitter, SplitMix64& rng) {
  auto c = base_color(category);
  for (auto& v : c) v += rng.uniform(-jitter, jitter);
  return c;
}

}  // namespace

SegSample synth_sample(const SynthConfig& config, std::size_t index) {
  config.validate();
  const auto n = config.size;
  const auto plane = n * n;
  auto rng = SplitMix64::for_item(config.seed, index);

  std::vector<double> image(3 * plane);
  std::vector<std::uint8_t> label(plane, 0);
  const auto background = jittered(0, config.color_jitter, rng);
  for (std::size_t c = 0; c < 3; ++c) std::fill_n(image.begin() + c * plane, plane, background[c]);

  const auto shapes = static_cast<std::size_t>(
      rng.integer(static_cast<std::int64_t>(config.min_shapes), static_cast<std::int64_t>(config.max_shapes)));
  const auto foreground = config.categories - 1;
  const double extent = static_cast<double>(n);
  for (std::size_t s = 0; s < shapes; ++s) {
    // The first shapes walk through every foreground category once.
    const std::size_t category =
        s < foreground ? 1 + s : static_cast<std::size_t>(rng.integer(1, static_cast<std::int64_t>(foreground)));
    const auto color = jittered(category, config.color_jitter, rng);

    auto paint = [&](auto inside) {
      for (std::size_t y = 0; y < n; ++y) {
        for (std::size_t x = 0; x < n; ++x) {
          if (!inside(x + 0.5, y + 0.5)) continue;
          label[y * n + x] = static_cast<std::uint8_t>(category);
          for (std::size_t c = 0; c < 3; ++c) image[c * plane + y * n + x] = color[c];
        }
      }
    };

    switch (family_of(category)) {
      case ShapeFamily::kRectangle: {
        const double w = rng.uniform(extent / 8, extent / 3);
        const double h = rng.uniform(extent / 8, extent / 3);
        const double x0 = rng.uniform(0, extent - w);
        const double y0 = rng.uniform(0, extent - h);
        paint([=](double x, double y) { return x >= x0 && x < x0 + w && y >= y0 && y < y0 + h; });
        break;
      }
      case ShapeFamily::kDisc: {
        const double r = rng.uniform(extent / 10, extent / 5);
        const double cx = rng.uniform(r, extent - r);
        const double cy = rng.uniform(r, extent - r);
        paint([=](double x, double y) { return (x - cx) * (x - cx) + (y - cy) * (y - cy) <= r * r; });
        break;
      }
      case ShapeFamily::kAnnulus: {
        const double outer = rng.uniform(extent / 8, extent / 4.5);
        const double inner = 0.5 * outer;
        const double cx = rng.uniform(outer, extent - outer);
        const double cy = rng.uniform(outer, extent - outer);
        paint([=](double x, double y) {
          const double d2 = (x - cx) * (x - cx) + (y - cy) * (y - cy);
          return d2 <= outer * outer && d2 >= inner * inner;
        });
        break;
      }
    }
  }

  SegSample sample{n, n, std::vector<std::uint8_t>(3 * plane), std::move(label)};
  for (std::size_t i = 0; i < image.size(); ++i) {
    double v = image[i];
    if (config.noise > 0.0) v += rng.uniform(-config.noise, config.noise);
    v = std::clamp(v, 0.0, 1.0);
    sample.image[i] = static_cast<std::uint8_t>(std::lround(v * 255.0));
  }
  return sample;
}

std::vector<SegSample> synth_generate(const SynthConfig& config) {
  config.validate();
  std::vector<SegSample> out;
  out.reserve(config.count);
  for (std::size_t i = 0; i < config.count; ++i) out.push_back(synth_sample(config, i));
  return out;
}

std::vector<double> category_presence(std::span<const SegSample> samples, std::size_t categories) {
  std::vector<double> presence(categories, 0.0);
  if (samples.empty()) return presence;
  for (const auto& s : samples) {
    std::vector<bool> seen(categories, false);
    for (auto v : s.label) {
      if (v < categories) seen[v] = true;
    }
    for (std::size_t c = 0; c < categories; ++c) presence[c] += seen[c] ? 1.0 : 0.0;
  }
  for (auto& p : presence) p /= static_cast<double>(samples.size());
  return presence;
}

std::vector<double> pixel_frequencies(std::span<const SegSample> samples, std::size_t categories) {
  std::vector<double> freq(categories, 0.0);
  double total = 0.0;
  for (const auto& s : samples) {
    for (auto v : s.label) {
      if (v < categories) freq[v] += 1.0;
      total += 1.0;
    }
  }
  if (total > 0.0) {
    for (auto& f : freq) f /= total;
  }
  return freq;
}

///////////////////////////////////////////
// Netpbm
///////////////////////////////////////////

namespace {

[[noreturn]] void format_error(const fs::path& path, std::size_t offset, const std::string& what) {
  throw FormatError(path.string() + ": offset " + std::to_string(offset) + ": " + what);
}

void write_netpbm(const fs::path& path, const char* magic, std::size_t width, std::size_t height,
                  std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out << magic << '\n' << width << ' ' << height << "\n255\n";
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

}  // namespace

void write_ppm(const fs::path& path, std::size_t width, std::size_t height,
               std::span<const std::uint8_t> rgb_interleaved) {
  if (rgb_interleaved.size() != 3 * width * height) throw std::invalid_argument("PPM buffer size mismatch");
  write_netpbm(path, "P6", width, height, rgb_interleaved);
}

void write_pgm(const fs::path& path, std::size_t width, std::size_t height, std::span<const std::uint8_t> gray) {
  if (gray.size() != width * height) throw std::invalid_argument("PGM buffer size mismatch");
  write_netpbm(path, "P5", width, height, gray);
}

Netpbm read_netpbm(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError(path.string() + ": cannot open file");
  std::vector<char> raw((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

  std::size_t pos = 0;
  auto skip_space = [&] {
    while (pos < raw.size()) {
      if (raw[pos] == '#') {
        while (pos < raw.size() && raw[pos] != '\n') ++pos;
      } else if (std::isspace(static_cast<unsigned char>(raw[pos]))) {
        ++pos;
      } else {
        break;
      }
    }
  };
  auto read_number = [&](const char* what) {
    skip_space();
    const auto start = pos;
    std::size_t value = 0;
    while (pos < raw.size() && std::isdigit(static_cast<unsigned char>(raw[pos]))) {
      value = value * 10 + static_cast<std::size_t>(raw[pos] - '0');
      if (value > (1u << 24)) format_error(path, start, std::string(what) + " is too large");
      ++pos;
    }
    if (pos == start) format_error(path, start, std::string("expected ") + what);
    return value;
  };

  if (raw.size() < 2 || raw[0] != 'P' || (raw[1] != '5' && raw[1] != '6')) {
    format_error(path, 0, "expected magic P5 or P6");
  }
  Netpbm img;
  img.channels = raw[1] == '6' ? 3 : 1;
  pos = 2;
  img.width = read_number("width");
  img.height = read_number("height");
  const auto maxval_at = pos;
  const auto maxval = read_number("maxval");
  if (maxval != 255) format_error(path, maxval_at, "maxval must be 255, got " + std::to_string(maxval));
  if (img.width == 0 || img.height == 0) format_error(path, maxval_at, "zero image extent");
  if (pos >= raw.size() || !std::isspace(static_cast<unsigned char>(raw[pos]))) {
    format_error(path, pos, "missing whitespace after header");
  }
  ++pos;
  const auto expected = img.width * img.height * img.channels;
  if (raw.size() - pos != expected) {
    format_error(path, pos,
                 "expected " + std::to_string(expected) + " pixel bytes, found " + std::to_string(raw.size() - pos));
  }
  img.pixels.assign(reinterpret_cast<const std::uint8_t*>(raw.data()) + pos,
                    reinterpret_cast<const std::uint8_t*>(raw.data()) + raw.size());
  return img;
}

///////////////////////////////////////////
// Dataset on disk
///////////////////////////////////////////

namespace {

std::string numbered(std::size_t i, const char* ext) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%06zu.%s", i, ext);
  return buf;
}

std::vector<std::uint8_t> planar_to_interleaved(const SegSample& s) {
  const auto plane = s.height * s.width;
  std::vector<std::uint8_t> rgb(3 * plane);
  for (std::size_t p = 0; p < plane; ++p) {
    for (std::size_t c = 0; c < 3; ++c) rgb[p * 3 + c] = s.image[c * plane + p];
  }
  return rgb;
}

}  // namespace

void save_dataset(std::span<const SegSample> samples, const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir / "images", ec);
  if (!ec) fs::create_directories(dir / "masks", ec);
  if (ec) throw std::runtime_error("cannot create dataset directory " + dir.string() + ": " + ec.message());

  std::ostringstream manifest;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& s = samples[i];
    const auto image_rel = "images/" + numbered(i, "ppm");
    const auto mask_rel = "masks/" + numbered(i, "pgm");
    write_ppm(dir / image_rel, s.width, s.height, planar_to_interleaved(s));
    write_pgm(dir / mask_rel, s.width, s.height, s.label);
    manifest << image_rel << '\t' << mask_rel << '\n';
  }
  std::ofstream out(dir / "index.txt", std::ios::binary);
  out << manifest.str();
  if (!out) throw std::runtime_error("cannot write manifest in " + dir.string());
}

SegSample load_image(const fs::path& ppm) {
  auto img = read_netpbm(ppm);
  if (img.channels != 3) throw FormatError(ppm.string() + ": offset 0: expected a P6 color image");
  SegSample s;
  s.height = img.height;
  s.width = img.width;
  const auto plane = s.height * s.width;
  s.image.resize(3 * plane);
  for (std::size_t p = 0; p < plane; ++p) {
    for (std::size_t c = 0; c < 3; ++c) s.image[c * plane + p] = img.pixels[p * 3 + c];
  }
  return s;
}

std::vector<SegSample> load_dataset(const fs::path& dir) {
  const auto manifest_path = dir / "index.txt";
  std::ifstream manifest(manifest_path, std::ios::binary);
  if (!manifest) throw FormatError(manifest_path.string() + ": cannot open manifest");

  std::vector<SegSample> samples;
  std::string line;
  std::size_t offset = 0;
  while (std::getline(manifest, line)) {
    const auto line_offset = offset;
    offset += line.size() + 1;
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos || line.find('\t', tab + 1) != std::string::npos) {
      format_error(manifest_path, line_offset, "expected 'image<TAB>mask'");
    }
    auto sample = load_image(dir / line.substr(0, tab));
    const auto mask_path = dir / line.substr(tab + 1);
    auto mask = read_netpbm(mask_path);
    if (mask.channels != 1) format_error(mask_path, 0, "expected a P5 mask");
    if (mask.width != sample.width || mask.height != sample.height) {
      format_error(mask_path, 0, "mask extents differ from the image");
    }
    sample.label = std::move(mask.pixels);
    samples.push_back(std::move(sample));
  }
  return samples;
}

std::vector<std::vector<std::size_t>> make_batches(std::size_t count, std::size_t batch_size, std::uint64_t seed,
                                                   bool shuffle, std::size_t epoch) {
  if (batch_size == 0) throw std::invalid_argument("batch size must be >= 1");
  std::vector<std::size_t> order(count);
  for (std::size_t i = 0; i < count; ++i) order[i] = i;
  if (shuffle && count > 1) {
    SplitMix64 rng(seed + epoch);
    for (std::size_t i = count - 1; i > 0; --i) std::swap(order[i], order[rng.next() % (i + 1)]);
  }
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t start = 0; start < count; start += batch_size) {
    const auto end = std::min(count, start + batch_size);
    batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                         order.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return batches;
}

template <typename T>
Tensor<T> image_batch(std::span<const SegSample> samples, std::span<const std::size_t> indices) {
  if (indices.empty()) throw std::invalid_argument("empty batch");
  const auto& first = samples[indices[0]];
  const auto h = first.height, w = first.width, chunk = 3 * h * w;
  std::vector<T> values(indices.size() * chunk);
  for (std::size_t b = 0; b < indices.size(); ++b) {
    const auto& s = samples[indices[b]];
    if (s.height != h || s.width != w) throw std::invalid_argument("batch mixes image sizes");
    for (std::size_t i = 0; i < chunk; ++i) values[b * chunk + i] = static_cast<T>(s.image[i]) / T{255};
  }
  return Tensor<T>(Shape{indices.size(), 3, h, w}, std::move(values));
}

LabelBatch label_batch(std::span<const SegSample> samples, std::span<const std::size_t> indices) {
  if (indices.empty()) throw std::invalid_argument("empty batch");
  LabelBatch out;
  out.batch = indices.size();
  out.height = samples[indices[0]].height;
  out.width = samples[indices[0]].width;
  for (auto i : indices) {
    const auto& s = samples[i];
    if (s.height != out.height || s.width != out.width) throw std::invalid_argument("batch mixes label sizes");
    out.values.insert(out.values.end(), s.label.begin(), s.label.end());
  }
  return out;
}

template Tensor<float> image_batch(std::span<const SegSample>, std::span<const std::size_t>);
template Tensor<double> image_batch(std::span<const SegSample>, std::span<const std::size_t>);

}  // namespace corefine
