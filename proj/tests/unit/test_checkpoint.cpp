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

#include <cstring>
#include <fstream>
#include <limits>

#include "corefine/checkpoint.hpp"
#include "support.hpp"

namespace cf = corefine;
namespace fs = std::filesystem;
using namespace testing_support;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

template <typename Fn>
std::string error_of(Fn&& fn) {
  try {
    fn();
  } catch (const cf::CheckpointError& e) {
    return e.what();
  }
  return "";
}

cf::Checkpoint sample_checkpoint() {
  cf::Checkpoint ck;
  const std::vector<double> d{1.0, -0.0, std::numeric_limits<double>::denorm_min(), 1e308, 0.1, -3.5};
  const std::vector<float> f{1.5f, std::numeric_limits<float>::min(), -2.0f};
  ck.put<double>("layer.weight", Shape{2, 3}, d);
  ck.put<float>("layer.bias", Shape{3}, f);
  ck.put<double>("scalar", Shape{}, std::vector<double>{42.0});
  ck.meta["step"] = 17;
  ck.meta["config"] = {{"lr", 0.5}};
  return ck;
}

}  // namespace

TEST(Checkpoint, RoundTripIsBitExact) {
  TempDir dir("ckpt");
  const auto ck = sample_checkpoint();
  cf::save_checkpoint(ck, dir.path() / "a.bin");
  const auto back = cf::load_checkpoint(dir.path() / "a.bin");
  ASSERT_EQ(back.arrays().size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(back.arrays()[i].name, ck.arrays()[i].name);
    EXPECT_EQ(back.arrays()[i].shape, ck.arrays()[i].shape);
    EXPECT_EQ(back.arrays()[i].dtype, ck.arrays()[i].dtype);
    EXPECT_EQ(back.arrays()[i].bytes, ck.arrays()[i].bytes);
  }
  const auto d = back.get<double>("layer.weight", Shape{2, 3});
  EXPECT_TRUE(std::signbit(d[1]));
  EXPECT_EQ(d[2], std::numeric_limits<double>::denorm_min());
  EXPECT_EQ(back.meta, ck.meta);
}

TEST(Checkpoint, SaveLoadSaveGivesIdenticalBytes) {
  TempDir dir("ckpt_bytes");
  cf::save_checkpoint(sample_checkpoint(), dir.path() / "a.bin");
  cf::save_checkpoint(cf::load_checkpoint(dir.path() / "a.bin"), dir.path() / "b.bin");
  EXPECT_EQ(slurp(dir.path() / "a.bin"), slurp(dir.path() / "b.bin"));
}

TEST(Checkpoint, FileLayout) {
  TempDir dir("ckpt_layout");
  cf::Checkpoint ck;
  ck.put<double>("x", Shape{2}, std::vector<double>{1.0, 2.0});
  cf::save_checkpoint(ck, dir.path() / "x.bin");
  const auto bytes = slurp(dir.path() / "x.bin");
  ASSERT_GE(bytes.size(), 12u);
  EXPECT_EQ(bytes.substr(0, 4), "BCRS");
  std::uint32_t version = 0, header_len = 0;
  std::memcpy(&version, bytes.data() + 4, 4);
  std::memcpy(&header_len, bytes.data() + 8, 4);
  EXPECT_EQ(version, 1u);
  const auto header = nlohmann::json::parse(bytes.substr(12, header_len));
  ASSERT_EQ(header.at("arrays").size(), 1u);
  EXPECT_EQ(header["arrays"][0].at("name"), "x");
  EXPECT_EQ(header["arrays"][0].at("shape"), nlohmann::json::array({2}));
  EXPECT_EQ(header["arrays"][0].at("offset"), 0);
  ASSERT_EQ(bytes.size(), 12u + header_len + 16u);
  double v[2];
  std::memcpy(v, bytes.data() + 12 + header_len, 16);
  EXPECT_EQ(v[0], 1.0);
  EXPECT_EQ(v[1], 2.0);
}

TEST(Checkpoint, ErrorsNameTheArray) {
  const auto ck = sample_checkpoint();
  EXPECT_NE(error_of([&] { ck.get<double>("missing.array", Shape{1}); }).find("missing.array"), std::string::npos);
  const auto shape_err = error_of([&] { ck.get<double>("layer.weight", Shape{3, 2}); });
  EXPECT_NE(shape_err.find("layer.weight"), std::string::npos);
  EXPECT_NE(shape_err.find("[3,2]"), std::string::npos) << shape_err;
  EXPECT_NE(error_of([&] { ck.get<double>("layer.bias", Shape{3}); }).find("layer.bias"), std::string::npos);
  auto dup = ck;
  EXPECT_NE(error_of([&] { dup.put<double>("scalar", Shape{}, std::vector<double>{1.0}); }).find("scalar"),
            std::string::npos);
}

TEST(Checkpoint, RejectsCorruptFiles) {
  TempDir dir("ckpt_bad");
  cf::save_checkpoint(sample_checkpoint(), dir.path() / "good.bin");
  auto bytes = slurp(dir.path() / "good.bin");

  auto write = [&](const std::string& name, const std::string& b) {
    std::ofstream(dir.path() / name, std::ios::binary) << b;
    return dir.path() / name;
  };
  auto magic = bytes;
  magic[0] = 'X';
  EXPECT_NE(error_of([&] { cf::load_checkpoint(write("magic.bin", magic)); }).find("magic"), std::string::npos);
  auto version = bytes;
  version[4] = 9;
  EXPECT_NE(error_of([&] { cf::load_checkpoint(write("version.bin", version)); }).find("version"),
            std::string::npos);
  const auto truncated = bytes.substr(0, bytes.size() - 5);
  EXPECT_FALSE(error_of([&] { cf::load_checkpoint(write("short.bin", truncated)); }).empty());
  EXPECT_FALSE(error_of([&] { cf::load_checkpoint(dir.path() / "nope.bin"); }).empty());
}

TEST(Checkpoint, TensorPutKeepsShape) {
  SplitMix64 rng(1);
  const auto t = random_tensor({2, 1, 3}, rng);
  cf::Checkpoint ck;
  ck.put("t", t);
  EXPECT_EQ(ck.get<double>("t", Shape{2, 1, 3}), to_vec(t));
  EXPECT_TRUE(ck.contains("t"));
  EXPECT_FALSE(ck.contains("u"));
}
