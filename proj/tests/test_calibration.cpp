// Copyright 2026 The rebasin Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include <gtest/gtest.h>

#include <cmath>
#include <complex>
#include <filesystem>
#include <fstream>
#include <numbers>

#include "rebasin/calibration.hpp"

namespace rebasin {
namespace {

namespace fs = std::filesystem;

class TempDir {
 public:
  TempDir() {
    path_ = fs::temp_directory_path() /
            ("rebasin_calib_" + std::to_string(::testing::UnitTest::GetInstance()->random_seed()) +
             "_" + ::testing::UnitTest::GetInstance()->current_test_info()->name());
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  fs::path operator/(const std::string& s) const { return path_ / s; }

 private:
  fs::path path_;
};

void put16(std::string& s, std::uint16_t v) {
  s += static_cast<char>(v & 0xff);
  s += static_cast<char>(v >> 8);
}
void put32(std::string& s, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) s += static_cast<char>((v >> (8 * i)) & 0xff);
}

std::string wav_bytes(const std::vector<std::int16_t>& pcm, std::uint16_t channels = 1,
                      std::uint16_t bits = 16, std::uint32_t rate = 16000,
                      std::uint16_t format = 1) {
  std::string fmt, s;
  put16(fmt, format);
  put16(fmt, channels);
  put32(fmt, rate);
  put32(fmt, rate * channels * bits / 8);
  put16(fmt, static_cast<std::uint16_t>(channels * bits / 8));
  put16(fmt, bits);
  const auto data_size = static_cast<std::uint32_t>(pcm.size() * 2);
  s += "RIFF";
  put32(s, 4 + 8 + static_cast<std::uint32_t>(fmt.size()) + 8 + data_size);
  s += "WAVE";
  s += "fmt ";
  put32(s, static_cast<std::uint32_t>(fmt.size()));
  s += fmt;
  s += "data";
  put32(s, data_size);
  for (auto v : pcm) put16(s, static_cast<std::uint16_t>(v));
  return s;
}

void write_file(const fs::path& p, const std::string& bytes) {
  std::ofstream f(p, std::ios::binary);
  f << bytes;
}

CalibrationSpec small_spec(std::size_t clip_len = 2048) {
  CalibrationSpec s;
  s.clip_len = clip_len;
  s.batch_size = 4;
  s.seed = 11;
  s.sources = {{SourceKind::SineMix, 3, {{"min_hz", 100.0}, {"max_hz", 3000.0}}},
               {SourceKind::BandNoise, 3, {{"min_hz", 200.0}, {"max_hz", 4000.0}}},
               {SourceKind::Chirp, 2, {{"min_hz", 100.0}, {"max_hz", 2000.0}}},
               {SourceKind::SineMix, 2, {{"harmonic", true}}}};
  return s;
}

TEST(CalibrationSpec, Validation) {
  auto s = small_spec();
  EXPECT_NO_THROW(s.validate(400));
  EXPECT_THROW(s.validate(4096), ValidationError);
  s.sources[0].count = 0;
  EXPECT_THROW(s.validate(), ValidationError);
  s = small_spec();
  s.batch_size = 0;
  EXPECT_THROW(s.validate(), ValidationError);
  s = small_spec();
  s.sources.clear();
  EXPECT_THROW(s.validate(), ValidationError);
  s = small_spec();
  s.sources.push_back({SourceKind::RawFile, 2, {{"paths", {"a.f32"}}}});
  EXPECT_THROW(s.validate(), ValidationError);
}

TEST(CalibrationSpec, JsonRoundTripAndDigest) {
  const auto s = small_spec();
  const auto back = parse_calibration_spec(nlohmann::json(s).dump());
  EXPECT_EQ(calibration_digest(back), calibration_digest(s));
  auto t = s;
  t.seed = 12;
  EXPECT_NE(calibration_digest(t), calibration_digest(s));
  EXPECT_THROW(parse_calibration_spec("{\"sources\": [{\"kind\": \"whale\"}]}"), Error);
  EXPECT_EQ(CalibrationSpec::desk_default().total_clips(), 128u);
}

TEST(GenSynthetic, DeterministicPerSeedAndIndex) {
  const auto s = small_spec();
  for (std::size_t src = 0; src < s.sources.size(); ++src) {
    EXPECT_EQ(gen_synthetic(s, src, 1), gen_synthetic(s, src, 1));
    EXPECT_NE(gen_synthetic(s, src, 0), gen_synthetic(s, src, 1));
  }
  auto t = s;
  t.seed = 12;
  EXPECT_NE(gen_synthetic(s, 0, 0), gen_synthetic(t, 0, 0));
}

TEST(GenSynthetic, PeakIsNinetyPercent) {
  const auto s = CalibrationSpec::desk_default(3);
  for (std::size_t src = 0; src < s.sources.size(); ++src) {
    for (std::size_t i = 0; i < 4; ++i) {
      const auto clip = gen_synthetic(s, src, i);
      ASSERT_EQ(clip.size(), s.clip_len);
      float peak = 0.0f;
      for (float v : clip) peak = std::max(peak, std::abs(v));
      EXPECT_NEAR(peak, 0.9, 1e-6);
    }
  }
}

// Power-weighted mean frequency from a direct DFT.
double spectral_centroid(const std::vector<float>& x, double rate) {
  const std::size_t n = x.size();
  double num = 0.0, den = 0.0;
  for (std::size_t k = 1; k < n / 2; ++k) {
    std::complex<double> acc = 0.0;
    for (std::size_t t = 0; t < n; ++t) {
      const double a = -2.0 * std::numbers::pi * static_cast<double>(k * t % n) /
                       static_cast<double>(n);
      acc += static_cast<double>(x[t]) * std::complex<double>(std::cos(a), std::sin(a));
    }
    const double p = std::norm(acc);
    num += p * static_cast<double>(k) * rate / static_cast<double>(n);
    den += p;
  }
  return num / den;
}

TEST(GenSynthetic, BandNoiseCentroidLiesInBand) {
  auto s = small_spec(1024);
  for (std::size_t i = 0; i < s.sources[1].count; ++i) {
    const auto [lo, hi] = band_noise_band(s, 1, i);
    EXPECT_NEAR(hi, 2 * lo, 1e-9);
    EXPECT_GE(lo, 200.0);
    EXPECT_LE(hi, 4000.0 + 1e-9);
    const double c = spectral_centroid(gen_synthetic(s, 1, i), s.sample_rate);
    EXPECT_GE(c, lo) << "clip " << i;
    EXPECT_LE(c, hi) << "clip " << i;
  }
  s.sources[1].params = {{"low_hz", 1000.0}, {"high_hz", 1500.0}};
  const double c = spectral_centroid(gen_synthetic(s, 1, 0), s.sample_rate);
  EXPECT_GE(c, 1000.0);
  EXPECT_LE(c, 1500.0);
}

TEST(GenSynthetic, RawFileSourceIsRejected) {
  auto s = small_spec();
  s.sources.push_back({SourceKind::RawFile, 1, {{"paths", {"x.f32"}}}});
  EXPECT_THROW(gen_synthetic(s, 4, 0), ValidationError);
}

TEST(LoadRawAudio, Pcm16Scaling) {
  TempDir dir;
  write_file(dir / "a.wav", wav_bytes({16384, -32768, 0, 32767}));
  const auto clip = load_raw_audio(dir / "a.wav");
  ASSERT_EQ(clip.samples.size(), 4u);
  EXPECT_EQ(clip.samples[0], 0.5f);
  EXPECT_EQ(clip.samples[1], -1.0f);
  EXPECT_EQ(clip.samples[2], 0.0f);
  EXPECT_EQ(clip.sample_rate, 16000.0);
}

TEST(LoadRawAudio, RawF32RoundTripIsBitExact) {
  TempDir dir;
  const auto clip = gen_synthetic(small_spec(), 1, 0);
  write_raw_f32(dir / "c.f32", clip);
  const auto back = load_raw_audio(dir / "c.f32");
  ASSERT_EQ(back.samples.size(), clip.size());
  EXPECT_EQ(std::memcmp(back.samples.data(), clip.data(), clip.size() * 4), 0);
}

TEST(LoadRawAudio, Errors) {
  TempDir dir;
  write_file(dir / "stereo.wav", wav_bytes({1, 2}, 2));
  EXPECT_THROW(load_raw_audio(dir / "stereo.wav"), FormatError);
  write_file(dir / "b8.wav", wav_bytes({1, 2}, 1, 8));
  EXPECT_THROW(load_raw_audio(dir / "b8.wav"), FormatError);
  write_file(dir / "float.wav", wav_bytes({1, 2}, 1, 16, 16000, 3));
  EXPECT_THROW(load_raw_audio(dir / "float.wav"), FormatError);
  auto trunc = wav_bytes({1, 2, 3, 4});
  trunc.resize(trunc.size() - 3);
  write_file(dir / "trunc.wav", trunc);
  EXPECT_THROW(load_raw_audio(dir / "trunc.wav"), FormatError);
  write_file(dir / "junk.wav", "not a wav file at all");
  EXPECT_THROW(load_raw_audio(dir / "junk.wav"), FormatError);
  write_file(dir / "odd.f32", "abcde");
  EXPECT_THROW(load_raw_audio(dir / "odd.f32"), FormatError);
  write_file(dir / "x.mp3", "abcd");
  EXPECT_THROW(load_raw_audio(dir / "x.mp3"), FormatError);
  EXPECT_THROW(load_raw_audio(dir / "missing.f32"), IoError);
  const float loud[2] = {0.5f, 1.5f};
  write_raw_f32(dir / "loud.f32", loud);
  EXPECT_THROW(load_raw_audio(dir / "loud.f32"), ValidationError);
}

TEST(Batches, SizesAndDeterminism) {
  CalibrationSpec s;
  s.clip_len = 256;
  s.batch_size = 4;
  s.sources = {{SourceKind::Chirp, 10, {}}};
  const auto b = batches(s);
  ASSERT_EQ(b.size(), 3u);
  EXPECT_EQ(b[0].shape, (std::vector<std::size_t>{4, 256}));
  EXPECT_EQ(b[1].dim(0), 4u);
  EXPECT_EQ(b[2].dim(0), 2u);
  const auto again = batches(s);
  for (std::size_t i = 0; i < b.size(); ++i) EXPECT_TRUE(b[i].same_bits(again[i]));
  for (const auto& t : b) {
    for (float v : t.data) ASSERT_LE(std::abs(v), 1.0f);
  }
}

TEST(Batches, SeededInterleaveMatchesGolden) {
  CalibrationSpec s;
  s.clip_len = 64;
  s.seed = 2024;
  s.sources = {{SourceKind::SineMix, 5, {}}, {SourceKind::BandNoise, 5, {}}};
  const auto order = clip_order(s);
  // Pinned output of the seeded shuffle for seed 2024.
  const std::vector<ClipRef> golden = {{0, 1}, {0, 3}, {0, 4}, {1, 0}, {0, 2},
                                       {0, 0}, {1, 1}, {1, 4}, {1, 2}, {1, 3}};
  EXPECT_EQ(order, golden);
  EXPECT_EQ(clip_order(s), order);

  // The batches follow the order clip by clip.
  const auto b = batches(s);
  for (std::size_t i = 0; i < order.size(); ++i) {
    const auto clip = gen_synthetic(s, order[i].source, order[i].index);
    const Tensor& t = b[i / s.batch_size];
    EXPECT_EQ(std::memcmp(t.data.data() + (i % s.batch_size) * 64, clip.data(), 64 * 4), 0);
  }
}

TEST(Batches, RawFilesArePaddedOrTruncated) {
  TempDir dir;
  const std::vector<float> short_clip(100, 0.25f), long_clip(700, -0.5f);
  write_raw_f32(dir / "s.f32", short_clip);
  write_raw_f32(dir / "l.f32", long_clip);
  write_file(dir / "r.wav", wav_bytes(std::vector<std::int16_t>(300, 8192), 1, 16, 8000));
  CalibrationSpec s;
  s.clip_len = 512;
  s.batch_size = 8;
  s.sources = {{SourceKind::RawFile,
                2,
                {{"paths", {(dir / "s.f32").string(), (dir / "l.f32").string()}}}}};
  const auto b = batches(s);
  ASSERT_EQ(b.size(), 1u);
  for (const auto& ref : clip_order(s)) {
    const auto clip = load_clip(s, ref);
    ASSERT_EQ(clip.size(), 512u);
    if (ref.index == 0) {
      EXPECT_EQ(clip[99], 0.25f);
      EXPECT_EQ(clip[100], 0.0f);
    } else {
      EXPECT_EQ(clip[511], -0.5f);
    }
  }
  s.sources[0].params["paths"][1] = (dir / "gone.f32").string();
  EXPECT_THROW(batches(s), IoError);
  s.sources[0].params["paths"][1] = (dir / "r.wav").string();
  EXPECT_THROW(batches(s), ValidationError);
}

}  // namespace
}  // namespace rebasin
