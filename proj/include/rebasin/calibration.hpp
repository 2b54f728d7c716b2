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

// Calibration inputs fed identically to both encoders. At desk scale the
// clips are synthetic (band noise and chirps for speech-like material,
// harmonic sine stacks for music-like material); real audio can be mixed in
// through raw_file sources.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <numbers>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "rebasin/error.hpp"
#include "rebasin/rng.hpp"
#include "rebasin/tensor_store.hpp"

namespace rebasin {

enum class SourceKind { SineMix, BandNoise, Chirp, RawFile };

inline std::string to_string(SourceKind k) {
  switch (k) {
    case SourceKind::SineMix: return "sine_mix";
    case SourceKind::BandNoise: return "band_noise";
    case SourceKind::Chirp: return "chirp";
    case SourceKind::RawFile: return "raw_file";
  }
  return "?";
}

inline SourceKind parse_source_kind(const std::string& s) {
  if (s == "sine_mix") return SourceKind::SineMix;
  if (s == "band_noise") return SourceKind::BandNoise;
  if (s == "chirp") return SourceKind::Chirp;
  if (s == "raw_file") return SourceKind::RawFile;
  throw ValidationError("unknown calibration source kind '" + s + "'");
}

// params keys:
//   sine_mix:   min_hz, max_hz, harmonic (bool)
//   band_noise: min_hz, max_hz (range for a random octave band), or
//               low_hz + high_hz for a fixed band
//   chirp:      min_hz, max_hz
//   raw_file:   paths (list of .f32 / .wav files); count defaults to
//               len(paths)
struct SourceSpec {
  SourceKind kind = SourceKind::SineMix;
  std::size_t count = 1;
  nlohmann::json params = nlohmann::json::object();

  double param(const char* key, double fallback) const {
    return params.is_object() && params.contains(key) ? params.at(key).get<double>()
                                                      : fallback;
  }

  bool flag(const char* key, bool fallback) const {
    return params.is_object() && params.contains(key) ? params.at(key).get<bool>() : fallback;
  }
};

struct CalibrationSpec {
  std::vector<SourceSpec> sources;
  double sample_rate = 16000.0;
  std::size_t clip_len = 16000;
  std::size_t batch_size = 16;
  std::uint64_t seed = 0;

  std::size_t total_clips() const {
    std::size_t n = 0;
    for (const auto& s : sources) n += s.count;
    return n;
  }

  void validate(std::size_t receptive_field = 1) const {
    if (sources.empty()) throw ValidationError("calibration needs at least one source");
    for (const auto& s : sources) {
      if (s.count < 1) throw ValidationError("calibration source count must be >= 1");
      if (s.kind == SourceKind::RawFile) {
        if (!s.params.contains("paths") || !s.params["paths"].is_array()) {
          throw ValidationError("raw_file source needs a 'paths' list");
        }
        if (s.count > s.params["paths"].size()) {
          throw ValidationError("raw_file count exceeds the number of paths");
        }
      }
    }
    if (batch_size < 1) throw ValidationError("batch_size must be >= 1");
    if (!(sample_rate > 0)) throw ValidationError("sample_rate must be positive");
    if (clip_len < receptive_field) {
      throw ValidationError("clip_len " + std::to_string(clip_len) +
                            " is shorter than the encoder receptive field " +
                            std::to_string(receptive_field));
    }
  }

  // 64 speech-like clips (band noise in low octaves plus chirps) and 64
  // music-like harmonic stacks, 1 s at 16 kHz.
  static CalibrationSpec desk_default(std::uint64_t seed = 0) {
    CalibrationSpec s;
    s.seed = seed;
    s.sources = {
        {SourceKind::BandNoise, 32, {{"min_hz", 100.0}, {"max_hz", 2000.0}}},
        {SourceKind::Chirp, 32, {{"min_hz", 100.0}, {"max_hz", 3000.0}}},
        {SourceKind::SineMix, 64,
         {{"min_hz", 80.0}, {"max_hz", 4000.0}, {"harmonic", true}}},
    };
    return s;
  }
};

inline void to_json(nlohmann::json& j, const SourceSpec& s) {
  j = nlohmann::json{{"kind", to_string(s.kind)}, {"count", s.count},
                     {"params", s.params}};
}

inline void from_json(const nlohmann::json& j, SourceSpec& s) {
  s.kind = parse_source_kind(j.at("kind").get<std::string>());
  s.params = j.value("params", nlohmann::json::object());
  if (s.params.is_null()) s.params = nlohmann::json::object();
  if (j.contains("count")) {
    s.count = j.at("count").get<std::size_t>();
  } else if (s.kind == SourceKind::RawFile && s.params.contains("paths")) {
    s.count = s.params["paths"].size();
  } else {
    throw ValidationError("calibration source is missing 'count'");
  }
}

inline void to_json(nlohmann::json& j, const CalibrationSpec& s) {
  j = nlohmann::json{{"sources", s.sources},     {"sample_rate", s.sample_rate},
                     {"clip_len", s.clip_len},   {"batch_size", s.batch_size},
                     {"seed", s.seed}};
}

inline void from_json(const nlohmann::json& j, CalibrationSpec& s) {
  j.at("sources").get_to(s.sources);
  s.sample_rate = j.value("sample_rate", 16000.0);
  s.clip_len = j.value("clip_len", std::size_t{16000});
  s.batch_size = j.value("batch_size", std::size_t{16});
  s.seed = j.value("seed", std::uint64_t{0});
}

inline CalibrationSpec parse_calibration_spec(const std::string& text) {
  try {
    return nlohmann::json::parse(text).get<CalibrationSpec>();
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("bad calibration spec JSON: ") + e.what());
  }
}

inline std::string calibration_digest(const CalibrationSpec& spec) {
  return digest_bytes(nlohmann::json(spec).dump());
}

// ---------------------------------------------------------------------------
// Raw audio I/O

struct AudioClip {
  std::vector<float> samples;
  double sample_rate = 0.0;  // 0 when the container does not declare one
};

namespace detail {

inline std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& p) {
  std::ifstream f(p, std::ios::binary);
  if (!f) throw IoError("cannot open '" + p.string() + "'");
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

inline std::uint32_t le32(const std::uint8_t* p) {
  return p[0] | (p[1] << 8) | (p[2] << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

inline std::uint16_t le16(const std::uint8_t* p) {
  return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
}

inline AudioClip parse_wav(const std::vector<std::uint8_t>& b,
                           const std::string& path) {
  if (b.size() < 12 || std::memcmp(b.data(), "RIFF", 4) != 0 ||
      std::memcmp(b.data() + 8, "WAVE", 4) != 0) {
    throw FormatError("'" + path + "' is not a RIFF/WAVE file");
  }
  std::size_t pos = 12;
  bool have_fmt = false;
  std::uint32_t rate = 0;
  while (pos + 8 <= b.size()) {
    const std::uint32_t size = le32(b.data() + pos + 4);
    const std::uint8_t* body = b.data() + pos + 8;
    const std::size_t avail = b.size() - pos - 8;
    if (std::memcmp(b.data() + pos, "fmt ", 4) == 0) {
      if (size < 16 || avail < 16) throw FormatError("truncated fmt chunk in '" + path + "'");
      const auto format = le16(body);
      const auto channels = le16(body + 2);
      rate = le32(body + 4);
      const auto bits = le16(body + 14);
      if (format != 1) throw FormatError("'" + path + "': only PCM WAV is supported");
      if (channels != 1) {
        throw FormatError("'" + path + "': expected mono, got " +
                          std::to_string(channels) + " channels");
      }
      if (bits != 16) {
        throw FormatError("'" + path + "': expected 16-bit samples, got " +
                          std::to_string(bits));
      }
      have_fmt = true;
    } else if (std::memcmp(b.data() + pos, "data", 4) == 0) {
      if (!have_fmt) throw FormatError("'" + path + "': data chunk before fmt chunk");
      if (size > avail || size % 2 != 0) {
        throw FormatError("'" + path + "': truncated data chunk");
      }
      AudioClip clip;
      clip.sample_rate = rate;
      clip.samples.resize(size / 2);
      for (std::size_t i = 0; i < clip.samples.size(); ++i) {
        const auto v = static_cast<std::int16_t>(le16(body + 2 * i));
        clip.samples[i] = static_cast<float>(v) / 32768.0f;
      }
      return clip;
    }
    pos += 8 + static_cast<std::size_t>(size) + (size & 1);
  }
  throw FormatError("'" + path + "' has no data chunk");
}

}  // namespace detail

// Reads a headerless little-endian f32 file (.f32) or a PCM16 mono WAV.
inline AudioClip load_raw_audio(const std::filesystem::path& path) {
  const auto bytes = detail::read_file_bytes(path);
  const std::string ext = path.extension().string();
  if (ext == ".wav" || ext == ".WAV") return detail::parse_wav(bytes, path.string());
  if (ext != ".f32") {
    throw FormatError("unsupported audio container '" + ext + "' (use .f32 or .wav)");
  }
  if (bytes.size() % 4 != 0) {
    throw FormatError("'" + path.string() + "' length is not a multiple of 4 bytes");
  }
  AudioClip clip;
  clip.samples.resize(bytes.size() / 4);
  std::memcpy(clip.samples.data(), bytes.data(), bytes.size());
  for (float v : clip.samples) {
    if (!std::isfinite(v) || std::abs(v) > 1.0f) {
      throw ValidationError("'" + path.string() + "' holds samples outside [-1, 1]");
    }
  }
  return clip;
}

inline void write_raw_f32(const std::filesystem::path& path,
                          std::span<const float> samples) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open '" + path.string() + "' for writing");
  f.write(reinterpret_cast<const char*>(samples.data()),
          static_cast<std::streamsize>(samples.size() * sizeof(float)));
  if (!f) throw IoError("failed to write '" + path.string() + "'");
}

// ---------------------------------------------------------------------------
// Synthetic clips

namespace detail {

inline void peak_normalize(std::vector<double>& x, double peak) {
  double m = 0.0;
  for (double v : x) m = std::max(m, std::abs(v));
  if (m > 0.0) {
    for (double& v : x) v *= peak / m;
  }
}

// Random-phase spectral synthesis restricted to [lo, hi] Hz: equivalent to
// ideal band-pass filtering of white noise over the clip.
inline std::vector<double> band_noise(Rng& rng, std::size_t n, double rate,
                                      double lo, double hi) {
  std::vector<double> x(n, 0.0);
  const double bin_hz = rate / static_cast<double>(n);
  const auto k_lo = static_cast<std::size_t>(std::ceil(lo / bin_hz));
  const auto k_hi = static_cast<std::size_t>(std::floor(hi / bin_hz));
  for (std::size_t k = std::max<std::size_t>(k_lo, 1); k <= k_hi && k < n / 2; ++k) {
    const double re = rng.normal();
    const double im = rng.normal();
    const double w = 2.0 * std::numbers::pi * static_cast<double>(k) / static_cast<double>(n);
    // Rotate a phasor instead of calling cos per sample; renormalize
    // periodically to stop magnitude drift.
    const double cw = std::cos(w), sw = std::sin(w);
    double pr = 1.0, pi = 0.0;
    for (std::size_t t = 0; t < n; ++t) {
      x[t] += re * pr - im * pi;
      const double nr = pr * cw - pi * sw;
      pi = pr * sw + pi * cw;
      pr = nr;
      if ((t & 1023) == 1023) {
        const double m = std::hypot(pr, pi);
        pr /= m;
        pi /= m;
      }
    }
  }
  return x;
}

}  // namespace detail

// The octave band used by band_noise clip (source, index), for checks.
inline std::pair<double, double> band_noise_band(const CalibrationSpec& spec,
                                                 std::size_t source,
                                                 std::size_t index) {
  const auto& src = spec.sources.at(source);
  if (src.params.is_object() && src.params.contains("low_hz") &&
      src.params.contains("high_hz")) {
    return {src.param("low_hz", 0), src.param("high_hz", 0)};
  }
  Rng rng(spec.seed, Rng::mix(source * 0x100000001ULL + index));
  const double min_hz = src.param("min_hz", 100.0);
  const double max_hz = std::min(src.param("max_hz", 4000.0), spec.sample_rate / 2);
  // log-uniform lower edge so the octave [lo, 2 lo] fits in [min, max]
  const double lo = min_hz * std::pow(2.0, rng.uniform() * std::max(0.0, std::log2(max_hz / (2 * min_hz))));
  return {lo, 2 * lo};
}

// Deterministic clip `index` of synthetic source `source`, peak 0.9.
inline std::vector<float> gen_synthetic(const CalibrationSpec& spec,
                                        std::size_t source, std::size_t index) {
  const auto& src = spec.sources.at(source);
  if (src.kind == SourceKind::RawFile) {
    throw ValidationError("gen_synthetic called on a raw_file source");
  }
  const std::size_t n = spec.clip_len;
  const double rate = spec.sample_rate;
  const double nyq = rate / 2;
  std::vector<double> x(n, 0.0);
  switch (src.kind) {
    case SourceKind::SineMix: {
      Rng rng(spec.seed, Rng::mix(source * 0x100000001ULL + index));
      const double min_hz = src.param("min_hz", 50.0);
      const double max_hz = std::min(src.param("max_hz", 4000.0), nyq);
      const bool harmonic = src.flag("harmonic", false);
      const std::size_t parts = 1 + rng.below(5);
      const double f0 = harmonic ? rng.uniform(min_hz, std::max(min_hz, max_hz / static_cast<double>(parts)))
                                 : 0.0;
      for (std::size_t p = 0; p < parts; ++p) {
        const double f = harmonic ? f0 * static_cast<double>(p + 1)
                                  : rng.uniform(min_hz, max_hz);
        const double amp = rng.uniform(0.2, 1.0);
        const double phase = rng.uniform(0.0, 2 * std::numbers::pi);
        const double w = 2 * std::numbers::pi * f / rate;
        for (std::size_t t = 0; t < n; ++t) {
          x[t] += amp * std::sin(w * static_cast<double>(t) + phase);
        }
      }
      break;
    }
    case SourceKind::BandNoise: {
      const auto [lo, hi] = band_noise_band(spec, source, index);
      // separate stream from the band draw
      Rng rng(spec.seed, Rng::mix(source * 0x100000001ULL + index) ^ 0x5bd1e995ULL);
      x = detail::band_noise(rng, n, rate, lo, hi);
      break;
    }
    case SourceKind::Chirp: {
      Rng rng(spec.seed, Rng::mix(source * 0x100000001ULL + index));
      const double min_hz = src.param("min_hz", 100.0);
      const double max_hz = std::min(src.param("max_hz", 4000.0), nyq);
      const double f_start = rng.uniform(min_hz, max_hz);
      const double f_end = rng.uniform(min_hz, max_hz);
      const double dur = static_cast<double>(n) / rate;
      const double phase = rng.uniform(0.0, 2 * std::numbers::pi);
      for (std::size_t t = 0; t < n; ++t) {
        const double s = static_cast<double>(t) / rate;
        x[t] = std::sin(2 * std::numbers::pi *
                            (f_start * s + (f_end - f_start) * s * s / (2 * dur)) +
                        phase);
      }
      break;
    }
    case SourceKind::RawFile:
      break;
  }
  detail::peak_normalize(x, 0.9);
  std::vector<float> out(n);
  std::transform(x.begin(), x.end(), out.begin(),
                 [](double v) { return static_cast<float>(v); });
  return out;
}

// One calibration clip identified by its source and per-source index.
struct ClipRef {
  std::size_t source = 0;
  std::size_t index = 0;
  bool operator==(const ClipRef&) const = default;
};

// Clip order over all sources: a seeded shuffle of every (source, index).
inline std::vector<ClipRef> clip_order(const CalibrationSpec& spec) {
  std::vector<ClipRef> order;
  order.reserve(spec.total_clips());
  for (std::size_t s = 0; s < spec.sources.size(); ++s) {
    for (std::size_t i = 0; i < spec.sources[s].count; ++i) order.push_back({s, i});
  }
  Rng rng(spec.seed, 0x0bde5eedULL);
  rng.shuffle(order);
  return order;
}

inline std::vector<float> load_clip(const CalibrationSpec& spec, const ClipRef& ref) {
  const auto& src = spec.sources.at(ref.source);
  if (src.kind != SourceKind::RawFile) return gen_synthetic(spec, ref.source, ref.index);
  const std::string path = src.params["paths"].at(ref.index).get<std::string>();
  if (!std::filesystem::exists(path)) {
    throw IoError("calibration file '" + path + "' does not exist");
  }
  AudioClip clip = load_raw_audio(path);
  if (clip.sample_rate != 0.0 && clip.sample_rate != spec.sample_rate) {
    throw ValidationError("'" + path + "' is " + std::to_string(clip.sample_rate) +
                          " Hz but the calibration spec declares " +
                          std::to_string(spec.sample_rate) + " Hz");
  }
  clip.samples.resize(spec.clip_len, 0.0f);
  return std::move(clip.samples);
}

// All calibration batches in order, each [batch_size, clip_len]; the final
// batch may be partial.
inline std::vector<Tensor> batches(const CalibrationSpec& spec,
                                   std::size_t receptive_field = 1) {
  spec.validate(receptive_field);
  const auto order = clip_order(spec);
  std::vector<Tensor> out;
  for (std::size_t start = 0; start < order.size(); start += spec.batch_size) {
    const std::size_t b = std::min(spec.batch_size, order.size() - start);
    Tensor t = Tensor::zeros({b, spec.clip_len});
    for (std::size_t i = 0; i < b; ++i) {
      const auto clip = load_clip(spec, order[start + i]);
      std::copy(clip.begin(), clip.end(), t.data.begin() + i * spec.clip_len);
    }
    out.push_back(std::move(t));
  }
  return out;
}

}  // namespace rebasin
