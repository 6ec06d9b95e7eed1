#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "ddstream/errors.hpp"
#include "ddstream/tensor.hpp"

namespace ddstream {

inline constexpr std::size_t kMaxFrames = 300;
inline constexpr std::size_t kFeatureBins = 256;
inline constexpr std::size_t kSampleRate = 16000;
inline constexpr std::size_t kFrameSamples = 480;  // 30 ms
inline constexpr std::size_t kFftSize = 512;
inline constexpr double kEnergyFloor = 1e-10;

struct FeatureSequence {
  Tensor<float> frames;  // [T x F]
  int label = 0;         // 0 = not directed, 1 = device directed
  std::string id;

  std::size_t length() const { return frames.dim(0); }
};

using WarningSink = std::function<void(const std::string&)>;
void StderrWarning(const std::string& message);

// Feature file: "FEAT", u32 version 1, u32 n_frames, u32 n_bins, then
// n_frames x n_bins little-endian f32, row-major.
void WriteFeat(const std::filesystem::path& path, const Tensor<float>& frames);
// Sequences longer than kMaxFrames are cut to kMaxFrames and `warn` is told.
FeatureSequence ReadFeat(const std::filesystem::path& path, const WarningSink& warn = StderrWarning);

struct ManifestEntry {
  std::filesystem::path path;
  int label = 0;
};

// UTF-8 lines `path<TAB>label`; relative paths resolve against the
// manifest's directory.
struct Manifest {
  std::vector<ManifestEntry> entries;

  static Manifest Load(const std::filesystem::path& path);
  void Save(const std::filesystem::path& path) const;
  void Validate() const;
};

std::vector<FeatureSequence> LoadDataset(const Manifest& manifest, const WarningSink& warn = StderrWarning);

// Log-energy STFT: 480-sample Hann window, 480-sample hop, 512-point FFT,
// log(|X|^2 + 1e-10), bins 1..256.
Tensor<float> ExtractLogStft(std::span<const float> pcm);
std::size_t StftFrameCount(std::size_t samples);

// 16-bit PCM WAV, mono (multi-channel input is averaged) at 16 kHz.
std::vector<float> ReadWav(const std::filesystem::path& path);
void WriteWav(const std::filesystem::path& path, std::span<const float> pcm);

struct SynthOptions {
  std::size_t n_per_class = 100;
  std::uint64_t seed = 0;
  // Scales the chirp ridge height relative to the background noise.
  double class_gap = 1.0;
  std::size_t min_frames = 40;
  std::size_t max_frames = kMaxFrames;
  std::size_t bins = kFeatureBins;
};

// Class 1: a rising band-limited ridge over stationary noise. Class 0: the
// same noise with the ridge energy spread evenly over all bins, so both
// classes have equal mean log energy per frame. Classes alternate 1, 0, ...
std::vector<FeatureSequence> SynthSequences(const SynthOptions& options);
// Writes utt_NNNNN.feat files and manifest.tsv into `dir`.
Manifest WriteSynthDataset(const std::filesystem::path& dir, const SynthOptions& options);

}  // namespace ddstream
