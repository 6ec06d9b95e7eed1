#include "ddstream/data.hpp"

#include <fftw3.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iostream>
#include <iterator>
#include <numbers>
#include <random>
#include <set>
#include <sstream>

namespace ddstream {

static_assert(std::endian::native == std::endian::little, "feature I/O assumes a little-endian host");

void StderrWarning(const std::string& message) { std::cerr << "warning: " << message << "\n"; }

namespace {

constexpr char kFeatMagic[4] = {'F', 'E', 'A', 'T'};
constexpr std::uint32_t kFeatVersion = 1;
constexpr std::size_t kFeatHeader = 16;
// Refuse single files above 1 GiB of payload; such headers are corrupt.
constexpr std::uint64_t kMaxFeatPayload = std::uint64_t{1} << 30;

std::string ReadAll(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError(FormatErrorKind::kIo, "cannot open " + path.string());
  return std::string(std::istreambuf_iterator<char>(in), {});
}

void WriteAll(const std::filesystem::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError(FormatErrorKind::kIo, "cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError(FormatErrorKind::kIo, "write failed: " + path.string());
}

template <typename V>
void Put(std::string& buf, V v) {
  char b[sizeof(V)];
  std::memcpy(b, &v, sizeof(V));
  buf.append(b, sizeof(V));
}

template <typename V>
V Get(const std::string& buf, std::size_t pos) {
  V v;
  std::memcpy(&v, buf.data() + pos, sizeof(V));
  return v;
}

}  // namespace

void WriteFeat(const std::filesystem::path& path, const Tensor<float>& frames) {
  if (frames.rank() != 2) throw DimensionError("feature file: expected [T x F] frames");
  std::string buf;
  buf.reserve(kFeatHeader + frames.size() * sizeof(float));
  buf.append(kFeatMagic, 4);
  Put<std::uint32_t>(buf, kFeatVersion);
  Put<std::uint32_t>(buf, static_cast<std::uint32_t>(frames.dim(0)));
  Put<std::uint32_t>(buf, static_cast<std::uint32_t>(frames.dim(1)));
  buf.append(reinterpret_cast<const char*>(frames.data().data()), frames.size() * sizeof(float));
  WriteAll(path, buf);
}

FeatureSequence ReadFeat(const std::filesystem::path& path, const WarningSink& warn) {
  const std::string buf = ReadAll(path);
  const std::string name = path.string();
  if (buf.size() < 4 || std::memcmp(buf.data(), kFeatMagic, 4) != 0) {
    throw FormatError(FormatErrorKind::kBadMagic, name + ": not a feature file");
  }
  if (buf.size() < kFeatHeader) throw FormatError(FormatErrorKind::kTruncated, name + ": header cut short");
  const auto version = Get<std::uint32_t>(buf, 4);
  if (version != kFeatVersion) {
    throw FormatError(FormatErrorKind::kBadVersion, name + ": unsupported version " + std::to_string(version));
  }
  const std::uint64_t frames = Get<std::uint32_t>(buf, 8);
  const std::uint64_t bins = Get<std::uint32_t>(buf, 12);
  if (frames == 0 || bins == 0) throw FormatError(FormatErrorKind::kEmpty, name + ": zero frames or bins");
  const std::uint64_t payload = frames * bins * sizeof(float);
  if (payload > kMaxFeatPayload) {
    throw FormatError(FormatErrorKind::kDimensionOverflow,
                      name + ": " + std::to_string(frames) + " x " + std::to_string(bins) + " exceeds the size limit");
  }
  if (buf.size() < kFeatHeader + payload) {
    throw FormatError(FormatErrorKind::kTruncated, name + ": expected " + std::to_string(payload) +
                                                       " data bytes, found " + std::to_string(buf.size() - kFeatHeader));
  }
  if (buf.size() > kFeatHeader + payload) {
    throw FormatError(FormatErrorKind::kShapeMismatch, name + ": trailing bytes after data");
  }
  std::size_t keep = static_cast<std::size_t>(frames);
  if (keep > kMaxFrames) {
    if (warn) warn(name + ": " + std::to_string(frames) + " frames truncated to " + std::to_string(kMaxFrames));
    keep = kMaxFrames;
  }
  std::vector<float> data(keep * bins);
  std::memcpy(data.data(), buf.data() + kFeatHeader, data.size() * sizeof(float));
  for (float v : data) {
    if (!std::isfinite(v)) throw FormatError(FormatErrorKind::kBadValue, name + ": non-finite feature value");
  }
  FeatureSequence seq;
  seq.frames = Tensor<float>({keep, static_cast<std::size_t>(bins)}, std::move(data));
  seq.id = path.stem().string();
  return seq;
}

Manifest Manifest::Load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError(FormatErrorKind::kIo, "cannot open manifest " + path.string());
  const auto base = path.parent_path();
  Manifest m;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto tab = line.rfind('\t');
    const std::string where = path.string() + ":" + std::to_string(lineno);
    if (tab == std::string::npos || tab == 0) throw FormatError(FormatErrorKind::kBadValue, where + ": expected path<TAB>label");
    const std::string label = line.substr(tab + 1);
    if (label != "0" && label != "1") throw FormatError(FormatErrorKind::kBadValue, where + ": label must be 0 or 1");
    std::filesystem::path p = line.substr(0, tab);
    if (p.is_relative()) p = base / p;
    m.entries.push_back({p.lexically_normal(), label == "1" ? 1 : 0});
  }
  m.Validate();
  return m;
}

void Manifest::Save(const std::filesystem::path& path) const {
  Validate();
  const auto base = path.parent_path();
  std::string text;
  for (const auto& e : entries) {
    std::filesystem::path p = e.path;
    if (!base.empty() && p.is_absolute() == base.is_absolute()) {
      const auto rel = p.lexically_relative(base);
      if (!rel.empty() && *rel.begin() != "..") p = rel;
    }
    text += p.generic_string() + "\t" + std::to_string(e.label) + "\n";
  }
  WriteAll(path, text);
}

void Manifest::Validate() const {
  if (entries.empty()) throw FormatError(FormatErrorKind::kEmpty, "manifest has no entries");
  std::set<std::string> seen;
  for (const auto& e : entries) {
    if (e.label != 0 && e.label != 1) throw FormatError(FormatErrorKind::kBadValue, "manifest label must be 0 or 1");
    if (!seen.insert(e.path.lexically_normal().string()).second) {
      throw FormatError(FormatErrorKind::kBadValue, "manifest lists " + e.path.string() + " twice");
    }
  }
}

std::vector<FeatureSequence> LoadDataset(const Manifest& manifest, const WarningSink& warn) {
  std::vector<FeatureSequence> out;
  out.reserve(manifest.entries.size());
  for (const auto& e : manifest.entries) {
    FeatureSequence s = ReadFeat(e.path, warn);
    s.label = e.label;
    out.push_back(std::move(s));
  }
  return out;
}

std::size_t StftFrameCount(std::size_t samples) {
  return samples < kFrameSamples ? 0 : (samples - kFrameSamples) / kFrameSamples + 1;
}

namespace {

struct FftwPlan {
  double* in = nullptr;
  fftw_complex* out = nullptr;
  fftw_plan plan = nullptr;

  FftwPlan() {
    in = fftw_alloc_real(kFftSize);
    out = fftw_alloc_complex(kFftSize / 2 + 1);
    plan = fftw_plan_dft_r2c_1d(static_cast<int>(kFftSize), in, out, FFTW_ESTIMATE);
  }
  ~FftwPlan() {
    fftw_destroy_plan(plan);
    fftw_free(in);
    fftw_free(out);
  }
  FftwPlan(const FftwPlan&) = delete;
  FftwPlan& operator=(const FftwPlan&) = delete;
};

}  // namespace

Tensor<float> ExtractLogStft(std::span<const float> pcm) {
  if (pcm.empty()) throw std::invalid_argument("stft: empty audio");
  const std::size_t frames = StftFrameCount(pcm.size());
  if (frames == 0) {
    throw std::invalid_argument("stft: need at least " + std::to_string(kFrameSamples) + " samples, got " +
                                std::to_string(pcm.size()));
  }
  std::vector<double> window(kFrameSamples);
  for (std::size_t n = 0; n < kFrameSamples; ++n) {
    window[n] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * static_cast<double>(n) / kFrameSamples);
  }
  FftwPlan fft;
  Tensor<float> out({frames, kFeatureBins});
  for (std::size_t t = 0; t < frames; ++t) {
    const float* src = pcm.data() + t * kFrameSamples;
    for (std::size_t n = 0; n < kFrameSamples; ++n) fft.in[n] = src[n] * window[n];
    std::fill(fft.in + kFrameSamples, fft.in + kFftSize, 0.0);
    fftw_execute(fft.plan);
    for (std::size_t k = 1; k <= kFeatureBins; ++k) {
      const double re = fft.out[k][0], im = fft.out[k][1];
      out.at(t, k - 1) = static_cast<float>(std::log(re * re + im * im + kEnergyFloor));
    }
  }
  return out;
}

std::vector<float> ReadWav(const std::filesystem::path& path) {
  const std::string buf = ReadAll(path);
  const std::string name = path.string();
  if (buf.size() < 12 || buf.compare(0, 4, "RIFF") != 0 || buf.compare(8, 4, "WAVE") != 0) {
    throw FormatError(FormatErrorKind::kBadMagic, name + ": not a RIFF/WAVE file");
  }
  std::size_t pos = 12;
  std::uint16_t channels = 0, bits = 0, format = 0;
  std::uint32_t rate = 0;
  bool have_fmt = false;
  while (pos + 8 <= buf.size()) {
    const std::string id = buf.substr(pos, 4);
    const std::uint32_t size = Get<std::uint32_t>(buf, pos + 4);
    pos += 8;
    if (size > buf.size() - pos) throw FormatError(FormatErrorKind::kTruncated, name + ": chunk " + id + " cut short");
    if (id == "fmt ") {
      if (size < 16) throw FormatError(FormatErrorKind::kTruncated, name + ": fmt chunk too small");
      format = Get<std::uint16_t>(buf, pos);
      channels = Get<std::uint16_t>(buf, pos + 2);
      rate = Get<std::uint32_t>(buf, pos + 4);
      bits = Get<std::uint16_t>(buf, pos + 14);
      have_fmt = true;
    } else if (id == "data") {
      if (!have_fmt) throw FormatError(FormatErrorKind::kBadValue, name + ": data before fmt chunk");
      if (format != 1 || bits != 16) throw FormatError(FormatErrorKind::kBadValue, name + ": only 16-bit PCM is supported");
      if (rate != kSampleRate) {
        throw FormatError(FormatErrorKind::kBadValue, name + ": sample rate " + std::to_string(rate) + ", expected 16000");
      }
      if (channels == 0) throw FormatError(FormatErrorKind::kBadValue, name + ": zero channels");
      const std::size_t frames = size / (2u * channels);
      std::vector<float> pcm(frames);
      for (std::size_t i = 0; i < frames; ++i) {
        double acc = 0;
        for (std::size_t c = 0; c < channels; ++c) acc += Get<std::int16_t>(buf, pos + 2 * (i * channels + c));
        pcm[i] = static_cast<float>(acc / channels / 32768.0);
      }
      return pcm;
    }
    pos += size + (size & 1u);
  }
  throw FormatError(FormatErrorKind::kTruncated, name + ": no data chunk");
}

void WriteWav(const std::filesystem::path& path, std::span<const float> pcm) {
  std::string buf = "RIFF";
  const std::uint32_t data_bytes = static_cast<std::uint32_t>(pcm.size() * 2);
  Put<std::uint32_t>(buf, 36 + data_bytes);
  buf += "WAVEfmt ";
  Put<std::uint32_t>(buf, 16);
  Put<std::uint16_t>(buf, 1);
  Put<std::uint16_t>(buf, 1);
  Put<std::uint32_t>(buf, kSampleRate);
  Put<std::uint32_t>(buf, kSampleRate * 2);
  Put<std::uint16_t>(buf, 2);
  Put<std::uint16_t>(buf, 16);
  buf += "data";
  Put<std::uint32_t>(buf, data_bytes);
  for (float v : pcm) {
    const double s = std::clamp(static_cast<double>(v), -1.0, 32767.0 / 32768.0);
    Put<std::int16_t>(buf, static_cast<std::int16_t>(std::lround(s * 32768.0)));
  }
  WriteAll(path, buf);
}

std::vector<FeatureSequence> SynthSequences(const SynthOptions& options) {
  if (options.n_per_class == 0) throw std::invalid_argument("synth: n must be at least 1");
  if (options.min_frames == 0 || options.min_frames > options.max_frames) {
    throw std::invalid_argument("synth: bad frame length range");
  }
  if (options.bins < 8) throw std::invalid_argument("synth: need at least 8 bins");
  std::mt19937_64 rng(options.seed);
  std::normal_distribution<double> noise(0.0, 1.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const std::size_t F = options.bins;
  const double fb = static_cast<double>(F);
  const double height = 2.0 * options.class_gap;
  const double width = fb / 64.0 + 1.0;
  std::vector<FeatureSequence> out;
  for (std::size_t i = 0; i < 2 * options.n_per_class; ++i) {
    const int label = i % 2 == 0 ? 1 : 0;
    const std::size_t T = options.min_frames +
                          static_cast<std::size_t>(unit(rng) * static_cast<double>(options.max_frames - options.min_frames + 1));
    const std::size_t frames = std::min(T, options.max_frames);
    const double gain = -2.0 + 4.0 * unit(rng);
    const double lo = fb * (0.08 + 0.15 * unit(rng));
    const double hi = fb * (0.55 + 0.3 * unit(rng));
    Tensor<float> x({frames, F});
    std::vector<double> ridge(F);
    for (std::size_t t = 0; t < frames; ++t) {
      const double center = lo + (hi - lo) * (frames > 1 ? static_cast<double>(t) / (frames - 1) : 0.0);
      double mean = 0;
      for (std::size_t f = 0; f < F; ++f) {
        const double z = (static_cast<double>(f) - center) / width;
        ridge[f] = height * std::exp(-0.5 * z * z);
        mean += ridge[f];
      }
      mean /= fb;
      for (std::size_t f = 0; f < F; ++f) {
        const double base = gain + noise(rng);
        x.at(t, f) = static_cast<float>(base + (label == 1 ? ridge[f] : mean));
      }
    }
    FeatureSequence s;
    s.frames = std::move(x);
    s.label = label;
    char id[32];
    std::snprintf(id, sizeof(id), "utt_%05zu", i);
    s.id = id;
    out.push_back(std::move(s));
  }
  return out;
}

Manifest WriteSynthDataset(const std::filesystem::path& dir, const SynthOptions& options) {
  std::filesystem::create_directories(dir);
  Manifest m;
  for (const auto& s : SynthSequences(options)) {
    const auto path = dir / (s.id + ".feat");
    WriteFeat(path, s.frames);
    m.entries.push_back({path, s.label});
  }
  m.Save(dir / "manifest.tsv");
  return m;
}

}  // namespace ddstream
