#include "ddstream/model.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <random>
#include <set>
#include <sstream>

namespace ddstream {

namespace {

std::string Trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::size_t ParseCount(const std::string& key, const std::string& v) {
  std::size_t pos = 0;
  long long n = 0;
  try {
    n = std::stoll(v, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (pos != v.size() || n <= 0) {
    throw std::invalid_argument("config: '" + key + "' must be a positive integer, got '" + v + "'");
  }
  return static_cast<std::size_t>(n);
}

bool ParseBool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw std::invalid_argument("config: '" + key + "' must be true/false, got '" + v + "'");
}

}  // namespace

KeyValueFile KeyValueFile::Parse(const std::string& text) {
  KeyValueFile kv;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = Trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw std::invalid_argument("config line " + std::to_string(lineno) + ": expected key = value");
    }
    const std::string key = Trim(line.substr(0, eq));
    const std::string value = Trim(line.substr(eq + 1));
    if (key.empty()) throw std::invalid_argument("config line " + std::to_string(lineno) + ": empty key");
    if (kv.values_.count(key)) {
      throw std::invalid_argument("config line " + std::to_string(lineno) + ": duplicate key '" + key + "'");
    }
    kv.values_[key] = value;
  }
  return kv;
}

KeyValueFile KeyValueFile::Load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::invalid_argument("cannot read config " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return Parse(ss.str());
}

std::optional<std::string> KeyValueFile::get(const std::string& key) const {
  auto it = values_.find(key);
  if (it == values_.end()) return std::nullopt;
  return it->second;
}

const char* ToString(Topology t) {
  return t == Topology::kResLstm ? "reslstm" : "lstm_baseline";
}

const std::vector<std::string>& ModelConfig::Keys() {
  static const std::vector<std::string> keys = {
      "topology",    "feature_bins", "stem_channels", "block_channels",
      "freq_stride", "pool_then_flatten", "lstm_layers", "lstm_units",
      "dense_layers", "dense_units", "aggregation", "truncation_frames"};
  return keys;
}

ModelConfig ModelConfig::FromKeyValues(const KeyValueFile& kv) {
  ModelConfig c;
  if (auto v = kv.get("topology")) {
    if (*v == "reslstm") {
      c.topology = Topology::kResLstm;
    } else if (*v == "lstm_baseline") {
      c.topology = Topology::kLstmBaseline;
    } else {
      throw std::invalid_argument("config: unknown topology '" + *v + "'");
    }
  }
  if (auto v = kv.get("feature_bins")) c.feature_bins = ParseCount("feature_bins", *v);
  if (auto v = kv.get("stem_channels")) c.stem_channels = ParseCount("stem_channels", *v);
  if (auto v = kv.get("block_channels")) {
    c.block_channels.clear();
    std::istringstream in(*v);
    std::string item;
    while (std::getline(in, item, ',')) c.block_channels.push_back(ParseCount("block_channels", Trim(item)));
  }
  if (auto v = kv.get("freq_stride")) c.freq_stride = ParseCount("freq_stride", *v);
  if (auto v = kv.get("pool_then_flatten")) c.pool_then_flatten = ParseBool("pool_then_flatten", *v);
  if (auto v = kv.get("lstm_layers")) c.lstm_layers = ParseCount("lstm_layers", *v);
  if (auto v = kv.get("lstm_units")) c.lstm_units = ParseCount("lstm_units", *v);
  if (auto v = kv.get("dense_layers")) {
    // Zero hidden layers is allowed: the output layer then reads h_t directly.
    c.dense_layers = *v == "0" ? 0 : ParseCount("dense_layers", *v);
  }
  if (auto v = kv.get("dense_units")) c.dense_units = ParseCount("dense_units", *v);
  if (auto v = kv.get("aggregation")) c.aggregation = AggregatorKind::Parse(*v);
  if (auto v = kv.get("truncation_frames")) c.truncation_frames = ParseCount("truncation_frames", *v);
  c.Validate();
  return c;
}

void ModelConfig::Validate() const {
  if (feature_bins == 0 || lstm_layers == 0 || lstm_units == 0 || truncation_frames == 0) {
    throw std::invalid_argument("config: counts must be positive");
  }
  if (topology == Topology::kResLstm) {
    if (stem_channels == 0 || freq_stride == 0) throw std::invalid_argument("config: bad conv stem");
    for (auto ch : block_channels) {
      if (ch == 0) throw std::invalid_argument("config: block channels must be positive");
    }
  }
}

std::string ModelConfig::ToText() const {
  std::ostringstream os;
  os << "topology = " << ToString(topology) << '\n';
  os << "feature_bins = " << feature_bins << '\n';
  os << "stem_channels = " << stem_channels << '\n';
  os << "block_channels = ";
  for (std::size_t i = 0; i < block_channels.size(); ++i) os << (i ? "," : "") << block_channels[i];
  os << '\n';
  os << "freq_stride = " << freq_stride << '\n';
  os << "pool_then_flatten = " << (pool_then_flatten ? "true" : "false") << '\n';
  os << "lstm_layers = " << lstm_layers << '\n';
  os << "lstm_units = " << lstm_units << '\n';
  os << "dense_layers = " << dense_layers << '\n';
  os << "dense_units = " << dense_units << '\n';
  os << "aggregation = " << aggregation.name() << '\n';
  os << "truncation_frames = " << truncation_frames << '\n';
  return os.str();
}

std::size_t ModelConfig::conv_output_bins() const {
  if (topology != Topology::kResLstm) return feature_bins;
  auto reduce = [&](std::size_t f) { return (f + freq_stride - 1) / freq_stride; };
  std::size_t f = reduce(feature_bins);
  for (std::size_t i = 0; i < block_channels.size(); ++i) f = reduce(f);
  return f;
}

std::size_t ModelConfig::lstm_input_size() const {
  if (topology != Topology::kResLstm) return feature_bins;
  const std::size_t channels = block_channels.empty() ? stem_channels : block_channels.back();
  return pool_then_flatten ? channels : channels * conv_output_bins();
}

namespace {

template <typename T>
class Initializer {
 public:
  explicit Initializer(std::uint64_t seed) : rng_(seed) {}

  Tensor<T> Uniform(Shape shape, double bound) {
    Tensor<T> t(std::move(shape));
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (auto& v : t.data()) v = static_cast<T>(dist(rng_));
    return t;
  }

  Conv2dLayer<T> Conv(std::size_t in, std::size_t out, std::size_t k, std::size_t stride) {
    auto c = Conv2dLayer<T>::Zeros(in, out, k, k, stride);
    const double bound = 1.0 / std::sqrt(static_cast<double>(in * k * k));
    c.weight = Uniform(c.weight.shape(), bound);
    c.bias = Uniform(c.bias.shape(), bound);
    return c;
  }

  LstmLayer<T> Lstm(std::size_t in, std::size_t hidden) {
    auto l = LstmLayer<T>::Zeros(in, hidden);
    const double bound = 1.0 / std::sqrt(static_cast<double>(hidden));
    l.W = Uniform(l.W.shape(), bound);
    l.U = Uniform(l.U.shape(), bound);
    l.b = Uniform(l.b.shape(), bound);
    for (std::size_t j = 0; j < hidden; ++j) l.b[l.col(LstmLayer<T>::kForget, j)] = T{1};
    return l;
  }

  DenseLayer<T> Dense(std::size_t in, std::size_t out, Activation act) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    return {Uniform({in, out}, bound), Uniform({out}, bound), act};
  }

 private:
  std::mt19937_64 rng_;
};

}  // namespace

template <typename T>
ModelGraph<T> BuildModel(const ModelConfig& config, std::uint64_t seed) {
  config.Validate();
  ModelGraph<T> m;
  m.config = config;
  Initializer<T> init(seed);
  constexpr std::size_t kKernel = 3;
  if (config.topology == Topology::kResLstm) {
    m.stem_conv = init.Conv(1, config.stem_channels, kKernel, config.freq_stride);
    m.stem_bn = BatchNormLayer<T>::Identity(config.stem_channels);
    std::size_t in = config.stem_channels;
    for (std::size_t out : config.block_channels) {
      ResidualBlock<T> blk;
      blk.conv1 = init.Conv(in, out, kKernel, config.freq_stride);
      blk.bn1 = BatchNormLayer<T>::Identity(out);
      blk.conv2 = init.Conv(out, out, kKernel, 1);
      blk.bn2 = BatchNormLayer<T>::Identity(out);
      if (in != out || config.freq_stride != 1) blk.projection = init.Conv(in, out, 1, config.freq_stride);
      m.blocks.push_back(std::move(blk));
      in = out;
    }
  }
  std::size_t in = config.lstm_input_size();
  for (std::size_t i = 0; i < config.lstm_layers; ++i) {
    m.lstms.push_back(init.Lstm(in, config.lstm_units));
    in = config.lstm_units;
  }
  const std::size_t d = config.lstm_units;
  m.aggregator.kind = config.aggregation;
  const double agg_bound = 1.0 / std::sqrt(static_cast<double>(d));
  if (config.aggregation.variant == AggregationVariant::kAttention) {
    m.aggregator.attention = AttentionParams<T>{init.Uniform({d, d}, agg_bound), Tensor<T>({d}),
                                                init.Uniform({d}, agg_bound)};
  } else if (config.aggregation.variant == AggregationVariant::kRnnAgg) {
    m.aggregator.rnn = RnnAggParams<T>{init.Uniform({d, d}, agg_bound),
                                       init.Uniform({d, d}, agg_bound),
                                       config.aggregation.rnn_activation};
  }
  in = d;
  for (std::size_t i = 0; i < config.dense_layers; ++i) {
    m.classifier.push_back(init.Dense(in, config.dense_units, Activation::kRelu));
    in = config.dense_units;
  }
  m.classifier.push_back(init.Dense(in, 2, Activation::kIdentity));
  return m;
}

template <typename T>
std::size_t ParameterCount(const ModelGraph<T>& model) {
  std::size_t n = 0;
  VisitTensors(model, [&](const std::string&, const Tensor<T>& t, bool trainable) {
    if (trainable) n += t.size();
  });
  return n;
}

namespace {

template <typename T>
void CheckFeatures(const ModelGraph<T>& model, const Tensor<T>& features) {
  if (features.empty()) throw StateError("forward: empty utterance");
  if (features.rank() != 2 || features.dim(1) != model.config.feature_bins) {
    throw DimensionError("forward: expected [T x " + std::to_string(model.config.feature_bins) +
                         "] features, got " + ShapeString(features.shape()));
  }
  if (features.dim(0) > model.config.truncation_frames) {
    throw StateError("forward: " + std::to_string(features.dim(0)) + " frames exceeds limit " +
                     std::to_string(model.config.truncation_frames));
  }
}

}  // namespace

template <typename T>
Tensor<T> EmbedFrames(const ModelGraph<T>& model, const Tensor<T>& features) {
  CheckFeatures(model, features);
  if (model.mode != Mode::kInfer) throw StateError("forward: model is in training mode");
  const std::size_t frames = features.dim(0);
  Tensor<T> x;
  if (model.config.topology == Topology::kResLstm) {
    x = features.reshape({1, frames, features.dim(1)});
    x = Relu(BatchNormInfer(*model.stem_bn, Conv2dForward(*model.stem_conv, x)));
    for (const auto& blk : model.blocks) x = ResidualBlockForward(blk, x);
    if (model.config.pool_then_flatten) x = AvgPoolFreq(x);
    x = FlattenFrames(x);
  } else {
    x = features;
  }
  for (const auto& lstm : model.lstms) x = LstmForward(lstm, x, LstmState<T>::Zeros(lstm.hidden_size)).output;
  return x;
}

template <typename T>
Tensor<T> ClassifierLogits(const ModelGraph<T>& model, const Tensor<T>& E) {
  Tensor<T> y = E;
  for (const auto& layer : model.classifier) y = DenseForward(layer, y);
  return y;
}

template <typename T>
OfflineScores<T> ForwardOffline(const ModelGraph<T>& model, const Tensor<T>& features) {
  const Tensor<T> H = EmbedFrames(model, features);
  const std::size_t n = H.dim(0);
  OfflineScores<T> out;
  if (model.config.aggregation.on_y()) {
    const Tensor<T> traj = CausalMeanTrajectory(ClassifierLogits(model, H));
    out.per_frame = Softmax(traj);
  } else {
    auto agg = AggregateSequence(model.aggregator, H);
    if (agg.per_frame) {
      out.per_frame = Softmax(ClassifierLogits(model, *agg.per_frame));
    } else {
      out.utterance = Softmax(ClassifierLogits(model, agg.utterance.reshape({1, H.dim(1)}))).reshape({2});
      return out;
    }
  }
  out.utterance = out.per_frame->rows(n - 1, n).reshape({2});
  return out;
}

namespace {

static_assert(std::endian::native == std::endian::little, "weights I/O assumes a little-endian host");

constexpr char kWeightsMagic[4] = {'R', 'L', 'S', 'W'};
constexpr std::uint32_t kWeightsVersion = 1;

template <typename V>
void Put(std::string& buf, V v) {
  char bytes[sizeof(V)];
  std::memcpy(bytes, &v, sizeof(V));
  buf.append(bytes, sizeof(V));
}

class Reader {
 public:
  explicit Reader(std::string data) : data_(std::move(data)) {}

  template <typename V>
  V Get(const char* what) {
    V v;
    Need(sizeof(V), what);
    std::memcpy(&v, data_.data() + pos_, sizeof(V));
    pos_ += sizeof(V);
    return v;
  }
  std::string Bytes(std::size_t n, const char* what) {
    Need(n, what);
    std::string s = data_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  const char* Raw(std::size_t n, const char* what) {
    Need(n, what);
    const char* p = data_.data() + pos_;
    pos_ += n;
    return p;
  }
  bool done() const { return pos_ == data_.size(); }

 private:
  void Need(std::size_t n, const char* what) {
    if (data_.size() - pos_ < n) {
      throw FormatError(FormatErrorKind::kTruncated, std::string("weights file truncated reading ") + what);
    }
  }
  std::string data_;
  std::size_t pos_ = 0;
};

std::string ReadAll(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError(FormatErrorKind::kIo, "cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

struct RawTensor {
  Shape shape;
  std::uint8_t dtype;
  const char* data;
};

}  // namespace

template <typename T>
void SaveWeights(const ModelGraph<T>& model, const std::filesystem::path& path) {
  std::string buf(kWeightsMagic, 4);
  Put<std::uint32_t>(buf, kWeightsVersion);
  std::uint32_t count = 0;
  VisitTensors(model, [&](const std::string&, const Tensor<T>&, bool) { ++count; });
  Put<std::uint32_t>(buf, count);
  VisitTensors(model, [&](const std::string& name, const Tensor<T>& t, bool) {
    Put<std::uint16_t>(buf, static_cast<std::uint16_t>(name.size()));
    buf += name;
    Put<std::uint8_t>(buf, sizeof(T) == 4 ? 0 : 1);
    Put<std::uint8_t>(buf, static_cast<std::uint8_t>(t.rank()));
    for (auto d : t.shape()) Put<std::uint32_t>(buf, static_cast<std::uint32_t>(d));
    buf.append(reinterpret_cast<const char*>(t.data().data()), t.size() * sizeof(T));
  });
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError(FormatErrorKind::kIo, "cannot write " + path.string());
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!out) throw FormatError(FormatErrorKind::kIo, "write failed for " + path.string());
}

template <typename T>
ModelGraph<T> LoadWeights(const std::filesystem::path& path, const ModelConfig& config) {
  Reader r(ReadAll(path));
  if (r.Bytes(4, "magic") != std::string(kWeightsMagic, 4)) {
    throw FormatError(FormatErrorKind::kBadMagic, path.string() + ": not a weights file (bad magic)");
  }
  if (const auto v = r.Get<std::uint32_t>("version"); v != kWeightsVersion) {
    throw FormatError(FormatErrorKind::kBadVersion, path.string() + ": unsupported version " + std::to_string(v));
  }
  const auto count = r.Get<std::uint32_t>("tensor count");
  std::map<std::string, RawTensor> raw;
  for (std::uint32_t k = 0; k < count; ++k) {
    const auto len = r.Get<std::uint16_t>("name length");
    std::string name = r.Bytes(len, "name");
    RawTensor t;
    t.dtype = r.Get<std::uint8_t>("dtype");
    if (t.dtype > 1) throw FormatError(FormatErrorKind::kBadValue, "tensor '" + name + "': unknown dtype");
    const auto ndim = r.Get<std::uint8_t>("ndim");
    std::size_t n = 1;
    for (std::uint8_t i = 0; i < ndim; ++i) {
      const auto dim = r.Get<std::uint32_t>("dims");
      if (dim == 0) throw FormatError(FormatErrorKind::kBadValue, "tensor '" + name + "': zero dimension");
      n *= dim;
      if (n > (std::size_t{1} << 32)) {
        throw FormatError(FormatErrorKind::kDimensionOverflow, "tensor '" + name + "': too many elements");
      }
      t.shape.push_back(dim);
    }
    t.data = r.Raw(n * (t.dtype == 0 ? 4 : 8), "tensor data");
    raw[name] = t;
  }
  if (!r.done()) throw FormatError(FormatErrorKind::kBadValue, path.string() + ": trailing bytes");

  ModelGraph<T> model = BuildModel<T>(config, 0);
  std::set<std::string> used;
  VisitTensors(model, [&](const std::string& name, Tensor<T>& t, bool) {
    auto it = raw.find(name);
    if (it == raw.end()) {
      throw FormatError(FormatErrorKind::kMissingParameter, "missing parameter '" + name + "'");
    }
    const RawTensor& src = it->second;
    if (src.shape != t.shape()) {
      throw FormatError(FormatErrorKind::kShapeMismatch, "parameter '" + name + "' has shape " +
                                                             ShapeString(src.shape) + ", config expects " +
                                                             ShapeString(t.shape()));
    }
    for (std::size_t i = 0; i < t.size(); ++i) {
      if (src.dtype == 0) {
        float v;
        std::memcpy(&v, src.data + i * 4, 4);
        t[i] = static_cast<T>(v);
      } else {
        double v;
        std::memcpy(&v, src.data + i * 8, 8);
        t[i] = static_cast<T>(v);
      }
    }
    used.insert(name);
  });
  for (const auto& [name, _] : raw) {
    if (!used.count(name)) {
      throw FormatError(FormatErrorKind::kShapeMismatch, "unexpected tensor '" + name + "' for this config");
    }
  }
  model.mode = Mode::kInfer;
  return model;
}

std::filesystem::path ConfigSidecar(const std::filesystem::path& weights) {
  return std::filesystem::path(weights.string() + ".cfg");
}

template <typename T>
void SaveModel(const ModelGraph<T>& model, const std::filesystem::path& path) {
  SaveWeights(model, path);
  std::ofstream out(ConfigSidecar(path));
  if (!out) throw FormatError(FormatErrorKind::kIo, "cannot write " + ConfigSidecar(path).string());
  out << model.config.ToText();
}

template <typename T>
ModelGraph<T> LoadModel(const std::filesystem::path& path) {
  ModelConfig config;
  if (std::filesystem::exists(ConfigSidecar(path))) {
    config = ModelConfig::FromKeyValues(KeyValueFile::Load(ConfigSidecar(path)));
  }
  return LoadWeights<T>(path, config);
}

#define DDSTREAM_INSTANTIATE_MODEL(T)                                                     \
  template ModelGraph<T> BuildModel<T>(const ModelConfig&, std::uint64_t);                \
  template std::size_t ParameterCount(const ModelGraph<T>&);                              \
  template Tensor<T> EmbedFrames(const ModelGraph<T>&, const Tensor<T>&);                 \
  template Tensor<T> ClassifierLogits(const ModelGraph<T>&, const Tensor<T>&);            \
  template OfflineScores<T> ForwardOffline(const ModelGraph<T>&, const Tensor<T>&);       \
  template void SaveWeights(const ModelGraph<T>&, const std::filesystem::path&);          \
  template ModelGraph<T> LoadWeights<T>(const std::filesystem::path&, const ModelConfig&); \
  template void SaveModel(const ModelGraph<T>&, const std::filesystem::path&);            \
  template ModelGraph<T> LoadModel<T>(const std::filesystem::path&);

DDSTREAM_INSTANTIATE_MODEL(float)
DDSTREAM_INSTANTIATE_MODEL(double)

}  // namespace ddstream
