#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "ddstream/aggregation.hpp"
#include "ddstream/layers.hpp"

namespace ddstream {

// `key = value` lines; `#` starts a comment. Keys are unique.
class KeyValueFile {
 public:
  static KeyValueFile Parse(const std::string& text);
  static KeyValueFile Load(const std::filesystem::path& path);

  bool has(const std::string& key) const { return values_.count(key) != 0; }
  std::optional<std::string> get(const std::string& key) const;
  void set(const std::string& key, const std::string& value) { values_[key] = value; }
  const std::map<std::string, std::string>& values() const { return values_; }

 private:
  std::map<std::string, std::string> values_;
};

enum class Topology { kResLstm, kLstmBaseline };

struct ModelConfig {
  Topology topology = Topology::kResLstm;
  std::size_t feature_bins = 256;
  std::size_t stem_channels = 8;
  std::vector<std::size_t> block_channels = {8, 8, 16, 16, 32, 32};
  std::size_t freq_stride = 2;
  bool pool_then_flatten = true;
  std::size_t lstm_layers = 3;
  std::size_t lstm_units = 64;
  std::size_t dense_layers = 2;
  std::size_t dense_units = 64;
  AggregatorKind aggregation;
  std::size_t truncation_frames = 300;

  // Reads the model keys from `kv`; keys it does not know are left for
  // other consumers. Throws std::invalid_argument on bad values.
  static ModelConfig FromKeyValues(const KeyValueFile& kv);
  static const std::vector<std::string>& Keys();
  void Validate() const;
  // Round-trips through FromKeyValues.
  std::string ToText() const;

  // Frequency bins after the convolution stack (before pooling).
  std::size_t conv_output_bins() const;
  // Per-frame feature size entering the first LSTM.
  std::size_t lstm_input_size() const;
};

const char* ToString(Topology t);

template <typename T>
struct ModelGraph {
  ModelConfig config;
  Mode mode = Mode::kInfer;

  std::optional<Conv2dLayer<T>> stem_conv;
  std::optional<BatchNormLayer<T>> stem_bn;
  std::vector<ResidualBlock<T>> blocks;
  std::vector<LstmLayer<T>> lstms;
  Aggregator<T> aggregator;
  // Hidden dense layers (relu) followed by the 2-way output layer.
  std::vector<DenseLayer<T>> classifier;

  std::size_t embedding_size() const { return lstms.back().hidden_size; }
  bool streamable() const { return config.aggregation.causal(); }
};

// Visits every named tensor in a fixed order. `trainable` is false for the
// batch-norm running statistics.
template <typename Model, typename F>
void VisitTensors(Model& model, F&& f) {
  auto conv = [&](const std::string& p, auto& c) {
    f(p + ".weight", c.weight, true);
    f(p + ".bias", c.bias, true);
  };
  auto bn = [&](const std::string& p, auto& b) {
    f(p + ".gamma", b.gamma, true);
    f(p + ".beta", b.beta, true);
    f(p + ".running_mean", b.running_mean, false);
    f(p + ".running_var", b.running_var, false);
  };
  if (model.stem_conv) conv("stem.conv", *model.stem_conv);
  if (model.stem_bn) bn("stem.bn", *model.stem_bn);
  for (std::size_t i = 0; i < model.blocks.size(); ++i) {
    auto& blk = model.blocks[i];
    const std::string p = "block" + std::to_string(i);
    conv(p + ".conv1", blk.conv1);
    bn(p + ".bn1", blk.bn1);
    conv(p + ".conv2", blk.conv2);
    bn(p + ".bn2", blk.bn2);
    if (blk.projection) conv(p + ".proj", *blk.projection);
  }
  for (std::size_t i = 0; i < model.lstms.size(); ++i) {
    const std::string p = "lstm" + std::to_string(i);
    f(p + ".W", model.lstms[i].W, true);
    f(p + ".U", model.lstms[i].U, true);
    f(p + ".b", model.lstms[i].b, true);
  }
  if (model.aggregator.attention) {
    f(std::string("agg.W_a"), model.aggregator.attention->W_a, true);
    f(std::string("agg.b_a"), model.aggregator.attention->b_a, true);
    f(std::string("agg.v"), model.aggregator.attention->v, true);
  }
  if (model.aggregator.rnn) {
    f(std::string("agg.W"), model.aggregator.rnn->W, true);
    f(std::string("agg.U"), model.aggregator.rnn->U, true);
  }
  for (std::size_t i = 0; i < model.classifier.size(); ++i) {
    const std::string p = "fc" + std::to_string(i);
    f(p + ".weight", model.classifier[i].weight, true);
    f(p + ".bias", model.classifier[i].bias, true);
  }
}

// Deterministic construction from `seed`. Conv and dense weights and
// biases are uniform in +-1/sqrt(fan_in); LSTM and aggregation weights
// uniform in +-1/sqrt(units) with forget-gate bias 1.
template <typename T>
ModelGraph<T> BuildModel(const ModelConfig& config, std::uint64_t seed);

template <typename T>
std::size_t ParameterCount(const ModelGraph<T>& model);

// Frame embeddings h_t [T x d] from the conv stack and LSTMs.
template <typename T>
Tensor<T> EmbedFrames(const ModelGraph<T>& model, const Tensor<T>& features);
// Classifier logits for each row of E [N x d].
template <typename T>
Tensor<T> ClassifierLogits(const ModelGraph<T>& model, const Tensor<T>& E);

template <typename T>
struct OfflineScores {
  std::optional<Tensor<T>> per_frame;  // [T x 2] posteriors, causal heads only
  Tensor<T> utterance;                 // [2]
};

template <typename T>
OfflineScores<T> ForwardOffline(const ModelGraph<T>& model, const Tensor<T>& features);

// Weights file: "RLSW", u32 version 1, u32 count, then per tensor
// u16 name_len, name, u8 dtype (0 f32, 1 f64), u8 ndim, ndim x u32 dims,
// raw little-endian data.
template <typename T>
void SaveWeights(const ModelGraph<T>& model, const std::filesystem::path& path);
template <typename T>
ModelGraph<T> LoadWeights(const std::filesystem::path& path, const ModelConfig& config);

std::filesystem::path ConfigSidecar(const std::filesystem::path& weights);
// Weights plus `<path>.cfg` with the model config.
template <typename T>
void SaveModel(const ModelGraph<T>& model, const std::filesystem::path& path);
// Reads the sidecar config when present, otherwise the default config.
template <typename T>
ModelGraph<T> LoadModel(const std::filesystem::path& path);

}  // namespace ddstream
