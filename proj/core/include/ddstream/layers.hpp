#pragma once

#include <cstddef>
#include <optional>
#include <vector>

#include "ddstream/tensor.hpp"

namespace ddstream {

// Lengths of utterances packed back to back along the time axis. Causal
// padding and recurrent state restart at every segment boundary.
using Segments = std::vector<std::size_t>;

enum class Mode { kTrain, kInfer };

std::size_t SegmentsTotal(const Segments& segments);

// 2-D convolution over (time, freq) with causal time padding.
//
// Time stride is always 1 and the time axis is padded with k_time - 1 zero
// frames on the left only, so output frame t sees input frames <= t. The
// frequency axis uses symmetric padding of (k_freq - 1) / 2, which gives
// ceil(F / s_freq) output bins for odd kernels.
template <typename T>
struct Conv2dLayer {
  std::size_t in_channels = 1;
  std::size_t out_channels = 1;
  std::size_t k_time = 3;
  std::size_t k_freq = 3;
  std::size_t s_freq = 1;
  Tensor<T> weight;  // [out x in x k_time x k_freq]
  Tensor<T> bias;    // [out]

  static Conv2dLayer Zeros(std::size_t in, std::size_t out, std::size_t k_time,
                           std::size_t k_freq, std::size_t s_freq);

  std::size_t pad_freq() const { return (k_freq - 1) / 2; }
  std::size_t out_freq(std::size_t in_freq) const;
  T w(std::size_t o, std::size_t i, std::size_t kt, std::size_t kf) const {
    return weight[((o * in_channels + i) * k_time + kt) * k_freq + kf];
  }
};

template <typename T>
struct BatchNormLayer {
  std::size_t channels = 1;
  Tensor<T> gamma;         // [C]
  Tensor<T> beta;          // [C]
  Tensor<T> running_mean;  // [C]
  Tensor<T> running_var;   // [C], >= 0
  double momentum = 0.1;
  double epsilon = 1e-5;

  static BatchNormLayer Identity(std::size_t channels);
};

template <typename T>
struct BatchNormTrainResult {
  Tensor<T> output;
  Tensor<T> batch_mean;    // [C]
  Tensor<T> batch_var;     // [C], biased
  Tensor<T> running_mean;  // updated copy
  Tensor<T> running_var;   // updated copy
};

// conv1 -> bn1 -> relu -> conv2 -> bn2, plus skip, then relu.
// conv1 carries the frequency stride; the skip path is a 1x1 projection
// with the same stride whenever the main path changes the shape.
template <typename T>
struct ResidualBlock {
  Conv2dLayer<T> conv1;
  BatchNormLayer<T> bn1;
  Conv2dLayer<T> conv2;
  BatchNormLayer<T> bn2;
  std::optional<Conv2dLayer<T>> projection;
};

// Unidirectional LSTM. Weights are stored input-major so a frame is a row
// vector: z = x·W + h·U + b, with the 4H gate columns laid out in blocks
// [forget | input | output | cell].
template <typename T>
struct LstmLayer {
  enum Gate : std::size_t { kForget = 0, kInput = 1, kOutput = 2, kCell = 3 };

  std::size_t input_size = 1;
  std::size_t hidden_size = 1;
  Tensor<T> W;  // [input x 4H]
  Tensor<T> U;  // [H x 4H]
  Tensor<T> b;  // [4H]
  ActivationFn gate_act{Activation::kSigmoid};
  ActivationFn cell_act{Activation::kTanh};

  static LstmLayer Zeros(std::size_t input_size, std::size_t hidden_size);

  // Column index of unit `j` of gate `g`.
  std::size_t col(Gate g, std::size_t j) const { return g * hidden_size + j; }
};

template <typename T>
struct LstmState {
  Tensor<T> h;  // [H]
  Tensor<T> c;  // [H]

  static LstmState Zeros(std::size_t hidden);
};

template <typename T>
struct LstmResult {
  Tensor<T> output;  // [T x H]
  LstmState<T> state;
};

// y = act(x·W + b), W is [in x out].
template <typename T>
struct DenseLayer {
  Tensor<T> weight;  // [in x out]
  Tensor<T> bias;    // [out]
  Activation activation = Activation::kIdentity;

  std::size_t in_features() const { return weight.dim(0); }
  std::size_t out_features() const { return weight.dim(1); }
};

template <typename T>
Tensor<T> Conv2dForward(const Conv2dLayer<T>& layer, const Tensor<T>& input,
                        const Segments& segments);
template <typename T>
Tensor<T> Conv2dForward(const Conv2dLayer<T>& layer, const Tensor<T>& input);

// Zero-padded, decimated input per frequency tap: [C x k_freq x T x F'] with
// entry (i, kf, t, fo) = x(i, t, fo * s + kf - pad).
template <typename T>
Tensor<T> ConvTaps(const Conv2dLayer<T>& layer, const Tensor<T>& input);

// y[k] += a * x[k]
template <typename T>
inline void Axpy(T a, const T* x, T* y, std::size_t n) {
  for (std::size_t k = 0; k < n; ++k) y[k] += a * x[k];
}

// Output frame for the newest frame of `window` ([C x k_time x F], oldest
// first) as [out x F']. Accumulates in the same order as Conv2dForward.
template <typename T>
Tensor<T> Conv2dFrame(const Conv2dLayer<T>& layer, const Tensor<T>& window);

template <typename T>
Tensor<T> BatchNormInfer(const BatchNormLayer<T>& layer, const Tensor<T>& input);
// Normalizes per channel over all (time, freq) positions of every packed
// utterance and returns the updated running statistics.
template <typename T>
BatchNormTrainResult<T> BatchNormTrain(const BatchNormLayer<T>& layer, const Tensor<T>& input);
template <typename T>
Tensor<T> BatchNormForward(const BatchNormLayer<T>& layer, const Tensor<T>& input, Mode mode);

// Inference-mode forward.
template <typename T>
Tensor<T> ResidualBlockForward(const ResidualBlock<T>& block, const Tensor<T>& input,
                               const Segments& segments);
template <typename T>
Tensor<T> ResidualBlockForward(const ResidualBlock<T>& block, const Tensor<T>& input);

template <typename T>
LstmState<T> LstmStep(const LstmLayer<T>& layer, std::span<const T> x, const LstmState<T>& state);
template <typename T>
LstmResult<T> LstmForward(const LstmLayer<T>& layer, const Tensor<T>& input,
                          const LstmState<T>& state0);
// Every segment starts from a zero state.
template <typename T>
Tensor<T> LstmForward(const LstmLayer<T>& layer, const Tensor<T>& input, const Segments& segments);

template <typename T>
Tensor<T> DenseForward(const DenseLayer<T>& layer, const Tensor<T>& input);

// [C x T x F] -> [C x T x 1], mean over frequency.
template <typename T>
Tensor<T> AvgPoolFreq(const Tensor<T>& input);

// [C x T x F] -> [T x C*F], feature index c * F + f.
template <typename T>
Tensor<T> FlattenFrames(const Tensor<T>& input);

}  // namespace ddstream
