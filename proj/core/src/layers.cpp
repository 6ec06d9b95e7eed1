#include "ddstream/layers.hpp"

#include <cmath>
#include <numeric>

namespace ddstream {

std::size_t SegmentsTotal(const Segments& segments) {
  return std::accumulate(segments.begin(), segments.end(), std::size_t{0});
}

namespace {

void CheckSegments(const Segments& segments, std::size_t frames, const char* op) {
  if (SegmentsTotal(segments) != frames) {
    throw DimensionError(std::string(op) + ": segments cover " +
                         std::to_string(SegmentsTotal(segments)) + " frames, input has " +
                         std::to_string(frames));
  }
}

}  // namespace

template <typename T>
Conv2dLayer<T> Conv2dLayer<T>::Zeros(std::size_t in, std::size_t out, std::size_t k_time,
                                     std::size_t k_freq, std::size_t s_freq) {
  Conv2dLayer layer;
  layer.in_channels = in;
  layer.out_channels = out;
  layer.k_time = k_time;
  layer.k_freq = k_freq;
  layer.s_freq = s_freq;
  layer.weight = Tensor<T>({out, in, k_time, k_freq});
  layer.bias = Tensor<T>({out});
  return layer;
}

template <typename T>
std::size_t Conv2dLayer<T>::out_freq(std::size_t in_freq) const {
  const std::size_t padded = in_freq + 2 * pad_freq();
  if (padded < k_freq) throw DimensionError("conv2d: frequency axis smaller than kernel");
  return (padded - k_freq) / s_freq + 1;
}

template <typename T>
BatchNormLayer<T> BatchNormLayer<T>::Identity(std::size_t channels) {
  BatchNormLayer layer;
  layer.channels = channels;
  layer.gamma = Tensor<T>({channels}, T{1});
  layer.beta = Tensor<T>({channels});
  layer.running_mean = Tensor<T>({channels});
  layer.running_var = Tensor<T>({channels}, T{1});
  return layer;
}

template <typename T>
LstmLayer<T> LstmLayer<T>::Zeros(std::size_t input_size, std::size_t hidden_size) {
  LstmLayer layer;
  layer.input_size = input_size;
  layer.hidden_size = hidden_size;
  layer.W = Tensor<T>({input_size, 4 * hidden_size});
  layer.U = Tensor<T>({hidden_size, 4 * hidden_size});
  layer.b = Tensor<T>({4 * hidden_size});
  return layer;
}

template <typename T>
LstmState<T> LstmState<T>::Zeros(std::size_t hidden) {
  return {Tensor<T>({hidden}), Tensor<T>({hidden})};
}

template <typename T>
Tensor<T> ConvTaps(const Conv2dLayer<T>& layer, const Tensor<T>& input) {
  if (input.rank() != 3 || input.dim(0) != layer.in_channels) {
    throw DimensionError("conv2d: expected [" + std::to_string(layer.in_channels) +
                         " x T x F] input, got " + ShapeString(input.shape()));
  }
  const std::size_t C = input.dim(0), frames = input.dim(1), F = input.dim(2);
  const std::size_t Fo = layer.out_freq(F);
  const std::size_t s = layer.s_freq;
  const std::size_t pad = layer.pad_freq();
  Tensor<T> taps({C, layer.k_freq, frames, Fo});
  T* dst = taps.data().data();
  const T* src = input.data().data();
  for (std::size_t i = 0; i < C; ++i) {
    for (std::size_t kf = 0; kf < layer.k_freq; ++kf) {
      // fi = fo * s + kf - pad must land in [0, F).
      const std::size_t fo_lo = kf >= pad ? 0 : (pad - kf + s - 1) / s;
      std::size_t fo_hi = Fo;
      while (fo_hi > fo_lo && (fo_hi - 1) * s + kf >= F + pad) --fo_hi;
      for (std::size_t t = 0; t < frames; ++t) {
        T* drow = dst + ((i * layer.k_freq + kf) * frames + t) * Fo;
        const T* irow = src + (i * frames + t) * F + (fo_lo * s + kf - pad);
        for (std::size_t fo = fo_lo, k = 0; fo < fo_hi; ++fo, k += s) drow[fo] = irow[k];
      }
    }
  }
  return taps;
}

template <typename T>
Tensor<T> Conv2dForward(const Conv2dLayer<T>& layer, const Tensor<T>& input,
                        const Segments& segments) {
  const Tensor<T> taps = ConvTaps(layer, input);
  const std::size_t frames = input.dim(1);
  CheckSegments(segments, frames, "conv2d");
  const std::size_t Fo = taps.dim(3);
  const std::size_t kt_max = layer.k_time - 1;

  Tensor<T> out({layer.out_channels, frames, Fo});
  T* dst = out.data().data();
  for (std::size_t o = 0; o < layer.out_channels; ++o) {
    T* out_o = dst + o * frames * Fo;
    std::fill(out_o, out_o + frames * Fo, layer.bias[o]);
    for (std::size_t i = 0; i < layer.in_channels; ++i) {
      for (std::size_t kt = 0; kt < layer.k_time; ++kt) {
        const std::size_t lag = kt_max - kt;
        for (std::size_t kf = 0; kf < layer.k_freq; ++kf) {
          const T w = layer.w(o, i, kt, kf);
          const T* tap = taps.data().data() + (i * layer.k_freq + kf) * frames * Fo;
          std::size_t seg_start = 0;
          for (std::size_t len : segments) {
            if (len > lag) Axpy(w, tap + seg_start * Fo, out_o + (seg_start + lag) * Fo, (len - lag) * Fo);
            seg_start += len;
          }
        }
      }
    }
  }
  return out;
}

template <typename T>
Tensor<T> Conv2dForward(const Conv2dLayer<T>& layer, const Tensor<T>& input) {
  if (input.rank() != 3) throw DimensionError("conv2d: expected rank-3 input");
  return Conv2dForward(layer, input, Segments{input.dim(1)});
}

template <typename T>
Tensor<T> Conv2dFrame(const Conv2dLayer<T>& layer, const Tensor<T>& window) {
  if (window.rank() != 3 || window.dim(0) != layer.in_channels || window.dim(1) != layer.k_time) {
    throw DimensionError("conv2d frame: bad window " + ShapeString(window.shape()));
  }
  // Same accumulation order as Conv2dForward; context rows before the
  // segment start are zeros here and skipped there, which adds nothing.
  const Tensor<T> taps = ConvTaps(layer, window);
  const std::size_t Fo = taps.dim(3);
  const std::size_t kt_n = layer.k_time;
  Tensor<T> out({layer.out_channels, Fo});
  for (std::size_t o = 0; o < layer.out_channels; ++o) {
    T* orow = out.data().data() + o * Fo;
    std::fill(orow, orow + Fo, layer.bias[o]);
    for (std::size_t i = 0; i < layer.in_channels; ++i) {
      for (std::size_t kt = 0; kt < kt_n; ++kt) {
        for (std::size_t kf = 0; kf < layer.k_freq; ++kf) {
          const T* tap = taps.data().data() + ((i * layer.k_freq + kf) * kt_n + kt) * Fo;
          Axpy(layer.w(o, i, kt, kf), tap, orow, Fo);
        }
      }
    }
  }
  return out;
}

namespace {

template <typename T>
void CheckBatchNormInput(const BatchNormLayer<T>& layer, const Tensor<T>& input) {
  if (input.rank() < 2 || input.dim(0) != layer.channels) {
    throw DimensionError("batchnorm: expected " + std::to_string(layer.channels) +
                         " channels, got " + ShapeString(input.shape()));
  }
}

template <typename T>
Tensor<T> Normalize(const BatchNormLayer<T>& layer, const Tensor<T>& input,
                    const Tensor<T>& mean, const Tensor<T>& var) {
  Tensor<T> out = input;
  const std::size_t per_channel = input.size() / layer.channels;
  for (std::size_t c = 0; c < layer.channels; ++c) {
    const T inv_std = T{1} / std::sqrt(var[c] + static_cast<T>(layer.epsilon));
    const T g = layer.gamma[c];
    const T b = layer.beta[c];
    const T m = mean[c];
    T* v = out.data().data() + c * per_channel;
    for (std::size_t k = 0; k < per_channel; ++k) v[k] = (v[k] - m) * inv_std * g + b;
  }
  return out;
}

}  // namespace

template <typename T>
Tensor<T> BatchNormInfer(const BatchNormLayer<T>& layer, const Tensor<T>& input) {
  CheckBatchNormInput(layer, input);
  return Normalize(layer, input, layer.running_mean, layer.running_var);
}

template <typename T>
BatchNormTrainResult<T> BatchNormTrain(const BatchNormLayer<T>& layer, const Tensor<T>& input) {
  CheckBatchNormInput(layer, input);
  const std::size_t C = layer.channels;
  const std::size_t n = input.size() / C;
  BatchNormTrainResult<T> r;
  r.batch_mean = Tensor<T>({C});
  r.batch_var = Tensor<T>({C});
  for (std::size_t c = 0; c < C; ++c) {
    const T* v = input.data().data() + c * n;
    double sum = 0;
    for (std::size_t k = 0; k < n; ++k) sum += v[k];
    const double mean = sum / static_cast<double>(n);
    double sq = 0;
    for (std::size_t k = 0; k < n; ++k) {
      const double d = v[k] - mean;
      sq += d * d;
    }
    r.batch_mean[c] = static_cast<T>(mean);
    r.batch_var[c] = static_cast<T>(sq / static_cast<double>(n));
  }
  r.output = Normalize(layer, input, r.batch_mean, r.batch_var);
  r.running_mean = layer.running_mean;
  r.running_var = layer.running_var;
  const T mom = static_cast<T>(layer.momentum);
  const T unbias = n > 1 ? static_cast<T>(n) / static_cast<T>(n - 1) : T{1};
  for (std::size_t c = 0; c < C; ++c) {
    r.running_mean[c] = (T{1} - mom) * r.running_mean[c] + mom * r.batch_mean[c];
    r.running_var[c] = (T{1} - mom) * r.running_var[c] + mom * r.batch_var[c] * unbias;
  }
  return r;
}

template <typename T>
Tensor<T> BatchNormForward(const BatchNormLayer<T>& layer, const Tensor<T>& input, Mode mode) {
  return mode == Mode::kInfer ? BatchNormInfer(layer, input) : BatchNormTrain(layer, input).output;
}

template <typename T>
Tensor<T> ResidualBlockForward(const ResidualBlock<T>& block, const Tensor<T>& input,
                               const Segments& segments) {
  Tensor<T> main = Relu(BatchNormInfer(block.bn1, Conv2dForward(block.conv1, input, segments)));
  main = BatchNormInfer(block.bn2, Conv2dForward(block.conv2, main, segments));
  const Tensor<T> skip =
      block.projection ? Conv2dForward(*block.projection, input, segments) : input;
  return Relu(Add(main, skip));
}

template <typename T>
Tensor<T> ResidualBlockForward(const ResidualBlock<T>& block, const Tensor<T>& input) {
  if (input.rank() != 3) throw DimensionError("residual block: expected rank-3 input");
  return ResidualBlockForward(block, input, Segments{input.dim(1)});
}

namespace {

// Row-vector product acc += x·M, M is [len(x) x n]; each acc[j]
// accumulates over x left to right.
template <typename T>
void AccumulateRowTimes(std::span<const T> x, const Tensor<T>& M, T* acc) {
  const std::size_t n = M.dim(1);
  const T* m = M.data().data();
  for (std::size_t k = 0; k < x.size(); ++k) {
    const T xv = x[k];
    const T* mrow = m + k * n;
    for (std::size_t j = 0; j < n; ++j) acc[j] += xv * mrow[j];
  }
}

// Shared cell update given the input projection zx = x·W.
template <typename T>
LstmState<T> LstmCell(const LstmLayer<T>& layer, const T* zx, const LstmState<T>& state) {
  const std::size_t H = layer.hidden_size;
  std::vector<T> zu(4 * H, T{0});
  AccumulateRowTimes<T>(state.h.data(), layer.U, zu.data());
  LstmState<T> next{Tensor<T>({H}), Tensor<T>({H})};
  using L = LstmLayer<T>;
  for (std::size_t j = 0; j < H; ++j) {
    auto z = [&](typename L::Gate g) {
      const std::size_t k = layer.col(g, j);
      return zx[k] + zu[k] + layer.b[k];
    };
    const T f = layer.gate_act.apply(z(L::kForget));
    const T i = layer.gate_act.apply(z(L::kInput));
    const T o = layer.gate_act.apply(z(L::kOutput));
    const T g = layer.cell_act.apply(z(L::kCell));
    const T c = f * state.c[j] + i * g;
    next.c[j] = c;
    next.h[j] = o * layer.cell_act.apply(c);
  }
  return next;
}

template <typename T>
void CheckLstmInput(const LstmLayer<T>& layer, const Tensor<T>& input) {
  if (input.rank() != 2 || input.dim(1) != layer.input_size) {
    throw DimensionError("lstm: expected [T x " + std::to_string(layer.input_size) +
                         "] input, got " + ShapeString(input.shape()));
  }
}

}  // namespace

template <typename T>
LstmState<T> LstmStep(const LstmLayer<T>& layer, std::span<const T> x, const LstmState<T>& state) {
  if (x.size() != layer.input_size) {
    throw DimensionError("lstm step: input size " + std::to_string(x.size()) + " != " +
                         std::to_string(layer.input_size));
  }
  if (state.h.size() != layer.hidden_size || state.c.size() != layer.hidden_size) {
    throw DimensionError("lstm step: state size mismatch");
  }
  std::vector<T> zx(4 * layer.hidden_size, T{0});
  AccumulateRowTimes<T>(x, layer.W, zx.data());
  return LstmCell(layer, zx.data(), state);
}

template <typename T>
LstmResult<T> LstmForward(const LstmLayer<T>& layer, const Tensor<T>& input,
                          const LstmState<T>& state0) {
  CheckLstmInput(layer, input);
  if (state0.h.size() != layer.hidden_size || state0.c.size() != layer.hidden_size) {
    throw DimensionError("lstm: initial state size mismatch");
  }
  const std::size_t steps = input.dim(0);
  const Tensor<T> zx = Matmul(input, layer.W);
  LstmResult<T> r{Tensor<T>({steps, layer.hidden_size}), state0};
  for (std::size_t t = 0; t < steps; ++t) {
    r.state = LstmCell(layer, zx.data().data() + t * 4 * layer.hidden_size, r.state);
    std::copy(r.state.h.data().begin(), r.state.h.data().end(), r.output.row(t).begin());
  }
  return r;
}

template <typename T>
Tensor<T> LstmForward(const LstmLayer<T>& layer, const Tensor<T>& input, const Segments& segments) {
  CheckLstmInput(layer, input);
  CheckSegments(segments, input.dim(0), "lstm");
  const Tensor<T> zx = Matmul(input, layer.W);
  Tensor<T> out({input.dim(0), layer.hidden_size});
  std::size_t t = 0;
  for (std::size_t len : segments) {
    LstmState<T> state = LstmState<T>::Zeros(layer.hidden_size);
    for (std::size_t k = 0; k < len; ++k, ++t) {
      state = LstmCell(layer, zx.data().data() + t * 4 * layer.hidden_size, state);
      std::copy(state.h.data().begin(), state.h.data().end(), out.row(t).begin());
    }
  }
  return out;
}

template <typename T>
Tensor<T> DenseForward(const DenseLayer<T>& layer, const Tensor<T>& input) {
  if (input.rank() != 2 || input.dim(1) != layer.in_features()) {
    throw DimensionError("dense: expected [N x " + std::to_string(layer.in_features()) +
                         "] input, got " + ShapeString(input.shape()));
  }
  Tensor<T> y = Matmul(input, layer.weight);
  const std::size_t n = layer.out_features();
  const ActivationFn act{layer.activation};
  for (std::size_t r = 0; r < y.dim(0); ++r) {
    T* row = y.data().data() + r * n;
    for (std::size_t j = 0; j < n; ++j) row[j] = act.apply(row[j] + layer.bias[j]);
  }
  return y;
}

template <typename T>
Tensor<T> AvgPoolFreq(const Tensor<T>& input) {
  if (input.rank() != 3) throw DimensionError("avgpool: expected rank-3 input");
  const std::size_t C = input.dim(0), frames = input.dim(1), F = input.dim(2);
  Tensor<T> out({C, frames, 1});
  for (std::size_t r = 0; r < C * frames; ++r) {
    const T* v = input.data().data() + r * F;
    T sum{0};
    for (std::size_t f = 0; f < F; ++f) sum += v[f];
    out[r] = sum / static_cast<T>(F);
  }
  return out;
}

template <typename T>
Tensor<T> FlattenFrames(const Tensor<T>& input) {
  if (input.rank() != 3) throw DimensionError("flatten: expected rank-3 input");
  const std::size_t C = input.dim(0), frames = input.dim(1), F = input.dim(2);
  Tensor<T> out({frames, C * F});
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t t = 0; t < frames; ++t)
      for (std::size_t f = 0; f < F; ++f) out.at(t, c * F + f) = input.at(c, t, f);
  return out;
}

#define DDSTREAM_INSTANTIATE_LAYERS(T)                                                        \
  template struct Conv2dLayer<T>;                                                             \
  template struct BatchNormLayer<T>;                                                          \
  template struct LstmLayer<T>;                                                               \
  template struct LstmState<T>;                                                               \
  template Tensor<T> Conv2dForward(const Conv2dLayer<T>&, const Tensor<T>&, const Segments&); \
  template Tensor<T> Conv2dForward(const Conv2dLayer<T>&, const Tensor<T>&);                  \
  template Tensor<T> Conv2dFrame(const Conv2dLayer<T>&, const Tensor<T>&);                    \
  template Tensor<T> ConvTaps(const Conv2dLayer<T>&, const Tensor<T>&);                       \
  template Tensor<T> BatchNormInfer(const BatchNormLayer<T>&, const Tensor<T>&);              \
  template BatchNormTrainResult<T> BatchNormTrain(const BatchNormLayer<T>&, const Tensor<T>&); \
  template Tensor<T> BatchNormForward(const BatchNormLayer<T>&, const Tensor<T>&, Mode);      \
  template Tensor<T> ResidualBlockForward(const ResidualBlock<T>&, const Tensor<T>&,          \
                                          const Segments&);                                   \
  template Tensor<T> ResidualBlockForward(const ResidualBlock<T>&, const Tensor<T>&);         \
  template LstmState<T> LstmStep(const LstmLayer<T>&, std::span<const T>, const LstmState<T>&); \
  template LstmResult<T> LstmForward(const LstmLayer<T>&, const Tensor<T>&,                   \
                                     const LstmState<T>&);                                    \
  template Tensor<T> LstmForward(const LstmLayer<T>&, const Tensor<T>&, const Segments&);     \
  template Tensor<T> DenseForward(const DenseLayer<T>&, const Tensor<T>&);                    \
  template Tensor<T> AvgPoolFreq(const Tensor<T>&);                                           \
  template Tensor<T> FlattenFrames(const Tensor<T>&);

DDSTREAM_INSTANTIATE_LAYERS(float)
DDSTREAM_INSTANTIATE_LAYERS(double)

}  // namespace ddstream
