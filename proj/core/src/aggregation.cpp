#include "ddstream/aggregation.hpp"

#include <array>
#include <cmath>
#include <random>

namespace ddstream {

AggregatorKind AggregatorKind::Parse(const std::string& name) {
  AggregatorKind k;
  if (name == "last_frame") {
    k.variant = AggregationVariant::kLastFrame;
  } else if (name == "global_mean") {
    k.variant = AggregationVariant::kGlobalMean;
  } else if (name == "attention") {
    k.variant = AggregationVariant::kAttention;
  } else if (name == "causal_mean_h" || name == "causal_mean") {
    k.variant = AggregationVariant::kCausalMeanH;
  } else if (name == "causal_mean_y") {
    k.variant = AggregationVariant::kCausalMeanY;
  } else if (name == "rnn_tanh") {
    k.variant = AggregationVariant::kRnnAgg;
    k.rnn_activation = Activation::kTanh;
  } else if (name == "rnn_relu") {
    k.variant = AggregationVariant::kRnnAgg;
    k.rnn_activation = Activation::kRelu;
  } else {
    throw std::invalid_argument("unknown aggregation '" + name + "'");
  }
  return k;
}

std::string AggregatorKind::name() const {
  switch (variant) {
    case AggregationVariant::kLastFrame: return "last_frame";
    case AggregationVariant::kGlobalMean: return "global_mean";
    case AggregationVariant::kAttention: return "attention";
    case AggregationVariant::kCausalMeanH: return "causal_mean_h";
    case AggregationVariant::kCausalMeanY: return "causal_mean_y";
    case AggregationVariant::kRnnAgg:
      return rnn_activation == Activation::kRelu ? "rnn_relu" : "rnn_tanh";
  }
  return "?";
}

bool AggregatorKind::causal() const {
  return variant != AggregationVariant::kGlobalMean && variant != AggregationVariant::kAttention;
}

template <typename T>
CausalMeanState<T> CausalMeanState<T>::Zero(std::size_t d) {
  return {0, Tensor<T>({d}), Tensor<T>({d})};
}

template <typename T>
CausalMeanState<T> CausalMeanState<T>::FromMean(std::size_t t, Tensor<T> s) {
  CausalMeanState state{t, s, Scale(s, static_cast<T>(t))};
  return state;
}

template <typename T>
CausalMeanState<T> CausalMeanStep(const CausalMeanState<T>& state, std::span<const T> h) {
  if (h.size() != state.s.size()) {
    throw DimensionError("causal mean: frame size " + std::to_string(h.size()) +
                         " != state size " + std::to_string(state.s.size()));
  }
  CausalMeanState<T> next = state;
  next.t = state.t + 1;
  const T denom = static_cast<T>(next.t);
  for (std::size_t j = 0; j < h.size(); ++j) {
    next.sum[j] += h[j];
    next.s[j] = next.sum[j] / denom;
  }
  return next;
}

namespace {

template <typename T>
void RequireSequence(const Tensor<T>& H, const char* op) {
  if (H.empty()) throw StateError(std::string(op) + ": empty sequence");
  if (H.rank() != 2) throw DimensionError(std::string(op) + ": expected [T x d] input");
}

constexpr ActivationFn kIdentityLeaky{Activation::kLeakyRelu, 1.0};

}  // namespace

template <typename T>
Tensor<T> ColumnMean(const Tensor<T>& H) {
  RequireSequence(H, "mean");
  const std::size_t n = H.dim(0), d = H.dim(1);
  Tensor<T> sum({d});
  for (std::size_t t = 0; t < n; ++t)
    for (std::size_t j = 0; j < d; ++j) sum[j] += H.at(t, j);
  const T denom = static_cast<T>(n);
  for (std::size_t j = 0; j < d; ++j) sum[j] = sum[j] / denom;
  return sum;
}

template <typename T>
Tensor<T> CausalMeanTrajectory(const Tensor<T>& H) {
  RequireSequence(H, "causal mean");
  const std::size_t n = H.dim(0), d = H.dim(1);
  Tensor<T> out({n, d});
  auto state = CausalMeanState<T>::Zero(d);
  for (std::size_t t = 0; t < n; ++t) {
    state = CausalMeanStep<T>(state, H.row(t));
    std::copy(state.s.data().begin(), state.s.data().end(), out.row(t).begin());
  }
  return out;
}

template <typename T>
LstmLayer<T> BuildLstmCounter(std::size_t d) {
  if (d == 0) throw DimensionError("lstm counter: d must be >= 1");
  using L = LstmLayer<T>;
  auto layer = L::Zeros(d, 1);
  layer.gate_act = kIdentityLeaky;
  layer.cell_act = kIdentityLeaky;
  for (auto g : {L::kForget, L::kInput, L::kOutput, L::kCell}) layer.b[layer.col(g, 0)] = T{1};
  return layer;
}

template <typename T>
LstmLayer<T> BuildLstmMean(std::size_t d) {
  if (d == 0) throw DimensionError("lstm mean: d must be >= 1");
  using L = LstmLayer<T>;
  auto layer = L::Zeros(d + 1, d);
  layer.gate_act = kIdentityLeaky;
  layer.cell_act = kIdentityLeaky;
  for (std::size_t j = 0; j < d; ++j) {
    layer.b[layer.col(L::kForget, j)] = T{1};
    layer.b[layer.col(L::kInput, j)] = T{1};
    // Output gate reads the reciprocal count in the last input slot.
    layer.W.at(d, layer.col(L::kOutput, j)) = T{1};
    // Cell input copies h_t; cell bias stays 0 so c'_t is the plain sum.
    layer.W.at(j, layer.col(L::kCell, j)) = T{1};
  }
  return layer;
}

template <typename T>
Tensor<T> LstmCausalMeanTrajectory(const Tensor<T>& H) {
  if (H.empty()) return {};
  if (H.rank() != 2) throw DimensionError("lstm causal mean: expected [T x d] input");
  const std::size_t n = H.dim(0), d = H.dim(1);
  const auto counter = BuildLstmCounter<T>(d);
  const auto mean = BuildLstmMean<T>(d);
  const Tensor<T> counts = LstmForward(counter, H, LstmState<T>::Zeros(1)).output;
  Tensor<T> joined({n, d + 1});
  for (std::size_t t = 0; t < n; ++t) {
    for (std::size_t j = 0; j < d; ++j) joined.at(t, j) = H.at(t, j);
    joined.at(t, d) = T{1} / counts.at(t, 0);
  }
  return LstmForward(mean, joined, LstmState<T>::Zeros(d)).output;
}

template <typename T>
T RnnCounter<T>::step(T prev, std::span<const T> h) const {
  if (h.size() != W.size()) throw DimensionError("rnn counter: frame size mismatch");
  T z{0};
  for (std::size_t k = 0; k < h.size(); ++k) z += W[k] * h[k];
  z += U * prev + b;
  return kIdentityLeaky.apply(z);
}

template <typename T>
std::vector<T> RnnCounter<T>::run(const Tensor<T>& H) const {
  std::vector<T> out;
  if (H.empty()) return out;
  T prev{0};
  for (std::size_t t = 0; t < H.dim(0); ++t) {
    prev = step(prev, H.row(t));
    out.push_back(prev);
  }
  return out;
}

template <typename T>
RnnCounter<T> BuildRnnCounter(std::size_t d) {
  if (d == 0) throw DimensionError("rnn counter: d must be >= 1");
  return RnnCounter<T>{Tensor<T>({d}), T{1}, T{1}};
}

RnnMeanFit FitRnnMeanWeights(std::size_t t, unsigned seed) {
  if (t < 2) throw std::invalid_argument("rnn mean fit needs t >= 2");
  // Two random scalar sequences give two equations s_t = W h_t + U s_{t-1}
  // in the unknowns (W, U); with more sequences solve normal equations.
  std::mt19937 rng(seed);
  std::normal_distribution<double> dist;
  double a11 = 0, a12 = 0, a22 = 0, r1 = 0, r2 = 0;
  for (int k = 0; k < 8; ++k) {
    double sum = 0, prev_mean = 0, h = 0;
    for (std::size_t i = 1; i <= t; ++i) {
      h = dist(rng);
      if (i < t) {
        sum += h;
        prev_mean = sum / static_cast<double>(i);
      }
    }
    const double target = (sum + h) / static_cast<double>(t);
    a11 += h * h;
    a12 += h * prev_mean;
    a22 += prev_mean * prev_mean;
    r1 += h * target;
    r2 += prev_mean * target;
  }
  const double det = a11 * a22 - a12 * a12;
  return {t, (r1 * a22 - r2 * a12) / det, (a11 * r2 - a12 * r1) / det};
}

RnnMeanWitness CheckRnnMeanConsistency(unsigned seed) {
  RnnMeanWitness w;
  w.at2 = FitRnnMeanWeights(2, seed);
  w.at3 = FitRnnMeanWeights(3, seed + 1);
  // Plug the t = 2 weights into a t = 3 step with s_2 = 1, h_3 = 4: the true
  // mean is (2 * 1 + 4) / 3 = 2.
  const double predicted = w.at2.W * 4.0 + w.at2.U * 1.0;
  w.residual_at3 = std::abs(predicted - 2.0);
  constexpr double kTol = 1e-9;
  w.consistent = std::abs(w.at2.W - w.at3.W) < kTol && std::abs(w.at2.U - w.at3.U) < kTol;
  return w;
}

template <typename T>
AttentionPoolResult<T> AttentionPool(const Tensor<T>& H, const AttentionParams<T>& params) {
  RequireSequence(H, "attention");
  const std::size_t n = H.dim(0), d = H.dim(1);
  if (params.W_a.rank() != 2 || params.W_a.dim(0) != d ||
      params.b_a.size() != params.W_a.dim(1) || params.v.size() != params.W_a.dim(1)) {
    throw DimensionError("attention: parameter shapes do not match d=" + std::to_string(d));
  }
  const std::size_t da = params.W_a.dim(1);
  const Tensor<T> proj = Matmul(H, params.W_a);
  Tensor<T> energy({n});
  for (std::size_t t = 0; t < n; ++t) {
    T e{0};
    for (std::size_t a = 0; a < da; ++a) e += params.v[a] * std::tanh(proj.at(t, a) + params.b_a[a]);
    energy[t] = e;
  }
  AttentionPoolResult<T> r{Tensor<T>({d}), Softmax(energy)};
  for (std::size_t t = 0; t < n; ++t)
    for (std::size_t j = 0; j < d; ++j) r.output[j] += r.weights[t] * H.at(t, j);
  return r;
}

template <typename T>
Tensor<T> RnnAggregateStep(std::span<const T> s_prev, std::span<const T> h,
                           const RnnAggParams<T>& params) {
  const std::size_t d = h.size();
  if (s_prev.size() != d || params.W.rank() != 2 || params.W.dim(0) != d ||
      params.W.dim(1) != d || params.U.shape() != params.W.shape()) {
    throw DimensionError("rnn aggregate: shape mismatch");
  }
  Tensor<T> z({d});
  Tensor<T> zu({d});
  for (std::size_t k = 0; k < d; ++k)
    for (std::size_t j = 0; j < d; ++j) z[j] += h[k] * params.W.at(k, j);
  for (std::size_t k = 0; k < d; ++k)
    for (std::size_t j = 0; j < d; ++j) zu[j] += s_prev[k] * params.U.at(k, j);
  const ActivationFn act{params.activation};
  for (std::size_t j = 0; j < d; ++j) z[j] = act.apply(z[j] + zu[j]);
  return z;
}

template <typename T>
AggregateResult<T> AggregateSequence(const Aggregator<T>& agg, const Tensor<T>& H) {
  RequireSequence(H, "aggregate");
  const std::size_t n = H.dim(0), d = H.dim(1);
  AggregateResult<T> r;
  switch (agg.kind.variant) {
    case AggregationVariant::kLastFrame:
      r.per_frame = H;
      r.utterance = H.rows(n - 1, n).reshape({d});
      break;
    case AggregationVariant::kGlobalMean:
      r.utterance = ColumnMean(H);
      break;
    case AggregationVariant::kAttention:
      if (!agg.attention) throw StateError("attention aggregator without parameters");
      r.utterance = AttentionPool(H, *agg.attention).output;
      break;
    case AggregationVariant::kCausalMeanH:
    case AggregationVariant::kCausalMeanY:
      r.per_frame = CausalMeanTrajectory(H);
      r.utterance = r.per_frame->rows(n - 1, n).reshape({d});
      break;
    case AggregationVariant::kRnnAgg: {
      if (!agg.rnn) throw StateError("rnn aggregator without parameters");
      Tensor<T> traj({n, d});
      Tensor<T> s({d});
      for (std::size_t t = 0; t < n; ++t) {
        s = RnnAggregateStep<T>(s.data(), H.row(t), *agg.rnn);
        std::copy(s.data().begin(), s.data().end(), traj.row(t).begin());
      }
      r.per_frame = std::move(traj);
      r.utterance = std::move(s);
      break;
    }
  }
  return r;
}

#define DDSTREAM_INSTANTIATE_AGG(T)                                                          \
  template struct CausalMeanState<T>;                                                        \
  template struct RnnCounter<T>;                                                             \
  template CausalMeanState<T> CausalMeanStep(const CausalMeanState<T>&, std::span<const T>); \
  template LstmLayer<T> BuildLstmCounter<T>(std::size_t);                                    \
  template LstmLayer<T> BuildLstmMean<T>(std::size_t);                                       \
  template Tensor<T> LstmCausalMeanTrajectory(const Tensor<T>&);                             \
  template RnnCounter<T> BuildRnnCounter<T>(std::size_t);                                    \
  template AttentionPoolResult<T> AttentionPool(const Tensor<T>&, const AttentionParams<T>&); \
  template Tensor<T> RnnAggregateStep(std::span<const T>, std::span<const T>,                \
                                      const RnnAggParams<T>&);                               \
  template AggregateResult<T> AggregateSequence(const Aggregator<T>&, const Tensor<T>&);     \
  template Tensor<T> ColumnMean(const Tensor<T>&);                                           \
  template Tensor<T> CausalMeanTrajectory(const Tensor<T>&);

DDSTREAM_INSTANTIATE_AGG(float)
DDSTREAM_INSTANTIATE_AGG(double)

}  // namespace ddstream
