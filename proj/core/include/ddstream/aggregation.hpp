#pragma once

#include <optional>
#include <string>

#include "ddstream/layers.hpp"
#include "ddstream/tensor.hpp"

namespace ddstream {

enum class AggregationVariant {
  kLastFrame,
  kGlobalMean,
  kAttention,
  kCausalMeanH,
  kCausalMeanY,
  kRnnAgg,
};

// Which reduction turns frame embeddings into decisions. Parsed from and
// printed as one of: last_frame, global_mean, attention, causal_mean_h,
// causal_mean_y, rnn_tanh, rnn_relu.
struct AggregatorKind {
  AggregationVariant variant = AggregationVariant::kCausalMeanH;
  Activation rnn_activation = Activation::kTanh;  // rnn_agg only

  static AggregatorKind Parse(const std::string& name);
  std::string name() const;

  // Output at frame t depends only on frames <= t.
  bool causal() const;
  // Applied to classifier logits y_t instead of LSTM outputs h_t.
  bool on_y() const { return variant == AggregationVariant::kCausalMeanY; }
  bool operator==(const AggregatorKind&) const = default;
};

// Additive attention: e_t = v · tanh(h_t·W_a + b_a), w = softmax(e).
template <typename T>
struct AttentionParams {
  Tensor<T> W_a;  // [d x d_a]
  Tensor<T> b_a;  // [d_a]
  Tensor<T> v;    // [d_a]
};

// s_t = act(h_t·W + s_{t-1}·U), no bias.
template <typename T>
struct RnnAggParams {
  Tensor<T> W;  // [d x d]
  Tensor<T> U;  // [d x d]
  Activation activation = Activation::kTanh;
};

template <typename T>
struct Aggregator {
  AggregatorKind kind;
  std::optional<AttentionParams<T>> attention;  // iff kind is attention
  std::optional<RnnAggParams<T>> rnn;           // iff kind is rnn_agg
};

// Running mean over frames 1..t. Keeps the running sum so that the final
// mean matches a one-shot column mean bit for bit.
template <typename T>
struct CausalMeanState {
  std::size_t t = 0;
  Tensor<T> s;    // [d] mean of the frames seen so far
  Tensor<T> sum;  // [d]

  static CausalMeanState Zero(std::size_t d);
  // State after `t` frames whose mean is `s`.
  static CausalMeanState FromMean(std::size_t t, Tensor<T> s);
};

template <typename T>
CausalMeanState<T> CausalMeanStep(const CausalMeanState<T>& state, std::span<const T> h);

// Fixed-weight LSTM whose output at frame t is t (hidden size 1, all
// activations LeakyReLU with alpha 1).
template <typename T>
LstmLayer<T> BuildLstmCounter(std::size_t d);

// Fixed-weight LSTM over [h_t, 1/t] (d + 1 inputs, d units) whose output is
// the running mean of h_1..h_t.
template <typename T>
LstmLayer<T> BuildLstmMean(std::size_t d);

// Runs counter -> reciprocal -> mean on H [T x d] and returns the [T x d]
// trajectory. An empty H (rank 0) yields an empty result.
template <typename T>
Tensor<T> LstmCausalMeanTrajectory(const Tensor<T>& H);

// One-layer recurrence h'_t = W''·h_t + U''·h'_{t-1} + b'' with LeakyReLU(1).
template <typename T>
struct RnnCounter {
  Tensor<T> W;  // [d]
  T U = T{1};
  T b = T{1};

  T step(T prev, std::span<const T> h) const;
  // Outputs for each row of H; empty H gives an empty vector.
  std::vector<T> run(const Tensor<T>& H) const;
};

template <typename T>
RnnCounter<T> BuildRnnCounter(std::size_t d);

// Least-squares fit of a constant scalar recurrence s_t = W·h_t + U·s_{t-1}
// to exact running means at frame t.
struct RnnMeanFit {
  std::size_t t = 0;
  double W = 0;
  double U = 0;
};

struct RnnMeanWitness {
  RnnMeanFit at2;
  RnnMeanFit at3;
  // |mean recurrence residual| at t = 3 when using the t = 2 weights.
  double residual_at3 = 0;
  bool consistent = true;
};

RnnMeanFit FitRnnMeanWeights(std::size_t t, unsigned seed);
// Shows that no single (W'', U'') serves both t = 2 and t = 3.
RnnMeanWitness CheckRnnMeanConsistency(unsigned seed);

template <typename T>
struct AttentionPoolResult {
  Tensor<T> output;   // [d]
  Tensor<T> weights;  // [T]
};

template <typename T>
AttentionPoolResult<T> AttentionPool(const Tensor<T>& H, const AttentionParams<T>& params);

template <typename T>
Tensor<T> RnnAggregateStep(std::span<const T> s_prev, std::span<const T> h,
                           const RnnAggParams<T>& params);

template <typename T>
struct AggregateResult {
  std::optional<Tensor<T>> per_frame;  // [T x d], causal variants only
  Tensor<T> utterance;                 // [d]
};

template <typename T>
AggregateResult<T> AggregateSequence(const Aggregator<T>& agg, const Tensor<T>& H);

// Column mean and causal mean trajectory, shared by the aggregator and the
// training ops so both accumulate in the same order.
template <typename T>
Tensor<T> ColumnMean(const Tensor<T>& H);
template <typename T>
Tensor<T> CausalMeanTrajectory(const Tensor<T>& H);

}  // namespace ddstream
