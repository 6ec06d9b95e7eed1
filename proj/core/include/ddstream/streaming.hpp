#pragma once

#include <vector>

#include "ddstream/aggregation.hpp"
#include "ddstream/model.hpp"

namespace ddstream {

// The k_time - 1 most recent input frames of one convolution, oldest
// first in ring order. Zero-initialized, which reproduces the causal left
// padding used offline.
template <typename T>
class ConvCache {
 public:
  ConvCache() = default;
  ConvCache(std::size_t channels, std::size_t context, std::size_t bins);

  // [C x (context + 1) x F] window ending with `frame` ([C x F]), then
  // advances the ring so `frame` becomes the newest cached entry.
  Tensor<T> Push(const Tensor<T>& frame);

  std::size_t context() const { return context_; }
  std::size_t footprint() const { return buffer_.size(); }

 private:
  std::size_t channels_ = 0;
  std::size_t context_ = 0;
  std::size_t bins_ = 0;
  std::size_t head_ = 0;  // slot of the oldest frame
  std::vector<T> buffer_;
};

// Frame-by-frame inference for a model with a causal aggregation head.
// Holds a non-owning pointer to the model, which must outlive the session
// and stay unmodified. Copying a session forks its state.
template <typename T>
class StreamSession {
 public:
  explicit StreamSession(const ModelGraph<T>& model);

  // Consumes one [F] frame and returns the class posteriors [2] given all
  // frames seen so far.
  Tensor<T> Step(std::span<const T> frame);
  // Last emitted posteriors.
  Tensor<T> Finalize() const;

  std::size_t frame_index() const { return frame_index_; }
  // Scalars held across steps; constant in the number of frames consumed.
  std::size_t footprint() const;

 private:
  Tensor<T> ConvFrame(const Conv2dLayer<T>& layer, ConvCache<T>& cache, const Tensor<T>& x);
  Tensor<T> HeadStep(const Tensor<T>& h);

  const ModelGraph<T>* model_;
  std::size_t frame_index_ = 0;
  std::optional<ConvCache<T>> stem_cache_;
  std::vector<ConvCache<T>> conv1_caches_;
  std::vector<ConvCache<T>> conv2_caches_;
  std::vector<LstmState<T>> lstm_states_;
  CausalMeanState<T> mean_state_;
  Tensor<T> rnn_state_;
  Tensor<T> last_;
};

}  // namespace ddstream
