#include "ddstream/streaming.hpp"

namespace ddstream {

template <typename T>
ConvCache<T>::ConvCache(std::size_t channels, std::size_t context, std::size_t bins)
    : channels_(channels), context_(context), bins_(bins), buffer_(channels * context * bins, T{0}) {}

template <typename T>
Tensor<T> ConvCache<T>::Push(const Tensor<T>& frame) {
  if (frame.size() != channels_ * bins_) {
    throw DimensionError("conv cache: frame has " + std::to_string(frame.size()) + " values, expected " +
                         std::to_string(channels_ * bins_));
  }
  const std::size_t k = context_ + 1;
  Tensor<T> window({channels_, k, bins_});
  for (std::size_t c = 0; c < channels_; ++c) {
    for (std::size_t s = 0; s < context_; ++s) {
      const std::size_t slot = (head_ + s) % context_;
      const T* src = buffer_.data() + (c * context_ + slot) * bins_;
      std::copy(src, src + bins_, window.data().data() + (c * k + s) * bins_);
    }
    const T* src = frame.data().data() + c * bins_;
    std::copy(src, src + bins_, window.data().data() + (c * k + context_) * bins_);
    if (context_ > 0) std::copy(src, src + bins_, buffer_.data() + (c * context_ + head_) * bins_);
  }
  if (context_ > 0) head_ = (head_ + 1) % context_;
  return window;
}

template <typename T>
StreamSession<T>::StreamSession(const ModelGraph<T>& model) : model_(&model) {
  if (model.mode != Mode::kInfer) throw StateError("stream: model must be in inference mode");
  if (!model.streamable()) {
    throw StateError("stream: aggregation '" + model.config.aggregation.name() +
                     "' needs the whole utterance and cannot run frame by frame");
  }
  const auto& cfg = model.config;
  if (cfg.topology == Topology::kResLstm) {
    std::size_t bins = cfg.feature_bins;
    stem_cache_.emplace(1, model.stem_conv->k_time - 1, bins);
    bins = model.stem_conv->out_freq(bins);
    for (const auto& blk : model.blocks) {
      conv1_caches_.emplace_back(blk.conv1.in_channels, blk.conv1.k_time - 1, bins);
      bins = blk.conv1.out_freq(bins);
      conv2_caches_.emplace_back(blk.conv2.in_channels, blk.conv2.k_time - 1, bins);
    }
  }
  for (const auto& l : model.lstms) lstm_states_.push_back(LstmState<T>::Zeros(l.hidden_size));
  const std::size_t d = model.config.aggregation.on_y() ? 2 : model.embedding_size();
  mean_state_ = CausalMeanState<T>::Zero(d);
  rnn_state_ = Tensor<T>({d});
}

template <typename T>
Tensor<T> StreamSession<T>::ConvFrame(const Conv2dLayer<T>& layer, ConvCache<T>& cache, const Tensor<T>& x) {
  const Tensor<T> out = Conv2dFrame(layer, cache.Push(x));
  return out.reshape({out.dim(0), 1, out.dim(1)});
}

template <typename T>
Tensor<T> StreamSession<T>::HeadStep(const Tensor<T>& h) {
  const auto& m = *model_;
  const std::size_t d = h.size();
  switch (m.config.aggregation.variant) {
    case AggregationVariant::kCausalMeanY: {
      const Tensor<T> logits = ClassifierLogits(m, h.reshape({1, d}));
      mean_state_ = CausalMeanStep<T>(mean_state_, logits.data());
      return Softmax(mean_state_.s);
    }
    case AggregationVariant::kCausalMeanH:
      mean_state_ = CausalMeanStep<T>(mean_state_, h.data());
      return Softmax(ClassifierLogits(m, mean_state_.s.reshape({1, d}))).reshape({2});
    case AggregationVariant::kRnnAgg:
      rnn_state_ = RnnAggregateStep<T>(rnn_state_.data(), h.data(), *m.aggregator.rnn);
      return Softmax(ClassifierLogits(m, rnn_state_.reshape({1, d}))).reshape({2});
    case AggregationVariant::kLastFrame:
      return Softmax(ClassifierLogits(m, h.reshape({1, d}))).reshape({2});
    default:
      throw StateError("stream: non-causal aggregation");
  }
}

template <typename T>
Tensor<T> StreamSession<T>::Step(std::span<const T> frame) {
  const auto& m = *model_;
  const auto& cfg = m.config;
  if (frame.size() != cfg.feature_bins) {
    throw DimensionError("stream: frame has " + std::to_string(frame.size()) + " bins, expected " +
                         std::to_string(cfg.feature_bins));
  }
  if (frame_index_ >= cfg.truncation_frames) {
    throw StateError("stream: frame limit " + std::to_string(cfg.truncation_frames) + " reached");
  }
  Tensor<T> x({1, 1, frame.size()}, std::vector<T>(frame.begin(), frame.end()));
  if (cfg.topology == Topology::kResLstm) {
    x = Relu(BatchNormInfer(*m.stem_bn, ConvFrame(*m.stem_conv, *stem_cache_, x)));
    for (std::size_t i = 0; i < m.blocks.size(); ++i) {
      const auto& blk = m.blocks[i];
      Tensor<T> main = Relu(BatchNormInfer(blk.bn1, ConvFrame(blk.conv1, conv1_caches_[i], x)));
      main = BatchNormInfer(blk.bn2, ConvFrame(blk.conv2, conv2_caches_[i], main));
      Tensor<T> skip = x;
      if (blk.projection) {
        const Tensor<T> p = Conv2dFrame(*blk.projection, x);
        skip = p.reshape({p.dim(0), 1, p.dim(1)});
      }
      x = Relu(Add(main, skip));
    }
    if (cfg.pool_then_flatten) x = AvgPoolFreq(x);
    x = FlattenFrames(x);
  } else {
    x = x.reshape({1, frame.size()});
  }
  std::span<const T> h = x.data();
  for (std::size_t i = 0; i < m.lstms.size(); ++i) {
    lstm_states_[i] = LstmStep(m.lstms[i], h, lstm_states_[i]);
    h = lstm_states_[i].h.data();
  }
  last_ = HeadStep(lstm_states_.empty() ? x : lstm_states_.back().h);
  ++frame_index_;
  return last_;
}

template <typename T>
Tensor<T> StreamSession<T>::Finalize() const {
  if (frame_index_ == 0) throw StateError("stream: finalize before any frame");
  return last_;
}

template <typename T>
std::size_t StreamSession<T>::footprint() const {
  std::size_t n = 0;
  if (stem_cache_) n += stem_cache_->footprint();
  for (const auto& c : conv1_caches_) n += c.footprint();
  for (const auto& c : conv2_caches_) n += c.footprint();
  for (const auto& s : lstm_states_) n += s.h.size() + s.c.size();
  n += mean_state_.s.size() + mean_state_.sum.size() + rnn_state_.size() + last_.size();
  return n;
}

template class ConvCache<float>;
template class ConvCache<double>;
template class StreamSession<float>;
template class StreamSession<double>;

}  // namespace ddstream
