#pragma once

#include <functional>
#include <map>
#include <string>
#include <vector>

#include "ddstream/aggregation.hpp"
#include "ddstream/layers.hpp"
#include "ddstream/tensor.hpp"

namespace ddstream {

// Reverse-mode tape. Nodes are appended in execution order; Backward walks
// them in exact reverse order and accumulates gradients additively where a
// value fans out.
template <typename T>
class Tape {
 public:
  using Id = std::size_t;
  using BackwardFn = std::function<void(Tape&, Id)>;

  Id Constant(Tensor<T> value);
  // Registered leaf that receives a gradient. Names must be unique.
  Id Parameter(Tensor<T> value, const std::string& name);
  // Unnamed leaf that receives a gradient (inputs under test).
  Id Variable(Tensor<T> value);
  Id Record(Tensor<T> value, std::vector<Id> inputs, BackwardFn backward);

  const Tensor<T>& value(Id id) const { return nodes_.at(id).value; }
  bool requires_grad(Id id) const { return nodes_.at(id).requires_grad; }
  // Gradient of the last Backward; zeros if nothing flowed into `id`.
  Tensor<T> grad(Id id) const;
  // Accumulation target for backward functions; null if `id` needs no grad.
  Tensor<T>* grad_target(Id id);
  const std::vector<Id>& inputs(Id id) const { return nodes_.at(id).inputs; }

  void Backward(Id loss);

  // Gradients of every registered parameter, by name.
  std::map<std::string, Tensor<T>> ParameterGrads() const;
  const std::map<std::string, Id>& parameters() const { return params_; }
  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;  // allocated on first use
    std::vector<Id> inputs;
    BackwardFn backward;
    bool requires_grad = false;
  };
  std::vector<Node> nodes_;
  std::map<std::string, Id> params_;
  bool backward_done_ = false;
};

// Differentiable operations. Each mirrors a forward kernel from the layer,
// aggregation, or tensor modules and records its backward on the tape.
namespace ad {

template <typename T>
using Id = typename Tape<T>::Id;

// `geometry` supplies kernel/stride sizes; its tensors are ignored.
template <typename T>
Id<T> Conv2d(Tape<T>& tape, Id<T> x, Id<T> weight, Id<T> bias, const Conv2dLayer<T>& geometry,
             const Segments& segments);

// Training-mode batch norm. When `stats` is non-null it receives the batch
// statistics and the updated running statistics.
template <typename T>
Id<T> BatchNorm(Tape<T>& tape, Id<T> x, Id<T> gamma, Id<T> beta, const BatchNormLayer<T>& layer,
                BatchNormTrainResult<T>* stats);

template <typename T>
Id<T> Relu(Tape<T>& tape, Id<T> x);
template <typename T>
Id<T> Add(Tape<T>& tape, Id<T> a, Id<T> b);
template <typename T>
Id<T> AvgPoolFreq(Tape<T>& tape, Id<T> x);
template <typename T>
Id<T> FlattenFrames(Tape<T>& tape, Id<T> x);

template <typename T>
Id<T> Lstm(Tape<T>& tape, Id<T> x, Id<T> W, Id<T> U, Id<T> b, ActivationFn gate_act,
           ActivationFn cell_act, const Segments& segments);

template <typename T>
Id<T> Dense(Tape<T>& tape, Id<T> x, Id<T> W, Id<T> b, Activation act);

// Per-segment reductions of a packed [N x d] sequence.
template <typename T>
Id<T> SegmentMean(Tape<T>& tape, Id<T> x, const Segments& segments);  // [B x d]
template <typename T>
Id<T> CausalMean(Tape<T>& tape, Id<T> x, const Segments& segments);   // [N x d]
template <typename T>
Id<T> Attention(Tape<T>& tape, Id<T> x, Id<T> W_a, Id<T> b_a, Id<T> v,
                const Segments& segments);                            // [B x d]
template <typename T>
Id<T> RnnAggregate(Tape<T>& tape, Id<T> x, Id<T> W, Id<T> U, Activation act,
                   const Segments& segments);                         // [N x d]

// sum_r weight_r * -log softmax(logits_r)[label_r] over rows of [N x 2].
template <typename T>
Id<T> SoftmaxCrossEntropy(Tape<T>& tape, Id<T> logits, const std::vector<int>& labels,
                          const std::vector<T>& weights);

// sum(x ⊙ r) for a constant r of the same shape.
template <typename T>
Id<T> Contract(Tape<T>& tape, Id<T> x, const Tensor<T>& r);

}  // namespace ad

}  // namespace ddstream
