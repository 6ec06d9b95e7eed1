#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "ddstream/autodiff.hpp"
#include "ddstream/data.hpp"
#include "ddstream/model.hpp"

namespace ddstream {

enum class LossRegime { kFrameWise, kUtteranceLevel, kCausalFrameWise };
const char* ToString(LossRegime regime);

struct LossSpec {
  LossRegime regime = LossRegime::kCausalFrameWise;
  std::optional<std::pair<double, double>> class_weights;  // (ND, DD)

  static LossSpec For(const AggregatorKind& kind);
};

// scores: posteriors [2] or [T x 2]. Frame regimes average -log p(label)
// over the rows; the utterance regime needs exactly one row.
template <typename T>
T CrossEntropy(const Tensor<T>& scores, int label, LossRegime regime);

template <typename T>
struct AdamState {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::uint64_t step = 0;
  std::map<std::string, Tensor<T>> m;
  std::map<std::string, Tensor<T>> v;
};

// One bias-corrected Adam update of every parameter that has a gradient.
template <typename T>
void AdamStep(AdamState<T>& state, std::map<std::string, Tensor<T>*>& params,
              const std::map<std::string, Tensor<T>>& grads);

// Scales `grads` so their global L2 norm is at most `max_norm`; returns
// the norm before clipping.
template <typename T>
double ClipGlobalNorm(std::map<std::string, Tensor<T>>& grads, double max_norm);

// Pointers to the trainable tensors of `model`, keyed by VisitTensors name.
template <typename T>
std::map<std::string, Tensor<T>*> TrainableParameters(ModelGraph<T>& model);

struct TrainOptions {
  std::size_t batch_size = 8;
  double learning_rate = 1e-3;
  double clip_norm = 5.0;
  std::optional<std::pair<double, double>> class_weights;
  // Evaluate the training split after every epoch; otherwise only after the last.
  bool eval_train_each_epoch = true;

  // Reads the training keys; throws std::invalid_argument on bad values.
  static TrainOptions FromKeyValues(const KeyValueFile& kv);
  static const std::vector<std::string>& Keys();
  std::string ToText() const;
};

struct EpochMetrics {
  std::size_t epoch = 0;
  std::string split;
  double loss = 0;
  double auc = 0;
  double eer = 0;
  double acc = 0;
};
void WriteMetricsCsv(std::ostream& out, const std::vector<EpochMetrics>& log);

template <typename T>
struct TrainResult {
  ModelGraph<T> model;
  std::vector<EpochMetrics> log;
  // Mean training loss of the minibatch updates in each epoch.
  std::vector<double> epoch_batch_loss;
};

// Batch loss and parameter gradients (averaged over utterances) for one
// packed minibatch. Batch norm runs in training mode; its updated running
// statistics are written back into `model` when `update_running_stats`.
template <typename T>
struct BatchGradients {
  double loss = 0;
  std::map<std::string, Tensor<T>> grads;
};
template <typename T>
BatchGradients<T> ComputeBatchGradients(ModelGraph<T>& model, const std::vector<const FeatureSequence*>& batch,
                                        const LossSpec& loss, bool update_running_stats);

// Mean per-utterance loss under the head's regime, inference mode.
template <typename T>
double DatasetLoss(const ModelGraph<T>& model, const std::vector<FeatureSequence>& data, const LossSpec& loss);

template <typename T>
TrainResult<T> Train(const ModelConfig& config, const TrainOptions& options,
                     const std::vector<FeatureSequence>& train, const std::vector<FeatureSequence>* heldout,
                     std::size_t epochs, std::uint64_t seed);

struct GradCheckResult {
  std::string layer;
  bool pass = false;
  std::size_t configs = 0;
  double max_rel_error = 0;
};

inline constexpr double kGradCheckTolerance = 1e-4;
inline constexpr double kGradCheckStep = 1e-5;

// 64-bit central finite differences for every differentiable layer type on
// `configs` random configurations each. `inject_fault` names a layer whose
// analytic gradient is deliberately scaled, for negative controls.
std::vector<GradCheckResult> RunGradCheck(std::uint64_t seed, std::size_t configs = 10,
                                          const std::string& inject_fault = "");
const std::vector<std::string>& GradCheckLayers();

}  // namespace ddstream
