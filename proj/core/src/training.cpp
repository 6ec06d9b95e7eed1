#include "ddstream/training.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <iomanip>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>

#include "ddstream/metrics.hpp"

namespace ddstream {

const char* ToString(LossRegime regime) {
  switch (regime) {
    case LossRegime::kFrameWise: return "frame_wise";
    case LossRegime::kUtteranceLevel: return "utterance_level";
    case LossRegime::kCausalFrameWise: return "causal_frame_wise";
  }
  return "?";
}

LossSpec LossSpec::For(const AggregatorKind& kind) {
  LossSpec spec;
  switch (kind.variant) {
    case AggregationVariant::kGlobalMean:
    case AggregationVariant::kAttention: spec.regime = LossRegime::kUtteranceLevel; break;
    case AggregationVariant::kLastFrame: spec.regime = LossRegime::kFrameWise; break;
    default: spec.regime = LossRegime::kCausalFrameWise; break;
  }
  return spec;
}

namespace {

void RequireLabel(int label) {
  if (label != 0 && label != 1) throw std::invalid_argument("label must be 0 or 1, got " + std::to_string(label));
}

template <typename T>
T NegLog(T p) {
  return -std::log(std::max(p, std::numeric_limits<T>::min()));
}

}  // namespace

template <typename T>
T CrossEntropy(const Tensor<T>& scores, int label, LossRegime regime) {
  RequireLabel(label);
  const Tensor<T> rows = scores.rank() == 1 ? scores.reshape({1, scores.size()}) : scores;
  if (rows.rank() != 2 || rows.dim(1) != 2) throw DimensionError("cross entropy: expected [2] or [T x 2] scores");
  const auto k = static_cast<std::size_t>(label);
  if (regime == LossRegime::kUtteranceLevel) {
    if (rows.dim(0) != 1) throw DimensionError("cross entropy: utterance-level loss takes a single score");
    return NegLog(rows.at(0, k));
  }
  T sum{0};
  for (std::size_t t = 0; t < rows.dim(0); ++t) sum += NegLog(rows.at(t, k));
  return sum / static_cast<T>(rows.dim(0));
}

template <typename T>
void AdamStep(AdamState<T>& state, std::map<std::string, Tensor<T>*>& params,
              const std::map<std::string, Tensor<T>>& grads) {
  for (const auto& [name, g] : grads) {
    auto it = params.find(name);
    if (it == params.end()) throw std::invalid_argument("adam: gradient for unknown parameter '" + name + "'");
    if (it->second->shape() != g.shape()) {
      throw DimensionError("adam: gradient shape " + ShapeString(g.shape()) + " for parameter '" + name + "' of shape " +
                           ShapeString(it->second->shape()));
    }
  }
  ++state.step;
  const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  for (const auto& [name, g] : grads) {
    Tensor<T>& p = *params.at(name);
    auto [mit, m_new] = state.m.try_emplace(name, p.shape());
    auto [vit, v_new] = state.v.try_emplace(name, p.shape());
    Tensor<T>& m = mit->second;
    Tensor<T>& v = vit->second;
    for (std::size_t k = 0; k < p.size(); ++k) {
      const double gk = g[k];
      const double mk = state.beta1 * m[k] + (1.0 - state.beta1) * gk;
      const double vk = state.beta2 * v[k] + (1.0 - state.beta2) * gk * gk;
      m[k] = static_cast<T>(mk);
      v[k] = static_cast<T>(vk);
      const double update = state.lr * (mk / c1) / (std::sqrt(vk / c2) + state.epsilon);
      p[k] = static_cast<T>(p[k] - update);
    }
  }
}

template <typename T>
double ClipGlobalNorm(std::map<std::string, Tensor<T>>& grads, double max_norm) {
  double sq = 0;
  for (const auto& [name, g] : grads)
    for (T v : g.data()) sq += static_cast<double>(v) * v;
  const double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0) {
    const T scale = static_cast<T>(max_norm / norm);
    for (auto& [name, g] : grads)
      for (T& v : g.data()) v *= scale;
  }
  return norm;
}

template <typename T>
std::map<std::string, Tensor<T>*> TrainableParameters(ModelGraph<T>& model) {
  std::map<std::string, Tensor<T>*> out;
  VisitTensors(model, [&](const std::string& name, Tensor<T>& t, bool trainable) {
    if (trainable) out[name] = &t;
  });
  return out;
}

TrainOptions TrainOptions::FromKeyValues(const KeyValueFile& kv) {
  TrainOptions o;
  auto number = [&](const std::string& key) -> std::optional<double> {
    auto v = kv.get(key);
    if (!v) return std::nullopt;
    try {
      std::size_t used = 0;
      const double d = std::stod(*v, &used);
      if (used != v->size() || !std::isfinite(d)) throw std::invalid_argument(key);
      return d;
    } catch (const std::exception&) {
      throw std::invalid_argument("config: bad value for " + key + ": '" + *v + "'");
    }
  };
  if (auto v = number("batch_size")) {
    if (*v < 1 || *v != std::floor(*v)) throw std::invalid_argument("config: batch_size must be a positive integer");
    o.batch_size = static_cast<std::size_t>(*v);
  }
  if (auto v = number("learning_rate")) {
    if (*v < 0) throw std::invalid_argument("config: learning_rate must be >= 0");
    o.learning_rate = *v;
  }
  if (auto v = number("clip_norm")) {
    if (*v <= 0) throw std::invalid_argument("config: clip_norm must be > 0");
    o.clip_norm = *v;
  }
  auto w0 = number("class_weight_nd");
  auto w1 = number("class_weight_dd");
  if (w0 || w1) o.class_weights = std::make_pair(w0.value_or(1.0), w1.value_or(1.0));
  if (auto v = kv.get("eval_train_each_epoch")) {
    if (*v == "true" || *v == "1") o.eval_train_each_epoch = true;
    else if (*v == "false" || *v == "0") o.eval_train_each_epoch = false;
    else throw std::invalid_argument("config: eval_train_each_epoch must be true or false");
  }
  return o;
}

const std::vector<std::string>& TrainOptions::Keys() {
  static const std::vector<std::string> keys = {"batch_size", "learning_rate", "clip_norm", "class_weight_nd",
                                                "class_weight_dd", "eval_train_each_epoch"};
  return keys;
}

std::string TrainOptions::ToText() const {
  std::ostringstream os;
  os << std::setprecision(17);
  os << "batch_size = " << batch_size << "\n";
  os << "learning_rate = " << learning_rate << "\n";
  os << "clip_norm = " << clip_norm << "\n";
  if (class_weights) {
    os << "class_weight_nd = " << class_weights->first << "\n";
    os << "class_weight_dd = " << class_weights->second << "\n";
  }
  os << "eval_train_each_epoch = " << (eval_train_each_epoch ? "true" : "false") << "\n";
  return os.str();
}

void WriteMetricsCsv(std::ostream& out, const std::vector<EpochMetrics>& log) {
  out << "epoch,split,loss,auc,eer,acc\n";
  const auto old = out.precision(9);
  for (const auto& m : log) {
    out << m.epoch << ',' << m.split << ',' << m.loss << ',' << m.auc << ',' << m.eer << ',' << m.acc << '\n';
  }
  out.precision(old);
}

namespace {

template <typename T>
struct TapeGraph {
  typename Tape<T>::Id logits = 0;
  bool per_frame = false;
  std::vector<std::pair<BatchNormLayer<T>*, BatchNormTrainResult<T>>> bn;
};

template <typename T>
TapeGraph<T> RecordForward(Tape<T>& tape, ModelGraph<T>& model, const Tensor<T>& packed, const Segments& seg) {
  using Id = typename Tape<T>::Id;
  TapeGraph<T> g;
  std::map<std::string, Id> p;
  VisitTensors(model, [&](const std::string& name, Tensor<T>& t, bool trainable) {
    if (trainable) p[name] = tape.Parameter(t, name);
  });
  const std::size_t N = packed.dim(0);
  Id x;
  if (model.config.topology == Topology::kResLstm) {
    auto conv = [&](Id in, const std::string& name, const Conv2dLayer<T>& c) {
      return ad::Conv2d(tape, in, p.at(name + ".weight"), p.at(name + ".bias"), c, seg);
    };
    auto bn = [&](Id in, const std::string& name, BatchNormLayer<T>& b) {
      BatchNormTrainResult<T> stats;
      const Id y = ad::BatchNorm(tape, in, p.at(name + ".gamma"), p.at(name + ".beta"), b, &stats);
      g.bn.emplace_back(&b, std::move(stats));
      return y;
    };
    x = tape.Constant(packed.reshape({1, N, packed.dim(1)}));
    x = ad::Relu(tape, bn(conv(x, "stem.conv", *model.stem_conv), "stem.bn", *model.stem_bn));
    for (std::size_t i = 0; i < model.blocks.size(); ++i) {
      auto& blk = model.blocks[i];
      const std::string name = "block" + std::to_string(i);
      Id main = ad::Relu(tape, bn(conv(x, name + ".conv1", blk.conv1), name + ".bn1", blk.bn1));
      main = bn(conv(main, name + ".conv2", blk.conv2), name + ".bn2", blk.bn2);
      const Id skip = blk.projection ? conv(x, name + ".proj", *blk.projection) : x;
      x = ad::Relu(tape, ad::Add(tape, main, skip));
    }
    if (model.config.pool_then_flatten) x = ad::AvgPoolFreq(tape, x);
    x = ad::FlattenFrames(tape, x);
  } else {
    x = tape.Constant(packed);
  }
  for (std::size_t i = 0; i < model.lstms.size(); ++i) {
    const auto& l = model.lstms[i];
    const std::string name = "lstm" + std::to_string(i);
    x = ad::Lstm(tape, x, p.at(name + ".W"), p.at(name + ".U"), p.at(name + ".b"), l.gate_act, l.cell_act, seg);
  }
  const auto& kind = model.config.aggregation;
  switch (kind.variant) {
    case AggregationVariant::kLastFrame:
    case AggregationVariant::kCausalMeanY: g.per_frame = true; break;
    case AggregationVariant::kGlobalMean: x = ad::SegmentMean(tape, x, seg); break;
    case AggregationVariant::kAttention:
      x = ad::Attention(tape, x, p.at("agg.W_a"), p.at("agg.b_a"), p.at("agg.v"), seg);
      break;
    case AggregationVariant::kCausalMeanH:
      x = ad::CausalMean(tape, x, seg);
      g.per_frame = true;
      break;
    case AggregationVariant::kRnnAgg:
      x = ad::RnnAggregate(tape, x, p.at("agg.W"), p.at("agg.U"), model.aggregator.rnn->activation, seg);
      g.per_frame = true;
      break;
  }
  for (std::size_t i = 0; i < model.classifier.size(); ++i) {
    const std::string name = "fc" + std::to_string(i);
    x = ad::Dense(tape, x, p.at(name + ".weight"), p.at(name + ".bias"), model.classifier[i].activation);
  }
  if (kind.on_y()) x = ad::CausalMean(tape, x, seg);
  g.logits = x;
  return g;
}

double ClassWeight(const LossSpec& loss, int label) {
  if (!loss.class_weights) return 1.0;
  return label == 1 ? loss.class_weights->second : loss.class_weights->first;
}

}  // namespace

template <typename T>
BatchGradients<T> ComputeBatchGradients(ModelGraph<T>& model, const std::vector<const FeatureSequence*>& batch,
                                        const LossSpec& loss, bool update_running_stats) {
  if (batch.empty()) throw std::invalid_argument("batch is empty");
  const std::size_t F = model.config.feature_bins;
  const std::size_t limit = model.config.truncation_frames;
  Segments seg;
  for (const auto* s : batch) {
    RequireLabel(s->label);
    if (s->frames.rank() != 2 || s->frames.dim(1) != F) {
      throw DimensionError("utterance '" + s->id + "': expected [T x " + std::to_string(F) + "] features, got " +
                           ShapeString(s->frames.shape()));
    }
    seg.push_back(std::min(s->length(), limit));
  }
  Tensor<T> packed({SegmentsTotal(seg), F});
  std::size_t row = 0;
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const auto src = batch[b]->frames.data();
    std::transform(src.begin(), src.begin() + seg[b] * F, packed.data().begin() + row * F,
                   [](float v) { return static_cast<T>(v); });
    row += seg[b];
  }

  const Mode saved = model.mode;
  model.mode = Mode::kTrain;
  Tape<T> tape;
  TapeGraph<T> graph = RecordForward(tape, model, packed, seg);
  model.mode = saved;

  const bool frame_rows = graph.per_frame;
  if (frame_rows != (loss.regime != LossRegime::kUtteranceLevel)) {
    throw StateError(std::string("loss regime ") + ToString(loss.regime) + " does not fit the " +
                     model.config.aggregation.name() + " head");
  }
  std::vector<int> labels;
  std::vector<T> weights;
  const double inv_b = 1.0 / static_cast<double>(batch.size());
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const double cw = ClassWeight(loss, batch[b]->label);
    const std::size_t rows = frame_rows ? seg[b] : 1;
    for (std::size_t r = 0; r < rows; ++r) {
      labels.push_back(batch[b]->label);
      weights.push_back(static_cast<T>(cw * inv_b / static_cast<double>(rows)));
    }
  }
  const auto loss_id = ad::SoftmaxCrossEntropy(tape, graph.logits, labels, weights);
  tape.Backward(loss_id);

  BatchGradients<T> out;
  out.loss = tape.value(loss_id)[0];
  out.grads = tape.ParameterGrads();
  if (update_running_stats) {
    for (auto& [layer, stats] : graph.bn) {
      layer->running_mean = stats.running_mean;
      layer->running_var = stats.running_var;
    }
  }
  return out;
}

namespace {

template <typename T>
struct SplitEval {
  double loss = 0;
  std::vector<double> scores;
  std::vector<int> labels;
};

template <typename T>
SplitEval<T> EvaluateSplit(const ModelGraph<T>& model, const std::vector<FeatureSequence>& data, const LossSpec& loss) {
  SplitEval<T> e;
  const std::size_t limit = model.config.truncation_frames;
  for (const auto& s : data) {
    RequireLabel(s.label);
    const std::size_t n = std::min(s.length(), limit);
    const Tensor<T> x = s.frames.rows(0, n).template cast<T>();
    const OfflineScores<T> r = ForwardOffline(model, x);
    if (loss.regime == LossRegime::kUtteranceLevel) {
      e.loss += static_cast<double>(CrossEntropy(r.utterance, s.label, loss.regime));
    } else {
      e.loss += static_cast<double>(CrossEntropy(*r.per_frame, s.label, loss.regime));
    }
    e.scores.push_back(static_cast<double>(r.utterance[1]));
    e.labels.push_back(s.label);
  }
  e.loss /= static_cast<double>(data.size());
  return e;
}

template <typename T>
EpochMetrics Summarize(std::size_t epoch, const std::string& split, const SplitEval<T>& e) {
  EpochMetrics m;
  m.epoch = epoch;
  m.split = split;
  m.loss = e.loss;
  const bool both = std::count(e.labels.begin(), e.labels.end(), 1) > 0 &&
                    std::count(e.labels.begin(), e.labels.end(), 0) > 0;
  m.auc = both ? ComputeAuc(e.scores, e.labels) : std::numeric_limits<double>::quiet_NaN();
  m.eer = both ? ComputeEer(e.scores, e.labels) : std::numeric_limits<double>::quiet_NaN();
  m.acc = ComputeAcc(e.scores, e.labels);
  return m;
}

}  // namespace

template <typename T>
double DatasetLoss(const ModelGraph<T>& model, const std::vector<FeatureSequence>& data, const LossSpec& loss) {
  if (data.empty()) throw std::invalid_argument("dataset is empty");
  return EvaluateSplit(model, data, loss).loss;
}

template <typename T>
TrainResult<T> Train(const ModelConfig& config, const TrainOptions& options,
                     const std::vector<FeatureSequence>& train, const std::vector<FeatureSequence>* heldout,
                     std::size_t epochs, std::uint64_t seed) {
  if (train.empty()) throw std::invalid_argument("train: empty dataset");
  if (options.batch_size == 0) throw std::invalid_argument("train: batch_size must be positive");
  config.Validate();
  TrainResult<T> result{BuildModel<T>(config, seed), {}, {}};
  ModelGraph<T>& model = result.model;
  LossSpec loss = LossSpec::For(config.aggregation);
  loss.class_weights = options.class_weights;
  AdamState<T> adam;
  adam.lr = options.learning_rate;

  std::mt19937_64 rng(seed ^ 0x5deece66dULL);
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t epoch = 1; epoch <= epochs; ++epoch) {
    // Fisher-Yates with our own index draw keeps the order identical across standard libraries.
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng() % i]);
    double batch_loss = 0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += options.batch_size) {
      std::vector<const FeatureSequence*> batch;
      for (std::size_t k = start; k < std::min(order.size(), start + options.batch_size); ++k) {
        batch.push_back(&train[order[k]]);
      }
      BatchGradients<T> bg = ComputeBatchGradients(model, batch, loss, true);
      ClipGlobalNorm(bg.grads, options.clip_norm);
      auto params = TrainableParameters(model);
      AdamStep(adam, params, bg.grads);
      batch_loss += bg.loss;
      ++batches;
    }
    result.epoch_batch_loss.push_back(batch_loss / static_cast<double>(batches));
    if (options.eval_train_each_epoch || epoch == epochs) {
      result.log.push_back(Summarize(epoch, "train", EvaluateSplit(model, train, loss)));
    }
    if (heldout && !heldout->empty()) {
      result.log.push_back(Summarize(epoch, "heldout", EvaluateSplit(model, *heldout, loss)));
    }
  }
  model.mode = Mode::kInfer;
  return result;
}

// ---------------------------------------------------------------------------
// Gradient check

namespace {

using GTape = Tape<double>;
using GId = GTape::Id;
using Builder = std::function<GId(GTape&, const std::vector<GId>&)>;

constexpr double kGradCheckFloor = 1e-4;
BatchNormTrainResult<double>* const kNoStats = nullptr;
constexpr std::size_t kMaxProbesPerLeaf = 24;

Tensor<double> RandomTensor(const Shape& shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor<double> t(shape);
  for (double& v : t.data()) v = u(rng);
  return t;
}

std::size_t Pick(std::mt19937_64& rng, std::size_t lo, std::size_t hi) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

Segments RandomSegments(std::mt19937_64& rng, std::size_t max_total) {
  Segments seg;
  std::size_t total = 0;
  const std::size_t count = Pick(rng, 1, 2);
  for (std::size_t i = 0; i < count && total < max_total; ++i) {
    const std::size_t len = Pick(rng, 1, std::min<std::size_t>(max_total - total, 4));
    seg.push_back(len);
    total += len;
  }
  return seg;
}

double EvalLoss(const Builder& build, const std::vector<Tensor<double>>& leaves, const Tensor<double>& r) {
  GTape tape;
  std::vector<GId> ids;
  for (const auto& l : leaves) ids.push_back(tape.Constant(l));
  const Tensor<double>& y = tape.value(build(tape, ids));
  double acc = 0;
  for (std::size_t k = 0; k < y.size(); ++k) acc += y[k] * r[k];
  return acc;
}

double CheckGraph(const Builder& build, std::vector<Tensor<double>> leaves, std::mt19937_64& rng, double fault) {
  GTape tape;
  std::vector<GId> ids;
  for (const auto& l : leaves) ids.push_back(tape.Variable(l));
  const GId y = build(tape, ids);
  const Tensor<double> r = RandomTensor(tape.value(y).shape(), rng);
  tape.Backward(ad::Contract(tape, y, r));

  double worst = 0;
  for (std::size_t li = 0; li < leaves.size(); ++li) {
    const Tensor<double> analytic = tape.grad(ids[li]);
    std::vector<std::size_t> probes(leaves[li].size());
    std::iota(probes.begin(), probes.end(), 0);
    if (probes.size() > kMaxProbesPerLeaf) {
      std::shuffle(probes.begin(), probes.end(), rng);
      probes.resize(kMaxProbesPerLeaf);
    }
    for (std::size_t k : probes) {
      const double orig = leaves[li][k];
      leaves[li][k] = orig + kGradCheckStep;
      const double lp = EvalLoss(build, leaves, r);
      leaves[li][k] = orig - kGradCheckStep;
      const double lm = EvalLoss(build, leaves, r);
      leaves[li][k] = orig;
      const double numeric = (lp - lm) / (2 * kGradCheckStep);
      const double a = analytic[k] * fault;
      const double err = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), kGradCheckFloor});
      worst = std::max(worst, err);
    }
  }
  return worst;
}

struct Case {
  Builder build;
  std::vector<Tensor<double>> leaves;
};

using CaseFactory = std::function<Case(std::mt19937_64&, std::size_t)>;

Case ConvCase(std::mt19937_64& rng, std::size_t) {
  const std::size_t cin = Pick(rng, 1, 3), cout = Pick(rng, 1, 3), kt = Pick(rng, 1, 3);
  const std::size_t kf = Pick(rng, 0, 1) ? 3 : 1, s = Pick(rng, 1, 2), F = Pick(rng, 3, 7);
  const Segments seg = RandomSegments(rng, 6);
  const auto geo = Conv2dLayer<double>::Zeros(cin, cout, kt, kf, s);
  Case c;
  c.leaves = {RandomTensor({cin, SegmentsTotal(seg), F}, rng), RandomTensor({cout, cin, kt, kf}, rng),
              RandomTensor({cout}, rng)};
  c.build = [geo, seg](GTape& t, const std::vector<GId>& in) { return ad::Conv2d(t, in[0], in[1], in[2], geo, seg); };
  return c;
}

Case BatchNormCase(std::mt19937_64& rng, std::size_t) {
  const std::size_t C = Pick(rng, 1, 3), N = Pick(rng, 2, 5), F = Pick(rng, 1, 4);
  const auto layer = BatchNormLayer<double>::Identity(C);
  Case c;
  c.leaves = {RandomTensor({C, N, F}, rng, -2, 2), RandomTensor({C}, rng, 0.5, 1.5), RandomTensor({C}, rng)};
  c.build = [layer](GTape& t, const std::vector<GId>& in) {
    return ad::BatchNorm(t, in[0], in[1], in[2], layer, kNoStats);
  };
  return c;
}

Case LstmCase(std::mt19937_64& rng, std::size_t) {
  const std::size_t I = Pick(rng, 1, 4), H = Pick(rng, 1, 4);
  const Segments seg = RandomSegments(rng, 6);
  Case c;
  c.leaves = {RandomTensor({SegmentsTotal(seg), I}, rng), RandomTensor({I, 4 * H}, rng), RandomTensor({H, 4 * H}, rng),
              RandomTensor({4 * H}, rng)};
  c.build = [seg](GTape& t, const std::vector<GId>& in) {
    return ad::Lstm(t, in[0], in[1], in[2], in[3], ActivationFn{Activation::kSigmoid}, ActivationFn{Activation::kTanh},
                    seg);
  };
  return c;
}

Case DenseCase(std::mt19937_64& rng, std::size_t i) {
  static const Activation acts[] = {Activation::kIdentity, Activation::kRelu, Activation::kTanh, Activation::kSigmoid};
  const Activation act = acts[i % 4];
  const std::size_t n = Pick(rng, 1, 4), in = Pick(rng, 1, 5), out = Pick(rng, 1, 5);
  Case c;
  c.leaves = {RandomTensor({n, in}, rng), RandomTensor({in, out}, rng), RandomTensor({out}, rng)};
  c.build = [act](GTape& t, const std::vector<GId>& x) { return ad::Dense(t, x[0], x[1], x[2], act); };
  return c;
}

Case SoftmaxCeCase(std::mt19937_64& rng, std::size_t) {
  const std::size_t n = Pick(rng, 1, 5);
  std::vector<int> labels;
  std::vector<double> weights;
  for (std::size_t r = 0; r < n; ++r) {
    labels.push_back(static_cast<int>(Pick(rng, 0, 1)));
    weights.push_back(std::uniform_real_distribution<double>(0.1, 1.0)(rng));
  }
  Case c;
  c.leaves = {RandomTensor({n, 2}, rng, -3, 3)};
  c.build = [labels, weights](GTape& t, const std::vector<GId>& x) {
    return ad::SoftmaxCrossEntropy(t, x[0], labels, weights);
  };
  return c;
}

Case AttentionCase(std::mt19937_64& rng, std::size_t) {
  const std::size_t d = Pick(rng, 1, 4), da = Pick(rng, 1, 4);
  const Segments seg = RandomSegments(rng, 7);
  Case c;
  c.leaves = {RandomTensor({SegmentsTotal(seg), d}, rng), RandomTensor({d, da}, rng), RandomTensor({da}, rng),
              RandomTensor({da}, rng)};
  c.build = [seg](GTape& t, const std::vector<GId>& x) { return ad::Attention(t, x[0], x[1], x[2], x[3], seg); };
  return c;
}

Case CausalMeanCase(std::mt19937_64& rng, std::size_t) {
  const std::size_t d = Pick(rng, 1, 4);
  const Segments seg = RandomSegments(rng, 7);
  Case c;
  c.leaves = {RandomTensor({SegmentsTotal(seg), d}, rng)};
  c.build = [seg](GTape& t, const std::vector<GId>& x) { return ad::CausalMean(t, x[0], seg); };
  return c;
}

Case GlobalMeanCase(std::mt19937_64& rng, std::size_t) {
  const std::size_t d = Pick(rng, 1, 4);
  const Segments seg = RandomSegments(rng, 7);
  Case c;
  c.leaves = {RandomTensor({SegmentsTotal(seg), d}, rng)};
  c.build = [seg](GTape& t, const std::vector<GId>& x) { return ad::SegmentMean(t, x[0], seg); };
  return c;
}

Case RnnAggCase(std::mt19937_64& rng, std::size_t i) {
  const Activation act = i % 2 ? Activation::kRelu : Activation::kTanh;
  const std::size_t d = Pick(rng, 1, 4);
  const Segments seg = RandomSegments(rng, 6);
  Case c;
  c.leaves = {RandomTensor({SegmentsTotal(seg), d}, rng), RandomTensor({d, d}, rng), RandomTensor({d, d}, rng, -0.8, 0.8)};
  c.build = [act, seg](GTape& t, const std::vector<GId>& x) { return ad::RnnAggregate(t, x[0], x[1], x[2], act, seg); };
  return c;
}

Case PoolFlattenCase(std::mt19937_64& rng, std::size_t i) {
  const std::size_t C = Pick(rng, 1, 3), N = Pick(rng, 1, 4), F = Pick(rng, 1, 5);
  const bool pool = i % 2 == 0;
  Case c;
  c.leaves = {RandomTensor({C, N, F}, rng)};
  c.build = [pool](GTape& t, const std::vector<GId>& x) {
    return ad::FlattenFrames(t, pool ? ad::AvgPoolFreq(t, x[0]) : x[0]);
  };
  return c;
}

Case ResidualCase(std::mt19937_64& rng, std::size_t) {
  const std::size_t cin = Pick(rng, 1, 2), cout = Pick(rng, 1, 3), F = Pick(rng, 3, 6);
  const Segments seg = RandomSegments(rng, 5);
  const std::size_t N = SegmentsTotal(seg);
  const auto c1 = Conv2dLayer<double>::Zeros(cin, cout, 3, 3, 2);
  const auto c2 = Conv2dLayer<double>::Zeros(cout, cout, 3, 3, 1);
  const auto proj = Conv2dLayer<double>::Zeros(cin, cout, 1, 1, 2);
  const auto bn = BatchNormLayer<double>::Identity(cout);
  Case c;
  c.leaves = {RandomTensor({cin, N, F}, rng),       RandomTensor({cout, cin, 3, 3}, rng),
              RandomTensor({cout}, rng),            RandomTensor({cout}, rng, 0.5, 1.5),
              RandomTensor({cout}, rng),            RandomTensor({cout, cout, 3, 3}, rng),
              RandomTensor({cout}, rng),            RandomTensor({cout}, rng, 0.5, 1.5),
              RandomTensor({cout}, rng),            RandomTensor({cout, cin, 1, 1}, rng),
              RandomTensor({cout}, rng)};
  c.build = [=](GTape& t, const std::vector<GId>& x) {
    GId m = ad::Relu(t, ad::BatchNorm(t, ad::Conv2d(t, x[0], x[1], x[2], c1, seg), x[3], x[4], bn, kNoStats));
    m = ad::BatchNorm(t, ad::Conv2d(t, m, x[5], x[6], c2, seg), x[7], x[8], bn, kNoStats);
    const GId skip = ad::Conv2d(t, x[0], x[9], x[10], proj, seg);
    return ad::Relu(t, ad::Add(t, m, skip));
  };
  return c;
}

const std::vector<std::pair<std::string, CaseFactory>>& Factories() {
  static const std::vector<std::pair<std::string, CaseFactory>> f = {
      {"conv2d", ConvCase},
      {"batchnorm", BatchNormCase},
      {"lstm", LstmCase},
      {"dense", DenseCase},
      {"softmax_cross_entropy", SoftmaxCeCase},
      {"pool_flatten", PoolFlattenCase},
      {"residual_block", ResidualCase},
      {"global_mean", GlobalMeanCase},
      {"attention_pool", AttentionCase},
      {"causal_mean", CausalMeanCase},
      {"rnn_aggregate", RnnAggCase},
  };
  return f;
}

}  // namespace

const std::vector<std::string>& GradCheckLayers() {
  static const std::vector<std::string> names = [] {
    std::vector<std::string> n;
    for (const auto& [name, f] : Factories()) n.push_back(name);
    return n;
  }();
  return names;
}

std::vector<GradCheckResult> RunGradCheck(std::uint64_t seed, std::size_t configs, const std::string& inject_fault) {
  if (!inject_fault.empty()) {
    const auto& names = GradCheckLayers();
    if (std::find(names.begin(), names.end(), inject_fault) == names.end()) {
      throw std::invalid_argument("gradcheck: unknown layer '" + inject_fault + "'");
    }
  }
  std::vector<GradCheckResult> out;
  std::size_t index = 0;
  for (const auto& [name, factory] : Factories()) {
    std::mt19937_64 rng(seed * 1000003ULL + index++);
    GradCheckResult r;
    r.layer = name;
    r.configs = configs;
    const double fault = name == inject_fault ? 1.1 : 1.0;
    for (std::size_t i = 0; i < configs; ++i) {
      Case c = factory(rng, i);
      r.max_rel_error = std::max(r.max_rel_error, CheckGraph(c.build, std::move(c.leaves), rng, fault));
    }
    r.pass = configs > 0 && r.max_rel_error <= kGradCheckTolerance;
    out.push_back(r);
  }
  return out;
}

#define DDSTREAM_INSTANTIATE_TRAINING(T)                                                                    \
  template T CrossEntropy(const Tensor<T>&, int, LossRegime);                                               \
  template void AdamStep(AdamState<T>&, std::map<std::string, Tensor<T>*>&,                                 \
                         const std::map<std::string, Tensor<T>>&);                                          \
  template double ClipGlobalNorm(std::map<std::string, Tensor<T>>&, double);                                \
  template std::map<std::string, Tensor<T>*> TrainableParameters(ModelGraph<T>&);                           \
  template BatchGradients<T> ComputeBatchGradients(ModelGraph<T>&, const std::vector<const FeatureSequence*>&, \
                                                   const LossSpec&, bool);                                  \
  template double DatasetLoss(const ModelGraph<T>&, const std::vector<FeatureSequence>&, const LossSpec&);  \
  template TrainResult<T> Train(const ModelConfig&, const TrainOptions&, const std::vector<FeatureSequence>&, \
                                const std::vector<FeatureSequence>*, std::size_t, std::uint64_t);

DDSTREAM_INSTANTIATE_TRAINING(float)
DDSTREAM_INSTANTIATE_TRAINING(double)

}  // namespace ddstream
