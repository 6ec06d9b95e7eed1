#include "ddstream/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <numeric>
#include <thread>

namespace ddstream {

namespace {

struct ClassCounts {
  std::size_t pos = 0;
  std::size_t neg = 0;
};

ClassCounts CheckBinary(std::span<const double> scores, std::span<const int> labels, const char* what) {
  if (scores.size() != labels.size()) throw DimensionError(std::string(what) + ": scores and labels differ in length");
  ClassCounts c;
  for (int l : labels) {
    if (l == 1) ++c.pos;
    else if (l == 0) ++c.neg;
    else throw std::invalid_argument(std::string(what) + ": labels must be 0 or 1");
  }
  return c;
}

ClassCounts RequireBothClasses(std::span<const double> scores, std::span<const int> labels, const char* what) {
  const ClassCounts c = CheckBinary(scores, labels, what);
  if (c.pos == 0 || c.neg == 0) throw std::invalid_argument(std::string(what) + ": both classes must be present");
  return c;
}

std::vector<std::size_t> SortedOrder(std::span<const double> scores) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  return order;
}

template <typename F>
void ParallelFor(std::size_t n, std::size_t threads, F&& body) {
  threads = std::max<std::size_t>(1, std::min(threads, n));
  if (threads == 1) {
    for (std::size_t i = 0; i < n; ++i) body(i);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(threads);
  for (std::size_t w = 0; w < threads; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (std::size_t i = w; i < n; i += threads) body(i);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

}  // namespace

double ComputeAuc(std::span<const double> scores, std::span<const int> labels) {
  const ClassCounts c = RequireBothClasses(scores, labels, "auc");
  const auto order = SortedOrder(scores);
  // Midranks (1-based) so ties contribute one half.
  double pos_rank_sum = 0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) ++j;
    const double midrank = 0.5 * static_cast<double>(i + 1 + j);
    for (std::size_t k = i; k < j; ++k)
      if (labels[order[k]] == 1) pos_rank_sum += midrank;
    i = j;
  }
  const double np = static_cast<double>(c.pos), nn = static_cast<double>(c.neg);
  return (pos_rank_sum - np * (np + 1) / 2) / (np * nn);
}

double ComputeEer(std::span<const double> scores, std::span<const int> labels) {
  const ClassCounts c = RequireBothClasses(scores, labels, "eer");
  const auto order = SortedOrder(scores);
  // Operating point j accepts everything from the j-th distinct score up.
  // Start with the threshold below every score: FPR = 1, FNR = 0.
  double fpr = 1.0, fnr = 0.0;
  std::size_t neg_below = 0, pos_below = 0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) {
      (labels[order[j]] == 1 ? pos_below : neg_below)++;
      ++j;
    }
    const double next_fpr = 1.0 - static_cast<double>(neg_below) / static_cast<double>(c.neg);
    const double next_fnr = static_cast<double>(pos_below) / static_cast<double>(c.pos);
    const double d0 = fnr - fpr, d1 = next_fnr - next_fpr;
    if (d1 >= 0) {
      if (d1 == 0) return next_fpr;
      const double a = -d0 / (d1 - d0);
      return fpr + a * (next_fpr - fpr);
    }
    fpr = next_fpr;
    fnr = next_fnr;
    i = j;
  }
  return fpr;  // unreachable: the final point has FNR = 1, FPR = 0
}

double ComputeAcc(std::span<const double> scores, std::span<const int> labels, double threshold) {
  CheckBinary(scores, labels, "acc");
  if (scores.empty()) throw std::invalid_argument("acc: no scores");
  std::size_t correct = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const int predicted = scores[i] >= threshold ? 1 : 0;
    if (predicted == labels[i]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(scores.size());
}

EarlyMode ParseEarlyMode(const std::string& name) {
  if (name == "seconds") return EarlyMode::kSeconds;
  if (name == "fraction") return EarlyMode::kFraction;
  throw std::invalid_argument("unknown early-decision mode '" + name + "' (seconds|fraction)");
}

const char* ToString(EarlyMode mode) { return mode == EarlyMode::kSeconds ? "seconds" : "fraction"; }

std::vector<double> DefaultEarlyPoints(EarlyMode mode) {
  if (mode == EarlyMode::kSeconds) return {1, 2, 3, 4, 5};
  return {0.5, 0.6, 0.7, 0.8, 1.0};
}

std::size_t EarlyFrameIndex(EarlyMode mode, double point, std::size_t frames, double frame_duration) {
  if (frames == 0) throw std::invalid_argument("early decision: empty utterance");
  if (!(point > 0)) throw std::invalid_argument("early decision: evaluation point must be positive");
  double idx;
  if (mode == EarlyMode::kSeconds) {
    // The epsilon keeps exact multiples of the frame length on their own frame.
    idx = std::ceil(point / frame_duration - 1e-9);
  } else {
    // Same for f * T landing a hair below a .5 (0.7 * 45 = 31.4999...).
    idx = std::round(point * static_cast<double>(frames) + 1e-9);
  }
  idx = std::clamp(idx, 1.0, static_cast<double>(frames));
  return static_cast<std::size_t>(idx);
}

std::vector<EarlyPointResult> EarlyDecisionEval(const std::vector<ScoredUtterance>& utts, EarlyMode mode,
                                                const std::vector<double>& points) {
  if (utts.empty()) throw std::invalid_argument("early decision: empty cohort");
  std::vector<int> labels;
  for (const auto& u : utts) {
    if (u.per_frame.empty()) throw StateError("early decision: needs causal per-frame scores");
    labels.push_back(u.label);
  }
  std::vector<EarlyPointResult> out;
  for (double p : points) {
    std::vector<double> scores;
    for (const auto& u : utts) {
      scores.push_back(u.per_frame[EarlyFrameIndex(mode, p, u.per_frame.size(), u.frame_duration) - 1]);
    }
    out.push_back({p, ComputeEer(scores, labels)});
  }
  return out;
}

template <typename T>
std::vector<EarlyPointResult> AttentionPrefixEval(const ModelGraph<T>& model,
                                                  const std::vector<FeatureSequence>& utts, EarlyMode mode,
                                                  const std::vector<double>& points, std::size_t threads) {
  if (model.config.aggregation.variant != AggregationVariant::kAttention) {
    throw StateError("prefix evaluation needs an attention-head model, got " + model.config.aggregation.name());
  }
  if (utts.empty()) throw std::invalid_argument("prefix evaluation: empty cohort");
  const std::size_t limit = model.config.truncation_frames;
  std::vector<std::vector<double>> scores(utts.size(), std::vector<double>(points.size()));
  ParallelFor(utts.size(), threads, [&](std::size_t i) {
    const std::size_t n = std::min(utts[i].length(), limit);
    const Tensor<T> x = utts[i].frames.rows(0, n).template cast<T>();
    for (std::size_t p = 0; p < points.size(); ++p) {
      const std::size_t idx = EarlyFrameIndex(mode, points[p], n);
      scores[i][p] = static_cast<double>(ForwardOffline(model, x.rows(0, idx)).utterance[1]);
    }
  });
  std::vector<int> labels;
  for (const auto& u : utts) labels.push_back(u.label);
  std::vector<EarlyPointResult> out;
  for (std::size_t p = 0; p < points.size(); ++p) {
    std::vector<double> col;
    for (const auto& s : scores) col.push_back(s[p]);
    out.push_back({points[p], ComputeEer(col, labels)});
  }
  return out;
}

template <typename T>
std::vector<ScoredUtterance> ScoreDataset(const ModelGraph<T>& model, const std::vector<FeatureSequence>& utts,
                                          std::size_t threads) {
  const std::size_t limit = model.config.truncation_frames;
  std::vector<ScoredUtterance> out(utts.size());
  ParallelFor(utts.size(), threads, [&](std::size_t i) {
    const std::size_t n = std::min(utts[i].length(), limit);
    const OfflineScores<T> r = ForwardOffline(model, utts[i].frames.rows(0, n).template cast<T>());
    ScoredUtterance& u = out[i];
    u.label = utts[i].label;
    u.utterance = static_cast<double>(r.utterance[1]);
    if (r.per_frame) {
      for (std::size_t t = 0; t < n; ++t) u.per_frame.push_back(static_cast<double>(r.per_frame->at(t, 1)));
    }
  });
  return out;
}

void WriteReportCsv(std::ostream& out, const std::vector<ReportRow>& rows) {
  out << "point,metric,value\n";
  const auto old = out.precision(9);
  for (const auto& r : rows) out << r.point << ',' << r.metric << ',' << r.value << '\n';
  out.precision(old);
}

#define DDSTREAM_INSTANTIATE_METRICS(T)                                                                     \
  template std::vector<EarlyPointResult> AttentionPrefixEval(const ModelGraph<T>&,                          \
                                                             const std::vector<FeatureSequence>&, EarlyMode, \
                                                             const std::vector<double>&, std::size_t);      \
  template std::vector<ScoredUtterance> ScoreDataset(const ModelGraph<T>&, const std::vector<FeatureSequence>&, \
                                                     std::size_t);

DDSTREAM_INSTANTIATE_METRICS(float)
DDSTREAM_INSTANTIATE_METRICS(double)

}  // namespace ddstream
