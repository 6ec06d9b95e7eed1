#pragma once

#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "ddstream/data.hpp"
#include "ddstream/model.hpp"

namespace ddstream {

inline constexpr double kFrameSeconds = 0.030;

// P(score_pos > score_neg) + P(tie)/2.
double ComputeAuc(std::span<const double> scores, std::span<const int> labels);
// Sweeps every distinct score as an accept threshold (score >= threshold)
// and interpolates linearly between the two operating points where FNR - FPR
// changes sign.
double ComputeEer(std::span<const double> scores, std::span<const int> labels);
// score >= threshold counts as positive.
double ComputeAcc(std::span<const double> scores, std::span<const int> labels, double threshold = 0.5);

struct ScoredUtterance {
  std::vector<double> per_frame;  // device-directed posterior per frame; empty for non-causal heads
  double utterance = 0;           // final decision score
  int label = 0;
  double frame_duration = kFrameSeconds;
};

enum class EarlyMode { kSeconds, kFraction };
EarlyMode ParseEarlyMode(const std::string& name);
const char* ToString(EarlyMode mode);
std::vector<double> DefaultEarlyPoints(EarlyMode mode);

// 1-based frame index used for an evaluation point on an utterance of T
// frames: min(ceil(s / frame_duration), T) or max(1, round(f * T)).
std::size_t EarlyFrameIndex(EarlyMode mode, double point, std::size_t frames,
                            double frame_duration = kFrameSeconds);

struct EarlyPointResult {
  double point = 0;
  double eer = 0;
};

std::vector<EarlyPointResult> EarlyDecisionEval(const std::vector<ScoredUtterance>& utts, EarlyMode mode,
                                                const std::vector<double>& points);

// Scores each prefix by a full forward over the truncated input, which is
// what a non-causal head needs. `threads` splits the cohort.
template <typename T>
std::vector<EarlyPointResult> AttentionPrefixEval(const ModelGraph<T>& model,
                                                  const std::vector<FeatureSequence>& utts, EarlyMode mode,
                                                  const std::vector<double>& points, std::size_t threads = 1);

// Utterance-level posterior and, for causal heads, the per-frame trajectory.
template <typename T>
std::vector<ScoredUtterance> ScoreDataset(const ModelGraph<T>& model, const std::vector<FeatureSequence>& utts,
                                          std::size_t threads = 1);

struct ReportRow {
  std::string point;
  std::string metric;
  double value = 0;
};
void WriteReportCsv(std::ostream& out, const std::vector<ReportRow>& rows);

}  // namespace ddstream
