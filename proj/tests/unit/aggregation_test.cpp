#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "ddstream/aggregation.hpp"
#include "test_util.hpp"

using namespace ddstream;

namespace {

template <typename T>
Aggregator<T> Plain(const std::string& name) {
  Aggregator<T> a;
  a.kind = AggregatorKind::Parse(name);
  return a;
}

template <typename T>
AttentionParams<T> RandomAttention(std::size_t d, std::size_t da, std::mt19937_64& rng) {
  return {ddtest::RandomTensor<T>({d, da}, rng), ddtest::RandomTensor<T>({da}, rng),
          ddtest::RandomTensor<T>({da}, rng)};
}

}  // namespace

TEST(AggregatorKind, ParsesEveryName) {
  for (const char* name :
       {"last_frame", "global_mean", "attention", "causal_mean_h", "causal_mean_y", "rnn_tanh", "rnn_relu"}) {
    EXPECT_EQ(AggregatorKind::Parse(name).name(), name);
  }
  EXPECT_THROW(AggregatorKind::Parse("max_pool"), std::invalid_argument);
}

TEST(AggregatorKind, CausalFlags) {
  EXPECT_FALSE(AggregatorKind::Parse("global_mean").causal());
  EXPECT_FALSE(AggregatorKind::Parse("attention").causal());
  for (const char* name : {"last_frame", "causal_mean_h", "causal_mean_y", "rnn_tanh", "rnn_relu"}) {
    EXPECT_TRUE(AggregatorKind::Parse(name).causal()) << name;
  }
  EXPECT_TRUE(AggregatorKind::Parse("causal_mean_y").on_y());
}

TEST(CausalMean, FirstStepFromZero) {
  auto s = CausalMeanStep(CausalMeanState<double>::Zero(2), std::span<const double>(std::vector<double>{3, 5}));
  EXPECT_EQ(s.t, 1u);
  EXPECT_EQ(s.s[0], 3.0);
  EXPECT_EQ(s.s[1], 5.0);
}

TEST(CausalMean, StepFromKnownMean) {
  auto st = CausalMeanState<double>::FromMean(2, Tensor<double>::Vector({1, 1}));
  const std::vector<double> h{4, 7};
  auto s = CausalMeanStep(st, std::span<const double>(h));
  EXPECT_EQ(s.t, 3u);
  EXPECT_EQ(s.s[0], 2.0);
  EXPECT_EQ(s.s[1], 3.0);
}

TEST(CausalMean, MatchesPrefixMean) {
  std::mt19937_64 rng(1);
  const auto H = ddtest::RandomTensor<double>({10, 3}, rng);
  auto st = CausalMeanState<double>::Zero(3);
  auto traj = CausalMeanTrajectory(H);
  for (std::size_t t = 0; t < 10; ++t) {
    st = CausalMeanStep(st, H.row(t));
    for (std::size_t j = 0; j < 3; ++j) {
      double ref = 0;
      for (std::size_t k = 0; k <= t; ++k) ref += H.at(k, j);
      ref /= static_cast<double>(t + 1);
      EXPECT_NEAR(st.s[j], ref, 1e-14);
      EXPECT_EQ(traj.at(t, j), st.s[j]);
    }
  }
  EXPECT_EQ(traj.rows(9, 10).reshape({3}), ColumnMean(H));
}

TEST(CausalMean, DimensionMismatch) {
  const std::vector<double> h{1, 2, 3};
  EXPECT_THROW(CausalMeanStep(CausalMeanState<double>::Zero(2), std::span<const double>(h)), DimensionError);
}

TEST(LstmCounter, CountsFrames) {
  std::mt19937_64 rng(2);
  auto counter = BuildLstmCounter<float>(4);
  auto out = LstmForward(counter, ddtest::RandomTensor<float>({5, 4}, rng, -100, 100),
                         LstmState<float>::Zeros(1)).output;
  for (std::size_t t = 0; t < 5; ++t) EXPECT_EQ(out[t], static_cast<float>(t + 1));
}

TEST(LstmCounter, ExactAtTruncationLimit) {
  std::mt19937_64 rng(3);
  auto counter = BuildLstmCounter<float>(64);
  auto out = LstmForward(counter, ddtest::RandomTensor<float>({300, 64}, rng), LstmState<float>::Zeros(1)).output;
  EXPECT_EQ(out[299], 300.0f);
}

TEST(LstmMean, ConstantInput) {
  auto traj = LstmCausalMeanTrajectory(Tensor<double>({6, 1}, 3.0));
  for (double v : traj.data()) EXPECT_EQ(v, 3.0);
}

TEST(LstmMean, SmallSequence) {
  auto traj = LstmCausalMeanTrajectory(Tensor<double>({3, 1}, std::vector<double>{2, 4, 9}));
  EXPECT_EQ(traj[0], 2.0);
  EXPECT_EQ(traj[1], 3.0);
  EXPECT_EQ(traj[2], 5.0);
}

TEST(LstmMean, MatchesRecurrence) {
  std::mt19937_64 rng(4);
  const auto H = ddtest::RandomTensor<float>({20, 8}, rng);
  auto traj = LstmCausalMeanTrajectory(H);
  auto st = CausalMeanState<float>::Zero(8);
  for (std::size_t t = 0; t < 20; ++t) {
    st = CausalMeanStep(st, H.row(t));
    for (std::size_t j = 0; j < 8; ++j) EXPECT_LE(ddtest::RelErr(traj.at(t, j), st.s[j]), 1e-6);
  }
}

TEST(LstmMean, EmptyInputGivesEmptyOutput) {
  EXPECT_TRUE(LstmCausalMeanTrajectory(Tensor<float>()).empty());
}

TEST(RnnCounter, CountsFrames) {
  std::mt19937_64 rng(5);
  auto counter = BuildRnnCounter<double>(3);
  auto out = counter.run(ddtest::RandomTensor<double>({4, 3}, rng, -50, 50));
  EXPECT_EQ(out, (std::vector<double>{1, 2, 3, 4}));
  EXPECT_TRUE(counter.run(Tensor<double>()).empty());
  auto long_run = BuildRnnCounter<float>(8).run(ddtest::RandomTensor<float>({300, 8}, rng));
  EXPECT_EQ(long_run.back(), 300.0f);
}

TEST(RnnMeanWitness, WeightsAreTimeDependent) {
  auto w = CheckRnnMeanConsistency(1);
  EXPECT_NEAR(w.at2.W, 0.5, 1e-9);
  EXPECT_NEAR(w.at2.U, 0.5, 1e-9);
  EXPECT_NEAR(w.at3.W, 1.0 / 3.0, 1e-9);
  EXPECT_NEAR(w.at3.U, 2.0 / 3.0, 1e-9);
  EXPECT_FALSE(w.consistent);
  EXPECT_GT(w.residual_at3, 1e-6);
}

TEST(AttentionPool, SingleFrameReturnsIt) {
  std::mt19937_64 rng(6);
  auto H = ddtest::RandomTensor<double>({1, 4}, rng);
  auto r = AttentionPool(H, RandomAttention<double>(4, 3, rng));
  EXPECT_EQ(r.weights[0], 1.0);
  for (std::size_t j = 0; j < 4; ++j) EXPECT_NEAR(r.output[j], H.at(0, j), 1e-15);
}

TEST(AttentionPool, IdenticalFramesReturnThatFrame) {
  std::mt19937_64 rng(7);
  auto row = ddtest::RandomTensor<double>({4}, rng);
  Tensor<double> H({5, 4});
  for (std::size_t t = 0; t < 5; ++t)
    for (std::size_t j = 0; j < 4; ++j) H.at(t, j) = row[j];
  auto r = AttentionPool(H, RandomAttention<double>(4, 3, rng));
  for (std::size_t j = 0; j < 4; ++j) EXPECT_NEAR(r.output[j], row[j], 1e-14);
}

TEST(AttentionPool, MatchesReferenceAndIsPermutationInvariant) {
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 10; ++trial) {
    auto H = ddtest::RandomTensor<double>({6, 4}, rng);
    auto p = RandomAttention<double>(4, 5, rng);
    auto r = AttentionPool(H, p);
    std::vector<double> e(6);
    double mx = -1e300;
    for (std::size_t t = 0; t < 6; ++t) {
      double s = 0;
      for (std::size_t a = 0; a < 5; ++a) {
        double u = p.b_a[a];
        for (std::size_t j = 0; j < 4; ++j) u += H.at(t, j) * p.W_a.at(j, a);
        s += p.v[a] * std::tanh(u);
      }
      e[t] = s;
      mx = std::max(mx, s);
    }
    double z = 0;
    for (double& v : e) z += (v = std::exp(v - mx));
    double wsum = 0;
    for (std::size_t t = 0; t < 6; ++t) {
      EXPECT_NEAR(r.weights[t], e[t] / z, 1e-14);
      EXPECT_GE(r.weights[t], 0.0);
      wsum += r.weights[t];
    }
    EXPECT_NEAR(wsum, 1.0, 1e-14);
    for (std::size_t j = 0; j < 4; ++j) {
      double ref = 0;
      for (std::size_t t = 0; t < 6; ++t) ref += e[t] / z * H.at(t, j);
      EXPECT_NEAR(r.output[j], ref, 1e-14);
    }
    Tensor<double> Hr = H;
    for (std::size_t t = 0; t < 6; ++t)
      for (std::size_t j = 0; j < 4; ++j) Hr.at(t, j) = H.at(5 - t, j);
    auto rr = AttentionPool(Hr, p);
    EXPECT_LE(ddtest::MaxAbsDiff(rr.output, r.output), 1e-14);
  }
}

TEST(RnnAggregate, IdentityCases) {
  const std::vector<double> h{0.5, -2.0}, s{3.0, 4.0};
  Tensor<double> eye({2, 2}), zero({2, 2});
  eye.at(0, 0) = eye.at(1, 1) = 1;
  auto y = RnnAggregateStep(std::span<const double>(s), std::span<const double>(h),
                            RnnAggParams<double>{eye, zero, Activation::kIdentity});
  EXPECT_EQ(y[0], 0.5);
  EXPECT_EQ(y[1], -2.0);
  y = RnnAggregateStep(std::span<const double>(s), std::span<const double>(h),
                       RnnAggParams<double>{zero, eye, Activation::kIdentity});
  EXPECT_EQ(y[0], 3.0);
  EXPECT_EQ(y[1], 4.0);
}

TEST(RnnAggregate, SequenceMatchesUnrolledRecurrence) {
  std::mt19937_64 rng(9);
  for (Activation act : {Activation::kTanh, Activation::kRelu}) {
    Aggregator<double> agg;
    agg.kind = AggregatorKind::Parse(act == Activation::kTanh ? "rnn_tanh" : "rnn_relu");
    agg.rnn = RnnAggParams<double>{ddtest::RandomTensor<double>({3, 3}, rng),
                                   ddtest::RandomTensor<double>({3, 3}, rng), act};
    auto H = ddtest::RandomTensor<double>({5, 3}, rng);
    auto r = AggregateSequence(agg, H);
    ASSERT_TRUE(r.per_frame.has_value());
    std::vector<double> s(3, 0.0);
    for (std::size_t t = 0; t < 5; ++t) {
      std::vector<double> n(3);
      for (std::size_t j = 0; j < 3; ++j) {
        double z = 0;
        for (std::size_t k = 0; k < 3; ++k) z += H.at(t, k) * agg.rnn->W.at(k, j) + s[k] * agg.rnn->U.at(k, j);
        n[j] = act == Activation::kTanh ? std::tanh(z) : std::max(0.0, z);
      }
      s = n;
      for (std::size_t j = 0; j < 3; ++j) EXPECT_NEAR(r.per_frame->at(t, j), s[j], 1e-14);
    }
  }
}

TEST(AggregateSequence, CausalMeanEndpointEqualsGlobalMean) {
  std::mt19937_64 rng(10);
  for (int trial = 0; trial < 20; ++trial) {
    auto H = ddtest::RandomTensor<float>({1 + trial * 7u, 5}, rng);
    auto causal = AggregateSequence(Plain<float>("causal_mean_h"), H);
    auto global = AggregateSequence(Plain<float>("global_mean"), H);
    EXPECT_EQ(causal.utterance, global.utterance);
    EXPECT_FALSE(global.per_frame.has_value());
  }
}

TEST(AggregateSequence, SingleFrameHeadsAgree) {
  std::mt19937_64 rng(11);
  auto H = ddtest::RandomTensor<double>({1, 4}, rng);
  auto last = AggregateSequence(Plain<double>("last_frame"), H);
  auto mean = AggregateSequence(Plain<double>("global_mean"), H);
  EXPECT_EQ(last.utterance, mean.utterance);
}

TEST(AggregateSequence, AttentionDiffersFromCausalMean) {
  std::mt19937_64 rng(12);
  auto H = ddtest::RandomTensor<double>({6, 4}, rng);
  auto agg = Plain<double>("attention");
  agg.attention = RandomAttention<double>(4, 4, rng);
  auto att = AggregateSequence(agg, H);
  auto causal = AggregateSequence(Plain<double>("causal_mean_h"), H);
  EXPECT_GT(ddtest::MaxAbsDiff(att.utterance, causal.utterance), 1e-6);
}

TEST(AggregateSequence, CausalHeadsArePrefixConsistent) {
  std::mt19937_64 rng(13);
  auto H = ddtest::RandomTensor<double>({8, 3}, rng);
  std::vector<Aggregator<double>> heads{Plain<double>("last_frame"), Plain<double>("causal_mean_h")};
  auto rnn = Plain<double>("rnn_tanh");
  rnn.rnn = RnnAggParams<double>{ddtest::RandomTensor<double>({3, 3}, rng), ddtest::RandomTensor<double>({3, 3}, rng),
                                 Activation::kTanh};
  heads.push_back(rnn);
  for (const auto& agg : heads) {
    auto full = AggregateSequence(agg, H);
    for (std::size_t t = 1; t <= 8; ++t) {
      auto prefix = AggregateSequence(agg, H.rows(0, t));
      EXPECT_EQ(prefix.per_frame->rows(0, t), full.per_frame->rows(0, t)) << agg.kind.name();
      EXPECT_EQ(prefix.utterance, full.per_frame->rows(t - 1, t).reshape({3}));
    }
  }
}

TEST(AggregateSequence, EmptyInputThrows) {
  EXPECT_THROW(AggregateSequence(Plain<float>("global_mean"), Tensor<float>()), std::exception);
}
