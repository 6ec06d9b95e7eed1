#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <utility>

#include "ddstream/layers.hpp"
#include "test_util.hpp"

using namespace ddstream;

namespace {

template <typename T>
Conv2dLayer<T> RandomConv(std::size_t in, std::size_t out, std::size_t kt, std::size_t kf, std::size_t s,
                          std::mt19937_64& rng) {
  auto c = Conv2dLayer<T>::Zeros(in, out, kt, kf, s);
  c.weight = ddtest::RandomTensor<T>(c.weight.shape(), rng);
  c.bias = ddtest::RandomTensor<T>(c.bias.shape(), rng);
  return c;
}

// Direct definition, zero outside the input.
double ConvRef(const Conv2dLayer<double>& c, const Tensor<double>& x, std::size_t o, std::size_t t,
               std::size_t fo) {
  const long F = static_cast<long>(x.dim(2));
  double acc = c.bias[o];
  for (std::size_t i = 0; i < c.in_channels; ++i) {
    for (std::size_t kt = 0; kt < c.k_time; ++kt) {
      const long tt = static_cast<long>(t) - static_cast<long>(c.k_time - 1 - kt);
      if (tt < 0) continue;
      for (std::size_t kf = 0; kf < c.k_freq; ++kf) {
        const long f = static_cast<long>(fo * c.s_freq + kf) - static_cast<long>(c.pad_freq());
        if (f < 0 || f >= F) continue;
        acc += c.w(o, i, kt, kf) * x.at(i, static_cast<std::size_t>(tt), static_cast<std::size_t>(f));
      }
    }
  }
  return acc;
}

template <typename T>
BatchNormLayer<T> RandomBn(std::size_t C, std::mt19937_64& rng) {
  auto bn = BatchNormLayer<T>::Identity(C);
  bn.gamma = ddtest::RandomTensor<T>({C}, rng, 0.5, 1.5);
  bn.beta = ddtest::RandomTensor<T>({C}, rng);
  bn.running_mean = ddtest::RandomTensor<T>({C}, rng);
  bn.running_var = ddtest::RandomTensor<T>({C}, rng, 0.5, 2.0);
  return bn;
}

template <typename T>
LstmLayer<T> RandomLstm(std::size_t in, std::size_t H, std::mt19937_64& rng) {
  auto l = LstmLayer<T>::Zeros(in, H);
  l.W = ddtest::RandomTensor<T>(l.W.shape(), rng, -0.5, 0.5);
  l.U = ddtest::RandomTensor<T>(l.U.shape(), rng, -0.5, 0.5);
  l.b = ddtest::RandomTensor<T>(l.b.shape(), rng, -0.5, 0.5);
  return l;
}

}  // namespace

TEST(Conv2d, OneByOneIdentityKernel) {
  std::mt19937_64 rng(1);
  auto c = Conv2dLayer<float>::Zeros(1, 1, 1, 1, 1);
  c.weight[0] = 1.0f;
  auto x = ddtest::RandomTensor<float>({1, 5, 7}, rng);
  EXPECT_EQ(Conv2dForward(c, x), x);
}

TEST(Conv2d, FirstFrameSeesOnlyLeftPadding) {
  auto c = Conv2dLayer<double>::Zeros(1, 1, 3, 1, 1);
  c.weight[0] = 2.0;  // oldest tap
  c.weight[1] = 3.0;
  c.weight[2] = 5.0;  // current frame
  c.bias[0] = 0.25;
  auto x = Tensor<double>({1, 1, 1}, std::vector<double>{4.0});
  auto y = Conv2dForward(c, x);
  EXPECT_EQ(y[0], 5.0 * 4.0 + 0.25);
}

TEST(Conv2d, MatchesDirectDefinition) {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 10; ++trial) {
    const std::size_t s = 1 + trial % 2, F = 5 + trial;
    auto c = RandomConv<double>(2, 3, 3, 3, s, rng);
    auto x = ddtest::RandomTensor<double>({2, 9, F}, rng);
    auto y = Conv2dForward(c, x);
    ASSERT_EQ(y.shape(), (Shape{3, 9, c.out_freq(F)}));
    for (std::size_t o = 0; o < 3; ++o)
      for (std::size_t t = 0; t < 9; ++t)
        for (std::size_t f = 0; f < y.dim(2); ++f) EXPECT_NEAR(y.at(o, t, f), ConvRef(c, x, o, t, f), 1e-12);
  }
}

TEST(Conv2d, OutputBinsAreCeilOfStride) {
  auto c = Conv2dLayer<float>::Zeros(1, 1, 3, 3, 2);
  EXPECT_EQ(c.out_freq(256), 128u);
  EXPECT_EQ(c.out_freq(5), 3u);
  EXPECT_EQ(c.out_freq(1), 1u);
}

TEST(Conv2d, ZeroingFutureFramesLeavesPastUnchanged) {
  std::mt19937_64 rng(3);
  auto c = RandomConv<float>(1, 2, 3, 3, 2, rng);
  auto x = ddtest::RandomTensor<float>({1, 6, 8}, rng);
  const auto y = Conv2dForward(c, x);
  for (std::size_t cut = 0; cut < 6; ++cut) {
    auto z = x;
    for (std::size_t t = cut + 1; t < 6; ++t)
      for (std::size_t f = 0; f < 8; ++f) z.at(0, t, f) = 0.0f;
    const auto yz = Conv2dForward(c, z);
    for (std::size_t o = 0; o < 2; ++o)
      for (std::size_t t = 0; t <= cut; ++t)
        for (std::size_t f = 0; f < y.dim(2); ++f) EXPECT_EQ(yz.at(o, t, f), y.at(o, t, f));
  }
}

TEST(Conv2d, PackedSegmentsEqualSeparateRuns) {
  std::mt19937_64 rng(4);
  auto c = RandomConv<double>(2, 2, 3, 3, 1, rng);
  auto a = ddtest::RandomTensor<double>({2, 4, 6}, rng);
  auto b = ddtest::RandomTensor<double>({2, 2, 6}, rng);
  Tensor<double> packed({2, 6, 6});
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t f = 0; f < 6; ++f) {
      for (std::size_t t = 0; t < 4; ++t) packed.at(i, t, f) = a.at(i, t, f);
      for (std::size_t t = 0; t < 2; ++t) packed.at(i, 4 + t, f) = b.at(i, t, f);
    }
  auto y = Conv2dForward(c, packed, Segments{4, 2});
  auto ya = Conv2dForward(c, a);
  auto yb = Conv2dForward(c, b);
  for (std::size_t o = 0; o < 2; ++o)
    for (std::size_t f = 0; f < 6; ++f) {
      for (std::size_t t = 0; t < 4; ++t) EXPECT_EQ(y.at(o, t, f), ya.at(o, t, f));
      for (std::size_t t = 0; t < 2; ++t) EXPECT_EQ(y.at(o, 4 + t, f), yb.at(o, t, f));
    }
  EXPECT_THROW(Conv2dForward(c, packed, Segments{4, 3}), DimensionError);
}

TEST(Conv2d, FrameKernelMatchesFullForward) {
  std::mt19937_64 rng(5);
  auto c = RandomConv<float>(2, 3, 3, 3, 2, rng);
  auto x = ddtest::RandomTensor<float>({2, 7, 10}, rng);
  auto y = Conv2dForward(c, x);
  for (std::size_t t = 0; t < 7; ++t) {
    Tensor<float> window({2, 3, 10});
    for (std::size_t i = 0; i < 2; ++i)
      for (std::size_t k = 0; k < 3; ++k) {
        const long tt = static_cast<long>(t) - 2 + static_cast<long>(k);
        if (tt < 0) continue;
        for (std::size_t f = 0; f < 10; ++f) window.at(i, k, f) = x.at(i, static_cast<std::size_t>(tt), f);
      }
    auto frame = Conv2dFrame(c, window);
    for (std::size_t o = 0; o < 3; ++o)
      for (std::size_t f = 0; f < y.dim(2); ++f) EXPECT_EQ(frame.at(o, f), y.at(o, t, f));
  }
}

TEST(Conv2d, ChannelMismatchThrows) {
  auto c = Conv2dLayer<float>::Zeros(2, 1, 3, 3, 1);
  EXPECT_THROW(Conv2dForward(c, Tensor<float>({1, 4, 4})), DimensionError);
}

TEST(BatchNorm, IdentityStatsInference) {
  std::mt19937_64 rng(6);
  auto bn = BatchNormLayer<double>::Identity(2);
  auto x = ddtest::RandomTensor<double>({2, 3, 4}, rng);
  auto y = BatchNormInfer(bn, x);
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(y[i], x[i] / std::sqrt(1.0 + 1e-5), 1e-14);
  EXPECT_LE(ddtest::MaxAbsDiff(y, x), 1e-5 * 2);
}

TEST(BatchNorm, TrainModeConstantInputGivesBeta) {
  auto bn = BatchNormLayer<float>::Identity(2);
  bn.beta[0] = 0.5f;
  bn.beta[1] = -2.0f;
  auto r = BatchNormTrain(bn, Tensor<float>({2, 4, 3}, 7.0f));
  for (std::size_t c = 0; c < 2; ++c)
    for (std::size_t k = 0; k < 12; ++k) EXPECT_EQ(r.output[c * 12 + k], bn.beta[c]);
}

TEST(BatchNorm, TrainModeStandardizesAndUpdatesRunningStats) {
  std::mt19937_64 rng(7);
  auto bn = RandomBn<double>(3, rng);
  bn.gamma.fill(1.0);
  bn.beta.fill(0.0);
  auto x = ddtest::RandomTensor<double>({3, 20, 5}, rng, -4, 9);
  auto r = BatchNormTrain(bn, x);
  const std::size_t n = 100;
  for (std::size_t c = 0; c < 3; ++c) {
    double mean = 0, var = 0, xm = 0, xv = 0;
    for (std::size_t k = 0; k < n; ++k) {
      mean += r.output[c * n + k];
      xm += x[c * n + k];
    }
    mean /= n;
    xm /= n;
    for (std::size_t k = 0; k < n; ++k) {
      var += (r.output[c * n + k] - mean) * (r.output[c * n + k] - mean);
      xv += (x[c * n + k] - xm) * (x[c * n + k] - xm);
    }
    var /= n;
    xv /= n;
    EXPECT_NEAR(mean, 0.0, 1e-3);
    EXPECT_NEAR(var, 1.0, 1e-3);
    EXPECT_NEAR(r.running_mean[c], 0.9 * bn.running_mean[c] + 0.1 * xm, 1e-12);
    EXPECT_NEAR(r.running_var[c], 0.9 * bn.running_var[c] + 0.1 * xv * n / (n - 1), 1e-12);
  }
}

TEST(BatchNorm, InferenceIsPositionwise) {
  std::mt19937_64 rng(8);
  auto bn = RandomBn<float>(2, rng);
  auto x = ddtest::RandomTensor<float>({2, 5, 3}, rng);
  auto y = BatchNormInfer(bn, x);
  // Reversing the time axis reverses the output.
  Tensor<float> xr = x;
  for (std::size_t c = 0; c < 2; ++c)
    for (std::size_t t = 0; t < 5; ++t)
      for (std::size_t f = 0; f < 3; ++f) xr.at(c, t, f) = x.at(c, 4 - t, f);
  auto yr = BatchNormInfer(bn, xr);
  for (std::size_t c = 0; c < 2; ++c)
    for (std::size_t t = 0; t < 5; ++t)
      for (std::size_t f = 0; f < 3; ++f) EXPECT_EQ(yr.at(c, t, f), y.at(c, 4 - t, f));
  EXPECT_EQ(BatchNormForward(bn, x, Mode::kInfer), y);
}

TEST(BatchNorm, ChannelMismatchThrows) {
  auto bn = BatchNormLayer<float>::Identity(3);
  EXPECT_THROW(BatchNormInfer(bn, Tensor<float>({2, 4, 4})), DimensionError);
}

TEST(ResidualBlock, ZeroConvolutionsPassSkipThroughRelu) {
  std::mt19937_64 rng(9);
  ResidualBlock<double> blk{Conv2dLayer<double>::Zeros(2, 2, 3, 3, 1), BatchNormLayer<double>::Identity(2),
                            Conv2dLayer<double>::Zeros(2, 2, 3, 3, 1), BatchNormLayer<double>::Identity(2),
                            std::nullopt};
  auto x = ddtest::RandomTensor<double>({2, 4, 6}, rng);
  EXPECT_EQ(ResidualBlockForward(blk, x), Relu(x));
}

TEST(ResidualBlock, StridedBlockShapeAndCausality) {
  std::mt19937_64 rng(10);
  ResidualBlock<float> blk{RandomConv<float>(2, 4, 3, 3, 2, rng), RandomBn<float>(4, rng),
                           RandomConv<float>(4, 4, 3, 3, 1, rng), RandomBn<float>(4, rng),
                           RandomConv<float>(2, 4, 1, 1, 2, rng)};
  auto x = ddtest::RandomTensor<float>({2, 6, 9}, rng);
  auto y = ResidualBlockForward(blk, x);
  ASSERT_EQ(y.shape(), (Shape{4, 6, 5}));
  for (float v : y.data()) EXPECT_GE(v, 0.0f);
  auto z = x;
  for (std::size_t c = 0; c < 2; ++c)
    for (std::size_t f = 0; f < 9; ++f) z.at(c, 5, f) = 0.0f;
  auto yz = ResidualBlockForward(blk, z);
  for (std::size_t c = 0; c < 4; ++c)
    for (std::size_t t = 0; t < 5; ++t)
      for (std::size_t f = 0; f < 5; ++f) EXPECT_EQ(yz.at(c, t, f), y.at(c, t, f));
}

TEST(Lstm, ZeroWeightsGiveZeroOutput) {
  auto l = LstmLayer<float>::Zeros(3, 4);
  auto r = LstmForward(l, Tensor<float>({5, 3}, 1.5f), LstmState<float>::Zeros(4));
  for (float v : r.output.data()) EXPECT_EQ(v, 0.0f);
}

TEST(Lstm, ChainedCallsEqualOneShot) {
  std::mt19937_64 rng(11);
  auto l = RandomLstm<double>(3, 4, rng);
  auto x = ddtest::RandomTensor<double>({7, 3}, rng);
  auto full = LstmForward(l, x, LstmState<double>::Zeros(4));
  auto first = LstmForward(l, x.rows(0, 3), LstmState<double>::Zeros(4));
  auto second = LstmForward(l, x.rows(3, 7), first.state);
  EXPECT_EQ(second.output, full.output.rows(3, 7));
  EXPECT_EQ(second.state.h, full.state.h);
  EXPECT_EQ(second.state.c, full.state.c);
  auto state = LstmState<double>::Zeros(4);
  for (std::size_t t = 0; t < 7; ++t) {
    state = LstmStep(l, std::as_const(x).row(t), state);
    for (std::size_t j = 0; j < 4; ++j) EXPECT_EQ(state.h[j], full.output.at(t, j));
  }
}

TEST(Lstm, MatchesGateEquations) {
  std::mt19937_64 rng(12);
  auto l = RandomLstm<double>(2, 3, rng);
  auto x = ddtest::RandomTensor<double>({4, 2}, rng);
  auto out = LstmForward(l, x, LstmState<double>::Zeros(3)).output;
  std::vector<double> h(3, 0.0), c(3, 0.0);
  auto sig = [](double v) { return 1.0 / (1.0 + std::exp(-v)); };
  for (std::size_t t = 0; t < 4; ++t) {
    std::vector<double> z(12);
    for (std::size_t col = 0; col < 12; ++col) {
      double v = l.b[col];
      for (std::size_t k = 0; k < 2; ++k) v += x.at(t, k) * l.W.at(k, col);
      for (std::size_t k = 0; k < 3; ++k) v += h[k] * l.U.at(k, col);
      z[col] = v;
    }
    for (std::size_t j = 0; j < 3; ++j) {
      const double f = sig(z[l.col(LstmLayer<double>::kForget, j)]);
      const double i = sig(z[l.col(LstmLayer<double>::kInput, j)]);
      const double o = sig(z[l.col(LstmLayer<double>::kOutput, j)]);
      const double g = std::tanh(z[l.col(LstmLayer<double>::kCell, j)]);
      c[j] = f * c[j] + i * g;
      h[j] = o * std::tanh(c[j]);
    }
    for (std::size_t j = 0; j < 3; ++j) EXPECT_NEAR(out.at(t, j), h[j], 1e-14);
  }
}

TEST(Lstm, SegmentsRestartState) {
  std::mt19937_64 rng(13);
  auto l = RandomLstm<float>(2, 3, rng);
  auto x = ddtest::RandomTensor<float>({5, 2}, rng);
  auto packed = LstmForward(l, x, Segments{2, 3});
  EXPECT_EQ(packed.rows(0, 2), LstmForward(l, x.rows(0, 2), LstmState<float>::Zeros(3)).output);
  EXPECT_EQ(packed.rows(2, 5), LstmForward(l, x.rows(2, 5), LstmState<float>::Zeros(3)).output);
}

TEST(Lstm, ShapeErrors) {
  auto l = LstmLayer<float>::Zeros(3, 4);
  EXPECT_THROW(LstmForward(l, Tensor<float>({2, 5}), LstmState<float>::Zeros(4)), DimensionError);
  EXPECT_THROW(LstmForward(l, Tensor<float>({2, 3}), LstmState<float>::Zeros(2)), DimensionError);
}

TEST(Dense, AffineThenActivation) {
  DenseLayer<double> d{Tensor<double>::Matrix({{1, -1}, {2, 0.5}}), Tensor<double>::Vector({0.5, -3}),
                       Activation::kRelu};
  auto y = DenseForward(d, Tensor<double>::Matrix({{1, 2}}));
  EXPECT_EQ(y.at(0, 0), 5.5);
  EXPECT_EQ(y.at(0, 1), 0.0);
  EXPECT_THROW(DenseForward(d, Tensor<double>({1, 3})), DimensionError);
}

TEST(AvgPool, SingleBinIsIdentity) {
  std::mt19937_64 rng(14);
  auto x = ddtest::RandomTensor<float>({3, 4, 1}, rng);
  EXPECT_EQ(AvgPoolFreq(x), x);
}

TEST(AvgPool, MeansOverFrequency) {
  auto x = Tensor<double>({1, 2, 2}, std::vector<double>{1, 3, 5, 7});
  auto y = AvgPoolFreq(x);
  ASSERT_EQ(y.shape(), (Shape{1, 2, 1}));
  EXPECT_EQ(y[0], 2.0);
  EXPECT_EQ(y[1], 6.0);
}

TEST(Flatten, ChannelMajorFeatureIndex) {
  std::mt19937_64 rng(15);
  auto x = ddtest::RandomTensor<float>({3, 4, 2}, rng);
  auto y = FlattenFrames(x);
  ASSERT_EQ(y.shape(), (Shape{4, 6}));
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t t = 0; t < 4; ++t)
      for (std::size_t f = 0; f < 2; ++f) EXPECT_EQ(y.at(t, c * 2 + f), x.at(c, t, f));
}
