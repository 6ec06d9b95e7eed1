#include <gtest/gtest.h>

#include <random>

#include "ddstream/model.hpp"
#include "test_util.hpp"

using namespace ddstream;

namespace {

std::size_t ConvParams(std::size_t in, std::size_t out, std::size_t k) { return in * out * k * k + out; }
std::size_t LstmParams(std::size_t in, std::size_t h) { return 4 * h * (in + h + 1); }

std::size_t ExpectedParameters(const ModelConfig& c) {
  std::size_t n = 0, in = c.feature_bins;
  if (c.topology == Topology::kResLstm) {
    n += ConvParams(1, c.stem_channels, 3) + 2 * c.stem_channels;
    std::size_t ch = c.stem_channels, bins = (c.feature_bins + 1) / 2;
    for (std::size_t out : c.block_channels) {
      n += ConvParams(ch, out, 3) + 2 * out + ConvParams(out, out, 3) + 2 * out + ConvParams(ch, out, 1);
      ch = out;
      bins = (bins + 1) / 2;
    }
    in = c.pool_then_flatten ? ch : ch * bins;
  }
  for (std::size_t l = 0; l < c.lstm_layers; ++l) {
    n += LstmParams(l == 0 ? in : c.lstm_units, c.lstm_units);
  }
  std::size_t d = c.lstm_units;
  for (std::size_t l = 0; l < c.dense_layers; ++l) {
    n += d * c.dense_units + c.dense_units;
    d = c.dense_units;
  }
  return n + d * 2 + 2;
}

// Offline forward composed from the layer kernels directly.
template <typename T>
Tensor<T> ComposedUtteranceScore(const ModelGraph<T>& m, const Tensor<T>& x) {
  Tensor<T> h = x.reshape({1, x.dim(0), x.dim(1)});
  h = Relu(BatchNormInfer(*m.stem_bn, Conv2dForward(*m.stem_conv, h)));
  for (const auto& blk : m.blocks) {
    Tensor<T> main = Relu(BatchNormInfer(blk.bn1, Conv2dForward(blk.conv1, h)));
    main = BatchNormInfer(blk.bn2, Conv2dForward(blk.conv2, main));
    h = Relu(Add(main, Conv2dForward(*blk.projection, h)));
  }
  h = FlattenFrames(AvgPoolFreq(h));
  for (const auto& l : m.lstms) h = LstmForward(l, h, LstmState<T>::Zeros(l.hidden_size)).output;
  Tensor<T> e = ColumnMean(h).reshape({1, h.dim(1)});
  for (const auto& d : m.classifier) e = DenseForward(d, e);
  return Softmax(e).reshape({2});
}

}  // namespace

TEST(ModelConfig, DefaultGeometry) {
  ModelConfig c;
  EXPECT_EQ(c.conv_output_bins(), 2u);
  EXPECT_EQ(c.lstm_input_size(), 32u);
  c.pool_then_flatten = false;
  EXPECT_EQ(c.lstm_input_size(), 64u);
  c.topology = Topology::kLstmBaseline;
  EXPECT_EQ(c.lstm_input_size(), 256u);
}

TEST(ModelConfig, TextRoundTrip) {
  auto c = ddtest::SmallConfig("rnn_relu");
  c.pool_then_flatten = false;
  auto back = ModelConfig::FromKeyValues(KeyValueFile::Parse(c.ToText()));
  EXPECT_EQ(back.ToText(), c.ToText());
}

TEST(ModelConfig, RejectsBadValues) {
  EXPECT_THROW(ModelConfig::FromKeyValues(KeyValueFile::Parse("lstm_units = 0\n")), std::invalid_argument);
  EXPECT_THROW(ModelConfig::FromKeyValues(KeyValueFile::Parse("aggregation = sum\n")), std::invalid_argument);
  EXPECT_THROW(ModelConfig::FromKeyValues(KeyValueFile::Parse("topology = gru\n")), std::invalid_argument);
  EXPECT_THROW(KeyValueFile::Parse("a = 1\na = 2\n"), std::invalid_argument);
  EXPECT_THROW(KeyValueFile::Parse("no equals sign\n"), std::invalid_argument);
}

TEST(KeyValueFile, CommentsAndWhitespace) {
  auto kv = KeyValueFile::Parse("# header\n  lstm_units = 12   # trailing\n\naggregation=attention\n");
  EXPECT_EQ(kv.get("lstm_units"), "12");
  EXPECT_EQ(kv.get("aggregation"), "attention");
  EXPECT_FALSE(kv.get("missing").has_value());
}

TEST(BuildModel, ParameterCountMatchesLayerArithmetic) {
  for (auto cfg : {ModelConfig{}, ddtest::SmallConfig()}) {
    EXPECT_EQ(ParameterCount(BuildModel<float>(cfg, 0)), ExpectedParameters(cfg));
  }
  ModelConfig base;
  base.topology = Topology::kLstmBaseline;
  EXPECT_EQ(ParameterCount(BuildModel<float>(base, 0)), ExpectedParameters(base));
  ModelConfig flat;
  flat.pool_then_flatten = false;
  EXPECT_EQ(ParameterCount(BuildModel<float>(flat, 0)), ExpectedParameters(flat));
}

TEST(BuildModel, ConvLayerCount) {
  auto m = BuildModel<float>(ModelConfig{}, 0);
  std::size_t convs = 1;
  for (const auto& b : m.blocks) {
    convs += 2;
    EXPECT_TRUE(b.projection.has_value());
  }
  EXPECT_EQ(convs, 13u);
  EXPECT_EQ(m.lstms.size(), 3u);
  EXPECT_EQ(m.classifier.size(), 3u);
}

TEST(BuildModel, SeedDeterminism) {
  auto a = BuildModel<float>(ModelConfig{}, 42);
  auto b = BuildModel<float>(ModelConfig{}, 42);
  auto c = BuildModel<float>(ModelConfig{}, 43);
  EXPECT_EQ(a.lstms[0].W, b.lstms[0].W);
  EXPECT_EQ(a.blocks[3].conv2.weight, b.blocks[3].conv2.weight);
  EXPECT_NE(a.lstms[0].W, c.lstms[0].W);
}

TEST(BuildModel, HeadParametersFollowAggregation) {
  EXPECT_TRUE(BuildModel<float>(ddtest::SmallConfig("attention"), 0).aggregator.attention.has_value());
  EXPECT_TRUE(BuildModel<float>(ddtest::SmallConfig("rnn_tanh"), 0).aggregator.rnn.has_value());
  auto cm = BuildModel<float>(ddtest::SmallConfig("causal_mean_h"), 0);
  EXPECT_FALSE(cm.aggregator.attention || cm.aggregator.rnn);
  EXPECT_TRUE(cm.streamable());
  EXPECT_FALSE(BuildModel<float>(ddtest::SmallConfig("attention"), 0).streamable());
}

TEST(ForwardOffline, MatchesComposedLayers) {
  std::mt19937_64 rng(1);
  auto m = BuildModel<double>(ddtest::SmallConfig("global_mean"), 1);
  ddtest::RandomizeBatchNorm(m, rng);
  auto x = ddtest::RandomTensor<double>({9, 16}, rng);
  EXPECT_EQ(ForwardOffline(m, x).utterance, ComposedUtteranceScore(m, x));
}

TEST(ForwardOffline, PosteriorsAreDistributions) {
  std::mt19937_64 rng(2);
  for (const char* agg : {"last_frame", "global_mean", "attention", "causal_mean_h", "causal_mean_y", "rnn_tanh"}) {
    auto m = BuildModel<float>(ddtest::SmallConfig(agg), 2);
    auto x = ddtest::RandomTensor<float>({7, 16}, rng);
    auto s = ForwardOffline(m, x);
    EXPECT_NEAR(s.utterance[0] + s.utterance[1], 1.0f, 1e-6) << agg;
    EXPECT_EQ(s.per_frame.has_value(), m.streamable()) << agg;
    if (s.per_frame) {
      EXPECT_EQ(s.per_frame->rows(6, 7).reshape({2}), s.utterance);
    }
    EXPECT_EQ(ForwardOffline(m, x).utterance, s.utterance);
  }
}

TEST(ForwardOffline, SingleFrameHeadsAgree) {
  std::mt19937_64 rng(3);
  auto x = ddtest::RandomTensor<float>({1, 16}, rng);
  const auto ref = ForwardOffline(BuildModel<float>(ddtest::SmallConfig("global_mean"), 3), x).utterance;
  for (const char* agg : {"last_frame", "causal_mean_h", "causal_mean_y"}) {
    EXPECT_EQ(ForwardOffline(BuildModel<float>(ddtest::SmallConfig(agg), 3), x).utterance, ref) << agg;
  }
}

TEST(ForwardOffline, InputErrors) {
  auto m = BuildModel<float>(ddtest::SmallConfig(), 0);
  EXPECT_THROW(ForwardOffline(m, Tensor<float>({3, 15})), DimensionError);
  EXPECT_THROW(ForwardOffline(m, Tensor<float>({301, 16})), StateError);
  EXPECT_THROW(ForwardOffline(m, Tensor<float>()), StateError);
}

TEST(LstmBaseline, RunsWithoutConvStack) {
  ModelConfig c;
  c.topology = Topology::kLstmBaseline;
  c.feature_bins = 10;
  c.lstm_units = 4;
  auto m = BuildModel<double>(c, 0);
  EXPECT_FALSE(m.stem_conv.has_value());
  EXPECT_TRUE(m.blocks.empty());
  std::mt19937_64 rng(4);
  auto s = ForwardOffline(m, ddtest::RandomTensor<double>({5, 10}, rng));
  EXPECT_NEAR(s.utterance[0] + s.utterance[1], 1.0, 1e-12);
}

class WeightsIo : public ::testing::Test {
 protected:
  ddtest::TempDir dir;
};

TEST_F(WeightsIo, RoundTripIsBitExact) {
  std::mt19937_64 rng(5);
  auto m = BuildModel<float>(ddtest::SmallConfig("attention"), 5);
  ddtest::RandomizeBatchNorm(m, rng);
  SaveWeights(m, dir / "w.bin");
  auto back = LoadWeights<float>(dir / "w.bin", m.config);
  VisitTensors(back, [&, it = 0](const std::string& name, const Tensor<float>& t, bool) mutable {
    bool found = false;
    VisitTensors(m, [&](const std::string& n2, const Tensor<float>& t2, bool) {
      if (n2 == name) {
        found = true;
        EXPECT_EQ(t.values(), t2.values()) << name;
      }
    });
    EXPECT_TRUE(found) << name;
    ++it;
  });
  SaveWeights(back, dir / "w2.bin");
  EXPECT_EQ(ddtest::ReadBytes(dir / "w.bin"), ddtest::ReadBytes(dir / "w2.bin"));

  auto m64 = BuildModel<double>(ddtest::SmallConfig("rnn_relu"), 6);
  SaveModel(m64, dir / "m.bin");
  auto back64 = LoadModel<double>(dir / "m.bin");
  EXPECT_EQ(back64.config.ToText(), m64.config.ToText());
  EXPECT_EQ(back64.aggregator.rnn->W, m64.aggregator.rnn->W);
}

TEST_F(WeightsIo, CorruptionKinds) {
  auto m = BuildModel<float>(ddtest::SmallConfig(), 7);
  SaveWeights(m, dir / "w.bin");
  const std::string good = ddtest::ReadBytes(dir / "w.bin");
  auto kind_of = [&](const std::string& bytes, const ModelConfig& cfg) {
    ddtest::WriteBytes(dir / "c.bin", bytes);
    try {
      LoadWeights<float>(dir / "c.bin", cfg);
    } catch (const FormatError& e) {
      return e.kind();
    }
    ADD_FAILURE() << "no error";
    return FormatErrorKind::kIo;
  };
  auto bad_magic = good;
  bad_magic[0] = 'X';
  EXPECT_EQ(kind_of(bad_magic, m.config), FormatErrorKind::kBadMagic);
  auto bad_version = good;
  bad_version[4] = 9;
  EXPECT_EQ(kind_of(bad_version, m.config), FormatErrorKind::kBadVersion);
  EXPECT_EQ(kind_of(good.substr(0, good.size() - 3), m.config), FormatErrorKind::kTruncated);
  EXPECT_EQ(kind_of(good.substr(0, 6), m.config), FormatErrorKind::kTruncated);

  auto renamed = good;
  const auto pos = renamed.find("lstm0.U");
  ASSERT_NE(pos, std::string::npos);
  renamed[pos + 6] = 'Q';
  ddtest::WriteBytes(dir / "c.bin", renamed);
  try {
    LoadWeights<float>(dir / "c.bin", m.config);
    ADD_FAILURE() << "no error";
  } catch (const FormatError& e) {
    EXPECT_EQ(e.kind(), FormatErrorKind::kMissingParameter);
    EXPECT_NE(std::string(e.what()).find("lstm0.U"), std::string::npos);
  }

  auto other = m.config;
  other.lstm_units = 7;
  EXPECT_EQ(kind_of(good, other), FormatErrorKind::kShapeMismatch);
  EXPECT_THROW(LoadWeights<float>(dir / "absent.bin", m.config), FormatError);
}
