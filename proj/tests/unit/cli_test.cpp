#include <gtest/gtest.h>

#include <cstdlib>
#include <sstream>

#include "ddstream/data.hpp"
#include "ddstream/model.hpp"
#include "ddstream/training.hpp"
#include "ddstream_cli/cli.hpp"
#include "test_util.hpp"

using namespace ddstream;

namespace {

struct Run {
  int code;
  std::string out;
  std::string err;
};

Run Cli(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = cli::RunCli(args, out, err);
  return {code, out.str(), err.str()};
}

std::vector<std::string> Lines(const std::string& s) {
  std::vector<std::string> lines;
  std::istringstream in(s);
  for (std::string l; std::getline(in, l);) lines.push_back(l);
  return lines;
}

const char* kTinyConfig =
    "topology = lstm_baseline\n"
    "lstm_layers = 1\n"
    "lstm_units = 4\n"
    "dense_layers = 1\n"
    "dense_units = 4\n"
    "batch_size = 2\n";

class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    ASSERT_EQ(Cli({"synth", "--out", (dir / "corpus").string(), "--n", "3", "--seed", "1", "--min-frames", "5",
                   "--max-frames", "12"})
                  .code,
              0);
    manifest = (dir / "corpus" / "manifest.tsv").string();
    ddtest::WriteBytes(dir / "tiny.cfg", kTinyConfig);
  }

  std::string TrainTiny(const std::string& name, const std::string& head = "causal_mean_h", int epochs = 1) {
    ddtest::WriteBytes(dir / (name + ".cfg.in"), std::string(kTinyConfig) + "aggregation = " + head + "\n");
    const auto model = (dir / (name + ".rlsw")).string();
    auto r = Cli({"train", "--manifest", manifest, "--config", (dir / (name + ".cfg.in")).string(), "--epochs",
                  std::to_string(epochs), "--seed", "3", "--out", model});
    EXPECT_EQ(r.code, 0) << r.err;
    return model;
  }

  ddtest::TempDir dir;
  std::string manifest;
};

}  // namespace

TEST(Cli, UsageErrors) {
  EXPECT_EQ(Cli({}).code, 2);
  EXPECT_EQ(Cli({"synth"}).code, 2);
  EXPECT_EQ(Cli({"synth", "--out", "x", "--bogus"}).code, 2);
  EXPECT_EQ(Cli({"frobnicate"}).code, 2);
  EXPECT_EQ(Cli({"eval", "--model", "m", "--manifest", "x", "--prefix"}).code, 2);
  EXPECT_EQ(Cli({"--help"}).code, 0);
}

TEST(Cli, PrecisionFromEnvironment) {
  setenv("DDSTREAM_PRECISION", "f16", 1);
  EXPECT_EQ(Cli({"bench", "--frames", "10"}).code, 2);
  unsetenv("DDSTREAM_PRECISION");
}

TEST_F(CliTest, SynthSmallestCorpus) {
  auto r = Cli({"synth", "--out", (dir / "one").string(), "--n", "1"});
  ASSERT_EQ(r.code, 0);
  std::size_t feats = 0;
  for (const auto& e : std::filesystem::directory_iterator(dir / "one")) feats += e.path().extension() == ".feat";
  EXPECT_EQ(feats, 2u);
  EXPECT_NE(r.err.find("# command = synth"), std::string::npos);
}

TEST_F(CliTest, SynthIsReproducible) {
  for (const char* d : {"a", "b"}) {
    ASSERT_EQ(Cli({"synth", "--out", (dir / d).string(), "--n", "50", "--seed", "7"}).code, 0);
  }
  std::size_t files = 0;
  for (const auto& e : std::filesystem::directory_iterator(dir / "a")) {
    ++files;
    EXPECT_EQ(ddtest::ReadBytes(e.path()), ddtest::ReadBytes(dir / "b" / e.path().filename()));
  }
  EXPECT_EQ(files, 101u);
}

TEST_F(CliTest, ExtractWritesFeatures) {
  WriteWav(dir / "a.wav", std::vector<float>(16000, 0.0f));
  auto r = Cli({"extract", "--wav", (dir / "a.wav").string(), "--out", (dir / "a.feat").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(ReadFeat(dir / "a.feat").frames.shape(), (Shape{33, 256}));
  EXPECT_EQ(Cli({"extract", "--wav", (dir / "none.wav").string(), "--out", (dir / "b.feat").string()}).code, 1);
}

TEST_F(CliTest, TrainZeroEpochsSavesInitialModel) {
  const auto model = TrainTiny("zero", "causal_mean_h", 0);
  auto loaded = LoadModel<float>(model);
  auto cfg = ModelConfig::FromKeyValues(KeyValueFile::Parse(kTinyConfig));
  EXPECT_EQ(loaded.lstms[0].W, BuildModel<float>(cfg, 3).lstms[0].W);
  EXPECT_EQ(ddtest::ReadBytes(model + ".metrics.csv"), "epoch,split,loss,auc,eer,acc\n");
}

TEST_F(CliTest, TrainIsReproducible) {
  const auto a = TrainTiny("a");
  const auto b = TrainTiny("b");
  EXPECT_EQ(ddtest::ReadBytes(a), ddtest::ReadBytes(b));
  EXPECT_EQ(ddtest::ReadBytes(a + ".metrics.csv"), ddtest::ReadBytes(b + ".metrics.csv"));
}

TEST_F(CliTest, TrainErrors) {
  auto r = Cli({"train", "--manifest", (dir / "nope.tsv").string(), "--out", (dir / "m.rlsw").string()});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("error:"), std::string::npos);
  ddtest::WriteBytes(dir / "bad.cfg", "lstm_unitz = 4\n");
  r = Cli({"train", "--manifest", manifest, "--config", (dir / "bad.cfg").string(), "--out",
           (dir / "m.rlsw").string()});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("lstm_unitz"), std::string::npos);
}

TEST_F(CliTest, EvalReportAndFullFractionRow) {
  const auto model = TrainTiny("m");
  auto plain = Cli({"eval", "--model", model, "--manifest", manifest});
  ASSERT_EQ(plain.code, 0) << plain.err;
  auto lines = Lines(plain.out);
  ASSERT_EQ(lines.size(), 4u);
  EXPECT_EQ(lines[0], "point,metric,value");
  EXPECT_EQ(lines[1].rfind("all,auc,", 0), 0u);
  auto early = Cli({"eval", "--model", model, "--manifest", manifest, "--early", "fraction", "--points", "0.5",
                    "1.0", "--threads", "2"});
  ASSERT_EQ(early.code, 0) << early.err;
  auto el = Lines(early.out);
  ASSERT_EQ(el.size(), 6u);
  EXPECT_EQ(el[5].substr(el[5].rfind(',')), lines[2].substr(lines[2].rfind(',')));
  EXPECT_EQ(el[5].rfind("fraction=1,eer,", 0), 0u);
  EXPECT_EQ(Cli({"eval", "--model", (dir / "missing.rlsw").string(), "--manifest", manifest}).code, 1);
}

TEST_F(CliTest, EvalAttentionNeedsPrefix) {
  const auto model = TrainTiny("att", "attention");
  auto r = Cli({"eval", "--model", model, "--manifest", manifest, "--early", "fraction"});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("--prefix"), std::string::npos);
  r = Cli({"eval", "--model", model, "--manifest", manifest, "--early", "seconds", "--points", "0.2", "--prefix"});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(Lines(r.out).back().rfind("seconds=0.2,eer,", 0), 0u);
  r = Cli({"stream", "--model", model, "--feat", (dir / "corpus" / "utt_00000.feat").string()});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("cannot emit a score per frame"), std::string::npos);
}

TEST_F(CliTest, StreamMatchesOffline) {
  const auto model = TrainTiny("s");
  const auto feat = (dir / "corpus" / "utt_00000.feat").string();
  auto r = Cli({"stream", "--model", model, "--feat", feat});
  ASSERT_EQ(r.code, 0) << r.err;
  auto lines = Lines(r.out);
  auto m = LoadModel<float>(model);
  auto seq = ReadFeat(feat);
  ASSERT_EQ(lines.size(), seq.length());
  auto offline = ForwardOffline(m, seq.frames);
  for (std::size_t t = 0; t < lines.size(); ++t) {
    const auto comma = lines[t].find(',');
    EXPECT_EQ(std::stoul(lines[t].substr(0, comma)), t + 1);
    EXPECT_NEAR(std::stod(lines[t].substr(comma + 1)), offline.per_frame->at(t, 1), 1e-5);
  }
  EXPECT_NEAR(std::stod(lines.back().substr(lines.back().find(',') + 1)), offline.utterance[1], 1e-5);
}

TEST_F(CliTest, BenchReportsBothPaths) {
  const auto model = TrainTiny("b");
  auto r = Cli({"bench", "--model", model, "--frames", "12", "--repeats", "30", "--warmup", "5"});
  ASSERT_EQ(r.code, 0) << r.err;
  auto lines = Lines(r.out);
  ASSERT_EQ(lines.size(), 1u + 6 + 2);
  EXPECT_EQ(lines[1].rfind("frame10,cached_step_us,", 0), 0u);
  EXPECT_EQ(lines[7].rfind("ratio12/10,cached,", 0), 0u);
  const double diff = std::stod(lines[3].substr(lines[3].rfind(',') + 1));
  EXPECT_LE(diff, 1e-5);
  EXPECT_EQ(Cli({"bench", "--model", model, "--repeats", "10"}).code, 2);
  EXPECT_EQ(Cli({"bench", "--model", model, "--frames", "301"}).code, 2);
}

TEST(Cli, GradcheckPassesAndIsDeterministic) {
  auto a = Cli({"gradcheck", "--seed", "2", "--configs", "2"});
  auto b = Cli({"gradcheck", "--seed", "2", "--configs", "2"});
  EXPECT_EQ(a.code, 0);
  EXPECT_EQ(a.out, b.out);
  EXPECT_EQ(Lines(a.out).size(), 1 + GradCheckLayers().size());
  auto faulty = Cli({"gradcheck", "--seed", "2", "--configs", "1", "--inject-fault", "lstm"});
  EXPECT_EQ(faulty.code, 1);
  EXPECT_NE(faulty.out.find("\nlstm,FAIL,"), std::string::npos);
}
