#include "ddstream_cli/cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <random>
#include <set>
#include <sstream>

#include "ddstream/data.hpp"
#include "ddstream/metrics.hpp"
#include "ddstream/model.hpp"
#include "ddstream/streaming.hpp"
#include "ddstream/training.hpp"

namespace ddstream::cli {

namespace {

// Failures that are the operator's fault but only detectable after parsing.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

enum class Precision { kF32, kF64 };

Precision PrecisionFromEnv() {
  const char* v = std::getenv("DDSTREAM_PRECISION");
  if (!v || !*v) return Precision::kF32;
  const std::string s(v);
  if (s == "f32") return Precision::kF32;
  if (s == "f64") return Precision::kF64;
  throw UsageError("DDSTREAM_PRECISION must be f32 or f64, got '" + s + "'");
}

const char* ToString(Precision p) { return p == Precision::kF32 ? "f32" : "f64"; }

class Resolved {
 public:
  Resolved(std::ostream& err, const std::string& command) : err_(err) { err_ << "# command = " << command << '\n'; }
  template <typename V>
  Resolved& add(const std::string& key, const V& value) {
    err_ << "# " << key << " = " << value << '\n';
    return *this;
  }
  Resolved& block(const std::string& text) {
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) err_ << "# " << line << '\n';
    return *this;
  }

 private:
  std::ostream& err_;
};

std::string Join(const std::vector<double>& v) {
  std::ostringstream os;
  for (std::size_t i = 0; i < v.size(); ++i) os << (i ? "," : "") << v[i];
  return os.str();
}

std::string FormatPoint(double v) {
  std::ostringstream os;
  os << v;
  return os.str();
}

WarningSink SinkTo(std::ostream& err) {
  return [&err](const std::string& m) { err << "warning: " << m << '\n'; };
}

// --- synth -----------------------------------------------------------------

struct SynthArgs {
  std::string out;
  std::size_t n = 100;
  std::uint64_t seed = 0;
  double gap = 1.0;
  std::size_t min_frames = 40;
  std::size_t max_frames = kMaxFrames;
};

int RunSynth(const SynthArgs& a, std::ostream& out, std::ostream& err) {
  Resolved(err, "synth").add("out", a.out).add("n", a.n).add("seed", a.seed).add("gap", a.gap)
      .add("min_frames", a.min_frames).add("max_frames", a.max_frames);
  SynthOptions o;
  o.n_per_class = a.n;
  o.seed = a.seed;
  o.class_gap = a.gap;
  o.min_frames = a.min_frames;
  o.max_frames = a.max_frames;
  const Manifest m = WriteSynthDataset(a.out, o);
  out << "wrote " << m.entries.size() << " utterances to " << a.out << '\n';
  return kExitOk;
}

// --- extract ---------------------------------------------------------------

struct ExtractArgs {
  std::string wav;
  std::string out;
};

int RunExtract(const ExtractArgs& a, std::ostream& out, std::ostream& err) {
  Resolved(err, "extract").add("wav", a.wav).add("out", a.out);
  const std::vector<float> pcm = ReadWav(a.wav);
  const Tensor<float> feats = ExtractLogStft(pcm);
  WriteFeat(a.out, feats);
  out << "wrote " << feats.dim(0) << " frames x " << feats.dim(1) << " bins to " << a.out << '\n';
  return kExitOk;
}

// --- train -----------------------------------------------------------------

struct TrainArgs {
  std::string manifest;
  std::string config;
  std::string heldout;
  std::string out;
  std::string metrics;
  std::size_t epochs = 10;
  std::uint64_t seed = 0;
};

KeyValueFile LoadTrainConfig(const std::string& path) {
  if (path.empty()) return KeyValueFile{};
  KeyValueFile kv = KeyValueFile::Load(path);
  std::set<std::string> known(ModelConfig::Keys().begin(), ModelConfig::Keys().end());
  known.insert(TrainOptions::Keys().begin(), TrainOptions::Keys().end());
  for (const auto& [key, value] : kv.values()) {
    if (!known.count(key)) throw FormatError(FormatErrorKind::kBadValue, path + ": unknown key '" + key + "'");
  }
  return kv;
}

template <typename T>
int RunTrain(const TrainArgs& a, Precision precision, std::ostream& out, std::ostream& err) {
  const KeyValueFile kv = LoadTrainConfig(a.config);
  const ModelConfig config = ModelConfig::FromKeyValues(kv);
  config.Validate();
  const TrainOptions options = TrainOptions::FromKeyValues(kv);
  const std::string metrics_path = a.metrics.empty() ? a.out + ".metrics.csv" : a.metrics;
  Resolved(err, "train")
      .add("manifest", a.manifest)
      .add("heldout", a.heldout.empty() ? "(none)" : a.heldout)
      .add("epochs", a.epochs)
      .add("seed", a.seed)
      .add("out", a.out)
      .add("metrics", metrics_path)
      .add("precision", ToString(precision))
      .block(config.ToText())
      .block(options.ToText());

  const auto train = LoadDataset(Manifest::Load(a.manifest), SinkTo(err));
  std::vector<FeatureSequence> heldout;
  if (!a.heldout.empty()) heldout = LoadDataset(Manifest::Load(a.heldout), SinkTo(err));
  const TrainResult<T> result =
      Train<T>(config, options, train, heldout.empty() ? nullptr : &heldout, a.epochs, a.seed);
  SaveModel(result.model, a.out);
  std::ofstream csv(metrics_path);
  if (!csv) throw FormatError(FormatErrorKind::kIo, "cannot write " + metrics_path);
  WriteMetricsCsv(csv, result.log);
  WriteMetricsCsv(out, result.log);
  return kExitOk;
}

// --- eval ------------------------------------------------------------------

struct EvalArgs {
  std::string model;
  std::string manifest;
  std::string early;
  std::vector<double> points;
  bool prefix = false;
  std::size_t threads = 1;
};

template <typename T>
int RunEval(const EvalArgs& a, Precision precision, std::ostream& out, std::ostream& err) {
  const ModelGraph<T> model = LoadModel<T>(a.model);
  std::optional<EarlyMode> mode;
  std::vector<double> points;
  if (!a.early.empty()) {
    mode = ParseEarlyMode(a.early);
    points = a.points.empty() ? DefaultEarlyPoints(*mode) : a.points;
  }
  Resolved(err, "eval")
      .add("model", a.model)
      .add("manifest", a.manifest)
      .add("early", a.early.empty() ? "(none)" : a.early)
      .add("points", Join(points))
      .add("prefix", a.prefix ? "true" : "false")
      .add("threads", a.threads)
      .add("precision", ToString(precision))
      .block(model.config.ToText());

  const auto& kind = model.config.aggregation;
  if (mode && !kind.causal()) {
    if (!a.prefix) {
      throw std::runtime_error("the " + kind.name() +
                               " head has no causal per-frame score; early evaluation needs --prefix");
    }
    if (kind.variant != AggregationVariant::kAttention) {
      throw std::runtime_error("--prefix recomputation is supported for attention heads only");
    }
  }
  const auto data = LoadDataset(Manifest::Load(a.manifest), SinkTo(err));
  const auto scored = ScoreDataset(model, data, a.threads);
  std::vector<double> scores;
  std::vector<int> labels;
  for (const auto& u : scored) {
    scores.push_back(u.utterance);
    labels.push_back(u.label);
  }
  std::vector<ReportRow> rows;
  rows.push_back({"all", "auc", ComputeAuc(scores, labels)});
  rows.push_back({"all", "eer", ComputeEer(scores, labels)});
  rows.push_back({"all", "acc", ComputeAcc(scores, labels)});
  if (mode) {
    const auto results = kind.causal() ? EarlyDecisionEval(scored, *mode, points)
                                       : AttentionPrefixEval(model, data, *mode, points, a.threads);
    for (const auto& r : results) {
      rows.push_back({std::string(ToString(*mode)) + "=" + FormatPoint(r.point), "eer", r.eer});
    }
  }
  WriteReportCsv(out, rows);
  return kExitOk;
}

// --- stream ----------------------------------------------------------------

struct StreamArgs {
  std::string model;
  std::string feat;
};

template <typename T>
void RequireStreamable(const ModelGraph<T>& model) {
  if (!model.streamable()) {
    throw std::runtime_error("the " + model.config.aggregation.name() +
                             " head pools over the whole utterance, so it cannot emit a score per frame; "
                             "use a causal head (last_frame, causal_mean, causal_mean_y, rnn_tanh, rnn_relu)");
  }
}

template <typename T>
int RunStream(const StreamArgs& a, Precision precision, std::ostream& out, std::ostream& err) {
  const ModelGraph<T> model = LoadModel<T>(a.model);
  Resolved(err, "stream").add("model", a.model).add("feat", a.feat).add("precision", ToString(precision))
      .block(model.config.ToText());
  RequireStreamable(model);
  const FeatureSequence seq = ReadFeat(a.feat, SinkTo(err));
  const Tensor<T> x = seq.frames.template cast<T>();
  const std::size_t n = std::min(x.dim(0), model.config.truncation_frames);
  StreamSession<T> session(model);
  out << std::setprecision(std::is_same_v<T, float> ? 9 : 17);
  for (std::size_t t = 0; t < n; ++t) {
    const Tensor<T> p = session.Step(x.row(t));
    out << t + 1 << ',' << p[1] << '\n';
  }
  return kExitOk;
}

// --- bench -----------------------------------------------------------------

struct BenchArgs {
  std::string model;
  std::size_t frames = 300;
  std::size_t repeats = 30;
  std::size_t warmup = 5;
  std::uint64_t seed = 0;
};

template <typename F>
double MedianMicros(std::size_t warmup, std::size_t repeats, F&& run) {
  for (std::size_t i = 0; i < warmup; ++i) run();
  std::vector<double> us;
  us.reserve(repeats);
  for (std::size_t i = 0; i < repeats; ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    run();
    const auto t1 = std::chrono::steady_clock::now();
    us.push_back(std::chrono::duration<double, std::micro>(t1 - t0).count());
  }
  std::nth_element(us.begin(), us.begin() + us.size() / 2, us.end());
  return us[us.size() / 2];
}

template <typename T>
int RunBench(const BenchArgs& a, Precision precision, std::ostream& out, std::ostream& err) {
  if (a.repeats < 30) throw UsageError("--repeats must be at least 30");
  if (a.warmup < 5) throw UsageError("--warmup must be at least 5");
  ModelConfig default_config;
  default_config.aggregation = AggregatorKind::Parse("causal_mean");
  const ModelGraph<T> model = a.model.empty() ? BuildModel<T>(default_config, a.seed) : LoadModel<T>(a.model);
  if (a.frames == 0 || a.frames > model.config.truncation_frames) {
    throw UsageError("--frames must be in [1, " + std::to_string(model.config.truncation_frames) + "]");
  }
  std::vector<std::size_t> points;
  for (std::size_t p : {std::size_t{10}, std::size_t{100}, a.frames})
    if (p <= a.frames && std::find(points.begin(), points.end(), p) == points.end()) points.push_back(p);
  Resolved(err, "bench")
      .add("model", a.model.empty() ? "(random, seed " + std::to_string(a.seed) + ")" : a.model)
      .add("frames", a.frames)
      .add("repeats", a.repeats)
      .add("warmup", a.warmup)
      .add("seed", a.seed)
      .add("precision", ToString(precision))
      .block(model.config.ToText());
  RequireStreamable(model);

  std::mt19937_64 rng(a.seed + 1);
  std::normal_distribution<double> normal(0.0, 1.0);
  Tensor<T> x({a.frames, model.config.feature_bins});
  for (T& v : x.data()) v = static_cast<T>(normal(rng));

  std::vector<ReportRow> rows;
  StreamSession<T> session(model);
  std::vector<double> cached_us, naive_us;
  std::size_t consumed = 0;
  for (std::size_t p : points) {
    while (consumed + 1 < p) session.Step(x.row(consumed++));
    const StreamSession<T> snapshot = session;
    Tensor<T> streamed;
    StreamSession<T> work = snapshot;
    const double cached = MedianMicros(a.warmup, a.repeats, [&] {
      work = snapshot;
      streamed = work.Step(x.row(p - 1));
    });
    // Copy-assignment cost is measured on its own and removed.
    const double copy_only = MedianMicros(a.warmup, a.repeats, [&] { work = snapshot; });
    Tensor<T> naive_scores;
    const Tensor<T> prefix = x.rows(0, p);
    const double naive = MedianMicros(a.warmup, a.repeats, [&] { naive_scores = ForwardOffline(model, prefix).utterance; });
    double diff = 0;
    for (std::size_t k = 0; k < 2; ++k) diff = std::max(diff, std::abs(static_cast<double>(streamed[k] - naive_scores[k])));
    const double step = std::max(cached - copy_only, 0.0);
    cached_us.push_back(step);
    naive_us.push_back(naive);
    const std::string point = "frame" + std::to_string(p);
    rows.push_back({point, "cached_step_us", step});
    rows.push_back({point, "naive_recompute_us", naive});
    rows.push_back({point, "max_abs_diff", diff});
  }
  if (points.size() > 1) {
    const std::string span = std::to_string(points.back()) + "/" + std::to_string(points.front());
    rows.push_back({"ratio" + span, "cached", cached_us.back() / cached_us.front()});
    rows.push_back({"ratio" + span, "naive", naive_us.back() / naive_us.front()});
  }
  WriteReportCsv(out, rows);
  return kExitOk;
}

// --- gradcheck -------------------------------------------------------------

struct GradArgs {
  std::uint64_t seed = 0;
  std::size_t configs = 10;
  std::string inject_fault;
};

int RunGrad(const GradArgs& a, std::ostream& out, std::ostream& err) {
  Resolved(err, "gradcheck").add("seed", a.seed).add("configs", a.configs).add("precision", "f64")
      .add("tolerance", kGradCheckTolerance).add("step", kGradCheckStep);
  const auto results = RunGradCheck(a.seed, a.configs, a.inject_fault);
  bool all = true;
  out << "layer,status,max_rel_error,configs\n";
  for (const auto& r : results) {
    out << r.layer << ',' << (r.pass ? "PASS" : "FAIL") << ',' << r.max_rel_error << ',' << r.configs << '\n';
    all = all && r.pass;
  }
  return all ? kExitOk : kExitRuntime;
}

}  // namespace

int RunCli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Streaming ResLSTM device-directedness classifier"};
  app.name("ddstream");
  app.require_subcommand(1, 1);

  SynthArgs synth;
  auto* c_synth = app.add_subcommand("synth", "Generate the synthetic two-class feature corpus");
  c_synth->add_option("--out", synth.out, "Output directory")->required();
  c_synth->add_option("--n", synth.n, "Utterances per class")->check(CLI::PositiveNumber);
  c_synth->add_option("--seed", synth.seed, "Random seed");
  c_synth->add_option("--gap", synth.gap, "Class separation scale")->check(CLI::NonNegativeNumber);
  c_synth->add_option("--min-frames", synth.min_frames, "Shortest utterance")->check(CLI::PositiveNumber);
  c_synth->add_option("--max-frames", synth.max_frames, "Longest utterance")->check(CLI::Range(1, 300));

  ExtractArgs extract;
  auto* c_extract = app.add_subcommand("extract", "Log-STFT features from a 16 kHz 16-bit WAV file");
  c_extract->add_option("--wav", extract.wav, "Input WAV")->required();
  c_extract->add_option("--out", extract.out, "Output feature file")->required();

  TrainArgs train;
  auto* c_train = app.add_subcommand("train", "Train a model");
  c_train->add_option("--manifest", train.manifest, "Training manifest")->required();
  c_train->add_option("--config", train.config, "Model and training config (key = value)");
  c_train->add_option("--heldout", train.heldout, "Held-out manifest evaluated every epoch");
  c_train->add_option("--epochs", train.epochs, "Epochs");
  c_train->add_option("--seed", train.seed, "Random seed");
  c_train->add_option("--out", train.out, "Output weights (.rlsw); the config goes to <out>.cfg")->required();
  c_train->add_option("--metrics", train.metrics, "Metrics CSV (default <out>.metrics.csv)");

  EvalArgs eval;
  auto* c_eval = app.add_subcommand("eval", "Evaluate a model; CSV report on stdout");
  c_eval->add_option("--model", eval.model, "Weights file")->required();
  c_eval->add_option("--manifest", eval.manifest, "Evaluation manifest")->required();
  auto* early = c_eval->add_option("--early", eval.early, "Early-decision protocol")
                    ->check(CLI::IsMember({"seconds", "fraction"}));
  c_eval->add_option("--points", eval.points, "Evaluation points (default 1..5 s or 0.5..1.0)")->needs(early);
  c_eval->add_flag("--prefix", eval.prefix, "Recompute the score on each prefix (attention heads)")->needs(early);
  c_eval->add_option("--threads", eval.threads, "Worker threads")->check(CLI::Range(1, 256));

  StreamArgs stream;
  auto* c_stream = app.add_subcommand("stream", "Stream a feature file frame by frame");
  c_stream->add_option("--model", stream.model, "Weights file")->required();
  c_stream->add_option("--feat", stream.feat, "Feature file")->required();

  BenchArgs bench;
  auto* c_bench = app.add_subcommand("bench", "Per-frame latency: cached streaming vs full recompute");
  c_bench->add_option("--model", bench.model, "Weights file (default: random causal_mean model)");
  c_bench->add_option("--frames", bench.frames, "Frames to stream");
  c_bench->add_option("--repeats", bench.repeats, "Timed repeats per point (>= 30)");
  c_bench->add_option("--warmup", bench.warmup, "Untimed warmup runs (>= 5)");
  c_bench->add_option("--seed", bench.seed, "Seed for the input and the random model");

  GradArgs grad;
  auto* c_grad = app.add_subcommand("gradcheck", "Finite-difference gradient check of every layer type");
  c_grad->add_option("--seed", grad.seed, "Random seed");
  c_grad->add_option("--configs", grad.configs, "Random configurations per layer type")->check(CLI::PositiveNumber);
  c_grad->add_option("--inject-fault", grad.inject_fault, "Scale one layer's analytic gradient")->group("");

  std::vector<const char*> argv{"ddstream"};
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) {
      out << app.help();
      return kExitOk;
    }
    err << "usage error: " << e.what() << "\nRun 'ddstream --help' for usage.\n";
    return kExitUsage;
  }

  try {
    const Precision precision = PrecisionFromEnv();
    auto dispatch = [&](auto run) { return precision == Precision::kF32 ? run(float{}) : run(double{}); };
    if (c_synth->parsed()) return RunSynth(synth, out, err);
    if (c_extract->parsed()) return RunExtract(extract, out, err);
    if (c_grad->parsed()) return RunGrad(grad, out, err);
    if (c_train->parsed()) {
      return dispatch([&](auto t) { return RunTrain<decltype(t)>(train, precision, out, err); });
    }
    if (c_eval->parsed()) {
      return dispatch([&](auto t) { return RunEval<decltype(t)>(eval, precision, out, err); });
    }
    if (c_stream->parsed()) {
      return dispatch([&](auto t) { return RunStream<decltype(t)>(stream, precision, out, err); });
    }
    if (c_bench->parsed()) {
      return dispatch([&](auto t) { return RunBench<decltype(t)>(bench, precision, out, err); });
    }
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
  return kExitUsage;
}

}  // namespace ddstream::cli
