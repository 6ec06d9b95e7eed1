#include "ddstream/autodiff.hpp"

#include <cmath>
#include <memory>

namespace ddstream {

template <typename T>
typename Tape<T>::Id Tape<T>::Constant(Tensor<T> value) {
  nodes_.push_back(Node{std::move(value), {}, {}, {}, false});
  return nodes_.size() - 1;
}

template <typename T>
typename Tape<T>::Id Tape<T>::Parameter(Tensor<T> value, const std::string& name) {
  if (params_.count(name)) throw std::invalid_argument("tape: duplicate parameter '" + name + "'");
  nodes_.push_back(Node{std::move(value), {}, {}, {}, true});
  params_[name] = nodes_.size() - 1;
  return nodes_.size() - 1;
}

template <typename T>
typename Tape<T>::Id Tape<T>::Variable(Tensor<T> value) {
  nodes_.push_back(Node{std::move(value), {}, {}, {}, true});
  return nodes_.size() - 1;
}

template <typename T>
typename Tape<T>::Id Tape<T>::Record(Tensor<T> value, std::vector<Id> inputs, BackwardFn backward) {
  bool needs = false;
  for (Id in : inputs) {
    if (in >= nodes_.size()) throw std::out_of_range("tape: input id out of range");
    needs = needs || nodes_[in].requires_grad;
  }
  Node node{std::move(value), {}, std::move(inputs), {}, needs};
  if (needs) node.backward = std::move(backward);
  nodes_.push_back(std::move(node));
  return nodes_.size() - 1;
}

template <typename T>
Tensor<T> Tape<T>::grad(Id id) const {
  const Node& n = nodes_.at(id);
  if (n.grad.empty()) return Tensor<T>(n.value.shape());
  return n.grad;
}

template <typename T>
Tensor<T>* Tape<T>::grad_target(Id id) {
  Node& n = nodes_.at(id);
  if (!n.requires_grad) return nullptr;
  if (n.grad.empty()) n.grad = Tensor<T>(n.value.shape());
  return &n.grad;
}

template <typename T>
void Tape<T>::Backward(Id loss) {
  if (nodes_.empty() || loss >= nodes_.size()) throw StateError("backward: nothing recorded for this loss");
  if (nodes_[loss].value.size() != 1) throw DimensionError("backward: loss must be a scalar");
  for (auto& n : nodes_) n.grad = Tensor<T>();
  if (!nodes_[loss].requires_grad) return;
  nodes_[loss].grad = Tensor<T>(nodes_[loss].value.shape(), T{1});
  for (Id id = loss + 1; id-- > 0;) {
    Node& n = nodes_[id];
    if (!n.backward || n.grad.empty()) continue;
    n.backward(*this, id);
  }
  backward_done_ = true;
}

template <typename T>
std::map<std::string, Tensor<T>> Tape<T>::ParameterGrads() const {
  std::map<std::string, Tensor<T>> out;
  for (const auto& [name, id] : params_) out.emplace(name, grad(id));
  return out;
}

namespace ad {

namespace {

template <typename T>
const Tensor<T>& OutGrad(Tape<T>& tape, Id<T> self) {
  return *tape.grad_target(self);
}

// Eight interleaved partial sums so the loop vectorizes without reassociation flags.
template <typename T>
T Dot(const T* a, const T* b, std::size_t n) {
  T part[8] = {};
  std::size_t k = 0;
  for (; k + 8 <= n; k += 8)
    for (std::size_t j = 0; j < 8; ++j) part[j] += a[k + j] * b[k + j];
  T acc{0};
  for (; k < n; ++k) acc += a[k] * b[k];
  for (T p : part) acc += p;
  return acc;
}

template <typename T>
Conv2dLayer<T> Geometry(const Conv2dLayer<T>& layer) {
  Conv2dLayer<T> g = layer;
  g.weight = Tensor<T>();
  g.bias = Tensor<T>();
  return g;
}

}  // namespace

template <typename T>
Id<T> Conv2d(Tape<T>& tape, Id<T> x, Id<T> weight, Id<T> bias, const Conv2dLayer<T>& geometry,
             const Segments& segments) {
  Conv2dLayer<T> layer = Geometry(geometry);
  layer.weight = tape.value(weight);
  layer.bias = tape.value(bias);
  if (layer.weight.shape() != Shape{layer.out_channels, layer.in_channels, layer.k_time, layer.k_freq}) {
    throw DimensionError("conv2d: weight shape " + ShapeString(layer.weight.shape()));
  }
  Tensor<T> y = Conv2dForward(layer, tape.value(x), segments);
  return tape.Record(std::move(y), {x, weight, bias},
                     [geo = Geometry(geometry), segments, x, weight, bias](Tape<T>& tp, Id<T> self) {
    const Tensor<T>& gy = OutGrad(tp, self);
    const Tensor<T>& in = tp.value(x);
    const Tensor<T>& W = tp.value(weight);
    Tensor<T>* gx = tp.grad_target(x);
    Tensor<T>* gw = tp.grad_target(weight);
    Tensor<T>* gb = tp.grad_target(bias);
    const std::size_t frames = in.dim(1), F = in.dim(2), Fo = gy.dim(2);
    const std::size_t kt_max = geo.k_time - 1, KF = geo.k_freq;
    const Tensor<T> taps = gw ? ConvTaps(geo, in) : Tensor<T>();
    Tensor<T> gtaps = gx ? Tensor<T>({geo.in_channels, KF, frames, Fo}) : Tensor<T>();
    for (std::size_t o = 0; o < geo.out_channels; ++o) {
      const T* g_o = gy.data().data() + o * frames * Fo;
      if (gb) {
        T acc{0};
        for (std::size_t k = 0; k < frames * Fo; ++k) acc += g_o[k];
        (*gb)[o] += acc;
      }
      for (std::size_t i = 0; i < geo.in_channels; ++i) {
        for (std::size_t kt = 0; kt < geo.k_time; ++kt) {
          const std::size_t lag = kt_max - kt;
          for (std::size_t kf = 0; kf < KF; ++kf) {
            const std::size_t widx = ((o * geo.in_channels + i) * geo.k_time + kt) * KF + kf;
            const std::size_t plane = (i * KF + kf) * frames * Fo;
            T wacc{0};
            std::size_t seg_start = 0;
            for (std::size_t len : segments) {
              if (len > lag) {
                const std::size_t n = (len - lag) * Fo;
                const T* g = g_o + (seg_start + lag) * Fo;
                if (gw) wacc += Dot(g, taps.data().data() + plane + seg_start * Fo, n);
                if (gx) Axpy(W[widx], g, gtaps.data().data() + plane + seg_start * Fo, n);
              }
              seg_start += len;
            }
            if (gw) (*gw)[widx] += wacc;
          }
        }
      }
    }
    if (gx) {
      // Scatter the tap gradients back onto the input frequencies.
      const std::size_t s = geo.s_freq, pad = geo.pad_freq();
      for (std::size_t i = 0; i < geo.in_channels; ++i) {
        for (std::size_t kf = 0; kf < KF; ++kf) {
          const std::size_t fo_lo = kf >= pad ? 0 : (pad - kf + s - 1) / s;
          std::size_t fo_hi = Fo;
          while (fo_hi > fo_lo && (fo_hi - 1) * s + kf >= F + pad) --fo_hi;
          for (std::size_t t = 0; t < frames; ++t) {
            const T* grow = gtaps.data().data() + ((i * KF + kf) * frames + t) * Fo;
            T* xrow = gx->data().data() + (i * frames + t) * F + (fo_lo * s + kf - pad);
            for (std::size_t fo = fo_lo, k = 0; fo < fo_hi; ++fo, k += s) xrow[k] += grow[fo];
          }
        }
      }
    }
  });
}

template <typename T>
Id<T> BatchNorm(Tape<T>& tape, Id<T> x, Id<T> gamma, Id<T> beta, const BatchNormLayer<T>& layer,
                BatchNormTrainResult<T>* stats) {
  BatchNormLayer<T> bn = layer;
  bn.gamma = tape.value(gamma);
  bn.beta = tape.value(beta);
  BatchNormTrainResult<T> r = BatchNormTrain(bn, tape.value(x));
  const Tensor<T> mean = r.batch_mean;
  const Tensor<T> var = r.batch_var;
  Tensor<T> y = std::move(r.output);
  if (stats) {
    r.output = Tensor<T>();
    *stats = std::move(r);
  }
  const T eps = static_cast<T>(layer.epsilon);
  return tape.Record(std::move(y), {x, gamma, beta},
                     [mean, var, eps, x, gamma, beta](Tape<T>& tp, Id<T> self) {
    const Tensor<T>& gy = OutGrad(tp, self);
    const Tensor<T>& in = tp.value(x);
    const Tensor<T>& g = tp.value(gamma);
    Tensor<T>* gx = tp.grad_target(x);
    Tensor<T>* gg = tp.grad_target(gamma);
    Tensor<T>* gbeta = tp.grad_target(beta);
    const std::size_t C = mean.size();
    const std::size_t n = in.size() / C;
    for (std::size_t c = 0; c < C; ++c) {
      const T inv = T{1} / std::sqrt(var[c] + eps);
      const T* xv = in.data().data() + c * n;
      const T* gv = gy.data().data() + c * n;
      T sum_g{0}, sum_gx{0};
      for (std::size_t k = 0; k < n; ++k) {
        sum_g += gv[k];
        sum_gx += gv[k] * (xv[k] - mean[c]) * inv;
      }
      if (gg) (*gg)[c] += sum_gx;
      if (gbeta) (*gbeta)[c] += sum_g;
      if (gx) {
        T* dx = gx->data().data() + c * n;
        const T scale = g[c] * inv / static_cast<T>(n);
        for (std::size_t k = 0; k < n; ++k) {
          const T xhat = (xv[k] - mean[c]) * inv;
          dx[k] += scale * (static_cast<T>(n) * gv[k] - sum_g - xhat * sum_gx);
        }
      }
    }
  });
}

template <typename T>
Id<T> Relu(Tape<T>& tape, Id<T> x) {
  return tape.Record(ddstream::Relu(tape.value(x)), {x}, [x](Tape<T>& tp, Id<T> self) {
    const Tensor<T>& gy = OutGrad(tp, self);
    const Tensor<T>& in = tp.value(x);
    Tensor<T>* gx = tp.grad_target(x);
    for (std::size_t k = 0; k < in.size(); ++k)
      if (in[k] > T{0}) (*gx)[k] += gy[k];
  });
}

template <typename T>
Id<T> Add(Tape<T>& tape, Id<T> a, Id<T> b) {
  return tape.Record(ddstream::Add(tape.value(a), tape.value(b)), {a, b}, [a, b](Tape<T>& tp, Id<T> self) {
    const Tensor<T>& gy = OutGrad(tp, self);
    for (Id<T> in : {a, b}) {
      if (Tensor<T>* g = tp.grad_target(in)) {
        for (std::size_t k = 0; k < gy.size(); ++k) (*g)[k] += gy[k];
      }
    }
  });
}

template <typename T>
Id<T> AvgPoolFreq(Tape<T>& tape, Id<T> x) {
  return tape.Record(ddstream::AvgPoolFreq(tape.value(x)), {x}, [x](Tape<T>& tp, Id<T> self) {
    const Tensor<T>& gy = OutGrad(tp, self);
    Tensor<T>* gx = tp.grad_target(x);
    const std::size_t F = tp.value(x).dim(2);
    const T inv = T{1} / static_cast<T>(F);
    for (std::size_t r = 0; r < gy.size(); ++r)
      for (std::size_t f = 0; f < F; ++f) (*gx)[r * F + f] += gy[r] * inv;
  });
}

template <typename T>
Id<T> FlattenFrames(Tape<T>& tape, Id<T> x) {
  return tape.Record(ddstream::FlattenFrames(tape.value(x)), {x}, [x](Tape<T>& tp, Id<T> self) {
    const Tensor<T>& gy = OutGrad(tp, self);
    Tensor<T>* gx = tp.grad_target(x);
    const std::size_t C = gx->dim(0), frames = gx->dim(1), F = gx->dim(2);
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t t = 0; t < frames; ++t)
        for (std::size_t f = 0; f < F; ++f) gx->at(c, t, f) += gy.at(t, c * F + f);
  });
}

namespace {

template <typename T>
struct LstmTrace {
  Tensor<T> Z;  // [N x 4H] gate pre-activations
  Tensor<T> C;  // [N x H] cell states
};

}  // namespace

template <typename T>
Id<T> Lstm(Tape<T>& tape, Id<T> x, Id<T> W, Id<T> U, Id<T> b, ActivationFn gate_act,
           ActivationFn cell_act, const Segments& segments) {
  const Tensor<T>& X = tape.value(x);
  const Tensor<T>& Wv = tape.value(W);
  const Tensor<T>& Uv = tape.value(U);
  const Tensor<T>& bv = tape.value(b);
  if (X.rank() != 2 || Wv.rank() != 2 || Wv.dim(0) != X.dim(1)) throw DimensionError("lstm op: input shape");
  const std::size_t N = X.dim(0), H = Uv.dim(0), G = 4 * H;
  if (SegmentsTotal(segments) != N) throw DimensionError("lstm op: segments do not cover input");
  auto trace = std::make_shared<LstmTrace<T>>();
  trace->Z = Matmul(X, Wv);
  trace->C = Tensor<T>({N, H});
  Tensor<T> out({N, H});
  std::vector<T> zu(G);
  std::size_t t = 0;
  for (std::size_t len : segments) {
    for (std::size_t k = 0; k < len; ++k, ++t) {
      std::fill(zu.begin(), zu.end(), T{0});
      if (k > 0) {
        const T* hp = out.data().data() + (t - 1) * H;
        for (std::size_t m = 0; m < H; ++m)
          for (std::size_t j = 0; j < G; ++j) zu[j] += hp[m] * Uv.at(m, j);
      }
      T* z = trace->Z.data().data() + t * G;
      for (std::size_t j = 0; j < G; ++j) z[j] = z[j] + zu[j] + bv[j];
      for (std::size_t j = 0; j < H; ++j) {
        const T f = gate_act.apply(z[j]);
        const T i = gate_act.apply(z[H + j]);
        const T o = gate_act.apply(z[2 * H + j]);
        const T g = cell_act.apply(z[3 * H + j]);
        const T c_prev = k > 0 ? trace->C.at(t - 1, j) : T{0};
        const T c = f * c_prev + i * g;
        trace->C.at(t, j) = c;
        out.at(t, j) = o * cell_act.apply(c);
      }
    }
  }
  return tape.Record(std::move(out), {x, W, U, b},
                     [trace, gate_act, cell_act, segments, x, W, U, b, H](Tape<T>& tp, Id<T> self) {
    const Tensor<T>& gy = OutGrad(tp, self);
    const Tensor<T>& hs = tp.value(self);
    const Tensor<T>& Uv = tp.value(U);
    const std::size_t G = 4 * H;
    const std::size_t N = hs.dim(0);
    Tensor<T> dZ({N, G});
    Tensor<T>* gU = tp.grad_target(U);
    Tensor<T>* gb = tp.grad_target(b);
    std::vector<T> dh_next(H), dc_next(H);
    std::size_t seg_end = N;
    for (auto it = segments.rbegin(); it != segments.rend(); ++it) {
      const std::size_t seg_start = seg_end - *it;
      std::fill(dh_next.begin(), dh_next.end(), T{0});
      std::fill(dc_next.begin(), dc_next.end(), T{0});
      for (std::size_t t = seg_end; t-- > seg_start;) {
        const T* z = trace->Z.data().data() + t * G;
        T* dz = dZ.data().data() + t * G;
        for (std::size_t j = 0; j < H; ++j) {
          const T f = gate_act.apply(z[j]);
          const T i = gate_act.apply(z[H + j]);
          const T o = gate_act.apply(z[2 * H + j]);
          const T g = cell_act.apply(z[3 * H + j]);
          const T c = trace->C.at(t, j);
          const T c_prev = t > seg_start ? trace->C.at(t - 1, j) : T{0};
          const T dh = gy.at(t, j) + dh_next[j];
          const T dc = dh * o * cell_act.derivative(c) + dc_next[j];
          dz[j] = dc * c_prev * gate_act.derivative(z[j]);
          dz[H + j] = dc * g * gate_act.derivative(z[H + j]);
          dz[2 * H + j] = dh * cell_act.apply(c) * gate_act.derivative(z[2 * H + j]);
          dz[3 * H + j] = dc * i * cell_act.derivative(z[3 * H + j]);
          dc_next[j] = dc * f;
        }
        std::fill(dh_next.begin(), dh_next.end(), T{0});
        if (t > seg_start) {
          const T* hp = hs.data().data() + (t - 1) * H;
          for (std::size_t m = 0; m < H; ++m) {
            const T* urow = Uv.data().data() + m * G;
            T acc{0};
            for (std::size_t j = 0; j < G; ++j) acc += urow[j] * dz[j];
            dh_next[m] = acc;
            if (gU) {
              T* gurow = gU->data().data() + m * G;
              const T hm = hp[m];
              for (std::size_t j = 0; j < G; ++j) gurow[j] += hm * dz[j];
            }
          }
        }
        if (gb)
          for (std::size_t j = 0; j < G; ++j) (*gb)[j] += dz[j];
      }
      seg_end = seg_start;
    }
    if (Tensor<T>* gW = tp.grad_target(W)) {
      const Tensor<T> d = Matmul(Transpose(tp.value(x)), dZ);
      for (std::size_t k = 0; k < d.size(); ++k) (*gW)[k] += d[k];
    }
    if (Tensor<T>* gx = tp.grad_target(x)) {
      const Tensor<T> d = MatmulTransposed(dZ, tp.value(W));
      for (std::size_t k = 0; k < d.size(); ++k) (*gx)[k] += d[k];
    }
  });
}

template <typename T>
Id<T> Dense(Tape<T>& tape, Id<T> x, Id<T> W, Id<T> b, Activation act) {
  const Tensor<T>& X = tape.value(x);
  const Tensor<T>& Wv = tape.value(W);
  if (X.rank() != 2 || Wv.rank() != 2 || X.dim(1) != Wv.dim(0)) {
    throw DimensionError("dense op: " + ShapeString(X.shape()) + " x " + ShapeString(Wv.shape()));
  }
  auto pre = std::make_shared<Tensor<T>>(Matmul(X, Wv));
  const std::size_t n = Wv.dim(1);
  const Tensor<T>& bv = tape.value(b);
  for (std::size_t r = 0; r < pre->dim(0); ++r)
    for (std::size_t j = 0; j < n; ++j) pre->at(r, j) += bv[j];
  const ActivationFn fn{act};
  return tape.Record(Apply(*pre, fn), {x, W, b}, [pre, fn, x, W, b](Tape<T>& tp, Id<T> self) {
    const Tensor<T>& gy = OutGrad(tp, self);
    Tensor<T> dpre = gy;
    for (std::size_t k = 0; k < dpre.size(); ++k) dpre[k] *= fn.derivative((*pre)[k]);
    if (Tensor<T>* gb = tp.grad_target(b)) {
      for (std::size_t r = 0; r < dpre.dim(0); ++r)
        for (std::size_t j = 0; j < dpre.dim(1); ++j) (*gb)[j] += dpre.at(r, j);
    }
    if (Tensor<T>* gW = tp.grad_target(W)) {
      const Tensor<T> d = Matmul(Transpose(tp.value(x)), dpre);
      for (std::size_t k = 0; k < d.size(); ++k) (*gW)[k] += d[k];
    }
    if (Tensor<T>* gx = tp.grad_target(x)) {
      const Tensor<T> d = MatmulTransposed(dpre, tp.value(W));
      for (std::size_t k = 0; k < d.size(); ++k) (*gx)[k] += d[k];
    }
  });
}

namespace {

template <typename T>
void CheckSequence(const Tensor<T>& X, const Segments& segments, const char* op) {
  if (X.rank() != 2) throw DimensionError(std::string(op) + ": expected [N x d]");
  if (SegmentsTotal(segments) != X.dim(0)) throw DimensionError(std::string(op) + ": segments do not cover input");
  for (auto len : segments)
    if (len == 0) throw StateError(std::string(op) + ": empty segment");
}

}  // namespace

template <typename T>
Id<T> SegmentMean(Tape<T>& tape, Id<T> x, const Segments& segments) {
  const Tensor<T>& X = tape.value(x);
  CheckSequence(X, segments, "segment mean");
  const std::size_t d = X.dim(1);
  Tensor<T> out({segments.size(), d});
  std::size_t start = 0;
  for (std::size_t s = 0; s < segments.size(); ++s) {
    const Tensor<T> m = ColumnMean(X.rows(start, start + segments[s]));
    std::copy(m.data().begin(), m.data().end(), out.row(s).begin());
    start += segments[s];
  }
  return tape.Record(std::move(out), {x}, [segments, x](Tape<T>& tp, Id<T> self) {
    const Tensor<T>& gy = OutGrad(tp, self);
    Tensor<T>* gx = tp.grad_target(x);
    const std::size_t d = gy.dim(1);
    std::size_t t = 0;
    for (std::size_t s = 0; s < segments.size(); ++s) {
      const T inv = T{1} / static_cast<T>(segments[s]);
      for (std::size_t k = 0; k < segments[s]; ++k, ++t)
        for (std::size_t j = 0; j < d; ++j) gx->at(t, j) += gy.at(s, j) * inv;
    }
  });
}

template <typename T>
Id<T> CausalMean(Tape<T>& tape, Id<T> x, const Segments& segments) {
  const Tensor<T>& X = tape.value(x);
  CheckSequence(X, segments, "causal mean");
  const std::size_t d = X.dim(1);
  Tensor<T> out({X.dim(0), d});
  std::size_t start = 0;
  for (std::size_t len : segments) {
    const Tensor<T> traj = CausalMeanTrajectory(X.rows(start, start + len));
    std::copy(traj.data().begin(), traj.data().end(), out.row(start).begin());
    start += len;
  }
  return tape.Record(std::move(out), {x}, [segments, x](Tape<T>& tp, Id<T> self) {
    const Tensor<T>& gy = OutGrad(tp, self);
    Tensor<T>* gx = tp.grad_target(x);
    const std::size_t d = gy.dim(1);
    std::vector<T> acc(d);
    std::size_t seg_end = gy.dim(0);
    for (auto it = segments.rbegin(); it != segments.rend(); ++it) {
      const std::size_t seg_start = seg_end - *it;
      std::fill(acc.begin(), acc.end(), T{0});
      for (std::size_t t = seg_end; t-- > seg_start;) {
        const T inv = T{1} / static_cast<T>(t - seg_start + 1);
        for (std::size_t j = 0; j < d; ++j) {
          acc[j] += gy.at(t, j) * inv;
          gx->at(t, j) += acc[j];
        }
      }
      seg_end = seg_start;
    }
  });
}

namespace {

template <typename T>
struct AttentionTrace {
  Tensor<T> act;      // [N x d_a] tanh(h W_a + b_a)
  Tensor<T> weights;  // [N]
};

}  // namespace

template <typename T>
Id<T> Attention(Tape<T>& tape, Id<T> x, Id<T> W_a, Id<T> b_a, Id<T> v, const Segments& segments) {
  const Tensor<T>& X = tape.value(x);
  CheckSequence(X, segments, "attention");
  const Tensor<T>& Wv = tape.value(W_a);
  const Tensor<T>& bv = tape.value(b_a);
  const Tensor<T>& vv = tape.value(v);
  const std::size_t N = X.dim(0), d = X.dim(1);
  if (Wv.rank() != 2 || Wv.dim(0) != d) throw DimensionError("attention op: W_a shape");
  const std::size_t da = Wv.dim(1);
  auto trace = std::make_shared<AttentionTrace<T>>();
  trace->act = Matmul(X, Wv);
  trace->weights = Tensor<T>({N});
  for (std::size_t t = 0; t < N; ++t)
    for (std::size_t a = 0; a < da; ++a) trace->act.at(t, a) = std::tanh(trace->act.at(t, a) + bv[a]);
  Tensor<T> out({segments.size(), d});
  std::size_t start = 0;
  for (std::size_t s = 0; s < segments.size(); ++s) {
    Tensor<T> energy({segments[s]});
    for (std::size_t k = 0; k < segments[s]; ++k) {
      T e{0};
      for (std::size_t a = 0; a < da; ++a) e += vv[a] * trace->act.at(start + k, a);
      energy[k] = e;
    }
    const Tensor<T> w = Softmax(energy);
    for (std::size_t k = 0; k < segments[s]; ++k) {
      trace->weights[start + k] = w[k];
      for (std::size_t j = 0; j < d; ++j) out.at(s, j) += w[k] * X.at(start + k, j);
    }
    start += segments[s];
  }
  return tape.Record(std::move(out), {x, W_a, b_a, v}, [trace, segments, x, W_a, b_a, v](Tape<T>& tp, Id<T> self) {
    const Tensor<T>& gy = OutGrad(tp, self);
    const Tensor<T>& X = tp.value(x);
    const Tensor<T>& vv = tp.value(v);
    const std::size_t N = X.dim(0), d = X.dim(1), da = vv.size();
    Tensor<T>* gx = tp.grad_target(x);
    Tensor<T>* gv = tp.grad_target(v);
    Tensor<T> dproj({N, da});  // gradient w.r.t. h W_a + b_a
    std::size_t start = 0;
    for (std::size_t s = 0; s < segments.size(); ++s) {
      const std::size_t len = segments[s];
      std::vector<T> dw(len);
      T wsum{0};
      for (std::size_t k = 0; k < len; ++k) {
        const std::size_t t = start + k;
        T acc{0};
        for (std::size_t j = 0; j < d; ++j) acc += gy.at(s, j) * X.at(t, j);
        dw[k] = acc;
        wsum += trace->weights[t] * acc;
      }
      for (std::size_t k = 0; k < len; ++k) {
        const std::size_t t = start + k;
        const T w = trace->weights[t];
        if (gx)
          for (std::size_t j = 0; j < d; ++j) gx->at(t, j) += w * gy.at(s, j);
        const T de = w * (dw[k] - wsum);
        for (std::size_t a = 0; a < da; ++a) {
          const T th = trace->act.at(t, a);
          if (gv) (*gv)[a] += de * th;
          dproj.at(t, a) = de * vv[a] * (T{1} - th * th);
        }
      }
      start += len;
    }
    if (Tensor<T>* gb = tp.grad_target(b_a)) {
      for (std::size_t t = 0; t < N; ++t)
        for (std::size_t a = 0; a < da; ++a) (*gb)[a] += dproj.at(t, a);
    }
    if (Tensor<T>* gW = tp.grad_target(W_a)) {
      const Tensor<T> dW = Matmul(Transpose(X), dproj);
      for (std::size_t k = 0; k < dW.size(); ++k) (*gW)[k] += dW[k];
    }
    if (gx) {
      const Tensor<T> dX = MatmulTransposed(dproj, tp.value(W_a));
      for (std::size_t k = 0; k < dX.size(); ++k) (*gx)[k] += dX[k];
    }
  });
}

template <typename T>
Id<T> RnnAggregate(Tape<T>& tape, Id<T> x, Id<T> W, Id<T> U, Activation act, const Segments& segments) {
  const Tensor<T>& X = tape.value(x);
  CheckSequence(X, segments, "rnn aggregate");
  const std::size_t N = X.dim(0), d = X.dim(1);
  const RnnAggParams<T> params{tape.value(W), tape.value(U), act};
  auto pre = std::make_shared<Tensor<T>>(Shape{N, d});
  Tensor<T> out({N, d});
  const ActivationFn fn{act};
  std::size_t t = 0;
  for (std::size_t len : segments) {
    Tensor<T> s({d});
    for (std::size_t k = 0; k < len; ++k, ++t) {
      // Same accumulation as RnnAggregateStep, keeping the pre-activation.
      Tensor<T> z({d}), zu({d});
      for (std::size_t m = 0; m < d; ++m)
        for (std::size_t j = 0; j < d; ++j) z[j] += X.at(t, m) * params.W.at(m, j);
      for (std::size_t m = 0; m < d; ++m)
        for (std::size_t j = 0; j < d; ++j) zu[j] += s[m] * params.U.at(m, j);
      for (std::size_t j = 0; j < d; ++j) {
        pre->at(t, j) = z[j] + zu[j];
        s[j] = fn.apply(pre->at(t, j));
        out.at(t, j) = s[j];
      }
    }
  }
  return tape.Record(std::move(out), {x, W, U}, [pre, fn, segments, x, W, U](Tape<T>& tp, Id<T> self) {
    const Tensor<T>& gy = OutGrad(tp, self);
    const Tensor<T>& S = tp.value(self);
    const Tensor<T>& Wv = tp.value(W);
    const Tensor<T>& Uv = tp.value(U);
    const Tensor<T>& X = tp.value(x);
    const std::size_t N = S.dim(0), d = S.dim(1);
    Tensor<T>* gx = tp.grad_target(x);
    Tensor<T>* gW = tp.grad_target(W);
    Tensor<T>* gU = tp.grad_target(U);
    std::vector<T> ds_next(d), da(d);
    std::size_t seg_end = N;
    for (auto it = segments.rbegin(); it != segments.rend(); ++it) {
      const std::size_t seg_start = seg_end - *it;
      std::fill(ds_next.begin(), ds_next.end(), T{0});
      for (std::size_t t = seg_end; t-- > seg_start;) {
        for (std::size_t j = 0; j < d; ++j) da[j] = (gy.at(t, j) + ds_next[j]) * fn.derivative(pre->at(t, j));
        for (std::size_t m = 0; m < d; ++m) {
          T accx{0}, accs{0};
          for (std::size_t j = 0; j < d; ++j) {
            accx += Wv.at(m, j) * da[j];
            accs += Uv.at(m, j) * da[j];
          }
          if (gx) gx->at(t, m) += accx;
          ds_next[m] = t > seg_start ? accs : T{0};
          if (gW)
            for (std::size_t j = 0; j < d; ++j) gW->at(m, j) += X.at(t, m) * da[j];
          if (gU && t > seg_start)
            for (std::size_t j = 0; j < d; ++j) gU->at(m, j) += S.at(t - 1, m) * da[j];
        }
      }
      seg_end = seg_start;
    }
  });
}

template <typename T>
Id<T> SoftmaxCrossEntropy(Tape<T>& tape, Id<T> logits, const std::vector<int>& labels,
                          const std::vector<T>& weights) {
  const Tensor<T>& L = tape.value(logits);
  if (L.rank() != 2 || L.dim(1) != 2 || labels.size() != L.dim(0) || weights.size() != L.dim(0)) {
    throw DimensionError("cross entropy: expected [N x 2] logits with N labels and weights");
  }
  auto probs = std::make_shared<Tensor<T>>(Softmax(L));
  T loss{0};
  for (std::size_t r = 0; r < L.dim(0); ++r) {
    if (labels[r] != 0 && labels[r] != 1) throw std::invalid_argument("cross entropy: label must be 0 or 1");
    const T a = L.at(r, 0), b = L.at(r, 1);
    const T m = std::max(a, b);
    const T lse = m + std::log(std::exp(a - m) + std::exp(b - m));
    loss += weights[r] * (lse - L.at(r, static_cast<std::size_t>(labels[r])));
  }
  return tape.Record(Tensor<T>({1}, std::vector<T>{loss}), {logits},
                     [probs, labels, weights, logits](Tape<T>& tp, Id<T> self) {
    const T g = OutGrad(tp, self)[0];
    Tensor<T>* gl = tp.grad_target(logits);
    for (std::size_t r = 0; r < probs->dim(0); ++r) {
      for (std::size_t c = 0; c < 2; ++c) {
        const T target = static_cast<int>(c) == labels[r] ? T{1} : T{0};
        gl->at(r, c) += g * weights[r] * (probs->at(r, c) - target);
      }
    }
  });
}

template <typename T>
Id<T> Contract(Tape<T>& tape, Id<T> x, const Tensor<T>& r) {
  const Tensor<T>& X = tape.value(x);
  RequireSameShape(X.shape(), r.shape(), "contract");
  T acc{0};
  for (std::size_t k = 0; k < X.size(); ++k) acc += X[k] * r[k];
  return tape.Record(Tensor<T>({1}, std::vector<T>{acc}), {x}, [r, x](Tape<T>& tp, Id<T> self) {
    const T g = OutGrad(tp, self)[0];
    Tensor<T>* gx = tp.grad_target(x);
    for (std::size_t k = 0; k < r.size(); ++k) (*gx)[k] += g * r[k];
  });
}

#define DDSTREAM_INSTANTIATE_AD(T)                                                                     \
  template Id<T> Conv2d(Tape<T>&, Id<T>, Id<T>, Id<T>, const Conv2dLayer<T>&, const Segments&);        \
  template Id<T> BatchNorm(Tape<T>&, Id<T>, Id<T>, Id<T>, const BatchNormLayer<T>&,                   \
                           BatchNormTrainResult<T>*);                                                 \
  template Id<T> Relu(Tape<T>&, Id<T>);                                                               \
  template Id<T> Add(Tape<T>&, Id<T>, Id<T>);                                                         \
  template Id<T> AvgPoolFreq(Tape<T>&, Id<T>);                                                        \
  template Id<T> FlattenFrames(Tape<T>&, Id<T>);                                                      \
  template Id<T> Lstm(Tape<T>&, Id<T>, Id<T>, Id<T>, Id<T>, ActivationFn, ActivationFn, const Segments&); \
  template Id<T> Dense(Tape<T>&, Id<T>, Id<T>, Id<T>, Activation);                                    \
  template Id<T> SegmentMean(Tape<T>&, Id<T>, const Segments&);                                       \
  template Id<T> CausalMean(Tape<T>&, Id<T>, const Segments&);                                        \
  template Id<T> Attention(Tape<T>&, Id<T>, Id<T>, Id<T>, Id<T>, const Segments&);                    \
  template Id<T> RnnAggregate(Tape<T>&, Id<T>, Id<T>, Id<T>, Activation, const Segments&);            \
  template Id<T> SoftmaxCrossEntropy(Tape<T>&, Id<T>, const std::vector<int>&, const std::vector<T>&); \
  template Id<T> Contract(Tape<T>&, Id<T>, const Tensor<T>&);

DDSTREAM_INSTANTIATE_AD(float)
DDSTREAM_INSTANTIATE_AD(double)

}  // namespace ad

template class Tape<float>;
template class Tape<double>;

}  // namespace ddstream
