#include "ddstream/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace ddstream {

const char* ToString(FormatErrorKind kind) {
  switch (kind) {
    case FormatErrorKind::kBadMagic: return "bad magic";
    case FormatErrorKind::kBadVersion: return "bad version";
    case FormatErrorKind::kTruncated: return "truncated";
    case FormatErrorKind::kDimensionOverflow: return "dimension overflow";
    case FormatErrorKind::kEmpty: return "empty";
    case FormatErrorKind::kShapeMismatch: return "shape mismatch";
    case FormatErrorKind::kMissingParameter: return "missing parameter";
    case FormatErrorKind::kBadValue: return "bad value";
    case FormatErrorKind::kIo: return "io";
  }
  return "unknown";
}

std::string ShapeString(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::size_t ShapeProduct(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

void RequireSameShape(const Shape& a, const Shape& b, const char* op) {
  if (a != b) {
    throw DimensionError(std::string(op) + ": shape mismatch " +
                         ShapeString(a) + " vs " + ShapeString(b));
  }
}

template <typename T>
Tensor<T>::Tensor(Shape shape, T fill) : shape_(std::move(shape)) {
  for (auto d : shape_) {
    if (d == 0) throw DimensionError("tensor dimension must be >= 1: " + ShapeString(shape_));
  }
  data_.assign(ShapeProduct(shape_), fill);
}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  for (auto d : shape_) {
    if (d == 0) throw DimensionError("tensor dimension must be >= 1: " + ShapeString(shape_));
  }
  if (ShapeProduct(shape_) != data_.size()) {
    throw DimensionError("tensor data length " + std::to_string(data_.size()) +
                         " does not match shape " + ShapeString(shape_));
  }
}

template <typename T>
Tensor<T> Tensor<T>::Vector(std::initializer_list<T> values) {
  return Tensor({values.size()}, std::vector<T>(values));
}

template <typename T>
Tensor<T> Tensor<T>::Matrix(std::initializer_list<std::initializer_list<T>> rows) {
  const std::size_t m = rows.size();
  const std::size_t n = m ? rows.begin()->size() : 0;
  std::vector<T> data;
  data.reserve(m * n);
  for (const auto& r : rows) {
    if (r.size() != n) throw DimensionError("ragged matrix literal");
    data.insert(data.end(), r.begin(), r.end());
  }
  return Tensor({m, n}, std::move(data));
}

template <typename T>
Tensor<T> Tensor<T>::reshape(Shape shape) const {
  if (ShapeProduct(shape) != data_.size()) {
    throw DimensionError("reshape " + ShapeString(shape_) + " -> " + ShapeString(shape));
  }
  return Tensor(std::move(shape), data_);
}

template <typename T>
Tensor<T> Tensor<T>::rows(std::size_t begin, std::size_t end) const {
  if (rank() != 2 || begin >= end || end > shape_[0]) {
    throw DimensionError("rows(" + std::to_string(begin) + ", " + std::to_string(end) +
                         ") on " + ShapeString(shape_));
  }
  const std::size_t n = shape_[1];
  return Tensor({end - begin, n},
                std::vector<T>(data_.begin() + begin * n, data_.begin() + end * n));
}

template <typename T>
void Tensor<T>::fill(T value) {
  std::fill(data_.begin(), data_.end(), value);
}

const char* ToString(Activation a) {
  switch (a) {
    case Activation::kIdentity: return "identity";
    case Activation::kRelu: return "relu";
    case Activation::kLeakyRelu: return "leaky_relu";
    case Activation::kSigmoid: return "sigmoid";
    case Activation::kTanh: return "tanh";
  }
  return "?";
}

Activation ParseActivation(const std::string& name) {
  if (name == "identity") return Activation::kIdentity;
  if (name == "relu") return Activation::kRelu;
  if (name == "leaky_relu") return Activation::kLeakyRelu;
  if (name == "sigmoid") return Activation::kSigmoid;
  if (name == "tanh") return Activation::kTanh;
  throw std::invalid_argument("unknown activation '" + name + "'");
}

template <typename T>
T SigmoidScalar(T x) {
  if (x >= T{0}) {
    return T{1} / (T{1} + std::exp(-x));
  }
  const T e = std::exp(x);
  return e / (T{1} + e);
}

template <typename T>
T ActivationFn::apply(T x) const {
  switch (kind) {
    case Activation::kIdentity: return x;
    case Activation::kRelu: return x > T{0} ? x : T{0};
    case Activation::kLeakyRelu: return x >= T{0} ? x : static_cast<T>(alpha) * x;
    case Activation::kSigmoid: return SigmoidScalar(x);
    case Activation::kTanh: return std::tanh(x);
  }
  return x;
}

template <typename T>
T ActivationFn::derivative(T x) const {
  switch (kind) {
    case Activation::kIdentity: return T{1};
    case Activation::kRelu: return x > T{0} ? T{1} : T{0};
    case Activation::kLeakyRelu: return x >= T{0} ? T{1} : static_cast<T>(alpha);
    case Activation::kSigmoid: {
      const T s = SigmoidScalar(x);
      return s * (T{1} - s);
    }
    case Activation::kTanh: {
      const T t = std::tanh(x);
      return T{1} - t * t;
    }
  }
  return T{1};
}

template <typename T>
Tensor<T> Matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: " + ShapeString(a.shape()) + " x " + ShapeString(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor<T> c({m, n});
  // i-k-j order: every c[i][j] accumulates over k left to right.
  for (std::size_t i = 0; i < m; ++i) {
    T* crow = c.data().data() + i * n;
    const T* arow = a.data().data() + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = arow[p];
      const T* brow = b.data().data() + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
  return c;
}

template <typename T>
Tensor<T> MatmulTransposed(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(1)) {
    throw DimensionError("matmul_t: " + ShapeString(a.shape()) + " x " +
                         ShapeString(b.shape()) + "^T");
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
  Tensor<T> c({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    const T* arow = a.data().data() + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const T* brow = b.data().data() + j * k;
      T acc{0};
      for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
      c.at(i, j) = acc;
    }
  }
  return c;
}

template <typename T>
Tensor<T> Transpose(const Tensor<T>& a) {
  if (a.rank() != 2) throw DimensionError("transpose needs rank 2");
  const std::size_t m = a.dim(0), n = a.dim(1);
  Tensor<T> t({n, m});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) t.at(j, i) = a.at(i, j);
  return t;
}

namespace {

template <typename T, typename F>
Tensor<T> Zip(const Tensor<T>& a, const Tensor<T>& b, const char* op, F f) {
  RequireSameShape(a.shape(), b.shape(), op);
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = f(a[i], b[i]);
  return out;
}

template <typename T, typename F>
Tensor<T> Map(const Tensor<T>& a, F f) {
  Tensor<T> out = a;
  for (auto& v : out.data()) v = f(v);
  return out;
}

}  // namespace

template <typename T>
Tensor<T> Add(const Tensor<T>& a, const Tensor<T>& b) {
  return Zip(a, b, "add", [](T x, T y) { return x + y; });
}
template <typename T>
Tensor<T> Sub(const Tensor<T>& a, const Tensor<T>& b) {
  return Zip(a, b, "sub", [](T x, T y) { return x - y; });
}
template <typename T>
Tensor<T> Mul(const Tensor<T>& a, const Tensor<T>& b) {
  return Zip(a, b, "mul", [](T x, T y) { return x * y; });
}
template <typename T>
Tensor<T> Scale(const Tensor<T>& a, T s) {
  return Map(a, [s](T x) { return x * s; });
}
template <typename T>
Tensor<T> Apply(const Tensor<T>& a, ActivationFn fn) {
  return Map(a, [fn](T x) { return fn.apply(x); });
}
template <typename T>
Tensor<T> Relu(const Tensor<T>& a) {
  return Apply(a, ActivationFn{Activation::kRelu});
}
template <typename T>
Tensor<T> LeakyRelu(const Tensor<T>& a, T alpha) {
  return Apply(a, ActivationFn{Activation::kLeakyRelu, static_cast<double>(alpha)});
}
template <typename T>
Tensor<T> Sigmoid(const Tensor<T>& a) {
  return Apply(a, ActivationFn{Activation::kSigmoid});
}
template <typename T>
Tensor<T> Tanh(const Tensor<T>& a) {
  return Apply(a, ActivationFn{Activation::kTanh});
}

template <typename T>
Tensor<T> Softmax(const Tensor<T>& x) {
  if (x.rank() != 1 && x.rank() != 2) throw DimensionError("softmax needs rank 1 or 2");
  const std::size_t n = x.shape().back();
  const std::size_t rows = x.size() / n;
  Tensor<T> out = x;
  for (std::size_t r = 0; r < rows; ++r) {
    T* v = out.data().data() + r * n;
    const T mx = *std::max_element(v, v + n);
    T sum{0};
    for (std::size_t j = 0; j < n; ++j) {
      v[j] = std::exp(v[j] - mx);
      sum += v[j];
    }
    for (std::size_t j = 0; j < n; ++j) v[j] /= sum;
  }
  return out;
}

#define DDSTREAM_INSTANTIATE_TENSOR(T)                                   \
  template class Tensor<T>;                                             \
  template T SigmoidScalar<T>(T);                                       \
  template T ActivationFn::apply<T>(T) const;                           \
  template T ActivationFn::derivative<T>(T) const;                      \
  template Tensor<T> Matmul(const Tensor<T>&, const Tensor<T>&);        \
  template Tensor<T> MatmulTransposed(const Tensor<T>&, const Tensor<T>&); \
  template Tensor<T> Transpose(const Tensor<T>&);                       \
  template Tensor<T> Add(const Tensor<T>&, const Tensor<T>&);           \
  template Tensor<T> Sub(const Tensor<T>&, const Tensor<T>&);           \
  template Tensor<T> Mul(const Tensor<T>&, const Tensor<T>&);           \
  template Tensor<T> Scale(const Tensor<T>&, T);                        \
  template Tensor<T> Apply(const Tensor<T>&, ActivationFn);             \
  template Tensor<T> Relu(const Tensor<T>&);                            \
  template Tensor<T> LeakyRelu(const Tensor<T>&, T);                    \
  template Tensor<T> Sigmoid(const Tensor<T>&);                         \
  template Tensor<T> Tanh(const Tensor<T>&);                            \
  template Tensor<T> Softmax(const Tensor<T>&);

DDSTREAM_INSTANTIATE_TENSOR(float)
DDSTREAM_INSTANTIATE_TENSOR(double)

}  // namespace ddstream
