#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

#include "ddstream/errors.hpp"

namespace ddstream {

using Shape = std::vector<std::size_t>;

std::string ShapeString(const Shape& shape);
std::size_t ShapeProduct(const Shape& shape);

// Dense row-major tensor. Every dimension is >= 1 and
// data().size() == product(shape()).
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T{0});
  Tensor(Shape shape, std::vector<T> data);

  static Tensor Vector(std::initializer_list<T> values);
  static Tensor Matrix(std::initializer_list<std::initializer_list<T>> rows);

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::span<T> data() noexcept { return data_; }
  std::span<const T> data() const noexcept { return data_; }
  const std::vector<T>& values() const noexcept { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  T& at(std::size_t i, std::size_t j) { return data_[i * shape_[1] + j]; }
  const T& at(std::size_t i, std::size_t j) const {
    return data_[i * shape_[1] + j];
  }
  T& at(std::size_t i, std::size_t j, std::size_t k) {
    return data_[(i * shape_[1] + j) * shape_[2] + k];
  }
  const T& at(std::size_t i, std::size_t j, std::size_t k) const {
    return data_[(i * shape_[1] + j) * shape_[2] + k];
  }

  // Row `i` of a rank-2 tensor.
  std::span<T> row(std::size_t i) {
    return std::span<T>(data_).subspan(i * shape_[1], shape_[1]);
  }
  std::span<const T> row(std::size_t i) const {
    return std::span<const T>(data_).subspan(i * shape_[1], shape_[1]);
  }

  Tensor reshape(Shape shape) const;
  // Rows [begin, end) of a rank-2 tensor.
  Tensor rows(std::size_t begin, std::size_t end) const;
  void fill(T value);

  template <typename U>
  Tensor<U> cast() const {
    return Tensor<U>(shape_, std::vector<U>(data_.begin(), data_.end()));
  }

  bool operator==(const Tensor& other) const = default;

 private:
  Shape shape_;
  std::vector<T> data_;
};

enum class Activation { kIdentity, kRelu, kLeakyRelu, kSigmoid, kTanh };

// Scalar activation with derivative w.r.t. the pre-activation. `alpha` is
// the negative-side slope of LeakyReLU and is ignored otherwise.
struct ActivationFn {
  Activation kind = Activation::kIdentity;
  double alpha = 0.01;

  template <typename T>
  T apply(T x) const;
  template <typename T>
  T derivative(T x) const;
};

const char* ToString(Activation a);
Activation ParseActivation(const std::string& name);

template <typename T>
Tensor<T> Matmul(const Tensor<T>& a, const Tensor<T>& b);
// a · bᵀ; b is [n×k].
template <typename T>
Tensor<T> MatmulTransposed(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> Transpose(const Tensor<T>& a);

template <typename T>
Tensor<T> Add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> Sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> Mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> Scale(const Tensor<T>& a, T s);
template <typename T>
Tensor<T> Apply(const Tensor<T>& a, ActivationFn fn);
template <typename T>
Tensor<T> Relu(const Tensor<T>& a);
template <typename T>
Tensor<T> LeakyRelu(const Tensor<T>& a, T alpha);
template <typename T>
Tensor<T> Sigmoid(const Tensor<T>& a);
template <typename T>
Tensor<T> Tanh(const Tensor<T>& a);

// Softmax over a rank-1 tensor, or over each row of a rank-2 tensor.
template <typename T>
Tensor<T> Softmax(const Tensor<T>& x);

// Numerically stable logistic function.
template <typename T>
T SigmoidScalar(T x);

void RequireSameShape(const Shape& a, const Shape& b, const char* op);

}  // namespace ddstream
