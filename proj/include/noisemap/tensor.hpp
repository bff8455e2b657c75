#pragma once

// Reverse-mode automatic differentiation over dense row-major arrays.
//
// A Tensor is a shared handle to a graph node. Ops record their inputs and a
// backward closure only when at least one input requires a gradient, so
// inference on frozen parameters builds no graph. backward() walks the graph
// once in reverse topological order and then releases it; a second backward
// through the same graph is an error.

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace noisemap {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_string(const Shape& shape);

class TensorError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public TensorError {
 public:
  using TensorError::TensorError;
};

class NonFiniteError : public TensorError {
 public:
  NonFiniteError(const std::string& where, std::size_t index);
  std::size_t index() const { return index_; }

 private:
  std::size_t index_;
};

class DomainError : public TensorError {
 public:
  DomainError(const std::string& what, std::size_t index);
  std::size_t index() const { return index_; }

 private:
  std::size_t index_;
};

class GraphError : public TensorError {
 public:
  using TensorError::TensorError;
};

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until a gradient is accumulated
  bool requires_grad = false;
  bool leaf = true;
  bool consumed = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;

  // Allocates (zeroed) on first use.
  std::vector<T>& grad_buffer();
};

template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  Tensor(Shape shape, std::vector<T> data, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, T value, bool requires_grad = false);
  static Tensor scalar(T value, bool requires_grad = false);

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const;
  std::size_t dim(std::size_t axis) const;
  std::size_t rank() const { return shape().size(); }
  std::size_t numel() const;

  std::span<const T> data() const;
  // Leaf tensors only; mutating a recorded intermediate would corrupt backward.
  std::span<T> data_mut();
  T item() const;

  bool requires_grad() const;
  void set_requires_grad(bool on);
  bool is_leaf() const;
  bool has_grad() const;
  std::span<const T> grad() const;
  std::span<T> grad_mut();
  void zero_grad();

  // Copy of the values as a new leaf without gradient tracking.
  Tensor detach() const;

  const std::shared_ptr<Node<T>>& node() const { return node_; }
  static Tensor from_node(std::shared_ptr<Node<T>> node);

 private:
  std::shared_ptr<Node<T>> node_;
};

using Tensorf = Tensor<float>;
using Tensord = Tensor<double>;

// Populates dLoss/dLeaf for every requires_grad leaf reachable from `loss`,
// accumulating into existing leaf gradients.
template <typename T>
void backward(const Tensor<T>& loss);

// ---- ops -------------------------------------------------------------------

// input [N,Cin,D,H,W], kernel [Cout,Cin,kD,kH,kW], bias [Cout] (may be undefined)
template <typename T>
Tensor<T> conv3d(const Tensor<T>& input, const Tensor<T>& kernel, const Tensor<T>& bias,
                 std::size_t stride = 1, std::size_t padding = 0);

template <typename T>
Tensor<T> upsample_nearest3d(const Tensor<T>& input, std::size_t factor);

template <typename T>
Tensor<T> pool_avg3d(const Tensor<T>& input, std::size_t window);

// [N,C,D,H,W] -> [N,C]
template <typename T>
Tensor<T> global_avg_pool3d(const Tensor<T>& input);

// Concatenates two [N,*,D,H,W] tensors along the channel axis.
template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> relu(const Tensor<T>& x);

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x);

// Clamps into [lo, hi]; gradient is zero where the clamp is active.
template <typename T>
Tensor<T> clamp(const Tensor<T>& x, T lo, T hi);

// Natural log. Non-positive input is a DomainError; inputs in (0, kLogFloor)
// are clamped to kLogFloor with zero gradient.
inline constexpr double kLogFloor = 1e-7;
template <typename T>
Tensor<T> log(const Tensor<T>& x);

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> scalar_mul(const Tensor<T>& a, T c);

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T c);

// Mean over all elements, scalar-shaped result.
template <typename T>
Tensor<T> mean(const Tensor<T>& x);

template <typename T>
Tensor<T> mse(const Tensor<T>& a, const Tensor<T>& b);

// x [N,F], weight [O,F], bias [O] -> [N,O]
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias);

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape);

}  // namespace noisemap
