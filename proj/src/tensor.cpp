#include "noisemap/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_set>
#include <utility>

#include "noisemap/kernels.hpp"

namespace noisemap {

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

NonFiniteError::NonFiniteError(const std::string& where, std::size_t index)
    : TensorError(where + ": non-finite value at flat index " + std::to_string(index)),
      index_(index) {}

DomainError::DomainError(const std::string& what, std::size_t index)
    : TensorError(what + " (flat index " + std::to_string(index) + ")"), index_(index) {}

template <typename T>
std::vector<T>& Node<T>::grad_buffer() {
  if (grad.empty()) grad.assign(data.size(), T(0));
  return grad;
}

namespace {

template <typename T>
void check_finite(std::span<const T> values, const char* where) {
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (!std::isfinite(values[i])) throw NonFiniteError(where, i);
  }
}

template <typename T>
using NodePtr = std::shared_ptr<Node<T>>;

template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> data, const char* op,
                      std::vector<NodePtr<T>> inputs, std::function<void(Node<T>&)> bw) {
  check_finite<T>(data, op);
  auto node = std::make_shared<Node<T>>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->op = op;
  const bool tracked =
      std::any_of(inputs.begin(), inputs.end(), [](const auto& n) { return n->requires_grad; });
  if (tracked) {
    node->requires_grad = true;
    node->leaf = false;
    node->inputs = std::move(inputs);
    node->backward = std::move(bw);
  }
  return Tensor<T>::from_node(std::move(node));
}

template <typename T>
const Node<T>& require(const Tensor<T>& t, const char* op) {
  if (!t.defined()) throw TensorError(std::string(op) + ": undefined tensor argument");
  return *t.node();
}

void require_rank(const Shape& s, std::size_t rank, const char* op, const char* arg) {
  if (s.size() != rank) {
    throw ShapeError(std::string(op) + ": " + arg + " must have rank " + std::to_string(rank) +
                     ", got " + shape_string(s));
  }
}

void require_same(const Shape& a, const Shape& b, const char* op) {
  if (a != b) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_string(a) + " vs " +
                     shape_string(b));
  }
}

constexpr const char* kSpatialAxis[] = {"D (axis 2)", "H (axis 3)", "W (axis 4)"};

}  // namespace

// ---- Tensor ----------------------------------------------------------------

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> data, bool requires_grad) {
  if (shape_numel(shape) != data.size()) {
    throw ShapeError("tensor: shape " + shape_string(shape) + " holds " +
                     std::to_string(shape_numel(shape)) + " values, got " +
                     std::to_string(data.size()));
  }
  check_finite<T>(data, "tensor");
  node_ = std::make_shared<Node<T>>();
  node_->shape = std::move(shape);
  node_->data = std::move(data);
  node_->requires_grad = requires_grad;
}

template <typename T>
Tensor<T> Tensor<T>::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), T(0), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::full(Shape shape, T value, bool requires_grad) {
  const std::size_t n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<T>(n, value), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T value, bool requires_grad) {
  return Tensor(Shape{}, std::vector<T>{value}, requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::from_node(std::shared_ptr<Node<T>> node) {
  Tensor t;
  t.node_ = std::move(node);
  return t;
}

template <typename T>
const Shape& Tensor<T>::shape() const {
  return require(*this, "shape").shape;
}

template <typename T>
std::size_t Tensor<T>::dim(std::size_t axis) const {
  const Shape& s = shape();
  if (axis >= s.size()) {
    throw ShapeError("dim: axis " + std::to_string(axis) + " out of range for " +
                     shape_string(s));
  }
  return s[axis];
}

template <typename T>
std::size_t Tensor<T>::numel() const {
  return require(*this, "numel").data.size();
}

template <typename T>
std::span<const T> Tensor<T>::data() const {
  return require(*this, "data").data;
}

template <typename T>
std::span<T> Tensor<T>::data_mut() {
  require(*this, "data_mut");
  if (!node_->leaf) throw GraphError("data_mut: cannot mutate a recorded intermediate");
  return node_->data;
}

template <typename T>
T Tensor<T>::item() const {
  const auto& n = require(*this, "item");
  if (n.data.size() != 1) {
    throw ShapeError("item: tensor of shape " + shape_string(n.shape) + " is not scalar");
  }
  return n.data[0];
}

template <typename T>
bool Tensor<T>::requires_grad() const {
  return require(*this, "requires_grad").requires_grad;
}

template <typename T>
void Tensor<T>::set_requires_grad(bool on) {
  require(*this, "set_requires_grad");
  if (!node_->leaf) throw GraphError("set_requires_grad: only leaves can change tracking");
  node_->requires_grad = on;
  if (!on) node_->grad.clear();
}

template <typename T>
bool Tensor<T>::is_leaf() const {
  return require(*this, "is_leaf").leaf;
}

template <typename T>
bool Tensor<T>::has_grad() const {
  return !require(*this, "has_grad").grad.empty();
}

template <typename T>
std::span<const T> Tensor<T>::grad() const {
  return require(*this, "grad").grad;
}

template <typename T>
std::span<T> Tensor<T>::grad_mut() {
  require(*this, "grad_mut");
  return node_->grad_buffer();
}

template <typename T>
void Tensor<T>::zero_grad() {
  require(*this, "zero_grad");
  if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), T(0));
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
  const auto& n = require(*this, "detach");
  return Tensor(n.shape, n.data, false);
}

// ---- backward --------------------------------------------------------------

template <typename T>
void backward(const Tensor<T>& loss) {
  if (!loss.defined()) throw GraphError("backward: undefined loss");
  const NodePtr<T>& root = loss.node();
  if (root->consumed) {
    throw GraphError("backward: graph already consumed by a previous backward pass");
  }
  if (root->data.size() != 1) {
    throw GraphError("backward: loss must be scalar, got shape " + shape_string(root->shape));
  }
  if (!root->requires_grad) {
    throw GraphError("backward: loss is not connected to any tensor that requires grad");
  }

  // Iterative post-order DFS; `order` ends up topologically sorted with inputs first.
  std::vector<NodePtr<T>> order;
  std::unordered_set<const Node<T>*> visited;
  std::vector<std::pair<NodePtr<T>, std::size_t>> stack;
  stack.emplace_back(root, 0);
  visited.insert(root.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      NodePtr<T> child = node->inputs[next++];
      if (child->requires_grad && visited.insert(child.get()).second) {
        stack.emplace_back(std::move(child), 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root->grad_buffer()[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>& node = **it;
    if (node.leaf) continue;
    if (!node.grad.empty() && node.backward) node.backward(node);
  }
  for (auto& node : order) {
    if (node->leaf) {
      node->grad_buffer();
      continue;
    }
    node->backward = nullptr;
    node->inputs.clear();
    node->grad.clear();
    node->grad.shrink_to_fit();
    node->consumed = true;
  }
}

// ---- ops -------------------------------------------------------------------

template <typename T>
Tensor<T> conv3d(const Tensor<T>& input, const Tensor<T>& kernel, const Tensor<T>& bias,
                 std::size_t stride, std::size_t padding) {
  const auto& x = require(input, "conv3d");
  const auto& k = require(kernel, "conv3d");
  require_rank(x.shape, 5, "conv3d", "input");
  require_rank(k.shape, 5, "conv3d", "kernel");
  if (stride < 1) throw ShapeError("conv3d: stride must be >= 1");
  if (x.shape[1] != k.shape[1]) {
    throw ShapeError("conv3d: input channel axis (1) has " + std::to_string(x.shape[1]) +
                     " channels but kernel expects " + std::to_string(k.shape[1]));
  }
  for (std::size_t a = 0; a < 3; ++a) {
    if (x.shape[2 + a] + 2 * padding < k.shape[2 + a]) {
      throw ShapeError(std::string("conv3d: spatial axis ") + kSpatialAxis[a] + " of size " +
                       std::to_string(x.shape[2 + a]) + " plus padding " +
                       std::to_string(padding) + " is smaller than kernel extent " +
                       std::to_string(k.shape[2 + a]));
    }
  }
  const bool has_bias = bias.defined();
  if (has_bias && bias.shape() != Shape{k.shape[0]}) {
    throw ShapeError("conv3d: bias shape " + shape_string(bias.shape()) +
                     " does not match output channels " + std::to_string(k.shape[0]));
  }

  kernels::Conv3dGeometry g;
  g.batch = x.shape[0];
  g.in_channels = x.shape[1];
  g.out_channels = k.shape[0];
  g.in_d = x.shape[2];
  g.in_h = x.shape[3];
  g.in_w = x.shape[4];
  g.k_d = k.shape[2];
  g.k_h = k.shape[3];
  g.k_w = k.shape[4];
  g.stride = stride;
  g.padding = padding;

  Shape out_shape{g.batch, g.out_channels, g.out_d(), g.out_h(), g.out_w()};
  std::vector<T> out(shape_numel(out_shape));
  kernels::conv3d_forward<T>(g, x.data, k.data,
                             has_bias ? std::span<const T>(bias.node()->data) : std::span<const T>{},
                             out);

  std::vector<NodePtr<T>> inputs{input.node(), kernel.node()};
  if (has_bias) inputs.push_back(bias.node());
  return make_result<T>(std::move(out_shape), std::move(out), "conv3d", std::move(inputs),
                        [g, has_bias](Node<T>& self) {
                          Node<T>& xi = *self.inputs[0];
                          Node<T>& ki = *self.inputs[1];
                          if (xi.requires_grad) {
                            kernels::conv3d_backward_input<T>(g, self.grad, ki.data,
                                                              xi.grad_buffer());
                          }
                          std::span<T> gk, gb;
                          if (ki.requires_grad) gk = ki.grad_buffer();
                          if (has_bias && self.inputs[2]->requires_grad) {
                            gb = self.inputs[2]->grad_buffer();
                          }
                          if (!gk.empty() || !gb.empty()) {
                            kernels::conv3d_backward_params<T>(g, self.grad, xi.data, gk, gb);
                          }
                        });
}

template <typename T>
Tensor<T> upsample_nearest3d(const Tensor<T>& input, std::size_t factor) {
  const auto& x = require(input, "upsample_nearest3d");
  require_rank(x.shape, 5, "upsample_nearest3d", "input");
  if (factor < 2) {
    throw TensorError("upsample_nearest3d: factor must be >= 2, got " + std::to_string(factor));
  }
  const std::size_t planes = x.shape[0] * x.shape[1];
  const std::size_t d = x.shape[2], h = x.shape[3], w = x.shape[4];
  Shape out_shape{x.shape[0], x.shape[1], d * factor, h * factor, w * factor};
  std::vector<T> out(shape_numel(out_shape));
  kernels::upsample_nearest3d_forward<T>(planes, d, h, w, factor, x.data, out);
  return make_result<T>(std::move(out_shape), std::move(out), "upsample_nearest3d",
                        {input.node()}, [planes, d, h, w, factor](Node<T>& self) {
                          kernels::upsample_nearest3d_backward<T>(
                              planes, d, h, w, factor, self.grad, self.inputs[0]->grad_buffer());
                        });
}

template <typename T>
Tensor<T> pool_avg3d(const Tensor<T>& input, std::size_t window) {
  const auto& x = require(input, "pool_avg3d");
  require_rank(x.shape, 5, "pool_avg3d", "input");
  if (window < 1) throw TensorError("pool_avg3d: window must be >= 1");
  for (std::size_t a = 0; a < 3; ++a) {
    if (x.shape[2 + a] % window != 0) {
      throw ShapeError(std::string("pool_avg3d: spatial axis ") + kSpatialAxis[a] + " of size " +
                       std::to_string(x.shape[2 + a]) + " is not divisible by window " +
                       std::to_string(window));
    }
  }
  const std::size_t planes = x.shape[0] * x.shape[1];
  const std::size_t d = x.shape[2], h = x.shape[3], w = x.shape[4];
  Shape out_shape{x.shape[0], x.shape[1], d / window, h / window, w / window};
  std::vector<T> out(shape_numel(out_shape));
  kernels::pool_avg3d_forward<T>(planes, d, h, w, window, x.data, out);
  return make_result<T>(std::move(out_shape), std::move(out), "pool_avg3d", {input.node()},
                        [planes, d, h, w, window](Node<T>& self) {
                          kernels::pool_avg3d_backward<T>(planes, d, h, w, window, self.grad,
                                                          self.inputs[0]->grad_buffer());
                        });
}

template <typename T>
Tensor<T> global_avg_pool3d(const Tensor<T>& input) {
  const auto& x = require(input, "global_avg_pool3d");
  require_rank(x.shape, 5, "global_avg_pool3d", "input");
  const std::size_t planes = x.shape[0] * x.shape[1];
  const std::size_t vol = x.shape[2] * x.shape[3] * x.shape[4];
  std::vector<T> out(planes);
  for (std::size_t p = 0; p < planes; ++p) {
    double s = 0.0;
    for (std::size_t i = 0; i < vol; ++i) s += x.data[p * vol + i];
    out[p] = static_cast<T>(s / static_cast<double>(vol));
  }
  return make_result<T>(Shape{x.shape[0], x.shape[1]}, std::move(out), "global_avg_pool3d",
                        {input.node()}, [planes, vol](Node<T>& self) {
                          auto& gx = self.inputs[0]->grad_buffer();
                          const T inv = T(1) / static_cast<T>(vol);
                          for (std::size_t p = 0; p < planes; ++p) {
                            const T g = self.grad[p] * inv;
                            for (std::size_t i = 0; i < vol; ++i) gx[p * vol + i] += g;
                          }
                        });
}

template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  const auto& x = require(a, "concat_channels");
  const auto& y = require(b, "concat_channels");
  require_rank(x.shape, 5, "concat_channels", "first input");
  require_rank(y.shape, 5, "concat_channels", "second input");
  for (std::size_t axis : {0, 2, 3, 4}) {
    if (x.shape[axis] != y.shape[axis]) {
      throw ShapeError("concat_channels: axis " + std::to_string(axis) + " differs: " +
                       shape_string(x.shape) + " vs " + shape_string(y.shape));
    }
  }
  const std::size_t n = x.shape[0];
  const std::size_t vol = x.shape[2] * x.shape[3] * x.shape[4];
  const std::size_t ca = x.shape[1] * vol, cb = y.shape[1] * vol;
  std::vector<T> out(n * (ca + cb));
  for (std::size_t i = 0; i < n; ++i) {
    std::copy_n(x.data.begin() + i * ca, ca, out.begin() + i * (ca + cb));
    std::copy_n(y.data.begin() + i * cb, cb, out.begin() + i * (ca + cb) + ca);
  }
  Shape shape{n, x.shape[1] + y.shape[1], x.shape[2], x.shape[3], x.shape[4]};
  return make_result<T>(std::move(shape), std::move(out), "concat_channels",
                        {a.node(), b.node()}, [n, ca, cb](Node<T>& self) {
                          Node<T>& xa = *self.inputs[0];
                          Node<T>& xb = *self.inputs[1];
                          for (std::size_t i = 0; i < n; ++i) {
                            const T* g = self.grad.data() + i * (ca + cb);
                            if (xa.requires_grad) {
                              T* d = xa.grad_buffer().data() + i * ca;
                              for (std::size_t j = 0; j < ca; ++j) d[j] += g[j];
                            }
                            if (xb.requires_grad) {
                              T* d = xb.grad_buffer().data() + i * cb;
                              for (std::size_t j = 0; j < cb; ++j) d[j] += g[ca + j];
                            }
                          }
                        });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  const auto& n = require(x, "relu");
  std::vector<T> out(n.data.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = n.data[i] > T(0) ? n.data[i] : T(0);
  return make_result<T>(n.shape, std::move(out), "relu", {x.node()}, [](Node<T>& self) {
    Node<T>& in = *self.inputs[0];
    auto& g = in.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (in.data[i] > T(0)) g[i] += self.grad[i];
    }
  });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  const auto& n = require(x, "sigmoid");
  std::vector<T> out(n.data.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const T v = n.data[i];
    if (v >= T(0)) {
      out[i] = T(1) / (T(1) + std::exp(-v));
    } else {
      const T e = std::exp(v);
      out[i] = e / (T(1) + e);
    }
  }
  return make_result<T>(n.shape, std::move(out), "sigmoid", {x.node()}, [](Node<T>& self) {
    auto& g = self.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const T s = self.data[i];
      g[i] += self.grad[i] * s * (T(1) - s);
    }
  });
}

template <typename T>
Tensor<T> clamp(const Tensor<T>& x, T lo, T hi) {
  const auto& n = require(x, "clamp");
  if (!(lo <= hi)) throw TensorError("clamp: lo must not exceed hi");
  std::vector<T> out(n.data.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::clamp(n.data[i], lo, hi);
  return make_result<T>(n.shape, std::move(out), "clamp", {x.node()}, [lo, hi](Node<T>& self) {
    Node<T>& in = *self.inputs[0];
    auto& g = in.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (in.data[i] >= lo && in.data[i] <= hi) g[i] += self.grad[i];
    }
  });
}

template <typename T>
Tensor<T> log(const Tensor<T>& x) {
  const auto& n = require(x, "log");
  const T floor = static_cast<T>(kLogFloor);
  std::vector<T> out(n.data.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const T v = n.data[i];
    if (!(v > T(0))) throw DomainError("log: argument must be strictly positive", i);
    out[i] = std::log(std::max(v, floor));
  }
  return make_result<T>(n.shape, std::move(out), "log", {x.node()}, [floor](Node<T>& self) {
    Node<T>& in = *self.inputs[0];
    auto& g = in.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (in.data[i] >= floor) g[i] += self.grad[i] / in.data[i];
    }
  });
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  const auto& x = require(a, "add");
  const auto& y = require(b, "add");
  require_same(x.shape, y.shape, "add");
  std::vector<T> out(x.data.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.data[i] + y.data[i];
  return make_result<T>(x.shape, std::move(out), "add", {a.node(), b.node()}, [](Node<T>& self) {
    for (auto& in : self.inputs) {
      if (!in->requires_grad) continue;
      auto& g = in->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  const auto& x = require(a, "sub");
  const auto& y = require(b, "sub");
  require_same(x.shape, y.shape, "sub");
  std::vector<T> out(x.data.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.data[i] - y.data[i];
  return make_result<T>(x.shape, std::move(out), "sub", {a.node(), b.node()}, [](Node<T>& self) {
    if (self.inputs[0]->requires_grad) {
      auto& g = self.inputs[0]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (self.inputs[1]->requires_grad) {
      auto& g = self.inputs[1]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  const auto& x = require(a, "mul");
  const auto& y = require(b, "mul");
  require_same(x.shape, y.shape, "mul");
  std::vector<T> out(x.data.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.data[i] * y.data[i];
  return make_result<T>(x.shape, std::move(out), "mul", {a.node(), b.node()}, [](Node<T>& self) {
    Node<T>& xa = *self.inputs[0];
    Node<T>& xb = *self.inputs[1];
    if (xa.requires_grad) {
      auto& g = xa.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * xb.data[i];
    }
    if (xb.requires_grad) {
      auto& g = xb.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * xa.data[i];
    }
  });
}

template <typename T>
Tensor<T> scalar_mul(const Tensor<T>& a, T c) {
  const auto& x = require(a, "scalar_mul");
  std::vector<T> out(x.data.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.data[i] * c;
  return make_result<T>(x.shape, std::move(out), "scalar_mul", {a.node()}, [c](Node<T>& self) {
    auto& g = self.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * c;
  });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T c) {
  const auto& x = require(a, "add_scalar");
  std::vector<T> out(x.data.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.data[i] + c;
  return make_result<T>(x.shape, std::move(out), "add_scalar", {a.node()}, [](Node<T>& self) {
    auto& g = self.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  const auto& n = require(x, "mean");
  if (n.data.empty()) throw ShapeError("mean: empty tensor");
  double s = 0.0;
  for (T v : n.data) s += v;
  const std::size_t count = n.data.size();
  std::vector<T> out{static_cast<T>(s / static_cast<double>(count))};
  return make_result<T>(Shape{}, std::move(out), "mean", {x.node()}, [count](Node<T>& self) {
    auto& g = self.inputs[0]->grad_buffer();
    const T v = self.grad[0] / static_cast<T>(count);
    for (auto& gi : g) gi += v;
  });
}

template <typename T>
Tensor<T> mse(const Tensor<T>& a, const Tensor<T>& b) {
  const auto& x = require(a, "mse");
  const auto& y = require(b, "mse");
  require_same(x.shape, y.shape, "mse");
  if (x.data.empty()) throw ShapeError("mse: empty tensors");
  double s = 0.0;
  for (std::size_t i = 0; i < x.data.size(); ++i) {
    const double d = static_cast<double>(x.data[i]) - static_cast<double>(y.data[i]);
    s += d * d;
  }
  const std::size_t count = x.data.size();
  std::vector<T> out{static_cast<T>(s / static_cast<double>(count))};
  return make_result<T>(Shape{}, std::move(out), "mse", {a.node(), b.node()},
                        [count](Node<T>& self) {
                          Node<T>& xa = *self.inputs[0];
                          Node<T>& xb = *self.inputs[1];
                          const T scale = T(2) * self.grad[0] / static_cast<T>(count);
                          if (xa.requires_grad) {
                            auto& g = xa.grad_buffer();
                            for (std::size_t i = 0; i < count; ++i)
                              g[i] += scale * (xa.data[i] - xb.data[i]);
                          }
                          if (xb.requires_grad) {
                            auto& g = xb.grad_buffer();
                            for (std::size_t i = 0; i < count; ++i)
                              g[i] -= scale * (xa.data[i] - xb.data[i]);
                          }
                        });
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  const auto& xn = require(x, "linear");
  const auto& wn = require(weight, "linear");
  require_rank(xn.shape, 2, "linear", "input");
  require_rank(wn.shape, 2, "linear", "weight");
  const std::size_t n = xn.shape[0], f = xn.shape[1], o = wn.shape[0];
  if (wn.shape[1] != f) {
    throw ShapeError("linear: input feature axis (1) has " + std::to_string(f) +
                     " features but weight expects " + std::to_string(wn.shape[1]));
  }
  const bool has_bias = bias.defined();
  if (has_bias && bias.shape() != Shape{o}) {
    throw ShapeError("linear: bias shape " + shape_string(bias.shape()) + " does not match " +
                     std::to_string(o) + " outputs");
  }
  std::vector<T> out(n * o);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < o; ++j) {
      T s = has_bias ? bias.data()[j] : T(0);
      for (std::size_t k = 0; k < f; ++k) s += wn.data[j * f + k] * xn.data[i * f + k];
      out[i * o + j] = s;
    }
  }
  std::vector<NodePtr<T>> inputs{x.node(), weight.node()};
  if (has_bias) inputs.push_back(bias.node());
  return make_result<T>(Shape{n, o}, std::move(out), "linear", std::move(inputs),
                        [n, f, o, has_bias](Node<T>& self) {
                          Node<T>& xi = *self.inputs[0];
                          Node<T>& wi = *self.inputs[1];
                          if (xi.requires_grad) {
                            auto& g = xi.grad_buffer();
                            for (std::size_t i = 0; i < n; ++i)
                              for (std::size_t j = 0; j < o; ++j)
                                for (std::size_t k = 0; k < f; ++k)
                                  g[i * f + k] += self.grad[i * o + j] * wi.data[j * f + k];
                          }
                          if (wi.requires_grad) {
                            auto& g = wi.grad_buffer();
                            for (std::size_t i = 0; i < n; ++i)
                              for (std::size_t j = 0; j < o; ++j)
                                for (std::size_t k = 0; k < f; ++k)
                                  g[j * f + k] += self.grad[i * o + j] * xi.data[i * f + k];
                          }
                          if (has_bias && self.inputs[2]->requires_grad) {
                            auto& g = self.inputs[2]->grad_buffer();
                            for (std::size_t i = 0; i < n; ++i)
                              for (std::size_t j = 0; j < o; ++j) g[j] += self.grad[i * o + j];
                          }
                        });
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  const auto& n = require(x, "reshape");
  if (shape_numel(shape) != n.data.size()) {
    throw ShapeError("reshape: cannot view " + shape_string(n.shape) + " as " +
                     shape_string(shape));
  }
  return make_result<T>(std::move(shape), n.data, "reshape", {x.node()}, [](Node<T>& self) {
    auto& g = self.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

#define NOISEMAP_INSTANTIATE(T)                                                                 \
  template struct Node<T>;                                                                      \
  template class Tensor<T>;                                                                     \
  template void backward<T>(const Tensor<T>&);                                                  \
  template Tensor<T> conv3d<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,            \
                               std::size_t, std::size_t);                                       \
  template Tensor<T> upsample_nearest3d<T>(const Tensor<T>&, std::size_t);                      \
  template Tensor<T> pool_avg3d<T>(const Tensor<T>&, std::size_t);                              \
  template Tensor<T> global_avg_pool3d<T>(const Tensor<T>&);                                    \
  template Tensor<T> concat_channels<T>(const Tensor<T>&, const Tensor<T>&);                    \
  template Tensor<T> relu<T>(const Tensor<T>&);                                                 \
  template Tensor<T> sigmoid<T>(const Tensor<T>&);                                              \
  template Tensor<T> clamp<T>(const Tensor<T>&, T, T);                                          \
  template Tensor<T> log<T>(const Tensor<T>&);                                                  \
  template Tensor<T> add<T>(const Tensor<T>&, const Tensor<T>&);                                \
  template Tensor<T> sub<T>(const Tensor<T>&, const Tensor<T>&);                                \
  template Tensor<T> mul<T>(const Tensor<T>&, const Tensor<T>&);                                \
  template Tensor<T> scalar_mul<T>(const Tensor<T>&, T);                                        \
  template Tensor<T> add_scalar<T>(const Tensor<T>&, T);                                        \
  template Tensor<T> mean<T>(const Tensor<T>&);                                                 \
  template Tensor<T> mse<T>(const Tensor<T>&, const Tensor<T>&);                                \
  template Tensor<T> linear<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);           \
  template Tensor<T> reshape<T>(const Tensor<T>&, Shape);

NOISEMAP_INSTANTIATE(float)
NOISEMAP_INSTANTIATE(double)

#undef NOISEMAP_INSTANTIATE

}  // namespace noisemap
