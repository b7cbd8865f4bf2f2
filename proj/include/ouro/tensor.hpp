#pragma once

#include <Eigen/Core>

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "ouro/errors.hpp"

namespace ouro {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

std::string shape_str(const Shape& shape);
Index shape_numel(const Shape& shape);

template <typename T>
using Vec = Eigen::Matrix<T, Eigen::Dynamic, 1>;

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;

template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

template <typename T>
struct TensorNode {
  Shape shape;
  Vec<T> value;
  Vec<T> grad;  // empty until a backward pass reaches this node
  bool requires_grad = false;
};

template <typename T>
class Tape;

// Dense row-major tensor handle. Copies share storage; the value of a tensor
// produced by an op is never changed afterwards. Parameters are the one
// exception: the optimizer updates them in place between tapes.
template <typename T>
class Tensor {
 public:
  using Scalar = T;

  Tensor() = default;

  explicit Tensor(Shape shape, bool requires_grad = false)
      : node_(std::make_shared<TensorNode<T>>()) {
    const Index n = checked_numel(shape);
    node_->shape = std::move(shape);
    node_->value = Vec<T>::Zero(n);
    node_->requires_grad = requires_grad;
  }

  Tensor(Shape shape, Vec<T> value, bool requires_grad = false)
      : node_(std::make_shared<TensorNode<T>>()) {
    const Index n = checked_numel(shape);
    if (value.size() != n) {
      throw DimensionError("tensor data length " + std::to_string(value.size()) +
                           " does not match shape " + shape_str(shape));
    }
    node_->shape = std::move(shape);
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
  }

  Tensor(Shape shape, std::initializer_list<T> values, bool requires_grad = false)
      : Tensor(std::move(shape), to_vec(values), requires_grad) {}

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return Tensor(std::move(shape), requires_grad);
  }

  static Tensor full(Shape shape, T fill, bool requires_grad = false) {
    Tensor t(std::move(shape), requires_grad);
    t.node_->value.setConstant(fill);
    return t;
  }

  static Tensor scalar(T v, bool requires_grad = false) {
    return full(Shape{1}, v, requires_grad);
  }

  bool defined() const { return static_cast<bool>(node_); }

  const Shape& shape() const { return node_->shape; }
  Index rank() const { return static_cast<Index>(node_->shape.size()); }
  Index numel() const { return node_->value.size(); }

  // Negative axes count from the back.
  Index dim(Index axis) const {
    const Index r = rank();
    const Index a = axis < 0 ? axis + r : axis;
    if (a < 0 || a >= r) {
      throw DimensionError("axis " + std::to_string(axis) + " out of range for shape " +
                           shape_str(shape()));
    }
    return node_->shape[static_cast<std::size_t>(a)];
  }

  const Vec<T>& value() const { return node_->value; }

  // In-place access for initialisation and optimizer updates only.
  Vec<T>& mutable_value() const { return node_->value; }

  const T* data() const { return node_->value.data(); }

  T item() const {
    if (numel() != 1) {
      throw ContractError("item() on tensor of shape " + shape_str(shape()));
    }
    return node_->value[0];
  }

  T operator[](Index i) const { return node_->value[i]; }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool flag) const { node_->requires_grad = flag; }

  bool has_grad() const { return node_->grad.size() != 0; }
  const Vec<T>& grad() const { return node_->grad; }
  void zero_grad() const { node_->grad.resize(0); }

  // Allocates a zero gradient on first use; backward rules add into it.
  Vec<T>& grad_accumulator() const {
    if (node_->grad.size() == 0) node_->grad = Vec<T>::Zero(numel());
    return node_->grad;
  }

  // Fresh leaf holding a copy of the value.
  Tensor detach(bool requires_grad = false) const {
    return Tensor(shape(), value(), requires_grad);
  }

  const std::shared_ptr<TensorNode<T>>& node() const { return node_; }

  bool same_node(const Tensor& other) const { return node_ == other.node_; }

 private:
  static Index checked_numel(const Shape& shape) {
    for (Index e : shape) {
      if (e <= 0) throw DimensionError("non-positive extent in shape " + shape_str(shape));
    }
    return shape_numel(shape);
  }

  static Vec<T> to_vec(std::initializer_list<T> values) {
    Vec<T> v(static_cast<Index>(values.size()));
    Index i = 0;
    for (T x : values) v[i++] = x;
    return v;
  }

  std::shared_ptr<TensorNode<T>> node_;
};

// Ordered record of differentiable operations. Ops append to the innermost
// live Tape on the current thread when any input requires a gradient;
// records are therefore in topological order by construction. Without a
// live tape ops run in inference mode and outputs never require grads.
template <typename T>
class Tape {
 public:
  // Receives the op output; its grad() holds d loss / d output.
  using BackwardFn = std::function<void(const Tensor<T>& out)>;

  Tape() : previous_(current_) { current_ = this; }
  ~Tape() { current_ = previous_; }

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* active() { return current_; }

  std::size_t size() const { return records_.size(); }

  void record(std::vector<Tensor<T>> inputs, Tensor<T> output, BackwardFn fn) {
    records_.push_back(Record{std::move(inputs), std::move(output), std::move(fn)});
  }

  // Seeds d loss / d loss = 1 and runs every record in reverse. Gradients
  // accumulate, so a tensor used twice receives the sum of both paths.
  void backward(const Tensor<T>& loss) {
    if (!loss.defined() || loss.numel() != 1) {
      throw ContractError("backward() needs a scalar loss, got shape " +
                          (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
    }
    if (!loss.requires_grad()) {
      throw ContractError("backward() on a loss that does not depend on any trainable tensor");
    }
    loss.grad_accumulator()[0] += T(1);
    for (auto it = records_.rbegin(); it != records_.rend(); ++it) {
      if (!it->output.has_grad()) continue;
      it->backward(it->output);
    }
  }

 private:
  struct Record {
    std::vector<Tensor<T>> inputs;
    Tensor<T> output;
    BackwardFn backward;
  };

  std::vector<Record> records_;
  Tape* previous_;
  static inline thread_local Tape* current_ = nullptr;
};

template <typename T>
struct NamedTensor {
  std::string name;
  Tensor<T> tensor;
};

template <typename T>
using NamedTensors = std::vector<NamedTensor<T>>;

template <typename T>
bool any_requires_grad(std::initializer_list<Tensor<T>> inputs) {
  for (const auto& t : inputs) {
    if (t.requires_grad()) return true;
  }
  return false;
}

// Wraps a freshly computed value as an op output and, if a tape is live and
// some input is differentiable, records `fn` as its backward rule.
template <typename T, typename Fn>
Tensor<T> make_op_result(Shape shape, Vec<T> value, std::initializer_list<Tensor<T>> inputs, Fn&& fn) {
  Tape<T>* tape = Tape<T>::active();
  const bool track = tape != nullptr && any_requires_grad(inputs);
  Tensor<T> out(std::move(shape), std::move(value), track);
  if (track) tape->record(std::vector<Tensor<T>>(inputs), out, std::forward<Fn>(fn));
  return out;
}

}  // namespace ouro
