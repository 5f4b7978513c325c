#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

namespace mapworld::ad {

template <typename T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// A named trainable tensor with its accumulated gradient.
template <typename T>
struct Parameter {
  std::string name;
  Matrix<T> value;
  Matrix<T> grad;
  bool decay = true;  // subject to AdamW weight decay

  void zero_grad() { grad.setZero(value.rows(), value.cols()); }
};

template <typename T>
class Tape;

/// Handle to a node on a Tape. Cheap to copy; valid while its tape lives.
template <typename T>
class Var {
 public:
  Var() = default;
  Var(Tape<T>* tape, int id) : tape_(tape), id_(id) {}

  const Matrix<T>& value() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  T scalar() const { return value()(0, 0); }
  bool requires_grad() const;

  Tape<T>* tape() const { return tape_; }
  int id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  Tape<T>* tape_ = nullptr;
  int id_ = -1;
};

/// Reverse-mode autodiff tape. Nodes are appended in evaluation order, so a
/// reverse sweep over ids is a valid topological order. With recording off the
/// tape only evaluates (inference mode) and stores no backward closures.
template <typename T>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, const Matrix<T>& out_grad)>;

  explicit Tape(bool recording = true) : recording_(recording) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return recording_; }

  Var<T> constant(Matrix<T> value) { return push(std::move(value), false, nullptr); }

  /// Leaf bound to a parameter; backward() adds its gradient into `p.grad`.
  Var<T> parameter(Parameter<T>& p) {
    Var<T> v = push(p.value, recording_, nullptr);
    nodes_[static_cast<std::size_t>(v.id())].param = &p;
    return v;
  }

  Var<T> push(Matrix<T> value, bool requires_grad, BackwardFn fn) {
    Node n;
    n.value = std::move(value);
    n.requires_grad = recording_ && requires_grad;
    if (n.requires_grad) n.backward = std::move(fn);
    nodes_.push_back(std::move(n));
    return Var<T>(this, static_cast<int>(nodes_.size()) - 1);
  }

  const Matrix<T>& value(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }
  bool requires_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].requires_grad; }

  /// Adds `g` into the gradient of node `id` (no-op for constants).
  template <typename Derived>
  void accumulate(int id, const Eigen::MatrixBase<Derived>& g) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (!n.requires_grad) return;
    if (n.grad.size() == 0) {
      n.grad = g;
    } else {
      n.grad += g;
    }
  }

  /// Mutable gradient buffer of `id`, zero-initialized on first access.
  Matrix<T>& grad_buffer(int id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (n.grad.size() == 0) n.grad.setZero(n.value.rows(), n.value.cols());
    return n.grad;
  }

  /// Gradient of `id` after backward(); empty if nothing flowed into it.
  const Matrix<T>& grad(int id) const { return nodes_[static_cast<std::size_t>(id)].grad; }

  /// Back-propagates from a 1x1 root, accumulating into bound parameters.
  void backward(Var<T> root, T seed = T(1)) {
    if (root.rows() != 1 || root.cols() != 1) {
      throw std::invalid_argument("backward() needs a scalar root");
    }
    if (!root.requires_grad()) return;
    Matrix<T> s(1, 1);
    s(0, 0) = seed;
    accumulate(root.id(), s);
    for (int id = root.id(); id >= 0; --id) {
      Node& n = nodes_[static_cast<std::size_t>(id)];
      if (n.grad.size() == 0) continue;
      if (n.backward) n.backward(*this, n.grad);
      if (n.param != nullptr) {
        if (n.param->grad.size() == 0) n.param->zero_grad();
        n.param->grad += n.grad;
      }
    }
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Matrix<T> value;
    Matrix<T> grad;
    bool requires_grad = false;
    BackwardFn backward;
    Parameter<T>* param = nullptr;
  };

  bool recording_;
  std::vector<Node> nodes_;
};

template <typename T>
const Matrix<T>& Var<T>::value() const {
  return tape_->value(id_);
}

template <typename T>
bool Var<T>::requires_grad() const {
  return tape_->requires_grad(id_);
}

}  // namespace mapworld::ad
