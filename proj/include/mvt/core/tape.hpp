#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <optional>
#include <string>
#include <utility>

#include "mvt/core/error.hpp"
#include "mvt/core/tensor.hpp"

namespace mvt {

/// A trainable tensor living outside any tape. Gradients from every tape that
/// references it accumulate into `grad` until `zero_grad()`.
template <std::floating_point T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;
  bool trainable = true;
  bool decay = true;  // subject to decoupled weight decay

  Parameter() = default;
  Parameter(std::string n, Tensor<T> v, bool apply_decay = true)
      : name(std::move(n)), value(std::move(v)), grad(value.shape()), decay(apply_decay) {}

  void zero_grad() { grad = Tensor<T>(value.shape()); }
};

template <std::floating_point T>
class Tape;

/// Handle to a value recorded on a tape.
template <std::floating_point T>
class Var {
 public:
  Var() = default;
  Var(Tape<T>* tape, std::size_t id) : tape_(tape), id_(id) {}

  [[nodiscard]] const Tensor<T>& value() const;
  /// Gradient after backward(); zeros when the value did not influence the loss.
  [[nodiscard]] Tensor<T> grad() const;
  [[nodiscard]] const Shape& shape() const { return value().shape(); }
  [[nodiscard]] bool needs_grad() const;
  [[nodiscard]] Tape<T>& tape() const { return *tape_; }
  [[nodiscard]] std::size_t id() const noexcept { return id_; }

 private:
  Tape<T>* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Ordered record of primitive operations for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so ids are a topological order.
/// A tape supports exactly one backward() call.
template <std::floating_point T>
class Tape {
 public:
  using Backward = std::function<void(Tape&, const Tensor<T>& out_grad)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> constant(Tensor<T> value) { return push(std::move(value), false, nullptr); }

  /// Leaf whose gradient is kept on the tape (inputs under test, masks, ...).
  Var<T> variable(Tensor<T> value) { return push(std::move(value), true, nullptr); }

  /// Leaf bound to a parameter; frozen parameters enter as constants.
  Var<T> param(Parameter<T>& p) {
    auto v = push(p.value, p.trainable, nullptr);
    if (p.trainable) {
      nodes_[v.id()].param = &p;
    }
    return v;
  }

  Var<T> push(Tensor<T> value, bool needs_grad, Backward backward) {
    nodes_.push_back(Node{std::move(value), std::nullopt, needs_grad, nullptr, std::move(backward)});
    return Var<T>(this, nodes_.size() - 1);
  }

  [[nodiscard]] const Tensor<T>& value(std::size_t id) const { return nodes_.at(id).value; }
  [[nodiscard]] bool needs_grad(std::size_t id) const { return nodes_.at(id).needs_grad; }
  [[nodiscard]] std::size_t size() const noexcept { return nodes_.size(); }
  [[nodiscard]] bool backward_done() const noexcept { return backward_done_; }

  /// Gradient buffer of a node, allocated as zeros on first use.
  Tensor<T>& grad(std::size_t id) {
    auto& n = nodes_.at(id);
    if (!n.grad) {
      n.grad.emplace(n.value.shape());
    }
    return *n.grad;
  }

  [[nodiscard]] Tensor<T> grad_or_zero(std::size_t id) const {
    const auto& n = nodes_.at(id);
    return n.grad ? *n.grad : Tensor<T>(n.value.shape());
  }

  void backward(const Var<T>& loss) {
    if (&loss.tape() != this || loss.id() >= nodes_.size()) {
      throw TapeError("backward: loss was not recorded on this tape");
    }
    if (backward_done_) {
      throw TapeError("backward: already called on this tape");
    }
    if (nodes_[loss.id()].value.size() != 1) {
      throw ShapeError("backward: loss must be a scalar, got " +
                       shape_str(nodes_[loss.id()].value.shape()));
    }
    backward_done_ = true;
    if (!nodes_[loss.id()].needs_grad) {
      return;
    }
    grad(loss.id()).fill(T{1});
    for (std::size_t i = loss.id() + 1; i-- > 0;) {
      auto& n = nodes_[i];
      if (!n.needs_grad || !n.grad) {
        continue;
      }
      if (n.backward) {
        n.backward(*this, *n.grad);
      }
      if (n.param != nullptr) {
        if (!n.grad->all_finite()) {
          throw NumericError("non-finite gradient for parameter " + n.param->name);
        }
        auto dst = n.param->grad.data();
        auto src = n.grad->data();
        for (std::size_t k = 0; k < dst.size(); ++k) {
          dst[k] += src[k];
        }
      }
    }
  }

 private:
  struct Node {
    Tensor<T> value;
    std::optional<Tensor<T>> grad;
    bool needs_grad;
    Parameter<T>* param;
    Backward backward;
  };

  std::deque<Node> nodes_;
  bool backward_done_ = false;
};

template <std::floating_point T>
const Tensor<T>& Var<T>::value() const {
  return tape_->value(id_);
}

template <std::floating_point T>
Tensor<T> Var<T>::grad() const {
  return tape_->grad_or_zero(id_);
}

template <std::floating_point T>
bool Var<T>::needs_grad() const {
  return tape_->needs_grad(id_);
}

}  // namespace mvt
