#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "mvt/core/error.hpp"
#include "mvt/core/tape.hpp"
#include "mvt/core/tensor.hpp"

namespace mvt {

struct AdamWConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.05;
  double lr_decay = 0.98;  // multiplied into lr at every epoch boundary

  void validate() const {
    if (!(lr > 0.0) || !(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0) ||
        !(eps > 0.0) || !(weight_decay >= 0.0) || !(lr_decay > 0.0 && lr_decay <= 1.0)) {
      throw ConfigError("adamw: hyperparameters out of range");
    }
  }
};

/// One decoupled-weight-decay Adam update on a flat parameter.
///
/// `step` is the 1-based step index after incrementing. Decay multiplies the
/// parameter by (1 - lr * weight_decay) before the moment step.
template <std::floating_point T>
void adamw_update(std::span<T> param, std::span<const T> grad, std::span<T> m, std::span<T> v,
                  std::uint64_t step, double lr, const AdamWConfig& cfg, bool apply_decay = true) {
  if (grad.size() != param.size() || m.size() != param.size() || v.size() != param.size()) {
    throw ShapeError("adamw: parameter, gradient and moment sizes differ");
  }
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step));
  const T b1 = static_cast<T>(cfg.beta1), b2 = static_cast<T>(cfg.beta2);
  const T shrink = static_cast<T>(apply_decay ? 1.0 - lr * cfg.weight_decay : 1.0);
  const T step_size = static_cast<T>(lr / bc1);
  const T inv_sqrt_bc2 = static_cast<T>(1.0 / std::sqrt(bc2));
  const T eps = static_cast<T>(cfg.eps);
  for (std::size_t i = 0; i < param.size(); ++i) {
    const T g = grad[i];
    m[i] = b1 * m[i] + (T{1} - b1) * g;
    v[i] = b2 * v[i] + (T{1} - b2) * g * g;
    param[i] *= shrink;
    param[i] -= step_size * m[i] / (std::sqrt(v[i]) * inv_sqrt_bc2 + eps);
  }
}

/// AdamW over a fixed list of parameters with per-epoch exponential lr decay.
template <std::floating_point T>
class AdamW {
 public:
  AdamW(std::vector<Parameter<T>*> params, AdamWConfig cfg)
      : params_(std::move(params)), cfg_(cfg), lr_(cfg.lr) {
    cfg_.validate();
    for (auto* p : params_) {
      m_.emplace_back(p->value.shape());
      v_.emplace_back(p->value.shape());
    }
  }

  void zero_grad() {
    for (auto* p : params_) p->zero_grad();
  }

  void step() {
    ++step_;
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& p = *params_[i];
      if (p.grad.shape() != p.value.shape()) {
        throw ShapeError("adamw: gradient shape mismatch for " + p.name);
      }
      adamw_update<T>(p.value.data(), p.grad.data(), m_[i].data(), v_[i].data(), step_, lr_, cfg_,
                      p.decay);
    }
  }

  /// Epoch boundary: lr <- lr * lr_decay.
  void end_epoch() { lr_ *= cfg_.lr_decay; }

  [[nodiscard]] double lr() const noexcept { return lr_; }
  [[nodiscard]] std::uint64_t step_count() const noexcept { return step_; }
  [[nodiscard]] const AdamWConfig& config() const noexcept { return cfg_; }
  [[nodiscard]] std::size_t size() const noexcept { return params_.size(); }
  [[nodiscard]] Parameter<T>& param(std::size_t i) { return *params_[i]; }
  [[nodiscard]] Tensor<T>& first_moment(std::size_t i) { return m_[i]; }
  [[nodiscard]] Tensor<T>& second_moment(std::size_t i) { return v_[i]; }

  /// Restores counters from a checkpoint; moments are restored via the accessors.
  void restore(std::uint64_t step, double lr) {
    if (!(lr > 0.0)) {
      throw ConfigError("adamw: restored learning rate must be positive");
    }
    step_ = step;
    lr_ = lr;
  }

 private:
  std::vector<Parameter<T>*> params_;
  AdamWConfig cfg_;
  std::vector<Tensor<T>> m_;
  std::vector<Tensor<T>> v_;
  std::uint64_t step_ = 0;
  double lr_;
};

}  // namespace mvt
