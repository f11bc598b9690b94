#pragma once

#include <algorithm>
#include <cmath>
#include <random>
#include <string>
#include <type_traits>
#include <vector>

#include "mvt/core/ops.hpp"
#include "mvt/core/rng.hpp"
#include "mvt/core/tape.hpp"
#include "mvt/core/tensor.hpp"

namespace mvt::test {

template <class T>
Tensor<T> random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor<T> t(std::move(shape));
  std::uniform_real_distribution<double> u(lo, hi);
  for (auto& v : t.data()) v = static_cast<T>(u(rng));
  return t;
}

template <class V>
struct scalar_of;
template <class U>
struct scalar_of<std::vector<Var<U>>> {
  using type = U;
};
template <class U>
struct scalar_of<Tape<U>> {
  using type = U;
};
template <class V>
using scalar_t = typename scalar_of<std::remove_cvref_t<V>>::type;

// Relative-error bound per analytic precision. The numeric side is always
// central differences of the same function evaluated in double: differences
// taken in float bottom out near 2e-3 on the full model from forward
// rounding alone, which would hide real backward errors at this bound.
template <class T>
struct Tolerance;
template <>
struct Tolerance<float> {
  static constexpr double max_rel = 1e-3;
};
template <>
struct Tolerance<double> {
  static constexpr double max_rel = 1e-6;
};

inline constexpr double fd_step = 1e-4;

struct GradReport {
  double max_rel = 0.0;
  std::string where;
  std::size_t checked = 0;
};

// |analytic - numeric| / max(|analytic|, |numeric|, floor). The floor keeps
// entries whose true gradient is ~0 from dividing rounding noise by ~0.
inline double rel_error(double a, double n, double floor) {
  return std::abs(a - n) / std::max({std::abs(a), std::abs(n), floor});
}

// Five-point central difference of f at the current value of x.
template <class F>
double central_difference(double& x, F&& f) {
  const double orig = x, h = fd_step;
  auto at = [&](double k) {
    x = orig + k * h;
    return f();
  };
  const double d = (-at(2) + 8.0 * at(1) - 8.0 * at(-1) + at(-2)) / (12.0 * h);
  x = orig;
  return d;
}

/// Finite-difference check of every entry of every input. `build` is a
/// generic callable (Tape<U>&, std::vector<Var<U>>&) -> Var<U>; its output is
/// reduced to a scalar through a fixed random projection so that every
/// output entry contributes.
template <class T, class F>
GradReport grad_check(std::vector<Tensor<T>> inputs, F build, std::uint64_t seed = 7,
                      double floor = 1e-2) {
  Tape<T> tape;
  std::vector<Var<T>> vars;
  for (auto& x : inputs) vars.push_back(tape.variable(x));
  auto out = build(tape, vars);
  Rng rng(seed);
  const auto proj = random_tensor<double>(out.value().shape(), rng, 0.5, 1.5);
  tape.backward(sum(mul(out, tape.constant(proj.template cast<T>()))));

  std::vector<Tensor<double>> ref;
  for (auto& x : inputs) ref.push_back(x.template cast<double>());
  auto eval = [&]() {
    Tape<double> t;
    std::vector<Var<double>> vs;
    for (auto& x : ref) vs.push_back(t.constant(x));
    return sum(mul(build(t, vs), t.constant(proj))).value()[0];
  };

  GradReport rep;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const auto analytic = vars[i].grad();
    for (std::size_t j = 0; j < ref[i].size(); ++j) {
      const double numeric = central_difference(ref[i][j], eval);
      const double e = rel_error(static_cast<double>(analytic[j]), numeric, floor);
      ++rep.checked;
      if (e > rep.max_rel) {
        rep.max_rel = e;
        rep.where = "input " + std::to_string(i) + " entry " + std::to_string(j);
      }
    }
  }
  return rep;
}

/// Same check over model parameters. `model` has precision T, `ref` is a
/// double instance of the same architecture whose values are overwritten
/// with model's. `loss` is generic over (Model&, Tape<U>&) -> scalar Var<U>.
template <class T, class M, class R, class F>
GradReport param_grad_check(M& model, R& ref, F loss, double floor = 1e-2) {
  auto params = model.parameters();
  auto ref_params = ref.parameters();
  if (params.size() != ref_params.size()) throw ShapeError("param_grad_check: layouts differ");
  for (std::size_t i = 0; i < params.size(); ++i) {
    ref_params[i]->value = params[i]->value.template cast<double>();
    params[i]->zero_grad();
  }
  {
    Tape<T> tape;
    tape.backward(loss(model, tape));
  }
  auto eval = [&]() {
    Tape<double> t;
    return loss(ref, t).value()[0];
  };
  GradReport rep;
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& v = ref_params[i]->value;
    for (std::size_t j = 0; j < v.size(); ++j) {
      const double numeric = central_difference(v[j], eval);
      const double e = rel_error(static_cast<double>(params[i]->grad[j]), numeric, floor);
      ++rep.checked;
      if (e > rep.max_rel) {
        rep.max_rel = e;
        rep.where = params[i]->name + "[" + std::to_string(j) + "]";
      }
    }
  }
  return rep;
}

}  // namespace mvt::test
