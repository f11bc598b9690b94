#pragma once

#include <span>

#include "mvt/core/ops.hpp"
#include "mvt/core/tape.hpp"
#include "mvt/core/tensor.hpp"

namespace mvt {

/// L_G = var(softmax(logits_gm)) + |mean(M_p) - m|, averaged over the batch.
///
/// `logits` is [B x K], `patch_masks` is [B x N]; a single sample may be
/// passed as [K] and [N].
template <std::floating_point T>
Var<T> generator_loss(const Var<T>& logits, const Var<T>& patch_masks, double ratio) {
  if (logits.value().rows() != patch_masks.value().rows()) {
    throw ShapeError("generator_loss: logits and masks disagree on batch size");
  }
  auto spread = mean(variance(softmax(logits)));
  auto area = mean(abs(add_scalar(row_mean(patch_masks), static_cast<T>(-ratio))));
  return add(spread, area);
}

/// L_D = CE(logits_gm) + CE(logits_rm), each averaged over the batch.
template <std::floating_point T>
Var<T> discriminator_loss(const Var<T>& logits_gm, const Var<T>& logits_rm,
                          std::span<const int> labels) {
  require_same_shape(logits_gm.value(), logits_rm.value(), "discriminator_loss");
  return add(mean(cross_entropy(logits_gm, labels)), mean(cross_entropy(logits_rm, labels)));
}

// Single-sample forward-only conveniences.

template <std::floating_point T>
T generator_loss(const Tensor<T>& logits, const Tensor<T>& patch_masks, double ratio) {
  Tape<T> tape;
  auto l = tape.constant(logits.reshaped({1, logits.size()}));
  auto m = tape.constant(patch_masks.reshaped({1, patch_masks.size()}));
  return generator_loss(l, m, ratio).value().item();
}

template <std::floating_point T>
T discriminator_loss(const Tensor<T>& logits_gm, const Tensor<T>& logits_rm, int label) {
  Tape<T> tape;
  const int labels[1] = {label};
  auto gm = tape.constant(logits_gm.reshaped({1, logits_gm.size()}));
  auto rm = tape.constant(logits_rm.reshaped({1, logits_rm.size()}));
  return discriminator_loss(gm, rm, std::span<const int>(labels)).value().item();
}

}  // namespace mvt
