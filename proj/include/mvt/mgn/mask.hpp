#pragma once

#include <cmath>
#include <cstddef>
#include <string>

#include "mvt/core/error.hpp"
#include "mvt/core/ops.hpp"
#include "mvt/core/rng.hpp"
#include "mvt/core/tensor.hpp"
#include "mvt/vit/patch.hpp"

namespace mvt {

/// Per-patch mask scalars and the assembled full-resolution mask.
///
/// `patch_masks` holds M_p (high = discardable patch); `full_mask` holds
/// 1 - M_p copied over each P x P x C block.
template <std::floating_point T>
struct MaskSet {
  Tensor<T> patch_masks;  // [N]
  Tensor<T> full_mask;    // [H x W x C]
  double ratio_target = 0.0;
};

/// Builds M_f from M_p: every pixel of patch i is 1 - M_p[i].
template <std::floating_point T>
Tensor<T> assemble_mask(const Tensor<T>& patch_masks, const PatchGrid& grid) {
  grid.validate();
  if (patch_masks.size() != grid.count()) {
    throw ShapeError("assemble_mask: " + std::to_string(patch_masks.size()) +
                     " patch masks for a grid of " + std::to_string(grid.count()) + " patches");
  }
  Tensor<T> full({grid.height, grid.width, grid.channels});
  auto out = full.data();
  for (std::size_t r = 0; r < grid.height; ++r) {
    for (std::size_t c = 0; c < grid.width; ++c) {
      const T keep = T{1} - patch_masks[grid.patch_of(r, c)];
      for (std::size_t ch = 0; ch < grid.channels; ++ch) {
        out[(r * grid.width + c) * grid.channels + ch] = keep;
      }
    }
  }
  return full;
}

/// Elementwise product I_M = M_f * I_in.
template <std::floating_point T>
Tensor<T> apply_mask(const Tensor<T>& image, const Tensor<T>& full_mask) {
  require_same_shape(image, full_mask, "apply_mask");
  Tensor<T> out = image;
  auto m = full_mask.data();
  auto o = out.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] *= m[i];
  return out;
}

/// Random patch mask with exactly round(m * N) ones, placed uniformly
/// without replacement.
template <std::floating_point T>
Tensor<T> sample_random_mask(std::size_t n, double ratio, Rng& rng) {
  if (!(ratio > 0.0 && ratio < 1.0)) {
    throw DomainError("sample_random_mask: ratio must lie in (0, 1)");
  }
  const auto count = static_cast<std::size_t>(std::llround(ratio * static_cast<double>(n)));
  if (count == 0 || count == n) {
    throw DomainError("sample_random_mask: ratio " + std::to_string(ratio) + " over " +
                      std::to_string(n) + " patches gives a degenerate mask");
  }
  Tensor<T> mask({n});
  for (auto i : sample_without_replacement(n, count, rng)) mask[i] = T{1};
  return mask;
}

/// Arithmetic mean of M_p.
template <std::floating_point T>
T mask_mean(const Tensor<T>& patch_masks) {
  T s{0};
  for (auto v : patch_masks.data()) s += v;
  return s / static_cast<T>(patch_masks.size());
}

/// The discriminator's view during adversarial training: each patch row
/// scaled by its own M_p, so a patch survives in proportion to how
/// discardable the generator claims it is. The classifier pipeline uses the
/// complement 1 - M_p (see assemble_mask).
template <std::floating_point T>
Var<T> adversarial_view(const Var<T>& patches, const Var<T>& patch_masks) {
  const auto rows = patch_masks.value().size();
  return scale_rows(patches, reshape(patch_masks, {rows}));
}

}  // namespace mvt
