#pragma once

#include <algorithm>
#include <cstddef>
#include <string>

#include "mvt/core/error.hpp"
#include "mvt/core/tensor.hpp"

namespace mvt {

/// Image geometry plus the patch side used to tile it.
struct PatchGrid {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t channels = 0;
  std::size_t patch = 0;

  [[nodiscard]] std::size_t rows() const noexcept { return height / patch; }
  [[nodiscard]] std::size_t cols() const noexcept { return width / patch; }
  [[nodiscard]] std::size_t count() const noexcept { return rows() * cols(); }
  [[nodiscard]] std::size_t patch_dim() const noexcept { return patch * patch * channels; }
  [[nodiscard]] std::size_t pixels() const noexcept { return height * width * channels; }

  void validate() const {
    if (patch == 0 || height == 0 || width == 0 || channels == 0) {
      throw ShapeError("patch grid: dimensions must be positive");
    }
    if (height % patch != 0 || width % patch != 0) {
      throw ShapeError("patch grid: image " + std::to_string(height) + "x" +
                       std::to_string(width) + " not divisible by patch side " +
                       std::to_string(patch));
    }
  }

  /// Patch index containing pixel (r, c).
  [[nodiscard]] std::size_t patch_of(std::size_t r, std::size_t c) const noexcept {
    return (r / patch) * cols() + c / patch;
  }

  friend bool operator==(const PatchGrid&, const PatchGrid&) = default;
};

/// The N flattened P x P x C patches of one image, in row-major patch-grid
/// order, each flattened row-major over (row, col, channel).
template <std::floating_point T>
struct PatchSequence {
  Tensor<T> patches;  // [N x P*P*C]
  PatchGrid grid;

  [[nodiscard]] std::size_t count() const noexcept { return grid.count(); }
};

namespace detail {

template <class T>
void patchify_raw(const T* image, const PatchGrid& g, T* out) {
  const std::size_t p = g.patch, c = g.channels, q = g.patch_dim();
  for (std::size_t pr = 0; pr < g.rows(); ++pr) {
    for (std::size_t pc = 0; pc < g.cols(); ++pc) {
      T* dst = out + (pr * g.cols() + pc) * q;
      for (std::size_t r = 0; r < p; ++r) {
        const T* src = image + ((pr * p + r) * g.width + pc * p) * c;
        std::copy_n(src, p * c, dst + r * p * c);
      }
    }
  }
}

template <class T>
void unpatchify_raw(const T* patches, const PatchGrid& g, T* image) {
  const std::size_t p = g.patch, c = g.channels, q = g.patch_dim();
  for (std::size_t pr = 0; pr < g.rows(); ++pr) {
    for (std::size_t pc = 0; pc < g.cols(); ++pc) {
      const T* src = patches + (pr * g.cols() + pc) * q;
      for (std::size_t r = 0; r < p; ++r) {
        std::copy_n(src + r * p * c, p * c, image + ((pr * p + r) * g.width + pc * p) * c);
      }
    }
  }
}

}  // namespace detail

/// Splits an H x W x C image into N = H*W/P^2 flattened patches.
template <std::floating_point T>
PatchSequence<T> patchify(const Tensor<T>& image, std::size_t patch) {
  if (image.ndim() != 3) {
    throw ShapeError("patchify: expected H x W x C image, got " + shape_str(image.shape()));
  }
  const PatchGrid grid{image.dim(0), image.dim(1), image.dim(2), patch};
  grid.validate();
  Tensor<T> out({grid.count(), grid.patch_dim()});
  detail::patchify_raw(image.data().data(), grid, out.data().data());
  return {std::move(out), grid};
}

template <std::floating_point T>
Tensor<T> unpatchify(const PatchSequence<T>& seq) {
  const auto& g = seq.grid;
  if (seq.patches.size() != g.pixels()) {
    throw ShapeError("unpatchify: patch data does not match grid");
  }
  Tensor<T> image({g.height, g.width, g.channels});
  detail::unpatchify_raw(seq.patches.data().data(), g, image.data().data());
  return image;
}

}  // namespace mvt
