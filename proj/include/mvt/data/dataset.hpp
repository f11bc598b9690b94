#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "mvt/core/error.hpp"
#include "mvt/core/rng.hpp"
#include "mvt/core/tensor.hpp"
#include "mvt/vit/patch.hpp"

namespace mvt {

/// Rectangle on the patch grid, in patch units.
struct PatchRect {
  std::size_t row = 0;
  std::size_t col = 0;
  std::size_t rows = 2;
  std::size_t cols = 2;

  [[nodiscard]] std::vector<std::size_t> indices(std::size_t grid_cols) const {
    std::vector<std::size_t> out;
    for (std::size_t r = row; r < row + rows; ++r) {
      for (std::size_t c = col; c < col + cols; ++c) out.push_back(r * grid_cols + c);
    }
    return out;
  }

  friend bool operator==(const PatchRect&, const PatchRect&) = default;
};

struct DatasetSpec {
  std::size_t classes = 4;
  PatchGrid grid{16, 16, 1, 4};
  std::size_t train_per_class = 512;
  std::size_t test_per_class = 256;
  /// Optional per-class training counts (imbalanced training split).
  std::vector<std::size_t> train_counts;
  double noise_rate = 0.2;
  double occlusion_prob = 0.5;
  std::size_t occluder_min = 2;  // side length in patches
  std::size_t occluder_max = 2;
  /// Informative region per class; empty means the centered 2x2 block for all.
  std::vector<PatchRect> regions;
  double signal = 1.0;
  double background_sigma = 1.0;
  double occluder_level = 2.0;
  double occluder_sigma = 0.1;
  std::uint64_t seed = 1;

  [[nodiscard]] PatchRect region(std::size_t k) const {
    if (!regions.empty()) return regions.at(regions.size() == 1 ? 0 : k);
    return PatchRect{grid.rows() / 2 - 1, grid.cols() / 2 - 1, 2, 2};
  }

  [[nodiscard]] std::size_t train_count(std::size_t k) const {
    return train_counts.empty() ? train_per_class : train_counts.at(k);
  }

  void validate() const {
    grid.validate();
    if (classes < 2) throw ConfigError("dataset: need at least two classes");
    if (grid.rows() < 2 || grid.cols() < 2) throw ConfigError("dataset: patch grid too small");
    if (!(noise_rate >= 0.0 && noise_rate < 1.0)) {
      throw ConfigError("dataset: noise rate must lie in [0, 1)");
    }
    if (!(occlusion_prob >= 0.0 && occlusion_prob <= 1.0)) {
      throw ConfigError("dataset: occlusion probability must lie in [0, 1]");
    }
    if (occluder_min > occluder_max) throw ConfigError("dataset: occluder size range inverted");
    if (occluder_max > std::min(grid.rows(), grid.cols())) {
      throw ConfigError("dataset: occluder larger than the patch grid");
    }
    if (!train_counts.empty() && train_counts.size() != classes) {
      throw ConfigError("dataset: train_counts needs one entry per class");
    }
    if (!regions.empty() && regions.size() != 1 && regions.size() != classes) {
      throw ConfigError("dataset: regions needs one entry or one per class");
    }
    for (std::size_t k = 0; k < classes; ++k) {
      const auto r = region(k);
      if (r.rows == 0 || r.cols == 0 || r.row + r.rows > grid.rows() ||
          r.col + r.cols > grid.cols()) {
        throw ConfigError("dataset: informative region of class " + std::to_string(k) +
                          " exceeds image bounds");
      }
    }
    if (!(background_sigma >= 0.0) || !(signal > 0.0) || !(occluder_sigma >= 0.0)) {
      throw ConfigError("dataset: signal must be positive and noise levels nonnegative");
    }
  }
};

class HiddenTruth;

/// One generated image with its observed (possibly corrupted) label. The
/// true label is reachable only through HiddenTruth.
template <std::floating_point T>
class SyntheticSample {
 public:
  SyntheticSample() = default;
  SyntheticSample(std::size_t id, Tensor<T> image, int true_label)
      : id(id), image(std::move(image)), observed_label(true_label), true_label_(true_label) {}

  std::size_t id = 0;
  Tensor<T> image;
  int observed_label = 0;
  bool occluded = false;
  std::vector<std::size_t> occluder_patches;
  std::vector<std::size_t> informative_patches;

 private:
  friend class HiddenTruth;
  int true_label_ = 0;
};

/// Audit-only access to the ground truth planted by the harness.
class HiddenTruth {
 public:
  template <std::floating_point T>
  static int label(const SyntheticSample<T>& s) noexcept {
    return s.true_label_;
  }

  template <std::floating_point T>
  static std::vector<int> labels(std::span<const SyntheticSample<T>> samples) {
    std::vector<int> out;
    out.reserve(samples.size());
    for (const auto& s : samples) out.push_back(s.true_label_);
    return out;
  }

  template <std::floating_point T>
  static void set_label(SyntheticSample<T>& s, int label) noexcept {
    s.true_label_ = label;
  }
};

template <std::floating_point T>
struct Dataset {
  DatasetSpec spec;
  std::vector<SyntheticSample<T>> train;
  std::vector<SyntheticSample<T>> test;
};

struct NoisyLabels {
  std::vector<int> labels;
  std::vector<bool> corrupted;
};

/// Corrupts exactly round(eta * n) labels, chosen uniformly, each to a
/// uniformly drawn different class.
inline NoisyLabels inject_label_noise(std::span<const int> labels, double eta, std::size_t classes,
                                      Rng& rng) {
  if (classes < 2) throw DomainError("inject_label_noise: need at least two classes");
  if (!(eta >= 0.0 && eta < 1.0)) throw DomainError("inject_label_noise: eta must lie in [0, 1)");
  NoisyLabels out{std::vector<int>(labels.begin(), labels.end()),
                  std::vector<bool>(labels.size(), false)};
  const auto count = static_cast<std::size_t>(std::llround(eta * static_cast<double>(labels.size())));
  for (auto i : sample_without_replacement(labels.size(), count, rng)) {
    std::uniform_int_distribution<int> other(0, static_cast<int>(classes) - 2);
    int l = other(rng);
    if (l >= labels[i]) ++l;
    out.labels[i] = l;
    out.corrupted[i] = true;
  }
  return out;
}

/// Overwrites a size x size block of patches with a constant-plus-noise
/// occluder. Placement is uniform over positions that leave at least one
/// informative patch visible.
template <std::floating_point T>
void inject_occlusion(SyntheticSample<T>& s, const PatchGrid& grid, std::size_t size, double level,
                      double sigma, Rng& rng) {
  if (size == 0) return;
  if (size > grid.rows() || size > grid.cols()) {
    throw ConfigError("inject_occlusion: occluder exceeds the patch grid");
  }
  std::vector<std::pair<std::size_t, std::size_t>> allowed;
  for (std::size_t r = 0; r + size <= grid.rows(); ++r) {
    for (std::size_t c = 0; c + size <= grid.cols(); ++c) {
      const auto cover = PatchRect{r, c, size, size}.indices(grid.cols());
      const bool all_covered =
          !s.informative_patches.empty() &&
          std::all_of(s.informative_patches.begin(), s.informative_patches.end(), [&](auto i) {
            return std::find(cover.begin(), cover.end(), i) != cover.end();
          });
      if (!all_covered) allowed.emplace_back(r, c);
    }
  }
  if (allowed.empty()) {
    throw ConfigError("inject_occlusion: no placement leaves the informative region visible");
  }
  std::uniform_int_distribution<std::size_t> pick(0, allowed.size() - 1);
  const auto [r0, c0] = allowed[pick(rng)];
  std::normal_distribution<double> noise(0.0, 1.0);
  const std::size_t p = grid.patch;
  auto img = s.image.data();
  for (std::size_t r = r0 * p; r < (r0 + size) * p; ++r) {
    for (std::size_t c = c0 * p; c < (c0 + size) * p; ++c) {
      for (std::size_t ch = 0; ch < grid.channels; ++ch) {
        img[(r * grid.width + c) * grid.channels + ch] =
            static_cast<T>(level + sigma * noise(rng));
      }
    }
  }
  s.occluded = true;
  s.occluder_patches = PatchRect{r0, c0, size, size}.indices(grid.cols());
}

namespace detail {

/// Per-class +-1 codes over the informative patches of a region. For a 2x2
/// region with up to four classes the codes stay pairwise distinct on every
/// row and column of the region, so covering half of it never makes two
/// classes identical.
inline std::vector<std::vector<int>> class_codes(const DatasetSpec& spec, Rng& rng) {
  std::vector<std::vector<int>> codes;
  const auto r0 = spec.region(0);
  const bool uniform_regions =
      spec.regions.size() <= 1 ||
      std::all_of(spec.regions.begin(), spec.regions.end(), [&](auto& r) { return r == r0; });
  if (uniform_regions && r0.rows == 2 && r0.cols == 2 && spec.classes <= 4) {
    // (a, b; b, -a) for (a, b) in {++, +-, -+, --}
    const int ab[4][2] = {{1, 1}, {1, -1}, {-1, 1}, {-1, -1}};
    for (std::size_t k = 0; k < spec.classes; ++k) {
      const int a = ab[k][0], b = ab[k][1];
      codes.push_back({a, b, b, -a});
    }
    return codes;
  }
  std::bernoulli_distribution coin(0.5);
  for (std::size_t k = 0; k < spec.classes; ++k) {
    const auto len = spec.region(k).rows * spec.region(k).cols;
    for (int attempt = 0;; ++attempt) {
      std::vector<int> c(len);
      for (auto& v : c) v = coin(rng) ? 1 : -1;
      if (std::find(codes.begin(), codes.end(), c) == codes.end()) {
        codes.push_back(std::move(c));
        break;
      }
      if (attempt > 1000) throw ConfigError("dataset: cannot find distinct class codes");
    }
  }
  return codes;
}

template <std::floating_point T>
SyntheticSample<T> render(const DatasetSpec& spec, std::size_t id, int label,
                          const std::vector<int>& code, Rng& rng) {
  const auto& g = spec.grid;
  Tensor<T> img({g.height, g.width, g.channels});
  std::normal_distribution<double> noise(0.0, 1.0);
  for (auto& v : img.data()) v = static_cast<T>(spec.background_sigma * noise(rng));
  const auto region = spec.region(static_cast<std::size_t>(label));
  const auto informative = region.indices(g.cols());
  auto px = img.data();
  for (std::size_t r = 0; r < g.height; ++r) {
    for (std::size_t c = 0; c < g.width; ++c) {
      const auto pi = g.patch_of(r, c);
      const auto it = std::find(informative.begin(), informative.end(), pi);
      if (it == informative.end()) continue;
      const double level = spec.signal * code[static_cast<std::size_t>(it - informative.begin())];
      for (std::size_t ch = 0; ch < g.channels; ++ch) {
        px[(r * g.width + c) * g.channels + ch] += static_cast<T>(level);
      }
    }
  }
  SyntheticSample<T> s(id, std::move(img), label);
  s.informative_patches = informative;
  return s;
}

template <std::floating_point T>
void maybe_occlude(SyntheticSample<T>& s, const DatasetSpec& spec, Rng& rng) {
  std::bernoulli_distribution occlude(spec.occlusion_prob);
  if (!occlude(rng)) return;
  std::uniform_int_distribution<std::size_t> side(spec.occluder_min, spec.occluder_max);
  inject_occlusion(s, spec.grid, side(rng), spec.occluder_level, spec.occluder_sigma, rng);
}

}  // namespace detail

/// Generates a train/test split. Classes render a fixed +-signal code over
/// their informative patches on top of Gaussian background noise; a fraction
/// of images receive an occluder; training labels receive symmetric noise.
/// The test split is balanced and noise-free.
template <std::floating_point T>
Dataset<T> generate_dataset(const DatasetSpec& spec) {
  spec.validate();
  Rng rng(spec.seed);
  const auto codes = detail::class_codes(spec, rng);
  Dataset<T> ds;
  ds.spec = spec;

  std::vector<int> train_labels;
  for (std::size_t k = 0; k < spec.classes; ++k) {
    train_labels.insert(train_labels.end(), spec.train_count(k), static_cast<int>(k));
  }
  const auto order = permutation(train_labels.size(), rng);
  for (std::size_t i = 0; i < order.size(); ++i) {
    const int label = train_labels[order[i]];
    auto s = detail::render<T>(spec, i, label, codes[static_cast<std::size_t>(label)], rng);
    detail::maybe_occlude(s, spec, rng);
    ds.train.push_back(std::move(s));
  }
  for (std::size_t k = 0; k < spec.classes; ++k) {
    for (std::size_t j = 0; j < spec.test_per_class; ++j) {
      const int label = static_cast<int>(k);
      auto s = detail::render<T>(spec, ds.test.size(), label, codes[k], rng);
      detail::maybe_occlude(s, spec, rng);
      ds.test.push_back(std::move(s));
    }
  }

  std::vector<int> clean;
  for (const auto& s : ds.train) clean.push_back(s.observed_label);
  const auto noisy = inject_label_noise(clean, spec.noise_rate, spec.classes, rng);
  for (std::size_t i = 0; i < ds.train.size(); ++i) ds.train[i].observed_label = noisy.labels[i];
  return ds;
}

template <std::floating_point T>
std::vector<const Tensor<T>*> image_ptrs(std::span<const SyntheticSample<T>> samples) {
  std::vector<const Tensor<T>*> out;
  out.reserve(samples.size());
  for (const auto& s : samples) out.push_back(&s.image);
  return out;
}

template <std::floating_point T>
std::vector<int> observed_labels(std::span<const SyntheticSample<T>> samples) {
  std::vector<int> out;
  out.reserve(samples.size());
  for (const auto& s : samples) out.push_back(s.observed_label);
  return out;
}

}  // namespace mvt
