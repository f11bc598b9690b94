#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "mvt/core/error.hpp"

namespace mvt {

struct Metrics {
  double accuracy = 0.0;
  double mean_class_accuracy = 0.0;
  std::vector<std::vector<std::size_t>> confusion;  // [truth][prediction]
  std::vector<double> test_accuracy_series;         // per epoch, filled by trainers
  std::size_t total = 0;
};

/// Overall accuracy, mean of per-class recalls (classes absent from `truth`
/// are skipped) and the K x K confusion matrix.
inline Metrics compute_metrics(std::span<const int> predictions, std::span<const int> truth,
                               std::size_t classes) {
  if (predictions.size() != truth.size()) {
    throw ShapeError("compute_metrics: " + std::to_string(predictions.size()) +
                     " predictions for " + std::to_string(truth.size()) + " labels");
  }
  if (truth.empty()) {
    throw DomainError("compute_metrics: empty evaluation set");
  }
  Metrics m;
  m.total = truth.size();
  m.confusion.assign(classes, std::vector<std::size_t>(classes, 0));
  for (std::size_t i = 0; i < truth.size(); ++i) {
    const int t = truth[i], p = predictions[i];
    if (t < 0 || p < 0 || static_cast<std::size_t>(t) >= classes ||
        static_cast<std::size_t>(p) >= classes) {
      throw IndexError("compute_metrics: label out of range");
    }
    ++m.confusion[static_cast<std::size_t>(t)][static_cast<std::size_t>(p)];
  }
  std::size_t hits = 0;
  double recall_sum = 0.0;
  std::size_t present = 0;
  for (std::size_t k = 0; k < classes; ++k) {
    std::size_t row = 0;
    for (auto v : m.confusion[k]) row += v;
    hits += m.confusion[k][k];
    if (row > 0) {
      recall_sum += static_cast<double>(m.confusion[k][k]) / static_cast<double>(row);
      ++present;
    }
  }
  m.accuracy = static_cast<double>(hits) / static_cast<double>(truth.size());
  m.mean_class_accuracy = recall_sum / static_cast<double>(present);
  return m;
}

}  // namespace mvt
