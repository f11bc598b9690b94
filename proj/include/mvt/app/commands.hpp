#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "mvt/app/checkpoint.hpp"
#include "mvt/app/config.hpp"
#include "mvt/app/csv.hpp"
#include "mvt/app/training.hpp"

namespace mvt {

namespace fs = std::filesystem;

std::string opt_num(const std::optional<double>& v);
std::string opt_num(const std::optional<std::size_t>& v);

void write_config(const fs::path& dir, const RunConfig& cfg);

CsvTable gan_log_table(const std::vector<GanLogRow>& rows);

CsvTable train_log_table(const std::vector<EpochLog>& rows);

CsvTable decisions_table(const std::vector<LoggedDecision>& rows);

// ---------------------------------------------------------------------------

struct MgnOutputs {
  fs::path checkpoint;
  fs::path log;
};

/// Adversarial MGN training. On a numeric abort the log written so far is kept.
MgnOutputs cmd_train_mgn(const RunConfig& cfg, const fs::path& out_dir);

struct MvtOutputs {
  fs::path checkpoint;
  fs::path log;
  fs::path decisions;
  Metrics test;
  std::optional<Metrics> occluded;
  RelabelSummary relabel;
};

/// Classifier training on masked images (or raw images when mask_ratio is 0).
MvtOutputs cmd_train_mvt(const RunConfig& cfg, const std::optional<fs::path>& mgn_path,
                         const fs::path& out_dir);

nlohmann::json metrics_json(const Metrics& m);

std::string confusion_csv(const Metrics& m);

/// Evaluates one or more classifier checkpoints on the test split. With
/// several checkpoints the first is the reference for the reported gaps.
nlohmann::json cmd_evaluate(const RunConfig& cfg, const std::vector<fs::path>& checkpoints,
                                   bool occluded_only, const fs::path& out_dir);

// ---------------------------------------------------------------------------
// Ablation sweeps

struct CellResult {
  std::string value;
  std::uint64_t seed = 0;
  double test_accuracy = 0.0;
  double mean_class_accuracy = 0.0;
  std::optional<double> occluded_accuracy;
  std::optional<double> relabel_precision;
  std::optional<double> stability;
  std::optional<std::size_t> activation_epoch;
  std::size_t relabel_changed = 0;
  bool subset_ok = true;
};

struct AblationCell {
  std::string value;
  RunConfig cfg;
};

std::vector<AblationCell> ablation_cells(const RunConfig& base, const std::string& axis);

struct AblationResult {
  std::vector<CellResult> cells;
  CsvTable summary{{}};
  fs::path summary_path;
  fs::path cells_path;
};

CsvTable summarize(const std::vector<CellResult>& cells,
                          const std::vector<std::string>& order);

CsvTable cells_table(const std::vector<CellResult>& cells);

/// Sweeps one axis over the configured seeds and writes the summary
/// (mean and sample standard deviation per cell) plus per-seed rows.
AblationResult cmd_ablate(const RunConfig& cfg, const std::string& axis,
                          const fs::path& out_dir,
                          const std::function<void(const CellResult&)>& on_cell = {});

// ---------------------------------------------------------------------------

struct CurveOutputs {
  fs::path svg;
  fs::path csv;
  std::vector<std::string> warnings;
};

CurveOutputs cmd_curves(const std::vector<fs::path>& logs, const fs::path& out_dir);

void cmd_dataset(const RunConfig& cfg, const fs::path& out_dir);

}  // namespace mvt
