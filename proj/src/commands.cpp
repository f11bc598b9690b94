#include "mvt/app/commands.hpp"

#include <cmath>
#include <iostream>
#include <map>

#include "mvt/app/curves.hpp"

namespace mvt {

namespace {

std::string dir_name(std::string s) {
  for (auto& c : s) {
    if (c == ' ' || c == '(' || c == ')' || c == '+') c = '_';
  }
  return s;
}

/// Trains generators on demand and reuses them across cells with the same
/// seed and mask ratio.
class MgnCache {
 public:
  MaskGenerator<float>* get(const RunConfig& cfg, const Dataset<float>& ds, const fs::path& dir) {
    if (!(cfg.mask_ratio > 0.0)) return nullptr;
    const auto key = std::make_pair(cfg.seed, cfg.mask_ratio);
    auto it = runs_.find(key);
    if (it == runs_.end()) {
      auto run = train_mgn(cfg, ds);
      fs::create_directories(dir);
      write_file_atomic(dir / "mgn_log.csv", gan_log_table(run.log).str());
      it = runs_.emplace(key, std::move(run)).first;
    }
    return it->second.gen.get();
  }

 private:
  std::map<std::pair<std::uint64_t, double>, MgnRun> runs_;
};

/// One (cell, seed) run: optional MGN, classifier training, per-run log.
CellResult run_cell(const AblationCell& cell, std::uint64_t seed, MgnCache& cache,
                           const fs::path& run_dir, const fs::path& mgn_dir) {
  auto cfg = cell.cfg;
  cfg.seed = seed;
  const auto ds = make_dataset(cfg);
  MaskGenerator<float>* gen = cache.get(cfg, ds, mgn_dir);
  auto mvt = train_mvt(cfg, ds, gen);
  fs::create_directories(run_dir);
  write_file_atomic(run_dir / "train_log.csv", train_log_table(mvt.log).str());
  if (cfg.relabel.enabled) {
    write_file_atomic(run_dir / "relabel_decisions.csv", decisions_table(mvt.decisions).str());
  }
  CellResult r;
  r.value = cell.value;
  r.seed = seed;
  r.test_accuracy = mvt.test_metrics.accuracy;
  r.mean_class_accuracy = mvt.test_metrics.mean_class_accuracy;
  if (mvt.occluded_metrics) r.occluded_accuracy = mvt.occluded_metrics->accuracy;
  r.relabel_precision = mvt.relabel.precision();
  r.activation_epoch = mvt.relabel.activation_epoch;
  r.stability = post_activation_stability(mvt.log, mvt.relabel.activation_epoch);
  r.relabel_changed = mvt.relabel.changed;
  for (const auto& e : mvt.log) r.subset_ok = r.subset_ok && e.subset_ok;
  return r;
}

struct MeanStd {
  std::optional<double> mean, std;
  std::size_t n = 0;
};

MeanStd mean_std(const std::vector<std::optional<double>>& xs) {
  MeanStd out;
  double s = 0.0;
  for (const auto& x : xs) {
    if (x) s += *x, ++out.n;
  }
  if (out.n == 0) return out;
  out.mean = s / static_cast<double>(out.n);
  double ss = 0.0;
  for (const auto& x : xs) {
    if (x) ss += (*x - *out.mean) * (*x - *out.mean);
  }
  out.std = out.n > 1 ? std::sqrt(ss / static_cast<double>(out.n - 1)) : 0.0;
  return out;
}

}  // namespace
std::string opt_num(const std::optional<double>& v) { return v ? fmt_num(*v) : ""; }
std::string opt_num(const std::optional<std::size_t>& v) {
  return v ? std::to_string(*v) : "";
}

void write_config(const fs::path& dir, const RunConfig& cfg) {
  write_file_atomic(dir / "config.json", to_json(cfg).dump(2) + "\n");
}

CsvTable gan_log_table(const std::vector<GanLogRow>& rows) {
  CsvTable t({"step", "phase", "loss", "mask_mean", "gap"});
  auto cell = [](double v) { return std::isnan(v) ? std::string() : fmt_num(v); };
  for (const auto& r : rows) {
    t.add({std::to_string(r.step), r.phase, fmt_num(r.loss), cell(r.mask_mean), cell(r.gap)});
  }
  return t;
}

CsvTable train_log_table(const std::vector<EpochLog>& rows) {
  CsvTable t({"epoch", "train_loss", "train_accuracy", "test_accuracy", "test_mean_class_accuracy",
              "occluded_accuracy", "lr", "relabel_active", "relabel_changed",
              "relabel_changed_to_true", "relabel_precision", "relabel_recall", "constant_changed",
              "subset_ok"});
  for (const auto& r : rows) {
    t.add({std::to_string(r.epoch), fmt_num(r.train_loss), fmt_num(r.train_accuracy),
           fmt_num(r.test_accuracy), fmt_num(r.test_mean_class_accuracy),
           opt_num(r.occluded_accuracy), fmt_num(r.lr), r.relabel_ran ? "1" : "0",
           std::to_string(r.relabel_changed), opt_num(r.relabel_changed_to_true),
           opt_num(r.relabel_precision), opt_num(r.relabel_recall),
           std::to_string(r.constant_changed), r.subset_ok ? "1" : "0"});
  }
  return t;
}

CsvTable decisions_table(const std::vector<LoggedDecision>& rows) {
  CsvTable t({"epoch", "policy", "sample", "old_label", "new_label", "p_max", "p_given",
              "threshold"});
  for (const auto& r : rows) {
    const auto& d = r.decision;
    t.add({std::to_string(r.epoch), r.policy, std::to_string(d.sample),
           std::to_string(d.old_label), std::to_string(d.new_label), fmt_num(d.p_max),
           fmt_num(d.p_given), fmt_num(d.threshold)});
  }
  return t;
}

MgnOutputs cmd_train_mgn(const RunConfig& cfg, const fs::path& out_dir) {
  cfg.validate();
  fs::create_directories(out_dir);
  write_config(out_dir, cfg);
  const auto ds = make_dataset(cfg);
  MgnOutputs out{out_dir / "mgn.ckpt", out_dir / "mgn_log.csv"};
  std::vector<GanLogRow> rows;
  MgnRun run;
  try {
    run = train_mgn(cfg, ds, [&rows](const GanLogRow& r) { rows.push_back(r); });
  } catch (const NumericError&) {
    write_file_atomic(out.log, gan_log_table(rows).str());
    throw;
  }
  write_file_atomic(out.log, gan_log_table(run.log).str());
  save_checkpoint(out.checkpoint, mgn_checkpoint(run, cfg));
  return out;
}

MvtOutputs cmd_train_mvt(const RunConfig& cfg, const std::optional<fs::path>& mgn_path,
                         const fs::path& out_dir) {
  cfg.validate();
  std::unique_ptr<MaskGenerator<float>> gen;
  if (cfg.mask_ratio > 0.0) {
    if (!mgn_path) throw ConfigError("train-mvt: mask_ratio > 0 needs an MGN checkpoint (--mgn)");
    const auto ck = load_checkpoint(*mgn_path);
    if (ck.meta.value("kind", "") != "mgn") throw FormatError("train-mvt: not an MGN checkpoint");
    gen = generator_from_checkpoint(ck);
    const double m = ck.meta.value("mask_ratio", cfg.mask_ratio);
    if (std::abs(m - cfg.mask_ratio) > 1e-12) {
      std::cerr << "warning: MGN was trained with mask_ratio " << m << ", config says "
                << cfg.mask_ratio << "\n";
    }
  }
  fs::create_directories(out_dir);
  write_config(out_dir, cfg);
  const auto ds = make_dataset(cfg);
  MvtOutputs out{out_dir / "mvt.ckpt", out_dir / "train_log.csv",
                 out_dir / "relabel_decisions.csv", {}, {}, {}};
  std::vector<EpochLog> rows;
  MvtRun run;
  try {
    run = train_mvt(cfg, ds, gen.get(), [&](const EpochLog& r) {
      rows.push_back(r);
      write_file_atomic(out.log, train_log_table(rows).str());
    });
  } catch (const NumericError&) {
    write_file_atomic(out.log, train_log_table(rows).str());
    throw;
  }
  write_file_atomic(out.log, train_log_table(run.log).str());
  write_file_atomic(out.decisions, decisions_table(run.decisions).str());
  save_checkpoint(out.checkpoint, mvt_checkpoint(run, cfg, gen.get(), cfg.train.epochs));
  out.test = run.test_metrics;
  out.occluded = run.occluded_metrics;
  out.relabel = run.relabel;
  return out;
}

nlohmann::json metrics_json(const Metrics& m) {
  return {{"accuracy", m.accuracy},
          {"mean_class_accuracy", m.mean_class_accuracy},
          {"total", m.total},
          {"confusion", m.confusion}};
}

std::string confusion_csv(const Metrics& m) {
  std::vector<std::string> header{"truth"};
  for (std::size_t k = 0; k < m.confusion.size(); ++k) header.push_back("pred_" + std::to_string(k));
  CsvTable t(header);
  for (std::size_t k = 0; k < m.confusion.size(); ++k) {
    std::vector<std::string> row{std::to_string(k)};
    for (auto v : m.confusion[k]) row.push_back(std::to_string(v));
    t.add(row);
  }
  return t.str();
}

nlohmann::json cmd_evaluate(const RunConfig& cfg, const std::vector<fs::path>& checkpoints,
                                   bool occluded_only, const fs::path& out_dir) {
  cfg.validate();
  if (checkpoints.empty()) throw ConfigError("evaluate: no checkpoint given");
  const auto ds = make_dataset(cfg);
  std::vector<Sample> subset;
  for (const auto& s : ds.test) {
    if (!occluded_only || s.occluded) subset.push_back(s);
  }
  if (subset.empty()) {
    throw DomainError(occluded_only ? "evaluate: the test split has no occluded samples"
                                    : "evaluate: the test split is empty");
  }
  fs::create_directories(out_dir);
  nlohmann::json report = {{"occluded_only", occluded_only},
                           {"samples", subset.size()},
                           {"checkpoints", nlohmann::json::array()}};
  std::vector<std::pair<double, std::optional<double>>> accs;
  for (std::size_t i = 0; i < checkpoints.size(); ++i) {
    auto loaded = classifier_from_checkpoint(load_checkpoint(checkpoints[i]));
    if (loaded.model->config().classes != ds.spec.classes) {
      throw ConfigError("evaluate: checkpoint has " +
                        std::to_string(loaded.model->config().classes) +
                        " classes, dataset has " + std::to_string(ds.spec.classes));
    }
    if (loaded.model->config().grid.count() != ds.spec.grid.count() ||
        loaded.model->config().grid.patch_dim() != ds.spec.grid.patch_dim()) {
      throw ConfigError("evaluate: checkpoint patch grid does not match the dataset");
    }
    const std::span<const Sample> view(subset);
    const auto inputs = classifier_inputs(loaded.gen.get(), view);
    const auto ev = evaluate_model(*loaded.model, inputs.images, view);
    auto entry = metrics_json(ev.all);
    entry["path"] = checkpoints[i].string();
    entry["masked"] = loaded.gen != nullptr;
    if (ev.occluded) entry["occluded_accuracy"] = ev.occluded->accuracy;
    report["checkpoints"].push_back(entry);
    accs.emplace_back(ev.all.accuracy,
                      ev.occluded ? std::optional(ev.occluded->accuracy) : std::nullopt);
    const std::string name = checkpoints.size() == 1 ? "confusion.csv"
                                                     : "confusion_" + std::to_string(i) + ".csv";
    write_file_atomic(out_dir / name, confusion_csv(ev.all));
  }
  if (checkpoints.size() > 1) {
    report["gaps"] = nlohmann::json::array();
    for (std::size_t i = 1; i < accs.size(); ++i) {
      nlohmann::json g = {{"reference", checkpoints[0].string()},
                          {"other", checkpoints[i].string()},
                          {"accuracy_gap", accs[i].first - accs[0].first}};
      if (accs[i].second && accs[0].second) {
        g["occluded_accuracy_gap"] = *accs[i].second - *accs[0].second;
      }
      report["gaps"].push_back(g);
    }
  }
  write_file_atomic(out_dir / "metrics.json", report.dump(2) + "\n");
  return report;
}

std::vector<AblationCell> ablation_cells(const RunConfig& base, const std::string& axis) {
  std::vector<AblationCell> cells;
  if (axis == "mask-ratio") {
    for (double m : {0.0, 0.10, 0.15, 0.20}) {
      auto c = base;
      c.mask_ratio = m;
      cells.push_back({m == 0.0 ? "0 (baseline)" : fmt_num(m), c});
    }
  } else if (axis == "threshold-fn") {
    for (auto k : {ThresholdKind::constant, ThresholdKind::linear, ThresholdKind::quadratic,
                   ThresholdKind::sigmoid}) {
      auto c = base;
      c.relabel.enabled = true;
      c.relabel.policy.fn = ThresholdFn(k, base.relabel.policy.fn.params());
      cells.push_back({std::string(to_string(k)), c});
    }
  } else if (axis == "components") {
    const double m = base.mask_ratio > 0.0 ? base.mask_ratio : 0.15;
    const auto fn = base.relabel.policy.fn.kind() == ThresholdKind::constant
                        ? ThresholdFn(ThresholdKind::sigmoid, base.relabel.policy.fn.params())
                        : base.relabel.policy.fn;
    for (int mgn = 0; mgn < 2; ++mgn) {
      for (int rel = 0; rel < 2; ++rel) {
        auto c = base;
        c.mask_ratio = mgn ? m : 0.0;
        c.relabel.enabled = rel != 0;
        c.relabel.policy.fn = fn;
        cells.push_back({std::string(mgn ? "mgn" : "no-mgn") + "+" + (rel ? "relabel" : "no-relabel"),
                         c});
      }
    }
  } else {
    throw ConfigError("ablate: unknown axis '" + axis +
                      "' (expected mask-ratio, threshold-fn or components)");
  }
  for (auto& c : cells) c.cfg.validate();
  return cells;
}

CsvTable summarize(const std::vector<CellResult>& cells,
                          const std::vector<std::string>& order) {
  CsvTable t({"value", "seeds", "test_accuracy_mean", "test_accuracy_std",
              "mean_class_accuracy_mean", "mean_class_accuracy_std", "occluded_accuracy_mean",
              "occluded_accuracy_std", "relabel_precision_mean", "relabel_precision_std",
              "stability_mean", "stability_std"});
  for (const auto& v : order) {
    std::vector<std::optional<double>> acc, mca, occ, prec, stab;
    for (const auto& c : cells) {
      if (c.value != v) continue;
      acc.push_back(c.test_accuracy);
      mca.push_back(c.mean_class_accuracy);
      occ.push_back(c.occluded_accuracy);
      prec.push_back(c.relabel_precision);
      stab.push_back(c.stability);
    }
    std::vector<std::string> row{v, std::to_string(acc.size())};
    for (const auto& xs : {acc, mca, occ, prec, stab}) {
      const auto ms = mean_std(xs);
      row.push_back(opt_num(ms.mean));
      row.push_back(opt_num(ms.std));
    }
    t.add(row);
  }
  return t;
}

CsvTable cells_table(const std::vector<CellResult>& cells) {
  CsvTable t({"value", "seed", "test_accuracy", "mean_class_accuracy", "occluded_accuracy",
              "relabel_precision", "stability", "activation_epoch", "relabel_changed",
              "subset_ok"});
  for (const auto& c : cells) {
    t.add({c.value, std::to_string(c.seed), fmt_num(c.test_accuracy),
           fmt_num(c.mean_class_accuracy), opt_num(c.occluded_accuracy),
           opt_num(c.relabel_precision), opt_num(c.stability), opt_num(c.activation_epoch),
           std::to_string(c.relabel_changed), c.subset_ok ? "1" : "0"});
  }
  return t;
}

AblationResult cmd_ablate(const RunConfig& cfg, const std::string& axis,
                          const fs::path& out_dir,
                          const std::function<void(const CellResult&)>& on_cell) {
  cfg.validate();
  const auto cells = ablation_cells(cfg, axis);
  fs::create_directories(out_dir);
  write_config(out_dir, cfg);
  MgnCache cache;
  AblationResult res;
  std::vector<std::string> order;
  for (const auto& cell : cells) {
    order.push_back(cell.value);
    for (auto seed : cfg.seeds) {
      const fs::path dir =
          out_dir / axis / dir_name(cell.value) / ("seed-" + std::to_string(seed));
      const fs::path mgn_dir =
          out_dir / "mgn" / ("m" + fmt_num(cell.cfg.mask_ratio) + "-seed-" + std::to_string(seed));
      auto r = run_cell(cell, seed, cache, dir, mgn_dir);
      if (on_cell) on_cell(r);
      res.cells.push_back(r);
    }
  }
  res.summary = summarize(res.cells, order);
  res.summary_path = out_dir / ("ablate_" + axis + ".csv");
  res.cells_path = out_dir / ("ablate_" + axis + "_cells.csv");
  write_file_atomic(res.summary_path, res.summary.str());
  write_file_atomic(res.cells_path, cells_table(res.cells).str());
  return res;
}

CurveOutputs cmd_curves(const std::vector<fs::path>& logs, const fs::path& out_dir) {
  if (logs.empty()) throw ConfigError("curves: no logs given");
  const auto set = read_curves(logs);
  fs::create_directories(out_dir);
  CurveOutputs out{out_dir / "curves.svg", out_dir / "curves.csv", set.warnings};
  write_file_atomic(out.svg, curves_svg(set));
  write_file_atomic(out.csv, curves_csv(set));
  return out;
}

void cmd_dataset(const RunConfig& cfg, const fs::path& out_dir) {
  cfg.validate();
  fs::create_directories(out_dir);
  save_dataset(out_dir, generate_dataset<float>(cfg.seeded_dataset()));
}

}  // namespace mvt
