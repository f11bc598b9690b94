#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "mvt/app/commands.hpp"

namespace fs = std::filesystem;

namespace {

enum Exit : int { ok = 0, usage = 1, numeric = 2, io = 3, internal = 4 };

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
};

void add_common(CLI::App* sub, Common& c) {
  sub->add_option("-c,--config", c.config, "JSON run config (defaults apply when omitted)");
  sub->add_option("-s,--seed", c.seed, "override the run seed (ablate: run only this seed)");
  sub->add_option("-o,--out", c.out, "output directory (default: out_dir from the config)");
}

mvt::RunConfig resolve(const Common& c) {
  auto cfg = c.config.empty() ? mvt::RunConfig{} : mvt::load_config(c.config);
  if (c.seed) {
    cfg.seed = *c.seed;
    cfg.seeds = {*c.seed};
  }
  if (!c.out.empty()) cfg.out_dir = c.out;
  cfg.validate();
  return cfg;
}

int run(int argc, char** argv) {
  CLI::App app{"Masked vision transformer toolkit: mask generator, classifier, relabeling"};
  app.require_subcommand(1);

  Common common;
  auto* mgn = app.add_subcommand("train-mgn", "adversarially train the mask generator");
  add_common(mgn, common);

  std::string mgn_path;
  auto* mvt_cmd = app.add_subcommand("train-mvt", "train the classifier behind a frozen generator");
  add_common(mvt_cmd, common);
  mvt_cmd->add_option("--mgn", mgn_path, "generator checkpoint (required when mask_ratio > 0)");

  std::vector<std::string> checkpoints;
  bool occluded_only = false;
  auto* eval = app.add_subcommand("evaluate", "score classifier checkpoints on the test split");
  add_common(eval, common);
  eval->add_option("--checkpoint", checkpoints, "classifier checkpoint; repeat to compare")
      ->required();
  eval->add_flag("--occluded-only", occluded_only, "restrict to occluded test samples");

  std::string axis;
  auto* ablate = app.add_subcommand("ablate", "sweep one axis over the configured seeds");
  add_common(ablate, common);
  ablate->add_option("--axis", axis, "mask-ratio | threshold-fn | components")->required();

  std::vector<std::string> logs;
  std::string curves_out = "curves";
  auto* curves = app.add_subcommand("curves", "plot test accuracy curves from train logs");
  curves->add_option("logs", logs, "train_log.csv files")->required();
  curves->add_option("-o,--out", curves_out, "output directory");

  auto* dataset = app.add_subcommand("dataset", "write the synthetic train/test splits to disk");
  add_common(dataset, common);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? Exit::ok : Exit::usage;
  }

  if (curves->parsed()) {
    std::vector<fs::path> paths(logs.begin(), logs.end());
    const auto out = mvt::cmd_curves(paths, curves_out);
    for (const auto& w : out.warnings) std::cerr << "warning: " << w << "\n";
    std::cout << out.svg.string() << "\n" << out.csv.string() << "\n";
    return Exit::ok;
  }

  const auto cfg = resolve(common);
  const fs::path out = cfg.out_dir;
  if (mgn->parsed()) {
    const auto r = mvt::cmd_train_mgn(cfg, out);
    std::cout << r.checkpoint.string() << "\n";
  } else if (mvt_cmd->parsed()) {
    std::optional<fs::path> p;
    if (!mgn_path.empty()) p = mgn_path;
    const auto r = mvt::cmd_train_mvt(cfg, p, out);
    std::printf("test accuracy %.4f  mean class accuracy %.4f\n", r.test.accuracy,
                r.test.mean_class_accuracy);
    if (r.occluded) std::printf("occluded accuracy %.4f\n", r.occluded->accuracy);
    std::cout << r.checkpoint.string() << "\n";
  } else if (eval->parsed()) {
    std::vector<fs::path> paths(checkpoints.begin(), checkpoints.end());
    const auto report = mvt::cmd_evaluate(cfg, paths, occluded_only, out);
    std::cout << report.dump(2) << "\n";
  } else if (ablate->parsed()) {
    const auto r = mvt::cmd_ablate(cfg, axis, out, [](const mvt::CellResult& c) {
      std::fprintf(stderr, "%s seed %llu: test %.4f\n", c.value.c_str(),
                   static_cast<unsigned long long>(c.seed), c.test_accuracy);
    });
    std::cout << r.summary.str();
  } else if (dataset->parsed()) {
    mvt::cmd_dataset(cfg, out);
    std::cout << out.string() << "\n";
  }
  return Exit::ok;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const mvt::NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return Exit::numeric;
  } catch (const mvt::FormatError& e) {
    std::cerr << "format error: " << e.what() << "\n";
    return Exit::io;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "i/o error: " << e.what() << "\n";
    return Exit::io;
  } catch (const mvt::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return Exit::usage;
  } catch (const mvt::ShapeError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return Exit::usage;
  } catch (const mvt::DomainError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return Exit::usage;
  } catch (const mvt::IndexError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return Exit::usage;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return Exit::internal;
  }
}
