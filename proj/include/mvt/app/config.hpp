#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "mvt/core/adamw.hpp"
#include "mvt/core/error.hpp"
#include "mvt/data/dataset.hpp"
#include "mvt/mgn/gan.hpp"
#include "mvt/relabel/relabel.hpp"
#include "mvt/vit/vit.hpp"

namespace mvt {

using json = nlohmann::json;

struct ModelConfig {
  std::size_t dim = 32;
  std::size_t heads = 4;
  std::size_t depth = 6;
  std::size_t mgn_depth = 2;
  std::size_t mlp_ratio = 4;
};

struct GanConfig {
  GanSchedule schedule{};
  double lr_generator = 1e-3;
  double lr_discriminator = 1e-3;
  double lr_decay = 1.0;
  // The discriminator and the generator backbone start from a classifier
  // trained for `pretrain_epochs` on the training split; the generator
  // takes its first mgn_depth blocks.
  std::size_t disc_depth = 2;
  std::size_t pretrain_epochs = 20;
  std::size_t disc_warmup = 800;  // discriminator-only steps before alternating
};

struct TrainConfig {
  std::size_t epochs = 30;
  std::size_t batch_size = 32;
};

struct RelabelConfig {
  bool enabled = false;
  RelabelPolicy policy{};
};

/// Everything one command needs; serialized verbatim into the output directory.
struct RunConfig {
  std::uint64_t seed = 1;
  std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
  std::string out_dir = "runs";
  DatasetSpec dataset{};
  std::optional<std::string> dataset_path;
  ModelConfig model{};
  double mask_ratio = 0.15;
  GanConfig gan{};
  AdamWConfig optimizer{};
  TrainConfig train{};
  RelabelConfig relabel{};

  [[nodiscard]] VitConfig classifier_config() const {
    VitConfig v;
    v.grid = dataset.grid;
    v.dim = model.dim;
    v.heads = model.heads;
    v.depth = model.depth;
    v.classes = dataset.classes;
    v.mlp_ratio = model.mlp_ratio;
    return v;
  }

  [[nodiscard]] VitConfig generator_config() const {
    auto v = classifier_config();
    v.depth = model.mgn_depth;
    return v;
  }

  [[nodiscard]] VitConfig discriminator_config() const {
    auto v = classifier_config();
    v.depth = gan.disc_depth;
    return v;
  }

  /// Dataset spec with the run seed folded in.
  [[nodiscard]] DatasetSpec seeded_dataset() const {
    auto d = dataset;
    d.seed = derive_seed(seed, 0);
    return d;
  }

  void validate() const {
    dataset.validate();
    classifier_config().validate();
    if (model.mgn_depth == 0 || gan.disc_depth == 0) {
      throw ConfigError("model.mgn_depth and gan.disc_depth must be positive");
    }
    if (gan.pretrain_epochs > 0 && model.mgn_depth > gan.disc_depth) {
      throw ConfigError("model.mgn_depth cannot exceed gan.disc_depth when the backbone is shared");
    }
    if (!(mask_ratio >= 0.0 && mask_ratio < 1.0)) {
      throw ConfigError("mask_ratio must lie in [0, 1)");
    }
    gan.schedule.validate();
    if (!(gan.lr_generator > 0.0) || !(gan.lr_discriminator > 0.0)) {
      throw ConfigError("gan learning rates must be positive");
    }
    if (!(gan.lr_decay > 0.0 && gan.lr_decay <= 1.0)) {
      throw ConfigError("gan.lr_decay must lie in (0, 1]");
    }
    optimizer.validate();
    if (train.batch_size == 0) throw ConfigError("train.batch_size must be positive");
    relabel.policy.validate();
    if (seeds.empty()) throw ConfigError("seeds must not be empty");
  }
};

namespace detail {

inline void reject_unknown(const json& j, const std::set<std::string>& known, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + ": expected an object");
  for (const auto& [key, _] : j.items()) {
    if (!known.count(key)) throw ConfigError(where + ": unknown key '" + key + "'");
  }
}

template <class V>
void read(const json& j, const char* key, V& out, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<V>();
  } catch (const json::exception& e) {
    throw ConfigError(where + "." + key + ": " + e.what());
  }
}

}  // namespace detail

inline json to_json(const RunConfig& c) {
  const auto& d = c.dataset;
  json regions = json::array();
  for (const auto& r : d.regions) {
    regions.push_back({{"row", r.row}, {"col", r.col}, {"rows", r.rows}, {"cols", r.cols}});
  }
  const auto& p = c.relabel.policy.fn.params();
  return {
      {"seed", c.seed},
      {"seeds", c.seeds},
      {"out_dir", c.out_dir},
      {"dataset",
       {{"path", c.dataset_path ? json(*c.dataset_path) : json(nullptr)},
        {"classes", d.classes},
        {"height", d.grid.height},
        {"width", d.grid.width},
        {"channels", d.grid.channels},
        {"patch", d.grid.patch},
        {"train_per_class", d.train_per_class},
        {"test_per_class", d.test_per_class},
        {"train_counts", d.train_counts},
        {"noise_rate", d.noise_rate},
        {"occlusion_prob", d.occlusion_prob},
        {"occluder_min", d.occluder_min},
        {"occluder_max", d.occluder_max},
        {"regions", regions},
        {"signal", d.signal},
        {"background_sigma", d.background_sigma},
        {"occluder_level", d.occluder_level},
        {"occluder_sigma", d.occluder_sigma}}},
      {"model",
       {{"dim", c.model.dim},
        {"heads", c.model.heads},
        {"depth", c.model.depth},
        {"mgn_depth", c.model.mgn_depth},
        {"mlp_ratio", c.model.mlp_ratio}}},
      {"mask_ratio", c.mask_ratio},
      {"gan",
       {{"alternations", c.gan.schedule.alternations},
        {"disc_steps", c.gan.schedule.disc_steps},
        {"gen_steps", c.gan.schedule.gen_steps},
        {"batch_size", c.gan.schedule.batch_size},
        {"lr_generator", c.gan.lr_generator},
        {"lr_discriminator", c.gan.lr_discriminator},
        {"lr_decay", c.gan.lr_decay},
        {"disc_depth", c.gan.disc_depth},
        {"pretrain_epochs", c.gan.pretrain_epochs},
        {"disc_warmup", c.gan.disc_warmup}}},
      {"optimizer",
       {{"lr", c.optimizer.lr},
        {"beta1", c.optimizer.beta1},
        {"beta2", c.optimizer.beta2},
        {"eps", c.optimizer.eps},
        {"weight_decay", c.optimizer.weight_decay},
        {"lr_decay", c.optimizer.lr_decay}}},
      {"train", {{"epochs", c.train.epochs}, {"batch_size", c.train.batch_size}}},
      {"relabel",
       {{"enabled", c.relabel.enabled},
        {"function", std::string(to_string(c.relabel.policy.fn.kind()))},
        {"slope", p.slope},
        {"quadratic", p.quadratic},
        {"amplitude", p.amplitude},
        {"steepness", p.steepness},
        {"midpoint", p.midpoint},
        {"delta", c.relabel.policy.delta},
        {"gate", c.relabel.policy.gate},
        {"start_epoch", c.relabel.policy.start_epoch}}},
  };
}

/// Parses a config document. Missing keys keep their defaults; unknown keys
/// are rejected at every level.
inline RunConfig config_from_json(const json& j) {
  using detail::read;
  using detail::reject_unknown;
  RunConfig c;
  reject_unknown(j, {"seed", "seeds", "out_dir", "dataset", "model", "mask_ratio", "gan",
                     "optimizer", "train", "relabel"},
                 "config");
  read(j, "seed", c.seed, "config");
  read(j, "seeds", c.seeds, "config");
  read(j, "out_dir", c.out_dir, "config");
  read(j, "mask_ratio", c.mask_ratio, "config");

  if (j.contains("dataset")) {
    const auto& d = j["dataset"];
    auto& s = c.dataset;
    reject_unknown(d, {"path", "classes", "height", "width", "channels", "patch",
                       "train_per_class", "test_per_class", "train_counts", "noise_rate",
                       "occlusion_prob", "occluder_min", "occluder_max", "regions", "signal",
                       "background_sigma", "occluder_level", "occluder_sigma"},
                   "dataset");
    if (d.contains("path") && !d["path"].is_null()) c.dataset_path = d["path"].get<std::string>();
    read(d, "classes", s.classes, "dataset");
    read(d, "height", s.grid.height, "dataset");
    read(d, "width", s.grid.width, "dataset");
    read(d, "channels", s.grid.channels, "dataset");
    read(d, "patch", s.grid.patch, "dataset");
    read(d, "train_per_class", s.train_per_class, "dataset");
    read(d, "test_per_class", s.test_per_class, "dataset");
    read(d, "train_counts", s.train_counts, "dataset");
    read(d, "noise_rate", s.noise_rate, "dataset");
    read(d, "occlusion_prob", s.occlusion_prob, "dataset");
    read(d, "occluder_min", s.occluder_min, "dataset");
    read(d, "occluder_max", s.occluder_max, "dataset");
    read(d, "signal", s.signal, "dataset");
    read(d, "background_sigma", s.background_sigma, "dataset");
    read(d, "occluder_level", s.occluder_level, "dataset");
    read(d, "occluder_sigma", s.occluder_sigma, "dataset");
    if (d.contains("regions")) {
      s.regions.clear();
      for (const auto& r : d["regions"]) {
        reject_unknown(r, {"row", "col", "rows", "cols"}, "dataset.regions");
        PatchRect rect;
        read(r, "row", rect.row, "dataset.regions");
        read(r, "col", rect.col, "dataset.regions");
        read(r, "rows", rect.rows, "dataset.regions");
        read(r, "cols", rect.cols, "dataset.regions");
        s.regions.push_back(rect);
      }
    }
  }
  if (j.contains("model")) {
    const auto& m = j["model"];
    reject_unknown(m, {"dim", "heads", "depth", "mgn_depth", "mlp_ratio"}, "model");
    read(m, "dim", c.model.dim, "model");
    read(m, "heads", c.model.heads, "model");
    read(m, "depth", c.model.depth, "model");
    read(m, "mgn_depth", c.model.mgn_depth, "model");
    read(m, "mlp_ratio", c.model.mlp_ratio, "model");
  }
  if (j.contains("gan")) {
    const auto& g = j["gan"];
    reject_unknown(g, {"alternations", "disc_steps", "gen_steps", "batch_size", "lr_generator",
                       "lr_discriminator", "lr_decay", "disc_depth", "pretrain_epochs",
                       "disc_warmup"},
                   "gan");
    read(g, "alternations", c.gan.schedule.alternations, "gan");
    read(g, "disc_steps", c.gan.schedule.disc_steps, "gan");
    read(g, "gen_steps", c.gan.schedule.gen_steps, "gan");
    read(g, "batch_size", c.gan.schedule.batch_size, "gan");
    read(g, "lr_generator", c.gan.lr_generator, "gan");
    read(g, "lr_discriminator", c.gan.lr_discriminator, "gan");
    read(g, "lr_decay", c.gan.lr_decay, "gan");
    read(g, "disc_depth", c.gan.disc_depth, "gan");
    read(g, "pretrain_epochs", c.gan.pretrain_epochs, "gan");
    read(g, "disc_warmup", c.gan.disc_warmup, "gan");
  }
  if (j.contains("optimizer")) {
    const auto& o = j["optimizer"];
    reject_unknown(o, {"lr", "beta1", "beta2", "eps", "weight_decay", "lr_decay"}, "optimizer");
    read(o, "lr", c.optimizer.lr, "optimizer");
    read(o, "beta1", c.optimizer.beta1, "optimizer");
    read(o, "beta2", c.optimizer.beta2, "optimizer");
    read(o, "eps", c.optimizer.eps, "optimizer");
    read(o, "weight_decay", c.optimizer.weight_decay, "optimizer");
    read(o, "lr_decay", c.optimizer.lr_decay, "optimizer");
  }
  if (j.contains("train")) {
    const auto& t = j["train"];
    reject_unknown(t, {"epochs", "batch_size"}, "train");
    read(t, "epochs", c.train.epochs, "train");
    read(t, "batch_size", c.train.batch_size, "train");
  }
  if (j.contains("relabel")) {
    const auto& r = j["relabel"];
    reject_unknown(r, {"enabled", "function", "slope", "quadratic", "amplitude", "steepness",
                       "midpoint", "delta", "gate", "start_epoch"},
                   "relabel");
    read(r, "enabled", c.relabel.enabled, "relabel");
    std::string fn = std::string(to_string(c.relabel.policy.fn.kind()));
    read(r, "function", fn, "relabel");
    ThresholdFn::Params p = c.relabel.policy.fn.params();
    read(r, "slope", p.slope, "relabel");
    read(r, "quadratic", p.quadratic, "relabel");
    read(r, "amplitude", p.amplitude, "relabel");
    read(r, "steepness", p.steepness, "relabel");
    read(r, "midpoint", p.midpoint, "relabel");
    c.relabel.policy.fn = ThresholdFn(parse_threshold_kind(fn), p);
    read(r, "delta", c.relabel.policy.delta, "relabel");
    read(r, "gate", c.relabel.policy.gate, "relabel");
    read(r, "start_epoch", c.relabel.policy.start_epoch, "relabel");
  }
  c.validate();
  return c;
}

inline RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ConfigError("config " + path.string() + ": " + e.what());
  }
  return config_from_json(j);
}

}  // namespace mvt
