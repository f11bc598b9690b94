#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "mvt/app/checkpoint.hpp"
#include "mvt/app/config.hpp"
#include "mvt/core/adamw.hpp"
#include "mvt/core/ops.hpp"
#include "mvt/core/rng.hpp"
#include "mvt/data/dataset.hpp"
#include "mvt/data/io.hpp"
#include "mvt/data/metrics.hpp"
#include "mvt/mgn/gan.hpp"
#include "mvt/mgn/generator.hpp"
#include "mvt/mgn/mask.hpp"
#include "mvt/relabel/relabel.hpp"
#include "mvt/vit/vit.hpp"

namespace mvt {

// Independent random streams derived from the run seed.
namespace streams {
inline constexpr std::uint64_t dataset = 0;
inline constexpr std::uint64_t classifier_init = 1;
inline constexpr std::uint64_t gan = 2;
inline constexpr std::uint64_t shuffle = 3;
}  // namespace streams

using Sample = SyntheticSample<float>;

inline Dataset<float> make_dataset(const RunConfig& cfg) {
  if (!cfg.dataset_path) return generate_dataset<float>(cfg.seeded_dataset());
  const std::filesystem::path root = *cfg.dataset_path;
  Dataset<float> ds;
  ds.spec = cfg.dataset;
  PatchGrid train_grid, test_grid;
  ds.train = load_split<float>(root / "train", &train_grid);
  ds.test = load_split<float>(root / "test", &test_grid);
  if (train_grid.height != test_grid.height || train_grid.width != test_grid.width ||
      train_grid.channels != test_grid.channels) {
    throw FormatError("dataset: train and test images differ in size");
  }
  ds.spec.grid.height = train_grid.height;
  ds.spec.grid.width = train_grid.width;
  ds.spec.grid.channels = train_grid.channels;
  ds.spec.grid.validate();
  const auto k = static_cast<int>(ds.spec.classes);
  for (const auto* split : {&ds.train, &ds.test}) {
    for (const auto& s : *split) {
      if (s.observed_label < 0 || s.observed_label >= k || HiddenTruth::label(s) < 0 ||
          HiddenTruth::label(s) >= k) {
        throw ConfigError("dataset: label outside the configured " + std::to_string(k) +
                          " classes");
      }
    }
  }
  return ds;
}

inline void save_dataset(const std::filesystem::path& root, const Dataset<float>& ds) {
  save_split<float>(root / "train", std::span<const Sample>(ds.train), ds.spec.grid);
  save_split<float>(root / "test", std::span<const Sample>(ds.test), ds.spec.grid);
}

// ---------------------------------------------------------------------------
// Shared classifier helpers

struct EpochStats {
  double loss = 0.0;
  double accuracy = 0.0;  // running accuracy against the labels trained on
};

/// One pass over the data in shuffled mini-batches.
inline EpochStats train_epoch(VisionTransformer<float>& model, AdamW<float>& opt,
                              const std::vector<const Tensor<float>*>& images,
                              std::span<const int> labels, std::size_t batch_size, Rng& rng) {
  const auto order = permutation(images.size(), rng);
  const auto& grid = model.config().grid;
  double loss_sum = 0.0;
  std::size_t hits = 0, batches = 0;
  for (std::size_t start = 0; start < order.size(); start += batch_size) {
    const std::size_t end = std::min(order.size(), start + batch_size);
    std::vector<const Tensor<float>*> imgs;
    std::vector<int> labs;
    for (std::size_t i = start; i < end; ++i) {
      imgs.push_back(images[order[i]]);
      labs.push_back(labels[order[i]]);
    }
    Tape<float> tape;
    auto logits = model.forward(tape, tape.constant(patchify_batch(imgs, grid)), imgs.size());
    auto loss = mean(cross_entropy(logits, std::span<const int>(labs)));
    const double lv = loss.value().item();
    if (!std::isfinite(lv)) throw NumericError("classifier: non-finite training loss");
    opt.zero_grad();
    tape.backward(loss);
    opt.step();
    loss_sum += lv;
    ++batches;
    for (std::size_t r = 0; r < labs.size(); ++r) {
      const auto row = logits.value().row(r);
      const auto arg = std::max_element(row.begin(), row.end()) - row.begin();
      if (arg == labs[r]) ++hits;
    }
  }
  return {loss_sum / static_cast<double>(batches),
          static_cast<double>(hits) / static_cast<double>(images.size())};
}

/// Softmax probabilities [n x K], evaluated in chunks without gradients.
inline Tensor<float> predict_probs(VisionTransformer<float>& model,
                                   const std::vector<const Tensor<float>*>& images,
                                   std::size_t chunk = 256) {
  if (images.empty()) throw DomainError("predict: no images");
  const std::size_t k = model.config().classes;
  Tensor<float> out({images.size(), k});
  for (std::size_t start = 0; start < images.size(); start += chunk) {
    const std::size_t end = std::min(images.size(), start + chunk);
    std::vector<const Tensor<float>*> part(images.begin() + start, images.begin() + end);
    const auto probs = softmax_rows(model.logits(part));
    std::copy(probs.data().begin(), probs.data().end(), out.row(start).begin());
  }
  return out;
}

inline std::vector<int> argmax_rows(const Tensor<float>& t) {
  std::vector<int> out;
  out.reserve(t.rows());
  for (std::size_t r = 0; r < t.rows(); ++r) {
    const auto row = t.row(r);
    out.push_back(static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin()));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Mask generation network

struct MgnRun {
  std::unique_ptr<MaskGenerator<float>> gen;
  std::unique_ptr<VisionTransformer<float>> disc;
  std::unique_ptr<AdamW<float>> gen_opt;
  std::unique_ptr<AdamW<float>> disc_opt;
  std::vector<GanLogRow> log;
};

/// Copies the patch embedding and the first blocks of a classifier into the
/// generator. The classifier's positional table carries an extra class row.
inline void seed_generator(MaskGenerator<float>& gen, VisionTransformer<float>& backbone) {
  auto& ge = gen.embedding();
  auto& be = backbone.embedding();
  ge.projection.value = be.projection.value;
  ge.bias.value = be.bias.value;
  const std::size_t lead = be.class_token ? 1 : 0;
  for (std::size_t i = 0; i < ge.positional.value.rows(); ++i) {
    const auto src = be.positional.value.row(i + lead);
    std::copy(src.begin(), src.end(), ge.positional.value.row(i).begin());
  }
  if (gen.blocks().size() > backbone.blocks().size()) {
    throw ConfigError("generator deeper than its backbone");
  }
  for (std::size_t b = 0; b < gen.blocks().size(); ++b) {
    std::vector<Parameter<float>*> dst, src;
    append_params(gen.blocks()[b], dst);
    append_params(backbone.blocks()[b], src);
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i]->value = src[i]->value;
  }
}

inline AdamWConfig gan_optimizer(const RunConfig& cfg, double lr) {
  AdamWConfig o = cfg.optimizer;
  o.lr = lr;
  o.lr_decay = cfg.gan.lr_decay;
  return o;
}

/// Builds the generator and discriminator, optionally pretrains the shared
/// backbone, warms up the discriminator and runs the alternating schedule.
inline MgnRun train_mgn(const RunConfig& cfg, const Dataset<float>& ds,
                        const std::function<void(const GanLogRow&)>& on_row = {}) {
  if (!(cfg.mask_ratio > 0.0)) throw ConfigError("train-mgn: mask_ratio must be positive");
  Rng rng(derive_seed(cfg.seed, streams::gan));
  MgnRun run;
  auto dc = cfg.discriminator_config();
  auto gc = cfg.generator_config();
  dc.grid = gc.grid = ds.spec.grid;
  run.disc = std::make_unique<VisionTransformer<float>>(dc, rng);
  run.gen = std::make_unique<MaskGenerator<float>>(gc, rng);
  const auto images = image_ptrs<float>(std::span<const Sample>(ds.train));
  const auto labels = observed_labels<float>(std::span<const Sample>(ds.train));
  auto emit = [&](GanLogRow row) {
    if (on_row) on_row(row);
    run.log.push_back(std::move(row));
  };

  if (cfg.gan.pretrain_epochs > 0) {
    AdamW<float> opt(run.disc->parameters(), cfg.optimizer);
    for (std::size_t e = 0; e < cfg.gan.pretrain_epochs; ++e) {
      const auto st = train_epoch(*run.disc, opt, images, labels, cfg.train.batch_size, rng);
      opt.end_epoch();
      emit({e, "pretrain", st.loss, std::nan(""), std::nan("")});
    }
    seed_generator(*run.gen, *run.disc);
  }

  run.gen_opt = std::make_unique<AdamW<float>>(run.gen->parameters(),
                                               gan_optimizer(cfg, cfg.gan.lr_generator));
  run.disc_opt = std::make_unique<AdamW<float>>(run.disc->parameters(),
                                                gan_optimizer(cfg, cfg.gan.lr_discriminator));
  if (cfg.gan.disc_warmup > 0 && cfg.gan.schedule.alternations > 0) {
    GanSchedule warm = cfg.gan.schedule;
    warm.alternations = cfg.gan.disc_warmup;
    warm.disc_steps = 1;
    warm.gen_steps = 0;
    GanTrainer<float> trainer(*run.gen, *run.disc, *run.gen_opt, *run.disc_opt, warm,
                              cfg.mask_ratio);
    trainer.train(images, labels, rng, [&](const GanLogRow& r) {
      auto row = r;
      row.phase = "warmup";
      emit(row);
    });
  }
  GanTrainer<float> trainer(*run.gen, *run.disc, *run.gen_opt, *run.disc_opt, cfg.gan.schedule,
                            cfg.mask_ratio);
  trainer.train(images, labels, rng, emit);
  return run;
}

inline nlohmann::json vit_config_json(const VitConfig& v) {
  return {{"height", v.grid.height},   {"width", v.grid.width}, {"channels", v.grid.channels},
          {"patch", v.grid.patch},     {"dim", v.dim},          {"heads", v.heads},
          {"depth", v.depth},          {"classes", v.classes},  {"mlp_ratio", v.mlp_ratio},
          {"ln_eps", v.ln_eps},        {"init_std", v.init_std}, {"final_norm", v.final_norm}};
}

inline VitConfig vit_config_from_json(const nlohmann::json& j) {
  try {
    VitConfig v;
    v.grid = {j.at("height").get<std::size_t>(), j.at("width").get<std::size_t>(),
              j.at("channels").get<std::size_t>(), j.at("patch").get<std::size_t>()};
    v.dim = j.at("dim").get<std::size_t>();
    v.heads = j.at("heads").get<std::size_t>();
    v.depth = j.at("depth").get<std::size_t>();
    v.classes = j.at("classes").get<std::size_t>();
    v.mlp_ratio = j.at("mlp_ratio").get<std::size_t>();
    v.ln_eps = j.at("ln_eps").get<double>();
    v.init_std = j.at("init_std").get<double>();
    v.final_norm = j.at("final_norm").get<bool>();
    v.validate();
    return v;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint: bad model description: ") + e.what());
  }
}

inline std::string hex64(std::uint64_t v) {
  char buf[20];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

/// Generator, discriminator and both optimizer states.
inline Checkpoint mgn_checkpoint(MgnRun& run, const RunConfig& cfg) {
  Checkpoint ck;
  const auto gp = run.gen->parameters();
  store_parameters(ck, gp);
  for (auto* p : run.disc->parameters()) ck.put("disc." + p->name, p->value);
  if (run.gen_opt) store_optimizer(ck, "opt.gen", *run.gen_opt);
  if (run.disc_opt) store_optimizer(ck, "opt.disc", *run.disc_opt);
  ck.meta["kind"] = "mgn";
  ck.meta["generator"] = vit_config_json(run.gen->config());
  ck.meta["discriminator"] = vit_config_json(run.disc->config());
  ck.meta["mask_ratio"] = cfg.mask_ratio;
  ck.meta["alternations"] = cfg.gan.schedule.alternations;
  ck.meta["seed"] = cfg.seed;
  ck.meta["fingerprint"] = hex64(parameter_fingerprint(gp));
  return ck;
}

/// Rebuilds a generator from a checkpoint holding "mgn.*" tensors.
inline std::unique_ptr<MaskGenerator<float>> generator_from_checkpoint(const Checkpoint& ck) {
  if (!ck.meta.contains("generator")) throw FormatError("checkpoint: no generator description");
  Rng rng(0);
  auto gen = std::make_unique<MaskGenerator<float>>(vit_config_from_json(ck.meta["generator"]), rng);
  restore_parameters(ck, gen->parameters());
  return gen;
}

// ---------------------------------------------------------------------------
// Classifier training with a frozen generator and relabeling

/// Images seen by the classifier: I * (1 - M_p) with M_p from the frozen
/// generator, or the raw images when there is no generator.
inline std::vector<Tensor<float>> masked_images(MaskGenerator<float>& gen,
                                                std::span<const Sample> samples,
                                                std::size_t chunk = 256) {
  std::vector<Tensor<float>> out;
  out.reserve(samples.size());
  const auto& grid = gen.config().grid;
  for (std::size_t start = 0; start < samples.size(); start += chunk) {
    const std::size_t end = std::min(samples.size(), start + chunk);
    std::vector<const Tensor<float>*> part;
    for (std::size_t i = start; i < end; ++i) part.push_back(&samples[i].image);
    const auto masks = gen.patch_masks(part);
    for (std::size_t i = start; i < end; ++i) {
      Tensor<float> mp({grid.count()});
      const auto row = masks.row(i - start);
      std::copy(row.begin(), row.end(), mp.data().begin());
      out.push_back(apply_mask(samples[i].image, assemble_mask(mp, grid)));
    }
  }
  return out;
}

struct ClassifierInputs {
  std::vector<Tensor<float>> storage;
  std::vector<const Tensor<float>*> images;
};

inline ClassifierInputs classifier_inputs(MaskGenerator<float>* gen,
                                          std::span<const Sample> samples) {
  ClassifierInputs in;
  if (gen) {
    in.storage = masked_images(*gen, samples);
    for (const auto& t : in.storage) in.images.push_back(&t);
  } else {
    in.images = image_ptrs<float>(samples);
  }
  return in;
}

struct EpochLog {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double train_accuracy = 0.0;
  double test_accuracy = 0.0;
  double test_mean_class_accuracy = 0.0;
  std::optional<double> occluded_accuracy;
  double lr = 0.0;
  bool relabel_ran = false;
  std::size_t relabel_changed = 0;
  std::optional<std::size_t> relabel_changed_to_true;
  std::optional<double> relabel_precision;
  std::optional<double> relabel_recall;
  std::size_t constant_changed = 0;  // changes a constant-delta policy would make on the same pass
  bool subset_ok = true;
};

struct LoggedDecision {
  std::size_t epoch;
  std::string policy;  // "dynamic" or "constant"
  RelabelDecision decision;
};

struct RelabelSummary {
  std::size_t passes = 0;
  std::size_t changed = 0;
  std::size_t changed_to_true = 0;
  std::optional<std::size_t> activation_epoch;

  [[nodiscard]] std::optional<double> precision() const {
    if (changed == 0) return std::nullopt;
    return static_cast<double>(changed_to_true) / static_cast<double>(changed);
  }
};

struct MvtRun {
  std::unique_ptr<VisionTransformer<float>> model;
  std::unique_ptr<AdamW<float>> opt;
  std::vector<EpochLog> log;
  std::vector<LoggedDecision> decisions;
  RelabelSummary relabel;
  Metrics test_metrics;
  std::optional<Metrics> occluded_metrics;
  std::vector<int> labels;  // working labels after relabeling
};

struct Evaluation {
  Metrics all;
  std::optional<Metrics> occluded;
};

inline Evaluation evaluate_model(VisionTransformer<float>& model,
                                 const std::vector<const Tensor<float>*>& images,
                                 std::span<const Sample> samples) {
  const auto pred = argmax_rows(predict_probs(model, images));
  const auto truth = HiddenTruth::labels(samples);
  Evaluation ev;
  ev.all = compute_metrics(pred, truth, model.config().classes);
  std::vector<int> po, to;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (samples[i].occluded) {
      po.push_back(pred[i]);
      to.push_back(truth[i]);
    }
  }
  if (!po.empty()) ev.occluded = compute_metrics(po, to, model.config().classes);
  return ev;
}

/// Trains the classifier on (optionally masked) images. `gen` is only read.
/// Relabel passes run at the end of every eligible epoch; the hidden truth is
/// consulted for the audit columns only.
inline MvtRun train_mvt(const RunConfig& cfg, const Dataset<float>& ds, MaskGenerator<float>* gen,
                        const std::function<void(const EpochLog&)>& on_epoch = {}) {
  if (cfg.relabel.enabled && cfg.relabel.policy.start_epoch >= cfg.train.epochs) {
    throw ConfigError("relabel.start_epoch " + std::to_string(cfg.relabel.policy.start_epoch) +
                      " is never reached in " + std::to_string(cfg.train.epochs) + " epochs");
  }
  if (gen && gen->config().grid.count() != cfg.classifier_config().grid.count()) {
    throw ConfigError("mask generator and classifier disagree on the patch grid");
  }
  const std::span<const Sample> train(ds.train), test(ds.test);
  const auto train_in = classifier_inputs(gen, train);
  const auto test_in = classifier_inputs(gen, test);

  MvtRun run;
  Rng init(derive_seed(cfg.seed, streams::classifier_init));
  Rng shuffle(derive_seed(cfg.seed, streams::shuffle));
  auto vc = cfg.classifier_config();
  vc.grid = ds.spec.grid;
  run.model = std::make_unique<VisionTransformer<float>>(vc, init);
  run.opt = std::make_unique<AdamW<float>>(run.model->parameters(), cfg.optimizer);
  run.labels = observed_labels<float>(train);
  const auto truth = HiddenTruth::labels(train);
  const auto& policy = cfg.relabel.policy;
  RelabelPolicy constant_policy = policy;
  constant_policy.fn = ThresholdFn::constant();

  for (std::size_t epoch = 0; epoch < cfg.train.epochs; ++epoch) {
    EpochLog row;
    row.epoch = epoch;
    row.lr = run.opt->lr();
    const auto st = train_epoch(*run.model, *run.opt, train_in.images, run.labels,
                                cfg.train.batch_size, shuffle);
    run.opt->end_epoch();
    row.train_loss = st.loss;
    row.train_accuracy = st.accuracy;

    const auto ev = evaluate_model(*run.model, test_in.images, test);
    row.test_accuracy = ev.all.accuracy;
    row.test_mean_class_accuracy = ev.all.mean_class_accuracy;
    if (ev.occluded) row.occluded_accuracy = ev.occluded->accuracy;

    if (cfg.relabel.enabled && epoch >= policy.start_epoch) {
      const auto probs = predict_probs(*run.model, train_in.images);
      auto probs_of = [&probs](std::size_t i) {
        const auto r = probs.row(i);
        return std::vector<double>(r.begin(), r.end());
      };
      // The constant-delta reference sees the labels as they were before the pass.
      std::set<std::size_t> constant_changed;
      std::vector<RelabelDecision> constant_decisions;
      if (st.accuracy >= policy.gate) {
        for (std::size_t i = 0; i < run.labels.size(); ++i) {
          const auto p = probs_of(i);
          auto d = decide(p, run.labels[i], constant_policy, i);
          if (d.changed) {
            constant_changed.insert(i);
            constant_decisions.push_back(d);
          }
        }
      }
      const auto audit = relabel_pass(std::span<int>(run.labels), probs_of, policy, st.accuracy,
                                      std::span<const int>(truth));
      row.relabel_ran = audit.ran;
      if (audit.ran) {
        row.relabel_changed = audit.changed;
        row.relabel_changed_to_true = audit.changed_to_true;
        row.relabel_precision = audit.precision;
        row.relabel_recall = audit.recall;
        row.constant_changed = constant_changed.size();
        for (const auto& d : audit.decisions) {
          if (!d.changed) continue;
          if (!constant_changed.count(d.sample)) row.subset_ok = false;
          run.decisions.push_back({epoch, "dynamic", d});
        }
        for (const auto& d : constant_decisions) run.decisions.push_back({epoch, "constant", d});
        ++run.relabel.passes;
        run.relabel.changed += audit.changed;
        run.relabel.changed_to_true += audit.changed_to_true.value_or(0);
        if (!run.relabel.activation_epoch) run.relabel.activation_epoch = epoch;
      }
    }
    if (on_epoch) on_epoch(row);
    run.log.push_back(row);
  }
  const auto ev = evaluate_model(*run.model, test_in.images, test);
  run.test_metrics = ev.all;
  run.occluded_metrics = ev.occluded;
  for (const auto& r : run.log) run.test_metrics.test_accuracy_series.push_back(r.test_accuracy);
  return run;
}

/// Standard deviation of the epoch-to-epoch changes in test accuracy after
/// relabeling switched on. Needs at least two changes.
inline std::optional<double> post_activation_stability(const std::vector<EpochLog>& log,
                                                       std::optional<std::size_t> activation) {
  if (!activation) return std::nullopt;
  std::vector<double> diffs;
  for (std::size_t i = 1; i < log.size(); ++i) {
    if (log[i - 1].epoch >= *activation) {
      diffs.push_back(log[i].test_accuracy - log[i - 1].test_accuracy);
    }
  }
  if (diffs.size() < 2) return std::nullopt;
  double mean = 0.0;
  for (auto d : diffs) mean += d;
  mean /= static_cast<double>(diffs.size());
  double ss = 0.0;
  for (auto d : diffs) ss += (d - mean) * (d - mean);
  return std::sqrt(ss / static_cast<double>(diffs.size() - 1));
}

inline Checkpoint mvt_checkpoint(MvtRun& run, const RunConfig& cfg, MaskGenerator<float>* gen,
                                 std::size_t epochs) {
  Checkpoint ck;
  store_parameters(ck, run.model->parameters());
  store_optimizer(ck, "opt", *run.opt);
  ck.meta["kind"] = "mvt";
  ck.meta["classifier"] = vit_config_json(run.model->config());
  ck.meta["epoch"] = epochs;
  ck.meta["seed"] = cfg.seed;
  ck.meta["masked"] = gen != nullptr;
  if (gen) {
    const auto gp = gen->parameters();
    store_parameters(ck, gp);
    ck.meta["generator"] = vit_config_json(gen->config());
    ck.meta["mgn_fingerprint"] = hex64(parameter_fingerprint(gp));
  }
  if (run.relabel.activation_epoch) ck.meta["relabel_activation_epoch"] = *run.relabel.activation_epoch;
  return ck;
}

struct LoadedClassifier {
  std::unique_ptr<VisionTransformer<float>> model;
  std::unique_ptr<MaskGenerator<float>> gen;  // null for the unmasked pipeline
};

inline LoadedClassifier classifier_from_checkpoint(const Checkpoint& ck) {
  if (ck.meta.value("kind", "") != "mvt") throw FormatError("checkpoint: not a classifier checkpoint");
  if (!ck.meta.contains("classifier")) throw FormatError("checkpoint: no classifier description");
  LoadedClassifier out;
  Rng rng(0);
  out.model = std::make_unique<VisionTransformer<float>>(vit_config_from_json(ck.meta["classifier"]), rng);
  restore_parameters(ck, out.model->parameters());
  if (ck.meta.value("masked", false)) out.gen = generator_from_checkpoint(ck);
  return out;
}

}  // namespace mvt
