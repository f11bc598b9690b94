#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "mvt/core/adamw.hpp"
#include "mvt/core/error.hpp"
#include "mvt/core/rng.hpp"
#include "mvt/mgn/generator.hpp"
#include "mvt/mgn/losses.hpp"
#include "mvt/mgn/mask.hpp"
#include "mvt/vit/vit.hpp"

namespace mvt {

/// Alternation plan for adversarial MGN training. Zero counts are allowed and
/// simply skip the corresponding phase.
struct GanSchedule {
  std::size_t disc_steps = 1;
  std::size_t gen_steps = 1;
  std::size_t alternations = 2000;
  std::size_t batch_size = 16;

  void validate() const {
    if (batch_size == 0) {
      throw ConfigError("gan schedule: batch size must be positive");
    }
  }
};

struct GanLogRow {
  std::size_t step = 0;
  std::string phase;  // "disc" or "gen"
  double loss = 0.0;
  double mask_mean = 0.0;
  double gap = 0.0;  // |mask_mean - m|
};

/// Cycles through a dataset in reshuffled passes.
class BatchSampler {
 public:
  BatchSampler(std::size_t n, std::size_t batch, Rng& rng) : n_(n), batch_(batch), rng_(&rng) {
    if (n == 0) throw DomainError("batch sampler: empty dataset");
    order_ = permutation(n_, *rng_);
  }

  /// Next batch of indices; sets `wrapped` when a new pass started.
  std::vector<std::size_t> next(bool* wrapped = nullptr) {
    std::vector<std::size_t> out;
    out.reserve(batch_);
    bool w = false;
    while (out.size() < std::min(batch_, n_)) {
      if (pos_ == n_) {
        order_ = permutation(n_, *rng_);
        pos_ = 0;
        w = true;
      }
      out.push_back(order_[pos_++]);
    }
    if (wrapped) *wrapped = w;
    return out;
  }

 private:
  std::size_t n_, batch_;
  Rng* rng_;
  std::vector<std::size_t> order_;
  std::size_t pos_ = 0;
};

/// Alternating adversarial training of the mask generator against a ViT
/// discriminator.
///
/// Discriminator phase: generator frozen; the discriminator classifies the
/// batch seen through generated masks and through random masks of the same
/// area, loss CE + CE. Generator phase: discriminator frozen; only
/// generated-mask views are classified and the generator minimizes the
/// variance of the predicted distribution plus the mask-area penalty.
template <std::floating_point T>
class GanTrainer {
 public:
  using RowCallback = std::function<void(const GanLogRow&)>;

  GanTrainer(MaskGenerator<T>& gen, VisionTransformer<T>& disc, AdamW<T>& gen_opt,
             AdamW<T>& disc_opt, GanSchedule schedule, double ratio)
      : gen_(gen), disc_(disc), gen_opt_(gen_opt), disc_opt_(disc_opt), sched_(schedule),
        ratio_(ratio) {
    sched_.validate();
    if (!(ratio > 0.0 && ratio < 1.0)) {
      throw ConfigError("gan: mask ratio must lie in (0, 1)");
    }
  }

  std::vector<GanLogRow> train(const std::vector<const Tensor<T>*>& images,
                               std::span<const int> labels, Rng& rng,
                               const RowCallback& on_row = {}) {
    if (images.empty() || images.size() != labels.size()) {
      throw DomainError("train_gan: dataset empty or labels missing");
    }
    BatchSampler sampler(images.size(), sched_.batch_size, rng);
    std::vector<GanLogRow> log;
    auto emit = [&](GanLogRow row) {
      if (on_row) on_row(row);
      log.push_back(std::move(row));
    };
    std::size_t step = 0;
    for (std::size_t a = 0; a < sched_.alternations; ++a) {
      for (std::size_t s = 0; s < sched_.disc_steps; ++s) {
        emit(disc_step(images, labels, sampler, rng, step++));
      }
      for (std::size_t s = 0; s < sched_.gen_steps; ++s) {
        emit(gen_step(images, labels, sampler, step++));
      }
    }
    gen_.set_trainable(true);
    disc_.set_trainable(true);
    return log;
  }

 private:
  struct Batch {
    Tensor<T> patches;
    std::vector<int> labels;
    std::size_t size;
  };

  Batch next_batch(const std::vector<const Tensor<T>*>& images, std::span<const int> labels,
                   BatchSampler& sampler) {
    bool wrapped = false;
    const auto idx = sampler.next(&wrapped);
    if (wrapped) {
      gen_opt_.end_epoch();
      disc_opt_.end_epoch();
    }
    std::vector<const Tensor<T>*> imgs;
    Batch b;
    for (auto i : idx) {
      imgs.push_back(images[i]);
      b.labels.push_back(labels[i]);
    }
    b.patches = patchify_batch(imgs, gen_.config().grid);
    b.size = idx.size();
    return b;
  }

  static void check_finite(double loss, std::size_t step, const char* phase) {
    if (!std::isfinite(loss)) {
      throw NumericError(std::string("train_gan: non-finite ") + phase + " loss at step " +
                         std::to_string(step));
    }
  }

  GanLogRow disc_step(const std::vector<const Tensor<T>*>& images, std::span<const int> labels,
                      BatchSampler& sampler, Rng& rng, std::size_t step) {
    auto batch = next_batch(images, labels, sampler);
    const std::size_t n = gen_.config().grid.count();
    gen_.set_trainable(false);
    disc_.set_trainable(true);
    Tensor<T> generated;
    {
      Tape<T> tape;
      generated = gen_.forward(tape, tape.constant(batch.patches), batch.size).value();
    }
    Tensor<T> random({batch.size, n});
    for (std::size_t b = 0; b < batch.size; ++b) {
      auto r = sample_random_mask<T>(n, ratio_, rng);
      std::copy(r.data().begin(), r.data().end(), random.row(b).begin());
    }
    Tape<T> tape;
    auto patches = tape.constant(batch.patches);
    auto gm = disc_.forward(tape, adversarial_view(patches, tape.constant(generated)), batch.size);
    auto rm = disc_.forward(tape, adversarial_view(patches, tape.constant(random)), batch.size);
    auto loss = discriminator_loss(gm, rm, std::span<const int>(batch.labels));
    const double lv = loss.value().item();
    check_finite(lv, step, "discriminator");
    disc_opt_.zero_grad();
    tape.backward(loss);
    disc_opt_.step();
    const double mm = static_cast<double>(mask_mean(generated));
    return {step, "disc", lv, mm, std::abs(mm - ratio_)};
  }

  GanLogRow gen_step(const std::vector<const Tensor<T>*>& images, std::span<const int> labels,
                     BatchSampler& sampler, std::size_t step) {
    auto batch = next_batch(images, labels, sampler);
    gen_.set_trainable(true);
    disc_.set_trainable(false);
    Tape<T> tape;
    auto patches = tape.constant(batch.patches);
    auto masks = gen_.forward(tape, patches, batch.size);
    auto logits = disc_.forward(tape, adversarial_view(patches, masks), batch.size);
    auto loss = generator_loss(logits, masks, ratio_);
    const double lv = loss.value().item();
    check_finite(lv, step, "generator");
    gen_opt_.zero_grad();
    tape.backward(loss);
    gen_opt_.step();
    const double mm = static_cast<double>(mask_mean(masks.value()));
    return {step, "gen", lv, mm, std::abs(mm - ratio_)};
  }

  MaskGenerator<T>& gen_;
  VisionTransformer<T>& disc_;
  AdamW<T>& gen_opt_;
  AdamW<T>& disc_opt_;
  GanSchedule sched_;
  double ratio_;
};

/// Convenience wrapper around GanTrainer.
template <std::floating_point T>
std::vector<GanLogRow> train_gan(const std::vector<const Tensor<T>*>& images,
                                 std::span<const int> labels, MaskGenerator<T>& gen,
                                 VisionTransformer<T>& disc, const GanSchedule& schedule,
                                 AdamW<T>& gen_opt, AdamW<T>& disc_opt, double ratio, Rng& rng,
                                 const typename GanTrainer<T>::RowCallback& on_row = {}) {
  GanTrainer<T> trainer(gen, disc, gen_opt, disc_opt, schedule, ratio);
  return trainer.train(images, labels, rng, on_row);
}

}  // namespace mvt
