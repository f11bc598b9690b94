#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "mvt/core/ops.hpp"
#include "mvt/core/rng.hpp"
#include "mvt/core/tape.hpp"
#include "mvt/vit/vit.hpp"

namespace mvt {

/// Mask generation network: patch embedding (no class token), a shallow
/// encoder stack, final norm and a per-patch linear D -> 1 + sigmoid head.
/// Output M_p lies in (0, 1); high values mark discardable patches.
template <std::floating_point T>
class MaskGenerator {
 public:
  MaskGenerator() = default;

  /// `cfg.depth` is the generator depth; `cfg.classes` is ignored.
  MaskGenerator(VitConfig cfg, Rng& rng) : cfg_(cfg) {
    cfg_.classes = std::max<std::size_t>(cfg_.classes, 2);
    cfg_.validate();
    embedding_ = make_embedding<T>("mgn.embed", cfg_.grid, cfg_.dim, false, cfg_.init_std, rng);
    for (std::size_t i = 0; i < cfg_.depth; ++i) {
      blocks_.push_back(make_block<T>("mgn.blocks." + std::to_string(i), cfg_.dim, cfg_.heads,
                                      cfg_.mlp_ratio, cfg_.init_std, rng));
    }
    norm_gain_ = detail::const_param<T>("mgn.norm.gain", {cfg_.dim}, T{1});
    norm_bias_ = detail::const_param<T>("mgn.norm.bias", {cfg_.dim}, T{0});
    head_weight_ = detail::normal_param<T>("mgn.head.weight", {cfg_.dim, 1}, cfg_.init_std, rng);
    head_bias_ = detail::const_param<T>("mgn.head.bias", {1}, T{0});
  }

  [[nodiscard]] const VitConfig& config() const noexcept { return cfg_; }
  EmbeddingLayer<T>& embedding() noexcept { return embedding_; }
  std::vector<EncoderBlock<T>>& blocks() noexcept { return blocks_; }
  Parameter<T>& head_weight() noexcept { return head_weight_; }
  Parameter<T>& head_bias() noexcept { return head_bias_; }

  std::vector<Parameter<T>*> parameters() {
    std::vector<Parameter<T>*> out;
    append_params(embedding_, out);
    for (auto& b : blocks_) append_params(b, out);
    for (auto* p : {&norm_gain_, &norm_bias_, &head_weight_, &head_bias_}) out.push_back(p);
    return out;
  }

  void set_trainable(bool on) {
    for (auto* p : parameters()) p->trainable = on;
  }

  /// M_p as [B x N] for patch rows [(B*N) x P*P*C].
  Var<T> forward(Tape<T>& tape, const Var<T>& patches, std::size_t batch) {
    const auto eps = static_cast<T>(cfg_.ln_eps);
    auto tokens = embed(tape, patches, embedding_, batch);
    tokens = encode(tape, tokens, blocks_, batch, eps);
    auto h = layer_norm(tokens, tape.param(norm_gain_), tape.param(norm_bias_), eps);
    auto score = linear(h, tape.param(head_weight_), tape.param(head_bias_));
    return reshape(sigmoid(score), {batch, cfg_.grid.count()});
  }

  /// Forward-only M_p for a batch of images, [B x N].
  Tensor<T> patch_masks(const std::vector<const Tensor<T>*>& images) {
    Tape<T> tape;
    auto patches = tape.constant(patchify_batch(images, cfg_.grid));
    return forward(tape, patches, images.size()).value();
  }

  /// Forward-only M_p for one image, [N].
  Tensor<T> patch_masks(const Tensor<T>& image) {
    return patch_masks(std::vector<const Tensor<T>*>{&image}).reshaped({cfg_.grid.count()});
  }

 private:
  VitConfig cfg_;
  EmbeddingLayer<T> embedding_;
  std::vector<EncoderBlock<T>> blocks_;
  Parameter<T> norm_gain_, norm_bias_;
  Parameter<T> head_weight_, head_bias_;
};

/// gen_patch_masks: M_p for a single H x W x C image.
template <std::floating_point T>
Tensor<T> gen_patch_masks(const Tensor<T>& image, MaskGenerator<T>& gen) {
  if (image.ndim() != 3) {
    throw ShapeError("gen_patch_masks: expected H x W x C image");
  }
  PatchGrid g = gen.config().grid;
  if (image.dim(0) % g.patch != 0 || image.dim(1) % g.patch != 0) {
    throw ShapeError("gen_patch_masks: image not divisible by patch side");
  }
  return gen.patch_masks(image);
}

}  // namespace mvt
