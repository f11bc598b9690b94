#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "mvt/core/error.hpp"
#include "mvt/core/ops.hpp"
#include "mvt/core/rng.hpp"
#include "mvt/core/tape.hpp"
#include "mvt/core/tensor.hpp"
#include "mvt/vit/patch.hpp"

namespace mvt {

struct VitConfig {
  PatchGrid grid{16, 16, 1, 4};
  std::size_t dim = 32;
  std::size_t heads = 4;
  std::size_t depth = 6;
  std::size_t classes = 4;
  std::size_t mlp_ratio = 4;
  double ln_eps = 1e-6;
  double init_std = 0.02;
  bool final_norm = true;

  void validate() const {
    grid.validate();
    if (dim == 0 || heads == 0 || dim % heads != 0) {
      throw ConfigError("vit: dim must be a positive multiple of heads");
    }
    if (classes < 2) {
      throw ConfigError("vit: need at least two classes");
    }
    if (mlp_ratio == 0) {
      throw ConfigError("vit: mlp_ratio must be positive");
    }
  }
};

/// Trainable projection P*P*C -> D, optional class token and positional table.
template <std::floating_point T>
struct EmbeddingLayer {
  Parameter<T> projection;  // [P*P*C x D]
  Parameter<T> bias;        // [D]
  std::optional<Parameter<T>> class_token;  // [D]
  Parameter<T> positional;  // [(N + has_class) x D]

  [[nodiscard]] std::size_t tokens() const { return positional.value.dim(0); }
};

template <std::floating_point T>
struct EncoderBlock {
  std::size_t heads = 1;
  Parameter<T> ln1_gain, ln1_bias;
  Parameter<T> qkv_weight, qkv_bias;  // [D x 3D], [3D]
  Parameter<T> out_weight, out_bias;  // [D x D], [D]
  Parameter<T> ln2_gain, ln2_bias;
  Parameter<T> fc1_weight, fc1_bias;  // [D x rD], [rD]
  Parameter<T> fc2_weight, fc2_bias;  // [rD x D], [D]

  [[nodiscard]] std::size_t dim() const { return ln1_gain.value.size(); }
};

template <std::floating_point T>
struct ClassifierHead {
  bool use_norm = true;
  Parameter<T> norm_gain, norm_bias;  // [D]
  Parameter<T> weight, bias;          // [D x K], [K]

  [[nodiscard]] std::size_t classes() const { return bias.value.size(); }
};

namespace detail {

template <std::floating_point T>
Parameter<T> normal_param(std::string name, Shape shape, double std, Rng& rng) {
  Tensor<T> v(std::move(shape));
  for (auto& x : v.data()) x = truncated_normal<T>(rng, static_cast<T>(std));
  return Parameter<T>(std::move(name), std::move(v), true);
}

template <std::floating_point T>
Parameter<T> const_param(std::string name, Shape shape, T value) {
  return Parameter<T>(std::move(name), Tensor<T>(std::move(shape), value), false);
}

}  // namespace detail

template <std::floating_point T>
EmbeddingLayer<T> make_embedding(const std::string& prefix, const PatchGrid& grid,
                                 std::size_t dim, bool class_token, double std, Rng& rng) {
  EmbeddingLayer<T> e;
  e.projection = detail::normal_param<T>(prefix + ".proj", {grid.patch_dim(), dim}, std, rng);
  e.bias = detail::const_param<T>(prefix + ".proj_bias", {dim}, T{0});
  if (class_token) {
    e.class_token = detail::normal_param<T>(prefix + ".cls", {dim}, std, rng);
    e.class_token->decay = false;
  }
  e.positional = detail::normal_param<T>(
      prefix + ".pos", {grid.count() + (class_token ? 1 : 0), dim}, std, rng);
  e.positional.decay = false;
  return e;
}

template <std::floating_point T>
EncoderBlock<T> make_block(const std::string& prefix, std::size_t dim, std::size_t heads,
                           std::size_t mlp_ratio, double std, Rng& rng) {
  if (heads == 0 || dim % heads != 0) {
    throw ShapeError("encoder block: dim " + std::to_string(dim) + " not divisible by heads " +
                     std::to_string(heads));
  }
  const std::size_t hidden = dim * mlp_ratio;
  EncoderBlock<T> b;
  b.heads = heads;
  b.ln1_gain = detail::const_param<T>(prefix + ".ln1.gain", {dim}, T{1});
  b.ln1_bias = detail::const_param<T>(prefix + ".ln1.bias", {dim}, T{0});
  b.qkv_weight = detail::normal_param<T>(prefix + ".attn.qkv.weight", {dim, 3 * dim}, std, rng);
  b.qkv_bias = detail::const_param<T>(prefix + ".attn.qkv.bias", {3 * dim}, T{0});
  b.out_weight = detail::normal_param<T>(prefix + ".attn.out.weight", {dim, dim}, std, rng);
  b.out_bias = detail::const_param<T>(prefix + ".attn.out.bias", {dim}, T{0});
  b.ln2_gain = detail::const_param<T>(prefix + ".ln2.gain", {dim}, T{1});
  b.ln2_bias = detail::const_param<T>(prefix + ".ln2.bias", {dim}, T{0});
  b.fc1_weight = detail::normal_param<T>(prefix + ".mlp.fc1.weight", {dim, hidden}, std, rng);
  b.fc1_bias = detail::const_param<T>(prefix + ".mlp.fc1.bias", {hidden}, T{0});
  b.fc2_weight = detail::normal_param<T>(prefix + ".mlp.fc2.weight", {hidden, dim}, std, rng);
  b.fc2_bias = detail::const_param<T>(prefix + ".mlp.fc2.bias", {dim}, T{0});
  return b;
}

template <std::floating_point T>
void append_params(EmbeddingLayer<T>& e, std::vector<Parameter<T>*>& out) {
  out.push_back(&e.projection);
  out.push_back(&e.bias);
  if (e.class_token) out.push_back(&*e.class_token);
  out.push_back(&e.positional);
}

template <std::floating_point T>
void append_params(EncoderBlock<T>& b, std::vector<Parameter<T>*>& out) {
  for (auto* p : {&b.ln1_gain, &b.ln1_bias, &b.qkv_weight, &b.qkv_bias, &b.out_weight,
                  &b.out_bias, &b.ln2_gain, &b.ln2_bias, &b.fc1_weight, &b.fc1_bias,
                  &b.fc2_weight, &b.fc2_bias}) {
    out.push_back(p);
  }
}

/// Flattens a batch of images ([B x H x W x C] or B separate images) into
/// patch rows [(B*N) x P*P*C].
template <std::floating_point T>
Tensor<T> patchify_batch(const std::vector<const Tensor<T>*>& images, const PatchGrid& grid) {
  grid.validate();
  if (images.empty()) {
    throw ShapeError("patchify_batch: empty batch");
  }
  const std::size_t n = grid.count(), q = grid.patch_dim();
  Tensor<T> out({images.size() * n, q});
  for (std::size_t b = 0; b < images.size(); ++b) {
    const auto& img = *images[b];
    if (img.shape() != Shape{grid.height, grid.width, grid.channels}) {
      throw ShapeError("patchify_batch: image shape " + shape_str(img.shape()) +
                       " does not match grid");
    }
    detail::patchify_raw(img.data().data(), grid, out.data().data() + b * n * q);
  }
  return out;
}

/// Embeds a batch of patch rows; output is [(B*T) x D] with T = N (+1 with a
/// class token).
template <std::floating_point T>
Var<T> embed(Tape<T>& tape, const Var<T>& patches, EmbeddingLayer<T>& layer, std::size_t batch) {
  std::optional<Var<T>> cls;
  if (layer.class_token) cls = tape.param(*layer.class_token);
  return patch_embed(patches, tape.param(layer.projection), tape.param(layer.bias),
                     tape.param(layer.positional), cls, batch);
}

/// Pre-norm block: x <- x + MHSA(LN(x)); x <- x + FFN(LN(x)).
template <std::floating_point T>
Var<T> encoder_block(Tape<T>& tape, const Var<T>& x, EncoderBlock<T>& blk, std::size_t batch,
                     std::size_t tokens, T ln_eps, Tensor<T>* attn_probs = nullptr) {
  if (x.value().cols() != blk.dim()) {
    throw ShapeError("encode: token width " + std::to_string(x.value().cols()) +
                     " does not match block width " + std::to_string(blk.dim()));
  }
  auto h = layer_norm(x, tape.param(blk.ln1_gain), tape.param(blk.ln1_bias), ln_eps);
  auto qkv = linear(h, tape.param(blk.qkv_weight), tape.param(blk.qkv_bias));
  auto a = attention(qkv, batch, tokens, blk.heads, attn_probs);
  auto y = add(x, linear(a, tape.param(blk.out_weight), tape.param(blk.out_bias)));
  auto h2 = layer_norm(y, tape.param(blk.ln2_gain), tape.param(blk.ln2_bias), ln_eps);
  auto f = linear(gelu(linear(h2, tape.param(blk.fc1_weight), tape.param(blk.fc1_bias))),
                  tape.param(blk.fc2_weight), tape.param(blk.fc2_bias));
  return add(y, f);
}

template <std::floating_point T>
Var<T> encode(Tape<T>& tape, Var<T> tokens, std::vector<EncoderBlock<T>>& blocks,
              std::size_t batch, T ln_eps, std::vector<Tensor<T>>* attn_probs = nullptr) {
  const std::size_t rows = tokens.value().rows();
  if (batch == 0 || rows % batch != 0) {
    throw ShapeError("encode: token rows not divisible by batch");
  }
  const std::size_t t = rows / batch;
  for (auto& blk : blocks) {
    Tensor<T> probs;
    tokens = encoder_block(tape, tokens, blk, batch, t, ln_eps, attn_probs ? &probs : nullptr);
    if (attn_probs) attn_probs->push_back(std::move(probs));
  }
  return tokens;
}

/// Logits [B x K] from the class token (row 0 of every sample).
template <std::floating_point T>
Var<T> classify(Tape<T>& tape, const Var<T>& tokens, ClassifierHead<T>& head, std::size_t batch,
                T ln_eps) {
  const std::size_t rows = tokens.value().rows();
  if (batch == 0 || rows % batch != 0) {
    throw ShapeError("classify: token rows not divisible by batch");
  }
  const std::size_t t = rows / batch;
  std::vector<std::size_t> cls_rows(batch);
  for (std::size_t b = 0; b < batch; ++b) cls_rows[b] = b * t;
  auto c = gather_rows(tokens, std::move(cls_rows));
  if (head.use_norm) {
    c = layer_norm(c, tape.param(head.norm_gain), tape.param(head.norm_bias), ln_eps);
  }
  return linear(c, tape.param(head.weight), tape.param(head.bias));
}

/// ViT classifier: patch embedding with class token, encoder stack, linear head.
template <std::floating_point T>
class VisionTransformer {
 public:
  VisionTransformer() = default;

  VisionTransformer(VitConfig cfg, Rng& rng) : cfg_(cfg) {
    cfg_.validate();
    embedding_ = make_embedding<T>("embed", cfg_.grid, cfg_.dim, true, cfg_.init_std, rng);
    for (std::size_t i = 0; i < cfg_.depth; ++i) {
      blocks_.push_back(make_block<T>("blocks." + std::to_string(i), cfg_.dim, cfg_.heads,
                                      cfg_.mlp_ratio, cfg_.init_std, rng));
    }
    head_.use_norm = cfg_.final_norm;
    head_.norm_gain = detail::const_param<T>("head.norm.gain", {cfg_.dim}, T{1});
    head_.norm_bias = detail::const_param<T>("head.norm.bias", {cfg_.dim}, T{0});
    head_.weight =
        detail::normal_param<T>("head.weight", {cfg_.dim, cfg_.classes}, cfg_.init_std, rng);
    head_.bias = detail::const_param<T>("head.bias", {cfg_.classes}, T{0});
  }

  // Parameters are referenced by address from optimizers; keep models in place.
  VisionTransformer(const VisionTransformer&) = default;
  VisionTransformer& operator=(const VisionTransformer&) = default;

  [[nodiscard]] const VitConfig& config() const noexcept { return cfg_; }
  EmbeddingLayer<T>& embedding() noexcept { return embedding_; }
  std::vector<EncoderBlock<T>>& blocks() noexcept { return blocks_; }
  ClassifierHead<T>& head() noexcept { return head_; }

  std::vector<Parameter<T>*> parameters() {
    std::vector<Parameter<T>*> out;
    append_params(embedding_, out);
    for (auto& b : blocks_) append_params(b, out);
    for (auto* p : {&head_.norm_gain, &head_.norm_bias, &head_.weight, &head_.bias}) {
      out.push_back(p);
    }
    return out;
  }

  void set_trainable(bool on) {
    for (auto* p : parameters()) p->trainable = on;
  }

  /// Logits [B x K] for patch rows [(B*N) x P*P*C].
  Var<T> forward(Tape<T>& tape, const Var<T>& patches, std::size_t batch,
                 std::vector<Tensor<T>>* attn_probs = nullptr) {
    const auto eps = static_cast<T>(cfg_.ln_eps);
    auto tokens = embed(tape, patches, embedding_, batch);
    tokens = encode(tape, tokens, blocks_, batch, eps, attn_probs);
    return classify(tape, tokens, head_, batch, eps);
  }

  /// Forward-only logits for a batch of images.
  Tensor<T> logits(const std::vector<const Tensor<T>*>& images) {
    Tape<T> tape;
    auto patches = tape.constant(patchify_batch(images, cfg_.grid));
    return forward(tape, patches, images.size()).value();
  }

 private:
  VitConfig cfg_;
  EmbeddingLayer<T> embedding_;
  std::vector<EncoderBlock<T>> blocks_;
  ClassifierHead<T> head_;
};

}  // namespace mvt
