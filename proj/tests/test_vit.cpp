#include <gtest/gtest.h>

#include <numeric>
#include <vector>

#include "mvt/app/training.hpp"
#include "mvt/mgn/generator.hpp"
#include "mvt/mgn/mask.hpp"
#include "mvt/vit/patch.hpp"
#include "mvt/vit/vit.hpp"
#include "support.hpp"

using namespace mvt;
using mvt::test::param_grad_check;
using mvt::test::random_tensor;
using mvt::test::Tolerance;

namespace {

// D=8, N=4 (8x8 image, 4x4 patches), 2 blocks, K=3.
VitConfig tiny_config() {
  VitConfig c;
  c.grid = {8, 8, 1, 4};
  c.dim = 8;
  c.heads = 2;
  c.depth = 2;
  c.classes = 3;
  c.mlp_ratio = 2;
  c.init_std = 0.5;  // large enough that every path carries signal
  return c;
}

}  // namespace

TEST(Patch, RoundTripIsExact) {
  Rng rng(1);
  for (std::size_t c : {1u, 3u}) {
    auto img = random_tensor<double>({12, 8, c}, rng);
    auto seq = patchify(img, 4);
    EXPECT_EQ(seq.patches.rows(), 6u);
    EXPECT_EQ(seq.patches.cols(), 16u * c);
    EXPECT_EQ(unpatchify(seq), img);
  }
}

TEST(Patch, OrderIsRowMajorOverGrid) {
  Tensor<double> img({4, 4, 1});
  for (std::size_t i = 0; i < 16; ++i) img[i] = static_cast<double>(i);
  const auto seq = patchify(img, 2);
  // Patch 1 is the top-right 2x2 block: pixels (0,2) (0,3) (1,2) (1,3).
  EXPECT_EQ(seq.patches.at(1, 0), 2.0);
  EXPECT_EQ(seq.patches.at(1, 1), 3.0);
  EXPECT_EQ(seq.patches.at(1, 2), 6.0);
  EXPECT_EQ(seq.patches.at(1, 3), 7.0);
  EXPECT_EQ(seq.patches.at(2, 0), 8.0);
}

TEST(Patch, RejectsIndivisibleImages) {
  EXPECT_THROW(patchify(Tensor<double>({6, 8, 1}), 4), ShapeError);
  EXPECT_THROW((PatchGrid{8, 8, 1, 0}.validate()), ShapeError);
}

TEST(Vit, LogitShapeAndDeterministicInit) {
  Rng a(3), b(3);
  VisionTransformer<float> m1(tiny_config(), a), m2(tiny_config(), b);
  Rng rng(4);
  auto img = random_tensor<float>({8, 8, 1}, rng);
  const auto l1 = m1.logits({&img, &img});
  EXPECT_EQ(l1.shape(), (Shape{2, 3}));
  EXPECT_EQ(l1, m2.logits({&img, &img}));
  EXPECT_EQ(l1.row(0)[0], l1.row(1)[0]);
}

TEST(Vit, BatchRowsAreIndependent) {
  Rng r(5);
  VisionTransformer<double> m(tiny_config(), r);
  auto a = random_tensor<double>({8, 8, 1}, r), b = random_tensor<double>({8, 8, 1}, r);
  const auto both = m.logits({&a, &b});
  const auto only_b = m.logits({&b});
  for (std::size_t k = 0; k < 3; ++k) EXPECT_NEAR(both.at(1, k), only_b.at(0, k), 1e-12);
}

TEST(Vit, ParameterInventory) {
  Rng r(6);
  VisionTransformer<float> m(tiny_config(), r);
  const auto params = m.parameters();
  std::size_t total = 0;
  for (auto* p : params) total += p->value.size();
  // embed: 16*8 + 8 + 8 (cls) + 5*8 (pos)
  // block: 2*8 ln1 + 8*24+24 qkv + 8*8+8 out + 2*8 ln2 + 8*16+16 fc1 + 16*8+8 fc2
  // head:  2*8 norm + 8*3 + 3
  const std::size_t embed = 128 + 8 + 8 + 40;
  const std::size_t block = 16 + 216 + 72 + 16 + 144 + 136;
  const std::size_t head = 16 + 27;
  EXPECT_EQ(total, embed + 2 * block + head);
  for (auto* p : params) {
    const bool no_decay = p->name == "embed.pos" || p->name == "embed.cls";
    if (no_decay) {
      EXPECT_FALSE(p->decay) << p->name;
    }
  }
}

template <class T>
class FullModelGrad : public ::testing::Test {};
using Precisions = ::testing::Types<float, double>;
TYPED_TEST_SUITE(FullModelGrad, Precisions);

TYPED_TEST(FullModelGrad, ClassifierMatchesFiniteDifferences) {
  using T = TypeParam;
  Rng r(7);
  VisionTransformer<T> model(tiny_config(), r);
  Rng r2(7);
  VisionTransformer<double> ref(tiny_config(), r2);
  auto a = random_tensor<double>({8, 8, 1}, r), b = random_tensor<double>({8, 8, 1}, r);
  const auto patches = patchify_batch<double>({&a, &b}, model.config().grid);
  const int labels[2] = {2, 0};
  auto rep = param_grad_check<T>(model, ref, [&](auto& m, auto& tape) {
    using U = mvt::test::scalar_t<decltype(tape)>;
    auto logits = m.forward(tape, tape.constant(patches.template cast<U>()), 2);
    return mean(cross_entropy(logits, std::span<const int>(labels)));
  });
  EXPECT_LT(rep.max_rel, Tolerance<T>::max_rel) << rep.where << " of " << rep.checked;
  EXPECT_GT(rep.checked, 1000u);
}

TYPED_TEST(FullModelGrad, GeneratorMatchesFiniteDifferences) {
  using T = TypeParam;
  Rng r(8);
  auto cfg = tiny_config();
  MaskGenerator<T> gen(cfg, r);
  Rng r2(8);
  MaskGenerator<double> ref(cfg, r2);
  auto a = random_tensor<double>({8, 8, 1}, r);
  const auto patches = patchify_batch<double>({&a}, cfg.grid);
  const auto w = Tensor<double>({1, 4}, std::vector<double>{0.3, -1.2, 0.8, 1.5});
  auto rep = param_grad_check<T>(gen, ref, [&](auto& g, auto& tape) {
    using U = mvt::test::scalar_t<decltype(tape)>;
    auto m = g.forward(tape, tape.constant(patches.template cast<U>()), 1);
    return sum(mul(m, tape.constant(w.template cast<U>())));
  });
  EXPECT_LT(rep.max_rel, Tolerance<T>::max_rel) << rep.where << " of " << rep.checked;
}

TEST(Generator, OutputsLieInOpenUnitInterval) {
  Rng r(9);
  MaskGenerator<float> gen(tiny_config(), r);
  auto img = random_tensor<float>({8, 8, 1}, r, -3, 3);
  const auto m = gen.patch_masks(img);
  ASSERT_EQ(m.size(), 4u);
  for (auto v : m.data()) {
    EXPECT_GT(v, 0.0f);
    EXPECT_LT(v, 1.0f);
  }
}

TEST(Generator, HasNoClassToken) {
  Rng r(10);
  MaskGenerator<float> gen(tiny_config(), r);
  EXPECT_FALSE(gen.embedding().class_token.has_value());
  EXPECT_EQ(gen.embedding().positional.value.rows(), 4u);
}

TEST(Pipeline, IdentityMaskReproducesBaselineExactly) {
  Rng r(11);
  auto cfg = tiny_config();
  VisionTransformer<float> model(cfg, r);
  MaskGenerator<float> gen(cfg, r);
  gen.head_weight().value.fill(0.0f);
  gen.head_bias().value.fill(-1000.0f);  // sigmoid underflows to exactly 0

  std::vector<SyntheticSample<float>> samples;
  for (std::size_t i = 0; i < 5; ++i) {
    samples.emplace_back(i, random_tensor<float>({8, 8, 1}, r), 0);
  }
  const std::span<const SyntheticSample<float>> view(samples);
  const auto masked = classifier_inputs(&gen, view);
  const auto plain = classifier_inputs(nullptr, view);
  for (std::size_t i = 0; i < samples.size(); ++i) {
    EXPECT_EQ(*masked.images[i], *plain.images[i]);
  }
  EXPECT_EQ(model.logits(masked.images), model.logits(plain.images));
}

TEST(Pipeline, MaskedImagesUseComplementOfGeneratorScores) {
  Rng r(12);
  auto cfg = tiny_config();
  MaskGenerator<float> gen(cfg, r);
  std::vector<SyntheticSample<float>> samples;
  samples.emplace_back(0, random_tensor<float>({8, 8, 1}, r), 0);
  const auto mp = gen.patch_masks(samples[0].image);
  const auto in = classifier_inputs(&gen, std::span<const SyntheticSample<float>>(samples));
  const auto& img = samples[0].image;
  for (std::size_t row = 0; row < 8; ++row) {
    for (std::size_t col = 0; col < 8; ++col) {
      const std::size_t i = row * 8 + col;
      const float keep = 1.0f - mp[cfg.grid.patch_of(row, col)];
      EXPECT_FLOAT_EQ((*in.images[0])[i], img[i] * keep);
    }
  }
}
