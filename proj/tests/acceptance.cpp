// Acceptance run: one PASS/FAIL line per criterion. Usage:
//   acceptance [--work DIR] [criterion numbers...]
// With no numbers every criterion runs. Exit status is nonzero if any fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <ctime>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

#include "mvt/app/commands.hpp"
#include "mvt/app/training.hpp"
#include "mvt/mgn/losses.hpp"
#include "mvt/relabel/relabel.hpp"
#include "support.hpp"

using namespace mvt;
namespace fs = std::filesystem;
using mvt::test::grad_check;
using mvt::test::param_grad_check;
using mvt::test::random_tensor;

namespace {

// Pinned tolerances and budgets.
constexpr double kGradRelF32 = 1e-3;
constexpr double kGradRelF64 = 1e-6;
constexpr double kGradSuiteSeconds = 60.0;
constexpr double kLossIdentityTol = 1e-6;
constexpr std::size_t kRelabelCases = 10000;
constexpr double kMaskAreaTol = 0.05;
constexpr std::size_t kMaskTailRows = 200;
constexpr double kRunSeconds = 600.0;
constexpr double kSelectivityMargin = 0.10;
constexpr double kOcclusionGain = 0.02;
constexpr double kBaselineAccuracy = 0.90;
constexpr std::size_t kBaselineEpochs = 30;
const std::vector<std::uint64_t> kSeeds{1, 2, 3, 4, 5};

// Relabel runs: 20% noise, MGN off so only the relabel policy differs. The
// gate opens once the model fits 75% of the noisy labels, i.e. most of the
// clean signal.
constexpr double kRelabelNoise = 0.2;
constexpr double kRelabelGate = 0.75;
constexpr double kRelabelDelta = 0.2;

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(double v, int prec = 4) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*f", prec, v);
  return buf;
}

std::string sci(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.2e", v);
  return buf;
}

double cpu_seconds() { return static_cast<double>(std::clock()) / CLOCKS_PER_SEC; }

RunConfig default_config() {
  return load_config(fs::path(MVT_SOURCE_DIR) / "configs" / "default.json");
}

CsvData read_csv(const fs::path& p) { return parse_csv(read_file(p)); }

double cell(const CsvData& d, const std::vector<std::string>& row, const std::string& col) {
  const auto i = d.column(col);
  if (i < 0) throw FormatError("missing column " + col);
  return std::stod(row[static_cast<std::size_t>(i)]);
}

// ---------------------------------------------------------------------------
// Shared runs

class Runs {
 public:
  explicit Runs(fs::path work) : work_(std::move(work)) {}

  struct Mgn {
    fs::path checkpoint, log;
    double seconds;
  };

  const Mgn& mgn(std::uint64_t seed, double m) {
    const auto key = std::make_pair(seed, m);
    if (auto it = mgn_.find(key); it != mgn_.end()) return it->second;
    auto cfg = default_config();
    cfg.seed = seed;
    cfg.mask_ratio = m;
    const double t0 = cpu_seconds();
    const auto out = cmd_train_mgn(cfg, work_ / ("mgn-m" + fmt(m, 2) + "-seed-" + std::to_string(seed)));
    const double dt = cpu_seconds() - t0;
    std::cerr << "  mgn m=" << m << " seed " << seed << ": " << fmt(dt, 0) << " s\n";
    return mgn_.emplace(key, Mgn{out.checkpoint, out.log, dt}).first->second;
  }

  const fs::path& work() const { return work_; }

 private:
  fs::path work_;
  std::map<std::pair<std::uint64_t, double>, Mgn> mgn_;
};

// ---------------------------------------------------------------------------
// 1. Gradient suite

template <class T>
double gradient_suite(std::vector<std::string>& worst) {
  double ratio = 0.0;
  const double tol = sizeof(T) == 4 ? kGradRelF32 : kGradRelF64;
  auto note = [&](const std::string& name, const mvt::test::GradReport& r) {
    ratio = std::max(ratio, r.max_rel / tol);
    if (r.max_rel >= tol) worst.push_back(name + " " + sci(r.max_rel));
  };
  Rng rng(101);
  auto a = random_tensor<T>({3, 4}, rng), b = random_tensor<T>({3, 4}, rng);
  note("add/mul/sub", grad_check<T>({a, b}, [](auto&, auto& v) {
         return add(mul(v[0], v[1]), sub(v[0], v[1]));
       }));
  note("scale/add_scalar", grad_check<T>({a}, [](auto&, auto& v) {
         using U = mvt::test::scalar_t<decltype(v)>;
         return add_scalar(scale(v[0], U(-1.5)), U(0.25));
       }));
  note("sigmoid", grad_check<T>({a}, [](auto&, auto& v) { return sigmoid(v[0]); }));
  note("gelu", grad_check<T>({a}, [](auto&, auto& v) { return gelu(v[0]); }));
  auto k = random_tensor<T>({2, 3}, rng, 0.2, 1.0);
  k[1] = -k[1];
  note("abs", grad_check<T>({k}, [](auto&, auto& v) { return abs(v[0]); }));
  note("sum", grad_check<T>({a}, [](auto&, auto& v) { return sum(v[0]); }));
  note("mean", grad_check<T>({a}, [](auto&, auto& v) { return mean(v[0]); }));
  note("row_mean", grad_check<T>({a}, [](auto&, auto& v) { return row_mean(v[0]); }));
  note("variance", grad_check<T>({a}, [](auto&, auto& v) { return variance(v[0]); }));
  note("gather_rows", grad_check<T>({a}, [](auto&, auto& v) { return gather_rows(v[0], {2, 0, 2}); }));
  note("reshape", grad_check<T>({a}, [](auto&, auto& v) { return reshape(v[0], {4, 3}); }));
  auto s = random_tensor<T>({3}, rng);
  note("scale_rows", grad_check<T>({a, s}, [](auto&, auto& v) { return scale_rows(v[0], v[1]); }));
  auto w = random_tensor<T>({4, 2}, rng), bias = random_tensor<T>({2}, rng);
  note("matmul", grad_check<T>({a, w}, [](auto&, auto& v) { return matmul(v[0], v[1]); }));
  note("linear", grad_check<T>({a, w, bias}, [](auto&, auto& v) { return linear(v[0], v[1], v[2]); }));
  auto x = random_tensor<T>({3, 4}, rng, -2, 2);
  note("softmax", grad_check<T>({x}, [](auto&, auto& v) { return softmax(v[0]); }));
  note("cross_entropy", grad_check<T>({x}, [](auto&, auto& v) {
         const int labels[3] = {1, 3, 0};
         return cross_entropy(v[0], std::span<const int>(labels));
       }));
  auto g = random_tensor<T>({4}, rng, 0.5, 1.5), be = random_tensor<T>({4}, rng);
  note("layer_norm", grad_check<T>({x, g, be}, [](auto&, auto& v) {
         using U = mvt::test::scalar_t<decltype(v)>;
         return layer_norm(v[0], v[1], v[2], U(1e-6));
       }));
  auto qkv = random_tensor<T>({6, 12}, rng);
  note("attention", grad_check<T>({qkv}, [](auto&, auto& v) { return attention(v[0], 2, 3, 2); }));
  auto patches = random_tensor<T>({6, 4}, rng);
  auto pw = random_tensor<T>({4, 5}, rng), pb = random_tensor<T>({5}, rng);
  auto pos = random_tensor<T>({4, 5}, rng), cls = random_tensor<T>({5}, rng);
  note("patch_embed", grad_check<T>({patches, pw, pb, pos, cls}, [](auto&, auto& v) {
         using U = mvt::test::scalar_t<decltype(v)>;
         return patch_embed(v[0], v[1], v[2], v[3], std::optional<Var<U>>(v[4]), 2);
       }));
  auto logits = random_tensor<T>({3, 4}, rng, -2, 2);
  auto masks = random_tensor<T>({3, 5}, rng, 0.3, 0.9);
  note("generator_loss", grad_check<T>({logits, masks}, [](auto&, auto& v) {
         return generator_loss(v[0], v[1], 0.15);
       }));
  note("discriminator_loss", grad_check<T>({logits, x}, [](auto&, auto& v) {
         const int labels[3] = {0, 3, 1};
         return discriminator_loss(v[0], v[1], std::span<const int>(labels));
       }));
  auto pm = random_tensor<T>({2, 3}, rng, 0.0, 1.0);
  note("adversarial_view", grad_check<T>({patches, pm}, [](auto&, auto& v) {
         return adversarial_view(v[0], v[1]);
       }));

  // Full model at D=8, N=4, 2 blocks, K=3.
  VitConfig c;
  c.grid = {8, 8, 1, 4};
  c.dim = 8;
  c.heads = 2;
  c.depth = 2;
  c.classes = 3;
  c.mlp_ratio = 2;
  c.init_std = 0.5;
  Rng r1(7), r2(7);
  VisionTransformer<T> model(c, r1);
  VisionTransformer<double> ref(c, r2);
  auto i1 = random_tensor<double>({8, 8, 1}, r1), i2 = random_tensor<double>({8, 8, 1}, r1);
  const auto batch = patchify_batch<double>({&i1, &i2}, c.grid);
  note("classifier", param_grad_check<T>(model, ref, [&](auto& m, auto& tape) {
         using U = mvt::test::scalar_t<decltype(tape)>;
         const int labels[2] = {2, 0};
         auto out = m.forward(tape, tape.constant(batch.template cast<U>()), 2);
         return mean(cross_entropy(out, std::span<const int>(labels)));
       }));
  Rng r3(8), r4(8);
  MaskGenerator<T> gen(c, r3);
  MaskGenerator<double> gref(c, r4);
  const auto proj = Tensor<double>({2, 4}, std::vector<double>{0.3, -1.2, 0.8, 1.5, -0.4, 0.9, 1.1, -0.7});
  note("generator", param_grad_check<T>(gen, gref, [&](auto& m, auto& tape) {
         using U = mvt::test::scalar_t<decltype(tape)>;
         auto out = m.forward(tape, tape.constant(batch.template cast<U>()), 2);
         return sum(mul(out, tape.constant(proj.template cast<U>())));
       }));
  return ratio;
}

Outcome criterion_1(Runs&) {
  const double t0 = cpu_seconds();
  std::vector<std::string> worst;
  const double r32 = gradient_suite<float>(worst);
  const double r64 = gradient_suite<double>(worst);
  const double dt = cpu_seconds() - t0;
  Outcome o;
  o.pass = r32 < 1.0 && r64 < 1.0 && dt < kGradSuiteSeconds;
  o.detail = "max err/bound f32 " + fmt(r32, 3) + ", f64 " + fmt(r64, 3) + ", " + fmt(dt, 1) +
             " s CPU (bound " + fmt(kGradSuiteSeconds, 0) + " s)";
  for (const auto& w : worst) o.detail += "; over bound: " + w;
  return o;
}

// ---------------------------------------------------------------------------
// 2. Loss identities

// Batched losses at a batch of identical uniform rows. Dyadic ratios and
// power-of-two class counts keep every intermediate exact, so there the
// generator loss must be exactly 0; elsewhere it must be within 1e-6.
double batch_generator_loss(std::size_t k, std::size_t n, double m) {
  Tape<double> tape;
  auto logits = tape.constant(Tensor<double>({3, k}, 0.4));
  Tensor<double> masks({3, n});
  for (std::size_t r = 0; r < 3; ++r) {
    for (std::size_t j = 0; j < n; ++j) masks.at(r, j) = j % 2 == 0 ? 2 * m : 0.0;
  }
  return generator_loss(logits, tape.constant(masks), m).value().item();
}

double batch_discriminator_loss(std::size_t k) {
  Tape<double> tape;
  const int labels[2] = {0, static_cast<int>(k) - 1};
  return discriminator_loss(tape.constant(Tensor<double>({2, k}, -1.3)),
                            tape.constant(Tensor<double>({2, k}, 0.7)),
                            std::span<const int>(labels))
      .value()
      .item();
}

Outcome criterion_2(Runs&) {
  bool exact = true;
  for (std::size_t k : {2u, 4u, 8u}) {
    for (double m : {0.125, 0.25, 0.5}) exact = exact && batch_generator_loss(k, 16, m) == 0.0;
  }
  double worst_g = 0.0, worst_d = 0.0;
  for (std::size_t k : {3u, 5u, 7u}) {
    for (double m : {0.1, 0.15, 0.2}) worst_g = std::max(worst_g, std::abs(batch_generator_loss(k, 16, m)));
  }
  for (std::size_t k : {2u, 3u, 4u, 7u, 10u}) {
    worst_d = std::max(worst_d, std::abs(batch_discriminator_loss(k) - 2.0 * std::log(static_cast<double>(k))));
  }
  return {exact && worst_g <= kLossIdentityTol && worst_d <= kLossIdentityTol,
          "generator loss exactly 0 on dyadic cases: " + std::string(exact ? "yes" : "no") +
              ", otherwise max |L_G| " + sci(worst_g) + ", max |L_D - 2 ln K| " +
              sci(worst_d) + " (bound 1e-6)"};
}

// ---------------------------------------------------------------------------
// 3. Constant rule equivalence

Outcome criterion_3(Runs&) {
  Rng rng(303);
  std::uniform_int_distribution<std::size_t> kdist(2, 10);
  std::uniform_real_distribution<double> ddist(0.0, 0.9);
  std::gamma_distribution<double> gam(0.4, 1.0);
  ThresholdFn::Params zero;
  zero.slope = zero.quadratic = zero.amplitude = 0.0;
  std::size_t disagree = 0, flips = 0;
  for (std::size_t i = 0; i < kRelabelCases; ++i) {
    std::vector<double> p(kdist(rng));
    double s = 0.0;
    for (auto& v : p) s += (v = gam(rng) + 1e-12);
    for (auto& v : p) v /= s;
    const int given = std::uniform_int_distribution<int>(0, static_cast<int>(p.size()) - 1)(rng);
    const double delta = ddist(rng);
    // The rule written out: take the most probable class when its lead over
    // the given label is larger than delta.
    std::size_t best = 0;
    for (std::size_t j = 1; j < p.size(); ++j) {
      if (p[j] > p[best]) best = j;
    }
    const int expected = p[best] - p[static_cast<std::size_t>(given)] > delta ? static_cast<int>(best) : given;
    flips += expected != given;
    for (auto kind : {ThresholdKind::linear, ThresholdKind::quadratic, ThresholdKind::sigmoid,
                      ThresholdKind::constant}) {
      RelabelPolicy pol;
      pol.fn = ThresholdFn(kind, zero);
      pol.delta = delta;
      pol.gate = 0.0;
      disagree += decide(p, given, pol).new_label != expected;
    }
  }
  return {disagree == 0, std::to_string(kRelabelCases) + " cases x 4 zero-function families, " +
                             std::to_string(disagree) + " disagreements, " + std::to_string(flips) +
                             " relabels expected"};
}

// ---------------------------------------------------------------------------
// 4. Mask-area convergence

Outcome criterion_4(Runs& runs) {
  Outcome o{true, ""};
  for (double m : {0.15, 0.20}) {
    const auto& r = runs.mgn(1, m);
    const auto log = read_csv(r.log);
    std::vector<double> gen_means;
    for (const auto& row : log.rows) {
      if (row[static_cast<std::size_t>(log.column("phase"))] == "gen") {
        gen_means.push_back(cell(log, row, "mask_mean"));
      }
    }
    const std::size_t n = std::min(kMaskTailRows, gen_means.size());
    double avg = 0.0;
    for (std::size_t i = gen_means.size() - n; i < gen_means.size(); ++i) avg += gen_means[i];
    avg = n ? avg / static_cast<double>(n) : std::nan("");
    const bool ok = n > 0 && std::abs(avg - m) <= kMaskAreaTol && r.seconds <= kRunSeconds;
    o.pass = o.pass && ok;
    o.detail += (o.detail.empty() ? "" : "; ") + std::string("m=") + fmt(m, 2) + ": M_avg " +
                fmt(avg) + " over last " + std::to_string(n) + " generator steps, " +
                fmt(r.seconds, 0) + " s CPU";
  }
  o.detail += " (bounds 0.05, 600 s)";
  return o;
}

// ---------------------------------------------------------------------------
// 5. Selectivity

Outcome criterion_5(Runs& runs) {
  Outcome o{true, ""};
  std::size_t passed = 0;
  for (auto seed : kSeeds) {
    const auto& r = runs.mgn(seed, 0.15);
    const auto gen = generator_from_checkpoint(load_checkpoint(r.checkpoint));
    auto cfg = default_config();
    cfg.seed = seed;
    const auto ds = make_dataset(cfg);
    double inf = 0.0, bg = 0.0;
    std::size_t ni = 0, nb = 0;
    for (const auto& s : ds.test) {
      const auto mp = gen->patch_masks(s.image);
      const std::set<std::size_t> informative(s.informative_patches.begin(), s.informative_patches.end());
      const std::set<std::size_t> covered(s.occluder_patches.begin(), s.occluder_patches.end());
      for (std::size_t i = 0; i < mp.size(); ++i) {
        if (covered.count(i)) continue;
        const double keep = 1.0 - static_cast<double>(mp[i]);
        if (informative.count(i)) {
          inf += keep;
          ++ni;
        } else {
          bg += keep;
          ++nb;
        }
      }
    }
    inf /= static_cast<double>(ni);
    bg /= static_cast<double>(nb);
    const bool ok = inf - bg >= kSelectivityMargin;
    passed += ok;
    o.detail += (o.detail.empty() ? "" : "; ") + std::string("seed ") + std::to_string(seed) +
                ": informative " + fmt(inf) + " vs background " + fmt(bg);
  }
  o.pass = passed == kSeeds.size();
  o.detail = std::to_string(passed) + "/5 seeds with margin >= 0.10; " + o.detail;
  return o;
}

// ---------------------------------------------------------------------------
// 6. Occluded-split gain

Outcome criterion_6(Runs& runs) {
  double gain = 0.0;
  std::string per;
  for (auto seed : kSeeds) {
    auto cfg = default_config();
    cfg.seed = seed;
    const auto base_dir = runs.work() / "occlusion" / ("seed-" + std::to_string(seed));
    auto plain = cfg;
    plain.mask_ratio = 0.0;
    const auto b = cmd_train_mvt(plain, std::nullopt, base_dir / "baseline");
    cfg.mask_ratio = 0.15;
    const auto m = cmd_train_mvt(cfg, runs.mgn(seed, 0.15).checkpoint, base_dir / "masked");
    const double d = m.occluded->accuracy - b.occluded->accuracy;
    gain += d;
    per += "; seed " + std::to_string(seed) + " " + fmt(b.occluded->accuracy) + " -> " +
           fmt(m.occluded->accuracy);
    std::cerr << "  occlusion seed " << seed << ": " << fmt(d) << "\n";
  }
  gain /= static_cast<double>(kSeeds.size());
  return {gain >= kOcclusionGain,
          "mean occluded accuracy gain " + fmt(gain) + " (bound 0.02)" + per};
}

// ---------------------------------------------------------------------------
// 7 and 8. Threshold-function comparison and subset property

struct RelabelRun {
  std::optional<double> precision;
  std::optional<double> stability;
  fs::path decisions;
};

// Sample standard deviation of consecutive test-accuracy differences from
// the first epoch with an active relabel pass onward, read back from the log.
std::optional<double> stability_from_log(const fs::path& path) {
  const auto log = read_csv(path);
  std::optional<std::size_t> start;
  std::vector<double> acc;
  for (std::size_t i = 0; i < log.rows.size(); ++i) {
    acc.push_back(cell(log, log.rows[i], "test_accuracy"));
    if (!start && cell(log, log.rows[i], "relabel_active") == 1.0) start = i;
  }
  if (!start || acc.size() - *start < 3) return std::nullopt;
  std::vector<double> d;
  for (std::size_t i = *start + 1; i < acc.size(); ++i) d.push_back(acc[i] - acc[i - 1]);
  double mu = 0.0;
  for (auto v : d) mu += v;
  mu /= static_cast<double>(d.size());
  double ss = 0.0;
  for (auto v : d) ss += (v - mu) * (v - mu);
  return std::sqrt(ss / static_cast<double>(d.size() - 1));
}

const std::vector<ThresholdKind> kKinds{ThresholdKind::constant, ThresholdKind::linear,
                                        ThresholdKind::quadratic, ThresholdKind::sigmoid};

std::map<std::pair<ThresholdKind, std::uint64_t>, RelabelRun>& relabel_runs(Runs& runs) {
  static std::map<std::pair<ThresholdKind, std::uint64_t>, RelabelRun> cache;
  if (!cache.empty()) return cache;
  for (auto kind : kKinds) {
    for (auto seed : kSeeds) {
      auto cfg = default_config();
      cfg.seed = seed;
      cfg.mask_ratio = 0.0;
      cfg.dataset.noise_rate = kRelabelNoise;
      cfg.relabel.enabled = true;
      cfg.relabel.policy.gate = kRelabelGate;
      cfg.relabel.policy.delta = kRelabelDelta;
      cfg.relabel.policy.start_epoch = 0;
      cfg.relabel.policy.fn = ThresholdFn(kind, cfg.relabel.policy.fn.params());
      const auto dir = runs.work() / "relabel" / to_string(kind) / ("seed-" + std::to_string(seed));
      const auto out = cmd_train_mvt(cfg, std::nullopt, dir);
      RelabelRun r{out.relabel.precision(), stability_from_log(out.log), out.decisions};
      std::cerr << "  relabel " << to_string(kind) << " seed " << seed << ": precision "
                << (r.precision ? fmt(*r.precision) : "-") << " stability "
                << (r.stability ? fmt(*r.stability) : "-") << "\n";
      cache.emplace(std::make_pair(kind, seed), r);
    }
  }
  return cache;
}

Outcome criterion_7(Runs& runs) {
  auto& all = relabel_runs(runs);
  auto mean_of = [&](ThresholdKind k, auto field) {
    double s = 0.0;
    std::size_t n = 0;
    for (auto seed : kSeeds) {
      const auto v = field(all.at({k, seed}));
      if (v) s += *v, ++n;
    }
    return std::make_pair(n ? s / static_cast<double>(n) : std::nan(""), n);
  };
  auto prec = [](const RelabelRun& r) { return r.precision; };
  auto stab = [](const RelabelRun& r) { return r.stability; };
  const auto [cp, cpn] = mean_of(ThresholdKind::constant, prec);
  const auto [cs, csn] = mean_of(ThresholdKind::constant, stab);
  Outcome o{cpn > 0 && csn > 0, "constant: precision " + fmt(cp) + " stability " + fmt(cs)};
  for (auto k : {ThresholdKind::linear, ThresholdKind::quadratic, ThresholdKind::sigmoid}) {
    const auto [p, pn] = mean_of(k, prec);
    const auto [s, sn] = mean_of(k, stab);
    const bool ok = pn > 0 && sn > 0 && p >= cp && s < cs;
    o.pass = o.pass && ok;
    o.detail += "; " + std::string(to_string(k)) + ": precision " + fmt(p) + " stability " +
                fmt(s) + (ok ? "" : " [fails]");
  }
  o.detail += " (means over seeds with a defined value)";
  return o;
}

Outcome criterion_8(Runs& runs) {
  auto& all = relabel_runs(runs);
  std::size_t passes = 0, violations = 0, dynamic_changes = 0;
  for (const auto& [key, run] : all) {
    if (key.first == ThresholdKind::constant) continue;
    const auto d = read_csv(run.decisions);
    std::map<std::string, std::pair<std::set<std::string>, std::set<std::string>>> by_epoch;
    const auto ie = static_cast<std::size_t>(d.column("epoch"));
    const auto ip = static_cast<std::size_t>(d.column("policy"));
    const auto is = static_cast<std::size_t>(d.column("sample"));
    for (const auto& row : d.rows) {
      auto& sets = by_epoch[row[ie]];
      (row[ip] == "constant" ? sets.second : sets.first).insert(row[is]);
    }
    for (const auto& [epoch, sets] : by_epoch) {
      ++passes;
      dynamic_changes += sets.first.size();
      for (const auto& s : sets.first) violations += sets.second.count(s) == 0;
    }
  }
  return {violations == 0 && dynamic_changes > 0,
          std::to_string(passes) + " logged passes, " + std::to_string(dynamic_changes) +
              " dynamic relabels, " + std::to_string(violations) + " outside the constant set"};
}

// ---------------------------------------------------------------------------
// 9. Reproducibility

RunConfig reduced_config() {
  auto cfg = default_config();
  cfg.dataset.train_per_class = 64;
  cfg.dataset.test_per_class = 32;
  cfg.gan.pretrain_epochs = 2;
  cfg.gan.disc_warmup = 20;
  cfg.gan.schedule.alternations = 40;
  cfg.train.epochs = 3;
  cfg.relabel.enabled = true;
  cfg.relabel.policy.gate = 0.0;
  cfg.relabel.policy.fn = ThresholdFn(ThresholdKind::sigmoid);
  return cfg;
}

std::map<std::string, std::string> snapshot(const fs::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (e.is_regular_file()) out[fs::relative(e.path(), root).string()] = read_file(e.path());
  }
  return out;
}

Outcome criterion_9(Runs& runs) {
  const auto cfg = reduced_config();
  // Both runs write to the same directory so paths recorded in outputs agree.
  const auto dir = runs.work() / "repro";
  std::map<std::string, std::string> first;
  for (int rep = 0; rep < 2; ++rep) {
    fs::remove_all(dir);
    const auto mgn = cmd_train_mgn(cfg, dir / "mgn");
    const auto mvt = cmd_train_mvt(cfg, mgn.checkpoint, dir / "mvt");
    cmd_evaluate(cfg, {mvt.checkpoint}, false, dir / "eval");
    cmd_curves({mvt.log}, dir / "curves");
    auto ablate_cfg = cfg;
    ablate_cfg.seeds = {1};
    cmd_ablate(ablate_cfg, "threshold-fn", dir / "ablate");
    auto snap = snapshot(dir);
    if (rep == 0) {
      first = std::move(snap);
    } else if (snap != first) {
      std::string diff;
      for (const auto& [k, v] : snap) {
        if (!first.count(k) || first[k] != v) diff += " " + k;
      }
      return {false, "rerun differs in:" + diff};
    }
  }

  // Checkpoint round trip: in-memory models against their reloaded copies.
  const auto ds = make_dataset(cfg);
  auto mgn = train_mgn(cfg, ds);
  const auto gen_back = generator_from_checkpoint(parse_checkpoint(serialize_checkpoint(mgn_checkpoint(mgn, cfg))));
  auto run = train_mvt(cfg, ds, mgn.gen.get());
  const auto loaded = classifier_from_checkpoint(
      parse_checkpoint(serialize_checkpoint(mvt_checkpoint(run, cfg, mgn.gen.get(), cfg.train.epochs))));
  const auto images = image_ptrs<float>(std::span<const Sample>(ds.test));
  const auto m1 = mgn.gen->patch_masks(images), m2 = gen_back->patch_masks(images);
  const auto l1 = run.model->logits(images), l2 = loaded.model->logits(images);
  const auto l3 = loaded.gen->patch_masks(images);
  const bool bits = m1.size() == m2.size() && l1.size() == l2.size() &&
                    std::memcmp(m1.data().data(), m2.data().data(), m1.size() * sizeof(float)) == 0 &&
                    std::memcmp(m1.data().data(), l3.data().data(), m1.size() * sizeof(float)) == 0 &&
                    std::memcmp(l1.data().data(), l2.data().data(), l1.size() * sizeof(float)) == 0;
  return {bits, std::to_string(first.size()) +
                    " output files byte-identical across reruns; reloaded forward outputs " +
                    (bits ? "bit-identical" : "differ")};
}

// ---------------------------------------------------------------------------
// 10. Baseline learnability

Outcome criterion_10(Runs& runs) {
  Outcome o{true, ""};
  for (auto seed : kSeeds) {
    auto cfg = default_config();
    cfg.seed = seed;
    cfg.mask_ratio = 0.0;
    cfg.dataset.noise_rate = 0.0;
    cfg.relabel.enabled = false;
    cfg.train.epochs = kBaselineEpochs;
    const double t0 = cpu_seconds();
    const auto out = cmd_train_mvt(cfg, std::nullopt, runs.work() / "baseline" / ("seed-" + std::to_string(seed)));
    const double dt = cpu_seconds() - t0;
    const bool ok = out.test.accuracy >= kBaselineAccuracy && dt <= kRunSeconds;
    o.pass = o.pass && ok;
    o.detail += (o.detail.empty() ? "" : "; ") + std::string("seed ") + std::to_string(seed) + " " +
                fmt(out.test.accuracy) + " in " + fmt(dt, 0) + " s";
  }
  o.detail = "final test accuracy after 30 epochs (bounds 0.90, 600 s): " + o.detail;
  return o;
}

const std::map<int, std::pair<const char*, Outcome (*)(Runs&)>> kCriteria{
    {1, {"gradient suite", criterion_1}},
    {2, {"loss identities", criterion_2}},
    {3, {"constant-rule equivalence", criterion_3}},
    {4, {"mask-area convergence", criterion_4}},
    {5, {"informative-region selectivity", criterion_5}},
    {6, {"occluded-split gain", criterion_6}},
    {7, {"dynamic vs constant threshold", criterion_7}},
    {8, {"monotone subset", criterion_8}},
    {9, {"reproducibility", criterion_9}},
    {10, {"baseline learnability", criterion_10}},
};

}  // namespace

int main(int argc, char** argv) {
  fs::path work = fs::temp_directory_path() / "mvt_acceptance";
  std::vector<int> chosen;
  for (int i = 1; i < argc; ++i) {
    if (std::strcmp(argv[i], "--work") == 0 && i + 1 < argc) {
      work = argv[++i];
    } else {
      chosen.push_back(std::atoi(argv[i]));
    }
  }
  if (chosen.empty()) {
    for (const auto& [k, v] : kCriteria) chosen.push_back(k);
  }
  fs::create_directories(work);
  Runs runs(work);
  int failed = 0;
  for (int k : chosen) {
    const auto it = kCriteria.find(k);
    if (it == kCriteria.end()) {
      std::cerr << "unknown criterion " << k << "\n";
      return 2;
    }
    const auto start = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = it->second.second(runs);
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    std::cout << (o.pass ? "PASS" : "FAIL") << " criterion " << k << " (" << it->second.first
              << "): " << o.detail << " [" << fmt(secs, 0) << " s]" << std::endl;
    failed += !o.pass;
  }
  return failed == 0 ? 0 : 1;
}
