#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "tal/attacks.hpp"
#include "test_util.hpp"

// Attack algorithms: projection, the shared iterated loop, reduction
// identities between methods, constraint fuzzing, and determinism.

using namespace tal;
using test_util::random_tensor;
using test_util::toy_conv_net;

namespace {

NetworkT<float> fuzz_net() { return toy_conv_net<float>(3, 16, 4, 3, 5, 99); }

TensorT<float> fuzz_image(std::uint64_t seed) {
  Rng rng(seed, 200);
  return random_tensor<float>({1, 3, 16, 16}, rng, 0.0, 1.0);
}

void expect_bitwise_equal(const TensorT<float>& a, const TensorT<float>& b, const char* what) {
  ASSERT_EQ(a.shape, b.shape);
  for (std::size_t i = 0; i < a.numel(); ++i) ASSERT_EQ(a[i], b[i]) << what << " at " << i;
}

}  // namespace

TEST(Project, InsideUnchangedAndClampArithmetic) {
  TensorT<float> x({1, 1, 2, 2}, {0.5f, 0.5f, 0.5f, 0.5f});
  TensorT<float> inside({1, 1, 2, 2}, {0.55f, 0.45f, 0.5f, 0.42f});
  auto p = project(inside, x, 0.1);
  expect_bitwise_equal(p, inside, "inside");

  TensorT<float> far({1, 1, 2, 2}, {1.0f, 1.0f, 1.0f, 1.0f});
  auto q = project(far, x, 0.1);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_FLOAT_EQ(q[i], 0.6f);
}

TEST(Project, PixelRangeClipDominates) {
  TensorT<float> x({1, 1, 1, 3});
  x.fill(0.99f);
  TensorT<float> xa({1, 1, 1, 3});
  xa.fill(1.2f);
  auto p = project(xa, x, 0.1);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_FLOAT_EQ(p[i], 1.0f);  // min(x+eps, 1)

  TensorT<float> lo({1, 1, 1, 3});
  lo.fill(0.01f);
  TensorT<float> la({1, 1, 1, 3});
  la.fill(-0.3f);
  auto pl = project(la, lo, 0.1);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_FLOAT_EQ(pl[i], 0.0f);
}

TEST(Project, ShapeMismatchThrows) {
  TensorT<float> a({1, 1, 2, 2}), b({1, 1, 2, 3});
  EXPECT_THROW(project(a, b, 0.1), dimension_error);
}

TEST(Fgsm, StepIsExactlyEpsilonOrZero) {
  auto net = fuzz_net();
  auto x = fuzz_image(1);
  AttackConfig cfg;
  cfg.method = "fgsm";
  Rng rng(0, 201);
  auto res = run_attack(net, x, 0, cfg, rng);

  auto g = input_gradient(net, x, 0, DecayFactors::ones(3));
  TensorT<float> pre_clip = x;
  int moved = 0;
  for (std::size_t i = 0; i < x.numel(); ++i) {
    int s = sign_of(g[i]);
    pre_clip[i] += static_cast<float>(cfg.epsilon) * static_cast<float>(s);
    moved += s != 0;
  }
  expect_bitwise_equal(res.x_adv, project(pre_clip, x, cfg.epsilon), "fgsm step");
  EXPECT_GT(moved, 0);
  EXPECT_EQ(res.loss_trace.size(), 1u);
}

TEST(Fgsm, ZeroGradientLeavesImageUntouched) {
  auto net = fuzz_net();
  net.head.W.fill(0.0f);  // logits constant in x -> exactly zero gradient
  net.head.b.fill(0.0f);
  auto x = fuzz_image(2);
  AttackConfig cfg;
  cfg.method = "fgsm";
  Rng rng(0, 202);
  auto res = run_attack(net, x, 1, cfg, rng);
  expect_bitwise_equal(res.x_adv, x, "zero-gradient fgsm");
}

TEST(Ifgsm, SingleStepAtFullEpsilonEqualsFgsm) {
  auto net = fuzz_net();
  auto x = fuzz_image(3);
  AttackConfig one;
  one.method = "ifgsm";
  one.T = 1;
  one.alpha = one.epsilon;
  AttackConfig fg;
  fg.method = "fgsm";
  Rng r1(0, 203), r2(0, 203);
  auto a = run_attack(net, x, 2, one, r1);
  auto b = run_attack(net, x, 2, fg, r2);
  expect_bitwise_equal(a.x_adv, b.x_adv, "ifgsm T=1");
}

TEST(Ifgsm, LossTraceHasLengthT) {
  auto net = fuzz_net();
  auto x = fuzz_image(4);
  AttackConfig cfg;
  cfg.method = "ifgsm";
  cfg.T = 7;
  Rng rng(0, 204);
  auto res = run_attack(net, x, 3, cfg, rng);
  EXPECT_EQ(res.loss_trace.size(), 7u);
}

// ------------------------------------------------------ reduction identities

TEST(Reductions, DiWithTransformOffIsIfgsm) {
  auto net = fuzz_net();
  auto x = fuzz_image(5);
  AttackConfig di_cfg;
  di_cfg.method = "di";
  di_cfg.ablation.data_aug = false;
  AttackConfig if_cfg;
  if_cfg.method = "ifgsm";
  Rng r1(7, 205), r2(7, 205);
  auto a = run_attack(net, x, 1, di_cfg, r1);
  auto b = run_attack(net, x, 1, if_cfg, r2);
  expect_bitwise_equal(a.x_adv, b.x_adv, "di/ifgsm");
}

TEST(Reductions, TiWithUnitKernelIsIfgsm) {
  auto net = fuzz_net();
  auto x = fuzz_image(6);
  AttackConfig ti_cfg;
  ti_cfg.method = "ti";
  ti_cfg.ti_kernel_size = 1;
  AttackConfig if_cfg;
  if_cfg.method = "ifgsm";
  Rng r1(8, 206), r2(8, 206);
  auto a = run_attack(net, x, 2, ti_cfg, r1);
  auto b = run_attack(net, x, 2, if_cfg, r2);
  expect_bitwise_equal(a.x_adv, b.x_adv, "ti/ifgsm");
}

TEST(Reductions, SgmWithUnitGammaIsIfgsm) {
  auto net = fuzz_net();
  auto x = fuzz_image(7);
  AttackConfig sg_cfg;
  sg_cfg.method = "sgm";
  sg_cfg.sgm_gamma = 1.0;
  AttackConfig if_cfg;
  if_cfg.method = "ifgsm";
  Rng r1(9, 207), r2(9, 207);
  auto a = run_attack(net, x, 3, sg_cfg, r1);
  auto b = run_attack(net, x, 3, if_cfg, r2);
  expect_bitwise_equal(a.x_adv, b.x_adv, "sgm/ifgsm");
}

TEST(Reductions, MiWithZeroMuIsIfgsm) {
  auto net = fuzz_net();
  auto x = fuzz_image(8);
  AttackConfig mi_cfg;
  mi_cfg.method = "mi";
  mi_cfg.mu = 0.0;
  AttackConfig if_cfg;
  if_cfg.method = "ifgsm";
  Rng r1(10, 208), r2(10, 208);
  auto a = run_attack(net, x, 4, mi_cfg, r1);
  auto b = run_attack(net, x, 4, if_cfg, r2);
  expect_bitwise_equal(a.x_adv, b.x_adv, "mi/ifgsm");
}

TEST(Reductions, LltaWithAllFlagsOffIsIfgsm) {
  auto net = fuzz_net();
  auto x = fuzz_image(9);
  AttackConfig ll_cfg;
  ll_cfg.method = "llta";
  ll_cfg.ablation = {false, false, false, false, false};
  AttackConfig if_cfg;
  if_cfg.method = "ifgsm";
  Rng r1(11, 209), r2(11, 209);
  auto a = run_attack(net, x, 0, ll_cfg, r1);
  auto b = run_attack(net, x, 0, if_cfg, r2);
  expect_bitwise_equal(a.x_adv, b.x_adv, "llta/ifgsm");
}

// -------------------------------------------------------------- llta traces

TEST(Llta, CollapsedLoopMatchesHandTrace) {
  // M=1, #S=#Q=1, no data transform, task factors forced to one:
  //   update = sign(G(x,1) + G(x + eps*sign(G(x,1)), 1)), one outer step.
  auto net = fuzz_net();
  Rng xr(12, 210);
  auto x = random_tensor<float>({1, 3, 16, 16}, xr, 0.2, 0.8);  // interior: clip is a no-op
  int y = 2;

  AttackConfig cfg;
  cfg.method = "llta";
  cfg.T = 1;
  cfg.meta.M = 1;
  cfg.meta.n_support = 1;
  cfg.meta.n_query = 1;
  cfg.ablation.data_aug = false;
  cfg.ablation.model_aug = false;
  Rng rng(13, 211);
  auto res = run_attack(net, x, y, cfg, rng);

  DecayFactors ones = DecayFactors::ones(3);
  auto g_spt = input_gradient(net, x, y, ones);
  TensorT<float> xq = x;
  for (std::size_t i = 0; i < xq.numel(); ++i)
    xq[i] += static_cast<float>(cfg.epsilon) * static_cast<float>(sign_of(g_spt[i]));
  xq = clip01(std::move(xq));
  auto g_qry = input_gradient(net, xq, y, ones);

  TensorT<float> expect = x;
  float a = static_cast<float>(cfg.resolved_alpha());
  for (std::size_t i = 0; i < expect.numel(); ++i)
    expect[i] += a * static_cast<float>(sign_of(g_spt[i] + g_qry[i]));
  expect = project(expect, x, cfg.epsilon);

  expect_bitwise_equal(res.x_adv, expect, "collapsed llta");
}

TEST(Llta, IdentityRecordPullbackIsBitwise) {
  // A task with applied=false must deliver input_gradient unchanged.
  Rng rng(14, 212);
  auto g = random_tensor<float>({1, 3, 16, 16}, rng);
  AugmentRecord rec;
  auto back = data_transform_bwd(g, rec, 16, 16);
  expect_bitwise_equal(back, g, "identity pull-back");
}

// ------------------------------------------------------------- determinism

TEST(Determinism, SameSeedSameResult) {
  auto net = fuzz_net();
  auto x = fuzz_image(10);
  for (const char* method : {"di", "llta"}) {
    AttackConfig cfg;
    cfg.method = method;
    cfg.T = 3;
    cfg.meta.M = 2;
    cfg.meta.n_support = 4;
    cfg.meta.n_query = 2;
    cfg.mgs.iterations = 2;
    cfg.mgs.n_directions = 2;
    Rng r1(42, 213), r2(42, 213);
    auto a = run_attack(net, x, 1, cfg, r1);
    auto b = run_attack(net, x, 1, cfg, r2);
    expect_bitwise_equal(a.x_adv, b.x_adv, method);
  }
}

TEST(Determinism, DifferentSeedDifferentTransforms) {
  auto net = fuzz_net();
  auto x = fuzz_image(11);
  AttackConfig cfg;
  cfg.method = "di";
  cfg.T = 6;
  Rng r1(1, 214), r2(2, 214);
  auto a = run_attack(net, x, 1, cfg, r1);
  auto b = run_attack(net, x, 1, cfg, r2);
  bool same = true;
  for (std::size_t i = 0; i < x.numel(); ++i) same &= a.x_adv[i] == b.x_adv[i];
  EXPECT_FALSE(same);
}

// --------------------------------------------------------------- constraints

TEST(Constraints, AllMethodsRespectBoundsEveryIterate) {
  auto net = fuzz_net();
  Rng seed_rng(15, 215);
  const std::vector<std::string> methods = {"fgsm", "ifgsm", "mi", "di", "ti", "sgm", "llta"};
  int checked = 0;
  for (int trial = 0; trial < 21; ++trial) {
    const std::string& method = methods[static_cast<std::size_t>(trial) % methods.size()];
    auto x = fuzz_image(static_cast<std::uint64_t>(300 + trial));
    AttackConfig cfg;
    cfg.method = method;
    cfg.epsilon = seed_rng.next_uniform(0.01, 0.3);
    cfg.T = 1 + seed_rng.next_int(0, 3);
    cfg.meta.M = 2;
    cfg.meta.n_support = 3;
    cfg.meta.n_query = 2;
    cfg.mgs.iterations = 1;
    cfg.mgs.n_directions = 2;
    int y = seed_rng.next_int(0, 4);

    IterHook hook = [&](int step, const TensorT<float>& xa) {
      for (std::size_t i = 0; i < xa.numel(); ++i) {
        ASSERT_LE(std::abs(static_cast<double>(xa[i]) - static_cast<double>(x[i])),
                  cfg.epsilon + 1e-6)
            << method << " step " << step;
        ASSERT_GE(xa[i], 0.0f);
        ASSERT_LE(xa[i], 1.0f);
      }
      ++checked;
    };
    Rng rng(static_cast<std::uint64_t>(trial), 216);
    auto res = run_attack(net, x, y, cfg, rng, hook);
    for (std::size_t i = 0; i < res.x_adv.numel(); ++i) {
      ASSERT_LE(std::abs(static_cast<double>(res.x_adv[i]) - static_cast<double>(x[i])),
                cfg.epsilon + 1e-6);
    }
  }
  EXPECT_GT(checked, 21);  // the hook fired on intermediate iterates too
}

// ---------------------------------------------------------------- validation

TEST(Validation, BadConfigsThrow) {
  auto net = fuzz_net();
  auto x = fuzz_image(12);
  Rng rng(0, 217);

  AttackConfig cfg;
  cfg.method = "warp";
  EXPECT_THROW(run_attack(net, x, 0, cfg, rng), parameter_error);

  cfg = {};
  cfg.epsilon = 0.0;
  EXPECT_THROW(run_attack(net, x, 0, cfg, rng), parameter_error);

  cfg = {};
  cfg.T = 0;
  EXPECT_THROW(run_attack(net, x, 0, cfg, rng), parameter_error);

  cfg = {};
  cfg.alpha = cfg.epsilon * 2.0;
  EXPECT_THROW(run_attack(net, x, 0, cfg, rng), parameter_error);

  cfg = {};
  cfg.method = "ti";
  cfg.ti_kernel_size = 4;
  EXPECT_THROW(run_attack(net, x, 0, cfg, rng), parameter_error);

  cfg = {};
  cfg.method = "sgm";
  cfg.sgm_gamma = 1.5;
  EXPECT_THROW(run_attack(net, x, 0, cfg, rng), parameter_error);

  cfg = {};
  cfg.method = "llta";
  cfg.meta.M = 0;
  EXPECT_THROW(run_attack(net, x, 0, cfg, rng), parameter_error);

  cfg = {};
  cfg.method = "llta";
  cfg.meta.batch = 30;  // larger than the support set
  EXPECT_THROW(run_attack(net, x, 0, cfg, rng), parameter_error);

  TensorT<float> batch({2, 3, 16, 16});
  cfg = {};
  EXPECT_THROW(run_attack(net, batch, 0, cfg, rng), dimension_error);
}
