#pragma once

#include <chrono>
#include <cmath>
#include <functional>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "tal/augment.hpp"
#include "tal/net.hpp"
#include "tal/rng.hpp"
#include "tal/tensor.hpp"

// Untargeted L-inf attacks on a surrogate network. All methods perturb one
// image, keep every iterate inside the epsilon-ball around the original
// and inside the [0,1] pixel range, and are deterministic given (seed,
// config, model, image).

namespace tal {

struct MetaConfig {
  int M = 5;           // meta-iterations per outer step
  int n_support = 20;  // support tasks
  int n_query = 10;    // query tasks
  int batch = 0;       // support mini-batch; 0 -> ceil(n_support / M)
};

// Switches for the composite attack's ingredients; all on by default.
//   data_aug:        tasks see an independently transformed image
//   model_aug:       tasks backpropagate under per-block decay factors
//                    (off forces all task factors to 1)
//   optimize_factor: refine the factor initialization by search
//   random_alter:    jitter the refined factors per task
//   meta_learning:   two-level support/query update (off: plain task mean)
struct AblationFlags {
  bool data_aug = true;
  bool model_aug = true;
  bool optimize_factor = true;
  bool random_alter = true;
  bool meta_learning = true;
};

struct AttackConfig {
  std::string method = "ifgsm";  // fgsm|ifgsm|mi|di|ti|sgm|llta
  double epsilon = 16.0 / 255.0;
  double alpha = 0.0;  // step size; 0 -> epsilon / T
  int T = 10;          // iterations
  double mu = 1.0;     // momentum decay (mi)
  int ti_kernel_size = 5;
  double ti_sigma = 1.5;
  double sgm_gamma = 0.5;  // constant branch decay (sgm)
  MetaConfig meta;
  MgsConfig mgs;
  AblationFlags ablation;
  bool mgs_each_iteration = true;  // re-run the factor search every outer step

  double resolved_alpha() const { return alpha > 0.0 ? alpha : epsilon / T; }
  int resolved_batch() const {
    return meta.batch > 0 ? meta.batch : (meta.n_support + meta.M - 1) / meta.M;
  }
};

inline const std::vector<std::string>& attack_method_names() {
  static const std::vector<std::string> names = {"fgsm", "ifgsm", "mi", "di",
                                                 "ti",   "sgm",   "llta"};
  return names;
}

inline void validate_attack_config(const AttackConfig& cfg) {
  bool known = false;
  for (const auto& n : attack_method_names()) known = known || n == cfg.method;
  if (!known) throw parameter_error("unknown attack method '" + cfg.method + "'");
  if (!(cfg.epsilon > 0.0)) throw parameter_error("attack: epsilon must be positive");
  if (cfg.T < 1) throw parameter_error("attack: T must be at least 1");
  double a = cfg.resolved_alpha();
  if (!(a > 0.0) || a > cfg.epsilon)
    throw parameter_error("attack: alpha must satisfy 0 < alpha <= epsilon");
  if (cfg.method == "ti" && (cfg.ti_kernel_size < 1 || cfg.ti_kernel_size % 2 == 0))
    throw parameter_error("attack: ti kernel size must be odd and positive");
  if (cfg.method == "sgm" && (cfg.sgm_gamma < 0.0 || cfg.sgm_gamma > 1.0))
    throw parameter_error("attack: sgm_gamma must lie in [0,1]");
  if (cfg.method == "llta") {
    if (cfg.meta.M < 1) throw parameter_error("attack: M must be at least 1");
    if (cfg.meta.n_support < 1 || cfg.meta.n_query < 1)
      throw parameter_error("attack: support and query sizes must be positive");
    if (cfg.resolved_batch() > cfg.meta.n_support)
      throw parameter_error("attack: mini-batch larger than the support set");
    check_mgs_config(cfg.mgs);
  }
}

template <typename T>
struct AttackResultT {
  TensorT<T> x_adv;
  std::vector<double> loss_trace;  // one entry per outer iteration
  double elapsed_seconds = 0.0;
};

using AttackResult = AttackResultT<float>;

// Observer called after every outer iteration with the projected iterate.
template <typename T>
using IterHookT = std::function<void(int step, const TensorT<T>& x_adv)>;

using IterHook = IterHookT<float>;

// --------------------------------------------------------------- utilities

template <typename T>
TensorT<T> clip01(TensorT<T> x) {
  for (std::size_t i = 0; i < x.numel(); ++i)
    x[i] = x[i] < T(0) ? T(0) : (x[i] > T(1) ? T(1) : x[i]);
  return x;
}

// Elementwise clamp of x_adv into [x - eps, x + eps] intersected with [0,1].
template <typename T>
TensorT<T> project(const TensorT<T>& x_adv, const TensorT<T>& x, double eps) {
  check_same_shape(x_adv, x, "project");
  TensorT<T> out(x_adv.shape);
  for (std::size_t i = 0; i < x.numel(); ++i) {
    double lo = static_cast<double>(x[i]) - eps;
    double hi = static_cast<double>(x[i]) + eps;
    double v = static_cast<double>(x_adv[i]);
    v = v < lo ? lo : (v > hi ? hi : v);
    v = v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v);
    out[i] = static_cast<T>(v);
  }
  return out;
}

namespace detail {

template <typename T>
void check_single_image(const TensorT<T>& x) {
  if (x.rank() != 4 || x.dim(0) != 1)
    throw dimension_error("attack: expected a single image [1,C,H,W]");
}

struct StepTimer {
  std::chrono::steady_clock::time_point t0 = std::chrono::steady_clock::now();
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  }
};

// Shared loop: grad_at(x_cur, step) returns the pre-sign update direction
// and the loss recorded for that step.
template <typename T, typename GradFn>
AttackResultT<T> iterated_attack(const TensorT<T>& x, const AttackConfig& cfg, GradFn&& grad_at,
                                 const IterHookT<T>& hook) {
  StepTimer timer;
  double a = cfg.resolved_alpha();
  AttackResultT<T> res;
  res.x_adv = x;
  res.loss_trace.reserve(static_cast<std::size_t>(cfg.T));
  for (int t = 0; t < cfg.T; ++t) {
    auto [dir, loss] = grad_at(res.x_adv, t);
    check_same_shape(dir, x, "attack update direction");
    for (std::size_t i = 0; i < dir.numel(); ++i)
      res.x_adv[i] += static_cast<T>(a) * static_cast<T>(sign_of(dir[i]));
    res.x_adv = project(res.x_adv, x, cfg.epsilon);
    res.loss_trace.push_back(loss);
    if (hook) hook(t, res.x_adv);
  }
  res.elapsed_seconds = timer.seconds();
  return res;
}

inline std::vector<int> shuffled_indices(int n, Rng& rng) {
  std::vector<int> idx(static_cast<std::size_t>(n));
  std::iota(idx.begin(), idx.end(), 0);
  for (int i = n - 1; i > 0; --i)
    std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(rng.next_int(0, i))]);
  return idx;
}

}  // namespace detail

// ------------------------------------------------------------------ methods

// Single signed-gradient step of size epsilon, then pixel clip.
template <typename T>
AttackResultT<T> fgsm(const NetworkT<T>& net, const TensorT<T>& x, int y, const AttackConfig& cfg,
                      const IterHookT<T>& hook = {}) {
  detail::check_single_image(x);
  detail::StepTimer timer;
  auto r = input_gradient_with_loss(net, x, y, DecayFactors::ones(net.block_count()));
  AttackResultT<T> res;
  res.x_adv = x;
  for (std::size_t i = 0; i < x.numel(); ++i)
    res.x_adv[i] += static_cast<T>(cfg.epsilon) * static_cast<T>(sign_of(r.grad[i]));
  res.x_adv = project(res.x_adv, x, cfg.epsilon);
  res.loss_trace = {r.loss};
  if (hook) hook(0, res.x_adv);
  res.elapsed_seconds = timer.seconds();
  return res;
}

// T projected signed-gradient steps.
template <typename T>
AttackResultT<T> ifgsm(const NetworkT<T>& net, const TensorT<T>& x, int y, const AttackConfig& cfg,
                       const IterHookT<T>& hook = {}) {
  detail::check_single_image(x);
  DecayFactors ones = DecayFactors::ones(net.block_count());
  return detail::iterated_attack(
      x, cfg,
      [&](const TensorT<T>& xc, int) {
        auto r = input_gradient_with_loss(net, xc, y, ones);
        return std::pair<TensorT<T>, double>(std::move(r.grad), r.loss);
      },
      hook);
}

// Momentum accumulation of L1-normalized gradients.
template <typename T>
AttackResultT<T> mi(const NetworkT<T>& net, const TensorT<T>& x, int y, const AttackConfig& cfg,
                    const IterHookT<T>& hook = {}) {
  detail::check_single_image(x);
  DecayFactors ones = DecayFactors::ones(net.block_count());
  TensorT<T> acc(x.shape);
  return detail::iterated_attack(
      x, cfg,
      [&, acc](const TensorT<T>& xc, int) mutable {
        auto r = input_gradient_with_loss(net, xc, y, ones);
        double n1 = norm1(r.grad);
        for (std::size_t i = 0; i < acc.numel(); ++i) {
          acc[i] = static_cast<T>(cfg.mu) * acc[i];
          if (n1 > 0.0) acc[i] += static_cast<T>(static_cast<double>(r.grad[i]) / n1);
        }
        return std::pair<TensorT<T>, double>(acc, r.loss);
      },
      hook);
}

// Gradient of a randomly resized-and-padded copy, pulled back to the
// original image coordinates.
template <typename T>
AttackResultT<T> di(const NetworkT<T>& net, const TensorT<T>& x, int y, const AttackConfig& cfg,
                    Rng& rng, const IterHookT<T>& hook = {}) {
  detail::check_single_image(x);
  DecayFactors ones = DecayFactors::ones(net.block_count());
  int H = x.dim(2), W = x.dim(3);
  return detail::iterated_attack(
      x, cfg,
      [&](const TensorT<T>& xc, int) {
        if (!cfg.ablation.data_aug) {
          auto r = input_gradient_with_loss(net, xc, y, ones);
          return std::pair<TensorT<T>, double>(std::move(r.grad), r.loss);
        }
        auto [xt, rec] = data_transform(xc, rng);
        auto r = input_gradient_with_loss(net, xt, y, ones);
        return std::pair<TensorT<T>, double>(data_transform_bwd(r.grad, rec, H, W), r.loss);
      },
      hook);
}

// Smooths each step's gradient with a normalized Gaussian kernel before sign.
template <typename T>
AttackResultT<T> ti(const NetworkT<T>& net, const TensorT<T>& x, int y, const AttackConfig& cfg,
                    const IterHookT<T>& hook = {}) {
  detail::check_single_image(x);
  if (cfg.ti_kernel_size < 1 || cfg.ti_kernel_size % 2 == 0)
    throw parameter_error("ti: kernel size must be odd and positive");
  DecayFactors ones = DecayFactors::ones(net.block_count());
  TensorT<T> kernel = gaussian_kernel<T>(cfg.ti_kernel_size, cfg.ti_sigma);
  return detail::iterated_attack(
      x, cfg,
      [&](const TensorT<T>& xc, int) {
        auto r = input_gradient_with_loss(net, xc, y, ones);
        return std::pair<TensorT<T>, double>(smooth_gradient(r.grad, kernel), r.loss);
      },
      hook);
}

// Plain iterated attack with a constant branch decay on every block.
template <typename T>
AttackResultT<T> sgm(const NetworkT<T>& net, const TensorT<T>& x, int y, const AttackConfig& cfg,
                     const IterHookT<T>& hook = {}) {
  detail::check_single_image(x);
  if (cfg.sgm_gamma < 0.0 || cfg.sgm_gamma > 1.0)
    throw parameter_error("sgm: decay factor must lie in [0,1]");
  DecayFactors gamma = DecayFactors::constant(net.block_count(), cfg.sgm_gamma);
  return detail::iterated_attack(
      x, cfg,
      [&](const TensorT<T>& xc, int) {
        auto r = input_gradient_with_loss(net, xc, y, gamma);
        return std::pair<TensorT<T>, double>(std::move(r.grad), r.loss);
      },
      hook);
}

// Composite attack. Each outer iteration:
//   1. refine decay factors from 0.5 by gradient-norm search
//      (skipped when optimize_factor is off, or after the first iteration
//      when mgs_each_iteration is off);
//   2. build support/query tasks around the current iterate — transformed
//      copies (data_aug) with jittered factors (random_alter); with
//      model_aug off every task factor is forced to 1;
//   3. meta loop (M rounds): average pulled-back support gradients over a
//      mini-batch, take the one-step update delta' = eps * sign(g_spt),
//      re-evaluate the query tasks at their delta'-shifted images;
//   4. step by sign of the averaged support + query gradients, projected.
// With meta_learning off, steps 3-4 collapse to the plain mean over all
// support and query tasks. Mini-batches walk a shuffled support order,
// reshuffled per outer iteration and on wrap-around.
template <typename T>
AttackResultT<T> llta(const NetworkT<T>& net, const TensorT<T>& x, int y, const AttackConfig& cfg,
                      Rng& rng, const IterHookT<T>& hook = {}) {
  detail::check_single_image(x);
  if (cfg.resolved_batch() > cfg.meta.n_support)
    throw parameter_error("llta: mini-batch larger than the support set");
  check_mgs_config(cfg.mgs);

  int L = net.block_count();
  int H = x.dim(2), W = x.dim(3);
  int nS = cfg.meta.n_support, nQ = cfg.meta.n_query;
  int batch = cfg.resolved_batch();

  DecayFactors gamma_star = gamma_init(L);
  bool have_gamma_star = false;

  // pulled-back gradient + loss of one task at its own image
  auto task_gradient = [&](const TaskT<T>& task) {
    auto r = input_gradient_with_loss(net, task.x, y, task.gamma);
    return std::pair<TensorT<T>, double>(data_transform_bwd(r.grad, task.aug, H, W), r.loss);
  };

  return detail::iterated_attack(
      x, cfg,
      [&](const TensorT<T>& xc, int) mutable {
        if (cfg.ablation.optimize_factor && (cfg.mgs_each_iteration || !have_gamma_star)) {
          gamma_star = mgs_optimize(net, xc, y, gamma_init(L), cfg.mgs, rng);
          have_gamma_star = true;
        }
        TaskSetT<T> ts = build_task_sets(xc, gamma_star, nS, nQ, rng, cfg.ablation.data_aug,
                                         cfg.ablation.random_alter);
        if (!cfg.ablation.model_aug) {
          for (auto& t : ts.support) t.gamma = DecayFactors::ones(L);
          for (auto& t : ts.query) t.gamma = DecayFactors::ones(L);
        }

        TensorT<T> dir(x.shape);
        double loss_sum = 0.0;
        std::size_t loss_n = 0;

        if (!cfg.ablation.meta_learning) {
          // single-level: mean gradient over every task
          for (const auto& t : ts.support) {
            auto [g, l] = task_gradient(t);
            accumulate(dir, g);
            loss_sum += l;
            ++loss_n;
          }
          for (const auto& t : ts.query) {
            auto [g, l] = task_gradient(t);
            accumulate(dir, g);
            loss_sum += l;
            ++loss_n;
          }
          for (std::size_t i = 0; i < dir.numel(); ++i)
            dir[i] /= static_cast<T>(nS + nQ);
          return std::pair<TensorT<T>, double>(std::move(dir),
                                               loss_sum / static_cast<double>(loss_n));
        }

        std::vector<int> order = detail::shuffled_indices(nS, rng);
        std::size_t cursor = 0;
        TensorT<T> spt_sum(x.shape), qry_sum(x.shape);
        for (int m = 0; m < cfg.meta.M; ++m) {
          if (cursor >= order.size()) {
            order = detail::shuffled_indices(nS, rng);
            cursor = 0;
          }
          std::size_t take = std::min<std::size_t>(static_cast<std::size_t>(batch),
                                                   order.size() - cursor);
          TensorT<T> g_spt(x.shape);
          for (std::size_t j = 0; j < take; ++j) {
            auto [g, l] = task_gradient(ts.support[static_cast<std::size_t>(order[cursor + j])]);
            accumulate(g_spt, g);
            loss_sum += l;
            ++loss_n;
          }
          cursor += take;
          for (std::size_t i = 0; i < g_spt.numel(); ++i)
            g_spt[i] /= static_cast<T>(take);

          // one-step support update applied to every query image
          TensorT<T> g_qry(x.shape);
          for (const auto& q : ts.query) {
            TensorT<T> xq = q.x;
            for (std::size_t i = 0; i < xq.numel(); ++i)
              xq[i] += static_cast<T>(cfg.epsilon) * static_cast<T>(sign_of(g_spt[i]));
            xq = clip01(std::move(xq));
            auto r = input_gradient_with_loss(net, xq, y, q.gamma);
            accumulate(g_qry, data_transform_bwd(r.grad, q.aug, H, W));
          }
          for (std::size_t i = 0; i < g_qry.numel(); ++i)
            g_qry[i] /= static_cast<T>(nQ);

          accumulate(spt_sum, g_spt);
          accumulate(qry_sum, g_qry);
        }
        for (std::size_t i = 0; i < dir.numel(); ++i)
          dir[i] = spt_sum[i] / static_cast<T>(cfg.meta.M) +
                   qry_sum[i] / static_cast<T>(cfg.meta.M);
        return std::pair<TensorT<T>, double>(std::move(dir),
                                             loss_sum / static_cast<double>(loss_n));
      },
      hook);
}

// ----------------------------------------------------------------- dispatch

template <typename T>
AttackResultT<T> run_attack(const NetworkT<T>& net, const TensorT<T>& x, int y,
                            const AttackConfig& cfg, Rng& rng, const IterHookT<T>& hook = {}) {
  validate_attack_config(cfg);
  if (cfg.method == "fgsm") return fgsm(net, x, y, cfg, hook);
  if (cfg.method == "ifgsm") return ifgsm(net, x, y, cfg, hook);
  if (cfg.method == "mi") return mi(net, x, y, cfg, hook);
  if (cfg.method == "di") return di(net, x, y, cfg, rng, hook);
  if (cfg.method == "ti") return ti(net, x, y, cfg, hook);
  if (cfg.method == "sgm") return sgm(net, x, y, cfg, hook);
  return llta(net, x, y, cfg, rng, hook);
}

}  // namespace tal
