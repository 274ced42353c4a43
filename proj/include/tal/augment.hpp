#pragma once

#include <algorithm>
#include <cmath>
#include <numbers>
#include <utility>
#include <vector>

#include "tal/net.hpp"
#include "tal/ops.hpp"
#include "tal/rng.hpp"
#include "tal/tensor.hpp"

// Input-side task generation: a random resize-and-pad image transform with
// an exact adjoint, a random-search refinement of the per-block decay
// factors, and the support/query task sets built from both.

namespace tal {

// Canvas the resized image is padded into before scaling back down.
inline int canvas_size(int w) { return static_cast<int>(std::floor(w / 0.875)); }

struct AugmentRecord {
  bool applied = false;
  int resized_w = 0;  // intermediate square size
  int top = 0, left = 0;
};

// With probability `prob`: resize the square image to a random intermediate
// size W' in [W, canvas], zero-pad it into a canvas-square at a random
// offset, and resize back to W. Otherwise the image passes through
// unchanged. The record holds everything needed to replay the adjoint.
template <typename T>
std::pair<TensorT<T>, AugmentRecord> data_transform(const TensorT<T>& x, Rng& rng,
                                                    double prob = 0.5) {
  if (x.rank() != 4) throw dimension_error("data_transform: expected [B,C,H,W]");
  int H = x.dim(2), W = x.dim(3);
  if (H != W) throw dimension_error("data_transform: expected square images");
  if (prob < 0.0 || prob > 1.0) throw parameter_error("data_transform: prob outside [0,1]");

  AugmentRecord rec;
  double p = rng.next_double();
  if (p > prob) return {x, rec};

  int canvas = canvas_size(W);
  rec.applied = true;
  rec.resized_w = rng.next_int(W, canvas);
  rec.top = rng.next_int(0, canvas - rec.resized_w);
  rec.left = rng.next_int(0, canvas - rec.resized_w);

  TensorT<T> t = bilinear_resize_fwd(x, rec.resized_w, rec.resized_w);
  t = pad_fwd(t, rec.top, rec.left, canvas);
  t = bilinear_resize_fwd(t, W, W);
  return {std::move(t), rec};
}

// Exact adjoint of data_transform for a given record: pulls a gradient at
// the transformed image back to the original image.
template <typename T>
TensorT<T> data_transform_bwd(const TensorT<T>& grad, const AugmentRecord& rec, int h, int w) {
  if (!rec.applied) return grad;
  int canvas = canvas_size(w);
  TensorT<T> g = bilinear_resize_bwd(grad, canvas, canvas);
  g = pad_bwd(g, rec.top, rec.left, rec.resized_w, rec.resized_w);
  return bilinear_resize_bwd(g, h, w);
}

// ----------------------------------------------------------- factor search

inline DecayFactors gamma_init(int block_count) {
  if (block_count <= 0) throw parameter_error("gamma_init: block count must be positive");
  return DecayFactors::constant(block_count, 0.5);
}

struct MgsConfig {
  int iterations = 5;
  int n_directions = 5;
  double sigma = 0.15;
};

inline void check_mgs_config(const MgsConfig& cfg) {
  if (cfg.iterations <= 0) throw parameter_error("mgs: iterations must be positive");
  if (cfg.n_directions <= 0) throw parameter_error("mgs: n_directions must be positive");
  if (!(cfg.sigma > 0.0)) throw parameter_error("mgs: sigma must be positive");
}

// Sampling-based search for decay factors with a small input gradient.
// Each iteration draws Gaussian perturbations of the current factors,
// weights them by how much they shrink the input-gradient norm relative
// to the Gaussian proposal density, and moves to the weighted mean.
// Proposals are evaluated as drawn; the factors are clamped to [0,1]
// after every move, so the result always lies in the unit box.
template <typename T>
DecayFactors mgs_optimize(const NetworkT<T>& net, const TensorT<T>& x, int y, DecayFactors gamma,
                          const MgsConfig& cfg, Rng& rng) {
  check_mgs_config(cfg);
  int L = net.block_count();
  if (gamma.size() != L)
    throw parameter_error("mgs: factor count does not match block count");

  const double log_norm_const = -0.5 * std::log(2.0 * std::numbers::pi * cfg.sigma * cfg.sigma);
  for (int it = 0; it < cfg.iterations; ++it) {
    double base = gradient_norm(net, x, y, gamma);
    std::vector<std::vector<double>> deltas(static_cast<std::size_t>(cfg.n_directions));
    std::vector<double> log_w(static_cast<std::size_t>(cfg.n_directions));
    for (int n = 0; n < cfg.n_directions; ++n) {
      auto& d = deltas[static_cast<std::size_t>(n)];
      d.resize(static_cast<std::size_t>(L));
      double log_pdf = 0.0;
      DecayFactors cand = gamma;
      for (int i = 0; i < L; ++i) {
        d[static_cast<std::size_t>(i)] = rng.next_normal(cfg.sigma);
        log_pdf += log_norm_const -
                   d[static_cast<std::size_t>(i)] * d[static_cast<std::size_t>(i)] /
                       (2.0 * cfg.sigma * cfg.sigma);
        cand[i] += d[static_cast<std::size_t>(i)];
      }
      double norm = gradient_norm(net, x, y, cand);
      log_w[static_cast<std::size_t>(n)] = (base - norm) - log_pdf;
    }
    double max_lw = *std::max_element(log_w.begin(), log_w.end());
    double sum_w = 0.0;
    for (double& lw : log_w) {
      lw = std::exp(lw - max_lw);
      sum_w += lw;
    }
    for (int i = 0; i < L; ++i) {
      double step = 0.0;
      for (int n = 0; n < cfg.n_directions; ++n)
        step += log_w[static_cast<std::size_t>(n)] / sum_w * deltas[static_cast<std::size_t>(n)][static_cast<std::size_t>(i)];
      gamma[i] += step;
    }
    gamma.clamp01();
  }
  return gamma;
}

// Uniform jitter of refined factors, one draw in [-0.5, 0.5] per block,
// clamped back to the unit box.
inline DecayFactors gamma_perturb(const DecayFactors& gamma_star, Rng& rng) {
  DecayFactors g = gamma_star;
  for (int i = 0; i < g.size(); ++i) g[i] += rng.next_uniform(-0.5, 0.5);
  g.clamp01();
  return g;
}

// ------------------------------------------------------------------- tasks

template <typename T>
struct TaskT {
  TensorT<T> x;  // (possibly) transformed image
  AugmentRecord aug;
  DecayFactors gamma;
};

template <typename T>
struct TaskSetT {
  std::vector<TaskT<T>> support;
  std::vector<TaskT<T>> query;
};

using Task = TaskT<float>;
using TaskSet = TaskSetT<float>;

// Support and query tasks for one image: each task pairs an independently
// transformed copy of the image with independently jittered decay factors.
// `use_aug` / `use_perturb` switch the two randomizations off (the task then
// carries the unmodified image / the refined factors).
template <typename T>
TaskSetT<T> build_task_sets(const TensorT<T>& x, const DecayFactors& gamma_star, int n_support,
                            int n_query, Rng& rng, bool use_aug = true, bool use_perturb = true,
                            double aug_prob = 0.5) {
  if (n_support <= 0 || n_query <= 0)
    throw parameter_error("build_task_sets: set sizes must be positive");
  TaskSetT<T> ts;
  auto make_task = [&]() {
    TaskT<T> t;
    if (use_aug) {
      auto [tx, rec] = data_transform(x, rng, aug_prob);
      t.x = std::move(tx);
      t.aug = rec;
    } else {
      t.x = x;
    }
    t.gamma = use_perturb ? gamma_perturb(gamma_star, rng) : gamma_star;
    return t;
  };
  ts.support.reserve(static_cast<std::size_t>(n_support));
  for (int i = 0; i < n_support; ++i) ts.support.push_back(make_task());
  ts.query.reserve(static_cast<std::size_t>(n_query));
  for (int i = 0; i < n_query; ++i) ts.query.push_back(make_task());
  return ts;
}

}  // namespace tal
