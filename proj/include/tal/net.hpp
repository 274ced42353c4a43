#pragma once

#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "tal/ops.hpp"
#include "tal/rng.hpp"
#include "tal/tensor.hpp"

// Residual classification networks. Forward is a plain residual pass; the
// backward pass optionally applies one decay factor per residual block to
// the gradient flowing through the block's transform branch, leaving the
// skip-path gradient untouched. With all factors at 1 this is standard
// backprop; the forward output never depends on the factors.

namespace tal {

template <typename T>
struct Conv2dLayer {
  TensorT<T> K;  // [F,C,k,k]
  TensorT<T> b;  // [F]
  int stride = 1;
  int pad = 1;
};

template <typename T>
struct AffineLayer {
  TensorT<T> W;  // [I,O]
  TensorT<T> b;  // [O]
};

struct ReluLayer {};

template <typename T>
using LayerT = std::variant<Conv2dLayer<T>, AffineLayer<T>, ReluLayer>;

template <typename T>
struct ResidualBlockT {
  std::vector<LayerT<T>> transform;  // output shape must equal input shape
};

// One decay factor per residual block, multiplied into the transform-branch
// gradient during backward. Valid task factors live in [0,1].
struct DecayFactors {
  std::vector<double> values;

  DecayFactors() = default;
  explicit DecayFactors(std::vector<double> v) : values(std::move(v)) {}

  static DecayFactors constant(int count, double v) {
    return DecayFactors(std::vector<double>(static_cast<std::size_t>(count), v));
  }
  static DecayFactors ones(int count) { return constant(count, 1.0); }

  int size() const { return static_cast<int>(values.size()); }
  double operator[](int i) const { return values[static_cast<std::size_t>(i)]; }
  double& operator[](int i) { return values[static_cast<std::size_t>(i)]; }

  void clamp01() {
    for (double& v : values) v = v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v);
  }
  bool in_unit_box() const {
    for (double v : values)
      if (v < 0.0 || v > 1.0) return false;
    return true;
  }
};

template <typename T>
struct NetworkT {
  std::string arch_id;
  std::vector<int> input_shape;  // without batch dim: {C,H,W} or {I}
  int n_classes = 0;
  LayerT<T> stem;
  std::vector<ResidualBlockT<T>> blocks;
  bool head_gap = true;  // global-average-pool before the head affine
  AffineLayer<T> head;

  int block_count() const { return static_cast<int>(blocks.size()); }
};

using Network = NetworkT<float>;

// ------------------------------------------------------------ forward cache

template <typename T>
struct BlockCacheT {
  std::vector<TensorT<T>> layer_in;  // input to each transform layer
};

template <typename T>
struct ForwardCacheT {
  TensorT<T> stem_in;
  std::vector<BlockCacheT<T>> blocks;
  int pre_pool_h = 0, pre_pool_w = 0;
  TensorT<T> head_in;  // input to the head affine (pooled if head_gap)
  TensorT<T> logits;
};

using ForwardCache = ForwardCacheT<float>;

// ------------------------------------------------------- layer fwd/bwd

template <typename T>
TensorT<T> layer_fwd(const LayerT<T>& layer, const TensorT<T>& in) {
  if (const auto* c = std::get_if<Conv2dLayer<T>>(&layer))
    return conv2d_fwd(in, c->K, c->b, c->stride, c->pad);
  if (const auto* a = std::get_if<AffineLayer<T>>(&layer)) {
    if (in.rank() == 2) return affine_fwd(in, a->W, a->b);
    // flatten trailing dims
    int B = in.dim(0);
    TensorT<T> flat({B, static_cast<int>(in.numel()) / B}, in.data);
    return affine_fwd(flat, a->W, a->b);
  }
  return relu_fwd(in);
}

template <typename T>
void accumulate(TensorT<T>& into, const TensorT<T>& g) {
  check_same_shape(into, g, "accumulate");
  for (std::size_t i = 0; i < into.numel(); ++i) into[i] += g[i];
}

// grad_in from grad_out; when `param_grads` is non-null the layer's weight
// gradients are accumulated into slots [slot], [slot+1].
template <typename T>
TensorT<T> layer_bwd(const LayerT<T>& layer, const TensorT<T>& grad_out, const TensorT<T>& in,
                     std::vector<TensorT<T>>* param_grads, std::size_t slot) {
  if (const auto* c = std::get_if<Conv2dLayer<T>>(&layer)) {
    if (!param_grads)
      return conv2d_bwd_input(grad_out, c->K, in.dim(2), in.dim(3), c->stride, c->pad);
    ConvGrads<T> g = conv2d_bwd(grad_out, in, c->K, c->stride, c->pad);
    accumulate((*param_grads)[slot], g.K);
    accumulate((*param_grads)[slot + 1], g.b);
    return std::move(g.x);
  }
  if (const auto* a = std::get_if<AffineLayer<T>>(&layer)) {
    const TensorT<T>* src = &in;
    TensorT<T> flat;
    if (in.rank() != 2) {
      int B = in.dim(0);
      flat = TensorT<T>({B, static_cast<int>(in.numel()) / B}, in.data);
      src = &flat;
    }
    AffineGrads<T> g = affine_bwd(grad_out, *src, a->W);
    if (param_grads) {
      accumulate((*param_grads)[slot], g.W);
      accumulate((*param_grads)[slot + 1], g.b);
    }
    if (in.rank() != 2) return TensorT<T>(in.shape, std::move(g.x.data));
    return std::move(g.x);
  }
  return relu_bwd(grad_out, in);
}

template <typename T>
inline int layer_param_count(const LayerT<T>& layer) {
  return std::holds_alternative<ReluLayer>(layer) ? 0 : 2;
}

// Fixed enumeration order of the weight tensors: stem, blocks in order
// (each layer's kernel/weight then bias), head W, head b. Serialization,
// SGD, and backward all agree on this order.
template <typename T, typename Fn>
void for_each_param(NetworkT<T>& net, Fn&& fn) {
  auto visit = [&](LayerT<T>& layer) {
    if (auto* c = std::get_if<Conv2dLayer<T>>(&layer)) {
      fn(c->K);
      fn(c->b);
    } else if (auto* a = std::get_if<AffineLayer<T>>(&layer)) {
      fn(a->W);
      fn(a->b);
    }
  };
  visit(net.stem);
  for (auto& blk : net.blocks)
    for (auto& layer : blk.transform) visit(layer);
  fn(net.head.W);
  fn(net.head.b);
}

template <typename T>
std::vector<TensorT<T>*> param_list(NetworkT<T>& net) {
  std::vector<TensorT<T>*> out;
  for_each_param(net, [&](TensorT<T>& t) { out.push_back(&t); });
  return out;
}

template <typename T>
std::vector<TensorT<T>> make_zero_grads(NetworkT<T>& net) {
  std::vector<TensorT<T>> out;
  for_each_param(net, [&](TensorT<T>& t) { out.emplace_back(t.shape); });
  return out;
}

// ---------------------------------------------------------------- forward

template <typename T>
std::pair<TensorT<T>, ForwardCacheT<T>> forward(const NetworkT<T>& net, const TensorT<T>& x) {
  if (x.rank() < 2 || static_cast<std::size_t>(x.rank()) != net.input_shape.size() + 1)
    throw dimension_error("forward: input rank does not match the network");
  for (std::size_t i = 0; i < net.input_shape.size(); ++i)
    if (x.dim(static_cast<int>(i) + 1) != net.input_shape[i])
      throw dimension_error("forward: input shape " + x.shape_str() + " does not match the network");

  ForwardCacheT<T> cache;
  cache.stem_in = x;
  TensorT<T> z = layer_fwd(net.stem, x);

  cache.blocks.resize(net.blocks.size());
  for (std::size_t bi = 0; bi < net.blocks.size(); ++bi) {
    const auto& blk = net.blocks[bi];
    auto& bc = cache.blocks[bi];
    bc.layer_in.reserve(blk.transform.size());
    TensorT<T> t = z;
    for (const auto& layer : blk.transform) {
      bc.layer_in.push_back(t);
      t = layer_fwd(layer, t);
    }
    check_same_shape(t, z, "residual block output");
    for (std::size_t i = 0; i < z.numel(); ++i) z[i] += t[i];
  }

  if (net.head_gap) {
    if (z.rank() != 4) throw dimension_error("forward: head pooling expects 4-d features");
    cache.pre_pool_h = z.dim(2);
    cache.pre_pool_w = z.dim(3);
    cache.head_in = global_avg_pool_fwd(z);
  } else {
    cache.head_in = z;
  }
  TensorT<T> head_in2 = cache.head_in;
  if (head_in2.rank() != 2)
    head_in2 = TensorT<T>({head_in2.dim(0), static_cast<int>(head_in2.numel()) / head_in2.dim(0)},
                          head_in2.data);
  cache.logits = affine_fwd(head_in2, net.head.W, net.head.b);
  return {cache.logits, cache};
}

// ------------------------------------------------------------------- loss

// Softmax cross-entropy for one sample; grad = softmax(logits) - onehot(y).
template <typename T>
std::pair<double, TensorT<T>> loss_and_grad(const TensorT<T>& logits, int y) {
  if (logits.rank() != 1 && !(logits.rank() == 2 && logits.dim(0) == 1))
    throw dimension_error("loss_and_grad: expected a single logit vector");
  int n = static_cast<int>(logits.numel());
  if (y < 0 || y >= n) throw parameter_error("loss_and_grad: label out of range");
  double m = -1e300;
  for (std::size_t i = 0; i < logits.numel(); ++i)
    m = std::max(m, static_cast<double>(logits[i]));
  double sum = 0.0;
  for (std::size_t i = 0; i < logits.numel(); ++i)
    sum += std::exp(static_cast<double>(logits[i]) - m);
  double loss = std::log(sum) - (static_cast<double>(logits[static_cast<std::size_t>(y)]) - m);
  TensorT<T> grad(logits.shape);
  for (std::size_t i = 0; i < logits.numel(); ++i)
    grad[i] = static_cast<T>(std::exp(static_cast<double>(logits[i]) - m) / sum);
  grad[static_cast<std::size_t>(y)] -= T(1);
  return {loss, grad};
}

// Batch mean loss; grad rows are already scaled by 1/B.
template <typename T>
std::pair<double, TensorT<T>> loss_and_grad_batch(const TensorT<T>& logits,
                                                  const std::vector<int>& labels) {
  int B = logits.dim(0), n = logits.dim(1);
  if (static_cast<int>(labels.size()) != B)
    throw parameter_error("loss_and_grad_batch: label count mismatch");
  TensorT<T> grad({B, n});
  double total = 0.0;
  for (int r = 0; r < B; ++r) {
    TensorT<T> row({n});
    for (int i = 0; i < n; ++i) row[static_cast<std::size_t>(i)] = logits[static_cast<std::size_t>(r) * n + i];
    auto [l, g] = loss_and_grad(row, labels[static_cast<std::size_t>(r)]);
    total += l;
    for (int i = 0; i < n; ++i)
      grad[static_cast<std::size_t>(r) * n + i] = g[static_cast<std::size_t>(i)] / static_cast<T>(B);
  }
  return {total / B, grad};
}

// ----------------------------------------------------------------- backward

namespace detail {

// Shared backward walk. `gamma`: per-block branch-gradient multipliers
// (pass all-ones for standard backprop). `param_grads`: accumulate weight
// gradients when non-null.
template <typename T>
TensorT<T> backward_impl(const NetworkT<T>& net, const ForwardCacheT<T>& cache,
                         const TensorT<T>& grad_logits, const DecayFactors& gamma,
                         std::vector<TensorT<T>>* param_grads) {
  if (gamma.size() != net.block_count())
    throw parameter_error("backward: decay factor count does not match block count");

  // pre-compute parameter slot bases in forward enumeration order
  std::size_t stem_base = 0;
  std::size_t cursor = static_cast<std::size_t>(layer_param_count(net.stem));
  std::vector<std::vector<std::size_t>> block_layer_base(net.blocks.size());
  for (std::size_t bi = 0; bi < net.blocks.size(); ++bi) {
    for (const auto& layer : net.blocks[bi].transform) {
      block_layer_base[bi].push_back(cursor);
      cursor += static_cast<std::size_t>(layer_param_count(layer));
    }
  }
  std::size_t head_base = cursor;

  TensorT<T> grad_logits2 = grad_logits;
  if (grad_logits2.rank() == 1) grad_logits2 = TensorT<T>({1, grad_logits.dim(0)}, grad_logits.data);

  const TensorT<T>* head_src = &cache.head_in;
  TensorT<T> flat;
  if (cache.head_in.rank() != 2) {
    flat = TensorT<T>({cache.head_in.dim(0),
                       static_cast<int>(cache.head_in.numel()) / cache.head_in.dim(0)},
                      cache.head_in.data);
    head_src = &flat;
  }
  AffineGrads<T> hg = affine_bwd(grad_logits2, *head_src, net.head.W);
  if (param_grads) {
    accumulate((*param_grads)[head_base], hg.W);
    accumulate((*param_grads)[head_base + 1], hg.b);
  }
  TensorT<T> g = std::move(hg.x);
  if (net.head_gap) g = global_avg_pool_bwd(g, cache.pre_pool_h, cache.pre_pool_w);
  else if (cache.head_in.rank() != 2) g = TensorT<T>(cache.head_in.shape, std::move(g.data));

  for (int bi = net.block_count() - 1; bi >= 0; --bi) {
    const auto& blk = net.blocks[static_cast<std::size_t>(bi)];
    const auto& bc = cache.blocks[static_cast<std::size_t>(bi)];
    TensorT<T> bg = g;  // gradient entering the transform branch
    for (int li = static_cast<int>(blk.transform.size()) - 1; li >= 0; --li)
      bg = layer_bwd(blk.transform[static_cast<std::size_t>(li)], bg,
                     bc.layer_in[static_cast<std::size_t>(li)], param_grads,
                     param_grads ? block_layer_base[static_cast<std::size_t>(bi)]
                                                  [static_cast<std::size_t>(li)]
                                 : 0);
    T gm = static_cast<T>(gamma[bi]);
    for (std::size_t i = 0; i < g.numel(); ++i) g[i] += gm * bg[i];
  }

  return layer_bwd(net.stem, g, cache.stem_in, param_grads, stem_base);
}

}  // namespace detail

// Input gradient with decayed residual branches: at each block the branch
// contribution is scaled by its factor before joining the skip-path gradient.
template <typename T>
TensorT<T> backward_gamma(const NetworkT<T>& net, const ForwardCacheT<T>& cache,
                          const TensorT<T>& grad_logits, const DecayFactors& gamma) {
  return detail::backward_impl(net, cache, grad_logits, gamma,
                               static_cast<std::vector<TensorT<T>>*>(nullptr));
}

// Standard backprop collecting weight gradients (training path).
template <typename T>
TensorT<T> backward_train(const NetworkT<T>& net, const ForwardCacheT<T>& cache,
                          const TensorT<T>& grad_logits, std::vector<TensorT<T>>& param_grads) {
  return detail::backward_impl(net, cache, grad_logits, DecayFactors::ones(net.block_count()),
                               &param_grads);
}

// ----------------------------------------------------- gradient extraction

template <typename T>
struct InputGradientResult {
  TensorT<T> grad;
  double loss = 0.0;
  TensorT<T> logits;
};

template <typename T>
InputGradientResult<T> input_gradient_with_loss(const NetworkT<T>& net, const TensorT<T>& x, int y,
                                                const DecayFactors& gamma) {
  auto [logits, cache] = forward(net, x);
  TensorT<T> row({net.n_classes});
  std::copy(logits.data.begin(), logits.data.end(), row.data.begin());
  auto [loss, grad_logits] = loss_and_grad(row, y);
  TensorT<T> gl({1, net.n_classes}, std::move(grad_logits.data));
  return {backward_gamma(net, cache, gl, gamma), loss, std::move(logits)};
}

// The loss gradient w.r.t. the input under decay factors `gamma`.
template <typename T>
TensorT<T> input_gradient(const NetworkT<T>& net, const TensorT<T>& x, int y,
                          const DecayFactors& gamma) {
  return input_gradient_with_loss(net, x, y, gamma).grad;
}

// Euclidean norm of the input gradient (the factor-search objective).
template <typename T>
double gradient_norm(const NetworkT<T>& net, const TensorT<T>& x, int y, const DecayFactors& gamma) {
  return norm2(input_gradient(net, x, y, gamma));
}

// ------------------------------------------------------------- construction

// Desk-scale residual families. All use a stride-2 stem conv, identity-skip
// (conv - relu - conv) blocks at constant width, and a pooled affine head.
//   rs-small: 4 blocks, 8 channels
//   rs-mid:   6 blocks, 8 channels
//   rs-wide:  4 blocks, 16 channels
struct ArchSpec {
  int channels = 8;
  int block_count = 4;
};

inline ArchSpec arch_spec(const std::string& arch_id) {
  if (arch_id == "rs-small") return {8, 4};
  if (arch_id == "rs-mid") return {8, 6};
  if (arch_id == "rs-wide") return {16, 4};
  throw parameter_error("unknown architecture '" + arch_id + "'");
}

template <typename T = float>
TensorT<T> he_normal(std::vector<int> shape, int fan_in, Rng& rng) {
  TensorT<T> t(std::move(shape));
  double std_dev = std::sqrt(2.0 / fan_in);
  for (std::size_t i = 0; i < t.numel(); ++i)
    t[i] = static_cast<T>(rng.next_normal(std_dev));
  return t;
}

template <typename T = float>
NetworkT<T> make_network(const std::string& arch_id, int in_c, int in_h, int in_w, int n_classes,
                         std::uint64_t seed) {
  ArchSpec spec = arch_spec(arch_id);
  Rng rng(seed, 0xa7c4);
  NetworkT<T> net;
  net.arch_id = arch_id;
  net.input_shape = {in_c, in_h, in_w};
  net.n_classes = n_classes;
  int C = spec.channels;

  Conv2dLayer<T> stem;
  stem.K = he_normal<T>({C, in_c, 3, 3}, in_c * 9, rng);
  stem.b = TensorT<T>({C});
  stem.stride = 2;
  stem.pad = 1;
  net.stem = stem;

  net.blocks.resize(static_cast<std::size_t>(spec.block_count));
  for (auto& blk : net.blocks) {
    Conv2dLayer<T> c1;
    c1.K = he_normal<T>({C, C, 3, 3}, C * 9, rng);
    c1.b = TensorT<T>({C});
    Conv2dLayer<T> c2;
    // zero start for the branch output keeps unnormalized residual stacks
    // from amplifying activations before training finds a scale
    c2.K = TensorT<T>({C, C, 3, 3});
    c2.b = TensorT<T>({C});
    blk.transform = {c1, ReluLayer{}, c2};
  }

  net.head_gap = true;
  net.head.W = he_normal<T>({C, n_classes}, C, rng);
  net.head.b = TensorT<T>({n_classes});
  return net;
}

}  // namespace tal
