#pragma once

#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numbers>
#include <sstream>
#include <string>
#include <system_error>
#include <utility>
#include <vector>

#include "tal/attacks.hpp"
#include "tal/net.hpp"
#include "tal/rng.hpp"
#include "tal/tensor.hpp"

// Datasets, training, and model persistence: everything needed to produce
// the surrogate and victim models the attacks run against.

namespace tal {

enum class Split { train, test, val };

inline std::string split_name(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::test: return "test";
    default: return "val";
  }
}

inline Split split_from_name(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "test") return Split::test;
  if (s == "val") return Split::val;
  throw parameter_error("unknown split '" + s + "'");
}

template <typename T>
struct DatasetT {
  TensorT<T> images;  // [N,C,H,W] in [0,1]
  std::vector<int> labels;
  int n_classes = 0;
  Split split = Split::train;

  int size() const { return images.rank() >= 1 ? images.dim(0) : 0; }

  // view of one image as [1,C,H,W]
  TensorT<T> image(int i) const {
    int C = images.dim(1), H = images.dim(2), W = images.dim(3);
    std::size_t stride = static_cast<std::size_t>(C) * H * W;
    TensorT<T> out({1, C, H, W});
    std::copy(images.data.begin() + static_cast<std::ptrdiff_t>(stride * i),
              images.data.begin() + static_cast<std::ptrdiff_t>(stride * (i + 1)),
              out.data.begin());
    return out;
  }
};

using Dataset = DatasetT<float>;

template <typename T>
void validate_dataset(const DatasetT<T>& ds) {
  if (ds.images.rank() != 4) throw dimension_error("dataset: images must be [N,C,H,W]");
  if (ds.images.dim(0) != static_cast<int>(ds.labels.size()))
    throw dimension_error("dataset: image/label count mismatch");
  if (ds.n_classes <= 0) throw parameter_error("dataset: class count must be positive");
  for (int l : ds.labels)
    if (l < 0 || l >= ds.n_classes) throw parameter_error("dataset: label out of range");
  for (std::size_t i = 0; i < ds.images.numel(); ++i)
    if (!(ds.images[i] >= T(0) && ds.images[i] <= T(1)))
      throw parameter_error("dataset: pixel outside [0,1]");
}

// ------------------------------------------------------------ synthetic data

// Class-conditional images: every class owns a fixed smooth template (a
// mixture of low-frequency cosine waves keyed by (seed, class) only, so
// train/test splits share templates), and each sample adds seeded noise
// before clipping to [0,1]. The noise has two parts: a smooth per-sample
// wave mixture drawn from the same frequency band as the templates (white
// noise alone is too easy — spatial pooling averages it away) plus pixel
// noise.
template <typename T = float>
DatasetT<T> synth_dataset(std::uint64_t seed, int n_classes, int n_per_class, int C, int H, int W,
                          Split split = Split::train) {
  if (n_classes < 1 || n_per_class < 1 || C < 1 || H < 1 || W < 1)
    throw parameter_error("synth_dataset: all sizes must be at least 1");

  constexpr int kWaves = 3;
  constexpr int kNoiseWaves = 3;
  constexpr double kNoiseAmp = 0.15;
  constexpr double kNoiseSigma = 0.047;

  // per-class templates
  std::vector<std::vector<double>> tmpl(static_cast<std::size_t>(n_classes));
  for (int c = 0; c < n_classes; ++c) {
    Rng trng(mix64(seed, static_cast<std::uint64_t>(c)), 0x7e3a);
    auto& img = tmpl[static_cast<std::size_t>(c)];
    img.assign(static_cast<std::size_t>(C) * H * W, 0.5);
    for (int ch = 0; ch < C; ++ch) {
      for (int k = 0; k < kWaves; ++k) {
        double fx = trng.next_int(0, 2);
        double fy = trng.next_int(0, 2);
        if (fx == 0.0 && fy == 0.0) fy = 1.0;
        double amp = trng.next_uniform(0.04, 0.10);
        double phase = trng.next_uniform(0.0, 2.0 * std::numbers::pi);
        for (int y = 0; y < H; ++y)
          for (int x = 0; x < W; ++x)
            img[(static_cast<std::size_t>(ch) * H + y) * W + x] +=
                amp * std::cos(2.0 * std::numbers::pi * (fx * x / W + fy * y / H) + phase);
      }
    }
  }

  int N = n_classes * n_per_class;
  DatasetT<T> ds;
  ds.images = TensorT<T>({N, C, H, W});
  ds.labels.resize(static_cast<std::size_t>(N));
  ds.n_classes = n_classes;
  ds.split = split;

  std::size_t img_sz = static_cast<std::size_t>(C) * H * W;
  for (int i = 0; i < N; ++i) {
    int c = i % n_classes;
    ds.labels[static_cast<std::size_t>(i)] = c;
    std::uint64_t sample_key =
        (static_cast<std::uint64_t>(split) << 40) | static_cast<std::uint64_t>(i);
    Rng srng(mix64(seed, sample_key), 0x51d7);
    std::vector<double> field(img_sz, 0.0);
    for (int ch = 0; ch < C; ++ch) {
      for (int k = 0; k < kNoiseWaves; ++k) {
        double fx = srng.next_int(0, 2);
        double fy = srng.next_int(0, 2);
        if (fx == 0.0 && fy == 0.0) fy = 1.0;
        double amp = srng.next_uniform(0.0, kNoiseAmp);
        double phase = srng.next_uniform(0.0, 2.0 * std::numbers::pi);
        for (int y = 0; y < H; ++y)
          for (int x = 0; x < W; ++x)
            field[(static_cast<std::size_t>(ch) * H + y) * W + x] +=
                amp * std::cos(2.0 * std::numbers::pi * (fx * x / W + fy * y / H) + phase);
      }
    }
    const auto& img = tmpl[static_cast<std::size_t>(c)];
    for (std::size_t p = 0; p < img_sz; ++p) {
      double v = img[p] + field[p] + srng.next_normal(kNoiseSigma);
      v = v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v);
      ds.images[static_cast<std::size_t>(i) * img_sz + p] = static_cast<T>(v);
    }
  }
  return ds;
}

// ------------------------------------------------------------------ IDX load

namespace detail {

inline std::uint32_t read_be32(std::istream& in, const std::string& what) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  if (!in) throw format_error("idx: truncated " + what);
  return (static_cast<std::uint32_t>(b[0]) << 24) | (static_cast<std::uint32_t>(b[1]) << 16) |
         (static_cast<std::uint32_t>(b[2]) << 8) | static_cast<std::uint32_t>(b[3]);
}

}  // namespace detail

// Reads a ubyte image file (magic 0x00000803: N x rows x cols) and a ubyte
// label file (magic 0x00000801: N), both big-endian; pixels are scaled by
// 1/255 into single-channel images.
template <typename T = float>
DatasetT<T> load_idx(const std::string& images_path, const std::string& labels_path,
                     Split split = Split::train) {
  std::ifstream imgs(images_path, std::ios::binary);
  if (!imgs) throw io_error("cannot open '" + images_path + "'");
  std::ifstream labs(labels_path, std::ios::binary);
  if (!labs) throw io_error("cannot open '" + labels_path + "'");

  if (detail::read_be32(imgs, "image magic") != 0x00000803u)
    throw format_error("idx: bad image magic in '" + images_path + "'");
  std::uint32_t n = detail::read_be32(imgs, "image count");
  std::uint32_t rows = detail::read_be32(imgs, "row count");
  std::uint32_t cols = detail::read_be32(imgs, "column count");
  if (n == 0 || rows == 0 || cols == 0)
    throw format_error("idx: empty image set in '" + images_path + "'");

  if (detail::read_be32(labs, "label magic") != 0x00000801u)
    throw format_error("idx: bad label magic in '" + labels_path + "'");
  std::uint32_t n_lab = detail::read_be32(labs, "label count");
  if (n != n_lab) throw format_error("idx: image/label count mismatch");

  DatasetT<T> ds;
  ds.split = split;
  ds.images = TensorT<T>({static_cast<int>(n), 1, static_cast<int>(rows), static_cast<int>(cols)});
  std::vector<unsigned char> buf(static_cast<std::size_t>(rows) * cols);
  for (std::uint32_t i = 0; i < n; ++i) {
    imgs.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    if (!imgs) throw format_error("idx: truncated image data in '" + images_path + "'");
    for (std::size_t p = 0; p < buf.size(); ++p)
      ds.images[static_cast<std::size_t>(i) * buf.size() + p] = static_cast<T>(buf[p] / 255.0);
  }
  ds.labels.resize(n);
  int max_label = 0;
  for (std::uint32_t i = 0; i < n; ++i) {
    unsigned char l;
    labs.read(reinterpret_cast<char*>(&l), 1);
    if (!labs) throw format_error("idx: truncated label data in '" + labels_path + "'");
    ds.labels[i] = static_cast<int>(l);
    max_label = std::max(max_label, static_cast<int>(l));
  }
  ds.n_classes = max_label + 1;
  return ds;
}

// ------------------------------------------------------------------ training

struct TrainConfig {
  int epochs = 12;
  int batch_size = 64;
  double lr = 0.05;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  double clip_norm = 1.0;  // global gradient-norm clip; <= 0 disables
  std::uint64_t seed = 0;
  bool adv_train = false;
  double adv_epsilon = 8.0 / 255.0;
};

inline void validate_train_config(const TrainConfig& cfg) {
  if (cfg.epochs < 0) throw parameter_error("train: epochs must be non-negative");
  if (cfg.batch_size < 1) throw parameter_error("train: batch size must be positive");
  if (!(cfg.lr > 0.0)) throw parameter_error("train: learning rate must be positive");
  if (cfg.momentum < 0.0) throw parameter_error("train: momentum must be non-negative");
  if (cfg.weight_decay < 0.0) throw parameter_error("train: weight decay must be non-negative");
  if (!(cfg.adv_epsilon > 0.0) || cfg.adv_epsilon > 0.25)
    throw parameter_error("train: adv_epsilon must lie in (0, 0.25]");
}

// class predictions for a batch tensor [B,C,H,W]; ties break to lowest index
template <typename T>
std::vector<int> predict(const NetworkT<T>& net, const TensorT<T>& batch) {
  auto [logits, cache] = forward(net, batch);
  int B = logits.dim(0), K = logits.dim(1);
  std::vector<int> out(static_cast<std::size_t>(B));
  for (int r = 0; r < B; ++r) {
    int best = 0;
    for (int k = 1; k < K; ++k)
      if (logits[static_cast<std::size_t>(r) * K + k] > logits[static_cast<std::size_t>(r) * K + best])
        best = k;
    out[static_cast<std::size_t>(r)] = best;
  }
  return out;
}

template <typename T>
std::vector<int> predict_dataset(const NetworkT<T>& net, const DatasetT<T>& ds,
                                 int batch_size = 128) {
  std::vector<int> out;
  out.reserve(static_cast<std::size_t>(ds.size()));
  int C = ds.images.dim(1), H = ds.images.dim(2), W = ds.images.dim(3);
  std::size_t img_sz = static_cast<std::size_t>(C) * H * W;
  for (int start = 0; start < ds.size(); start += batch_size) {
    int B = std::min(batch_size, ds.size() - start);
    TensorT<T> batch({B, C, H, W});
    std::copy(ds.images.data.begin() + static_cast<std::ptrdiff_t>(img_sz * start),
              ds.images.data.begin() + static_cast<std::ptrdiff_t>(img_sz * (start + B)),
              batch.data.begin());
    std::vector<int> p = predict(net, batch);
    out.insert(out.end(), p.begin(), p.end());
  }
  return out;
}

template <typename T>
double accuracy(const NetworkT<T>& net, const DatasetT<T>& ds) {
  std::vector<int> p = predict_dataset(net, ds);
  int hit = 0;
  for (std::size_t i = 0; i < p.size(); ++i)
    if (p[i] == ds.labels[i]) ++hit;
  return ds.size() > 0 ? static_cast<double>(hit) / ds.size() : 0.0;
}

namespace detail {

// batched single-step signed-gradient examples against the current weights
template <typename T>
TensorT<T> fgsm_batch(const NetworkT<T>& net, const TensorT<T>& x, const std::vector<int>& labels,
                      double eps) {
  auto [logits, cache] = forward(net, x);
  auto [loss, grad_logits] = loss_and_grad_batch(logits, labels);
  (void)loss;
  TensorT<T> g = backward_gamma(net, cache, grad_logits, DecayFactors::ones(net.block_count()));
  TensorT<T> out = x;
  for (std::size_t i = 0; i < out.numel(); ++i)
    out[i] += static_cast<T>(eps) * static_cast<T>(sign_of(g[i]));
  return clip01(std::move(out));
}

}  // namespace detail

// SGD with momentum on softmax cross-entropy. Velocity update:
//   v <- momentum * v + (grad + weight_decay * w);  w <- w - lr * v
// Batch order is drawn from `rng`, so identical seeds give identical
// weights. With adv_train, each batch is replaced by its single-step
// signed-gradient examples at adv_epsilon before the update.
template <typename T>
NetworkT<T> train(NetworkT<T> net, const DatasetT<T>& data, const TrainConfig& cfg, Rng& rng) {
  validate_train_config(cfg);
  validate_dataset(data);
  if (data.images.dim(1) != net.input_shape[0] || data.images.dim(2) != net.input_shape[1] ||
      data.images.dim(3) != net.input_shape[2])
    throw dimension_error("train: dataset shape does not match the network");
  if (data.n_classes != net.n_classes)
    throw dimension_error("train: dataset class count does not match the network");

  int N = data.size();
  int C = data.images.dim(1), H = data.images.dim(2), W = data.images.dim(3);
  std::size_t img_sz = static_cast<std::size_t>(C) * H * W;

  std::vector<TensorT<T>> velocity = make_zero_grads(net);
  std::vector<TensorT<T>> grads = make_zero_grads(net);
  std::vector<TensorT<T>*> params = param_list(net);

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::vector<int> order = detail::shuffled_indices(N, rng);
    for (int start = 0; start < N; start += cfg.batch_size) {
      int B = std::min(cfg.batch_size, N - start);
      TensorT<T> batch({B, C, H, W});
      std::vector<int> labels(static_cast<std::size_t>(B));
      for (int j = 0; j < B; ++j) {
        int src = order[static_cast<std::size_t>(start + j)];
        std::copy(data.images.data.begin() + static_cast<std::ptrdiff_t>(img_sz * src),
                  data.images.data.begin() + static_cast<std::ptrdiff_t>(img_sz * (src + 1)),
                  batch.data.begin() + static_cast<std::ptrdiff_t>(img_sz * j));
        labels[static_cast<std::size_t>(j)] = data.labels[static_cast<std::size_t>(src)];
      }
      if (cfg.adv_train) batch = detail::fgsm_batch(net, batch, labels, cfg.adv_epsilon);

      for (auto& g : grads) g.fill(T(0));
      auto [logits, cache] = forward(net, batch);
      auto [loss, grad_logits] = loss_and_grad_batch(logits, labels);
      if (!std::isfinite(loss)) throw training_error("train: loss diverged");
      backward_train(net, cache, grad_logits, grads);

      // global-norm clip: unnormalized residual stacks occasionally emit a
      // gradient spike that momentum would otherwise compound into overflow
      T scale = T(1);
      if (cfg.clip_norm > 0.0) {
        double gn2 = 0.0;
        for (const auto& g : grads) {
          double n = norm2(g);
          gn2 += n * n;
        }
        double gn = std::sqrt(gn2);
        if (gn > cfg.clip_norm) scale = static_cast<T>(cfg.clip_norm / gn);
      }

      for (std::size_t p = 0; p < params.size(); ++p) {
        TensorT<T>& w = *params[p];
        TensorT<T>& v = velocity[p];
        TensorT<T>& g = grads[p];
        for (std::size_t i = 0; i < w.numel(); ++i) {
          v[i] = static_cast<T>(cfg.momentum) * v[i] +
                 (scale * g[i] + static_cast<T>(cfg.weight_decay) * w[i]);
          w[i] -= static_cast<T>(cfg.lr) * v[i];
        }
      }
    }
  }
  return net;
}

// -------------------------------------------------------------- persistence

namespace detail {

template <typename T>
void write_scalar(std::ostream& out, T v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  out.write(buf, res.ptr - buf);
}

template <typename T>
void write_tensor_block(std::ostream& out, const TensorT<T>& t) {
  out << "tensor " << t.rank();
  for (int d : t.shape) out << ' ' << d;
  out << '\n';
  for (std::size_t i = 0; i < t.numel(); ++i) {
    if (i) out << ' ';
    write_scalar(out, t[i]);
  }
  out << '\n';
}

inline std::string next_token(std::istream& in) {
  std::string tok;
  if (!(in >> tok)) throw format_error("model file: unexpected end of document");
  return tok;
}

inline int next_int(std::istream& in, const std::string& what) {
  std::string tok = next_token(in);
  int v = 0;
  auto res = std::from_chars(tok.data(), tok.data() + tok.size(), v);
  if (res.ec != std::errc() || res.ptr != tok.data() + tok.size())
    throw format_error("model file: bad integer for " + what);
  return v;
}

template <typename T>
T next_scalar(std::istream& in) {
  std::string tok = next_token(in);
  T v{};
  auto res = std::from_chars(tok.data(), tok.data() + tok.size(), v);
  if (res.ec != std::errc() || res.ptr != tok.data() + tok.size())
    throw format_error("model file: bad numeric value");
  return v;
}

inline void expect_token(std::istream& in, const std::string& want) {
  std::string tok = next_token(in);
  if (tok != want)
    throw format_error("model file: expected '" + want + "', found '" + tok + "'");
}

}  // namespace detail

// Versioned text document: a structure section (architecture, layer kinds
// and their shapes) followed by every weight tensor in the fixed parameter
// enumeration order, written with shortest round-trip decimals so loading
// reproduces bit-identical behavior.
template <typename T>
void save_model(const NetworkT<T>& net, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw io_error("cannot open '" + path + "' for writing");

  out << "format_version 1\n";
  out << "arch " << (net.arch_id.empty() ? std::string("custom") : net.arch_id) << '\n';
  out << "input " << net.input_shape.size();
  for (int d : net.input_shape) out << ' ' << d;
  out << '\n';
  out << "classes " << net.n_classes << '\n';
  out << "head_gap " << (net.head_gap ? 1 : 0) << '\n';

  auto describe = [&out](const LayerT<T>& layer) {
    if (const auto* c = std::get_if<Conv2dLayer<T>>(&layer))
      out << "conv " << c->K.dim(0) << ' ' << c->K.dim(1) << ' ' << c->K.dim(2) << ' '
          << c->stride << ' ' << c->pad << '\n';
    else if (const auto* a = std::get_if<AffineLayer<T>>(&layer))
      out << "affine " << a->W.dim(0) << ' ' << a->W.dim(1) << '\n';
    else
      out << "relu\n";
  };
  out << "stem ";
  describe(net.stem);
  out << "blocks " << net.block_count() << '\n';
  for (const auto& blk : net.blocks) {
    out << "block " << blk.transform.size() << '\n';
    for (const auto& layer : blk.transform) {
      out << "layer ";
      describe(layer);
    }
  }
  out << "head affine " << net.head.W.dim(0) << ' ' << net.head.W.dim(1) << '\n';

  auto& mutable_net = const_cast<NetworkT<T>&>(net);
  std::vector<TensorT<T>*> params = param_list(mutable_net);
  out << "params " << params.size() << '\n';
  for (const TensorT<T>* t : params) detail::write_tensor_block(out, *t);
  out << "end\n";
  if (!out) throw io_error("write failure on '" + path + "'");
}

template <typename T = float>
NetworkT<T> load_model(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw io_error("cannot open '" + path + "'");

  detail::expect_token(in, "format_version");
  int version = detail::next_int(in, "format_version");
  if (version != 1)
    throw format_error("model file: unsupported format_version " + std::to_string(version));

  NetworkT<T> net;
  detail::expect_token(in, "arch");
  net.arch_id = detail::next_token(in);
  detail::expect_token(in, "input");
  int in_rank = detail::next_int(in, "input rank");
  if (in_rank < 1 || in_rank > 3) throw format_error("model file: bad input rank");
  net.input_shape.resize(static_cast<std::size_t>(in_rank));
  for (int i = 0; i < in_rank; ++i) net.input_shape[static_cast<std::size_t>(i)] = detail::next_int(in, "input dim");
  detail::expect_token(in, "classes");
  net.n_classes = detail::next_int(in, "classes");
  detail::expect_token(in, "head_gap");
  net.head_gap = detail::next_int(in, "head_gap") != 0;

  auto read_layer = [&in]() -> LayerT<T> {
    std::string kind = detail::next_token(in);
    if (kind == "conv") {
      Conv2dLayer<T> c;
      int F = detail::next_int(in, "conv F");
      int C = detail::next_int(in, "conv C");
      int k = detail::next_int(in, "conv k");
      c.stride = detail::next_int(in, "conv stride");
      c.pad = detail::next_int(in, "conv pad");
      if (F < 1 || C < 1 || k < 1) throw format_error("model file: bad conv shape");
      c.K = TensorT<T>({F, C, k, k});
      c.b = TensorT<T>({F});
      return c;
    }
    if (kind == "affine") {
      AffineLayer<T> a;
      int I = detail::next_int(in, "affine I");
      int O = detail::next_int(in, "affine O");
      if (I < 1 || O < 1) throw format_error("model file: bad affine shape");
      a.W = TensorT<T>({I, O});
      a.b = TensorT<T>({O});
      return a;
    }
    if (kind == "relu") return ReluLayer{};
    throw format_error("model file: unknown layer kind '" + kind + "'");
  };

  detail::expect_token(in, "stem");
  net.stem = read_layer();
  detail::expect_token(in, "blocks");
  int L = detail::next_int(in, "blocks");
  if (L < 0 || L > 4096) throw format_error("model file: bad block count");
  net.blocks.resize(static_cast<std::size_t>(L));
  for (int b = 0; b < L; ++b) {
    detail::expect_token(in, "block");
    int nl = detail::next_int(in, "block layer count");
    if (nl < 1 || nl > 4096) throw format_error("model file: bad block layer count");
    for (int l = 0; l < nl; ++l) {
      detail::expect_token(in, "layer");
      net.blocks[static_cast<std::size_t>(b)].transform.push_back(read_layer());
    }
  }
  detail::expect_token(in, "head");
  detail::expect_token(in, "affine");
  {
    int I = detail::next_int(in, "head I");
    int O = detail::next_int(in, "head O");
    if (I < 1 || O < 1) throw format_error("model file: bad head shape");
    net.head.W = TensorT<T>({I, O});
    net.head.b = TensorT<T>({O});
  }

  detail::expect_token(in, "params");
  std::size_t n_params = static_cast<std::size_t>(detail::next_int(in, "params"));
  std::vector<TensorT<T>*> params = param_list(net);
  if (n_params != params.size())
    throw format_error("model file: parameter count disagrees with the structure");
  for (TensorT<T>* t : params) {
    detail::expect_token(in, "tensor");
    int rank = detail::next_int(in, "tensor rank");
    if (rank != t->rank()) throw format_error("model file: tensor rank disagreement");
    for (int d = 0; d < rank; ++d)
      if (detail::next_int(in, "tensor dim") != t->dim(d))
        throw format_error("model file: tensor shape disagreement");
    for (std::size_t i = 0; i < t->numel(); ++i) (*t)[i] = detail::next_scalar<T>(in);
  }
  detail::expect_token(in, "end");
  return net;
}

}  // namespace tal
