#pragma once

#include <array>
#include <cmath>
#include <tuple>

#include "tal/tensor.hpp"

// Differentiable primitives. Each *_fwd has a hand-written *_bwd that
// computes the exact vector-Jacobian product; there is no tape. Backward
// signatures take whatever the forward needed to store (the "cache" is the
// relevant inputs, passed explicitly).

namespace tal {

// ---------------------------------------------------------------- affine

template <typename T>
TensorT<T> affine_fwd(const TensorT<T>& x, const TensorT<T>& W, const TensorT<T>& b) {
  if (x.rank() != 2 || W.rank() != 2 || b.rank() != 1)
    throw dimension_error("affine_fwd: expected x[B,I], W[I,O], b[O]");
  int B = x.dim(0), I = x.dim(1), O = W.dim(1);
  if (W.dim(0) != I || b.dim(0) != O)
    throw dimension_error("affine_fwd: shapes do not conform: x" + x.shape_str() +
                          " W" + W.shape_str() + " b" + b.shape_str());
  TensorT<T> y({B, O});
  for (int r = 0; r < B; ++r) {
    const T* xr = x.ptr() + static_cast<std::size_t>(r) * I;
    T* yr = y.ptr() + static_cast<std::size_t>(r) * O;
    for (int o = 0; o < O; ++o) yr[o] = b[static_cast<std::size_t>(o)];
    for (int i = 0; i < I; ++i) {
      T xv = xr[i];
      const T* wr = W.ptr() + static_cast<std::size_t>(i) * O;
      for (int o = 0; o < O; ++o) yr[o] += xv * wr[o];
    }
  }
  return y;
}

template <typename T>
struct AffineGrads {
  TensorT<T> x, W, b;
};

template <typename T>
AffineGrads<T> affine_bwd(const TensorT<T>& grad_out, const TensorT<T>& x, const TensorT<T>& W) {
  int B = x.dim(0), I = x.dim(1), O = W.dim(1);
  if (grad_out.rank() != 2 || grad_out.dim(0) != B || grad_out.dim(1) != O)
    throw dimension_error("affine_bwd: grad_out shape mismatch");
  AffineGrads<T> g{TensorT<T>({B, I}), TensorT<T>({I, O}), TensorT<T>({O})};
  for (int r = 0; r < B; ++r) {
    const T* go = grad_out.ptr() + static_cast<std::size_t>(r) * O;
    const T* xr = x.ptr() + static_cast<std::size_t>(r) * I;
    T* gx = g.x.ptr() + static_cast<std::size_t>(r) * I;
    for (int o = 0; o < O; ++o) g.b[static_cast<std::size_t>(o)] += go[o];
    for (int i = 0; i < I; ++i) {
      const T* wr = W.ptr() + static_cast<std::size_t>(i) * O;
      T* gw = g.W.ptr() + static_cast<std::size_t>(i) * O;
      T acc = T(0);
      T xv = xr[i];
      for (int o = 0; o < O; ++o) {
        acc += go[o] * wr[o];
        gw[o] += xv * go[o];
      }
      gx[i] = acc;
    }
  }
  return g;
}

// ----------------------------------------------------------------- conv2d

inline int conv_out_dim(int in, int k, int stride, int pad) {
  return (in + 2 * pad - k) / stride + 1;
}

template <typename T>
void check_conv_args(const TensorT<T>& x, const TensorT<T>& K, int stride, int pad) {
  if (x.rank() != 4 || K.rank() != 4)
    throw dimension_error("conv2d: expected x[B,C,H,W], K[F,C,k,k]");
  if (K.dim(2) != K.dim(3) || K.dim(2) % 2 == 0)
    throw dimension_error("conv2d: kernel must be square with odd side");
  if (K.dim(1) != x.dim(1))
    throw dimension_error("conv2d: kernel channels do not match input");
  if (stride < 1 || pad < 0)
    throw dimension_error("conv2d: invalid stride/pad");
  if (conv_out_dim(x.dim(2), K.dim(2), stride, pad) < 1 ||
      conv_out_dim(x.dim(3), K.dim(2), stride, pad) < 1)
    throw dimension_error("conv2d: output spatial dims not positive");
}

// Cross-correlation. `bias` may be empty (rank 0 tensor) for a bias-free layer.
template <typename T>
TensorT<T> conv2d_fwd(const TensorT<T>& x, const TensorT<T>& K, const TensorT<T>& bias,
                      int stride, int pad) {
  check_conv_args(x, K, stride, pad);
  int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  int F = K.dim(0), k = K.dim(2);
  int Ho = conv_out_dim(H, k, stride, pad), Wo = conv_out_dim(W, k, stride, pad);
  bool has_bias = !bias.data.empty();
  if (has_bias && (bias.rank() != 1 || bias.dim(0) != F))
    throw dimension_error("conv2d_fwd: bias shape mismatch");
  TensorT<T> y({B, F, Ho, Wo});
  for (int b = 0; b < B; ++b) {
    for (int f = 0; f < F; ++f) {
      T bv = has_bias ? bias[static_cast<std::size_t>(f)] : T(0);
      for (int oy = 0; oy < Ho; ++oy) {
        int iy0 = oy * stride - pad;
        for (int ox = 0; ox < Wo; ++ox) {
          int ix0 = ox * stride - pad;
          T acc = bv;
          for (int c = 0; c < C; ++c) {
            const T* xc = &x.at4(b, c, 0, 0);
            const T* kc = &K.at4(f, c, 0, 0);
            for (int ky = 0; ky < k; ++ky) {
              int iy = iy0 + ky;
              if (iy < 0 || iy >= H) continue;
              const T* xrow = xc + static_cast<std::size_t>(iy) * W;
              const T* krow = kc + static_cast<std::size_t>(ky) * k;
              int kx_lo = std::max(0, -ix0);
              int kx_hi = std::min(k, W - ix0);
              for (int kx = kx_lo; kx < kx_hi; ++kx) acc += xrow[ix0 + kx] * krow[kx];
            }
          }
          y.at4(b, f, oy, ox) = acc;
        }
      }
    }
  }
  return y;
}

template <typename T>
struct ConvGrads {
  TensorT<T> x, K, b;
};

template <typename T>
TensorT<T> conv2d_bwd_input(const TensorT<T>& grad_out, const TensorT<T>& K,
                            int H, int W, int stride, int pad) {
  int B = grad_out.dim(0), F = grad_out.dim(1), Ho = grad_out.dim(2), Wo = grad_out.dim(3);
  int C = K.dim(1), k = K.dim(2);
  if (K.dim(0) != F) throw dimension_error("conv2d_bwd: kernel/grad mismatch");
  TensorT<T> gx({B, C, H, W});
  for (int b = 0; b < B; ++b) {
    for (int f = 0; f < F; ++f) {
      for (int oy = 0; oy < Ho; ++oy) {
        int iy0 = oy * stride - pad;
        for (int ox = 0; ox < Wo; ++ox) {
          int ix0 = ox * stride - pad;
          T g = grad_out.at4(b, f, oy, ox);
          if (g == T(0)) continue;
          for (int c = 0; c < C; ++c) {
            T* gxc = &gx.at4(b, c, 0, 0);
            const T* kc = &K.at4(f, c, 0, 0);
            for (int ky = 0; ky < k; ++ky) {
              int iy = iy0 + ky;
              if (iy < 0 || iy >= H) continue;
              T* grow = gxc + static_cast<std::size_t>(iy) * W;
              const T* krow = kc + static_cast<std::size_t>(ky) * k;
              int kx_lo = std::max(0, -ix0);
              int kx_hi = std::min(k, W - ix0);
              for (int kx = kx_lo; kx < kx_hi; ++kx) grow[ix0 + kx] += g * krow[kx];
            }
          }
        }
      }
    }
  }
  return gx;
}

template <typename T>
ConvGrads<T> conv2d_bwd(const TensorT<T>& grad_out, const TensorT<T>& x, const TensorT<T>& K,
                        int stride, int pad) {
  int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  int F = K.dim(0), k = K.dim(2);
  int Ho = grad_out.dim(2), Wo = grad_out.dim(3);
  if (grad_out.dim(0) != B || grad_out.dim(1) != F ||
      Ho != conv_out_dim(H, k, stride, pad) || Wo != conv_out_dim(W, k, stride, pad))
    throw dimension_error("conv2d_bwd: grad_out shape mismatch");
  ConvGrads<T> g{conv2d_bwd_input(grad_out, K, H, W, stride, pad), TensorT<T>({F, C, k, k}),
                 TensorT<T>({F})};
  for (int b = 0; b < B; ++b) {
    for (int f = 0; f < F; ++f) {
      T bacc = T(0);
      for (int oy = 0; oy < Ho; ++oy) {
        int iy0 = oy * stride - pad;
        for (int ox = 0; ox < Wo; ++ox) {
          int ix0 = ox * stride - pad;
          T gv = grad_out.at4(b, f, oy, ox);
          bacc += gv;
          if (gv == T(0)) continue;
          for (int c = 0; c < C; ++c) {
            const T* xc = &x.at4(b, c, 0, 0);
            T* kc = &g.K.at4(f, c, 0, 0);
            for (int ky = 0; ky < k; ++ky) {
              int iy = iy0 + ky;
              if (iy < 0 || iy >= H) continue;
              const T* xrow = xc + static_cast<std::size_t>(iy) * W;
              T* krow = kc + static_cast<std::size_t>(ky) * k;
              int kx_lo = std::max(0, -ix0);
              int kx_hi = std::min(k, W - ix0);
              for (int kx = kx_lo; kx < kx_hi; ++kx) krow[kx] += gv * xrow[ix0 + kx];
            }
          }
        }
      }
      g.b[static_cast<std::size_t>(f)] += bacc;
    }
  }
  return g;
}

// ------------------------------------------------------------------- relu

template <typename T>
TensorT<T> relu_fwd(const TensorT<T>& x) {
  TensorT<T> y(x.shape);
  for (std::size_t i = 0; i < x.numel(); ++i) y[i] = x[i] > T(0) ? x[i] : T(0);
  return y;
}

// Subgradient at 0 is 0: only strictly positive pre-activations pass gradient.
template <typename T>
TensorT<T> relu_bwd(const TensorT<T>& grad_out, const TensorT<T>& x_pre) {
  check_same_shape(grad_out, x_pre, "relu_bwd");
  TensorT<T> g(grad_out.shape);
  for (std::size_t i = 0; i < g.numel(); ++i) g[i] = x_pre[i] > T(0) ? grad_out[i] : T(0);
  return g;
}

// ---------------------------------------------------------- global avg pool

template <typename T>
TensorT<T> global_avg_pool_fwd(const TensorT<T>& x) {
  if (x.rank() != 4) throw dimension_error("global_avg_pool_fwd: expected [B,C,H,W]");
  int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  TensorT<T> y({B, C});
  T scale = T(1) / static_cast<T>(H * W);
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c) {
      const T* p = &x.at4(b, c, 0, 0);
      T acc = T(0);
      for (int i = 0; i < H * W; ++i) acc += p[i];
      y[static_cast<std::size_t>(b) * C + c] = acc * scale;
    }
  return y;
}

template <typename T>
TensorT<T> global_avg_pool_bwd(const TensorT<T>& grad_out, int H, int W) {
  if (grad_out.rank() != 2) throw dimension_error("global_avg_pool_bwd: expected [B,C]");
  int B = grad_out.dim(0), C = grad_out.dim(1);
  TensorT<T> g({B, C, H, W});
  T scale = T(1) / static_cast<T>(H * W);
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c) {
      T v = grad_out[static_cast<std::size_t>(b) * C + c] * scale;
      T* p = &g.at4(b, c, 0, 0);
      for (int i = 0; i < H * W; ++i) p[i] = v;
    }
  return g;
}

// --------------------------------------------------------- bilinear resize

// Corner-aligned sampling: output index i maps to input coordinate
// i*(in-1)/(out-1), so resizing to the same size is the exact identity.
template <typename T>
TensorT<T> bilinear_resize_fwd(const TensorT<T>& x, int Ho, int Wo) {
  if (x.rank() != 4) throw dimension_error("bilinear_resize_fwd: expected [B,C,H,W]");
  if (Ho < 1 || Wo < 1) throw dimension_error("bilinear_resize_fwd: target dims must be >= 1");
  int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  TensorT<T> y({B, C, Ho, Wo});
  double sy = Ho > 1 ? static_cast<double>(H - 1) / (Ho - 1) : 0.0;
  double sx = Wo > 1 ? static_cast<double>(W - 1) / (Wo - 1) : 0.0;
  for (int oy = 0; oy < Ho; ++oy) {
    double fy = oy * sy;
    int y0 = static_cast<int>(fy);
    if (y0 > H - 2) y0 = H >= 2 ? H - 2 : 0;
    T wy = static_cast<T>(fy - y0);
    int y1 = H >= 2 ? y0 + 1 : y0;
    for (int ox = 0; ox < Wo; ++ox) {
      double fx = ox * sx;
      int x0 = static_cast<int>(fx);
      if (x0 > W - 2) x0 = W >= 2 ? W - 2 : 0;
      T wx = static_cast<T>(fx - x0);
      int x1 = W >= 2 ? x0 + 1 : x0;
      for (int b = 0; b < B; ++b)
        for (int c = 0; c < C; ++c) {
          const T* p = &x.at4(b, c, 0, 0);
          T v00 = p[static_cast<std::size_t>(y0) * W + x0];
          T v01 = p[static_cast<std::size_t>(y0) * W + x1];
          T v10 = p[static_cast<std::size_t>(y1) * W + x0];
          T v11 = p[static_cast<std::size_t>(y1) * W + x1];
          T top = v00 + wx * (v01 - v00);
          T bot = v10 + wx * (v11 - v10);
          y.at4(b, c, oy, ox) = top + wy * (bot - top);
        }
    }
  }
  return y;
}

// Exact adjoint of the forward: scatters each output gradient back through
// the same four interpolation weights.
template <typename T>
TensorT<T> bilinear_resize_bwd(const TensorT<T>& grad_out, int H, int W) {
  if (grad_out.rank() != 4) throw dimension_error("bilinear_resize_bwd: expected [B,C,H',W']");
  int B = grad_out.dim(0), C = grad_out.dim(1), Ho = grad_out.dim(2), Wo = grad_out.dim(3);
  TensorT<T> g({B, C, H, W});
  double sy = Ho > 1 ? static_cast<double>(H - 1) / (Ho - 1) : 0.0;
  double sx = Wo > 1 ? static_cast<double>(W - 1) / (Wo - 1) : 0.0;
  for (int oy = 0; oy < Ho; ++oy) {
    double fy = oy * sy;
    int y0 = static_cast<int>(fy);
    if (y0 > H - 2) y0 = H >= 2 ? H - 2 : 0;
    T wy = static_cast<T>(fy - y0);
    int y1 = H >= 2 ? y0 + 1 : y0;
    for (int ox = 0; ox < Wo; ++ox) {
      double fx = ox * sx;
      int x0 = static_cast<int>(fx);
      if (x0 > W - 2) x0 = W >= 2 ? W - 2 : 0;
      T wx = static_cast<T>(fx - x0);
      int x1 = W >= 2 ? x0 + 1 : x0;
      for (int b = 0; b < B; ++b)
        for (int c = 0; c < C; ++c) {
          T gv = grad_out.at4(b, c, oy, ox);
          T* p = &g.at4(b, c, 0, 0);
          p[static_cast<std::size_t>(y0) * W + x0] += (T(1) - wy) * (T(1) - wx) * gv;
          p[static_cast<std::size_t>(y0) * W + x1] += (T(1) - wy) * wx * gv;
          p[static_cast<std::size_t>(y1) * W + x0] += wy * (T(1) - wx) * gv;
          p[static_cast<std::size_t>(y1) * W + x1] += wy * wx * gv;
        }
    }
  }
  return g;
}

// ------------------------------------------------------------ zero-pad/crop

template <typename T>
TensorT<T> pad_fwd(const TensorT<T>& x, int top, int left, int canvas) {
  if (x.rank() != 4) throw dimension_error("pad_fwd: expected [B,C,H,W]");
  int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (top < 0 || left < 0 || top + H > canvas || left + W > canvas)
    throw dimension_error("pad_fwd: placement does not fit the canvas");
  TensorT<T> y({B, C, canvas, canvas});
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c)
      for (int yy = 0; yy < H; ++yy) {
        const T* src = &x.at4(b, c, yy, 0);
        T* dst = &y.at4(b, c, top + yy, left);
        for (int xx = 0; xx < W; ++xx) dst[xx] = src[xx];
      }
  return y;
}

// Adjoint of pad: crop the placed window back out.
template <typename T>
TensorT<T> pad_bwd(const TensorT<T>& grad_out, int top, int left, int H, int W) {
  if (grad_out.rank() != 4) throw dimension_error("pad_bwd: expected [B,C,canvas,canvas]");
  int B = grad_out.dim(0), C = grad_out.dim(1), canvas = grad_out.dim(2);
  if (top < 0 || left < 0 || top + H > canvas || left + W > canvas)
    throw dimension_error("pad_bwd: window does not fit the canvas");
  TensorT<T> g({B, C, H, W});
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c)
      for (int yy = 0; yy < H; ++yy) {
        const T* src = &grad_out.at4(b, c, top + yy, left);
        T* dst = &g.at4(b, c, yy, 0);
        for (int xx = 0; xx < W; ++xx) dst[xx] = src[xx];
      }
  return g;
}

// --------------------------------------------------------- gradient smoothing

// Depthwise same-size convolution of a gradient field with a normalized
// kernel, symmetric reflection at the border (so a constant field convolved
// with a sum-1 kernel stays constant everywhere).
template <typename T>
TensorT<T> smooth_gradient(const TensorT<T>& g, const TensorT<T>& kernel) {
  if (g.rank() != 4) throw dimension_error("smooth_gradient: expected [B,C,H,W]");
  if (kernel.rank() != 2 || kernel.dim(0) != kernel.dim(1))
    throw parameter_error("smooth_gradient: kernel must be square");
  int k = kernel.dim(0);
  if (k % 2 == 0) throw parameter_error("smooth_gradient: kernel side must be odd");
  int B = g.dim(0), C = g.dim(1), H = g.dim(2), W = g.dim(3);
  int r = k / 2;
  auto reflect = [](int i, int n) {
    while (i < 0 || i >= n) {
      if (i < 0) i = -i - 1;
      if (i >= n) i = 2 * n - i - 1;
    }
    return i;
  };
  TensorT<T> out({B, C, H, W});
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c) {
      const T* src = &g.at4(b, c, 0, 0);
      T* dst = &out.at4(b, c, 0, 0);
      for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
          T acc = T(0);
          for (int ky = 0; ky < k; ++ky) {
            int iy = reflect(y + ky - r, H);
            const T* row = src + static_cast<std::size_t>(iy) * W;
            const T* krow = kernel.ptr() + static_cast<std::size_t>(ky) * k;
            for (int kx = 0; kx < k; ++kx) acc += row[reflect(x + kx - r, W)] * krow[kx];
          }
          dst[static_cast<std::size_t>(y) * W + x] = acc;
        }
    }
  return out;
}

// Normalized Gaussian kernel, the translation-invariance smoothing default.
template <typename T = float>
TensorT<T> gaussian_kernel(int k, double sigma) {
  if (k < 1 || k % 2 == 0) throw parameter_error("gaussian_kernel: side must be odd and positive");
  TensorT<T> kern({k, k});
  int r = k / 2;
  double sum = 0.0;
  for (int y = 0; y < k; ++y)
    for (int x = 0; x < k; ++x) {
      double dy = y - r, dx = x - r;
      double v = std::exp(-(dy * dy + dx * dx) / (2.0 * sigma * sigma));
      kern[static_cast<std::size_t>(y) * k + x] = static_cast<T>(v);
      sum += v;
    }
  for (std::size_t i = 0; i < kern.numel(); ++i)
    kern[i] = static_cast<T>(static_cast<double>(kern[i]) / sum);
  return kern;
}

}  // namespace tal
