#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "flowdistill/tensor.hpp"

namespace flowdistill {

namespace detail {

// C(M,N) += A(M,K) * B(K,N), row-major.
template <typename T>
void gemm_acc(const T* a, const T* b, T* c, int m, int k_dim, int n) {
  for (int i = 0; i < m; ++i) {
    const T* arow = a + static_cast<std::size_t>(i) * k_dim;
    T* crow = c + static_cast<std::size_t>(i) * n;
    for (int k = 0; k < k_dim; ++k) {
      const T av = arow[k];
      const T* brow = b + static_cast<std::size_t>(k) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C(M,N) += A(M,K) * B(N,K)^T.
template <typename T>
void gemm_abt_acc(const T* a, const T* b, T* c, int m, int k_dim, int n) {
  for (int i = 0; i < m; ++i) {
    const T* arow = a + static_cast<std::size_t>(i) * k_dim;
    for (int j = 0; j < n; ++j) {
      const T* brow = b + static_cast<std::size_t>(j) * k_dim;
      T acc = T(0);
      for (int k = 0; k < k_dim; ++k) acc += arow[k] * brow[k];
      c[static_cast<std::size_t>(i) * n + j] += acc;
    }
  }
}

// C(M,N) += A(K,M)^T * B(K,N).
template <typename T>
void gemm_atb_acc(const T* a, const T* b, T* c, int m, int k_dim, int n) {
  for (int k = 0; k < k_dim; ++k) {
    const T* arow = a + static_cast<std::size_t>(k) * m;
    const T* brow = b + static_cast<std::size_t>(k) * n;
    for (int i = 0; i < m; ++i) {
      const T av = arow[i];
      T* crow = c + static_cast<std::size_t>(i) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// One sample (C,H,W) -> columns (C*kh*kw, Hout*Wout).
template <typename T>
void im2col(const T* img, int ch, int h, int w, int kh, int kw, int stride,
            int pad, int hout, int wout, T* col) {
  const std::size_t plane = static_cast<std::size_t>(hout) * wout;
  for (int c = 0; c < ch; ++c) {
    for (int ky = 0; ky < kh; ++ky) {
      for (int kx = 0; kx < kw; ++kx) {
        T* dst = col + ((static_cast<std::size_t>(c) * kh + ky) * kw + kx) * plane;
        for (int oy = 0; oy < hout; ++oy) {
          const int iy = oy * stride + ky - pad;
          if (iy < 0 || iy >= h) {
            for (int ox = 0; ox < wout; ++ox) dst[oy * static_cast<std::size_t>(wout) + ox] = T(0);
            continue;
          }
          const T* src = img + (static_cast<std::size_t>(c) * h + iy) * w;
          for (int ox = 0; ox < wout; ++ox) {
            const int ix = ox * stride + kx - pad;
            dst[oy * static_cast<std::size_t>(wout) + ox] =
                (ix >= 0 && ix < w) ? src[ix] : T(0);
          }
        }
      }
    }
  }
}

// Scatter-add transpose of im2col.
template <typename T>
void col2im_acc(const T* col, int ch, int h, int w, int kh, int kw, int stride,
                int pad, int hout, int wout, T* img) {
  const std::size_t plane = static_cast<std::size_t>(hout) * wout;
  for (int c = 0; c < ch; ++c) {
    for (int ky = 0; ky < kh; ++ky) {
      for (int kx = 0; kx < kw; ++kx) {
        const T* src = col + ((static_cast<std::size_t>(c) * kh + ky) * kw + kx) * plane;
        for (int oy = 0; oy < hout; ++oy) {
          const int iy = oy * stride + ky - pad;
          if (iy < 0 || iy >= h) continue;
          T* dst = img + (static_cast<std::size_t>(c) * h + iy) * w;
          for (int ox = 0; ox < wout; ++ox) {
            const int ix = ox * stride + kx - pad;
            if (ix >= 0 && ix < w) dst[ix] += src[oy * static_cast<std::size_t>(wout) + ox];
          }
        }
      }
    }
  }
}

template <typename T>
void check_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  check(a.shape() == b.shape(), std::string(op) + ": shape mismatch " +
                                    shape_str(a.shape()) + " vs " +
                                    shape_str(b.shape()));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_shape(a, b, "add");
  std::vector<T> out(a.size());
  const auto av = a.data(), bv = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  return Tensor<T>::make_result(a.shape(), std::move(out), {a, b},
                                [a, b](Node<T>& o) mutable {
                                  if (a.requires_grad()) {
                                    auto g = a.grad();
                                    for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
                                  }
                                  if (b.requires_grad()) {
                                    auto g = b.grad();
                                    for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
                                  }
                                });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_shape(a, b, "sub");
  std::vector<T> out(a.size());
  const auto av = a.data(), bv = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
  return Tensor<T>::make_result(a.shape(), std::move(out), {a, b},
                                [a, b](Node<T>& o) mutable {
                                  if (a.requires_grad()) {
                                    auto g = a.grad();
                                    for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
                                  }
                                  if (b.requires_grad()) {
                                    auto g = b.grad();
                                    for (std::size_t i = 0; i < g.size(); ++i) g[i] -= o.grad[i];
                                  }
                                });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_shape(a, b, "mul");
  std::vector<T> out(a.size());
  const auto av = a.data(), bv = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  return Tensor<T>::make_result(a.shape(), std::move(out), {a, b},
                                [a, b](Node<T>& o) mutable {
                                  const auto av = a.data(), bv = b.data();
                                  if (a.requires_grad()) {
                                    auto g = a.grad();
                                    for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * bv[i];
                                  }
                                  if (b.requires_grad()) {
                                    auto g = b.grad();
                                    for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * av[i];
                                  }
                                });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  std::vector<T> out(a.size());
  const auto av = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * factor;
  return Tensor<T>::make_result(a.shape(), std::move(out), {a},
                                [a, factor](Node<T>& o) mutable {
                                  if (!a.requires_grad()) return;
                                  auto g = a.grad();
                                  for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * factor;
                                });
}

template <typename T>
Tensor<T> operator+(const Tensor<T>& a, const Tensor<T>& b) { return add(a, b); }
template <typename T>
Tensor<T> operator-(const Tensor<T>& a, const Tensor<T>& b) { return sub(a, b); }
template <typename T>
Tensor<T> operator*(const Tensor<T>& a, const Tensor<T>& b) { return mul(a, b); }
template <typename T>
Tensor<T> operator*(T factor, const Tensor<T>& a) { return scale(a, factor); }

// ---------------------------------------------------------------------------
// Activations and pointwise functions
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> leaky_relu(const Tensor<T>& x, T slope = T(0.1)) {
  std::vector<T> out(x.size());
  const auto xv = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] > T(0) ? xv[i] : slope * xv[i];
  return Tensor<T>::make_result(x.shape(), std::move(out), {x},
                                [x, slope](Node<T>& o) mutable {
                                  if (!x.requires_grad()) return;
                                  const auto xv = x.data();
                                  auto g = x.grad();
                                  for (std::size_t i = 0; i < g.size(); ++i)
                                    g[i] += o.grad[i] * (xv[i] > T(0) ? T(1) : slope);
                                });
}

template <typename T>
Tensor<T> tanh_op(const Tensor<T>& x) {
  std::vector<T> out(x.size());
  const auto xv = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(xv[i]);
  return Tensor<T>::make_result(x.shape(), std::move(out), {x},
                                [x](Node<T>& o) mutable {
                                  if (!x.requires_grad()) return;
                                  auto g = x.grad();
                                  for (std::size_t i = 0; i < g.size(); ++i)
                                    g[i] += o.grad[i] * (T(1) - o.data[i] * o.data[i]);
                                });
}

// Elementwise sqrt; subgradient 0 at the origin.
template <typename T>
Tensor<T> sqrt_op(const Tensor<T>& x) {
  std::vector<T> out(x.size());
  const auto xv = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::sqrt(xv[i]);
  return Tensor<T>::make_result(x.shape(), std::move(out), {x},
                                [x](Node<T>& o) mutable {
                                  if (!x.requires_grad()) return;
                                  auto g = x.grad();
                                  for (std::size_t i = 0; i < g.size(); ++i)
                                    if (o.data[i] > T(0)) g[i] += o.grad[i] * T(0.5) / o.data[i];
                                });
}

// Generalized charbonnier penalty (x^2 + eps^2)^alpha.
template <typename T>
Tensor<T> charbonnier(const Tensor<T>& x, T eps = T(1e-3), T alpha = T(0.45)) {
  std::vector<T> out(x.size());
  const auto xv = x.data();
  const T e2 = eps * eps;
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = std::pow(xv[i] * xv[i] + e2, alpha);
  return Tensor<T>::make_result(
      x.shape(), std::move(out), {x}, [x, e2, alpha](Node<T>& o) mutable {
        if (!x.requires_grad()) return;
        const auto xv = x.data();
        auto g = x.grad();
        for (std::size_t i = 0; i < g.size(); ++i) {
          const T base = xv[i] * xv[i] + e2;
          if (base > T(0))
            g[i] += o.grad[i] * alpha * std::pow(base, alpha - T(1)) * T(2) * xv[i];
        }
      });
}

// ---------------------------------------------------------------------------
// Shape ops
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> concat_channels(const std::vector<Tensor<T>>& parts) {
  check(!parts.empty(), "concat: no inputs");
  const Shape& s0 = parts[0].shape();
  check(s0.size() == 4, "concat: expects NCHW tensors, got " + shape_str(s0));
  int channels = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    check(s.size() == 4 && s[0] == s0[0] && s[2] == s0[2] && s[3] == s0[3],
          "concat: incompatible shapes " + shape_str(s0) + " vs " + shape_str(s));
    channels += s[1];
  }
  const int n = s0[0], h = s0[2], w = s0[3];
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  std::vector<T> out(static_cast<std::size_t>(n) * channels * plane);
  for (int ni = 0; ni < n; ++ni) {
    std::size_t coff = 0;
    for (const auto& p : parts) {
      const int pc = p.shape()[1];
      const T* src = p.data().data() + static_cast<std::size_t>(ni) * pc * plane;
      T* dst = out.data() + (static_cast<std::size_t>(ni) * channels + coff) * plane;
      std::copy(src, src + static_cast<std::size_t>(pc) * plane, dst);
      coff += pc;
    }
  }
  auto inputs = parts;
  return Tensor<T>::make_result(
      Shape{n, channels, h, w}, std::move(out), parts,
      [inputs, n, channels, plane](Node<T>& o) mutable {
        for (int ni = 0; ni < n; ++ni) {
          std::size_t coff = 0;
          for (auto& p : inputs) {
            const int pc = p.shape()[1];
            if (p.requires_grad()) {
              auto g = p.grad();
              const T* src = o.grad.data() + (static_cast<std::size_t>(ni) * channels + coff) * plane;
              T* dst = g.data() + static_cast<std::size_t>(ni) * pc * plane;
              for (std::size_t i = 0; i < pc * plane; ++i) dst[i] += src[i];
            }
            coff += pc;
          }
        }
      });
}

template <typename T>
Tensor<T> concat_channels(std::initializer_list<Tensor<T>> parts) {
  return concat_channels(std::vector<Tensor<T>>(parts));
}

template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  return concat_channels(std::vector<Tensor<T>>{a, b});
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T acc = T(0);
  for (T v : x.data()) acc += v;
  return Tensor<T>::make_result(Shape{1}, {acc}, {x}, [x](Node<T>& o) mutable {
    if (!x.requires_grad()) return;
    auto g = x.grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[0];
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  T acc = T(0);
  for (T v : x.data()) acc += v;
  const T inv = T(1) / static_cast<T>(x.size());
  return Tensor<T>::make_result(Shape{1}, {acc * inv}, {x},
                                [x, inv](Node<T>& o) mutable {
                                  if (!x.requires_grad()) return;
                                  auto g = x.grad();
                                  for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[0] * inv;
                                });
}

// Squared L2 norm, sum of squares.
template <typename T>
Tensor<T> sum_squares(const Tensor<T>& x) {
  T acc = T(0);
  for (T v : x.data()) acc += v * v;
  return Tensor<T>::make_result(Shape{1}, {acc}, {x}, [x](Node<T>& o) mutable {
    if (!x.requires_grad()) return;
    const auto xv = x.data();
    auto g = x.grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[0] * T(2) * xv[i];
  });
}

// Mean absolute difference; sign(0) taken as 0.
template <typename T>
Tensor<T> l1_loss(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_shape(a, b, "l1_loss");
  T acc = T(0);
  const auto av = a.data(), bv = b.data();
  for (std::size_t i = 0; i < a.size(); ++i) acc += std::abs(av[i] - bv[i]);
  const T inv = T(1) / static_cast<T>(a.size());
  return Tensor<T>::make_result(
      Shape{1}, {acc * inv}, {a, b}, [a, b, inv](Node<T>& o) mutable {
        const auto av = a.data(), bv = b.data();
        const T g0 = o.grad[0] * inv;
        if (a.requires_grad()) {
          auto g = a.grad();
          for (std::size_t i = 0; i < g.size(); ++i) {
            const T d = av[i] - bv[i];
            g[i] += g0 * (d > T(0) ? T(1) : d < T(0) ? T(-1) : T(0));
          }
        }
        if (b.requires_grad()) {
          auto g = b.grad();
          for (std::size_t i = 0; i < g.size(); ++i) {
            const T d = av[i] - bv[i];
            g[i] -= g0 * (d > T(0) ? T(1) : d < T(0) ? T(-1) : T(0));
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight,
                 const Tensor<T>& bias, int stride = 1, int padding = 0) {
  check(input.ndim() == 4, "conv2d: input must be NCHW, got " + shape_str(input.shape()));
  check(weight.ndim() == 4, "conv2d: weight must be (Cout,Cin,kh,kw), got " +
                                shape_str(weight.shape()));
  check(stride >= 1 && padding >= 0, "conv2d: bad stride/padding");
  const int n = input.dim(0), cin = input.dim(1), h = input.dim(2), w = input.dim(3);
  const int cout = weight.dim(0), kh = weight.dim(2), kw = weight.dim(3);
  check(weight.dim(1) == cin,
        "conv2d: input channels mismatch, input " + shape_str(input.shape()) +
            " vs weight " + shape_str(weight.shape()));
  check(bias.ndim() == 1 && bias.dim(0) == cout,
        "conv2d: bias " + shape_str(bias.shape()) + " does not match weight " +
            shape_str(weight.shape()));
  const int hout = (h + 2 * padding - kh) / stride + 1;
  const int wout = (w + 2 * padding - kw) / stride + 1;
  check(hout >= 1 && wout >= 1, "conv2d: kernel " + shape_str(weight.shape()) +
                                    " larger than padded input " + shape_str(input.shape()));

  const int kdim = cin * kh * kw;
  const std::size_t plane = static_cast<std::size_t>(hout) * wout;
  std::vector<T> out(static_cast<std::size_t>(n) * cout * plane);
  std::vector<T> col(static_cast<std::size_t>(kdim) * plane);
  const T* wp = weight.data().data();
  const T* bp = bias.data().data();
  for (int ni = 0; ni < n; ++ni) {
    const T* img = input.data().data() + static_cast<std::size_t>(ni) * cin * h * w;
    detail::im2col(img, cin, h, w, kh, kw, stride, padding, hout, wout, col.data());
    T* dst = out.data() + static_cast<std::size_t>(ni) * cout * plane;
    for (int co = 0; co < cout; ++co)
      std::fill(dst + co * plane, dst + (co + 1) * plane, bp[co]);
    detail::gemm_acc(wp, col.data(), dst, cout, kdim, static_cast<int>(plane));
  }

  return Tensor<T>::make_result(
      Shape{n, cout, hout, wout}, std::move(out), {input, weight, bias},
      [input, weight, bias, stride, padding, n, cin, h, w, cout, kh, kw, hout,
       wout, kdim, plane](Node<T>& o) mutable {
        std::vector<T> col(static_cast<std::size_t>(kdim) * plane);
        std::vector<T> dcol;
        for (int ni = 0; ni < n; ++ni) {
          const T* dy = o.grad.data() + static_cast<std::size_t>(ni) * cout * plane;
          if (bias.requires_grad()) {
            auto g = bias.grad();
            for (int co = 0; co < cout; ++co) {
              T acc = T(0);
              const T* row = dy + co * plane;
              for (std::size_t i = 0; i < plane; ++i) acc += row[i];
              g[co] += acc;
            }
          }
          if (weight.requires_grad()) {
            const T* img = input.data().data() + static_cast<std::size_t>(ni) * cin * h * w;
            detail::im2col(img, cin, h, w, kh, kw, stride, padding, hout, wout, col.data());
            detail::gemm_abt_acc(dy, col.data(), weight.grad().data(), cout,
                                 static_cast<int>(plane), kdim);
          }
          if (input.requires_grad()) {
            dcol.assign(static_cast<std::size_t>(kdim) * plane, T(0));
            detail::gemm_atb_acc(weight.data().data(), dy, dcol.data(), kdim,
                                 cout, static_cast<int>(plane));
            T* dx = input.grad().data() + static_cast<std::size_t>(ni) * cin * h * w;
            detail::col2im_acc(dcol.data(), cin, h, w, kh, kw, stride, padding,
                               hout, wout, dx);
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Flow sampling
// ---------------------------------------------------------------------------

// Bilinear sampling of `source` at locations given by the identity grid plus
// per-pixel offsets in normalized [-1,1] coordinates (output pixel (y,x) reads
// source near (x + fx*(W-1)/2, y + fy*(H-1)/2) when source and flow share a
// grid). Out-of-range locations clamp to the border.
template <typename T>
Tensor<T> grid_sample(const Tensor<T>& source, const Tensor<T>& flow) {
  check(source.ndim() == 4, "grid_sample: source must be NCHW, got " + shape_str(source.shape()));
  check(flow.ndim() == 4 && flow.dim(1) == 2,
        "grid_sample: flow must have 2 channels, got " + shape_str(flow.shape()));
  check(flow.dim(0) == source.dim(0),
        "grid_sample: batch mismatch " + shape_str(source.shape()) + " vs " +
            shape_str(flow.shape()));
  const int n = source.dim(0), c = source.dim(1), hs = source.dim(2), ws = source.dim(3);
  const int ho = flow.dim(2), wo = flow.dim(3);
  const std::size_t splane = static_cast<std::size_t>(hs) * ws;
  const std::size_t oplane = static_cast<std::size_t>(ho) * wo;
  std::vector<T> out(static_cast<std::size_t>(n) * c * oplane);

  // Index math is arranged so identity-grid terms stay exact in floating
  // point: ix = ox*(Ws-1)/(Wo-1) + fx*(Ws-1)/2, which is literally ox when the
  // grids match and the offset is zero.
  const T sx = wo > 1 ? T(ws - 1) / T(wo - 1) : T(0);
  const T sy = ho > 1 ? T(hs - 1) / T(ho - 1) : T(0);
  const T hx = T(0.5) * T(ws - 1);
  const T hy = T(0.5) * T(hs - 1);
  const T* fp = flow.data().data();
  const T* sp = source.data().data();
  for (int ni = 0; ni < n; ++ni) {
    const T* fx = fp + static_cast<std::size_t>(ni) * 2 * oplane;
    const T* fy = fx + oplane;
    for (int oy = 0; oy < ho; ++oy) {
      for (int ox = 0; ox < wo; ++ox) {
        const std::size_t oi = static_cast<std::size_t>(oy) * wo + ox;
        const T ix = T(ox) * sx + fx[oi] * hx;
        const T iy = T(oy) * sy + fy[oi] * hy;
        const T cx = std::min(std::max(ix, T(0)), T(ws - 1));
        const T cy = std::min(std::max(iy, T(0)), T(hs - 1));
        const int x0 = static_cast<int>(std::floor(cx));
        const int y0 = static_cast<int>(std::floor(cy));
        const int x1 = std::min(x0 + 1, ws - 1);
        const int y1 = std::min(y0 + 1, hs - 1);
        const T tx = cx - T(x0);
        const T ty = cy - T(y0);
        for (int ci = 0; ci < c; ++ci) {
          const T* plane = sp + (static_cast<std::size_t>(ni) * c + ci) * splane;
          const T v00 = plane[static_cast<std::size_t>(y0) * ws + x0];
          T v;
          if (tx == T(0) && ty == T(0)) {
            v = v00;  // keeps the zero-flow warp bit-exact
          } else {
            const T v01 = plane[static_cast<std::size_t>(y0) * ws + x1];
            const T v10 = plane[static_cast<std::size_t>(y1) * ws + x0];
            const T v11 = plane[static_cast<std::size_t>(y1) * ws + x1];
            v = (T(1) - ty) * ((T(1) - tx) * v00 + tx * v01) +
                ty * ((T(1) - tx) * v10 + tx * v11);
          }
          out[(static_cast<std::size_t>(ni) * c + ci) * oplane + oi] = v;
        }
      }
    }
  }

  return Tensor<T>::make_result(
      Shape{n, c, ho, wo}, std::move(out), {source, flow},
      [source, flow, n, c, hs, ws, ho, wo, splane, oplane, sx, sy, hx,
       hy](Node<T>& o) mutable {
        const T* fp = flow.data().data();
        const T* sp = source.data().data();
        T* dsrc = source.requires_grad() ? source.grad().data() : nullptr;
        T* dflow = flow.requires_grad() ? flow.grad().data() : nullptr;
        for (int ni = 0; ni < n; ++ni) {
          const T* fx = fp + static_cast<std::size_t>(ni) * 2 * oplane;
          const T* fy = fx + oplane;
          for (int oy = 0; oy < ho; ++oy) {
            for (int ox = 0; ox < wo; ++ox) {
              const std::size_t oi = static_cast<std::size_t>(oy) * wo + ox;
              const T ix = T(ox) * sx + fx[oi] * hx;
              const T iy = T(oy) * sy + fy[oi] * hy;
              const bool inx = ix > T(0) && ix < T(ws - 1);
              const bool iny = iy > T(0) && iy < T(hs - 1);
              const T cx = std::min(std::max(ix, T(0)), T(ws - 1));
              const T cy = std::min(std::max(iy, T(0)), T(hs - 1));
              const int x0 = static_cast<int>(std::floor(cx));
              const int y0 = static_cast<int>(std::floor(cy));
              const int x1 = std::min(x0 + 1, ws - 1);
              const int y1 = std::min(y0 + 1, hs - 1);
              const T tx = cx - T(x0);
              const T ty = cy - T(y0);
              T acc_dx = T(0), acc_dy = T(0);
              for (int ci = 0; ci < c; ++ci) {
                const std::size_t base = (static_cast<std::size_t>(ni) * c + ci) * splane;
                const T g = o.grad[(static_cast<std::size_t>(ni) * c + ci) * oplane + oi];
                if (g == T(0)) continue;
                const T v00 = sp[base + static_cast<std::size_t>(y0) * ws + x0];
                const T v01 = sp[base + static_cast<std::size_t>(y0) * ws + x1];
                const T v10 = sp[base + static_cast<std::size_t>(y1) * ws + x0];
                const T v11 = sp[base + static_cast<std::size_t>(y1) * ws + x1];
                if (dsrc) {
                  dsrc[base + static_cast<std::size_t>(y0) * ws + x0] += g * (T(1) - ty) * (T(1) - tx);
                  dsrc[base + static_cast<std::size_t>(y0) * ws + x1] += g * (T(1) - ty) * tx;
                  dsrc[base + static_cast<std::size_t>(y1) * ws + x0] += g * ty * (T(1) - tx);
                  dsrc[base + static_cast<std::size_t>(y1) * ws + x1] += g * ty * tx;
                }
                if (dflow) {
                  acc_dx += g * ((T(1) - ty) * (v01 - v00) + ty * (v11 - v10));
                  acc_dy += g * ((T(1) - tx) * (v10 - v00) + tx * (v11 - v01));
                }
              }
              if (dflow) {
                const std::size_t fbase = static_cast<std::size_t>(ni) * 2 * oplane;
                if (inx) dflow[fbase + oi] += acc_dx * T(0.5) * T(ws - 1);
                if (iny) dflow[fbase + oplane + oi] += acc_dy * T(0.5) * T(hs - 1);
              }
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Correlation cost volume
// ---------------------------------------------------------------------------

// Channel layout: displacement (dy,dx) with dy,dx in [-d,d] maps to channel
// (dy+d)*(2d+1)+(dx+d). Dot products are divided by the channel count so the
// output scale does not grow with feature width; b is zero-padded outside.
template <typename T>
Tensor<T> correlation(const Tensor<T>& a, const Tensor<T>& b, int radius) {
  detail::check_same_shape(a, b, "correlation");
  check(a.ndim() == 4, "correlation: expects NCHW, got " + shape_str(a.shape()));
  check(radius >= 0, "correlation: radius must be >= 0");
  const int n = a.dim(0), c = a.dim(1), h = a.dim(2), w = a.dim(3);
  const int win = 2 * radius + 1;
  const int cout = win * win;
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  const T inv_c = T(1) / static_cast<T>(c);
  std::vector<T> out(static_cast<std::size_t>(n) * cout * plane, T(0));
  const T* ap = a.data().data();
  const T* bp = b.data().data();
  for (int ni = 0; ni < n; ++ni) {
    for (int dy = -radius; dy <= radius; ++dy) {
      for (int dx = -radius; dx <= radius; ++dx) {
        const int oc = (dy + radius) * win + (dx + radius);
        T* dst = out.data() + (static_cast<std::size_t>(ni) * cout + oc) * plane;
        const int y0 = std::max(0, -dy), y1 = h - std::max(0, dy);
        const int x0 = std::max(0, -dx), x1 = w - std::max(0, dx);
        for (int ci = 0; ci < c; ++ci) {
          const T* ach = ap + (static_cast<std::size_t>(ni) * c + ci) * plane;
          const T* bch = bp + (static_cast<std::size_t>(ni) * c + ci) * plane;
          for (int y = y0; y < y1; ++y) {
            const T* arow = ach + static_cast<std::size_t>(y) * w;
            const T* brow = bch + static_cast<std::size_t>(y + dy) * w + dx;
            T* drow = dst + static_cast<std::size_t>(y) * w;
            for (int x = x0; x < x1; ++x) drow[x] += arow[x] * brow[x];
          }
        }
        for (std::size_t i = 0; i < plane; ++i) dst[i] *= inv_c;
      }
    }
  }

  return Tensor<T>::make_result(
      Shape{n, cout, h, w}, std::move(out), {a, b},
      [a, b, radius, n, c, h, w, win, cout, plane, inv_c](Node<T>& o) mutable {
        const T* ap = a.data().data();
        const T* bp = b.data().data();
        T* da = a.requires_grad() ? a.grad().data() : nullptr;
        T* db = b.requires_grad() ? b.grad().data() : nullptr;
        if (!da && !db) return;
        for (int ni = 0; ni < n; ++ni) {
          for (int dy = -radius; dy <= radius; ++dy) {
            for (int dx = -radius; dx <= radius; ++dx) {
              const int oc = (dy + radius) * win + (dx + radius);
              const T* go = o.grad.data() + (static_cast<std::size_t>(ni) * cout + oc) * plane;
              const int y0 = std::max(0, -dy), y1 = h - std::max(0, dy);
              const int x0 = std::max(0, -dx), x1 = w - std::max(0, dx);
              for (int ci = 0; ci < c; ++ci) {
                const std::size_t chb = (static_cast<std::size_t>(ni) * c + ci) * plane;
                for (int y = y0; y < y1; ++y) {
                  const T* grow = go + static_cast<std::size_t>(y) * w;
                  const std::size_t arow = chb + static_cast<std::size_t>(y) * w;
                  const std::size_t brow = chb + static_cast<std::size_t>(y + dy) * w + dx;
                  for (int x = x0; x < x1; ++x) {
                    const T g = grow[x] * inv_c;
                    if (da) da[arow + x] += g * bp[brow + x];
                    if (db) db[brow + x] += g * ap[arow + x];
                  }
                }
              }
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Resampling
// ---------------------------------------------------------------------------

enum class Upsample { kNearest, kBilinear };

template <typename T>
Tensor<T> upsample2x(const Tensor<T>& x, Upsample mode = Upsample::kBilinear) {
  check(x.ndim() == 4, "upsample2x: expects NCHW, got " + shape_str(x.shape()));
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const int ho = h * 2, wo = w * 2;
  const std::size_t iplane = static_cast<std::size_t>(h) * w;
  const std::size_t oplane = static_cast<std::size_t>(ho) * wo;
  std::vector<T> out(static_cast<std::size_t>(n) * c * oplane);

  // Half-pixel source mapping: src = (dst + 0.5)/2 - 0.5, indices clamped.
  auto taps = [](int o, int extent, int& i0, int& i1, T& t) {
    const T s = T(o) * T(0.5) - T(0.25);
    const T fl = std::floor(s);
    i0 = std::max(0, static_cast<int>(fl));
    i1 = std::min(static_cast<int>(fl) + 1, extent - 1);
    t = s - fl;
  };

  const T* xp = x.data().data();
  for (std::size_t pch = 0; pch < static_cast<std::size_t>(n) * c; ++pch) {
    const T* src = xp + pch * iplane;
    T* dst = out.data() + pch * oplane;
    if (mode == Upsample::kNearest) {
      for (int oy = 0; oy < ho; ++oy) {
        const T* srow = src + static_cast<std::size_t>(oy / 2) * w;
        T* drow = dst + static_cast<std::size_t>(oy) * wo;
        for (int ox = 0; ox < wo; ++ox) drow[ox] = srow[ox / 2];
      }
    } else {
      for (int oy = 0; oy < ho; ++oy) {
        int y0, y1;
        T ty;
        taps(oy, h, y0, y1, ty);
        const T* r0 = src + static_cast<std::size_t>(y0) * w;
        const T* r1 = src + static_cast<std::size_t>(y1) * w;
        T* drow = dst + static_cast<std::size_t>(oy) * wo;
        for (int ox = 0; ox < wo; ++ox) {
          int x0, x1;
          T tx;
          taps(ox, w, x0, x1, tx);
          drow[ox] = (T(1) - ty) * ((T(1) - tx) * r0[x0] + tx * r0[x1]) +
                     ty * ((T(1) - tx) * r1[x0] + tx * r1[x1]);
        }
      }
    }
  }

  return Tensor<T>::make_result(
      Shape{n, c, ho, wo}, std::move(out), {x},
      [x, mode, n, c, h, w, ho, wo, iplane, oplane, taps](Node<T>& o) mutable {
        if (!x.requires_grad()) return;
        T* dx = x.grad().data();
        for (std::size_t pch = 0; pch < static_cast<std::size_t>(n) * c; ++pch) {
          const T* go = o.grad.data() + pch * oplane;
          T* dst = dx + pch * iplane;
          if (mode == Upsample::kNearest) {
            for (int oy = 0; oy < ho; ++oy)
              for (int ox = 0; ox < wo; ++ox)
                dst[static_cast<std::size_t>(oy / 2) * w + ox / 2] +=
                    go[static_cast<std::size_t>(oy) * wo + ox];
          } else {
            for (int oy = 0; oy < ho; ++oy) {
              int y0, y1;
              T ty;
              taps(oy, h, y0, y1, ty);
              for (int ox = 0; ox < wo; ++ox) {
                int x0, x1;
                T tx;
                taps(ox, w, x0, x1, tx);
                const T g = go[static_cast<std::size_t>(oy) * wo + ox];
                dst[static_cast<std::size_t>(y0) * w + x0] += g * (T(1) - ty) * (T(1) - tx);
                dst[static_cast<std::size_t>(y0) * w + x1] += g * (T(1) - ty) * tx;
                dst[static_cast<std::size_t>(y1) * w + x0] += g * ty * (T(1) - tx);
                dst[static_cast<std::size_t>(y1) * w + x1] += g * ty * tx;
              }
            }
          }
        }
      });
}

template <typename T>
Tensor<T> avg_pool(const Tensor<T>& x, int k) {
  check(x.ndim() == 4, "avg_pool: expects NCHW, got " + shape_str(x.shape()));
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  check(k >= 1 && h % k == 0 && w % k == 0,
        "avg_pool: spatial dims of " + shape_str(x.shape()) +
            " not divisible by window " + std::to_string(k));
  const int ho = h / k, wo = w / k;
  const std::size_t iplane = static_cast<std::size_t>(h) * w;
  const std::size_t oplane = static_cast<std::size_t>(ho) * wo;
  const T inv = T(1) / static_cast<T>(k * k);
  std::vector<T> out(static_cast<std::size_t>(n) * c * oplane);
  const T* xp = x.data().data();
  for (std::size_t pch = 0; pch < static_cast<std::size_t>(n) * c; ++pch) {
    const T* src = xp + pch * iplane;
    T* dst = out.data() + pch * oplane;
    for (int oy = 0; oy < ho; ++oy)
      for (int ox = 0; ox < wo; ++ox) {
        T acc = T(0);
        for (int ky = 0; ky < k; ++ky)
          for (int kx = 0; kx < k; ++kx)
            acc += src[static_cast<std::size_t>(oy * k + ky) * w + ox * k + kx];
        dst[static_cast<std::size_t>(oy) * wo + ox] = acc * inv;
      }
  }
  return Tensor<T>::make_result(
      Shape{n, c, ho, wo}, std::move(out), {x},
      [x, k, n, c, w, wo, ho, iplane, oplane, inv](Node<T>& o) mutable {
        if (!x.requires_grad()) return;
        T* dx = x.grad().data();
        for (std::size_t pch = 0; pch < static_cast<std::size_t>(n) * c; ++pch) {
          const T* go = o.grad.data() + pch * oplane;
          T* dst = dx + pch * iplane;
          for (int oy = 0; oy < ho; ++oy)
            for (int ox = 0; ox < wo; ++ox) {
              const T g = go[static_cast<std::size_t>(oy) * wo + ox] * inv;
              for (int ky = 0; ky < k; ++ky)
                for (int kx = 0; kx < k; ++kx)
                  dst[static_cast<std::size_t>(oy * k + ky) * w + ox * k + kx] += g;
            }
        }
      });
}

// Nearest-neighbor decimation keeping the top-left sample of each block; used
// for building image pyramids of fixed targets.
template <typename T>
Tensor<T> downsample_nearest(const Tensor<T>& x, int factor) {
  check(x.ndim() == 4, "downsample_nearest: expects NCHW, got " + shape_str(x.shape()));
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  check(factor >= 1 && h % factor == 0 && w % factor == 0,
        "downsample_nearest: spatial dims of " + shape_str(x.shape()) +
            " not divisible by " + std::to_string(factor));
  const int ho = h / factor, wo = w / factor;
  const std::size_t iplane = static_cast<std::size_t>(h) * w;
  const std::size_t oplane = static_cast<std::size_t>(ho) * wo;
  std::vector<T> out(static_cast<std::size_t>(n) * c * oplane);
  const T* xp = x.data().data();
  for (std::size_t pch = 0; pch < static_cast<std::size_t>(n) * c; ++pch)
    for (int oy = 0; oy < ho; ++oy)
      for (int ox = 0; ox < wo; ++ox)
        out[pch * oplane + static_cast<std::size_t>(oy) * wo + ox] =
            xp[pch * iplane + static_cast<std::size_t>(oy * factor) * w + ox * factor];
  return Tensor<T>::make_result(
      Shape{n, c, ho, wo}, std::move(out), {x},
      [x, factor, n, c, w, ho, wo, iplane, oplane](Node<T>& o) mutable {
        if (!x.requires_grad()) return;
        T* dx = x.grad().data();
        for (std::size_t pch = 0; pch < static_cast<std::size_t>(n) * c; ++pch)
          for (int oy = 0; oy < ho; ++oy)
            for (int ox = 0; ox < wo; ++ox)
              dx[pch * iplane + static_cast<std::size_t>(oy * factor) * w + ox * factor] +=
                  o.grad[pch * oplane + static_cast<std::size_t>(oy) * wo + ox];
      });
}

// Normalizes each (sample, channel) plane to zero mean and unit variance.
// Parameter-free; keeps pre-activations bounded so the squashing head never
// runs into the flat tails of tanh where float gradients underflow to zero.
template <typename T>
Tensor<T> instance_norm(const Tensor<T>& x, T eps = T(1e-5)) {
  check(x.ndim() == 4, "instance_norm: expects NCHW, got " + shape_str(x.shape()));
  check(eps > T(0), "instance_norm: eps must be positive");
  const int n = x.dim(0), c = x.dim(1);
  const std::size_t plane = static_cast<std::size_t>(x.dim(2)) * x.dim(3);
  const std::size_t slices = static_cast<std::size_t>(n) * c;
  std::vector<T> out(x.size());
  std::vector<T> inv_sd(slices);
  const T* xp = x.data().data();
  const T inv_m = T(1) / static_cast<T>(plane);
  for (std::size_t s = 0; s < slices; ++s) {
    const T* xs = xp + s * plane;
    T mu = T(0);
    for (std::size_t i = 0; i < plane; ++i) mu += xs[i];
    mu *= inv_m;
    T var = T(0);
    for (std::size_t i = 0; i < plane; ++i) {
      const T d = xs[i] - mu;
      var += d * d;
    }
    var *= inv_m;
    const T isd = T(1) / std::sqrt(var + eps);
    inv_sd[s] = isd;
    T* os = out.data() + s * plane;
    for (std::size_t i = 0; i < plane; ++i) os[i] = (xs[i] - mu) * isd;
  }
  return Tensor<T>::make_result(
      x.shape(), std::move(out), {x},
      [x, inv_sd, plane, slices, inv_m](Node<T>& o) mutable {
        if (!x.requires_grad()) return;
        T* dx = x.grad().data();
        for (std::size_t s = 0; s < slices; ++s) {
          const T* ys = o.data.data() + s * plane;
          const T* gs = o.grad.data() + s * plane;
          T gmean = T(0), gymean = T(0);
          for (std::size_t i = 0; i < plane; ++i) {
            gmean += gs[i];
            gymean += gs[i] * ys[i];
          }
          gmean *= inv_m;
          gymean *= inv_m;
          T* ds = dx + s * plane;
          for (std::size_t i = 0; i < plane; ++i)
            ds[i] += inv_sd[s] * (gs[i] - gmean - ys[i] * gymean);
        }
      });
}

// Concatenates NCHW tensors along the batch dimension.
template <typename T>
Tensor<T> stack_batch(const std::vector<Tensor<T>>& parts) {
  check(!parts.empty(), "stack_batch: no tensors given");
  const auto& first = parts.front();
  check(first.ndim() == 4, "stack_batch: expects NCHW, got " + shape_str(first.shape()));
  int n = 0;
  for (const auto& p : parts) {
    check(p.ndim() == 4 && p.dim(1) == first.dim(1) && p.dim(2) == first.dim(2) &&
              p.dim(3) == first.dim(3),
          "stack_batch: incompatible shapes " + shape_str(first.shape()) + " vs " +
              shape_str(p.shape()));
    n += p.dim(0);
  }
  const std::size_t per = first.size() / first.dim(0);
  std::vector<T> out;
  out.reserve(static_cast<std::size_t>(n) * per);
  for (const auto& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
  return Tensor<T>::make_result(
      Shape{n, first.dim(1), first.dim(2), first.dim(3)}, std::move(out), parts,
      [parts, per](Node<T>& o) mutable {
        std::size_t off = 0;
        for (auto& p : parts) {
          const std::size_t len = static_cast<std::size_t>(p.dim(0)) * per;
          if (p.requires_grad()) {
            T* g = p.grad().data();
            for (std::size_t i = 0; i < len; ++i) g[i] += o.grad[off + i];
          }
          off += len;
        }
      });
}

}  // namespace flowdistill
