#include "dinoyolo/ops.h"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "gemm.h"

namespace dinoyolo::ops {

namespace {

template <typename T>
Tensor<T>* grad_of(Node<T>& self, size_t parent) {
  Node<T>& p = *self.parents[parent];
  return p.requires_grad ? &p.grad_buffer() : nullptr;
}

void require_rank(const Shape& s, size_t rank, const char* what) {
  if (s.size() != rank) {
    throw ShapeError(std::string(what) + " expects rank " + std::to_string(rank) + ", got " + shape_str(s));
  }
}

int normalize_axis(int axis, int rank) {
  const int a = axis < 0 ? axis + rank : axis;
  if (a < 0 || a >= rank) throw ShapeError("axis " + std::to_string(axis) + " out of range");
  return a;
}

struct ConvGeometry {
  int64_t n, c, h, w, o, kh, kw, ho, wo;
  int stride, pad;
};

template <typename T>
void im2col(const T* x, const ConvGeometry& g, T* col) {
  const int64_t plane = g.ho * g.wo;
  const int64_t cols = g.n * plane;
  for (int64_t c = 0; c < g.c; ++c) {
    for (int64_t ki = 0; ki < g.kh; ++ki) {
      for (int64_t kj = 0; kj < g.kw; ++kj) {
        T* row = col + ((c * g.kh + ki) * g.kw + kj) * cols;
        for (int64_t n = 0; n < g.n; ++n) {
          const T* src = x + (n * g.c + c) * g.h * g.w;
          T* dst = row + n * plane;
          for (int64_t oy = 0; oy < g.ho; ++oy) {
            const int64_t iy = oy * g.stride - g.pad + ki;
            T* drow = dst + oy * g.wo;
            if (iy < 0 || iy >= g.h) {
              std::fill(drow, drow + g.wo, T(0));
              continue;
            }
            const T* srow = src + iy * g.w;
            for (int64_t ox = 0; ox < g.wo; ++ox) {
              const int64_t ix = ox * g.stride - g.pad + kj;
              drow[ox] = (ix >= 0 && ix < g.w) ? srow[ix] : T(0);
            }
          }
        }
      }
    }
  }
}

template <typename T>
void col2im(const T* col, const ConvGeometry& g, T* dx) {
  const int64_t plane = g.ho * g.wo;
  const int64_t cols = g.n * plane;
  for (int64_t c = 0; c < g.c; ++c) {
    for (int64_t ki = 0; ki < g.kh; ++ki) {
      for (int64_t kj = 0; kj < g.kw; ++kj) {
        const T* row = col + ((c * g.kh + ki) * g.kw + kj) * cols;
        for (int64_t n = 0; n < g.n; ++n) {
          T* dst = dx + (n * g.c + c) * g.h * g.w;
          const T* src = row + n * plane;
          for (int64_t oy = 0; oy < g.ho; ++oy) {
            const int64_t iy = oy * g.stride - g.pad + ki;
            if (iy < 0 || iy >= g.h) continue;
            T* drow = dst + iy * g.w;
            const T* srow = src + oy * g.wo;
            for (int64_t ox = 0; ox < g.wo; ++ox) {
              const int64_t ix = ox * g.stride - g.pad + kj;
              if (ix >= 0 && ix < g.w) drow[ix] += srow[ox];
            }
          }
        }
      }
    }
  }
}

}  // namespace

template <typename T>
Var<T> conv2d(const Var<T>& input, const Var<T>& kernel, const std::type_identity_t<std::optional<Var<T>>>& bias, int stride,
              int padding) {
  const Shape& xs = input.shape();
  const Shape& ks = kernel.shape();
  require_rank(xs, 4, "conv2d input");
  require_rank(ks, 4, "conv2d kernel");
  if (stride < 1) throw ConfigError("conv2d stride must be positive");
  if (padding < 0) throw ConfigError("conv2d padding must be nonnegative");
  if (ks[1] != xs[1]) {
    throw ShapeError("conv2d kernel expects " + std::to_string(ks[1]) + " input channels, input has " +
                     std::to_string(xs[1]));
  }
  if (bias && bias->shape() != Shape{ks[0]}) {
    throw ShapeError("conv2d bias shape " + shape_str(bias->shape()) + " does not match " +
                     std::to_string(ks[0]) + " output channels");
  }
  ConvGeometry g{xs[0], xs[1], xs[2], xs[3], ks[0], ks[2], ks[3], 0, 0, stride, padding};
  const int64_t span_h = g.h + 2 * padding - g.kh;
  const int64_t span_w = g.w + 2 * padding - g.kw;
  if (span_h < 0 || span_w < 0 || span_h % stride != 0 || span_w % stride != 0) {
    throw ConfigError("conv2d output extent is not a positive integer for input " + shape_str(xs) + ", kernel " +
                      shape_str(ks) + ", stride " + std::to_string(stride) + ", padding " +
                      std::to_string(padding));
  }
  g.ho = span_h / stride + 1;
  g.wo = span_w / stride + 1;

  const int64_t plane = g.ho * g.wo;
  const int64_t cols = g.n * plane;
  const int64_t ckk = g.c * g.kh * g.kw;

  auto col = std::make_shared<std::vector<T>>(static_cast<size_t>(ckk * cols));
  im2col(input.value().ptr(), g, col->data());
  std::vector<T> tmp(static_cast<size_t>(g.o * cols));
  detail::gemm(false, false, static_cast<int>(g.o), static_cast<int>(cols), static_cast<int>(ckk), T(1),
               kernel.value().ptr(), static_cast<int>(ckk), col->data(), static_cast<int>(cols), T(0), tmp.data(),
               static_cast<int>(cols));

  Tensor<T> out({g.n, g.o, g.ho, g.wo});
  for (int64_t n = 0; n < g.n; ++n) {
    for (int64_t o = 0; o < g.o; ++o) {
      const T b = bias ? bias->value()[o] : T(0);
      const T* src = tmp.data() + o * cols + n * plane;
      T* dst = out.ptr() + (n * g.o + o) * plane;
      for (int64_t p = 0; p < plane; ++p) dst[p] = src[p] + b;
    }
  }

  std::vector<Var<T>> inputs{input, kernel};
  if (bias) inputs.push_back(*bias);
  const bool has_bias = bias.has_value();
  return Var<T>::make_result(std::move(out), std::move(inputs), [g, col, has_bias](Node<T>& self) {
    const int64_t plane = g.ho * g.wo;
    const int64_t cols = g.n * plane;
    const int64_t ckk = g.c * g.kh * g.kw;
    const Tensor<T>& gy = *self.grad;
    std::vector<T> gt(static_cast<size_t>(g.o * cols));
    for (int64_t n = 0; n < g.n; ++n) {
      for (int64_t o = 0; o < g.o; ++o) {
        std::copy_n(gy.ptr() + (n * g.o + o) * plane, plane, gt.data() + o * cols + n * plane);
      }
    }
    if (Tensor<T>* gk = grad_of(self, 1)) {
      detail::gemm(false, true, static_cast<int>(g.o), static_cast<int>(ckk), static_cast<int>(cols), T(1),
                   gt.data(), static_cast<int>(cols), col->data(), static_cast<int>(cols), T(1), gk->ptr(),
                   static_cast<int>(ckk));
    }
    if (has_bias) {
      if (Tensor<T>* gb = grad_of(self, 2)) {
        for (int64_t o = 0; o < g.o; ++o) {
          T s = 0;
          for (int64_t i = 0; i < cols; ++i) s += gt[static_cast<size_t>(o * cols + i)];
          (*gb)[o] += s;
        }
      }
    }
    if (Tensor<T>* gx = grad_of(self, 0)) {
      const Tensor<T>& k = self.parents[1]->value;
      std::vector<T> dcol(static_cast<size_t>(ckk * cols));
      detail::gemm(true, false, static_cast<int>(ckk), static_cast<int>(cols), static_cast<int>(g.o), T(1), k.ptr(),
                   static_cast<int>(ckk), gt.data(), static_cast<int>(cols), T(0), dcol.data(),
                   static_cast<int>(cols));
      col2im(dcol.data(), g, gx->ptr());
    }
  });
}

template <typename T>
Var<T> linear(const Var<T>& input, const Var<T>& weight, const std::type_identity_t<std::optional<Var<T>>>& bias) {
  const Shape& xs = input.shape();
  require_rank(weight.shape(), 2, "linear weight");
  if (xs.empty()) throw ShapeError("linear input must have at least one axis");
  const int64_t din = weight.shape()[1];
  const int64_t dout = weight.shape()[0];
  if (xs.back() != din) {
    throw ShapeError("linear expects trailing extent " + std::to_string(din) + ", input shape " + shape_str(xs));
  }
  if (bias && bias->shape() != Shape{dout}) {
    throw ShapeError("linear bias shape " + shape_str(bias->shape()) + " does not match output width " +
                     std::to_string(dout));
  }
  const int64_t m = input.value().numel() / din;
  Shape os = xs;
  os.back() = dout;
  Tensor<T> out(os);
  if (bias) {
    for (int64_t r = 0; r < m; ++r) std::copy_n(bias->value().ptr(), dout, out.ptr() + r * dout);
  }
  detail::gemm(false, true, static_cast<int>(m), static_cast<int>(dout), static_cast<int>(din), T(1),
               input.value().ptr(), static_cast<int>(din), weight.value().ptr(), static_cast<int>(din),
               bias ? T(1) : T(0), out.ptr(), static_cast<int>(dout));

  std::vector<Var<T>> inputs{input, weight};
  if (bias) inputs.push_back(*bias);
  const bool has_bias = bias.has_value();
  return Var<T>::make_result(std::move(out), std::move(inputs), [m, din, dout, has_bias](Node<T>& self) {
    const Tensor<T>& gy = *self.grad;
    const Tensor<T>& x = self.parents[0]->value;
    const Tensor<T>& w = self.parents[1]->value;
    if (Tensor<T>* gx = grad_of(self, 0)) {
      detail::gemm(false, false, static_cast<int>(m), static_cast<int>(din), static_cast<int>(dout), T(1), gy.ptr(),
                   static_cast<int>(dout), w.ptr(), static_cast<int>(din), T(1), gx->ptr(), static_cast<int>(din));
    }
    if (Tensor<T>* gw = grad_of(self, 1)) {
      detail::gemm(true, false, static_cast<int>(dout), static_cast<int>(din), static_cast<int>(m), T(1), gy.ptr(),
                   static_cast<int>(dout), x.ptr(), static_cast<int>(din), T(1), gw->ptr(), static_cast<int>(din));
    }
    if (has_bias) {
      if (Tensor<T>* gb = grad_of(self, 2)) {
        for (int64_t r = 0; r < m; ++r) {
          for (int64_t j = 0; j < dout; ++j) (*gb)[j] += gy[r * dout + j];
        }
      }
    }
  });
}

template <typename T>
Var<T> batched_matmul(const Var<T>& a, const Var<T>& b, bool transpose_b) {
  require_rank(a.shape(), 3, "batched_matmul lhs");
  require_rank(b.shape(), 3, "batched_matmul rhs");
  const int64_t batch = a.shape()[0], m = a.shape()[1], k = a.shape()[2];
  const int64_t kb = transpose_b ? b.shape()[2] : b.shape()[1];
  const int64_t n = transpose_b ? b.shape()[1] : b.shape()[2];
  if (b.shape()[0] != batch || kb != k) {
    throw ShapeError("batched_matmul shape mismatch: " + shape_str(a.shape()) + " x " + shape_str(b.shape()) +
                     (transpose_b ? "^T" : ""));
  }
  Tensor<T> out({batch, m, n});
  const int ldb = static_cast<int>(transpose_b ? k : n);
  for (int64_t i = 0; i < batch; ++i) {
    detail::gemm(false, transpose_b, static_cast<int>(m), static_cast<int>(n), static_cast<int>(k), T(1),
                 a.value().ptr() + i * m * k, static_cast<int>(k), b.value().ptr() + i * k * n, ldb, T(0),
                 out.ptr() + i * m * n, static_cast<int>(n));
  }
  return Var<T>::make_result(std::move(out), {a, b}, [batch, m, n, k, transpose_b](Node<T>& self) {
    const Tensor<T>& gy = *self.grad;
    const Tensor<T>& av = self.parents[0]->value;
    const Tensor<T>& bv = self.parents[1]->value;
    const int ldb = static_cast<int>(transpose_b ? k : n);
    Tensor<T>* ga = grad_of(self, 0);
    Tensor<T>* gb = grad_of(self, 1);
    for (int64_t i = 0; i < batch; ++i) {
      const T* g = gy.ptr() + i * m * n;
      if (ga) {
        // dA = dY * op(B)^T
        detail::gemm(false, !transpose_b, static_cast<int>(m), static_cast<int>(k), static_cast<int>(n), T(1), g,
                     static_cast<int>(n), bv.ptr() + i * k * n, ldb, T(1), ga->ptr() + i * m * k,
                     static_cast<int>(k));
      }
      if (gb) {
        if (transpose_b) {
          // B is [N,K]: dB = dY^T * A
          detail::gemm(true, false, static_cast<int>(n), static_cast<int>(k), static_cast<int>(m), T(1), g,
                       static_cast<int>(n), av.ptr() + i * m * k, static_cast<int>(k), T(1),
                       gb->ptr() + i * k * n, static_cast<int>(k));
        } else {
          // B is [K,N]: dB = A^T * dY
          detail::gemm(true, false, static_cast<int>(k), static_cast<int>(n), static_cast<int>(m), T(1),
                       av.ptr() + i * m * k, static_cast<int>(k), g, static_cast<int>(n), T(1),
                       gb->ptr() + i * k * n, static_cast<int>(n));
        }
      }
    }
  });
}

template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gain, const Var<T>& offset, double eps) {
  if (!(eps > 0)) throw ConfigError("layer_norm eps must be positive");
  const Shape& xs = x.shape();
  if (xs.empty()) throw ShapeError("layer_norm input must have at least one axis");
  const int64_t d = xs.back();
  if (gain.shape() != Shape{d} || offset.shape() != Shape{d}) {
    throw ShapeError("layer_norm gain/offset must be [" + std::to_string(d) + "]");
  }
  const int64_t rows = x.value().numel() / d;
  Tensor<T> out(xs);
  auto xhat = std::make_shared<std::vector<T>>(static_cast<size_t>(rows * d));
  auto inv_std = std::make_shared<std::vector<T>>(static_cast<size_t>(rows));
  const T* xp = x.value().ptr();
  const T* gp = gain.value().ptr();
  const T* op = offset.value().ptr();
  for (int64_t r = 0; r < rows; ++r) {
    const T* row = xp + r * d;
    T mu = 0;
    for (int64_t j = 0; j < d; ++j) mu += row[j];
    mu /= static_cast<T>(d);
    T var = 0;
    for (int64_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<T>(d);
    const T is = T(1) / std::sqrt(var + static_cast<T>(eps));
    (*inv_std)[static_cast<size_t>(r)] = is;
    for (int64_t j = 0; j < d; ++j) {
      const T h = (row[j] - mu) * is;
      (*xhat)[static_cast<size_t>(r * d + j)] = h;
      out[r * d + j] = h * gp[j] + op[j];
    }
  }
  return Var<T>::make_result(std::move(out), {x, gain, offset}, [rows, d, xhat, inv_std](Node<T>& self) {
    const Tensor<T>& gy = *self.grad;
    const Tensor<T>& gv = self.parents[1]->value;
    Tensor<T>* gx = grad_of(self, 0);
    Tensor<T>* gg = grad_of(self, 1);
    Tensor<T>* gb = grad_of(self, 2);
    std::vector<T> dh(static_cast<size_t>(d));
    for (int64_t r = 0; r < rows; ++r) {
      const T* g = gy.ptr() + r * d;
      const T* h = xhat->data() + r * d;
      if (gg || gb) {
        for (int64_t j = 0; j < d; ++j) {
          if (gg) (*gg)[j] += g[j] * h[j];
          if (gb) (*gb)[j] += g[j];
        }
      }
      if (gx) {
        T mean_dh = 0, mean_dh_h = 0;
        for (int64_t j = 0; j < d; ++j) {
          dh[static_cast<size_t>(j)] = g[j] * gv[j];
          mean_dh += dh[static_cast<size_t>(j)];
          mean_dh_h += dh[static_cast<size_t>(j)] * h[j];
        }
        mean_dh /= static_cast<T>(d);
        mean_dh_h /= static_cast<T>(d);
        const T is = (*inv_std)[static_cast<size_t>(r)];
        for (int64_t j = 0; j < d; ++j) {
          (*gx)[r * d + j] += is * (dh[static_cast<size_t>(j)] - mean_dh - h[j] * mean_dh_h);
        }
      }
    }
  });
}

namespace {

template <typename T>
T sigmoid_scalar(T x) {
  if (x >= 0) return T(1) / (T(1) + std::exp(-x));
  const T e = std::exp(x);
  return e / (T(1) + e);
}

// Elementwise op given value and derivative functions of the input.
template <typename T, typename F, typename D>
Var<T> elementwise(const Var<T>& x, F f, D df) {
  const Tensor<T>& xv = x.value();
  Tensor<T> out(xv.shape());
  for (int64_t i = 0; i < xv.numel(); ++i) out[i] = f(xv[i]);
  return Var<T>::make_result(std::move(out), {x}, [df](Node<T>& self) {
    Tensor<T>* gx = grad_of(self, 0);
    if (!gx) return;
    const Tensor<T>& xv = self.parents[0]->value;
    const Tensor<T>& gy = *self.grad;
    for (int64_t i = 0; i < xv.numel(); ++i) (*gx)[i] += gy[i] * df(xv[i]);
  });
}

}  // namespace

template <typename T>
Var<T> silu(const Var<T>& x) {
  return elementwise(
      x, [](T v) { return v * sigmoid_scalar(v); },
      [](T v) {
        const T s = sigmoid_scalar(v);
        return s * (T(1) + v * (T(1) - s));
      });
}

template <typename T>
Var<T> sigmoid(const Var<T>& x) {
  return elementwise(
      x, [](T v) { return sigmoid_scalar(v); },
      [](T v) {
        const T s = sigmoid_scalar(v);
        return s * (T(1) - s);
      });
}

template <typename T>
Var<T> gelu(const Var<T>& x) {
  constexpr double kInvSqrt2 = 0.70710678118654752440;
  constexpr double kInvSqrt2Pi = 0.39894228040143267794;
  return elementwise(
      x, [](T v) { return T(0.5) * v * (T(1) + std::erf(v * T(kInvSqrt2))); },
      [](T v) {
        const T cdf = T(0.5) * (T(1) + std::erf(v * T(kInvSqrt2)));
        return cdf + v * T(kInvSqrt2Pi) * std::exp(T(-0.5) * v * v);
      });
}

template <typename T>
Var<T> softmax(const Var<T>& x, int axis) {
  const Shape& xs = x.shape();
  const int a = normalize_axis(axis, static_cast<int>(xs.size()));
  int64_t outer = 1, inner = 1;
  for (int i = 0; i < a; ++i) outer *= xs[static_cast<size_t>(i)];
  for (size_t i = static_cast<size_t>(a) + 1; i < xs.size(); ++i) inner *= xs[i];
  const int64_t len = xs[static_cast<size_t>(a)];
  Tensor<T> out(xs);
  const T* xp = x.value().ptr();
  for (int64_t o = 0; o < outer; ++o) {
    for (int64_t in = 0; in < inner; ++in) {
      const int64_t base = o * len * inner + in;
      T mx = xp[base];
      for (int64_t j = 1; j < len; ++j) mx = std::max(mx, xp[base + j * inner]);
      T s = 0;
      for (int64_t j = 0; j < len; ++j) {
        const T e = std::exp(xp[base + j * inner] - mx);
        out[base + j * inner] = e;
        s += e;
      }
      for (int64_t j = 0; j < len; ++j) out[base + j * inner] /= s;
    }
  }
  auto y = std::make_shared<Tensor<T>>(out);
  return Var<T>::make_result(std::move(out), {x}, [y, outer, inner, len](Node<T>& self) {
    Tensor<T>* gx = grad_of(self, 0);
    if (!gx) return;
    const Tensor<T>& gy = *self.grad;
    for (int64_t o = 0; o < outer; ++o) {
      for (int64_t in = 0; in < inner; ++in) {
        const int64_t base = o * len * inner + in;
        T dot = 0;
        for (int64_t j = 0; j < len; ++j) dot += gy[base + j * inner] * (*y)[base + j * inner];
        for (int64_t j = 0; j < len; ++j) {
          (*gx)[base + j * inner] += (*y)[base + j * inner] * (gy[base + j * inner] - dot);
        }
      }
    }
  });
}

template <typename T>
Var<T> upsample_nearest(const Var<T>& x, int factor) {
  require_rank(x.shape(), 4, "upsample_nearest input");
  if (factor < 1) throw ConfigError("upsample factor must be >= 1");
  const Shape& xs = x.shape();
  const int64_t planes = xs[0] * xs[1], h = xs[2], w = xs[3];
  const int64_t oh = h * factor, ow = w * factor;
  Tensor<T> out({xs[0], xs[1], oh, ow});
  const T* xp = x.value().ptr();
  for (int64_t p = 0; p < planes; ++p) {
    for (int64_t y = 0; y < oh; ++y) {
      const T* src = xp + p * h * w + (y / factor) * w;
      T* dst = out.ptr() + p * oh * ow + y * ow;
      for (int64_t xx = 0; xx < ow; ++xx) dst[xx] = src[xx / factor];
    }
  }
  return Var<T>::make_result(std::move(out), {x}, [planes, h, w, factor](Node<T>& self) {
    Tensor<T>* gx = grad_of(self, 0);
    if (!gx) return;
    const Tensor<T>& gy = *self.grad;
    const int64_t oh = h * factor, ow = w * factor;
    for (int64_t p = 0; p < planes; ++p) {
      for (int64_t y = 0; y < oh; ++y) {
        const T* src = gy.ptr() + p * oh * ow + y * ow;
        T* dst = gx->ptr() + p * h * w + (y / factor) * w;
        for (int64_t xx = 0; xx < ow; ++xx) dst[xx / factor] += src[xx];
      }
    }
  });
}

template <typename T>
Var<T> concat(const std::vector<Var<T>>& xs, int axis) {
  if (xs.empty()) throw ShapeError("concat of zero tensors");
  const Shape& first = xs.front().shape();
  const int a = normalize_axis(axis, static_cast<int>(first.size()));
  Shape os = first;
  os[static_cast<size_t>(a)] = 0;
  for (const auto& t : xs) {
    const Shape& s = t.shape();
    if (s.size() != first.size()) throw ShapeError("concat rank mismatch");
    for (size_t i = 0; i < s.size(); ++i) {
      if (static_cast<int>(i) != a && s[i] != first[i]) {
        throw ShapeError("concat extent mismatch: " + shape_str(s) + " vs " + shape_str(first));
      }
    }
    os[static_cast<size_t>(a)] += s[static_cast<size_t>(a)];
  }
  int64_t outer = 1;
  for (int i = 0; i < a; ++i) outer *= first[static_cast<size_t>(i)];
  std::vector<int64_t> chunk;
  for (const auto& t : xs) chunk.push_back(t.value().numel() / outer);
  const int64_t out_chunk = std::accumulate(chunk.begin(), chunk.end(), int64_t{0});
  Tensor<T> out(os);
  int64_t offset = 0;
  for (size_t t = 0; t < xs.size(); ++t) {
    for (int64_t o = 0; o < outer; ++o) {
      std::copy_n(xs[t].value().ptr() + o * chunk[t], chunk[t], out.ptr() + o * out_chunk + offset);
    }
    offset += chunk[t];
  }
  return Var<T>::make_result(std::move(out), xs, [chunk, outer, out_chunk](Node<T>& self) {
    const Tensor<T>& gy = *self.grad;
    int64_t offset = 0;
    for (size_t t = 0; t < chunk.size(); ++t) {
      if (Tensor<T>* gx = grad_of(self, t)) {
        for (int64_t o = 0; o < outer; ++o) {
          const T* src = gy.ptr() + o * out_chunk + offset;
          T* dst = gx->ptr() + o * chunk[t];
          for (int64_t i = 0; i < chunk[t]; ++i) dst[i] += src[i];
        }
      }
      offset += chunk[t];
    }
  });
}

template <typename T>
Var<T> reshape(const Var<T>& x, Shape shape) {
  Tensor<T> out = x.value().reshaped(std::move(shape));
  return Var<T>::make_result(std::move(out), {x}, [](Node<T>& self) {
    Tensor<T>* gx = grad_of(self, 0);
    if (!gx) return;
    const Tensor<T>& gy = *self.grad;
    for (int64_t i = 0; i < gy.numel(); ++i) (*gx)[i] += gy[i];
  });
}

namespace {

// Gathers `src` (shape `in_shape`) into `dst` laid out as the axes permutation;
// when `scatter` the direction is reversed and accumulates.
template <typename T>
void permute_copy(const T* src, T* dst, const Shape& in_shape, const std::vector<int>& axes, bool scatter) {
  const size_t r = in_shape.size();
  std::vector<int64_t> in_stride(r, 1);
  for (size_t i = r; i-- > 1;) in_stride[i - 1] = in_stride[i] * in_shape[i];
  Shape out_shape(r);
  std::vector<int64_t> stride(r);
  for (size_t i = 0; i < r; ++i) {
    out_shape[i] = in_shape[static_cast<size_t>(axes[i])];
    stride[i] = in_stride[static_cast<size_t>(axes[i])];
  }
  const int64_t total = shape_numel(in_shape);
  std::vector<int64_t> idx(r, 0);
  int64_t in_off = 0;
  const int64_t inner = r ? out_shape[r - 1] : 1;
  const int64_t inner_stride = r ? stride[r - 1] : 1;
  for (int64_t o = 0; o < total; o += inner) {
    if (scatter) {
      for (int64_t j = 0; j < inner; ++j) dst[in_off + j * inner_stride] += src[o + j];
    } else {
      for (int64_t j = 0; j < inner; ++j) dst[o + j] = src[in_off + j * inner_stride];
    }
    for (size_t d = r - 1; d-- > 0;) {
      ++idx[d];
      in_off += stride[d];
      if (idx[d] < out_shape[d]) break;
      in_off -= stride[d] * out_shape[d];
      idx[d] = 0;
    }
  }
}

}  // namespace

template <typename T>
Var<T> permute(const Var<T>& x, const std::vector<int>& axes) {
  const Shape& xs = x.shape();
  if (axes.size() != xs.size()) throw ShapeError("permute axes count does not match rank");
  std::vector<int> sorted = axes;
  std::sort(sorted.begin(), sorted.end());
  for (size_t i = 0; i < sorted.size(); ++i) {
    if (sorted[i] != static_cast<int>(i)) throw ShapeError("permute axes are not a permutation");
  }
  Shape os(xs.size());
  for (size_t i = 0; i < xs.size(); ++i) os[i] = xs[static_cast<size_t>(axes[i])];
  Tensor<T> out(os);
  permute_copy(x.value().ptr(), out.ptr(), xs, axes, false);
  return Var<T>::make_result(std::move(out), {x}, [xs, axes](Node<T>& self) {
    Tensor<T>* gx = grad_of(self, 0);
    if (!gx) return;
    permute_copy(self.grad->ptr(), gx->ptr(), xs, axes, true);
  });
}

template <typename T>
Var<T> tokens_from_map(const Var<T>& map) {
  require_rank(map.shape(), 4, "tokens_from_map input");
  const Shape& s = map.shape();
  return permute(reshape(map, {s[0], s[1], s[2] * s[3]}), {0, 2, 1});
}

template <typename T>
Var<T> map_from_tokens(const Var<T>& tokens, int64_t height, int64_t width) {
  require_rank(tokens.shape(), 3, "map_from_tokens input");
  const Shape& s = tokens.shape();
  if (s[1] != height * width) {
    throw ShapeError("map_from_tokens: " + std::to_string(s[1]) + " tokens do not tile a " +
                     std::to_string(height) + "x" + std::to_string(width) + " grid");
  }
  return reshape(permute(tokens, {0, 2, 1}), {s[0], s[2], height, width});
}

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  bool suffix = bs.size() <= as.size();
  for (size_t i = 0; suffix && i < bs.size(); ++i) suffix = bs[bs.size() - 1 - i] == as[as.size() - 1 - i];
  if (!suffix) throw ShapeError("add: " + shape_str(bs) + " does not broadcast onto " + shape_str(as));
  const int64_t nb = b.value().numel();
  const int64_t reps = a.value().numel() / nb;
  Tensor<T> out = a.value();
  for (int64_t r = 0; r < reps; ++r) {
    for (int64_t i = 0; i < nb; ++i) out[r * nb + i] += b.value()[i];
  }
  return Var<T>::make_result(std::move(out), {a, b}, [reps, nb](Node<T>& self) {
    const Tensor<T>& gy = *self.grad;
    if (Tensor<T>* ga = grad_of(self, 0)) {
      for (int64_t i = 0; i < gy.numel(); ++i) (*ga)[i] += gy[i];
    }
    if (Tensor<T>* gb = grad_of(self, 1)) {
      for (int64_t r = 0; r < reps; ++r) {
        for (int64_t i = 0; i < nb; ++i) (*gb)[i] += gy[r * nb + i];
      }
    }
  });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  if (a.shape() != b.shape()) throw ShapeError("mul: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor<T> out(a.shape());
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = a.value()[i] * b.value()[i];
  return Var<T>::make_result(std::move(out), {a, b}, [](Node<T>& self) {
    const Tensor<T>& gy = *self.grad;
    const Tensor<T>& av = self.parents[0]->value;
    const Tensor<T>& bv = self.parents[1]->value;
    if (Tensor<T>* ga = grad_of(self, 0)) {
      for (int64_t i = 0; i < gy.numel(); ++i) (*ga)[i] += gy[i] * bv[i];
    }
    if (Tensor<T>* gb = grad_of(self, 1)) {
      for (int64_t i = 0; i < gy.numel(); ++i) (*gb)[i] += gy[i] * av[i];
    }
  });
}

template <typename T>
Var<T> scale(const Var<T>& x, T factor) {
  Tensor<T> out(x.shape());
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = x.value()[i] * factor;
  return Var<T>::make_result(std::move(out), {x}, [factor](Node<T>& self) {
    Tensor<T>* gx = grad_of(self, 0);
    if (!gx) return;
    const Tensor<T>& gy = *self.grad;
    for (int64_t i = 0; i < gy.numel(); ++i) (*gx)[i] += gy[i] * factor;
  });
}

template <typename T>
Var<T> channel_scale(const Var<T>& x, const Var<T>& gate) {
  const Shape& xs = x.shape();
  if (xs.size() < 2 || gate.shape() != Shape{xs[1]}) {
    throw ShapeError("channel_scale: gate " + shape_str(gate.shape()) + " does not match channels of " +
                     shape_str(xs));
  }
  const int64_t n = xs[0], c = xs[1];
  const int64_t inner = x.value().numel() / (n * c);
  Tensor<T> out(xs);
  for (int64_t b = 0; b < n; ++b) {
    for (int64_t ch = 0; ch < c; ++ch) {
      const T g = gate.value()[ch];
      const int64_t base = (b * c + ch) * inner;
      for (int64_t i = 0; i < inner; ++i) out[base + i] = x.value()[base + i] * g;
    }
  }
  return Var<T>::make_result(std::move(out), {x, gate}, [n, c, inner](Node<T>& self) {
    const Tensor<T>& gy = *self.grad;
    const Tensor<T>& xv = self.parents[0]->value;
    const Tensor<T>& gv = self.parents[1]->value;
    Tensor<T>* gx = grad_of(self, 0);
    Tensor<T>* gg = grad_of(self, 1);
    for (int64_t b = 0; b < n; ++b) {
      for (int64_t ch = 0; ch < c; ++ch) {
        const int64_t base = (b * c + ch) * inner;
        T acc = 0;
        for (int64_t i = 0; i < inner; ++i) {
          if (gx) (*gx)[base + i] += gy[base + i] * gv[ch];
          acc += gy[base + i] * xv[base + i];
        }
        if (gg) (*gg)[ch] += acc;
      }
    }
  });
}

template <typename T>
Var<T> sum(const Var<T>& x) {
  T s = 0;
  for (T v : x.value().data()) s += v;
  return Var<T>::make_result(Tensor<T>(Shape{}, s), {x}, [](Node<T>& self) {
    Tensor<T>* gx = grad_of(self, 0);
    if (!gx) return;
    const T g = (*self.grad)[0];
    for (int64_t i = 0; i < gx->numel(); ++i) (*gx)[i] += g;
  });
}

template <typename T>
Var<T> mean(const Var<T>& x) {
  return scale(sum(x), T(1) / static_cast<T>(x.value().numel()));
}

template <typename T>
Var<T> multi_head_self_attention(const Var<T>& tokens, const AttentionParams<T>& p, int heads) {
  require_rank(tokens.shape(), 3, "attention tokens");
  const int64_t n = tokens.shape()[0], t = tokens.shape()[1], d = tokens.shape()[2];
  if (heads < 1 || d % heads != 0) {
    throw ConfigError("attention heads (" + std::to_string(heads) + ") must divide width " + std::to_string(d));
  }
  const int64_t dh = d / heads;
  auto split = [&](const Var<T>& x) {
    return reshape(permute(reshape(x, {n, t, heads, dh}), {0, 2, 1, 3}), {n * heads, t, dh});
  };
  Var<T> q = split(linear(tokens, p.wq, std::optional<Var<T>>(p.bq)));
  Var<T> k = split(linear(tokens, p.wk, std::optional<Var<T>>(p.bk)));
  Var<T> v = split(linear(tokens, p.wv, std::optional<Var<T>>(p.bv)));
  Var<T> scores = scale(batched_matmul(q, k, true), T(1) / std::sqrt(static_cast<T>(dh)));
  Var<T> attn = softmax(scores, -1);
  Var<T> ctx = batched_matmul(attn, v, false);
  Var<T> merged = reshape(permute(reshape(ctx, {n, heads, t, dh}), {0, 2, 1, 3}), {n, t, d});
  return linear(merged, p.wo, std::optional<Var<T>>(p.bo));
}

#define DINOYOLO_INSTANTIATE_OPS(T)                                                                         \
  template Var<T> conv2d(const Var<T>&, const Var<T>&, const std::type_identity_t<std::optional<Var<T>>>&, int, int);             \
  template Var<T> linear(const Var<T>&, const Var<T>&, const std::type_identity_t<std::optional<Var<T>>>&);                       \
  template Var<T> batched_matmul(const Var<T>&, const Var<T>&, bool);                                       \
  template Var<T> layer_norm(const Var<T>&, const Var<T>&, const Var<T>&, double);                          \
  template Var<T> silu(const Var<T>&);                                                                      \
  template Var<T> sigmoid(const Var<T>&);                                                                   \
  template Var<T> gelu(const Var<T>&);                                                                      \
  template Var<T> softmax(const Var<T>&, int);                                                              \
  template Var<T> upsample_nearest(const Var<T>&, int);                                                     \
  template Var<T> concat(const std::vector<Var<T>>&, int);                                                  \
  template Var<T> reshape(const Var<T>&, Shape);                                                            \
  template Var<T> permute(const Var<T>&, const std::vector<int>&);                                          \
  template Var<T> tokens_from_map(const Var<T>&);                                                           \
  template Var<T> map_from_tokens(const Var<T>&, int64_t, int64_t);                                         \
  template Var<T> add(const Var<T>&, const Var<T>&);                                                        \
  template Var<T> mul(const Var<T>&, const Var<T>&);                                                        \
  template Var<T> scale(const Var<T>&, T);                                                                  \
  template Var<T> channel_scale(const Var<T>&, const Var<T>&);                                              \
  template Var<T> sum(const Var<T>&);                                                                       \
  template Var<T> mean(const Var<T>&);                                                                      \
  template Var<T> multi_head_self_attention(const Var<T>&, const AttentionParams<T>&, int);

DINOYOLO_INSTANTIATE_OPS(float)
DINOYOLO_INSTANTIATE_OPS(double)

}  // namespace dinoyolo::ops
