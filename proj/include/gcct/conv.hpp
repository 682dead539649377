// NCHW convolution via im2col + GEMM, plus max pooling.
// conv2d / conv2d_grad_input / conv2d_grad_weight form a closed set under
// differentiation, which is what makes second-order CAM gradients possible.
#pragma once

#include <omp.h>

#include <memory>
#include <vector>

#include "gcct/autodiff.hpp"

extern "C" void openblas_set_num_threads(int);

namespace gcct {

inline void init_compute() {
  static const bool done = [] {
    openblas_set_num_threads(1);  // parallelism lives in the batch loops
    return true;
  }();
  (void)done;
}

struct ConvSpec {
  int stride = 1;
  int pad = 0;
};

namespace detail {

inline int conv_out_dim(int in, int k, int stride, int pad) {
  return (in + 2 * pad - k) / stride + 1;
}

template <typename T>
void im2col(const T* x, int ci, int h, int w, int kh, int kw, int stride, int pad, T* col) {
  const int ho = conv_out_dim(h, kh, stride, pad);
  const int wo = conv_out_dim(w, kw, stride, pad);
  const int span = ho * wo;
  for (int c = 0; c < ci; ++c) {
    for (int ki = 0; ki < kh; ++ki) {
      for (int kj = 0; kj < kw; ++kj) {
        T* dst = col + ((c * kh + ki) * kw + kj) * span;
        for (int oi = 0; oi < ho; ++oi) {
          const int ii = oi * stride - pad + ki;
          if (ii < 0 || ii >= h) {
            for (int oj = 0; oj < wo; ++oj) dst[oi * wo + oj] = T(0);
            continue;
          }
          const T* src = x + (c * h + ii) * w;
          for (int oj = 0; oj < wo; ++oj) {
            const int jj = oj * stride - pad + kj;
            dst[oi * wo + oj] = (jj >= 0 && jj < w) ? src[jj] : T(0);
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const T* col, int ci, int h, int w, int kh, int kw, int stride, int pad, T* x) {
  const int ho = conv_out_dim(h, kh, stride, pad);
  const int wo = conv_out_dim(w, kw, stride, pad);
  const int span = ho * wo;
  for (int c = 0; c < ci; ++c) {
    for (int ki = 0; ki < kh; ++ki) {
      for (int kj = 0; kj < kw; ++kj) {
        const T* src = col + ((c * kh + ki) * kw + kj) * span;
        for (int oi = 0; oi < ho; ++oi) {
          const int ii = oi * stride - pad + ki;
          if (ii < 0 || ii >= h) continue;
          T* dst = x + (c * h + ii) * w;
          for (int oj = 0; oj < wo; ++oj) {
            const int jj = oj * stride - pad + kj;
            if (jj >= 0 && jj < w) dst[jj] += src[oi * wo + oj];
          }
        }
      }
    }
  }
}

}  // namespace detail

template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, ConvSpec spec);
template <typename T>
Var<T> conv2d_grad_input(const Var<T>& g, const Var<T>& w, std::vector<int> x_shape, ConvSpec spec);
template <typename T>
Var<T> conv2d_grad_weight(const Var<T>& x, const Var<T>& g, std::vector<int> w_shape,
                          ConvSpec spec);

template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, ConvSpec spec) {
  init_compute();
  const auto& xs = x.shape();
  const auto& ws = w.shape();
  if (xs.size() != 4 || ws.size() != 4) throw shape_error("conv2d expects (N,C,H,W) and (Co,Ci,kh,kw)");
  if (xs[1] != ws[1]) throw shape_error("conv2d channel mismatch");
  const int n = xs[0], ci = xs[1], h = xs[2], wd = xs[3];
  const int co = ws[0], kh = ws[2], kw = ws[3];
  const int ho = detail::conv_out_dim(h, kh, spec.stride, spec.pad);
  const int wo = detail::conv_out_dim(wd, kw, spec.stride, spec.pad);
  if (ho <= 0 || wo <= 0) throw shape_error("conv2d output would be empty");
  const int k = ci * kh * kw;
  const int span = ho * wo;
  Tensor<T> y({n, co, ho, wo});
#pragma omp parallel
  {
    std::vector<T> col(static_cast<size_t>(k) * span);
#pragma omp for schedule(static)
    for (int i = 0; i < n; ++i) {
      detail::im2col(x.val().data() + static_cast<std::int64_t>(i) * ci * h * wd, ci, h, wd, kh,
                     kw, spec.stride, spec.pad, col.data());
      gemm<T>(false, false, co, span, k, T(1), w.val().data(), k, col.data(), span, T(0),
              y.data() + static_cast<std::int64_t>(i) * co * span, span);
    }
  }
  auto x_shape = xs;
  auto w_shape = ws;
  return make_op<T>(std::move(y), {x, w}, "conv2d",
                    [spec, x_shape, w_shape](const Var<T>& g, const Var<T>& self) {
                      const auto& ps = self.node()->parents;
                      return std::vector<Var<T>>{
                          conv2d_grad_input(g, ps[1], x_shape, spec),
                          conv2d_grad_weight(ps[0], g, w_shape, spec)};
                    });
}

// adjoint of conv2d in its input: scatters g back through the kernel
template <typename T>
Var<T> conv2d_grad_input(const Var<T>& g, const Var<T>& w, std::vector<int> x_shape,
                         ConvSpec spec) {
  init_compute();
  const auto& gs = g.shape();
  const auto& ws = w.shape();
  const int n = x_shape[0], ci = x_shape[1], h = x_shape[2], wd = x_shape[3];
  const int co = ws[0], kh = ws[2], kw = ws[3];
  const int span = gs[2] * gs[3];
  const int k = ci * kh * kw;
  Tensor<T> xg({n, ci, h, wd});
#pragma omp parallel
  {
    std::vector<T> colg(static_cast<size_t>(k) * span);
#pragma omp for schedule(static)
    for (int i = 0; i < n; ++i) {
      gemm<T>(true, false, k, span, co, T(1), w.val().data(), k,
              g.val().data() + static_cast<std::int64_t>(i) * co * span, span, T(0), colg.data(),
              span);
      detail::col2im_add(colg.data(), ci, h, wd, kh, kw, spec.stride, spec.pad,
                         xg.data() + static_cast<std::int64_t>(i) * ci * h * wd);
    }
  }
  return make_op<T>(std::move(xg), {g, w}, "conv2d_grad_input",
                    [spec, x_shape, ws](const Var<T>& h2, const Var<T>& self) {
                      const auto& ps = self.node()->parents;
                      return std::vector<Var<T>>{conv2d(h2, ps[1], spec),
                                                 conv2d_grad_weight(h2, ps[0], ws, spec)};
                    });
}

// adjoint of conv2d in its weights
template <typename T>
Var<T> conv2d_grad_weight(const Var<T>& x, const Var<T>& g, std::vector<int> w_shape,
                          ConvSpec spec) {
  init_compute();
  const auto& xs = x.shape();
  const auto& gs = g.shape();
  const int n = xs[0], ci = xs[1], h = xs[2], wd = xs[3];
  const int co = w_shape[0], kh = w_shape[2], kw = w_shape[3];
  const int span = gs[2] * gs[3];
  const int k = ci * kh * kw;
  const int nthreads = omp_get_max_threads();
  std::vector<Tensor<T>> partial;
  partial.reserve(static_cast<size_t>(nthreads));
  for (int t = 0; t < nthreads; ++t) partial.emplace_back(std::vector<int>{co, ci, kh, kw});
#pragma omp parallel num_threads(nthreads)
  {
    std::vector<T> col(static_cast<size_t>(k) * span);
    T* acc = partial[static_cast<size_t>(omp_get_thread_num())].data();
#pragma omp for schedule(static)
    for (int i = 0; i < n; ++i) {
      detail::im2col(x.val().data() + static_cast<std::int64_t>(i) * ci * h * wd, ci, h, wd, kh,
                     kw, spec.stride, spec.pad, col.data());
      gemm<T>(false, true, co, k, span, T(1),
              g.val().data() + static_cast<std::int64_t>(i) * co * span, span, col.data(), span,
              T(1), acc, k);
    }
  }
  Tensor<T> wg = std::move(partial[0]);
  for (int t = 1; t < nthreads; ++t)
    for (std::int64_t j = 0; j < wg.numel(); ++j) wg[j] += partial[static_cast<size_t>(t)][j];
  auto x_shape = xs;
  return make_op<T>(std::move(wg), {x, g}, "conv2d_grad_weight",
                    [spec, x_shape, w_shape](const Var<T>& u, const Var<T>& self) {
                      const auto& ps = self.node()->parents;
                      return std::vector<Var<T>>{
                          conv2d_grad_input(ps[1], u, x_shape, spec), conv2d(ps[0], u, spec)};
                    });
}

template <typename T>
Var<T> maxpool2d(const Var<T>& x, int kernel, int stride, int pad = 0) {
  const auto& xs = x.shape();
  if (xs.size() != 4) throw shape_error("maxpool2d expects (N,C,H,W)");
  const int n = xs[0], c = xs[1], h = xs[2], w = xs[3];
  const int ho = detail::conv_out_dim(h, kernel, stride, pad);
  const int wo = detail::conv_out_dim(w, kernel, stride, pad);
  Tensor<T> y({n, c, ho, wo});
  auto idx = std::make_shared<std::vector<std::int64_t>>(static_cast<size_t>(y.numel()));
  const T* px = x.val().data();
  T* py = y.data();
  std::int64_t o = 0;
  for (int i = 0; i < n; ++i)
    for (int cc = 0; cc < c; ++cc) {
      const std::int64_t base = (static_cast<std::int64_t>(i) * c + cc) * h * w;
      for (int oi = 0; oi < ho; ++oi)
        for (int oj = 0; oj < wo; ++oj, ++o) {
          T best = -std::numeric_limits<T>::infinity();
          std::int64_t bi = -1;
          for (int ki = 0; ki < kernel; ++ki) {
            const int ii = oi * stride - pad + ki;
            if (ii < 0 || ii >= h) continue;
            for (int kj = 0; kj < kernel; ++kj) {
              const int jj = oj * stride - pad + kj;
              if (jj < 0 || jj >= w) continue;
              const T v = px[base + ii * w + jj];
              if (bi < 0 || v > best) {
                best = v;
                bi = base + ii * w + jj;
              }
            }
          }
          py[o] = best;
          (*idx)[static_cast<size_t>(o)] = bi;
        }
    }
  auto in_shape = xs;
  return make_op<T>(std::move(y), {x}, "maxpool2d",
                    [idx, in_shape](const Var<T>& g, const Var<T>&) -> std::vector<Var<T>> {
                      return {detail::scatter_flat(g, idx, in_shape)};
                    });
}

}  // namespace gcct
