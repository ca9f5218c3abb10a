#include <algorithm>
#include <cmath>
#include <vector>

#if defined(__AVX512F__)
#include <immintrin.h>
#endif

#include "mapchange/errors.hpp"
#include "mapchange/gemm.hpp"
#include "mapchange/tape.hpp"

namespace mapchange {

namespace {

// Reductions with a fixed four-lane accumulation tree: deterministic across
// runs, and not serialized on the fp add latency like a plain loop.
#if defined(__AVX512F__)

double red_sum(const double* p, std::size_t n) {
  __m512d s0 = _mm512_setzero_pd(), s1 = s0, s2 = s0, s3 = s0;
  std::size_t i = 0;
  for (; i + 32 <= n; i += 32) {
    s0 = _mm512_add_pd(s0, _mm512_loadu_pd(p + i));
    s1 = _mm512_add_pd(s1, _mm512_loadu_pd(p + i + 8));
    s2 = _mm512_add_pd(s2, _mm512_loadu_pd(p + i + 16));
    s3 = _mm512_add_pd(s3, _mm512_loadu_pd(p + i + 24));
  }
  for (; i + 8 <= n; i += 8) s0 = _mm512_add_pd(s0, _mm512_loadu_pd(p + i));
  if (i < n)
    s0 = _mm512_add_pd(
        s0, _mm512_maskz_loadu_pd(static_cast<__mmask8>((1u << (n - i)) - 1u), p + i));
  return _mm512_reduce_add_pd(_mm512_add_pd(_mm512_add_pd(s0, s1), _mm512_add_pd(s2, s3)));
}

// sum of (p[i] - c)^2
double red_sumsq_c(const double* p, std::size_t n, double c) {
  __m512d cv = _mm512_set1_pd(c);
  __m512d s0 = _mm512_setzero_pd(), s1 = s0, s2 = s0, s3 = s0;
  std::size_t i = 0;
  for (; i + 32 <= n; i += 32) {
    __m512d d0 = _mm512_sub_pd(_mm512_loadu_pd(p + i), cv);
    __m512d d1 = _mm512_sub_pd(_mm512_loadu_pd(p + i + 8), cv);
    __m512d d2 = _mm512_sub_pd(_mm512_loadu_pd(p + i + 16), cv);
    __m512d d3 = _mm512_sub_pd(_mm512_loadu_pd(p + i + 24), cv);
    s0 = _mm512_fmadd_pd(d0, d0, s0);
    s1 = _mm512_fmadd_pd(d1, d1, s1);
    s2 = _mm512_fmadd_pd(d2, d2, s2);
    s3 = _mm512_fmadd_pd(d3, d3, s3);
  }
  for (; i + 8 <= n; i += 8) {
    __m512d d0 = _mm512_sub_pd(_mm512_loadu_pd(p + i), cv);
    s0 = _mm512_fmadd_pd(d0, d0, s0);
  }
  if (i < n) {
    __mmask8 mk = static_cast<__mmask8>((1u << (n - i)) - 1u);
    __m512d d0 = _mm512_maskz_sub_pd(mk, _mm512_maskz_loadu_pd(mk, p + i), cv);
    s0 = _mm512_fmadd_pd(d0, d0, s0);
  }
  return _mm512_reduce_add_pd(_mm512_add_pd(_mm512_add_pd(s0, s1), _mm512_add_pd(s2, s3)));
}

// sum of a[i] * (b[i] - c)
double red_dot_c(const double* a, const double* b, std::size_t n, double c) {
  __m512d cv = _mm512_set1_pd(c);
  __m512d s0 = _mm512_setzero_pd(), s1 = s0, s2 = s0, s3 = s0;
  std::size_t i = 0;
  for (; i + 32 <= n; i += 32) {
    s0 = _mm512_fmadd_pd(_mm512_loadu_pd(a + i), _mm512_sub_pd(_mm512_loadu_pd(b + i), cv), s0);
    s1 = _mm512_fmadd_pd(_mm512_loadu_pd(a + i + 8),
                         _mm512_sub_pd(_mm512_loadu_pd(b + i + 8), cv), s1);
    s2 = _mm512_fmadd_pd(_mm512_loadu_pd(a + i + 16),
                         _mm512_sub_pd(_mm512_loadu_pd(b + i + 16), cv), s2);
    s3 = _mm512_fmadd_pd(_mm512_loadu_pd(a + i + 24),
                         _mm512_sub_pd(_mm512_loadu_pd(b + i + 24), cv), s3);
  }
  for (; i + 8 <= n; i += 8)
    s0 = _mm512_fmadd_pd(_mm512_loadu_pd(a + i), _mm512_sub_pd(_mm512_loadu_pd(b + i), cv), s0);
  if (i < n) {
    __mmask8 mk = static_cast<__mmask8>((1u << (n - i)) - 1u);
    s0 = _mm512_fmadd_pd(_mm512_maskz_loadu_pd(mk, a + i),
                         _mm512_maskz_sub_pd(mk, _mm512_maskz_loadu_pd(mk, b + i), cv), s0);
  }
  return _mm512_reduce_add_pd(_mm512_add_pd(_mm512_add_pd(s0, s1), _mm512_add_pd(s2, s3)));
}

#else

double red_sum(const double* p, std::size_t n) {
  double s0 = 0, s1 = 0, s2 = 0, s3 = 0;
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    s0 += p[i];
    s1 += p[i + 1];
    s2 += p[i + 2];
    s3 += p[i + 3];
  }
  for (; i < n; ++i) s0 += p[i];
  return (s0 + s1) + (s2 + s3);
}

double red_sumsq_c(const double* p, std::size_t n, double c) {
  double s0 = 0, s1 = 0, s2 = 0, s3 = 0;
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    double d0 = p[i] - c, d1 = p[i + 1] - c, d2 = p[i + 2] - c, d3 = p[i + 3] - c;
    s0 += d0 * d0;
    s1 += d1 * d1;
    s2 += d2 * d2;
    s3 += d3 * d3;
  }
  for (; i < n; ++i) {
    double d0 = p[i] - c;
    s0 += d0 * d0;
  }
  return (s0 + s1) + (s2 + s3);
}

double red_dot_c(const double* a, const double* b, std::size_t n, double c) {
  double s0 = 0, s1 = 0, s2 = 0, s3 = 0;
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    s0 += a[i] * (b[i] - c);
    s1 += a[i + 1] * (b[i + 1] - c);
    s2 += a[i + 2] * (b[i + 2] - c);
    s3 += a[i + 3] * (b[i + 3] - c);
  }
  for (; i < n; ++i) s0 += a[i] * (b[i] - c);
  return (s0 + s1) + (s2 + s3);
}

#endif

struct ConvDims {
  std::size_t n, cin, h, w, cout, kh, kw, oh, ow;
  int stride, pad;
  std::size_t ckk() const { return cin * kh * kw; }
  std::size_t ohow() const { return oh * ow; }
};

ConvDims conv_dims(const Tensor& x, const Tensor& w, int stride, int pad) {
  if (x.rank() != 4 || w.rank() != 4)
    throw ConfigError("conv2d: expected 4-d input and weight, got " + x.shape_str() + " and " +
                      w.shape_str());
  if (x.dim(1) != w.dim(1))
    throw ConfigError("conv2d: input channels " + std::to_string(x.dim(1)) +
                      " vs weight channels " + std::to_string(w.dim(1)));
  if (stride < 1 || pad < 0) throw ConfigError("conv2d: bad stride/pad");
  ConvDims d{x.dim(0), x.dim(1), x.dim(2), x.dim(3),
             w.dim(0), w.dim(2), w.dim(3), 0,       0,
             stride,   pad};
  std::size_t span_h = d.h + 2 * static_cast<std::size_t>(pad);
  std::size_t span_w = d.w + 2 * static_cast<std::size_t>(pad);
  if (span_h < d.kh || span_w < d.kw)
    throw ConfigError("conv2d: kernel " + w.shape_str() + " larger than padded input " +
                      x.shape_str());
  d.oh = (span_h - d.kh) / static_cast<std::size_t>(stride) + 1;
  d.ow = (span_w - d.kw) / static_cast<std::size_t>(stride) + 1;
  return d;
}

// Valid ox range for a kernel column offset: 0 <= ox*stride + base < w.
struct OxSpan {
  std::size_t lo, hi;
};

OxSpan ox_span(const ConvDims& d, long base) {
  std::size_t lo = base < 0 ? static_cast<std::size_t>((-base + d.stride - 1) / d.stride) : 0;
  long hi_s = (static_cast<long>(d.w) - base + d.stride - 1) / d.stride;
  std::size_t hi = hi_s < 0 ? 0 : std::min<std::size_t>(d.ow, static_cast<std::size_t>(hi_s));
  if (hi < lo) hi = lo;
  if (lo > d.ow) lo = hi = d.ow;
  return {lo, hi};
}

// Builds output rows [oy0, oy1) of the im2col matrix:
// col[(ci*kh + i)*kw + j][(oy - oy0)*ow + ox] = x[ci][oy*s - p + i][ox*s - p + j].
// Slicing by rows keeps the slab small enough to stay cache resident.
void im2col(const double* x, const ConvDims& d, std::size_t oy0, std::size_t oy1, double* col) {
  const std::size_t pw = (oy1 - oy0) * d.ow;
  for (std::size_t ci = 0; ci < d.cin; ++ci) {
    const double* xc = x + ci * d.h * d.w;
    for (std::size_t i = 0; i < d.kh; ++i)
      for (std::size_t j = 0; j < d.kw; ++j) {
        double* row = col + ((ci * d.kh + i) * d.kw + j) * pw;
        long base = static_cast<long>(j) - d.pad;
        OxSpan s = ox_span(d, base);
        for (std::size_t oy = oy0; oy < oy1; ++oy) {
          double* seg = row + (oy - oy0) * d.ow;
          long y = static_cast<long>(oy) * d.stride - d.pad + static_cast<long>(i);
          if (y < 0 || y >= static_cast<long>(d.h)) {
            std::fill(seg, seg + d.ow, 0.0);
            continue;
          }
          const double* xr = xc + static_cast<std::size_t>(y) * d.w + base;
          std::fill(seg, seg + s.lo, 0.0);
          if (d.stride == 1)
            std::copy(xr + s.lo, xr + s.hi, seg + s.lo);
          else
            for (std::size_t ox = s.lo; ox < s.hi; ++ox) seg[ox] = xr[ox * d.stride];
          std::fill(seg + s.hi, seg + d.ow, 0.0);
        }
      }
  }
}

// Scatter-add of the column layout back onto the image: adjoint of im2col.
void col2im_add(const double* col, const ConvDims& d, std::size_t oy0, std::size_t oy1,
                double* gx) {
  const std::size_t pw = (oy1 - oy0) * d.ow;
  for (std::size_t ci = 0; ci < d.cin; ++ci) {
    double* xc = gx + ci * d.h * d.w;
    for (std::size_t i = 0; i < d.kh; ++i)
      for (std::size_t j = 0; j < d.kw; ++j) {
        const double* row = col + ((ci * d.kh + i) * d.kw + j) * pw;
        long base = static_cast<long>(j) - d.pad;
        OxSpan s = ox_span(d, base);
        for (std::size_t oy = oy0; oy < oy1; ++oy) {
          long y = static_cast<long>(oy) * d.stride - d.pad + static_cast<long>(i);
          if (y < 0 || y >= static_cast<long>(d.h)) continue;
          const double* seg = row + (oy - oy0) * d.ow;
          double* xr = xc + static_cast<std::size_t>(y) * d.w + base;
          if (d.stride == 1)
            for (std::size_t ox = s.lo; ox < s.hi; ++ox) xr[ox] += seg[ox];
          else
            for (std::size_t ox = s.lo; ox < s.hi; ++ox) xr[ox * d.stride] += seg[ox];
        }
      }
  }
}

// Output rows per im2col slab: sized so a slab is ~512 KB and stays in L2
// next to the gemm operands instead of streaming through memory.
std::size_t conv_slab_rows(const ConvDims& d) {
  std::size_t per_row = d.ckk() * d.ow;
  std::size_t rows = per_row ? 65536 / per_row : d.oh;
  return std::min(d.oh, std::max<std::size_t>(1, rows));
}

bool unit_conv(const ConvDims& d) {
  return d.kh == 1 && d.kw == 1 && d.stride == 1 && d.pad == 0;
}

}  // namespace

Var Tape::conv2d(Var input, Var weight, Var bias, int stride, int pad) {
  const Tensor& xv = value(input);
  const Tensor& wv = value(weight);
  ConvDims d = conv_dims(xv, wv, stride, pad);
  const bool has_bias = bias.valid();
  if (has_bias) {
    const Tensor& bv = value(bias);
    if (bv.rank() != 1 || bv.dim(0) != d.cout)
      throw ConfigError("conv2d: bias " + bv.shape_str() + " does not match " +
                        std::to_string(d.cout) + " output channels");
  }

  const std::size_t ckk = d.ckk(), ohow = d.ohow();
  const bool unit = unit_conv(d);
  const std::size_t srows = unit ? 0 : conv_slab_rows(d);
  Tensor out({d.n, d.cout, d.oh, d.ow});
  std::vector<double> col(unit ? 0 : ckk * srows * d.ow);
  for (std::size_t ni = 0; ni < d.n; ++ni) {
    const double* xn = xv.ptr() + ni * d.cin * d.h * d.w;
    double* on = out.ptr() + ni * d.cout * ohow;
    if (unit) {  // 1x1 stride-1: the im2col matrix is the input itself
      gemm_accum(wv.ptr(), xn, on, static_cast<int>(d.cout), static_cast<int>(ckk),
                 static_cast<int>(ohow));
    } else {
      for (std::size_t oy0 = 0; oy0 < d.oh; oy0 += srows) {
        std::size_t oy1 = std::min(d.oh, oy0 + srows);
        std::size_t pw = (oy1 - oy0) * d.ow;
        im2col(xn, d, oy0, oy1, col.data());
        gemm_accum_ex(wv.ptr(), col.data(), on + oy0 * d.ow, static_cast<int>(d.cout),
                      static_cast<int>(ckk), static_cast<int>(pw), static_cast<int>(ckk),
                      static_cast<int>(pw), static_cast<int>(ohow));
      }
    }
    if (has_bias) {
      const Tensor& bv = value(bias);
      for (std::size_t co = 0; co < d.cout; ++co) {
        double b = bv[co];
        double* oc = on + co * ohow;
        for (std::size_t p = 0; p < ohow; ++p) oc[p] += b;
      }
    }
  }

  std::vector<Var> ins = {input, weight};
  if (has_bias) ins.push_back(bias);
  return record(std::move(out), ins,
                [xid = input.id, wid = weight.id, bid = has_bias ? bias.id : -1, d](Tape& t,
                                                                                    int out_id) {
                  const Tensor& gy = t.grad_of(out_id);
                  const std::size_t ckk = d.ckk(), ohow = d.ohow();
                  if (bid >= 0 && t.wants_grad(bid)) {
                    Tensor& gb = t.grad_buffer(bid);
                    for (std::size_t ni = 0; ni < d.n; ++ni)
                      for (std::size_t co = 0; co < d.cout; ++co)
                        gb[co] += red_sum(gy.ptr() + (ni * d.cout + co) * ohow, ohow);
                  }
                  const bool want_w = t.wants_grad(wid);
                  const bool want_x = t.wants_grad(xid);
                  if (!want_w && !want_x) return;
                  const Tensor& xv = t.value_of(xid);
                  const Tensor& wv = t.value_of(wid);
                  if (unit_conv(d)) {  // 1x1 stride-1: no column matrix needed
                    for (std::size_t ni = 0; ni < d.n; ++ni) {
                      const double* gn = gy.ptr() + ni * d.cout * ohow;
                      std::size_t xoff = ni * d.cin * d.h * d.w;
                      if (want_w)
                        gemm_accum_nt(gn, xv.ptr() + xoff, t.grad_buffer(wid).ptr(),
                                      static_cast<int>(d.cout), static_cast<int>(ohow),
                                      static_cast<int>(ckk));
                      if (want_x)
                        gemm_accum_tn(wv.ptr(), gn, t.grad_buffer(xid).ptr() + xoff,
                                      static_cast<int>(ckk), static_cast<int>(d.cout),
                                      static_cast<int>(ohow));
                    }
                    return;
                  }
                  const std::size_t srows = conv_slab_rows(d);
                  std::vector<double> col(want_w ? ckk * srows * d.ow : 0);
                  std::vector<double> dcol(want_x ? ckk * srows * d.ow : 0);
                  for (std::size_t ni = 0; ni < d.n; ++ni) {
                    const double* gn = gy.ptr() + ni * d.cout * ohow;
                    const double* xn = xv.ptr() + ni * d.cin * d.h * d.w;
                    for (std::size_t oy0 = 0; oy0 < d.oh; oy0 += srows) {
                      std::size_t oy1 = std::min(d.oh, oy0 + srows);
                      std::size_t pw = (oy1 - oy0) * d.ow;
                      if (want_w) {
                        // dW += gy * col^T, one cache-resident slab at a time
                        im2col(xn, d, oy0, oy1, col.data());
                        gemm_accum_nt_ex(gn + oy0 * d.ow, col.data(),
                                         t.grad_buffer(wid).ptr(), static_cast<int>(d.cout),
                                         static_cast<int>(pw), static_cast<int>(ckk),
                                         static_cast<int>(ohow), static_cast<int>(pw),
                                         static_cast<int>(ckk));
                      }
                      if (want_x) {
                        // dcol = W^T * gy, scattered back through the im2col map
                        gemm_assign_tn_ex(wv.ptr(), gn + oy0 * d.ow, dcol.data(),
                                          static_cast<int>(ckk), static_cast<int>(d.cout),
                                          static_cast<int>(pw), static_cast<int>(ckk),
                                          static_cast<int>(ohow), static_cast<int>(pw));
                        col2im_add(dcol.data(), d, oy0, oy1,
                                   t.grad_buffer(xid).ptr() + ni * d.cin * d.h * d.w);
                      }
                    }
                  }
                });
}

Var Tape::group_norm(Var input, int groups, Var gamma, Var beta, double eps) {
  const Tensor& xv = value(input);
  if (xv.rank() != 4) throw ConfigError("group_norm: expected 4-d input, got " + xv.shape_str());
  std::size_t n = xv.dim(0), c = xv.dim(1), h = xv.dim(2), w = xv.dim(3);
  std::size_t g = static_cast<std::size_t>(groups);
  if (groups < 1 || c % g != 0)
    throw ConfigError("group_norm: " + std::to_string(groups) + " groups do not divide " +
                      std::to_string(c) + " channels");
  const Tensor& gv = value(gamma);
  const Tensor& bv = value(beta);
  if (gv.rank() != 1 || gv.dim(0) != c || !gv.same_shape(bv))
    throw ConfigError("group_norm: gamma/beta must be [" + std::to_string(c) + "]");

  std::size_t cpg = c / g, hw = h * w, gsize = cpg * hw;
  Tensor out(std::vector<std::size_t>(xv.shape()));
  std::vector<double> mean(n * g), inv(n * g);
  for (std::size_t ni = 0; ni < n; ++ni)
    for (std::size_t gi = 0; gi < g; ++gi) {
      const double* xg = xv.ptr() + (ni * c + gi * cpg) * hw;
      double m = red_sum(xg, gsize) / static_cast<double>(gsize);
      double var = red_sumsq_c(xg, gsize, m) / static_cast<double>(gsize);
      double iv = 1.0 / std::sqrt(var + eps);
      mean[ni * g + gi] = m;
      inv[ni * g + gi] = iv;
      double* og = out.ptr() + (ni * c + gi * cpg) * hw;
      for (std::size_t cc = 0; cc < cpg; ++cc) {
        double a = gv[gi * cpg + cc] * iv;
        double b = bv[gi * cpg + cc] - a * m;
        for (std::size_t p = 0; p < hw; ++p) og[cc * hw + p] = a * xg[cc * hw + p] + b;
      }
    }

  Var ins[] = {input, gamma, beta};
  return record(
      std::move(out), ins,
      [xid = input.id, gid = gamma.id, bid = beta.id, n, c, g, cpg, hw, gsize,
       mean = std::move(mean), inv = std::move(inv)](Tape& t, int out_id) {
        const Tensor& gy = t.grad_of(out_id);
        const Tensor& xv = t.value_of(xid);
        const Tensor& gv = t.value_of(gid);
        const bool want_x = t.wants_grad(xid);
        const bool want_g = t.wants_grad(gid);
        const bool want_b = t.wants_grad(bid);
        std::vector<double> sb(cpg), sdx(cpg);
        for (std::size_t ni = 0; ni < n; ++ni)
          for (std::size_t gi = 0; gi < g; ++gi) {
            const double* xg = xv.ptr() + (ni * c + gi * cpg) * hw;
            const double* dg = gy.ptr() + (ni * c + gi * cpg) * hw;
            double m = mean[ni * g + gi], iv = inv[ni * g + gi];
            // One pass of per-channel sums serves all three gradients:
            // sum(gy) and sum(gy*(x - m)).
            for (std::size_t cc = 0; cc < cpg; ++cc) {
              sb[cc] = red_sum(dg + cc * hw, hw);
              sdx[cc] = red_dot_c(dg + cc * hw, xg + cc * hw, hw, m);
            }
            for (std::size_t cc = 0; cc < cpg; ++cc) {
              if (want_g) t.grad_buffer(gid)[gi * cpg + cc] += iv * sdx[cc];
              if (want_b) t.grad_buffer(bid)[gi * cpg + cc] += sb[cc];
            }
            if (want_x) {
              // dx = inv * (h - mean(h) - xhat * mean(h*xhat)), h = gy*gamma
              double sum_h = 0.0, sum_hx = 0.0;
              for (std::size_t cc = 0; cc < cpg; ++cc) {
                sum_h += gv[gi * cpg + cc] * sb[cc];
                sum_hx += gv[gi * cpg + cc] * iv * sdx[cc];
              }
              double mh = sum_h / static_cast<double>(gsize);
              double mhx = sum_hx / static_cast<double>(gsize);
              double* gx = t.grad_buffer(xid).ptr() + (ni * c + gi * cpg) * hw;
              for (std::size_t cc = 0; cc < cpg; ++cc) {
                double ga = gv[gi * cpg + cc];
                // iv*(dg*ga - mh - (x - m)*iv*mhx) with the constants folded
                double a1 = iv * ga;
                double b1 = -iv * iv * mhx;
                double c1 = -iv * mh + m * iv * iv * mhx;
                const double* dgc = dg + cc * hw;
                const double* xgc = xg + cc * hw;
                double* gxc = gx + cc * hw;
                for (std::size_t p = 0; p < hw; ++p)
                  gxc[p] += dgc[p] * a1 + xgc[p] * b1 + c1;
              }
            }
          }
      });
}

Var Tape::layer_norm_rows(Var input, Var gamma, Var beta, double eps) {
  const Tensor& xv = value(input);
  if (xv.rank() != 2)
    throw ConfigError("layer_norm_rows: expected 2-d input, got " + xv.shape_str());
  std::size_t rows = xv.dim(0), c = xv.dim(1);
  const Tensor& gv = value(gamma);
  const Tensor& bv = value(beta);
  if (gv.rank() != 1 || gv.dim(0) != c || !gv.same_shape(bv))
    throw ConfigError("layer_norm_rows: gamma/beta must be [" + std::to_string(c) + "]");

  Tensor out(std::vector<std::size_t>(xv.shape()));
  std::vector<double> mean(rows), inv(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = xv.ptr() + r * c;
    double m = 0.0;
    for (std::size_t i = 0; i < c; ++i) m += xr[i];
    m /= static_cast<double>(c);
    double var = 0.0;
    for (std::size_t i = 0; i < c; ++i) {
      double dv = xr[i] - m;
      var += dv * dv;
    }
    var /= static_cast<double>(c);
    double iv = 1.0 / std::sqrt(var + eps);
    mean[r] = m;
    inv[r] = iv;
    double* orow = out.ptr() + r * c;
    for (std::size_t i = 0; i < c; ++i) orow[i] = gv[i] * (xr[i] - m) * iv + bv[i];
  }

  Var ins[] = {input, gamma, beta};
  return record(std::move(out), ins,
                [xid = input.id, gid = gamma.id, bid = beta.id, rows, c, mean = std::move(mean),
                 inv = std::move(inv)](Tape& t, int out_id) {
                  const Tensor& gy = t.grad_of(out_id);
                  const Tensor& xv = t.value_of(xid);
                  const Tensor& gv = t.value_of(gid);
                  const bool want_x = t.wants_grad(xid);
                  const bool want_g = t.wants_grad(gid);
                  const bool want_b = t.wants_grad(bid);
                  for (std::size_t r = 0; r < rows; ++r) {
                    const double* xr = xv.ptr() + r * c;
                    const double* dr = gy.ptr() + r * c;
                    double m = mean[r], iv = inv[r];
                    if (want_g || want_b) {
                      for (std::size_t i = 0; i < c; ++i) {
                        if (want_g) t.grad_buffer(gid)[i] += dr[i] * (xr[i] - m) * iv;
                        if (want_b) t.grad_buffer(bid)[i] += dr[i];
                      }
                    }
                    if (want_x) {
                      double sum_h = 0.0, sum_hx = 0.0;
                      for (std::size_t i = 0; i < c; ++i) {
                        double hv = dr[i] * gv[i];
                        double xh = (xr[i] - m) * iv;
                        sum_h += hv;
                        sum_hx += hv * xh;
                      }
                      double mh = sum_h / static_cast<double>(c);
                      double mhx = sum_hx / static_cast<double>(c);
                      double* gx = t.grad_buffer(xid).ptr() + r * c;
                      for (std::size_t i = 0; i < c; ++i) {
                        double hv = dr[i] * gv[i];
                        double xh = (xr[i] - m) * iv;
                        gx[i] += iv * (hv - mh - xh * mhx);
                      }
                    }
                  }
                });
}

Var Tape::matmul(Var a, Var b) {
  const Tensor& av = value(a);
  const Tensor& bv = value(b);
  if (av.rank() != 2 || bv.rank() != 2 || av.dim(1) != bv.dim(0))
    throw ConfigError("matmul: incompatible " + av.shape_str() + " x " + bv.shape_str());
  std::size_t m = av.dim(0), k = av.dim(1), n = bv.dim(1);
  Tensor out({m, n});
  gemm_accum(av.ptr(), bv.ptr(), out.ptr(), static_cast<int>(m), static_cast<int>(k),
             static_cast<int>(n));
  Var ins[] = {a, b};
  return record(std::move(out), ins, [aid = a.id, bid = b.id, m, k, n](Tape& t, int out_id) {
    const Tensor& gy = t.grad_of(out_id);
    if (t.wants_grad(aid)) {
      const Tensor& bv = t.value_of(bid);
      gemm_accum_nt(gy.ptr(), bv.ptr(), t.grad_buffer(aid).ptr(), static_cast<int>(m),
                    static_cast<int>(n), static_cast<int>(k));
    }
    if (t.wants_grad(bid)) {
      const Tensor& av = t.value_of(aid);
      gemm_accum_tn(av.ptr(), gy.ptr(), t.grad_buffer(bid).ptr(), static_cast<int>(k),
                    static_cast<int>(m), static_cast<int>(n));
    }
  });
}

Var Tape::add_row_bias(Var x, Var bias) {
  const Tensor& xv = value(x);
  const Tensor& bv = value(bias);
  if (xv.rank() != 2 || bv.rank() != 1 || bv.dim(0) != xv.dim(1))
    throw ConfigError("add_row_bias: " + xv.shape_str() + " + " + bv.shape_str());
  std::size_t rows = xv.dim(0), c = xv.dim(1);
  Tensor out(std::vector<std::size_t>(xv.shape()));
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t i = 0; i < c; ++i) out[r * c + i] = xv[r * c + i] + bv[i];
  Var ins[] = {x, bias};
  return record(std::move(out), ins, [xid = x.id, bid = bias.id, rows, c](Tape& t, int out_id) {
    const Tensor& gy = t.grad_of(out_id);
    if (t.wants_grad(xid)) {
      Tensor& gx = t.grad_buffer(xid);
      for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i];
    }
    if (t.wants_grad(bid)) {
      Tensor& gb = t.grad_buffer(bid);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t i = 0; i < c; ++i) gb[i] += gy[r * c + i];
    }
  });
}

Var Tape::attention(Var q, Var k, Var v) {
  const Tensor& qv = value(q);
  const Tensor& kv = value(k);
  const Tensor& vv = value(v);
  if (qv.rank() != 4 || !qv.same_shape(kv) || !qv.same_shape(vv))
    throw ConfigError("attention: q/k/v must share a [batch, heads, tokens, dim] shape, got " +
                      qv.shape_str() + ", " + kv.shape_str() + ", " + vv.shape_str());
  std::size_t b = qv.dim(0), hds = qv.dim(1), tk = qv.dim(2), dm = qv.dim(3);
  double scale = 1.0 / std::sqrt(static_cast<double>(dm));

  Tensor out(std::vector<std::size_t>(qv.shape()));
  Tensor attn({b * hds, tk, tk});
  for (std::size_t bh = 0; bh < b * hds; ++bh) {
    const double* qp = qv.ptr() + bh * tk * dm;
    const double* kp = kv.ptr() + bh * tk * dm;
    const double* vp = vv.ptr() + bh * tk * dm;
    double* ap = attn.ptr() + bh * tk * tk;
    gemm_accum_nt(qp, kp, ap, static_cast<int>(tk), static_cast<int>(dm),
                  static_cast<int>(tk));
    for (std::size_t r = 0; r < tk; ++r) {
      double* row = ap + r * tk;
      double mx = row[0] * scale;
      for (std::size_t i = 0; i < tk; ++i) {
        row[i] *= scale;
        mx = std::max(mx, row[i]);
      }
      double sum = 0.0;
      for (std::size_t i = 0; i < tk; ++i) {
        row[i] = std::exp(row[i] - mx);
        sum += row[i];
      }
      for (std::size_t i = 0; i < tk; ++i) row[i] /= sum;
    }
    gemm_accum(ap, vp, out.ptr() + bh * tk * dm, static_cast<int>(tk), static_cast<int>(tk),
               static_cast<int>(dm));
  }

  Var ins[] = {q, k, v};
  return record(
      std::move(out), ins,
      [qid = q.id, kid = k.id, vid = v.id, b, hds, tk, dm, scale,
       attn = std::move(attn)](Tape& t, int out_id) {
        const Tensor& gy = t.grad_of(out_id);
        const Tensor& qv = t.value_of(qid);
        const Tensor& kv = t.value_of(kid);
        const Tensor& vv = t.value_of(vid);
        const bool want_q = t.wants_grad(qid);
        const bool want_k = t.wants_grad(kid);
        const bool want_v = t.wants_grad(vid);
        std::vector<double> da(tk * tk), ds(tk * tk);
        for (std::size_t bh = 0; bh < b * hds; ++bh) {
          const double* ap = attn.ptr() + bh * tk * tk;
          const double* gp = gy.ptr() + bh * tk * dm;
          if (want_v) {
            gemm_accum_tn(ap, gp, t.grad_buffer(vid).ptr() + bh * tk * dm,
                          static_cast<int>(tk), static_cast<int>(tk), static_cast<int>(dm));
          }
          if (!want_q && !want_k) continue;
          // dA = gy V^T, then softmax row backward, then undo the scaling
          const double* vp = vv.ptr() + bh * tk * dm;
          std::fill(da.begin(), da.end(), 0.0);
          gemm_accum_nt(gp, vp, da.data(), static_cast<int>(tk), static_cast<int>(dm),
                        static_cast<int>(tk));
          for (std::size_t r = 0; r < tk; ++r) {
            const double* arow = ap + r * tk;
            const double* darow = da.data() + r * tk;
            double dot = 0.0;
            for (std::size_t i = 0; i < tk; ++i) dot += darow[i] * arow[i];
            double* dsrow = ds.data() + r * tk;
            for (std::size_t i = 0; i < tk; ++i)
              dsrow[i] = scale * arow[i] * (darow[i] - dot);
          }
          if (want_q)
            gemm_accum(ds.data(), kv.ptr() + bh * tk * dm,
                       t.grad_buffer(qid).ptr() + bh * tk * dm, static_cast<int>(tk),
                       static_cast<int>(tk), static_cast<int>(dm));
          if (want_k) {
            gemm_accum_tn(ds.data(), qv.ptr() + bh * tk * dm,
                          t.grad_buffer(kid).ptr() + bh * tk * dm, static_cast<int>(tk),
                          static_cast<int>(tk), static_cast<int>(dm));
          }
        }
      });
}

}  // namespace mapchange
