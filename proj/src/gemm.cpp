#include "mapchange/gemm.hpp"

#include <cstdint>
#include <cstring>
#include <vector>

#if defined(__AVX512F__)
#include <immintrin.h>
#endif

namespace mapchange {

void transpose(const double* src, double* dst, int m, int n) {
  constexpr int B = 32;
  for (int i0 = 0; i0 < m; i0 += B) {
    int i1 = i0 + B < m ? i0 + B : m;
    for (int j0 = 0; j0 < n; j0 += B) {
      int j1 = j0 + B < n ? j0 + B : n;
      for (int i = i0; i < i1; ++i)
        for (int j = j0; j < j1; ++j) dst[(std::size_t)j * m + i] = src[(std::size_t)i * n + j];
    }
  }
}

namespace {

// One loop nest serves the operand layouts: packing normalizes A to [k][MR]
// and B to [k][NR] tiles, and only the pack routines know whether the source
// was transposed.
enum class Op { N, T };

constexpr int MR = 8;    // micro-tile rows
constexpr int NR = 16;   // micro-tile cols
constexpr int KB = 384;  // k block
constexpr int NB = 512;  // n block
constexpr int MB = 128;  // m block: packed A = MB*KB*8 = 384 KB

struct PackBufs {
  std::vector<double> a, b;
};

double* aligned64(std::vector<double>& v, std::size_t need) {
  if (v.size() < need + 8) v.resize(need + 8);
  auto addr = reinterpret_cast<std::uintptr_t>(v.data());
  return reinterpret_cast<double*>((addr + 63) & ~std::uintptr_t(63));
}

PackBufs& pack_bufs() {
  static thread_local PackBufs bufs;
  return bufs;
}

#if defined(__AVX512F__)

// In-register 8x8 transpose: c[j] = column j of the eight input rows.
inline void tr8x8(const __m512d r[8], __m512d c[8]) {
  __m512d t0 = _mm512_unpacklo_pd(r[0], r[1]);
  __m512d t1 = _mm512_unpackhi_pd(r[0], r[1]);
  __m512d t2 = _mm512_unpacklo_pd(r[2], r[3]);
  __m512d t3 = _mm512_unpackhi_pd(r[2], r[3]);
  __m512d t4 = _mm512_unpacklo_pd(r[4], r[5]);
  __m512d t5 = _mm512_unpackhi_pd(r[4], r[5]);
  __m512d t6 = _mm512_unpacklo_pd(r[6], r[7]);
  __m512d t7 = _mm512_unpackhi_pd(r[6], r[7]);
  __m512d u0 = _mm512_shuffle_f64x2(t0, t2, 0x88);
  __m512d u1 = _mm512_shuffle_f64x2(t1, t3, 0x88);
  __m512d u2 = _mm512_shuffle_f64x2(t0, t2, 0xdd);
  __m512d u3 = _mm512_shuffle_f64x2(t1, t3, 0xdd);
  __m512d u4 = _mm512_shuffle_f64x2(t4, t6, 0x88);
  __m512d u5 = _mm512_shuffle_f64x2(t5, t7, 0x88);
  __m512d u6 = _mm512_shuffle_f64x2(t4, t6, 0xdd);
  __m512d u7 = _mm512_shuffle_f64x2(t5, t7, 0xdd);
  c[0] = _mm512_shuffle_f64x2(u0, u4, 0x88);
  c[4] = _mm512_shuffle_f64x2(u0, u4, 0xdd);
  c[1] = _mm512_shuffle_f64x2(u1, u5, 0x88);
  c[5] = _mm512_shuffle_f64x2(u1, u5, 0xdd);
  c[2] = _mm512_shuffle_f64x2(u2, u6, 0x88);
  c[6] = _mm512_shuffle_f64x2(u2, u6, 0xdd);
  c[3] = _mm512_shuffle_f64x2(u3, u7, 0x88);
  c[7] = _mm512_shuffle_f64x2(u3, u7, 0xdd);
}

#endif

// dst tile is [kb][MR]; rows past mr are zero so the kernel can run full MR.
void pack_a_tile(Op op, const double* a, int lda, int i0, int k0, int mr, int kb, double* dst) {
  if (op == Op::N) {  // a is [m x k]
#if defined(__AVX512F__)
    if (mr == MR) {
      int kk = 0;
      for (; kk + 8 <= kb; kk += 8) {
        __m512d r[8], c[8];
        for (int i = 0; i < 8; ++i)
          r[i] = _mm512_loadu_pd(a + (std::size_t)(i0 + i) * lda + k0 + kk);
        tr8x8(r, c);
        for (int t = 0; t < 8; ++t) _mm512_store_pd(dst + (std::size_t)(kk + t) * MR, c[t]);
      }
      for (; kk < kb; ++kk)
        for (int i = 0; i < MR; ++i)
          dst[(std::size_t)kk * MR + i] = a[(std::size_t)(i0 + i) * lda + k0 + kk];
      return;
    }
#endif
    for (int i = 0; i < mr; ++i) {
      const double* src = a + (std::size_t)(i0 + i) * lda + k0;
      for (int kk = 0; kk < kb; ++kk) dst[(std::size_t)kk * MR + i] = src[kk];
    }
  } else {  // a stored [k x m], logical A = a^T
#if defined(__AVX512F__)
    __mmask8 mk = static_cast<__mmask8>((1u << mr) - 1u);
    for (int kk = 0; kk < kb; ++kk)
      _mm512_store_pd(dst + (std::size_t)kk * MR,
                      _mm512_maskz_loadu_pd(mk, a + (std::size_t)(k0 + kk) * lda + i0));
    return;
#else
    for (int kk = 0; kk < kb; ++kk) {
      const double* src = a + (std::size_t)(k0 + kk) * lda + i0;
      double* d = dst + (std::size_t)kk * MR;
      for (int i = 0; i < mr; ++i) d[i] = src[i];
    }
#endif
  }
  if (mr < MR)
    for (int kk = 0; kk < kb; ++kk)
      for (int i = mr; i < MR; ++i) dst[(std::size_t)kk * MR + i] = 0.0;
}

// dst strip is [kb][NR]; columns past nr are zero.
void pack_b_strip(Op op, const double* b, int ldb, int k0, int j0, int kb, int nr, double* dst) {
  if (op == Op::N) {  // b is [k x n]
#if defined(__AVX512F__)
    if (nr == NR) {
      for (int kk = 0; kk < kb; ++kk) {
        const double* src = b + (std::size_t)(k0 + kk) * ldb + j0;
        _mm512_store_pd(dst + (std::size_t)kk * NR, _mm512_loadu_pd(src));
        _mm512_store_pd(dst + (std::size_t)kk * NR + 8, _mm512_loadu_pd(src + 8));
      }
    } else {
      __mmask8 m0 = static_cast<__mmask8>((1u << (nr < 8 ? nr : 8)) - 1u);
      __mmask8 m1 = static_cast<__mmask8>(nr > 8 ? (1u << (nr - 8)) - 1u : 0u);
      for (int kk = 0; kk < kb; ++kk) {
        const double* src = b + (std::size_t)(k0 + kk) * ldb + j0;
        _mm512_store_pd(dst + (std::size_t)kk * NR, _mm512_maskz_loadu_pd(m0, src));
        _mm512_store_pd(dst + (std::size_t)kk * NR + 8, _mm512_maskz_loadu_pd(m1, src + 8));
      }
    }
#else
    for (int kk = 0; kk < kb; ++kk) {
      const double* src = b + (std::size_t)(k0 + kk) * ldb + j0;
      double* d = dst + (std::size_t)kk * NR;
      for (int j = 0; j < nr; ++j) d[j] = src[j];
      for (int j = nr; j < NR; ++j) d[j] = 0.0;
    }
#endif
  } else {  // b stored [n x k], logical B = b^T
#if defined(__AVX512F__)
    if (nr == NR) {
      int kk = 0;
      for (; kk + 8 <= kb; kk += 8) {
        for (int g = 0; g < 2; ++g) {
          __m512d r[8], c[8];
          for (int j = 0; j < 8; ++j)
            r[j] = _mm512_loadu_pd(b + (std::size_t)(j0 + g * 8 + j) * ldb + k0 + kk);
          tr8x8(r, c);
          for (int t = 0; t < 8; ++t)
            _mm512_store_pd(dst + (std::size_t)(kk + t) * NR + g * 8, c[t]);
        }
      }
      for (; kk < kb; ++kk)
        for (int j = 0; j < NR; ++j)
          dst[(std::size_t)kk * NR + j] = b[(std::size_t)(j0 + j) * ldb + k0 + kk];
      return;
    }
#endif
    for (int j = 0; j < nr; ++j) {
      const double* src = b + (std::size_t)(j0 + j) * ldb + k0;
      for (int kk = 0; kk < kb; ++kk) dst[(std::size_t)kk * NR + j] = src[kk];
    }
    if (nr < NR)
      for (int kk = 0; kk < kb; ++kk)
        for (int j = nr; j < NR; ++j) dst[(std::size_t)kk * NR + j] = 0.0;
  }
}

#if defined(__AVX512F__)

// MR x NR kernel over packed tiles; writes C through mr x nr, accumulating
// or assigning. The accumulator loops must unroll completely so all 16
// accumulators live in zmm registers; left rolled, gcc keeps the arrays on
// the stack and the kernel runs at a third of its speed.
inline void micro_kernel(const double* ap, const double* bp, double* c, int ldc, int kb, int mr,
                         int nr, bool accum) {
  __m512d c0[MR], c1[MR];
#pragma GCC unroll 8
  for (int i = 0; i < MR; ++i) {
    c0[i] = _mm512_setzero_pd();
    c1[i] = _mm512_setzero_pd();
  }
  for (int k = 0; k < kb; ++k) {
    __m512d b0 = _mm512_load_pd(bp + k * NR);
    __m512d b1 = _mm512_load_pd(bp + k * NR + 8);
    const double* ar = ap + k * MR;
#pragma GCC unroll 8
    for (int i = 0; i < MR; ++i) {
      __m512d av = _mm512_set1_pd(ar[i]);
      c0[i] = _mm512_fmadd_pd(av, b0, c0[i]);
      c1[i] = _mm512_fmadd_pd(av, b1, c1[i]);
    }
  }
  if (nr == NR) {
    for (int i = 0; i < mr; ++i) {
      double* cr = c + (std::size_t)i * ldc;
      if (accum) {
        _mm512_storeu_pd(cr, _mm512_add_pd(_mm512_loadu_pd(cr), c0[i]));
        _mm512_storeu_pd(cr + 8, _mm512_add_pd(_mm512_loadu_pd(cr + 8), c1[i]));
      } else {
        _mm512_storeu_pd(cr, c0[i]);
        _mm512_storeu_pd(cr + 8, c1[i]);
      }
    }
  } else {
    __mmask8 m0 = static_cast<__mmask8>((1u << (nr < 8 ? nr : 8)) - 1u);
    __mmask8 m1 = static_cast<__mmask8>(nr > 8 ? (1u << (nr - 8)) - 1u : 0u);
    for (int i = 0; i < mr; ++i) {
      double* cr = c + (std::size_t)i * ldc;
      __m512d v0 = accum ? _mm512_add_pd(_mm512_maskz_loadu_pd(m0, cr), c0[i]) : c0[i];
      _mm512_mask_storeu_pd(cr, m0, v0);
      if (m1) {
        __m512d v1 = accum ? _mm512_add_pd(_mm512_maskz_loadu_pd(m1, cr + 8), c1[i]) : c1[i];
        _mm512_mask_storeu_pd(cr + 8, m1, v1);
      }
    }
  }
}

// C[m x n] += A * B^T with both operands read row-contiguously, no packing.
// Dot-product form over 4x4 register tiles: wins when m is small and k large
// (weight gradients), where the packed path would transpose the big operand
// just to stream it once.
void gemm_nt_dot(const double* a, const double* b, double* c, int m, int k, int n, int lda,
                 int ldb, int ldc) {
  int kv = k & ~7;
  __mmask8 kt = static_cast<__mmask8>((1u << (k - kv)) - 1u);
  auto row_dot = [&](const double* ar, const double* br) {
    __m512d s = _mm512_setzero_pd();
    for (int kk = 0; kk < kv; kk += 8)
      s = _mm512_fmadd_pd(_mm512_loadu_pd(ar + kk), _mm512_loadu_pd(br + kk), s);
    if (kt)
      s = _mm512_fmadd_pd(_mm512_maskz_loadu_pd(kt, ar + kv), _mm512_maskz_loadu_pd(kt, br + kv),
                          s);
    return _mm512_reduce_add_pd(s);
  };
  int i = 0;
  for (; i + 4 <= m; i += 4) {
    const double* a0 = a + (std::size_t)i * lda;
    const double* a1 = a0 + lda;
    const double* a2 = a1 + lda;
    const double* a3 = a2 + lda;
    int j = 0;
    for (; j + 4 <= n; j += 4) {
      __m512d s[4][4];
#pragma GCC unroll 4
      for (int ii = 0; ii < 4; ++ii)
#pragma GCC unroll 4
        for (int jj = 0; jj < 4; ++jj) s[ii][jj] = _mm512_setzero_pd();
      for (int kk = 0; kk < kv; kk += 8) {
        __m512d av0 = _mm512_loadu_pd(a0 + kk);
        __m512d av1 = _mm512_loadu_pd(a1 + kk);
        __m512d av2 = _mm512_loadu_pd(a2 + kk);
        __m512d av3 = _mm512_loadu_pd(a3 + kk);
#pragma GCC unroll 4
        for (int jj = 0; jj < 4; ++jj) {
          __m512d bv = _mm512_loadu_pd(b + (std::size_t)(j + jj) * ldb + kk);
          s[0][jj] = _mm512_fmadd_pd(av0, bv, s[0][jj]);
          s[1][jj] = _mm512_fmadd_pd(av1, bv, s[1][jj]);
          s[2][jj] = _mm512_fmadd_pd(av2, bv, s[2][jj]);
          s[3][jj] = _mm512_fmadd_pd(av3, bv, s[3][jj]);
        }
      }
      if (kt) {
        __m512d av0 = _mm512_maskz_loadu_pd(kt, a0 + kv);
        __m512d av1 = _mm512_maskz_loadu_pd(kt, a1 + kv);
        __m512d av2 = _mm512_maskz_loadu_pd(kt, a2 + kv);
        __m512d av3 = _mm512_maskz_loadu_pd(kt, a3 + kv);
#pragma GCC unroll 4
        for (int jj = 0; jj < 4; ++jj) {
          __m512d bv = _mm512_maskz_loadu_pd(kt, b + (std::size_t)(j + jj) * ldb + kv);
          s[0][jj] = _mm512_fmadd_pd(av0, bv, s[0][jj]);
          s[1][jj] = _mm512_fmadd_pd(av1, bv, s[1][jj]);
          s[2][jj] = _mm512_fmadd_pd(av2, bv, s[2][jj]);
          s[3][jj] = _mm512_fmadd_pd(av3, bv, s[3][jj]);
        }
      }
#pragma GCC unroll 4
      for (int ii = 0; ii < 4; ++ii) {
        double* cr = c + (std::size_t)(i + ii) * ldc + j;
#pragma GCC unroll 4
        for (int jj = 0; jj < 4; ++jj) cr[jj] += _mm512_reduce_add_pd(s[ii][jj]);
      }
    }
    for (; j < n; ++j) {
      const double* br = b + (std::size_t)j * ldb;
      c[(std::size_t)i * ldc + j] += row_dot(a0, br);
      c[(std::size_t)(i + 1) * ldc + j] += row_dot(a1, br);
      c[(std::size_t)(i + 2) * ldc + j] += row_dot(a2, br);
      c[(std::size_t)(i + 3) * ldc + j] += row_dot(a3, br);
    }
  }
  for (; i < m; ++i) {
    const double* ar = a + (std::size_t)i * lda;
    for (int j = 0; j < n; ++j)
      c[(std::size_t)i * ldc + j] += row_dot(ar, b + (std::size_t)j * ldb);
  }
}

#else

inline void micro_kernel(const double* ap, const double* bp, double* c, int ldc, int kb, int mr,
                         int nr, bool accum) {
  double acc[MR][NR] = {};
  for (int k = 0; k < kb; ++k) {
    const double* br = bp + (std::size_t)k * NR;
    const double* ar = ap + (std::size_t)k * MR;
    for (int i = 0; i < MR; ++i) {
      double av = ar[i];
      for (int j = 0; j < NR; ++j) acc[i][j] += av * br[j];
    }
  }
  for (int i = 0; i < mr; ++i) {
    double* cr = c + (std::size_t)i * ldc;
    if (accum)
      for (int j = 0; j < nr; ++j) cr[j] += acc[i][j];
    else
      for (int j = 0; j < nr; ++j) cr[j] = acc[i][j];
  }
}

#endif

void gemm_driver(Op op_a, Op op_b, const double* a, const double* b, double* c, int m, int k,
                 int n, int lda, int ldb, int ldc, bool accum) {
  if (m <= 0 || k <= 0 || n <= 0) return;
  PackBufs& bufs = pack_bufs();
  double* bpack = aligned64(bufs.b, (std::size_t)KB * NB);
  double* apack = aligned64(bufs.a, (std::size_t)MB * KB);

  for (int n0 = 0; n0 < n; n0 += NB) {
    int nb = n0 + NB < n ? NB : n - n0;
    int strips = (nb + NR - 1) / NR;
    for (int k0 = 0; k0 < k; k0 += KB) {
      int kb = k0 + KB < k ? KB : k - k0;
      bool acc_block = accum || k0 > 0;
      for (int s = 0; s < strips; ++s) {
        int j0 = n0 + s * NR;
        int nr = j0 + NR <= n0 + nb ? NR : n0 + nb - j0;
        pack_b_strip(op_b, b, ldb, k0, j0, kb, nr, bpack + (std::size_t)s * NR * kb);
      }
      for (int m0 = 0; m0 < m; m0 += MB) {
        int mb = m0 + MB < m ? MB : m - m0;
        int tiles = (mb + MR - 1) / MR;
        for (int t = 0; t < tiles; ++t) {
          int i0 = m0 + t * MR;
          int mr = i0 + MR <= m0 + mb ? MR : m0 + mb - i0;
          pack_a_tile(op_a, a, lda, i0, k0, mr, kb, apack + (std::size_t)t * MR * kb);
        }
        for (int s = 0; s < strips; ++s) {
          int j0 = n0 + s * NR;
          int nr = j0 + NR <= n0 + nb ? NR : n0 + nb - j0;
          const double* bp = bpack + (std::size_t)s * NR * kb;
          for (int t = 0; t < tiles; ++t) {
            int i0 = m0 + t * MR;
            int mr = i0 + MR <= m0 + mb ? MR : m0 + mb - i0;
            micro_kernel(apack + (std::size_t)t * MR * kb, bp,
                         c + (std::size_t)i0 * ldc + j0, ldc, kb, mr, nr, acc_block);
          }
        }
      }
    }
  }
}

}  // namespace

void gemm_accum(const double* a, const double* b, double* c, int m, int k, int n) {
  gemm_driver(Op::N, Op::N, a, b, c, m, k, n, k, n, n, true);
}

void gemm_accum_nt(const double* a, const double* b, double* c, int m, int k, int n) {
  gemm_accum_nt_ex(a, b, c, m, k, n, k, k, n);
}

void gemm_accum_tn(const double* a, const double* b, double* c, int m, int k, int n) {
  gemm_driver(Op::T, Op::N, a, b, c, m, k, n, m, n, n, true);
}

void gemm_accum_ex(const double* a, const double* b, double* c, int m, int k, int n, int lda,
                   int ldb, int ldc) {
  gemm_driver(Op::N, Op::N, a, b, c, m, k, n, lda, ldb, ldc, true);
}

void gemm_accum_nt_ex(const double* a, const double* b, double* c, int m, int k, int n, int lda,
                      int ldb, int ldc) {
#if defined(__AVX512F__)
  // Small output, long reduction: dot form streams B once instead of
  // transpose-packing it.
  if (m > 0 && m <= 128 && k >= 128) {
    gemm_nt_dot(a, b, c, m, k, n, lda, ldb, ldc);
    return;
  }
#endif
  gemm_driver(Op::N, Op::T, a, b, c, m, k, n, lda, ldb, ldc, true);
}

void gemm_accum_tn_ex(const double* a, const double* b, double* c, int m, int k, int n, int lda,
                      int ldb, int ldc) {
  gemm_driver(Op::T, Op::N, a, b, c, m, k, n, lda, ldb, ldc, true);
}

void gemm_assign_tn_ex(const double* a, const double* b, double* c, int m, int k, int n, int lda,
                       int ldb, int ldc) {
  gemm_driver(Op::T, Op::N, a, b, c, m, k, n, lda, ldb, ldc, false);
}

}  // namespace mapchange
