#pragma once

#include <cstddef>

namespace mapchange {

// C[M,N] += A[M,K] * B[K,N], all row-major, no aliasing. Every output
// element is accumulated in a fixed order (set by the compiled-in block
// sizes), so results are bit-identical across runs.
void gemm_accum(const double* a, const double* b, double* c, int m, int k, int n);

// C[M,N] += A[M,K] * B^T with B stored row-major [N,K]. Saves materializing
// the transpose; the operand is read in its transposed layout directly.
void gemm_accum_nt(const double* a, const double* b, double* c, int m, int k, int n);

// C[M,N] += A^T * B[K,N] with A stored row-major [K,M].
void gemm_accum_tn(const double* a, const double* b, double* c, int m, int k, int n);

// Strided variants: each operand's rows are lda/ldb/ldc apart, so the
// matrices may be windows into larger arrays. Row lengths follow the
// layouts above (A rows hold k or m values, B rows n or k, C rows n).
void gemm_accum_ex(const double* a, const double* b, double* c, int m, int k, int n, int lda,
                   int ldb, int ldc);
void gemm_accum_nt_ex(const double* a, const double* b, double* c, int m, int k, int n, int lda,
                      int ldb, int ldc);
void gemm_accum_tn_ex(const double* a, const double* b, double* c, int m, int k, int n, int lda,
                      int ldb, int ldc);

// As gemm_accum_tn_ex but C is assigned rather than accumulated, so the
// destination window need not be cleared first.
void gemm_assign_tn_ex(const double* a, const double* b, double* c, int m, int k, int n, int lda,
                       int ldb, int ldc);

// dst[N,M] = src[M,N]
void transpose(const double* src, double* dst, int m, int n);

}  // namespace mapchange
