#pragma once

#include <atomic>
#include <cstdint>
#include <span>
#include <vector>

#include "miqrec/matrix.hpp"

namespace miqrec::kernels {

// ---------------------------------------------------------------------------
// Multiply-add instrumentation.
//
// Counted kernels tally the floating point work they actually execute, using
// one unit per fused multiply-accumulate, per scaling multiply and per running
// add. Only forward kernels count (matmul family, scaling, attention score
// dots / weighted sums, query-window aggregation); softmax exponentials and
// all backward passes are excluded. The closed-form model in flops.hpp must
// reproduce these tallies exactly.
// ---------------------------------------------------------------------------
namespace counter {
void enable(bool on);
bool enabled();
void reset();
unsigned long long value();
void add(unsigned long long n);
}  // namespace counter

// C = A[0:a_rows] * B, row-major. a_rows = -1 means all rows.
void matmul_into(const Matrix& a, int a_rows, const Matrix& b, Matrix& c);
Matrix matmul(const Matrix& a, const Matrix& b);

// Accumulating products used by backward passes (not flop-counted).
// acc += g * b^T           g: r x n, b: k x n, acc: r x k
void matmul_nt_acc(const Matrix& g, const Matrix& b, Matrix& acc);
// acc += a[0:a_rows]^T * g a: r x k, g: r x n, acc: k x n
void matmul_tn_acc(const Matrix& a, int a_rows, const Matrix& g, Matrix& acc);
// acc[0:rows] += g * b^T (row-limited variant)
void matmul_nt_acc_rows(const Matrix& g, const Matrix& b, Matrix& acc, int rows);

// y = x * s, counted as one multiply per entry.
void scale_into(const Matrix& x, double s, Matrix& y);

// ---------------------------------------------------------------------------
// Fused causal attention over one extended sequence.
//
// Qs holds pre-scaled query rows for logical positions e = row_start .. tp-1
// (Qs row r corresponds to e = row_start + r). K and V cover all tp positions.
// Position e attends over p in [lo(e), e] where lo(e) = kv_lo if e >= kv_lo
// else 0 (kv_lo = 0 recovers plain causal attention). `heads` splits the
// feature dimension; scores and softmax are per head.
// ---------------------------------------------------------------------------
void attn_forward(const Matrix& qs, const Matrix& k, const Matrix& v, int row_start, int kv_lo,
                  int heads, Matrix& o);
// Recomputes the softmax internally; accumulates into dqs, dk, dv.
void attn_backward(const Matrix& qs, const Matrix& k, const Matrix& v, int row_start, int kv_lo,
                   int heads, const Matrix& dout, Matrix& dqs, Matrix& dk, Matrix& dv);

// ---------------------------------------------------------------------------
// Query-window aggregation of per-slot attention outputs.
//
// slots[j] holds rows for logical positions e = row_starts[j] .. tp-1. At each
// position the available slot rows (ascending j, last = the position itself)
// are combined into one feature row of F (tp x d).
// ---------------------------------------------------------------------------
enum class AggMode { kContext, kLast, kFull };

void agg_forward(std::span<const Matrix* const> slots, std::span<const int> row_starts, int tp,
                 const Matrix& wq, const Matrix& wk, const Matrix& wv, AggMode mode, Matrix& f);
void agg_backward(std::span<const Matrix* const> slots, std::span<const int> row_starts, int tp,
                  const Matrix& wq, const Matrix& wk, const Matrix& wv, AggMode mode,
                  const Matrix& df, std::span<Matrix* const> dslots, Matrix& dwq, Matrix& dwk,
                  Matrix& dwv);

// Row-wise layer normalization (population variance) with affine transform.
void layer_norm_forward(const Matrix& x, const Matrix& gain, const Matrix& bias, double eps,
                        Matrix& y);
void layer_norm_backward(const Matrix& x, const Matrix& gain, double eps, const Matrix& dy,
                         Matrix& dx, Matrix& dgain, Matrix& dbias);

// Serial reference kernels. Kept deliberately naive; tests assert the OpenMP
// kernels above match them bit for bit, and the kernel benchmark times both.
namespace ref {
Matrix matmul(const Matrix& a, const Matrix& b);
void attn_forward(const Matrix& qs, const Matrix& k, const Matrix& v, int row_start, int kv_lo,
                  int heads, Matrix& o);
}  // namespace ref

}  // namespace miqrec::kernels
