#include "miqrec/kernels.hpp"

#include <omp.h>

#include <algorithm>
#include <cmath>
#include <cstring>

namespace miqrec::kernels {

namespace counter {
namespace {
std::atomic<bool> g_enabled{false};
std::atomic<unsigned long long> g_value{0};
}  // namespace

void enable(bool on) { g_enabled.store(on, std::memory_order_relaxed); }
bool enabled() { return g_enabled.load(std::memory_order_relaxed); }
void reset() { g_value.store(0, std::memory_order_relaxed); }
unsigned long long value() { return g_value.load(std::memory_order_relaxed); }
void add(unsigned long long n) {
  if (enabled()) g_value.fetch_add(n, std::memory_order_relaxed);
}
}  // namespace counter

namespace {
constexpr long long kParallelCutoff = 1 << 15;

inline double dot(const double* a, const double* b, int n) {
  double s = 0.0;
  for (int i = 0; i < n; ++i) s += a[i] * b[i];
  return s;
}
}  // namespace

void matmul_into(const Matrix& a, int a_rows, const Matrix& b, Matrix& c) {
  const int rows = a_rows < 0 ? a.rows() : a_rows;
  const int inner = a.cols();
  const int cols = b.cols();
  if (inner != b.rows())
    throw numeric_error("matmul: dimension mismatch " + a.shape_str() + " * " + b.shape_str());
  if (rows > a.rows()) throw numeric_error("matmul: row limit exceeds matrix");
  c = Matrix(rows, cols);

  const long long work = 1ll * rows * inner * cols;
#pragma omp parallel for schedule(static) if (work > kParallelCutoff)
  for (int i = 0; i < rows; ++i) {
    const double* arow = a.row(i);
    double* crow = c.row(i);
    for (int j = 0; j < inner; ++j) {
      const double aij = arow[j];
      const double* brow = b.row(j);
      for (int k = 0; k < cols; ++k) crow[k] += aij * brow[k];
    }
  }
  counter::add((unsigned long long)work);
}

Matrix matmul(const Matrix& a, const Matrix& b) {
  Matrix c;
  matmul_into(a, -1, b, c);
  return c;
}

void matmul_nt_acc(const Matrix& g, const Matrix& b, Matrix& acc) {
  matmul_nt_acc_rows(g, b, acc, g.rows());
}

void matmul_nt_acc_rows(const Matrix& g, const Matrix& b, Matrix& acc, int rows) {
  const int n = g.cols();
  const int k = b.rows();
  if (b.cols() != n || acc.cols() != k || rows > acc.rows() || rows > g.rows())
    throw numeric_error("matmul_nt_acc: dimension mismatch " + g.shape_str() + " * " +
                        b.shape_str() + "^T -> " + acc.shape_str());
#pragma omp parallel for schedule(static) if (1ll * rows * n * k > kParallelCutoff)
  for (int i = 0; i < rows; ++i) {
    const double* grow = g.row(i);
    double* arow = acc.row(i);
    for (int j = 0; j < k; ++j) arow[j] += dot(grow, b.row(j), n);
  }
}

void matmul_tn_acc(const Matrix& a, int a_rows, const Matrix& g, Matrix& acc) {
  const int rows = a_rows < 0 ? a.rows() : a_rows;
  const int k = a.cols();
  const int n = g.cols();
  if (g.rows() != rows || acc.rows() != k || acc.cols() != n)
    throw numeric_error("matmul_tn_acc: dimension mismatch " + a.shape_str() + "^T * " +
                        g.shape_str() + " -> " + acc.shape_str());
#pragma omp parallel for schedule(static) if (1ll * rows * n * k > kParallelCutoff)
  for (int j = 0; j < k; ++j) {
    double* arow = acc.row(j);
    for (int i = 0; i < rows; ++i) {
      const double aij = a(i, j);
      const double* grow = g.row(i);
      for (int c = 0; c < n; ++c) arow[c] += aij * grow[c];
    }
  }
}

void scale_into(const Matrix& x, double s, Matrix& y) {
  y = Matrix(x.rows(), x.cols());
  const double* in = x.data();
  double* out = y.data();
  const size_t n = x.size();
  for (size_t i = 0; i < n; ++i) out[i] = in[i] * s;
  counter::add(n);
}

// --------------------------------------------------------------------------
// Causal attention
// --------------------------------------------------------------------------

namespace {
inline int window_lo(int e, int kv_lo) { return (kv_lo > 0 && e >= kv_lo) ? kv_lo : 0; }

void attn_forward_row(const Matrix& qs, const Matrix& k, const Matrix& v, int row_start, int kv_lo,
                      int heads, Matrix& o, int r, double* s) {
  const int d = k.cols();
  const int dh = d / heads;
  const int e = row_start + r;
  const int lo = window_lo(e, kv_lo);
  const int n = e - lo + 1;
  double* orow = o.row(r);
  for (int h = 0; h < heads; ++h) {
    const int off = h * dh;
    const double* qrow = qs.row(r) + off;
    double mx = -HUGE_VAL;
    for (int p = lo; p <= e; ++p) {
      s[p - lo] = dot(qrow, k.row(p) + off, dh);
      mx = std::max(mx, s[p - lo]);
    }
    double sum = 0.0;
    for (int i = 0; i < n; ++i) {
      s[i] = std::exp(s[i] - mx);
      sum += s[i];
    }
    const double inv = 1.0 / sum;
    double* oh = orow + off;
    for (int p = lo; p <= e; ++p) {
      const double w = s[p - lo] * inv;
      const double* vrow = v.row(p) + off;
      for (int c = 0; c < dh; ++c) oh[c] += w * vrow[c];
    }
  }
}
}  // namespace

void attn_forward(const Matrix& qs, const Matrix& k, const Matrix& v, int row_start, int kv_lo,
                  int heads, Matrix& o) {
  const int tp = k.rows();
  const int d = k.cols();
  const int rows = tp - row_start;
  if (qs.rows() != rows || qs.cols() != d || !k.same_shape(v) || d % heads != 0)
    throw numeric_error("attn_forward: dimension mismatch q=" + qs.shape_str() +
                        " k=" + k.shape_str() + " v=" + v.shape_str());
  o = Matrix(rows, d);

  unsigned long long macs = 0;
#pragma omp parallel if (1ll * rows * tp * d > kParallelCutoff)
  {
    std::vector<double> scratch(tp);
    unsigned long long local = 0;
#pragma omp for schedule(static)
    for (int r = 0; r < rows; ++r) {
      attn_forward_row(qs, k, v, row_start, kv_lo, heads, o, r, scratch.data());
      const int e = row_start + r;
      local += 2ull * (e - window_lo(e, kv_lo) + 1) * d;  // score dots + weighted sums
    }
#pragma omp atomic
    macs += local;
  }
  counter::add(macs);
}

void attn_backward(const Matrix& qs, const Matrix& k, const Matrix& v, int row_start, int kv_lo,
                   int heads, const Matrix& dout, Matrix& dqs, Matrix& dk, Matrix& dv) {
  const int tp = k.rows();
  const int d = k.cols();
  const int dh = d / heads;
  const int rows = tp - row_start;

  Matrix alpha(rows, tp);
  Matrix dsc(rows, tp);
  for (int h = 0; h < heads; ++h) {
    const int off = h * dh;
    alpha.zero();
    dsc.zero();
    // per-row: recompute softmax, form d(score), accumulate query grads
#pragma omp parallel if (1ll * rows * tp * dh > kParallelCutoff)
    {
      std::vector<double> s(tp);
#pragma omp for schedule(static)
      for (int r = 0; r < rows; ++r) {
        const int e = row_start + r;
        const int lo = window_lo(e, kv_lo);
        const int n = e - lo + 1;
        const double* qrow = qs.row(r) + off;
        double mx = -HUGE_VAL;
        for (int p = lo; p <= e; ++p) {
          s[p - lo] = dot(qrow, k.row(p) + off, dh);
          mx = std::max(mx, s[p - lo]);
        }
        double sum = 0.0;
        for (int i = 0; i < n; ++i) {
          s[i] = std::exp(s[i] - mx);
          sum += s[i];
        }
        const double inv = 1.0 / sum;
        const double* go = dout.row(r) + off;
        double gamma = 0.0;
        double* arow = alpha.row(r);
        double* dsrow = dsc.row(r);
        for (int p = lo; p <= e; ++p) {
          const double a = s[p - lo] * inv;
          arow[p] = a;
          const double da = dot(go, v.row(p) + off, dh);
          dsrow[p] = da;  // stash d(alpha) first
          gamma += da * a;
        }
        double* dqrow = dqs.row(r) + off;
        for (int p = lo; p <= e; ++p) {
          const double ds = arow[p] * (dsrow[p] - gamma);
          dsrow[p] = ds;
          const double* krow = k.row(p) + off;
          for (int c = 0; c < dh; ++c) dqrow[c] += ds * krow[c];
        }
      }
    }
    // per-key: accumulate key/value grads (rows outside a window hold zeros)
#pragma omp parallel for schedule(static) if (1ll * rows * tp * dh > kParallelCutoff)
    for (int p = 0; p < tp; ++p) {
      double* dkrow = dk.row(p) + off;
      double* dvrow = dv.row(p) + off;
      const int r0 = std::max(0, p - row_start);
      for (int r = r0; r < rows; ++r) {
        const double ds = dsc(r, p);
        const double a = alpha(r, p);
        if (ds == 0.0 && a == 0.0) continue;
        const double* qrow = qs.row(r) + off;
        const double* go = dout.row(r) + off;
        for (int c = 0; c < dh; ++c) {
          dkrow[c] += ds * qrow[c];
          dvrow[c] += a * go[c];
        }
      }
    }
  }
}

// --------------------------------------------------------------------------
// Query-window aggregation
// --------------------------------------------------------------------------

namespace {

struct SlotView {
  // slot rows available at position e: slots j with row_starts[j] <= e
  static int first_slot(std::span<const int> row_starts, int e) {
    int j = 0;
    while (j < (int)row_starts.size() && row_starts[j] > e) ++j;
    return j;
  }
};

inline const double* slot_row(const Matrix& slot, int row_start, int e) {
  return slot.row(e - row_start);
}

void softmax_inplace(double* s, int n) {
  double mx = s[0];
  for (int i = 1; i < n; ++i) mx = std::max(mx, s[i]);
  double sum = 0.0;
  for (int i = 0; i < n; ++i) {
    s[i] = std::exp(s[i] - mx);
    sum += s[i];
  }
  const double inv = 1.0 / sum;
  for (int i = 0; i < n; ++i) s[i] *= inv;
}

}  // namespace

void agg_forward(std::span<const Matrix* const> slots, std::span<const int> row_starts, int tp,
                 const Matrix& wq, const Matrix& wk, const Matrix& wv, AggMode mode, Matrix& f) {
  const int m = (int)slots.size();
  const int d = wq.cols();
  const double qscale = 1.0 / std::sqrt((double)d);
  f = Matrix(tp, d);

  unsigned long long macs = 0;
#pragma omp parallel if (1ll * tp * m * d * d > kParallelCutoff)
  {
    std::vector<double> c(d), q(d), kj(d), vj(d), scores;
    std::vector<double> qrows, krows, vrows;
    unsigned long long local = 0;
#pragma omp for schedule(static)
    for (int e = 0; e < tp; ++e) {
      const int j0 = SlotView::first_slot(row_starts, e);
      const int w = m - j0;
      double* frow = f.row(e);
      scores.assign(w, 0.0);
      if (mode == AggMode::kFull) {
        qrows.assign((size_t)w * d, 0.0);
        krows.assign((size_t)w * d, 0.0);
        vrows.assign((size_t)w * d, 0.0);
        for (int j = 0; j < w; ++j) {
          const double* orow = slot_row(*slots[j0 + j], row_starts[j0 + j], e);
          double* qr = qrows.data() + (size_t)j * d;
          double* kr = krows.data() + (size_t)j * d;
          double* vr = vrows.data() + (size_t)j * d;
          for (int a = 0; a < d; ++a) {
            const double oa = orow[a];
            const double* wqr = wq.row(a);
            const double* wkr = wk.row(a);
            const double* wvr = wv.row(a);
            for (int b = 0; b < d; ++b) {
              qr[b] += oa * wqr[b];
              kr[b] += oa * wkr[b];
              vr[b] += oa * wvr[b];
            }
          }
          for (int b = 0; b < d; ++b) qr[b] *= qscale;
        }
        local += 3ull * w * d * d + (unsigned long long)w * d;  // projections + query scaling
        std::vector<double> row(w);
        std::vector<double> racc(d, 0.0);
        for (int j = 0; j < w; ++j) {
          const double* qr = qrows.data() + (size_t)j * d;
          for (int p = 0; p < w; ++p) row[p] = dot(qr, krows.data() + (size_t)p * d, d);
          softmax_inplace(row.data(), w);
          for (int p = 0; p < w; ++p) {
            const double a = row[p];
            const double* vr = vrows.data() + (size_t)p * d;
            for (int b = 0; b < d; ++b) racc[b] += a * vr[b];
          }
        }
        local += 2ull * w * w * d;  // score dots + weighted row sums
        const double invw = 1.0 / w;
        for (int b = 0; b < d; ++b) frow[b] = racc[b] * invw;
        local += (unsigned long long)w * d + d;  // mean accumulate + scale
        continue;
      }

      // context / last: one anchor query against the slot rows
      if (mode == AggMode::kContext) {
        std::fill(c.begin(), c.end(), 0.0);
        for (int j = j0; j < m; ++j) {
          const double* orow = slot_row(*slots[j], row_starts[j], e);
          for (int b = 0; b < d; ++b) c[b] += orow[b];
        }
        const double invw = 1.0 / w;
        for (int b = 0; b < d; ++b) c[b] *= invw;
        local += (unsigned long long)w * d + d;
      } else {  // kLast: anchor on the slot holding the position itself
        const double* orow = slot_row(*slots[m - 1], row_starts[m - 1], e);
        std::copy(orow, orow + d, c.begin());
      }
      std::fill(q.begin(), q.end(), 0.0);
      for (int a = 0; a < d; ++a) {
        const double ca = c[a];
        const double* wqr = wq.row(a);
        for (int b = 0; b < d; ++b) q[b] += ca * wqr[b];
      }
      for (int b = 0; b < d; ++b) q[b] *= qscale;
      local += (unsigned long long)d * d + d;
      for (int j = 0; j < w; ++j) {
        const double* orow = slot_row(*slots[j0 + j], row_starts[j0 + j], e);
        std::fill(kj.begin(), kj.end(), 0.0);
        for (int a = 0; a < d; ++a) {
          const double oa = orow[a];
          const double* wkr = wk.row(a);
          for (int b = 0; b < d; ++b) kj[b] += oa * wkr[b];
        }
        scores[j] = dot(q.data(), kj.data(), d);
      }
      local += (unsigned long long)w * d * d + (unsigned long long)w * d;
      softmax_inplace(scores.data(), w);
      for (int j = 0; j < w; ++j) {
        const double* orow = slot_row(*slots[j0 + j], row_starts[j0 + j], e);
        std::fill(vj.begin(), vj.end(), 0.0);
        for (int a = 0; a < d; ++a) {
          const double oa = orow[a];
          const double* wvr = wv.row(a);
          for (int b = 0; b < d; ++b) vj[b] += oa * wvr[b];
        }
        const double aj = scores[j];
        for (int b = 0; b < d; ++b) frow[b] += aj * vj[b];
      }
      local += (unsigned long long)w * d * d + (unsigned long long)w * d;
    }
#pragma omp atomic
    macs += local;
  }
  counter::add(macs);
}

void agg_backward(std::span<const Matrix* const> slots, std::span<const int> row_starts, int tp,
                  const Matrix& wq, const Matrix& wk, const Matrix& wv, AggMode mode,
                  const Matrix& df, std::span<Matrix* const> dslots, Matrix& dwq, Matrix& dwk,
                  Matrix& dwv) {
  const int m = (int)slots.size();
  const int d = wq.cols();
  const double qscale = 1.0 / std::sqrt((double)d);

  std::vector<double> c(d), q(d), dq(d), dc(d), tmp(d);
  std::vector<double> krows, vrows, qrows, scores, dsc;

  for (int e = 0; e < tp; ++e) {
    const int j0 = SlotView::first_slot(row_starts, e);
    const int w = m - j0;
    const double* g = df.row(e);

    // recompute per-slot projections
    krows.assign((size_t)w * d, 0.0);
    vrows.assign((size_t)w * d, 0.0);
    for (int j = 0; j < w; ++j) {
      const double* orow = slot_row(*slots[j0 + j], row_starts[j0 + j], e);
      double* kr = krows.data() + (size_t)j * d;
      double* vr = vrows.data() + (size_t)j * d;
      for (int a = 0; a < d; ++a) {
        const double oa = orow[a];
        const double* wkr = wk.row(a);
        const double* wvr = wv.row(a);
        for (int b = 0; b < d; ++b) {
          kr[b] += oa * wkr[b];
          vr[b] += oa * wvr[b];
        }
      }
    }

    if (mode == AggMode::kFull) {
      qrows.assign((size_t)w * d, 0.0);
      for (int j = 0; j < w; ++j) {
        const double* orow = slot_row(*slots[j0 + j], row_starts[j0 + j], e);
        double* qr = qrows.data() + (size_t)j * d;
        for (int a = 0; a < d; ++a) {
          const double oa = orow[a];
          const double* wqr = wq.row(a);
          for (int b = 0; b < d; ++b) qr[b] += oa * wqr[b];
        }
        for (int b = 0; b < d; ++b) qr[b] *= qscale;
      }
      const double invw = 1.0 / w;
      scores.assign((size_t)w * w, 0.0);
      for (int j = 0; j < w; ++j) {
        double* row = scores.data() + (size_t)j * w;
        const double* qr = qrows.data() + (size_t)j * d;
        for (int p = 0; p < w; ++p) row[p] = dot(qr, krows.data() + (size_t)p * d, d);
        softmax_inplace(row, w);
      }
      // dr_j = g/w for every j; backprop through each row's softmax
      dsc.assign((size_t)w * w, 0.0);
      for (int j = 0; j < w; ++j) {
        const double* arow = scores.data() + (size_t)j * w;
        double* dsrow = dsc.data() + (size_t)j * w;
        double gamma = 0.0;
        for (int p = 0; p < w; ++p) {
          const double da = dot(g, vrows.data() + (size_t)p * d, d) * invw;
          dsrow[p] = da;
          gamma += da * arow[p];
        }
        for (int p = 0; p < w; ++p) dsrow[p] = arow[p] * (dsrow[p] - gamma);
      }
      for (int j = 0; j < w; ++j) {
        const int js = j0 + j;
        const double* orow = slot_row(*slots[js], row_starts[js], e);
        double* dorow = dslots[js]->row(e - row_starts[js]);
        // value path: dv_j = (sum_p A[p][j]) * g / w
        double asum = 0.0;
        for (int p = 0; p < w; ++p) asum += scores[(size_t)p * w + j];
        for (int b = 0; b < d; ++b) tmp[b] = asum * g[b] * invw;
        for (int a = 0; a < d; ++a) {
          const double oa = orow[a];
          double* dwvr = dwv.row(a);
          double acc = 0.0;
          const double* wvr = wv.row(a);
          for (int b = 0; b < d; ++b) {
            dwvr[b] += oa * tmp[b];
            acc += wvr[b] * tmp[b];
          }
          dorow[a] += acc;
        }
        // query path: dq_j = sum_p dsc[j][p] k_p (then * qscale)
        std::fill(dq.begin(), dq.end(), 0.0);
        const double* dsrow = dsc.data() + (size_t)j * w;
        for (int p = 0; p < w; ++p) {
          const double ds = dsrow[p];
          const double* kr = krows.data() + (size_t)p * d;
          for (int b = 0; b < d; ++b) dq[b] += ds * kr[b];
        }
        for (int b = 0; b < d; ++b) dq[b] *= qscale;
        for (int a = 0; a < d; ++a) {
          const double oa = orow[a];
          double* dwqr = dwq.row(a);
          double acc = 0.0;
          const double* wqr = wq.row(a);
          for (int b = 0; b < d; ++b) {
            dwqr[b] += oa * dq[b];
            acc += wqr[b] * dq[b];
          }
          dorow[a] += acc;
        }
        // key path: dk_j = sum_p dsc[p][j] q_p
        std::fill(tmp.begin(), tmp.end(), 0.0);
        for (int p = 0; p < w; ++p) {
          const double ds = dsc[(size_t)p * w + j];
          const double* qr = qrows.data() + (size_t)p * d;
          for (int b = 0; b < d; ++b) tmp[b] += ds * qr[b];
        }
        for (int a = 0; a < d; ++a) {
          const double oa = orow[a];
          double* dwkr = dwk.row(a);
          double acc = 0.0;
          const double* wkr = wk.row(a);
          for (int b = 0; b < d; ++b) {
            dwkr[b] += oa * tmp[b];
            acc += wkr[b] * tmp[b];
          }
          dorow[a] += acc;
        }
      }
      continue;
    }

    // context / last
    if (mode == AggMode::kContext) {
      std::fill(c.begin(), c.end(), 0.0);
      for (int j = j0; j < m; ++j) {
        const double* orow = slot_row(*slots[j], row_starts[j], e);
        for (int b = 0; b < d; ++b) c[b] += orow[b];
      }
      const double invw = 1.0 / w;
      for (int b = 0; b < d; ++b) c[b] *= invw;
    } else {
      const double* orow = slot_row(*slots[m - 1], row_starts[m - 1], e);
      std::copy(orow, orow + d, c.begin());
    }
    std::fill(q.begin(), q.end(), 0.0);
    for (int a = 0; a < d; ++a) {
      const double ca = c[a];
      const double* wqr = wq.row(a);
      for (int b = 0; b < d; ++b) q[b] += ca * wqr[b];
    }
    for (int b = 0; b < d; ++b) q[b] *= qscale;

    scores.assign(w, 0.0);
    for (int j = 0; j < w; ++j)
      scores[j] = dot(q.data(), krows.data() + (size_t)j * d, d);
    softmax_inplace(scores.data(), w);

    // d(alpha_j) = <g, v_j>; softmax backward; then fan out
    dsc.assign(w, 0.0);
    double gamma = 0.0;
    for (int j = 0; j < w; ++j) {
      dsc[j] = dot(g, vrows.data() + (size_t)j * d, d);
      gamma += dsc[j] * scores[j];
    }
    for (int j = 0; j < w; ++j) dsc[j] = scores[j] * (dsc[j] - gamma);

    std::fill(dq.begin(), dq.end(), 0.0);
    for (int j = 0; j < w; ++j) {
      const int js = j0 + j;
      const double* orow = slot_row(*slots[js], row_starts[js], e);
      double* dorow = dslots[js]->row(e - row_starts[js]);
      // value path: dv_j = alpha_j g
      for (int b = 0; b < d; ++b) tmp[b] = scores[j] * g[b];
      for (int a = 0; a < d; ++a) {
        const double oa = orow[a];
        double* dwvr = dwv.row(a);
        const double* wvr = wv.row(a);
        double acc = 0.0;
        for (int b = 0; b < d; ++b) {
          dwvr[b] += oa * tmp[b];
          acc += wvr[b] * tmp[b];
        }
        dorow[a] += acc;
      }
      // key path: dk_j = dsc_j q
      for (int a = 0; a < d; ++a) {
        const double oa = orow[a];
        double* dwkr = dwk.row(a);
        const double* wkr = wk.row(a);
        double acc = 0.0;
        for (int b = 0; b < d; ++b) {
          dwkr[b] += oa * dsc[j] * q[b];
          acc += wkr[b] * dsc[j] * q[b];
        }
        dorow[a] += acc;
      }
      // query-side accumulation: dq += dsc_j k_j
      const double* kr = krows.data() + (size_t)j * d;
      for (int b = 0; b < d; ++b) dq[b] += dsc[j] * kr[b];
    }
    for (int b = 0; b < d; ++b) dq[b] *= qscale;
    // through the anchor projection
    std::fill(dc.begin(), dc.end(), 0.0);
    for (int a = 0; a < d; ++a) {
      const double ca = c[a];
      double* dwqr = dwq.row(a);
      const double* wqr = wq.row(a);
      double acc = 0.0;
      for (int b = 0; b < d; ++b) {
        dwqr[b] += ca * dq[b];
        acc += wqr[b] * dq[b];
      }
      dc[a] = acc;
    }
    if (mode == AggMode::kContext) {
      const double invw = 1.0 / w;
      for (int j = j0; j < m; ++j) {
        double* dorow = dslots[j]->row(e - row_starts[j]);
        for (int b = 0; b < d; ++b) dorow[b] += dc[b] * invw;
      }
    } else {
      double* dorow = dslots[m - 1]->row(e - row_starts[m - 1]);
      for (int b = 0; b < d; ++b) dorow[b] += dc[b];
    }
  }
}

// --------------------------------------------------------------------------
// Layer normalization
// --------------------------------------------------------------------------

void layer_norm_forward(const Matrix& x, const Matrix& gain, const Matrix& bias, double eps,
                        Matrix& y) {
  const int n = x.rows();
  const int d = x.cols();
  if ((int)gain.size() != d || (int)bias.size() != d)
    throw numeric_error("layer_norm: gain/bias length " + gain.shape_str() + "/" +
                        bias.shape_str() + " does not match row width " + std::to_string(d));
  if (eps <= 0.0) throw numeric_error("layer_norm: eps must be positive");
  y = Matrix(n, d);
  const double* g = gain.data();
  const double* b = bias.data();
#pragma omp parallel for schedule(static) if (1ll * n * d > kParallelCutoff)
  for (int i = 0; i < n; ++i) {
    const double* xr = x.row(i);
    double* yr = y.row(i);
    double mean = 0.0;
    for (int j = 0; j < d; ++j) mean += xr[j];
    mean /= d;
    double var = 0.0;
    for (int j = 0; j < d; ++j) {
      const double t = xr[j] - mean;
      var += t * t;
    }
    var /= d;
    const double rstd = 1.0 / std::sqrt(var + eps);
    for (int j = 0; j < d; ++j) yr[j] = (xr[j] - mean) * rstd * g[j] + b[j];
  }
}

void layer_norm_backward(const Matrix& x, const Matrix& gain, double eps, const Matrix& dy,
                         Matrix& dx, Matrix& dgain, Matrix& dbias) {
  const int n = x.rows();
  const int d = x.cols();
  const double* g = gain.data();
  std::vector<double> yhat(d), h(d);
  for (int i = 0; i < n; ++i) {
    const double* xr = x.row(i);
    const double* dyr = dy.row(i);
    double* dxr = dx.row(i);
    double mean = 0.0;
    for (int j = 0; j < d; ++j) mean += xr[j];
    mean /= d;
    double var = 0.0;
    for (int j = 0; j < d; ++j) {
      const double t = xr[j] - mean;
      var += t * t;
    }
    var /= d;
    const double rstd = 1.0 / std::sqrt(var + eps);
    double hmean = 0.0, hymean = 0.0;
    for (int j = 0; j < d; ++j) {
      yhat[j] = (xr[j] - mean) * rstd;
      h[j] = dyr[j] * g[j];
      hmean += h[j];
      hymean += h[j] * yhat[j];
      dgain.data()[j] += dyr[j] * yhat[j];
      dbias.data()[j] += dyr[j];
    }
    hmean /= d;
    hymean /= d;
    for (int j = 0; j < d; ++j) dxr[j] += rstd * (h[j] - hmean - yhat[j] * hymean);
  }
}

// --------------------------------------------------------------------------
// Serial reference kernels
// --------------------------------------------------------------------------

namespace ref {

Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows())
    throw numeric_error("matmul: dimension mismatch " + a.shape_str() + " * " + b.shape_str());
  Matrix c(a.rows(), b.cols());
  for (int i = 0; i < a.rows(); ++i)
    for (int k = 0; k < b.cols(); ++k) {
      double s = 0.0;
      for (int j = 0; j < a.cols(); ++j) s += a(i, j) * b(j, k);
      c(i, k) = s;
    }
  return c;
}

void attn_forward(const Matrix& qs, const Matrix& k, const Matrix& v, int row_start, int kv_lo,
                  int heads, Matrix& o) {
  const int tp = k.rows();
  const int rows = tp - row_start;
  o = Matrix(rows, k.cols());
  std::vector<double> scratch(tp);
  for (int r = 0; r < rows; ++r)
    attn_forward_row(qs, k, v, row_start, kv_lo, heads, o, r, scratch.data());
}

}  // namespace ref

}  // namespace miqrec::kernels
