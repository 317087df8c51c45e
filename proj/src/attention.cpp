#include "miqrec/attention.hpp"

#include <cmath>

#include "miqrec/numeric.hpp"

namespace miqrec::attn {

AggMode agg_mode_from_string(const std::string& s) {
  if (s == "context") return AggMode::kContext;
  if (s == "last") return AggMode::kLast;
  if (s == "full") return AggMode::kFull;
  throw config_error("unknown aggregator mode '" + s + "' (expected context, last or full)");
}

std::string to_string(AggMode mode) {
  switch (mode) {
    case AggMode::kContext: return "context";
    case AggMode::kLast: return "last";
    case AggMode::kFull: return "full";
  }
  return "?";
}

Matrix causal_mask(int tp) {
  if (tp < 1) throw numeric_error("causal_mask: length must be >= 1");
  Matrix m(tp, tp);
  for (int q = 0; q < tp; ++q)
    for (int p = 0; p <= q; ++p) m(q, p) = 1.0;
  return m;
}

namespace {

// one query row against keys/values under one mask row
void attend_row(const double* q, const Matrix& keys, const Matrix& values, const double* mask_row,
                double inv_sqrt_d, double* out) {
  const int tp = keys.rows();
  const int d = keys.cols();
  Matrix scores(1, tp);
  Matrix mask(1, tp);
  for (int p = 0; p < tp; ++p) {
    double s = 0.0;
    const double* kr = keys.row(p);
    for (int c = 0; c < d; ++c) s += q[c] * kr[c];
    scores(0, p) = s * inv_sqrt_d;
    mask(0, p) = mask_row[p];
  }
  Matrix alpha = numeric::masked_softmax_rows(scores, mask);
  for (int p = 0; p < tp; ++p) {
    const double a = alpha(0, p);
    if (a == 0.0) continue;
    const double* vr = values.row(p);
    for (int c = 0; c < d; ++c) out[c] += a * vr[c];
  }
}

}  // namespace

Matrix single_query_attention(const Matrix& h, const AttentionWeights& w, const Matrix& mask) {
  const int tp = h.rows();
  const int d = h.cols();
  if (mask.rows() != tp || mask.cols() != tp)
    throw numeric_error("single_query_attention: mask " + mask.shape_str() +
                        " does not match sequence " + h.shape_str());
  const Matrix q = kernels::ref::matmul(h, w.wq);
  const Matrix k = kernels::ref::matmul(h, w.wk);
  const Matrix v = kernels::ref::matmul(h, w.wv);
  const double inv = 1.0 / std::sqrt((double)d);
  Matrix out(tp, d);
  for (int e = 0; e < tp; ++e) attend_row(q.row(e), k, v, mask.row(e), inv, out.row(e));
  return out;
}

std::vector<int> build_extended_sequence(std::span<const int> row, int m, int item_count) {
  std::vector<int> out;
  out.reserve(row.size() + m - 1);
  for (int j = 1; j < m; ++j) out.push_back(item_count + j);
  out.insert(out.end(), row.begin(), row.end());
  return out;
}

std::vector<Matrix> miq_queries(const Matrix& h_ext, const QueryWindowParams& qwp) {
  const int m = qwp.window();
  const int tp = h_ext.rows();
  const int d = h_ext.cols();
  const int t_real = tp - (m - 1);
  std::vector<Matrix> out;
  out.reserve(t_real);
  for (int t = 0; t < t_real; ++t) {
    const int ext = t + m - 1;
    Matrix q(m, d);
    for (int j = 0; j < m; ++j) {
      const int src = ext - (m - 1 - j);
      const double* hrow = h_ext.row(src);
      double* qr = q.row(j);
      for (int a = 0; a < d; ++a) {
        const double ha = hrow[a];
        const double* wr = qwp.wq[j].row(a);
        for (int b = 0; b < d; ++b) qr[b] += ha * wr[b];
      }
    }
    out.push_back(std::move(q));
  }
  return out;
}

std::vector<Matrix> miq_attention(const Matrix& h_ext, const QueryWindowParams& qwp,
                                  const Matrix& wk, const Matrix& wv, const Matrix& mask) {
  const int m = qwp.window();
  const int tp = h_ext.rows();
  const int d = h_ext.cols();
  if (mask.rows() != tp || mask.cols() != tp)
    throw numeric_error("miq_attention: mask " + mask.shape_str() + " does not match sequence " +
                        h_ext.shape_str());
  const Matrix k = kernels::ref::matmul(h_ext, wk);
  const Matrix v = kernels::ref::matmul(h_ext, wv);
  const double inv = 1.0 / std::sqrt((double)d);
  const std::vector<Matrix> queries = miq_queries(h_ext, qwp);
  std::vector<Matrix> out;
  out.reserve(queries.size());
  for (size_t t = 0; t < queries.size(); ++t) {
    const int ext = (int)t + m - 1;
    Matrix o(m, d);
    for (int j = 0; j < m; ++j)
      attend_row(queries[t].row(j), k, v, mask.row(ext), inv, o.row(j));
    out.push_back(std::move(o));
  }
  return out;
}

Matrix query_level_aggregate(const Matrix& o_t, const AggregatorWeights& agg) {
  const int m = o_t.rows();
  const int d = o_t.cols();
  std::vector<const Matrix*> slots(m);
  std::vector<Matrix> rows(m);
  std::vector<int> starts(m, 0);
  for (int j = 0; j < m; ++j) {
    rows[j] = Matrix(1, d);
    std::copy(o_t.row(j), o_t.row(j) + d, rows[j].data());
    slots[j] = &rows[j];
  }
  Matrix f;
  kernels::agg_forward(slots, starts, 1, agg.wq, agg.wk, agg.wv, agg.mode, f);
  return f;
}

namespace {
inline unsigned long long tri(unsigned long long n) { return n * (n + 1) / 2; }
inline unsigned long long sum_tri(unsigned long long n) {  // sum_{s=0..n} tri(s)
  return n * (n + 1) * (n + 2) / 6;
}
inline unsigned long long sum_sq(unsigned long long n) {  // sum_{k=1..n} k^2
  return n * (n + 1) * (2 * n + 1) / 6;
}
}  // namespace

FlopBreakdown attention_flops(int seq_len, int d, int m, AggMode mode) {
  if (seq_len < 1 || d < 1 || m < 1)
    throw numeric_error("attention_flops: all dimensions must be >= 1");
  const unsigned long long T = seq_len, D = d, M = m;
  const unsigned long long tp = T + M - 1;

  FlopBreakdown fb;
  fb.kv_proj = 2 * tp * D * D;
  const unsigned long long q_rows = M * tp - tri(M - 1);
  fb.q_proj = q_rows * D * D;
  fb.q_scale = q_rows * D;
  const unsigned long long dots = M * tri(tp) - sum_tri(M - 1);
  fb.attn_dots = dots * D;
  fb.attn_wsums = dots * D;

  if (m >= 2) {
    const unsigned long long w1 = tri(M - 1) + T * M;
    const unsigned long long w2 = sum_sq(M - 1) + T * M * M;
    switch (mode) {
      case AggMode::kContext:
        fb.agg_proj = (tp + 2 * w1) * D * D;
        fb.agg_mix = 2 * w1 * D;
        fb.agg_other = w1 * D + 2 * tp * D;
        break;
      case AggMode::kLast:
        fb.agg_proj = (tp + 2 * w1) * D * D;
        fb.agg_mix = 2 * w1 * D;
        fb.agg_other = tp * D;
        break;
      case AggMode::kFull:
        fb.agg_proj = 3 * w1 * D * D;
        fb.agg_mix = 2 * w2 * D;
        fb.agg_other = 2 * w1 * D + tp * D;
        break;
    }
  }
  return fb;
}

}  // namespace miqrec::attn
