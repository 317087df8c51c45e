#pragma once

#include <span>
#include <string>
#include <vector>

#include "miqrec/kernels.hpp"
#include "miqrec/matrix.hpp"

namespace miqrec::attn {

using kernels::AggMode;

AggMode agg_mode_from_string(const std::string& s);
std::string to_string(AggMode mode);

// The m slot projection matrices plus the m-1 learned dummy token embeddings.
// Slot order is chronological: slot m-1 (0-based) projects the position itself,
// slot j projects the hidden state m-1-j steps back.
struct QueryWindowParams {
  std::vector<Matrix> wq;         // m matrices, d x d
  std::vector<Matrix> dummy_emb;  // m-1 rows, 1 x d
  int window() const { return (int)wq.size(); }
};

struct AttentionWeights {
  Matrix wq, wk, wv;  // d x d
};

struct AggregatorWeights {
  Matrix wq, wk, wv;  // d x d
  AggMode mode = AggMode::kContext;
};

// Lower-triangular allow mask (1 allow, 0 deny).
Matrix causal_mask(int tp);

// Baseline masked self-attention: one query per position from that position.
Matrix single_query_attention(const Matrix& h, const AttentionWeights& w, const Matrix& mask);

// Prepend the m-1 dummy token ids. Dummy ids follow the item vocabulary:
// item_count + 1 .. item_count + m - 1. m = 1 returns the row unchanged.
std::vector<int> build_extended_sequence(std::span<const int> row, int m, int item_count);

// Per real position t (0-based, T entries): the m x d query matrix, rows in
// slot order. Queries are plain projections; score scaling happens in the
// attention itself.
std::vector<Matrix> miq_queries(const Matrix& h_ext, const QueryWindowParams& qwp);

// Per real position t: the m x d matrix of per-slot attention outputs, every
// slot attending over positions allowed by the mask row of ext(t).
std::vector<Matrix> miq_attention(const Matrix& h_ext, const QueryWindowParams& qwp,
                                  const Matrix& wk, const Matrix& wv, const Matrix& mask);

// Collapse the m per-slot outputs for one position into a single 1 x d row.
Matrix query_level_aggregate(const Matrix& o_t, const AggregatorWeights& agg);

// ---------------------------------------------------------------------------
// Closed-form multiply-add model of the attention sublayer kernels, per
// sequence and per block, with T' = T + m - 1. Terms mirror the instrumented
// counter exactly:
//   kv_proj    = 2 T' d^2                      key/value projections
//   q_proj     = (m T' - tri(m-1)) d^2         slot query projections
//   q_scale    = (m T' - tri(m-1)) d           query 1/sqrt(d) scaling
//   attn_dots  = D d                           score dot products
//   attn_wsums = D d                           attention-weighted value sums
// with D = m tri(T') - sum_{s<m} tri(s), and for m >= 2 with
// W1 = tri(m-1) + T m (slot rows summed over positions) and
// W2 = sumsq(m-1) + T m^2:
//   context: agg_proj = (T' + 2 W1) d^2, agg_mix = 2 W1 d,
//            agg_other = W1 d + 2 T' d
//   last:    same proj/mix, agg_other = T' d
//   full:    agg_proj = 3 W1 d^2, agg_mix = 2 W2 d,
//            agg_other = 2 W1 d + T' d
// Leading behavior: attention 2 D d ~ m T'^2 d; aggregation mix 2 W2 d
// ~ 2 m^2 T d (full) and 2 W1 d ~ 2 m T d (context/last).
// ---------------------------------------------------------------------------
struct FlopBreakdown {
  unsigned long long kv_proj = 0;
  unsigned long long q_proj = 0;
  unsigned long long q_scale = 0;
  unsigned long long attn_dots = 0;
  unsigned long long attn_wsums = 0;
  unsigned long long agg_proj = 0;
  unsigned long long agg_mix = 0;
  unsigned long long agg_other = 0;

  unsigned long long attention_term() const { return attn_dots + attn_wsums; }
  unsigned long long aggregation_term() const { return agg_mix; }
  unsigned long long total() const {
    return kv_proj + q_proj + q_scale + attn_dots + attn_wsums + agg_proj + agg_mix + agg_other;
  }
};

FlopBreakdown attention_flops(int seq_len, int d, int m, AggMode mode);

}  // namespace miqrec::attn
