#include "miqrec/tape.hpp"

#include <cmath>

#include "miqrec/numeric.hpp"

namespace miqrec {

namespace {
std::string g_fault_op;  // test-only, set while single-threaded

// stable pieces of the logistic loss
inline double softplus(double x) {
  return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}
inline double sigmoid(double x) {
  return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}
}  // namespace

void Tape::set_pullback_fault(const std::string& op_name) { g_fault_op = op_name; }
std::string Tape::pullback_fault() { return g_fault_op; }

const Matrix& Var::value() const { return tape->value(idx); }

const Matrix& Tape::value(int idx) const { return val(idx); }

const Matrix& Tape::grad_of(Var v) const { return nodes_[v.idx].grad; }

int Tape::push(Node n) {
  nodes_.push_back(std::move(n));
  return (int)nodes_.size() - 1;
}

Matrix& Tape::ensure_grad(int i) {
  Node& n = nodes_[i];
  if (!n.has_grad) {
    const Matrix& v = val(i);
    n.grad = Matrix(v.rows(), v.cols());
    n.has_grad = true;
  }
  return n.grad;
}

Var Tape::leaf(Parameter& p) {
  Node n;
  n.leaf_val = &p.value;
  n.param = &p;
  n.op = "leaf";
  return {this, push(std::move(n))};
}

Var Tape::constant(Matrix m) {
  Node n;
  n.val = std::move(m);
  n.op = "constant";
  return {this, push(std::move(n))};
}

Var Tape::matmul(Var a, Var b) { return matmul_headrows(a, -1, b); }

Var Tape::matmul_headrows(Var a, int rows, Var b) {
  const int ia = a.idx, ib = b.idx;
  Node n;
  kernels::matmul_into(val(ia), rows, val(ib), n.val);
  n.op = "matmul";
  const int out = push(std::move(n));
  node(out).pull = [this, ia, ib, rows, out] {
    if (!has_grad(out)) return;
    const Matrix& g = nodes_[out].grad;
    kernels::matmul_nt_acc_rows(g, val(ib), ensure_grad(ia), g.rows());
    kernels::matmul_tn_acc(val(ia), rows < 0 ? val(ia).rows() : rows, g, ensure_grad(ib));
  };
  return {this, out};
}

Var Tape::add(Var a, Var b) {
  const int ia = a.idx, ib = b.idx;
  const Matrix& va = val(ia);
  const Matrix& vb = val(ib);
  require_same_shape(va, vb, "add");
  Node n;
  n.val = va;
  for (size_t i = 0; i < n.val.size(); ++i) n.val.data()[i] += vb.data()[i];
  n.op = "add";
  const int out = push(std::move(n));
  node(out).pull = [this, ia, ib, out] {
    if (!has_grad(out)) return;
    const Matrix& g = nodes_[out].grad;
    Matrix& ga = ensure_grad(ia);
    Matrix& gb = ensure_grad(ib);
    for (size_t i = 0; i < g.size(); ++i) {
      ga.data()[i] += g.data()[i];
      gb.data()[i] += g.data()[i];
    }
  };
  return {this, out};
}

Var Tape::add_row_broadcast(Var x, Var row) {
  const int ix = x.idx, ir = row.idx;
  const Matrix& vx = val(ix);
  const Matrix& vr = val(ir);
  if (vr.rows() != 1 || vr.cols() != vx.cols())
    throw numeric_error("add_row_broadcast: shape mismatch " + vx.shape_str() + " vs " +
                        vr.shape_str());
  Node n;
  n.val = vx;
  for (int i = 0; i < vx.rows(); ++i) {
    double* r = n.val.row(i);
    for (int j = 0; j < vx.cols(); ++j) r[j] += vr.data()[j];
  }
  n.op = "add_row_broadcast";
  const int out = push(std::move(n));
  node(out).pull = [this, ix, ir, out] {
    if (!has_grad(out)) return;
    const Matrix& g = nodes_[out].grad;
    Matrix& gx = ensure_grad(ix);
    Matrix& gr = ensure_grad(ir);
    for (size_t i = 0; i < g.size(); ++i) gx.data()[i] += g.data()[i];
    for (int i = 0; i < g.rows(); ++i) {
      const double* r = g.row(i);
      for (int j = 0; j < g.cols(); ++j) gr.data()[j] += r[j];
    }
  };
  return {this, out};
}

Var Tape::scale(Var x, double s) {
  const int ix = x.idx;
  Node n;
  kernels::scale_into(val(ix), s, n.val);
  n.op = "scale";
  const int out = push(std::move(n));
  node(out).pull = [this, ix, s, out] {
    if (!has_grad(out)) return;
    const Matrix& g = nodes_[out].grad;
    Matrix& gx = ensure_grad(ix);
    for (size_t i = 0; i < g.size(); ++i) gx.data()[i] += g.data()[i] * s;
  };
  return {this, out};
}

Var Tape::relu(Var x) {
  const int ix = x.idx;
  Node n;
  n.val = val(ix);
  for (size_t i = 0; i < n.val.size(); ++i)
    if (n.val.data()[i] < 0.0) n.val.data()[i] = 0.0;
  n.op = "relu";
  const int out = push(std::move(n));
  node(out).pull = [this, ix, out] {
    if (!has_grad(out)) return;
    const Matrix& g = nodes_[out].grad;
    const Matrix& vx = val(ix);
    Matrix& gx = ensure_grad(ix);
    for (size_t i = 0; i < g.size(); ++i)
      if (vx.data()[i] > 0.0) gx.data()[i] += g.data()[i];
  };
  return {this, out};
}

Var Tape::layer_norm(Var x, Var gain, Var bias, double eps) {
  const int ix = x.idx, ig = gain.idx, ib = bias.idx;
  Node n;
  kernels::layer_norm_forward(val(ix), val(ig), val(ib), eps, n.val);
  n.op = "layer_norm";
  const int out = push(std::move(n));
  node(out).pull = [this, ix, ig, ib, eps, out] {
    if (!has_grad(out)) return;
    kernels::layer_norm_backward(val(ix), val(ig), eps, nodes_[out].grad, ensure_grad(ix),
                                 ensure_grad(ig), ensure_grad(ib));
  };
  return {this, out};
}

Var Tape::dropout(Var x, double rate, RngStream& rng, bool training) {
  if (rate < 0.0 || rate >= 1.0)
    throw numeric_error("dropout: rate must be in [0, 1), got " + std::to_string(rate));
  if (!training || rate == 0.0) return x;
  const int ix = x.idx;
  const Matrix& vx = val(ix);
  Matrix mask(vx.rows(), vx.cols());
  const double keep_scale = 1.0 / (1.0 - rate);
  for (size_t i = 0; i < mask.size(); ++i)
    mask.data()[i] = rng.uniform() < rate ? 0.0 : keep_scale;
  Node n;
  n.val = Matrix(vx.rows(), vx.cols());
  for (size_t i = 0; i < vx.size(); ++i) n.val.data()[i] = vx.data()[i] * mask.data()[i];
  n.op = "dropout";
  const int out = push(std::move(n));
  node(out).pull = [this, ix, out, mask = std::move(mask)] {
    if (!has_grad(out)) return;
    const Matrix& g = nodes_[out].grad;
    Matrix& gx = ensure_grad(ix);
    for (size_t i = 0; i < g.size(); ++i) gx.data()[i] += g.data()[i] * mask.data()[i];
  };
  return {this, out};
}

Var Tape::masked_softmax(Var scores, const Matrix& mask) {
  const int is = scores.idx;
  Node n;
  n.val = numeric::masked_softmax_rows(val(is), mask);
  n.op = "masked_softmax";
  const int out = push(std::move(n));
  node(out).pull = [this, is, out] {
    if (!has_grad(out)) return;
    const Matrix& g = nodes_[out].grad;
    const Matrix& y = nodes_[out].val;
    Matrix& gs = ensure_grad(is);
    for (int i = 0; i < y.rows(); ++i) {
      const double* yr = y.row(i);
      const double* gr = g.row(i);
      double gamma = 0.0;
      for (int j = 0; j < y.cols(); ++j) gamma += gr[j] * yr[j];
      double* out_r = gs.row(i);
      for (int j = 0; j < y.cols(); ++j) out_r[j] += yr[j] * (gr[j] - gamma);
    }
  };
  return {this, out};
}

Var Tape::gather_rows(Var table, std::vector<int> ids) {
  const int it = table.idx;
  const Matrix& t = val(it);
  Node n;
  n.val = Matrix((int)ids.size(), t.cols());
  for (int i = 0; i < (int)ids.size(); ++i) {
    const int id = ids[i];
    if (id < 0 || id >= t.rows())
      throw data_error("gather_rows: id " + std::to_string(id) + " outside table with " +
                       std::to_string(t.rows()) + " rows");
    std::copy(t.row(id), t.row(id) + t.cols(), n.val.row(i));
  }
  n.op = "gather_rows";
  const int out = push(std::move(n));
  node(out).pull = [this, it, out, ids = std::move(ids)] {
    if (!has_grad(out)) return;
    const Matrix& g = nodes_[out].grad;
    Matrix& gt = ensure_grad(it);
    for (int i = 0; i < (int)ids.size(); ++i) {
      if (ids[i] == 0) continue;  // padding row stays zero
      const double* src = g.row(i);
      double* dst = gt.row(ids[i]);
      for (int j = 0; j < g.cols(); ++j) dst[j] += src[j];
    }
  };
  return {this, out};
}

Var Tape::select_rows(Var x, int r0, int r1) {
  const int ix = x.idx;
  const Matrix& vx = val(ix);
  Node n;
  n.val = Matrix(r1 - r0, vx.cols());
  std::copy(vx.row(r0), vx.row(r0) + n.val.size(), n.val.data());
  n.op = "select_rows";
  const int out = push(std::move(n));
  node(out).pull = [this, ix, r0, out] {
    if (!has_grad(out)) return;
    const Matrix& g = nodes_[out].grad;
    Matrix& gx = ensure_grad(ix);
    for (int i = 0; i < g.rows(); ++i) {
      const double* src = g.row(i);
      double* dst = gx.row(r0 + i);
      for (int j = 0; j < g.cols(); ++j) dst[j] += src[j];
    }
  };
  return {this, out};
}

Var Tape::causal_attention(Var qs, Var k, Var v, int row_start, int kv_lo, int heads) {
  const int iq = qs.idx, ik = k.idx, iv = v.idx;
  Node n;
  kernels::attn_forward(val(iq), val(ik), val(iv), row_start, kv_lo, heads, n.val);
  n.op = "causal_attention";
  const int out = push(std::move(n));
  node(out).pull = [this, iq, ik, iv, row_start, kv_lo, heads, out] {
    if (!has_grad(out)) return;
    kernels::attn_backward(val(iq), val(ik), val(iv), row_start, kv_lo, heads, nodes_[out].grad,
                           ensure_grad(iq), ensure_grad(ik), ensure_grad(iv));
  };
  return {this, out};
}

Var Tape::window_aggregate(const std::vector<Var>& slots, std::vector<int> row_starts, int tp,
                           Var wq, Var wk, Var wv, kernels::AggMode mode) {
  std::vector<int> slot_idx(slots.size());
  std::vector<const Matrix*> views(slots.size());
  for (size_t j = 0; j < slots.size(); ++j) {
    slot_idx[j] = slots[j].idx;
    views[j] = &val(slot_idx[j]);
  }
  const int iq = wq.idx, ik = wk.idx, iv = wv.idx;
  Node n;
  kernels::agg_forward(views, row_starts, tp, val(iq), val(ik), val(iv), mode, n.val);
  n.op = "window_aggregate";
  const int out = push(std::move(n));
  node(out).pull = [this, slot_idx = std::move(slot_idx), row_starts = std::move(row_starts), tp,
                    iq, ik, iv, mode, out] {
    if (!has_grad(out)) return;
    std::vector<const Matrix*> views(slot_idx.size());
    std::vector<Matrix*> dviews(slot_idx.size());
    for (size_t j = 0; j < slot_idx.size(); ++j) {
      views[j] = &val(slot_idx[j]);
      dviews[j] = &ensure_grad(slot_idx[j]);
    }
    kernels::agg_backward(views, row_starts, tp, val(iq), val(ik), val(iv), mode,
                          nodes_[out].grad, dviews, ensure_grad(iq), ensure_grad(ik),
                          ensure_grad(iv));
  };
  return {this, out};
}

Var Tape::rows_dot(Var a, Var b) {
  const int ia = a.idx, ib = b.idx;
  const Matrix& va = val(ia);
  const Matrix& vb = val(ib);
  require_same_shape(va, vb, "rows_dot");
  Node n;
  n.val = Matrix(va.rows(), 1);
  for (int i = 0; i < va.rows(); ++i) {
    double s = 0.0;
    const double* ar = va.row(i);
    const double* br = vb.row(i);
    for (int j = 0; j < va.cols(); ++j) s += ar[j] * br[j];
    n.val(i, 0) = s;
  }
  n.op = "rows_dot";
  const int out = push(std::move(n));
  node(out).pull = [this, ia, ib, out] {
    if (!has_grad(out)) return;
    const Matrix& g = nodes_[out].grad;
    const Matrix& va = val(ia);
    const Matrix& vb = val(ib);
    Matrix& ga = ensure_grad(ia);
    Matrix& gb = ensure_grad(ib);
    for (int i = 0; i < va.rows(); ++i) {
      const double gi = g(i, 0);
      if (gi == 0.0) continue;
      double* gar = ga.row(i);
      double* gbr = gb.row(i);
      const double* ar = va.row(i);
      const double* br = vb.row(i);
      for (int j = 0; j < va.cols(); ++j) {
        gar[j] += gi * br[j];
        gbr[j] += gi * ar[j];
      }
    }
  };
  return {this, out};
}

Var Tape::bce_sum(Var pos, Var neg, std::vector<uint8_t> valid) {
  const int ip = pos.idx, in_ = neg.idx;
  const Matrix& vp = val(ip);
  const Matrix& vn = val(in_);
  require_same_shape(vp, vn, "bce_sum");
  if ((size_t)vp.rows() != valid.size())
    throw numeric_error("bce_sum: valid mask length mismatch");
  double total = 0.0;
  int count = 0;
  for (int i = 0; i < vp.rows(); ++i) {
    if (!valid[i]) continue;
    total += softplus(-vp(i, 0)) + softplus(vn(i, 0));
    ++count;
  }
  if (count == 0) throw numeric_error("bce_sum: batch has no valid positions");
  Node n;
  n.val = Matrix(1, 1);
  n.val(0, 0) = total;
  n.op = "bce_sum";
  const int out = push(std::move(n));
  node(out).pull = [this, ip, in_, out, valid = std::move(valid)] {
    if (!has_grad(out)) return;
    const double g = nodes_[out].grad(0, 0);
    const Matrix& vp = val(ip);
    const Matrix& vn = val(in_);
    Matrix& gp = ensure_grad(ip);
    Matrix& gn = ensure_grad(in_);
    for (int i = 0; i < vp.rows(); ++i) {
      if (!valid[i]) continue;
      gp(i, 0) += g * (sigmoid(vp(i, 0)) - 1.0);
      gn(i, 0) += g * sigmoid(vn(i, 0));
    }
  };
  return {this, out};
}

void Tape::backward(Var loss) {
  if (consumed_)
    throw numeric_error("backward: graph already consumed; run a new forward pass first");
  consumed_ = true;
  const Matrix& lv = val(loss.idx);
  if (lv.rows() != 1 || lv.cols() != 1)
    throw numeric_error("backward: loss must be 1x1, got " + lv.shape_str());
  if (!std::isfinite(lv(0, 0))) throw numeric_error("backward: loss is not finite");
  ensure_grad(loss.idx)(0, 0) = 1.0;
  for (int i = loss.idx; i >= 0; --i) {
    Node& n = nodes_[i];
    if (!g_fault_op.empty() && n.has_grad && g_fault_op == n.op)
      for (size_t j = 0; j < n.grad.size(); ++j) n.grad.data()[j] *= 1.001;
    if (n.pull) n.pull();
    if (n.param && n.has_grad)
      for (size_t j = 0; j < n.grad.size(); ++j) n.param->grad.data()[j] += n.grad.data()[j];
  }
}

}  // namespace miqrec
