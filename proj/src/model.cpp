#include "miqrec/model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "miqrec/data.hpp"
#include "miqrec/io_util.hpp"

namespace miqrec::model {

void ModelConfig::validate() const {
  if (d < 1) throw config_error("model: d must be >= 1");
  if (seq_len < 1) throw config_error("model: t must be >= 1");
  if (blocks < 1) throw config_error("model: blocks must be >= 1");
  if (m < 1) throw config_error("model: m must be >= 1");
  if (dropout < 0.0 || dropout >= 1.0) throw config_error("model: dropout must be in [0, 1)");
  if (heads < 1 || d % heads != 0) throw config_error("model: heads must divide d");
}

SeqRecModel::SeqRecModel(ModelConfig cfg, int item_count, PrivateTag)
    : cfg_(cfg), item_count_(item_count) {
  cfg_.validate();
  if (item_count < 1) throw config_error("model: item count must be >= 1");
  allocate();
}

void SeqRecModel::allocate() {
  const int d = cfg_.d;
  const int m = cfg_.m;
  const int tp = cfg_.extended_len();
  auto add = [&](const std::string& name, int rows, int cols) {
    params_.push_back(std::make_unique<Parameter>(name, Matrix(rows, cols)));
    return (int)params_.size() - 1;
  };
  // embedding table rows: 0 padding, 1..item_count items, then m-1 dummies
  add("emb", item_count_ + m, d);
  add("pos", tp, d);
  blk_.clear();
  for (int b = 0; b < cfg_.blocks; ++b) {
    const std::string pre = "blk" + std::to_string(b) + ".";
    std::vector<int> ids;
    for (int j = 0; j < m; ++j) ids.push_back(add(pre + "attn.wq" + std::to_string(j), d, d));
    ids.push_back(add(pre + "attn.wk", d, d));
    ids.push_back(add(pre + "attn.wv", d, d));
    ids.push_back(add(pre + "ffn.w1", d, d));
    ids.push_back(add(pre + "ffn.b1", 1, d));
    ids.push_back(add(pre + "ffn.w2", d, d));
    ids.push_back(add(pre + "ffn.b2", 1, d));
    ids.push_back(add(pre + "norm1.gain", 1, d));
    ids.push_back(add(pre + "norm1.bias", 1, d));
    ids.push_back(add(pre + "norm2.gain", 1, d));
    ids.push_back(add(pre + "norm2.bias", 1, d));
    blk_.push_back(std::move(ids));
  }
  if (m >= 2) {
    agg_base_ = add("agg.wq", d, d);
    add("agg.wk", d, d);
    add("agg.wv", d, d);
  }
}

SeqRecModel::SeqRecModel(ModelConfig cfg, int item_count, RngStream& rng)
    : SeqRecModel(cfg, item_count, PrivateTag{}) {
  constexpr double kInitSigma = 0.02;
  auto draw_all = [&](Parameter& p) {
    for (size_t i = 0; i < p.value.size(); ++i) p.value.data()[i] = rng.truncated_normal(kInitSigma);
  };
  // embedding rows 1.. (row 0 stays zero), positions, then per-block weights
  Parameter& emb = *params_[0];
  for (int r = 1; r < emb.value.rows(); ++r)
    for (int c = 0; c < emb.value.cols(); ++c) emb.value(r, c) = rng.truncated_normal(kInitSigma);
  draw_all(*params_[1]);
  for (const auto& ids : blk_) {
    const int m = cfg_.m;
    for (int j = 0; j < m; ++j) draw_all(*params_[ids[j]]);
    draw_all(*params_[ids[m]]);      // wk
    draw_all(*params_[ids[m + 1]]);  // wv
    draw_all(*params_[ids[m + 2]]);  // ffn.w1
    draw_all(*params_[ids[m + 4]]);  // ffn.w2
    params_[ids[m + 6]]->value.fill(1.0);  // norm1.gain
    params_[ids[m + 8]]->value.fill(1.0);  // norm2.gain
  }
  if (agg_base_ >= 0)
    for (int k = 0; k < 3; ++k) draw_all(*params_[agg_base_ + k]);
}

std::vector<Parameter*> SeqRecModel::parameters() const {
  std::vector<Parameter*> out;
  out.reserve(params_.size());
  for (const auto& p : params_) out.push_back(p.get());
  return out;
}

Parameter& SeqRecModel::param(const std::string& name) const {
  for (const auto& p : params_)
    if (p->name == name) return *p;
  throw numeric_error("unknown parameter: " + name);
}

ModelVars SeqRecModel::bind(Tape& tape) const {
  ModelVars mv;
  mv.emb = tape.leaf(*params_[0]);
  mv.pos = tape.leaf(*params_[1]);
  const int m = cfg_.m;
  for (const auto& ids : blk_) {
    ModelVars::BlockVars bv;
    for (int j = 0; j < m; ++j) bv.wq.push_back(tape.leaf(*params_[ids[j]]));
    bv.wk = tape.leaf(*params_[ids[m]]);
    bv.wv = tape.leaf(*params_[ids[m + 1]]);
    bv.w1 = tape.leaf(*params_[ids[m + 2]]);
    bv.b1 = tape.leaf(*params_[ids[m + 3]]);
    bv.w2 = tape.leaf(*params_[ids[m + 4]]);
    bv.b2 = tape.leaf(*params_[ids[m + 5]]);
    bv.ln1g = tape.leaf(*params_[ids[m + 6]]);
    bv.ln1b = tape.leaf(*params_[ids[m + 7]]);
    bv.ln2g = tape.leaf(*params_[ids[m + 8]]);
    bv.ln2b = tape.leaf(*params_[ids[m + 9]]);
    mv.blocks.push_back(std::move(bv));
  }
  if (agg_base_ >= 0) {
    mv.agg_wq = tape.leaf(*params_[agg_base_]);
    mv.agg_wk = tape.leaf(*params_[agg_base_ + 1]);
    mv.agg_wv = tape.leaf(*params_[agg_base_ + 2]);
  }
  return mv;
}

Var attention_sublayer(Tape& tape, const SublayerVars& sv, Var x, int m, int heads, bool dummy_kv,
                       attn::AggMode mode) {
  const int tp = x.value().rows();
  const int d = x.value().cols();
  const int d_head = d / heads;
  const double inv_sqrt = 1.0 / std::sqrt((double)d_head);
  const int kv_lo = dummy_kv ? 0 : m - 1;

  Var k = tape.matmul(x, sv.wk);
  Var v = tape.matmul(x, sv.wv);
  std::vector<Var> slots;
  std::vector<int> row_starts;
  slots.reserve(m);
  for (int j = 0; j < m; ++j) {
    const int shift = m - 1 - j;  // slot j reads the hidden state `shift` steps back
    Var q = tape.matmul_headrows(x, tp - shift, sv.wq[j]);
    Var qs = tape.scale(q, inv_sqrt);
    slots.push_back(tape.causal_attention(qs, k, v, shift, kv_lo, heads));
    row_starts.push_back(shift);
  }
  if (m == 1) return slots[0];
  return tape.window_aggregate(slots, std::move(row_starts), tp, sv.agg_wq, sv.agg_wk, sv.agg_wv,
                               mode);
}

ForwardOut SeqRecModel::forward_row(Tape& tape, const ModelVars& mv,
                                    std::span<const int> padded_row, bool training,
                                    RngStream* rng) const {
  if ((int)padded_row.size() != cfg_.seq_len)
    throw data_error("forward_row: expected a row of length " + std::to_string(cfg_.seq_len));
  const int m = cfg_.m;
  RngStream dummy_rng(0);
  RngStream& r = rng ? *rng : dummy_rng;
  if (training && !rng && cfg_.dropout > 0.0)
    throw numeric_error("forward_row: training mode needs an RNG for dropout");

  std::vector<int> ids = attn::build_extended_sequence(padded_row, m, item_count_);
  Var x = tape.gather_rows(mv.emb, std::move(ids));
  x = tape.add(x, mv.pos);
  x = tape.dropout(x, cfg_.dropout, r, training);

  for (const auto& bv : mv.blocks) {
    SublayerVars sv{bv.wq, bv.wk, bv.wv, mv.agg_wq, mv.agg_wk, mv.agg_wv};
    Var a = attention_sublayer(tape, sv, x, m, cfg_.heads, cfg_.dummy_kv, cfg_.agg);
    x = tape.layer_norm(tape.add(x, tape.dropout(a, cfg_.dropout, r, training)), bv.ln1g, bv.ln1b,
                        kLayerNormEps);
    Var f = tape.add_row_broadcast(tape.matmul(x, bv.w1), bv.b1);
    f = tape.add_row_broadcast(tape.matmul(tape.relu(f), bv.w2), bv.b2);
    x = tape.layer_norm(tape.add(x, tape.dropout(f, cfg_.dropout, r, training)), bv.ln2g, bv.ln2b,
                        kLayerNormEps);
  }
  ForwardOut out;
  out.extended = x;
  out.real = m == 1 ? x : tape.select_rows(x, m - 1, cfg_.extended_len());
  return out;
}

std::vector<double> SeqRecModel::score_items(std::span<const double> f_t) const {
  if ((int)f_t.size() != cfg_.d) throw numeric_error("score_items: feature width mismatch");
  const Matrix& emb = params_[0]->value;
  std::vector<double> logits(item_count_ + 1, -HUGE_VAL);
  for (int i = 1; i <= item_count_; ++i) {
    const double* er = emb.row(i);
    double s = 0.0;
    for (int c = 0; c < cfg_.d; ++c) s += f_t[c] * er[c];
    logits[i] = s;
  }
  return logits;
}

std::vector<int> SeqRecModel::predict_next(std::span<const int> raw_sequence) const {
  if (raw_sequence.empty()) throw data_error("predict_next: empty sequence");
  const std::vector<int> row = data::pad_truncate(raw_sequence, cfg_.seq_len);
  Tape tape;
  const ModelVars mv = bind(tape);
  const ForwardOut fo = forward_row(tape, mv, row, false, nullptr);
  const Matrix& h = fo.real.value();
  const double* f = h.row(cfg_.seq_len - 1);
  const std::vector<double> logits = score_items({f, (size_t)cfg_.d});
  std::vector<int> order(item_count_);
  std::iota(order.begin(), order.end(), 1);
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    if (logits[a] != logits[b]) return logits[a] > logits[b];
    return a < b;
  });
  return order;
}

long long miq_param_delta(int d, int blocks, int m) {
  if (m <= 1) return 0;
  const long long dd = (long long)d * d;
  return (long long)blocks * (m - 1) * dd  // extra slot projections
         + (long long)(m - 1) * d          // dummy embeddings
         + (long long)(m - 1) * d          // positional extension
         + 3 * dd;                         // shared aggregator
}

ParamAudit SeqRecModel::param_count() const {
  ParamAudit audit;
  for (const auto& p : params_) {
    long long n = (long long)p->value.size();
    if (p->name == "emb") {
      // itemize the table: padding+items vs dummy rows
      const long long dummy = (long long)(cfg_.m - 1) * cfg_.d;
      audit.items.push_back({"emb.items", n - dummy});
      if (dummy > 0) audit.items.push_back({"emb.dummies", dummy});
    } else {
      audit.items.push_back({p->name, n});
    }
    audit.total += n;
  }
  return audit;
}

// ---------------------------------------------------------------------------
// Checkpoint format: magic "MIQR", u16 version, length-prefixed key=value
// config text, then per-parameter records (name, rows, cols, f64 data, all
// little endian). Round-trips bit-exactly.
// ---------------------------------------------------------------------------

namespace {
constexpr char kMagic[4] = {'M', 'I', 'Q', 'R'};
constexpr uint16_t kVersion = 1;
}  // namespace

void SeqRecModel::save(std::string& out) const {
  out.clear();
  io::append_bytes(out, kMagic, 4);
  io::append_u16(out, kVersion);
  std::string cfg;
  cfg += "d=" + std::to_string(cfg_.d) + "\n";
  cfg += "t=" + std::to_string(cfg_.seq_len) + "\n";
  cfg += "blocks=" + std::to_string(cfg_.blocks) + "\n";
  cfg += "m=" + std::to_string(cfg_.m) + "\n";
  cfg += "dropout=" + io::fmt_double(cfg_.dropout) + "\n";
  cfg += "agg=" + attn::to_string(cfg_.agg) + "\n";
  cfg += "dummy_kv=" + std::string(cfg_.dummy_kv ? "on" : "off") + "\n";
  cfg += "heads=" + std::to_string(cfg_.heads) + "\n";
  cfg += "seed=" + std::to_string(cfg_.seed) + "\n";
  cfg += "items=" + std::to_string(item_count_) + "\n";
  io::append_str(out, cfg);
  io::append_u32(out, (uint32_t)params_.size());
  for (const auto& p : params_) {
    io::append_str(out, p->name);
    io::append_u32(out, (uint32_t)p->value.rows());
    io::append_u32(out, (uint32_t)p->value.cols());
    for (size_t i = 0; i < p->value.size(); ++i) io::append_f64(out, p->value.data()[i]);
  }
}

void SeqRecModel::save(const std::string& path) const {
  std::string buf;
  save(buf);
  io::write_file_atomic(path, buf);
}

SeqRecModel SeqRecModel::load_from_buffer(const std::string& buf, const std::string& origin) {
  io::Reader r(buf, origin);
  char magic[4];
  r.bytes(magic, 4);
  if (std::memcmp(magic, kMagic, 4) != 0)
    throw data_error(origin + ": not a checkpoint (bad magic)");
  if (r.u16() != kVersion) throw data_error(origin + ": unsupported checkpoint version");
  const std::string cfg_text = r.str();

  ModelConfig cfg;
  int items = 0;
  size_t pos = 0;
  while (pos < cfg_text.size()) {
    size_t eol = cfg_text.find('\n', pos);
    if (eol == std::string::npos) eol = cfg_text.size();
    const std::string line = cfg_text.substr(pos, eol - pos);
    pos = eol + 1;
    const size_t eq = line.find('=');
    if (eq == std::string::npos) continue;
    const std::string key = line.substr(0, eq);
    const std::string val = line.substr(eq + 1);
    if (key == "d") cfg.d = std::stoi(val);
    else if (key == "t") cfg.seq_len = std::stoi(val);
    else if (key == "blocks") cfg.blocks = std::stoi(val);
    else if (key == "m") cfg.m = std::stoi(val);
    else if (key == "dropout") cfg.dropout = std::stod(val);
    else if (key == "agg") cfg.agg = attn::agg_mode_from_string(val);
    else if (key == "dummy_kv") cfg.dummy_kv = val == "on";
    else if (key == "heads") cfg.heads = std::stoi(val);
    else if (key == "seed") cfg.seed = (uint64_t)std::stoull(val);
    else if (key == "items") items = std::stoi(val);
    else throw data_error(origin + ": unknown checkpoint config key '" + key + "'");
  }

  SeqRecModel model(cfg, items, PrivateTag{});
  const uint32_t n = r.u32();
  if (n != model.params_.size())
    throw data_error(origin + ": parameter count mismatch");
  for (uint32_t i = 0; i < n; ++i) {
    const std::string name = r.str();
    const uint32_t rows = r.u32();
    const uint32_t cols = r.u32();
    Parameter& p = *model.params_[i];
    if (p.name != name || (int)rows != p.value.rows() || (int)cols != p.value.cols())
      throw data_error(origin + ": unexpected parameter record '" + name + "'");
    for (size_t k = 0; k < p.value.size(); ++k) p.value.data()[k] = r.f64();
  }
  return model;
}

SeqRecModel SeqRecModel::load(const std::string& path) {
  return load_from_buffer(io::read_file(path), path);
}

void SeqRecModel::copy_values_from(const SeqRecModel& other) {
  if (other.params_.size() != params_.size())
    throw numeric_error("copy_values_from: model layouts differ");
  for (size_t i = 0; i < params_.size(); ++i) {
    Parameter& dst = *params_[i];
    const Parameter& src = *other.params_[i];
    if (dst.name != src.name || !dst.value.same_shape(src.value))
      throw numeric_error("copy_values_from: parameter mismatch at " + dst.name);
    dst.value = src.value;
  }
}

}  // namespace miqrec::model
