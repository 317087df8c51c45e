#include "miqrec/train.hpp"

#include <algorithm>
#include <cmath>

#include "miqrec/io_util.hpp"

namespace miqrec::train {

void TrainConfig::validate() const {
  if (lr <= 0.0) throw config_error("train: lr must be positive");
  if (batch_size < 1) throw config_error("train: batch_size must be >= 1");
  if (max_epochs < 1) throw config_error("train: max_epochs must be >= 1");
  if (eval_every < 1) throw config_error("train: eval_every must be >= 1");
  if (patience < 1) throw config_error("train: patience must be >= 1");
}

namespace {
inline double softplus(double x) {
  return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}
}  // namespace

double bce_loss(const Matrix& pos_logits, const Matrix& neg_logits,
                const std::vector<uint8_t>& valid) {
  require_same_shape(pos_logits, neg_logits, "bce_loss");
  if (pos_logits.size() != valid.size()) throw numeric_error("bce_loss: mask length mismatch");
  double total = 0.0;
  long long count = 0;
  for (size_t i = 0; i < valid.size(); ++i) {
    if (!valid[i]) continue;
    total += softplus(-pos_logits.data()[i]) + softplus(neg_logits.data()[i]);
    ++count;
  }
  if (count == 0) throw numeric_error("bce_loss: no valid positions");
  return total / (double)count;
}

namespace {

struct TrainRow {
  std::vector<int> input;            // T ids, left padded
  std::vector<int> target;           // aligned next items, 0 = invalid
  std::vector<uint8_t> valid;
  const data::UserSplit* user = nullptr;
};

// next-item pairs from the train prefix; users with fewer than 2 train items
// contribute nothing
std::optional<TrainRow> make_row(const data::UserSplit& s, int seq_len) {
  const size_t n = s.train.size();
  if (n < 2) return std::nullopt;
  const std::span<const int> inputs(s.train.data(), n - 1);
  const std::span<const int> targets(s.train.data() + 1, n - 1);
  TrainRow row;
  row.input = data::pad_truncate(inputs, seq_len);
  row.target = data::pad_truncate(targets, seq_len);
  row.valid.resize(seq_len);
  for (int t = 0; t < seq_len; ++t) row.valid[t] = row.target[t] != 0;
  row.user = &s;
  return row;
}

}  // namespace

double train_epoch(model::SeqRecModel& m, const data::SplitSet& split, const TrainConfig& tc,
                   Adam& opt, RngStream& rng) {
  const int seq_len = m.config().seq_len;
  const int items = m.item_count();

  std::vector<int> order(split.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = (int)i;
  for (size_t i = order.size(); i > 1; --i)
    std::swap(order[i - 1], order[rng.below(i)]);

  double total_loss = 0.0;
  long long total_valid = 0;
  std::vector<char> owned(items + 1, 0);

  size_t cursor = 0;
  while (cursor < order.size()) {
    Tape tape;
    const model::ModelVars mv = m.bind(tape);
    Var batch_sum;
    long long batch_valid = 0;
    int rows_in_batch = 0;

    while (cursor < order.size() && rows_in_batch < tc.batch_size) {
      const data::UserSplit& s = split[order[cursor++]];
      auto row = make_row(s, seq_len);
      if (!row) continue;
      ++rows_in_batch;

      // negatives avoid the user's complete item set
      std::fill(owned.begin(), owned.end(), 0);
      for (int it : s.train) owned[it] = 1;
      owned[s.valid] = 1;
      owned[s.test] = 1;
      std::vector<int> neg(seq_len, 0);
      for (int t = 0; t < seq_len; ++t)
        if (row->valid[t]) {
          neg[t] = data::sample_negative(rng, owned, items);
          ++batch_valid;
        }

      const model::ForwardOut fo = m.forward_row(tape, mv, row->input, true, &rng);
      Var pos_emb = tape.gather_rows(mv.emb, row->target);
      Var neg_emb = tape.gather_rows(mv.emb, std::move(neg));
      Var pos_logits = tape.rows_dot(fo.real, pos_emb);
      Var neg_logits = tape.rows_dot(fo.real, neg_emb);
      Var row_sum = tape.bce_sum(pos_logits, neg_logits, std::move(row->valid));
      batch_sum = batch_sum.valid() ? tape.add(batch_sum, row_sum) : row_sum;
    }
    if (rows_in_batch == 0 || batch_valid == 0) continue;

    Var loss = tape.scale(batch_sum, 1.0 / (double)batch_valid);
    const double loss_value = loss.value()(0, 0);
    if (!std::isfinite(loss_value))
      throw numeric_error("train_epoch: loss diverged to a non-finite value");
    opt.zero_grads();
    tape.backward(loss);
    opt.step();

    total_loss += loss_value * (double)batch_valid;
    total_valid += batch_valid;
  }
  if (total_valid == 0) throw numeric_error("train_epoch: no trainable positions in split");
  return total_loss / (double)total_valid;
}

FitResult fit(model::SeqRecModel& m, const data::SplitSet& split, const TrainConfig& tc,
              const std::string& checkpoint_path,
              const std::function<void(const TrainHistory&)>& on_epoch) {
  tc.validate();
  RngStream rng(tc.seed);
  Adam opt(m.parameters(), tc.adam());
  FitResult out;
  const std::vector<int> ks{10};
  int evals_since_best = 0;

  for (int epoch = 1; epoch <= tc.max_epochs; ++epoch) {
    EpochRecord rec;
    rec.epoch = epoch;
    rec.loss = train_epoch(m, split, tc, opt, rng);
    bool stop = false;
    if (epoch % tc.eval_every == 0) {
      const eval::MetricReport rep = eval::evaluate(m, split, eval::Phase::kValid, ks);
      rec.evaluated = true;
      rec.val_hr10 = rep.hr[0];
      rec.val_ndcg10 = rep.ndcg[0];
      if (rec.val_ndcg10 > out.history.best_ndcg10) {
        out.history.best_ndcg10 = rec.val_ndcg10;
        out.history.best_epoch = epoch;
        m.save(out.best_checkpoint);
        if (!checkpoint_path.empty()) io::write_file_atomic(checkpoint_path, out.best_checkpoint);
        evals_since_best = 0;
      } else {
        ++evals_since_best;
      }
      stop = evals_since_best >= tc.patience;
    }
    out.history.epochs.push_back(rec);
    if (on_epoch) on_epoch(out.history);
    if (stop) break;
  }

  if (!out.best_checkpoint.empty()) {
    const model::SeqRecModel best =
        model::SeqRecModel::load_from_buffer(out.best_checkpoint, "best checkpoint");
    m.copy_values_from(best);
  }
  return out;
}

std::string history_csv(const TrainHistory& h) {
  std::string out = "epoch,loss,val_hr10,val_ndcg10\n";
  for (const EpochRecord& r : h.epochs) {
    out += std::to_string(r.epoch) + "," + io::fmt_double(r.loss) + ",";
    if (r.evaluated)
      out += io::fmt_double(r.val_hr10) + "," + io::fmt_double(r.val_ndcg10);
    else
      out += ",";
    out += "\n";
  }
  return out;
}

GradCheckReport gradcheck_model(model::SeqRecModel& m, int rows, uint64_t seed, double epsilon,
                                double tolerance) {
  const int seq_len = m.config().seq_len;
  const int items = m.item_count();
  RngStream rng(seed);
  // full-length rows: the pinned zero padding row must stay out of the graph
  std::vector<std::vector<int>> inputs(rows), targets(rows), negs(rows);
  for (int r = 0; r < rows; ++r) {
    for (int t = 0; t < seq_len; ++t) {
      inputs[r].push_back((int)rng.below(items) + 1);
      targets[r].push_back((int)rng.below(items) + 1);
      negs[r].push_back((int)rng.below(items) + 1);
    }
  }
  const std::vector<uint8_t> all_valid(seq_len, 1);
  const long long count = (long long)rows * seq_len;

  auto loss_of = [&](Tape& tape) {
    const model::ModelVars mv = m.bind(tape);
    Var sum;
    for (int r = 0; r < rows; ++r) {
      const model::ForwardOut fo = m.forward_row(tape, mv, inputs[r], false, nullptr);
      Var pos = tape.rows_dot(fo.real, tape.gather_rows(mv.emb, targets[r]));
      Var neg = tape.rows_dot(fo.real, tape.gather_rows(mv.emb, negs[r]));
      Var s = tape.bce_sum(pos, neg, all_valid);
      sum = sum.valid() ? tape.add(sum, s) : s;
    }
    return tape.scale(sum, 1.0 / (double)count);
  };

  auto params = m.parameters();
  for (Parameter* p : params) p->zero_grad();
  {
    Tape tape;
    Var loss = loss_of(tape);
    tape.backward(loss);
  }
  auto objective = [&]() {
    Tape tape;
    return loss_of(tape).value()(0, 0);
  };

  GradCheckReport rep;
  rep.tolerance = tolerance;
  rep.groups = numeric::compare_to_finite_diff(params, objective, epsilon);
  rep.pass = true;
  for (const auto& g : rep.groups)
    if (!(g.max_rel_error < tolerance)) rep.pass = false;
  return rep;
}

}  // namespace miqrec::train
