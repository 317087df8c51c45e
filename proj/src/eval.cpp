#include "miqrec/eval.hpp"

#include <cmath>

#include "miqrec/io_util.hpp"

namespace miqrec::eval {

int rank_of_target(std::span<const double> scores, int target, const std::vector<char>& history) {
  if (target < 1 || target >= (int)scores.size())
    throw data_error("rank_of_target: target " + std::to_string(target) +
                     " outside score vector of size " + std::to_string(scores.size()));
  const double st = scores[target];
  int rank = 1;
  for (int i = 1; i < (int)scores.size(); ++i) {
    if (i == target || (i < (int)history.size() && history[i])) continue;
    if (scores[i] > st || (scores[i] == st && i < target)) ++rank;
  }
  return rank;
}

double hr_at_k(std::span<const int> ranks, int k) {
  if (ranks.empty()) throw data_error("hr_at_k: empty rank list");
  long long hits = 0;
  for (int r : ranks) hits += r <= k;
  return (double)hits / (double)ranks.size();
}

double ndcg_at_k(std::span<const int> ranks, int k) {
  if (ranks.empty()) throw data_error("ndcg_at_k: empty rank list");
  double sum = 0.0;
  for (int r : ranks)
    if (r <= k) sum += 1.0 / std::log2((double)r + 1.0);
  return sum / (double)ranks.size();
}

MetricReport evaluate(const model::SeqRecModel& m, const data::SplitSet& split, Phase phase,
                      std::span<const int> ks, bool exclude_history) {
  if (split.empty()) throw data_error("evaluate: empty split");
  const int n = (int)split.size();
  std::vector<int> ranks(n);

#pragma omp parallel for schedule(dynamic)
  for (int u = 0; u < n; ++u) {
    const data::UserSplit& s = split[u];
    std::vector<int> input = s.train;
    int target = s.valid;
    if (phase == Phase::kTest) {
      input.push_back(s.valid);
      target = s.test;
    }
    std::vector<char> history(m.item_count() + 1, 0);
    if (exclude_history)
      for (int it : input) history[it] = 1;
    history[target] = 0;  // the target is always a candidate

    const std::vector<int> row = data::pad_truncate(input, m.config().seq_len);
    Tape tape;
    const model::ModelVars mv = m.bind(tape);
    const model::ForwardOut fo = m.forward_row(tape, mv, row, false, nullptr);
    const Matrix& h = fo.real.value();
    const double* f = h.row(m.config().seq_len - 1);
    const std::vector<double> scores = m.score_items({f, (size_t)m.config().d});
    ranks[u] = rank_of_target(scores, target, history);
  }

  MetricReport rep;
  rep.phase = phase == Phase::kValid ? "valid" : "test";
  rep.users = n;
  rep.exclude_history = exclude_history;
  for (int k : ks) {
    rep.ks.push_back(k);
    rep.hr.push_back(hr_at_k(ranks, k));
    rep.ndcg.push_back(ndcg_at_k(ranks, k));
  }
  return rep;
}

std::string report_csv(const MetricReport& rep) {
  std::string out = "phase,k,hr,ndcg,users\n";
  for (size_t i = 0; i < rep.ks.size(); ++i)
    out += rep.phase + "," + std::to_string(rep.ks[i]) + "," + io::fmt_double(rep.hr[i]) + "," +
           io::fmt_double(rep.ndcg[i]) + "," + std::to_string(rep.users) + "\n";
  return out;
}

}  // namespace miqrec::eval
