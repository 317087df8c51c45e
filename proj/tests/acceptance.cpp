// Acceptance suite: one pass/fail line per criterion, nonzero exit if any
// gating criterion fails. Criterion 8 is a soft directional check on real
// MovieLens-1M data and never gates; it runs only when MIQREC_ML1M points at
// the raw ratings.dat file.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "miqrec/attention.hpp"
#include "miqrec/cli.hpp"
#include "miqrec/eval.hpp"
#include "miqrec/io_util.hpp"
#include "miqrec/train.hpp"

using namespace miqrec;

namespace {

int g_failures = 0;

void report(int criterion, bool pass, const std::string& what) {
  std::printf("[%s] criterion %d: %s\n", pass ? "PASS" : "FAIL", criterion, what.c_str());
  if (!pass) ++g_failures;
}

model::SeqRecModel make_model(model::ModelConfig cfg, int items) {
  RngStream rng(cfg.seed);
  return model::SeqRecModel(cfg, items, rng);
}

Matrix forward_hidden(const model::SeqRecModel& m, const std::vector<int>& row) {
  Tape tape;
  const model::ModelVars mv = m.bind(tape);
  return m.forward_row(tape, mv, row, false, nullptr).real.value();
}

Matrix random_matrix(int r, int c, RngStream& rng, double scale = 1.0) {
  Matrix m(r, c);
  for (size_t i = 0; i < m.size(); ++i) m.data()[i] = rng.normal() * scale;
  return m;
}

double lsq_slope(const std::vector<double>& x, const std::vector<double>& y) {
  const int n = (int)x.size();
  double xm = 0, ym = 0;
  for (int i = 0; i < n; ++i) {
    xm += x[i];
    ym += y[i];
  }
  xm /= n;
  ym /= n;
  double num = 0, den = 0;
  for (int i = 0; i < n; ++i) {
    num += (x[i] - xm) * (y[i] - ym);
    den += (x[i] - xm) * (x[i] - xm);
  }
  return num / den;
}

// 50 users walking a 12-item cycle; sequences shorter than the cycle so both
// negative sampling and full-corpus ranking stay meaningful
data::SplitSet cyclic_split(int users, int cycle, int len) {
  std::vector<data::UserSequence> seqs;
  for (int u = 0; u < users; ++u) {
    data::UserSequence s;
    s.user = u + 1;
    for (int j = 0; j < len; ++j) s.items.push_back((u + j) % cycle + 1);
    seqs.push_back(std::move(s));
  }
  return data::leave_one_out_split(seqs);
}

// ---------------------------------------------------------------------------

void criterion_1_reduction() {
  bool pass = true;
  std::string note;

  // sublayer: the query-window machinery at m=1 against the plain
  // single-query attention formula path
  {
    RngStream rng(101);
    const int d = 16, tp = 12;
    const Matrix h = random_matrix(tp, d, rng, 0.5);
    Parameter wq("wq", random_matrix(d, d, rng, 0.2));
    Parameter wk("wk", random_matrix(d, d, rng, 0.2));
    Parameter wv("wv", random_matrix(d, d, rng, 0.2));
    Tape t;
    model::SublayerVars sv;
    sv.wq.push_back(t.leaf(wq));
    sv.wk = t.leaf(wk);
    sv.wv = t.leaf(wv);
    const Var f =
        model::attention_sublayer(t, sv, t.constant(h), 1, 1, true, attn::AggMode::kContext);
    const Matrix want =
        attn::single_query_attention(h, {wq.value, wk.value, wv.value}, attn::causal_mask(tp));
    for (size_t i = 0; i < want.size(); ++i)
      if (std::abs(f.value().data()[i] - want.data()[i]) > 1e-12) pass = false;
    if (!pass) note = "sublayer m=1 deviates from single-query attention";
  }

  // training trajectories: the single-attention configuration against the
  // query-window configuration at m=1, shared seed
  if (pass) {
    auto run = [](const char* attention) {
      cli::RunConfig rc;
      rc.apply("d", "8");
      rc.apply("t", "8");
      rc.apply("blocks", "2");
      rc.apply("dropout", "0.2");
      rc.apply("seed", "17");
      rc.apply("attention", attention);
      rc.apply("m", "1");
      rc.apply("lr", "0.005");
      rc.apply("batch_size", "8");
      rc.apply("max_epochs", "8");
      rc.apply("eval_every", "4");
      rc.apply("patience", "10");
      rc.finalize();
      auto m = make_model(rc.model, 16);
      const auto split = cyclic_split(12, 16, 9);
      const auto fr = train::fit(m, split, rc.train);
      std::vector<double> losses;
      for (const auto& r : fr.history.epochs) losses.push_back(r.loss);
      std::string ckpt;
      m.save(ckpt);
      return std::make_pair(losses, ckpt);
    };
    const auto a = run("single");
    const auto b = run("miq");
    if (a.first.size() != b.first.size()) {
      pass = false;
      note = "trajectory lengths differ";
    } else {
      for (size_t i = 0; i < a.first.size(); ++i)
        if (std::memcmp(&a.first[i], &b.first[i], sizeof(double)) != 0) pass = false;
      if (a.second != b.second) pass = false;
      if (!pass) note = "trajectories or final weights differ";
    }
  }

  report(1, pass,
         "reduction equivalence: m=1 matches single-query attention (outputs <= 1e-12, "
         "trajectories bit-identical)" +
             (note.empty() ? "" : " -- " + note));
}

void criterion_2_gradients() {
  model::ModelConfig cfg;
  cfg.d = 8;
  cfg.seq_len = 6;
  cfg.blocks = 2;
  cfg.m = 3;
  cfg.dropout = 0.0;
  cfg.seed = 7;
  auto m = make_model(cfg, 12);
  const auto rep = train::gradcheck_model(m, 2, 77, 1e-4, 1e-4);

  bool covered_wq = false, covered_agg = false, covered_emb = false;
  double worst = 0.0;
  for (const auto& g : rep.groups) {
    worst = std::max(worst, g.max_rel_error);
    if (g.name.find("attn.wq2") != std::string::npos) covered_wq = true;
    if (g.name.find("agg.") != std::string::npos) covered_agg = true;
    if (g.name == "emb") covered_emb = true;  // includes the dummy rows
  }
  const bool pass = rep.pass && covered_wq && covered_agg && covered_emb &&
                    rep.groups.size() == m.parameters().size();
  report(2, pass,
         "full-model finite-difference check (d=8 T=6 L=2 m=3), worst relative error " +
             io::fmt_double(worst) + " over " + std::to_string(rep.groups.size()) + " groups");
}

void criterion_3_causality() {
  model::ModelConfig cfg;
  cfg.d = 16;
  cfg.seq_len = 12;
  cfg.blocks = 2;
  cfg.m = 3;
  cfg.dropout = 0.2;  // inference mode must ignore it
  cfg.seed = 5;
  const int items = 30;
  const auto m = make_model(cfg, items);

  RngStream rng(303);
  bool pass = true;
  for (int trial = 0; trial < 100 && pass; ++trial) {
    std::vector<int> row(cfg.seq_len);
    for (auto& id : row) id = (int)rng.below(items) + 1;
    const int t = (int)rng.below(cfg.seq_len - 1);
    std::vector<int> perturbed = row;
    for (int p = t + 1; p < cfg.seq_len; ++p) perturbed[p] = (int)rng.below(items) + 1;

    const Matrix ha = forward_hidden(m, row);
    const Matrix hb = forward_hidden(m, perturbed);
    for (int p = 0; p <= t && pass; ++p) {
      for (int c = 0; c < cfg.d; ++c)
        if (ha(p, c) != hb(p, c)) pass = false;
      const auto la = m.score_items({ha.row(p), (size_t)cfg.d});
      const auto lb = m.score_items({hb.row(p), (size_t)cfg.d});
      if (la != lb) pass = false;
    }
  }
  report(3, pass, "causality: 100 random suffix perturbations change no logits at or before t");
}

void criterion_4_complexity() {
  // closed form == instrumented counter and parameter audit over the full
  // grid, via the bench command (exits nonzero on any mismatch)
  const int bench_rc = cli::run({"bench", "--T", "32,64,128", "--d", "16,32", "--m", "1,2,4,8",
                                 "--agg", "full", "--out", "/tmp/miqrec_acc_bench.csv"});
  const int bench_rc2 = cli::run({"bench", "--T", "32,64", "--d", "16", "--m", "2,4", "--agg",
                                  "context", "--out", "/tmp/miqrec_acc_bench_ctx.csv"});
  bool pass = bench_rc == 0 && bench_rc2 == 0;
  std::string note = pass ? "" : " -- instrumented/closed-form mismatch";

  // fitted exponents from the verified closed form
  const std::vector<int> ts{32, 64, 128};
  double worst_t_slope = 2.0;
  for (int d : {16, 32})
    for (int m : {1, 2, 4, 8}) {
      std::vector<double> x, y;
      for (int t : ts) {
        const auto fb = attn::attention_flops(t, d, m, attn::AggMode::kFull);
        x.push_back(std::log((double)(t + m - 1)));  // attended sequence length
        y.push_back(std::log((double)fb.attention_term()));
      }
      const double slope = lsq_slope(x, y);
      if (std::abs(slope - 2.0) > std::abs(worst_t_slope - 2.0)) worst_t_slope = slope;
      if (std::abs(slope - 2.0) > 0.05) pass = false;
    }
  // aggregation grows quadratically in m in full mode (m=1 has no aggregator)
  double worst_m_slope = 2.0;
  for (int t : ts)
    for (int d : {16, 32}) {
      std::vector<double> x, y;
      for (int m : {2, 4, 8}) {
        const auto fb = attn::attention_flops(t, d, m, attn::AggMode::kFull);
        x.push_back(std::log((double)m));
        y.push_back(std::log((double)fb.aggregation_term()));
      }
      const double slope = lsq_slope(x, y);
      if (std::abs(slope - 2.0) > std::abs(worst_m_slope - 2.0)) worst_m_slope = slope;
      if (std::abs(slope - 2.0) > 0.05) pass = false;
    }

  report(4, pass,
         "complexity model: counts exact on the T x d x m grid; attention exponent " +
             io::fmt_double(worst_t_slope) + ", full-mode aggregation exponent " +
             io::fmt_double(worst_m_slope) + note);
}

void criterion_5_metric_oracles() {
  bool pass = true;
  RngStream rng(505);

  // rank/hr/ndcg against a brute-force full sort, 1000 instances
  for (int trial = 0; trial < 1000 && pass; ++trial) {
    const int items = 3 + (int)rng.below(30);
    std::vector<double> scores(items + 1);
    scores[0] = -1e300;
    std::vector<char> history(items + 1, 0);
    for (int i = 1; i <= items; ++i) {
      scores[i] = (double)rng.below(7);  // heavy ties
      history[i] = rng.uniform() < 0.25;
    }
    const int target = (int)rng.below(items) + 1;
    history[target] = 0;

    std::vector<int> cand;
    for (int i = 1; i <= items; ++i)
      if (i == target || !history[i]) cand.push_back(i);
    std::sort(cand.begin(), cand.end(), [&](int a, int b) {
      if (scores[a] != scores[b]) return scores[a] > scores[b];
      return a < b;
    });
    const int want = (int)(std::find(cand.begin(), cand.end(), target) - cand.begin()) + 1;
    if (eval::rank_of_target(scores, target, history) != want) pass = false;
  }
  if (!pass) {
    report(5, false, "rank oracle mismatch");
    return;
  }

  // untrained model against the uniform null within 3 sigma
  model::ModelConfig cfg;
  cfg.d = 8;
  cfg.seq_len = 10;
  cfg.blocks = 1;
  cfg.m = 1;
  cfg.seed = 99;
  const int items = 50;
  const auto m = make_model(cfg, items);
  std::vector<data::UserSequence> seqs;
  for (int u = 0; u < 600; ++u) {
    data::UserSequence s;
    s.user = u + 1;
    for (int j = 0; j < 8; ++j) s.items.push_back((int)rng.below(items) + 1);
    seqs.push_back(std::move(s));
  }
  const auto split = data::leave_one_out_split(seqs);
  const int ks[2] = {5, 10};
  const auto rep = eval::evaluate(m, split, eval::Phase::kTest, ks);
  std::string detail;
  for (int ki = 0; ki < 2; ++ki) {
    double mean = 0, var = 0;
    for (const auto& s : split) {
      std::vector<char> hist(items + 1, 0);
      for (int it : s.train) hist[it] = 1;
      hist[s.valid] = 1;
      hist[s.test] = 0;
      int cand = 0;
      for (int i = 1; i <= items; ++i) cand += !hist[i];
      const double p = std::min(1.0, (double)ks[ki] / (double)cand);
      mean += p;
      var += p * (1 - p);
    }
    mean /= split.size();
    var /= (double)split.size() * split.size();
    if (std::abs(rep.hr[ki] - mean) > 3.0 * std::sqrt(var)) pass = false;
    detail += " hr@" + std::to_string(ks[ki]) + "=" + io::fmt_double(rep.hr[ki]) + " null=" +
              io::fmt_double(mean);
  }
  report(5, pass, "metric oracles: 1000 rank instances exact; untrained model within 3 sigma of"
                  " the uniform null" + detail);
}

void criterion_6_overfit() {
  bool pass = true;
  std::string detail;
  for (int m_window : {1, 3}) {
    model::ModelConfig cfg;
    cfg.d = 16;
    cfg.seq_len = 20;
    cfg.blocks = 2;
    cfg.m = m_window;
    cfg.dropout = 0.0;
    cfg.seed = 13;
    const int items = 12;  // the cyclic vocabulary
    auto model_ = make_model(cfg, items);
    const auto split = cyclic_split(50, items, 10);

    train::TrainConfig tc;
    tc.lr = 0.005;
    tc.batch_size = 25;
    tc.seed = 13;
    RngStream rng(tc.seed);
    Adam opt(model_.parameters(), tc.adam());
    const int ks[1] = {1};
    double hr1 = 0.0;
    int epoch = 0;
    while (epoch < 500) {
      for (int e = 0; e < 25 && epoch < 500; ++e, ++epoch)
        (void)train::train_epoch(model_, split, tc, opt, rng);
      hr1 = eval::evaluate(model_, split, eval::Phase::kValid, ks).hr[0];
      if (hr1 >= 0.95) break;
    }
    if (hr1 < 0.95) pass = false;
    detail += (m_window == 1 ? " baseline" : " miq(m=3)") + std::string(" hr@1=") +
              io::fmt_double(hr1) + " at epoch " + std::to_string(epoch);
  }
  report(6, pass, "overfit sanity: 12-item cycle reaches validation hr@1 >= 0.95 within 500 "
                  "epochs for both models --" + detail);
}

void criterion_7_heuristic() {
  data::DatasetStats s;
  s.avg_actions_user = 48.2;
  const auto lastfm = data::suggest_query_window(s);
  s.avg_actions_user = 7.6;
  const auto beauty = data::suggest_query_window(s);
  const bool pass = lastfm.m == 5 && !lastfm.unsuitable && beauty.m == 1 && beauty.unsuitable &&
                    !beauty.message.empty();
  report(7, pass, "query-window heuristic: avg 48.2 -> m=5; avg 7.6 -> m=1 with warning");
}

// soft, non-gating: directional comparison on a 1,000-user MovieLens-1M
// subsample when the raw ratings file is available
void criterion_8_directional() {
  const char* path = std::getenv("MIQREC_ML1M");
  if (!path) {
    std::printf(
        "[SKIP] criterion 8 (soft, non-gating): set MIQREC_ML1M=/path/to/ml-1m/ratings.dat to "
        "run the 1,000-user directional comparison\n");
    return;
  }
  try {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw data_error(std::string("cannot open ") + path);
    auto log = data::parse_interactions(in, data::LogFormat::kMovielens);
    log = data::kcore_filter(log, 5);
    auto seqs = data::build_sequences(log);
    RngStream pick(424242);
    for (size_t i = seqs.size(); i > 1; --i) std::swap(seqs[i - 1], seqs[pick.below(i)]);
    seqs.resize(std::min<size_t>(seqs.size(), 1000));
    const auto split = data::leave_one_out_split(seqs);

    const int epochs = std::getenv("MIQREC_C8_EPOCHS") ? std::atoi(std::getenv("MIQREC_C8_EPOCHS"))
                                                       : 60;
    int wins = 0;
    for (uint64_t seed : {1ull, 2ull, 3ull}) {
      double hr[2];
      for (int mi = 0; mi < 2; ++mi) {
        model::ModelConfig cfg;
        cfg.d = 50;
        cfg.seq_len = 200;
        cfg.blocks = 2;
        cfg.m = mi == 0 ? 1 : 10;
        cfg.dropout = 0.2;
        cfg.seed = seed;
        auto m = make_model(cfg, log.item_count);
        train::TrainConfig tc;
        tc.lr = 0.001;
        tc.batch_size = 128;
        tc.max_epochs = epochs;
        tc.eval_every = 10;
        tc.patience = 3;
        tc.seed = seed;
        (void)train::fit(m, split, tc);
        const int ks[1] = {10};
        hr[mi] = eval::evaluate(m, split, eval::Phase::kTest, ks).hr[0];
      }
      std::printf("  seed %llu: baseline hr@10 %s vs miq(m=10) %s\n", (unsigned long long)seed,
                  io::fmt_double(hr[0]).c_str(), io::fmt_double(hr[1]).c_str());
      if (hr[1] >= hr[0]) ++wins;
    }
    std::printf("[%s] criterion 8 (soft, non-gating): miq >= baseline on %d of 3 seeds\n",
                wins >= 2 ? "PASS" : "FAIL", wins);
  } catch (const std::exception& e) {
    std::printf("[SKIP] criterion 8 (soft, non-gating): %s\n", e.what());
  }
}

void criterion_9_checkpoint() {
  model::ModelConfig cfg;
  cfg.d = 8;
  cfg.seq_len = 10;
  cfg.blocks = 1;
  cfg.m = 2;
  cfg.dropout = 0.1;
  cfg.seed = 3;
  auto m = make_model(cfg, 14);
  const auto split = cyclic_split(20, 14, 9);
  train::TrainConfig tc;
  tc.lr = 0.005;
  tc.batch_size = 10;
  tc.max_epochs = 10;
  tc.eval_every = 5;
  tc.patience = 5;
  tc.seed = 3;
  (void)train::fit(m, split, tc);

  const int ks[3] = {5, 10, 20};
  const auto before_valid = eval::evaluate(m, split, eval::Phase::kValid, ks);
  const auto before_test = eval::evaluate(m, split, eval::Phase::kTest, ks);

  const std::string path = "/tmp/miqrec_acc_ckpt.bin";
  m.save(path);
  const auto loaded = model::SeqRecModel::load(path);
  const auto after_valid = eval::evaluate(loaded, split, eval::Phase::kValid, ks);
  const auto after_test = eval::evaluate(loaded, split, eval::Phase::kTest, ks);

  std::string b1, b2;
  m.save(b1);
  loaded.save(b2);
  const bool pass = before_valid.hr == after_valid.hr && before_valid.ndcg == after_valid.ndcg &&
                    before_test.hr == after_test.hr && before_test.ndcg == after_test.ndcg &&
                    b1 == b2;
  std::remove(path.c_str());
  report(9, pass, "checkpoint round-trip reproduces every metric bit-exactly");
}

}  // namespace

int main() {
  criterion_1_reduction();
  criterion_2_gradients();
  criterion_3_causality();
  criterion_4_complexity();
  criterion_5_metric_oracles();
  criterion_6_overfit();
  criterion_7_heuristic();
  criterion_8_directional();
  criterion_9_checkpoint();
  if (g_failures > 0) {
    std::printf("%d gating criterion(s) failed\n", g_failures);
    return 1;
  }
  std::printf("all gating criteria passed\n");
  return 0;
}
