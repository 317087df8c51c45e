#include "doctest.h"
#include "miqrec/attention.hpp"
#include "miqrec/model.hpp"

using namespace miqrec;

namespace {

unsigned long long tri(unsigned long long n) { return n * (n + 1) / 2; }

Matrix random_matrix(int r, int c, RngStream& rng) {
  Matrix m(r, c);
  for (size_t i = 0; i < m.size(); ++i) m.data()[i] = rng.normal() * 0.1;
  return m;
}

// run one sublayer forward with the counter on and return the tally
unsigned long long instrumented_flops(int t_len, int d, int m, attn::AggMode mode) {
  RngStream rng(1234 + t_len + d + m);
  const int tp = t_len + m - 1;
  std::vector<std::unique_ptr<Parameter>> ps;
  auto mk = [&]() {
    ps.push_back(std::make_unique<Parameter>("w", random_matrix(d, d, rng)));
    return ps.back().get();
  };
  Tape tape;
  model::SublayerVars sv;
  for (int j = 0; j < m; ++j) sv.wq.push_back(tape.leaf(*mk()));
  sv.wk = tape.leaf(*mk());
  sv.wv = tape.leaf(*mk());
  if (m > 1) {
    sv.agg_wq = tape.leaf(*mk());
    sv.agg_wk = tape.leaf(*mk());
    sv.agg_wv = tape.leaf(*mk());
  }
  Var x = tape.constant(random_matrix(tp, d, rng));
  kernels::counter::reset();
  kernels::counter::enable(true);
  (void)model::attention_sublayer(tape, sv, x, m, 1, true, mode);
  kernels::counter::enable(false);
  return kernels::counter::value();
}

}  // namespace

TEST_CASE("m=1 flops equal the single-query baseline count") {
  for (int t : {8, 32}) {
    for (int d : {4, 16}) {
      const auto fb = attn::attention_flops(t, d, 1, attn::AggMode::kContext);
      const unsigned long long T = t, D = d;
      CHECK(fb.kv_proj == 2 * T * D * D);
      CHECK(fb.q_proj == T * D * D);
      CHECK(fb.q_scale == T * D);
      CHECK(fb.attn_dots == tri(T) * D);
      CHECK(fb.attn_wsums == tri(T) * D);
      CHECK(fb.agg_proj == 0);
      CHECK(fb.agg_mix == 0);
      CHECK(fb.agg_other == 0);
    }
  }
}

TEST_CASE("doubling T roughly quadruples the attention term") {
  for (int m : {1, 4}) {
    const auto a = attn::attention_flops(64, 16, m, attn::AggMode::kFull);
    const auto b = attn::attention_flops(128, 16, m, attn::AggMode::kFull);
    const double ratio = (double)b.attention_term() / (double)a.attention_term();
    CHECK(ratio > 3.7);
    CHECK(ratio <= 4.0);
  }
}

TEST_CASE("aggregation term scales linearly (context) and quadratically (full)") {
  const int t = 128, d = 16;
  const auto c2 = attn::attention_flops(t, d, 2, attn::AggMode::kContext);
  const auto c4 = attn::attention_flops(t, d, 4, attn::AggMode::kContext);
  const auto c8 = attn::attention_flops(t, d, 8, attn::AggMode::kContext);
  const double lin1 = (double)c4.aggregation_term() / (double)c2.aggregation_term();
  const double lin2 = (double)c8.aggregation_term() / (double)c4.aggregation_term();
  CHECK(lin1 == doctest::Approx(2.0).epsilon(0.05));
  CHECK(lin2 == doctest::Approx(2.0).epsilon(0.05));

  const auto f2 = attn::attention_flops(t, d, 2, attn::AggMode::kFull);
  const auto f4 = attn::attention_flops(t, d, 4, attn::AggMode::kFull);
  const auto f8 = attn::attention_flops(t, d, 8, attn::AggMode::kFull);
  const double quad1 = (double)f4.aggregation_term() / (double)f2.aggregation_term();
  const double quad2 = (double)f8.aggregation_term() / (double)f4.aggregation_term();
  CHECK(quad1 == doctest::Approx(4.0).epsilon(0.05));
  CHECK(quad2 == doctest::Approx(4.0).epsilon(0.05));
}

TEST_CASE("instrumented counter equals the closed form exactly") {
  for (auto mode : {attn::AggMode::kContext, attn::AggMode::kLast, attn::AggMode::kFull})
    for (int t : {5, 16})
      for (int d : {4, 8})
        for (int m : {1, 2, 3}) {
          const unsigned long long closed = attn::attention_flops(t, d, m, mode).total();
          const unsigned long long measured = instrumented_flops(t, d, m, mode);
          CAPTURE(t);
          CAPTURE(d);
          CAPTURE(m);
          CHECK(closed == measured);
        }
}

TEST_CASE("flops model rejects degenerate dimensions") {
  CHECK_THROWS_AS((void)attn::attention_flops(0, 4, 1, attn::AggMode::kContext), Error);
}
