#include "miqrec/cli.hpp"

#include <omp.h>

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

#include "CLI11.hpp"
#include "miqrec/io_util.hpp"

namespace miqrec::cli {

namespace {

std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

int to_int(const std::string& key, const std::string& v) {
  try {
    size_t pos = 0;
    const int x = std::stoi(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return x;
  } catch (const std::exception&) {
    throw config_error("config key '" + key + "': expected an integer, got '" + v + "'");
  }
}

double to_double(const std::string& key, const std::string& v) {
  try {
    size_t pos = 0;
    const double x = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return x;
  } catch (const std::exception&) {
    throw config_error("config key '" + key + "': expected a number, got '" + v + "'");
  }
}

bool to_on_off(const std::string& key, const std::string& v) {
  if (v == "on") return true;
  if (v == "off") return false;
  throw config_error("config key '" + key + "': expected on/off, got '" + v + "'");
}

std::vector<int> to_int_list(const std::string& key, const std::string& v) {
  std::vector<int> out;
  std::stringstream ss(v);
  std::string tok;
  while (std::getline(ss, tok, ',')) out.push_back(to_int(key, trim(tok)));
  if (out.empty()) throw config_error("config key '" + key + "': empty list");
  return out;
}

}  // namespace

void RunConfig::apply(const std::string& key, const std::string& value) {
  if (key == "d") model.d = to_int(key, value);
  else if (key == "t") model.seq_len = to_int(key, value);
  else if (key == "blocks") model.blocks = to_int(key, value);
  else if (key == "m") model.m = to_int(key, value);
  else if (key == "dropout") model.dropout = to_double(key, value);
  else if (key == "agg") model.agg = attn::agg_mode_from_string(value);
  else if (key == "dummy_kv") model.dummy_kv = to_on_off(key, value);
  else if (key == "heads") model.heads = to_int(key, value);
  else if (key == "seed") {
    model.seed = (uint64_t)to_int(key, value);
    train.seed = model.seed;
  } else if (key == "attention") {
    if (value != "single" && value != "miq")
      throw config_error("config key 'attention': expected single or miq, got '" + value + "'");
    attention = value;
  } else if (key == "lr") train.lr = to_double(key, value);
  else if (key == "beta1") train.beta1 = to_double(key, value);
  else if (key == "beta2") train.beta2 = to_double(key, value);
  else if (key == "adam_eps") train.adam_eps = to_double(key, value);
  else if (key == "batch_size") train.batch_size = to_int(key, value);
  else if (key == "max_epochs") train.max_epochs = to_int(key, value);
  else if (key == "eval_every") train.eval_every = to_int(key, value);
  else if (key == "patience") train.patience = to_int(key, value);
  else if (key == "kcore") kcore = to_int(key, value);
  else if (key == "name") dataset_name = value;
  else if (key == "sweep_m") sweep_m = to_int_list(key, value);
  else if (key == "sweep_d") sweep_d = to_int_list(key, value);
  else if (key == "sweep_epochs") sweep_epochs = to_int(key, value);
  else if (key == "fd_epsilon") fd_epsilon = to_double(key, value);
  else if (key == "fd_tolerance") fd_tolerance = to_double(key, value);
  else if (key == "fault_op") fault_op = value;
  else if (key == "gradcheck_rows") gradcheck_rows = to_int(key, value);
  else if (key == "gradcheck_items") gradcheck_items = to_int(key, value);
  else throw config_error("unknown config key '" + key + "'");
}

void RunConfig::load_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw config_error("cannot open config file: " + path);
  std::string line;
  long long line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const size_t hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw config_error(path + ":" + std::to_string(line_no) + ": expected key = value");
    apply(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
}

void RunConfig::finalize() {
  if (attention.empty()) attention = model.m > 1 ? "miq" : "single";
  if (attention == "single" && model.m > 1)
    throw config_error("attention=single requires m=1 (got m=" + std::to_string(model.m) + ")");
  model.validate();
}

namespace {

constexpr int kReportKs[3] = {5, 10, 20};

std::string arg_or(const std::string& v, const std::string& fallback) {
  return v.empty() ? fallback : v;
}

// flag overrides shared by train/eval-style commands
struct Overrides {
  std::string config_path, attention, agg, dummy_kv;
  int seed = -1, m = -1, kcore = -1;
  void apply_to(RunConfig& rc) const {
    if (!config_path.empty()) rc.load_file(config_path);
    if (seed >= 0) rc.apply("seed", std::to_string(seed));
    if (m >= 0) rc.apply("m", std::to_string(m));
    if (!attention.empty()) rc.apply("attention", attention);
    if (!agg.empty()) rc.apply("agg", agg);
    if (!dummy_kv.empty()) rc.apply("dummy_kv", dummy_kv);
    if (kcore >= 0) rc.apply("kcore", std::to_string(kcore));
    rc.finalize();
  }
};

void add_override_flags(CLI::App* cmd, Overrides& ov) {
  cmd->add_option("--config", ov.config_path, "key = value configuration file");
  cmd->add_option("--seed", ov.seed, "RNG seed override");
  cmd->add_option("--m", ov.m, "query window override");
  cmd->add_option("--attention", ov.attention, "attention kind: single|miq")
      ->check(CLI::IsMember({"single", "miq"}));
  cmd->add_option("--agg", ov.agg, "aggregator mode: context|last|full")
      ->check(CLI::IsMember({"context", "last", "full"}));
  cmd->add_option("--dummy-kv", ov.dummy_kv, "dummy tokens as keys/values: on|off")
      ->check(CLI::IsMember({"on", "off"}));
}

int cmd_ingest(const std::string& input, const std::string& format, int kcore,
               const std::string& data_out, const std::string& stats_out,
               const std::string& name) {
  std::ifstream in(input, std::ios::binary);
  if (!in) throw data_error("cannot open input file: " + input);
  data::InteractionLog log = data::parse_interactions(in, data::format_from_string(format));
  if (kcore > 1) log = data::kcore_filter(log, kcore);
  const std::string ds_name =
      arg_or(name, std::filesystem::path(input).stem().string());
  const data::Dataset ds = data::make_dataset(log, ds_name);
  data::save_dataset(ds, data_out);
  const std::string csv = data::stats_csv(ds.stats);
  if (!stats_out.empty()) io::write_file_atomic(stats_out, csv);
  std::cout << "dataset " << ds.stats.name << ": users=" << ds.stats.users
            << " items=" << ds.stats.items
            << " avg_actions/user=" << io::fmt_double(ds.stats.avg_actions_user)
            << " avg_actions/item=" << io::fmt_double(ds.stats.avg_actions_item)
            << " actions=" << ds.stats.actions << "\n";
  return 0;
}

model::SeqRecModel build_model(const RunConfig& rc, int item_count) {
  model::ModelConfig mc = rc.model;
  RngStream rng(mc.seed);
  return model::SeqRecModel(mc, item_count, rng);
}

int cmd_train(RunConfig rc, const std::string& data_path, const std::string& out_dir) {
  const data::Dataset ds = data::load_dataset(data_path);
  const data::SplitSet split = data::leave_one_out_split(ds.sequences);
  model::SeqRecModel m = build_model(rc, ds.item_count);

  const std::string ckpt = out_dir + "/model.ckpt";
  const std::string hist_path = out_dir + "/history.csv";
  // history is rewritten every epoch so a divergence keeps partial progress
  const auto on_epoch = [&](const train::TrainHistory& h) {
    io::write_file_atomic(hist_path, train::history_csv(h));
  };
  const train::FitResult fr = train::fit(m, split, rc.train, ckpt, on_epoch);
  io::write_file_atomic(hist_path, train::history_csv(fr.history));
  const eval::MetricReport rep = eval::evaluate(m, split, eval::Phase::kTest, kReportKs);
  io::write_file_atomic(out_dir + "/report.csv", eval::report_csv(rep));
  std::cout << "trained " << fr.history.epochs.size() << " epochs; best val ndcg@10 "
            << io::fmt_double(fr.history.best_ndcg10) << " at epoch " << fr.history.best_epoch
            << "\n";
  for (size_t i = 0; i < rep.ks.size(); ++i)
    std::cout << "test hr@" << rep.ks[i] << "=" << io::fmt_double(rep.hr[i]) << " ndcg@"
              << rep.ks[i] << "=" << io::fmt_double(rep.ndcg[i]) << "\n";
  return 0;
}

int cmd_eval(const std::string& data_path, const std::string& ckpt, const std::string& out_dir,
             const std::string& phase, bool no_exclude) {
  const data::Dataset ds = data::load_dataset(data_path);
  const data::SplitSet split = data::leave_one_out_split(ds.sequences);
  const model::SeqRecModel m = model::SeqRecModel::load(ckpt);
  const eval::Phase ph = phase == "valid" ? eval::Phase::kValid : eval::Phase::kTest;
  const eval::MetricReport rep = eval::evaluate(m, split, ph, kReportKs, !no_exclude);
  const std::string csv = eval::report_csv(rep);
  if (!out_dir.empty()) io::write_file_atomic(out_dir + "/report.csv", csv);
  std::cout << csv;
  return 0;
}

int cmd_gradcheck(RunConfig rc) {
  if (rc.model.d > 16 || rc.model.seq_len > 8)
    throw config_error("gradcheck needs a tiny model (d <= 16, t <= 8)");
  model::SeqRecModel m = build_model(rc, rc.gradcheck_items);
  if (!rc.fault_op.empty()) Tape::set_pullback_fault(rc.fault_op);
  train::GradCheckReport rep;
  try {
    rep = train::gradcheck_model(m, rc.gradcheck_rows, rc.model.seed, rc.fd_epsilon,
                                 rc.fd_tolerance);
  } catch (...) {
    Tape::set_pullback_fault("");
    throw;
  }
  Tape::set_pullback_fault("");
  for (const auto& g : rep.groups)
    std::cout << (g.max_rel_error < rep.tolerance ? "ok   " : "FAIL ") << g.name
              << " max_rel_err=" << io::fmt_double(g.max_rel_error) << "\n";
  std::cout << "parameter groups checked: " << rep.groups.size() << "\n";
  if (!rep.pass) {
    std::string msg = "gradient check failed (tolerance " + io::fmt_double(rep.tolerance) + "):";
    for (const auto& g : rep.groups)
      if (!(g.max_rel_error < rep.tolerance)) msg += " " + g.name;
    if (!rc.fault_op.empty()) msg += " (fault injected in op '" + rc.fault_op + "')";
    throw verify_error(msg);
  }
  std::cout << "gradcheck passed\n";
  return 0;
}

int cmd_bench(const std::vector<int>& ts, const std::vector<int>& ds, const std::vector<int>& ms,
              const std::string& agg, const std::string& out_csv) {
  if (ts.empty() || ds.empty() || ms.empty()) throw config_error("bench: empty grid");
  const attn::AggMode mode = attn::agg_mode_from_string(agg);
  std::string csv =
      "T,d,m,mode,flops_closed,flops_measured,attn_term,agg_term,wall_us,param_delta\n";
  RngStream rng(7);
  for (int t : ts)
    for (int d : ds)
      for (int m : ms) {
        const attn::FlopBreakdown fb = attn::attention_flops(t, d, m, mode);
        const int tp = t + m - 1;
        // random weights and input, one sublayer forward with counting on
        Matrix h(tp, d);
        for (size_t i = 0; i < h.size(); ++i) h.data()[i] = rng.normal() * 0.1;
        std::vector<std::unique_ptr<Parameter>> ps;
        auto mk = [&](const char* n) {
          Matrix w(d, d);
          for (size_t i = 0; i < w.size(); ++i) w.data()[i] = rng.normal() * 0.1;
          ps.push_back(std::make_unique<Parameter>(n, std::move(w)));
          return ps.back().get();
        };
        Tape tape;
        model::SublayerVars sv;
        for (int j = 0; j < m; ++j) sv.wq.push_back(tape.leaf(*mk("wq")));
        sv.wk = tape.leaf(*mk("wk"));
        sv.wv = tape.leaf(*mk("wv"));
        if (m > 1) {
          sv.agg_wq = tape.leaf(*mk("awq"));
          sv.agg_wk = tape.leaf(*mk("awk"));
          sv.agg_wv = tape.leaf(*mk("awv"));
        }
        Var x = tape.constant(h);
        kernels::counter::reset();
        kernels::counter::enable(true);
        const auto t0 = std::chrono::steady_clock::now();
        Var f = model::attention_sublayer(tape, sv, x, m, 1, true, mode);
        const auto t1 = std::chrono::steady_clock::now();
        kernels::counter::enable(false);
        (void)f;
        const unsigned long long measured = kernels::counter::value();
        const double wall_us =
            std::chrono::duration_cast<std::chrono::nanoseconds>(t1 - t0).count() / 1000.0;

        // parameter audit: window m versus the single-query baseline, one block
        const long long delta_closed = model::miq_param_delta(d, 1, m);
        RngStream mr(1);
        model::ModelConfig base_cfg;
        base_cfg.d = d;
        base_cfg.seq_len = t;
        base_cfg.blocks = 1;
        base_cfg.m = 1;
        base_cfg.dropout = 0.0;
        model::ModelConfig miq_cfg = base_cfg;
        miq_cfg.m = m;
        miq_cfg.agg = mode;
        const model::SeqRecModel base(base_cfg, 100, mr);
        const model::SeqRecModel miq(miq_cfg, 100, mr);
        const long long delta_model = miq.param_count().total - base.param_count().total;

        csv += std::to_string(t) + "," + std::to_string(d) + "," + std::to_string(m) + "," +
               attn::to_string(mode) + "," + std::to_string(fb.total()) + "," +
               std::to_string(measured) + "," + std::to_string(fb.attention_term()) + "," +
               std::to_string(fb.aggregation_term()) + "," + io::fmt_double(wall_us) + "," +
               std::to_string(delta_model) + "\n";
        if (measured != fb.total())
          throw verify_error("bench: instrumented flops " + std::to_string(measured) +
                             " != closed form " + std::to_string(fb.total()) + " at T=" +
                             std::to_string(t) + " d=" + std::to_string(d) +
                             " m=" + std::to_string(m));
        if (delta_model != delta_closed)
          throw verify_error("bench: parameter delta " + std::to_string(delta_model) +
                             " != audit " + std::to_string(delta_closed) + " at d=" +
                             std::to_string(d) + " m=" + std::to_string(m));
      }
  if (!out_csv.empty()) io::write_file_atomic(out_csv, csv);
  std::cout << csv;
  return 0;
}

int cmd_suggest_m(const std::string& data_path) {
  const data::Dataset ds = data::load_dataset(data_path);
  const data::SuggestedWindow sw = data::suggest_query_window(ds.stats);
  std::cout << "m = " << sw.m << "\n";
  if (sw.unsuitable) std::cout << "warning: " << sw.message << "\n";
  return 0;
}

int cmd_sweep(RunConfig rc, const std::string& data_path, const std::string& out_dir) {
  if (rc.sweep_m.empty() || rc.sweep_d.empty()) throw config_error("sweep: empty grid");
  const data::Dataset ds = data::load_dataset(data_path);
  const data::SplitSet split = data::leave_one_out_split(ds.sequences);
  std::string csv = "m,d,hr5,hr10,ndcg5,ndcg10\n";
  std::map<int, std::pair<int, double>> best_d;  // m -> (d, hr10)
  for (int m : rc.sweep_m)
    for (int d : rc.sweep_d) {
      RunConfig cell = rc;
      cell.model.m = m;
      cell.model.d = d;
      cell.attention = m > 1 ? "miq" : "single";
      cell.train.max_epochs = rc.sweep_epochs;
      csv += std::to_string(m) + "," + std::to_string(d) + ",";
      try {
        cell.model.validate();
        model::SeqRecModel mod = build_model(cell, ds.item_count);
        train::fit(mod, split, cell.train);
        const int ks[2] = {5, 10};
        const eval::MetricReport rep = eval::evaluate(mod, split, eval::Phase::kTest, ks);
        csv += io::fmt_double(rep.hr[0]) + "," + io::fmt_double(rep.hr[1]) + "," +
               io::fmt_double(rep.ndcg[0]) + "," + io::fmt_double(rep.ndcg[1]) + "\n";
        auto it = best_d.find(m);
        if (it == best_d.end() || rep.hr[1] > it->second.second) best_d[m] = {d, rep.hr[1]};
      } catch (const Error& e) {
        std::cerr << "sweep cell m=" << m << " d=" << d << " failed: " << e.what() << "\n";
        csv += ",,,\n";
      }
    }
  io::write_file_atomic(out_dir + "/sweep.csv", csv);
  std::cout << csv;
  for (const auto& [m, dd] : best_d)
    std::cout << "best d for m=" << m << ": " << dd.first << " (hr@10 "
              << io::fmt_double(dd.second) << ")\n";
  return 0;
}

}  // namespace

int run(int argc, const char* const* argv) {
  if (const char* threads = std::getenv("MIQREC_THREADS")) {
    const int n = std::atoi(threads);
    if (n > 0) omp_set_num_threads(n);
  }

  CLI::App app{"sequential recommender with multi-item-query attention"};
  app.require_subcommand(1);

  // ingest
  auto* ingest = app.add_subcommand("ingest", "parse an interaction log into a dataset cache");
  std::string in_path, in_format = "umt", data_path, stats_path, ds_name;
  int ingest_kcore = 5;
  ingest->add_option("--input", in_path, "raw interaction log")->required();
  ingest->add_option("--format", in_format, "umt|umrt|movielens")
      ->check(CLI::IsMember({"umt", "umrt", "movielens"}));
  ingest->add_option("--kcore", ingest_kcore, "iterative k-core threshold (default 5)");
  ingest->add_option("--data", data_path, "output dataset cache")->required();
  ingest->add_option("--stats", stats_path, "statistics CSV output");
  ingest->add_option("--name", ds_name, "dataset name for reports");

  // train
  auto* tr = app.add_subcommand("train", "train a model and evaluate on the test split");
  Overrides tr_ov;
  std::string tr_data, tr_out = ".";
  add_override_flags(tr, tr_ov);
  tr->add_option("--data", tr_data, "dataset cache")->required();
  tr->add_option("--out", tr_out, "output directory");

  // eval
  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint");
  std::string ev_data, ev_ckpt, ev_out, ev_phase = "test";
  bool ev_no_exclude = false;
  ev->add_option("--data", ev_data, "dataset cache")->required();
  ev->add_option("--checkpoint", ev_ckpt, "model checkpoint")->required();
  ev->add_option("--out", ev_out, "output directory");
  ev->add_option("--phase", ev_phase, "valid|test")->check(CLI::IsMember({"valid", "test"}));
  ev->add_flag("--no-exclude", ev_no_exclude, "rank against the full corpus without history exclusion");

  // gradcheck
  auto* gc = app.add_subcommand("gradcheck", "finite-difference gradient verification");
  Overrides gc_ov;
  add_override_flags(gc, gc_ov);

  // bench
  auto* be = app.add_subcommand("bench", "closed-form vs instrumented flop scaling");
  std::string be_T = "32,64,128", be_d = "16,32", be_m = "1,2,4,8", be_agg = "full", be_out;
  be->add_option("--T", be_T, "sequence lengths, comma separated");
  be->add_option("--d", be_d, "embedding sizes, comma separated");
  be->add_option("--m", be_m, "query windows, comma separated");
  be->add_option("--agg", be_agg, "aggregator mode")
      ->check(CLI::IsMember({"context", "last", "full"}));
  be->add_option("--out", be_out, "output CSV path");

  // suggest-m
  auto* sm = app.add_subcommand("suggest-m", "suggest a query window from dataset statistics");
  std::string sm_data;
  sm->add_option("--data", sm_data, "dataset cache")->required();

  // sweep
  auto* sw = app.add_subcommand("sweep", "train over an m x d grid");
  Overrides sw_ov;
  std::string sw_data, sw_out = ".";
  add_override_flags(sw, sw_ov);
  sw->add_option("--data", sw_data, "dataset cache")->required();
  sw->add_option("--out", sw_out, "output directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (*ingest) return cmd_ingest(in_path, in_format, ingest_kcore, data_path, stats_path, ds_name);
    if (*tr) {
      RunConfig rc;
      tr_ov.apply_to(rc);
      return cmd_train(std::move(rc), tr_data, tr_out);
    }
    if (*ev) return cmd_eval(ev_data, ev_ckpt, ev_out, ev_phase, ev_no_exclude);
    if (*gc) {
      RunConfig rc;
      rc.model.d = 8;
      rc.model.seq_len = 6;
      rc.model.blocks = 2;
      rc.model.m = 3;
      rc.model.dropout = 0.0;
      gc_ov.apply_to(rc);
      return cmd_gradcheck(std::move(rc));
    }
    if (*be)
      return cmd_bench(to_int_list("T", be_T), to_int_list("d", be_d), to_int_list("m", be_m),
                       be_agg, be_out);
    if (*sm) return cmd_suggest_m(sm_data);
    if (*sw) {
      RunConfig rc;
      sw_ov.apply_to(rc);
      return cmd_sweep(std::move(rc), sw_data, sw_out);
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return e.exit_code;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

int run(const std::vector<std::string>& args) {
  std::vector<std::string> full;
  full.push_back("miqrec");
  full.insert(full.end(), args.begin(), args.end());
  std::vector<const char*> argv;
  for (const auto& s : full) argv.push_back(s.c_str());
  return run((int)argv.size(), argv.data());
}

}  // namespace miqrec::cli
