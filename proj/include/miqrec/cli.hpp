#pragma once

#include <string>
#include <vector>

#include "miqrec/model.hpp"
#include "miqrec/train.hpp"

namespace miqrec::cli {

// Run configuration: model + training keys plus command options, read from a
// line-oriented `key = value` file ('#' starts a comment) and overridden by
// command-line flags. Unknown keys are rejected.
struct RunConfig {
  model::ModelConfig model;
  train::TrainConfig train;
  std::string attention;  // "", "single" or "miq"
  int kcore = 5;
  std::string dataset_name;

  std::vector<int> sweep_m{1};
  std::vector<int> sweep_d{50};
  int sweep_epochs = 50;

  double fd_epsilon = 1e-4;
  double fd_tolerance = 1e-4;
  std::string fault_op;  // test instrumentation: corrupt this op's pullback
  int gradcheck_rows = 2;
  int gradcheck_items = 12;

  void apply(const std::string& key, const std::string& value);
  void load_file(const std::string& path);
  // resolves attention/m consistency; throws on contradiction
  void finalize();
};

// Entry point used by the binary and by tests. Returns the process exit code:
// 0 success, 2 configuration error, 3 data error, 4 numeric/divergence,
// 5 verification failure.
int run(int argc, const char* const* argv);
int run(const std::vector<std::string>& args);  // args without argv[0]

}  // namespace miqrec::cli
