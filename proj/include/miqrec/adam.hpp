#pragma once

#include <cmath>
#include <vector>

#include "miqrec/tape.hpp"

namespace miqrec {

struct AdamConfig {
  double lr = 0.001;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Bias-corrected Adam over a fixed parameter list. Moment buffers are shaped
// like their parameters; the step counter is shared.
class Adam {
 public:
  Adam(std::vector<Parameter*> params, AdamConfig cfg) : params_(std::move(params)), cfg_(cfg) {
    for (Parameter* p : params_) {
      m_.emplace_back(p->value.rows(), p->value.cols());
      v_.emplace_back(p->value.rows(), p->value.cols());
    }
  }

  void step() {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, (double)t_);
    const double bc2 = 1.0 - std::pow(cfg_.beta2, (double)t_);
    for (size_t k = 0; k < params_.size(); ++k) {
      Parameter& p = *params_[k];
      double* m = m_[k].data();
      double* v = v_[k].data();
      const double* g = p.grad.data();
      double* w = p.value.data();
      const size_t n = p.value.size();
      for (size_t i = 0; i < n; ++i) {
        m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g[i];
        v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
        const double mhat = m[i] / bc1;
        const double vhat = v[i] / bc2;
        w[i] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
      }
    }
  }

  void zero_grads() {
    for (Parameter* p : params_) p->zero_grad();
  }

  long long step_count() const { return t_; }
  const AdamConfig& config() const { return cfg_; }

 private:
  std::vector<Parameter*> params_;
  std::vector<Matrix> m_, v_;
  AdamConfig cfg_;
  long long t_ = 0;
};

}  // namespace miqrec
