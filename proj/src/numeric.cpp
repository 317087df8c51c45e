#include "miqrec/numeric.hpp"

#include <cmath>

namespace miqrec::numeric {

Matrix masked_softmax_rows(const Matrix& scores, const Matrix& mask) {
  require_same_shape(scores, mask, "masked_softmax_rows");
  Matrix out(scores.rows(), scores.cols());
  for (int i = 0; i < scores.rows(); ++i) {
    const double* s = scores.row(i);
    const double* m = mask.row(i);
    double rmax = -HUGE_VAL;
    for (int j = 0; j < scores.cols(); ++j)
      if (m[j] != 0.0) rmax = std::max(rmax, s[j]);
    if (rmax == -HUGE_VAL)
      throw numeric_error("masked_softmax_rows: row " + std::to_string(i) + " is fully masked");
    double* o = out.row(i);
    double sum = 0.0;
    for (int j = 0; j < scores.cols(); ++j) {
      const double adj = m[j] != 0.0 ? s[j] : s[j] - 1e9;
      o[j] = std::exp(adj - rmax);
      sum += o[j];
    }
    const double inv = 1.0 / sum;
    for (int j = 0; j < scores.cols(); ++j) o[j] = m[j] != 0.0 ? o[j] * inv : 0.0;
  }
  return out;
}

Matrix layer_norm(const Matrix& x, const Matrix& gain, const Matrix& bias, double eps) {
  Matrix y;
  kernels::layer_norm_forward(x, gain, bias, eps, y);
  return y;
}

Matrix dropout(const Matrix& x, double rate, RngStream& rng, bool training) {
  if (rate < 0.0 || rate >= 1.0)
    throw numeric_error("dropout: rate must be in [0, 1), got " + std::to_string(rate));
  if (!training || rate == 0.0) return x;
  Matrix y(x.rows(), x.cols());
  const double keep_scale = 1.0 / (1.0 - rate);
  for (size_t i = 0; i < x.size(); ++i)
    y.data()[i] = rng.uniform() < rate ? 0.0 : x.data()[i] * keep_scale;
  return y;
}

std::vector<Matrix> finite_diff_grad(const std::function<double()>& f,
                                     std::span<Parameter* const> params, double epsilon) {
  std::vector<Matrix> grads;
  grads.reserve(params.size());
  for (Parameter* p : params) {
    Matrix g(p->value.rows(), p->value.cols());
    for (size_t i = 0; i < p->value.size(); ++i) {
      const double saved = p->value.data()[i];
      p->value.data()[i] = saved + epsilon;
      const double up = f();
      p->value.data()[i] = saved - epsilon;
      const double down = f();
      p->value.data()[i] = saved;
      if (!std::isfinite(up) || !std::isfinite(down))
        throw numeric_error("finite_diff_grad: non-finite objective at parameter " + p->name);
      g.data()[i] = (up - down) / (2.0 * epsilon);
    }
    grads.push_back(std::move(g));
  }
  return grads;
}

std::vector<GroupCheck> compare_to_finite_diff(std::span<Parameter* const> params,
                                               const std::function<double()>& f, double epsilon) {
  std::vector<GroupCheck> out;
  const auto fd = finite_diff_grad(f, params, epsilon);
  for (size_t k = 0; k < params.size(); ++k) {
    GroupCheck gc{params[k]->name, 0.0};
    for (size_t i = 0; i < fd[k].size(); ++i)
      gc.max_rel_error =
          std::max(gc.max_rel_error, relative_error(params[k]->grad.data()[i], fd[k].data()[i]));
    out.push_back(std::move(gc));
  }
  return out;
}

}  // namespace miqrec::numeric
