#pragma once

#include <cmath>
#include <vector>

#include "perturbkit/mat.hpp"

namespace perturbkit {

/// Adam with the usual defaults. Moments live for the duration of one
/// training run; persisted model state is parameters only.
class Adam {
 public:
  Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void step(const std::vector<Mat*>& params, const std::vector<Mat>& grads) {
    if (m_.empty()) {
      for (auto* p : params) {
        m_.emplace_back(p->rows, p->cols);
        v_.emplace_back(p->rows, p->cols);
      }
    }
    ++t_;
    double bc1 = 1.0 - std::pow(beta1_, t_);
    double bc2 = 1.0 - std::pow(beta2_, t_);
    for (size_t i = 0; i < params.size(); ++i) {
      Mat& p = *params[i];
      const Mat& g = grads[i];
      for (size_t j = 0; j < p.size(); ++j) {
        m_[i].d[j] = beta1_ * m_[i].d[j] + (1.0 - beta1_) * g.d[j];
        v_[i].d[j] = beta2_ * v_[i].d[j] + (1.0 - beta2_) * g.d[j] * g.d[j];
        double mhat = m_[i].d[j] / bc1;
        double vhat = v_[i].d[j] / bc2;
        p.d[j] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
      }
    }
  }

 private:
  double lr_, beta1_, beta2_, eps_;
  int t_ = 0;
  std::vector<Mat> m_, v_;
};

}  // namespace perturbkit
