#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "tta/layers.hpp"
#include "tta/rng.hpp"
#include "tta/tensor.hpp"

namespace ttest {

// Relative error with a floor so near-zero pairs compare absolutely.
inline double rel_err(double a, double b, double floor = 1e-6) {
  const double scale = std::max({std::fabs(a), std::fabs(b), floor});
  return std::fabs(a - b) / scale;
}

template <typename Real>
tta::Tensor<Real> random_tensor(std::vector<std::int64_t> shape, tta::Rng& rng, double lo = -1.0,
                                double hi = 1.0) {
  tta::Tensor<Real> t(std::move(shape));
  for (Real& v : t.data) v = static_cast<Real>(rng.uniform(lo, hi));
  return t;
}

template <typename Real>
tta::Tensor<Real> random_normal_tensor(std::vector<std::int64_t> shape, tta::Rng& rng,
                                       double mean = 0.0, double stddev = 1.0) {
  tta::Tensor<Real> t(std::move(shape));
  for (Real& v : t.data) v = static_cast<Real>(rng.normal(mean, stddev));
  return t;
}

// Central finite difference of f with respect to x[i].
template <typename F>
double central_diff(F&& f, double& xi, double h) {
  const double orig = xi;
  xi = orig + h;
  const double fp = f();
  xi = orig - h;
  const double fm = f();
  xi = orig;
  return (fp - fm) / (2.0 * h);
}

// Gives a freshly initialized model non-trivial running statistics by
// streaming a few random batches through it in training mode, mimicking what
// source training does to the BN buffers.
template <typename Real>
void warm_up_running_stats(tta::Model<Real>& model, std::int64_t in_ch, std::int64_t side,
                           std::uint64_t seed, int batches = 4, std::int64_t batch = 8) {
  tta::Rng rng(seed);
  tta::BnPassConfig cfg;
  cfg.mode = tta::BnMode::kTestBatch;
  cfg.update_running = true;
  cfg.momentum = 0.3;
  for (int b = 0; b < batches; ++b) {
    tta::Tensor<Real> x = random_normal_tensor<Real>({batch, in_ch, side, side}, rng, 0.1, 1.2);
    tta::forward(model, x, cfg);
  }
}

}  // namespace ttest
