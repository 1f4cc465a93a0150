#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "tta/errors.hpp"
#include "tta/tensor.hpp"

namespace tta {

// The adaptation objectives. kEm is plain entropy minimization; the other
// three generalize it with temperature scaling, a detached teacher, and
// augmentation-averaged teacher logits respectively.
enum class GemVariant { kEm, kGemT, kGemSkd, kGemAug };

inline const char* gem_variant_name(GemVariant v) {
  switch (v) {
    case GemVariant::kEm: return "EM";
    case GemVariant::kGemT: return "GEM-T";
    case GemVariant::kGemSkd: return "GEM-SKD";
    case GemVariant::kGemAug: return "GEM-AUG";
  }
  return "?";
}

inline GemVariant gem_variant_from_name(const std::string& name) {
  if (name == "EM") return GemVariant::kEm;
  if (name == "GEM-T") return GemVariant::kGemT;
  if (name == "GEM-SKD") return GemVariant::kGemSkd;
  if (name == "GEM-AUG") return GemVariant::kGemAug;
  throw ConfigError("unknown loss variant '" + name + "'");
}

// Fully resolved loss configuration. tau_p scales the target distribution,
// tau_q the prediction; detach_p treats the target as a constant in the
// gradient; m is the number of augmented views feeding a GEM-AUG teacher.
struct GemConfig {
  GemVariant variant = GemVariant::kEm;
  double tau_p = 1.0;
  double tau_q = 1.0;
  double s = 1.0;  // dynamic-temperature strength used to resolve tau values
  bool detach_p = false;
  int m = 8;

  void validate() const {
    if (!(tau_p >= 1.0)) throw ConfigError("gem: tau_p must be >= 1");
    if (!(tau_q >= tau_p)) throw ConfigError("gem: tau_q must be >= tau_p");
    if (!(s > 0.0)) throw ConfigError("gem: temperature strength s must be > 0");
    if (m < 1) throw ConfigError("gem: m must be >= 1");
    switch (variant) {
      case GemVariant::kEm:
        if (tau_p != 1.0 || tau_q != 1.0 || detach_p) {
          throw ConfigError("gem: EM requires tau_p = tau_q = 1 and no detached target");
        }
        break;
      case GemVariant::kGemT:
        if (tau_p != tau_q || detach_p) {
          throw ConfigError("gem: GEM-T requires tau_p = tau_q and no detached target");
        }
        break;
      case GemVariant::kGemSkd:
      case GemVariant::kGemAug:
        if (tau_p != 1.0 || !detach_p) {
          throw ConfigError(std::string("gem: ") + gem_variant_name(variant) +
                            " requires tau_p = 1 and a detached target");
        }
        break;
    }
  }
};

// log softmax of one row at temperature tau, with max subtraction. Every
// probability in the loss module flows through this kernel so that variants
// which should coincide numerically do so bit for bit.
template <typename Real>
void log_softmax_row(const Real* z, std::int64_t c, double tau, double* logq) {
  double mx = -std::numeric_limits<double>::infinity();
  for (std::int64_t k = 0; k < c; ++k) {
    const double t = static_cast<double>(z[k]) / tau;
    logq[k] = t;
    if (t > mx) mx = t;
  }
  double sum = 0.0;
  for (std::int64_t k = 0; k < c; ++k) sum += std::exp(logq[k] - mx);
  const double lse = mx + std::log(sum);
  for (std::int64_t k = 0; k < c; ++k) logq[k] -= lse;
}

template <typename Real>
void softmax_row(const Real* z, std::int64_t c, double tau, double* p) {
  log_softmax_row(z, c, tau, p);
  for (std::int64_t k = 0; k < c; ++k) p[k] = std::exp(p[k]);
}

// Row-wise softmax of a (N, C) tensor at temperature tau.
template <typename Real>
Tensor<Real> softmax(const Tensor<Real>& logits, double tau = 1.0) {
  require_rank(logits, 2, "softmax");
  const std::int64_t n = logits.dim(0), c = logits.dim(1);
  Tensor<Real> out(logits.shape);
  std::vector<double> row(static_cast<std::size_t>(c));
  for (std::int64_t i = 0; i < n; ++i) {
    softmax_row(logits.row2(i), c, tau, row.data());
    for (std::int64_t k = 0; k < c; ++k) out.at2(i, k) = static_cast<Real>(row[k]);
  }
  return out;
}

template <typename Real>
struct LossResult {
  double value = 0.0;
  Tensor<Real> grad;  // gradient w.r.t. the prediction logits, batch mean
};

// Generalized entropy objective over a batch of logits:
//   L_i = -tau_q^2 * sum_k p_k log q_k
// with q = softmax(z / tau_q) and p = softmax(z_p / tau_p) where z_p is the
// teacher row when given and z itself otherwise. Returns the batch mean and
// its analytic gradient:
//   dL/dz_k = -tau_q^2 * [ (p_k - q_k)/tau_q
//                          + [p not detached] * p_k/tau_p * (log q_k - sum_j p_j log q_j) ]
// With a detached target this collapses to -tau_q * (p - q), the familiar
// scaled distillation gradient.
template <typename Real>
LossResult<Real> gem_loss(const Tensor<Real>& logits, const GemConfig& cfg,
                          const Tensor<Real>* teacher_logits = nullptr) {
  cfg.validate();
  require_rank(logits, 2, "gem_loss");
  if (logits.dim(0) <= 0) throw std::invalid_argument("gem_loss: empty batch");
  if (cfg.variant == GemVariant::kGemAug) {
    if (!teacher_logits) throw std::invalid_argument("gem_loss: GEM-AUG requires teacher logits");
    if (teacher_logits->shape != logits.shape) {
      throw std::invalid_argument("gem_loss: teacher shape " +
                                  shape_to_string(teacher_logits->shape) +
                                  " does not match logits " + shape_to_string(logits.shape));
    }
  } else if (teacher_logits) {
    throw std::invalid_argument("gem_loss: teacher logits only apply to GEM-AUG");
  }

  const std::int64_t n = logits.dim(0), c = logits.dim(1);
  LossResult<Real> res;
  res.grad = Tensor<Real>(logits.shape);
  std::vector<double> logq(static_cast<std::size_t>(c)), p(static_cast<std::size_t>(c));
  const double tq = cfg.tau_q, tp = cfg.tau_p;
  const double inv_n = 1.0 / static_cast<double>(n);
  double total = 0.0;
  for (std::int64_t i = 0; i < n; ++i) {
    const Real* z = logits.row2(i);
    log_softmax_row(z, c, tq, logq.data());
    const Real* zp = teacher_logits ? teacher_logits->row2(i) : z;
    softmax_row(zp, c, tp, p.data());

    double cross = 0.0;  // sum_k p_k log q_k
    for (std::int64_t k = 0; k < c; ++k) cross += p[k] * logq[k];
    total += -tq * tq * cross;

    Real* g = res.grad.row2(i);
    for (std::int64_t k = 0; k < c; ++k) {
      const double qk = std::exp(logq[k]);
      double d = (p[k] - qk) / tq;
      if (!cfg.detach_p) d += p[k] / tp * (logq[k] - cross);
      g[k] = static_cast<Real>(-tq * tq * d * inv_n);
    }
  }
  res.value = total * inv_n;
  return res;
}

// Entropy minimization is the tau_p = tau_q = 1, attached-target member of
// the family; routing it through the same kernel makes the equivalence hold
// bit for bit rather than merely numerically.
template <typename Real>
LossResult<Real> em_loss(const Tensor<Real>& logits) {
  GemConfig cfg;
  cfg.variant = GemVariant::kEm;
  return gem_loss(logits, cfg);
}

// Data-driven temperature: s times the batch-mean per-sample population
// standard deviation of the logits, clamped from below at 1 so the
// tau_q >= tau_p >= 1 ordering survives low-spread batches.
template <typename Real>
double dynamic_temperature(const Tensor<Real>& logits, double s) {
  require_rank(logits, 2, "dynamic_temperature");
  const std::int64_t n = logits.dim(0), c = logits.dim(1);
  if (n <= 0 || c <= 0) throw std::invalid_argument("dynamic_temperature: empty logits");
  double acc = 0.0;
  for (std::int64_t i = 0; i < n; ++i) {
    const Real* z = logits.row2(i);
    double sum = 0.0, sumsq = 0.0;
    for (std::int64_t k = 0; k < c; ++k) {
      const double v = static_cast<double>(z[k]);
      sum += v;
      sumsq += v * v;
    }
    const double mean = sum / static_cast<double>(c);
    double var = sumsq / static_cast<double>(c) - mean * mean;
    if (var < 0.0) var = 0.0;
    acc += std::sqrt(var);
  }
  const double tau = s * acc / static_cast<double>(n);
  return tau < 1.0 ? 1.0 : tau;
}

// Resolves a variant against the current student logits (and, for GEM-AUG,
// the per-view logits whose mean becomes the teacher). Returns the concrete
// loss configuration plus the teacher tensor when one is needed.
template <typename Real>
std::pair<GemConfig, std::optional<Tensor<Real>>> make_variant(
    GemVariant variant, const Tensor<Real>& logits, double s,
    const std::vector<Tensor<Real>>* view_logits = nullptr) {
  GemConfig cfg;
  cfg.variant = variant;
  cfg.s = s;
  std::optional<Tensor<Real>> teacher;
  switch (variant) {
    case GemVariant::kEm:
      break;
    case GemVariant::kGemT: {
      const double tau = dynamic_temperature(logits, s);
      cfg.tau_p = tau;
      cfg.tau_q = tau;
      break;
    }
    case GemVariant::kGemSkd: {
      cfg.tau_p = 1.0;
      cfg.tau_q = dynamic_temperature(logits, s);
      cfg.detach_p = true;
      break;
    }
    case GemVariant::kGemAug: {
      if (!view_logits || view_logits->empty()) {
        throw std::invalid_argument("make_variant: GEM-AUG requires per-view logits");
      }
      cfg.tau_p = 1.0;
      cfg.tau_q = dynamic_temperature(logits, s);
      cfg.detach_p = true;
      cfg.m = static_cast<int>(view_logits->size());
      Tensor<Real> mean(logits.shape);
      for (const Tensor<Real>& v : *view_logits) {
        if (v.shape != logits.shape) {
          throw std::invalid_argument("make_variant: view logits shape mismatch");
        }
        for (std::size_t k = 0; k < mean.data.size(); ++k) mean.data[k] += v.data[k];
      }
      const Real inv = Real(1) / static_cast<Real>(view_logits->size());
      for (Real& v : mean.data) v *= inv;
      teacher = std::move(mean);
      break;
    }
  }
  cfg.validate();
  return {cfg, std::move(teacher)};
}

// Cross entropy against integer labels with mean reduction, used by source
// training. Gradient is (softmax(z) - onehot(y)) / N.
template <typename Real>
LossResult<Real> cross_entropy_loss(const Tensor<Real>& logits, const std::vector<int>& labels) {
  require_rank(logits, 2, "cross_entropy_loss");
  const std::int64_t n = logits.dim(0), c = logits.dim(1);
  if (static_cast<std::int64_t>(labels.size()) != n) {
    throw std::invalid_argument("cross_entropy_loss: label count mismatch");
  }
  LossResult<Real> res;
  res.grad = Tensor<Real>(logits.shape);
  std::vector<double> logq(static_cast<std::size_t>(c));
  const double inv_n = 1.0 / static_cast<double>(n);
  double total = 0.0;
  for (std::int64_t i = 0; i < n; ++i) {
    const int y = labels[static_cast<std::size_t>(i)];
    if (y < 0 || y >= c) throw std::invalid_argument("cross_entropy_loss: label out of range");
    log_softmax_row(logits.row2(i), c, 1.0, logq.data());
    total -= logq[static_cast<std::size_t>(y)];
    Real* g = res.grad.row2(i);
    for (std::int64_t k = 0; k < c; ++k) {
      const double qk = std::exp(logq[static_cast<std::size_t>(k)]);
      g[k] = static_cast<Real>((qk - (k == y ? 1.0 : 0.0)) * inv_n);
    }
  }
  res.value = total * inv_n;
  return res;
}

template <typename Real>
std::vector<int> argmax_rows(const Tensor<Real>& logits) {
  require_rank(logits, 2, "argmax_rows");
  const std::int64_t n = logits.dim(0), c = logits.dim(1);
  std::vector<int> out(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) {
    const Real* z = logits.row2(i);
    int best = 0;
    for (std::int64_t k = 1; k < c; ++k) {
      if (z[k] > z[best]) best = static_cast<int>(k);
    }
    out[static_cast<std::size_t>(i)] = best;
  }
  return out;
}

template <typename Real>
double accuracy(const Tensor<Real>& logits, const std::vector<int>& labels) {
  const std::vector<int> pred = argmax_rows(logits);
  if (pred.size() != labels.size()) throw std::invalid_argument("accuracy: label count mismatch");
  if (pred.empty()) return 0.0;
  std::size_t hit = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hit += pred[i] == labels[i];
  return static_cast<double>(hit) / static_cast<double>(pred.size());
}

}  // namespace tta
