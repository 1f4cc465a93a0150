#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "tta/tensor.hpp"

namespace tta {

// Epsilon added to every variance before the square root. Property tests run
// in double with a tighter epsilon so analytic identities can be checked near
// machine precision; all experiment code runs in float with the usual 1e-5.
template <typename Real>
constexpr Real default_bn_eps() {
  if constexpr (sizeof(Real) >= 8) {
    return Real(1e-12);
  } else {
    return Real(1e-5);
  }
}

// Per-channel first and second moments. Variance is always the biased
// (population) estimate; every consumer below assumes that convention.
template <typename Real>
struct ChannelStats {
  std::vector<Real> mean;
  std::vector<Real> var;

  ChannelStats() = default;
  explicit ChannelStats(std::int64_t channels)
      : mean(channels, Real(0)), var(channels, Real(0)) {}

  std::int64_t channels() const { return static_cast<std::int64_t>(mean.size()); }
};

// (mean, std) pairs used by the distance that drives the mixing coefficient.
template <typename Real>
struct MeanStd {
  std::vector<Real> mean;
  std::vector<Real> stdev;
};

// How a BN layer resolves its normalization statistics during a forward pass.
//  kSource      running statistics only
//  kTestBatch   current-batch statistics only
//  kMixFixed    caller-provided fixed blend weight on the source statistics
//  kAdaptive    blend weight computed per layer from the batch itself
enum class BnMode { kSource, kTestBatch, kMixFixed, kAdaptive };

inline const char* bn_mode_name(BnMode m) {
  switch (m) {
    case BnMode::kSource: return "source";
    case BnMode::kTestBatch: return "test-batch";
    case BnMode::kMixFixed: return "mix-fixed";
    case BnMode::kAdaptive: return "adaptive";
  }
  return "?";
}

// Diagnostics captured whenever the adaptive blend weight is computed.
// d_st is the source-to-batch statistics distance; mean_d_s / mean_d_t are
// the average image-to-source and image-to-batch distances.
struct AlphaRecord {
  int layer_index = -1;
  double alpha = 0.0;
  double d_st = 0.0;
  double mean_d_s = 0.0;
  double mean_d_t = 0.0;
};

// Mean and biased variance per channel over the (N, H, W) axes.
// Accumulation happens in double regardless of Real, which keeps the float
// path deterministic and accurate without changing its storage type.
template <typename Real>
ChannelStats<Real> batch_stats(const Tensor<Real>& x) {
  require_rank(x, 4, "batch_stats");
  const std::int64_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  if (n * hw <= 0) throw std::invalid_argument("batch_stats: empty reduction axes");
  ChannelStats<Real> out(c);
  const double inv = 1.0 / static_cast<double>(n * hw);
  for (std::int64_t ch = 0; ch < c; ++ch) {
    double sum = 0.0;
    for (std::int64_t i = 0; i < n; ++i) {
      const Real* p = &x.data[(i * c + ch) * hw];
      for (std::int64_t k = 0; k < hw; ++k) sum += static_cast<double>(p[k]);
    }
    const double mean = sum * inv;
    // second pass over centered values: constant channels come out exactly 0
    double acc = 0.0;
    for (std::int64_t i = 0; i < n; ++i) {
      const Real* p = &x.data[(i * c + ch) * hw];
      for (std::int64_t k = 0; k < hw; ++k) {
        const double d = static_cast<double>(p[k]) - mean;
        acc += d * d;
      }
    }
    out.mean[ch] = static_cast<Real>(mean);
    out.var[ch] = static_cast<Real>(acc * inv);
  }
  return out;
}

// Spatial mean/variance of a single sample, in the same representation as
// batch_stats so that downstream epsilon handling follows one code path. For
// a batch of one the result is bit-identical to the batch statistics.
template <typename Real>
ChannelStats<Real> image_stats(const Tensor<Real>& x, std::int64_t sample) {
  require_rank(x, 4, "image_stats");
  if (sample < 0 || sample >= x.dim(0)) {
    throw std::invalid_argument("image_stats: sample index " + std::to_string(sample) +
                                " out of range for batch of " + std::to_string(x.dim(0)));
  }
  const std::int64_t c = x.dim(1), hw = x.dim(2) * x.dim(3);
  ChannelStats<Real> out;
  out.mean.resize(c);
  out.var.resize(c);
  const double inv = 1.0 / static_cast<double>(hw);
  for (std::int64_t ch = 0; ch < c; ++ch) {
    const Real* p = &x.data[(sample * c + ch) * hw];
    double sum = 0.0;
    for (std::int64_t k = 0; k < hw; ++k) sum += static_cast<double>(p[k]);
    const double mean = sum * inv;
    double acc = 0.0;
    for (std::int64_t k = 0; k < hw; ++k) {
      const double d = static_cast<double>(p[k]) - mean;
      acc += d * d;
    }
    out.mean[ch] = static_cast<Real>(mean);
    out.var[ch] = static_cast<Real>(acc * inv);
  }
  return out;
}

// d(a, b) = ||mean_a - mean_b||_2 + ||std_a - std_b||_2. Symmetric,
// non-negative, and satisfies the triangle inequality as a sum of norms.
template <typename Real>
double stats_distance(const MeanStd<Real>& a, const MeanStd<Real>& b) {
  if (a.mean.size() != b.mean.size()) {
    throw std::invalid_argument("stats_distance: channel mismatch " +
                                std::to_string(a.mean.size()) + " vs " +
                                std::to_string(b.mean.size()));
  }
  double m2 = 0.0, s2 = 0.0;
  for (std::size_t i = 0; i < a.mean.size(); ++i) {
    const double dm = static_cast<double>(a.mean[i]) - static_cast<double>(b.mean[i]);
    const double ds = static_cast<double>(a.stdev[i]) - static_cast<double>(b.stdev[i]);
    m2 += dm * dm;
    s2 += ds * ds;
  }
  return std::sqrt(m2) + std::sqrt(s2);
}

// View of channel statistics as (mean, sqrt(var + eps)). All distances feed
// on this view so that zero-variance channels stay well defined.
template <typename Real>
MeanStd<Real> with_eps(const ChannelStats<Real>& s, Real eps) {
  MeanStd<Real> out;
  out.mean = s.mean;
  out.stdev.resize(s.var.size());
  for (std::size_t i = 0; i < s.var.size(); ++i) {
    out.stdev[i] = static_cast<Real>(std::sqrt(static_cast<double>(s.var[i]) +
                                               static_cast<double>(eps)));
  }
  return out;
}

// Blend weight on the source statistics:
//   alpha = 1 - (1/N) * sum_i d(source, batch) / (d(image_i, batch) + d(image_i, source))
// Each per-image ratio lies in [0, 1] by the triangle inequality, so alpha
// does too; the final clamp only ever trims floating-point spill. An image
// that exactly matches both statistics contributes a zero ratio (its distances
// carry no information about how far the batch sits from the source).
template <typename Real>
AlphaRecord compute_alpha(const ChannelStats<Real>& source, const ChannelStats<Real>& test,
                          const std::vector<ChannelStats<Real>>& per_image, Real eps) {
  if (source.channels() != test.channels()) {
    throw std::invalid_argument("compute_alpha: source/test channel mismatch");
  }
  if (per_image.empty()) throw std::invalid_argument("compute_alpha: no per-image statistics");

  const MeanStd<Real> src = with_eps(source, eps);
  const MeanStd<Real> tst = with_eps(test, eps);
  const double d_st = stats_distance(src, tst);

  double ratio_sum = 0.0, ds_sum = 0.0, dt_sum = 0.0;
  for (const ChannelStats<Real>& raw : per_image) {
    if (raw.channels() != source.channels()) {
      throw std::invalid_argument("compute_alpha: per-image channel mismatch");
    }
    const MeanStd<Real> img = with_eps(raw, eps);
    const double d_s = stats_distance(img, src);
    const double d_t = stats_distance(img, tst);
    const double denom = d_t + d_s;
    ratio_sum += denom > 0.0 ? d_st / denom : 0.0;
    ds_sum += d_s;
    dt_sum += d_t;
  }

  const double n = static_cast<double>(per_image.size());
  double alpha = 1.0 - ratio_sum / n;
  if (alpha < 0.0) alpha = 0.0;
  if (alpha > 1.0) alpha = 1.0;

  AlphaRecord rec;
  rec.alpha = alpha;
  rec.d_st = d_st;
  rec.mean_d_s = ds_sum / n;
  rec.mean_d_t = dt_sum / n;
  return rec;
}

// Convex blend of the two statistics with weight alpha on the source side.
// alpha = 0 reproduces the test statistics bitwise and alpha = 1 the source
// statistics bitwise (0*a + 1*b == b in IEEE arithmetic), which is what makes
// the pure modes exact special cases of the mixed path.
template <typename Real>
ChannelStats<Real> blend_stats(const ChannelStats<Real>& source, const ChannelStats<Real>& test,
                               Real alpha) {
  if (source.channels() != test.channels()) {
    throw std::invalid_argument("blend_stats: channel mismatch");
  }
  const Real w = alpha, u = Real(1) - alpha;
  ChannelStats<Real> out(source.channels());
  for (std::int64_t c = 0; c < source.channels(); ++c) {
    out.mean[c] = w * source.mean[c] + u * test.mean[c];
    out.var[c] = w * source.var[c] + u * test.var[c];
  }
  return out;
}

// Shared normalization kernel: y = (x - mean) * inv_std * gamma + beta with
// inv_std = 1/sqrt(var + eps). Every normalization path in the project goes
// through this exact expression so that modes which should coincide do so
// bit for bit.
template <typename Real>
void bn_apply(const Tensor<Real>& x, const std::vector<Real>& mean, const std::vector<Real>& var,
              const std::vector<Real>& gamma, const std::vector<Real>& beta, Real eps,
              Tensor<Real>& y) {
  require_rank(x, 4, "bn_apply");
  const std::int64_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  if (static_cast<std::int64_t>(mean.size()) != c || static_cast<std::int64_t>(var.size()) != c ||
      static_cast<std::int64_t>(gamma.size()) != c || static_cast<std::int64_t>(beta.size()) != c) {
    throw std::invalid_argument("bn_apply: parameter size does not match " + std::to_string(c) +
                                " channels");
  }
  if (!y.same_shape(x)) y = Tensor<Real>(x.shape);
  for (std::int64_t ch = 0; ch < c; ++ch) {
    const Real m = mean[ch];
    const Real inv = Real(1) / static_cast<Real>(std::sqrt(var[ch] + eps));
    const Real g = gamma[ch], b = beta[ch];
    for (std::int64_t i = 0; i < n; ++i) {
      const Real* px = &x.data[(i * c + ch) * hw];
      Real* py = &y.data[(i * c + ch) * hw];
      for (std::int64_t k = 0; k < hw; ++k) py[k] = (px[k] - m) * inv * g + b;
    }
  }
}

// One batch-norm layer as stored inside a model: affine parameters, running
// statistics gathered at training time, and the statistics mode to use at
// inference. 'transformed' holds a replacement affine pair produced by
// transform_affine; when present the layer normalizes with current-batch
// statistics only and applies that pair instead of gamma/beta.
template <typename Real>
struct BnLayerState {
  std::vector<Real> gamma;
  std::vector<Real> beta;
  ChannelStats<Real> running;
  Real eps = default_bn_eps<Real>();
};

// Rewrites the source/test statistics blend as a plain test-statistics
// normalization with adjusted affine parameters:
//   gamma' = sqrt(var_t + eps) / sqrt(alpha*var_s + (1-alpha)*var_t + eps) * gamma
//   beta'  = alpha * (mean_t - mean_s) / sqrt(var_t + eps) * gamma' + beta
// Normalizing with (mean_t, var_t, gamma', beta') then equals normalizing
// with the blended statistics and (gamma, beta) up to rounding, and collapses
// to the identity pair at alpha = 0.
template <typename Real>
std::pair<std::vector<Real>, std::vector<Real>> transform_affine(
    const ChannelStats<Real>& source, const ChannelStats<Real>& test,
    const std::vector<Real>& gamma, const std::vector<Real>& beta, Real alpha, Real eps) {
  const std::int64_t c = source.channels();
  if (test.channels() != c || static_cast<std::int64_t>(gamma.size()) != c ||
      static_cast<std::int64_t>(beta.size()) != c) {
    throw std::invalid_argument("transform_affine: channel mismatch");
  }
  if (!(alpha >= Real(0) && alpha <= Real(1))) {
    throw std::invalid_argument("transform_affine: alpha outside [0,1]");
  }
  std::vector<Real> gamma_t(c), beta_t(c);
  const Real w = alpha, u = Real(1) - alpha;
  for (std::int64_t ch = 0; ch < c; ++ch) {
    const Real std_t = static_cast<Real>(std::sqrt(test.var[ch] + eps));
    const Real var_mix = w * source.var[ch] + u * test.var[ch];
    const Real std_mix = static_cast<Real>(std::sqrt(var_mix + eps));
    const Real g = std_t / std_mix * gamma[ch];
    gamma_t[ch] = g;
    beta_t[ch] = w * (test.mean[ch] - source.mean[ch]) / std_t * g + beta[ch];
  }
  return {std::move(gamma_t), std::move(beta_t)};
}

// Intermediate values a mixed-statistics BN forward keeps for its backward
// pass. mean_src/mean_test let the backward reconstruct the blended mean's
// offset from the batch mean without re-reducing the input.
template <typename Real>
struct BnCache {
  bool live = false;
  Real alpha = Real(0);  // weight on source statistics; 0 = pure batch stats
  std::vector<Real> inv_std;   // 1/sqrt(var_eff + eps)
  std::vector<Real> mean_eff;  // blended mean actually subtracted
  std::vector<Real> mean_test; // batch mean of the input
  std::vector<Real> gamma;     // affine pair the forward applied
  Tensor<Real> xhat;           // normalized input before the affine map
};

// Forward through one BN layer with explicit statistics choice. 'test' are
// the current batch statistics (already computed by the caller so that they
// can be reused for the blend weight and the affine transformation).
// Writes y and, when cache is non-null, fills it for a later backward.
template <typename Real>
void mixbn_forward(const Tensor<Real>& x, const ChannelStats<Real>& source,
                   const ChannelStats<Real>& test, const std::vector<Real>& gamma,
                   const std::vector<Real>& beta, Real alpha, Real eps, Tensor<Real>& y,
                   BnCache<Real>* cache = nullptr) {
  if (!(alpha >= Real(0) && alpha <= Real(1))) {
    throw std::invalid_argument("mixbn_forward: alpha outside [0,1]");
  }
  const ChannelStats<Real> eff = blend_stats(source, test, alpha);
  bn_apply(x, eff.mean, eff.var, gamma, beta, eps, y);
  if (cache) {
    const std::int64_t c = eff.channels();
    cache->live = true;
    cache->alpha = alpha;
    cache->mean_eff = eff.mean;
    cache->mean_test = test.mean;
    cache->gamma = gamma;
    cache->inv_std.resize(c);
    for (std::int64_t ch = 0; ch < c; ++ch) {
      cache->inv_std[ch] = Real(1) / static_cast<Real>(std::sqrt(eff.var[ch] + eps));
    }
    // Recover xhat from the affine output where gamma != 0 would require a
    // division; recompute it directly instead, reusing the shared kernel with
    // an identity affine so the cached value matches the forward bit for bit.
    std::vector<Real> ones(c, Real(1)), zeros(c, Real(0));
    bn_apply(x, eff.mean, eff.var, ones, zeros, eps, cache->xhat);
  }
}

// Backward through the mixed-statistics normalization. The blend weight is
// treated as a constant; batch mean and variance are differentiated through.
// With w = 1 - alpha, s = 1/inv_std, m = N*H*W:
//   dx = inv_std * (dxhat - w/m * sum(dxhat) - w/m * dot * (xhat + delta*inv_std))
// where dot = sum(dxhat * xhat) and delta = mean_eff - mean_test per channel.
// alpha = 0 gives the familiar train-mode BN backward; alpha = 1 leaves only
// the pointwise inv_std * dxhat of inference normalization.
template <typename Real>
void mixbn_backward(const Tensor<Real>& dy, const BnCache<Real>& cache, Tensor<Real>* dx,
                    std::vector<Real>* dgamma, std::vector<Real>* dbeta) {
  if (!cache.live) throw std::logic_error("mixbn_backward: no cached forward pass");
  require_rank(dy, 4, "mixbn_backward");
  if (!dy.same_shape(cache.xhat)) {
    throw std::invalid_argument("mixbn_backward: dy shape " + shape_to_string(dy.shape) +
                                " does not match forward shape " +
                                shape_to_string(cache.xhat.shape));
  }
  const std::int64_t n = dy.dim(0), c = dy.dim(1), hw = dy.dim(2) * dy.dim(3);
  const Real m = static_cast<Real>(n * hw);
  const Real w = Real(1) - cache.alpha;

  if (dgamma) dgamma->assign(c, Real(0));
  if (dbeta) dbeta->assign(c, Real(0));
  if (dx && !dx->same_shape(dy)) *dx = Tensor<Real>(dy.shape);

  for (std::int64_t ch = 0; ch < c; ++ch) {
    const Real g = cache.gamma[ch];
    const Real inv = cache.inv_std[ch];
    const Real delta = cache.mean_eff[ch] - cache.mean_test[ch];
    Real sum_dxh = 0, dot = 0, sum_dy = 0, sum_dy_xhat = 0;
    for (std::int64_t i = 0; i < n; ++i) {
      const Real* pdy = &dy.data[(i * c + ch) * hw];
      const Real* pxh = &cache.xhat.data[(i * c + ch) * hw];
      for (std::int64_t k = 0; k < hw; ++k) {
        const Real dxh = pdy[k] * g;
        sum_dy += pdy[k];
        sum_dy_xhat += pdy[k] * pxh[k];
        sum_dxh += dxh;
        dot += dxh * pxh[k];
      }
    }
    if (dgamma) (*dgamma)[ch] = sum_dy_xhat;
    if (dbeta) (*dbeta)[ch] = sum_dy;
    if (dx) {
      const Real a1 = w / m * sum_dxh;
      const Real a2 = w / m * dot;
      const Real a3 = a2 * delta * inv;
      for (std::int64_t i = 0; i < n; ++i) {
        const Real* pdy = &dy.data[(i * c + ch) * hw];
        const Real* pxh = &cache.xhat.data[(i * c + ch) * hw];
        Real* pdx = &dx->data[(i * c + ch) * hw];
        for (std::int64_t k = 0; k < hw; ++k) {
          const Real dxh = pdy[k] * g;
          pdx[k] = inv * (dxh - a1 - a2 * pxh[k] - a3);
        }
      }
    }
  }
}

// Per-image spatial statistics for every sample of a batch, in sample order.
template <typename Real>
std::vector<ChannelStats<Real>> per_image_stats(const Tensor<Real>& x) {
  require_rank(x, 4, "per_image_stats");
  std::vector<ChannelStats<Real>> out;
  out.reserve(static_cast<std::size_t>(x.dim(0)));
  for (std::int64_t i = 0; i < x.dim(0); ++i) out.push_back(image_stats(x, i));
  return out;
}

}  // namespace tta
