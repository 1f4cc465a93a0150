#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <ostream>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "tta/adapt.hpp"
#include "tta/batchnorm.hpp"
#include "tta/gem.hpp"
#include "tta/layers.hpp"
#include "tta/rng.hpp"
#include "tta/tensor.hpp"

// Property suites behind the `verify` command: exactness of the
// statistics-to-affine rewrite, finite-difference oracles for the loss
// gradients, range and endpoint guarantees of the adaptive blend weight, and
// the reductions that tie the adaptation methods together. Each suite is a
// plain function so the same code backs the CLI and the test binaries.

namespace tta {

// Outcome of one suite. 'detail' is a one-line summary with counts and worst
// observed errors; a failing suite names the first offender instead.
struct VerifyResult {
  std::string suite;
  bool pass = false;
  double seconds = 0.0;
  std::string detail;
};

namespace detail {

class Stopwatch {
 public:
  Stopwatch() : start_(std::chrono::steady_clock::now()) {}
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_;
};

inline std::string format_sci(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.2e", v);
  return buf;
}

// Relative gap with a floor, so near-zero pairs compare absolutely and
// finite-difference noise on vanishing gradients cannot dominate the ratio.
inline double rel_gap(double a, double b, double floor = 1e-5) {
  const double scale = std::max({std::fabs(a), std::fabs(b), floor});
  return std::fabs(a - b) / scale;
}

// Comparison floor for a central finite difference at step h on an objective
// of magnitude |f|: the quotient carries round-off of about |f| * eps / h, so
// entries whose true gradient sits below that are compared absolutely. The
// constant is 30 * eps / (h * tol) with h = 1e-5 and tol = 1e-4, keeping a
// thirty-fold safety margin between the noise bound and a reported failure.
inline double fd_floor(double f_abs) { return std::max(3e-6, f_abs * 6.6e-6); }

// Streams a few random batches through the model in training mode so its
// running statistics are non-trivial before a suite exercises them.
template <typename Real>
void verify_warmup(Model<Real>& model, int in_ch, std::uint64_t seed) {
  Rng rng(seed);
  BnPassConfig pass;
  pass.mode = BnMode::kTestBatch;
  pass.update_running = true;
  pass.momentum = 0.3;
  for (int b = 0; b < 4; ++b) {
    Tensor<Real> x({8, in_ch, 8, 8});
    for (Real& v : x.data) v = static_cast<Real>(rng.normal(0.1, 1.2));
    forward(model, x, pass);
  }
}

// Worst absolute difference between the mixed-statistics forward and the
// rewritten test-statistics forward over random (stats, affine, alpha, batch)
// instances. Inputs carry a guaranteed per-channel spread so degenerate batch
// variances cannot turn the algebra check into a conditioning check.
template <typename Real>
double transform_suite_worst(int instances, std::uint64_t seed) {
  Rng rng(seed);
  double worst = 0.0;
  for (int t = 0; t < instances; ++t) {
    const std::int64_t c = 1 + static_cast<std::int64_t>(rng.uniform_index(24));
    const std::int64_t n = 1 + static_cast<std::int64_t>(rng.uniform_index(6));
    const std::int64_t h = 2 + static_cast<std::int64_t>(rng.uniform_index(4));
    const std::int64_t w = 2 + static_cast<std::int64_t>(rng.uniform_index(4));
    Tensor<Real> x({n, c, h, w});
    for (std::int64_t ch = 0; ch < c; ++ch) {
      const double center = rng.uniform(-1.0, 1.0);
      const double spread = rng.uniform(0.7, 1.3);
      std::int64_t k = 0;
      for (std::int64_t i = 0; i < n; ++i) {
        Real* p = &x.data[static_cast<std::size_t>((i * c + ch) * h * w)];
        for (std::int64_t s = 0; s < h * w; ++s, ++k) {
          const double off = (k % 2 == 0 ? spread : -spread) + rng.uniform(-0.2, 0.2);
          p[s] = static_cast<Real>(center + off);
        }
      }
    }
    ChannelStats<Real> source(c);
    std::vector<Real> gamma(static_cast<std::size_t>(c)), beta(static_cast<std::size_t>(c));
    for (std::int64_t ch = 0; ch < c; ++ch) {
      source.mean[ch] = static_cast<Real>(rng.uniform(-1.0, 1.0));
      source.var[ch] = static_cast<Real>(rng.uniform(0.5, 2.0));
      gamma[static_cast<std::size_t>(ch)] = static_cast<Real>(rng.uniform(-1.0, 1.0));
      beta[static_cast<std::size_t>(ch)] = static_cast<Real>(rng.uniform(-1.0, 1.0));
    }
    double a = rng.uniform(0.0, 1.0);
    if (t % 7 == 0) a = 0.0;
    if (t % 11 == 0) a = 1.0;
    const Real alpha = static_cast<Real>(a);
    const Real eps = default_bn_eps<Real>();

    const ChannelStats<Real> test = batch_stats(x);
    Tensor<Real> mixed, rewritten;
    mixbn_forward(x, source, test, gamma, beta, alpha, eps, mixed);
    const auto pair = transform_affine(source, test, gamma, beta, alpha, eps);
    mixbn_forward(x, source, test, pair.first, pair.second, Real(0), eps, rewritten);
    for (std::size_t i = 0; i < mixed.data.size(); ++i) {
      const double d = std::fabs(static_cast<double>(mixed.data[i]) -
                                 static_cast<double>(rewritten.data[i]));
      if (d > worst) worst = d;
    }
  }
  return worst;
}

// Bitwise forward equality of the blend endpoints against the pure modes:
// alpha = 0 versus test-batch statistics, alpha = 1 versus source statistics.
template <typename Real>
std::pair<bool, bool> endpoint_forwards_agree(std::uint64_t seed) {
  Model<Real> model = make_model<Real>(small_convnet(3, 5), 31);
  verify_warmup(model, 3, derive_seed(seed, "warmup"));
  Rng rng(derive_seed(seed, "batch"));
  Tensor<Real> x({6, 3, 16, 16});
  for (Real& v : x.data) v = static_cast<Real>(rng.normal(0.2, 1.0));

  auto pass_with = [](BnMode mode, double alpha) {
    BnPassConfig p;
    p.mode = mode;
    p.fixed_alpha = alpha;
    return p;
  };
  auto same_bits = [](const Tensor<Real>& a, const Tensor<Real>& b) {
    return a.data.size() == b.data.size() &&
           std::memcmp(a.data.data(), b.data.data(), a.data.size() * sizeof(Real)) == 0;
  };
  const Tensor<Real> y0 = forward(model, x, pass_with(BnMode::kMixFixed, 0.0));
  const Tensor<Real> yt = forward(model, x, pass_with(BnMode::kTestBatch, 0.0));
  const Tensor<Real> y1 = forward(model, x, pass_with(BnMode::kMixFixed, 1.0));
  const Tensor<Real> ys = forward(model, x, pass_with(BnMode::kSource, 0.0));
  return {same_bits(y0, yt), same_bits(y1, ys)};
}

}  // namespace detail

// The blend-to-affine rewrite must reproduce the mixed-statistics output to
// rounding: max abs diff <= 1e-12 in 64-bit and <= 1e-5 in 32-bit, over
// 'instances' random cases per precision.
inline VerifyResult verify_transform_exactness(int instances = 1000) {
  detail::Stopwatch clock;
  VerifyResult r;
  r.suite = "transform-exactness";
  const double worst64 =
      detail::transform_suite_worst<double>(instances, derive_seed(0, "verify-transform64"));
  const double worst32 =
      detail::transform_suite_worst<float>(instances, derive_seed(0, "verify-transform32"));
  r.pass = worst64 <= 1e-12 && worst32 <= 1e-5;
  r.detail = std::to_string(instances) + " instances per precision; max |diff| " +
             detail::format_sci(worst64) + " (64-bit, tol 1e-12), " + detail::format_sci(worst32) +
             " (32-bit, tol 1e-05)";
  r.seconds = clock.seconds();
  return r;
}

// Analytic loss gradients against central finite differences: once at the
// logit level over the temperature/detach/class-count grid, and once through
// the whole network for every parameter, with the blended-statistics BN path
// active so batch statistics are differentiated through as in adaptation.
// Detached variants are compared against the derivative of the loss with the
// target distribution frozen at its unperturbed value, which is exactly what
// detaching means.
inline VerifyResult verify_gem_gradient_oracle(int draws = 100) {
  detail::Stopwatch clock;
  VerifyResult r;
  r.suite = "gem-gradient-oracle";
  const double tol = 1e-4;

  double worst_logit = 0.0;
  long logit_checked = 0;
  int combos = 0;
  {
    const double taus[] = {1.0, 1.5, 3.0, 7.0};
    const std::int64_t class_counts[] = {2, 5, 65};
    const std::int64_t n = 3;
    Rng rng(derive_seed(0, "verify-gem"));
    for (bool detach : {false, true}) {
      for (double tau : taus) {
        GemConfig cfg;
        cfg.variant = detach ? GemVariant::kGemSkd : GemVariant::kGemT;
        cfg.tau_p = detach ? 1.0 : tau;
        cfg.tau_q = tau;
        cfg.detach_p = detach;
        cfg.validate();
        for (std::int64_t c : class_counts) {
          ++combos;
          std::vector<double> logq(static_cast<std::size_t>(c)), prow(static_cast<std::size_t>(c));
          for (int d = 0; d < draws; ++d) {
            Tensor<double> z({n, c});
            for (double& v : z.data) v = rng.uniform(-4.0, 4.0);
            const LossResult<double> res = gem_loss(z, cfg);
            Tensor<double> p_frozen;
            if (detach) p_frozen = softmax(z, cfg.tau_p);

            // Value-only objective through the same kernels as gem_loss. For
            // the detached variants the target distribution stays frozen at
            // its unperturbed value, which is exactly what detaching means.
            auto value = [&]() {
              double total = 0.0;
              for (std::int64_t row = 0; row < n; ++row) {
                log_softmax_row(z.row2(row), c, cfg.tau_q, logq.data());
                if (!detach) softmax_row(z.row2(row), c, cfg.tau_p, prow.data());
                double cross = 0.0;
                for (std::int64_t k = 0; k < c; ++k) {
                  const double pk = detach ? p_frozen.at2(row, k) : prow[static_cast<std::size_t>(k)];
                  cross += pk * logq[static_cast<std::size_t>(k)];
                }
                total += -cfg.tau_q * cfg.tau_q * cross;
              }
              return total / static_cast<double>(n);
            };

            const double floor = detail::fd_floor(std::fabs(res.value));
            for (std::size_t i = 0; i < z.data.size(); ++i) {
              const double orig = z.data[i];
              const double h = 1e-5;
              z.data[i] = orig + h;
              const double fp = value();
              z.data[i] = orig - h;
              const double fm = value();
              z.data[i] = orig;
              const double gap = detail::rel_gap(res.grad.data[i], (fp - fm) / (2.0 * h), floor);
              if (gap > worst_logit) worst_logit = gap;
              ++logit_checked;
            }
          }
        }
      }
    }
  }

  double worst_net = 0.0;
  long net_params = 0;
  {
    Model<double> model = make_model<double>(small_convnet(3, 5), 21);
    detail::verify_warmup(model, 3, derive_seed(0, "verify-gem-warmup"));
    Rng rng(derive_seed(0, "verify-gem-input"));
    Tensor<double> x({2, 3, 8, 8});
    for (double& v : x.data) v = rng.uniform(-1.0, 1.0);

    BnPassConfig pass;
    pass.mode = BnMode::kMixFixed;
    pass.fixed_alpha = 0.6;
    GemConfig loss_cfg;
    loss_cfg.variant = GemVariant::kGemT;
    loss_cfg.tau_p = 3.0;
    loss_cfg.tau_q = 3.0;

    auto objective = [&]() {
      const Tensor<double> z = forward(model, x, pass);
      return gem_loss(z, loss_cfg).value;
    };
    ForwardCache<double> cache;
    const Tensor<double> z = forward(model, x, pass, &cache);
    const LossResult<double> loss = gem_loss(z, loss_cfg);
    const GradMap<double> grads = backward(model, cache, loss.grad, model.all_param_names());
    const double floor = detail::fd_floor(std::fabs(loss.value));
    for (const auto& [name, g] : grads) {
      Tensor<double>& p = model.params.at(name);
      for (std::size_t i = 0; i < p.data.size(); ++i) {
        const double orig = p.data[i];
        const double h = 1e-5;
        p.data[i] = orig + h;
        const double fp = objective();
        p.data[i] = orig - h;
        const double fm = objective();
        p.data[i] = orig;
        const double gap = detail::rel_gap(g[i], (fp - fm) / (2.0 * h), floor);
        if (gap > worst_net) worst_net = gap;
      }
      net_params += static_cast<long>(p.data.size());
    }
  }

  r.pass = worst_logit <= tol && worst_net <= tol;
  char buf[320];
  std::snprintf(buf, sizeof(buf),
                "%ld logit entries over %d tau/detach/class combos, worst rel err %s; "
                "network oracle over %ld parameters, worst rel err %s (tol 1e-04)",
                logit_checked, combos, detail::format_sci(worst_logit).c_str(), net_params,
                detail::format_sci(worst_net).c_str());
  r.detail = buf;
  r.seconds = clock.seconds();
  return r;
}

// Range and endpoint guarantees of the blend weight: alpha stays in [0, 1]
// on random tuples (half synthetic statistics including degenerate and badly
// scaled entries, half statistics of actual batches), hits exactly 1 when the
// source and batch statistics agree, and exactly 0 for a single-image batch
// whose own statistics coincide with the batch statistics.
inline VerifyResult verify_alpha_properties(int tuples = 10000) {
  detail::Stopwatch clock;
  VerifyResult r;
  r.suite = "alpha-properties";
  Rng rng(derive_seed(0, "verify-alpha"));
  const double eps = 1e-5;
  std::string fail;

  int range_checked = 0;
  for (int t = 0; t < tuples && fail.empty(); ++t) {
    const std::int64_t c = 1 + static_cast<std::int64_t>(rng.uniform_index(32));
    double alpha;
    if (t % 2 == 0) {
      auto draw = [&](ChannelStats<double>& s) {
        s = ChannelStats<double>(c);
        const double scale = (t % 37 == 0) ? 1e6 : 1.0;
        for (std::int64_t ch = 0; ch < c; ++ch) {
          s.mean[ch] = rng.normal(0.0, 2.0) * scale;
          const double sd = rng.normal(0.0, 1.5);
          s.var[ch] = (t % 13 == 0 && ch == 0) ? 0.0 : sd * sd * scale;
        }
      };
      ChannelStats<double> source, test;
      draw(source);
      draw(test);
      std::vector<ChannelStats<double>> imgs(1 + rng.uniform_index(12));
      for (ChannelStats<double>& img : imgs) draw(img);
      alpha = compute_alpha(source, test, imgs, eps).alpha;
    } else {
      const std::int64_t n = 1 + static_cast<std::int64_t>(rng.uniform_index(8));
      const std::int64_t h = 1 + static_cast<std::int64_t>(rng.uniform_index(5));
      const std::int64_t w = 1 + static_cast<std::int64_t>(rng.uniform_index(5));
      Tensor<double> x({n, c, h, w});
      for (double& v : x.data) v = rng.normal(0.0, 1.0 + 2.0 * rng.uniform());
      ChannelStats<double> source(c);
      for (std::int64_t ch = 0; ch < c; ++ch) {
        source.mean[ch] = rng.normal(0.0, 1.0);
        source.var[ch] = rng.uniform(0.0, 3.0);
      }
      alpha = compute_alpha(source, batch_stats(x), per_image_stats(x), eps).alpha;
    }
    if (!(alpha >= 0.0 && alpha <= 1.0)) {
      fail = "alpha " + std::to_string(alpha) + " outside [0, 1] at tuple " + std::to_string(t);
    }
    ++range_checked;
  }

  int agree_checked = 0;
  for (int t = 0; t < tuples / 10 && fail.empty(); ++t) {
    const std::int64_t c = 1 + static_cast<std::int64_t>(rng.uniform_index(16));
    ChannelStats<double> source(c);
    for (std::int64_t ch = 0; ch < c; ++ch) {
      source.mean[ch] = rng.normal(0.0, 2.0);
      source.var[ch] = rng.uniform(0.0, 4.0);
    }
    std::vector<ChannelStats<double>> imgs(1 + rng.uniform_index(8));
    for (ChannelStats<double>& img : imgs) {
      img = ChannelStats<double>(c);
      for (std::int64_t ch = 0; ch < c; ++ch) {
        img.mean[ch] = rng.normal(0.0, 2.0);
        img.var[ch] = rng.uniform(0.0, 4.0);
      }
    }
    const double alpha = compute_alpha(source, source, imgs, eps).alpha;
    if (alpha != 1.0) {
      fail = "matching source/test statistics gave alpha " + std::to_string(alpha);
    }
    ++agree_checked;
  }

  int single_checked = 0;
  for (int t = 0; t < tuples / 10 && fail.empty(); ++t) {
    const std::int64_t c = 1 + static_cast<std::int64_t>(rng.uniform_index(16));
    const std::int64_t h = 1 + static_cast<std::int64_t>(rng.uniform_index(5));
    const std::int64_t w = 1 + static_cast<std::int64_t>(rng.uniform_index(5));
    Tensor<double> x({1, c, h, w});
    for (double& v : x.data) v = rng.normal(0.0, 1.5);
    const ChannelStats<double> test = batch_stats(x);
    ChannelStats<double> source = test;
    for (std::int64_t ch = 0; ch < c; ++ch) source.mean[ch] += rng.uniform(0.5, 1.5);
    const double alpha = compute_alpha(source, test, per_image_stats(x), eps).alpha;
    if (alpha != 0.0) fail = "single-image batch gave alpha " + std::to_string(alpha);
    ++single_checked;
  }

  r.pass = fail.empty();
  r.detail = fail.empty() ? std::to_string(range_checked) + " tuples in range; " +
                                std::to_string(agree_checked) +
                                " matched-statistics tuples at alpha = 1 exactly; " +
                                std::to_string(single_checked) +
                                " single-image tuples at alpha = 0 exactly"
                          : fail;
  r.seconds = clock.seconds();
  return r;
}

// The reductions that make the method family coherent: the generalized loss
// at unit temperatures is entropy minimization bit for bit, the detached
// gradient collapses to its closed form, the blend endpoints reproduce the
// pure normalization modes through the full adaptation path, and a zero
// learning rate (or zero steps) reproduces the no-finetune method bitwise.
inline VerifyResult verify_reductions() {
  detail::Stopwatch clock;
  VerifyResult r;
  r.suite = "reductions";
  std::vector<std::string> parts;
  bool ok = true;
  auto record = [&](const std::string& name, bool good) {
    ok = ok && good;
    parts.push_back(name + (good ? ": ok" : ": FAILED"));
  };

  {
    Rng rng(derive_seed(0, "verify-reduce-gem"));
    bool good = true;
    for (std::int64_t c : {2, 5, 65}) {
      for (int d = 0; d < 20; ++d) {
        Tensor<double> z({4, c});
        for (double& v : z.data) v = rng.uniform(-5.0, 5.0);
        GemConfig unit;
        unit.variant = GemVariant::kGemT;  // tau_p = tau_q = 1 member of the family
        const LossResult<double> a = gem_loss(z, unit);
        const LossResult<double> b = em_loss(z);
        good = good && std::memcmp(&a.value, &b.value, sizeof(double)) == 0 &&
               a.grad.data.size() == b.grad.data.size() &&
               std::memcmp(a.grad.data.data(), b.grad.data.data(),
                           a.grad.data.size() * sizeof(double)) == 0;
      }
    }
    record("gem at unit temperatures = em bitwise", good);
  }

  {
    Rng rng(derive_seed(0, "verify-reduce-detach"));
    double worst = 0.0;
    for (double tau : {1.0, 1.5, 3.0}) {
      for (int d = 0; d < 20; ++d) {
        const std::int64_t n = 4, c = 7;
        Tensor<double> z({n, c});
        for (double& v : z.data) v = rng.uniform(-5.0, 5.0);
        GemConfig cfg;
        cfg.variant = GemVariant::kGemSkd;
        cfg.tau_p = 1.0;
        cfg.tau_q = tau;
        cfg.detach_p = true;
        const LossResult<double> res = gem_loss(z, cfg);
        const Tensor<double> p = softmax(z, 1.0);
        const Tensor<double> q = softmax(z, tau);
        for (std::size_t i = 0; i < res.grad.data.size(); ++i) {
          const double closed = -tau * (p.data[i] - q.data[i]) / static_cast<double>(n);
          worst = std::max(worst, std::fabs(res.grad.data[i] - closed));
        }
      }
    }
    record("detached gradient = -tau_q (p - q), max |diff| " + detail::format_sci(worst),
           worst <= 1e-12);
  }

  {
    const auto agree64 = detail::endpoint_forwards_agree<double>(derive_seed(0, "verify-end64"));
    const auto agree32 = detail::endpoint_forwards_agree<float>(derive_seed(0, "verify-end32"));
    record("alpha = 0 forward = test-statistics forward bitwise, both precisions",
           agree64.first && agree32.first);
    record("alpha = 1 forward = source forward bitwise, both precisions",
           agree64.second && agree32.second);
  }

  {
    Model<double> model = make_model<double>(small_convnet(3, 5), 33);
    detail::verify_warmup(model, 3, derive_seed(0, "verify-reduce-adapt"));
    Rng rng(derive_seed(0, "verify-reduce-batch"));
    Tensor<double> x({8, 3, 16, 16});
    for (double& v : x.data) v = rng.normal(0.0, 1.0);

    auto logits_of = [&](const AdaptConfig& cfg) {
      return adapt_batch(model, x, nullptr, cfg).logits;
    };
    auto same_bits = [](const Tensor<double>& a, const Tensor<double>& b) {
      return a.data.size() == b.data.size() &&
             std::memcmp(a.data.data(), b.data.data(), a.data.size() * sizeof(double)) == 0;
    };

    AdaptConfig fixed0;
    fixed0.method = AdaptMethod::kMixFixed;
    fixed0.fixed_alpha = 0.0;
    AdaptConfig adabn;
    adabn.method = AdaptMethod::kAdaBn;
    record("alpha = 0 adaptation = adabn bitwise", same_bits(logits_of(fixed0), logits_of(adabn)));

    AdaptConfig fixed1;
    fixed1.method = AdaptMethod::kMixFixed;
    fixed1.fixed_alpha = 1.0;
    AdaptConfig source_only;
    source_only.method = AdaptMethod::kSourceOnly;
    record("alpha = 1 adaptation = source inference bitwise",
           same_bits(logits_of(fixed1), logits_of(source_only)));

    AdaptConfig no_finetune;
    no_finetune.method = AdaptMethod::kAdaMixNoFinetune;
    const Tensor<double> base = logits_of(no_finetune);
    AdaptConfig zero_lr;
    zero_lr.method = AdaptMethod::kDomainAdaptorT;
    zero_lr.lr = 0.0;
    zero_lr.steps = 3;
    record("lr = 0 = no-finetune bitwise", same_bits(logits_of(zero_lr), base));
    AdaptConfig zero_steps;
    zero_steps.method = AdaptMethod::kDomainAdaptorT;
    zero_steps.lr = 0.05;
    zero_steps.steps = 0;
    record("steps = 0 = no-finetune bitwise", same_bits(logits_of(zero_steps), base));
  }

  r.pass = ok;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    if (i) r.detail += "; ";
    r.detail += parts[i];
  }
  r.seconds = clock.seconds();
  return r;
}

// Runs every suite at its full scale, streaming one line per suite to
// 'progress' when given. The caller owns the pass/fail policy (the CLI maps
// any failure to its verification exit code).
inline std::vector<VerifyResult> run_verification(std::ostream* progress = nullptr) {
  std::vector<VerifyResult> results;
  const auto emit = [&](VerifyResult res) {
    if (progress) {
      char line[640];
      std::snprintf(line, sizeof(line), "%-20s %s  %6.2f s  %s\n", res.suite.c_str(),
                    res.pass ? "pass" : "FAIL", res.seconds, res.detail.c_str());
      (*progress) << line << std::flush;
    }
    results.push_back(std::move(res));
  };
  emit(verify_transform_exactness());
  emit(verify_gem_gradient_oracle());
  emit(verify_alpha_properties());
  emit(verify_reductions());
  return results;
}

}  // namespace tta
