#pragma once

// Test-time adaptation engine. A trained model meets an unlabeled batch from
// a shifted domain; depending on the method the batch is normalized with
// source stats, test stats, or an adaptive mixture, the mixture is folded
// into the affine pair, and the affine parameters take a few SGD steps on an
// entropy-family loss before the batch is re-predicted. Episodic mode
// restores the parameter snapshot after every batch so episodes never leak
// into each other; online mode lets state accumulate across the stream.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <limits>
#include <map>
#include <optional>
#include <ostream>
#include <set>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "tta/batchnorm.hpp"
#include "tta/errors.hpp"
#include "tta/gem.hpp"
#include "tta/layers.hpp"
#include "tta/rng.hpp"
#include "tta/tensor.hpp"

namespace tta {

// ---- method and mode vocabulary ---------------------------------------------

enum class AdaptMethod {
  kSourceOnly,        // plain inference with source running stats
  kAdaBn,             // normalize every batch by its own statistics
  kMixFixed,          // fixed source/test mixture, no finetuning
  kAdaMixNoFinetune,  // dynamic mixture + affine transformation, no finetuning
  kTent,              // test-batch stats + entropy minimization on (gamma, beta)
  kDomainAdaptorT,    // dynamic mixture + transformation + GEM-T finetuning
  kDomainAdaptorSkd,  // as above with the GEM-SKD loss
  kDomainAdaptorAug,  // as above with the GEM-AUG loss (augmented-view teacher)
};

inline const char* adapt_method_name(AdaptMethod m) {
  switch (m) {
    case AdaptMethod::kSourceOnly: return "source-only";
    case AdaptMethod::kAdaBn: return "adabn";
    case AdaptMethod::kMixFixed: return "mixbn-fixed";
    case AdaptMethod::kAdaMixNoFinetune: return "adamixbn-no-finetune";
    case AdaptMethod::kTent: return "tent";
    case AdaptMethod::kDomainAdaptorT: return "domainadaptor-T";
    case AdaptMethod::kDomainAdaptorSkd: return "domainadaptor-SKD";
    case AdaptMethod::kDomainAdaptorAug: return "domainadaptor-AUG";
  }
  return "unknown";
}

inline AdaptMethod adapt_method_from_name(std::string_view name) {
  for (AdaptMethod m :
       {AdaptMethod::kSourceOnly, AdaptMethod::kAdaBn, AdaptMethod::kMixFixed,
        AdaptMethod::kAdaMixNoFinetune, AdaptMethod::kTent, AdaptMethod::kDomainAdaptorT,
        AdaptMethod::kDomainAdaptorSkd, AdaptMethod::kDomainAdaptorAug}) {
    if (name == adapt_method_name(m)) return m;
  }
  throw ConfigError("unknown adaptation method '" + std::string(name) + "'");
}

inline std::vector<AdaptMethod> all_adapt_methods() {
  return {AdaptMethod::kSourceOnly,        AdaptMethod::kAdaBn,
          AdaptMethod::kMixFixed,          AdaptMethod::kAdaMixNoFinetune,
          AdaptMethod::kTent,              AdaptMethod::kDomainAdaptorT,
          AdaptMethod::kDomainAdaptorSkd,  AdaptMethod::kDomainAdaptorAug};
}

enum class AdaptMode { kEpisodic, kOnline };

inline const char* adapt_mode_name(AdaptMode m) {
  return m == AdaptMode::kEpisodic ? "episodic" : "online";
}

inline AdaptMode adapt_mode_from_name(std::string_view name) {
  if (name == "episodic") return AdaptMode::kEpisodic;
  if (name == "online") return AdaptMode::kOnline;
  throw ConfigError("unknown adaptation mode '" + std::string(name) + "'");
}

// ---- configuration -----------------------------------------------------------

// Random-crop-and-flip policy for the augmented-view teacher. The scale is an
// area fraction; the crop keeps the input aspect ratio and is resized back to
// the input resolution bilinearly.
struct AugSpec {
  double scale_min = 0.8;
  double scale_max = 1.0;
  double flip_prob = 0.5;

  void validate() const {
    if (!(scale_min > 0.0) || !(scale_max <= 1.0) || !(scale_min <= scale_max)) {
      throw ConfigError("augment: scale range must satisfy 0 < min <= max <= 1");
    }
    if (!(flip_prob >= 0.0) || !(flip_prob <= 1.0)) {
      throw ConfigError("augment: flip probability must be in [0, 1]");
    }
  }
};

struct AdaptConfig {
  AdaptMethod method = AdaptMethod::kDomainAdaptorT;
  AdaptMode mode = AdaptMode::kEpisodic;
  double lr = 1e-3;                   // SGD step size, no momentum
  int steps = 1;                      // finetuning steps per batch; 0 disables
  double confidence_threshold = 0.0;  // samples below this max probability skip the loss
  double gem_s = 1.0;                 // dynamic-temperature strength
  int gem_views = 8;                  // teacher views for the AUG variant
  AugSpec aug;
  // Forces the mixture weight instead of computing it per layer. Required for
  // mixbn-fixed; optional for the adamixbn/domainadaptor family (sweeps).
  std::optional<double> fixed_alpha;
  // When false the mixture weights are frozen and (gamma, beta) are finetuned
  // under mixed normalization directly, skipping the affine transformation.
  // Exists for the degradation study; production paths leave it on.
  bool transform = true;
  std::uint64_t seed = 0;

  bool finetunes() const {
    return method == AdaptMethod::kTent || method == AdaptMethod::kDomainAdaptorT ||
           method == AdaptMethod::kDomainAdaptorSkd || method == AdaptMethod::kDomainAdaptorAug;
  }

  bool mixes_stats() const {
    return method == AdaptMethod::kMixFixed || method == AdaptMethod::kAdaMixNoFinetune ||
           method == AdaptMethod::kDomainAdaptorT || method == AdaptMethod::kDomainAdaptorSkd ||
           method == AdaptMethod::kDomainAdaptorAug;
  }

  GemVariant loss_variant() const {
    switch (method) {
      case AdaptMethod::kTent: return GemVariant::kEm;
      case AdaptMethod::kDomainAdaptorT: return GemVariant::kGemT;
      case AdaptMethod::kDomainAdaptorSkd: return GemVariant::kGemSkd;
      case AdaptMethod::kDomainAdaptorAug: return GemVariant::kGemAug;
      default: throw std::logic_error("loss_variant: method does not finetune");
    }
  }

  void validate() const {
    if (!(lr >= 0.0) || !std::isfinite(lr)) throw ConfigError("adapt: lr must be finite and >= 0");
    if (steps < 0) throw ConfigError("adapt: steps must be >= 0");
    if (!(confidence_threshold >= 0.0) || !(confidence_threshold <= 1.0)) {
      throw ConfigError("adapt: confidence_threshold must be in [0, 1]");
    }
    if (!(gem_s > 0.0)) throw ConfigError("adapt: gem_s must be > 0");
    if (gem_views < 1) throw ConfigError("adapt: gem_views must be >= 1");
    aug.validate();
    if (fixed_alpha && (!(*fixed_alpha >= 0.0) || !(*fixed_alpha <= 1.0))) {
      throw ConfigError("adapt: fixed_alpha must be in [0, 1]");
    }
    if (method == AdaptMethod::kMixFixed && !fixed_alpha) {
      throw ConfigError("adapt: mixbn-fixed requires fixed_alpha");
    }
  }
};

// ---- reports -----------------------------------------------------------------

struct BatchReportEntry {
  std::string method;
  std::string domain;
  std::uint64_t seed = 0;
  int batch_index = 0;
  int batch_size = 0;
  std::vector<AlphaRecord> alphas;  // one per BN layer; empty when no mixing happened
  int loss_samples = 0;             // rows that cleared the confidence threshold
  double loss = 0.0;                // first finetuning step; 0 when none ran
  double grad_norm = 0.0;           // first finetuning step; 0 when none ran
  double acc_pre = std::numeric_limits<double>::quiet_NaN();
  double acc_post = std::numeric_limits<double>::quiet_NaN();
};

struct AdaptReport {
  std::string run_id;
  std::vector<BatchReportEntry> entries;
  std::vector<std::vector<int>> predictions;  // parallel to the batch stream

  // Sample-weighted mean accuracy over batches that carried labels.
  double mean_accuracy(bool post = true) const {
    double hits = 0.0, total = 0.0;
    for (const BatchReportEntry& e : entries) {
      const double a = post ? e.acc_post : e.acc_pre;
      if (std::isnan(a)) continue;
      hits += a * e.batch_size;
      total += e.batch_size;
    }
    return total > 0.0 ? hits / total : std::numeric_limits<double>::quiet_NaN();
  }
};

namespace detail {

inline std::string csv_num(double v) {
  if (std::isnan(v)) return "nan";
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace detail

// CSV schema: run_id, method, domain, seed, batch_index, batch_size, one
// alpha column per BN layer, loss, grad_norm, acc_pre, acc_post. Entries
// without mixture records leave the alpha cells empty.
inline void write_report_csv(std::ostream& os, const AdaptReport& report,
                             const std::vector<std::string>& bn_layer_names,
                             bool with_header = true) {
  if (with_header) {
    os << "run_id,method,domain,seed,batch_index,batch_size";
    for (const std::string& n : bn_layer_names) os << ",alpha_" << n;
    os << ",loss,grad_norm,acc_pre,acc_post\n";
  }
  for (const BatchReportEntry& e : report.entries) {
    os << report.run_id << ',' << e.method << ',' << e.domain << ',' << e.seed << ','
       << e.batch_index << ',' << e.batch_size;
    for (std::size_t i = 0; i < bn_layer_names.size(); ++i) {
      os << ',';
      if (i < e.alphas.size()) os << detail::csv_num(e.alphas[i].alpha);
    }
    os << ',' << detail::csv_num(e.loss) << ',' << detail::csv_num(e.grad_norm) << ','
       << detail::csv_num(e.acc_pre) << ',' << detail::csv_num(e.acc_post) << '\n';
  }
}

// ---- augmentation ------------------------------------------------------------

namespace detail {

// Bilinear sample of one channel of a crop window. Integer source positions
// reproduce the pixel exactly, so a full-window crop is the identity.
template <typename Real>
void resize_window(const Tensor<Real>& src, std::int64_t n, std::int64_t c, std::int64_t top,
                   std::int64_t left, std::int64_t ch, std::int64_t cw, Tensor<Real>& dst) {
  const std::int64_t oh = dst.dim(2), ow = dst.dim(3);
  for (std::int64_t y = 0; y < oh; ++y) {
    double sy = (static_cast<double>(y) + 0.5) * static_cast<double>(ch) / static_cast<double>(oh) - 0.5;
    sy = std::min(std::max(sy, 0.0), static_cast<double>(ch - 1));
    const std::int64_t y0 = static_cast<std::int64_t>(sy);
    const std::int64_t y1 = std::min(y0 + 1, ch - 1);
    const double wy = sy - static_cast<double>(y0);
    for (std::int64_t x = 0; x < ow; ++x) {
      double sx = (static_cast<double>(x) + 0.5) * static_cast<double>(cw) / static_cast<double>(ow) - 0.5;
      sx = std::min(std::max(sx, 0.0), static_cast<double>(cw - 1));
      const std::int64_t x0 = static_cast<std::int64_t>(sx);
      const std::int64_t x1 = std::min(x0 + 1, cw - 1);
      const double wx = sx - static_cast<double>(x0);
      const double v00 = static_cast<double>(src.at4(n, c, top + y0, left + x0));
      const double v01 = static_cast<double>(src.at4(n, c, top + y0, left + x1));
      const double v10 = static_cast<double>(src.at4(n, c, top + y1, left + x0));
      const double v11 = static_cast<double>(src.at4(n, c, top + y1, left + x1));
      const double v = (1.0 - wy) * ((1.0 - wx) * v00 + wx * v01) +
                       wy * ((1.0 - wx) * v10 + wx * v11);
      dst.at4(n, c, y, x) = static_cast<Real>(v);
    }
  }
}

}  // namespace detail

// m independently augmented copies of the batch: per (view, sample) an area
// scale is drawn from [scale_min, scale_max], an aspect-preserving window of
// that area is cropped at a uniform offset, resized back bilinearly, and
// mirrored horizontally with probability flip_prob. Deterministic in
// (seed, view index, sample index); a [1, 1] scale range with flip_prob 0
// reproduces the input bitwise.
template <typename Real>
std::vector<Tensor<Real>> augment_views(const Tensor<Real>& batch, int m, std::uint64_t seed,
                                        const AugSpec& spec = AugSpec{}) {
  require_rank(batch, 4, "augment_views");
  if (m < 1) throw ConfigError("augment_views: m must be >= 1");
  spec.validate();
  const std::int64_t n = batch.dim(0), ch_n = batch.dim(1), h = batch.dim(2), w = batch.dim(3);
  std::vector<Tensor<Real>> views;
  views.reserve(static_cast<std::size_t>(m));
  for (int v = 0; v < m; ++v) {
    Tensor<Real> out(batch.shape);
    const std::uint64_t view_seed = derive_seed(seed, "view", static_cast<std::uint64_t>(v));
    for (std::int64_t i = 0; i < n; ++i) {
      Rng rng(derive_seed(view_seed, "sample", static_cast<std::uint64_t>(i)));
      const double area = rng.uniform(spec.scale_min, spec.scale_max);
      const double side = std::sqrt(area);
      const std::int64_t crop_h =
          std::min<std::int64_t>(h, std::max<std::int64_t>(1, std::llround(side * static_cast<double>(h))));
      const std::int64_t crop_w =
          std::min<std::int64_t>(w, std::max<std::int64_t>(1, std::llround(side * static_cast<double>(w))));
      const std::int64_t top = static_cast<std::int64_t>(rng.uniform_index(static_cast<std::uint64_t>(h - crop_h + 1)));
      const std::int64_t left = static_cast<std::int64_t>(rng.uniform_index(static_cast<std::uint64_t>(w - crop_w + 1)));
      const bool flip = rng.bernoulli(spec.flip_prob);
      for (std::int64_t c = 0; c < ch_n; ++c) {
        detail::resize_window(batch, i, c, top, left, crop_h, crop_w, out);
      }
      if (flip) {
        for (std::int64_t c = 0; c < ch_n; ++c) {
          for (std::int64_t y = 0; y < h; ++y) {
            for (std::int64_t x = 0; x < w / 2; ++x) {
              std::swap(out.at4(i, c, y, x), out.at4(i, c, y, w - 1 - x));
            }
          }
        }
      }
    }
    views.push_back(std::move(out));
  }
  return views;
}

// ---- adaptation --------------------------------------------------------------

template <typename Real>
struct AdaptOutcome {
  Tensor<Real> logits;           // post-adaptation logits for the batch
  std::vector<int> predictions;  // argmax of the logits
  BatchReportEntry entry;
};

namespace detail {

// A model whose BN running variance is all zeros was never trained; mixing
// against those stats would divide meaning out of every feature map.
template <typename Real>
void check_running_stats_ready(const Model<Real>& model) {
  for (const LayerSpec& l : model.layers) {
    if (l.kind != LayerKind::kBatchNorm2d) continue;
    const Tensor<Real>& rv = model.buffers.at(l.name + ".running_var");
    bool all_zero = true;
    for (Real v : rv.data) {
      if (v != Real(0)) {
        all_zero = false;
        break;
      }
    }
    if (all_zero) {
      throw ConfigError("adapt: running variance of '" + l.name +
                        "' is all zeros; the checkpoint looks untrained");
    }
  }
}

template <typename Real>
std::uint64_t tensor_content_hash(const Tensor<Real>& t) {
  const char* bytes = reinterpret_cast<const char*>(t.data.data());
  return fnv1a64(std::string_view(bytes, t.data.size() * sizeof(Real)));
}

// Rows whose max softmax probability clears the threshold; they are the only
// ones allowed to contribute to the finetuning loss.
template <typename Real>
std::vector<int> confident_rows(const Tensor<Real>& logits, double threshold) {
  const std::int64_t n = logits.dim(0), c = logits.dim(1);
  std::vector<int> keep;
  keep.reserve(static_cast<std::size_t>(n));
  std::vector<double> prob(static_cast<std::size_t>(c));
  for (std::int64_t i = 0; i < n; ++i) {
    softmax_row(logits.row2(i), c, 1.0, prob.data());
    const double pmax = *std::max_element(prob.begin(), prob.end());
    if (pmax >= threshold) keep.push_back(static_cast<int>(i));
  }
  return keep;
}

template <typename Real>
Tensor<Real> select_rows(const Tensor<Real>& t, const std::vector<int>& rows) {
  const std::int64_t c = t.dim(1);
  Tensor<Real> out({static_cast<std::int64_t>(rows.size()), c});
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const Real* src = t.row2(rows[r]);
    std::copy(src, src + c, out.row2(static_cast<std::int64_t>(r)));
  }
  return out;
}

template <typename Real>
void scatter_rows(const Tensor<Real>& part, const std::vector<int>& rows, Tensor<Real>& full) {
  const std::int64_t c = full.dim(1);
  std::fill(full.data.begin(), full.data.end(), Real(0));
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const Real* src = part.row2(static_cast<std::int64_t>(r));
    std::copy(src, src + c, full.row2(rows[r]));
  }
}

// Source statistics of every BN layer, in network order.
template <typename Real>
std::vector<ChannelStats<Real>> source_stats(const Model<Real>& model) {
  std::vector<ChannelStats<Real>> out;
  for (const LayerSpec& l : model.layers) {
    if (l.kind != LayerKind::kBatchNorm2d) continue;
    ChannelStats<Real> s;
    s.mean = model.buffers.at(l.name + ".running_mean").data;
    s.var = model.buffers.at(l.name + ".running_var").data;
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace detail

// Adapts the model to one batch and predicts it. Labels, when given, are used
// for the report's accuracy fields only and never touch the loss. For the
// finetuning methods the sequence is: a first pass that fixes the mixture
// weights, the affine transformation (unless disabled), a confidence mask
// taken from the pre-finetune predictions, `steps` SGD steps on the BN affine
// pairs, and a re-prediction with fresh batch statistics. Episodic mode then
// restores the snapshot so the call leaves the model bit-identical.
template <typename Real>
AdaptOutcome<Real> adapt_batch(Model<Real>& model, const Tensor<Real>& batch,
                               const std::vector<int>* labels, const AdaptConfig& cfg,
                               int batch_index = 0) {
  cfg.validate();
  require_rank(batch, 4, "adapt_batch");
  if (batch.dim(0) < 1) throw ConfigError("adapt_batch: empty batch");
  detail::check_running_stats_ready(model);

  AdaptOutcome<Real> out;
  BatchReportEntry& entry = out.entry;
  entry.method = adapt_method_name(cfg.method);
  entry.seed = cfg.seed;
  entry.batch_index = batch_index;
  entry.batch_size = static_cast<int>(batch.dim(0));

  const int bn_count = model.bn_count();

  // Plain inference baselines: one forward, no state change.
  if (cfg.method == AdaptMethod::kSourceOnly || cfg.method == AdaptMethod::kAdaBn) {
    BnPassConfig pass;
    pass.mode = cfg.method == AdaptMethod::kSourceOnly ? BnMode::kSource : BnMode::kTestBatch;
    out.logits = forward(model, batch, pass);
    out.predictions = argmax_rows(out.logits);
    if (labels) {
      entry.acc_pre = accuracy(out.logits, *labels);
      entry.acc_post = entry.acc_pre;
    }
    return out;
  }

  const bool finetune = cfg.finetunes();
  const bool mixes = cfg.mixes_stats();
  const bool transform = mixes && cfg.transform && cfg.method != AdaptMethod::kMixFixed;

  ParamSnapshot<Real> snap;
  if (cfg.mode == AdaptMode::kEpisodic) snap = snapshot(model);

  // First pass: fixes the mixture weights (and their diagnostics) from the
  // untouched model. Tent normalizes by batch stats outright.
  BnPassConfig first_pass;
  if (!mixes) {
    first_pass.mode = BnMode::kTestBatch;
  } else if (cfg.fixed_alpha) {
    first_pass.mode = BnMode::kMixFixed;
    first_pass.fixed_alpha = *cfg.fixed_alpha;
  } else {
    first_pass.mode = BnMode::kAdaptive;
  }
  ForwardCache<Real> first_cache;
  Tensor<Real> logits_pre = forward(model, batch, first_pass, &first_cache);

  if (mixes) entry.alphas = first_cache.alpha_records;

  // The per-pass normalization used from here on. With the transformation the
  // mixture lives inside (gamma', beta') and passes use pure batch stats;
  // without it the mixture weights stay frozen at their first-pass values.
  BnPassConfig run_pass;
  run_pass.mode = BnMode::kTestBatch;
  if (mixes && !transform) {
    run_pass.mode = BnMode::kMixFixed;
    run_pass.per_layer_alpha.resize(static_cast<std::size_t>(bn_count));
    for (int i = 0; i < bn_count; ++i) run_pass.per_layer_alpha[static_cast<std::size_t>(i)] = entry.alphas[static_cast<std::size_t>(i)].alpha;
  }

  if (transform) {
    const std::vector<ChannelStats<Real>> src = detail::source_stats(model);
    int bn_index = 0;
    for (const LayerSpec& l : model.layers) {
      if (l.kind != LayerKind::kBatchNorm2d) continue;
      Tensor<Real>& gamma = model.params.at(l.name + ".gamma");
      Tensor<Real>& beta = model.params.at(l.name + ".beta");
      auto pair = transform_affine(
          src[static_cast<std::size_t>(bn_index)],
          first_cache.bn_batch_stats[static_cast<std::size_t>(bn_index)], gamma.data,
          beta.data,
          static_cast<Real>(entry.alphas[static_cast<std::size_t>(bn_index)].alpha),
          model.bn_eps);
      gamma.data = std::move(pair.first);
      beta.data = std::move(pair.second);
      ++bn_index;
    }
    // Pre-finetune predictions of the transformed model; also the confidence
    // reference. Without the transformation the first pass already is that
    // model, so no extra forward is needed there.
    logits_pre = forward(model, batch, run_pass);
  }

  if (labels) entry.acc_pre = accuracy(logits_pre, *labels);

  bool params_changed = false;
  if (finetune) {
    const std::vector<int> keep = detail::confident_rows(logits_pre, cfg.confidence_threshold);
    entry.loss_samples = static_cast<int>(keep.size());
    if (!keep.empty() && cfg.steps > 0 && cfg.lr > 0.0) {
      const GemVariant variant = cfg.loss_variant();

      // The AUG teacher: every view forwarded once through the pre-finetune
      // model, each normalized by its own batch statistics, then averaged.
      std::vector<Tensor<Real>> teacher_views;
      if (variant == GemVariant::kGemAug) {
        const std::uint64_t aug_seed =
            derive_seed(cfg.seed, "augment", detail::tensor_content_hash(batch));
        std::vector<Tensor<Real>> views = augment_views(batch, cfg.gem_views, aug_seed, cfg.aug);
        Tensor<Real> mean(logits_pre.shape);
        for (const Tensor<Real>& v : views) {
          Tensor<Real> vl = forward(model, v, run_pass);
          for (std::size_t k = 0; k < mean.data.size(); ++k) mean.data[k] += vl.data[k];
        }
        const Real inv = Real(1) / static_cast<Real>(views.size());
        for (Real& x : mean.data) x *= inv;
        teacher_views.push_back(detail::select_rows(mean, keep));
      }

      const std::set<std::string> trainable = model.bn_affine_names();
      Tensor<Real> dlogits;
      for (int step = 0; step < cfg.steps; ++step) {
        ForwardCache<Real> cache;
        Tensor<Real> logits = forward(model, batch, run_pass, &cache);
        Tensor<Real> sub = detail::select_rows(logits, keep);
        auto [gem_cfg, teacher] = make_variant(
            variant, sub, cfg.gem_s,
            variant == GemVariant::kGemAug ? &teacher_views : nullptr);
        LossResult<Real> loss =
            gem_loss(sub, gem_cfg, teacher ? &*teacher : nullptr);
        dlogits = Tensor<Real>(logits.shape);
        detail::scatter_rows(loss.grad, keep, dlogits);
        GradMap<Real> grads = backward(model, cache, dlogits, trainable);
        if (step == 0) {
          entry.loss = loss.value;
          entry.grad_norm = grad_l2_norm(grads);
        }
        sgd_step(model, grads, static_cast<Real>(cfg.lr));
        params_changed = true;
      }
    }
  }

  if (params_changed) {
    out.logits = forward(model, batch, run_pass);
  } else {
    // No parameter moved, so the pre-finetune pass already is the prediction.
    out.logits = std::move(logits_pre);
  }
  out.predictions = argmax_rows(out.logits);
  if (labels) entry.acc_post = accuracy(out.logits, *labels);
  else entry.acc_post = entry.acc_pre;

  if (cfg.mode == AdaptMode::kEpisodic) restore(model, snap);
  return out;
}

// Streams batches through adapt_batch in order. Labels, when given, must be
// parallel to the batches. Episodic mode leaves the model untouched; online
// mode returns it in its accumulated post-stream state.
template <typename Real>
AdaptReport run_stream(Model<Real>& model, const std::vector<Tensor<Real>>& batches,
                       const std::vector<std::vector<int>>* labels, const AdaptConfig& cfg,
                       const std::string& domain = std::string()) {
  if (labels && labels->size() != batches.size()) {
    throw ConfigError("run_stream: label batches do not match input batches");
  }
  AdaptReport report;
  report.entries.reserve(batches.size());
  report.predictions.reserve(batches.size());
  for (std::size_t i = 0; i < batches.size(); ++i) {
    AdaptOutcome<Real> o = adapt_batch(model, batches[i], labels ? &(*labels)[i] : nullptr, cfg,
                                       static_cast<int>(i));
    o.entry.domain = domain;
    report.entries.push_back(std::move(o.entry));
    report.predictions.push_back(std::move(o.predictions));
  }
  return report;
}

}  // namespace tta
