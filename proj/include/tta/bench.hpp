#pragma once

// Experiment harness over the adaptation engine: deterministic batch streams
// carved from a dataset split, whole-split evaluation, the subset protocol
// that resets the model between chunks of the stream, and the named sweeps
// the CLI exposes. For a fixed (split, seed) the stream is byte-identical no
// matter which method consumes it, so methods compare on equal footing.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <ostream>
#include <string>
#include <thread>
#include <vector>

#include "tta/adapt.hpp"
#include "tta/dataset.hpp"
#include "tta/errors.hpp"
#include "tta/layers.hpp"
#include "tta/rng.hpp"
#include "tta/tensor.hpp"

namespace tta {

namespace detail {

template <typename Real>
void slice_stream(const DatasetSplit<Real>& split, std::uint64_t seed, int batch_size,
                  std::vector<Tensor<Real>>& batches, std::vector<std::vector<int>>& labels) {
  if (batch_size < 1) throw ConfigError("evaluate: batch_size must be >= 1");
  if (split.size() == 0) throw ConfigError("evaluate: split '" + split.domain + "' is empty");
  std::vector<std::int64_t> order(static_cast<std::size_t>(split.size()));
  std::iota(order.begin(), order.end(), 0);
  Rng rng(derive_seed(seed, "stream"));
  shuffle(order, rng);

  const std::int64_t stride =
      static_cast<std::int64_t>(kImageChannels) * kImageSide * kImageSide;
  batches.clear();
  labels.clear();
  for (std::size_t lo = 0; lo < order.size(); lo += static_cast<std::size_t>(batch_size)) {
    const std::size_t hi = std::min(order.size(), lo + static_cast<std::size_t>(batch_size));
    Tensor<Real> batch({static_cast<std::int64_t>(hi - lo), kImageChannels, kImageSide,
                        kImageSide});
    std::vector<int> lab(hi - lo);
    for (std::size_t i = lo; i < hi; ++i) {
      const std::int64_t src = order[i];
      std::copy_n(split.images.data.data() + src * stride, stride,
                  batch.data.data() + static_cast<std::int64_t>(i - lo) * stride);
      lab[i - lo] = split.labels[static_cast<std::size_t>(src)];
    }
    batches.push_back(std::move(batch));
    labels.push_back(std::move(lab));
  }
}

}  // namespace detail

// Adapts a copy of the model over the whole split, one seeded shuffle, fixed
// batch order. The caller's model is never touched.
template <typename Real>
AdaptReport evaluate(const Model<Real>& model, const DatasetSplit<Real>& split,
                     const AdaptConfig& cfg, int batch_size,
                     const std::string& run_id = std::string()) {
  std::vector<Tensor<Real>> batches;
  std::vector<std::vector<int>> labels;
  detail::slice_stream(split, cfg.seed, batch_size, batches, labels);
  Model<Real> clone = model;
  AdaptReport report = run_stream(clone, batches, &labels, cfg, split.domain);
  report.run_id = run_id;
  return report;
}

// Few-data protocol: the stream is partitioned into consecutive chunks of
// subset_size samples and the model is reset to the checkpoint before each
// chunk, so no information crosses chunk borders. Chunk borders land on batch
// borders: a new chunk starts once at least subset_size samples went through,
// which is exact whenever subset_size is a multiple of the batch size. Batch
// indices keep counting across chunks to keep one flat report.
template <typename Real>
AdaptReport evaluate_subsets(const Model<Real>& model, const DatasetSplit<Real>& split,
                             const AdaptConfig& cfg, int batch_size,
                             std::int64_t subset_size,
                             const std::string& run_id = std::string()) {
  if (subset_size < 1) throw ConfigError("evaluate_subsets: subset_size must be >= 1");
  std::vector<Tensor<Real>> batches;
  std::vector<std::vector<int>> labels;
  detail::slice_stream(split, cfg.seed, batch_size, batches, labels);

  AdaptReport report;
  report.run_id = run_id;
  std::int64_t consumed_in_subset = 0;
  Model<Real> clone = model;
  int batch_index = 0;
  for (std::size_t b = 0; b < batches.size(); ++b) {
    if (consumed_in_subset >= subset_size) {
      clone = model;  // fresh parameters and buffers for the next chunk
      consumed_in_subset = 0;
    }
    AdaptOutcome<Real> o = adapt_batch(clone, batches[b], &labels[b], cfg, batch_index++);
    o.entry.domain = split.domain;
    consumed_in_subset += o.entry.batch_size;
    report.entries.push_back(std::move(o.entry));
    report.predictions.push_back(std::move(o.predictions));
  }
  return report;
}

// ---- sweeps -------------------------------------------------------------

enum class SweepKind { kAlpha, kBatchSize, kConfidence, kSubset, kDegradation };

inline const char* sweep_kind_name(SweepKind k) {
  switch (k) {
    case SweepKind::kAlpha: return "alpha";
    case SweepKind::kBatchSize: return "batch_size";
    case SweepKind::kConfidence: return "confidence";
    case SweepKind::kSubset: return "subset";
    case SweepKind::kDegradation: return "degradation";
  }
  return "unknown";
}

inline SweepKind sweep_kind_from_name(const std::string& name) {
  for (SweepKind k : {SweepKind::kAlpha, SweepKind::kBatchSize, SweepKind::kConfidence,
                      SweepKind::kSubset, SweepKind::kDegradation}) {
    if (name == sweep_kind_name(k)) return k;
  }
  throw ConfigError("unknown sweep '" + name + "'");
}

struct SweepSpec {
  SweepKind kind = SweepKind::kAlpha;
  std::vector<double> grid;  // meaning depends on the kind; empty = default grid
  std::vector<std::uint64_t> seeds = {0, 1, 2, 3, 4};
  AdaptConfig base;          // seed and method fields are overridden per cell
  int batch_size = 64;
  int degradation_steps = 4;
  double degradation_lr = 0.01;

  std::vector<double> effective_grid() const {
    if (!grid.empty()) return grid;
    switch (kind) {
      case SweepKind::kAlpha: return {0.0, 0.2, 0.4, 0.6, 0.8, 1.0};
      case SweepKind::kBatchSize: return {4, 8, 16, 32, 64};
      case SweepKind::kConfidence: return {0.0, 0.25, 0.5, 0.75, 0.9};
      case SweepKind::kSubset: return {64, 256, 1024};
      case SweepKind::kDegradation: return {0.5, 0.7, 0.9};
    }
    return {};
  }

  void validate() const {
    if (seeds.empty()) throw ConfigError("sweep: needs at least one seed");
    if (batch_size < 1) throw ConfigError("sweep: batch_size must be >= 1");
    if (degradation_steps < 1) throw ConfigError("sweep: degradation_steps must be >= 1");
    if (!(degradation_lr > 0.0)) throw ConfigError("sweep: degradation_lr must be > 0");
    for (double g : effective_grid()) {
      switch (kind) {
        case SweepKind::kAlpha:
        case SweepKind::kDegradation:
          if (g < 0.0 || g > 1.0) throw ConfigError("sweep: alpha grid values must be in [0, 1]");
          break;
        case SweepKind::kConfidence:
          if (g < 0.0 || g > 1.0) throw ConfigError("sweep: thresholds must be in [0, 1]");
          break;
        case SweepKind::kBatchSize:
        case SweepKind::kSubset:
          if (g < 1.0 || g != std::floor(g)) {
            throw ConfigError("sweep: sizes must be positive integers");
          }
          break;
      }
    }
  }
};

// One evaluate run inside a sweep: a grid point evaluated for one method,
// domain, and seed.
struct SweepCell {
  std::string domain;
  std::string point;   // grid coordinate, e.g. "0.4", "16", "0.9/raw"
  std::string method;
  std::uint64_t seed = 0;
  double accuracy = 0.0;
  AdaptReport report;
};

struct SweepResult {
  std::string sweep;
  std::vector<SweepCell> cells;
};

struct SweepSummaryRow {
  std::string sweep;
  std::string domain;
  std::string point;
  std::string method;
  int seeds = 0;
  double mean_acc = 0.0;
  double std_acc = 0.0;
};

namespace detail {

inline std::string grid_label(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%g", v);
  return buf;
}

// The work list of one sweep: every cell knows how to run itself.
struct SweepJob {
  std::string domain_name;
  int split_index = 0;
  std::string point;
  AdaptConfig cfg;
  int batch_size = 64;
  std::int64_t subset_size = 0;  // > 0 switches to the subset protocol
};

template <typename Real>
std::vector<SweepJob> sweep_jobs(const SweepSpec& spec,
                                 const std::vector<DatasetSplit<Real>>& splits) {
  std::vector<SweepJob> jobs;
  auto add = [&](int split_index, const std::string& point, AdaptConfig cfg,
                 int batch_size, std::int64_t subset = 0) {
    cfg.validate();
    SweepJob j;
    j.domain_name = splits[static_cast<std::size_t>(split_index)].domain;
    j.split_index = split_index;
    j.point = point;
    j.cfg = cfg;
    j.batch_size = batch_size;
    j.subset_size = subset;
    for (std::uint64_t seed : spec.seeds) {
      j.cfg.seed = seed;
      jobs.push_back(j);
    }
  };

  const std::vector<double> grid = spec.effective_grid();
  for (int s = 0; s < static_cast<int>(splits.size()); ++s) {
    switch (spec.kind) {
      case SweepKind::kAlpha: {
        // normalization-only comparison: a fixed-alpha grid bracketing the
        // dynamic coefficient, plus the dynamic run itself
        for (double a : grid) {
          AdaptConfig cfg = spec.base;
          cfg.method = AdaptMethod::kMixFixed;
          cfg.fixed_alpha = a;
          add(s, grid_label(a), cfg, spec.batch_size);
        }
        AdaptConfig dyn = spec.base;
        dyn.method = AdaptMethod::kAdaMixNoFinetune;
        dyn.fixed_alpha.reset();
        add(s, "dynamic", dyn, spec.batch_size);
        break;
      }
      case SweepKind::kBatchSize: {
        for (double b : grid) {
          for (AdaptMethod m : {AdaptMethod::kAdaBn, AdaptMethod::kAdaMixNoFinetune}) {
            AdaptConfig cfg = spec.base;
            cfg.method = m;
            cfg.fixed_alpha.reset();
            add(s, grid_label(b), cfg, static_cast<int>(b));
          }
        }
        break;
      }
      case SweepKind::kConfidence: {
        for (double t : grid) {
          AdaptConfig cfg = spec.base;
          cfg.method = AdaptMethod::kDomainAdaptorT;
          cfg.confidence_threshold = t;
          add(s, grid_label(t), cfg, spec.batch_size);
        }
        break;
      }
      case SweepKind::kSubset: {
        for (double sz : grid) {
          for (AdaptMethod m : {AdaptMethod::kDomainAdaptorT, AdaptMethod::kTent}) {
            AdaptConfig cfg = spec.base;
            cfg.method = m;
            cfg.mode = m == AdaptMethod::kTent ? AdaptMode::kOnline : AdaptMode::kEpisodic;
            add(s, grid_label(sz), cfg, spec.batch_size,
                static_cast<std::int64_t>(sz));
          }
        }
        break;
      }
      case SweepKind::kDegradation: {
        // multi-step finetuning with frozen mixing coefficient: the raw arm
        // skips the statistics transformation, the anchor arm skips the
        // finetuning entirely
        for (double a : grid) {
          AdaptConfig ft = spec.base;
          ft.method = AdaptMethod::kDomainAdaptorAug;
          ft.fixed_alpha = a;
          ft.steps = spec.degradation_steps;
          ft.lr = spec.degradation_lr;
          AdaptConfig raw = ft;
          raw.transform = false;
          AdaptConfig anchor = spec.base;
          anchor.method = AdaptMethod::kAdaMixNoFinetune;
          anchor.fixed_alpha = a;
          add(s, grid_label(a) + "/transform", ft, spec.batch_size);
          add(s, grid_label(a) + "/raw", raw, spec.batch_size);
          add(s, grid_label(a) + "/anchor", anchor, spec.batch_size);
        }
        break;
      }
    }
  }
  return jobs;
}

}  // namespace detail

// Runs every (domain, point, method, seed) cell of the sweep, optionally on a
// worker pool. Results come back in a deterministic order regardless of the
// number of workers; each worker adapts its own model clone.
template <typename Real>
SweepResult run_sweep(const Model<Real>& model, const std::vector<DatasetSplit<Real>>& splits,
                      const SweepSpec& spec, int jobs = 1,
                      std::ostream* progress = nullptr) {
  spec.validate();
  if (splits.empty()) throw ConfigError("sweep: no test splits given");
  if (jobs < 1) throw ConfigError("sweep: jobs must be >= 1");

  const std::vector<detail::SweepJob> work = detail::sweep_jobs(spec, splits);
  SweepResult result;
  result.sweep = sweep_kind_name(spec.kind);
  result.cells.resize(work.size());

  std::atomic<std::size_t> next{0};
  std::atomic<std::size_t> done{0};
  auto worker = [&]() {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= work.size()) return;
      const detail::SweepJob& job = work[i];
      const std::string run_id = result.sweep + ":" + job.point;
      const DatasetSplit<Real>& split = splits[static_cast<std::size_t>(job.split_index)];
      AdaptReport report =
          job.subset_size > 0
              ? evaluate_subsets(model, split, job.cfg, job.batch_size, job.subset_size, run_id)
              : evaluate(model, split, job.cfg, job.batch_size, run_id);
      SweepCell& cell = result.cells[i];
      cell.domain = job.domain_name;
      cell.point = job.point;
      cell.method = adapt_method_name(job.cfg.method);
      cell.seed = job.cfg.seed;
      cell.accuracy = report.mean_accuracy(true);
      cell.report = std::move(report);
      done.fetch_add(1);
    }
  };

  if (jobs == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < jobs; ++t) pool.emplace_back(worker);
    for (std::thread& t : pool) t.join();
  }
  if (progress) {
    *progress << result.sweep << " sweep: " << done.load() << " cells over "
              << splits.size() << " domain(s)\n";
  }
  return result;
}

inline std::vector<SweepSummaryRow> summarize_sweep(const SweepResult& result) {
  // cells arrive grouped by (domain, point, method) with seeds adjacent, but
  // group defensively anyway
  std::vector<SweepSummaryRow> rows;
  for (const SweepCell& c : result.cells) {
    SweepSummaryRow* row = nullptr;
    for (SweepSummaryRow& r : rows) {
      if (r.domain == c.domain && r.point == c.point && r.method == c.method) {
        row = &r;
        break;
      }
    }
    if (!row) {
      rows.push_back({result.sweep, c.domain, c.point, c.method, 0, 0.0, 0.0});
      row = &rows.back();
    }
    // first pass accumulates sums; finalized below
    row->mean_acc += c.accuracy;
    row->std_acc += c.accuracy * c.accuracy;
    row->seeds += 1;
  }
  for (SweepSummaryRow& r : rows) {
    const double n = static_cast<double>(r.seeds);
    r.mean_acc /= n;
    r.std_acc = std::sqrt(std::max(0.0, r.std_acc / n - r.mean_acc * r.mean_acc));
  }
  return rows;
}

inline void write_sweep_summary_csv(std::ostream& os,
                                    const std::vector<SweepSummaryRow>& rows) {
  os << "sweep,domain,point,method,seeds,mean_acc,std_acc\n";
  for (const SweepSummaryRow& r : rows) {
    char buf[64];
    os << r.sweep << ',' << r.domain << ',' << r.point << ',' << r.method << ','
       << r.seeds << ',';
    std::snprintf(buf, sizeof(buf), "%.6f,%.6f", r.mean_acc, r.std_acc);
    os << buf << '\n';
  }
}

// One CSV per (domain, seed): the per-batch rows of every cell that belongs
// to this pair, in cell order, sharing a single header.
inline void write_sweep_seed_csv(std::ostream& os, const SweepResult& result,
                                 const std::string& domain, std::uint64_t seed,
                                 const std::vector<std::string>& bn_layer_names) {
  bool first = true;
  for (const SweepCell& c : result.cells) {
    if (c.domain != domain || c.seed != seed) continue;
    write_report_csv(os, c.report, bn_layer_names, first);
    first = false;
  }
}

}  // namespace tta
