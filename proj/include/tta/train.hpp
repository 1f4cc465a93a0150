#pragma once

// Source-domain baseline training: plain SGD with momentum and weight decay,
// cross-entropy loss, batch statistics in the forward pass, and running
// statistics accumulated for later source-mode inference. Everything is
// seeded through the portable rng, so a fixed config yields byte-identical
// checkpoints run after run.

#include <cmath>
#include <cstdint>
#include <ostream>
#include <set>
#include <string>
#include <vector>

#include "tta/dataset.hpp"
#include "tta/errors.hpp"
#include "tta/gem.hpp"
#include "tta/layers.hpp"
#include "tta/rng.hpp"
#include "tta/tensor.hpp"

namespace tta {

struct TrainConfig {
  int epochs = 12;  // calibrated: crosses 95% held-in validation after the lr decay
  int batch_size = 64;
  double lr = 0.05;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  double bn_momentum = 0.1;   // running <- (1-m)*running + m*batch
  double val_fraction = 0.1;  // tail of the shuffled pool held out per run
  double lr_decay = 0.1;      // factor applied once at lr_decay_epoch
  int lr_decay_epoch = 0;     // 0 picks two thirds of the epoch budget
  std::uint64_t seed = 0;

  void validate() const {
    if (epochs < 1) throw ConfigError("train: epochs must be >= 1");
    if (batch_size < 2) throw ConfigError("train: batch_size must be >= 2");
    if (!(lr > 0.0) || !std::isfinite(lr)) throw ConfigError("train: lr must be positive");
    if (momentum < 0.0 || momentum >= 1.0) throw ConfigError("train: momentum must be in [0, 1)");
    if (weight_decay < 0.0) throw ConfigError("train: weight_decay must be >= 0");
    if (!(bn_momentum > 0.0) || bn_momentum > 1.0) {
      throw ConfigError("train: bn_momentum must be in (0, 1]");
    }
    if (val_fraction < 0.0 || val_fraction >= 0.5) {
      throw ConfigError("train: val_fraction must be in [0, 0.5)");
    }
    if (!(lr_decay > 0.0) || lr_decay > 1.0) throw ConfigError("train: lr_decay must be in (0, 1]");
    if (lr_decay_epoch < 0) throw ConfigError("train: lr_decay_epoch must be >= 0");
  }
};

struct EpochLog {
  int epoch = 0;  // 1-based
  double lr = 0.0;
  double train_loss = 0.0;
  double train_acc = 0.0;
  double val_acc = 0.0;
};

namespace detail {

// Mean cross-entropy over the batch; fills dlogits with (softmax - onehot)/N.
template <typename Real>
double cross_entropy_grad(const Tensor<Real>& logits, const std::vector<int>& labels,
                          Tensor<Real>* dlogits) {
  const std::int64_t n = logits.shape[0];
  const std::int64_t c = logits.shape[1];
  if (dlogits) *dlogits = Tensor<Real>(logits.shape);
  std::vector<double> logq(static_cast<std::size_t>(c));
  double loss = 0.0;
  for (std::int64_t i = 0; i < n; ++i) {
    log_softmax_row(logits.row2(i), c, 1.0, logq.data());
    const int y = labels[static_cast<std::size_t>(i)];
    loss -= logq[static_cast<std::size_t>(y)];
    if (dlogits) {
      Real* drow = dlogits->row2(i);
      for (std::int64_t k = 0; k < c; ++k) {
        const double p = std::exp(logq[static_cast<std::size_t>(k)]);
        const double onehot = k == y ? 1.0 : 0.0;
        drow[k] = static_cast<Real>((p - onehot) / static_cast<double>(n));
      }
    }
  }
  return loss / static_cast<double>(n);
}

struct SampleRef {
  int split = 0;
  std::int64_t index = 0;
};

template <typename Real>
void gather_batch(const std::vector<DatasetSplit<Real>>& splits,
                  const std::vector<SampleRef>& order, std::size_t lo, std::size_t hi,
                  Tensor<Real>& batch, std::vector<int>& labels) {
  const std::int64_t stride =
      static_cast<std::int64_t>(kImageChannels) * kImageSide * kImageSide;
  const std::int64_t n = static_cast<std::int64_t>(hi - lo);
  batch = Tensor<Real>({n, kImageChannels, kImageSide, kImageSide});
  labels.resize(static_cast<std::size_t>(n));
  for (std::size_t i = lo; i < hi; ++i) {
    const SampleRef& ref = order[i];
    const DatasetSplit<Real>& s = splits[static_cast<std::size_t>(ref.split)];
    std::copy_n(s.images.data.data() + ref.index * stride, stride,
                batch.data.data() + static_cast<std::int64_t>(i - lo) * stride);
    labels[i - lo] = s.labels[static_cast<std::size_t>(ref.index)];
  }
}

}  // namespace detail

// Trains the model in place on the pooled source splits and returns one log
// entry per epoch. A NaN or infinite loss aborts immediately: a diverged
// checkpoint must never be written out silently.
template <typename Real>
std::vector<EpochLog> train_baseline(Model<Real>& model,
                                     const std::vector<DatasetSplit<Real>>& sources,
                                     const TrainConfig& cfg,
                                     std::ostream* progress = nullptr) {
  cfg.validate();
  if (sources.empty()) throw ConfigError("train: no source splits given");
  int classes = 0;
  for (const LayerSpec& l : model.layers) {
    if (l.kind == LayerKind::kLinear) classes = l.out_features;
  }
  if (classes <= 0) throw ConfigError("train: model has no classifier head");

  std::vector<detail::SampleRef> pool;
  for (int s = 0; s < static_cast<int>(sources.size()); ++s) {
    const auto& split = sources[static_cast<std::size_t>(s)];
    if (split.size() == 0) throw ConfigError("train: source split '" + split.domain + "' is empty");
    for (std::int64_t i = 0; i < split.size(); ++i) {
      const int y = split.labels[static_cast<std::size_t>(i)];
      if (y < 0 || y >= classes) {
        throw ConfigError("train: label " + std::to_string(y) + " outside the " +
                          std::to_string(classes) + "-way head");
      }
      pool.push_back({s, i});
    }
  }

  // one fixed split of the pooled data into train and validation
  Rng split_rng(derive_seed(cfg.seed, "valsplit"));
  shuffle(pool, split_rng);
  const std::size_t val_n = static_cast<std::size_t>(
      std::llround(cfg.val_fraction * static_cast<double>(pool.size())));
  std::vector<detail::SampleRef> val_pool(pool.end() - static_cast<std::ptrdiff_t>(val_n),
                                          pool.end());
  pool.resize(pool.size() - val_n);
  if (pool.empty()) throw ConfigError("train: no samples left after the validation split");

  const std::set<std::string> trainable = model.all_param_names();
  GradMap<Real> velocity;
  for (const auto& [name, t] : model.params) {
    velocity[name].assign(t.data.size(), Real(0));
  }

  const int decay_epoch = cfg.lr_decay_epoch > 0 ? cfg.lr_decay_epoch
                                                 : std::max(1, 2 * cfg.epochs / 3);
  BnPassConfig train_pass;
  train_pass.mode = BnMode::kTestBatch;
  train_pass.update_running = true;
  train_pass.momentum = cfg.bn_momentum;

  std::vector<EpochLog> log;
  Tensor<Real> batch;
  std::vector<int> labels;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const double lr = cfg.lr * (epoch > decay_epoch ? cfg.lr_decay : 1.0);
    Rng order_rng(derive_seed(cfg.seed, "epoch", static_cast<std::uint64_t>(epoch)));
    shuffle(pool, order_rng);

    double loss_sum = 0.0;
    std::int64_t correct = 0, seen = 0;
    for (std::size_t lo = 0; lo < pool.size(); lo += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t hi = std::min(pool.size(), lo + static_cast<std::size_t>(cfg.batch_size));
      detail::gather_batch(sources, pool, lo, hi, batch, labels);
      ForwardCache<Real> cache;
      const Tensor<Real> logits = forward(model, batch, train_pass, &cache);
      Tensor<Real> dlogits;
      const double loss = detail::cross_entropy_grad(logits, labels, &dlogits);
      if (!std::isfinite(loss)) {
        throw NumericError("train: loss diverged at epoch " + std::to_string(epoch) +
                           ", batch " + std::to_string(lo / cfg.batch_size) +
                           " (lr " + std::to_string(lr) + ")");
      }
      const std::vector<int> pred = argmax_rows(logits);
      for (std::size_t i = 0; i < labels.size(); ++i) correct += pred[i] == labels[i];
      seen += static_cast<std::int64_t>(labels.size());
      loss_sum += loss * static_cast<double>(labels.size());

      GradMap<Real> grads = backward(model, cache, dlogits, trainable);
      for (auto& [name, g] : grads) {
        Tensor<Real>& p = model.params.at(name);
        std::vector<Real>& v = velocity.at(name);
        for (std::size_t k = 0; k < g.size(); ++k) {
          const double step = static_cast<double>(g[k]) +
                              cfg.weight_decay * static_cast<double>(p.data[k]);
          v[k] = static_cast<Real>(cfg.momentum * static_cast<double>(v[k]) + step);
          p.data[k] = static_cast<Real>(static_cast<double>(p.data[k]) -
                                        lr * static_cast<double>(v[k]));
        }
      }
    }

    EpochLog entry;
    entry.epoch = epoch;
    entry.lr = lr;
    entry.train_loss = loss_sum / static_cast<double>(seen);
    entry.train_acc = static_cast<double>(correct) / static_cast<double>(seen);
    if (!val_pool.empty()) {
      BnPassConfig eval_pass;  // source mode: frozen running statistics
      std::int64_t val_correct = 0;
      for (std::size_t lo = 0; lo < val_pool.size();
           lo += static_cast<std::size_t>(cfg.batch_size)) {
        const std::size_t hi =
            std::min(val_pool.size(), lo + static_cast<std::size_t>(cfg.batch_size));
        detail::gather_batch(sources, val_pool, lo, hi, batch, labels);
        const std::vector<int> pred = argmax_rows(forward(model, batch, eval_pass));
        for (std::size_t i = 0; i < labels.size(); ++i) val_correct += pred[i] == labels[i];
      }
      entry.val_acc = static_cast<double>(val_correct) / static_cast<double>(val_pool.size());
    } else {
      entry.val_acc = std::numeric_limits<double>::quiet_NaN();
    }
    if (progress) {
      char line[160];
      std::snprintf(line, sizeof(line),
                    "epoch %d/%d lr %.4g train_loss %.4f train_acc %.4f val_acc %.4f",
                    epoch, cfg.epochs, lr, entry.train_loss, entry.train_acc, entry.val_acc);
      *progress << line << "\n";
    }
    log.push_back(entry);
  }
  return log;
}

}  // namespace tta
