#include <cstring>
#include <fstream>
#include <vector>

#include <gtest/gtest.h>

#include "test_util.hpp"
#include "tta/checkpoint.hpp"
#include "tta/dataset.hpp"
#include "tta/train.hpp"

namespace {

tta::DomainSpec plain_spec() {
  tta::DomainSpec d;
  d.name = "plain";
  d.seed = 1;
  return d;
}

tta::DomainSpec grain_spec() {
  tta::DomainSpec d;
  d.name = "grain";
  d.noise_sigma = 0.25;
  d.seed = 2;
  return d;
}

tta::DomainSpec sketch_spec() {
  tta::DomainSpec d;
  d.name = "sketch";
  d.edge_sketch = true;
  d.seed = 3;
  return d;
}

// A split where every image shows the same class.
tta::DatasetSplit<float> single_class_split(int label, std::int64_t n, std::uint64_t seed) {
  tta::DatasetSplit<float> split;
  split.domain = "single";
  split.role = "train";
  split.images = tta::Tensor<float>({n, tta::kImageChannels, tta::kImageSide, tta::kImageSide});
  split.labels.assign(static_cast<std::size_t>(n), label);
  const std::int64_t stride =
      static_cast<std::int64_t>(tta::kImageChannels) * tta::kImageSide * tta::kImageSide;
  for (std::int64_t i = 0; i < n; ++i) {
    tta::Rng rng(tta::derive_seed(seed, "sample", static_cast<std::uint64_t>(i)));
    tta::render_shape_image(label, rng, split.images.data.data() + i * stride);
  }
  return split;
}

double split_accuracy(tta::Model<float>& model, const tta::DatasetSplit<float>& split) {
  tta::BnPassConfig pass;  // source mode
  const std::int64_t stride =
      static_cast<std::int64_t>(tta::kImageChannels) * tta::kImageSide * tta::kImageSide;
  std::int64_t correct = 0;
  for (std::int64_t lo = 0; lo < split.size(); lo += 64) {
    const std::int64_t hi = std::min(split.size(), lo + 64);
    tta::Tensor<float> batch({hi - lo, tta::kImageChannels, tta::kImageSide, tta::kImageSide});
    std::copy_n(split.images.data.data() + lo * stride, (hi - lo) * stride,
                batch.data.data());
    const auto pred = tta::argmax_rows(tta::forward(model, batch, pass));
    for (std::int64_t i = lo; i < hi; ++i) {
      correct += pred[static_cast<std::size_t>(i - lo)] ==
                 split.labels[static_cast<std::size_t>(i)];
    }
  }
  return static_cast<double>(correct) / static_cast<double>(split.size());
}

TEST(TrainBaseline, SingleClassIsLearnedWithinTwoEpochs) {
  auto model = tta::make_model<float>(tta::small_convnet(3, 5), 1);
  const auto split = single_class_split(2, 80, 5);
  tta::TrainConfig cfg;
  cfg.epochs = 2;
  cfg.batch_size = 16;
  cfg.seed = 3;
  const auto log = tta::train_baseline(model, {split}, cfg);
  ASSERT_EQ(log.size(), 2u);
  EXPECT_EQ(log.back().train_acc, 1.0);
  EXPECT_EQ(log.back().val_acc, 1.0);
  EXPECT_LT(log.back().train_loss, log.front().train_loss);
}

TEST(TrainBaseline, FixedSeedGivesByteIdenticalCheckpoints) {
  const auto data = tta::generate_domain<float>(plain_spec(), 96, 13, "train");
  tta::TrainConfig cfg;
  cfg.epochs = 2;
  cfg.batch_size = 32;
  cfg.seed = 9;

  const std::string a = testing::TempDir() + "train_det_a.ttac";
  const std::string b = testing::TempDir() + "train_det_b.ttac";
  for (const std::string& path : {a, b}) {
    auto model = tta::make_model<float>(tta::small_convnet(3, 5), 21);
    tta::train_baseline(model, {data}, cfg);
    tta::save_model(path, model);
  }
  std::ifstream fa(a, std::ios::binary), fb(b, std::ios::binary);
  const std::vector<char> ba((std::istreambuf_iterator<char>(fa)),
                             std::istreambuf_iterator<char>());
  const std::vector<char> bb((std::istreambuf_iterator<char>(fb)),
                             std::istreambuf_iterator<char>());
  EXPECT_EQ(ba, bb);
}

TEST(TrainBaseline, LossFallsAndAccuracyRisesOnEasyShapes) {
  auto model = tta::make_model<float>(tta::small_convnet(3, 5), 2);
  const auto data = tta::generate_domain<float>(plain_spec(), 400, 31, "train");
  tta::TrainConfig cfg;
  cfg.epochs = 12;
  cfg.batch_size = 32;
  cfg.lr = 0.1;
  cfg.seed = 1;
  const auto log = tta::train_baseline(model, {data}, cfg);
  EXPECT_LT(log.back().train_loss, 0.5 * log.front().train_loss);
  EXPECT_GT(log.back().val_acc, 0.65);
  EXPECT_GT(log.back().train_acc, log.front().train_acc);
}

TEST(TrainBaseline, DivergenceAbortsWithDiagnostic) {
  auto model = tta::make_model<float>(tta::small_convnet(3, 5), 4);
  const auto data = tta::generate_domain<float>(plain_spec(), 64, 7, "train");
  tta::TrainConfig cfg;
  cfg.epochs = 2;
  cfg.batch_size = 16;
  cfg.lr = 1e9;  // guaranteed blow-up
  cfg.seed = 2;
  try {
    tta::train_baseline(model, {data}, cfg);
    FAIL() << "expected NumericError";
  } catch (const tta::NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("epoch"), std::string::npos);
  }
}

TEST(TrainBaseline, RunningStatisticsAreUpdated) {
  auto model = tta::make_model<float>(tta::small_convnet(3, 5), 6);
  const auto before = model.buffers.at("bn1.running_mean").data;
  const auto data = tta::generate_domain<float>(plain_spec(), 64, 3, "train");
  tta::TrainConfig cfg;
  cfg.epochs = 1;
  cfg.batch_size = 16;
  cfg.seed = 4;
  tta::train_baseline(model, {data}, cfg);
  EXPECT_NE(0, std::memcmp(before.data(), model.buffers.at("bn1.running_mean").data.data(),
                           before.size() * sizeof(float)));
}

TEST(TrainBaseline, HeldOutDomainScoresBelowHeldInValidation) {
  // the benchmark premise: a sketch-style appearance shift costs real accuracy
  auto model = tta::make_model<float>(tta::small_convnet(3, 5), 11);
  const auto plain = tta::generate_domain<float>(plain_spec(), 500, 17, "train");
  const auto grain = tta::generate_domain<float>(grain_spec(), 500, 17, "train");
  const auto sketch = tta::generate_domain<float>(sketch_spec(), 400, 17, "test");
  tta::TrainConfig cfg;
  cfg.epochs = 20;
  cfg.batch_size = 64;
  cfg.lr = 0.1;
  cfg.seed = 5;
  const auto log = tta::train_baseline(model, {plain, grain}, cfg);
  const double held_out = split_accuracy(model, sketch);
  EXPECT_GT(log.back().val_acc, 0.90);
  EXPECT_LT(held_out, log.back().val_acc - 0.10)
      << "held-in " << log.back().val_acc << " held-out " << held_out;
}

TEST(TrainBaseline, ValidationRejectsBadConfigs) {
  tta::TrainConfig cfg;
  cfg.epochs = 0;
  EXPECT_THROW(cfg.validate(), tta::ConfigError);
  cfg = {};
  cfg.batch_size = 1;
  EXPECT_THROW(cfg.validate(), tta::ConfigError);
  cfg = {};
  cfg.lr = -1.0;
  EXPECT_THROW(cfg.validate(), tta::ConfigError);
  cfg = {};
  cfg.momentum = 1.0;
  EXPECT_THROW(cfg.validate(), tta::ConfigError);
  cfg = {};
  cfg.val_fraction = 0.6;
  EXPECT_THROW(cfg.validate(), tta::ConfigError);

  auto model = tta::make_model<float>(tta::small_convnet(3, 5), 1);
  EXPECT_THROW(tta::train_baseline(model, {}, tta::TrainConfig{}), tta::ConfigError);
  auto bad = tta::generate_domain<float>(plain_spec(), 10, 1, "train");
  bad.labels[0] = 7;
  EXPECT_THROW(tta::train_baseline(model, {bad}, tta::TrainConfig{}), tta::ConfigError);
}

}  // namespace
