#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include <gtest/gtest.h>

#include "test_util.hpp"
#include "tta/checkpoint.hpp"
#include "tta/dataset.hpp"
#include "tta/layers.hpp"

namespace {

std::string temp_path(const std::string& name) { return testing::TempDir() + name; }

std::vector<char> file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  EXPECT_TRUE(in.good()) << path;
  return std::vector<char>(std::istreambuf_iterator<char>(in),
                           std::istreambuf_iterator<char>());
}

template <typename Real>
tta::Model<Real> trained_like_model(std::uint64_t seed) {
  auto model = tta::make_model<Real>(tta::small_convnet(3, 5), seed);
  ttest::warm_up_running_stats(model, 3, 16, seed + 1);
  return model;
}

TEST(ModelCheckpoint, RoundTripIsBitExact) {
  const auto model = trained_like_model<float>(3);
  const std::string path = temp_path("model_roundtrip.ttac");
  tta::save_model(path, model);
  const auto loaded = tta::load_model<float>(path);

  EXPECT_EQ(loaded.arch(), model.arch());
  EXPECT_EQ(loaded.bn_eps, model.bn_eps);
  EXPECT_EQ(loaded.init_seed, model.init_seed);
  ASSERT_EQ(loaded.params.size(), model.params.size());
  for (const auto& [name, t] : model.params) {
    const auto& lt = loaded.params.at(name);
    ASSERT_EQ(lt.shape, t.shape) << name;
    EXPECT_EQ(0, std::memcmp(lt.data.data(), t.data.data(),
                             t.data.size() * sizeof(float)))
        << name;
  }
  for (const auto& [name, t] : model.buffers) {
    const auto& lt = loaded.buffers.at(name);
    EXPECT_EQ(0, std::memcmp(lt.data.data(), t.data.data(),
                             t.data.size() * sizeof(float)))
        << name;
  }
}

TEST(ModelCheckpoint, DoublePrecisionRoundTrips) {
  const auto model = trained_like_model<double>(11);
  const std::string path = temp_path("model_f64.ttac");
  tta::save_model(path, model);
  const auto loaded = tta::load_model<double>(path);
  for (const auto& [name, t] : model.params) {
    EXPECT_EQ(0, std::memcmp(loaded.params.at(name).data.data(), t.data.data(),
                             t.data.size() * sizeof(double)))
        << name;
  }
}

TEST(ModelCheckpoint, SavingTwiceGivesIdenticalFiles) {
  const auto model = trained_like_model<float>(5);
  const std::string a = temp_path("model_a.ttac");
  const std::string b = temp_path("model_b.ttac");
  tta::save_model(a, model);
  tta::save_model(b, model);
  EXPECT_EQ(file_bytes(a), file_bytes(b));
}

TEST(ModelCheckpoint, RejectsPrecisionMismatch) {
  const auto model = trained_like_model<float>(7);
  const std::string path = temp_path("model_f32.ttac");
  tta::save_model(path, model);
  EXPECT_THROW(tta::load_model<double>(path), tta::IoError);
}

TEST(DatasetCheckpoint, RoundTripIsBitExact) {
  tta::DomainSpec spec;
  spec.name = "grain";
  spec.noise_sigma = 0.2;
  spec.seed = 4;
  const auto split = tta::generate_domain<float>(spec, 30, 17, "test");
  const std::string path = temp_path("dataset_roundtrip.ttac");
  tta::save_dataset(path, split);
  const auto loaded = tta::load_dataset<float>(path);
  EXPECT_EQ(loaded.domain, "grain");
  EXPECT_EQ(loaded.role, "test");
  EXPECT_EQ(loaded.labels, split.labels);
  ASSERT_EQ(loaded.images.shape, split.images.shape);
  EXPECT_EQ(0, std::memcmp(loaded.images.data.data(), split.images.data.data(),
                           split.images.data.size() * sizeof(float)));
}

TEST(Container, MetaValuesMayContainSpaces) {
  tta::ContainerWriter w;
  w.add_meta("note", "three plain words");
  const float v = 1.5f;
  w.add_tensor("x", {1}, &v);
  const std::string path = temp_path("meta_spaces.ttac");
  w.save(path);
  const auto c = tta::Container::load(path);
  EXPECT_EQ(c.meta("note"), "three plain words");
  EXPECT_EQ(c.tensor("x").numel(), 1);
}

TEST(Container, LoadFailuresAreDiagnosed) {
  EXPECT_THROW(tta::Container::load(temp_path("does_not_exist.ttac")), tta::IoError);

  const std::string bad_magic = temp_path("bad_magic.ttac");
  std::ofstream(bad_magic) << "not a checkpoint\n";
  EXPECT_THROW(tta::Container::load(bad_magic), tta::IoError);

  const std::string no_end = temp_path("no_end.ttac");
  std::ofstream(no_end) << "ttac v1\nmeta kind model\n";
  EXPECT_THROW(tta::Container::load(no_end), tta::IoError);

  const std::string truncated = temp_path("truncated.ttac");
  std::ofstream(truncated) << "ttac v1\ntensor x f32 1 8\nend\nxx";
  EXPECT_THROW(tta::Container::load(truncated), tta::IoError);

  const std::string bad_dtype = temp_path("bad_dtype.ttac");
  std::ofstream(bad_dtype) << "ttac v1\ntensor x f16 1 1\nend\nxx";
  EXPECT_THROW(tta::Container::load(bad_dtype), tta::IoError);
}

TEST(Container, ModelLoaderRejectsWrongKind) {
  tta::DomainSpec spec;
  spec.name = "plain";
  const auto split = tta::generate_domain<float>(spec, 10, 1, "train");
  const std::string path = temp_path("kind_mismatch.ttac");
  tta::save_dataset(path, split);
  EXPECT_THROW(tta::load_model<float>(path), tta::IoError);
  const auto model = trained_like_model<float>(2);
  const std::string mpath = temp_path("kind_mismatch_model.ttac");
  tta::save_model(mpath, model);
  EXPECT_THROW(tta::load_dataset<float>(mpath), tta::IoError);
}

TEST(Container, ModelLoaderRejectsForeignTensors) {
  const auto model = trained_like_model<float>(9);
  tta::ContainerWriter w;
  w.add_meta("kind", "model");
  w.add_meta("arch", model.arch());
  w.add_meta("dtype", "f32");
  w.add_meta("bn_eps", "1e-05");
  w.add_meta("init_seed", "9");
  for (const auto& [name, t] : model.params) {
    w.add_tensor("param." + name, t.shape, t.data.data());
  }
  for (const auto& [name, t] : model.buffers) {
    w.add_tensor("buffer." + name, t.shape, t.data.data());
  }
  const float stray = 0.0f;
  w.add_tensor("param.rogue.weight", {1}, &stray);
  const std::string path = temp_path("foreign_tensor.ttac");
  w.save(path);
  EXPECT_THROW(tta::load_model<float>(path), tta::IoError);
}

}  // namespace
