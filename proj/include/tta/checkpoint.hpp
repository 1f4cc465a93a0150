#pragma once

// Checkpoint container: a human-readable text manifest followed by a raw
// binary payload. The manifest lists metadata lines and tensor descriptors;
// the payload holds each tensor's bytes in manifest order, little endian.
// Writing the same model twice produces byte-identical files, which the
// tests rely on to prove training determinism.
//
//   ttac v1
//   meta <key> <value>
//   tensor <name> <dtype> <rank> <dim0> <dim1> ...
//   end
//   <payload>

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <type_traits>
#include <vector>

#include "tta/dataset.hpp"
#include "tta/errors.hpp"
#include "tta/layers.hpp"
#include "tta/tensor.hpp"

namespace tta {

namespace detail {

template <typename T>
const char* dtype_name() {
  if constexpr (std::is_same_v<T, float>) return "f32";
  if constexpr (std::is_same_v<T, double>) return "f64";
  if constexpr (std::is_same_v<T, std::int32_t>) return "i32";
  return "unknown";
}

inline std::size_t dtype_size(const std::string& dtype) {
  if (dtype == "f32" || dtype == "i32") return 4;
  if (dtype == "f64") return 8;
  throw IoError("checkpoint: unknown dtype '" + dtype + "'");
}

inline std::string format_real(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace detail

struct ContainerTensor {
  std::string name;
  std::string dtype;
  std::vector<std::int64_t> shape;
  std::vector<char> bytes;

  std::int64_t numel() const {
    std::int64_t n = 1;
    for (std::int64_t d : shape) n *= d;
    return n;
  }
};

class ContainerWriter {
 public:
  void add_meta(const std::string& key, const std::string& value) {
    if (key.find_first_of(" \n") != std::string::npos) {
      throw IoError("checkpoint: meta key must not contain spaces: '" + key + "'");
    }
    if (value.find('\n') != std::string::npos) {
      throw IoError("checkpoint: meta value must be a single line");
    }
    metas_.emplace_back(key, value);
  }

  template <typename T>
  void add_tensor(const std::string& name, const std::vector<std::int64_t>& shape,
                  const T* data) {
    if (name.find_first_of(" \n") != std::string::npos) {
      throw IoError("checkpoint: tensor name must not contain spaces: '" + name + "'");
    }
    ContainerTensor t;
    t.name = name;
    t.dtype = detail::dtype_name<T>();
    t.shape = shape;
    std::int64_t n = 1;
    for (std::int64_t d : shape) n *= d;
    t.bytes.resize(static_cast<std::size_t>(n) * sizeof(T));
    std::memcpy(t.bytes.data(), data, t.bytes.size());
    tensors_.push_back(std::move(t));
  }

  void save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("checkpoint: cannot open '" + path + "' for writing");
    out << "ttac v1\n";
    for (const auto& [k, v] : metas_) out << "meta " << k << " " << v << "\n";
    for (const ContainerTensor& t : tensors_) {
      out << "tensor " << t.name << " " << t.dtype << " " << t.shape.size();
      for (std::int64_t d : t.shape) out << " " << d;
      out << "\n";
    }
    out << "end\n";
    for (const ContainerTensor& t : tensors_) {
      out.write(t.bytes.data(), static_cast<std::streamsize>(t.bytes.size()));
    }
    if (!out) throw IoError("checkpoint: write to '" + path + "' failed");
  }

 private:
  std::vector<std::pair<std::string, std::string>> metas_;
  std::vector<ContainerTensor> tensors_;
};

struct Container {
  std::map<std::string, std::string> metas;
  std::vector<ContainerTensor> tensors;

  const ContainerTensor& tensor(const std::string& name) const {
    for (const ContainerTensor& t : tensors) {
      if (t.name == name) return t;
    }
    throw IoError("checkpoint: missing tensor '" + name + "'");
  }

  const std::string& meta(const std::string& key) const {
    auto it = metas.find(key);
    if (it == metas.end()) throw IoError("checkpoint: missing meta '" + key + "'");
    return it->second;
  }

  static Container load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("checkpoint: cannot open '" + path + "'");
    std::string line;
    if (!std::getline(in, line) || line != "ttac v1") {
      throw IoError("checkpoint: '" + path + "' is not a ttac v1 file");
    }
    Container c;
    bool saw_end = false;
    while (std::getline(in, line)) {
      if (line == "end") {
        saw_end = true;
        break;
      }
      std::istringstream ls(line);
      std::string kind;
      ls >> kind;
      if (kind == "meta") {
        std::string key;
        ls >> key;
        std::string value;
        std::getline(ls, value);
        if (!value.empty() && value.front() == ' ') value.erase(0, 1);
        c.metas[key] = value;
      } else if (kind == "tensor") {
        ContainerTensor t;
        std::size_t rank = 0;
        ls >> t.name >> t.dtype >> rank;
        t.shape.resize(rank);
        for (std::size_t i = 0; i < rank; ++i) ls >> t.shape[i];
        if (!ls) throw IoError("checkpoint: malformed tensor line: '" + line + "'");
        c.tensors.push_back(std::move(t));
      } else {
        throw IoError("checkpoint: unexpected manifest line: '" + line + "'");
      }
    }
    if (!saw_end) throw IoError("checkpoint: manifest in '" + path + "' has no end marker");
    for (ContainerTensor& t : c.tensors) {
      const std::size_t bytes =
          static_cast<std::size_t>(t.numel()) * detail::dtype_size(t.dtype);
      t.bytes.resize(bytes);
      in.read(t.bytes.data(), static_cast<std::streamsize>(bytes));
      if (in.gcount() != static_cast<std::streamsize>(bytes)) {
        throw IoError("checkpoint: payload of '" + path + "' is truncated at tensor '" +
                      t.name + "'");
      }
    }
    return c;
  }
};

namespace detail {

template <typename Real>
void copy_tensor_payload(const ContainerTensor& src, Tensor<Real>& dst,
                         const std::string& context) {
  if (src.dtype != dtype_name<Real>()) {
    throw IoError(context + ": tensor '" + src.name + "' has dtype " + src.dtype +
                  ", expected " + dtype_name<Real>());
  }
  if (src.shape != dst.shape) {
    throw IoError(context + ": tensor '" + src.name + "' has an unexpected shape");
  }
  std::memcpy(dst.data.data(), src.bytes.data(), src.bytes.size());
}

}  // namespace detail

// ---- model persistence ------------------------------------------------------

template <typename Real>
void save_model(const std::string& path, const Model<Real>& model) {
  ContainerWriter w;
  w.add_meta("kind", "model");
  w.add_meta("arch", model.arch());
  w.add_meta("dtype", detail::dtype_name<Real>());
  w.add_meta("bn_eps", detail::format_real(static_cast<double>(model.bn_eps)));
  w.add_meta("init_seed", std::to_string(model.init_seed));
  for (const auto& [name, t] : model.params) {
    w.add_tensor("param." + name, t.shape, t.data.data());
  }
  for (const auto& [name, t] : model.buffers) {
    w.add_tensor("buffer." + name, t.shape, t.data.data());
  }
  w.save(path);
}

template <typename Real>
Model<Real> load_model(const std::string& path) {
  const Container c = Container::load(path);
  if (c.meta("kind") != "model") {
    throw IoError("checkpoint: '" + path + "' does not hold a model");
  }
  Model<Real> m = make_model<Real>(arch_from_string(c.meta("arch")), 0);
  m.bn_eps = static_cast<Real>(std::stod(c.meta("bn_eps")));
  m.init_seed = std::stoull(c.meta("init_seed"));
  std::size_t found = 0;
  for (auto& [name, t] : m.params) {
    detail::copy_tensor_payload(c.tensor("param." + name), t, "load_model");
    ++found;
  }
  for (auto& [name, t] : m.buffers) {
    detail::copy_tensor_payload(c.tensor("buffer." + name), t, "load_model");
    ++found;
  }
  if (found != c.tensors.size()) {
    throw IoError("load_model: '" + path + "' holds tensors the architecture does not");
  }
  return m;
}

// ---- dataset persistence ----------------------------------------------------

template <typename Real>
void save_dataset(const std::string& path, const DatasetSplit<Real>& split) {
  ContainerWriter w;
  w.add_meta("kind", "dataset");
  w.add_meta("domain", split.domain);
  w.add_meta("role", split.role);
  w.add_tensor("images", split.images.shape, split.images.data.data());
  std::vector<std::int32_t> labels(split.labels.begin(), split.labels.end());
  w.add_tensor("labels", {static_cast<std::int64_t>(labels.size())}, labels.data());
  w.save(path);
}

template <typename Real>
DatasetSplit<Real> load_dataset(const std::string& path) {
  const Container c = Container::load(path);
  if (c.meta("kind") != "dataset") {
    throw IoError("checkpoint: '" + path + "' does not hold a dataset");
  }
  DatasetSplit<Real> split;
  split.domain = c.meta("domain");
  split.role = c.meta("role");
  const ContainerTensor& imgs = c.tensor("images");
  if (imgs.shape.size() != 4) throw IoError("load_dataset: images must be rank 4");
  split.images = Tensor<Real>(imgs.shape);
  detail::copy_tensor_payload(imgs, split.images, "load_dataset");
  const ContainerTensor& labels = c.tensor("labels");
  if (labels.dtype != "i32" || labels.shape.size() != 1 ||
      labels.shape[0] != imgs.shape[0]) {
    throw IoError("load_dataset: labels must be one i32 per image");
  }
  split.labels.resize(static_cast<std::size_t>(labels.shape[0]));
  const auto* raw = reinterpret_cast<const std::int32_t*>(labels.bytes.data());
  for (std::size_t i = 0; i < split.labels.size(); ++i) {
    split.labels[i] = raw[i];
  }
  return split;
}

}  // namespace tta
