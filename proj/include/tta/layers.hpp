#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "tta/batchnorm.hpp"
#include "tta/rng.hpp"
#include "tta/tensor.hpp"

namespace tta {

enum class LayerKind { kConv2d, kBatchNorm2d, kRelu, kGlobalAvgPool, kLinear };

struct LayerSpec {
  LayerKind kind = LayerKind::kRelu;
  std::string name;
  // conv2d
  int in_ch = 0, out_ch = 0, ksize = 0, stride = 1, pad = 0;
  // batchnorm2d
  int channels = 0;
  // linear
  int in_features = 0, out_features = 0;

  static LayerSpec conv2d(std::string name, int in_ch, int out_ch, int k, int stride, int pad) {
    LayerSpec s;
    s.kind = LayerKind::kConv2d;
    s.name = std::move(name);
    s.in_ch = in_ch;
    s.out_ch = out_ch;
    s.ksize = k;
    s.stride = stride;
    s.pad = pad;
    return s;
  }
  static LayerSpec batchnorm2d(std::string name, int channels) {
    LayerSpec s;
    s.kind = LayerKind::kBatchNorm2d;
    s.name = std::move(name);
    s.channels = channels;
    return s;
  }
  static LayerSpec relu(std::string name) {
    LayerSpec s;
    s.kind = LayerKind::kRelu;
    s.name = std::move(name);
    return s;
  }
  static LayerSpec global_avg_pool(std::string name) {
    LayerSpec s;
    s.kind = LayerKind::kGlobalAvgPool;
    s.name = std::move(name);
    return s;
  }
  static LayerSpec linear(std::string name, int in_features, int out_features) {
    LayerSpec s;
    s.kind = LayerKind::kLinear;
    s.name = std::move(name);
    s.in_features = in_features;
    s.out_features = out_features;
    return s;
  }
};

// The compact CNN used throughout: three conv/BN/ReLU stages, global average
// pooling, one linear classifier. Convolutions carry no bias since each is
// followed by a normalization layer.
inline std::vector<LayerSpec> small_convnet(int in_ch, int classes) {
  return {
      LayerSpec::conv2d("conv1", in_ch, 16, 3, 1, 1),
      LayerSpec::batchnorm2d("bn1", 16),
      LayerSpec::relu("relu1"),
      LayerSpec::conv2d("conv2", 16, 32, 3, 2, 1),
      LayerSpec::batchnorm2d("bn2", 32),
      LayerSpec::relu("relu2"),
      LayerSpec::conv2d("conv3", 32, 64, 3, 2, 1),
      LayerSpec::batchnorm2d("bn3", 64),
      LayerSpec::relu("relu3"),
      LayerSpec::global_avg_pool("pool"),
      LayerSpec::linear("fc", 64, classes),
  };
}

inline void validate_arch(const std::vector<LayerSpec>& layers) {
  if (layers.empty()) throw std::invalid_argument("empty layer list");
  int ch = -1;  // -1: channel count not pinned yet
  bool pooled = false;
  std::set<std::string> names;
  for (const LayerSpec& l : layers) {
    if (l.name.empty()) throw std::invalid_argument("layer with empty name");
    if (!names.insert(l.name).second) {
      throw std::invalid_argument("duplicate layer name '" + l.name + "'");
    }
    switch (l.kind) {
      case LayerKind::kConv2d:
        if (pooled) throw std::invalid_argument("conv layer '" + l.name + "' after pooling");
        if (l.in_ch <= 0 || l.out_ch <= 0 || l.ksize <= 0 || l.stride <= 0 || l.pad < 0) {
          throw std::invalid_argument("conv layer '" + l.name + "' has invalid geometry");
        }
        if (ch >= 0 && ch != l.in_ch) {
          throw std::invalid_argument("conv layer '" + l.name + "' expects " +
                                      std::to_string(l.in_ch) + " input channels but gets " +
                                      std::to_string(ch));
        }
        ch = l.out_ch;
        break;
      case LayerKind::kBatchNorm2d:
        if (pooled) throw std::invalid_argument("bn layer '" + l.name + "' after pooling");
        if (ch >= 0 && ch != l.channels) {
          throw std::invalid_argument("bn layer '" + l.name + "' sized for " +
                                      std::to_string(l.channels) + " channels but gets " +
                                      std::to_string(ch));
        }
        ch = l.channels;
        break;
      case LayerKind::kRelu:
        break;
      case LayerKind::kGlobalAvgPool:
        if (pooled) throw std::invalid_argument("second pooling layer '" + l.name + "'");
        pooled = true;
        break;
      case LayerKind::kLinear:
        if (!pooled) throw std::invalid_argument("linear layer '" + l.name + "' before pooling");
        if (ch >= 0 && ch != l.in_features) {
          throw std::invalid_argument("linear layer '" + l.name + "' expects " +
                                      std::to_string(l.in_features) + " features but gets " +
                                      std::to_string(ch));
        }
        ch = l.out_features;
        break;
    }
  }
}

// Single-line architecture descriptor, also the parse format used when a
// model is loaded back from disk.
inline std::string arch_to_string(const std::vector<LayerSpec>& layers) {
  std::ostringstream os;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    if (i) os << ';';
    const LayerSpec& l = layers[i];
    switch (l.kind) {
      case LayerKind::kConv2d:
        os << "conv2d:" << l.name << ',' << l.in_ch << ',' << l.out_ch << ',' << l.ksize << ','
           << l.stride << ',' << l.pad;
        break;
      case LayerKind::kBatchNorm2d:
        os << "batchnorm2d:" << l.name << ',' << l.channels;
        break;
      case LayerKind::kRelu:
        os << "relu:" << l.name;
        break;
      case LayerKind::kGlobalAvgPool:
        os << "gap:" << l.name;
        break;
      case LayerKind::kLinear:
        os << "linear:" << l.name << ',' << l.in_features << ',' << l.out_features;
        break;
    }
  }
  return os.str();
}

inline std::vector<LayerSpec> arch_from_string(const std::string& desc) {
  std::vector<LayerSpec> layers;
  std::istringstream in(desc);
  std::string item;
  auto split = [](const std::string& s, char sep) {
    std::vector<std::string> parts;
    std::istringstream ss(s);
    std::string p;
    while (std::getline(ss, p, sep)) parts.push_back(p);
    return parts;
  };
  while (std::getline(in, item, ';')) {
    const std::size_t colon = item.find(':');
    if (colon == std::string::npos) {
      throw std::invalid_argument("bad architecture item '" + item + "'");
    }
    const std::string kind = item.substr(0, colon);
    const std::vector<std::string> f = split(item.substr(colon + 1), ',');
    auto want = [&](std::size_t n) {
      if (f.size() != n) throw std::invalid_argument("bad field count in '" + item + "'");
    };
    if (kind == "conv2d") {
      want(6);
      layers.push_back(LayerSpec::conv2d(f[0], std::stoi(f[1]), std::stoi(f[2]), std::stoi(f[3]),
                                         std::stoi(f[4]), std::stoi(f[5])));
    } else if (kind == "batchnorm2d") {
      want(2);
      layers.push_back(LayerSpec::batchnorm2d(f[0], std::stoi(f[1])));
    } else if (kind == "relu") {
      want(1);
      layers.push_back(LayerSpec::relu(f[0]));
    } else if (kind == "gap") {
      want(1);
      layers.push_back(LayerSpec::global_avg_pool(f[0]));
    } else if (kind == "linear") {
      want(3);
      layers.push_back(LayerSpec::linear(f[0], std::stoi(f[1]), std::stoi(f[2])));
    } else {
      throw std::invalid_argument("unknown layer kind '" + kind + "'");
    }
  }
  validate_arch(layers);
  return layers;
}

// A model is the layer list plus named parameter/buffer tensors. Parameters
// are trainable; buffers hold BN running statistics. Copying a Model is a
// deep copy, which is what per-episode clones rely on.
template <typename Real>
struct Model {
  std::vector<LayerSpec> layers;
  std::map<std::string, Tensor<Real>> params;
  std::map<std::string, Tensor<Real>> buffers;
  Real bn_eps = default_bn_eps<Real>();
  std::uint64_t init_seed = 0;

  std::string arch() const { return arch_to_string(layers); }

  int bn_count() const {
    int n = 0;
    for (const LayerSpec& l : layers) n += l.kind == LayerKind::kBatchNorm2d;
    return n;
  }

  std::vector<std::string> bn_names() const {
    std::vector<std::string> out;
    for (const LayerSpec& l : layers) {
      if (l.kind == LayerKind::kBatchNorm2d) out.push_back(l.name);
    }
    return out;
  }

  // Names of all BN affine parameters, the set finetuned at test time.
  std::set<std::string> bn_affine_names() const {
    std::set<std::string> out;
    for (const std::string& n : bn_names()) {
      out.insert(n + ".gamma");
      out.insert(n + ".beta");
    }
    return out;
  }

  std::set<std::string> all_param_names() const {
    std::set<std::string> out;
    for (const auto& [name, t] : params) out.insert(name);
    return out;
  }
};

// Kaiming-uniform initialization: weights uniform in +-sqrt(6/fan_in), BN
// gamma = 1 and beta = 0, linear bias uniform in +-1/sqrt(fan_in), running
// statistics at (0, 1). Draw order is the layer order, so a fixed seed pins
// every parameter bit.
template <typename Real>
Model<Real> make_model(const std::vector<LayerSpec>& layers, std::uint64_t seed) {
  validate_arch(layers);
  Model<Real> m;
  m.layers = layers;
  m.init_seed = seed;
  Rng rng(derive_seed(seed, "init"));
  auto fill_uniform = [&rng](Tensor<Real>& t, double bound) {
    for (Real& v : t.data) v = static_cast<Real>(rng.uniform(-bound, bound));
  };
  for (const LayerSpec& l : layers) {
    switch (l.kind) {
      case LayerKind::kConv2d: {
        Tensor<Real> w({l.out_ch, l.in_ch, l.ksize, l.ksize});
        const double fan_in = static_cast<double>(l.in_ch) * l.ksize * l.ksize;
        fill_uniform(w, std::sqrt(6.0 / fan_in));
        m.params.emplace(l.name + ".weight", std::move(w));
        break;
      }
      case LayerKind::kBatchNorm2d: {
        m.params.emplace(l.name + ".gamma", Tensor<Real>({l.channels}, Real(1)));
        m.params.emplace(l.name + ".beta", Tensor<Real>({l.channels}, Real(0)));
        m.buffers.emplace(l.name + ".running_mean", Tensor<Real>({l.channels}, Real(0)));
        m.buffers.emplace(l.name + ".running_var", Tensor<Real>({l.channels}, Real(1)));
        break;
      }
      case LayerKind::kLinear: {
        Tensor<Real> w({l.out_features, l.in_features});
        fill_uniform(w, std::sqrt(6.0 / l.in_features));
        Tensor<Real> b({l.out_features});
        fill_uniform(b, 1.0 / std::sqrt(static_cast<double>(l.in_features)));
        m.params.emplace(l.name + ".weight", std::move(w));
        m.params.emplace(l.name + ".bias", std::move(b));
        break;
      }
      default:
        break;
    }
  }
  return m;
}

// ---- convolution kernels ---------------------------------------------------

inline std::int64_t conv_out_dim(std::int64_t in, int k, int stride, int pad) {
  return (in + 2 * static_cast<std::int64_t>(pad) - k) / stride + 1;
}

// Unfolds one image (C,H,W) into a (C*k*k) x (H'*W') column matrix with zero
// padding. The plain triple loop plus a small GEMM is fast enough here; the
// whole benchmark fits comfortably in the experiment time budgets.
template <typename Real>
void im2col(const Real* x, std::int64_t c, std::int64_t h, std::int64_t w, int k, int stride,
            int pad, std::int64_t oh, std::int64_t ow, Real* col) {
  const std::int64_t plane = h * w, opix = oh * ow;
  std::int64_t row = 0;
  for (std::int64_t ci = 0; ci < c; ++ci) {
    for (int ki = 0; ki < k; ++ki) {
      for (int kj = 0; kj < k; ++kj, ++row) {
        Real* out = col + row * opix;
        for (std::int64_t y = 0; y < oh; ++y) {
          const std::int64_t sy = y * stride + ki - pad;
          if (sy < 0 || sy >= h) {
            std::fill(out + y * ow, out + (y + 1) * ow, Real(0));
            continue;
          }
          const Real* src = x + ci * plane + sy * w;
          for (std::int64_t xo = 0; xo < ow; ++xo) {
            const std::int64_t sx = xo * stride + kj - pad;
            out[y * ow + xo] = (sx >= 0 && sx < w) ? src[sx] : Real(0);
          }
        }
      }
    }
  }
}

// Scatters a column matrix back into an image, accumulating overlaps.
template <typename Real>
void col2im_add(const Real* col, std::int64_t c, std::int64_t h, std::int64_t w, int k, int stride,
                int pad, std::int64_t oh, std::int64_t ow, Real* x) {
  const std::int64_t plane = h * w, opix = oh * ow;
  std::int64_t row = 0;
  for (std::int64_t ci = 0; ci < c; ++ci) {
    for (int ki = 0; ki < k; ++ki) {
      for (int kj = 0; kj < k; ++kj, ++row) {
        const Real* src = col + row * opix;
        for (std::int64_t y = 0; y < oh; ++y) {
          const std::int64_t sy = y * stride + ki - pad;
          if (sy < 0 || sy >= h) continue;
          Real* dst = x + ci * plane + sy * w;
          for (std::int64_t xo = 0; xo < ow; ++xo) {
            const std::int64_t sx = xo * stride + kj - pad;
            if (sx >= 0 && sx < w) dst[sx] += src[y * ow + xo];
          }
        }
      }
    }
  }
}

// C = A(MxK) * B(KxP), accumulating into C when accumulate is true. The i-k-j
// order keeps the inner loop contiguous over both B and C.
template <typename Real>
void gemm(const Real* a, const Real* b, Real* c, std::int64_t m, std::int64_t k, std::int64_t p,
          bool accumulate = false) {
  if (!accumulate) std::fill(c, c + m * p, Real(0));
  for (std::int64_t i = 0; i < m; ++i) {
    const Real* arow = a + i * k;
    Real* crow = c + i * p;
    for (std::int64_t kk = 0; kk < k; ++kk) {
      const Real av = arow[kk];
      if (av == Real(0)) continue;
      const Real* brow = b + kk * p;
      for (std::int64_t j = 0; j < p; ++j) crow[j] += av * brow[j];
    }
  }
}

// ---- forward/backward ------------------------------------------------------

// Per-pass BN behaviour. The mode applies to every BN layer of the model;
// fixed blend weights can be uniform or given per BN layer (network order).
// When transformed affine pairs are installed (see adapt.hpp) callers switch
// the pass to kTestBatch, matching the transformation's contract.
struct BnPassConfig {
  BnMode mode = BnMode::kSource;
  double fixed_alpha = 0.0;               // used by kMixFixed when per-layer empty
  std::vector<double> per_layer_alpha;    // optional, one entry per BN layer
  bool update_running = false;            // training only
  double momentum = 0.1;                  // running <- (1-m)*running + m*batch
};

template <typename Real>
struct ForwardCache {
  bool live = false;
  std::vector<Tensor<Real>> acts;  // acts[0] = input, acts[i+1] = output of layer i
  std::vector<BnCache<Real>> bn;   // per BN layer, network order
  std::vector<ChannelStats<Real>> bn_batch_stats;  // batch stats per BN layer
  std::vector<AlphaRecord> alpha_records;          // one per BN layer
};

namespace detail {

template <typename Real>
void conv_forward(const LayerSpec& l, const Tensor<Real>& x, const Tensor<Real>& w,
                  Tensor<Real>& y, std::vector<Real>& col) {
  const std::int64_t n = x.dim(0), h = x.dim(2), wd = x.dim(3);
  if (x.dim(1) != l.in_ch) {
    throw std::invalid_argument("conv '" + l.name + "': input has " + std::to_string(x.dim(1)) +
                                " channels, expected " + std::to_string(l.in_ch));
  }
  const std::int64_t oh = conv_out_dim(h, l.ksize, l.stride, l.pad);
  const std::int64_t ow = conv_out_dim(wd, l.ksize, l.stride, l.pad);
  if (oh <= 0 || ow <= 0) {
    throw std::invalid_argument("conv '" + l.name + "': input " + shape_to_string(x.shape) +
                                " too small for kernel");
  }
  const std::int64_t kdim = static_cast<std::int64_t>(l.in_ch) * l.ksize * l.ksize;
  const std::int64_t opix = oh * ow;
  y = Tensor<Real>({n, l.out_ch, oh, ow});
  col.resize(static_cast<std::size_t>(kdim * opix));
  for (std::int64_t i = 0; i < n; ++i) {
    im2col(&x.data[i * l.in_ch * h * wd], l.in_ch, h, wd, l.ksize, l.stride, l.pad, oh, ow,
           col.data());
    gemm(w.data.data(), col.data(), &y.data[i * l.out_ch * opix], l.out_ch, kdim, opix);
  }
}

// dW += dY * col^T and dX = W^T * dY folded back through col2im.
template <typename Real>
void conv_backward(const LayerSpec& l, const Tensor<Real>& x, const Tensor<Real>& w,
                   const Tensor<Real>& dy, Tensor<Real>* dx, Tensor<Real>* dw,
                   std::vector<Real>& col, std::vector<Real>& dcol) {
  const std::int64_t n = x.dim(0), h = x.dim(2), wd = x.dim(3);
  const std::int64_t oh = dy.dim(2), ow = dy.dim(3);
  const std::int64_t kdim = static_cast<std::int64_t>(l.in_ch) * l.ksize * l.ksize;
  const std::int64_t opix = oh * ow;
  col.resize(static_cast<std::size_t>(kdim * opix));
  if (dx) {
    *dx = Tensor<Real>(x.shape);
    dcol.resize(static_cast<std::size_t>(kdim * opix));
  }
  if (dw) *dw = Tensor<Real>(w.shape);
  for (std::int64_t i = 0; i < n; ++i) {
    const Real* pdy = &dy.data[i * l.out_ch * opix];
    if (dw) {
      im2col(&x.data[i * l.in_ch * h * wd], l.in_ch, h, wd, l.ksize, l.stride, l.pad, oh, ow,
             col.data());
      // dW[co][k] += sum_p dy[co][p] * col[k][p]
      for (std::int64_t co = 0; co < l.out_ch; ++co) {
        const Real* dyrow = pdy + co * opix;
        Real* dwrow = &dw->data[co * kdim];
        for (std::int64_t kk = 0; kk < kdim; ++kk) {
          const Real* crow = col.data() + kk * opix;
          Real acc = 0;
          for (std::int64_t p = 0; p < opix; ++p) acc += dyrow[p] * crow[p];
          dwrow[kk] += acc;
        }
      }
    }
    if (dx) {
      // dcol[k][p] = sum_co w[co][k] * dy[co][p]
      std::fill(dcol.begin(), dcol.end(), Real(0));
      for (std::int64_t co = 0; co < l.out_ch; ++co) {
        const Real* wrow = &w.data[co * kdim];
        const Real* dyrow = pdy + co * opix;
        for (std::int64_t kk = 0; kk < kdim; ++kk) {
          const Real wv = wrow[kk];
          if (wv == Real(0)) continue;
          Real* drow = dcol.data() + kk * opix;
          for (std::int64_t p = 0; p < opix; ++p) drow[p] += wv * dyrow[p];
        }
      }
      col2im_add(dcol.data(), l.in_ch, h, wd, l.ksize, l.stride, l.pad, oh, ow,
                 &dx->data[i * l.in_ch * h * wd]);
    }
  }
}

}  // namespace detail

// Full forward pass. The cache, when provided, keeps every activation plus
// per-BN-layer batch statistics and blend diagnostics for backward and for
// the affine transformation. Throws on shape mismatches; BN layers in any
// batch-statistics mode require a live spatial extent.
template <typename Real>
Tensor<Real> forward(Model<Real>& model, const Tensor<Real>& x, const BnPassConfig& bn_cfg,
                     ForwardCache<Real>* cache = nullptr) {
  require_rank(x, 4, "forward");
  if (!bn_cfg.per_layer_alpha.empty() &&
      static_cast<int>(bn_cfg.per_layer_alpha.size()) != model.bn_count()) {
    throw std::invalid_argument("forward: per_layer_alpha has " +
                                std::to_string(bn_cfg.per_layer_alpha.size()) + " entries for " +
                                std::to_string(model.bn_count()) + " BN layers");
  }
  if (cache) {
    cache->live = true;
    cache->acts.clear();
    cache->bn.clear();
    cache->bn_batch_stats.clear();
    cache->alpha_records.clear();
    cache->acts.push_back(x);
  }
  Tensor<Real> cur = x;
  std::vector<Real> col;  // conv scratch, reused across layers
  int bn_index = 0;
  for (const LayerSpec& l : model.layers) {
    Tensor<Real> next;
    switch (l.kind) {
      case LayerKind::kConv2d: {
        detail::conv_forward(l, cur, model.params.at(l.name + ".weight"), next, col);
        break;
      }
      case LayerKind::kBatchNorm2d: {
        require_rank(cur, 4, "batchnorm input");
        if (cur.dim(1) != l.channels) {
          throw std::invalid_argument("bn '" + l.name + "': input has " +
                                      std::to_string(cur.dim(1)) + " channels, expected " +
                                      std::to_string(l.channels));
        }
        const std::vector<Real>& gamma = model.params.at(l.name + ".gamma").data;
        const std::vector<Real>& beta = model.params.at(l.name + ".beta").data;
        Tensor<Real>& rmean = model.buffers.at(l.name + ".running_mean");
        Tensor<Real>& rvar = model.buffers.at(l.name + ".running_var");
        ChannelStats<Real> source;
        source.mean = rmean.data;
        source.var = rvar.data;

        const bool needs_batch = bn_cfg.mode != BnMode::kSource || bn_cfg.update_running;
        ChannelStats<Real> test;
        AlphaRecord rec;
        rec.layer_index = bn_index;
        Real alpha = Real(1);
        if (needs_batch) {
          test = batch_stats(cur);
          switch (bn_cfg.mode) {
            case BnMode::kSource:
              alpha = Real(1);
              rec.alpha = 1.0;
              break;
            case BnMode::kTestBatch:
              alpha = Real(0);
              rec.alpha = 0.0;
              break;
            case BnMode::kMixFixed: {
              const double a = bn_cfg.per_layer_alpha.empty()
                                   ? bn_cfg.fixed_alpha
                                   : bn_cfg.per_layer_alpha[bn_index];
              if (!(a >= 0.0 && a <= 1.0)) {
                throw std::invalid_argument("bn '" + l.name + "': fixed alpha " +
                                            std::to_string(a) + " outside [0,1]");
              }
              alpha = static_cast<Real>(a);
              rec.alpha = a;
              break;
            }
            case BnMode::kAdaptive: {
              rec = compute_alpha(source, test, per_image_stats(cur), model.bn_eps);
              rec.layer_index = bn_index;
              alpha = static_cast<Real>(rec.alpha);
              break;
            }
          }
        } else {
          rec.alpha = 1.0;
          test = source;  // unused by the blend at alpha = 1, kept well formed
        }

        BnCache<Real> local;
        mixbn_forward(cur, source, test, gamma, beta, alpha, model.bn_eps, next,
                      cache ? &local : nullptr);

        if (bn_cfg.update_running) {
          const Real m = static_cast<Real>(bn_cfg.momentum);
          for (std::int64_t c = 0; c < test.channels(); ++c) {
            rmean.data[c] = (Real(1) - m) * rmean.data[c] + m * test.mean[c];
            rvar.data[c] = (Real(1) - m) * rvar.data[c] + m * test.var[c];
          }
        }
        if (cache) {
          cache->bn.push_back(std::move(local));
          cache->bn_batch_stats.push_back(std::move(test));
          cache->alpha_records.push_back(rec);
        }
        ++bn_index;
        break;
      }
      case LayerKind::kRelu: {
        next = cur;
        for (Real& v : next.data) v = v > Real(0) ? v : Real(0);
        break;
      }
      case LayerKind::kGlobalAvgPool: {
        require_rank(cur, 4, "pool input");
        const std::int64_t n = cur.dim(0), c = cur.dim(1), hw = cur.dim(2) * cur.dim(3);
        if (hw <= 0) throw std::invalid_argument("pool '" + l.name + "': empty spatial extent");
        next = Tensor<Real>({n, c});
        const Real inv = Real(1) / static_cast<Real>(hw);
        for (std::int64_t i = 0; i < n; ++i) {
          for (std::int64_t ch = 0; ch < c; ++ch) {
            const Real* p = &cur.data[(i * c + ch) * hw];
            Real acc = 0;
            for (std::int64_t k = 0; k < hw; ++k) acc += p[k];
            next.at2(i, ch) = acc * inv;
          }
        }
        break;
      }
      case LayerKind::kLinear: {
        require_rank(cur, 2, "linear input");
        if (cur.dim(1) != l.in_features) {
          throw std::invalid_argument("linear '" + l.name + "': input has " +
                                      std::to_string(cur.dim(1)) + " features, expected " +
                                      std::to_string(l.in_features));
        }
        const Tensor<Real>& w = model.params.at(l.name + ".weight");
        const Tensor<Real>& b = model.params.at(l.name + ".bias");
        const std::int64_t n = cur.dim(0);
        next = Tensor<Real>({n, l.out_features});
        for (std::int64_t i = 0; i < n; ++i) {
          const Real* xi = cur.row2(i);
          Real* yi = next.row2(i);
          for (int o = 0; o < l.out_features; ++o) {
            const Real* wo = &w.data[static_cast<std::int64_t>(o) * l.in_features];
            Real acc = b.data[o];
            for (int k = 0; k < l.in_features; ++k) acc += xi[k] * wo[k];
            yi[o] = acc;
          }
        }
        break;
      }
    }
    cur = std::move(next);
    if (cache) cache->acts.push_back(cur);
  }
  return cur;
}

template <typename Real>
using GradMap = std::map<std::string, std::vector<Real>>;

// Backward pass from a gradient on the network output. Gradients are
// produced only for parameter names in 'trainable'; the activation chain is
// followed just deep enough to reach the earliest trainable layer, so a
// BN-affine-only backward never touches the first convolution's input.
template <typename Real>
GradMap<Real> backward(const Model<Real>& model, const ForwardCache<Real>& cache,
                       const Tensor<Real>& out_grad, const std::set<std::string>& trainable) {
  if (!cache.live) throw std::logic_error("backward: no cached forward pass");
  if (cache.acts.size() != model.layers.size() + 1) {
    throw std::logic_error("backward: cache does not match model layer count");
  }
  for (const std::string& name : trainable) {
    if (!model.params.count(name)) {
      throw std::invalid_argument("backward: unknown trainable parameter '" + name + "'");
    }
  }
  if (out_grad.shape != cache.acts.back().shape) {
    throw std::invalid_argument("backward: out_grad shape " + shape_to_string(out_grad.shape) +
                                " does not match output " +
                                shape_to_string(cache.acts.back().shape));
  }

  const int layer_count = static_cast<int>(model.layers.size());
  auto layer_is_trainable = [&](const LayerSpec& l) {
    switch (l.kind) {
      case LayerKind::kConv2d:
        return trainable.count(l.name + ".weight") > 0;
      case LayerKind::kBatchNorm2d:
        return trainable.count(l.name + ".gamma") > 0 || trainable.count(l.name + ".beta") > 0;
      case LayerKind::kLinear:
        return trainable.count(l.name + ".weight") > 0 || trainable.count(l.name + ".bias") > 0;
      default:
        return false;
    }
  };
  int stop = layer_count;  // earliest layer whose parameters are needed
  for (int i = 0; i < layer_count; ++i) {
    if (layer_is_trainable(model.layers[i])) {
      stop = i;
      break;
    }
  }

  GradMap<Real> grads;
  Tensor<Real> dy = out_grad;
  std::vector<Real> col, dcol;
  int bn_index = static_cast<int>(cache.bn.size());
  for (int i = layer_count - 1; i >= stop; --i) {
    const LayerSpec& l = model.layers[i];
    const Tensor<Real>& x = cache.acts[i];
    const bool need_dx = i > stop;
    Tensor<Real> dx;
    switch (l.kind) {
      case LayerKind::kConv2d: {
        const bool need_dw = trainable.count(l.name + ".weight") > 0;
        Tensor<Real> dw;
        detail::conv_backward(l, x, model.params.at(l.name + ".weight"), dy,
                              need_dx ? &dx : nullptr, need_dw ? &dw : nullptr, col, dcol);
        if (need_dw) grads.emplace(l.name + ".weight", std::move(dw.data));
        break;
      }
      case LayerKind::kBatchNorm2d: {
        --bn_index;
        std::vector<Real> dgamma, dbeta;
        const bool want_g = trainable.count(l.name + ".gamma") > 0;
        const bool want_b = trainable.count(l.name + ".beta") > 0;
        mixbn_backward(dy, cache.bn[bn_index], need_dx ? &dx : nullptr,
                       want_g ? &dgamma : nullptr, want_b ? &dbeta : nullptr);
        if (want_g) grads.emplace(l.name + ".gamma", std::move(dgamma));
        if (want_b) grads.emplace(l.name + ".beta", std::move(dbeta));
        break;
      }
      case LayerKind::kRelu: {
        if (need_dx) {
          dx = dy;
          const Tensor<Real>& y = cache.acts[i + 1];
          for (std::size_t k = 0; k < dx.data.size(); ++k) {
            if (!(y.data[k] > Real(0))) dx.data[k] = Real(0);
          }
        }
        break;
      }
      case LayerKind::kGlobalAvgPool: {
        if (need_dx) {
          const std::int64_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
          dx = Tensor<Real>(x.shape);
          const Real inv = Real(1) / static_cast<Real>(hw);
          for (std::int64_t ii = 0; ii < n; ++ii) {
            for (std::int64_t ch = 0; ch < c; ++ch) {
              const Real g = dy.at2(ii, ch) * inv;
              Real* p = &dx.data[(ii * c + ch) * hw];
              std::fill(p, p + hw, g);
            }
          }
        }
        break;
      }
      case LayerKind::kLinear: {
        const Tensor<Real>& w = model.params.at(l.name + ".weight");
        const std::int64_t n = x.dim(0);
        if (trainable.count(l.name + ".weight")) {
          std::vector<Real> dw(w.data.size(), Real(0));
          for (std::int64_t ii = 0; ii < n; ++ii) {
            const Real* xi = x.row2(ii);
            const Real* gi = dy.row2(ii);
            for (int o = 0; o < l.out_features; ++o) {
              Real* dwo = dw.data() + static_cast<std::int64_t>(o) * l.in_features;
              const Real g = gi[o];
              for (int k = 0; k < l.in_features; ++k) dwo[k] += g * xi[k];
            }
          }
          grads.emplace(l.name + ".weight", std::move(dw));
        }
        if (trainable.count(l.name + ".bias")) {
          std::vector<Real> db(static_cast<std::size_t>(l.out_features), Real(0));
          for (std::int64_t ii = 0; ii < n; ++ii) {
            const Real* gi = dy.row2(ii);
            for (int o = 0; o < l.out_features; ++o) db[o] += gi[o];
          }
          grads.emplace(l.name + ".bias", std::move(db));
        }
        if (need_dx) {
          dx = Tensor<Real>(x.shape);
          for (std::int64_t ii = 0; ii < n; ++ii) {
            const Real* gi = dy.row2(ii);
            Real* dxi = dx.row2(ii);
            for (int o = 0; o < l.out_features; ++o) {
              const Real g = gi[o];
              const Real* wo = &w.data[static_cast<std::int64_t>(o) * l.in_features];
              for (int k = 0; k < l.in_features; ++k) dxi[k] += g * wo[k];
            }
          }
        }
        break;
      }
    }
    if (need_dx) dy = std::move(dx);
  }
  return grads;
}

// ---- parameter snapshots and the optimizer step ----------------------------

template <typename Real>
struct ParamSnapshot {
  std::string arch;
  std::map<std::string, std::vector<Real>> params;
  std::map<std::string, std::vector<Real>> buffers;
};

template <typename Real>
ParamSnapshot<Real> snapshot(const Model<Real>& model) {
  ParamSnapshot<Real> s;
  s.arch = model.arch();
  for (const auto& [name, t] : model.params) s.params.emplace(name, t.data);
  for (const auto& [name, t] : model.buffers) s.buffers.emplace(name, t.data);
  return s;
}

template <typename Real>
void restore(Model<Real>& model, const ParamSnapshot<Real>& s) {
  if (s.arch != model.arch()) {
    throw std::invalid_argument("restore: snapshot architecture '" + s.arch +
                                "' does not match model '" + model.arch() + "'");
  }
  for (auto& [name, t] : model.params) t.data = s.params.at(name);
  for (auto& [name, t] : model.buffers) t.data = s.buffers.at(name);
}

template <typename Real>
bool snapshots_equal(const ParamSnapshot<Real>& a, const ParamSnapshot<Real>& b) {
  return a.arch == b.arch && a.params == b.params && a.buffers == b.buffers;
}

// Plain SGD: p -= lr * g for every named gradient. Unknown names throw.
template <typename Real>
void sgd_step(Model<Real>& model, const GradMap<Real>& grads, Real lr) {
  for (const auto& [name, g] : grads) {
    auto it = model.params.find(name);
    if (it == model.params.end()) {
      throw std::invalid_argument("sgd_step: unknown parameter '" + name + "'");
    }
    Tensor<Real>& p = it->second;
    if (g.size() != p.data.size()) {
      throw std::invalid_argument("sgd_step: gradient size mismatch for '" + name + "'");
    }
    for (std::size_t i = 0; i < g.size(); ++i) p.data[i] -= lr * g[i];
  }
}

template <typename Real>
double grad_l2_norm(const GradMap<Real>& grads) {
  double acc = 0.0;
  for (const auto& [name, g] : grads) {
    for (Real v : g) acc += static_cast<double>(v) * static_cast<double>(v);
  }
  return std::sqrt(acc);
}

}  // namespace tta
