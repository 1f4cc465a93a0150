#pragma once

// Synthetic multi-domain shape benchmark. Every image shows one filled shape
// (circle, square, triangle, cross, star) at a random position, scale, and
// rotation over a plain background, with foreground and background colors
// drawn from disjoint intensity bands so the shape is always visible. A
// domain is an appearance transform applied on top: hue rotation, brightness
// and contrast shifts, additive noise, or an edge sketch that binarizes the
// image to outlines. Generation is a pure function of (dataset seed, domain
// seed, sample index), so datasets are reproducible sample by sample.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "tta/errors.hpp"
#include "tta/rng.hpp"
#include "tta/tensor.hpp"

namespace tta {

inline constexpr int kImageSide = 32;
inline constexpr int kImageChannels = 3;
inline constexpr int kNumShapeClasses = 5;

inline const char* shape_class_name(int label) {
  switch (label) {
    case 0: return "circle";
    case 1: return "square";
    case 2: return "triangle";
    case 3: return "cross";
    case 4: return "star";
  }
  return "unknown";
}

// Appearance transform parameters of one domain. The identity domain keeps
// every field at its default. Values are applied in the order: hue rotation,
// contrast, brightness, noise, then the optional edge sketch.
struct DomainSpec {
  std::string name = "identity";
  double hue_rotation = 0.0;  // radians around the grey axis of RGB space
  double contrast = 1.0;      // scale around mid-grey
  double brightness = 0.0;    // additive offset
  double noise_sigma = 0.0;   // additive gaussian noise, clamped afterwards
  bool edge_sketch = false;   // binarize to shape outlines
  std::uint64_t seed = 0;     // per-domain stream component

  void validate() const {
    if (name.empty()) throw ConfigError("domain: name must not be empty");
    if (!(contrast > 0.0)) throw ConfigError("domain '" + name + "': contrast must be > 0");
    if (!(noise_sigma >= 0.0)) throw ConfigError("domain '" + name + "': noise_sigma must be >= 0");
    if (!std::isfinite(hue_rotation) || !std::isfinite(brightness)) {
      throw ConfigError("domain '" + name + "': parameters must be finite");
    }
  }
};

template <typename Real>
struct DatasetSplit {
  Tensor<Real> images;  // N x 3 x 32 x 32 in [0, 1]
  std::vector<int> labels;
  std::string domain;
  std::string role;  // "train" or "test"

  std::int64_t size() const { return static_cast<std::int64_t>(labels.size()); }
};

namespace detail {

struct Vec2 {
  double x = 0.0, y = 0.0;
};

// Even-odd ray casting; the polygon is closed implicitly.
inline bool point_in_polygon(const std::vector<Vec2>& poly, double px, double py) {
  bool inside = false;
  for (std::size_t i = 0, j = poly.size() - 1; i < poly.size(); j = i++) {
    const bool crosses = (poly[i].y > py) != (poly[j].y > py);
    if (!crosses) continue;
    const double t = (py - poly[i].y) / (poly[j].y - poly[i].y);
    const double xint = poly[i].x + t * (poly[j].x - poly[i].x);
    if (px < xint) inside = !inside;
  }
  return inside;
}

inline std::vector<Vec2> regular_polygon(int sides, double radius, double phase) {
  std::vector<Vec2> poly(static_cast<std::size_t>(sides));
  for (int i = 0; i < sides; ++i) {
    const double a = phase + 2.0 * M_PI * static_cast<double>(i) / static_cast<double>(sides);
    poly[static_cast<std::size_t>(i)] = {radius * std::cos(a), radius * std::sin(a)};
  }
  return poly;
}

inline std::vector<Vec2> star_polygon(double outer, double inner) {
  std::vector<Vec2> poly(10);
  for (int i = 0; i < 10; ++i) {
    const double r = (i % 2 == 0) ? outer : inner;
    const double a = -M_PI / 2.0 + M_PI * static_cast<double>(i) / 5.0;
    poly[static_cast<std::size_t>(i)] = {r * std::cos(a), r * std::sin(a)};
  }
  return poly;
}

// Membership test in the shape's local frame, where the shape has unit scale.
inline bool point_in_shape(int label, const std::vector<Vec2>& poly, double u, double v) {
  switch (label) {
    case 0: return u * u + v * v <= 1.0;
    case 1: return std::fabs(u) <= 0.82 && std::fabs(v) <= 0.82;
    case 3: return (std::fabs(u) <= 0.32 && std::fabs(v) <= 1.0) ||
                   (std::fabs(v) <= 0.32 && std::fabs(u) <= 1.0);
    default: return point_in_polygon(poly, u, v);
  }
}

inline double clamp01(double v) { return v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v); }

// Rotation of RGB about the grey axis (Rodrigues form on the unit diagonal).
struct HueMatrix {
  double m[3][3];
  explicit HueMatrix(double angle) {
    const double c = std::cos(angle), s = std::sin(angle);
    const double k = 1.0 / 3.0, r = 1.0 / std::sqrt(3.0);
    for (int i = 0; i < 3; ++i) {
      for (int j = 0; j < 3; ++j) {
        const double eye = i == j ? 1.0 : 0.0;
        // cross-product matrix of the unit grey axis has entries +-1/sqrt(3)
        const int lev = (j - i + 3) % 3 == 1 ? -1 : ((j - i + 3) % 3 == 2 ? 1 : 0);
        m[i][j] = c * eye + (1.0 - c) * k + s * r * static_cast<double>(lev);
      }
    }
  }
};

}  // namespace detail

// Renders the image for (label, sample stream) into out[3][32][32], values in
// [0, 1]. The stream drives geometry and colors; 2x2 supersampling smooths
// shape boundaries so small rotations stay visible at this resolution.
template <typename Real>
void render_shape_image(int label, Rng& rng, Real* out) {
  const int side = kImageSide;
  // base intensities live in disjoint bands so contrast is guaranteed on
  // every channel; the per-channel jitter adds color variety without letting
  // color correlate with the class
  const double bg_base = rng.uniform(0.10, 0.38);
  const double fg_base = rng.uniform(0.62, 0.90);
  double bg[3], fg[3];
  for (double& v : bg) v = bg_base + rng.uniform(-0.05, 0.05);
  for (double& v : fg) v = fg_base + rng.uniform(-0.08, 0.08);
  const double cx = rng.uniform(13.0, 19.0);
  const double cy = rng.uniform(13.0, 19.0);
  const double radius = rng.uniform(7.5, 11.0);
  const double theta = rng.uniform(-0.35, 0.35);
  const double ct = std::cos(theta), st = std::sin(theta);

  std::vector<detail::Vec2> poly;
  if (label == 2) poly = detail::regular_polygon(3, 1.1, -M_PI / 2.0);
  if (label == 4) poly = detail::star_polygon(1.15, 0.5);

  for (int y = 0; y < side; ++y) {
    for (int x = 0; x < side; ++x) {
      int hits = 0;
      for (int sy = 0; sy < 2; ++sy) {
        for (int sx = 0; sx < 2; ++sx) {
          const double px = static_cast<double>(x) + 0.25 + 0.5 * sx - cx;
          const double py = static_cast<double>(y) + 0.25 + 0.5 * sy - cy;
          const double u = (ct * px + st * py) / radius;
          const double v = (-st * px + ct * py) / radius;
          hits += detail::point_in_shape(label, poly, u, v) ? 1 : 0;
        }
      }
      const double cover = static_cast<double>(hits) / 4.0;
      for (int c = 0; c < 3; ++c) {
        out[(c * side + y) * side + x] =
            static_cast<Real>(bg[c] + (fg[c] - bg[c]) * cover);
      }
    }
  }
}

// Applies the domain appearance transform in place. The noise stream is the
// tail of the same per-sample stream that rendered the image.
template <typename Real>
void apply_domain_transform(const DomainSpec& spec, Rng& rng, Real* img) {
  const int side = kImageSide;
  const int plane = side * side;

  if (spec.hue_rotation != 0.0) {
    const detail::HueMatrix hm(spec.hue_rotation);
    for (int k = 0; k < plane; ++k) {
      const double r = static_cast<double>(img[k]);
      const double g = static_cast<double>(img[plane + k]);
      const double b = static_cast<double>(img[2 * plane + k]);
      img[k] = static_cast<Real>(detail::clamp01(hm.m[0][0] * r + hm.m[0][1] * g + hm.m[0][2] * b));
      img[plane + k] =
          static_cast<Real>(detail::clamp01(hm.m[1][0] * r + hm.m[1][1] * g + hm.m[1][2] * b));
      img[2 * plane + k] =
          static_cast<Real>(detail::clamp01(hm.m[2][0] * r + hm.m[2][1] * g + hm.m[2][2] * b));
    }
  }

  if (spec.contrast != 1.0 || spec.brightness != 0.0) {
    for (int k = 0; k < 3 * plane; ++k) {
      const double v = static_cast<double>(img[k]);
      img[k] = static_cast<Real>(
          detail::clamp01(spec.contrast * (v - 0.5) + 0.5 + spec.brightness));
    }
  }

  if (spec.noise_sigma > 0.0) {
    for (int k = 0; k < 3 * plane; ++k) {
      const double v = static_cast<double>(img[k]) + rng.normal(0.0, spec.noise_sigma);
      img[k] = static_cast<Real>(detail::clamp01(v));
    }
  }

  if (spec.edge_sketch) {
    std::vector<double> gray(static_cast<std::size_t>(plane));
    for (int k = 0; k < plane; ++k) {
      gray[static_cast<std::size_t>(k)] =
          (static_cast<double>(img[k]) + static_cast<double>(img[plane + k]) +
           static_cast<double>(img[2 * plane + k])) /
          3.0;
    }
    auto at = [&](int y, int x) {
      y = std::clamp(y, 0, side - 1);
      x = std::clamp(x, 0, side - 1);
      return gray[static_cast<std::size_t>(y * side + x)];
    };
    for (int y = 0; y < side; ++y) {
      for (int x = 0; x < side; ++x) {
        const double gx = (at(y - 1, x + 1) + 2.0 * at(y, x + 1) + at(y + 1, x + 1)) -
                          (at(y - 1, x - 1) + 2.0 * at(y, x - 1) + at(y + 1, x - 1));
        const double gy = (at(y + 1, x - 1) + 2.0 * at(y + 1, x) + at(y + 1, x + 1)) -
                          (at(y - 1, x - 1) + 2.0 * at(y - 1, x) + at(y - 1, x + 1));
        const double mag = std::sqrt(gx * gx + gy * gy);
        const Real v = mag > 0.35 ? Real(1) : Real(0);
        img[(0 * side + y) * side + x] = v;
        img[(1 * side + y) * side + x] = v;
        img[(2 * side + y) * side + x] = v;
      }
    }
  }
}

// One domain's split. Labels cycle through the classes, so counts are
// balanced within one image. Each sample owns an rng stream derived from
// (dataset seed, domain seed, index): samples are independent of their
// neighbours and of the total count.
template <typename Real>
DatasetSplit<Real> generate_domain(const DomainSpec& spec, std::int64_t per_domain_n,
                                   std::uint64_t dataset_seed, const std::string& role) {
  spec.validate();
  if (per_domain_n < 2 * kNumShapeClasses) {
    throw ConfigError("generate_domain: need at least " +
                      std::to_string(2 * kNumShapeClasses) + " samples per domain");
  }
  DatasetSplit<Real> split;
  split.domain = spec.name;
  split.role = role;
  split.images = Tensor<Real>({per_domain_n, kImageChannels, kImageSide, kImageSide});
  split.labels.resize(static_cast<std::size_t>(per_domain_n));
  const std::uint64_t domain_seed = derive_seed(dataset_seed, "domain", spec.seed);
  const std::int64_t stride = static_cast<std::int64_t>(kImageChannels) * kImageSide * kImageSide;
  for (std::int64_t i = 0; i < per_domain_n; ++i) {
    const int label = static_cast<int>(i % kNumShapeClasses);
    split.labels[static_cast<std::size_t>(i)] = label;
    Rng rng(derive_seed(domain_seed, "sample", static_cast<std::uint64_t>(i)));
    Real* img = split.images.data.data() + i * stride;
    render_shape_image(label, rng, img);
    apply_domain_transform(spec, rng, img);
  }
  return split;
}

// All domains of the benchmark, one split each, every domain drawing its own
// shape instances (domains differ in look, not in shared geometry).
template <typename Real>
std::vector<DatasetSplit<Real>> generate_dataset(const std::vector<DomainSpec>& domains,
                                                 std::int64_t per_domain_n,
                                                 std::uint64_t seed) {
  if (domains.empty()) throw ConfigError("generate_dataset: no domains given");
  std::vector<DatasetSplit<Real>> out;
  out.reserve(domains.size());
  for (const DomainSpec& d : domains) {
    out.push_back(generate_domain<Real>(d, per_domain_n, seed, "train"));
  }
  return out;
}

}  // namespace tta
