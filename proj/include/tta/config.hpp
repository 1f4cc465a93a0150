#pragma once

// Experiment configuration: one JSON document with dataset, train, adapt, and
// sweep sections. Parsing is strict -- an unknown key anywhere is an error,
// so a typo cannot silently fall back to a default -- and the fully resolved
// document (defaults applied) can be serialized back out for provenance. The
// config hash over that resolved form names run directories.

#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "tta/adapt.hpp"
#include "tta/bench.hpp"
#include "tta/dataset.hpp"
#include "tta/errors.hpp"
#include "tta/rng.hpp"
#include "tta/train.hpp"

namespace tta {

using Json = nlohmann::json;

// The committed benchmark: one plain domain, two calibrated appearance
// shifts, and the hard edge-sketch domain.
inline std::vector<DomainSpec> default_benchmark_domains() {
  std::vector<DomainSpec> out(4);
  out[0].name = "photo";
  out[0].seed = 1;
  out[1].name = "tint";
  out[1].hue_rotation = 2.1;
  out[1].contrast = 0.9;
  out[1].seed = 2;
  out[2].name = "wash";
  out[2].brightness = 0.28;
  out[2].contrast = 0.55;
  out[2].noise_sigma = 0.08;
  out[2].seed = 3;
  out[3].name = "sketch";
  out[3].edge_sketch = true;
  out[3].seed = 4;
  return out;
}

struct FilesConfig {
  std::string data_dir = "data";
  std::string checkpoint = "checkpoint.ttac";
};

struct DatasetConfig {
  std::int64_t per_domain_n = 2000;
  std::vector<DomainSpec> domains = default_benchmark_domains();

  void validate() const {
    if (domains.empty()) throw ConfigError("dataset: needs at least one domain");
    for (const DomainSpec& d : domains) d.validate();
    for (std::size_t i = 0; i < domains.size(); ++i) {
      for (std::size_t j = i + 1; j < domains.size(); ++j) {
        if (domains[i].name == domains[j].name) {
          throw ConfigError("dataset: duplicate domain name '" + domains[i].name + "'");
        }
      }
    }
    if (per_domain_n < 2 * kNumShapeClasses) {
      throw ConfigError("dataset: per_domain_n must be at least " +
                        std::to_string(2 * kNumShapeClasses));
    }
  }
};

struct TrainSection {
  TrainConfig core;
  std::string holdout = "sketch";  // domain excluded from the source pool
};

struct AdaptSection {
  AdaptConfig core;
  std::string method = "domainadaptor-T";  // a method name or "all"
  std::string domain;                      // a domain name, "" = holdout, or "all"
  int batch_size = 64;

  void validate() const {
    if (batch_size < 1) throw ConfigError("adapt: batch_size must be >= 1");
    if (method != "all") {
      AdaptConfig probe = core;
      probe.method = adapt_method_from_name(method);
      probe.validate();
    } else {
      core.validate();
    }
  }
};

struct SweepSection {
  std::string kind = "alpha";
  std::vector<double> grid;  // empty = the sweep's default grid
  std::vector<std::uint64_t> seeds = {0, 1, 2, 3, 4};
  int batch_size = 64;
  int degradation_steps = 4;
  double degradation_lr = 0.01;
  std::string domain;  // "" = holdout only, or a name, or "all"

  SweepSpec to_spec(const AdaptConfig& base) const {
    SweepSpec spec;
    spec.kind = sweep_kind_from_name(kind);
    spec.grid = grid;
    spec.seeds = seeds;
    spec.base = base;
    spec.batch_size = batch_size;
    spec.degradation_steps = degradation_steps;
    spec.degradation_lr = degradation_lr;
    spec.validate();
    return spec;
  }
};

struct ExperimentConfig {
  std::uint64_t seed = 0;
  std::string out = "runs";
  FilesConfig files;
  DatasetConfig dataset;
  TrainSection train;
  AdaptSection adapt;
  SweepSection sweep;

  void validate() const {
    dataset.validate();
    train.core.validate();
    adapt.validate();
    sweep.to_spec(AdaptConfig{});
  }

  // component seeds all derive from the root seed
  std::uint64_t dataset_seed() const { return derive_seed(seed, "dataset"); }
  std::uint64_t model_seed() const { return derive_seed(seed, "model"); }
  std::uint64_t train_seed() const { return derive_seed(seed, "train"); }
};

namespace detail {

inline void reject_unknown_keys(const Json& obj, const std::string& section,
                                std::initializer_list<const char*> known) {
  if (!obj.is_object()) {
    throw ConfigError("config: '" + section + "' must be a JSON object");
  }
  for (const auto& [key, value] : obj.items()) {
    bool ok = false;
    for (const char* k : known) ok |= key == k;
    if (!ok) {
      throw ConfigError("config: unknown key '" + key + "' in " + section);
    }
  }
}

template <typename T>
void read_field(const Json& obj, const char* key, T& into, const std::string& section) {
  if (!obj.contains(key)) return;
  try {
    into = obj.at(key).get<T>();
  } catch (const Json::exception& e) {
    throw ConfigError("config: bad value for '" + section + "." + key + "': " + e.what());
  }
}

}  // namespace detail

// ---- per-section json ----------------------------------------------------

inline Json to_json(const DomainSpec& d) {
  return Json{{"name", d.name},
              {"hue_rotation", d.hue_rotation},
              {"contrast", d.contrast},
              {"brightness", d.brightness},
              {"noise_sigma", d.noise_sigma},
              {"edge_sketch", d.edge_sketch},
              {"seed", d.seed}};
}

inline DomainSpec domain_from_json(const Json& j, const std::string& section) {
  detail::reject_unknown_keys(j, section,
                              {"name", "hue_rotation", "contrast", "brightness",
                               "noise_sigma", "edge_sketch", "seed"});
  DomainSpec d;
  detail::read_field(j, "name", d.name, section);
  detail::read_field(j, "hue_rotation", d.hue_rotation, section);
  detail::read_field(j, "contrast", d.contrast, section);
  detail::read_field(j, "brightness", d.brightness, section);
  detail::read_field(j, "noise_sigma", d.noise_sigma, section);
  detail::read_field(j, "edge_sketch", d.edge_sketch, section);
  detail::read_field(j, "seed", d.seed, section);
  return d;
}

inline Json resolved_json(const ExperimentConfig& cfg) {
  Json domains = Json::array();
  for (const DomainSpec& d : cfg.dataset.domains) domains.push_back(to_json(d));
  Json aug{{"scale_min", cfg.adapt.core.aug.scale_min},
           {"scale_max", cfg.adapt.core.aug.scale_max},
           {"flip_prob", cfg.adapt.core.aug.flip_prob}};
  Json adapt{{"method", cfg.adapt.method},
             {"mode", adapt_mode_name(cfg.adapt.core.mode)},
             {"lr", cfg.adapt.core.lr},
             {"steps", cfg.adapt.core.steps},
             {"confidence_threshold", cfg.adapt.core.confidence_threshold},
             {"gem_s", cfg.adapt.core.gem_s},
             {"gem_views", cfg.adapt.core.gem_views},
             {"transform", cfg.adapt.core.transform},
             {"batch_size", cfg.adapt.batch_size},
             {"domain", cfg.adapt.domain},
             {"aug", aug}};
  if (cfg.adapt.core.fixed_alpha) {
    adapt["fixed_alpha"] = *cfg.adapt.core.fixed_alpha;
  } else {
    adapt["fixed_alpha"] = nullptr;
  }
  return Json{
      {"seed", cfg.seed},
      {"out", cfg.out},
      {"files", {{"data_dir", cfg.files.data_dir}, {"checkpoint", cfg.files.checkpoint}}},
      {"dataset", {{"per_domain_n", cfg.dataset.per_domain_n}, {"domains", domains}}},
      {"train",
       {{"epochs", cfg.train.core.epochs},
        {"batch_size", cfg.train.core.batch_size},
        {"lr", cfg.train.core.lr},
        {"momentum", cfg.train.core.momentum},
        {"weight_decay", cfg.train.core.weight_decay},
        {"bn_momentum", cfg.train.core.bn_momentum},
        {"val_fraction", cfg.train.core.val_fraction},
        {"lr_decay", cfg.train.core.lr_decay},
        {"lr_decay_epoch", cfg.train.core.lr_decay_epoch},
        {"holdout", cfg.train.holdout}}},
      {"adapt", adapt},
      {"sweep",
       {{"kind", cfg.sweep.kind},
        {"grid", cfg.sweep.grid},
        {"seeds", cfg.sweep.seeds},
        {"batch_size", cfg.sweep.batch_size},
        {"degradation_steps", cfg.sweep.degradation_steps},
        {"degradation_lr", cfg.sweep.degradation_lr},
        {"domain", cfg.sweep.domain}}},
  };
}

inline ExperimentConfig config_from_json(const Json& j) {
  detail::reject_unknown_keys(
      j, "config", {"seed", "out", "files", "dataset", "train", "adapt", "sweep"});
  ExperimentConfig cfg;
  detail::read_field(j, "seed", cfg.seed, "config");
  detail::read_field(j, "out", cfg.out, "config");

  if (j.contains("files")) {
    const Json& f = j.at("files");
    detail::reject_unknown_keys(f, "files", {"data_dir", "checkpoint"});
    detail::read_field(f, "data_dir", cfg.files.data_dir, "files");
    detail::read_field(f, "checkpoint", cfg.files.checkpoint, "files");
  }

  if (j.contains("dataset")) {
    const Json& d = j.at("dataset");
    detail::reject_unknown_keys(d, "dataset", {"per_domain_n", "domains"});
    detail::read_field(d, "per_domain_n", cfg.dataset.per_domain_n, "dataset");
    if (d.contains("domains")) {
      if (!d.at("domains").is_array()) {
        throw ConfigError("config: dataset.domains must be an array");
      }
      cfg.dataset.domains.clear();
      for (const Json& spec : d.at("domains")) {
        cfg.dataset.domains.push_back(domain_from_json(spec, "dataset.domains[]"));
      }
    }
  }

  if (j.contains("train")) {
    const Json& t = j.at("train");
    detail::reject_unknown_keys(t, "train",
                                {"epochs", "batch_size", "lr", "momentum", "weight_decay",
                                 "bn_momentum", "val_fraction", "lr_decay",
                                 "lr_decay_epoch", "holdout"});
    detail::read_field(t, "epochs", cfg.train.core.epochs, "train");
    detail::read_field(t, "batch_size", cfg.train.core.batch_size, "train");
    detail::read_field(t, "lr", cfg.train.core.lr, "train");
    detail::read_field(t, "momentum", cfg.train.core.momentum, "train");
    detail::read_field(t, "weight_decay", cfg.train.core.weight_decay, "train");
    detail::read_field(t, "bn_momentum", cfg.train.core.bn_momentum, "train");
    detail::read_field(t, "val_fraction", cfg.train.core.val_fraction, "train");
    detail::read_field(t, "lr_decay", cfg.train.core.lr_decay, "train");
    detail::read_field(t, "lr_decay_epoch", cfg.train.core.lr_decay_epoch, "train");
    detail::read_field(t, "holdout", cfg.train.holdout, "train");
  }

  if (j.contains("adapt")) {
    const Json& a = j.at("adapt");
    detail::reject_unknown_keys(a, "adapt",
                                {"method", "mode", "lr", "steps", "confidence_threshold",
                                 "gem_s", "gem_views", "fixed_alpha", "transform",
                                 "batch_size", "domain", "aug"});
    detail::read_field(a, "method", cfg.adapt.method, "adapt");
    if (a.contains("mode")) {
      cfg.adapt.core.mode = adapt_mode_from_name(a.at("mode").get<std::string>());
    }
    detail::read_field(a, "lr", cfg.adapt.core.lr, "adapt");
    detail::read_field(a, "steps", cfg.adapt.core.steps, "adapt");
    detail::read_field(a, "confidence_threshold", cfg.adapt.core.confidence_threshold,
                       "adapt");
    detail::read_field(a, "gem_s", cfg.adapt.core.gem_s, "adapt");
    detail::read_field(a, "gem_views", cfg.adapt.core.gem_views, "adapt");
    if (a.contains("fixed_alpha")) {
      if (a.at("fixed_alpha").is_null()) {
        cfg.adapt.core.fixed_alpha.reset();
      } else {
        cfg.adapt.core.fixed_alpha = a.at("fixed_alpha").get<double>();
      }
    }
    detail::read_field(a, "transform", cfg.adapt.core.transform, "adapt");
    detail::read_field(a, "batch_size", cfg.adapt.batch_size, "adapt");
    detail::read_field(a, "domain", cfg.adapt.domain, "adapt");
    if (a.contains("aug")) {
      const Json& g = a.at("aug");
      detail::reject_unknown_keys(g, "adapt.aug", {"scale_min", "scale_max", "flip_prob"});
      detail::read_field(g, "scale_min", cfg.adapt.core.aug.scale_min, "adapt.aug");
      detail::read_field(g, "scale_max", cfg.adapt.core.aug.scale_max, "adapt.aug");
      detail::read_field(g, "flip_prob", cfg.adapt.core.aug.flip_prob, "adapt.aug");
    }
  }

  if (j.contains("sweep")) {
    const Json& s = j.at("sweep");
    detail::reject_unknown_keys(s, "sweep",
                                {"kind", "grid", "seeds", "batch_size",
                                 "degradation_steps", "degradation_lr", "domain"});
    detail::read_field(s, "kind", cfg.sweep.kind, "sweep");
    detail::read_field(s, "grid", cfg.sweep.grid, "sweep");
    detail::read_field(s, "seeds", cfg.sweep.seeds, "sweep");
    detail::read_field(s, "batch_size", cfg.sweep.batch_size, "sweep");
    detail::read_field(s, "degradation_steps", cfg.sweep.degradation_steps, "sweep");
    detail::read_field(s, "degradation_lr", cfg.sweep.degradation_lr, "sweep");
    detail::read_field(s, "domain", cfg.sweep.domain, "sweep");
  }
  return cfg;
}

// ---- overrides, files, hashing --------------------------------------------

// Applies one `section.key=value` override onto the raw document. The value
// is parsed as JSON when it is valid JSON (numbers, bools, arrays), and kept
// as a string otherwise, so `--set train.holdout=sketch` works unquoted.
inline void apply_override(Json& doc, const std::string& assignment) {
  const std::size_t eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw ConfigError("override '" + assignment + "' is not of the form key=value");
  }
  const std::string path = assignment.substr(0, eq);
  const std::string raw = assignment.substr(eq + 1);
  Json value;
  try {
    value = Json::parse(raw);
  } catch (const Json::exception&) {
    value = raw;  // plain string
  }
  Json* node = &doc;
  std::size_t start = 0;
  for (;;) {
    const std::size_t dot = path.find('.', start);
    const std::string key = path.substr(start, dot - start);
    if (key.empty()) throw ConfigError("override '" + assignment + "' has an empty key");
    if (dot == std::string::npos) {
      (*node)[key] = value;
      return;
    }
    node = &(*node)[key];
    start = dot + 1;
  }
}

inline Json load_config_document(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config file '" + path + "' cannot be opened");
  try {
    return Json::parse(in);
  } catch (const Json::exception& e) {
    throw ConfigError("config file '" + path + "': " + e.what());
  }
}

// FNV-1a over the canonical resolved serialization; names run directories.
inline std::string config_hash(const ExperimentConfig& cfg) {
  const std::string text = resolved_json(cfg).dump();
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 1099511628211ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return std::string(buf, 8);  // first 8 hex digits are plenty for run names
}

}  // namespace tta
