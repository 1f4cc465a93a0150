// Experiment driver. Five subcommands share one configuration pipeline: a
// JSON document (--config) plus dot-path overrides (--set, and the --seed and
// --out shortcuts) resolve into an ExperimentConfig whose hash, together with
// a UTC timestamp, names the run directory. Every run directory receives the
// fully resolved config for provenance. Progress goes to stderr; results are
// files. Exit codes: 0 success, 1 config error, 2 runtime or I/O failure,
// 3 verification failure.

#include <chrono>
#include <cstdint>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "tta/adapt.hpp"
#include "tta/bench.hpp"
#include "tta/checkpoint.hpp"
#include "tta/config.hpp"
#include "tta/dataset.hpp"
#include "tta/errors.hpp"
#include "tta/layers.hpp"
#include "tta/train.hpp"
#include "tta/verify.hpp"

namespace fs = std::filesystem;

namespace {

struct CliOptions {
  std::string config_path;
  std::vector<std::string> overrides;
  std::uint64_t seed = 0;
  bool seed_given = false;
  std::string out;
  bool out_given = false;
  int jobs = 1;
};

// Assembly order: config file (or an empty document), then --set overrides in
// command-line order, then the shortcuts, so the shortcuts always win.
tta::ExperimentConfig resolve_config(const CliOptions& opt) {
  tta::Json doc = opt.config_path.empty() ? tta::Json::object()
                                          : tta::load_config_document(opt.config_path);
  for (const std::string& assignment : opt.overrides) {
    tta::apply_override(doc, assignment);
  }
  if (opt.seed_given) doc["seed"] = opt.seed;
  if (opt.out_given) doc["out"] = opt.out;
  tta::ExperimentConfig cfg = tta::config_from_json(doc);
  cfg.validate();
  return cfg;
}

std::string utc_stamp() {
  const std::time_t now =
      std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y%m%d-%H%M%S", &tm);
  return buf;
}

// Creates <out>/<command>-<confighash>-<timestamp>/ (suffixed when two runs
// land in the same second) and echoes the resolved config into it.
fs::path make_run_dir(const tta::ExperimentConfig& cfg, const std::string& command) {
  const std::string base = command + "-" + tta::config_hash(cfg) + "-" + utc_stamp();
  fs::path dir = fs::path(cfg.out) / base;
  for (int n = 2; fs::exists(dir); ++n) {
    dir = fs::path(cfg.out) / (base + "-" + std::to_string(n));
  }
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw tta::IoError("cannot create run directory '" + dir.string() + "'");
  std::ofstream echo(dir / "config.json");
  if (!echo) throw tta::IoError("cannot write '" + (dir / "config.json").string() + "'");
  echo << tta::resolved_json(cfg).dump(2) << "\n";
  return dir;
}

std::ofstream open_out(const fs::path& path) {
  std::ofstream os(path);
  if (!os) throw tta::IoError("cannot write '" + path.string() + "'");
  return os;
}

fs::path domain_file(const tta::ExperimentConfig& cfg, const std::string& domain) {
  return fs::path(cfg.files.data_dir) / (domain + ".ttac");
}

bool has_domain(const tta::ExperimentConfig& cfg, const std::string& name) {
  for (const tta::DomainSpec& d : cfg.dataset.domains) {
    if (d.name == name) return true;
  }
  return false;
}

// "" selects the training holdout, "all" every configured domain, anything
// else must name a configured domain.
std::vector<std::string> resolve_domains(const tta::ExperimentConfig& cfg,
                                         const std::string& selector,
                                         const std::string& where) {
  if (selector == "all") {
    std::vector<std::string> names;
    for (const tta::DomainSpec& d : cfg.dataset.domains) names.push_back(d.name);
    return names;
  }
  const std::string name = selector.empty() ? cfg.train.holdout : selector;
  if (!has_domain(cfg, name)) {
    throw tta::ConfigError(where + ": domain '" + name + "' is not in the dataset config");
  }
  return {name};
}

int cmd_generate(const tta::ExperimentConfig& cfg, const fs::path& run_dir) {
  (void)run_dir;
  std::error_code ec;
  fs::create_directories(cfg.files.data_dir, ec);
  if (ec) throw tta::IoError("cannot create data directory '" + cfg.files.data_dir + "'");
  for (const tta::DomainSpec& d : cfg.dataset.domains) {
    const tta::DatasetSplit<double> split =
        tta::generate_domain<double>(d, cfg.dataset.per_domain_n, cfg.dataset_seed(), "train");
    const fs::path path = domain_file(cfg, d.name);
    tta::save_dataset(path.string(), split);
    std::cerr << "generate: domain '" << d.name << "' (" << split.size() << " samples) -> "
              << path.string() << "\n";
  }
  return 0;
}

int cmd_train(const tta::ExperimentConfig& cfg, const fs::path& run_dir) {
  std::vector<tta::DatasetSplit<double>> sources;
  if (!has_domain(cfg, cfg.train.holdout)) {
    throw tta::ConfigError("train: holdout '" + cfg.train.holdout +
                           "' is not in the dataset config");
  }
  for (const tta::DomainSpec& d : cfg.dataset.domains) {
    if (d.name == cfg.train.holdout) continue;
    sources.push_back(tta::load_dataset<double>(domain_file(cfg, d.name).string()));
  }
  if (sources.empty()) {
    throw tta::ConfigError("train: no source domains left after holding out '" +
                           cfg.train.holdout + "'");
  }

  tta::Model<double> model = tta::make_model<double>(
      tta::small_convnet(tta::kImageChannels, tta::kNumShapeClasses), cfg.model_seed());
  tta::TrainConfig tc = cfg.train.core;
  tc.seed = cfg.train_seed();
  const std::vector<tta::EpochLog> log = tta::train_baseline(model, sources, tc, &std::cerr);

  std::ofstream csv = open_out(run_dir / "train_log.csv");
  csv << "epoch,lr,train_loss,train_acc,val_acc\n";
  for (const tta::EpochLog& e : log) {
    char line[160];
    std::snprintf(line, sizeof(line), "%d,%.10g,%.10g,%.6f,%.6f", e.epoch, e.lr,
                  e.train_loss, e.train_acc, e.val_acc);
    csv << line << "\n";
  }
  tta::save_model(cfg.files.checkpoint, model);
  std::cerr << "train: checkpoint -> " << cfg.files.checkpoint << "\n";
  return 0;
}

int cmd_adapt(const tta::ExperimentConfig& cfg, const fs::path& run_dir) {
  const tta::Model<double> model = tta::load_model<double>(cfg.files.checkpoint);
  const std::vector<std::string> bn_names = model.bn_names();

  std::vector<tta::AdaptMethod> methods;
  if (cfg.adapt.method == "all") {
    methods = tta::all_adapt_methods();
  } else {
    methods.push_back(tta::adapt_method_from_name(cfg.adapt.method));
  }

  std::ofstream summary = open_out(run_dir / "adapt_summary.csv");
  summary << "domain,method,seed,batches,samples,acc_pre,acc_post\n";

  for (const std::string& name : resolve_domains(cfg, cfg.adapt.domain, "adapt")) {
    const tta::DatasetSplit<double> split =
        tta::load_dataset<double>(domain_file(cfg, name).string());
    std::ofstream csv =
        open_out(run_dir / ("adapt_" + name + "_" + std::to_string(cfg.seed) + ".csv"));
    bool first = true;
    for (tta::AdaptMethod m : methods) {
      tta::AdaptConfig ac = cfg.adapt.core;
      ac.method = m;
      ac.seed = cfg.seed;
      if (m == tta::AdaptMethod::kMixFixed && !ac.fixed_alpha) {
        ac.fixed_alpha = 0.5;  // the fixed-mixture leg of "all" needs a coefficient
      }
      ac.validate();
      const tta::AdaptReport report =
          tta::evaluate(model, split, ac, cfg.adapt.batch_size, "adapt:" + name);
      tta::write_report_csv(csv, report, bn_names, first);
      first = false;

      std::int64_t samples = 0;
      for (const tta::BatchReportEntry& e : report.entries) samples += e.batch_size;
      char line[256];
      std::snprintf(line, sizeof(line), "%s,%s,%llu,%zu,%lld,%.6f,%.6f", name.c_str(),
                    tta::adapt_method_name(m),
                    static_cast<unsigned long long>(cfg.seed), report.entries.size(),
                    static_cast<long long>(samples), report.mean_accuracy(false),
                    report.mean_accuracy(true));
      summary << line << "\n";
      std::cerr << "adapt: " << name << " / " << tta::adapt_method_name(m) << "  acc "
                << report.mean_accuracy(false) << " -> " << report.mean_accuracy(true)
                << "\n";
    }
  }
  return 0;
}

int cmd_sweep(const tta::ExperimentConfig& cfg, const fs::path& run_dir, int jobs) {
  const tta::Model<double> model = tta::load_model<double>(cfg.files.checkpoint);
  const std::vector<std::string> domains = resolve_domains(cfg, cfg.sweep.domain, "sweep");
  std::vector<tta::DatasetSplit<double>> splits;
  splits.reserve(domains.size());
  for (const std::string& d : domains) {
    splits.push_back(tta::load_dataset<double>(domain_file(cfg, d).string()));
  }

  const tta::SweepSpec spec = cfg.sweep.to_spec(cfg.adapt.core);
  const tta::SweepResult result = tta::run_sweep(model, splits, spec, jobs, &std::cerr);
  const std::vector<std::string> bn_names = model.bn_names();

  for (const std::string& domain : domains) {
    for (std::uint64_t seed : spec.seeds) {
      std::ofstream csv = open_out(
          run_dir / (result.sweep + "_" + domain + "_" + std::to_string(seed) + ".csv"));
      tta::write_sweep_seed_csv(csv, result, domain, seed, bn_names);
    }
  }
  std::ofstream summary = open_out(run_dir / (result.sweep + "_summary.csv"));
  tta::write_sweep_summary_csv(summary, tta::summarize_sweep(result));
  std::cerr << "sweep: reports -> " << run_dir.string() << "\n";
  return 0;
}

int cmd_verify(const fs::path& run_dir) {
  const std::vector<tta::VerifyResult> results = tta::run_verification(&std::cerr);
  std::ofstream report = open_out(run_dir / "verify_report.txt");
  int failed = 0;
  for (const tta::VerifyResult& r : results) {
    char line[640];
    std::snprintf(line, sizeof(line), "%-20s %s  %6.2f s  %s\n", r.suite.c_str(),
                  r.pass ? "pass" : "FAIL", r.seconds, r.detail.c_str());
    report << line;
    failed += r.pass ? 0 : 1;
  }
  report << (failed == 0 ? "verified" : "failed") << ": "
         << (results.size() - static_cast<std::size_t>(failed)) << "/" << results.size()
         << " suites\n";
  if (failed > 0) {
    std::cerr << "error: verification: " << failed << " suite(s) failed\n";
    return 3;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"test-time adaptation experiments on a synthetic multi-domain benchmark"};
  app.require_subcommand(1);

  CliOptions opt;
  app.add_option("--config", opt.config_path, "JSON config file");
  CLI::Option* set_opt =
      app.add_option("--set", opt.overrides, "override, section.key=value (repeatable)");
  set_opt->type_size(1);
  CLI::Option* seed_opt =
      app.add_option("--seed", opt.seed, "root seed (shortcut for --set seed=N)");
  CLI::Option* out_opt =
      app.add_option("--out", opt.out, "output root (shortcut for --set out=DIR)");
  app.add_option("--jobs", opt.jobs, "worker threads for sweeps")
      ->check(CLI::PositiveNumber);

  CLI::App* c_generate =
      app.add_subcommand("generate", "render the benchmark domains to dataset files");
  CLI::App* c_train =
      app.add_subcommand("train", "train the source baseline and write the checkpoint");
  CLI::App* c_adapt =
      app.add_subcommand("adapt", "adapt at test time and write per-batch reports");
  CLI::App* c_sweep =
      app.add_subcommand("sweep", "grid sweeps aggregated as mean/std over seeds");
  CLI::App* c_verify = app.add_subcommand("verify", "run the property suites");
  for (CLI::App* sub : {c_generate, c_train, c_adapt, c_sweep, c_verify}) {
    sub->fallthrough();
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: config: " << e.what() << "\n";
    return 1;
  }
  opt.seed_given = seed_opt->count() > 0;
  opt.out_given = out_opt->count() > 0;

  try {
    const tta::ExperimentConfig cfg = resolve_config(opt);
    const std::string command = app.get_subcommands().front()->get_name();
    const fs::path run_dir = make_run_dir(cfg, command);
    std::cerr << command << ": run directory " << run_dir.string() << "\n";
    if (command == "generate") return cmd_generate(cfg, run_dir);
    if (command == "train") return cmd_train(cfg, run_dir);
    if (command == "adapt") return cmd_adapt(cfg, run_dir);
    if (command == "sweep") return cmd_sweep(cfg, run_dir, opt.jobs);
    return cmd_verify(run_dir);
  } catch (const tta::ConfigError& e) {
    std::cerr << "error: config: " << e.what() << "\n";
    return 1;
  } catch (const tta::IoError& e) {
    std::cerr << "error: io: " << e.what() << "\n";
    return 2;
  } catch (const tta::NumericError& e) {
    std::cerr << "error: numeric: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: runtime: " << e.what() << "\n";
    return 2;
  }
}
