// mapu: source-free domain adaptation for time series via temporal masking
// and feature-space imputation. Subcommands: synth, pretrain, adapt, bench.

#include <atomic>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "mapu/config.hpp"
#include "mapu/data.hpp"
#include "mapu/eval.hpp"
#include "mapu/model.hpp"
#include "mapu/pipeline.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr const char* kToolVersion = "mapu 0.1.0";

constexpr int kExitOk = 0;
constexpr int kExitCellFailure = 1;
constexpr int kExitUsage = 2;
constexpr int kExitContract = 3;

struct CommonOpts {
  std::string config_path;
  bool f64 = false;
  bool checked = false;
  bool no_normalize = false;

  // Train settings; only values the user actually passed are applied on
  // top of config-file values (CLI > config > defaults).
  std::optional<int> epochs;
  std::optional<int> batch_size;
  std::optional<double> lr;
  std::optional<std::uint64_t> seed;
  std::optional<int> seeds;
  std::optional<double> alpha;
  std::optional<double> mask_ratio;
  std::optional<int> mask_blocks;
  std::optional<std::string> sfda;
};

void add_common(CLI::App* cmd, CommonOpts& o) {
  cmd->add_option("--config", o.config_path, "flat key=value config file");
  cmd->add_flag("--f64", o.f64, "run in 64-bit mode");
  cmd->add_flag("--checked", o.checked, "numeric-health (NaN/Inf) checks");
  cmd->add_flag("--no-normalize", o.no_normalize,
                "disable per-channel z-score normalization");
  cmd->add_option("--epochs", o.epochs, "training epochs");
  cmd->add_option("--batch-size", o.batch_size, "batch size");
  cmd->add_option("--lr", o.lr, "learning rate");
  cmd->add_option("--seed", o.seed, "base RNG seed");
  cmd->add_option("--seeds", o.seeds, "seeds per scenario");
  cmd->add_option("--alpha", o.alpha, "imputation loss weight");
  cmd->add_option("--mask-ratio", o.mask_ratio, "fraction of blocks masked");
  cmd->add_option("--mask-blocks", o.mask_blocks, "number of temporal blocks");
  cmd->add_option("--sfda", o.sfda, "base SFDA method: shot|none");
}

mapu::TrainConfig resolve_config(const CommonOpts& o) {
  mapu::TrainConfig cfg;
  if (!o.config_path.empty())
    mapu::apply_config(cfg, mapu::parse_config_file(o.config_path));
  if (o.epochs) cfg.epochs = *o.epochs;
  if (o.batch_size) cfg.batch_size = *o.batch_size;
  if (o.lr) cfg.lr = *o.lr;
  if (o.seed) cfg.seed = *o.seed;
  if (o.seeds) cfg.seeds_per_scenario = *o.seeds;
  if (o.alpha) cfg.weights.alpha = *o.alpha;
  if (o.mask_ratio) cfg.mask.mask_ratio = *o.mask_ratio;
  if (o.mask_blocks) cfg.mask.num_blocks = static_cast<std::size_t>(*o.mask_blocks);
  if (o.sfda) cfg.sfda = mapu::parse_sfda(*o.sfda);
  if (o.checked) cfg.checked = true;
  cfg.validate();
  return cfg;
}

// A run directory is never reused.
void prepare_run_dir(const fs::path& dir) {
  if (fs::exists(dir / "manifest.json"))
    throw mapu::config_error("run directory already used: " + dir.string());
  fs::create_directories(dir);
}

void write_manifest(const fs::path& dir, const std::string& command,
                    const mapu::TrainConfig& cfg,
                    const std::vector<std::uint64_t>& seed_list,
                    const std::vector<std::string>& artifacts,
                    bool f64) {
  json j;
  j["command"] = command;
  j["config"] = mapu::config_json(cfg);
  j["config"]["f64"] = f64;
  j["seeds"] = seed_list;
  j["artifacts"] = artifacts;
  j["tool_version"] = kToolVersion;
  const auto now = std::chrono::system_clock::now().time_since_epoch();
  j["started_at_unix_ms"] =
      std::chrono::duration_cast<std::chrono::milliseconds>(now).count();
  std::ofstream out(dir / "manifest.json");
  out << j.dump(2) << "\n";
  if (!out)
    throw mapu::io_error("cannot write " + (dir / "manifest.json").string());
}

void write_text(const fs::path& p, const std::string& s) {
  std::ofstream out(p);
  out << s;
  if (!out) throw mapu::io_error("cannot write " + p.string());
}

// ---- synth ----

struct SynthOpts {
  std::string out;
  int classes = 3;
  int n_per_class = 200;
  int length = 64;
  int channels = 1;
  std::string shift = "phase_shift";
  double magnitude = 1.5707963267948966;
  std::uint64_t seed = 0;
};

int run_synth(const SynthOpts& o) {
  mapu::ShiftSpec spec;
  spec.kind = mapu::parse_shift_kind(o.shift);
  spec.magnitude = o.magnitude;
  auto [src, tgt] = mapu::synth_domain_pair<float>(
      o.classes, o.n_per_class, spec, o.seed,
      static_cast<std::size_t>(o.length), static_cast<std::size_t>(o.channels));
  mapu::DatasetMeta meta;
  meta.channels = static_cast<std::size_t>(o.channels);
  meta.length = static_cast<std::size_t>(o.length);
  meta.num_classes = static_cast<std::size_t>(o.classes);
  meta.domains = {"source", "target"};
  std::map<std::string, mapu::DomainData<float>> doms;
  doms.emplace("source", std::move(src));
  doms.emplace("target", std::move(tgt));
  mapu::save_dataset(o.out, meta, doms);
  std::cout << "wrote synthetic dataset to " << o.out << "\n";
  return kExitOk;
}

// ---- pretrain ----

struct PretrainOpts {
  std::string data, domain, out;
  CommonOpts common;
};

template <class T>
int run_pretrain(const PretrainOpts& o) {
  auto cfg = resolve_config(o.common);
  auto [meta, domains] = mapu::load_dataset<T>(o.data);
  auto it = domains.find(o.domain);
  if (it == domains.end())
    throw mapu::io_error("domain not in dataset: " + o.domain);
  auto data = it->second;

  prepare_run_dir(o.out);
  write_manifest(o.out, "pretrain", cfg, {cfg.seed},
                 {"bundle/params.mapu", "bundle/arch.json", "metrics.jsonl"},
                 o.common.f64);

  std::optional<mapu::ChannelStats> stats;
  if (!o.common.no_normalize) {
    stats = mapu::normalize(data);
    json j = {{"mean", stats->mean}, {"std", stats->std}};
    write_text(fs::path(o.out) / "norm_stats.json", j.dump(2) + "\n");
  }

  auto res = mapu::pretrain_source(data, cfg, meta.num_classes);
  res.bundle.save(fs::path(o.out) / "bundle");

  std::ostringstream metrics;
  for (std::size_t e = 0; e < res.curves.ce.size(); ++e) {
    json rec = {{"epoch", e},
                {"ce", res.curves.ce[e]},
                {"imputation", res.curves.imputation[e]}};
    metrics << rec.dump() << "\n";
  }
  write_text(fs::path(o.out) / "metrics.jsonl", metrics.str());

  if (data.y) {
    auto ev = mapu::evaluate(res.bundle, data);
    json j = {{"domain", o.domain}, {"mf1", ev.mf1}, {"accuracy", ev.accuracy}};
    write_text(fs::path(o.out) / "eval.json", j.dump(2) + "\n");
    std::cout << "source-domain MF1 " << ev.mf1 << "\n";
  }
  return kExitOk;
}

// ---- adapt ----

struct AdaptOpts {
  std::string bundle, data, target_domain, out;
  CommonOpts common;
};

template <class T>
int run_adapt(const AdaptOpts& o) {
  auto cfg = resolve_config(o.common);
  auto bundle = mapu::ModelBundle<T>::load(o.bundle);
  auto [meta, domains] = mapu::load_dataset<T>(o.data);
  auto it = domains.find(o.target_domain);
  if (it == domains.end())
    throw mapu::io_error("domain not in dataset: " + o.target_domain);
  auto data = it->second;
  if (data.channels != bundle.meta.in_channels ||
      data.length != bundle.meta.seq_len ||
      meta.num_classes != bundle.meta.num_classes)
    throw mapu::contract_error(
        "bundle arch (" + std::to_string(bundle.meta.in_channels) + "ch x " +
        std::to_string(bundle.meta.seq_len) + ") incompatible with dataset (" +
        std::to_string(data.channels) + "ch x " + std::to_string(data.length) +
        ")");

  prepare_run_dir(o.out);
  write_manifest(o.out, "adapt", cfg, {cfg.seed},
                 {"bundle/params.mapu", "bundle/arch.json", "metrics.jsonl"},
                 o.common.f64);

  // Reuse source normalization stats when the pretrain run saved them.
  const auto stats_path = fs::path(o.bundle).parent_path() / "norm_stats.json";
  if (!o.common.no_normalize && fs::exists(stats_path)) {
    std::ifstream in(stats_path);
    json j;
    in >> j;
    mapu::ChannelStats stats;
    stats.mean = j.at("mean").get<std::vector<double>>();
    stats.std = j.at("std").get<std::vector<double>>();
    mapu::normalize(data, stats);
  }

  auto log = mapu::adapt_target(bundle, mapu::strip_labels(data), cfg);
  bundle.save(fs::path(o.out) / "bundle");

  std::ostringstream metrics;
  for (std::size_t e = 0; e < log.curves.imputation.size(); ++e) {
    json rec = {{"epoch", e},
                {"shot", log.curves.shot.empty() ? 0.0 : log.curves.shot[e]},
                {"imputation", log.curves.imputation[e]}};
    metrics << rec.dump() << "\n";
  }
  write_text(fs::path(o.out) / "metrics.jsonl", metrics.str());

  if (data.y) {
    auto ev = mapu::evaluate(bundle, data);
    json j = {{"domain", o.target_domain},
              {"mf1", ev.mf1},
              {"accuracy", ev.accuracy}};
    write_text(fs::path(o.out) / "eval.json", j.dump(2) + "\n");
    write_text(fs::path(o.out) / "confusion.csv", ev.confusion.to_csv());
    std::cout << "target-domain MF1 " << ev.mf1 << "\n";
  }
  return kExitOk;
}

// ---- bench ----

struct BenchOpts {
  std::string data, out;
  std::vector<std::string> scenarios;  // "source:target"
  bool synthetic = false;
  std::string shift = "phase_shift";
  double magnitude = 1.5707963267948966;
  int classes = 3;
  int n_per_class = 200;
  int length = 64;
  std::string sweep;  // "alpha=0.1,0.5,1.0" or "mask_ratio=..."
  int jobs = 1;
  CommonOpts common;
};

struct BenchCell {
  std::string scenario;
  std::string sweep_param;
  double sweep_value = 0.0;
  bool has_sweep = false;
  bool failed = false;
  std::string error;
  mapu::ScenarioReport report;
};

std::pair<std::string, std::vector<double>> parse_sweep(const std::string& s) {
  auto eq = s.find('=');
  if (eq == std::string::npos)
    throw mapu::config_error("--sweep expects param=v1,v2,...");
  const std::string param = s.substr(0, eq);
  if (param != "alpha" && param != "mask_ratio")
    throw mapu::config_error("--sweep supports alpha or mask_ratio");
  std::vector<double> vals;
  std::stringstream ss(s.substr(eq + 1));
  std::string tok;
  while (std::getline(ss, tok, ',')) vals.push_back(std::stod(tok));
  if (vals.empty()) throw mapu::config_error("--sweep has no values");
  return {param, vals};
}

template <class T>
int run_bench(const BenchOpts& o) {
  auto cfg = resolve_config(o.common);

  // Resolve scenario cells: (source domain, target domain) datasets.
  struct ScenarioData {
    std::string name;
    mapu::DomainData<T> source, target;
    std::size_t num_classes;
  };
  std::vector<ScenarioData> scenarios;
  if (o.synthetic) {
    mapu::ShiftSpec spec;
    spec.kind = mapu::parse_shift_kind(o.shift);
    spec.magnitude = o.magnitude;
    auto [src, tgt] = mapu::synth_domain_pair<T>(
        o.classes, o.n_per_class, spec, cfg.seed,
        static_cast<std::size_t>(o.length));
    ScenarioData sd;
    sd.name = "synthetic(" + o.shift + "," + std::to_string(o.magnitude) + ")";
    sd.source = std::move(src);
    sd.target = std::move(tgt);
    sd.num_classes = static_cast<std::size_t>(o.classes);
    scenarios.push_back(std::move(sd));
  } else {
    if (o.scenarios.empty())
      throw mapu::config_error("bench: empty scenario list");
    auto [meta, domains] = mapu::load_dataset<T>(o.data);
    for (const auto& sc : o.scenarios) {
      auto colon = sc.find(':');
      if (colon == std::string::npos)
        throw mapu::config_error("scenario must be source:target, got " + sc);
      const std::string s = sc.substr(0, colon), t = sc.substr(colon + 1);
      if (!domains.count(s) || !domains.count(t))
        throw mapu::io_error("scenario " + sc + " names unknown domains");
      ScenarioData sd;
      sd.name = s + "->" + t;
      sd.source = domains.at(s);
      sd.target = domains.at(t);
      sd.num_classes = meta.num_classes;
      scenarios.push_back(std::move(sd));
    }
  }

  std::string sweep_param;
  std::vector<double> sweep_values;
  if (!o.sweep.empty()) std::tie(sweep_param, sweep_values) = parse_sweep(o.sweep);

  prepare_run_dir(o.out);
  {
    std::vector<std::uint64_t> seed_list;
    for (int s = 0; s < cfg.seeds_per_scenario; ++s)
      seed_list.push_back(cfg.seed + static_cast<std::uint64_t>(s));
    write_manifest(o.out, "bench", cfg, seed_list,
                   {"report.json", "table.txt", "sweep.csv"}, o.common.f64);
  }

  // Build the work list.
  std::vector<BenchCell> cells;
  std::vector<mapu::TrainConfig> cell_cfgs;
  std::vector<const ScenarioData*> cell_data;
  for (const auto& sd : scenarios) {
    if (sweep_values.empty()) {
      cells.push_back({sd.name, "", 0.0, false, false, "", {}});
      cell_cfgs.push_back(cfg);
      cell_data.push_back(&sd);
    } else {
      for (double v : sweep_values) {
        mapu::TrainConfig c = cfg;
        if (sweep_param == "alpha") c.weights.alpha = v;
        else c.mask.mask_ratio = v;
        cells.push_back({sd.name, sweep_param, v, true, false, "", {}});
        cell_cfgs.push_back(c);
        cell_data.push_back(&sd);
      }
    }
  }

  // Each cell is fully isolated; cells may run on worker threads.
  std::atomic<std::size_t> next{0};
  auto worker = [&]() {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= cells.size()) return;
      try {
        auto src = cell_data[i]->source;
        auto tgt = cell_data[i]->target;
        if (!o.common.no_normalize) {
          auto stats = mapu::normalize(src);
          mapu::normalize(tgt, stats);
        }
        cells[i].report = mapu::run_scenario(src, tgt, cell_cfgs[i],
                                             cell_data[i]->num_classes);
      } catch (const std::exception& e) {
        cells[i].failed = true;
        cells[i].error = e.what();
      }
    }
  };
  const int jobs = std::max(1, o.jobs);
  if (jobs == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < jobs; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }

  // Aggregate table mirroring the per-scenario row format plus AVG.
  std::ostringstream table;
  table << "scenario";
  if (!sweep_param.empty()) table << " [" << sweep_param << "]";
  table << "\tMF1 mean+/-std\n";
  bool any_failed = false;
  double avg = 0.0;
  std::size_t ok_cells = 0;
  char buf[64];
  for (const auto& c : cells) {
    table << c.scenario;
    if (c.has_sweep) table << " [" << c.sweep_value << "]";
    if (c.failed) {
      table << "\tFAILED (" << c.error << ")\n";
      any_failed = true;
    } else {
      std::snprintf(buf, sizeof buf, "\t%.2f +/- %.2f\n",
                    100.0 * c.report.mean_mf1, 100.0 * c.report.std_mf1);
      table << buf;
      avg += c.report.mean_mf1;
      ++ok_cells;
    }
  }
  if (ok_cells) {
    std::snprintf(buf, sizeof buf, "AVG\t%.2f\n",
                  100.0 * avg / static_cast<double>(ok_cells));
    table << buf;
  }
  write_text(fs::path(o.out) / "table.txt", table.str());
  std::cout << table.str();

  // Sweep CSV for plotting.
  if (!sweep_param.empty()) {
    std::ostringstream csv;
    csv << sweep_param << ",scenario,mean_mf1,std_mf1\n";
    for (const auto& c : cells) {
      if (c.failed) continue;
      csv << c.sweep_value << "," << c.scenario << "," << c.report.mean_mf1
          << "," << c.report.std_mf1 << "\n";
    }
    write_text(fs::path(o.out) / "sweep.csv", csv.str());
  }

  json report = json::array();
  for (const auto& c : cells) {
    json jc;
    jc["scenario"] = c.scenario;
    if (c.has_sweep) jc[c.sweep_param] = c.sweep_value;
    if (c.failed) {
      jc["failed"] = true;
      jc["error"] = c.error;
    } else {
      jc["result"] = mapu::report_json(c.report);
    }
    report.push_back(jc);
  }
  write_text(fs::path(o.out) / "report.json", report.dump(2) + "\n");

  return any_failed ? kExitCellFailure : kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"MAPU: mask-and-impute source-free domain adaptation for "
               "time series"};
  app.require_subcommand(1);

  SynthOpts synth;
  auto* synth_cmd =
      app.add_subcommand("synth", "generate a synthetic domain-shift dataset");
  synth_cmd->add_option("--out", synth.out, "output directory")->required();
  synth_cmd->add_option("--classes", synth.classes, "number of classes");
  synth_cmd->add_option("--n-per-class", synth.n_per_class, "samples per class");
  synth_cmd->add_option("--length", synth.length, "sequence length");
  synth_cmd->add_option("--channels", synth.channels, "channels");
  synth_cmd->add_option("--shift", synth.shift,
                        "amplitude_scale|phase_shift|time_warp|additive_noise");
  synth_cmd->add_option("--magnitude", synth.magnitude, "shift magnitude");
  synth_cmd->add_option("--seed", synth.seed, "generator seed");

  PretrainOpts pre;
  auto* pre_cmd = app.add_subcommand("pretrain", "source pretraining stage");
  pre_cmd->add_option("--data", pre.data, "dataset directory")->required();
  pre_cmd->add_option("--domain", pre.domain, "source domain id")->required();
  pre_cmd->add_option("--out", pre.out, "run directory")->required();
  add_common(pre_cmd, pre.common);

  AdaptOpts ad;
  auto* ad_cmd = app.add_subcommand("adapt", "source-free adaptation stage");
  ad_cmd->add_option("--bundle", ad.bundle, "pretrained bundle directory")
      ->required();
  ad_cmd->add_option("--data", ad.data, "dataset directory")->required();
  ad_cmd->add_option("--target-domain", ad.target_domain, "target domain id")
      ->required();
  ad_cmd->add_option("--out", ad.out, "run directory")->required();
  add_common(ad_cmd, ad.common);

  BenchOpts be;
  auto* be_cmd = app.add_subcommand("bench", "multi-scenario benchmark");
  be_cmd->add_option("--data", be.data, "dataset directory");
  be_cmd->add_option("--scenario", be.scenarios,
                     "source:target pair (repeatable)");
  be_cmd->add_flag("--synthetic", be.synthetic, "use a generated shifted pair");
  be_cmd->add_option("--shift", be.shift, "synthetic shift kind");
  be_cmd->add_option("--magnitude", be.magnitude, "synthetic shift magnitude");
  be_cmd->add_option("--classes", be.classes, "synthetic class count");
  be_cmd->add_option("--n-per-class", be.n_per_class, "synthetic samples/class");
  be_cmd->add_option("--length", be.length, "synthetic sequence length");
  be_cmd->add_option("--sweep", be.sweep, "alpha=...|mask_ratio=...");
  be_cmd->add_option("--jobs", be.jobs, "parallel benchmark cells");
  be_cmd->add_option("--out", be.out, "run directory")->required();
  add_common(be_cmd, be.common);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);  // --help
    app.exit(e);
    return kExitUsage;
  }

  try {
    if (*synth_cmd) return run_synth(synth);
    if (*pre_cmd)
      return pre.common.f64 ? run_pretrain<double>(pre)
                            : run_pretrain<float>(pre);
    if (*ad_cmd)
      return ad.common.f64 ? run_adapt<double>(ad) : run_adapt<float>(ad);
    if (*be_cmd)
      return be.common.f64 ? run_bench<double>(be) : run_bench<float>(be);
  } catch (const mapu::contract_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitContract;
  } catch (const mapu::dimension_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitContract;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  }
  return kExitUsage;
}
