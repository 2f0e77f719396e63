#include "fewseg/experiment.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <map>
#include <set>
#include <sstream>

#include "fewseg/errors.hpp"
#include "fewseg/rng.hpp"

namespace fewseg {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::string hash_of(json j) {
  j.erase("out_dir");
  j.erase("config_hash");
  return hex64(fnv1a64(j.dump()));
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ReportError("cannot open " + path.string());
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out << text;
  if (!out) throw IoError("cannot write " + path.string());
}

template <typename F>
auto stage(const char* name, F&& body) -> decltype(body()) {
  try {
    return body();
  } catch (const ConfigError&) {
    throw;
  } catch (const StageError&) {
    throw;
  } catch (const std::exception& e) {
    throw StageError(name, e.what());
  }
}

std::string exemplar_label(const ExemplarSet& set) { return std::to_string(set.entries.size()); }

}  // namespace

void ExperimentConfig::validate() const {
  if (name.empty()) throw ConfigError("experiment name must not be empty");
  if (data.empty()) throw ConfigError("experiment needs a data manifest");
  if (!fs::exists(data)) throw ConfigError("data manifest not found: " + data.string());
  if (test_data && !fs::exists(*test_data)) {
    throw ConfigError("test manifest not found: " + test_data->string());
  }
  if (!test_data && !(train_fraction > 0.0 && train_fraction < 1.0)) {
    throw ConfigError("train_fraction must lie in (0, 1)");
  }
  const auto& s = selection.strategy;
  if (s != kStrategyRandomCount && s != kStrategyRandomFraction && s != kStrategyMostOrgans) {
    throw ConfigError("unknown selection strategy '" + s + "'");
  }
  if (synthesis) synthesis->validate();
  model.validate();
  train.validate();
  if (out_dir.empty()) throw ConfigError("experiment needs an output directory");
}

json experiment_json(const ExperimentConfig& c, bool include_out_dir) {
  json j{{"name", c.name},
         {"data", c.data.string()},
         {"train_fraction", c.train_fraction},
         {"selection",
          {{"strategy", c.selection.strategy},
           {"fraction", c.selection.fraction},
           {"count", c.selection.count},
           {"total", c.selection.total},
           {"per_volume_quota", c.selection.per_volume_quota},
           {"min_fg_pixels", c.selection.min_fg_pixels}}},
         {"synthesis", c.synthesis ? json(*c.synthesis) : json("none")},
         {"model", c.model},
         {"train", c.train},
         {"prompt", to_string(c.prompt)},
         {"aggregation", c.aggregation ? json(to_string(*c.aggregation)) : json(nullptr)},
         {"evaluate_untrained", c.evaluate_untrained},
         {"seed", c.seed}};
  if (c.test_data) j["test_data"] = c.test_data->string();
  if (include_out_dir) j["out_dir"] = c.out_dir.string();
  return j;
}

ExperimentConfig parse_experiment(const json& j, const fs::path& base_dir) {
  if (!j.is_object()) throw ConfigError("experiment config must be a JSON object");
  static const std::set<std::string> known = {
      "name",  "data",  "test_data", "train_fraction", "selection",          "synthesis", "model",
      "train", "prompt", "aggregation", "evaluate_untrained", "out_dir", "seed", "config_hash"};
  for (const auto& [k, v] : j.items()) {
    if (!known.contains(k)) throw ConfigError("experiment config: unknown field '" + k + "'");
  }
  auto resolve = [&](const std::string& p) {
    fs::path path(p);
    return path.is_relative() ? base_dir / path : path;
  };
  ExperimentConfig c;
  try {
    c.name = j.value("name", c.name);
    c.data = resolve(j.at("data").get<std::string>());
    if (j.contains("test_data") && !j.at("test_data").is_null()) {
      c.test_data = resolve(j.at("test_data").get<std::string>());
    }
    c.train_fraction = j.value("train_fraction", c.train_fraction);
    if (j.contains("selection")) {
      const auto& s = j.at("selection");
      c.selection.strategy = s.value("strategy", c.selection.strategy);
      c.selection.fraction = s.value("fraction", c.selection.fraction);
      c.selection.count = s.value("count", c.selection.count);
      c.selection.total = s.value("total", c.selection.total);
      c.selection.per_volume_quota = s.value("per_volume_quota", c.selection.per_volume_quota);
      c.selection.min_fg_pixels = s.value("min_fg_pixels", c.selection.min_fg_pixels);
    }
    if (j.contains("synthesis")) {
      const auto& s = j.at("synthesis");
      if (s.is_string()) {
        if (s.get<std::string>() != "none") throw ConfigError("synthesis must be \"none\" or an object");
      } else {
        c.synthesis = s.get<SynthesisConfig>();
      }
    } else {
      c.synthesis = SynthesisConfig{};
    }
    if (j.contains("model")) {
      const auto& m = j.at("model");
      if (m.is_string()) {
        const auto preset = m.get<std::string>();
        if (preset == "small") c.model = ModelConfig::small();
        else if (preset == "desk") c.model = ModelConfig::desk();
        else if (preset == "toy") c.model = ModelConfig::toy();
        else throw ConfigError("unknown model preset '" + preset + "'");
      } else {
        c.model = m.get<ModelConfig>();
      }
    }
    if (j.contains("train")) c.train = j.at("train").get<TrainConfig>();
    if (j.contains("prompt")) c.prompt = parse_prompt_strategy(j.at("prompt").get<std::string>());
    if (j.contains("aggregation") && !j.at("aggregation").is_null()) {
      c.aggregation = parse_aggregation(j.at("aggregation").get<std::string>());
    }
    c.evaluate_untrained = j.value("evaluate_untrained", c.evaluate_untrained);
    if (j.contains("out_dir")) c.out_dir = resolve(j.at("out_dir").get<std::string>());
    c.seed = j.value("seed", c.seed);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("experiment config: ") + e.what());
  }
  return c;
}

ExperimentConfig load_experiment(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open experiment config " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return parse_experiment(j, path.parent_path());
}

std::string config_hash(const ExperimentConfig& c) { return hash_of(experiment_json(c, false)); }

StageSeeds stage_seeds(std::uint64_t seed) {
  return {derive_seed(seed, "split"),    derive_seed(seed, "selection"),
          derive_seed(seed, "synthesis"), derive_seed(seed, "model"),
          derive_seed(seed, "training"),  derive_seed(seed, "evaluation")};
}

ExperimentResult run_experiment(const ExperimentConfig& config) {
  config.validate();
  const StageSeeds seeds = stage_seeds(config.seed);
  const fs::path dir = config.out_dir;
  fs::create_directories(dir);
  ExperimentResult result;
  result.run_dir = dir;
  result.config_hash = config_hash(config);
  {
    json j = experiment_json(config);
    j["config_hash"] = result.config_hash;
    write_text(dir / "config.json", j.dump(2) + "\n");
  }

  // Train/test pools.
  DatasetManifest train_manifest;
  DatasetManifest test_manifest;
  stage("split", [&] {
    const DatasetManifest all = load_manifest(config.data);
    if (config.test_data) {
      train_manifest = all;
      test_manifest = load_manifest(*config.test_data);
    } else {
      std::tie(train_manifest, test_manifest) =
          split_dataset(all, config.train_fraction, seeds.split);
    }
    json split{{"train_volumes", train_manifest.volume_ids()},
               {"test_volumes", test_manifest.volume_ids()}};
    write_text(dir / "split.json", split.dump(2) + "\n");
  });
  const int class_count = train_manifest.class_count;

  const ExemplarSet exemplars = stage("select", [&] {
    const auto& s = config.selection;
    ExemplarSet set;
    if (s.strategy == kStrategyRandomFraction) {
      set = select_random_fraction(train_manifest, s.fraction, s.min_fg_pixels, seeds.selection);
    } else if (s.strategy == kStrategyRandomCount) {
      set = select_random_count(train_manifest, s.count, s.min_fg_pixels, seeds.selection);
    } else {
      set = select_most_organs(train_manifest, s.total, s.per_volume_quota, seeds.selection);
    }
    save_exemplars(set, dir / "exemplars.json");
    return set;
  });

  const std::vector<LabeledSlice> training_data = stage("synthesize", [&] {
    std::vector<LabeledSlice> slices = load_exemplar_slices(exemplars);
    if (!config.synthesis) return slices;
    SynthesisConfig sc = *config.synthesis;
    sc.seed = seeds.synthesis;
    const auto manifest =
        build_dataset(slices, collect_backgrounds(train_manifest), sc, class_count, dir / "synth");
    return load_all_slices(manifest);
  });

  SegmentationModel model(config.model, seeds.model);
  const std::vector<LabeledSlice> test = stage("evaluate", [&] { return load_all_slices(test_manifest); });
  auto score = [&](const SegmentationModel& m, const std::string& method) {
    MetricsReport r = evaluate(make_predictor(m), test, class_count, config.prompt, seeds.evaluation,
                               config.aggregation);
    r.method = method;
    r.exemplars = exemplar_label(exemplars);
    r.seed = config.seed;
    r.config_hash = result.config_hash;
    return r;
  };
  if (config.evaluate_untrained) {
    result.untrained = stage("evaluate", [&] {
      MetricsReport r = score(model, config.name + ":untrained");
      write_report({r}, dir / "untrained");
      return r;
    });
  }

  result.log = stage("train", [&] {
    TrainConfig tc = config.train;
    tc.seed = seeds.training;
    TrainOptions opts;
    opts.out_dir = dir / "train";
    return train(model, training_data, tc, opts);
  });

  result.report = stage("evaluate", [&] {
    MetricsReport r = score(model, config.name);
    write_report({r}, dir);
    return r;
  });
  return result;
}

std::string Comparison::csv() const {
  std::ostringstream os;
  os << "run,method,exemplars,prompt,seed,config_hash,metric,value,delta\n";
  if (reports.empty()) return os.str();
  auto metrics = [](const MetricsReport& r) {
    std::vector<std::pair<std::string, double>> m{{"mean_dsc", r.mean_dsc}, {"mean_hd95", r.mean_hd95}};
    for (const auto& c : r.classes) m.emplace_back("dsc_" + c.name, c.dsc);
    for (const auto& c : r.classes) m.emplace_back("hd95_" + c.name, c.hd95);
    return m;
  };
  auto num = [](double v) {
    if (std::isnan(v)) return std::string("nan");
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return std::string(buf);
  };
  const auto ref = metrics(reports.front());
  for (std::size_t i = 0; i < reports.size(); ++i) {
    const auto& r = reports[i];
    const auto m = metrics(r);
    for (std::size_t k = 0; k < m.size(); ++k) {
      os << runs[i].filename().string() << ',' << r.method << ',' << r.exemplars << ','
         << to_string(r.prompt) << ',' << r.seed << ',' << r.config_hash << ',' << m[k].first << ','
         << num(m[k].second) << ',' << num(m[k].second - ref[k].second) << '\n';
    }
  }
  return os.str();
}

std::string Comparison::text() const {
  std::ostringstream os;
  if (reports.empty()) return "";
  const auto& ref = reports.front();
  os << std::left << std::setw(24) << "run" << std::setw(10) << "exemplars" << std::right
     << std::setw(10) << "DSC%" << std::setw(10) << "dDSC" << std::setw(10) << "HD95"
     << std::setw(10) << "dHD95";
  for (const auto& c : ref.classes) os << std::setw(12) << ("DSC%_" + c.name);
  os << '\n' << std::fixed;
  for (std::size_t i = 0; i < reports.size(); ++i) {
    const auto& r = reports[i];
    os << std::left << std::setw(24) << runs[i].filename().string() << std::setw(10) << r.exemplars
       << std::right << std::setprecision(2) << std::setw(10) << 100.0 * r.mean_dsc
       << std::setw(10) << 100.0 * (r.mean_dsc - ref.mean_dsc) << std::setw(10) << r.mean_hd95
       << std::setw(10) << (r.mean_hd95 - ref.mean_hd95);
    for (const auto& c : r.classes) os << std::setw(12) << 100.0 * c.dsc;
    os << '\n';
  }
  return os.str();
}

Comparison compare_runs(const std::vector<fs::path>& run_dirs) {
  if (run_dirs.size() < 2) throw ReportError("comparison needs at least two run directories");
  Comparison cmp;
  for (const auto& dir : run_dirs) {
    const fs::path report_path = dir / "report.csv";
    const fs::path config_path = dir / "config.json";
    if (!fs::exists(report_path)) throw ReportError("run " + dir.string() + " has no report.csv");
    if (!fs::exists(config_path)) throw ReportError("run " + dir.string() + " has no config.json");
    const auto reports = parse_report_csv(read_text(report_path));
    if (reports.empty()) throw ReportError("run " + dir.string() + " has an empty report");
    json cfg;
    try {
      cfg = json::parse(read_text(config_path));
    } catch (const json::exception& e) {
      throw ReportError("run " + dir.string() + ": config.json: " + e.what());
    }
    const std::string recomputed = hash_of(cfg);
    const std::string recorded = cfg.value("config_hash", std::string());
    if (recomputed != recorded || reports.front().config_hash != recorded) {
      throw ReportError("run " + dir.string() +
                        ": config hash mismatch (report or configuration was modified)");
    }
    if (!cmp.reports.empty()) {
      const auto& a = cmp.reports.front().classes;
      const auto& b = reports.front().classes;
      bool same = a.size() == b.size();
      for (std::size_t k = 0; same && k < a.size(); ++k) same = a[k].name == b[k].name;
      if (!same) throw ReportError("run " + dir.string() + " reports a different class list");
    }
    cmp.runs.push_back(dir);
    cmp.reports.push_back(reports.front());
  }
  return cmp;
}

}  // namespace fewseg
