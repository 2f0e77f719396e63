#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "fewseg/evaluation.hpp"
#include "fewseg/model.hpp"
#include "fewseg/selection.hpp"
#include "fewseg/synthesis.hpp"
#include "fewseg/training.hpp"

namespace fewseg {

struct SelectionSpec {
  std::string strategy = kStrategyRandomCount;
  double fraction = 0.01;    // random_fraction
  int count = 3;             // random_count
  int total = 1;             // most_organs
  int per_volume_quota = 1;  // most_organs
  int min_fg_pixels = 10;
  bool operator==(const SelectionSpec&) const = default;
};

struct ExperimentConfig {
  std::string name = "run";
  std::filesystem::path data;                      // manifest of the labeled pool
  std::optional<std::filesystem::path> test_data;  // when absent, split `data` by volume
  double train_fraction = 0.7;
  SelectionSpec selection;
  std::optional<SynthesisConfig> synthesis;  // nullopt: train on the exemplars directly
  ModelConfig model = ModelConfig::small();
  TrainConfig train;
  PromptStrategy prompt = PromptStrategy::kInterior;
  std::optional<Aggregation> aggregation;
  bool evaluate_untrained = false;  // also report the untrained model
  std::filesystem::path out_dir = "runs/run";
  std::uint64_t seed = 0;

  void validate() const;
};

// Seeds, exemplars and sizes derive from these fields; out_dir is excluded so
// moving a run does not change its hash.
nlohmann::json experiment_json(const ExperimentConfig& c, bool include_out_dir = true);
ExperimentConfig parse_experiment(const nlohmann::json& j, const std::filesystem::path& base_dir);
ExperimentConfig load_experiment(const std::filesystem::path& path);
std::string config_hash(const ExperimentConfig& c);

struct StageSeeds {
  std::uint64_t split, selection, synthesis, model, training, evaluation;
};
StageSeeds stage_seeds(std::uint64_t seed);

struct ExperimentResult {
  std::filesystem::path run_dir;
  std::string config_hash;
  MetricsReport report;
  std::optional<MetricsReport> untrained;
  TrainLog log;
};

// select -> synthesize (or pass through) -> train -> evaluate -> report.
// Artifacts written under config.out_dir:
//   config.json, exemplars.json, synth/ (manifest + slices), train/
//   (train_log.jsonl, checkpoint/), report.csv, report.txt, untrained/.
ExperimentResult run_experiment(const ExperimentConfig& config);

struct Comparison {
  std::vector<std::filesystem::path> runs;
  std::vector<MetricsReport> reports;
  // Long format: run, method, exemplars, prompt, seed, config_hash, metric,
  // value, delta (against the first run).
  std::string csv() const;
  std::string text() const;
};

// Loads report.csv and config.json of each run; a report whose hash does
// not match its recorded configuration is rejected as tampered.
Comparison compare_runs(const std::vector<std::filesystem::path>& run_dirs);

}  // namespace fewseg
