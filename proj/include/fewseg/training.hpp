#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "fewseg/data_io.hpp"
#include "fewseg/evaluation.hpp"
#include "fewseg/model.hpp"
#include "fewseg/rng.hpp"
#include "fewseg/types.hpp"

namespace fewseg {

struct TrainConfig {
  double ce_weight = 1.0;
  double dice_weight = 0.8;
  double base_lr = 1e-3;
  int warmup_steps = 250;
  // Per-step decay after warmup. Zero selects the rate that ends the run at
  // one tenth of base_lr.
  double decay_rate = 0.0;
  int max_steps = 2000;
  int batch_size = 8;
  double weight_decay = 0.1;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  int log_every = 1;
  int checkpoint_every = 0;  // 0: final checkpoint only
  int validate_every = 0;    // 0: no periodic validation
  std::uint64_t seed = 0;

  void validate() const;
  double resolved_decay() const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

double lr_at(int step, const TrainConfig& config);

// Uniform class among those present, then a uniform pixel of that class.
// Returns nullopt on an all-background label.
std::optional<PointPrompt> sample_training_prompt(const LabelMap& label, Rng& rng);

double dice_loss(const Matrix& probs, const Mask& target, double eps = 1e-5);

struct LossResult {
  double total = 0.0;
  double ce = 0.0;
  double dice = 0.0;
  MaskLogits grad;  // d total / d logits
};

LossResult combined_loss(const MaskLogits& logits, const Mask& target, const TrainConfig& config);

// Resamples a slice to the model's square input when sizes differ.
LabeledSlice fit_to_input(const LabeledSlice& slice, int input_size);

// Predictor that resizes to the model input and maps the mask back.
MaskPredictor make_predictor(const SegmentationModel& model);

struct TrainRecord {
  int step = 0;
  double lr = 0.0;
  double loss = 0.0;
  double ce = 0.0;
  double dice = 0.0;
  std::optional<double> val_dsc;
  bool operator==(const TrainRecord&) const = default;
};

struct TrainLog {
  std::vector<TrainRecord> records;
  std::optional<double> initial_val_dsc;
  std::optional<double> final_val_dsc;
  int steps = 0;
  bool operator==(const TrainLog&) const = default;
};

nlohmann::json to_json(const TrainRecord& r);

struct TrainOptions {
  std::optional<std::filesystem::path> out_dir;  // checkpoints and train_log.jsonl
  std::vector<LabeledSlice> validation;          // scored with interior prompts
  bool audit = false;  // verify each step leaves frozen parameters untouched
  std::function<void(const TrainRecord&)> on_record;
};

// Fine-tunes the trainable groups of `model` in place with AdamW.
TrainLog train(SegmentationModel& model, const std::vector<LabeledSlice>& data,
               const TrainConfig& config, const TrainOptions& options = {});
TrainLog train(SegmentationModel& model, const DatasetManifest& data, const TrainConfig& config,
               const TrainOptions& options = {});

// Mean per-slice DSC with interior prompts, one prompt per present class.
double validation_dsc(const SegmentationModel& model, const std::vector<LabeledSlice>& slices);

}  // namespace fewseg
