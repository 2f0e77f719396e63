#include "fewseg/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <set>

#include "fewseg/errors.hpp"

namespace fewseg {

using nlohmann::json;

void TrainConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError("train config: " + m); };
  if (ce_weight < 0 || dice_weight < 0) fail("loss weights must be non-negative");
  if (ce_weight == 0 && dice_weight == 0) fail("loss weights must not both be zero");
  if (!(base_lr > 0)) fail("base_lr must be positive");
  if (warmup_steps < 0) fail("warmup_steps must be non-negative");
  if (decay_rate < 0 || decay_rate > 1) fail("decay_rate must lie in (0, 1], or 0 for automatic");
  if (max_steps < 1) fail("max_steps must be at least 1");
  if (batch_size < 1) fail("batch_size must be at least 1");
  if (weight_decay < 0) fail("weight_decay must be non-negative");
  if (beta1 < 0 || beta1 >= 1 || beta2 < 0 || beta2 >= 1) fail("Adam betas must lie in [0, 1)");
  if (!(adam_eps > 0)) fail("adam_eps must be positive");
  if (log_every < 1) fail("log_every must be at least 1");
  if (checkpoint_every < 0 || validate_every < 0) fail("cadences must be non-negative");
}

double TrainConfig::resolved_decay() const {
  if (decay_rate > 0) return decay_rate;
  const int decay_steps = max_steps - warmup_steps;
  if (decay_steps <= 0) return 1.0;
  return std::pow(0.1, 1.0 / decay_steps);
}

void to_json(json& j, const TrainConfig& c) {
  j = json{{"ce_weight", c.ce_weight},         {"dice_weight", c.dice_weight},
           {"base_lr", c.base_lr},             {"warmup_steps", c.warmup_steps},
           {"decay_rate", c.decay_rate},       {"max_steps", c.max_steps},
           {"batch_size", c.batch_size},       {"weight_decay", c.weight_decay},
           {"beta1", c.beta1},                 {"beta2", c.beta2},
           {"adam_eps", c.adam_eps},           {"log_every", c.log_every},
           {"checkpoint_every", c.checkpoint_every}, {"validate_every", c.validate_every},
           {"seed", c.seed}};
}

void from_json(const json& j, TrainConfig& c) {
  if (!j.is_object()) throw ConfigError("train config must be a JSON object");
  static const std::set<std::string> known = {
      "ce_weight", "dice_weight", "base_lr",  "warmup_steps", "decay_rate",
      "max_steps", "batch_size",  "weight_decay", "beta1",    "beta2",
      "adam_eps",  "log_every",   "checkpoint_every", "validate_every", "seed"};
  for (const auto& [k, v] : j.items()) {
    if (!known.contains(k)) throw ConfigError("train config: unknown field '" + k + "'");
  }
  auto get = [&](const char* key, auto& out) {
    if (j.contains(key)) out = j.at(key).get<std::decay_t<decltype(out)>>();
  };
  try {
    get("ce_weight", c.ce_weight);
    get("dice_weight", c.dice_weight);
    get("base_lr", c.base_lr);
    get("warmup_steps", c.warmup_steps);
    get("decay_rate", c.decay_rate);
    get("max_steps", c.max_steps);
    get("batch_size", c.batch_size);
    get("weight_decay", c.weight_decay);
    get("beta1", c.beta1);
    get("beta2", c.beta2);
    get("adam_eps", c.adam_eps);
    get("log_every", c.log_every);
    get("checkpoint_every", c.checkpoint_every);
    get("validate_every", c.validate_every);
    get("seed", c.seed);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("train config: ") + e.what());
  }
}

double lr_at(int step, const TrainConfig& config) {
  if (step < config.warmup_steps) {
    return config.base_lr * (step + 1) / static_cast<double>(config.warmup_steps);
  }
  return config.base_lr * std::pow(config.resolved_decay(), step - config.warmup_steps);
}

std::optional<PointPrompt> sample_training_prompt(const LabelMap& label, Rng& rng) {
  std::vector<int> classes;
  for (Eigen::Index i = 0; i < label.size(); ++i) {
    const int v = label.data()[i];
    if (v > 0) classes.push_back(v);
  }
  if (classes.empty()) return std::nullopt;
  std::sort(classes.begin(), classes.end());
  classes.erase(std::unique(classes.begin(), classes.end()), classes.end());
  const int k = classes[static_cast<std::size_t>(
      uniform_int(rng, 0, static_cast<std::int64_t>(classes.size()) - 1))];
  const auto pixel = random_point(class_mask(label, k), rng);
  return PointPrompt{pixel->row, pixel->col, k};
}

double dice_loss(const Matrix& probs, const Mask& target, double eps) {
  if (probs.rows() != target.rows() || probs.cols() != target.cols()) {
    throw InvalidInputError("dice_loss: probability and target shapes differ");
  }
  const Matrix t = target.cast<double>();
  const double inter = probs.cwiseProduct(t).sum();
  return 1.0 - (2.0 * inter + eps) / (probs.sum() + t.sum() + eps);
}

LossResult combined_loss(const MaskLogits& logits, const Mask& target, const TrainConfig& config) {
  const auto rows = logits.target.rows();
  const auto cols = logits.target.cols();
  if (logits.background.rows() != rows || logits.background.cols() != cols ||
      target.rows() != rows || target.cols() != cols) {
    throw InvalidInputError("combined_loss: logit and target shapes differ");
  }
  if (!logits.target.allFinite() || !logits.background.allFinite()) {
    throw NumericError("combined_loss: non-finite logits");
  }
  const double n = static_cast<double>(rows * cols);
  const Matrix t = target.cast<double>();
  Matrix p(rows, cols);
  double ce = 0.0;
  for (Eigen::Index i = 0; i < p.size(); ++i) {
    const double zb = logits.background.data()[i];
    const double zt = logits.target.data()[i];
    const double m = std::max(zb, zt);
    const double lse = m + std::log(std::exp(zb - m) + std::exp(zt - m));
    ce -= t.data()[i] > 0 ? zt - lse : zb - lse;
    p.data()[i] = std::exp(zt - lse);
  }
  ce /= n;

  constexpr double eps = 1e-5;
  const double inter = p.cwiseProduct(t).sum();
  const double denom = p.sum() + t.sum() + eps;
  const double dice = 1.0 - (2.0 * inter + eps) / denom;

  // d dice / d p, then through the two-channel softmax.
  const Matrix ddice_dp =
      ((2.0 * inter + eps) / (denom * denom)) * Matrix::Ones(rows, cols) - (2.0 / denom) * t;
  const Matrix dp_dz = p.array() * (1.0 - p.array());
  const Matrix dzt = config.ce_weight * (p - t) / n +
                     config.dice_weight * ddice_dp.cwiseProduct(dp_dz);

  LossResult r;
  r.ce = ce;
  r.dice = dice;
  r.total = config.ce_weight * ce + config.dice_weight * dice;
  r.grad.target = dzt;
  r.grad.background = -dzt;
  return r;
}

LabeledSlice fit_to_input(const LabeledSlice& slice, int input_size) {
  if (slice.rows() == input_size && slice.cols() == input_size) return slice;
  LabeledSlice out = slice;
  out.image = resize_bilinear(slice.image, input_size, input_size);
  out.label = resize_nearest(slice.label, input_size, input_size);
  return out;
}

MaskPredictor make_predictor(const SegmentationModel& model) {
  const SegmentationModel* m = &model;
  return [m](const LabeledSlice& slice, const PointPrompt& prompt) -> Mask {
    const int s = m->config().input_size;
    const auto h = static_cast<int>(slice.rows());
    const auto w = static_cast<int>(slice.cols());
    if (h == s && w == s) return m->predict_mask(slice.image, prompt);
    const Image resized = resize_bilinear(slice.image, s, s);
    PointPrompt scaled = prompt;
    scaled.row = std::min(s - 1, static_cast<int>((prompt.row + 0.5) * s / h));
    scaled.col = std::min(s - 1, static_cast<int>((prompt.col + 0.5) * s / w));
    return resize_nearest(m->predict_mask(resized, scaled), h, w);
  };
}

double validation_dsc(const SegmentationModel& model, const std::vector<LabeledSlice>& slices) {
  int classes = 0;
  for (const auto& s : slices) classes = std::max(classes, static_cast<int>(s.label.maxCoeff()));
  if (classes == 0) throw InvalidInputError("validation set has no foreground");
  return evaluate(make_predictor(model), slices, classes, PromptStrategy::kInterior, 0,
                  Aggregation::kPerSlice)
      .mean_dsc;
}

json to_json(const TrainRecord& r) {
  json j{{"step", r.step}, {"lr", r.lr}, {"loss", r.loss}, {"ce", r.ce}, {"dice", r.dice}};
  if (r.val_dsc) j["val_dsc"] = *r.val_dsc;
  return j;
}

namespace {

struct AdamState {
  std::vector<Matrix> m;
  std::vector<Matrix> v;
};

std::vector<Matrix> snapshot_trainable(const ParameterStore& store) {
  std::vector<Matrix> out;
  for (const auto& p : store) out.push_back(p.trainable() ? p.value : Matrix());
  return out;
}

void restore_trainable(ParameterStore& store, const std::vector<Matrix>& snap) {
  std::size_t i = 0;
  for (auto& p : store) {
    if (p.trainable()) p.value = snap[i];
    ++i;
  }
}

std::string step_dir(int step) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "step_%06d", step);
  return buf;
}

}  // namespace

TrainLog train(SegmentationModel& model, const std::vector<LabeledSlice>& data,
               const TrainConfig& config, const TrainOptions& options) {
  config.validate();
  const int input = model.config().input_size;
  std::vector<LabeledSlice> pool;
  for (const auto& s : data) {
    if ((s.label.array() > 0).any()) pool.push_back(fit_to_input(s, input));
  }
  if (pool.empty()) throw InvalidInputError("training data contains no slice with foreground");
  std::vector<LabeledSlice> val;
  for (const auto& s : options.validation) val.push_back(fit_to_input(s, input));

  std::ofstream log_file;
  if (options.out_dir) {
    std::filesystem::create_directories(*options.out_dir);
    log_file.open(*options.out_dir / "train_log.jsonl", std::ios::trunc);
    if (!log_file) throw IoError("cannot write " + (*options.out_dir / "train_log.jsonl").string());
  }

  auto& store = model.params();
  AdamState adam;
  for (const auto& p : store) {
    adam.m.push_back(p.trainable() ? Matrix::Zero(p.rows, p.cols) : Matrix());
    adam.v.push_back(p.trainable() ? Matrix::Zero(p.rows, p.cols) : Matrix());
  }

  TrainLog log;
  auto emit = [&](const TrainRecord& r) {
    log.records.push_back(r);
    if (log_file.is_open()) log_file << to_json(r).dump() << '\n';
    if (options.on_record) options.on_record(r);
  };
  if (!val.empty()) log.initial_val_dsc = validation_dsc(model, val);

  Rng rng(derive_seed(config.seed, "train"));
  std::vector<std::size_t> order(pool.size());
  std::size_t cursor = order.size();
  auto next_index = [&]() {
    if (cursor == order.size()) {
      std::iota(order.begin(), order.end(), std::size_t{0});
      for (std::size_t i = order.size(); i > 1; --i) {
        const auto j = static_cast<std::size_t>(uniform_int(rng, 0, static_cast<std::int64_t>(i) - 1));
        std::swap(order[i - 1], order[j]);
      }
      cursor = 0;
    }
    return order[cursor++];
  };

  std::vector<Matrix> last_good = snapshot_trainable(store);
  const std::uint64_t frozen_before = frozen_checksum(store);

  for (int step = 0; step < config.max_steps; ++step) {
    store.zero_grad();
    TrainRecord rec;
    rec.step = step;
    rec.lr = lr_at(step, config);
    try {
      for (int b = 0; b < config.batch_size; ++b) {
        const auto& s = pool[next_index()];
        const auto prompt = sample_training_prompt(s.label, rng);
        const Mask target = class_mask(s.label, prompt->class_id);
        ForwardCache cache;
        const MaskLogits logits = model.forward(s.image, *prompt, &cache);
        LossResult loss = combined_loss(logits, target, config);
        if (!std::isfinite(loss.total)) throw NumericError("non-finite loss");
        const double scale = 1.0 / config.batch_size;
        loss.grad.target *= scale;
        loss.grad.background *= scale;
        model.backward(loss.grad, cache);
        rec.loss += loss.total * scale;
        rec.ce += loss.ce * scale;
        rec.dice += loss.dice * scale;
      }
    } catch (const NumericError& e) {
      restore_trainable(store, last_good);
      if (options.out_dir) model.save(*options.out_dir / "checkpoint_last_good");
      throw NumericError("training aborted at step " + std::to_string(step) + " (lr " +
                         std::to_string(rec.lr) + "): " + e.what() +
                         "; parameters restored to the last good step");
    }

    // AdamW with decoupled weight decay.
    const double bc1 = 1.0 - std::pow(config.beta1, step + 1);
    const double bc2 = 1.0 - std::pow(config.beta2, step + 1);
    std::size_t i = 0;
    for (auto& p : store) {
      if (p.trainable()) {
        auto& m = adam.m[i];
        auto& v = adam.v[i];
        m = config.beta1 * m + (1.0 - config.beta1) * p.grad;
        v = config.beta2 * v + (1.0 - config.beta2) * p.grad.cwiseAbs2();
        p.value *= 1.0 - rec.lr * config.weight_decay;
        p.value.array() -= rec.lr * (m.array() / bc1) /
                           ((v.array() / bc2).sqrt() + config.adam_eps);
      }
      ++i;
    }
    bool finite = true;
    for (const auto& p : store) {
      if (p.trainable() && !p.value.allFinite()) finite = false;
    }
    if (!finite) {
      restore_trainable(store, last_good);
      if (options.out_dir) model.save(*options.out_dir / "checkpoint_last_good");
      throw NumericError("training aborted at step " + std::to_string(step) +
                         ": non-finite parameters after the update");
    }
    last_good = snapshot_trainable(store);
    if (options.audit && frozen_checksum(store) != frozen_before) {
      throw NumericError("frozen parameters changed at step " + std::to_string(step));
    }

    const bool last = step + 1 == config.max_steps;
    if (config.validate_every > 0 && !val.empty() && ((step + 1) % config.validate_every == 0)) {
      rec.val_dsc = validation_dsc(model, val);
    }
    if (rec.val_dsc || step % config.log_every == 0 || last) emit(rec);
    if (options.out_dir && config.checkpoint_every > 0 && !last &&
        (step + 1) % config.checkpoint_every == 0) {
      model.save(*options.out_dir / "checkpoints" / step_dir(step + 1));
    }
  }
  log.steps = config.max_steps;
  if (!val.empty()) log.final_val_dsc = validation_dsc(model, val);
  if (options.out_dir) model.save(*options.out_dir / "checkpoint");
  return log;
}

TrainLog train(SegmentationModel& model, const DatasetManifest& data, const TrainConfig& config,
               const TrainOptions& options) {
  return train(model, load_all_slices(data), config, options);
}

}  // namespace fewseg
