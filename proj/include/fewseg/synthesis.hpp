#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "fewseg/data_io.hpp"
#include "fewseg/rng.hpp"
#include "fewseg/selection.hpp"
#include "fewseg/types.hpp"

namespace fewseg {

struct TransformSpec {
  double blur_sigma = 0.0;  // pixels
  double intensity_gain = 1.0;
  double intensity_bias = 0.0;
  double scale_factor = 1.0;
  bool flip_h = false;
  bool flip_v = false;
  double rotation_deg = 0.0;  // counter-clockwise on screen

  bool is_identity() const;
  bool operator==(const TransformSpec&) const = default;
};

struct Range {
  double lo = 0.0;
  double hi = 0.0;
  bool operator==(const Range&) const = default;
};

enum class SynthesisMode { kSingleClass, kCategoryWise };
// Which organ wins where two pasted organs overlap.
enum class OverlapOrder { kLowerOnTop, kHigherOnTop };

struct SynthesisConfig {
  int num_samples = 500;
  Range blur_sigma{0.0, 1.5};
  Range intensity_gain{0.8, 1.2};
  Range intensity_bias{-0.1, 0.1};
  Range scale_factor{0.8, 1.2};
  Range rotation_deg{-30.0, 30.0};
  double flip_h_prob = 0.5;
  double flip_v_prob = 0.5;
  int position_jitter = 10;
  SynthesisMode mode = SynthesisMode::kSingleClass;
  // false: the background reuses the foreground's transform.
  bool independent_background = true;
  OverlapOrder overlap = OverlapOrder::kLowerOnTop;
  std::uint64_t seed = 0;

  void validate() const;
  // Degenerate ranges, no flips, no jitter.
  static SynthesisConfig identity();
};

void to_json(nlohmann::json& j, const SynthesisConfig& c);
void from_json(const nlohmann::json& j, SynthesisConfig& c);
std::string to_string(SynthesisMode m);
SynthesisMode parse_synthesis_mode(const std::string& s);

// Draw order: blur, gain, bias, scale, flip_h, flip_v, rotation.
TransformSpec sample_transform(const SynthesisConfig& config, Rng& rng);

// Flips about the image centre, then rotation and scaling about `pivot`
// ((row, col); image centre by default), then blur and gain/bias on the
// image only. Image resampling is bilinear, label resampling nearest.
LabeledSlice apply_transform(const LabeledSlice& slice, const TransformSpec& spec,
                             std::optional<std::pair<double, double>> pivot = std::nullopt);

// Pastes the transformed exemplar foreground, shifted by a uniform jitter,
// onto the transformed background.
LabeledSlice synthesize_single(const LabeledSlice& exemplar, const LabeledSlice& background,
                               const TransformSpec& spec_fg, const TransformSpec& spec_bg,
                               int position_jitter, Rng& rng);

// Per-class cutouts, each with its own transform (specs ordered by
// ascending class id of the classes present) and jitter.
LabeledSlice synthesize_multi(const LabeledSlice& exemplar, const LabeledSlice& background,
                              const std::vector<TransformSpec>& specs,
                              const TransformSpec& spec_bg, int position_jitter, Rng& rng,
                              OverlapOrder overlap = OverlapOrder::kLowerOnTop);

// Sample i uses Rng(derive_seed(config.seed, i)).
LabeledSlice synthesize_sample(const std::vector<LabeledSlice>& exemplars,
                               const std::vector<LabeledSlice>& backgrounds,
                               const SynthesisConfig& config, int index);
std::vector<LabeledSlice> synthesize_samples(const std::vector<LabeledSlice>& exemplars,
                                             const std::vector<LabeledSlice>& backgrounds,
                                             const SynthesisConfig& config);

// Writes config.num_samples slices plus manifest.json under out_dir.
DatasetManifest build_dataset(const std::vector<LabeledSlice>& exemplars,
                              const std::vector<LabeledSlice>& backgrounds,
                              const SynthesisConfig& config, int class_count,
                              const std::filesystem::path& out_dir);
DatasetManifest build_dataset(const ExemplarSet& exemplars,
                              const std::vector<LabeledSlice>& backgrounds,
                              const SynthesisConfig& config, int class_count,
                              const std::filesystem::path& out_dir);

// Slices whose labels are entirely background.
std::vector<LabeledSlice> collect_backgrounds(const DatasetManifest& manifest);

}  // namespace fewseg
