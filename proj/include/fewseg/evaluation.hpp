#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "fewseg/rng.hpp"
#include "fewseg/types.hpp"

namespace fewseg {

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

// 2|P∩G| / (|P|+|G|); two empty masks score 1.
double dsc(const Mask& pred, const Mask& gt);

// Pixels of the mask with at least one 4-neighbour outside the mask; pixels
// beyond the frame count as outside.
Mask boundary(const Mask& mask);

// Squared Euclidean distance (in mm²) from every pixel to the nearest
// feature pixel, by separable lower-envelope passes. Pixels get +inf when the
// feature set is empty.
Eigen::MatrixXd squared_distance_transform(const Mask& features, Spacing spacing = {});

// Percentile with linear interpolation between closest ranks (q in [0, 100]).
double percentile(std::vector<double> values, double q);

// 95th percentile of the pooled bidirectional boundary-to-boundary nearest
// distances, in mm. Both empty: 0. Exactly one empty: NaN (undefined).
double hd95(const Mask& pred, const Mask& gt, Spacing spacing = {});

// ---------------------------------------------------------------------------
// Test-time prompts
// ---------------------------------------------------------------------------

// The mask pixel furthest from background (outside the frame counts as
// background); ties go to the lowest (row, col). Empty mask: nullopt.
std::optional<Pixel> interior_point(const Mask& mask);

// Uniform draw over mask pixels. Empty mask: nullopt.
std::optional<Pixel> random_point(const Mask& mask, Rng& rng);

enum class PromptStrategy { kInterior, kRandom };
std::string to_string(PromptStrategy s);
PromptStrategy parse_prompt_strategy(const std::string& s);

enum class Aggregation { kPerSlice, kPerVolume };
std::string to_string(Aggregation a);
Aggregation parse_aggregation(const std::string& s);
// Per-volume for multi-class data, per-slice for single-class data.
Aggregation default_aggregation(int class_count);

// ---------------------------------------------------------------------------
// Evaluation loop
// ---------------------------------------------------------------------------

using MaskPredictor = std::function<Mask(const LabeledSlice&, const PointPrompt&)>;

struct ClassMetrics {
  std::string name;
  bool present = false;     // class occurs in the test ground truth
  double dsc = 0.0;
  double hd95 = 0.0;        // NaN when no defined HD95 sample exists
  int samples = 0;          // (slice, class) evaluations
  int hd95_undefined = 0;   // samples whose HD95 was undefined
};

struct MetricsReport {
  std::string method = "model";
  std::string exemplars = "-";
  PromptStrategy prompt = PromptStrategy::kInterior;
  Aggregation aggregation = Aggregation::kPerSlice;
  std::uint64_t seed = 0;
  std::string config_hash = "-";
  std::vector<ClassMetrics> classes;  // classes 1..K
  double mean_dsc = 0.0;
  double mean_hd95 = 0.0;
  int hd95_undefined = 0;             // total undefined samples excluded
  int absent_classes = 0;
};

MetricsReport evaluate(const MaskPredictor& predict, const std::vector<LabeledSlice>& test,
                       int class_count, PromptStrategy strategy, std::uint64_t seed,
                       std::optional<Aggregation> aggregation = std::nullopt,
                       const std::vector<std::string>& class_names = {});

// Test prompt for one ground-truth class mask.
std::optional<PointPrompt> make_prompt(const Mask& gt, int class_id, PromptStrategy strategy,
                                       Rng& rng);

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

// CSV columns: method, exemplars, prompt, aggregation, seed, config_hash,
// mean_dsc, mean_hd95, hd95_undefined, then dsc_<class> and hd95_<class> for
// each class. Values use 17 significant digits; undefined values are "nan".
std::string report_csv(const std::vector<MetricsReport>& reports);
std::string report_text(const std::vector<MetricsReport>& reports);
std::vector<MetricsReport> parse_report_csv(const std::string& csv);

// Writes report.csv and report.txt into out_dir.
void write_report(const std::vector<MetricsReport>& reports, const std::filesystem::path& out_dir);

// Grayscale slice with ground-truth contour in green and prediction contour
// in red, as binary PPM.
void write_overlay_ppm(const Image& image, const Mask& gt, const Mask& pred,
                       const std::filesystem::path& path);

}  // namespace fewseg
