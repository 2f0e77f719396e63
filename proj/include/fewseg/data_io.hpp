#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "fewseg/types.hpp"

namespace fewseg {

// ---------------------------------------------------------------------------
// Intensity normalization
// ---------------------------------------------------------------------------

// (v - min) / (max - min) over the whole input; a constant input maps to zeros.
Image normalize_minmax(const Image& image);
Volume normalize_minmax(const Volume& volume);

// Clamp to [lo, hi], then min-max over the clamped values actually present.
Image normalize_clip_minmax(const Image& image, double lo, double hi);
Volume normalize_clip_minmax(const Volume& volume, double lo, double hi);

// Recipe identifiers stored in manifests.
inline constexpr const char* kRecipeMinMax = "minmax";
inline constexpr const char* kRecipeNone = "none";
// "clip_minmax:<lo>:<hi>", e.g. "clip_minmax:-125:275".
std::string clip_minmax_recipe(double lo, double hi);
Volume apply_recipe(const Volume& volume, const std::string& recipe);

// ---------------------------------------------------------------------------
// Manifests
// ---------------------------------------------------------------------------

struct SliceRecord {
  std::string path;  // relative to the manifest's directory
  std::string volume_id;
  int slice_index = 0;
  std::vector<std::int64_t> class_pixel_counts;  // classes 0..K
  Spacing spacing;

  std::int64_t foreground_pixels() const;
  bool has_foreground() const { return foreground_pixels() > 0; }
  int distinct_foreground_classes() const;
  bool operator==(const SliceRecord&) const = default;
};

struct DatasetManifest {
  int version = 1;
  int class_count = 1;
  std::string normalization = kRecipeMinMax;
  std::string split = "all";
  std::vector<SliceRecord> records;
  // Directory record paths resolve against. Not serialized; set by
  // load_manifest and save_manifest.
  std::filesystem::path root;

  bool operator==(const DatasetManifest& o) const {
    return version == o.version && class_count == o.class_count &&
           normalization == o.normalization && split == o.split && records == o.records;
  }
  std::vector<std::string> volume_ids() const;  // sorted, unique
};

DatasetManifest load_manifest(const std::filesystem::path& path);
void save_manifest(DatasetManifest& manifest, const std::filesystem::path& path);

// Checks that each record's file exists, parses, matches the class range and
// reproduces the stored per-class counts. Throws ValidationError naming the
// first offending record.
void validate_manifest(const DatasetManifest& manifest);

LabeledSlice load_slice(const DatasetManifest& manifest, const SliceRecord& record);
std::vector<LabeledSlice> load_all_slices(const DatasetManifest& manifest);

// Writes `slice` under manifest.root / relative_path and appends its record.
void append_slice(DatasetManifest& manifest, const LabeledSlice& slice,
                  const std::string& relative_path);

// Splits by volume: round(train_fraction * volumes) volumes (clamped to
// [1, volumes - 1]) go to train, the rest to test.
std::pair<DatasetManifest, DatasetManifest> split_dataset(const DatasetManifest& manifest,
                                                          double train_fraction,
                                                          std::uint64_t seed);

// ---------------------------------------------------------------------------
// Phantom datasets
// ---------------------------------------------------------------------------

enum class ShapeKind { kEllipse, kPolygon };

// One parametric foreground shape.
struct PhantomShape {
  int class_id = 1;
  ShapeKind kind = ShapeKind::kEllipse;
  double center_row = 0.0;
  double center_col = 0.0;
  double radius_row = 1.0;
  double radius_col = 1.0;
  double angle_rad = 0.0;
  std::vector<std::pair<double, double>> vertices;  // polygon, (row, col)

  bool contains(double row, double col) const;
};

struct PhantomConfig {
  int image_size = 64;
  int class_count = 1;
  int volumes = 10;
  int slices_per_volume = 12;
  // Fraction of slices (centered in each volume) that may contain foreground.
  double foreground_extent = 0.6;
  double min_radius = 4.0;
  double max_radius = 9.0;
  double noise_std = 0.04;
  // Style "mri" renders on a zero surround with min-max normalization;
  // "ct" renders in HU-like units normalized with clip_minmax(-125, 275).
  std::string style = "mri";
};

struct PhantomSlice {
  LabeledSlice slice;              // raw intensities (before normalization)
  std::vector<PhantomShape> shapes;
};

// Renders one volume's slices; labels are the rasterized shapes.
std::vector<PhantomSlice> render_phantom_volume(const PhantomConfig& config, int volume_index,
                                                std::uint64_t seed);

// Renders, normalizes and writes a phantom dataset to out_dir/manifest.json.
DatasetManifest generate_phantom_dataset(const PhantomConfig& config, std::uint64_t seed,
                                         const std::filesystem::path& out_dir);

void validate_phantom_config(const PhantomConfig& config);

// ---------------------------------------------------------------------------
// Resampling helpers used when slice size differs from the model input.
// ---------------------------------------------------------------------------

Image resize_bilinear(const Image& image, int rows, int cols);
LabelMap resize_nearest(const LabelMap& label, int rows, int cols);
Mask resize_nearest(const Mask& mask, int rows, int cols);

}  // namespace fewseg
