#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <string>
#include <vector>

namespace fewseg {

using Image = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using LabelMap = Eigen::Matrix<std::int32_t, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Mask = Eigen::Matrix<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Volume = std::vector<Image>;

struct Spacing {
  double row_mm = 1.0;
  double col_mm = 1.0;
  bool operator==(const Spacing&) const = default;
};

struct SliceMeta {
  std::string volume_id;
  int slice_index = 0;
  Spacing spacing;
  bool operator==(const SliceMeta&) const = default;
};

// A 2-D image with its integer class map. All processing stages operate on
// this unit.
struct LabeledSlice {
  Image image;
  LabelMap label;
  SliceMeta meta;

  int rows() const { return static_cast<int>(image.rows()); }
  int cols() const { return static_cast<int>(image.cols()); }
  bool operator==(const LabeledSlice& o) const {
    return image.rows() == o.image.rows() && image.cols() == o.image.cols() &&
           label.rows() == o.label.rows() && label.cols() == o.label.cols() &&
           image == o.image && label == o.label && meta == o.meta;
  }
};

struct Pixel {
  int row = 0;
  int col = 0;
  bool operator==(const Pixel&) const = default;
  auto operator<=>(const Pixel&) const = default;
};

// A positive point prompt. class_id records which class the point was drawn
// from; the model itself never sees it.
struct PointPrompt {
  int row = 0;
  int col = 0;
  int class_id = 1;
  bool operator==(const PointPrompt&) const = default;
};

// Checks the LabeledSlice shape and label-range invariants; throws
// InvalidInputError on violation.
void check_slice(const LabeledSlice& slice, int class_count);

// Binary mask of label == class_id.
Mask class_mask(const LabelMap& label, int class_id);

// Binary mask of label > 0.
Mask foreground_mask(const LabelMap& label);

std::int64_t count_pixels(const Mask& mask);

// Per-class pixel counts for classes 0..class_count.
std::vector<std::int64_t> class_pixel_counts(const LabelMap& label, int class_count);

}  // namespace fewseg
