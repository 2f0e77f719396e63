#include "fewseg/types.hpp"

#include <string>

#include "fewseg/errors.hpp"

namespace fewseg {

void check_slice(const LabeledSlice& slice, int class_count) {
  if (slice.image.rows() != slice.label.rows() || slice.image.cols() != slice.label.cols()) {
    throw InvalidInputError("image and label shapes differ");
  }
  if (slice.label.size() == 0) throw InvalidInputError("empty slice");
  const auto lo = slice.label.minCoeff();
  const auto hi = slice.label.maxCoeff();
  if (lo < 0 || hi > class_count) {
    throw InvalidInputError("label value out of range [0, " + std::to_string(class_count) + "]");
  }
}

Mask class_mask(const LabelMap& label, int class_id) {
  return (label.array() == class_id).cast<std::uint8_t>().matrix();
}

Mask foreground_mask(const LabelMap& label) {
  return (label.array() > 0).cast<std::uint8_t>().matrix();
}

std::int64_t count_pixels(const Mask& mask) {
  return mask.cast<std::int64_t>().sum();
}

std::vector<std::int64_t> class_pixel_counts(const LabelMap& label, int class_count) {
  std::vector<std::int64_t> counts(static_cast<std::size_t>(class_count) + 1, 0);
  for (Eigen::Index i = 0; i < label.size(); ++i) {
    const auto v = label.data()[i];
    if (v < 0 || v > class_count) {
      throw InvalidInputError("label value " + std::to_string(v) + " out of range");
    }
    ++counts[static_cast<std::size_t>(v)];
  }
  return counts;
}

}  // namespace fewseg
