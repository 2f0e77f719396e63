#pragma once

// Portable little-endian array files.
//
// Array block:
//   offset 0   char[4]  magic "FSGA"
//   offset 4   u32      dtype code (1 = float64, 2 = int32, 3 = uint8)
//   offset 8   u32      rows
//   offset 12  u32      cols
//   offset 16  rows*cols elements, row-major, little-endian
//
// Slice file (*.slc): char[4] "FSGS", u32 version (1), an image block
// (float64) and a label block (int32), both the same shape.
//
// Named archive (*.fsa): char[4] "FSGN", u32 version (1), u32 entry count,
// then per entry: u32 name length, name bytes (UTF-8), one float64 block.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

#include "fewseg/types.hpp"

namespace fewseg {

enum class DType : std::uint32_t { kFloat64 = 1, kInt32 = 2, kUInt8 = 3 };

using RealMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

void write_array(std::ostream& out, const RealMatrix& m);
void write_array(std::ostream& out, const LabelMap& m);
RealMatrix read_real_array(std::istream& in);
LabelMap read_label_array(std::istream& in);

void write_slice_file(const std::filesystem::path& path, const Image& image, const LabelMap& label);
std::pair<Image, LabelMap> read_slice_file(const std::filesystem::path& path);

using NamedArrays = std::vector<std::pair<std::string, RealMatrix>>;
void write_named_arrays(const std::filesystem::path& path, const NamedArrays& arrays);
NamedArrays read_named_arrays(const std::filesystem::path& path);

// 64-bit FNV-1a digest of a file's bytes.
std::uint64_t file_digest(const std::filesystem::path& path);

}  // namespace fewseg
